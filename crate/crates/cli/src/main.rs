//! Command-line surface for the gaec compression toolkit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gaec::container::{self, Archive, ArchiveError, CompressConfig, ExternalSource};
use gaec::entropy::EntropyError;
use gaec::grid::{self, Field, GridError, PadPolicy, PartitionSpec, Shape};
use gaec::guarantee::GuaranteeError;
use gaec::metrics::{self, DetectionSet, RateOutcome};
use gaec::predictor::{LatentSet, PredictorError, PredictorKind};
use gaec::roi::{self, Connectivity, HeatmapParams, ProbabilityMap, RoiError, RoiMask};
use gaec::synth::{self, SynthParams};

#[derive(Parser)]
#[command(
    name = "gaec",
    version,
    about = "Error-bounded, region-adaptive lossy compression for gridded spatiotemporal fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress one or more field files into .gaec archives
    Compress(CompressArgs),
    /// Decode an archive back into a field file
    Decompress(DecompressArgs),
    /// Compare original and reconstructed data and detection outputs
    Eval(EvalArgs),
    /// Build an ROI mask from event points or a probability map
    Mask(MaskArgs),
    /// Generate a deterministic synthetic field + ground-truth corpus
    Synth(SynthArgs),
    /// Dump the section table and metadata of an archive
    Inspect(InspectArgs),
}

#[derive(Args)]
struct CompressArgs {
    /// Input field raster(s); each needs a `<file>.hdr` sidecar
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output archive path (single input only) [default: <input>.gaec]
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Directory for archives when compressing several variables
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Manifest JSON path for multi-variable runs
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// ROI mask file (packed bitset with .hdr sidecar)
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Probability-map raster (field format); thresholded at --accept
    #[arg(long)]
    prob_map: Option<PathBuf>,
    /// Acceptance threshold applied to --prob-map [default: 0.5]
    #[arg(long)]
    accept: Option<f64>,
    /// Error bound for ROI patches
    #[arg(long)]
    tau_roi: Option<f64>,
    /// Error bound for buffer patches [default: --tau-roi]
    #[arg(long)]
    tau_buf: Option<f64>,
    /// Error bound for background patches [default: --tau-roi]
    #[arg(long)]
    tau_bg: Option<f64>,
    /// One bound for every patch (shorthand for equal class bounds)
    #[arg(long, conflicts_with_all = ["tau_roi", "tau_buf", "tau_bg"])]
    uniform_tau: Option<f64>,
    /// Fraction of set cells that makes a patch ROI [default: 0.05]
    #[arg(long)]
    roi_fraction: Option<f64>,
    /// Buffer-ring connectivity in the patch grid: 4 or 8 [default: 8]
    #[arg(long)]
    connectivity: Option<u8>,
    /// Buffer ring depth in patches [default: 1]
    #[arg(long)]
    buffer_depth: Option<usize>,
    /// Patch extents TxHxW [default: 8x16x16]
    #[arg(long)]
    patch: Option<String>,
    /// Boundary padding: edge, reflect, zero, or none [default: edge]
    #[arg(long)]
    pad: Option<String>,
    /// Predictor: zero, mean, down:FTxFHxFW, external:<id> [default: down:2x2x2]
    #[arg(long)]
    predictor: Option<String>,
    /// Reconstruction field for external predictors
    #[arg(long)]
    recon: Option<PathBuf>,
    /// Latent vectors for external predictors
    #[arg(long)]
    latents: Option<PathBuf>,
    /// Coefficient quantizer bin width [default: tau-roi / 4]
    #[arg(long)]
    coeff_bin: Option<f64>,
    /// Predictor payload bin width [default: --coeff-bin]
    #[arg(long)]
    payload_bin: Option<f64>,
    /// Latent bin width [default: --coeff-bin]
    #[arg(long)]
    latent_bin: Option<f64>,
    /// Store only the leading K basis columns
    #[arg(long)]
    k_store: Option<usize>,
    /// Fail instead of storing raw patches that cannot meet their bound
    #[arg(long)]
    no_fallback: bool,
    /// Reuse the trained basis of an existing archive
    #[arg(long)]
    basis_from: Option<PathBuf>,
    /// Worker threads (flag > GAEC_WORKERS env > all cores)
    #[arg(long)]
    workers: Option<usize>,
    /// key = value file supplying defaults for any long flag above
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write a machine-readable run summary here
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Skip the decode-and-verify pass after writing each archive
    #[arg(long)]
    no_verify: bool,
    /// Print the resolved configuration and each value's source
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct DecompressArgs {
    archive: PathBuf,
    /// Output field raster path
    #[arg(short, long)]
    output: PathBuf,
    /// Reconstruction field for archives with an external predictor
    #[arg(long)]
    recon: Option<PathBuf>,
    /// Worker threads (flag > GAEC_WORKERS env > all cores)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Original field raster
    #[arg(long)]
    original: PathBuf,
    /// Reconstructed field raster
    #[arg(long)]
    reconstructed: PathBuf,
    /// Ground-truth event points (frame,u,v CSV)
    #[arg(long)]
    truth_tc: Option<PathBuf>,
    /// Event points detected on the reconstructed data
    #[arg(long)]
    test_tc: Option<PathBuf>,
    /// Ground-truth areal mask
    #[arg(long)]
    truth_ar: Option<PathBuf>,
    /// Areal mask detected on the reconstructed data
    #[arg(long)]
    test_ar: Option<PathBuf>,
    /// Predicted ROI mask, for false-negative ratios
    #[arg(long)]
    pred_mask: Option<PathBuf>,
    /// Match radius in grid cells for nodal events
    #[arg(long, default_value_t = 2.0)]
    radius: f64,
    /// Metrics CSV output path
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MaskArgs {
    /// Lattice extents TxHxW
    #[arg(long)]
    shape: String,
    /// Event points CSV to rasterize into Gaussian heatmaps
    #[arg(long)]
    points: Option<PathBuf>,
    /// Heatmap peak amplitude
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Heatmap standard deviation in grid cells
    #[arg(long, default_value_t = 3.0)]
    sigma: f64,
    /// Existing probability-map raster to threshold instead
    #[arg(long, conflicts_with = "points")]
    prob_map: Option<PathBuf>,
    /// Acceptance threshold
    #[arg(long, default_value_t = 0.5)]
    accept: f64,
    /// Output mask path
    #[arg(short, long)]
    output: PathBuf,
    /// Also write the heatmap raster here
    #[arg(long)]
    prob_out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Lattice extents TxHxW
    #[arg(long, default_value = "8x64x64")]
    shape: String,
    /// Target ROI coverage fraction
    #[arg(long, default_value_t = 0.10)]
    coverage: f64,
    /// Number of vortex tracks
    #[arg(long, default_value_t = 3)]
    vortices: usize,
    /// Amplitude of the per-cell background texture
    #[arg(long, default_value_t = 0.08)]
    noise: f64,
    /// Output directory
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    archive: PathBuf,
    /// Also list one line per patch record
    #[arg(long)]
    patches: bool,
}

// ----------------------------------------------------------------- errors

enum CliError {
    Config(String),
    Io(String),
    Integrity(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Integrity(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Integrity(m) => m,
        }
    }
}

impl From<ArchiveError> for CliError {
    fn from(e: ArchiveError) -> Self {
        match &e {
            ArchiveError::Io(_) => CliError::Io(e.to_string()),
            ArchiveError::Config(_)
            | ArchiveError::MissingReconstruction(_)
            | ArchiveError::BoundUnsatisfiable { .. } => CliError::Config(e.to_string()),
            ArchiveError::Grid(GridError::Io(_)) => CliError::Io(e.to_string()),
            ArchiveError::Grid(_) => CliError::Config(e.to_string()),
            ArchiveError::Predictor(PredictorError::Io(_)) => CliError::Io(e.to_string()),
            ArchiveError::Predictor(PredictorError::ChecksumMismatch { .. }) => {
                CliError::Integrity(e.to_string())
            }
            ArchiveError::Predictor(_) => CliError::Config(e.to_string()),
            _ => CliError::Integrity(e.to_string()),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<RoiError> for CliError {
    fn from(e: RoiError) -> Self {
        match e {
            RoiError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PredictorError> for CliError {
    fn from(e: PredictorError) -> Self {
        match e {
            PredictorError::Io(_) => CliError::Io(e.to_string()),
            PredictorError::ChecksumMismatch { .. } => CliError::Integrity(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<GuaranteeError> for CliError {
    fn from(e: GuaranteeError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<EntropyError> for CliError {
    fn from(e: EntropyError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<gaec::metrics::MetricsError> for CliError {
    fn from(e: gaec::metrics::MetricsError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<gaec::synth::SynthError> for CliError {
    fn from(e: gaec::synth::SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compress(args) => cmd_compress(args),
        Command::Decompress(args) => cmd_decompress(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Mask(args) => cmd_mask(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

// ------------------------------------------------------------- parsing

fn parse_triple(text: &str, what: &str) -> Result<(usize, usize, usize), CliError> {
    let parts: Vec<&str> = text.split(['x', 'X', ',']).collect();
    if parts.len() != 3 {
        return Err(CliError::Config(format!(
            "{what} must look like TxHxW, got `{text}`"
        )));
    }
    let mut dims = [0usize; 3];
    for (slot, part) in dims.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|e| CliError::Config(format!("bad {what} `{text}`: {e}")))?;
    }
    Ok((dims[0], dims[1], dims[2]))
}

fn parse_pad(text: &str) -> Result<Option<PadPolicy>, CliError> {
    match text {
        "edge" => Ok(Some(PadPolicy::Edge)),
        "reflect" => Ok(Some(PadPolicy::Reflect)),
        "zero" => Ok(Some(PadPolicy::Zero)),
        "none" => Ok(None),
        other => Err(CliError::Config(format!(
            "pad must be edge, reflect, zero, or none, got `{other}`"
        ))),
    }
}

fn parse_predictor(text: &str) -> Result<PredictorKind, CliError> {
    if text == "zero" {
        return Ok(PredictorKind::Zero);
    }
    if text == "mean" {
        return Ok(PredictorKind::BlockMean);
    }
    if let Some(spec) = text.strip_prefix("down:") {
        let (ft, fh, fw) = parse_triple(spec, "downsample factors")?;
        return Ok(PredictorKind::Downsample { ft, fh, fw });
    }
    if let Some(id) = text.strip_prefix("external:") {
        if id.is_empty() {
            return Err(CliError::Config("external predictor needs an id".into()));
        }
        return Ok(PredictorKind::External {
            reference_id: id.to_string(),
        });
    }
    Err(CliError::Config(format!(
        "predictor must be zero, mean, down:FTxFHxFW, or external:<id>, got `{text}`"
    )))
}

/// Flat `key = value` config file; keys are the long flag names.
fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                lineno + 1
            ))
        })?;
        map.insert(
            key.trim().replace('_', "-"),
            value.trim().trim_matches('"').to_string(),
        );
    }
    Ok(map)
}

struct Resolved<T> {
    value: T,
    source: &'static str,
}

/// Precedence: flag > config file > built-in default, with a report of
/// where each value came from.
struct Resolver {
    file: BTreeMap<String, String>,
    report: Vec<(String, String, &'static str)>,
}

impl Resolver {
    fn new(file: BTreeMap<String, String>) -> Self {
        Resolver {
            file,
            report: Vec::new(),
        }
    }

    fn resolve<T: std::fmt::Display + Clone>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: Option<T>,
        parse: impl Fn(&str) -> Result<T, CliError>,
    ) -> Result<Option<Resolved<T>>, CliError> {
        let resolved = if let Some(v) = flag {
            Some(Resolved {
                value: v,
                source: "flag",
            })
        } else if let Some(raw) = self.file.get(key) {
            Some(Resolved {
                value: parse(raw)?,
                source: "config-file",
            })
        } else {
            default.map(|v| Resolved {
                value: v,
                source: "default",
            })
        };
        if let Some(r) = &resolved {
            self.report
                .push((key.to_string(), r.value.to_string(), r.source));
        }
        Ok(resolved)
    }
}

fn parse_f64(s: &str) -> Result<f64, CliError> {
    s.parse()
        .map_err(|e| CliError::Config(format!("bad number `{s}`: {e}")))
}

fn parse_usize(s: &str) -> Result<usize, CliError> {
    s.parse()
        .map_err(|e| CliError::Config(format!("bad integer `{s}`: {e}")))
}

fn parse_string(s: &str) -> Result<String, CliError> {
    Ok(s.to_string())
}

fn workers_from(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("GAEC_WORKERS") {
        Ok(v) => Ok(Some(v.parse().map_err(|e| {
            CliError::Config(format!("GAEC_WORKERS=`{v}`: {e}"))
        })?)),
        Err(_) => Ok(None),
    }
}

// ------------------------------------------------------------- compress

struct VariableSummary {
    name: String,
    input: PathBuf,
    archive_path: PathBuf,
    original_bytes: u64,
    archive_bytes: u64,
    basis_bytes: u64,
    class_counts: (usize, usize, usize),
    distinct_bounds: usize,
    fallbacks: usize,
    selected: usize,
    verified: Option<bool>,
}

fn cmd_compress(args: CompressArgs) -> Result<(), CliError> {
    let file_cfg = match &args.config {
        Some(path) => read_config_file(path)?,
        None => BTreeMap::new(),
    };
    let mut resolver = Resolver::new(file_cfg);

    let patch_text = resolver
        .resolve(
            "patch",
            args.patch.clone(),
            Some("8x16x16".to_string()),
            parse_string,
        )?
        .unwrap()
        .value;
    let (pt, ph, pw) = parse_triple(&patch_text, "patch")?;
    let pad_text = resolver
        .resolve("pad", args.pad.clone(), Some("edge".to_string()), parse_string)?
        .unwrap()
        .value;
    let pad = parse_pad(&pad_text)?;
    let spec = PartitionSpec {
        patch_t: pt,
        patch_h: ph,
        patch_w: pw,
        pad,
    };

    let predictor_text = resolver
        .resolve(
            "predictor",
            args.predictor.clone(),
            Some("down:2x2x2".to_string()),
            parse_string,
        )?
        .unwrap()
        .value;
    let predictor = parse_predictor(&predictor_text)?;

    let uniform_tau = resolver.resolve("uniform-tau", args.uniform_tau, None, parse_f64)?;
    let tau_roi_opt = resolver.resolve("tau-roi", args.tau_roi, None, parse_f64)?;
    let (tau_roi, tau_buf, tau_bg, differential) = match (&uniform_tau, &tau_roi_opt) {
        (Some(u), None) => (u.value, u.value, u.value, false),
        (None, Some(r)) => {
            let buf = resolver
                .resolve("tau-buf", args.tau_buf, Some(r.value), parse_f64)?
                .unwrap()
                .value;
            let bg = resolver
                .resolve("tau-bg", args.tau_bg, Some(r.value), parse_f64)?
                .unwrap()
                .value;
            (r.value, buf, bg, buf != r.value || bg != r.value)
        }
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "--uniform-tau conflicts with --tau-roi".into(),
            ))
        }
        (None, None) => {
            return Err(CliError::Config(
                "one of --uniform-tau or --tau-roi is required".into(),
            ))
        }
    };

    let coeff_bin = resolver
        .resolve("coeff-bin", args.coeff_bin, Some(tau_roi / 4.0), parse_f64)?
        .unwrap()
        .value;
    let payload_bin = resolver
        .resolve("payload-bin", args.payload_bin, Some(coeff_bin), parse_f64)?
        .unwrap()
        .value;
    let latent_bin = resolver
        .resolve("latent-bin", args.latent_bin, Some(coeff_bin), parse_f64)?
        .unwrap()
        .value;
    let roi_fraction = resolver
        .resolve("roi-fraction", args.roi_fraction, Some(0.05), parse_f64)?
        .unwrap()
        .value;
    let connectivity_raw = resolver
        .resolve("connectivity", args.connectivity, Some(8u8), |s| {
            s.parse()
                .map_err(|e| CliError::Config(format!("bad connectivity `{s}`: {e}")))
        })?
        .unwrap()
        .value;
    let connectivity = match connectivity_raw {
        4 => Connectivity::Four,
        8 => Connectivity::Eight,
        other => {
            return Err(CliError::Config(format!(
                "connectivity must be 4 or 8, got {other}"
            )))
        }
    };
    let buffer_depth = resolver
        .resolve("buffer-depth", args.buffer_depth, Some(1usize), parse_usize)?
        .unwrap()
        .value;
    let k_store = resolver
        .resolve("k-store", args.k_store, None, parse_usize)?
        .map(|r| r.value);
    let workers = workers_from(
        resolver
            .resolve("workers", args.workers, None, parse_usize)?
            .map(|r| r.value),
    )?;

    if args.print_config {
        println!("{:<14} {:<14} source", "key", "value");
        for (key, value, source) in &resolver.report {
            println!("{key:<14} {value:<14} {source}");
        }
    }

    if args.inputs.len() > 1 && args.output.is_some() {
        return Err(CliError::Config(
            "--output applies to a single input; use --output-dir for several".into(),
        ));
    }

    let mask = load_mask_choice(&args, differential)?;

    let basis = match &args.basis_from {
        Some(path) => Some(Archive::read_file(path)?.basis()?),
        None => None,
    };

    let distinct_bounds = {
        let mut taus = vec![tau_roi, tau_buf, tau_bg];
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        taus.len()
    };

    let mut summaries = Vec::new();
    for input in &args.inputs {
        let field = Field::read(input)?;
        let blocks = spec.blocks(field.shape());
        let class_map = match &mask {
            Some(mask) => roi::classify_patches(
                mask,
                field.shape(),
                &spec,
                roi_fraction,
                connectivity,
                buffer_depth,
                (tau_roi, tau_buf, tau_bg),
            )?,
            None => gaec::roi::PatchClassMap::uniform(blocks, tau_roi)?,
        };

        let external = match &predictor {
            PredictorKind::External { .. } => {
                let recon_path = args
                    .recon
                    .as_ref()
                    .ok_or_else(|| CliError::Config("external predictor needs --recon".into()))?;
                let reconstruction = Field::read(recon_path)?;
                let latents = match &args.latents {
                    Some(p) => Some(LatentSet::read(p)?),
                    None => None,
                };
                Some(ExternalSource {
                    reconstruction,
                    latents,
                })
            }
            _ => None,
        };

        let cfg = CompressConfig {
            spec,
            predictor: predictor.clone(),
            coeff_bin,
            payload_bin,
            latent_bin,
            k_store,
            allow_fallback: !args.no_fallback,
            basis: basis.clone(),
            workers,
        };

        let archive = container::compress(&field, &class_map, &cfg, external.as_ref())?;
        let archive_path = archive_output_path(&args, input)?;
        archive.write_file(&archive_path)?;

        let verified = if args.no_verify {
            None
        } else {
            let decoded =
                container::decompress(&archive, external.as_ref().map(|e| &e.reconstruction))?;
            Some(verify_bounds(&field, &decoded, &archive, &spec)?)
        };

        let patch_summaries = archive.patch_summaries()?;
        let fallbacks = patch_summaries.iter().filter(|p| p.fallback).count();
        let selected: usize = patch_summaries.iter().map(|p| p.selected).sum();
        let basis_bytes = archive
            .sections()
            .iter()
            .find(|s| &s.tag == b"BASI")
            .map(|s| s.len)
            .unwrap_or(0);
        summaries.push(VariableSummary {
            name: field.name().to_string(),
            input: input.clone(),
            archive_path,
            original_bytes: (field.shape().len() * 4) as u64,
            archive_bytes: archive.size() as u64,
            basis_bytes,
            class_counts: class_map.class_counts(),
            distinct_bounds,
            fallbacks,
            selected,
            verified,
        });
    }

    report_compress(&args, &summaries, (tau_roi, tau_buf, tau_bg))?;
    Ok(())
}

fn load_mask_choice(args: &CompressArgs, differential: bool) -> Result<Option<RoiMask>, CliError> {
    match (&args.mask, &args.prob_map) {
        (Some(_), Some(_)) => Err(CliError::Config("--mask conflicts with --prob-map".into())),
        (Some(path), None) => Ok(Some(RoiMask::read(path)?)),
        (None, Some(path)) => {
            let raster = Field::read(path)?;
            let accept = args.accept.unwrap_or(0.5);
            let shape = raster.shape();
            let mut frames = Vec::with_capacity(shape.t);
            for t in 0..shape.t {
                let start = t * shape.h * shape.w;
                let values: Vec<f64> = raster.samples()[start..start + shape.h * shape.w]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                let map = ProbabilityMap {
                    h: shape.h,
                    w: shape.w,
                    values,
                };
                frames.push(roi::threshold_map(&map, accept)?);
            }
            Ok(Some(RoiMask::from_frames(&frames, shape.h, shape.w)?))
        }
        (None, None) if differential => Err(CliError::Config(
            "differential bounds need --mask or --prob-map".into(),
        )),
        (None, None) => Ok(None),
    }
}

fn archive_output_path(args: &CompressArgs, input: &Path) -> Result<PathBuf, CliError> {
    if let Some(out) = &args.output {
        return Ok(out.clone());
    }
    let stem = input.file_stem().unwrap_or(input.as_os_str());
    let file = PathBuf::from(format!("{}.gaec", stem.to_string_lossy()));
    Ok(match &args.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            dir.join(file)
        }
        None => input.with_extension("gaec"),
    })
}

/// Re-partition both fields and check every patch against its recorded
/// bound.
fn verify_bounds(
    original: &Field,
    decoded: &Field,
    archive: &Archive,
    spec: &PartitionSpec,
) -> Result<bool, CliError> {
    let classes = container::archive_classes(archive)?;
    let orig = grid::partition(original, spec)?;
    let back = grid::partition(decoded, spec)?;
    for ((a, b), (_, tau)) in orig.iter().zip(&back).zip(&classes) {
        let b32: Vec<f32> = b.vector.iter().map(|&v| v as f32).collect();
        let err = gaec::guarantee::masked_l2(&a.vector, &b32, Some(&a.valid));
        if err > *tau {
            return Ok(false);
        }
    }
    Ok(true)
}

fn report_compress(
    args: &CompressArgs,
    summaries: &[VariableSummary],
    bounds: (f64, f64, f64),
) -> Result<(), CliError> {
    let mut entries = Vec::new();
    for s in summaries {
        let ratio = s.original_bytes as f64 / s.archive_bytes as f64;
        let ratio_without_basis =
            s.original_bytes as f64 / (s.archive_bytes - s.basis_bytes) as f64;
        println!(
            "{}: {} -> {} ({} -> {} bytes, ratio {:.2}, roi/buffer/background {}/{}/{}, fallbacks {})",
            s.name,
            s.input.display(),
            s.archive_path.display(),
            s.original_bytes,
            s.archive_bytes,
            ratio,
            s.class_counts.0,
            s.class_counts.1,
            s.class_counts.2,
            s.fallbacks,
        );
        if let Some(ok) = s.verified {
            println!(
                "{}: bounds {}",
                s.name,
                if ok { "verified" } else { "VIOLATED" }
            );
            if !ok {
                return Err(CliError::Integrity(format!(
                    "{}: decoded patch exceeded its recorded bound",
                    s.name
                )));
            }
        }
        entries.push(serde_json::json!({
            "name": s.name,
            "input": s.input.display().to_string(),
            "archive": s.archive_path.display().to_string(),
            "original_bytes": s.original_bytes,
            "archive_bytes": s.archive_bytes,
            "basis_bytes": s.basis_bytes,
            "compression_ratio": ratio,
            "compression_ratio_without_basis": ratio_without_basis,
            "classes": {
                "roi": s.class_counts.0,
                "buffer": s.class_counts.1,
                "non_roi": s.class_counts.2,
            },
            "distinct_bounds": s.distinct_bounds,
            "fallbacks": s.fallbacks,
            "selected_coefficients": s.selected,
            "bounds_verified": s.verified,
        }));
    }

    let total_orig: u64 = summaries.iter().map(|s| s.original_bytes).sum();
    let total_arch: u64 = summaries.iter().map(|s| s.archive_bytes).sum();
    let overall = total_orig as f64 / total_arch as f64;
    if summaries.len() > 1 {
        println!("overall ratio: {overall:.2}");
    }
    let manifest = serde_json::json!({
        "bounds": { "tau_roi": bounds.0, "tau_buf": bounds.1, "tau_bg": bounds.2 },
        "variables": entries,
        "total_original_bytes": total_orig,
        "total_archive_bytes": total_arch,
        "overall_compression_ratio": overall,
    });
    if let Some(path) = &args.summary {
        std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    }
    let manifest_path = match (&args.manifest, summaries.len()) {
        (Some(path), _) => Some(path.clone()),
        (None, n) if n > 1 => {
            let dir = args
                .output_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("."));
            Some(dir.join("manifest.json"))
        }
        _ => None,
    };
    if let Some(path) = manifest_path {
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        println!("manifest: {}", path.display());
    }
    Ok(())
}

// -------------------------------------------------------- other commands

fn cmd_decompress(args: DecompressArgs) -> Result<(), CliError> {
    let archive = Archive::read_file(&args.archive)?;
    let external = match &args.recon {
        Some(path) => Some(Field::read(path)?),
        None => None,
    };
    let workers = workers_from(args.workers)?;
    let field = container::decompress_with_workers(&archive, external.as_ref(), workers)?;
    field.write(&args.output)?;
    println!(
        "{}: {} ({}), fill {:?}",
        args.output.display(),
        field.shape(),
        field.name(),
        field.fill_value()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let original = Field::read(&args.original)?;
    let reconstructed = Field::read(&args.reconstructed)?;
    let mut rows: Vec<(String, String)> = Vec::new();

    let rel = metrics::relative_l2(&original, &reconstructed)?;
    rows.push(("relative_l2".into(), format!("{rel:.9e}")));

    if let (Some(truth), Some(test)) = (&args.truth_tc, &args.test_tc) {
        let truth = DetectionSet {
            tc: roi::read_points(truth)?,
            ar: None,
        };
        let test = DetectionSet {
            tc: roi::read_points(test)?,
            ar: None,
        };
        let report = metrics::tc_error_rate(&truth, &test, args.radius)?;
        rows.push((
            "tc_error_rate_percent".into(),
            rate_text(report.rate_percent),
        ));
        rows.push(("tc_truth_total".into(), report.total_truth.to_string()));
        rows.push(("tc_matched".into(), report.matched.to_string()));
        rows.push(("tc_extra_test".into(), report.extra_test.to_string()));
    }

    if let (Some(truth), Some(test)) = (&args.truth_ar, &args.test_ar) {
        let truth = RoiMask::read(truth)?;
        let test = RoiMask::read(test)?;
        let report = metrics::iou(&truth, &test)?;
        rows.push(("iou".into(), format!("{:.9}", report.iou)));
        rows.push(("iou_tp".into(), report.tp.to_string()));
        rows.push(("iou_fp".into(), report.fp.to_string()));
        rows.push(("iou_fn".into(), report.fn_.to_string()));
        if report.both_empty {
            rows.push(("iou_both_empty".into(), "true".into()));
        }
    }

    if let Some(pred) = &args.pred_mask {
        let pred = RoiMask::read(pred)?;
        if let Some(truth) = &args.truth_tc {
            let points = roi::read_points(truth)?;
            let r = metrics::fn_ratio_points(&points, &pred)?;
            rows.push(("fn_ratio_tc".into(), rate_text(r)));
        }
        if let Some(truth) = &args.truth_ar {
            let truth = RoiMask::read(truth)?;
            let r = metrics::fn_ratio_mask(&truth, &pred)?;
            rows.push(("fn_ratio_ar".into(), rate_text(r)));
        }
        rows.push((
            "pred_roi_ratio".into(),
            format!("{:.6}", roi::roi_ratio_cells(&pred)),
        ));
    }

    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (key, value) in &rows {
        println!("{key:width$}  {value}");
    }
    if let Some(path) = &args.output {
        let mut csv = String::from("metric,value\n");
        for (key, value) in &rows {
            csv.push_str(&format!("{key},{value}\n"));
        }
        std::fs::write(path, csv)?;
    }
    Ok(())
}

fn rate_text(rate: RateOutcome) -> String {
    match rate {
        RateOutcome::Rate(v) => format!("{v:.6}"),
        RateOutcome::NoEvents => "no_events".into(),
    }
}

fn cmd_mask(args: MaskArgs) -> Result<(), CliError> {
    let (t, h, w) = parse_triple(&args.shape, "shape")?;
    let shape = Shape::new(t, h, w);
    let mask = match (&args.points, &args.prob_map) {
        (Some(points_path), None) => {
            let params = HeatmapParams::new(args.amplitude, args.sigma)?;
            let points = roi::read_points(points_path)?;
            let mut frames = Vec::with_capacity(t);
            let mut rasters: Vec<f32> = Vec::with_capacity(shape.len());
            for frame in 0..t {
                let frame_points: Vec<(f64, f64)> = points
                    .iter()
                    .filter(|p| p.0 == frame)
                    .map(|p| (p.1, p.2))
                    .collect();
                let map = roi::gaussian_heatmap(&frame_points, &params, h, w)?;
                rasters.extend(map.values.iter().map(|&v| v as f32));
                frames.push(roi::threshold_map(&map, args.accept)?);
            }
            if let Some(prob_out) = &args.prob_out {
                Field::new("heatmap", shape, rasters, None)?.write(prob_out)?;
            }
            RoiMask::from_frames(&frames, h, w)?
        }
        (None, Some(raster_path)) => {
            let raster = Field::read(raster_path)?;
            if raster.shape() != shape {
                return Err(CliError::Config(format!(
                    "probability map is {}, --shape says {shape}",
                    raster.shape()
                )));
            }
            let mut frames = Vec::with_capacity(t);
            for frame in 0..t {
                let start = frame * h * w;
                let map = ProbabilityMap {
                    h,
                    w,
                    values: raster.samples()[start..start + h * w]
                        .iter()
                        .map(|&v| v as f64)
                        .collect(),
                };
                frames.push(roi::threshold_map(&map, args.accept)?);
            }
            RoiMask::from_frames(&frames, h, w)?
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        (None, None) => {
            return Err(CliError::Config(
                "one of --points or --prob-map is required".into(),
            ))
        }
    };
    mask.write(&args.output)?;
    println!(
        "{}: {} cells set ({:.3} coverage)",
        args.output.display(),
        mask.count_set(),
        roi::roi_ratio_cells(&mask)
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let (t, h, w) = parse_triple(&args.shape, "shape")?;
    let mut params = SynthParams::new(Shape::new(t, h, w));
    params.coverage = args.coverage;
    params.vortex_count = args.vortices;
    params.noise = args.noise;
    let out = synth::generate(args.seed, &params)?;
    std::fs::create_dir_all(&args.output)?;
    out.field.write(args.output.join("field.raw"))?;
    out.mask.write(args.output.join("truth.mask"))?;
    roi::write_points(&out.tc_points, args.output.join("tc.csv"))?;
    let info = serde_json::json!({
        "seed": args.seed,
        "shape": [t, h, w],
        "coverage_target": args.coverage,
        "coverage_achieved": out.coverage,
        "vortices": args.vortices,
        "noise": args.noise,
        "files": ["field.raw", "truth.mask", "tc.csv"],
    });
    std::fs::write(
        args.output.join("synth.json"),
        serde_json::to_string_pretty(&info)?,
    )?;
    println!(
        "{}: seed {} shape {}x{}x{} coverage {:.3}",
        args.output.display(),
        args.seed,
        t,
        h,
        w,
        out.coverage
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    let archive = Archive::read_file(&args.archive)?;
    let meta = archive.meta()?;
    println!("archive: {}", args.archive.display());
    println!("field: {} {}", meta.name, meta.shape);
    println!(
        "patch: {}x{}x{} pad {:?}",
        meta.spec.patch_t, meta.spec.patch_h, meta.spec.patch_w, meta.spec.pad
    );
    println!("predictor: {:?}", meta.predictor);
    println!(
        "bins: coeff {} payload {} latent {}",
        meta.coeff_bin, meta.payload_bin, meta.latent_bin
    );
    let bounds = container::archive_bounds(&archive)?;
    println!(
        "bounds: roi {} buffer {} background {}",
        bounds.0, bounds.1, bounds.2
    );
    println!("patches: {}", meta.patch_count);
    println!(
        "{:<6} {:>10} {:>12} {:>18}",
        "tag", "offset", "length", "checksum"
    );
    for s in archive.sections() {
        println!(
            "{:<6} {:>10} {:>12} {:>18}",
            s.tag_str(),
            s.offset,
            s.len,
            format!("{:016x}", s.checksum)
        );
    }
    if args.patches {
        let summaries = archive.patch_summaries()?;
        println!(
            "{:<8} {:<10} {:>12} {:>9} {:>11} {:>9}",
            "patch", "class", "tau", "kept", "prefix", "fallback"
        );
        for (i, p) in summaries.iter().enumerate() {
            println!(
                "{:<8} {:<10} {:>12.6e} {:>9} {:>11} {:>9}",
                i,
                format!("{:?}", p.class),
                p.tau,
                p.selected,
                p.prefix_len,
                p.fallback
            );
        }
    }
    Ok(())
}
