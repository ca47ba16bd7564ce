//! The `.gaec` archive format and the end-to-end compress/decompress
//! pipeline.
//!
//! An archive is a fixed header, a run of contiguous sections, and a
//! trailing section table. Every byte of the file belongs to exactly one of
//! those three regions, each guarded by a 64-bit checksum, so any single-bit
//! corruption or truncation surfaces as an explicit integrity error before
//! decoding starts.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   [0..48):  magic "GAEC1", version u8, reserved u16,
//!                    file_size u64, table_off u64, section_count u32,
//!                    reserved u32, table_checksum u64, header_checksum u64
//! sections [48..table_off), contiguous, in fixed tag order:
//!          META CLSM BASI PAYL PDIR IDXB COEF FBLB
//! table    [table_off..file_size): per section
//!          tag [u8;4], offset u64, len u64, checksum u64
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::bits::{BitReader, BitWriter, BitsError};
use crate::entropy::{
    self, EntropyError, HuffmanTable, QuantizedValue, Quantizer, Symbol,
};
use crate::grid::{self, Field, GridError, PadPolicy, PartitionSpec, PatchUnit, Shape};
use crate::guarantee::{
    apply_correction, correct_patch, train_basis, Correction, GuaranteeError, ResidualBasis,
};
use crate::predictor::{
    predict, regenerate, ExternalPatch, LatentSet, PredictorError, PredictorKind,
    PredictorPayload,
};
use crate::roi::{PatchClass, PatchClassMap};

pub const MAGIC: &[u8; 5] = b"GAEC1";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 48;
const TABLE_ENTRY_LEN: usize = 28;
const TAG_ORDER: [[u8; 4]; 8] = [
    *b"META", *b"CLSM", *b"BASI", *b"PAYL", *b"PDIR", *b"IDXB", *b"COEF", *b"FBLB",
];

/// FNV-1a over `bytes`; the archive's section checksum.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Checksum of a field's raster bytes, used to pin external references.
pub fn field_checksum(field: &Field) -> u64 {
    fnv64(&field.sample_bytes())
}

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("not a gaec archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    BadVersion(u8),
    #[error("archive truncated: need {need} bytes, have {have}")]
    Truncated { need: u64, have: u64 },
    #[error("header checksum mismatch")]
    HeaderChecksum,
    #[error("section table checksum mismatch")]
    TableChecksum,
    #[error("section {0} checksum mismatch")]
    SectionChecksum(String),
    #[error("section layout corrupt: {0}")]
    Layout(String),
    #[error("section {0} has trailing bytes")]
    TrailingBytes(String),
    #[error("malformed {section} section: {msg}")]
    Malformed { section: &'static str, msg: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("patch {patch} cannot meet its bound without fallback (error {err} > tau {tau})")]
    BoundUnsatisfiable { patch: usize, err: f64, tau: f64 },
    #[error("external reconstruction missing (archive references {0})")]
    MissingReconstruction(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Guarantee(#[from] GuaranteeError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Bits(#[from] BitsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------- encoding

#[derive(Default)]
struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

struct ByteReader<'a> {
    section: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(section: &'static str, buf: &'a [u8]) -> Self {
        ByteReader {
            section,
            buf,
            pos: 0,
        }
    }

    fn fail(&self, msg: impl Into<String>) -> ArchiveError {
        ArchiveError::Malformed {
            section: self.section,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ArchiveError> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "need {n} bytes at offset {}, section has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, ArchiveError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ArchiveError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, ArchiveError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, ArchiveError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ArchiveError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, ArchiveError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail("invalid utf-8"))
    }

    fn done(&self) -> Result<(), ArchiveError> {
        if self.remaining() != 0 {
            return Err(ArchiveError::TrailingBytes(self.section.to_string()));
        }
        Ok(())
    }
}

fn write_huffman_stream(
    values: &[QuantizedValue],
    out: &mut ByteWriter,
) -> Result<(), ArchiveError> {
    if values.is_empty() {
        out.u32(0);
        out.u64(0);
        return Ok(());
    }
    let freqs = entropy::count_values(values.iter().copied());
    let table = HuffmanTable::build(&freqs)?;
    out.u32(table.len() as u32);
    for &(symbol, len) in table.entries() {
        match symbol {
            Symbol::Bin(b) => {
                out.u8(0);
                out.i64(b);
            }
            Symbol::Escape => {
                out.u8(1);
                out.i64(0);
            }
        }
        out.u8(len);
    }
    let mut bits = BitWriter::new();
    entropy::encode_values(values, &table, &mut bits)?;
    let (bytes, bit_len) = bits.finish();
    out.u64(bit_len);
    out.bytes(&bytes);
    Ok(())
}

/// Reads the table and returns a bit reader positioned at the stream.
fn read_huffman_stream<'a>(
    r: &mut ByteReader<'a>,
) -> Result<(Option<HuffmanTable>, BitReader<'a>), ArchiveError> {
    let entry_count = r.u32()? as usize;
    if r.remaining() < entry_count * 10 {
        return Err(r.fail(format!("table claims {entry_count} entries")));
    }
    let table = if entry_count == 0 {
        None
    } else {
        let mut entries = Vec::with_capacity(entry_count);
        for _ in 0..entry_count {
            let kind = r.u8()?;
            let raw = r.i64()?;
            let len = r.u8()?;
            let symbol = match kind {
                0 => Symbol::Bin(raw),
                1 => Symbol::Escape,
                other => return Err(r.fail(format!("unknown symbol kind {other}"))),
            };
            entries.push((symbol, len));
        }
        Some(HuffmanTable::from_lengths(entries)?)
    };
    let bit_len = r.u64()?;
    let byte_len = bit_len.div_ceil(8) as usize;
    let bytes = r.take(byte_len)?;
    Ok((table, BitReader::new(bytes, bit_len)?))
}

// ------------------------------------------------------------ compression

/// Everything [`compress`] needs beyond the field and its class map.
#[derive(Clone, Debug)]
pub struct CompressConfig {
    pub spec: PartitionSpec,
    pub predictor: PredictorKind,
    /// Bin width for correction coefficients.
    pub coeff_bin: f64,
    /// Bin width for predictor payloads (means, coarse grids).
    pub payload_bin: f64,
    /// Bin width for external latent vectors.
    pub latent_bin: f64,
    /// Keep only the leading columns of the basis; `None` stores all.
    pub k_store: Option<usize>,
    /// When false, a patch that would need the raw fallback is an error.
    pub allow_fallback: bool,
    /// Reuse a previously trained basis instead of training on this field.
    pub basis: Option<ResidualBasis>,
    /// Worker thread count; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl CompressConfig {
    pub fn new(spec: PartitionSpec, predictor: PredictorKind, coeff_bin: f64) -> Self {
        CompressConfig {
            spec,
            predictor,
            coeff_bin,
            payload_bin: coeff_bin,
            latent_bin: coeff_bin,
            k_store: None,
            allow_fallback: true,
            basis: None,
            workers: None,
        }
    }
}

/// Externally supplied reconstruction (and optional latents) for
/// [`PredictorKind::External`].
#[derive(Clone, Debug)]
pub struct ExternalSource {
    pub reconstruction: Field,
    pub latents: Option<LatentSet>,
}

/// A verified, serialized archive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Archive {
    bytes: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SectionInfo {
    pub tag: [u8; 4],
    pub offset: u64,
    pub len: u64,
    pub checksum: u64,
}

impl SectionInfo {
    pub fn tag_str(&self) -> String {
        String::from_utf8_lossy(&self.tag).into_owned()
    }
}

/// Parsed copy of the archive metadata section.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveMeta {
    pub name: String,
    pub shape: Shape,
    pub spec: PartitionSpec,
    pub predictor: PredictorKind,
    pub recon_checksum: Option<u64>,
    pub latent_dim: usize,
    pub latent_checksum: Option<u64>,
    pub coeff_bin: f64,
    pub payload_bin: f64,
    pub latent_bin: f64,
    pub fill_value: Option<f32>,
    pub patch_count: usize,
}

/// Per-patch record view for summaries and inspection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSummary {
    pub class: PatchClass,
    pub tau: f64,
    pub selected: usize,
    pub prefix_len: u32,
    pub fallback: bool,
}

fn validate_config(
    field: &Field,
    class_map: &PatchClassMap,
    cfg: &CompressConfig,
    external: Option<&ExternalSource>,
) -> Result<(), ArchiveError> {
    cfg.spec.validate()?;
    cfg.predictor.validate(&cfg.spec)?;
    for (label, bin) in [
        ("coeff-bin", cfg.coeff_bin),
        ("payload-bin", cfg.payload_bin),
        ("latent-bin", cfg.latent_bin),
    ] {
        if !(bin.is_finite() && bin > 0.0) {
            return Err(ArchiveError::Config(format!(
                "{label} must be positive and finite, got {bin}"
            )));
        }
    }
    let blocks = cfg.spec.blocks(field.shape());
    if class_map.blocks != blocks {
        return Err(ArchiveError::Config(format!(
            "class map covers {:?} blocks but the field partitions into {:?}",
            class_map.blocks, blocks
        )));
    }
    let dim = cfg.spec.dim();
    if dim > u16::MAX as usize {
        return Err(ArchiveError::Config(format!(
            "patch dimension {dim} exceeds the archive index width ({})",
            u16::MAX
        )));
    }
    if let Some(k) = cfg.k_store {
        if k == 0 || k > dim {
            return Err(ArchiveError::Config(format!(
                "k-store must be in 1..={dim}, got {k}"
            )));
        }
        if k < dim && !cfg.allow_fallback {
            return Err(ArchiveError::Config(format!(
                "k-store {k} < {dim} cannot guarantee bounds with fallback disabled"
            )));
        }
    }
    if let Some(basis) = &cfg.basis {
        if basis.dim() != dim {
            return Err(ArchiveError::Config(format!(
                "reused basis has dimension {}, patches have {dim}",
                basis.dim()
            )));
        }
    }
    match (&cfg.predictor, external) {
        (PredictorKind::External { reference_id }, None) => {
            return Err(ArchiveError::MissingReconstruction(reference_id.clone()))
        }
        (PredictorKind::External { .. }, Some(src)) => {
            if src.reconstruction.shape() != field.shape() {
                return Err(ArchiveError::Config(format!(
                    "reconstruction shape {} does not match field {}",
                    src.reconstruction.shape(),
                    field.shape()
                )));
            }
            if let Some(latents) = &src.latents {
                let patches = cfg.spec.patch_count(field.shape());
                if latents.vectors.len() != patches {
                    return Err(ArchiveError::Config(format!(
                        "latent set has {} vectors for {patches} patches",
                        latents.vectors.len()
                    )));
                }
            }
        }
        _ => {}
    }
    Ok(())
}

/// Compress `field` so each patch meets the bound of its class.
///
/// Deterministic: identical field, class map, config, and external source
/// produce byte-identical archives, independent of worker count.
pub fn compress(
    field: &Field,
    class_map: &PatchClassMap,
    cfg: &CompressConfig,
    external: Option<&ExternalSource>,
) -> Result<Archive, ArchiveError> {
    validate_config(field, class_map, cfg, external)?;
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ArchiveError::Config(format!("thread pool: {e}")))?
            .install(|| compress_inner(field, class_map, cfg, external)),
        None => compress_inner(field, class_map, cfg, external),
    }
}

fn compress_inner(
    field: &Field,
    class_map: &PatchClassMap,
    cfg: &CompressConfig,
    external: Option<&ExternalSource>,
) -> Result<Archive, ArchiveError> {
    let spec = cfg.spec;
    let dim = spec.dim();
    let coeff_q = Quantizer::new(cfg.coeff_bin)?;
    let payload_q = Quantizer::new(cfg.payload_bin)?;
    let latent_q = Quantizer::new(cfg.latent_bin)?;

    let patches = grid::partition(field, &spec)?;
    let recon_patches = match (&cfg.predictor, external) {
        (PredictorKind::External { .. }, Some(src)) => {
            Some(grid::partition(&src.reconstruction, &spec)?)
        }
        _ => None,
    };

    let predictions: Vec<(Vec<f64>, PredictorPayload)> = patches
        .par_iter()
        .enumerate()
        .map(|(i, patch)| {
            let ext = recon_patches.as_ref().map(|rp| ExternalPatch {
                reconstruction: &rp[i].vector,
                latent: external
                    .and_then(|s| s.latents.as_ref())
                    .map(|l| l.vectors[i].as_slice()),
            });
            predict(
                &patch.vector,
                &cfg.predictor,
                &spec,
                &payload_q,
                &latent_q,
                ext.as_ref(),
            )
        })
        .collect::<Result<_, _>>()?;

    let basis = match &cfg.basis {
        Some(basis) => basis.clone(),
        None if patches.len() < 2 => {
            // too few samples to train on; the standard basis still codes
            // the residual exactly
            ResidualBasis::identity(dim)
        }
        None => {
            let residuals: Vec<Vec<f64>> = patches
                .par_iter()
                .zip(&predictions)
                .map(|(patch, (x_r, _))| {
                    patch
                        .vector
                        .iter()
                        .zip(x_r)
                        .map(|(a, b)| a - b)
                        .collect()
                })
                .collect();
            train_basis(&residuals, dim)?
        }
    };
    let basis = match cfg.k_store {
        Some(k) if k < basis.stored() => basis.truncate(k)?,
        _ => basis,
    };

    let corrections: Vec<Correction> = patches
        .par_iter()
        .enumerate()
        .map(|(i, patch)| {
            let class = class_map.classes[i];
            let tau = class_map.tau(class);
            let (_, corr) = correct_patch(
                &patch.vector,
                &predictions[i].0,
                &basis,
                tau,
                &coeff_q,
                Some(&patch.valid),
            )?;
            Ok::<_, ArchiveError>(corr)
        })
        .collect::<Result<_, _>>()?;

    if !cfg.allow_fallback {
        if let Some((i, corr)) = corrections
            .iter()
            .enumerate()
            .find(|(_, c)| c.fallback.is_some())
        {
            return Err(ArchiveError::BoundUnsatisfiable {
                patch: i,
                err: corr.achieved_error,
                tau: class_map.tau(class_map.classes[i]),
            });
        }
    }

    serialize(field, class_map, cfg, external, &basis, &predictions, &corrections)
}

fn serialize(
    field: &Field,
    class_map: &PatchClassMap,
    cfg: &CompressConfig,
    external: Option<&ExternalSource>,
    basis: &ResidualBasis,
    predictions: &[(Vec<f64>, PredictorPayload)],
    corrections: &[Correction],
) -> Result<Archive, ArchiveError> {
    let spec = cfg.spec;
    let shape = field.shape();

    // META
    let mut meta = ByteWriter::default();
    meta.str(field.name());
    meta.u64(shape.t as u64);
    meta.u64(shape.h as u64);
    meta.u64(shape.w as u64);
    let (pad_t, pad_h, pad_w) = spec.pad_amounts(shape);
    meta.u64(pad_t as u64);
    meta.u64(pad_h as u64);
    meta.u64(pad_w as u64);
    meta.u64(spec.patch_t as u64);
    meta.u64(spec.patch_h as u64);
    meta.u64(spec.patch_w as u64);
    meta.u8(match spec.pad {
        Some(PadPolicy::Edge) => 0,
        Some(PadPolicy::Reflect) => 1,
        Some(PadPolicy::Zero) => 2,
        None => 255,
    });
    match field.fill_value() {
        Some(f) => {
            meta.u8(1);
            meta.f32(f);
        }
        None => {
            meta.u8(0);
            meta.f32(0.0);
        }
    }
    match &cfg.predictor {
        PredictorKind::Zero => meta.u8(0),
        PredictorKind::BlockMean => meta.u8(1),
        PredictorKind::Downsample { ft, fh, fw } => {
            meta.u8(2);
            meta.u32(*ft as u32);
            meta.u32(*fh as u32);
            meta.u32(*fw as u32);
        }
        PredictorKind::External { reference_id } => {
            meta.u8(3);
            meta.str(reference_id);
            let src = external.expect("validated");
            meta.u64(field_checksum(&src.reconstruction));
            match &src.latents {
                Some(latents) => {
                    meta.u32(latents.dim as u32);
                    meta.u8(1);
                    meta.u64(latents.checksum());
                }
                None => {
                    meta.u32(0);
                    meta.u8(0);
                    meta.u64(0);
                }
            }
        }
    }
    meta.f64(cfg.coeff_bin);
    meta.f64(cfg.payload_bin);
    meta.f64(cfg.latent_bin);
    meta.u64(corrections.len() as u64);

    // CLSM: the bounds triple, then one class tag per patch. A patch's
    // bound is bounds[class], exactly.
    let mut clsm = ByteWriter::default();
    clsm.f64(class_map.tau_roi);
    clsm.f64(class_map.tau_buf);
    clsm.f64(class_map.tau_bg);
    for class in &class_map.classes {
        clsm.u8(class.tag());
    }

    // BASI
    let mut basi = ByteWriter::default();
    basi.u32(basis.dim() as u32);
    basi.u32(basis.stored() as u32);
    basi.u64(basis.trained_on());
    for &l in basis.eigenvalues() {
        basi.f64(l);
    }
    for v in basis.column_bits() {
        basi.f32(v);
    }

    // PAYL
    let mut payl = ByteWriter::default();
    let payload_values: Vec<QuantizedValue> = predictions
        .iter()
        .flat_map(|(_, p)| p.values().iter().copied())
        .collect();
    write_huffman_stream(&payload_values, &mut payl)?;

    // PDIR + IDXB + COEF + FBLB
    let mut pdir = ByteWriter::default();
    let mut index_bits = BitWriter::new();
    let mut coeff_values: Vec<QuantizedValue> = Vec::new();
    let mut fblb = ByteWriter::default();
    let fallback_count = corrections.iter().filter(|c| c.fallback.is_some()).count();
    fblb.u64(fallback_count as u64);
    for corr in corrections {
        if let Some(samples) = &corr.fallback {
            pdir.u8(2);
            pdir.u16(0);
            for &s in samples {
                fblb.f32(s);
            }
        } else if corr.entries.is_empty() {
            pdir.u8(0);
            pdir.u16(0);
        } else {
            let indices: Vec<u32> = corr.entries.iter().map(|e| e.0).collect();
            let code = entropy::index_encode(&indices, basis.stored() as u32)?;
            pdir.u8(1);
            pdir.u16(code.prefix_len as u16);
            entropy::write_index_bits(&code, &mut index_bits);
            coeff_values.extend(corr.entries.iter().map(|e| e.1));
        }
    }
    let mut idxb = ByteWriter::default();
    let (idx_bytes, idx_bit_len) = index_bits.finish();
    idxb.u64(idx_bit_len);
    idxb.bytes(&idx_bytes);

    let mut coef = ByteWriter::default();
    write_huffman_stream(&coeff_values, &mut coef)?;

    let sections: Vec<([u8; 4], Vec<u8>)> = vec![
        (*b"META", meta.buf),
        (*b"CLSM", clsm.buf),
        (*b"BASI", basi.buf),
        (*b"PAYL", payl.buf),
        (*b"PDIR", pdir.buf),
        (*b"IDXB", idxb.buf),
        (*b"COEF", coef.buf),
        (*b"FBLB", fblb.buf),
    ];
    Ok(assemble(&sections))
}

fn assemble(sections: &[([u8; 4], Vec<u8>)]) -> Archive {
    let body_len: usize = sections.iter().map(|(_, b)| b.len()).sum();
    let table_off = HEADER_LEN + body_len;
    let file_size = table_off + sections.len() * TABLE_ENTRY_LEN;

    let mut table = Vec::with_capacity(sections.len() * TABLE_ENTRY_LEN);
    let mut offset = HEADER_LEN as u64;
    for (tag, bytes) in sections {
        table.extend_from_slice(tag);
        table.extend_from_slice(&offset.to_le_bytes());
        table.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        table.extend_from_slice(&fnv64(bytes).to_le_bytes());
        offset += bytes.len() as u64;
    }

    let mut out = Vec::with_capacity(file_size);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(file_size as u64).to_le_bytes());
    out.extend_from_slice(&(table_off as u64).to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&fnv64(&table).to_le_bytes());
    let header_ck = fnv64(&out);
    out.extend_from_slice(&header_ck.to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_LEN);
    for (_, bytes) in sections {
        out.extend_from_slice(bytes);
    }
    out.extend_from_slice(&table);
    debug_assert_eq!(out.len(), file_size);
    Archive { bytes: out }
}

// -------------------------------------------------------------- decoding

impl Archive {
    /// Parse and fully verify serialized bytes: header, table, section
    /// tiling, and every section checksum.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ArchiveError> {
        verify(&bytes)?;
        Ok(Archive { bytes })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn size(&self) -> usize {
        self.bytes.len()
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        Self::from_bytes(fs::read(path)?)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
        Ok(fs::write(path, &self.bytes)?)
    }

    pub fn sections(&self) -> Vec<SectionInfo> {
        // verified at construction; re-parse cannot fail
        parse_table(&self.bytes).expect("verified archive")
    }

    fn section(&self, tag: &[u8; 4]) -> &[u8] {
        let info = self
            .sections()
            .into_iter()
            .find(|s| &s.tag == tag)
            .expect("verified archive has all sections");
        &self.bytes[info.offset as usize..(info.offset + info.len) as usize]
    }

    pub fn meta(&self) -> Result<ArchiveMeta, ArchiveError> {
        parse_meta(self.section(b"META"))
    }

    pub fn basis(&self) -> Result<ResidualBasis, ArchiveError> {
        parse_basis(self.section(b"BASI"))
    }

    /// Class, bound, and correction shape of every patch.
    pub fn patch_summaries(&self) -> Result<Vec<PatchSummary>, ArchiveError> {
        let meta = self.meta()?;
        let classes = parse_clsm(self.section(b"CLSM"), meta.patch_count)?;
        let dir = parse_pdir(self.section(b"PDIR"), meta.patch_count)?;
        let basis_dim = {
            let mut r = ByteReader::new("BASI", self.section(b"BASI"));
            let _dim = r.u32()?;
            r.u32()? // stored
        };
        let mut idxb = ByteReader::new("IDXB", self.section(b"IDXB"));
        let idx_bit_len = idxb.u64()?;
        let mut idx_reader = BitReader::new(idxb.take(idx_bit_len.div_ceil(8) as usize)?, idx_bit_len)?;
        let mut out = Vec::with_capacity(meta.patch_count);
        for i in 0..meta.patch_count {
            let (flag, prefix_len) = dir[i];
            let selected = match flag {
                1 => {
                    let code = entropy::read_index_code(prefix_len, &mut idx_reader)?;
                    entropy::index_decode(&code, basis_dim)?.len()
                }
                _ => 0,
            };
            out.push(PatchSummary {
                class: classes[i].0,
                tau: classes[i].1,
                selected,
                prefix_len,
                fallback: flag == 2,
            });
        }
        Ok(out)
    }
}

fn parse_table(bytes: &[u8]) -> Result<Vec<SectionInfo>, ArchiveError> {
    let table_off = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let at = table_off + i * TABLE_ENTRY_LEN;
        let entry = &bytes[at..at + TABLE_ENTRY_LEN];
        out.push(SectionInfo {
            tag: entry[0..4].try_into().unwrap(),
            offset: u64::from_le_bytes(entry[4..12].try_into().unwrap()),
            len: u64::from_le_bytes(entry[12..20].try_into().unwrap()),
            checksum: u64::from_le_bytes(entry[20..28].try_into().unwrap()),
        });
    }
    Ok(out)
}

fn verify(bytes: &[u8]) -> Result<(), ArchiveError> {
    if bytes.len() < HEADER_LEN {
        return Err(ArchiveError::Truncated {
            need: HEADER_LEN as u64,
            have: bytes.len() as u64,
        });
    }
    if &bytes[0..5] != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    if bytes[5] != VERSION {
        return Err(ArchiveError::BadVersion(bytes[5]));
    }
    let header_ck = u64::from_le_bytes(bytes[40..48].try_into().unwrap());
    if fnv64(&bytes[0..40]) != header_ck {
        return Err(ArchiveError::HeaderChecksum);
    }
    let file_size = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if file_size != bytes.len() as u64 {
        return Err(ArchiveError::Truncated {
            need: file_size,
            have: bytes.len() as u64,
        });
    }
    let table_off = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as u64;
    let table_len = count * TABLE_ENTRY_LEN as u64;
    if table_off < HEADER_LEN as u64
        || table_off
            .checked_add(table_len)
            .map_or(true, |end| end != file_size)
    {
        return Err(ArchiveError::Layout(format!(
            "table at {table_off}+{table_len} does not close a {file_size}-byte file"
        )));
    }
    let table_bytes = &bytes[table_off as usize..(table_off + table_len) as usize];
    let table_ck = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
    if fnv64(table_bytes) != table_ck {
        return Err(ArchiveError::TableChecksum);
    }
    let sections = parse_table(bytes)?;
    if sections.len() != TAG_ORDER.len() {
        return Err(ArchiveError::Layout(format!(
            "expected {} sections, found {}",
            TAG_ORDER.len(),
            sections.len()
        )));
    }
    let mut expected_offset = HEADER_LEN as u64;
    for (info, expected_tag) in sections.iter().zip(TAG_ORDER.iter()) {
        if &info.tag != expected_tag {
            return Err(ArchiveError::Layout(format!(
                "section {} out of order (expected {})",
                info.tag_str(),
                String::from_utf8_lossy(expected_tag)
            )));
        }
        if info.offset != expected_offset {
            return Err(ArchiveError::Layout(format!(
                "section {} at offset {}, expected {}",
                info.tag_str(),
                info.offset,
                expected_offset
            )));
        }
        expected_offset = info
            .offset
            .checked_add(info.len)
            .ok_or_else(|| ArchiveError::Layout("section length overflow".into()))?;
        if expected_offset > table_off {
            return Err(ArchiveError::Layout(format!(
                "section {} overruns the table",
                info.tag_str()
            )));
        }
    }
    if expected_offset != table_off {
        return Err(ArchiveError::Layout(format!(
            "sections end at {expected_offset}, table starts at {table_off}"
        )));
    }
    for info in &sections {
        let body = &bytes[info.offset as usize..(info.offset + info.len) as usize];
        if fnv64(body) != info.checksum {
            return Err(ArchiveError::SectionChecksum(info.tag_str()));
        }
    }
    Ok(())
}

fn parse_meta(bytes: &[u8]) -> Result<ArchiveMeta, ArchiveError> {
    let mut r = ByteReader::new("META", bytes);
    let name = r.str()?;
    let shape = Shape::new(r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
    let pads = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
    let (pt, ph, pw) = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
    let pad = match r.u8()? {
        0 => Some(PadPolicy::Edge),
        1 => Some(PadPolicy::Reflect),
        2 => Some(PadPolicy::Zero),
        255 => None,
        other => return Err(r.fail(format!("unknown pad policy {other}"))),
    };
    let fill_flag = r.u8()?;
    let fill_raw = r.f32()?;
    let fill_value = match fill_flag {
        0 => None,
        1 => Some(fill_raw),
        other => return Err(r.fail(format!("bad fill flag {other}"))),
    };
    let mut recon_checksum = None;
    let mut latent_dim = 0usize;
    let mut latent_checksum = None;
    let predictor = match r.u8()? {
        0 => PredictorKind::Zero,
        1 => PredictorKind::BlockMean,
        2 => PredictorKind::Downsample {
            ft: r.u32()? as usize,
            fh: r.u32()? as usize,
            fw: r.u32()? as usize,
        },
        3 => {
            let reference_id = r.str()?;
            recon_checksum = Some(r.u64()?);
            latent_dim = r.u32()? as usize;
            let has_latents = r.u8()?;
            let ck = r.u64()?;
            if has_latents == 1 {
                latent_checksum = Some(ck);
            }
            PredictorKind::External { reference_id }
        }
        other => return Err(r.fail(format!("unknown predictor kind {other}"))),
    };
    let coeff_bin = r.f64()?;
    let payload_bin = r.f64()?;
    let latent_bin = r.f64()?;
    let patch_count = r.u64()? as usize;
    r.done()?;

    let spec = PartitionSpec {
        patch_t: pt,
        patch_h: ph,
        patch_w: pw,
        pad,
    };
    if shape.is_empty() || spec.validate().is_err() {
        return Err(ArchiveError::Malformed {
            section: "META",
            msg: format!("bad geometry: shape {shape}, patch {pt}x{ph}x{pw}"),
        });
    }
    if spec.pad_amounts(shape) != pads {
        return Err(ArchiveError::Malformed {
            section: "META",
            msg: "recorded pad amounts disagree with geometry".into(),
        });
    }
    if spec.patch_count(shape) != patch_count {
        return Err(ArchiveError::Malformed {
            section: "META",
            msg: "patch count disagrees with geometry".into(),
        });
    }
    Ok(ArchiveMeta {
        name,
        shape,
        spec,
        predictor,
        recon_checksum,
        latent_dim,
        latent_checksum,
        coeff_bin,
        payload_bin,
        latent_bin,
        fill_value,
        patch_count,
    })
}

fn parse_basis(bytes: &[u8]) -> Result<ResidualBasis, ArchiveError> {
    let mut r = ByteReader::new("BASI", bytes);
    let dim = r.u32()? as usize;
    let stored = r.u32()? as usize;
    let trained_on = r.u64()?;
    if dim == 0 || stored == 0 || stored > dim {
        return Err(r.fail(format!("bad basis extents {stored}/{dim}")));
    }
    if r.remaining() < dim * 8 + stored * dim * 4 {
        return Err(r.fail("basis data shorter than extents claim"));
    }
    let mut eigenvalues = Vec::with_capacity(dim);
    for _ in 0..dim {
        eigenvalues.push(r.f64()?);
    }
    let mut columns = Vec::with_capacity(stored * dim);
    for _ in 0..stored * dim {
        columns.push(r.f32()?);
    }
    r.done()?;
    Ok(ResidualBasis::from_parts(
        dim,
        stored,
        eigenvalues,
        &columns,
        trained_on,
    )?)
}

fn parse_clsm(bytes: &[u8], patch_count: usize) -> Result<Vec<(PatchClass, f64)>, ArchiveError> {
    let mut r = ByteReader::new("CLSM", bytes);
    let bounds = [r.f64()?, r.f64()?, r.f64()?];
    for tau in bounds {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(r.fail(format!("bad bound {tau}")));
        }
    }
    if r.remaining() != patch_count {
        return Err(r.fail(format!(
            "{} class tags for {patch_count} patches",
            r.remaining()
        )));
    }
    let mut out = Vec::with_capacity(patch_count);
    for _ in 0..patch_count {
        let class =
            PatchClass::from_tag(r.u8()?).ok_or_else(|| r.fail("unknown patch class"))?;
        out.push((class, bounds[class.tag() as usize]));
    }
    r.done()?;
    Ok(out)
}

/// Recorded bounds triple (tau_roi, tau_buf, tau_bg).
pub fn archive_bounds(archive: &Archive) -> Result<(f64, f64, f64), ArchiveError> {
    let mut r = ByteReader::new("CLSM", archive.section(b"CLSM"));
    Ok((r.f64()?, r.f64()?, r.f64()?))
}

/// Per-patch (class, tau) pairs in patch order.
pub fn archive_classes(archive: &Archive) -> Result<Vec<(PatchClass, f64)>, ArchiveError> {
    let meta = archive.meta()?;
    parse_clsm(archive.section(b"CLSM"), meta.patch_count)
}

fn parse_pdir(bytes: &[u8], patch_count: usize) -> Result<Vec<(u8, u32)>, ArchiveError> {
    let mut r = ByteReader::new("PDIR", bytes);
    if r.remaining() != patch_count * 3 {
        return Err(r.fail(format!(
            "{} bytes of directory for {patch_count} patches",
            r.remaining()
        )));
    }
    let mut out = Vec::with_capacity(patch_count);
    for _ in 0..patch_count {
        let flag = r.u8()?;
        if flag > 2 {
            return Err(r.fail(format!("unknown patch flag {flag}")));
        }
        let prefix_len = r.u16()? as u32;
        out.push((flag, prefix_len));
    }
    r.done()?;
    Ok(out)
}

/// Reconstruct the field from a verified archive.
///
/// `external` supplies the reconstruction referenced by external-predictor
/// archives; it is checksum-verified before use.
pub fn decompress(archive: &Archive, external: Option<&Field>) -> Result<Field, ArchiveError> {
    decompress_with_workers(archive, external, None)
}

/// [`decompress`] on an explicitly sized worker pool.
pub fn decompress_with_workers(
    archive: &Archive,
    external: Option<&Field>,
    workers: Option<usize>,
) -> Result<Field, ArchiveError> {
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ArchiveError::Config(format!("thread pool: {e}")))?
            .install(|| decompress_inner(archive, external)),
        None => decompress_inner(archive, external),
    }
}

fn decompress_inner(archive: &Archive, external: Option<&Field>) -> Result<Field, ArchiveError> {
    let meta = archive.meta()?;
    let spec = meta.spec;
    let dim = spec.dim();
    let basis = archive.basis()?;
    if basis.dim() != dim {
        return Err(ArchiveError::Malformed {
            section: "BASI",
            msg: format!("basis dimension {} for patches of {dim}", basis.dim()),
        });
    }
    let coeff_q = Quantizer::new(meta.coeff_bin)?;
    let payload_q = Quantizer::new(meta.payload_bin)?;

    let recon_patches = match &meta.predictor {
        PredictorKind::External { reference_id } => {
            let field = external
                .ok_or_else(|| ArchiveError::MissingReconstruction(reference_id.clone()))?;
            if field.shape() != meta.shape {
                return Err(ArchiveError::Config(format!(
                    "reconstruction shape {} does not match archive {}",
                    field.shape(),
                    meta.shape
                )));
            }
            let expected = meta.recon_checksum.expect("external meta");
            let got = field_checksum(field);
            if got != expected {
                return Err(PredictorError::ChecksumMismatch { expected, got }.into());
            }
            Some(grid::partition(field, &spec)?)
        }
        _ => None,
    };

    let classes = parse_clsm(archive.section(b"CLSM"), meta.patch_count)?;
    let dir = parse_pdir(archive.section(b"PDIR"), meta.patch_count)?;

    // payload stream
    let mut payl = ByteReader::new("PAYL", archive.section(b"PAYL"));
    let (payload_table, mut payload_bits) = read_huffman_stream(&mut payl)?;
    payl.done()?;
    let per_patch = meta.predictor.payload_len(&spec, meta.latent_dim);
    let mut payloads = Vec::with_capacity(meta.patch_count);
    for _ in 0..meta.patch_count {
        let values = if per_patch == 0 {
            Vec::new()
        } else {
            let table = payload_table.as_ref().ok_or(ArchiveError::Malformed {
                section: "PAYL",
                msg: "missing table for non-empty payload".into(),
            })?;
            entropy::decode_values(per_patch, table, &mut payload_bits)?
        };
        payloads.push(match meta.predictor {
            PredictorKind::Zero => PredictorPayload::Empty,
            PredictorKind::BlockMean => PredictorPayload::Mean(values[0]),
            PredictorKind::Downsample { .. } => PredictorPayload::CoarseGrid(values),
            PredictorKind::External { .. } => PredictorPayload::Latent(values),
        });
    }
    if payload_bits.remaining() >= 8 {
        return Err(ArchiveError::TrailingBytes("PAYL".into()));
    }

    // index bits
    let mut idxb = ByteReader::new("IDXB", archive.section(b"IDXB"));
    let idx_bit_len = idxb.u64()?;
    let idx_bytes = idxb.take(idx_bit_len.div_ceil(8) as usize)?;
    idxb.done()?;
    let mut idx_reader = BitReader::new(idx_bytes, idx_bit_len)?;

    // coefficient stream
    let mut coef = ByteReader::new("COEF", archive.section(b"COEF"));
    let (coef_table, mut coef_bits) = read_huffman_stream(&mut coef)?;
    coef.done()?;

    // fallback blobs
    let mut fblb = ByteReader::new("FBLB", archive.section(b"FBLB"));
    let fallback_count = fblb.u64()? as usize;
    if fblb.remaining() != fallback_count * dim * 4 {
        return Err(fblb.fail(format!(
            "{} fallback patches need {} bytes, section has {}",
            fallback_count,
            fallback_count * dim * 4,
            fblb.remaining()
        )));
    }

    // split the sequential streams into per-patch corrections
    let mut corrections = Vec::with_capacity(meta.patch_count);
    for &(flag, prefix_len) in &dir {
        let corr = match flag {
            0 => Correction::empty(0.0),
            1 => {
                let code = entropy::read_index_code(prefix_len, &mut idx_reader)?;
                let indices = entropy::index_decode(&code, basis.stored() as u32)?;
                let table = coef_table.as_ref().ok_or(ArchiveError::Malformed {
                    section: "COEF",
                    msg: "missing table for non-empty coefficients".into(),
                })?;
                let values = entropy::decode_values(indices.len(), table, &mut coef_bits)?;
                Correction {
                    entries: indices.into_iter().zip(values).collect(),
                    fallback: None,
                    achieved_error: 0.0,
                }
            }
            _ => {
                let mut samples = Vec::with_capacity(dim);
                for _ in 0..dim {
                    samples.push(fblb.f32()?);
                }
                Correction {
                    entries: Vec::new(),
                    fallback: Some(samples),
                    achieved_error: 0.0,
                }
            }
        };
        corrections.push(corr);
    }
    if idx_reader.remaining() >= 8 || coef_bits.remaining() >= 8 {
        return Err(ArchiveError::TrailingBytes("IDXB/COEF".into()));
    }
    fblb.done()?;
    drop(classes);

    // reconstruct patches
    let padded = Shape::new(
        meta.shape.t + spec.pad_amounts(meta.shape).0,
        meta.shape.h + spec.pad_amounts(meta.shape).1,
        meta.shape.w + spec.pad_amounts(meta.shape).2,
    );
    let (nt, nh, nw) = spec.blocks(meta.shape);
    debug_assert_eq!(padded.t, nt * spec.patch_t);
    let patches: Vec<PatchUnit> = (0..meta.patch_count)
        .into_par_iter()
        .map(|i| {
            let bw = i % nw;
            let bh = (i / nw) % nh;
            let bt = i / (nw * nh);
            let origin = (bt * spec.patch_t, bh * spec.patch_h, bw * spec.patch_w);
            let ext = recon_patches.as_ref().map(|rp| rp[i].vector.as_slice());
            let x_r = regenerate(&payloads[i], &meta.predictor, &spec, &payload_q, ext)?;
            let xg = apply_correction(&x_r, &basis, &corrections[i], &coeff_q)?;
            let mut valid = Vec::with_capacity(dim);
            for dt in 0..spec.patch_t {
                for dh in 0..spec.patch_h {
                    for dw in 0..spec.patch_w {
                        valid.push(
                            origin.0 + dt < meta.shape.t
                                && origin.1 + dh < meta.shape.h
                                && origin.2 + dw < meta.shape.w,
                        );
                    }
                }
            }
            Ok::<_, ArchiveError>(PatchUnit {
                field_name: meta.name.clone(),
                origin,
                vector: xg.iter().map(|&v| v as f64).collect(),
                valid,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut field = grid::reassemble(&patches, meta.shape, &spec)?;
    field.set_name(meta.name.clone());
    field.set_fill_value(meta.fill_value)?;
    Ok(field)
}

/// Original raster bytes divided by archive bytes, basis and tables
/// included.
pub fn compression_ratio(original: &Field, archive: &Archive) -> f64 {
    (original.shape().len() * 4) as f64 / archive.size() as f64
}
