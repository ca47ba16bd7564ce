//! ROI probability maps, masks, and the three-way patch classification that
//! assigns per-patch error bounds.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::grid::{PartitionSpec, Shape};

#[derive(Debug, Error)]
pub enum RoiError {
    #[error("heatmap parameters must be positive (amplitude {amplitude}, sigma {sigma})")]
    BadHeatmapParams { amplitude: f64, sigma: f64 },
    #[error("point ({u}, {v}) outside {h}x{w} frame")]
    PointOutOfBounds { u: f64, v: f64, h: usize, w: usize },
    #[error("acceptance threshold {0} is not finite")]
    BadThreshold(f64),
    #[error("roi fraction must be in (0, 1], got {0}")]
    BadRoiFraction(f64),
    #[error("bounds must be positive, finite, and ordered tau_roi <= tau_buf <= tau_bg, got ({0}, {1}, {2})")]
    BadBounds(f64, f64, f64),
    #[error("mask shape {0} does not match expected {1}")]
    LatticeMismatch(Shape, Shape),
    #[error("frame shapes differ: {0}x{1} vs {2}x{3}")]
    FrameMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("mask header `{path}`: {msg}")]
    Header { path: String, msg: String },
    #[error("points file `{path}` line {line}: {msg}")]
    Points {
        path: String,
        line: usize,
        msg: String,
    },
}

/// Peak intensity and spread of the per-event Gaussian bump.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatmapParams {
    pub amplitude: f64,
    pub sigma: f64,
}

impl HeatmapParams {
    pub fn new(amplitude: f64, sigma: f64) -> Result<Self, RoiError> {
        if !(amplitude > 0.0 && amplitude.is_finite() && sigma > 0.0 && sigma.is_finite()) {
            return Err(RoiError::BadHeatmapParams { amplitude, sigma });
        }
        Ok(HeatmapParams { amplitude, sigma })
    }
}

/// One frame of probability (or heatmap) values, row-major (h, w).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn value(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.w + v]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Binary ROI mask over a (t, h, w) lattice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoiMask {
    shape: Shape,
    bits: Vec<bool>,
}

impl RoiMask {
    pub fn new(shape: Shape, bits: Vec<bool>) -> Result<Self, RoiError> {
        if bits.len() != shape.len() {
            return Err(RoiError::LatticeMismatch(
                Shape::new(bits.len(), 1, 1),
                shape,
            ));
        }
        Ok(RoiMask { shape, bits })
    }

    pub fn empty(shape: Shape) -> Self {
        RoiMask {
            shape,
            bits: vec![false; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, t: usize, h: usize, w: usize) -> bool {
        self.bits[self.shape.index(t, h, w)]
    }

    pub fn set(&mut self, t: usize, h: usize, w: usize, value: bool) {
        let idx = self.shape.index(t, h, w);
        self.bits[idx] = value;
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Stack per-frame masks (each `h*w` bools) into one mask.
    pub fn from_frames(frames: &[Vec<bool>], h: usize, w: usize) -> Result<Self, RoiError> {
        let shape = Shape::new(frames.len(), h, w);
        let mut bits = Vec::with_capacity(shape.len());
        for frame in frames {
            if frame.len() != h * w {
                return Err(RoiError::FrameMismatch(h, w, frame.len() / w.max(1), w));
            }
            bits.extend_from_slice(frame);
        }
        RoiMask::new(shape, bits)
    }

    /// Write as a packed bitset (MSB-first within each byte) plus a text
    /// sidecar at `path` + ".hdr" carrying the shape.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), RoiError> {
        let path = path.as_ref();
        let mut bytes = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (7 - (i % 8) as u8);
            }
        }
        fs::write(path, bytes)?;
        let header = format!(
            "shape = {} {} {}\n",
            self.shape.t, self.shape.h, self.shape.w
        );
        let mut hdr = path.as_os_str().to_os_string();
        hdr.push(".hdr");
        fs::write(hdr, header)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, RoiError> {
        let path = path.as_ref();
        let mut hdr = path.as_os_str().to_os_string();
        hdr.push(".hdr");
        let hdr_path = std::path::PathBuf::from(&hdr);
        let text = fs::read_to_string(&hdr_path)?;
        let display = hdr_path.display().to_string();
        let mut shape = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                if key.trim() == "shape" {
                    let dims: Vec<usize> = value
                        .split_whitespace()
                        .map(|v| v.parse())
                        .collect::<Result<_, _>>()
                        .map_err(|e| RoiError::Header {
                            path: display.clone(),
                            msg: format!("bad shape: {e}"),
                        })?;
                    if dims.len() != 3 {
                        return Err(RoiError::Header {
                            path: display.clone(),
                            msg: "shape needs 3 extents".into(),
                        });
                    }
                    shape = Some(Shape::new(dims[0], dims[1], dims[2]));
                }
            }
        }
        let shape = shape.ok_or_else(|| RoiError::Header {
            path: display.clone(),
            msg: "missing shape".into(),
        })?;
        let bytes = fs::read(path)?;
        if bytes.len() != shape.len().div_ceil(8) {
            return Err(RoiError::Header {
                path: display,
                msg: format!(
                    "bitset has {} bytes, shape {} needs {}",
                    bytes.len(),
                    shape,
                    shape.len().div_ceil(8)
                ),
            });
        }
        let bits = (0..shape.len())
            .map(|i| (bytes[i / 8] >> (7 - (i % 8) as u8)) & 1 == 1)
            .collect();
        RoiMask::new(shape, bits)
    }
}

/// Build one frame's heatmap: per cell, the max over events of
/// A * exp(-((u - u_i)^2 + (v - v_i)^2) / (2 sigma^2)).
///
/// An empty point list yields the all-zero map.
pub fn gaussian_heatmap(
    points: &[(f64, f64)],
    params: &HeatmapParams,
    h: usize,
    w: usize,
) -> Result<ProbabilityMap, RoiError> {
    for &(u, v) in points {
        if !(u.is_finite() && v.is_finite()) || u < 0.0 || v < 0.0 || u >= h as f64 || v >= w as f64
        {
            return Err(RoiError::PointOutOfBounds { u, v, h, w });
        }
    }
    let denom = 2.0 * params.sigma * params.sigma;
    let mut values = vec![0.0; h * w];
    for (idx, cell) in values.iter_mut().enumerate() {
        let (cu, cv) = ((idx / w) as f64, (idx % w) as f64);
        let mut best = 0.0f64;
        for &(u, v) in points {
            let d2 = (cu - u) * (cu - u) + (cv - v) * (cv - v);
            best = best.max(params.amplitude * (-d2 / denom).exp());
        }
        *cell = best;
    }
    Ok(ProbabilityMap { h, w, values })
}

/// Threshold one frame: bit set iff value >= accept.
pub fn threshold_map(map: &ProbabilityMap, accept: f64) -> Result<Vec<bool>, RoiError> {
    if !accept.is_finite() {
        return Err(RoiError::BadThreshold(accept));
    }
    Ok(map.values.iter().map(|&v| v >= accept).collect())
}

/// Patch classification labels, ROI tightest bound first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchClass {
    Roi,
    Buffer,
    NonRoi,
}

impl PatchClass {
    pub fn tag(self) -> u8 {
        match self {
            PatchClass::Roi => 0,
            PatchClass::Buffer => 1,
            PatchClass::NonRoi => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(PatchClass::Roi),
            1 => Some(PatchClass::Buffer),
            2 => Some(PatchClass::NonRoi),
            _ => None,
        }
    }
}

/// Neighborhood used when growing the buffer ring around ROI patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

/// Per-patch class and error bound over the partition lattice, t-major
/// order matching [`crate::grid::partition`].
#[derive(Clone, Debug, PartialEq)]
pub struct PatchClassMap {
    pub blocks: (usize, usize, usize),
    pub classes: Vec<PatchClass>,
    pub tau_roi: f64,
    pub tau_buf: f64,
    pub tau_bg: f64,
}

impl PatchClassMap {
    /// Uniform bound: every patch background-class at `tau`.
    pub fn uniform(blocks: (usize, usize, usize), tau: f64) -> Result<Self, RoiError> {
        check_bounds(tau, tau, tau)?;
        let count = blocks.0 * blocks.1 * blocks.2;
        Ok(PatchClassMap {
            blocks,
            classes: vec![PatchClass::NonRoi; count],
            tau_roi: tau,
            tau_buf: tau,
            tau_bg: tau,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn tau(&self, class: PatchClass) -> f64 {
        match class {
            PatchClass::Roi => self.tau_roi,
            PatchClass::Buffer => self.tau_buf,
            PatchClass::NonRoi => self.tau_bg,
        }
    }

    pub fn class_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for c in &self.classes {
            match c {
                PatchClass::Roi => counts.0 += 1,
                PatchClass::Buffer => counts.1 += 1,
                PatchClass::NonRoi => counts.2 += 1,
            }
        }
        counts
    }
}

fn check_bounds(tau_roi: f64, tau_buf: f64, tau_bg: f64) -> Result<(), RoiError> {
    let ok = tau_roi > 0.0
        && tau_roi.is_finite()
        && tau_buf.is_finite()
        && tau_bg.is_finite()
        && tau_roi <= tau_buf
        && tau_buf <= tau_bg;
    if !ok {
        return Err(RoiError::BadBounds(tau_roi, tau_buf, tau_bg));
    }
    Ok(())
}

/// Classify every patch of the lattice against an ROI mask.
///
/// A patch is ROI when at least `roi_fraction` of its in-field cells are
/// set. Non-ROI patches within `buffer_depth` rings (in the h/w patch grid,
/// same temporal block) of an ROI patch become buffer patches.
#[allow(clippy::too_many_arguments)]
pub fn classify_patches(
    mask: &RoiMask,
    field_shape: Shape,
    spec: &PartitionSpec,
    roi_fraction: f64,
    connectivity: Connectivity,
    buffer_depth: usize,
    bounds: (f64, f64, f64),
) -> Result<PatchClassMap, RoiError> {
    if mask.shape() != field_shape {
        return Err(RoiError::LatticeMismatch(mask.shape(), field_shape));
    }
    if !(roi_fraction > 0.0 && roi_fraction <= 1.0) {
        return Err(RoiError::BadRoiFraction(roi_fraction));
    }
    check_bounds(bounds.0, bounds.1, bounds.2)?;
    let (nt, nh, nw) = spec.blocks(field_shape);
    let block_index = |bt: usize, bh: usize, bw: usize| (bt * nh + bh) * nw + bw;

    let mut classes = vec![PatchClass::NonRoi; nt * nh * nw];
    for bt in 0..nt {
        for bh in 0..nh {
            for bw in 0..nw {
                let t1 = ((bt + 1) * spec.patch_t).min(field_shape.t);
                let h1 = ((bh + 1) * spec.patch_h).min(field_shape.h);
                let w1 = ((bw + 1) * spec.patch_w).min(field_shape.w);
                let mut set = 0usize;
                let mut cells = 0usize;
                for t in bt * spec.patch_t..t1 {
                    for h in bh * spec.patch_h..h1 {
                        for w in bw * spec.patch_w..w1 {
                            cells += 1;
                            if mask.get(t, h, w) {
                                set += 1;
                            }
                        }
                    }
                }
                if cells > 0 && set as f64 / cells as f64 >= roi_fraction {
                    classes[block_index(bt, bh, bw)] = PatchClass::Roi;
                }
            }
        }
    }

    // buffer ring: distance in the patch grid, Chebyshev for 8-way and
    // Manhattan for 4-way
    let depth = buffer_depth as isize;
    if depth > 0 {
        for bt in 0..nt {
            for bh in 0..nh {
                for bw in 0..nw {
                    if classes[block_index(bt, bh, bw)] != PatchClass::NonRoi {
                        continue;
                    }
                    'scan: for dh in -depth..=depth {
                        for dw in -depth..=depth {
                            if dh == 0 && dw == 0 {
                                continue;
                            }
                            if matches!(connectivity, Connectivity::Four)
                                && dh.abs() + dw.abs() > depth
                            {
                                continue;
                            }
                            let (qh, qw) = (bh as isize + dh, bw as isize + dw);
                            if qh < 0 || qw < 0 || qh >= nh as isize || qw >= nw as isize {
                                continue;
                            }
                            if classes[block_index(bt, qh as usize, qw as usize)]
                                == PatchClass::Roi
                            {
                                classes[block_index(bt, bh, bw)] = PatchClass::Buffer;
                                break 'scan;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(PatchClassMap {
        blocks: (nt, nh, nw),
        classes,
        tau_roi: bounds.0,
        tau_buf: bounds.1,
        tau_bg: bounds.2,
    })
}

/// Fraction of mask cells set.
pub fn roi_ratio_cells(mask: &RoiMask) -> f64 {
    if mask.bits().is_empty() {
        return 0.0;
    }
    mask.count_set() as f64 / mask.bits().len() as f64
}

/// Fraction of patches classified ROI.
pub fn roi_ratio_patches(map: &PatchClassMap) -> f64 {
    if map.is_empty() {
        return 0.0;
    }
    map.class_counts().0 as f64 / map.len() as f64
}

/// TC nodal points: (frame, u, v) rows in a small CSV.
pub fn write_points(
    points: &[(usize, f64, f64)],
    path: impl AsRef<Path>,
) -> Result<(), RoiError> {
    let mut text = String::from("frame,u,v\n");
    for &(frame, u, v) in points {
        text.push_str(&format!("{frame},{u},{v}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_points(path: impl AsRef<Path>) -> Result<Vec<(usize, f64, f64)>, RoiError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("frame")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(RoiError::Points {
                path: display.clone(),
                line: lineno + 1,
                msg: format!("expected 3 columns, got {}", fields.len()),
            });
        }
        let parse_err = |msg: String| RoiError::Points {
            path: display.clone(),
            line: lineno + 1,
            msg,
        };
        let frame: usize = fields[0]
            .parse()
            .map_err(|e| parse_err(format!("bad frame: {e}")))?;
        let u: f64 = fields[1]
            .parse()
            .map_err(|e| parse_err(format!("bad u: {e}")))?;
        let v: f64 = fields[2]
            .parse()
            .map_err(|e| parse_err(format!("bad v: {e}")))?;
        out.push((frame, u, v));
    }
    Ok(out)
}
