//! Field representation, derived variables, and partitioning of fields into
//! patch units.
//!
//! A [`Field`] is a named 3D tensor in (time, height, width) order backed by
//! `f32` samples, matching the on-disk raster format. [`partition`] tiles a
//! field into non-overlapping patches in a fixed t-major order, padding
//! boundary patches per the configured policy; [`reassemble`] is its exact
//! inverse on valid cells.

use std::fmt;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Grid extent in (time, height, width) order.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Shape { t, h, w }
    }

    /// Total cell count.
    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major linear index (t outermost, w innermost).
    #[inline]
    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("field `{name}`: {got} samples do not fill shape {shape} ({expected} cells)")]
    SampleCount {
        name: String,
        shape: Shape,
        expected: usize,
        got: usize,
    },
    #[error("field `{name}`: non-finite sample at linear index {index}")]
    NonFiniteSample { name: String, index: usize },
    #[error("field `{name}`: fill value must be finite")]
    NonFiniteFill { name: String },
    #[error("shape {0} has a zero dimension")]
    ZeroDimension(Shape),
    #[error("patch extents must all be at least 1")]
    ZeroPatchExtent,
    #[error("shape {shape} is not tiled exactly by patches of {pt}x{ph}x{pw} and padding is disabled")]
    PaddingRequired {
        shape: Shape,
        pt: usize,
        ph: usize,
        pw: usize,
    },
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),
    #[error("patch origin {0:?} does not lie on the partition lattice")]
    InvalidOrigin((usize, usize, usize)),
    #[error("duplicate patch at origin {0:?}")]
    DuplicatePatch((usize, usize, usize)),
    #[error("missing patch at origin {0:?}")]
    MissingPatch((usize, usize, usize)),
    #[error("patch at origin {origin:?} has {got} values, expected {expected}")]
    PatchLength {
        origin: (usize, usize, usize),
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("header `{path}`: {msg}")]
    Header { path: String, msg: String },
}

/// How boundary patches obtain values outside the field extent.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PadPolicy {
    /// Repeat the nearest edge sample.
    Edge,
    /// Mirror about the boundary without repeating the edge sample.
    Reflect,
    /// Fill with zeros.
    Zero,
}

/// Patch extents and padding policy for partitioning a field.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PartitionSpec {
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// `None` disables padding; fields must then tile exactly.
    pub pad: Option<PadPolicy>,
}

impl PartitionSpec {
    pub fn new(patch_t: usize, patch_h: usize, patch_w: usize) -> Self {
        PartitionSpec {
            patch_t,
            patch_h,
            patch_w,
            pad: Some(PadPolicy::Edge),
        }
    }

    pub fn with_pad(mut self, pad: Option<PadPolicy>) -> Self {
        self.pad = pad;
        self
    }

    /// Flattened patch dimension D.
    pub fn dim(&self) -> usize {
        self.patch_t * self.patch_h * self.patch_w
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.patch_t == 0 || self.patch_h == 0 || self.patch_w == 0 {
            return Err(GridError::ZeroPatchExtent);
        }
        Ok(())
    }

    /// Block counts (ceil division) along each axis for `shape`.
    pub fn blocks(&self, shape: Shape) -> (usize, usize, usize) {
        (
            shape.t.div_ceil(self.patch_t),
            shape.h.div_ceil(self.patch_h),
            shape.w.div_ceil(self.patch_w),
        )
    }

    /// Number of patches tiling `shape`.
    pub fn patch_count(&self, shape: Shape) -> usize {
        let (nt, nh, nw) = self.blocks(shape);
        nt * nh * nw
    }

    /// Padded cells added beyond the field extent along each axis.
    pub fn pad_amounts(&self, shape: Shape) -> (usize, usize, usize) {
        let (nt, nh, nw) = self.blocks(shape);
        (
            nt * self.patch_t - shape.t,
            nh * self.patch_h - shape.h,
            nw * self.patch_w - shape.w,
        )
    }
}

/// A named 3D scalar field.
///
/// Samples are stored row-major: t outermost, then h, then w. All non-fill
/// samples are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    name: String,
    shape: Shape,
    samples: Vec<f32>,
    fill_value: Option<f32>,
}

impl Field {
    pub fn new(
        name: impl Into<String>,
        shape: Shape,
        samples: Vec<f32>,
        fill_value: Option<f32>,
    ) -> Result<Self, GridError> {
        let name = name.into();
        if shape.is_empty() {
            return Err(GridError::ZeroDimension(shape));
        }
        if samples.len() != shape.len() {
            return Err(GridError::SampleCount {
                name,
                shape,
                expected: shape.len(),
                got: samples.len(),
            });
        }
        if let Some(fill) = fill_value {
            if !fill.is_finite() {
                return Err(GridError::NonFiniteFill { name });
            }
        }
        for (i, &s) in samples.iter().enumerate() {
            if !s.is_finite() && fill_value != Some(s) {
                return Err(GridError::NonFiniteSample { name, index: i });
            }
        }
        Ok(Field {
            name,
            shape,
            samples,
            fill_value,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn fill_value(&self) -> Option<f32> {
        self.fill_value
    }

    #[inline]
    pub fn get(&self, t: usize, h: usize, w: usize) -> f32 {
        self.samples[self.shape.index(t, h, w)]
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn set_fill_value(&mut self, fill: Option<f32>) -> Result<(), GridError> {
        if let Some(f) = fill {
            if !f.is_finite() {
                return Err(GridError::NonFiniteFill {
                    name: self.name.clone(),
                });
            }
        }
        self.fill_value = fill;
        Ok(())
    }

    /// Little-endian raster bytes of the samples, as written to disk.
    pub fn sample_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * 4);
        for s in &self.samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    /// Write the raw little-endian raster to `path` and a text header to
    /// `path` + ".hdr".
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        let path = path.as_ref();
        fs::write(path, self.sample_bytes())?;
        let fill = match self.fill_value {
            Some(f) => format!("{f}"),
            None => "none".to_string(),
        };
        let header = format!(
            "name = {}\nshape = {} {} {}\nfill = {}\n",
            self.name, self.shape.t, self.shape.h, self.shape.w, fill
        );
        fs::write(header_path(path), header)?;
        Ok(())
    }

    /// Read a field written by [`Field::write`].
    pub fn read(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let path = path.as_ref();
        let hdr_path = header_path(path);
        let hdr_text = fs::read_to_string(&hdr_path)?;
        let hdr_name = hdr_path.display().to_string();
        let mut name = String::new();
        let mut shape = None;
        let mut fill = None;
        for line in hdr_text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| GridError::Header {
                path: hdr_name.clone(),
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "name" => name = value.to_string(),
                "shape" => {
                    let dims: Vec<usize> = value
                        .split_whitespace()
                        .map(|v| v.parse())
                        .collect::<Result<_, _>>()
                        .map_err(|e| GridError::Header {
                            path: hdr_name.clone(),
                            msg: format!("bad shape `{value}`: {e}"),
                        })?;
                    if dims.len() != 3 {
                        return Err(GridError::Header {
                            path: hdr_name.clone(),
                            msg: format!("shape needs 3 extents, got {}", dims.len()),
                        });
                    }
                    shape = Some(Shape::new(dims[0], dims[1], dims[2]));
                }
                "fill" => {
                    fill = if value == "none" {
                        None
                    } else {
                        Some(value.parse::<f32>().map_err(|e| GridError::Header {
                            path: hdr_name.clone(),
                            msg: format!("bad fill `{value}`: {e}"),
                        })?)
                    };
                }
                _ => {
                    return Err(GridError::Header {
                        path: hdr_name.clone(),
                        msg: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        let shape = shape.ok_or_else(|| GridError::Header {
            path: hdr_name.clone(),
            msg: "missing shape".to_string(),
        })?;
        let bytes = fs::read(path)?;
        if bytes.len() != shape.len() * 4 {
            return Err(GridError::Header {
                path: hdr_name,
                msg: format!(
                    "raster has {} bytes, shape {} needs {}",
                    bytes.len(),
                    shape,
                    shape.len() * 4
                ),
            });
        }
        let samples = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Field::new(name, shape, samples, fill)
    }
}

fn header_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".hdr");
    s.into()
}

/// One guarantee unit: a flattened patch of a field.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchUnit {
    pub field_name: String,
    /// (t0, h0, w0), aligned to the partition lattice.
    pub origin: (usize, usize, usize),
    /// Row-major within the patch, f64 image of the f32 samples.
    pub vector: Vec<f64>,
    /// False for cells that lie beyond the field extent (padding).
    pub valid: Vec<bool>,
}

impl PatchUnit {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn fully_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }
}

#[inline]
fn pad_source(i: usize, len: usize, policy: PadPolicy) -> Option<usize> {
    if i < len {
        return Some(i);
    }
    match policy {
        PadPolicy::Edge => Some(len - 1),
        PadPolicy::Zero => None,
        PadPolicy::Reflect => {
            if len == 1 {
                return Some(0);
            }
            let period = 2 * (len - 1);
            let m = i % period;
            Some(if m < len { m } else { period - m })
        }
    }
}

/// Tile `field` into non-overlapping patches, t-major then h then w.
///
/// Boundary patches are padded per `spec.pad`; padded cells are flagged
/// invalid. Fails if the field does not tile exactly and padding is
/// disabled.
pub fn partition(field: &Field, spec: &PartitionSpec) -> Result<Vec<PatchUnit>, GridError> {
    spec.validate()?;
    let shape = field.shape();
    if shape.is_empty() {
        return Err(GridError::ZeroDimension(shape));
    }
    let (pad_t, pad_h, pad_w) = spec.pad_amounts(shape);
    let policy = match spec.pad {
        Some(p) => p,
        None => {
            if pad_t != 0 || pad_h != 0 || pad_w != 0 {
                return Err(GridError::PaddingRequired {
                    shape,
                    pt: spec.patch_t,
                    ph: spec.patch_h,
                    pw: spec.patch_w,
                });
            }
            PadPolicy::Edge // unused: no padded cells exist
        }
    };
    let (nt, nh, nw) = spec.blocks(shape);
    let dim = spec.dim();
    let mut patches = Vec::with_capacity(nt * nh * nw);
    for bt in 0..nt {
        for bh in 0..nh {
            for bw in 0..nw {
                let origin = (bt * spec.patch_t, bh * spec.patch_h, bw * spec.patch_w);
                let mut vector = Vec::with_capacity(dim);
                let mut valid = Vec::with_capacity(dim);
                for dt in 0..spec.patch_t {
                    let st = pad_source(origin.0 + dt, shape.t, policy);
                    for dh in 0..spec.patch_h {
                        let sh = pad_source(origin.1 + dh, shape.h, policy);
                        for dw in 0..spec.patch_w {
                            let sw = pad_source(origin.2 + dw, shape.w, policy);
                            let inside = origin.0 + dt < shape.t
                                && origin.1 + dh < shape.h
                                && origin.2 + dw < shape.w;
                            let value = match (st, sh, sw) {
                                (Some(t), Some(h), Some(w)) => field.get(t, h, w) as f64,
                                _ => 0.0,
                            };
                            vector.push(value);
                            valid.push(inside);
                        }
                    }
                }
                patches.push(PatchUnit {
                    field_name: field.name().to_string(),
                    origin,
                    vector,
                    valid,
                });
            }
        }
    }
    Ok(patches)
}

/// Rebuild a field of `shape` from patches produced by [`partition`].
///
/// Order-independent: patches are keyed by origin. Bit-exact inverse of
/// [`partition`] on valid cells.
pub fn reassemble(
    patches: &[PatchUnit],
    shape: Shape,
    spec: &PartitionSpec,
) -> Result<Field, GridError> {
    spec.validate()?;
    if shape.is_empty() {
        return Err(GridError::ZeroDimension(shape));
    }
    let (nt, nh, nw) = spec.blocks(shape);
    let dim = spec.dim();
    let mut seen = vec![false; nt * nh * nw];
    let mut samples = vec![0f32; shape.len()];
    let mut name = String::new();
    for patch in patches {
        let (t0, h0, w0) = patch.origin;
        if t0 % spec.patch_t != 0 || h0 % spec.patch_h != 0 || w0 % spec.patch_w != 0 {
            return Err(GridError::InvalidOrigin(patch.origin));
        }
        let (bt, bh, bw) = (t0 / spec.patch_t, h0 / spec.patch_h, w0 / spec.patch_w);
        if bt >= nt || bh >= nh || bw >= nw {
            return Err(GridError::InvalidOrigin(patch.origin));
        }
        let block = (bt * nh + bh) * nw + bw;
        if seen[block] {
            return Err(GridError::DuplicatePatch(patch.origin));
        }
        seen[block] = true;
        if patch.vector.len() != dim {
            return Err(GridError::PatchLength {
                origin: patch.origin,
                expected: dim,
                got: patch.vector.len(),
            });
        }
        if name.is_empty() {
            name = patch.field_name.clone();
        }
        let mut idx = 0;
        for dt in 0..spec.patch_t {
            for dh in 0..spec.patch_h {
                for dw in 0..spec.patch_w {
                    let (t, h, w) = (t0 + dt, h0 + dh, w0 + dw);
                    if t < shape.t && h < shape.h && w < shape.w {
                        samples[shape.index(t, h, w)] = patch.vector[idx] as f32;
                    }
                    idx += 1;
                }
            }
        }
    }
    if let Some(block) = seen.iter().position(|&s| !s) {
        let bw = block % nw;
        let bh = (block / nw) % nh;
        let bt = block / (nw * nh);
        return Err(GridError::MissingPatch((
            bt * spec.patch_t,
            bh * spec.patch_h,
            bw * spec.patch_w,
        )));
    }
    Field::new(name, shape, samples, None)
}

/// Integrated vapor transport: per-cell sqrt(tvq^2 + tuq^2).
pub fn compute_ivt(tvq: &Field, tuq: &Field) -> Result<Field, GridError> {
    if tvq.shape() != tuq.shape() {
        return Err(GridError::ShapeMismatch(tvq.shape(), tuq.shape()));
    }
    let samples = tvq
        .samples()
        .iter()
        .zip(tuq.samples())
        .map(|(&a, &b)| {
            let (a, b) = (a as f64, b as f64);
            (a * a + b * b).sqrt() as f32
        })
        .collect();
    Field::new("IVT", tvq.shape(), samples, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_field(shape: Shape) -> Field {
        let samples = (0..shape.len()).map(|i| (i as f32) * 0.25 - 3.0).collect();
        Field::new("ramp", shape, samples, None).unwrap()
    }

    #[test]
    fn partition_counts_and_dim() {
        let f = ramp_field(Shape::new(16, 32, 32));
        let spec = PartitionSpec::new(8, 16, 16);
        let patches = partition(&f, &spec).unwrap();
        assert_eq!(patches.len(), 8);
        assert!(patches.iter().all(|p| p.vector.len() == 2048));
        assert!(patches.iter().all(|p| p.fully_valid()));
    }

    #[test]
    fn identity_tiling_single_patch() {
        let f = ramp_field(Shape::new(8, 16, 16));
        let spec = PartitionSpec::new(8, 16, 16);
        let patches = partition(&f, &spec).unwrap();
        assert_eq!(patches.len(), 1);
        let back: Vec<f32> = patches[0].vector.iter().map(|&v| v as f32).collect();
        assert_eq!(back, f.samples());
    }

    #[test]
    fn padded_roundtrip_is_exact() {
        let f = ramp_field(Shape::new(8, 17, 16));
        let spec = PartitionSpec::new(8, 16, 16).with_pad(Some(PadPolicy::Reflect));
        let patches = partition(&f, &spec).unwrap();
        assert_eq!(patches.len(), 2);
        let g = reassemble(&patches, f.shape(), &spec).unwrap();
        assert_eq!(g.samples(), f.samples());
    }

    #[test]
    fn reassemble_is_order_independent() {
        let f = ramp_field(Shape::new(4, 6, 6));
        let spec = PartitionSpec::new(2, 3, 2);
        let mut patches = partition(&f, &spec).unwrap();
        patches.reverse();
        let g = reassemble(&patches, f.shape(), &spec).unwrap();
        assert_eq!(g.samples(), f.samples());
    }

    #[test]
    fn roundtrip_every_pad_policy() {
        for policy in [PadPolicy::Edge, PadPolicy::Reflect, PadPolicy::Zero] {
            let f = ramp_field(Shape::new(5, 7, 9));
            let spec = PartitionSpec::new(2, 4, 4).with_pad(Some(policy));
            let patches = partition(&f, &spec).unwrap();
            assert_eq!(patches.len(), spec.patch_count(f.shape()));
            let g = reassemble(&patches, f.shape(), &spec).unwrap();
            assert_eq!(g.samples(), f.samples());
        }
    }

    #[test]
    fn disabled_padding_rejects_ragged_shapes() {
        let f = ramp_field(Shape::new(8, 17, 16));
        let spec = PartitionSpec::new(8, 16, 16).with_pad(None);
        assert!(matches!(
            partition(&f, &spec),
            Err(GridError::PaddingRequired { .. })
        ));
    }

    #[test]
    fn duplicate_and_missing_patches_rejected() {
        let f = ramp_field(Shape::new(4, 4, 4));
        let spec = PartitionSpec::new(2, 4, 4);
        let patches = partition(&f, &spec).unwrap();
        let mut dup = patches.clone();
        dup.push(patches[0].clone());
        assert!(matches!(
            reassemble(&dup, f.shape(), &spec),
            Err(GridError::DuplicatePatch(_))
        ));
        let missing = &patches[..1];
        assert!(matches!(
            reassemble(missing, f.shape(), &spec),
            Err(GridError::MissingPatch(_))
        ));
    }

    #[test]
    fn ivt_three_four_five() {
        let shape = Shape::new(2, 3, 3);
        let tvq = Field::new("TVQ", shape, vec![3.0; shape.len()], None).unwrap();
        let tuq = Field::new("TUQ", shape, vec![4.0; shape.len()], None).unwrap();
        let ivt = compute_ivt(&tvq, &tuq).unwrap();
        assert!(ivt.samples().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn ivt_zero_component_gives_abs() {
        let shape = Shape::new(1, 2, 2);
        let tvq = Field::new("TVQ", shape, vec![-2.5, 1.0, 0.0, -7.0], None).unwrap();
        let tuq = Field::new("TUQ", shape, vec![0.0; 4], None).unwrap();
        let ivt = compute_ivt(&tvq, &tuq).unwrap();
        assert_eq!(ivt.samples(), &[2.5, 1.0, 0.0, 7.0]);
    }

    #[test]
    fn ivt_sign_invariance() {
        let shape = Shape::new(1, 4, 4);
        let a: Vec<f32> = (0..16).map(|i| i as f32 - 8.0).collect();
        let b: Vec<f32> = (0..16).map(|i| 3.0 - i as f32).collect();
        let tvq = Field::new("TVQ", shape, a.clone(), None).unwrap();
        let tuq = Field::new("TUQ", shape, b.clone(), None).unwrap();
        let neg_tvq =
            Field::new("TVQ", shape, a.iter().map(|v| -v).collect(), None).unwrap();
        let neg_tuq =
            Field::new("TUQ", shape, b.iter().map(|v| -v).collect(), None).unwrap();
        assert_eq!(
            compute_ivt(&tvq, &tuq).unwrap().samples(),
            compute_ivt(&neg_tvq, &neg_tuq).unwrap().samples()
        );
    }

    #[test]
    fn ivt_shape_mismatch() {
        let tvq = ramp_field(Shape::new(1, 2, 2));
        let tuq = ramp_field(Shape::new(1, 2, 3));
        assert!(matches!(
            compute_ivt(&tvq, &tuq),
            Err(GridError::ShapeMismatch(_, _))
        ));
    }

    #[test]
    fn field_rejects_nan_and_bad_counts() {
        let shape = Shape::new(1, 1, 2);
        assert!(matches!(
            Field::new("x", shape, vec![1.0], None),
            Err(GridError::SampleCount { .. })
        ));
        assert!(matches!(
            Field::new("x", shape, vec![1.0, f32::NAN], None),
            Err(GridError::NonFiniteSample { .. })
        ));
        assert!(Field::new("x", shape, vec![1.0, 2.0], Some(-9999.0)).is_ok());
    }

    #[test]
    fn field_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("psl.raw");
        let f = ramp_field(Shape::new(3, 4, 5));
        f.write(&path).unwrap();
        let g = Field::read(&path).unwrap();
        assert_eq!(f, g);
    }
}
