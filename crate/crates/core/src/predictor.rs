//! Per-patch predictors producing the approximate reconstruction the
//! correction loop starts from.
//!
//! Built-in predictors are deterministic and regenerate their output from
//! the stored payload alone, so the encoder and decoder always agree on the
//! prediction bit for bit. The external kind instead pulls reconstructions
//! from a separately produced file (a trained model's output), carrying its
//! latent vectors through the archive opaquely.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::entropy::{QuantizedValue, Quantizer};
use crate::grid::PartitionSpec;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("downsample factors ({ft}, {fh}, {fw}) must divide patch extents ({pt}, {ph}, {pw})")]
    BadFactors {
        ft: usize,
        fh: usize,
        fw: usize,
        pt: usize,
        ph: usize,
        pw: usize,
    },
    #[error("patch has {got} values, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("payload does not match predictor kind")]
    PayloadKind,
    #[error("coarse grid has {got} values, expected {expected}")]
    CoarseLength { expected: usize, got: usize },
    #[error("external predictor needs a reconstruction source")]
    MissingReconstruction,
    #[error("external reconstruction checksum mismatch: archive has {expected:#018x}, file has {got:#018x}")]
    ChecksumMismatch { expected: u64, got: u64 },
    #[error("latent file `{path}`: {msg}")]
    LatentFormat { path: String, msg: String },
    #[error("latent set has {got} vectors, expected {expected}")]
    LatentCount { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which prediction to run for every patch of an archive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PredictorKind {
    /// Predict zero; the correction codes the data itself.
    Zero,
    /// Predict the quantized patch mean.
    BlockMean,
    /// Keep a strided sample grid and interpolate it back up.
    Downsample { ft: usize, fh: usize, fw: usize },
    /// Reconstruction supplied externally, referenced by id and checksum.
    External { reference_id: String },
}

impl PredictorKind {
    pub fn validate(&self, spec: &PartitionSpec) -> Result<(), PredictorError> {
        if let PredictorKind::Downsample { ft, fh, fw } = *self {
            let ok = ft >= 1
                && fh >= 1
                && fw >= 1
                && spec.patch_t % ft == 0
                && spec.patch_h % fh == 0
                && spec.patch_w % fw == 0;
            if !ok {
                return Err(PredictorError::BadFactors {
                    ft,
                    fh,
                    fw,
                    pt: spec.patch_t,
                    ph: spec.patch_h,
                    pw: spec.patch_w,
                });
            }
        }
        Ok(())
    }

    /// Number of payload values stored per patch.
    pub fn payload_len(&self, spec: &PartitionSpec, latent_dim: usize) -> usize {
        match *self {
            PredictorKind::Zero => 0,
            PredictorKind::BlockMean => 1,
            PredictorKind::Downsample { ft, fh, fw } => {
                axis_positions(spec.patch_t, ft).len()
                    * axis_positions(spec.patch_h, fh).len()
                    * axis_positions(spec.patch_w, fw).len()
            }
            PredictorKind::External { .. } => latent_dim,
        }
    }
}

/// Side information a patch needs to regenerate its prediction.
#[derive(Clone, Debug, PartialEq)]
pub enum PredictorPayload {
    Empty,
    Mean(QuantizedValue),
    CoarseGrid(Vec<QuantizedValue>),
    Latent(Vec<QuantizedValue>),
}

impl PredictorPayload {
    pub fn values(&self) -> &[QuantizedValue] {
        match self {
            PredictorPayload::Empty => &[],
            PredictorPayload::Mean(v) => std::slice::from_ref(v),
            PredictorPayload::CoarseGrid(v) | PredictorPayload::Latent(v) => v,
        }
    }
}

/// Externally produced data for [`PredictorKind::External`].
pub struct ExternalPatch<'a> {
    /// Reconstruction of this patch, same flattening as the patch vector.
    pub reconstruction: &'a [f64],
    /// Latent vector for this patch, if a latent file was supplied.
    pub latent: Option<&'a [f32]>,
}

/// Subsampled positions along one axis: every `factor`-th cell plus the
/// last cell, so interpolation never extrapolates.
pub fn axis_positions(len: usize, factor: usize) -> Vec<usize> {
    let mut positions: Vec<usize> = (0..len).step_by(factor.max(1)).collect();
    if *positions.last().unwrap() != len - 1 {
        positions.push(len - 1);
    }
    positions
}

/// Predict a patch, returning the regenerable reconstruction and the
/// payload that regenerates it.
///
/// The returned reconstruction is produced by [`regenerate`] from the
/// payload, never from the raw patch, so it is bit-identical to what the
/// decoder will compute.
pub fn predict(
    vector: &[f64],
    kind: &PredictorKind,
    spec: &PartitionSpec,
    payload_q: &Quantizer,
    latent_q: &Quantizer,
    external: Option<&ExternalPatch>,
) -> Result<(Vec<f64>, PredictorPayload), PredictorError> {
    kind.validate(spec)?;
    if vector.len() != spec.dim() {
        return Err(PredictorError::DimMismatch {
            expected: spec.dim(),
            got: vector.len(),
        });
    }
    let payload = match kind {
        PredictorKind::Zero => PredictorPayload::Empty,
        PredictorKind::BlockMean => {
            let mean = vector.iter().sum::<f64>() / vector.len() as f64;
            PredictorPayload::Mean(payload_q.code(mean))
        }
        PredictorKind::Downsample { ft, fh, fw } => {
            let pos_t = axis_positions(spec.patch_t, *ft);
            let pos_h = axis_positions(spec.patch_h, *fh);
            let pos_w = axis_positions(spec.patch_w, *fw);
            let mut coarse = Vec::with_capacity(pos_t.len() * pos_h.len() * pos_w.len());
            for &t in &pos_t {
                for &h in &pos_h {
                    for &w in &pos_w {
                        let idx = (t * spec.patch_h + h) * spec.patch_w + w;
                        coarse.push(payload_q.code(vector[idx]));
                    }
                }
            }
            PredictorPayload::CoarseGrid(coarse)
        }
        PredictorKind::External { .. } => {
            let ext = external.ok_or(PredictorError::MissingReconstruction)?;
            let latent = ext.latent.unwrap_or(&[]);
            PredictorPayload::Latent(
                latent.iter().map(|&v| latent_q.code(v as f64)).collect(),
            )
        }
    };
    let x_r = regenerate(
        &payload,
        kind,
        spec,
        payload_q,
        external.map(|e| e.reconstruction),
    )?;
    Ok((x_r, payload))
}

/// Decode-side mirror of [`predict`]: payload in, reconstruction out.
pub fn regenerate(
    payload: &PredictorPayload,
    kind: &PredictorKind,
    spec: &PartitionSpec,
    payload_q: &Quantizer,
    external_reconstruction: Option<&[f64]>,
) -> Result<Vec<f64>, PredictorError> {
    kind.validate(spec)?;
    let dim = spec.dim();
    match (kind, payload) {
        (PredictorKind::Zero, PredictorPayload::Empty) => Ok(vec![0.0; dim]),
        (PredictorKind::BlockMean, PredictorPayload::Mean(qv)) => {
            Ok(vec![payload_q.decode(*qv); dim])
        }
        (PredictorKind::Downsample { ft, fh, fw }, PredictorPayload::CoarseGrid(coarse)) => {
            let pos_t = axis_positions(spec.patch_t, *ft);
            let pos_h = axis_positions(spec.patch_h, *fh);
            let pos_w = axis_positions(spec.patch_w, *fw);
            let expected = pos_t.len() * pos_h.len() * pos_w.len();
            if coarse.len() != expected {
                return Err(PredictorError::CoarseLength {
                    expected,
                    got: coarse.len(),
                });
            }
            let values: Vec<f64> = coarse.iter().map(|&qv| payload_q.decode(qv)).collect();
            Ok(trilinear_upsample(
                &values,
                &pos_t,
                &pos_h,
                &pos_w,
                spec.patch_t,
                spec.patch_h,
                spec.patch_w,
            ))
        }
        (PredictorKind::External { .. }, PredictorPayload::Latent(_)) => {
            let recon = external_reconstruction.ok_or(PredictorError::MissingReconstruction)?;
            if recon.len() != dim {
                return Err(PredictorError::DimMismatch {
                    expected: dim,
                    got: recon.len(),
                });
            }
            Ok(recon.to_vec())
        }
        _ => Err(PredictorError::PayloadKind),
    }
}

/// Per-axis interpolation weights: for each fine index, the left sample slot
/// and the fractional position between it and the next.
fn axis_weights(len: usize, positions: &[usize]) -> Vec<(usize, f64)> {
    let mut weights = Vec::with_capacity(len);
    let mut seg = 0usize;
    for i in 0..len {
        if positions.len() == 1 {
            weights.push((0, 0.0));
            continue;
        }
        while seg + 2 < positions.len() && positions[seg + 1] < i {
            seg += 1;
        }
        let (p0, p1) = (positions[seg], positions[seg + 1]);
        let alpha = if i <= p0 {
            0.0
        } else if i >= p1 {
            1.0
        } else {
            (i - p0) as f64 / (p1 - p0) as f64
        };
        weights.push((seg, alpha));
    }
    weights
}

/// Piecewise trilinear interpolation of samples stored at `pos_*` back onto
/// the full patch lattice. Exact on multilinear data.
pub fn trilinear_upsample(
    coarse: &[f64],
    pos_t: &[usize],
    pos_h: &[usize],
    pos_w: &[usize],
    t: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let (ct, ch, cw) = (pos_t.len(), pos_h.len(), pos_w.len());
    debug_assert_eq!(coarse.len(), ct * ch * cw);
    let wt = axis_weights(t, pos_t);
    let wh = axis_weights(h, pos_h);
    let ww = axis_weights(w, pos_w);
    let at = |ti: usize, hi: usize, wi: usize| coarse[(ti * ch + hi) * cw + wi];
    let mut out = Vec::with_capacity(t * h * w);
    for &(st, a_t) in wt.iter().take(t) {
        let t1 = if ct == 1 { 0 } else { st + 1 };
        for &(sh, a_h) in wh.iter().take(h) {
            let h1 = if ch == 1 { 0 } else { sh + 1 };
            for &(sw, a_w) in ww.iter().take(w) {
                let w1 = if cw == 1 { 0 } else { sw + 1 };
                let lerp =
                    |x0: f64, x1: f64, a: f64| x0 * (1.0 - a) + x1 * a;
                let c00 = lerp(at(st, sh, sw), at(st, sh, w1), a_w);
                let c01 = lerp(at(st, h1, sw), at(st, h1, w1), a_w);
                let c10 = lerp(at(t1, sh, sw), at(t1, sh, w1), a_w);
                let c11 = lerp(at(t1, h1, sw), at(t1, h1, w1), a_w);
                let c0 = lerp(c00, c01, a_h);
                let c1 = lerp(c10, c11, a_h);
                out.push(lerp(c0, c1, a_t));
            }
        }
    }
    out
}

/// Per-patch latent vectors read from a sidecar file.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    pub dim: usize,
    pub vectors: Vec<Vec<f32>>,
}

impl LatentSet {
    /// File layout: u32 patch count, u32 latent dim, then count*dim little-
    /// endian f32 values.
    pub fn read(path: impl AsRef<Path>) -> Result<Self, PredictorError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let bytes = fs::read(path)?;
        if bytes.len() < 8 {
            return Err(PredictorError::LatentFormat {
                path: display,
                msg: "missing count header".into(),
            });
        }
        let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = 8 + count * dim * 4;
        if bytes.len() != expected {
            return Err(PredictorError::LatentFormat {
                path: display,
                msg: format!(
                    "{count} vectors of dim {dim} need {expected} bytes, file has {}",
                    bytes.len()
                ),
            });
        }
        let mut vectors = Vec::with_capacity(count);
        let mut offset = 8;
        for _ in 0..count {
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(f32::from_le_bytes(
                    bytes[offset..offset + 4].try_into().unwrap(),
                ));
                offset += 4;
            }
            vectors.push(v);
        }
        Ok(LatentSet { dim, vectors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), PredictorError> {
        let mut bytes = Vec::with_capacity(8 + self.vectors.len() * self.dim * 4);
        bytes.extend_from_slice(&(self.vectors.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.vectors {
            for &x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    /// Checksum over the serialized latent bytes, as referenced by archives.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 + self.vectors.len() * self.dim * 4);
        bytes.extend_from_slice(&(self.vectors.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.vectors {
            for &x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        crate::container::fnv64(&bytes)
    }
}
