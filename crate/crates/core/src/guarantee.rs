//! Residual basis training and the per-patch correction loop that enforces
//! the l2 error bound.
//!
//! The basis is the eigenvector set of the uncentered second-moment matrix
//! of the prediction residuals, columns sorted by descending eigenvalue.
//! Projecting a residual onto the basis, keeping the largest-magnitude
//! coefficients, quantizing them, and adding them back to the prediction
//! drives the remaining error below the bound; a raw fallback covers the
//! (rare) patches where quantization noise alone would exceed it, so the
//! bound holds unconditionally.
//!
//! Basis columns are snapped to f32 the moment they are trained, and every
//! candidate reconstruction is evaluated through the same code path the
//! decoder uses, so the error the encoder certifies is the error of the
//! bytes a decoder will actually produce.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::entropy::{EntropyError, QuantizedValue, Quantizer};

#[derive(Debug, Error)]
pub enum GuaranteeError {
    #[error("residual has {got} components, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("training needs at least 2 residual samples, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("error bound must be positive and finite, got {0}")]
    BadBound(f64),
    #[error("basis stores {stored} of {dim} columns; requested {requested}")]
    BadTruncation {
        dim: usize,
        stored: usize,
        requested: usize,
    },
    #[error("correction index {index} out of range for {stored} stored columns")]
    IndexOutOfRange { index: u32, stored: usize },
    #[error("correction indices must be strictly ascending")]
    UnsortedIndices,
    #[error("fallback payload has {got} samples, expected {expected}")]
    FallbackLength { expected: usize, got: usize },
    #[error(transparent)]
    Entropy(#[from] EntropyError),
}

/// Orthonormal residual basis, eigenvalue-sorted descending.
///
/// Matrix entries are exactly representable in f32 (the archive precision),
/// held as f64 so projection and reconstruction arithmetic is identical on
/// both sides of the codec.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBasis {
    dim: usize,
    stored: usize,
    /// All `dim` eigenvalues, non-increasing, floored at zero.
    eigenvalues: Vec<f64>,
    /// Column-major, `stored * dim` entries.
    columns: Vec<f64>,
    trained_on: u64,
}

impl ResidualBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of columns kept (may be fewer than `dim` when truncated).
    pub fn stored(&self) -> usize {
        self.stored
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn trained_on(&self) -> u64 {
        self.trained_on
    }

    #[inline]
    pub fn column(&self, k: usize) -> &[f64] {
        &self.columns[k * self.dim..(k + 1) * self.dim]
    }

    /// f32 images of the column entries, column-major (the archive form).
    pub fn column_bits(&self) -> Vec<f32> {
        self.columns.iter().map(|&v| v as f32).collect()
    }

    /// The identity basis; handy for tests and as a degenerate default.
    pub fn identity(dim: usize) -> Self {
        let mut columns = vec![0.0; dim * dim];
        for k in 0..dim {
            columns[k * dim + k] = 1.0;
        }
        ResidualBasis {
            dim,
            stored: dim,
            eigenvalues: vec![0.0; dim],
            columns,
            trained_on: 0,
        }
    }

    /// Rebuild from archive data. Validates extents and finiteness only;
    /// orthonormality is a property of trained bases, not a decode gate.
    pub fn from_parts(
        dim: usize,
        stored: usize,
        eigenvalues: Vec<f64>,
        columns_f32: &[f32],
        trained_on: u64,
    ) -> Result<Self, GuaranteeError> {
        if dim == 0 || stored == 0 || stored > dim {
            return Err(GuaranteeError::BadTruncation {
                dim,
                stored,
                requested: stored,
            });
        }
        if eigenvalues.len() != dim {
            return Err(GuaranteeError::DimMismatch {
                expected: dim,
                got: eigenvalues.len(),
            });
        }
        if columns_f32.len() != stored * dim {
            return Err(GuaranteeError::DimMismatch {
                expected: stored * dim,
                got: columns_f32.len(),
            });
        }
        if columns_f32.iter().any(|v| !v.is_finite())
            || eigenvalues.iter().any(|v| !v.is_finite())
        {
            return Err(GuaranteeError::NonFinite("basis"));
        }
        Ok(ResidualBasis {
            dim,
            stored,
            eigenvalues,
            columns: columns_f32.iter().map(|&v| v as f64).collect(),
            trained_on,
        })
    }

    /// Keep only the first `stored` columns.
    pub fn truncate(mut self, stored: usize) -> Result<Self, GuaranteeError> {
        if stored == 0 || stored > self.stored {
            return Err(GuaranteeError::BadTruncation {
                dim: self.dim,
                stored: self.stored,
                requested: stored,
            });
        }
        self.columns.truncate(stored * self.dim);
        self.stored = stored;
        Ok(self)
    }

    /// Coefficients of `residual` against the stored columns.
    pub fn project(&self, residual: &[f64]) -> Result<Vec<f64>, GuaranteeError> {
        if residual.len() != self.dim {
            return Err(GuaranteeError::DimMismatch {
                expected: self.dim,
                got: residual.len(),
            });
        }
        Ok((0..self.stored)
            .map(|k| dot(self.column(k), residual))
            .collect())
    }

    /// Largest |(U^T U - I)| entry over the stored columns.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.stored {
            for b in a..self.stored {
                let d = dot(self.column(a), self.column(b));
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((d - target).abs());
            }
        }
        worst
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Streaming accumulator for the residual second-moment matrix.
///
/// Partial accumulators merge associatively, so workers can each feed one
/// and the results combine into the same matrix regardless of split.
#[derive(Clone, Debug)]
pub struct MomentAccumulator {
    dim: usize,
    count: u64,
    /// Lower triangle, row-major: entry (i, j <= i) at i(i+1)/2 + j.
    tri: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        MomentAccumulator {
            dim,
            count: 0,
            tri: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, residual: &[f64]) -> Result<(), GuaranteeError> {
        if residual.len() != self.dim {
            return Err(GuaranteeError::DimMismatch {
                expected: self.dim,
                got: residual.len(),
            });
        }
        if residual.iter().any(|v| !v.is_finite()) {
            return Err(GuaranteeError::NonFinite("residual sample"));
        }
        let mut idx = 0;
        for i in 0..self.dim {
            let ri = residual[i];
            for j in 0..=i {
                self.tri[idx] += ri * residual[j];
                idx += 1;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        debug_assert_eq!(self.dim, other.dim);
        for (a, b) in self.tri.iter_mut().zip(&other.tri) {
            *a += b;
        }
        self.count += other.count;
    }
}

/// Train the residual basis from sample vectors.
///
/// Deterministic for a given input order and independent of worker count:
/// samples are accumulated in fixed-size chunks that merge in chunk order.
pub fn train_basis(residuals: &[Vec<f64>], dim: usize) -> Result<ResidualBasis, GuaranteeError> {
    if residuals.len() < 2 {
        return Err(GuaranteeError::TooFewSamples(residuals.len()));
    }
    const CHUNK: usize = 64;
    let partials: Vec<Result<MomentAccumulator, GuaranteeError>> = residuals
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = MomentAccumulator::new(dim);
            for r in chunk {
                acc.push(r)?;
            }
            Ok(acc)
        })
        .collect();
    let mut acc = MomentAccumulator::new(dim);
    for partial in partials {
        acc.merge(&partial?);
    }
    train_basis_from_moments(&acc)
}

/// Eigendecompose an accumulated second-moment matrix into a basis.
pub fn train_basis_from_moments(
    acc: &MomentAccumulator,
) -> Result<ResidualBasis, GuaranteeError> {
    if acc.count < 2 {
        return Err(GuaranteeError::TooFewSamples(acc.count as usize));
    }
    let dim = acc.dim;
    let n = acc.count as f64;
    let mut mat = DMatrix::<f64>::zeros(dim, dim);
    let mut idx = 0;
    for i in 0..dim {
        for j in 0..=i {
            let v = acc.tri[idx] / n;
            mat[(i, j)] = v;
            mat[(j, i)] = v;
            idx += 1;
        }
    }
    let eig = SymmetricEigen::new(mat);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut eigenvalues = Vec::with_capacity(dim);
    let mut columns = vec![0.0f64; dim * dim];
    for (k, &src) in order.iter().enumerate() {
        eigenvalues.push(eig.eigenvalues[src].max(0.0));
        let col = &mut columns[k * dim..(k + 1) * dim];
        for i in 0..dim {
            // snap to archive precision before anything downstream sees it
            col[i] = (eig.eigenvectors[(i, src)] as f32) as f64;
        }
        // deterministic sign: first nonzero entry of the stored column is
        // positive
        if let Some(first) = col.iter().find(|v| **v != 0.0) {
            if *first < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }

    Ok(ResidualBasis {
        dim,
        stored: dim,
        eigenvalues,
        columns,
        trained_on: acc.count,
    })
}

/// c = U^T (x - x_r).
pub fn project(
    x: &[f64],
    x_r: &[f64],
    basis: &ResidualBasis,
) -> Result<Vec<f64>, GuaranteeError> {
    if x.len() != x_r.len() {
        return Err(GuaranteeError::DimMismatch {
            expected: x.len(),
            got: x_r.len(),
        });
    }
    let residual: Vec<f64> = x.iter().zip(x_r).map(|(a, b)| a - b).collect();
    basis.project(&residual)
}

/// Per-patch correction: which coefficients were kept and at what cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Correction {
    /// (column index, coded coefficient), strictly ascending by index.
    pub entries: Vec<(u32, QuantizedValue)>,
    /// Raw patch samples when the projection could not meet the bound.
    pub fallback: Option<Vec<f32>>,
    /// Masked l2 error of the reconstruction this correction certifies.
    pub achieved_error: f64,
}

impl Correction {
    pub fn empty(achieved_error: f64) -> Self {
        Correction {
            entries: Vec::new(),
            fallback: None,
            achieved_error,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.fallback.is_none()
    }

    pub fn selected(&self) -> usize {
        self.entries.len()
    }
}

/// l2 distance between `x` and the f32 candidate `y`, over `valid` cells.
pub fn masked_l2(x: &[f64], y: &[f32], valid: Option<&[bool]>) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut sum = 0.0;
    for i in 0..x.len() {
        if valid.map_or(true, |m| m[i]) {
            let d = x[i] - y[i] as f64;
            sum += d * d;
        }
    }
    sum.sqrt()
}

fn round32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Decode-side reconstruction: x_g = x_r + U_s c_q, rounded to the output
/// precision. The encoder certifies bounds against exactly this output.
pub fn apply_correction(
    x_r: &[f64],
    basis: &ResidualBasis,
    corr: &Correction,
    quantizer: &Quantizer,
) -> Result<Vec<f32>, GuaranteeError> {
    if let Some(samples) = &corr.fallback {
        if samples.len() != basis.dim() {
            return Err(GuaranteeError::FallbackLength {
                expected: basis.dim(),
                got: samples.len(),
            });
        }
        return Ok(samples.clone());
    }
    if x_r.len() != basis.dim() {
        return Err(GuaranteeError::DimMismatch {
            expected: basis.dim(),
            got: x_r.len(),
        });
    }
    let mut xg = x_r.to_vec();
    let mut prev: Option<u32> = None;
    for &(index, qv) in &corr.entries {
        if prev.map_or(false, |p| p >= index) {
            return Err(GuaranteeError::UnsortedIndices);
        }
        prev = Some(index);
        if index as usize >= basis.stored() {
            return Err(GuaranteeError::IndexOutOfRange {
                index,
                stored: basis.stored(),
            });
        }
        let value = quantizer.decode(qv);
        let col = basis.column(index as usize);
        for i in 0..xg.len() {
            xg[i] += value * col[i];
        }
    }
    Ok(round32(&xg))
}

fn check_inputs(x: &[f64], x_r: &[f64], dim: usize, tau: f64) -> Result<(), GuaranteeError> {
    if x.len() != dim || x_r.len() != dim {
        return Err(GuaranteeError::DimMismatch {
            expected: dim,
            got: if x.len() != dim { x.len() } else { x_r.len() },
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GuaranteeError::NonFinite("patch values"));
    }
    if x_r.iter().any(|v| !v.is_finite()) {
        return Err(GuaranteeError::NonFinite("prediction"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(GuaranteeError::BadBound(tau));
    }
    Ok(())
}

/// Magnitude-descending coefficient order, ties on lower index.
fn selection_order(coeffs: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..coeffs.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (
            coeffs[a as usize] * coeffs[a as usize],
            coeffs[b as usize] * coeffs[b as usize],
        );
        kb.partial_cmp(&ka).unwrap().then(a.cmp(&b))
    });
    order
}

/// Correct one patch so its masked l2 error falls below `tau`.
///
/// Coefficients are taken greedily in order of error contribution; the
/// count grows until the certified error of the decoder's reconstruction
/// meets the bound. If even every stored column cannot get there (possible
/// under coarse quantization or a truncated basis), the raw patch is kept
/// verbatim instead, so the bound holds unconditionally.
///
/// Returns the decoded patch alongside the correction record.
pub fn correct_patch(
    x: &[f64],
    x_r: &[f64],
    basis: &ResidualBasis,
    tau: f64,
    quantizer: &Quantizer,
    valid: Option<&[bool]>,
) -> Result<(Vec<f32>, Correction), GuaranteeError> {
    check_inputs(x, x_r, basis.dim(), tau)?;
    let xr32 = round32(x_r);
    let base_err = masked_l2(x, &xr32, valid);
    if base_err <= tau {
        return Ok((xr32, Correction::empty(base_err)));
    }

    let residual: Vec<f64> = x.iter().zip(x_r).map(|(a, b)| a - b).collect();
    let coeffs = basis.project(&residual)?;
    let order = selection_order(&coeffs);

    // Incremental scan: candidates accumulate in selection order, which is
    // cheap; any candidate that clears the bound is re-checked through the
    // canonical decode path (ascending index order) before being accepted.
    let mut running = x_r.to_vec();
    let mut chosen: Vec<(u32, QuantizedValue)> = Vec::new();
    for &k in &order {
        let qv = quantizer.code(coeffs[k as usize]);
        let value = quantizer.decode(qv);
        let col = basis.column(k as usize);
        for i in 0..running.len() {
            running[i] += value * col[i];
        }
        chosen.push((k, qv));
        let scan_err = masked_l2(x, &round32(&running), valid);
        if scan_err <= tau {
            let mut entries = chosen.clone();
            entries.sort_by_key(|e| e.0);
            let corr = Correction {
                entries,
                fallback: None,
                achieved_error: 0.0,
            };
            let xg = apply_correction(x_r, basis, &corr, quantizer)?;
            let err = masked_l2(x, &xg, valid);
            if err <= tau {
                return Ok((
                    xg,
                    Correction {
                        achieved_error: err,
                        ..corr
                    },
                ));
            }
            // summation-order noise pushed the canonical form back over the
            // bound; keep selecting
        }
    }

    let samples = round32(x);
    let err = masked_l2(x, &samples, valid);
    let corr = Correction {
        entries: Vec::new(),
        fallback: Some(samples.clone()),
        achieved_error: err,
    };
    Ok((samples, corr))
}

/// Literal reference form of [`correct_patch`]: re-derives the candidate
/// reconstruction from scratch at every count. Same outputs, quadratic
/// cost; kept for cross-checking the incremental path.
pub fn correct_patch_reference(
    x: &[f64],
    x_r: &[f64],
    basis: &ResidualBasis,
    tau: f64,
    quantizer: &Quantizer,
    valid: Option<&[bool]>,
) -> Result<(Vec<f32>, Correction), GuaranteeError> {
    check_inputs(x, x_r, basis.dim(), tau)?;
    let xr32 = round32(x_r);
    let base_err = masked_l2(x, &xr32, valid);
    if base_err <= tau {
        return Ok((xr32, Correction::empty(base_err)));
    }

    let residual: Vec<f64> = x.iter().zip(x_r).map(|(a, b)| a - b).collect();
    let coeffs = basis.project(&residual)?;
    let order = selection_order(&coeffs);

    for m in 1..=order.len() {
        let mut entries: Vec<(u32, QuantizedValue)> = order[..m]
            .iter()
            .map(|&k| (k, quantizer.code(coeffs[k as usize])))
            .collect();
        entries.sort_by_key(|e| e.0);
        let corr = Correction {
            entries,
            fallback: None,
            achieved_error: 0.0,
        };
        let xg = apply_correction(x_r, basis, &corr, quantizer)?;
        let err = masked_l2(x, &xg, valid);
        if err <= tau {
            return Ok((
                xg,
                Correction {
                    achieved_error: err,
                    ..corr
                },
            ));
        }
    }

    let samples = round32(x);
    let err = masked_l2(x, &samples, valid);
    let corr = Correction {
        entries: Vec::new(),
        fallback: Some(samples.clone()),
        achieved_error: err,
    };
    Ok((samples, corr))
}
