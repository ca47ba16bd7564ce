//! Deterministic synthetic corpus: fields with vortex and filament features
//! over a smooth background, plus their ground-truth masks and event points.
//!
//! The generative model (also documented in the README):
//!
//! * background: a sum of low-frequency sinusoidal modes with seeded random
//!   amplitudes and phases, smooth enough that cheap predictors track it,
//!   plus a small per-cell noise texture standing in for the fine-grained
//!   variability of measured fields;
//! * vortices: nodal features; each follows a linear drift track across
//!   frames and stamps a Gaussian depression with a radial ripple, which
//!   concentrates hard-to-predict detail near the center;
//! * filament: an areal feature; a sinusoidal band sweeping across the
//!   domain with its own ripple texture.
//!
//! The truth mask covers vortex disks and the filament band. Feature sizes
//! are derived from the requested ROI coverage; everything downstream of the
//! seed is pure arithmetic, so a seed fully determines the corpus bytes.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{Field, GridError, Shape};
use crate::roi::RoiMask;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("coverage must be in (0, 0.9], got {0}")]
    BadCoverage(f64),
    #[error("synthetic shapes need at least 8x8 spatial extent, got {0}")]
    TooSmall(Shape),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Knobs of the synthetic generator.
#[derive(Clone, Copy, Debug)]
pub struct SynthParams {
    pub shape: Shape,
    /// Target fraction of cells covered by the truth mask.
    pub coverage: f64,
    pub vortex_count: usize,
    /// Peak amplitude of vortex features relative to the background.
    pub vortex_strength: f64,
    /// Amplitude of the per-cell background texture.
    pub noise: f64,
}

impl SynthParams {
    pub fn new(shape: Shape) -> Self {
        SynthParams {
            shape,
            coverage: 0.10,
            vortex_count: 3,
            vortex_strength: 6.0,
            noise: 0.08,
        }
    }
}

/// One generated corpus entry.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub field: Field,
    pub mask: RoiMask,
    /// Vortex centers per frame: (frame, u, v).
    pub tc_points: Vec<(usize, f64, f64)>,
    /// Achieved mask coverage.
    pub coverage: f64,
}

struct Vortex {
    u0: f64,
    v0: f64,
    du: f64,
    dv: f64,
    radius: f64,
    strength: f64,
    phase: f64,
}

/// Generate a field, truth mask, and event points from a seed.
pub fn generate(seed: u64, params: &SynthParams) -> Result<SynthOutput, SynthError> {
    let shape = params.shape;
    if shape.h < 8 || shape.w < 8 || shape.t == 0 {
        return Err(SynthError::TooSmall(shape));
    }
    if !(params.coverage > 0.0 && params.coverage <= 0.9) {
        return Err(SynthError::BadCoverage(params.coverage));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // split the coverage budget between the filament band and vortex disks
    let area = (shape.h * shape.w) as f64;
    let band_half_width = (params.coverage * 0.5 * shape.h as f64 / 2.0).max(1.0);
    let vortex_budget = params.coverage * 0.5 * area;
    let radius = (vortex_budget / (params.vortex_count.max(1) as f64 * std::f64::consts::PI))
        .sqrt()
        .max(2.0);

    // background modes, at most one cycle across each axis
    let modes: Vec<(f64, f64, f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.5..2.5),                      // amplitude
                rng.gen_range(0.2..0.8) / shape.t.max(2) as f64, // freq t
                rng.gen_range(0.3..1.0) / shape.h as f64,     // freq h
                rng.gen_range(0.3..1.0) / shape.w as f64,     // freq w
                rng.gen_range(0.0..std::f64::consts::TAU),    // phase
                rng.gen_range(0.0..std::f64::consts::TAU),    // phase 2
            )
        })
        .collect();

    let vortices: Vec<Vortex> = (0..params.vortex_count)
        .map(|_| {
            let margin = radius + 2.0;
            Vortex {
                u0: rng.gen_range(margin..shape.h as f64 - margin),
                v0: rng.gen_range(margin..shape.w as f64 - margin),
                du: rng.gen_range(-0.8..0.8),
                dv: rng.gen_range(-0.8..0.8),
                radius,
                strength: params.vortex_strength * rng.gen_range(0.7..1.3),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();

    let band_amp = rng.gen_range(0.15..0.3) * shape.h as f64;
    let band_freq = rng.gen_range(1.0..2.0) * std::f64::consts::TAU / shape.w as f64;
    let band_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let band_drift = rng.gen_range(-0.5..0.5);
    let band_strength = params.vortex_strength * 0.6;

    let mut samples = Vec::with_capacity(shape.len());
    let mut bits = vec![false; shape.len()];
    let mut tc_points = Vec::new();

    for t in 0..shape.t {
        let tf = t as f64;
        // vortex centers this frame, clamped inside the frame
        let centers: Vec<(f64, f64, &Vortex)> = vortices
            .iter()
            .map(|vx| {
                let u = (vx.u0 + vx.du * tf).clamp(0.0, shape.h as f64 - 1.0);
                let v = (vx.v0 + vx.dv * tf).clamp(0.0, shape.w as f64 - 1.0);
                (u, v, vx)
            })
            .collect();
        for (u, v, _) in &centers {
            tc_points.push((t, *u, *v));
        }
        let band_center = |w: f64| -> f64 {
            shape.h as f64 / 2.0
                + band_amp * (band_freq * w + band_phase).sin()
                + band_drift * tf
        };
        for h in 0..shape.h {
            let hf = h as f64;
            for w in 0..shape.w {
                let wf = w as f64;
                let mut value = 0.0;
                for &(amp, ft, fh, fw, p1, p2) in &modes {
                    value += amp
                        * (std::f64::consts::TAU * (ft * tf + fh * hf) + p1).sin()
                        * (std::f64::consts::TAU * (fw * wf) + p2).cos();
                }
                let mut in_roi = false;
                for &(cu, cv, vx) in &centers {
                    let d2 = (hf - cu) * (hf - cu) + (wf - cv) * (wf - cv);
                    let r2 = vx.radius * vx.radius;
                    if d2 <= r2 {
                        in_roi = true;
                    }
                    // depression plus ripple: detail the predictors miss
                    let bump = (-d2 / (2.0 * r2 / 4.0)).exp();
                    let ripple = (d2.sqrt() / vx.radius * 9.0 + vx.phase + 0.3 * tf).sin();
                    value -= vx.strength * bump * (1.0 + 0.5 * ripple);
                }
                let dist_band = (hf - band_center(wf)).abs();
                if dist_band <= band_half_width {
                    in_roi = true;
                }
                let band_bump = (-(dist_band * dist_band)
                    / (2.0 * band_half_width * band_half_width))
                    .exp();
                let band_ripple = (wf * 0.9 + hf * 0.7 + 0.5 * tf).sin();
                value += band_strength * band_bump * (1.0 + 0.4 * band_ripple);
                value += params.noise * (rng.gen::<f64>() * 2.0 - 1.0);

                samples.push(value as f32);
                if in_roi {
                    bits[shape.index(t, h, w)] = true;
                }
            }
        }
    }

    let field = Field::new("synthetic", shape, samples, None)?;
    let mask = RoiMask::new(shape, bits).expect("mask matches shape");
    let coverage = mask.count_set() as f64 / shape.len() as f64;
    Ok(SynthOutput {
        field,
        mask,
        tc_points,
        coverage,
    })
}
