//! Truncated cylindrical Wiener increments.
//!
//! Increments are counter-based: the ChaCha8 stream is keyed by `seed` and
//! `stream_id`, and the word position is derived from the step index, so any
//! `(seed, stream, step)` can be generated independently of the others.
//! Gaussians use the Box–Muller transform on pairs of 53-bit uniforms.

use std::f64::consts::TAU;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientModel;
use crate::error::{Error, Result};
use crate::function_space::GridFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub n_modes: usize,
    pub seed: u64,
    pub stream_id: u64,
}

impl NoiseConfig {
    pub fn new(n_modes: usize, seed: u64, stream_id: u64) -> Self {
        NoiseConfig {
            n_modes,
            seed,
            stream_id,
        }
    }

    pub fn with_stream(self, stream_id: u64) -> Self {
        NoiseConfig { stream_id, ..self }
    }

    /// 32-bit words consumed per step: two 64-bit draws per Gaussian pair.
    fn words_per_step(&self) -> u128 {
        4 * self.n_modes.div_ceil(2) as u128
    }

    /// Fills `out` with `K` independent `N(0, dt)` draws for `step_index`.
    pub fn fill_increments(&self, dt: f64, step_index: u64, out: &mut [f64]) -> Result<()> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::domain("dt", dt, "dt > 0"));
        }
        if out.len() != self.n_modes {
            return Err(Error::LengthMismatch {
                what: "increment buffer",
                expected: self.n_modes,
                got: out.len(),
            });
        }
        if self.n_modes == 0 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos(step_index as u128 * self.words_per_step());
        let sd = dt.sqrt();
        for pair in out.chunks_mut(2) {
            // u1 ∈ (0, 1], u2 ∈ [0, 1)
            let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
            let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (TAU * u2).sin_cos();
            pair[0] = sd * r * c;
            if pair.len() > 1 {
                pair[1] = sd * r * s;
            }
        }
        Ok(())
    }
}

pub fn sample_increments(cfg: &NoiseConfig, dt: f64, step_index: u64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; cfg.n_modes];
    cfg.fill_increments(dt, step_index, &mut out)?;
    Ok(out)
}

/// `Σ_k σ_k(t, u) ΔW_k`.
pub fn apply_diffusion_increment(
    model: &CoefficientModel,
    t: f64,
    u: &GridFunction,
    dw: &[f64],
) -> Result<GridFunction> {
    if dw.len() != model.n_modes() {
        return Err(Error::LengthMismatch {
            what: "noise increment",
            expected: model.n_modes(),
            got: dw.len(),
        });
    }
    let mut out = GridFunction::zeros(std::sync::Arc::clone(model.grid()));
    for (k, &w) in dw.iter().enumerate() {
        let column = model.eval_diffusion_mode(k, t, u)?;
        out.axpy(w, &column)?;
    }
    Ok(out)
}
