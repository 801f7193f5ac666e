//! Drift `F` and diffusion columns `σ_k` as superposition operators, the HJM
//! no-arbitrage drift, and a sampled check of the one-sided coefficient
//! bound
//!
//! ```text
//! −⟨F(h), h₋⟩ + ½ Σ_k ‖1_{h<0} σ_k(h)‖² ≤ C ‖h₋‖².
//! ```
//!
//! Mode indices are zero-based throughout.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function_space::{negative_energy, weighted_inner, Grid, GridFunction};

/// Pointwise diffusion coefficient `σ(x, r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModeFunction {
    /// `c`
    Constant { c: f64 },
    /// `c·r`
    Proportional { c: f64 },
    /// `c·min(r⁺, cap)`
    ProportionalCapped { c: f64, cap: f64 },
    /// `c·e^{−x}`
    ExponentialDecay { c: f64 },
    /// `c·e^{−x}·min(r⁺, cap)`
    LevelScaled { c: f64, cap: f64 },
    /// Level-independent nodal values; the tail reuses the last entry.
    Tabulated { values: Vec<f64> },
}

impl ModeFunction {
    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        let finite = |name: &'static str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::domain(name, v, "finite"))
            }
        };
        let positive_cap = |cap: f64| {
            if cap.is_finite() && cap > 0.0 {
                Ok(())
            } else {
                Err(Error::domain("cap", cap, "cap > 0"))
            }
        };
        match self {
            ModeFunction::Constant { c } | ModeFunction::Proportional { c } | ModeFunction::ExponentialDecay { c } => {
                finite("c", *c)
            }
            ModeFunction::ProportionalCapped { c, cap } | ModeFunction::LevelScaled { c, cap } => {
                finite("c", *c)?;
                positive_cap(*cap)
            }
            ModeFunction::Tabulated { values } => {
                if values.len() != n_nodes {
                    return Err(Error::LengthMismatch {
                        what: "tabulated mode",
                        expected: n_nodes,
                        got: values.len(),
                    });
                }
                match values.iter().position(|v| !v.is_finite()) {
                    Some(index) => Err(Error::NonFinite {
                        what: "tabulated mode",
                        index,
                    }),
                    None => Ok(()),
                }
            }
        }
    }

    /// `σ(x, r)` at node `node` (only tabulated modes use the index).
    #[inline]
    pub fn eval(&self, node: usize, x: f64, r: f64) -> f64 {
        match self {
            ModeFunction::Constant { c } => *c,
            ModeFunction::Proportional { c } => c * r,
            ModeFunction::ProportionalCapped { c, cap } => c * r.max(0.0).min(*cap),
            ModeFunction::ExponentialDecay { c } => c * (-x).exp(),
            ModeFunction::LevelScaled { c, cap } => c * (-x).exp() * r.max(0.0).min(*cap),
            ModeFunction::Tabulated { values } => values[node.min(values.len() - 1)],
        }
    }

    /// Multiplies the mode by `s`.
    pub fn scaled(&self, s: f64) -> ModeFunction {
        match self {
            ModeFunction::Constant { c } => ModeFunction::Constant { c: s * c },
            ModeFunction::Proportional { c } => ModeFunction::Proportional { c: s * c },
            ModeFunction::ProportionalCapped { c, cap } => ModeFunction::ProportionalCapped { c: s * c, cap: *cap },
            ModeFunction::ExponentialDecay { c } => ModeFunction::ExponentialDecay { c: s * c },
            ModeFunction::LevelScaled { c, cap } => ModeFunction::LevelScaled { c: s * c, cap: *cap },
            ModeFunction::Tabulated { values } => ModeFunction::Tabulated {
                values: values.iter().map(|v| s * v).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriftKind {
    Zero,
    /// `−c·u`
    LinearDecay {
        c: f64,
    },
    /// HJM no-arbitrage drift built from the diffusion modes.
    Hjm,
    /// Level-independent nodal values; the tail reuses the last entry.
    Tabulated {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct CoefficientModel {
    grid: Arc<Grid>,
    modes: Vec<ModeFunction>,
    drift: DriftKind,
    alpha_correction: f64,
}

impl CoefficientModel {
    pub fn new(grid: Arc<Grid>, modes: Vec<ModeFunction>, drift: DriftKind, alpha_correction: f64) -> Result<Self> {
        for mode in &modes {
            mode.validate(grid.n_nodes())?;
        }
        match &drift {
            DriftKind::Hjm if modes.is_empty() => {
                return Err(Error::InvalidModel(
                    "hjm drift needs at least one diffusion mode".into(),
                ))
            }
            DriftKind::LinearDecay { c } if !c.is_finite() => return Err(Error::domain("c", *c, "finite")),
            DriftKind::Tabulated { values } => {
                if values.len() != grid.n_nodes() {
                    return Err(Error::LengthMismatch {
                        what: "tabulated drift",
                        expected: grid.n_nodes(),
                        got: values.len(),
                    });
                }
                if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "tabulated drift",
                        index,
                    });
                }
            }
            _ => {}
        }
        if !alpha_correction.is_finite() {
            return Err(Error::domain("alpha_correction", alpha_correction, "finite"));
        }
        Ok(CoefficientModel {
            grid,
            modes,
            drift,
            alpha_correction,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn modes(&self) -> &[ModeFunction] {
        &self.modes
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn drift_kind(&self) -> &DriftKind {
        &self.drift
    }

    pub fn alpha_correction(&self) -> f64 {
        self.alpha_correction
    }

    fn check_grid(&self, u: &GridFunction) -> Result<()> {
        if Arc::ptr_eq(&self.grid, u.grid()) || *self.grid == **u.grid() {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// `F(t, u)` including the `+α_c·u` correction.
    pub fn eval_drift(&self, t: f64, u: &GridFunction) -> Result<GridFunction> {
        let mut f = self.eval_base_drift(t, u)?;
        if self.alpha_correction != 0.0 {
            f.axpy(self.alpha_correction, u)?;
        }
        Ok(f)
    }

    /// `F(t, u)` without the `+α_c·u` correction.
    pub fn eval_base_drift(&self, _t: f64, u: &GridFunction) -> Result<GridFunction> {
        self.check_grid(u)?;
        let mut out = GridFunction::zeros(Arc::clone(&self.grid));
        self.base_drift_into(u, &mut out, &mut Vec::new());
        Ok(out)
    }

    pub fn eval_diffusion_mode(&self, k: usize, _t: f64, u: &GridFunction) -> Result<GridFunction> {
        self.check_grid(u)?;
        let mode = self.modes.get(k).ok_or(Error::ModeIndex {
            index: k,
            count: self.modes.len(),
        })?;
        let mut out = GridFunction::zeros(Arc::clone(&self.grid));
        mode_into(mode, &self.grid, u, &mut out);
        Ok(out)
    }

    /// `Σ_k σ_k(x, u) ∫₀^x σ_k(y, u(y)) dy`, with the inner integral taken
    /// by cumulative trapezoid on the nodes.
    pub fn hjm_drift(&self, _t: f64, u: &GridFunction) -> Result<GridFunction> {
        self.check_grid(u)?;
        if self.modes.is_empty() {
            return Err(Error::InvalidModel(
                "hjm drift needs at least one diffusion mode".into(),
            ));
        }
        let mut out = GridFunction::zeros(Arc::clone(&self.grid));
        hjm_into(&self.modes, &self.grid, u, &mut out, &mut Vec::new());
        Ok(out)
    }

    /// Writes the base drift into `out`; `scratch` is reused between calls.
    pub(crate) fn base_drift_into(&self, u: &GridFunction, out: &mut GridFunction, scratch: &mut Vec<f64>) {
        match &self.drift {
            DriftKind::Zero => {
                out.values_mut().iter_mut().for_each(|v| *v = 0.0);
                out.set_tail(0.0);
            }
            DriftKind::LinearDecay { c } => {
                for (o, &v) in out.values_mut().iter_mut().zip(u.values()) {
                    *o = -c * v;
                }
                out.set_tail(-c * u.tail());
            }
            DriftKind::Hjm => hjm_into(&self.modes, &self.grid, u, out, scratch),
            DriftKind::Tabulated { values } => {
                out.values_mut().copy_from_slice(values);
                out.set_tail(values[values.len() - 1]);
            }
        }
    }

    pub(crate) fn diffusion_into(&self, k: usize, u: &GridFunction, out: &mut GridFunction) {
        mode_into(&self.modes[k], &self.grid, u, out);
    }

    /// `−⟨F(t,h), h₋⟩ + ½ Σ_k ‖1_{h<0} σ_k(h)‖²`.
    pub fn a3_functional(&self, t: f64, h: &GridFunction) -> Result<f64> {
        let neg = h.map(|v| (-v).max(0.0));
        let drift = self.eval_drift(t, h)?;
        let drift_term = -weighted_inner(&drift, &neg)?;
        let mut diffusion_term = 0.0;
        for k in 0..self.modes.len() {
            let s = self.eval_diffusion_mode(k, t, h)?;
            let masked = h.zip_map(&s, |v, s| if v < 0.0 { s } else { 0.0 })?;
            diffusion_term += masked.weighted_sum(|v| v * v);
        }
        Ok(drift_term + 0.5 * diffusion_term)
    }
}

fn mode_into(mode: &ModeFunction, grid: &Grid, u: &GridFunction, out: &mut GridFunction) {
    let n = grid.n_nodes();
    for ((o, &x), (i, &r)) in out
        .values_mut()
        .iter_mut()
        .zip(grid.nodes())
        .zip(u.values().iter().enumerate())
    {
        *o = mode.eval(i, x, r);
    }
    out.set_tail(mode.eval(n - 1, grid.x_max(), u.tail()));
}

fn hjm_into(modes: &[ModeFunction], grid: &Grid, u: &GridFunction, out: &mut GridFunction, sigma: &mut Vec<f64>) {
    let n = grid.n_nodes();
    let half_h = 0.5 * grid.spacing();
    sigma.resize(n, 0.0);
    let beta = out.values_mut();
    beta.iter_mut().for_each(|b| *b = 0.0);
    for mode in modes {
        for (i, (s, (&x, &r))) in sigma.iter_mut().zip(grid.nodes().iter().zip(u.values())).enumerate() {
            *s = mode.eval(i, x, r);
        }
        let mut integral = 0.0;
        beta[0] += sigma[0] * integral;
        for i in 1..n {
            integral += half_h * (sigma[i - 1] + sigma[i]);
            beta[i] += sigma[i] * integral;
        }
    }
    let last = beta[n - 1];
    out.set_tail(last);
}

/// Outcome of the sampled coefficient-bound check. The check only samples
/// curves `h`, so a clean report is evidence rather than proof.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct A3Report {
    pub samples: usize,
    pub worst_ratio: f64,
    pub estimated_c: f64,
    pub violations: usize,
    pub note: String,
}

impl A3Report {
    pub fn satisfied(&self) -> bool {
        self.violations == 0
    }
}

/// Curves whose negative part is below this norm count as "vanishing".
pub const VANISHING_NEGATIVE_NORM: f64 = 1e-12;

/// Default tolerance on the functional for a vanishing negative part.
pub const DEFAULT_A3_TOL: f64 = 1e-10;

/// Levels of the constant probes `h ≡ −ε`. The two smallest ones have
/// `‖h₋‖ ≤ 1e−12` for any `α ≥ 0.01` and therefore test the vanishing limit
/// directly.
pub const CONSTANT_PROBES: [f64; 6] = [1.0, 0.1, 0.01, 0.001, 1e-13, 1e-15];

/// Deterministic random curve generator. Each index draws from its own
/// ChaCha stream, so samples can be generated in any order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CurveSampler {
    pub seed: u64,
}

impl CurveSampler {
    pub fn new(seed: u64) -> Self {
        CurveSampler { seed }
    }

    fn rng(&self, index: u64, salt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(index);
        rng
    }

    fn bumps(rng: &mut ChaCha8Rng, x_max: f64) -> Vec<(f64, f64, f64)> {
        let count = rng.gen_range(1..=5);
        (0..count)
            .map(|_| {
                let centre = rng.gen_range(0.0..=x_max);
                let width = rng.gen_range(0.1..=5.0);
                let amp = rng.gen_range(-2.0..=2.0);
                (centre, width, amp)
            })
            .collect()
    }

    fn bump_curve(grid: &Arc<Grid>, bumps: &[(f64, f64, f64)]) -> GridFunction {
        let f = |x: f64| {
            bumps
                .iter()
                .map(|&(c, w, a)| a * (-((x - c) / w).powi(2)).exp())
                .sum::<f64>()
        };
        GridFunction::from_fn(Arc::clone(grid), f).expect("bump sums are finite")
    }

    /// Sum of 1–5 Gaussian bumps with signed amplitudes.
    pub fn signed_curve(&self, grid: &Arc<Grid>, index: u64) -> GridFunction {
        let mut rng = self.rng(index, 1);
        Self::bump_curve(grid, &Self::bumps(&mut rng, grid.x_max()))
    }

    /// Curve drawn from a mix of signed bump sums, bump sums whose negative
    /// part is scaled down by 10⁻¹…10⁻⁴, and nonnegative curves.
    pub fn sample(&self, grid: &Arc<Grid>, index: u64) -> GridFunction {
        let mut rng = self.rng(index, 2);
        let kind = rng.gen_range(0..3);
        let base = Self::bump_curve(grid, &Self::bumps(&mut rng, grid.x_max()));
        match kind {
            0 => base,
            1 => {
                let damp = 10f64.powi(-rng.gen_range(1..=4));
                base.map(|v| if v < 0.0 { damp * v } else { v })
            }
            _ => base.map(f64::abs),
        }
    }

    /// Smooth curve bounded below by a positive level; used as initial data.
    pub fn smooth_positive_curve(&self, grid: &Arc<Grid>, index: u64) -> GridFunction {
        let mut rng = self.rng(index, 3);
        let level = rng.gen_range(0.005..=0.05);
        let base = Self::bump_curve(grid, &Self::bumps(&mut rng, grid.x_max()));
        let scale = rng.gen_range(0.005..=0.02);
        base.map(|v| level + scale * v.abs())
    }

    /// Profile with values in `[0, 1]`: indicators of random intervals,
    /// squashed bump sums, or independent uniform node values.
    pub fn unit_profile(&self, grid: &Arc<Grid>, index: u64) -> GridFunction {
        let mut rng = self.rng(index, 4);
        let x_max = grid.x_max();
        match rng.gen_range(0..3) {
            0 => {
                let count = rng.gen_range(1..=4);
                let intervals: Vec<(f64, f64, f64)> = (0..count)
                    .map(|_| {
                        let a = rng.gen_range(0.0..=x_max);
                        let b = rng.gen_range(a..=x_max + 0.1 * x_max);
                        let level = if rng.gen_bool(0.5) {
                            1.0
                        } else {
                            rng.gen_range(0.0..=1.0)
                        };
                        (a, b, level)
                    })
                    .collect();
                let tail = intervals
                    .iter()
                    .filter(|&&(_, b, _)| b > x_max)
                    .fold(0.0f64, |m, &(_, _, l)| m.max(l));
                GridFunction::from_fn_with_tail(
                    Arc::clone(grid),
                    |x| {
                        intervals
                            .iter()
                            .filter(|&&(a, b, _)| a <= x && x <= b)
                            .fold(0.0f64, |m, &(_, _, l)| m.max(l))
                    },
                    tail,
                )
                .expect("levels are finite")
            }
            1 => {
                let base = Self::bump_curve(grid, &Self::bumps(&mut rng, x_max));
                base.map(|v| 1.0 / (1.0 + (-3.0 * v).exp()))
            }
            _ => {
                let values = (0..grid.n_nodes()).map(|_| rng.gen_range(0.0..=1.0)).collect();
                let tail = rng.gen_range(0.0..=1.0);
                GridFunction::new(Arc::clone(grid), values, tail).expect("uniform draws are finite")
            }
        }
    }
}

/// Samples the coefficient bound on `n_samples` random curves plus the
/// constant probes in [`CONSTANT_PROBES`].
pub fn estimate_a3_constant(
    model: &CoefficientModel,
    sampler: &CurveSampler,
    n_samples: usize,
    tol: f64,
) -> Result<A3Report> {
    if n_samples == 0 {
        return Err(Error::Precondition("n_samples must be at least 1".into()));
    }
    let grid = model.grid();
    let probes: Vec<GridFunction> = CONSTANT_PROBES
        .iter()
        .map(|&eps| GridFunction::constant(Arc::clone(grid), -eps))
        .collect();
    let evaluate = |h: &GridFunction| -> Result<(f64, bool)> {
        let phi = model.a3_functional(0.0, h)?;
        let neg = negative_energy(h);
        let violation = neg.sqrt() <= VANISHING_NEGATIVE_NORM && phi > tol;
        let ratio = if neg > 0.0 { phi / neg } else { f64::NEG_INFINITY };
        Ok((ratio, violation))
    };
    let random: Vec<(f64, bool)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| evaluate(&sampler.sample(grid, i)))
        .collect::<Result<_>>()?;
    let fixed: Vec<(f64, bool)> = probes.iter().map(evaluate).collect::<Result<_>>()?;

    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for (ratio, violation) in random.into_iter().chain(fixed) {
        worst = worst.max(ratio);
        violations += violation as usize;
    }
    if worst == f64::NEG_INFINITY {
        worst = 0.0;
    }
    Ok(A3Report {
        samples: n_samples + probes.len(),
        worst_ratio: worst,
        estimated_c: worst.max(0.0),
        violations,
        note: "sampled over random curves; evidence, not proof".into(),
    })
}
