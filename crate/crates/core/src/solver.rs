//! Splitting discretization of the mild formula
//!
//! ```text
//! u(t) = S(t)u₀ + ∫₀^t S(t−s)F(u) ds + ∫₀^t S(t−s)B(u) dW.
//! ```
//!
//! `dt` is locked to an integer multiple of the grid spacing, so `S(dt)` is
//! an exact node shift. Linear `α` terms (the damping of a shifted
//! semigroup and the `+α_c·u` drift correction) are integrated exactly as a
//! scalar factor `e^{(α_c − α_s)dt}` on the shift; the remaining drift and
//! the noise are explicit Euler–Maruyama.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientModel;
use crate::error::{Error, Result};
use crate::function_space::{norm, GridFunction, NormKind};
use crate::noise::NoiseConfig;
use crate::operators::{OperatorSuite, Resolvent};

const CONFORMING_TOL: f64 = 1e-9;

/// Thresholds for the running negativity fractions.
pub const NEGATIVITY_THRESHOLDS: [f64; 3] = [-1e-6, -1e-3, -1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// `u⁺ = S(dt)u + F(S(dt)u)dt + B(S(dt)u)ΔW`
    #[default]
    ShiftThenReact,
    /// `u⁺ = S(dt)[u + F(u)dt + B(u)ΔW]`
    ReactThenShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub dt: f64,
    pub t_final: f64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Run the `J_λ`-regularized problem.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub clip_negative: bool,
    /// Keep every `snapshot_stride`-th state (0 disables snapshots).
    #[serde(default)]
    pub snapshot_stride: usize,
    /// Constant `C` in `e^{−2Ct}‖u₋(t)‖²`.
    #[serde(default)]
    pub supermartingale_c: f64,
}

impl SolverConfig {
    pub fn new(dt: f64, t_final: f64) -> Self {
        SolverConfig {
            dt,
            t_final,
            scheme: Scheme::default(),
            lambda: None,
            clip_negative: false,
            snapshot_stride: 0,
            supermartingale_c: 0.0,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_lambda(mut self, lambda: Option<f64>) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_snapshot_stride(mut self, stride: usize) -> Self {
        self.snapshot_stride = stride;
        self
    }

    pub fn with_supermartingale_c(mut self, c: f64) -> Self {
        self.supermartingale_c = c;
        self
    }

    pub fn with_clip_negative(mut self, clip: bool) -> Self {
        self.clip_negative = clip;
        self
    }

    /// Number of steps and the node shift per step.
    pub fn conforming_steps(&self, spacing: f64) -> Result<(usize, usize)> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::domain("dt", self.dt, "dt > 0"));
        }
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return Err(Error::domain("t_final", self.t_final, "T > 0"));
        }
        let steps = (self.t_final / self.dt).round();
        if steps < 1.0 || (steps * self.dt - self.t_final).abs() > CONFORMING_TOL * self.t_final {
            return Err(Error::NonConformingStep(format!(
                "dt = {} does not divide T = {}",
                self.dt, self.t_final
            )));
        }
        let shift = (self.dt / spacing).round();
        if shift < 1.0 || (shift * spacing - self.dt).abs() > CONFORMING_TOL * self.dt {
            return Err(Error::NonConformingStep(format!(
                "dt = {} is not an integer multiple of the grid spacing h = {}",
                self.dt, spacing
            )));
        }
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::domain("lambda", l, "λ > 0"));
            }
        }
        if !(self.supermartingale_c.is_finite() && self.supermartingale_c >= 0.0) {
            return Err(Error::domain("supermartingale_c", self.supermartingale_c, "C ≥ 0"));
        }
        Ok((steps as usize, shift as usize))
    }
}

#[derive(Debug, Clone)]
pub struct PathResult {
    pub times: Vec<f64>,
    pub neg_energy: Vec<f64>,
    pub min_value: Vec<f64>,
    pub supermartingale_stat: Vec<f64>,
    /// `u(t, 0)`.
    pub short_rate: Vec<f64>,
    pub snapshots: Vec<(f64, GridFunction)>,
    pub stream_id: u64,
    pub clipped: bool,
}

impl PathResult {
    fn with_capacity(n: usize, stream_id: u64) -> Self {
        PathResult {
            times: Vec::with_capacity(n),
            neg_energy: Vec::with_capacity(n),
            min_value: Vec::with_capacity(n),
            supermartingale_stat: Vec::with_capacity(n),
            short_rate: Vec::with_capacity(n),
            snapshots: Vec::new(),
            stream_id,
            clipped: false,
        }
    }

    pub fn final_state(&self) -> Option<&GridFunction> {
        self.snapshots.last().map(|(_, u)| u)
    }
}

struct Reaction {
    incr: GridFunction,
    column: GridFunction,
    dw: Vec<f64>,
    scratch: Vec<f64>,
}

struct Workspace {
    moved: GridFunction,
    reaction: Reaction,
}

impl Workspace {
    fn new(u: &GridFunction, n_modes: usize) -> Self {
        Workspace {
            moved: u.clone(),
            reaction: Reaction {
                incr: u.clone(),
                column: u.clone(),
                dw: vec![0.0; n_modes],
                scratch: Vec::new(),
            },
        }
    }
}

/// Everything fixed across the paths of one run.
#[derive(Debug, Clone)]
pub struct Simulation {
    suite: OperatorSuite,
    model: CoefficientModel,
    cfg: SolverConfig,
    steps: usize,
    shift: usize,
    factor: f64,
}

impl Simulation {
    pub fn new(suite: OperatorSuite, model: CoefficientModel, cfg: SolverConfig) -> Result<Self> {
        if **suite.grid() != **model.grid() {
            return Err(Error::GridMismatch);
        }
        let (steps, shift) = cfg.conforming_steps(suite.grid().spacing())?;
        let shift_alpha = if suite.is_shifted() { suite.alpha() } else { 0.0 };
        let factor = ((model.alpha_correction() - shift_alpha) * cfg.dt).exp();
        Ok(Simulation {
            suite,
            model,
            cfg,
            steps,
            shift,
            factor,
        })
    }

    pub fn suite(&self) -> &OperatorSuite {
        &self.suite
    }

    pub fn model(&self) -> &CoefficientModel {
        &self.model
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn n_steps(&self) -> usize {
        self.steps
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|n| n as f64 * self.cfg.dt).collect()
    }

    fn check_noise(&self, noise: &NoiseConfig) -> Result<()> {
        if noise.n_modes != self.model.n_modes() {
            return Err(Error::LengthMismatch {
                what: "noise modes",
                expected: self.model.n_modes(),
                got: noise.n_modes,
            });
        }
        Ok(())
    }

    fn check_state(&self, u: &GridFunction) -> Result<()> {
        if **u.grid() != **self.suite.grid() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    /// `dst = factor · S(dt) src`.
    fn shift_into(&self, src: &GridFunction, dst: &mut GridFunction) {
        let n = src.values().len();
        let s = self.shift.min(n);
        let f = self.factor;
        let tail = src.tail();
        let out = dst.values_mut();
        for (i, o) in out.iter_mut().enumerate().take(n - s) {
            *o = f * src.values()[i + s];
        }
        for o in out.iter_mut().skip(n - s) {
            *o = f * tail;
        }
        dst.set_tail(f * tail);
    }

    /// `ws.incr = [J_λ](F(at)dt + Σ σ_k(at) ΔW_k)`.
    fn reaction_into(
        &self,
        at: &GridFunction,
        step_index: usize,
        noise: &NoiseConfig,
        resolvent: Option<&Resolvent>,
        ws: &mut Reaction,
    ) -> Result<()> {
        let dt = self.cfg.dt;
        self.model.base_drift_into(at, &mut ws.incr, &mut ws.scratch);
        ws.incr.values_mut().iter_mut().for_each(|v| *v *= dt);
        let tail = ws.incr.tail() * dt;
        ws.incr.set_tail(tail);
        if self.model.n_modes() > 0 {
            noise.fill_increments(dt, step_index as u64, &mut ws.dw)?;
            for k in 0..self.model.n_modes() {
                self.model.diffusion_into(k, at, &mut ws.column);
                let w = ws.dw[k];
                for (a, &c) in ws.incr.values_mut().iter_mut().zip(ws.column.values()) {
                    *a += w * c;
                }
                let tail = ws.incr.tail() + w * ws.column.tail();
                ws.incr.set_tail(tail);
            }
        }
        if let Some(r) = resolvent {
            ws.incr = r.apply(&ws.incr)?;
        }
        Ok(())
    }

    fn advance(
        &self,
        state: &mut GridFunction,
        step_index: usize,
        noise: &NoiseConfig,
        resolvent: Option<&Resolvent>,
        ws: &mut Workspace,
    ) -> Result<()> {
        match self.cfg.scheme {
            Scheme::ShiftThenReact => {
                self.shift_into(state, &mut ws.moved);
                self.reaction_into(&ws.moved, step_index, noise, resolvent, &mut ws.reaction)?;
                let incr = &ws.reaction.incr;
                for ((s, &m), &d) in state.values_mut().iter_mut().zip(ws.moved.values()).zip(incr.values()) {
                    *s = m + d;
                }
                state.set_tail(ws.moved.tail() + incr.tail());
            }
            Scheme::ReactThenShift => {
                self.reaction_into(state, step_index, noise, resolvent, &mut ws.reaction)?;
                let incr = &ws.reaction.incr;
                for (s, &d) in state.values_mut().iter_mut().zip(incr.values()) {
                    *s += d;
                }
                let tail = state.tail() + incr.tail();
                state.set_tail(tail);
                self.shift_into(state, &mut ws.moved);
                std::mem::swap(state, &mut ws.moved);
            }
        }
        Ok(())
    }

    /// One step from `state` at step `step_index`, regularized with
    /// `J_λ` when the config carries a `λ`.
    pub fn step(&self, state: &GridFunction, step_index: usize, noise: &NoiseConfig) -> Result<GridFunction> {
        self.check_state(state)?;
        self.check_noise(noise)?;
        let resolvent = self.cfg.lambda.map(|l| self.suite.resolvent(l)).transpose()?;
        let mut ws = Workspace::new(state, noise.n_modes);
        let mut next = state.clone();
        self.advance(&mut next, step_index, noise, resolvent.as_ref(), &mut ws)?;
        Ok(next)
    }

    pub fn simulate_path(&self, u0: &GridFunction, noise: &NoiseConfig) -> Result<PathResult> {
        self.run(u0, self.cfg.lambda, noise)
    }

    /// Path of the regularized problem: `J_λ` smooths `u₀`, the drift and
    /// every diffusion column. Uses the same increments as the plain path
    /// for the same `noise`.
    pub fn simulate_regularized(&self, u0: &GridFunction, lambda: f64, noise: &NoiseConfig) -> Result<PathResult> {
        self.run(u0, Some(lambda), noise)
    }

    fn run(&self, u0: &GridFunction, lambda: Option<f64>, noise: &NoiseConfig) -> Result<PathResult> {
        self.check_state(u0)?;
        self.check_noise(noise)?;
        let resolvent = lambda.map(|l| self.suite.resolvent(l)).transpose()?;
        let mut state = match &resolvent {
            Some(r) => r.apply(u0)?,
            None => u0.clone(),
        };
        let mut ws = Workspace::new(&state, noise.n_modes);
        let mut result = PathResult::with_capacity(self.steps + 1, noise.stream_id);
        let stride = self.cfg.snapshot_stride;
        self.record(&mut result, &mut state, 0)?;
        if stride > 0 {
            result.snapshots.push((0.0, state.clone()));
        }
        for n in 0..self.steps {
            self.advance(&mut state, n, noise, resolvent.as_ref(), &mut ws)?;
            self.record(&mut result, &mut state, n + 1)?;
            if stride > 0 && ((n + 1) % stride == 0 || n + 1 == self.steps) {
                result.snapshots.push(((n + 1) as f64 * self.cfg.dt, state.clone()));
            }
        }
        Ok(result)
    }

    fn record(&self, result: &mut PathResult, state: &mut GridFunction, step: usize) -> Result<()> {
        let t = step as f64 * self.cfg.dt;
        if !state.is_finite() {
            return Err(Error::BlowUp { step, time: t });
        }
        if self.cfg.clip_negative && state.min_value() < 0.0 {
            result.clipped = true;
            *state = state.map(|v| v.max(0.0));
        }
        let neg = crate::function_space::negative_energy(state);
        result.times.push(t);
        result.neg_energy.push(neg);
        result.min_value.push(state.min_value());
        result
            .supermartingale_stat
            .push((-2.0 * self.cfg.supermartingale_c * t).exp() * neg);
        result.short_rate.push(state.values()[0]);
        Ok(())
    }

    /// `n_paths` independent paths on streams `0..n_paths`, in stream order.
    pub fn simulate_ensemble(&self, u0: &GridFunction, n_paths: usize, seed: u64) -> Result<Vec<PathResult>> {
        let k = self.model.n_modes();
        (0..n_paths as u64)
            .into_par_iter()
            .map(|i| self.simulate_path(u0, &NoiseConfig::new(k, seed, i)))
            .collect()
    }

    /// Sup-in-time `L²₋α` distance between regularized paths and the plain
    /// path, all driven by the same increments.
    pub fn coupled_distances(&self, u0: &GridFunction, lambdas: &[f64], noise: &NoiseConfig) -> Result<Vec<f64>> {
        self.check_state(u0)?;
        self.check_noise(noise)?;
        let resolvents: Vec<Resolvent> = lambdas
            .iter()
            .map(|&l| self.suite.resolvent(l))
            .collect::<Result<_>>()?;
        let mut base = u0.clone();
        let mut regs: Vec<GridFunction> = resolvents.iter().map(|r| r.apply(u0)).collect::<Result<_>>()?;
        let mut ws = Workspace::new(u0, noise.n_modes);
        let distance =
            |a: &GridFunction, b: &GridFunction| -> Result<f64> { Ok(norm(&a.sub(b)?, NormKind::L2Weighted)) };
        let mut sup: Vec<f64> = regs.iter().map(|r| distance(r, &base)).collect::<Result<_>>()?;
        for n in 0..self.steps {
            self.advance(&mut base, n, noise, None, &mut ws)?;
            if !base.is_finite() {
                return Err(Error::BlowUp {
                    step: n + 1,
                    time: (n + 1) as f64 * self.cfg.dt,
                });
            }
            for ((reg, r), s) in regs.iter_mut().zip(&resolvents).zip(sup.iter_mut()) {
                self.advance(reg, n, noise, Some(r), &mut ws)?;
                *s = s.max(distance(reg, &base)?);
            }
        }
        Ok(sup)
    }

    /// Per-path and mean sup-in-time distances for each `λ`.
    pub fn lambda_convergence_study(
        &self,
        u0: &GridFunction,
        lambdas: &[f64],
        n_paths: usize,
        seed: u64,
    ) -> Result<LambdaStudy> {
        if lambdas.is_empty() || n_paths == 0 {
            return Err(Error::Precondition("need at least one λ and one path".into()));
        }
        if lambdas.iter().any(|&l| !(l.is_finite() && l > 0.0)) || lambdas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Precondition(
                "λ values must be positive and non-increasing".into(),
            ));
        }
        let k = self.model.n_modes();
        let per_path: Vec<Vec<f64>> = (0..n_paths as u64)
            .into_par_iter()
            .map(|i| self.coupled_distances(u0, lambdas, &NoiseConfig::new(k, seed, i)))
            .collect::<Result<_>>()?;
        let rows = lambdas
            .iter()
            .enumerate()
            .map(|(j, &lambda)| {
                let distances: Vec<f64> = per_path.iter().map(|p| p[j]).collect();
                let mean = distances.iter().sum::<f64>() / distances.len() as f64;
                LambdaRow {
                    lambda,
                    distances,
                    mean,
                }
            })
            .collect();
        Ok(LambdaStudy { rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub distances: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaStudy {
    pub rows: Vec<LambdaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub n_paths: usize,
    pub times: Vec<f64>,
    pub neg_energy_mean: Vec<f64>,
    pub neg_energy_p95: Vec<f64>,
    pub min_value_min: Vec<f64>,
    pub supermartingale_mean: Vec<f64>,
    pub supermartingale_stderr: Vec<f64>,
    /// Thresholds paired with the fraction of paths whose minimum has
    /// dropped below the threshold at some time up to `t`.
    pub frac_below: Vec<(f64, Vec<f64>)>,
    /// Fraction of paths with `u(t, 0) < 0`.
    pub short_rate_negative: Vec<f64>,
    pub any_clipped: bool,
}

impl EnsembleSummary {
    /// Running negativity fraction at `threshold` at the final time.
    pub fn final_fraction_below(&self, threshold: f64) -> Option<f64> {
        self.frac_below
            .iter()
            .find(|(t, _)| *t == threshold)
            .and_then(|(_, v)| v.last().copied())
    }
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn ensemble_stats(paths: &[PathResult], c: f64) -> Result<EnsembleSummary> {
    let first = paths
        .first()
        .ok_or_else(|| Error::Precondition("ensemble is empty".into()))?;
    if !(c.is_finite() && c >= 0.0) {
        return Err(Error::domain("C", c, "C ≥ 0"));
    }
    if paths.iter().any(|p| p.times != first.times) {
        return Err(Error::Precondition("paths do not share a time grid".into()));
    }
    let n = paths.len() as f64;
    let len = first.times.len();
    let mut summary = EnsembleSummary {
        n_paths: paths.len(),
        times: first.times.clone(),
        neg_energy_mean: Vec::with_capacity(len),
        neg_energy_p95: Vec::with_capacity(len),
        min_value_min: Vec::with_capacity(len),
        supermartingale_mean: Vec::with_capacity(len),
        supermartingale_stderr: Vec::with_capacity(len),
        frac_below: NEGATIVITY_THRESHOLDS
            .iter()
            .map(|&t| (t, Vec::with_capacity(len)))
            .collect(),
        short_rate_negative: Vec::with_capacity(len),
        any_clipped: paths.iter().any(|p| p.clipped),
    };
    let mut running_min: Vec<f64> = vec![f64::INFINITY; paths.len()];
    let mut column = vec![0.0; paths.len()];
    for (j, &t) in first.times.iter().enumerate() {
        for (c_, p) in column.iter_mut().zip(paths) {
            *c_ = p.neg_energy[j];
        }
        summary.neg_energy_mean.push(column.iter().sum::<f64>() / n);
        column.sort_by(f64::total_cmp);
        summary.neg_energy_p95.push(quantile_sorted(&column, 0.95));

        let discount = (-2.0 * c * t).exp();
        let (mut s1, mut s2) = (0.0, 0.0);
        for p in paths {
            let m = discount * p.neg_energy[j];
            s1 += m;
            s2 += m * m;
        }
        let mean = s1 / n;
        let var = if paths.len() > 1 {
            ((s2 - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        summary.supermartingale_mean.push(mean);
        summary.supermartingale_stderr.push((var / n).sqrt());

        let mut min_all = f64::INFINITY;
        let mut short_neg = 0usize;
        for (rm, p) in running_min.iter_mut().zip(paths) {
            *rm = rm.min(p.min_value[j]);
            min_all = min_all.min(p.min_value[j]);
            short_neg += (p.short_rate[j] < 0.0) as usize;
        }
        summary.min_value_min.push(min_all);
        summary.short_rate_negative.push(short_neg as f64 / n);
        for (threshold, series) in summary.frac_below.iter_mut() {
            let count = running_min.iter().filter(|&&m| m < *threshold).count();
            series.push(count as f64 / n);
        }
    }
    Ok(summary)
}
