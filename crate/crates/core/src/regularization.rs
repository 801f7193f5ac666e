//! Smoothed negative-part energies and the inequality checks behind the
//! positivity argument.
//!
//! The family `g_n` is fixed by its second derivative
//!
//! ```text
//! g_n''(r) = 0 (r ≥ 0),   −n·r (−1/n ≤ r < 0),   1 (r < −1/n)
//! ```
//!
//! with `g_n(0) = g_n'(0) = 0`. Its pointwise limit is `(r⁻)²/2`, and
//! `|g_n'(r) + r⁻| ≤ 1/(2n)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function_space::{norm, weighted_inner, GridFunction, NormKind};
use crate::noise::NoiseConfig;
use crate::operators::OperatorSuite;

/// `g_n^{(order)}(r)` for `order ∈ {0, 1, 2}`.
pub fn gn_eval(n: u32, r: f64, order: u8) -> Result<f64> {
    if n == 0 {
        return Err(Error::Precondition("g_n needs n ≥ 1".into()));
    }
    let g = SmoothNegEnergy::new(n)?;
    match order {
        0 => Ok(g.value(r)),
        1 => Ok(g.first(r)),
        2 => Ok(g.second(r)),
        _ => Err(Error::Precondition(format!(
            "derivative order must be 0, 1 or 2, got {order}"
        ))),
    }
}

/// `G_n(φ) = ½ ∫ g_n(φ) e^{−αx} dx` and its derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothNegEnergy {
    n: f64,
}

impl SmoothNegEnergy {
    pub fn new(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::Precondition("g_n needs n ≥ 1".into()));
        }
        Ok(SmoothNegEnergy { n: n as f64 })
    }

    #[inline]
    pub fn value(&self, r: f64) -> f64 {
        let n = self.n;
        if r >= 0.0 {
            0.0
        } else if r >= -1.0 / n {
            -n * r * r * r / 6.0
        } else {
            0.5 * r * r + r / (2.0 * n) + 1.0 / (6.0 * n * n)
        }
    }

    #[inline]
    pub fn first(&self, r: f64) -> f64 {
        let n = self.n;
        if r >= 0.0 {
            0.0
        } else if r >= -1.0 / n {
            -0.5 * n * r * r
        } else {
            r + 1.0 / (2.0 * n)
        }
    }

    #[inline]
    pub fn second(&self, r: f64) -> f64 {
        let n = self.n;
        if r >= 0.0 {
            0.0
        } else if r >= -1.0 / n {
            -n * r
        } else {
            1.0
        }
    }

    pub fn functional(&self, f: &GridFunction) -> f64 {
        0.5 * f.weighted_sum(|v| self.value(v))
    }

    /// `DG_n(v)h = ½ ∫ g_n'(v) h dμ`.
    pub fn derivative(&self, v: &GridFunction, h: &GridFunction) -> Result<f64> {
        let d = v.map(|r| self.first(r));
        Ok(0.5 * weighted_inner(&d, h)?)
    }

    /// `½ Σ_k D²G_n(v)(φ_k, φ_k) = ¼ Σ_k ∫ g_n''(v) φ_k² dμ`.
    pub fn trace_term(&self, v: &GridFunction, columns: &[GridFunction]) -> Result<f64> {
        let d2 = v.map(|r| self.second(r));
        let mut total = 0.0;
        for c in columns {
            let sq = c.map(|x| x * x);
            total += weighted_inner(&d2, &sq)?;
        }
        Ok(0.25 * total)
    }
}

pub fn smooth_energy_functional(n: u32, f: &GridFunction) -> Result<f64> {
    Ok(SmoothNegEnergy::new(n)?.functional(f))
}

/// Itô-formula residual `|R(t_k)|` along the explicit A-free dynamics
/// `v⁺ = v + f(t, v)dt + Σ_k Φ_k(t, v) ΔW_k`, with increments supplied
/// step by step.
pub fn ito_residual_with_increments<D, S>(
    n: u32,
    v0: &GridFunction,
    drift: D,
    diffusion: S,
    dt: f64,
    increments: &[Vec<f64>],
) -> Result<Vec<f64>>
where
    D: Fn(f64, &GridFunction) -> GridFunction,
    S: Fn(f64, &GridFunction) -> Vec<GridFunction>,
{
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::domain("dt", dt, "dt > 0"));
    }
    let g = SmoothNegEnergy::new(n)?;
    let g0 = g.functional(v0);
    let mut v = v0.clone();
    let mut predicted = g0;
    let mut out = Vec::with_capacity(increments.len() + 1);
    out.push(0.0);
    for (k, dw) in increments.iter().enumerate() {
        let t = k as f64 * dt;
        let f = drift(t, &v);
        let columns = diffusion(t, &v);
        if columns.len() != dw.len() {
            return Err(Error::LengthMismatch {
                what: "noise increment",
                expected: columns.len(),
                got: dw.len(),
            });
        }
        let mut noise = GridFunction::zeros(Arc::clone(v.grid()));
        for (c, &w) in columns.iter().zip(dw) {
            noise.axpy(w, c)?;
        }
        predicted += g.derivative(&v, &f)? * dt + g.trace_term(&v, &columns)? * dt + g.derivative(&v, &noise)?;
        v.axpy(dt, &f)?;
        v.axpy(1.0, &noise)?;
        out.push((g.functional(&v) - predicted).abs());
    }
    Ok(out)
}

/// As [`ito_residual_with_increments`], drawing `round(T/dt)` steps of
/// increments from `noise`.
pub fn ito_residual<D, S>(
    n: u32,
    v0: &GridFunction,
    drift: D,
    diffusion: S,
    noise: &NoiseConfig,
    dt: f64,
    t_final: f64,
) -> Result<Vec<f64>>
where
    D: Fn(f64, &GridFunction) -> GridFunction,
    S: Fn(f64, &GridFunction) -> Vec<GridFunction>,
{
    if !(t_final.is_finite() && t_final > 0.0) {
        return Err(Error::domain("t_final", t_final, "T > 0"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::domain("dt", dt, "dt > 0"));
    }
    let steps = (t_final / dt).round() as u64;
    let increments = (0..steps)
        .map(|s| crate::noise::sample_increments(noise, dt, s))
        .collect::<Result<Vec<_>>>()?;
    ito_residual_with_increments(n, v0, drift, diffusion, dt, &increments)
}

/// `|R(T)|` for the deterministic dynamics `v' = c` from `v0`, one entry
/// per `dt`.
pub fn ito_deterministic_study(
    n: u32,
    v0: &GridFunction,
    c: f64,
    dts: &[f64],
    t_final: f64,
) -> Result<Vec<(f64, f64)>> {
    let f = v0.map(|_| c);
    dts.iter()
        .map(|&dt| {
            let steps = conforming_steps(dt, t_final)?;
            let r =
                ito_residual_with_increments(n, v0, |_, _| f.clone(), |_, _| Vec::new(), dt, &vec![Vec::new(); steps])?;
            Ok((dt, r[steps]))
        })
        .collect()
}

/// Mean `|R(T)|` over `n_paths` for `dv = σ dw` started at 0 on a two-node
/// grid (a constant function, so effectively scalar). All step sizes are
/// driven by the same Brownian paths: coarse increments are sums of the
/// increments on the finest step.
pub fn ito_stochastic_study(
    n: u32,
    sigma: f64,
    alpha: f64,
    dts: &[f64],
    t_final: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    use rayon::prelude::*;

    let fine = dts.iter().copied().fold(f64::INFINITY, f64::min);
    if dts.is_empty() || n_paths == 0 {
        return Err(Error::Precondition("need at least one step size and one path".into()));
    }
    let fine_steps = conforming_steps(fine, t_final)?;
    let ratios: Vec<usize> = dts
        .iter()
        .map(|&dt| {
            let m = (dt / fine).round();
            if m < 1.0 || (m * fine - dt).abs() > 1e-9 * dt {
                return Err(Error::NonConformingStep(format!("{dt} is not a multiple of {fine}")));
            }
            Ok(m as usize)
        })
        .collect::<Result<_>>()?;
    let grid = Arc::new(crate::function_space::Grid::uniform(2, 1.0, alpha)?);
    let v0 = GridFunction::zeros(Arc::clone(&grid));
    let column = GridFunction::constant(Arc::clone(&grid), sigma);
    let zero = GridFunction::zeros(Arc::clone(&grid));
    let per_path: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let noise = NoiseConfig::new(1, seed, path);
            let fine_dw = (0..fine_steps as u64)
                .map(|s| crate::noise::sample_increments(&noise, fine, s).map(|v| v[0]))
                .collect::<Result<Vec<f64>>>()?;
            dts.iter()
                .zip(&ratios)
                .map(|(&dt, &m)| {
                    let incs: Vec<Vec<f64>> = fine_dw.chunks(m).map(|c| vec![c.iter().sum()]).collect();
                    let r = ito_residual_with_increments(
                        n,
                        &v0,
                        |_, _| zero.clone(),
                        |_, _| vec![column.clone()],
                        dt,
                        &incs,
                    )?;
                    Ok(r[r.len() - 1])
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(dts
        .iter()
        .enumerate()
        .map(|(j, &dt)| (dt, per_path.iter().map(|p| p[j]).sum::<f64>() / n_paths as f64))
        .collect())
}

fn conforming_steps(dt: f64, t_final: f64) -> Result<usize> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::domain("dt", dt, "dt > 0"));
    }
    let steps = (t_final / dt).round();
    if steps < 1.0 || (steps * dt - t_final).abs() > 1e-9 * t_final {
        return Err(Error::NonConformingStep(format!(
            "dt = {dt} does not divide T = {t_final}"
        )));
    }
    Ok(steps as usize)
}

/// Single-valued monotone graphs `β` with `β(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MonotoneGraph {
    Identity,
    /// `tanh(k·r)`
    Tanh {
        k: f64,
    },
    /// `clamp(r, −cap, cap)`
    ClippedLinear {
        cap: f64,
    },
    /// `r / (|r| + ε)`
    SignSmoothed {
        eps: f64,
    },
}

impl MonotoneGraph {
    #[inline]
    pub fn apply(&self, r: f64) -> f64 {
        match *self {
            MonotoneGraph::Identity => r,
            MonotoneGraph::Tanh { k } => (k * r).tanh(),
            MonotoneGraph::ClippedLinear { cap } => r.clamp(-cap, cap),
            MonotoneGraph::SignSmoothed { eps } => r / (r.abs() + eps),
        }
    }
}

/// Convex `j ≥ 0` with `j(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConvexFn {
    Square,
    Abs,
    /// Huber-type hinge on the negative side: `r²/(2δ)` on `[−δ, 0]`,
    /// `−r − δ/2` below, 0 for `r ≥ 0`.
    SmoothedHinge {
        delta: f64,
    },
}

impl ConvexFn {
    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            ConvexFn::Square => r * r,
            ConvexFn::Abs => r.abs(),
            ConvexFn::SmoothedHinge { delta } => {
                if r >= 0.0 {
                    0.0
                } else if r >= -delta {
                    r * r / (2.0 * delta)
                } else {
                    -r - 0.5 * delta
                }
            }
        }
    }
}

/// Slack on the inequality checks.
pub const INEQUALITY_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BrezisStraussReport {
    pub lambda: f64,
    /// `⟨A_λ v, β(v)⟩`
    pub pairing: f64,
    pub pass: bool,
}

pub fn brezis_strauss_check(
    suite: &OperatorSuite,
    lambda: f64,
    v: &GridFunction,
    graph: MonotoneGraph,
) -> Result<BrezisStraussReport> {
    let a = suite.apply_yosida(lambda, v)?;
    let b = v.map(|r| graph.apply(r));
    let pairing = weighted_inner(&a, &b)?;
    Ok(BrezisStraussReport {
        lambda,
        pairing,
        pass: pairing >= -INEQUALITY_SLACK,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JensenReport {
    pub lambda: f64,
    /// `‖j(J_λ v)‖_{L¹}`
    pub of_resolvent: f64,
    /// `‖J_λ j(v)‖_{L¹}`
    pub resolvent_of: f64,
    /// `‖j(v)‖_{L¹}`
    pub plain: f64,
    pub pass_left: bool,
    pub pass_right: bool,
}

impl JensenReport {
    pub fn pass(&self) -> bool {
        self.pass_left && self.pass_right
    }
}

pub fn jensen_check(suite: &OperatorSuite, lambda: f64, v: &GridFunction, j: ConvexFn) -> Result<JensenReport> {
    let r = suite.resolvent(lambda)?;
    let jv = v.map(|x| j.eval(x));
    let of_resolvent = norm(&r.apply(v)?.map(|x| j.eval(x)), NormKind::L1Weighted);
    let resolvent_of = norm(&r.apply(&jv)?, NormKind::L1Weighted);
    let plain = norm(&jv, NormKind::L1Weighted);
    Ok(JensenReport {
        lambda,
        of_resolvent,
        resolvent_of,
        plain,
        pass_left: of_resolvent <= resolvent_of + INEQUALITY_SLACK,
        pass_right: resolvent_of <= plain + INEQUALITY_SLACK,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::function_space::Grid;

    #[test]
    fn closed_form_examples() {
        assert_eq!(gn_eval(1, 1.0, 0).unwrap(), 0.0);
        assert_eq!(gn_eval(7, 1.0, 2).unwrap(), 0.0);
        assert_eq!(gn_eval(1, -2.0, 1).unwrap(), -1.5);
        assert!(gn_eval(1, -2.0, 3).is_err());
        assert!(gn_eval(0, -2.0, 0).is_err());
    }

    #[test]
    fn pieces_join_continuously() {
        for &n in &[1u32, 10, 1000] {
            let g = SmoothNegEnergy::new(n).unwrap();
            let b = -1.0 / n as f64;
            let (lo, hi) = (b * (1.0 + 1e-12), b * (1.0 - 1e-12));
            assert!((g.value(lo) - g.value(hi)).abs() < 1e-10);
            assert!((g.first(lo) - g.first(hi)).abs() < 1e-10);
            assert!((g.second(lo) - g.second(hi)).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_energy_limit() {
        let grid = Arc::new(Grid::uniform(2000, 30.0, 1.0).unwrap());
        let f = GridFunction::constant(grid, -1.0);
        let e = smooth_energy_functional(1000, &f).unwrap();
        assert!((e - 0.25).abs() < 1e-3, "{e}");
    }

    #[test]
    fn constant_jensen_and_pairing() {
        let grid = Arc::new(Grid::uniform(500, 20.0, 0.5).unwrap());
        let suite = OperatorSuite::new(Arc::clone(&grid));
        let v = GridFunction::constant(Arc::clone(&grid), 1.0);
        let rep = jensen_check(&suite, 0.3, &v, ConvexFn::Square).unwrap();
        let rr = 1.0 / (1.0 + 0.3 * 0.5);
        assert!((rep.of_resolvent - rr * rr / 0.5).abs() < 1e-12);
        assert!((rep.resolvent_of - rr / 0.5).abs() < 1e-12);
        assert!((rep.plain - 2.0).abs() < 1e-12);
        assert!(rep.pass());
        let bs = brezis_strauss_check(&suite, 0.3, &v.scale(0.7), MonotoneGraph::Tanh { k: 1.0 }).unwrap();
        let expected = 0.7f64.tanh() * 0.5 * 0.7 * rr / 0.5;
        assert!((bs.pairing - expected).abs() < 1e-12, "{} vs {expected}", bs.pairing);
    }
}
