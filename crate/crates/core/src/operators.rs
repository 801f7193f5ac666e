//! Translation semigroup, resolvent and Yosida approximation of `A + αI`,
//! where `A = −d/dx` generates `S(t)f(x) = f(x + t)`.
//!
//! The continuous resolvent is
//!
//! ```text
//! J_λ f(x) = (1/λ) ∫₀^∞ e^{−κs} f(x + s) ds,   κ = (1 + λα)/λ.
//! ```
//!
//! It is discretized by a nonnegative Toeplitz kernel `y_i = Σ_m c_m f_{i+m}`
//! (virtual nodes past `x_max` carry the tail value). The kernel is the
//! geometric right-endpoint rule with a three-point correction at the head,
//! fitted so that
//!
//! * constants are mapped exactly to `1/(1 + λα)`,
//! * the first moment of the continuous kernel is reproduced,
//! * `Σ c_m e^{αhm} = 1`.
//!
//! The last identity, together with the grid weights growing at most like
//! `e^{−αx}`, makes `J_λ` a contraction in the discrete weighted `L¹` and
//! `L²` norms with no rounding slack, which is what the positivity
//! diagnostics rely on. When the head correction would turn a coefficient
//! negative (roughly `h(1 + λα)/λ > 1.5`) a purely geometric kernel is used
//! instead; it keeps the first and third identities and stays positive.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::function_space::{norm, Grid, GridFunction, NormKind};
use crate::quadrature::{geometric_excess, sinh_defect};

/// Relative tolerance for deciding that `t/h` is an integer.
const SHIFT_SNAP_TOL: f64 = 1e-9;

/// Tolerance on the range check in [`OperatorSuite::check_submarkov`].
pub const SUBMARKOV_TOL: f64 = 1e-8;

/// Absolute slack in [`OperatorSuite::check_l1_contraction`].
pub const CONTRACTION_SLACK: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OperatorSuite {
    grid: Arc<Grid>,
    alpha: f64,
    shifted: bool,
}

impl OperatorSuite {
    /// Suite for `A + αI` with the unshifted semigroup `S(t)f = f(· + t)`.
    pub fn new(grid: Arc<Grid>) -> Self {
        let alpha = grid.alpha();
        OperatorSuite {
            grid,
            alpha,
            shifted: false,
        }
    }

    /// With `shifted`, [`apply_semigroup`](Self::apply_semigroup) returns
    /// `e^{−αt} S(t)f`, the semigroup generated by `−(A + αI)`.
    pub fn with_shifted_semigroup(mut self, shifted: bool) -> Self {
        self.shifted = shifted;
        self
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_shifted(&self) -> bool {
        self.shifted
    }

    fn check_grid(&self, f: &GridFunction) -> Result<()> {
        if Arc::ptr_eq(&self.grid, f.grid()) || *self.grid == **f.grid() {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// Shift by `t`. Integer multiples of `h` are exact node shifts; other
    /// values interpolate linearly between (possibly virtual) nodes.
    pub fn apply_semigroup(&self, t: f64, f: &GridFunction) -> Result<GridFunction> {
        self.check_grid(f)?;
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::domain("t", t, "t ≥ 0"));
        }
        let n = self.grid.n_nodes();
        let k = t / self.grid.spacing();
        let values: Vec<f64> = if (k - k.round()).abs() <= SHIFT_SNAP_TOL * k.max(1.0) {
            let s = (k.round() as usize).min(n);
            (0..n).map(|i| f.extended(i + s)).collect()
        } else {
            let j0 = k.floor();
            let theta = k - j0;
            let s = (j0 as usize).min(n);
            (0..n)
                .map(|i| (1.0 - theta) * f.extended(i + s) + theta * f.extended(i + s + 1))
                .collect()
        };
        let mut out = GridFunction::from_parts_unchecked(Arc::clone(&self.grid), values, f.tail());
        if self.shifted {
            let damp = (-self.alpha * t).exp();
            out.values_mut().iter_mut().for_each(|v| *v *= damp);
            out.set_tail(f.tail() * damp);
        }
        Ok(out)
    }

    pub fn resolvent(&self, lambda: f64) -> Result<Resolvent> {
        Resolvent::new(Arc::clone(&self.grid), lambda)
    }

    /// `J_λ f = (I + λ(A + αI))⁻¹ f`.
    pub fn apply_resolvent(&self, lambda: f64, f: &GridFunction) -> Result<GridFunction> {
        self.check_grid(f)?;
        self.resolvent(lambda)?.apply(f)
    }

    /// `A_λ f = (f − J_λ f)/λ`, the Yosida approximation of `A + αI`.
    pub fn apply_yosida(&self, lambda: f64, f: &GridFunction) -> Result<GridFunction> {
        let j = self.apply_resolvent(lambda, f)?;
        f.zip_map(&j, |a, b| (a - b) / lambda)
    }

    /// Finite-difference `(A + αI)f`: centred differences, one-sided
    /// second order at `x = 0`; diagnostics only.
    pub fn apply_generator_fd(&self, f: &GridFunction) -> Result<GridFunction> {
        self.check_grid(f)?;
        let h = self.grid.spacing();
        let n = self.grid.n_nodes();
        let v = f.values();
        let values = (0..n)
            .map(|i| {
                let d = if i > 0 {
                    (f.extended(i + 1) - v[i - 1]) / (2.0 * h)
                } else if n > 2 {
                    (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
                } else {
                    (v[1] - v[0]) / h
                };
                -d + self.alpha * v[i]
            })
            .collect();
        Ok(GridFunction::from_parts_unchecked(
            Arc::clone(&self.grid),
            values,
            self.alpha * f.tail(),
        ))
    }

    /// Applies `J_λ` to a profile with values in `[0, 1]` and reports the
    /// range of the result.
    pub fn check_submarkov(&self, lambda: f64, f: &GridFunction) -> Result<SubMarkovReport> {
        self.check_grid(f)?;
        let (lo, hi) = (f.min_value(), f.max_value());
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::Precondition(format!(
                "sub-Markov check needs 0 ≤ f ≤ 1, got range [{lo}, {hi}]"
            )));
        }
        let j = self.apply_resolvent(lambda, f)?;
        let (min, max) = (j.min_value(), j.max_value());
        Ok(SubMarkovReport {
            lambda,
            min,
            max,
            pass: min >= -SUBMARKOV_TOL && max <= 1.0 + SUBMARKOV_TOL,
        })
    }

    pub fn check_l1_contraction(&self, lambda: f64, f: &GridFunction, g: &GridFunction) -> Result<ContractionReport> {
        self.check_grid(f)?;
        self.check_grid(g)?;
        let r = self.resolvent(lambda)?;
        let diff = r.apply(f)?.sub(&r.apply(g)?)?;
        let lhs = norm(&diff, NormKind::L1Weighted);
        let rhs = norm(&f.sub(g)?, NormKind::L1Weighted);
        Ok(ContractionReport {
            lambda,
            lhs,
            rhs,
            pass: lhs <= rhs + CONTRACTION_SLACK,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SubMarkovReport {
    pub lambda: f64,
    pub min: f64,
    pub max: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ContractionReport {
    pub lambda: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Geometric tail with a fitted three-point head.
    Corrected,
    /// Single head coefficient followed by a geometric tail.
    Geometric,
}

#[derive(Debug, Clone, Copy)]
enum Kernel {
    /// `c_m = head[m]` for `m < 3`, `scale·q^m` beyond.
    Corrected {
        scale: f64,
        head: [f64; 3],
    },
    Geometric {
        c0: f64,
        d: f64,
    },
}

/// Precomputed discrete `J_λ` for one grid and one `λ`.
#[derive(Debug, Clone)]
pub struct Resolvent {
    grid: Arc<Grid>,
    lambda: f64,
    alpha: f64,
    q: f64,
    one_minus_q: f64,
    kernel: Kernel,
}

impl Resolvent {
    pub fn new(grid: Arc<Grid>, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::domain("lambda", lambda, "λ > 0"));
        }
        let alpha = grid.alpha();
        let h = grid.spacing();
        let r = 1.0 / (1.0 + lambda * alpha);
        let eta = h / lambda;
        let z = eta * (1.0 + lambda * alpha);
        let a = alpha * h;
        let q = (-z).exp();
        let scale = eta;

        let e2 = lambda * r * r * sinh_defect(0.5 * z);
        // e3 − e1 = r·B(z) − B(eta); the direct difference cancels for large eta.
        let b1 = if eta > 1.0 {
            lambda * alpha * r + eta * (-eta).exp() * (-a).exp_m1() / ((-z).exp_m1() * (-eta).exp_m1())
        } else {
            r * geometric_excess(z) - geometric_excess(eta)
        };
        // [expm1(a) expm1(2a); 1 2] [δ1 δ2]ᵀ = [e3 − e1, e2/h]ᵀ
        let (m11, m12) = (a.exp_m1(), (2.0 * a).exp_m1());
        let b2 = e2 / h;
        let det = 2.0 * m11 - m12;
        let d1 = (2.0 * b1 - m12 * b2) / det;
        let d2 = (m11 * b2 - b1) / det;
        // scale + e1 = r − eta/expm1(z), free of the O(eta) cancellation.
        let head = [r - eta / z.exp_m1() - d1 - d2, scale * q + d1, scale * q * q + d2];

        let kernel = if det.is_finite() && det != 0.0 && head.iter().all(|&c| c >= 0.0 && c.is_finite()) {
            Kernel::Corrected { scale, head }
        } else {
            let one_minus_p = -(-eta).exp_m1();
            let one_minus_q = -(-z).exp_m1();
            let c0 = r * (1.0 - lambda * alpha * one_minus_p / a.exp_m1());
            let d = lambda * alpha * r * one_minus_p * one_minus_q / a.exp_m1();
            Kernel::Geometric { c0, d }
        };
        Ok(Resolvent {
            grid,
            lambda,
            alpha,
            q,
            one_minus_q: -(-z).exp_m1(),
            kernel,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kind(&self) -> KernelKind {
        match self.kernel {
            Kernel::Corrected { .. } => KernelKind::Corrected,
            Kernel::Geometric { .. } => KernelKind::Geometric,
        }
    }

    /// Kernel coefficient `c_m`, the weight of `f_{i+m}` in `(J_λ f)_i`.
    pub fn coefficient(&self, m: usize) -> f64 {
        match self.kernel {
            Kernel::Corrected { scale, head } => {
                if m < 3 {
                    head[m]
                } else {
                    scale * self.q.powi(m as i32)
                }
            }
            Kernel::Geometric { c0, d } => {
                if m == 0 {
                    c0
                } else {
                    d * self.q.powi(m as i32 - 1)
                }
            }
        }
    }

    pub fn apply(&self, f: &GridFunction) -> Result<GridFunction> {
        if !(Arc::ptr_eq(&self.grid, f.grid()) || *self.grid == **f.grid()) {
            return Err(Error::GridMismatch);
        }
        let n = self.grid.n_nodes();
        let q = self.q;
        let fv = f.values();
        // t[i] = Σ_{m≥0} q^m f_{i+m}; entries from n on cover the constant tail.
        let mut t = vec![f.tail() / self.one_minus_q; n + 3];
        for i in (0..n).rev() {
            t[i] = fv[i] + q * t[i + 1];
        }
        let values: Vec<f64> = match self.kernel {
            Kernel::Corrected { scale, head } => {
                let far = scale * q * q * q;
                (0..n)
                    .map(|i| {
                        head[0] * fv[i] + head[1] * f.extended(i + 1) + head[2] * f.extended(i + 2) + far * t[i + 3]
                    })
                    .collect()
            }
            Kernel::Geometric { c0, d } => (0..n).map(|i| c0 * fv[i] + d * t[i + 1]).collect(),
        };
        Ok(GridFunction::from_parts_unchecked(
            Arc::clone(&self.grid),
            values,
            f.tail() / (1.0 + self.lambda * self.alpha),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite(n: usize, x_max: f64, alpha: f64) -> OperatorSuite {
        OperatorSuite::new(Arc::new(Grid::uniform(n, x_max, alpha).unwrap()))
    }

    fn kernel_sums(r: &Resolvent, alpha: f64, h: f64) -> (f64, f64, f64) {
        let (mut s0, mut s1, mut s3) = (0.0, 0.0, 0.0);
        for m in 0..200_000 {
            let c = r.coefficient(m);
            s0 += c;
            s1 += c * m as f64 * h;
            s3 += c * (alpha * h * m as f64).exp();
            if c < 1e-300 && m > 10 {
                break;
            }
        }
        (s0, s1, s3)
    }

    #[test]
    fn kernel_is_nonnegative_and_fitted() {
        for &alpha in &[0.1, 0.5, 2.0] {
            for &lambda in &[1e-3, 5e-3, 0.02, 0.1, 1.0, 10.0] {
                let s = suite(2001, 30.0, alpha);
                let h = s.grid().spacing();
                let r = s.resolvent(lambda).unwrap();
                for m in 0..50 {
                    assert!(r.coefficient(m) >= 0.0, "alpha={alpha} lambda={lambda} m={m}");
                }
                let (s0, s1, s3) = kernel_sums(&r, alpha, h);
                let rr = 1.0 / (1.0 + lambda * alpha);
                assert!((s0 - rr).abs() < 1e-11, "row sum {s0} vs {rr}");
                assert!(s3 <= 1.0 + 1e-11, "column sum {s3}");
                if r.kind() == KernelKind::Corrected {
                    let m1 = lambda * rr * rr;
                    assert!((s1 - m1).abs() < 1e-9 * m1.max(1.0), "moment {s1} vs {m1}");
                    assert!((s3 - 1.0).abs() < 1e-11);
                }
            }
        }
    }

    #[test]
    fn recursion_matches_kernel_sum() {
        let s = suite(40, 4.0, 0.5);
        let f = GridFunction::from_fn_with_tail(Arc::clone(s.grid()), |x| (3.0 * x).sin(), 0.3).unwrap();
        for &lambda in &[0.01, 0.3, 5.0] {
            let r = s.resolvent(lambda).unwrap();
            let y = r.apply(&f).unwrap();
            for i in 0..40 {
                let direct: f64 = (0..100_000).map(|m| r.coefficient(m) * f.extended(i + m)).sum();
                assert!((direct - y.values()[i]).abs() < 1e-9, "lambda={lambda} i={i}");
            }
        }
    }

    #[test]
    fn semigroup_shift_and_interpolation() {
        let s = suite(11, 1.0, 0.5);
        let f = GridFunction::from_fn_with_tail(Arc::clone(s.grid()), |x| x * x, 7.0).unwrap();
        let g = s.apply_semigroup(0.3, &f).unwrap();
        assert!((g.values()[0] - 0.09).abs() < 1e-14);
        assert_eq!(g.values()[8], 7.0);
        assert_eq!(g.tail(), 7.0);
        let half = s.apply_semigroup(0.05, &f).unwrap();
        assert!((half.values()[0] - 0.005).abs() < 1e-14);
        assert!(s.apply_semigroup(-0.1, &f).is_err());
        let shifted = s.clone().with_shifted_semigroup(true);
        let d = shifted.apply_semigroup(0.3, &f).unwrap();
        assert!((d.tail() - 7.0 * (-0.15f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn resolvent_rejects_nonpositive_lambda() {
        let s = suite(5, 1.0, 0.5);
        let f = GridFunction::constant(Arc::clone(s.grid()), 1.0);
        assert!(s.apply_resolvent(0.0, &f).is_err());
        assert!(s.apply_resolvent(-1.0, &f).is_err());
        assert!(s.apply_resolvent(f64::NAN, &f).is_err());
    }

    #[test]
    fn submarkov_precondition() {
        let s = suite(5, 1.0, 0.5);
        let f = GridFunction::constant(Arc::clone(s.grid()), 1.5);
        assert!(matches!(s.check_submarkov(0.1, &f), Err(Error::Precondition(_))));
    }
}
