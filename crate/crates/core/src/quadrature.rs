//! Scalar helpers for exponentially weighted integrals of piecewise-linear
//! functions, evaluated without cancellation near zero.

const SERIES_CUTOFF: f64 = 1e-2;

/// `∫₀¹ (1 − t) e^{zt} dt`.
pub(crate) fn phi_left(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0 + z * (1.0 / 720.0 + z / 5040.0))))
    } else {
        (z.exp_m1() - z) / (z * z)
    }
}

/// `∫₀¹ t e^{zt} dt`.
pub(crate) fn phi_right(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z * (1.0 / 144.0 + z / 840.0))))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// `z / (1 − e^{−z}) − 1`, the relative excess of a right-endpoint
/// geometric sum over the integral of `e^{−s}`.
pub(crate) fn geometric_excess(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        z * (0.5 + z * (1.0 / 12.0 - z * z / 720.0))
    } else {
        z / (-(-z).exp_m1()) - 1.0
    }
}

/// `1 − (x / sinh x)²`.
pub(crate) fn sinh_defect(x: f64) -> f64 {
    if x.abs() < SERIES_CUTOFF {
        let x2 = x * x;
        x2 * (1.0 / 3.0 - x2 / 15.0)
    } else {
        let r = x / x.sinh();
        1.0 - r * r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson(f: impl Fn(f64) -> f64) -> f64 {
        let n = 2000;
        let h = 1.0 / n as f64;
        let mut s = f(0.0) + f(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn phi_matches_quadrature_on_both_branches() {
        for &z in &[-3.0, -0.5, -0.011, -0.009, -1e-6, 0.0, 1e-6, 0.009, 0.011, 0.7, 2.5] {
            let l = simpson(|t| (1.0 - t) * (z * t).exp());
            let r = simpson(|t| t * (z * t).exp());
            assert!((phi_left(z) - l).abs() < 1e-12, "z={z}");
            assert!((phi_right(z) - r).abs() < 1e-12, "z={z}");
        }
    }

    #[test]
    fn series_branches_are_continuous() {
        for &z in &[SERIES_CUTOFF, -SERIES_CUTOFF] {
            let below = z * (1.0 - 1e-12);
            let above = z * (1.0 + 1e-12);
            assert!((phi_left(below) - phi_left(above)).abs() < 1e-13);
            assert!((phi_right(below) - phi_right(above)).abs() < 1e-13);
            assert!((geometric_excess(below) - geometric_excess(above)).abs() < 1e-13);
            assert!((sinh_defect(below) - sinh_defect(above)).abs() < 1e-13);
        }
    }
}
