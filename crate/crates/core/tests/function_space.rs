use std::sync::Arc;

use proptest::prelude::*;

use mildpos::function_space::{lattice_parts, negative_energy, norm, weighted_inner, Grid, GridFunction, NormKind};

fn grid(n: usize, x_max: f64, alpha: f64) -> Arc<Grid> {
    Arc::new(Grid::uniform(n, x_max, alpha).unwrap())
}

#[test]
fn grid_rejects_bad_parameters() {
    assert!(Grid::uniform(1, 1.0, 1.0).is_err());
    assert!(Grid::uniform(10, 0.0, 1.0).is_err());
    assert!(Grid::uniform(10, 1.0, 0.0).is_err());
    assert!(Grid::uniform(10, 1.0, -0.5).is_err());
    assert!(Grid::uniform(10, f64::NAN, 1.0).is_err());
}

#[test]
fn weights_are_positive_and_integrate_constants_exactly() {
    for &(n, x, a) in &[(2, 1.0, 1.0), (11, 3.0, 0.5), (2000, 30.0, 1.0), (101, 0.5, 4.0)] {
        let g = grid(n, x, a);
        assert!(g.weights().iter().all(|&w| w > 0.0) && g.tail_weight() > 0.0);
        let total: f64 = g.weights().iter().sum::<f64>() + g.tail_weight();
        assert!((total * a - 1.0).abs() < 1e-13, "{n} {x} {a}: {total}");
    }
}

#[test]
fn grid_function_validation() {
    let g = grid(5, 1.0, 1.0);
    assert!(GridFunction::new(Arc::clone(&g), vec![0.0; 4], 0.0).is_err());
    assert!(GridFunction::new(Arc::clone(&g), vec![0.0, 1.0, f64::NAN, 0.0, 0.0], 0.0).is_err());
    assert!(GridFunction::new(Arc::clone(&g), vec![0.0; 5], f64::INFINITY).is_err());
    let other = grid(6, 1.0, 1.0);
    let f = GridFunction::zeros(g);
    assert!(weighted_inner(&f, &GridFunction::zeros(other)).is_err());
}

#[test]
fn inner_product_of_constants() {
    let g = grid(37, 2.5, 1.0);
    let one = GridFunction::constant(Arc::clone(&g), 1.0);
    assert!((weighted_inner(&one, &one).unwrap() - 1.0).abs() < 1e-14);
    assert_eq!(weighted_inner(&one, &GridFunction::zeros(g)).unwrap(), 0.0);
}

/// `∫ e^{−3x} dx = 1/3`; the rule is exact for linear interpolants, so the
/// error is `O(h²)` and quarters when the grid is refined.
#[test]
fn inner_product_of_exponentials_is_second_order() {
    let err = |n: usize| {
        let g = grid(n, 30.0, 1.0);
        let e = GridFunction::from_fn(Arc::clone(&g), |x| (-x).exp()).unwrap();
        (weighted_inner(&e, &e).unwrap() - 1.0 / 3.0).abs()
    };
    let (e1, e2, e3) = (err(2000), err(3999), err(7997));
    let h = 30.0 / 1999.0;
    // Linear interpolation of e^{−2x}: |error| ≤ h²/12 ∫ |(e^{−2x})''| e^{−x} dx = h²/12 · 4/3.
    assert!(e1 <= h * h / 9.0, "{e1}");
    assert!(e1 / e2 > 3.9 && e2 / e3 > 3.9, "{e1} {e2} {e3}");
}

#[test]
fn norms_of_simple_functions() {
    let g = grid(401, 20.0, 1.0);
    let z = GridFunction::zeros(Arc::clone(&g));
    for kind in [
        NormKind::L2Weighted,
        NormKind::L1Weighted,
        NormKind::Sup,
        NormKind::HAlpha,
    ] {
        assert_eq!(norm(&z, kind), 0.0);
    }
    let c = GridFunction::constant(Arc::clone(&g), -2.5);
    assert!((norm(&c, NormKind::L1Weighted) - 2.5).abs() < 1e-13);
    assert!((norm(&c, NormKind::L2Weighted) - 2.5).abs() < 1e-13);
    assert_eq!(norm(&c, NormKind::Sup), 2.5);
    assert!((norm(&c, NormKind::HAlpha) - 2.5).abs() < 1e-15);
}

#[test]
fn h_alpha_norm_of_exponential() {
    let g = grid(2000, 30.0, 1.0);
    let e = GridFunction::from_fn_with_tail(Arc::clone(&g), |x| (-x).exp(), 0.0).unwrap();
    // ∫ e^{−2x} e^{x} dx over [0, 30].
    let want = (1.0 - (-30.0f64).exp()).sqrt();
    assert!((norm(&e, NormKind::HAlpha) - want).abs() < 1e-4);
}

#[test]
fn lattice_examples() {
    let g = grid(21, 2.0, 0.5);
    let p = lattice_parts(&GridFunction::constant(Arc::clone(&g), -1.0));
    assert!(p.positive.values().iter().all(|&v| v == 0.0) && p.positive.tail() == 0.0);
    assert!(p.negative.values().iter().all(|&v| v == 1.0) && p.negative.tail() == 1.0);
    assert!(p.negative_indicator.values().iter().all(|&v| v == 1.0));

    let f = GridFunction::from_fn(Arc::clone(&g), |x| x - 1.0).unwrap();
    let p = lattice_parts(&f);
    for (&x, &v) in g.nodes().iter().zip(p.negative.values()) {
        assert_eq!(v, (1.0 - x).max(0.0));
    }
    let p = lattice_parts(&GridFunction::zeros(g));
    assert!(p.negative_indicator.values().iter().all(|&v| v == 0.0));
    assert_eq!(p.negative_indicator.tail(), 0.0);
}

fn arb_function() -> impl Strategy<Value = GridFunction> {
    (2usize..60, 0.1f64..20.0, 0.05f64..3.0)
        .prop_flat_map(|(n, x, a)| {
            (
                Just(grid(n, x, a)),
                prop::collection::vec(-5.0f64..5.0, n),
                -5.0f64..5.0,
            )
        })
        .prop_map(|(g, v, t)| GridFunction::new(g, v, t).unwrap())
}

fn arb_pair() -> impl Strategy<Value = (GridFunction, GridFunction)> {
    (2usize..60, 0.1f64..20.0, 0.05f64..3.0)
        .prop_flat_map(|(n, x, a)| {
            let g = grid(n, x, a);
            (
                Just(g),
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(-5.0f64..5.0, n),
                -5.0f64..5.0,
                -5.0f64..5.0,
            )
        })
        .prop_map(|(g, a, b, ta, tb)| {
            (
                GridFunction::new(Arc::clone(&g), a, ta).unwrap(),
                GridFunction::new(g, b, tb).unwrap(),
            )
        })
}

proptest! {
    #[test]
    fn lattice_identities(f in arb_function()) {
        let p = lattice_parts(&f);
        let back = p.positive.sub(&p.negative).unwrap();
        prop_assert_eq!(back.values(), f.values());
        prop_assert_eq!(back.tail(), f.tail());
        prop_assert_eq!(weighted_inner(&p.positive, &p.negative).unwrap(), 0.0);
        let n2 = norm(&p.negative, NormKind::L2Weighted).powi(2);
        let pairing = weighted_inner(&f, &p.negative).unwrap();
        prop_assert!((pairing + n2).abs() <= 1e-12 * (1.0 + n2));
        prop_assert!((negative_energy(&f) - n2).abs() <= 1e-12 * (1.0 + n2));
    }

    #[test]
    fn cauchy_schwarz_and_triangle((f, g) in arb_pair()) {
        let one = GridFunction::constant(Arc::clone(f.grid()), 1.0);
        let l1 = norm(&f, NormKind::L1Weighted);
        let l2 = norm(&f, NormKind::L2Weighted);
        prop_assert!(l1 <= l2 * norm(&one, NormKind::L2Weighted) * (1.0 + 1e-12));
        let ip = weighted_inner(&f, &g).unwrap().abs();
        prop_assert!(ip <= l2 * norm(&g, NormKind::L2Weighted) * (1.0 + 1e-12) + 1e-300);
        let sum = f.add(&g).unwrap();
        for kind in [NormKind::L2Weighted, NormKind::L1Weighted, NormKind::Sup, NormKind::HAlpha] {
            prop_assert!(norm(&sum, kind) <= (norm(&f, kind) + norm(&g, kind)) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn norms_are_homogeneous(f in arb_function(), c in -10.0f64..10.0) {
        for kind in [NormKind::L2Weighted, NormKind::L1Weighted, NormKind::Sup, NormKind::HAlpha] {
            let lhs = norm(&f.scale(c), kind);
            let rhs = c.abs() * norm(&f, kind);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }
    }

    #[test]
    fn inner_product_is_symmetric_and_bilinear((f, g) in arb_pair(), c in -3.0f64..3.0) {
        let fg = weighted_inner(&f, &g).unwrap();
        let gf = weighted_inner(&g, &f).unwrap();
        prop_assert!((fg - gf).abs() <= 1e-13 * (1.0 + fg.abs()));
        let mut h = f.clone();
        h.axpy(c, &g).unwrap();
        let lhs = weighted_inner(&h, &g).unwrap();
        let rhs = fg + c * weighted_inner(&g, &g).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-11 * (1.0 + lhs.abs()));
    }
}
