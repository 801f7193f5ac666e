use std::sync::Arc;

use mildpos::function_space::{negative_energy, norm};
use mildpos::noise::sample_increments;
use mildpos::solver::{ensemble_stats, NEGATIVITY_THRESHOLDS};
use mildpos::{
    CoefficientModel, DriftKind, Error, Grid, GridFunction, ModeFunction, NoiseConfig, NormKind, OperatorSuite, Scheme,
    Simulation, SolverConfig,
};

fn grid(n: usize, x_max: f64, alpha: f64) -> Arc<Grid> {
    Arc::new(Grid::uniform(n, x_max, alpha).unwrap())
}

fn sim(g: &Arc<Grid>, modes: Vec<ModeFunction>, drift: DriftKind, cfg: SolverConfig) -> Simulation {
    let model = CoefficientModel::new(Arc::clone(g), modes, drift, 0.0).unwrap();
    Simulation::new(OperatorSuite::new(Arc::clone(g)), model, cfg).unwrap()
}

#[test]
fn zero_coefficients_reproduce_the_semigroup_bitwise() {
    let g = grid(201, 2.0, 0.5);
    let u0 = GridFunction::from_fn(Arc::clone(&g), |x| (3.0 * x).cos() * (-x).exp()).unwrap();
    for scheme in [Scheme::ShiftThenReact, Scheme::ReactThenShift] {
        let s = sim(
            &g,
            vec![],
            DriftKind::Zero,
            SolverConfig::new(0.03, 1.5).with_scheme(scheme).with_snapshot_stride(1),
        );
        let path = s.simulate_path(&u0, &NoiseConfig::new(0, 1, 0)).unwrap();
        assert_eq!(path.snapshots.len(), s.n_steps() + 1);
        for (t, u) in &path.snapshots {
            let want = s.suite().apply_semigroup(*t, &u0).unwrap();
            assert_eq!(u.values(), want.values(), "t = {t}");
            assert_eq!(u.tail(), want.tail());
        }
    }
}

#[test]
fn compensated_shift_keeps_constants() {
    let g = grid(101, 1.0, 0.8);
    let model = CoefficientModel::new(Arc::clone(&g), vec![], DriftKind::Zero, 0.8).unwrap();
    let suite = OperatorSuite::new(Arc::clone(&g)).with_shifted_semigroup(true);
    let s = Simulation::new(suite, model, SolverConfig::new(0.01, 1.0).with_snapshot_stride(1)).unwrap();
    let c = 0.37;
    let path = s
        .simulate_path(&GridFunction::constant(Arc::clone(&g), c), &NoiseConfig::new(0, 0, 0))
        .unwrap();
    for (k, (_, u)) in path.snapshots.iter().enumerate() {
        let err = u.values().iter().map(|v| (v - c).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10 * k.max(1) as f64, "step {k}: {err}");
    }
}

/// Ho–Lee in Musiela form: `β(x) = σ²x` is exact on the nodes, so the
/// short rate after `N` steps has a closed form in the increments.
#[test]
fn ho_lee_short_rate_matches_closed_form() {
    let g = grid(201, 2.0, 0.5);
    let (sigma, r0, dt, t_final) = (0.2, 0.01, 0.01, 1.0);
    let u0 = GridFunction::constant(Arc::clone(&g), r0);
    let noise = NoiseConfig::new(1, 77, 4);
    for (scheme, offset) in [(Scheme::ShiftThenReact, -1.0), (Scheme::ReactThenShift, 1.0)] {
        let s = sim(
            &g,
            vec![ModeFunction::Constant { c: sigma }],
            DriftKind::Hjm,
            SolverConfig::new(dt, t_final).with_scheme(scheme),
        );
        let path = s.simulate_path(&u0, &noise).unwrap();
        let mut w = 0.0;
        for n in 0..s.n_steps() {
            w += sample_increments(&noise, dt, n as u64).unwrap()[0];
            let m = (n + 1) as f64;
            let want = r0 + sigma * sigma * dt * dt * m * (m + offset) / 2.0 + sigma * w;
            assert!((path.short_rate[n + 1] - want).abs() < 1e-12, "{scheme:?} step {n}");
        }
    }
}

#[test]
fn ho_lee_short_rate_moments() {
    let g = grid(101, 1.0, 0.5);
    let (sigma, r0, t_final) = (0.2, 0.01, 1.0);
    let s = sim(
        &g,
        vec![ModeFunction::Constant { c: sigma }],
        DriftKind::Hjm,
        SolverConfig::new(0.01, t_final),
    );
    let n_paths = 10_000;
    let paths = s
        .simulate_ensemble(&GridFunction::constant(Arc::clone(&g), r0), n_paths, 5)
        .unwrap();
    let finals: Vec<f64> = paths.iter().map(|p| *p.short_rate.last().unwrap()).collect();
    let n = n_paths as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let (want_mean, want_var) = (r0 + sigma * sigma * t_final * t_final / 2.0, sigma * sigma * t_final);
    assert!((mean - want_mean).abs() < 3.0 * (want_var / n).sqrt(), "{mean}");
    assert!(
        (var - want_var).abs() < 3.0 * want_var * (2.0 / (n - 1.0)).sqrt(),
        "{var}"
    );

    let summary = ensemble_stats(&paths, 0.0).unwrap();
    assert!(summary.final_fraction_below(-1e-3).unwrap() > 0.3);
}

/// `∫₀^a (a − x)² e^{−αx} dx`.
fn shifted_ramp_energy(a: f64, alpha: f64) -> f64 {
    if a <= 0.0 {
        return 0.0;
    }
    a * a / alpha - 2.0 * a / alpha.powi(2) + 2.0 / alpha.powi(3) - 2.0 * (-alpha * a).exp() / alpha.powi(3)
}

#[test]
fn signed_ramp_negative_energy() {
    let alpha = 0.7;
    let g = grid(401, 2.0, alpha);
    let u0 = GridFunction::from_fn(Arc::clone(&g), |x| x - 1.0).unwrap();
    let s = sim(&g, vec![], DriftKind::Zero, SolverConfig::new(0.05, 1.5));
    let path = s.simulate_path(&u0, &NoiseConfig::new(0, 0, 0)).unwrap();
    let h = g.spacing();
    for (&t, &e) in path.times.iter().zip(&path.neg_energy) {
        let nodal: f64 = g
            .nodes()
            .iter()
            .zip(g.weights())
            .map(|(&x, &w)| w * (1.0 - t - x).max(0.0).powi(2))
            .sum();
        assert!((e - nodal).abs() <= 1e-12, "t = {t}");
        assert!((e - shifted_ramp_energy(1.0 - t, alpha)).abs() <= h * h, "t = {t}: {e}");
        if t >= 1.0 - 1e-12 {
            assert_eq!(e, 0.0);
        }
    }
}

#[test]
fn path_records_are_consistent() {
    let g = grid(101, 1.0, 0.5);
    let s = sim(
        &g,
        vec![ModeFunction::Constant { c: 0.3 }],
        DriftKind::Zero,
        SolverConfig::new(0.02, 1.0)
            .with_snapshot_stride(1)
            .with_supermartingale_c(0.4),
    );
    let u0 = GridFunction::constant(Arc::clone(&g), 0.01);
    let p = s.simulate_path(&u0, &NoiseConfig::new(1, 3, 0)).unwrap();
    let n = s.n_steps() + 1;
    assert!([
        p.times.len(),
        p.neg_energy.len(),
        p.min_value.len(),
        p.supermartingale_stat.len(),
        p.short_rate.len()
    ]
    .iter()
    .all(|&l| l == n));
    assert_eq!(p.times, s.times());
    for (j, (t, u)) in p.snapshots.iter().enumerate() {
        assert_eq!(*t, p.times[j]);
        assert!(p.neg_energy[j] >= 0.0);
        assert_eq!(p.neg_energy[j], negative_energy(u));
        assert_eq!(p.min_value[j], u.min_value());
        assert_eq!(p.supermartingale_stat[j], (-0.8 * t).exp() * p.neg_energy[j]);
    }
    assert!(p.min_value.iter().any(|&m| m < 0.0));
    assert_eq!(
        p.final_state().unwrap().values(),
        p.snapshots.last().unwrap().1.values()
    );
}

#[test]
fn snapshot_stride_keeps_endpoints() {
    let g = grid(101, 1.0, 0.5);
    let s = sim(
        &g,
        vec![],
        DriftKind::Zero,
        SolverConfig::new(0.03, 0.99).with_snapshot_stride(10),
    );
    let p = s
        .simulate_path(&GridFunction::zeros(Arc::clone(&g)), &NoiseConfig::new(0, 0, 0))
        .unwrap();
    let times: Vec<f64> = p.snapshots.iter().map(|(t, _)| *t).collect();
    assert_eq!(times.len(), 5);
    assert_eq!(times[0], 0.0);
    assert!((times[4] - 0.99).abs() < 1e-12);
}

#[test]
fn paths_are_reproducible_and_stream_keyed() {
    let g = grid(51, 1.0, 0.5);
    let s = sim(
        &g,
        vec![
            ModeFunction::ProportionalCapped { c: 0.4, cap: 1.0 },
            ModeFunction::LevelScaled { c: 0.3, cap: 1.0 },
        ],
        DriftKind::Hjm,
        SolverConfig::new(0.02, 0.5).with_snapshot_stride(5),
    );
    let u0 = GridFunction::from_fn(Arc::clone(&g), |x| 0.02 + 0.01 * (-x).exp()).unwrap();
    let a = s.simulate_ensemble(&u0, 6, 11).unwrap();
    let b = s.simulate_ensemble(&u0, 6, 11).unwrap();
    for (i, (p, q)) in a.iter().zip(&b).enumerate() {
        assert_eq!(p.neg_energy, q.neg_energy);
        assert_eq!(p.short_rate, q.short_rate);
        assert_eq!(p.stream_id, i as u64);
        let alone = s.simulate_path(&u0, &NoiseConfig::new(2, 11, i as u64)).unwrap();
        assert_eq!(alone.short_rate, p.short_rate);
    }
    assert_ne!(a[0].short_rate, a[1].short_rate);
}

#[test]
fn step_matches_path() {
    let g = grid(51, 1.0, 0.5);
    let s = sim(
        &g,
        vec![ModeFunction::Proportional { c: 0.5 }],
        DriftKind::Hjm,
        SolverConfig::new(0.04, 0.2).with_snapshot_stride(1),
    );
    let noise = NoiseConfig::new(1, 8, 2);
    let u0 = GridFunction::from_fn(Arc::clone(&g), |x| 0.05 + 0.02 * x).unwrap();
    let path = s.simulate_path(&u0, &noise).unwrap();
    let mut u = u0;
    for n in 0..s.n_steps() {
        u = s.step(&u, n, &noise).unwrap();
        assert_eq!(u.values(), path.snapshots[n + 1].1.values());
    }
}

#[test]
fn configuration_errors() {
    let g = grid(101, 1.0, 0.5);
    let model = CoefficientModel::new(
        Arc::clone(&g),
        vec![ModeFunction::Constant { c: 0.1 }],
        DriftKind::Zero,
        0.0,
    )
    .unwrap();
    let suite = OperatorSuite::new(Arc::clone(&g));
    let bad = [
        SolverConfig::new(0.015, 0.99),
        SolverConfig::new(0.02, 0.99),
        SolverConfig::new(-0.01, 1.0),
        SolverConfig::new(0.01, 1.0).with_lambda(Some(0.0)),
        SolverConfig::new(0.01, 1.0).with_supermartingale_c(-1.0),
    ];
    for cfg in bad {
        assert!(
            Simulation::new(suite.clone(), model.clone(), cfg.clone()).is_err(),
            "{cfg:?}"
        );
    }
    let s = Simulation::new(suite, model, SolverConfig::new(0.01, 1.0)).unwrap();
    let u0 = GridFunction::zeros(Arc::clone(&g));
    assert!(s.simulate_path(&u0, &NoiseConfig::new(2, 0, 0)).is_err());
    let other = GridFunction::zeros(grid(51, 1.0, 0.5));
    assert!(s.simulate_path(&other, &NoiseConfig::new(1, 0, 0)).is_err());
}

#[test]
fn blow_up_is_reported() {
    let g = grid(11, 1.0, 0.5);
    let s = sim(
        &g,
        vec![],
        DriftKind::LinearDecay { c: -1e8 },
        SolverConfig::new(0.1, 10.0),
    );
    let err = s
        .simulate_path(&GridFunction::constant(Arc::clone(&g), 1.0), &NoiseConfig::new(0, 0, 0))
        .unwrap_err();
    assert!(matches!(err, Error::BlowUp { .. }), "{err}");
}

#[test]
fn clipping_is_flagged() {
    let g = grid(101, 1.0, 0.5);
    let s = sim(
        &g,
        vec![ModeFunction::Constant { c: 0.5 }],
        DriftKind::Zero,
        SolverConfig::new(0.01, 1.0).with_clip_negative(true),
    );
    let paths = s
        .simulate_ensemble(&GridFunction::constant(Arc::clone(&g), 0.01), 20, 1)
        .unwrap();
    assert!(paths.iter().all(|p| p.min_value.iter().all(|&m| m >= 0.0)));
    assert!(paths.iter().any(|p| p.clipped));
    assert!(ensemble_stats(&paths, 0.0).unwrap().any_clipped);
}

#[test]
fn positive_ensemble_statistics_vanish() {
    let g = grid(101, 1.0, 0.5);
    let s = sim(
        &g,
        vec![ModeFunction::ProportionalCapped { c: 0.2, cap: 1.0 }],
        DriftKind::Hjm,
        SolverConfig::new(0.01, 0.5),
    );
    let u0 = GridFunction::from_fn(Arc::clone(&g), |x| 0.02 + 0.01 * (-x).exp()).unwrap();
    let paths = s.simulate_ensemble(&u0, 50, 3).unwrap();
    let summary = ensemble_stats(&paths, 0.5).unwrap();
    assert_eq!(summary.n_paths, 50);
    for &t in &NEGATIVITY_THRESHOLDS {
        assert_eq!(summary.final_fraction_below(t), Some(0.0));
    }
    assert!(summary.supermartingale_mean.iter().all(|&m| m == 0.0));
    assert!(summary.short_rate_negative.iter().all(|&f| f == 0.0));
    assert!(ensemble_stats(&[], 0.0).is_err());
    assert!(ensemble_stats(&paths, -1.0).is_err());
}

#[test]
fn ensemble_statistics_oracle() {
    let g = grid(101, 1.0, 0.5);
    let s = sim(
        &g,
        vec![ModeFunction::Constant { c: 0.3 }],
        DriftKind::Zero,
        SolverConfig::new(0.05, 1.0),
    );
    let paths = s
        .simulate_ensemble(&GridFunction::constant(Arc::clone(&g), 0.02), 40, 9)
        .unwrap();
    let c = 0.25;
    let summary = ensemble_stats(&paths, c).unwrap();
    for (j, &t) in summary.times.iter().enumerate() {
        let mean = paths.iter().map(|p| p.neg_energy[j]).sum::<f64>() / 40.0;
        assert!((summary.neg_energy_mean[j] - mean).abs() <= 1e-15 * (1.0 + mean));
        let sm = (-2.0 * c * t).exp() * mean;
        assert!((summary.supermartingale_mean[j] - sm).abs() <= 1e-14 * (1.0 + sm));
        for (threshold, series) in &summary.frac_below {
            let count = paths
                .iter()
                .filter(|p| p.min_value[..=j].iter().any(|m| m < threshold))
                .count();
            assert_eq!(series[j], count as f64 / 40.0);
        }
        assert!(series_is_monotone(&summary.frac_below[0].1[..=j]));
    }
}

fn series_is_monotone(s: &[f64]) -> bool {
    s.windows(2).all(|w| w[0] <= w[1])
}

#[test]
fn regularized_path_starts_positive() {
    let g = grid(201, 2.0, 0.5);
    let s = sim(
        &g,
        vec![ModeFunction::ProportionalCapped { c: 0.2, cap: 1.0 }],
        DriftKind::Hjm,
        SolverConfig::new(0.01, 0.2),
    );
    let u0 = GridFunction::from_fn(Arc::clone(&g), |x| if x < 0.5 { 0.0 } else { 0.03 }).unwrap();
    for lambda in [1.0, 0.1, 0.02] {
        let p = s.simulate_regularized(&u0, lambda, &NoiseConfig::new(1, 2, 0)).unwrap();
        assert_eq!(p.neg_energy[0], 0.0);
        assert!(p.min_value[0] >= 0.0);
    }
}

/// With `F = B = 0` the coupled distance is `sup_t ‖S(t)(J_λu₀ − u₀)‖`,
/// computed here directly from the semigroup.
#[test]
fn coupled_distance_without_coefficients() {
    let g = grid(401, 4.0, 0.5);
    let s = sim(&g, vec![], DriftKind::Zero, SolverConfig::new(0.05, 1.0));
    let u0 = GridFunction::from_fn(Arc::clone(&g), |x| 0.02 + 0.01 * (-x).exp() + 0.005 * (2.0 * x).sin()).unwrap();
    let lambdas = [0.4, 0.2, 0.1, 0.05];
    let got = s.coupled_distances(&u0, &lambdas, &NoiseConfig::new(0, 0, 0)).unwrap();
    for (&lambda, &d) in lambdas.iter().zip(&got) {
        let diff = s.suite().apply_resolvent(lambda, &u0).unwrap().sub(&u0).unwrap();
        let want = s
            .times()
            .iter()
            .map(|&t| norm(&s.suite().apply_semigroup(t, &diff).unwrap(), NormKind::L2Weighted))
            .fold(0.0, f64::max);
        assert!((d - want).abs() < 1e-6, "{lambda}: {d} vs {want}");
    }
    assert!(got.windows(2).all(|w| w[1] < w[0]), "{got:?}");
}

#[test]
fn lambda_study_rows() {
    let g = grid(101, 1.0, 0.5);
    let s = sim(
        &g,
        vec![ModeFunction::Constant { c: 0.2 }],
        DriftKind::Hjm,
        SolverConfig::new(0.02, 0.5),
    );
    let u0 = GridFunction::constant(Arc::clone(&g), 0.01);
    let study = s.lambda_convergence_study(&u0, &[0.1, 0.1, 0.05], 4, 7).unwrap();
    assert_eq!(study.rows.len(), 3);
    assert_eq!(study.rows[0].distances, study.rows[1].distances);
    for row in &study.rows {
        assert_eq!(row.distances.len(), 4);
        assert!((row.mean - row.distances.iter().sum::<f64>() / 4.0).abs() < 1e-16);
    }
    assert!(s.lambda_convergence_study(&u0, &[0.05, 0.1], 1, 0).is_err());
    assert!(s.lambda_convergence_study(&u0, &[], 1, 0).is_err());
    assert!(s.lambda_convergence_study(&u0, &[0.1], 0, 0).is_err());
}
