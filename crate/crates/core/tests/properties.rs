use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;

use synthbal::balancer::{dual_objective, solve_dual, solve_dual_matrix, SolverOptions};
use synthbal::data::{load_panel_csv, write_panel_csv, PanelDataset};
use synthbal::diagnostics::autocorr_imbalance;
use synthbal::dgp::{simulate, DgpKind, DgpSpec};
use synthbal::estimators::{sc_effect_path, twfe_event_study};
use synthbal::features::{lagged_levels, unit_autocorrelation, FeatureRecipe};
use synthbal::inference::{bootstrap_sc, BootstrapConfig};
use synthbal::montecarlo::{run_study, PipelineConfig};
use synthbal::rng::{derive_seed, stream_rng};
use synthbal::stats::{mean, sd};
use synthbal::theory::{effective_periods_projection, effective_periods_svd, effective_periods_two_way};

/// Outcomes, a treatment vector with both groups present, and t0.
fn panel_strategy() -> impl Strategy<Value = PanelDataset> {
    (6usize..20, 3usize..6, 1usize..3).prop_flat_map(|(n, t0, post)| {
        let cells = prop::collection::vec(-3.0f64..3.0, n * (t0 + post));
        let flags = prop::collection::vec(any::<bool>(), n);
        (cells, flags).prop_map(move |(cells, mut treated)| {
            treated[0] = true;
            treated[1] = false;
            let y = DMatrix::from_row_slice(n, t0 + post, &cells);
            PanelDataset::from_matrix(y, treated, t0).unwrap()
        })
    })
}

/// Feature matrix and treatment flags for a dual solve; ζ ≥ 0.5 keeps it well posed.
fn balance_strategy() -> impl Strategy<Value = (DMatrix<f64>, Vec<bool>, f64)> {
    (8usize..40, 1usize..4).prop_flat_map(|(n, p)| {
        (
            prop::collection::vec(-2.0f64..2.0, n * p),
            prop::collection::vec(any::<bool>(), n),
            prop::sample::select(vec![0.5, 1.0, 2.0]),
        )
            .prop_map(move |(x, mut d, zeta)| {
                d[0] = true;
                d[1] = false;
                (DMatrix::from_row_slice(n, p, &x), d, zeta)
            })
    })
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn opts() -> SolverOptions {
    SolverOptions::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn csv_write_then_load_is_identity(data in panel_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_panel_csv(&data, &path).unwrap();
        let back = load_panel_csv(&path, data.t0()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn autocorrelation_ignores_location_and_scale(
        data in panel_strategy(),
        shift in -10.0f64..10.0,
        scale in 0.1f64..10.0,
    ) {
        let y = data.outcomes().map(|v| v * scale + shift);
        let moved = data.with_outcomes(y).unwrap();
        let a = unit_autocorrelation(&data, data.t0()).unwrap();
        let b = unit_autocorrelation(&moved, data.t0()).unwrap();
        prop_assert!(max_gap(a.values().as_slice(), b.values().as_slice()) < 1e-9);
    }

    #[test]
    fn lagged_levels_never_read_post_columns(data in panel_strategy(), bump in -50.0f64..50.0) {
        let mut y = data.outcomes().clone();
        for t in data.t0()..data.periods() {
            y.column_mut(t).add_scalar_mut(bump);
        }
        let moved = data.with_outcomes(y).unwrap();
        prop_assert_eq!(lagged_levels(&data), lagged_levels(&moved));
    }

    #[test]
    fn dual_objective_is_midpoint_convex(
        (x, d, zeta) in balance_strategy(),
        a in prop::collection::vec(-2.0f64..2.0, 4),
        b in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let p = x.ncols();
        let g = |c: &[f64]| dual_objective(&x, &d, zeta, c[0], &c[1..=p]).unwrap();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(u, v)| (u + v) / 2.0).collect();
        let (ga, gb, gm) = (g(&a), g(&b), g(&mid));
        prop_assert!(gm <= (ga + gb) / 2.0 + 1e-12 * (1.0 + ga.abs() + gb.abs()));
    }

    #[test]
    fn weights_are_normalized_and_follow_the_tilt((x, d, zeta) in balance_strategy()) {
        let sol = solve_dual_matrix(&x, &d, zeta, &opts()).unwrap();
        let n = d.len() as f64;
        let pi_bar = d.iter().filter(|&&t| t).count() as f64 / n;
        let total: f64 = sol.weights.iter().zip(&d).filter(|(_, &t)| !t).map(|(w, _)| w).sum::<f64>() / n;
        prop_assert!((total - 1.0).abs() < 1e-8);
        prop_assert!(sol.kkt_residual <= opts().tol);
        for (i, &treated) in d.iter().enumerate() {
            let index: f64 = sol.alpha + (0..x.ncols()).map(|j| x[(i, j)] * sol.beta[j]).sum::<f64>();
            let expected = if treated { 0.0 } else { index.exp() / pi_bar };
            prop_assert!((sol.weights[i] - expected).abs() <= 1e-12 * (1.0 + expected));
        }
    }

    #[test]
    fn weights_are_rotation_invariant(
        (x, d, zeta) in balance_strategy(),
        raw in prop::collection::vec(-1.0f64..1.0, 9),
    ) {
        let p = x.ncols();
        let m = DMatrix::from_fn(p, p, |i, j| raw[i * 3 + j] + if i == j { 3.0 } else { 0.0 });
        let q = m.qr().q();
        let base = solve_dual_matrix(&x, &d, zeta, &opts()).unwrap();
        let rotated = solve_dual_matrix(&(&x * q), &d, zeta, &opts()).unwrap();
        prop_assert!(max_gap(&base.weights, &rotated.weights) < 1e-8);
    }

    #[test]
    fn column_shifts_are_absorbed_by_the_intercept(
        (x, d, zeta) in balance_strategy(),
        shift in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let mut moved = x.clone();
        for (j, mut col) in moved.column_iter_mut().enumerate() {
            col.add_scalar_mut(shift[j]);
        }
        let base = solve_dual_matrix(&x, &d, zeta, &opts()).unwrap();
        let shifted = solve_dual_matrix(&moved, &d, zeta, &opts()).unwrap();
        prop_assert!(max_gap(&base.weights, &shifted.weights) < 1e-8);
    }

    #[test]
    fn imbalance_grows_with_zeta((x, d, _) in balance_strategy()) {
        let mut last = 0.0;
        for zeta in [0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let norm = solve_dual_matrix(&x, &d, zeta, &opts()).unwrap().imbalance_norm();
            prop_assert!(norm >= last - 1e-8, "ζ = {zeta}: {norm} < {last}");
            last = norm;
        }
    }

    #[test]
    fn twfe_ignores_additive_effects(
        data in panel_strategy(),
        c in -5.0f64..5.0,
        unit in prop::collection::vec(-5.0f64..5.0, 20),
        period in prop::collection::vec(-5.0f64..5.0, 8),
    ) {
        let y = DMatrix::from_fn(data.n(), data.periods(), |i, t| data.outcomes()[(i, t)] + c + unit[i] + period[t]);
        let a = twfe_event_study(&data).unwrap();
        let b = twfe_event_study(&data.with_outcomes(y).unwrap()).unwrap();
        prop_assert_eq!(&a.horizons, &b.horizons);
        prop_assert!(max_gap(&a.tau, &b.tau) < 1e-8);
    }

    #[test]
    fn sc_path_is_linear_in_outcomes(
        data in panel_strategy(),
        z in prop::collection::vec(-3.0f64..3.0, 20 * 8),
        c in -3.0f64..3.0,
    ) {
        let sol = solve_dual(&lagged_levels(&data), data.treated(), 1.0, &opts()).unwrap();
        let zm = DMatrix::from_fn(data.n(), data.periods(), |i, t| z[i * 8 + t]);
        let y = data.outcomes() + &zm * c;
        let base = sc_effect_path(&data, &sol).unwrap();
        let other = sc_effect_path(&data.with_outcomes(zm).unwrap(), &sol).unwrap();
        let sum = sc_effect_path(&data.with_outcomes(y).unwrap(), &sol).unwrap();
        let expected: Vec<f64> = base.tau.iter().zip(&other.tau).map(|(a, b)| a + c * b).collect();
        prop_assert!(max_gap(&sum.tau, &expected) < 1e-10);
    }

    #[test]
    fn exact_balance_zeroes_the_pre_period_path(
        level in prop::collection::vec(-2.0f64..2.0, 24),
        trend in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        // Two-way outcomes: balancing the lags only requires matching the unit level,
        // which is feasible when the treated mean lies inside the control range.
        let n = level.len();
        let treated: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
        let treated_mean = mean(&level.iter().zip(&treated).filter(|(_, &d)| d).map(|(v, _)| *v).collect::<Vec<_>>());
        let controls: Vec<f64> = level.iter().zip(&treated).filter(|(_, &d)| !d).map(|(v, _)| *v).collect();
        let lo = controls.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = controls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(treated_mean > lo + 0.3 && treated_mean < hi - 0.3);
        let y = DMatrix::from_fn(n, 8, |i, t| level[i] + trend[t]);
        let data = PanelDataset::from_matrix(y, treated, 6).unwrap();
        let sol = solve_dual(&lagged_levels(&data), data.treated(), 0.0, &opts()).unwrap();
        prop_assert!(sol.imbalance_norm() <= 1e-6);
        let path = sc_effect_path(&data, &sol).unwrap();
        for (k, tau) in path.horizons.iter().zip(&path.tau) {
            if *k < -1 {
                prop_assert!(tau.abs() <= 1e-6, "k = {k}: {tau}");
            }
        }
    }

    #[test]
    fn simulation_is_a_function_of_the_seed(seed in any::<u64>(), mixture in any::<bool>()) {
        let kind = if mixture { DgpKind::Mixture } else { DgpKind::TwoWayAR };
        let spec = DgpSpec { n: 30, ..DgpSpec::with_kind(kind) };
        let a = simulate(&spec, seed).unwrap();
        let b = simulate(&spec, seed).unwrap();
        prop_assert_eq!(a.panel, b.panel);
        prop_assert_eq!(a.latent.pi, b.latent.pi);
    }
}

#[test]
fn bootstrap_ignores_unit_labels_and_order() {
    let sim = simulate(&DgpSpec { n: 200, ..DgpSpec::with_kind(DgpKind::TwoWayRW) }, 3).unwrap();
    let data = sim.panel;
    let cfg = BootstrapConfig { b_boot: 400, seed: 8, ..BootstrapConfig::default() };
    let recipe = FeatureRecipe::lags();
    let base = bootstrap_sc(&data, &recipe, 1.0, &opts(), &cfg).unwrap();

    let relabeled = PanelDataset::new(
        (0..data.n()).map(|i| format!("unit-{}", 1000 - i)).collect(),
        data.outcomes().clone(),
        data.treated().to_vec(),
        data.t0(),
    )
    .unwrap();
    assert_eq!(bootstrap_sc(&relabeled, &recipe, 1.0, &opts(), &cfg).unwrap(), base);

    // Reordering changes which units each draw picks, so the SE moves by MC error only.
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.shuffle(&mut stream_rng(5, 0));
    let permuted = bootstrap_sc(&data.select_units(&order).unwrap(), &recipe, 1.0, &opts(), &cfg).unwrap();
    assert!((permuted.point - base.point).abs() < 1e-9);
    // the SE of a bootstrap SE is about se/sqrt(2·b_boot)
    let tol = 4.0 * base.se / (2.0 * cfg.b_boot as f64).sqrt() * 2f64.sqrt();
    assert!((permuted.se - base.se).abs() < tol, "{} vs {}", permuted.se, base.se);
}

#[test]
fn permuted_labels_have_no_autocorrelation_gap() {
    let spec = DgpSpec { n: 200, ..DgpSpec::with_kind(DgpKind::Mixture) };
    let gaps: Vec<f64> = (0..200u64)
        .map(|r| {
            let data = simulate(&spec, derive_seed(21, r)).unwrap().panel;
            let mut labels = data.treated().to_vec();
            labels.shuffle(&mut stream_rng(derive_seed(22, r), 0));
            let shuffled = PanelDataset::from_matrix(data.outcomes().clone(), labels, data.t0()).unwrap();
            autocorr_imbalance(&shuffled, None).unwrap().rho_hat
        })
        .collect();
    let se = sd(&gaps) / (gaps.len() as f64).sqrt();
    assert!(mean(&gaps).abs() < 3.0 * se, "mean {} se {se}", mean(&gaps));
}

#[test]
fn doubling_replications_refines_the_means() {
    let spec = DgpSpec { n: 150, ..DgpSpec::with_kind(DgpKind::TwoWayRW) };
    let pipeline = PipelineConfig::default();
    let half = run_study(&spec, &pipeline, 40, 17).unwrap();
    let full = run_study(&spec, &pipeline, 80, 17).unwrap();
    for cell in &half.cells {
        let other = full.cell(&cell.estimator, cell.horizon).unwrap();
        let tol = 3.0 * cell.sd / (cell.count as f64).sqrt() + 1e-12;
        assert!((cell.mean - other.mean).abs() <= tol, "{} {:?}", cell.estimator, cell.horizon);
    }
}

#[test]
fn svd_bound_agrees_with_the_two_way_projection() {
    // One factor with constant loading profile is the two-way model; the SVD
    // bound on Ψ = 1 and the closed form coincide, and a large simulated
    // population reproduces them up to MC error.
    let (v_eta, sigma2, t0) = (1.0, 1.0, 8);
    let closed = effective_periods_two_way(v_eta, sigma2, t0).unwrap();
    let psi = DMatrix::from_element(1, t0, 1.0);
    let next = nalgebra::DVector::from_element(1, 1.0);
    let svd = effective_periods_svd(&psi, &next, sigma2).unwrap();
    assert!((svd.approx_error2 - closed.approx_error2).abs() < 1e-10);

    let spec = DgpSpec { n: 100_000, t0, rho: 0.0, sigma_ar2: sigma2, ..DgpSpec::default() };
    let projected = effective_periods_projection(&simulate(&spec, 4).unwrap()).unwrap();
    // the bound can only be conservative; allow 3% MC error
    assert!(svd.approx_error2 >= projected.approx_error2 * 0.97);
    assert!((projected.approx_error2 / closed.approx_error2 - 1.0).abs() < 0.03);
}
