use nalgebra::{DMatrix, DVector};
use vboost::oracle::{kl_q_to_target, QuadratureGrid};
use vboost::{
    add_component, fit_first, marginal_variance_pct_change, run, select_rank, GaussianTarget, GmmTarget,
    RankPolicy, VBoostConfig,
};

fn quick() -> VBoostConfig {
    VBoostConfig {
        first_steps: 600,
        component_steps: 400,
        n_new: 200,
        n_old: 200,
        eval_samples: 2000,
        ..VBoostConfig::default()
    }
}

fn bimodal_1d() -> GmmTarget {
    GmmTarget::new(vec![
        (0.5, DVector::from_element(1, -2.0), DMatrix::from_element(1, 1, 0.25)),
        (0.5, DVector::from_element(1, 2.0), DMatrix::from_element(1, 1, 0.25)),
    ])
    .unwrap()
}

#[test]
fn first_fit_recovers_a_standard_normal() {
    let target = GaussianTarget::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
    let cfg = VBoostConfig { first_steps: 2000, ..quick() };
    let (mix, trace) = fit_first(&target, 0, &cfg).unwrap();
    let comp = &mix.components()[0];
    assert!(comp.mean().norm() <= 0.05, "mean {}", comp.mean());
    assert!(comp.cov().log_diag().norm() <= 0.1, "log var {}", comp.cov().log_diag());
    assert_eq!(trace.records.last().unwrap().step, 1999);
    assert_eq!(fit_first(&target, 0, &cfg).unwrap().0, mix);
}

#[test]
fn first_fit_in_one_dimension() {
    let target = GaussianTarget::new(DVector::from_element(1, 3.0), DMatrix::from_element(1, 1, 4.0)).unwrap();
    let (mix, _) = fit_first(&target, 0, &quick()).unwrap();
    let comp = &mix.components()[0];
    assert!((comp.mean()[0] - 3.0).abs() < 0.1, "mean {}", comp.mean()[0]);
    assert!((comp.cov().log_diag()[0] - 4f64.ln()).abs() < 0.1);
}

#[test]
fn diagonal_target_selects_rank_zero() {
    let var = DVector::from_fn(10, |d, _| 0.5 + 0.1 * d as f64);
    let target = GaussianTarget::new(DVector::zeros(10), DMatrix::from_diagonal(&var)).unwrap();
    let sweep = select_rank(&target, 0.05, 5, &quick()).unwrap();
    assert_eq!(sweep.selected, 0);
    assert_eq!(sweep.fits.len(), 2);
    assert!(!sweep.hit_max_rank);
    let change = marginal_variance_pct_change(&sweep.fits[0], &sweep.fits[1]).unwrap();
    assert_eq!(change.to_bits(), sweep.pct_change[0].to_bits());

    let loose = select_rank(&target, 1.0, 5, &quick()).unwrap();
    assert_eq!(loose.selected, 0);
}

#[test]
fn one_dimension_never_adds_factors() {
    let target = GaussianTarget::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
    let sweep = select_rank(&target, 0.0, 4, &quick()).unwrap();
    assert_eq!(sweep.selected, 0);
    assert_eq!(sweep.fits.len(), 1);
    assert!(sweep.pct_change.is_empty());
    assert!(!sweep.hit_max_rank);
}

#[test]
fn marginal_variance_grows_with_rank() {
    let f = DMatrix::from_fn(6, 2, |i, j| if (i + j) % 2 == 0 { 1.2 } else { -0.6 + 0.1 * i as f64 });
    let cov = &f * f.transpose() + DMatrix::identity(6, 6) * 0.5;
    let target = GaussianTarget::new(DVector::zeros(6), cov).unwrap();
    let sweep = select_rank(&target, 0.0, 3, &quick()).unwrap();
    assert!(sweep.mean_marginal_variance.len() >= 3);
    for pair in sweep.mean_marginal_variance.windows(2) {
        assert!(pair[1] >= pair[0] - 0.1, "{:?}", sweep.mean_marginal_variance);
    }
}

#[test]
fn adding_a_component_does_not_lower_the_elbo() {
    let cfg = VBoostConfig { max_components: 2, ..quick() };
    let result = run(&bimodal_1d(), &cfg).unwrap();
    let (before, after) = (&result.stages[0].eval, &result.stages[1].eval);
    let se = (before.std_error.powi(2) + after.std_error.powi(2)).sqrt();
    assert!(after.value >= before.value - 2.0 * se, "{} -> {}", before.value, after.value);
    assert!(after.value > before.value + 0.5, "the second mode is worth ln 2: {} -> {}", before.value, after.value);
}

#[test]
fn add_component_freezes_the_old_mixture() {
    let target = bimodal_1d();
    let cfg = quick();
    let (first, _) = fit_first(&target, 0, &cfg).unwrap();
    let (two, _) = add_component(&target, &first, 0, 2, &cfg).unwrap();
    assert_eq!(two.n_components(), 2);
    assert_eq!(two.components()[0], first.components()[0]);
    let old = first.components()[0].mean()[0];
    let new = two.components()[1].mean()[0];
    let missing = if old > 0.0 { -2.0 } else { 2.0 };
    assert!((new - missing).abs() < 0.3, "old {old}, new {new}");
    assert!((two.weights()[1] - 0.5).abs() < 0.1, "rho {}", two.weights()[1]);
    assert_eq!(two.truncated(1).unwrap(), first);
}

#[test]
fn single_component_run_is_the_first_fit() {
    let target = bimodal_1d();
    let cfg = quick();
    let result = run(&target, &cfg).unwrap();
    assert_eq!(result.mixture, fit_first(&target, 0, &cfg).unwrap().0);
    assert_eq!(result.stages.len(), 1);
    assert!(result.rank_sweep.is_none());
}

#[test]
fn runs_are_reproducible_and_seed_dependent() {
    let target = bimodal_1d();
    let cfg = VBoostConfig { max_components: 2, ..quick() };
    let a = run(&target, &cfg).unwrap();
    assert_eq!(run(&target, &cfg).unwrap(), a);
    let b = run(&target, &VBoostConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.mixture, b.mixture);
    for (i, stage) in a.stages.iter().enumerate() {
        assert_eq!(stage.stage, i + 1);
        assert_eq!(stage.mixture.n_components(), i + 1);
    }
}

#[test]
fn sweep_policy_records_the_sweep() {
    let target = GaussianTarget::new(
        DVector::zeros(3),
        DMatrix::from_row_slice(3, 3, &[2.0, 1.5, 1.5, 1.5, 2.0, 1.5, 1.5, 1.5, 2.0]),
    )
    .unwrap();
    let cfg = VBoostConfig {
        rank: RankPolicy::Sweep { threshold: 0.05, max_rank: 3 },
        ..quick()
    };
    let result = run(&target, &cfg).unwrap();
    let sweep = result.rank_sweep.as_ref().unwrap();
    assert_eq!(sweep.selected, 1);
    assert_eq!(result.stages[0].rank, 1);
    assert_eq!(result.mixture, sweep.fits[1]);
}

/// Four equal modes at `(±1.5, ±1.5)`, each `N(·, 0.25 I)`.
fn four_mode() -> GmmTarget {
    let part = |a: f64, b: f64| (0.25, DVector::from_vec(vec![a, b]), DMatrix::identity(2, 2) * 0.25);
    GmmTarget::new(vec![part(-1.5, -1.5), part(-1.5, 1.5), part(1.5, -1.5), part(1.5, 1.5)]).unwrap()
}

#[test]
fn four_diagonal_components_cover_four_modes() {
    let target = four_mode();
    let cfg = VBoostConfig {
        max_components: 4,
        ..VBoostConfig::default()
    };
    let result = run(&target, &cfg).unwrap();
    let grid = QuadratureGrid::square(-8.0, 8.0, 401).unwrap();
    let kl = kl_q_to_target(&result.mixture, &target, &grid).unwrap();
    assert!(kl <= 0.1, "KL {kl}");
    let first = kl_q_to_target(&result.mixture.truncated(1).unwrap(), &target, &grid).unwrap();
    assert!(first > 1.0, "a single Gaussian cannot cover four modes, KL {first}");
}
