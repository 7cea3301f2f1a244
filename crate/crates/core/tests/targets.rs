use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, Binomial, Continuous, Discrete, Pareto};
use vboost::targets::{BinomialData, HierarchicalBinomial};
use vboost::targets::TargetModel;

fn model() -> HierarchicalBinomial {
    HierarchicalBinomial::new(BinomialData::efron_morris())
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Trapezoid rule for `ln ∫ exp(f)` over `[lo, hi]`.
fn log_integral(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    let vals: Vec<f64> = (0..n).map(|i| f(lo + h * i as f64)).collect();
    let peak = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = vals
        .iter()
        .enumerate()
        .map(|(i, v)| if i == 0 || i == n - 1 { 0.5 } else { 1.0 } * (v - peak).exp())
        .sum();
    peak + (sum * h).ln()
}

/// The prior on the unconstrained scale, rebuilt from independent constrained
/// densities and the Jacobian of each transform.
fn prior_from_constrained(x: &DVector<f64>) -> f64 {
    let phi = logistic(x[0]);
    let kappa = 1.0 + x[1].exp();
    let mut lp = (phi * (1.0 - phi)).ln();
    lp += Pareto::new(1.0, 1.5).unwrap().ln_pdf(kappa) + (kappa - 1.0).ln();
    let beta = Beta::new(phi * kappa, (1.0 - phi) * kappa).unwrap();
    for &u in x.iter().skip(2) {
        let theta = logistic(u);
        lp += beta.ln_pdf(theta) + (theta * (1.0 - theta)).ln();
    }
    lp
}

fn random_point(rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(20, |i, _| match i {
        0 => rng.random_range(-2.0..1.0),
        1 => rng.random_range(0.0..4.0),
        _ => rng.random_range(-2.5..0.0),
    })
}

#[test]
fn prior_matches_constrained_densities() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let x = random_point(&mut rng);
        let (a, b) = (m.log_prior(&x), prior_from_constrained(&x));
        assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn log_density_is_prior_plus_binomial_likelihood() {
    let m = model();
    let data = BinomialData::efron_morris();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let x = random_point(&mut rng);
        let theta = HierarchicalBinomial::constrain(&x);
        let lik: f64 = (0..data.len())
            .map(|j| Binomial::new(theta[j + 2], data.at_bats[j]).unwrap().ln_pmf(data.hits[j]))
            .sum();
        let expected = m.log_prior(&x) + lik;
        assert!((m.log_density(&x) - expected).abs() < 1e-9 * (1.0 + expected.abs()));
    }
}

#[test]
fn hyperpriors_integrate_to_one_on_the_unconstrained_line() {
    let phi = log_integral(|u| logistic(u).ln() + logistic(-u).ln(), -40.0, 40.0, 8001);
    assert!(phi.abs() < 1e-4, "phi: {phi}");
    let kappa = log_integral(
        |u| HierarchicalBinomial::log_kappa_prior(1.0 + u.exp()) + u,
        -40.0,
        40.0,
        8001,
    );
    assert!(kappa.abs() < 1e-4, "kappa: {kappa}");
}

/// With the hyperparameters fixed, the mass of one player's coordinate on the
/// unconstrained line is the Beta density's mass, which is one. Dividing the
/// integral by the value at `x` leaves exactly the constrained density times
/// the Jacobian at `x`.
#[test]
fn player_coordinates_carry_the_beta_mass() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_point(&mut rng);
    let base = m.log_prior(&x);
    let (phi, kappa) = (logistic(x[0]), 1.0 + x[1].exp());
    let beta = Beta::new(phi * kappa, (1.0 - phi) * kappa).unwrap();
    for j in 2..20 {
        let along = |t: f64| {
            let mut y = x.clone();
            y[j] = t;
            m.log_prior(&y) - base
        };
        let mass = log_integral(along, -60.0, 60.0, 24001);
        let theta = logistic(x[j]);
        let jac = beta.ln_pdf(theta) + (theta * (1.0 - theta)).ln();
        assert!((mass + jac).abs() < 1e-4, "coordinate {j}: {}", mass + jac);
    }
}
