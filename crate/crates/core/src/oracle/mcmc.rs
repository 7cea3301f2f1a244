use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::targets::TargetModel;

const TUNE_WINDOW: usize = 200;
const TARGET_ACCEPT: f64 = 0.3;

/// Post-burn-in draws of a random-walk Metropolis chain.
#[derive(Debug, Clone, PartialEq)]
pub struct MhChain {
    pub samples: Vec<DVector<f64>>,
    /// Acceptance rate after burn-in.
    pub acceptance_rate: f64,
    /// Per-coordinate proposal standard deviations used after burn-in.
    pub proposal_scale: DVector<f64>,
}

/// Gaussian random-walk Metropolis from `start`.
///
/// During burn-in the proposal is retuned every 200 steps: per-coordinate
/// scales follow the running standard deviation of the chain and a global
/// multiplier is nudged toward 30% acceptance. The proposal is frozen after
/// burn-in, so the kept draws come from a fixed reversible kernel.
pub fn rwm_sample<T: TargetModel + ?Sized, R: Rng + ?Sized>(
    target: &T,
    start: &DVector<f64>,
    n_steps: usize,
    burn_in: usize,
    proposal_scale: f64,
    rng: &mut R,
) -> Result<MhChain> {
    if n_steps <= burn_in {
        return Err(Error::InvalidArgument("n_steps must exceed burn_in".into()));
    }
    if !(proposal_scale > 0.0) {
        return Err(Error::InvalidArgument(
            "proposal scale must be positive".into(),
        ));
    }
    let dim = target.dim();
    let mut x = start.clone();
    let mut lp = target.log_density(&x);
    if !lp.is_finite() {
        return Err(Error::NonFiniteTarget {
            point: x.iter().copied().collect(),
        });
    }
    let mut base = DVector::from_element(dim, proposal_scale);
    let mut log_mult = 0.0f64;
    let welford_start = burn_in / 10;
    let (mut w_n, mut w_mean, mut w_m2) = (0usize, DVector::zeros(dim), DVector::zeros(dim));
    let mut window_accepts = 0usize;
    let mut kept_accepts = 0usize;
    let mut samples = Vec::with_capacity(n_steps - burn_in);
    let optimal = 2.38 / (dim as f64).sqrt();

    for step in 0..n_steps {
        let mult = log_mult.exp();
        let mut y = x.clone();
        for d in 0..dim {
            y[d] += mult * base[d] * rng.sample::<f64, _>(StandardNormal);
        }
        let lp_y = target.log_density(&y);
        let u: f64 = rng.random();
        let accepted = !lp_y.is_nan() && u.ln() < lp_y - lp;
        if accepted {
            x = y;
            lp = lp_y;
        }
        if step < burn_in {
            window_accepts += accepted as usize;
            if step >= welford_start {
                w_n += 1;
                let delta = &x - &w_mean;
                w_mean.axpy(1.0 / w_n as f64, &delta, 1.0);
                let delta2 = &x - &w_mean;
                w_m2 += delta.component_mul(&delta2);
            }
            if (step + 1) % TUNE_WINDOW == 0 {
                let rate = window_accepts as f64 / TUNE_WINDOW as f64;
                window_accepts = 0;
                if w_n >= 10 * TUNE_WINDOW.max(dim) {
                    let fresh = w_m2.map(|m| optimal * (m / (w_n - 1) as f64).sqrt().max(1e-12));
                    // rescale so the change of base does not undo the tuned step length
                    log_mult += (base.mean() / fresh.mean()).ln();
                    base = fresh;
                }
                log_mult += rate - TARGET_ACCEPT;
            }
        } else {
            kept_accepts += accepted as usize;
            samples.push(x.clone());
        }
    }
    let kept = samples.len();
    Ok(MhChain {
        samples,
        acceptance_rate: kept_accepts as f64 / kept as f64,
        proposal_scale: base * log_mult.exp(),
    })
}

/// Effective sample size by Geyer's initial monotone positive sequence on
/// the FFT autocorrelation.
pub fn ess(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 4 {
        return n as f64;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = values
        .iter()
        .map(|v| Complex::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let acov0 = buf[0].re;
    if !(acov0 > 0.0) {
        return n as f64;
    }
    let rho = |k: usize| buf[k].re / acov0;

    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 < n {
        let pair = rho(2 * m) + rho(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        m += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / (n as f64).log10());
    n as f64 / tau
}

/// Moments of a chain with Monte Carlo standard errors from the ESS of each
/// underlying series. Variances use the `1/n` normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMoments {
    pub mean: DVector<f64>,
    pub mean_se: DVector<f64>,
    pub std: DVector<f64>,
    pub std_se: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub cov_se: DMatrix<f64>,
}

fn mean_and_se(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var / ess(series)).sqrt())
}

pub fn chain_moments(samples: &[DVector<f64>]) -> Result<ChainMoments> {
    if samples.len() < 4 {
        return Err(Error::InvalidArgument("need at least 4 draws".into()));
    }
    let dim = samples[0].len();
    let columns: Vec<Vec<f64>> = (0..dim)
        .map(|d| samples.iter().map(|x| x[d]).collect())
        .collect();
    let mean_parts: Vec<(f64, f64)> = columns.par_iter().map(|c| mean_and_se(c)).collect();
    let mean = DVector::from_fn(dim, |d, _| mean_parts[d].0);
    let mean_se = DVector::from_fn(dim, |d, _| mean_parts[d].1);

    let pairs: Vec<(usize, usize)> = (0..dim)
        .flat_map(|i| (i..dim).map(move |j| (i, j)))
        .collect();
    let products: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let series: Vec<f64> = columns[i]
                .iter()
                .zip(&columns[j])
                .map(|(a, b)| (a - mean[i]) * (b - mean[j]))
                .collect();
            mean_and_se(&series)
        })
        .collect();
    let mut cov = DMatrix::zeros(dim, dim);
    let mut cov_se = DMatrix::zeros(dim, dim);
    for (&(i, j), &(c, se)) in pairs.iter().zip(&products) {
        cov[(i, j)] = c;
        cov[(j, i)] = c;
        cov_se[(i, j)] = se;
        cov_se[(j, i)] = se;
    }
    let std = DVector::from_fn(dim, |d, _| cov[(d, d)].sqrt());
    // delta method: se(√v) = se(v) / (2√v)
    let std_se = DVector::from_fn(dim, |d, _| cov_se[(d, d)] / (2.0 * std[d]));
    Ok(ChainMoments {
        mean,
        mean_se,
        std,
        std_se,
        cov,
        cov_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn independent_draws_have_full_ess() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs: Vec<f64> = (0..20_000).map(|_| rng.sample(StandardNormal)).collect();
        let e = ess(&xs);
        assert!((e / 20_000.0 - 1.0).abs() < 0.1, "{e}");
    }

    #[test]
    fn ar1_ess_matches_theory() {
        // AR(1) with coefficient a has integrated time (1 + a) / (1 - a).
        let a = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = 0.0;
        let xs: Vec<f64> = (0..200_000)
            .map(|_| {
                x = a * x + rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect();
        let expected = 200_000.0 * (1.0 - a) / (1.0 + a);
        let e = ess(&xs);
        assert!((e / expected - 1.0).abs() < 0.15, "{e} vs {expected}");
    }

    #[test]
    fn rejects_non_finite_start() {
        struct Half;
        impl TargetModel for Half {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, x: &DVector<f64>) -> f64 {
                if x[0] < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    -x[0]
                }
            }
            fn grad_log_density(&self, _: &DVector<f64>) -> DVector<f64> {
                DVector::from_element(1, -1.0)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(rwm_sample(
            &Half,
            &DVector::from_element(1, -1.0),
            100,
            10,
            1.0,
            &mut rng
        )
        .is_err());
        let chain = rwm_sample(
            &Half,
            &DVector::from_element(1, 1.0),
            2000,
            1000,
            1.0,
            &mut rng,
        )
        .unwrap();
        assert!(chain.samples.iter().all(|x| x[0] >= 0.0));
    }
}
