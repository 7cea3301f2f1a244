use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::TargetModel;
use crate::error::{Error, Result};
use crate::numeric::LN_2PI;

const HYPER_VAR: f64 = 100.0;

/// Counts `Y[e, p]` with exposures `N[e, p]`, stored row-major by ethnicity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonGlmData {
    pub n_ethnicities: usize,
    pub n_precincts: usize,
    pub counts: Vec<u64>,
    pub exposures: Vec<f64>,
}

impl PoissonGlmData {
    pub fn new(
        n_ethnicities: usize,
        n_precincts: usize,
        counts: Vec<u64>,
        exposures: Vec<f64>,
    ) -> Result<Self> {
        let cells = n_ethnicities * n_precincts;
        if cells == 0 {
            return Err(Error::InvalidArgument(
                "need at least one ethnicity and one precinct".into(),
            ));
        }
        if counts.len() != cells || exposures.len() != cells {
            return Err(Error::DimensionMismatch {
                expected: cells,
                got: counts.len().min(exposures.len()),
            });
        }
        if let Some(i) = exposures
            .iter()
            .position(|&n| !(n >= 1.0) || !n.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "cell ({}, {}): exposure {} must be at least 1",
                i / n_precincts,
                i % n_precincts,
                exposures[i]
            )));
        }
        Ok(Self {
            n_ethnicities,
            n_precincts,
            counts,
            exposures,
        })
    }

    pub fn count(&self, e: usize, p: usize) -> u64 {
        self.counts[e * self.n_precincts + p]
    }

    pub fn exposure(&self, e: usize, p: usize) -> f64 {
        self.exposures[e * self.n_precincts + p]
    }
}

/// Generating parameters for synthetic count data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonTruth {
    pub mu: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub exposure_min: u64,
    pub exposure_max: u64,
}

impl Default for PoissonTruth {
    fn default() -> Self {
        Self {
            mu: -0.5,
            sigma_alpha: 0.5,
            sigma_beta: 0.8,
            exposure_min: 20,
            exposure_max: 400,
        }
    }
}

/// Draws `α_e ~ N(0, σ_α²)`, `β_p ~ N(0, σ_β²)`, exposures uniform on
/// `[exposure_min, exposure_max]`, then `Y ~ Poisson(N exp(μ + α_e + β_p))`.
pub fn gen_poisson_data(
    seed: u64,
    n_ethnicities: usize,
    n_precincts: usize,
    truth: &PoissonTruth,
) -> Result<PoissonGlmData> {
    if truth.exposure_min < 1 || truth.exposure_max < truth.exposure_min {
        return Err(Error::InvalidArgument(
            "exposure range must satisfy 1 <= min <= max".into(),
        ));
    }
    if !(truth.sigma_alpha >= 0.0 && truth.sigma_beta >= 0.0 && truth.mu.is_finite()) {
        return Err(Error::InvalidArgument(
            "generator scales must be non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha: Vec<f64> = (0..n_ethnicities)
        .map(|_| truth.sigma_alpha * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let beta: Vec<f64> = (0..n_precincts)
        .map(|_| truth.sigma_beta * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let cells = n_ethnicities * n_precincts;
    let mut counts = Vec::with_capacity(cells);
    let mut exposures = Vec::with_capacity(cells);
    for a in &alpha {
        for b in &beta {
            let n = rng.random_range(truth.exposure_min..=truth.exposure_max) as f64;
            let rate = n * (truth.mu + a + b).exp();
            let y = Poisson::new(rate)
                .map_err(|e| Error::InvalidArgument(format!("poisson rate {rate}: {e}")))?
                .sample(&mut rng);
            counts.push(y as u64);
            exposures.push(n);
        }
    }
    PoissonGlmData::new(n_ethnicities, n_precincts, counts, exposures)
}

/// Multilevel Poisson regression
///
/// ```text
/// μ, ln σ_α², ln σ_β² ~ N(0, 10²)
/// α_e ~ N(0, σ_α²),  β_p ~ N(0, σ_β²)
/// Y_ep ~ Poisson(exp(μ + α_e + β_p + ln N_ep))
/// ```
///
/// with `x = (μ, ln σ_α², ln σ_β², α_1..α_E, β_1..β_P)`.
#[derive(Debug, Clone)]
pub struct MultilevelPoisson {
    data: PoissonGlmData,
    log_exposure: Vec<f64>,
    constant: f64,
}

impl MultilevelPoisson {
    pub fn new(data: PoissonGlmData) -> Self {
        let log_exposure = data.exposures.iter().map(|n| n.ln()).collect();
        let n_effects = (data.n_ethnicities + data.n_precincts) as f64;
        let constant = -1.5 * (LN_2PI + HYPER_VAR.ln())
            - 0.5 * n_effects * LN_2PI
            - data
                .counts
                .iter()
                .map(|&y| ln_gamma(y as f64 + 1.0))
                .sum::<f64>();
        Self {
            data,
            log_exposure,
            constant,
        }
    }

    pub fn data(&self) -> &PoissonGlmData {
        &self.data
    }

    fn offsets(&self) -> (usize, usize) {
        (3, 3 + self.data.n_ethnicities)
    }
}

impl TargetModel for MultilevelPoisson {
    fn dim(&self) -> usize {
        3 + self.data.n_ethnicities + self.data.n_precincts
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.dim());
        let (mu, s_a, s_b) = (x[0], x[1], x[2]);
        let (oa, ob) = self.offsets();
        let (ne, np) = (self.data.n_ethnicities, self.data.n_precincts);
        let mut lp = self.constant - 0.5 * (mu * mu + s_a * s_a + s_b * s_b) / HYPER_VAR;
        let (inv_a, inv_b) = ((-s_a).exp(), (-s_b).exp());
        for e in 0..ne {
            lp -= 0.5 * s_a + 0.5 * x[oa + e] * x[oa + e] * inv_a;
        }
        for p in 0..np {
            lp -= 0.5 * s_b + 0.5 * x[ob + p] * x[ob + p] * inv_b;
        }
        for e in 0..ne {
            for p in 0..np {
                let i = e * np + p;
                let eta = mu + x[oa + e] + x[ob + p] + self.log_exposure[i];
                lp += self.data.counts[i] as f64 * eta - eta.exp();
            }
        }
        lp
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim());
        let (mu, s_a, s_b) = (x[0], x[1], x[2]);
        let (oa, ob) = self.offsets();
        let (ne, np) = (self.data.n_ethnicities, self.data.n_precincts);
        let (inv_a, inv_b) = ((-s_a).exp(), (-s_b).exp());
        let mut g = DVector::zeros(self.dim());
        g[0] = -mu / HYPER_VAR;
        g[1] = -s_a / HYPER_VAR;
        g[2] = -s_b / HYPER_VAR;
        for e in 0..ne {
            let a = x[oa + e];
            g[1] += -0.5 + 0.5 * a * a * inv_a;
            g[oa + e] = -a * inv_a;
        }
        for p in 0..np {
            let b = x[ob + p];
            g[2] += -0.5 + 0.5 * b * b * inv_b;
            g[ob + p] = -b * inv_b;
        }
        for e in 0..ne {
            for p in 0..np {
                let i = e * np + p;
                let eta = mu + x[oa + e] + x[ob + p] + self.log_exposure[i];
                let resid = self.data.counts[i] as f64 - eta.exp();
                g[0] += resid;
                g[oa + e] += resid;
                g[ob + p] += resid;
            }
        }
        g
    }
}
