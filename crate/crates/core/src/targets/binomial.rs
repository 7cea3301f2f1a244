use std::io::Read;
use std::path::Path;

use nalgebra::DVector;
use serde::Deserialize;
use statrs::function::gamma::{digamma, ln_gamma};

use super::TargetModel;
use crate::error::{Error, Result};
use crate::numeric::{log_logistic, logistic};

const PARETO_SHAPE: f64 = 1.5;
const EFRON_MORRIS_CSV: &str = include_str!("../../data/efron_morris_1975.csv");

/// Hits `y_j` out of `K_j` attempts for each of `J` players.
#[derive(Debug, Clone, PartialEq)]
pub struct BinomialData {
    pub names: Vec<String>,
    pub hits: Vec<u64>,
    pub at_bats: Vec<u64>,
}

#[derive(Debug, Deserialize)]
struct BinomialRow {
    name: String,
    hits: u64,
    at_bats: u64,
}

impl BinomialData {
    pub fn new(names: Vec<String>, hits: Vec<u64>, at_bats: Vec<u64>) -> Result<Self> {
        if names.len() != hits.len() || hits.len() != at_bats.len() {
            return Err(Error::InvalidArgument(
                "binomial columns differ in length".into(),
            ));
        }
        for (j, (&y, &k)) in hits.iter().zip(&at_bats).enumerate() {
            if k == 0 || y > k {
                return Err(Error::Data {
                    line: j as u64 + 2,
                    message: format!(
                        "row '{}': need 0 <= hits <= at_bats and at_bats >= 1",
                        names[j]
                    ),
                });
            }
        }
        Ok(Self {
            names,
            hits,
            at_bats,
        })
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    /// Parses `name,hits,at_bats` CSV with a mandatory header row.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["name", "hits", "at_bats"] {
            return Err(Error::Data {
                line: 1,
                message: format!(
                    "expected header 'name,hits,at_bats', found '{}'",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let (mut names, mut hits, mut at_bats) = (Vec::new(), Vec::new(), Vec::new());
        for result in rdr.deserialize::<BinomialRow>() {
            let row = result.map_err(|e| Error::Data {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = names.len() as u64 + 2;
            if row.at_bats == 0 {
                return Err(Error::Data {
                    line,
                    message: format!("row '{}': at_bats must be at least 1", row.name),
                });
            }
            if row.hits > row.at_bats {
                return Err(Error::Data {
                    line,
                    message: format!(
                        "row '{}': hits {} exceed at_bats {}",
                        row.name, row.hits, row.at_bats
                    ),
                });
            }
            names.push(row.name);
            hits.push(row.hits);
            at_bats.push(row.at_bats);
        }
        Self::new(names, hits, at_bats)
    }

    /// Bundled copy of the 18-player batting data (first 45 at-bats of 1970).
    pub fn efron_morris() -> Self {
        Self::from_csv_reader(EFRON_MORRIS_CSV.as_bytes()).expect("bundled data is valid")
    }
}

pub fn load_binomial_csv(path: &Path) -> Result<BinomialData> {
    BinomialData::from_csv_reader(std::fs::File::open(path)?)
}

/// Hierarchical binomial regression
///
/// ```text
/// φ ~ Uniform(0, 1),  κ ~ Pareto(1, 1.5),
/// θ_j ~ Beta(φκ, (1-φ)κ),  y_j ~ Binomial(K_j, θ_j)
/// ```
///
/// on the unconstrained coordinates `x = (u_φ, u_κ, u_1..u_J)` with
/// `φ = σ(u_φ)`, `κ = 1 + exp(u_κ)`, `θ_j = σ(u_j)`.
#[derive(Debug, Clone)]
pub struct HierarchicalBinomial {
    data: BinomialData,
    log_binom_coef: f64,
}

struct Hyper {
    phi: f64,
    one_minus_phi: f64,
    kappa: f64,
    a: f64,
    b: f64,
}

impl HierarchicalBinomial {
    pub fn new(data: BinomialData) -> Self {
        let log_binom_coef = data
            .hits
            .iter()
            .zip(&data.at_bats)
            .map(|(&y, &k)| {
                ln_gamma(k as f64 + 1.0) - ln_gamma(y as f64 + 1.0) - ln_gamma((k - y) as f64 + 1.0)
            })
            .sum();
        Self {
            data,
            log_binom_coef,
        }
    }

    pub fn data(&self) -> &BinomialData {
        &self.data
    }

    /// `ln Pareto(κ; x_m = 1, α = 1.5)` for `κ ≥ 1`.
    pub fn log_kappa_prior(kappa: f64) -> f64 {
        PARETO_SHAPE.ln() - (PARETO_SHAPE + 1.0) * kappa.ln()
    }

    /// Maps unconstrained coordinates to `(φ, κ, θ_1..θ_J)`.
    pub fn constrain(x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| match i {
            1 => 1.0 + x[1].exp(),
            _ => logistic(x[i]),
        })
    }

    fn hyper(x: &DVector<f64>) -> Hyper {
        let phi = logistic(x[0]);
        let one_minus_phi = logistic(-x[0]);
        let kappa = 1.0 + x[1].exp();
        Hyper {
            phi,
            one_minus_phi,
            kappa,
            a: phi * kappa,
            b: one_minus_phi * kappa,
        }
    }

    /// Hyperpriors, player-level Beta priors and all log-Jacobians; no likelihood.
    pub fn log_prior(&self, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.data.len() + 2);
        let h = Self::hyper(x);
        let log_beta_fn = ln_gamma(h.a) + ln_gamma(h.b) - ln_gamma(h.kappa);
        let mut lp =
            Self::log_kappa_prior(h.kappa) + log_logistic(x[0]) + log_logistic(-x[0]) + x[1];
        for &u in x.iter().skip(2) {
            lp += h.a * log_logistic(u) + h.b * log_logistic(-u) - log_beta_fn;
        }
        lp
    }
}

impl TargetModel for HierarchicalBinomial {
    fn dim(&self) -> usize {
        self.data.len() + 2
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.dim());
        let h = Self::hyper(x);
        if !h.kappa.is_finite() {
            return f64::NEG_INFINITY;
        }
        let log_beta_fn = ln_gamma(h.a) + ln_gamma(h.b) - ln_gamma(h.kappa);
        let mut lp =
            Self::log_kappa_prior(h.kappa) + log_logistic(x[0]) + log_logistic(-x[0]) + x[1];
        for (j, &u) in x.iter().skip(2).enumerate() {
            let (y, k) = (self.data.hits[j] as f64, self.data.at_bats[j] as f64);
            lp += (h.a + y) * log_logistic(u) + (h.b + k - y) * log_logistic(-u) - log_beta_fn;
        }
        lp + self.log_binom_coef
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim());
        let h = Self::hyper(x);
        let n_players = self.data.len() as f64;
        let mut grad = DVector::zeros(self.dim());
        let (mut sum_log_theta, mut sum_log_comp) = (0.0, 0.0);
        for (j, &u) in x.iter().skip(2).enumerate() {
            let (y, k) = (self.data.hits[j] as f64, self.data.at_bats[j] as f64);
            sum_log_theta += log_logistic(u);
            sum_log_comp += log_logistic(-u);
            grad[j + 2] = (h.a + y) * logistic(-u) - (h.b + k - y) * logistic(u);
        }
        let (psi_a, psi_b, psi_k) = (digamma(h.a), digamma(h.b), digamma(h.kappa));
        let d_phi = h.kappa * ((sum_log_theta - sum_log_comp) - n_players * (psi_a - psi_b));
        let d_kappa = h.phi * sum_log_theta + h.one_minus_phi * sum_log_comp
            - n_players * (h.phi * psi_a + h.one_minus_phi * psi_b - psi_k)
            - (PARETO_SHAPE + 1.0) / h.kappa;
        grad[0] = h.phi * h.one_minus_phi * d_phi + (h.one_minus_phi - h.phi);
        grad[1] = (h.kappa - 1.0) * d_kappa + 1.0;
        grad
    }
}
