use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use vboost::targets::{
    gen_poisson_data, load_binomial_csv, GaussianTarget, GmmTarget, HierarchicalBinomial, MultilevelPoisson,
    PoissonTruth, TargetModel,
};
use vboost::VBoostConfig;

use crate::CliError;

/// A run description as read from JSON. Relative paths are resolved against
/// the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target: TargetSpec,
    #[serde(default)]
    pub vboost: VBoostConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Gaussian {
        mean: Vec<f64>,
        /// Row-major, one inner array per row.
        cov: Vec<Vec<f64>>,
    },
    Gmm {
        components: Vec<GmmPart>,
    },
    /// Hierarchical binomial model over a `name,hits,at_bats` CSV.
    Baseball {
        data: PathBuf,
    },
    /// Multilevel Poisson model over synthetic counts.
    Frisk {
        #[serde(default)]
        data_seed: u64,
        #[serde(default = "default_ethnicities")]
        n_ethnicities: usize,
        #[serde(default = "default_precincts")]
        n_precincts: usize,
        #[serde(default)]
        truth: PoissonTruth,
    },
}

fn default_ethnicities() -> usize {
    3
}

fn default_precincts() -> usize {
    31
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmPart {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    /// Quadrature for one or two dimensions, Metropolis otherwise.
    Auto,
    Mcmc,
    Quadrature,
}

/// Reference-moment settings for `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub method: OracleMethod,
    pub n_steps: usize,
    pub burn_in: usize,
    pub proposal_scale: f64,
    pub seed: u64,
    /// Quadrature grid half-width in mixture standard deviations.
    pub half_width: f64,
    /// Grid points per axis; defaults to 4001 in 1D and 401 in 2D.
    pub points: Option<usize>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            method: OracleMethod::Auto,
            n_steps: 200_000,
            burn_in: 20_000,
            proposal_scale: 0.1,
            seed: 1,
            half_width: 12.0,
            points: None,
        }
    }
}

impl OracleConfig {
    fn validate(&self) -> Result<(), CliError> {
        if self.n_steps <= self.burn_in {
            return Err(CliError::Config("oracle.n_steps must exceed oracle.burn_in".into()));
        }
        if !(self.proposal_scale > 0.0) || !(self.half_width > 0.0) {
            return Err(CliError::Config("oracle.proposal_scale and oracle.half_width must be positive".into()));
        }
        if let Some(p) = self.points {
            if p < 11 || p % 2 == 0 {
                return Err(CliError::Config("oracle.points must be odd and at least 11".into()));
            }
        }
        Ok(())
    }
}

impl RunConfig {
    /// Reads and parses a config, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = match path.parent() {
            Some(dir) if !dir.as_os_str().is_empty() => dir,
            _ => Path::new("."),
        };
        let base = std::path::absolute(base).map_err(|e| CliError::Config(e.to_string()))?;
        if let TargetSpec::Baseball { data } = &mut cfg.target {
            *data = base.join(&*data);
        }
        cfg.out = base.join(&cfg.out);
        Ok(cfg)
    }

    pub fn validate(&self, dim: usize) -> Result<(), CliError> {
        self.vboost
            .validate(dim)
            .map_err(|e| CliError::Config(format!("vboost: {e}")))?;
        self.oracle.validate()
    }
}

pub enum Target {
    Gaussian(GaussianTarget),
    Gmm(GmmTarget),
    Baseball(HierarchicalBinomial),
    Frisk(MultilevelPoisson),
}

impl Target {
    pub fn model(&self) -> &dyn TargetModel {
        match self {
            Target::Gaussian(t) => t,
            Target::Gmm(t) => t,
            Target::Baseball(t) => t,
            Target::Frisk(t) => t,
        }
    }
}

fn matrix(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(CliError::Config(format!("{what}: covariance must be {dim}x{dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

impl TargetSpec {
    /// Builds the target, reading any data files.
    pub fn build(&self) -> Result<Target, CliError> {
        let config = |e: vboost::Error| CliError::Config(format!("target: {e}"));
        match self {
            TargetSpec::Gaussian { mean, cov } => {
                if mean.is_empty() {
                    return Err(CliError::Config("target: empty mean".into()));
                }
                let cov = matrix(cov, mean.len(), "target")?;
                GaussianTarget::new(DVector::from_column_slice(mean), cov)
                    .map(Target::Gaussian)
                    .map_err(config)
            }
            TargetSpec::Gmm { components } => {
                let dim = components.first().map_or(0, |c| c.mean.len());
                if dim == 0 {
                    return Err(CliError::Config("target: gmm needs at least one component".into()));
                }
                let mut parts = Vec::with_capacity(components.len());
                for (i, c) in components.iter().enumerate() {
                    if c.mean.len() != dim {
                        return Err(CliError::Config(format!("target: gmm component {i} has the wrong dimension")));
                    }
                    let cov = matrix(&c.cov, dim, &format!("target: gmm component {i}"))?;
                    parts.push((c.weight, DVector::from_column_slice(&c.mean), cov));
                }
                GmmTarget::new(parts).map(Target::Gmm).map_err(config)
            }
            TargetSpec::Baseball { data } => load_binomial_csv(data)
                .map(|d| Target::Baseball(HierarchicalBinomial::new(d)))
                .map_err(|e| CliError::Config(format!("target data {}: {e}", data.display()))),
            TargetSpec::Frisk {
                data_seed,
                n_ethnicities,
                n_precincts,
                truth,
            } => {
                if *n_ethnicities == 0 || *n_precincts == 0 {
                    return Err(CliError::Config("target: frisk needs at least one ethnicity and precinct".into()));
                }
                gen_poisson_data(*data_seed, *n_ethnicities, *n_precincts, truth)
                    .map(|d| Target::Frisk(MultilevelPoisson::new(d)))
                    .map_err(config)
            }
        }
    }
}
