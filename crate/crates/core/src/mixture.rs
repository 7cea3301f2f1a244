//! Mixtures of low-rank plus diagonal Gaussians and their JSON schema.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::GaussianComponent;
use crate::numeric::{log_sum_exp, LN_2PI};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// `q(x) = Σ_c ρ_c q_c(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureApprox {
    weights: Vec<f64>,
    components: Vec<GaussianComponent>,
}

impl MixtureApprox {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidWeights(
                "mixture needs at least one component".into(),
            ));
        }
        if weights.len() != components.len() {
            return Err(Error::InvalidWeights(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        let dim = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: c.dim(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights(format!(
                "negative or non-finite weight in {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWeights(format!("weights sum to {total}")));
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn single(component: GaussianComponent) -> Self {
        Self {
            weights: vec![1.0],
            components: vec![component],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    /// `ln ρ_c + ln q_c(x)` for every component.
    pub fn weighted_component_log_pdfs(&self, x: &DVector<f64>) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_pdf(x))
            .collect()
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        if self.components.len() == 1 {
            return self.components[0].log_pdf(x);
        }
        log_sum_exp(&self.weighted_component_log_pdfs(x))
    }

    /// `ln q(x)` and `∇_x ln q(x) = Σ_c r_c(x) ∇_x ln q_c(x)`, with the
    /// responsibilities `r_c` computed from max-shifted log densities.
    pub fn log_pdf_and_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        if self.components.len() == 1 {
            let (lp, score) = self.components[0].log_pdf_and_score(x);
            return (lp, -score);
        }
        let mut terms = Vec::with_capacity(self.components.len());
        let mut scores = Vec::with_capacity(self.components.len());
        for (w, c) in self.weights.iter().zip(&self.components) {
            let (lp, score) = c.log_pdf_and_score(x);
            terms.push(w.ln() + lp);
            scores.push(score);
        }
        let total = log_sum_exp(&terms);
        let mut grad = DVector::zeros(self.dim());
        for (t, s) in terms.iter().zip(&scores) {
            let r = (t - total).exp();
            if r > 0.0 {
                grad.axpy(-r, s, 1.0);
            }
        }
        (total, grad)
    }

    pub fn grad_x_log_pdf(&self, x: &DVector<f64>) -> DVector<f64> {
        self.log_pdf_and_grad(x).1
    }

    /// Draws a component index from the categorical distribution on the weights.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return c;
            }
        }
        // rounding left `acc` just under 1; take the last component with mass
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    /// Draws `count` points, each from a freshly chosen component.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
        self.sample_labeled(count, rng)
            .into_iter()
            .map(|(_, x)| x)
            .collect()
    }

    pub fn sample_labeled<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Vec<(usize, DVector<f64>)> {
        (0..count)
            .map(|_| {
                let c = self.sample_index(rng);
                (c, self.components[c].sample(rng))
            })
            .collect()
    }

    /// `Σ_c ρ_c μ_c`.
    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            mean.axpy(*w, c.mean(), 1.0);
        }
        mean
    }

    /// Law of total covariance, `Σ_c ρ_c (Σ_c + (μ_c - μ̄)(μ_c - μ̄)ᵀ)`.
    pub fn cov(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let dim = self.dim();
        let mut cov = DMatrix::zeros(dim, dim);
        for (w, c) in self.weights.iter().zip(&self.components) {
            let dev = c.mean() - &mean;
            cov += (c.cov().dense() + &dev * dev.transpose()) * *w;
        }
        cov
    }

    /// Diagonal of [`cov`](Self::cov) without materializing `D × D` matrices.
    pub fn marginal_variances(&self) -> DVector<f64> {
        let mean = self.mean();
        let mut var = DVector::zeros(self.dim());
        for (w, c) in self.weights.iter().zip(&self.components) {
            let dev = c.mean() - &mean;
            var += (c.cov().marginal_variances() + dev.component_mul(&dev)) * *w;
        }
        var
    }

    /// Restricts every component to the coordinates in `dims`.
    pub fn marginal(&self, dims: &[usize]) -> Result<MarginalMixture> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument(
                "marginal needs at least one dimension".into(),
            ));
        }
        if let Some(&index) = dims.iter().find(|&&d| d >= self.dim()) {
            return Err(Error::IndexOutOfRange {
                index,
                dim: self.dim(),
            });
        }
        let k = dims.len();
        let mut means = Vec::with_capacity(self.components.len());
        let mut covs = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let full = c.cov().dense();
            means.push(DVector::from_fn(k, |i, _| c.mean()[dims[i]]));
            covs.push(DMatrix::from_fn(k, k, |i, j| full[(dims[i], dims[j])]));
        }
        Ok(MarginalMixture {
            dims: dims.to_vec(),
            weights: self.weights.clone(),
            means,
            covs,
        })
    }

    /// `(1 - ρ) q(x) + ρ q_new(x)`; existing components are moved over untouched.
    pub fn extend(&self, new_comp: GaussianComponent, rho_new: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho_new) {
            return Err(Error::InvalidMixingWeight(rho_new));
        }
        if new_comp.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: new_comp.dim(),
            });
        }
        let mut weights: Vec<f64> = self.weights.iter().map(|w| (1.0 - rho_new) * w).collect();
        weights.push(rho_new);
        let mut components = self.components.clone();
        components.push(new_comp);
        Self::new(weights, components)
    }

    /// The mixture made of the first `count` components, weights renormalized.
    /// Because boosting only rescales earlier weights, this recovers the
    /// approximation as it stood after `count` stages.
    pub fn truncated(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.n_components() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate {} components to {count}",
                self.n_components()
            )));
        }
        let total: f64 = self.weights[..count].iter().sum();
        let weights = self.weights[..count].iter().map(|w| w / total).collect();
        Self::new(weights, self.components[..count].to_vec())
    }

    pub fn to_document(&self) -> MixtureDocument {
        MixtureDocument {
            dim: self.dim(),
            components: self
                .weights
                .iter()
                .zip(&self.components)
                .map(|(w, c)| {
                    let flat = c.to_flat();
                    let (dim, rank) = (c.dim(), c.rank());
                    ComponentDocument {
                        weight: *w,
                        mean: flat.as_slice()[..dim].to_vec(),
                        factors: flat.as_slice()[dim..dim + dim * rank].to_vec(),
                        log_diag: flat.as_slice()[dim + dim * rank..].to_vec(),
                    }
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &MixtureDocument) -> Result<Self> {
        let dim = doc.dim;
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "mixture dimension must be positive".into(),
            ));
        }
        let mut weights = Vec::with_capacity(doc.components.len());
        let mut components = Vec::with_capacity(doc.components.len());
        for c in &doc.components {
            if c.mean.len() != dim || c.log_diag.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.mean.len().max(c.log_diag.len()),
                });
            }
            if c.factors.len() % dim != 0 {
                return Err(Error::InvalidArgument(format!(
                    "factor array of length {} is not a multiple of dim {dim}",
                    c.factors.len()
                )));
            }
            let rank = c.factors.len() / dim;
            components.push(GaussianComponent::from_parts(
                DVector::from_column_slice(&c.mean),
                DMatrix::from_row_slice(dim, rank, &c.factors),
                DVector::from_column_slice(&c.log_diag),
            )?);
            weights.push(c.weight);
        }
        Self::new(weights, components)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk form of a mixture. `factors` is the `dim × rank` factor matrix in
/// row-major order; an empty array means rank 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureDocument {
    pub dim: usize,
    pub components: Vec<ComponentDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentDocument {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub factors: Vec<f64>,
    pub log_diag: Vec<f64>,
}

/// A mixture restricted to a subset of coordinates, with dense covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalMixture {
    pub dims: Vec<usize>,
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl MarginalMixture {
    pub fn mean(&self) -> DVector<f64> {
        let mut mean = DVector::zeros(self.dims.len());
        for (w, m) in self.weights.iter().zip(&self.means) {
            mean.axpy(*w, m, 1.0);
        }
        mean
    }

    pub fn cov(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let k = self.dims.len();
        let mut cov = DMatrix::zeros(k, k);
        for ((w, m), s) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let dev = m - &mean;
            cov += (s + &dev * dev.transpose()) * *w;
        }
        cov
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        let k = self.dims.len() as f64;
        let mut terms = Vec::with_capacity(self.weights.len());
        for ((w, m), s) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let chol = Cholesky::new(s.clone()).ok_or(Error::NotPositiveDefinite)?;
            let delta = x - m;
            let sol = chol.solve(&delta);
            let log_det = 2.0
                * chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|v| v.ln())
                    .sum::<f64>();
            terms.push(w.ln() - 0.5 * (log_det + k * LN_2PI + delta.dot(&sol)));
        }
        Ok(log_sum_exp(&terms))
    }
}
