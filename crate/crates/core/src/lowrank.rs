//! Gaussian components with low-rank plus diagonal covariance
//! `Σ = F Fᵀ + diag(exp(v))`.
//!
//! Determinants and solves go through the `r × r` capacitance matrix
//! `M = I_r + Fᵀ diag(exp(-v)) F`, so nothing here costs more than
//! `O(D r² + r³)`. The `D × D` matrix is only materialized by [`LowRankDiagCov::dense`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numeric::LN_2PI;

/// Covariance `F Fᵀ + diag(exp(log_diag))` with `F` of shape `D × r`.
///
/// Construction factorizes the capacitance matrix once; every later query
/// reuses the cached factors, so a value is cheap to share but should be
/// rebuilt rather than mutated when parameters change.
#[derive(Debug, Clone)]
pub struct LowRankDiagCov {
    factors: DMatrix<f64>,
    log_diag: DVector<f64>,
    inv_diag: DVector<f64>,
    /// `Σ⁻¹ F = A F M⁻¹` with `A = diag(exp(-v))`.
    precision_factors: DMatrix<f64>,
    /// Diagonal of `Σ⁻¹`.
    precision_diag: DVector<f64>,
    capacitance: Option<Cholesky<f64, Dyn>>,
    log_det: f64,
}

impl PartialEq for LowRankDiagCov {
    fn eq(&self, other: &Self) -> bool {
        self.factors == other.factors && self.log_diag == other.log_diag
    }
}

impl LowRankDiagCov {
    pub fn new(factors: DMatrix<f64>, log_diag: DVector<f64>) -> Result<Self> {
        let dim = log_diag.len();
        if factors.nrows() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: factors.nrows(),
            });
        }
        if factors.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFiniteParameter("factors"));
        }
        if log_diag.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteParameter("log_diag"));
        }
        let rank = factors.ncols();
        let inv_diag = log_diag.map(|v| (-v).exp());
        if inv_diag.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::Factorization { rank });
        }

        let mut scaled = factors.clone();
        for (d, mut row) in scaled.row_iter_mut().enumerate() {
            row *= inv_diag[d];
        }

        let mut log_det: f64 = log_diag.iter().sum();
        let (capacitance, precision_factors) = if rank == 0 {
            (None, DMatrix::zeros(dim, 0))
        } else {
            let mut inner = factors.transpose() * &scaled;
            for k in 0..rank {
                inner[(k, k)] += 1.0;
            }
            let chol = Cholesky::new(inner).ok_or(Error::Factorization { rank })?;
            let l = chol.l_dirty();
            log_det += 2.0 * (0..rank).map(|k| l[(k, k)].ln()).sum::<f64>();
            let precision_factors = chol.solve(&scaled.transpose()).transpose();
            (Some(chol), precision_factors)
        };
        if !log_det.is_finite() {
            return Err(Error::Factorization { rank });
        }

        let precision_diag = DVector::from_fn(dim, |d, _| {
            let correction: f64 = (0..rank)
                .map(|k| precision_factors[(d, k)] * scaled[(d, k)])
                .sum();
            inv_diag[d] - correction
        });

        Ok(Self {
            factors,
            log_diag,
            inv_diag,
            precision_factors,
            precision_diag,
            capacitance,
            log_det,
        })
    }

    /// Diagonal covariance `diag(exp(log_diag))` (rank 0).
    pub fn diagonal(log_diag: DVector<f64>) -> Result<Self> {
        let dim = log_diag.len();
        Self::new(DMatrix::zeros(dim, 0), log_diag)
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(DVector::zeros(dim)).expect("identity covariance is valid")
    }

    pub fn dim(&self) -> usize {
        self.log_diag.len()
    }

    pub fn rank(&self) -> usize {
        self.factors.ncols()
    }

    pub fn factors(&self) -> &DMatrix<f64> {
        &self.factors
    }

    pub fn log_diag(&self) -> &DVector<f64> {
        &self.log_diag
    }

    /// `ln |Σ|` via the matrix determinant lemma.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `Σ⁻¹ y` via the Woodbury identity.
    pub fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.dim(), "solve: dimension mismatch");
        let ay = self.inv_diag.component_mul(y);
        if self.rank() == 0 {
            return ay;
        }
        let proj = self.factors.tr_mul(&ay);
        ay - &self.precision_factors * proj
    }

    /// `Σ⁻¹ F`, shape `D × r`.
    pub fn precision_factors(&self) -> &DMatrix<f64> {
        &self.precision_factors
    }

    /// Diagonal entries of `Σ⁻¹`.
    pub fn precision_diag(&self) -> &DVector<f64> {
        &self.precision_diag
    }

    /// Diagonal of `Σ`, i.e. the marginal variances.
    pub fn marginal_variances(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |d, _| {
            self.log_diag[d].exp() + self.factors.row(d).iter().map(|f| f * f).sum::<f64>()
        })
    }

    /// Materializes `F Fᵀ + diag(exp(v))`.
    ///
    /// Intended for tests and moment summaries on small `D`; the fitting code
    /// never calls it. The result is exactly symmetric.
    pub fn dense(&self) -> DMatrix<f64> {
        let dim = self.dim();
        let mut out = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..=i {
                let s: f64 = self
                    .factors
                    .row(i)
                    .iter()
                    .zip(self.factors.row(j).iter())
                    .map(|(a, b)| a * b)
                    .sum();
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
            out[(i, i)] += self.log_diag[i].exp();
        }
        out
    }

    /// Cholesky factor of the capacitance matrix, if the rank is positive.
    pub fn capacitance(&self) -> Option<&Cholesky<f64, Dyn>> {
        self.capacitance.as_ref()
    }
}

/// Standard-normal base noise for one draw from a component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentNoise {
    pub z_lo: DVector<f64>,
    pub z_hi: DVector<f64>,
}

impl ComponentNoise {
    /// Draws `z_lo` (length `rank`) then `z_hi` (length `dim`).
    pub fn draw<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> Self {
        let z_lo = DVector::from_fn(rank, |_, _| rng.sample(StandardNormal));
        let z_hi = DVector::from_fn(dim, |_, _| rng.sample(StandardNormal));
        Self { z_lo, z_hi }
    }
}

/// Gradient with respect to the parameters `(μ, F, v)` of one component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentGradient {
    pub d_mean: DVector<f64>,
    pub d_factors: DMatrix<f64>,
    pub d_log_diag: DVector<f64>,
}

impl ComponentGradient {
    pub fn zeros(dim: usize, rank: usize) -> Self {
        Self {
            d_mean: DVector::zeros(dim),
            d_factors: DMatrix::zeros(dim, rank),
            d_log_diag: DVector::zeros(dim),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ComponentGradient, scale: f64) {
        self.d_mean.axpy(scale, &other.d_mean, 1.0);
        self.d_factors
            .zip_apply(&other.d_factors, |a, b| *a += scale * b);
        self.d_log_diag.axpy(scale, &other.d_log_diag, 1.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.d_mean *= s;
        self.d_factors *= s;
        self.d_log_diag *= s;
    }

    /// Flattens in the same layout as [`GaussianComponent::to_flat`].
    pub fn to_flat(&self) -> DVector<f64> {
        flatten(&self.d_mean, &self.d_factors, &self.d_log_diag)
    }
}

/// Multivariate normal `N(μ, F Fᵀ + diag(exp(v)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    cov: LowRankDiagCov,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, cov: LowRankDiagCov) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                expected: cov.dim(),
                got: mean.len(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFiniteParameter("mean"));
        }
        Ok(Self { mean, cov })
    }

    pub fn from_parts(
        mean: DVector<f64>,
        factors: DMatrix<f64>,
        log_diag: DVector<f64>,
    ) -> Result<Self> {
        Self::new(mean, LowRankDiagCov::new(factors, log_diag)?)
    }

    pub fn diagonal(mean: DVector<f64>, log_diag: DVector<f64>) -> Result<Self> {
        Self::new(mean, LowRankDiagCov::diagonal(log_diag)?)
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: LowRankDiagCov::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.cov.rank()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &LowRankDiagCov {
        &self.cov
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        self.log_pdf_and_score(x).0
    }

    /// `∇_x ln q(x) = -Σ⁻¹ (x - μ)`.
    pub fn grad_x_log_pdf(&self, x: &DVector<f64>) -> DVector<f64> {
        -self.log_pdf_and_score(x).1
    }

    /// Returns `ln q(x)` together with the score `s = Σ⁻¹ (x - μ)`.
    /// The gradient in `x` is `-s`; the gradient in `μ` is `+s`.
    pub fn log_pdf_and_score(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        assert_eq!(x.len(), self.dim(), "log_pdf: dimension mismatch");
        let delta = x - &self.mean;
        let score = self.cov.solve(&delta);
        let quad = delta.dot(&score);
        let lp = -0.5 * self.cov.log_det() - 0.5 * self.dim() as f64 * LN_2PI - 0.5 * quad;
        (lp, score)
    }

    /// Reparameterized draw `x = F z_lo + μ + exp(v/2) ⊙ z_hi`.
    pub fn sample_map(&self, z_lo: &DVector<f64>, z_hi: &DVector<f64>) -> DVector<f64> {
        assert_eq!(z_lo.len(), self.rank(), "sample_map: z_lo length");
        assert_eq!(z_hi.len(), self.dim(), "sample_map: z_hi length");
        let mut x = &self.cov.factors * z_lo;
        for d in 0..self.dim() {
            x[d] += self.mean[d] + (0.5 * self.cov.log_diag[d]).exp() * z_hi[d];
        }
        x
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> ComponentNoise {
        ComponentNoise::draw(self.dim(), self.rank(), rng)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let noise = self.sample_noise(rng);
        self.sample_map(&noise.z_lo, &noise.z_hi)
    }

    /// Chain rule through [`sample_map`](Self::sample_map): given
    /// `upstream = ∂h/∂x` at the mapped point, returns `∂h/∂(μ, F, v)`.
    pub fn pathwise_param_grad(
        &self,
        z_lo: &DVector<f64>,
        z_hi: &DVector<f64>,
        upstream: &DVector<f64>,
    ) -> ComponentGradient {
        let d_factors = upstream * z_lo.transpose();
        let d_log_diag = DVector::from_fn(self.dim(), |d, _| {
            0.5 * upstream[d] * (0.5 * self.cov.log_diag[d]).exp() * z_hi[d]
        });
        ComponentGradient {
            d_mean: upstream.clone(),
            d_factors,
            d_log_diag,
        }
    }

    /// Gradient of `ln q(x; μ, F, v)` in the parameters with `x` held fixed.
    pub fn direct_param_grad_log_pdf(&self, x: &DVector<f64>) -> ComponentGradient {
        let (_, score) = self.log_pdf_and_score(x);
        self.direct_param_grad_from_score(&score)
    }

    /// Same as [`direct_param_grad_log_pdf`](Self::direct_param_grad_log_pdf)
    /// given a precomputed score `s = Σ⁻¹ (x - μ)`.
    ///
    /// With `G = ½ (s sᵀ - Σ⁻¹)`: `∂/∂μ = s`, `∂/∂F = 2 G F`, `∂/∂v_d = G_dd exp(v_d)`.
    pub fn direct_param_grad_from_score(&self, score: &DVector<f64>) -> ComponentGradient {
        let cov = &self.cov;
        let d_factors = if self.rank() == 0 {
            DMatrix::zeros(self.dim(), 0)
        } else {
            let st_f = cov.factors.tr_mul(score);
            score * st_f.transpose() - &cov.precision_factors
        };
        let d_log_diag = DVector::from_fn(self.dim(), |d, _| {
            0.5 * cov.log_diag[d].exp() * (score[d] * score[d] - cov.precision_diag[d])
        });
        ComponentGradient {
            d_mean: score.clone(),
            d_factors,
            d_log_diag,
        }
    }

    /// Number of free parameters for a component of the given shape.
    pub fn n_params(dim: usize, rank: usize) -> usize {
        dim * (rank + 2)
    }

    /// Flat parameter layout: `[μ, F (row-major), v]`.
    pub fn to_flat(&self) -> DVector<f64> {
        flatten(&self.mean, &self.cov.factors, &self.cov.log_diag)
    }

    pub fn from_flat(flat: &[f64], dim: usize, rank: usize) -> Result<Self> {
        if flat.len() != Self::n_params(dim, rank) {
            return Err(Error::DimensionMismatch {
                expected: Self::n_params(dim, rank),
                got: flat.len(),
            });
        }
        let mean = DVector::from_column_slice(&flat[..dim]);
        let factors = DMatrix::from_row_slice(dim, rank, &flat[dim..dim + dim * rank]);
        let log_diag = DVector::from_column_slice(&flat[dim + dim * rank..]);
        Self::from_parts(mean, factors, log_diag)
    }
}

fn flatten(mean: &DVector<f64>, factors: &DMatrix<f64>, log_diag: &DVector<f64>) -> DVector<f64> {
    let dim = mean.len();
    let rank = factors.ncols();
    let mut out = Vec::with_capacity(dim * (rank + 2));
    out.extend(mean.iter());
    for d in 0..dim {
        out.extend(factors.row(d).iter());
    }
    out.extend(log_diag.iter());
    DVector::from_vec(out)
}
