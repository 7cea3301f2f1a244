use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::TargetModel;
use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, LN_2PI};

/// Normalized multivariate normal with dense covariance.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm_const: f64,
}

impl GaussianTarget {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: cov.nrows(),
            });
        }
        if (&cov - cov.transpose()).abs().max() > 1e-12 * (1.0 + cov.abs().max()) {
            return Err(Error::NotPositiveDefinite);
        }
        let chol = Cholesky::new(cov.clone()).ok_or(Error::NotPositiveDefinite)?;
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm_const: -0.5 * (log_det + dim as f64 * LN_2PI),
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// `Σ⁻¹`, formed explicitly; only for small analytic checks.
    pub fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    fn score(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let delta = x - &self.mean;
        let sol = self.chol.solve(&delta);
        (self.log_norm_const - 0.5 * delta.dot(&sol), sol)
    }
}

impl TargetModel for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        self.score(x).0
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        -self.score(x).1
    }

    fn log_density_and_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (lp, s) = self.score(x);
        (lp, -s)
    }

    fn reference_moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        Some((self.mean.clone(), self.cov.clone()))
    }

    fn log_normalizer(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Normalized mixture of dense-covariance Gaussians. Weights are rescaled to
/// sum to one.
#[derive(Debug, Clone)]
pub struct GmmTarget {
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    components: Vec<GaussianTarget>,
}

impl GmmTarget {
    pub fn new(parts: Vec<(f64, DVector<f64>, DMatrix<f64>)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidWeights("empty mixture target".into()));
        }
        let total: f64 = parts.iter().map(|p| p.0).sum();
        if parts.iter().any(|p| !(p.0 > 0.0) || !p.0.is_finite()) {
            return Err(Error::InvalidWeights(
                "target weights must be positive".into(),
            ));
        }
        let dim = parts[0].1.len();
        let mut weights = Vec::with_capacity(parts.len());
        let mut components = Vec::with_capacity(parts.len());
        for (w, mean, cov) in parts {
            if mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: mean.len(),
                });
            }
            weights.push(w / total);
            components.push(GaussianTarget::new(mean, cov)?);
        }
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            components,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianTarget] {
        &self.components
    }
}

impl TargetModel for GmmTarget {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .log_weights
            .iter()
            .zip(&self.components)
            .map(|(lw, c)| lw + c.log_density(x))
            .collect();
        log_sum_exp(&terms)
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        self.log_density_and_grad(x).1
    }

    fn log_density_and_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let evals: Vec<(f64, DVector<f64>)> = self
            .log_weights
            .iter()
            .zip(&self.components)
            .map(|(lw, c)| {
                let (lp, s) = c.score(x);
                (lw + lp, s)
            })
            .collect();
        let terms: Vec<f64> = evals.iter().map(|e| e.0).collect();
        let total = log_sum_exp(&terms);
        let mut grad = DVector::zeros(x.len());
        for (t, s) in &evals {
            grad.axpy(-(t - total).exp(), s, 1.0);
        }
        (total, grad)
    }

    fn reference_moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let dim = self.dim();
        let mut mean = DVector::zeros(dim);
        for (w, c) in self.weights.iter().zip(&self.components) {
            mean.axpy(*w, c.mean(), 1.0);
        }
        let mut cov = DMatrix::zeros(dim, dim);
        for (w, c) in self.weights.iter().zip(&self.components) {
            let dev = c.mean() - &mean;
            cov += (c.cov() + &dev * dev.transpose()) * *w;
        }
        Some((mean, cov))
    }

    fn log_normalizer(&self) -> Option<f64> {
        Some(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::finite_difference_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn four_mode() -> GmmTarget {
        let modes = [(-2.0, -2.0), (-2.0, 2.0), (2.0, -2.0), (2.0, 2.5)];
        GmmTarget::new(
            modes
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| {
                    let cov =
                        DMatrix::from_row_slice(2, 2, &[0.5, 0.1 * i as f64, 0.1 * i as f64, 0.4]);
                    (1.0 + i as f64, DVector::from_vec(vec![a, b]), cov)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_zero() {
        let t = GaussianTarget::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        assert!((t.log_density(&DVector::zeros(1)) + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_spd() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            GaussianTarget::new(DVector::zeros(2), cov),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn symmetric_two_mode_gradient_vanishes_at_midpoint() {
        let t = GmmTarget::new(vec![
            (
                0.5,
                DVector::from_element(1, -2.0),
                DMatrix::from_element(1, 1, 0.25),
            ),
            (
                0.5,
                DVector::from_element(1, 2.0),
                DMatrix::from_element(1, 1, 0.25),
            ),
        ])
        .unwrap();
        assert!(t.grad_log_density(&DVector::zeros(1))[0].abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let gmm = four_mode();
        let gauss = GaussianTarget::new(
            DVector::from_vec(vec![1.0, -0.5]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            for t in [&gmm as &dyn TargetModel, &gauss] {
                let g = t.grad_log_density(&x);
                let fd = finite_difference_gradient(t, &x, 1e-5);
                for d in 0..2 {
                    let rel = (g[d] - fd[d]).abs() / fd[d].abs().max(1.0);
                    assert!(rel < 1e-6, "rel err {rel}");
                }
            }
        }
    }
}
