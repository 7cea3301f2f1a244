//! Unnormalized target densities on `R^D`.
//!
//! Every built-in model lives on an unconstrained space: constrained
//! parameters are mapped through logistic or exponential transforms and the
//! log-Jacobian of that map is part of the density.

mod binomial;
mod gaussian;
mod poisson;

use nalgebra::{DMatrix, DVector};

use crate::mixture::MixtureApprox;

pub use binomial::{load_binomial_csv, BinomialData, HierarchicalBinomial};
pub use gaussian::{GaussianTarget, GmmTarget};
pub use poisson::{gen_poisson_data, MultilevelPoisson, PoissonGlmData, PoissonTruth};

/// A density `π̃(x)` known up to a constant, with its gradient.
pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `ln π̃(x)`.
    fn log_density(&self, x: &DVector<f64>) -> f64;

    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64>;

    fn log_density_and_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        (self.log_density(x), self.grad_log_density(x))
    }

    /// Exact mean and covariance, when known in closed form.
    fn reference_moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        None
    }

    /// `ln ∫ π̃`, when known in closed form.
    fn log_normalizer(&self) -> Option<f64> {
        None
    }
}

impl TargetModel for MixtureApprox {
    fn dim(&self) -> usize {
        MixtureApprox::dim(self)
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        self.log_pdf(x)
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        self.grad_x_log_pdf(x)
    }

    fn log_density_and_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        self.log_pdf_and_grad(x)
    }

    fn reference_moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        Some((self.mean(), self.cov()))
    }

    fn log_normalizer(&self) -> Option<f64> {
        Some(0.0)
    }
}

impl<T: TargetModel + ?Sized> TargetModel for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        (**self).log_density(x)
    }
    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).grad_log_density(x)
    }
    fn log_density_and_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        (**self).log_density_and_grad(x)
    }
    fn reference_moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        (**self).reference_moments()
    }
    fn log_normalizer(&self) -> Option<f64> {
        (**self).log_normalizer()
    }
}

impl<T: TargetModel + ?Sized> TargetModel for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        (**self).log_density(x)
    }
    fn grad_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).grad_log_density(x)
    }
    fn log_density_and_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        (**self).log_density_and_grad(x)
    }
    fn reference_moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        (**self).reference_moments()
    }
    fn log_normalizer(&self) -> Option<f64> {
        (**self).log_normalizer()
    }
}

/// Central-difference gradient, used by the conformance tests.
#[doc(hidden)]
pub fn finite_difference_gradient<T: TargetModel + ?Sized>(
    target: &T,
    x: &DVector<f64>,
    step: f64,
) -> DVector<f64> {
    DVector::from_fn(x.len(), |d, _| {
        let mut xp = x.clone();
        xp[d] += step;
        let mut xm = x.clone();
        xm[d] -= step;
        (target.log_density(&xp) - target.log_density(&xm)) / (2.0 * step)
    })
}
