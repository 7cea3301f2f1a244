use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mixture::MixtureApprox;
use crate::targets::TargetModel;

const BOUNDARY_TOL: f64 = 1e-8;

/// Tensor-product trapezoid grid in one or two dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    points: Vec<usize>,
}

impl QuadratureGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        let dim = lower.len();
        if !(1..=2).contains(&dim) || upper.len() != dim || points.len() != dim {
            return Err(Error::InvalidArgument(
                "quadrature grids are 1D or 2D".into(),
            ));
        }
        for d in 0..dim {
            if !(lower[d].is_finite() && upper[d].is_finite() && lower[d] < upper[d]) {
                return Err(Error::InvalidArgument(format!(
                    "bad bounds [{}, {}]",
                    lower[d], upper[d]
                )));
            }
            if points[d] < 11 || points[d].is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!(
                    "{} grid points; need an odd count >= 11",
                    points[d]
                )));
            }
        }
        Ok(Self {
            lower,
            upper,
            points,
        })
    }

    pub fn line(lower: f64, upper: f64, points: usize) -> Result<Self> {
        Self::new(vec![lower], vec![upper], vec![points])
    }

    pub fn square(lower: f64, upper: f64, points: usize) -> Result<Self> {
        Self::new(vec![lower; 2], vec![upper; 2], vec![points; 2])
    }

    /// Same bounds with the spacing halved.
    pub fn refined(&self) -> Self {
        Self {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            points: self.points.iter().map(|n| 2 * n - 1).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn axis(&self, d: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.points[d];
        let h = (self.upper[d] - self.lower[d]) / (n - 1) as f64;
        let nodes = (0..n).map(|i| self.lower[d] + h * i as f64).collect();
        let weights = (0..n)
            .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
            .collect();
        (nodes, weights)
    }

    /// Every node with its weight and whether it lies on the grid boundary.
    fn nodes(&self) -> Vec<(DVector<f64>, f64, bool)> {
        let (x0, w0) = self.axis(0);
        let last0 = x0.len() - 1;
        if self.dim() == 1 {
            return (0..x0.len())
                .map(|i| (DVector::from_element(1, x0[i]), w0[i], i == 0 || i == last0))
                .collect();
        }
        let (x1, w1) = self.axis(1);
        let last1 = x1.len() - 1;
        let mut out = Vec::with_capacity(x0.len() * x1.len());
        for i in 0..x0.len() {
            for j in 0..x1.len() {
                let edge = i == 0 || i == last0 || j == 0 || j == last1;
                out.push((DVector::from_vec(vec![x0[i], x1[j]]), w0[i] * w1[j], edge));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureMoments {
    pub log_normalizer: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn evaluate<F: Fn(&DVector<f64>) -> f64 + Sync>(
    nodes: &[(DVector<f64>, f64, bool)],
    f: F,
) -> Vec<f64> {
    nodes.par_iter().map(|(x, _, _)| f(x)).collect()
}

/// Relative density mass `exp(lp - max)` times weight, with the boundary check.
fn relative_mass(
    nodes: &[(DVector<f64>, f64, bool)],
    log_values: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let m = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::InvalidArgument(
            "density is zero or non-finite on the whole grid".into(),
        ));
    }
    let mass: Vec<f64> = nodes
        .iter()
        .zip(log_values)
        .map(|((_, w, _), lp)| w * (lp - m).exp())
        .collect();
    let total: f64 = mass.iter().sum();
    let edge: f64 = nodes
        .iter()
        .zip(&mass)
        .filter(|((_, _, e), _)| *e)
        .map(|(_, m)| m)
        .sum();
    let fraction = edge / total;
    if fraction > BOUNDARY_TOL {
        return Err(Error::GridTooSmall { fraction });
    }
    Ok((m, mass))
}

/// `ln ∫ π̃`, mean and covariance of a 1D or 2D target by the trapezoid rule.
pub fn quadrature_moments<T: TargetModel + ?Sized>(
    target: &T,
    grid: &QuadratureGrid,
) -> Result<QuadratureMoments> {
    if target.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: target.dim(),
        });
    }
    let nodes = grid.nodes();
    let log_values = evaluate(&nodes, |x| target.log_density(x));
    let (m, mass) = relative_mass(&nodes, &log_values)?;
    let total: f64 = mass.iter().sum();
    let dim = grid.dim();
    let mut mean = DVector::zeros(dim);
    for ((x, _, _), p) in nodes.iter().zip(&mass) {
        mean.axpy(*p / total, x, 1.0);
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for ((x, _, _), p) in nodes.iter().zip(&mass) {
        let dev = x - &mean;
        cov += &dev * dev.transpose() * (*p / total);
    }
    Ok(QuadratureMoments {
        log_normalizer: m + total.ln(),
        mean,
        cov,
    })
}

/// `KL(q ‖ π)` in nats, with `π` normalized on the grid.
pub fn kl_q_to_target<T: TargetModel + ?Sized>(
    mix: &MixtureApprox,
    target: &T,
    grid: &QuadratureGrid,
) -> Result<f64> {
    if mix.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: mix.dim(),
        });
    }
    let log_z = quadrature_moments(target, grid)?.log_normalizer;
    let nodes = grid.nodes();
    let log_q = evaluate(&nodes, |x| mix.log_pdf(x));
    relative_mass(&nodes, &log_q)?;
    let log_p = evaluate(&nodes, |x| target.log_density(x));
    let mut kl = 0.0;
    for (((_, w, _), lq), lp) in nodes.iter().zip(&log_q).zip(&log_p) {
        let q = lq.exp();
        if q > 0.0 {
            kl += w * q * (lq - (lp - log_z));
        }
    }
    Ok(kl)
}
