//! Monte Carlo ELBO estimates and reparameterization gradients.
//!
//! Every estimator has a `*_with_noise` form that takes the base noise
//! explicitly. With the noise frozen the estimate is a smooth deterministic
//! function of the parameters, which is what the finite-difference tests use.
//! Per-sample work runs on the rayon pool; results are collected in index
//! order and reduced sequentially, so estimates are bitwise reproducible.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lowrank::{ComponentGradient, ComponentNoise, GaussianComponent};
use crate::mixture::MixtureApprox;
use crate::numeric::{log_add_exp, logistic, mean_var};
use crate::targets::TargetModel;

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

/// Parameters optimized while adding a component: the new component and the
/// logit of its mixing weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostParams {
    pub new_comp: GaussianComponent,
    pub rho_logit: f64,
}

impl BoostParams {
    pub fn rho(&self) -> f64 {
        logistic(self.rho_logit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostGradient {
    pub component: ComponentGradient,
    pub d_rho_logit: f64,
}

impl BoostGradient {
    /// `[component layout..., d_rho_logit]`.
    pub fn to_flat(&self) -> DVector<f64> {
        let comp = self.component.to_flat();
        let n = comp.len();
        DVector::from_fn(n + 1, |i, _| if i < n { comp[i] } else { self.d_rho_logit })
    }
}

/// Base noise for a stratified draw: `noise[c]` holds the draws pushed
/// through component `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedDraws {
    pub noise: Vec<Vec<ComponentNoise>>,
}

impl StratifiedDraws {
    /// `counts[c]` draws for component `c`, component by component.
    pub fn draw<R: Rng + ?Sized>(mix: &MixtureApprox, counts: &[usize], rng: &mut R) -> Self {
        assert_eq!(counts.len(), mix.n_components());
        let noise = mix
            .components()
            .iter()
            .zip(counts)
            .map(|(c, &n)| (0..n).map(|_| c.sample_noise(rng)).collect())
            .collect();
        Self { noise }
    }

    pub fn equal<R: Rng + ?Sized>(
        mix: &MixtureApprox,
        n_per_component: usize,
        rng: &mut R,
    ) -> Self {
        Self::draw(mix, &vec![n_per_component; mix.n_components()], rng)
    }

    pub fn total(&self) -> usize {
        self.noise.iter().map(Vec::len).sum()
    }
}

/// Splits `n_total` draws across components in proportion to their weights,
/// with at least two per component of positive weight.
pub fn allocate_draws(weights: &[f64], n_total: usize) -> Vec<usize> {
    weights
        .iter()
        .map(|&w| {
            if w > 0.0 {
                ((w * n_total as f64).round() as usize).max(2)
            } else {
                0
            }
        })
        .collect()
}

/// Base noise for one step of [`boost_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoostNoise {
    pub old: StratifiedDraws,
    pub new: Vec<ComponentNoise>,
}

impl BoostNoise {
    /// Draws the existing-mixture noise first, then the new-component noise.
    pub fn draw<R: Rng + ?Sized>(
        fixed: &MixtureApprox,
        new_rank: usize,
        n_new: usize,
        n_old: usize,
        rng: &mut R,
    ) -> Self {
        let old = StratifiedDraws::draw(fixed, &allocate_draws(fixed.weights(), n_old), rng);
        let new = (0..n_new)
            .map(|_| ComponentNoise::draw(fixed.dim(), new_rank, rng))
            .collect();
        Self { old, new }
    }
}

fn check_finite(value: f64, x: &DVector<f64>) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteTarget {
            point: x.iter().copied().collect(),
        })
    }
}

fn check_finite_grad(grad: &DVector<f64>, x: &DVector<f64>) -> Result<()> {
    if grad.iter().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteTarget {
            point: x.iter().copied().collect(),
        })
    }
}

/// `Σ_c ρ_c mean_c` with standard error `sqrt(Σ_c ρ_c² var_c / n_c)`.
fn stratified_combine(weights: &[f64], strata: &[Vec<f64>]) -> ElboEstimate {
    let mut value = 0.0;
    let mut var = 0.0;
    let mut n_samples = 0;
    for (w, s) in weights.iter().zip(strata) {
        if s.is_empty() {
            continue;
        }
        let (m, v) = mean_var(s);
        value += w * m;
        var += w * w * v / s.len() as f64;
        n_samples += s.len();
    }
    ElboEstimate {
        value,
        std_error: var.sqrt(),
        n_samples,
    }
}

/// Stratified estimate of `E_q[ln π̃ - ln q]` on the given noise.
pub fn elbo_from_draws<T: TargetModel + ?Sized>(
    target: &T,
    mix: &MixtureApprox,
    draws: &StratifiedDraws,
) -> Result<ElboEstimate> {
    let strata = mix
        .components()
        .iter()
        .zip(&draws.noise)
        .map(|(comp, noise)| {
            noise
                .par_iter()
                .map(|z| {
                    let x = comp.sample_map(&z.z_lo, &z.z_hi);
                    let lp = target.log_density(&x);
                    check_finite(lp, &x)?;
                    Ok(lp - mix.log_pdf(&x))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stratified_combine(mix.weights(), &strata))
}

/// Stratified ELBO estimate with `n_per_component` draws from every component.
pub fn elbo_estimate<T: TargetModel + ?Sized, R: Rng + ?Sized>(
    target: &T,
    mix: &MixtureApprox,
    n_per_component: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    if n_per_component < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 samples per component".into(),
        ));
    }
    elbo_from_draws(
        target,
        mix,
        &StratifiedDraws::equal(mix, n_per_component, rng),
    )
}

/// `L¹(λ) = E_q[ln π̃(x) - ln q(x; λ)]` and its reparameterization gradient.
pub fn first_component_grad<T: TargetModel + ?Sized, R: Rng + ?Sized>(
    target: &T,
    comp: &GaussianComponent,
    n: usize,
    rng: &mut R,
) -> Result<(ElboEstimate, ComponentGradient)> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let noise: Vec<ComponentNoise> = (0..n).map(|_| comp.sample_noise(rng)).collect();
    first_component_grad_with_noise(target, comp, &noise)
}

pub fn first_component_grad_with_noise<T: TargetModel + ?Sized>(
    target: &T,
    comp: &GaussianComponent,
    noise: &[ComponentNoise],
) -> Result<(ElboEstimate, ComponentGradient)> {
    let per_sample = noise
        .par_iter()
        .map(|z| {
            let x = comp.sample_map(&z.z_lo, &z.z_hi);
            let (lp, grad_lp) = target.log_density_and_grad(&x);
            check_finite(lp, &x)?;
            check_finite_grad(&grad_lp, &x)?;
            let (lq, score) = comp.log_pdf_and_score(&x);
            // ∇_x(ln π̃ - ln q) = ∇ ln π̃ + Σ⁻¹(x - μ)
            let upstream = grad_lp + &score;
            let mut g = comp.pathwise_param_grad(&z.z_lo, &z.z_hi, &upstream);
            g.add_scaled(&comp.direct_param_grad_from_score(&score), -1.0);
            Ok((lp - lq, g))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_sample.len();
    let mut grad = ComponentGradient::zeros(comp.dim(), comp.rank());
    let mut values = Vec::with_capacity(n);
    for (v, g) in &per_sample {
        values.push(*v);
        grad.add_scaled(g, 1.0);
    }
    grad.scale(1.0 / n as f64);
    let est = stratified_combine(&[1.0], &[values]);
    Ok((est, grad))
}

/// `L^(C+1)(ρ, λ) = (1-ρ) E_{q^C}[ln π̃ - ln q^(C+1)] + ρ E_{q_new}[ln π̃ - ln q^(C+1)]`
/// with `ρ = logistic(rho_logit)`, estimated from `n_old` stratified draws of
/// the frozen mixture and `n_new` reparameterized draws of the new component.
pub fn boost_grad<T: TargetModel + ?Sized, R: Rng + ?Sized>(
    target: &T,
    fixed: &MixtureApprox,
    params: &BoostParams,
    n_new: usize,
    n_old: usize,
    rng: &mut R,
) -> Result<(ElboEstimate, BoostGradient)> {
    if n_new < 2 || n_old < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 old and 2 new samples".into(),
        ));
    }
    let noise = BoostNoise::draw(fixed, params.new_comp.rank(), n_new, n_old, rng);
    boost_grad_with_noise(target, fixed, params, &noise)
}

pub fn boost_grad_with_noise<T: TargetModel + ?Sized>(
    target: &T,
    fixed: &MixtureApprox,
    params: &BoostParams,
    noise: &BoostNoise,
) -> Result<(ElboEstimate, BoostGradient)> {
    let rho = params.rho();
    let (est, component, d_rho) =
        boost_objective_at_rho(target, fixed, &params.new_comp, rho, noise)?;
    Ok((
        est,
        BoostGradient {
            component,
            d_rho_logit: d_rho * rho * (1.0 - rho),
        },
    ))
}

struct OldTerm {
    value: f64,
    d_rho: f64,
    grad: Option<ComponentGradient>,
}

/// The boosting objective evaluated at a mixing weight `rho ∈ [0, 1]`
/// directly, returning the gradient in the new component and `∂L/∂ρ`.
/// At `rho = 0` the value equals [`elbo_from_draws`] on `noise.old` bit for bit.
pub fn boost_objective_at_rho<T: TargetModel + ?Sized>(
    target: &T,
    fixed: &MixtureApprox,
    comp: &GaussianComponent,
    rho: f64,
    noise: &BoostNoise,
) -> Result<(ElboEstimate, ComponentGradient, f64)> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidMixingWeight(rho));
    }
    let (ln_rho, ln_keep) = (rho.ln(), (1.0 - rho).ln());
    let (dim, rank) = (comp.dim(), comp.rank());

    // Existing-mixture draws: x does not depend on λ, so only the direct
    // dependence of ln q^(C+1) on λ and ρ contributes.
    let old = fixed
        .components()
        .iter()
        .zip(&noise.old.noise)
        .map(|(fc, draws)| {
            draws
                .par_iter()
                .map(|z| {
                    let x = fc.sample_map(&z.z_lo, &z.z_hi);
                    let lp = target.log_density(&x);
                    check_finite(lp, &x)?;
                    let lq_old = fixed.log_pdf(&x);
                    let (lq_new, score) = comp.log_pdf_and_score(&x);
                    let ell = log_add_exp(ln_keep + lq_old, ln_rho + lq_new);
                    let r_new = (ln_rho + lq_new - ell).exp();
                    let grad = (r_new > 0.0).then(|| {
                        let mut g = comp.direct_param_grad_from_score(&score);
                        g.scale(-r_new);
                        g
                    });
                    Ok(OldTerm {
                        value: lp - ell,
                        d_rho: (lq_old - ell).exp() - (lq_new - ell).exp(),
                        grad,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let new = noise
        .new
        .par_iter()
        .map(|z| {
            let x = comp.sample_map(&z.z_lo, &z.z_hi);
            let (lp, grad_lp) = target.log_density_and_grad(&x);
            check_finite(lp, &x)?;
            check_finite_grad(&grad_lp, &x)?;
            let (lq_old, grad_old) = fixed.log_pdf_and_grad(&x);
            let (lq_new, score) = comp.log_pdf_and_score(&x);
            let ell = log_add_exp(ln_keep + lq_old, ln_rho + lq_new);
            let r_new = (ln_rho + lq_new - ell).exp();
            // ∇_x ln q^(C+1) = (1 - r) ∇ ln q^C - r Σ⁻¹(x - μ)
            let mut upstream = grad_lp;
            upstream.axpy(-(1.0 - r_new), &grad_old, 1.0);
            upstream.axpy(r_new, &score, 1.0);
            let mut g = comp.pathwise_param_grad(&z.z_lo, &z.z_hi, &upstream);
            if r_new > 0.0 {
                g.add_scaled(&comp.direct_param_grad_from_score(&score), -r_new);
            }
            let d_rho = (lq_old - ell).exp() - (lq_new - ell).exp();
            Ok((lp - ell, d_rho, g))
        })
        .collect::<Result<Vec<_>>>()?;

    let old_values: Vec<Vec<f64>> = old
        .iter()
        .map(|s| s.iter().map(|t| t.value).collect())
        .collect();
    let old_est = stratified_combine(fixed.weights(), &old_values);
    let new_values: Vec<f64> = new.iter().map(|t| t.0).collect();
    let new_est = stratified_combine(&[1.0], std::slice::from_ref(&new_values));

    // Stratified means over the old draws: Σ_c ρ_c mean_c[·].
    let mut grad_old = ComponentGradient::zeros(dim, rank);
    let mut d_rho_old = 0.0;
    for (w, stratum) in fixed.weights().iter().zip(&old) {
        if stratum.is_empty() {
            continue;
        }
        let scale = w / stratum.len() as f64;
        let mut stratum_d_rho = 0.0;
        for t in stratum {
            stratum_d_rho += t.d_rho;
            if let Some(g) = &t.grad {
                grad_old.add_scaled(g, scale);
            }
        }
        d_rho_old += scale * stratum_d_rho;
    }

    let n_new = new.len() as f64;
    let mut grad_new = ComponentGradient::zeros(dim, rank);
    let mut d_rho_new = 0.0;
    for (_, d, g) in &new {
        d_rho_new += d;
        grad_new.add_scaled(g, 1.0);
    }
    grad_new.scale(1.0 / n_new);
    d_rho_new /= n_new;

    let mut grad = ComponentGradient::zeros(dim, rank);
    grad.add_scaled(&grad_old, 1.0 - rho);
    grad.add_scaled(&grad_new, rho);
    // d/dρ of ln q^(C+1) is (q_new - q^C)/q^(C+1); the objective carries its negative.
    let d_rho = new_est.value - old_est.value + (1.0 - rho) * d_rho_old + rho * d_rho_new;

    let value = (1.0 - rho) * old_est.value + rho * new_est.value;
    let var = (1.0 - rho) * (1.0 - rho) * old_est.std_error * old_est.std_error
        + rho * rho * new_est.std_error * new_est.std_error;
    let est = ElboEstimate {
        value,
        std_error: var.sqrt(),
        n_samples: old_est.n_samples + new_est.n_samples,
    };
    Ok((est, grad, d_rho))
}
