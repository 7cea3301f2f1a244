//! Initialization of a new component from importance-weighted samples.
//!
//! Draws from the current mixture are weighted by `π̃ / q`, heavy weights are
//! broken up with small Gaussians centred on the offending points, the
//! resulting proposal is sampled and weighted again, and a weighted EM fit of
//! "current mixture plus one free diagonal Gaussian" yields the new component
//! and its mixing weight.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::elbo::{boost_objective_at_rho, BoostNoise};
use crate::error::{Error, Result};
use crate::lowrank::GaussianComponent;
use crate::mixture::MixtureApprox;
use crate::numeric::{log_add_exp, LN_2PI};
use crate::targets::TargetModel;

const VARIANCE_FLOOR: f64 = 1e-8;
pub const RHO_MIN: f64 = 0.05;
pub const RHO_MAX: f64 = 0.95;
/// Mixing weights tried per candidate, evenly spaced over `[RHO_MIN, RHO_MAX]`.
const RHO_GRID: usize = 19;

/// Points with self-normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub points: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl WeightedSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// First index of the largest weight.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iters: usize,
    pub loglik_tol: f64,
    /// Points with weight above `outlier_multiplier / L` count as outliers.
    pub outlier_multiplier: f64,
    /// Outlier proposals use this multiple of the mixture's marginal variances.
    pub outlier_var_scale: f64,
    /// With a background mixture, the free component's variances are kept
    /// above this fraction of the background's marginal variances, so one
    /// dominant weight cannot collapse the component onto a point.
    pub min_var_fraction: f64,
    /// Share of the first importance pass drawn from widened copies of the
    /// mixture's components. Draws from a fit locked onto one mode never reach a distant
    /// mode; the wide share does, and its hits come back as outliers.
    pub defensive_weight: f64,
    /// Variance multiplier of the widened copy.
    pub defensive_var_scale: f64,
    /// EM is run from this many well-separated heavy points; the candidate
    /// with the best boosting objective wins.
    pub restarts: usize,
    /// Draws per block used to score the candidates.
    pub score_samples: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            loglik_tol: 1e-6,
            outlier_multiplier: 10.0,
            outlier_var_scale: 1.0,
            min_var_fraction: 0.01,
            defensive_weight: 0.5,
            defensive_var_scale: 16.0,
            restarts: 8,
            score_samples: 200,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0
            || !(self.loglik_tol > 0.0)
            || !(self.outlier_multiplier > 1.0)
            || !(self.outlier_var_scale > 0.0)
            || !(self.min_var_fraction >= 0.0 && self.min_var_fraction.is_finite())
            || !(0.0..1.0).contains(&self.defensive_weight)
            || !(self.defensive_var_scale > 0.0 && self.defensive_var_scale.is_finite())
            || self.restarts == 0
            || self.score_samples < 2
        {
            return Err(Error::InvalidArgument(format!(
                "invalid EM settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Max-shifted, self-normalized weights from log weights. Non-finite log
/// weights get zero weight.
fn self_normalize(log_weights: &[f64]) -> Result<Vec<f64>> {
    let m = log_weights
        .iter()
        .copied()
        .filter(|w| w.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::Initialization(
            "all importance weights are zero or non-finite".into(),
        ));
    }
    let raw: Vec<f64> = log_weights
        .iter()
        .map(|&lw| if lw.is_finite() { (lw - m).exp() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Draws `l` points from `proposal` and weights them by `π̃ / proposal`.
pub fn importance_weights<T: TargetModel + ?Sized, R: Rng + ?Sized>(
    target: &T,
    proposal: &MixtureApprox,
    l: usize,
    rng: &mut R,
) -> Result<WeightedSample> {
    if l == 0 {
        return Err(Error::InvalidArgument(
            "need at least one importance sample".into(),
        ));
    }
    let points = proposal.sample(l, rng);
    let log_weights: Vec<f64> = points
        .iter()
        .map(|x| target.log_density(x) - proposal.log_pdf(x))
        .collect();
    let weights = self_normalize(&log_weights)?;
    Ok(WeightedSample { points, weights })
}

/// Indices whose weight exceeds `c / L`.
pub fn outlier_indices(ws: &WeightedSample, c: f64) -> Vec<usize> {
    let cutoff = c / ws.len() as f64;
    (0..ws.len()).filter(|&i| ws.weights[i] > cutoff).collect()
}

/// `p₀ q(x) + Σ_{ℓ ∈ O} w_ℓ N(x | x_ℓ, s · diag(Cov_q))` with `p₀ = 1 - Σ_{ℓ ∈ O} w_ℓ`.
pub fn build_iw_proposal(
    mix: &MixtureApprox,
    ws: &WeightedSample,
    outliers: &[usize],
    var_scale: f64,
) -> Result<MixtureApprox> {
    if outliers.is_empty() {
        return Ok(mix.clone());
    }
    let outlier_mass: f64 = outliers.iter().map(|&i| ws.weights[i]).sum();
    let p0 = 1.0 - outlier_mass;
    if !(p0 > 0.0) {
        return Err(Error::Initialization(format!(
            "outliers carry all the weight (p0 = {p0}); raise the outlier multiplier"
        )));
    }
    let log_var = mix.marginal_variances().map(|v| (var_scale * v).ln());
    let mut weights: Vec<f64> = mix.weights().iter().map(|w| p0 * w).collect();
    let mut components = mix.components().to_vec();
    for &i in outliers {
        weights.push(ws.weights[i]);
        components.push(GaussianComponent::diagonal(
            ws.points[i].clone(),
            log_var.clone(),
        )?);
    }
    MixtureApprox::new(weights, components)
}

/// Starting mean and variances of the free block in [`weighted_em`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmStart {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

/// Result of [`weighted_em`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub component: GaussianComponent,
    /// Fitted weight of the free block, clipped to `[0.05, 0.95]`.
    pub rho: f64,
    /// Weighted log-likelihood after each E-step.
    pub log_likelihoods: Vec<f64>,
}

fn diag_log_pdf(x: &DVector<f64>, mean: &[f64], var: &[f64]) -> f64 {
    let mut lp = 0.0;
    for d in 0..mean.len() {
        let dev = x[d] - mean[d];
        lp -= 0.5 * (LN_2PI + var[d].ln() + dev * dev / var[d]);
    }
    lp
}

/// Weighted EM for the two-block mixture `(1 - ρ) background + ρ N(m, diag(s²))`
/// with the background clamped. Without a background the free block takes
/// all the mass and the fit is the weighted mean and population variance.
pub fn weighted_em(
    points: &[DVector<f64>],
    weights: &[f64],
    background: Option<&MixtureApprox>,
    start: Option<&EmStart>,
    cfg: &EmConfig,
) -> Result<EmFit> {
    if points.is_empty() || points.len() != weights.len() {
        return Err(Error::InvalidArgument(
            "weighted EM needs one weight per point".into(),
        ));
    }
    let dim = points[0].len();
    let n = points.len();
    let total: f64 = weights.iter().sum();
    let w: Vec<f64> = weights.iter().map(|x| x / total).collect();
    let bg: Vec<f64> = match background {
        Some(mix) => points.iter().map(|x| mix.log_pdf(x)).collect(),
        None => vec![f64::NEG_INFINITY; n],
    };
    let floor: Vec<f64> = match background {
        Some(mix) => mix
            .marginal_variances()
            .iter()
            .map(|v| (cfg.min_var_fraction * v).max(VARIANCE_FLOOR))
            .collect(),
        None => vec![VARIANCE_FLOOR; dim],
    };

    // Without an explicit start: the heaviest point and the weighted spread
    // of the sample.
    if let Some(st) = start {
        if st.mean.len() != dim || st.var.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: st.mean.len().max(st.var.len()),
            });
        }
    }
    let mut mean: Vec<f64> = match start {
        Some(st) => st.mean.iter().copied().collect(),
        None => {
            let heaviest = WeightedSample {
                points: Vec::new(),
                weights: w.clone(),
            }
            .argmax();
            points[heaviest].iter().copied().collect()
        }
    };
    let mut var = match start {
        Some(st) => st.var.iter().copied().collect(),
        None => (0..dim)
            .map(|d| {
                let m: f64 = (0..n).map(|i| w[i] * points[i][d]).sum();
                (0..n).map(|i| w[i] * (points[i][d] - m).powi(2)).sum()
            })
            .collect::<Vec<f64>>(),
    };
    for d in 0..dim {
        var[d] = var[d].max(floor[d]);
    }
    let mut rho: f64 = if background.is_some() { 0.5 } else { 1.0 };

    let mut log_likelihoods = Vec::new();
    let mut gamma = vec![0.0; n];
    for _ in 0..cfg.max_iters {
        // E-step
        let mut ll = 0.0;
        for i in 0..n {
            let a = (1.0 - rho).ln() + bg[i];
            let b = rho.ln() + diag_log_pdf(&points[i], &mean, &var);
            let total = log_add_exp(a, b);
            gamma[i] = if total == f64::NEG_INFINITY {
                0.0
            } else {
                (b - total).exp()
            };
            if w[i] > 0.0 {
                ll += w[i] * total;
            }
        }
        let converged = log_likelihoods
            .last()
            .is_some_and(|prev: &f64| (ll - prev).abs() < cfg.loglik_tol);
        log_likelihoods.push(ll);
        if converged {
            break;
        }

        // M-step
        let mass: f64 = (0..n).map(|i| w[i] * gamma[i]).sum();
        if !(mass > 0.0) {
            return Err(Error::EmFailure(
                "free component received no responsibility".into(),
            ));
        }
        for d in 0..dim {
            mean[d] = (0..n).map(|i| w[i] * gamma[i] * points[i][d]).sum::<f64>() / mass;
        }
        for d in 0..dim {
            let v = (0..n)
                .map(|i| w[i] * gamma[i] * (points[i][d] - mean[d]).powi(2))
                .sum::<f64>()
                / mass;
            var[d] = v.max(floor[d]);
        }
        if background.is_some() {
            rho = mass.min(1.0);
        }
    }

    let component = GaussianComponent::diagonal(
        DVector::from_vec(mean),
        DVector::from_iterator(dim, var.iter().map(|v| v.ln())),
    )?;
    Ok(EmFit {
        component,
        rho: rho.clamp(RHO_MIN, RHO_MAX),
        log_likelihoods,
    })
}

/// `(1 - ε) q + ε Σ_c ρ_c N(μ_c, s · diag Σ_c)`, or `q` itself when `ε = 0`.
pub fn defensive_proposal(mix: &MixtureApprox, weight: f64, var_scale: f64) -> Result<MixtureApprox> {
    if weight == 0.0 {
        return Ok(mix.clone());
    }
    let mut weights: Vec<f64> = mix.weights().iter().map(|w| (1.0 - weight) * w).collect();
    let mut components = mix.components().to_vec();
    for (w, c) in mix.weights().iter().zip(mix.components()) {
        weights.push(weight * w);
        components.push(GaussianComponent::diagonal(
            c.mean().clone(),
            c.cov().marginal_variances().map(|v| (var_scale * v).ln()),
        )?);
    }
    MixtureApprox::new(weights, components)
}

/// `Σ_c ρ_c diag Σ_c`: the typical component spread, without the spread
/// between component means.
pub fn component_width(mix: &MixtureApprox) -> DVector<f64> {
    let mut width = DVector::zeros(mix.dim());
    for (w, c) in mix.weights().iter().zip(mix.components()) {
        width += c.cov().marginal_variances() * *w;
    }
    width
}

/// The full initialization pipeline. Returns a diagonal component and a
/// mixing weight in `[0.05, 0.95]`.
pub fn init_component<T: TargetModel + ?Sized, R: Rng + ?Sized>(
    target: &T,
    mix: &MixtureApprox,
    l: usize,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<(GaussianComponent, f64)> {
    if l < 10 {
        return Err(Error::InvalidArgument(
            "initialization needs at least 10 samples".into(),
        ));
    }
    let first = defensive_proposal(mix, cfg.defensive_weight, cfg.defensive_var_scale)?;
    let ws = importance_weights(target, &first, l, rng)?;
    let outliers = outlier_indices(&ws, cfg.outlier_multiplier);
    let proposal = build_iw_proposal(mix, &ws, &outliers, cfg.outlier_var_scale)?;
    let resampled = importance_weights(target, &proposal, l, rng)?;
    let width = component_width(mix);
    let noise = BoostNoise::draw(mix, 0, cfg.score_samples, cfg.score_samples, rng);
    let mut best: Option<(f64, GaussianComponent, f64)> = None;
    let mut failure = None;
    for mean in separated_heavy_points(&resampled, &width, cfg.restarts) {
        let start = EmStart {
            mean,
            var: width.clone(),
        };
        // The widened copy stays in the background so heavy points far from
        // the start are explained by it rather than dragging the free block
        // across several uncovered regions.
        let fit = match weighted_em(&resampled.points, &resampled.weights, Some(&first), Some(&start), cfg) {
            Ok(fit) => fit,
            Err(e @ Error::EmFailure(_)) => {
                failure = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        // EM's weight is relative to a background that includes the widened
        // copy, so the weight is re-chosen on the objective itself.
        let mut scored: Option<(f64, f64)> = None;
        for k in 0..RHO_GRID {
            let rho = RHO_MIN + (RHO_MAX - RHO_MIN) * k as f64 / (RHO_GRID - 1) as f64;
            let value = match boost_objective_at_rho(target, mix, &fit.component, rho, &noise) {
                Ok((est, _, _)) => est.value,
                Err(Error::NonFiniteTarget { .. }) => break,
                Err(e) => return Err(e),
            };
            if scored.is_none_or(|(v, _)| value > v) {
                scored = Some((value, rho));
            }
        }
        let Some((value, rho)) = scored else { continue };
        if best.as_ref().is_none_or(|(b, _, _)| value > *b) {
            best = Some((value, fit.component, rho));
        }
    }
    match (best, failure) {
        (Some((_, comp, rho)), _) => Ok((comp, rho)),
        (None, Some(e)) => Err(e),
        (None, None) => Err(Error::EmFailure(
            "every EM candidate put the target at a non-finite value".into(),
        )),
    }
}

/// Up to `count` points in decreasing weight order, skipping any within two
/// standard deviations (under `width`) of one already taken.
fn separated_heavy_points(ws: &WeightedSample, width: &DVector<f64>, count: usize) -> Vec<DVector<f64>> {
    let mut order: Vec<usize> = (0..ws.len()).collect();
    order.sort_by(|&a, &b| ws.weights[b].total_cmp(&ws.weights[a]).then(a.cmp(&b)));
    let mut chosen: Vec<DVector<f64>> = Vec::new();
    for i in order {
        if chosen.len() == count {
            break;
        }
        let x = &ws.points[i];
        let close = chosen.iter().any(|c| {
            let d2: f64 = (0..x.len()).map(|d| (x[d] - c[d]).powi(2) / width[d]).sum();
            d2 < 4.0
        });
        if !close {
            chosen.push(x.clone());
        }
    }
    chosen
}

/// Diagonal component centred on the heaviest of `l` importance samples,
/// with the mixture's marginal variances.
pub fn max_weight_init<T: TargetModel + ?Sized, R: Rng + ?Sized>(
    target: &T,
    mix: &MixtureApprox,
    l: usize,
    rng: &mut R,
) -> Result<GaussianComponent> {
    let ws = importance_weights(target, mix, l, rng)?;
    let best = ws.argmax();
    GaussianComponent::diagonal(
        ws.points[best].clone(),
        mix.marginal_variances().map(f64::ln),
    )
}
