//! The boosting loop: fit one component, optionally sweep its rank, then add
//! components one at a time with everything fitted so far frozen.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::elbo::{boost_grad, elbo_estimate, first_component_grad, BoostParams, ElboEstimate};
use crate::error::{Error, Result};
use crate::init::{init_component, max_weight_init, EmConfig};
use crate::lowrank::GaussianComponent;
use crate::mixture::MixtureApprox;
use crate::numeric::{logistic, logit};
use crate::optim::{fit, AdamConfig, FitTrace};
use crate::targets::TargetModel;

const FACTOR_INIT_SCALE: f64 = 0.01;
/// Starting log-variance of the first component (std 0.1). Starting narrow
/// makes the first fit lock onto one mode of a multimodal target instead of
/// stalling at a wide symmetric fit between modes.
const FIRST_LOG_VAR_INIT: f64 = -4.605170185988091;
const MAX_WEIGHT_RHO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RankPolicy {
    Fixed { rank: usize },
    Sweep { threshold: f64, max_rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    /// Importance weighting, outlier proposal and weighted EM.
    Alg1,
    MaxWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VBoostConfig {
    pub max_components: usize,
    pub rank: RankPolicy,
    /// Optimizer steps for the first component (and every rank-sweep fit).
    pub first_steps: usize,
    /// Optimizer steps for each added component.
    pub component_steps: usize,
    /// Draws from the component being fitted, per gradient.
    pub n_new: usize,
    /// Draws from the frozen mixture, per gradient.
    pub n_old: usize,
    pub init: InitMethod,
    /// Importance samples used to initialize a new component.
    pub init_samples: usize,
    pub em: EmConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Draws per component for the post-stage ELBO evaluation.
    pub eval_samples: usize,
    pub record_every: usize,
}

impl Default for VBoostConfig {
    fn default() -> Self {
        Self {
            max_components: 1,
            rank: RankPolicy::Fixed { rank: 0 },
            first_steps: 2000,
            component_steps: 1000,
            n_new: 400,
            n_old: 400,
            init: InitMethod::Alg1,
            init_samples: 1000,
            em: EmConfig::default(),
            adam: AdamConfig {
                step_size: 0.05,
                final_step_size: Some(0.001),
                ..AdamConfig::default()
            },
            seed: 0,
            eval_samples: 10_000,
            record_every: 10,
        }
    }
}

impl VBoostConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.max_components == 0 || self.first_steps == 0 || self.component_steps == 0 {
            return bad("component count and step counts must be positive".into());
        }
        if self.n_new < 2 || self.n_old < 2 || self.eval_samples < 2 {
            return bad("sample counts must be at least 2".into());
        }
        if self.init_samples < 10 {
            return bad("init_samples must be at least 10".into());
        }
        if self.record_every == 0 {
            return bad("record_every must be positive".into());
        }
        match self.rank {
            RankPolicy::Fixed { rank } if rank > dim => {
                return bad(format!("rank {rank} exceeds dimension {dim}"));
            }
            RankPolicy::Sweep {
                threshold,
                max_rank,
            } => {
                if !(threshold > 0.0 && threshold <= 1.0) {
                    return bad(format!("sweep threshold {threshold} outside (0, 1]"));
                }
                if max_rank > dim {
                    return bad(format!("max_rank {max_rank} exceeds dimension {dim}"));
                }
            }
            _ => {}
        }
        self.em.validate()?;
        self.adam.validate()
    }
}

/// Independent RNG streams so that each stage's randomness does not depend
/// on how much randomness earlier stages consumed.
#[derive(Debug, Clone, Copy)]
enum Purpose {
    Optimize = 0,
    Init = 1,
    Eval = 2,
    Factors = 3,
}

fn stream(seed: u64, stage: usize, rank: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | ((rank as u64) << 8) | purpose as u64);
    rng
}

fn small_factors<R: Rng + ?Sized>(dim: usize, rank: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(dim, rank, |_, _| {
        FACTOR_INIT_SCALE * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Fits a single rank-`rank` component by maximizing `L¹`, starting from
/// `μ = 0`, `v = ln 0.01` and small random factors.
pub fn fit_first<T: TargetModel + ?Sized>(
    target: &T,
    rank: usize,
    cfg: &VBoostConfig,
) -> Result<(MixtureApprox, FitTrace)> {
    let dim = target.dim();
    if rank > dim {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} exceeds dimension {dim}"
        )));
    }
    let factors = small_factors(dim, rank, &mut stream(cfg.seed, 1, rank, Purpose::Factors));
    let init = GaussianComponent::from_parts(
        DVector::zeros(dim),
        factors,
        DVector::from_element(dim, FIRST_LOG_VAR_INIT),
    )?;
    let mut rng = stream(cfg.seed, 1, rank, Purpose::Optimize);
    let (flat, trace) = fit(
        |p: &DVector<f64>, rng: &mut ChaCha8Rng| {
            let comp = GaussianComponent::from_flat(p.as_slice(), dim, rank)?;
            let (est, grad) = first_component_grad(target, &comp, cfg.n_new, rng)?;
            Ok((est.value, grad.to_flat()))
        },
        init.to_flat(),
        cfg.first_steps,
        &cfg.adam,
        &mut rng,
        cfg.record_every,
    )?;
    let comp = GaussianComponent::from_flat(flat.as_slice(), dim, rank)?;
    Ok((MixtureApprox::single(comp), trace))
}

/// Mean relative change in marginal variance, `mean_d |σ²'_d - σ²_d| / σ²_d`.
pub fn marginal_variance_pct_change(fit_r: &MixtureApprox, fit_r1: &MixtureApprox) -> Result<f64> {
    pct_change_of(&fit_r.marginal_variances(), &fit_r1.marginal_variances())
}

/// [`marginal_variance_pct_change`] on precomputed variance vectors.
pub fn pct_change_of(var_r: &DVector<f64>, var_r1: &DVector<f64>) -> Result<f64> {
    if var_r.len() != var_r1.len() {
        return Err(Error::DimensionMismatch {
            expected: var_r.len(),
            got: var_r1.len(),
        });
    }
    if var_r.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument(
            "marginal variance must be positive".into(),
        ));
    }
    let total: f64 = var_r
        .iter()
        .zip(var_r1.iter())
        .map(|(a, b)| (b - a).abs() / a)
        .sum();
    Ok(total / var_r.len() as f64)
}

/// One single-component fit per rank tried, in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSweep {
    pub selected: usize,
    pub fits: Vec<MixtureApprox>,
    pub traces: Vec<FitTrace>,
    /// Mean marginal variance of each fit.
    pub mean_marginal_variance: Vec<f64>,
    /// `pct_change[r]` compares rank `r` with rank `r + 1`.
    pub pct_change: Vec<f64>,
    /// The sweep ran into `max_rank` without the change dropping below the threshold.
    pub hit_max_rank: bool,
}

/// Fits ranks `0, 1, 2, …` and stops at the first `r` whose change to
/// `r + 1` is below `threshold`.
pub fn select_rank<T: TargetModel + ?Sized>(
    target: &T,
    threshold: f64,
    max_rank: usize,
    cfg: &VBoostConfig,
) -> Result<RankSweep> {
    let dim = target.dim();
    // With one coordinate a factor only duplicates the diagonal.
    let cap = if dim == 1 { 0 } else { max_rank.min(dim) };
    let mut sweep = RankSweep {
        selected: 0,
        fits: Vec::new(),
        traces: Vec::new(),
        mean_marginal_variance: Vec::new(),
        pct_change: Vec::new(),
        hit_max_rank: false,
    };
    let mut variances: Vec<DVector<f64>> = Vec::new();
    let push = |sweep: &mut RankSweep, variances: &mut Vec<DVector<f64>>, r: usize| -> Result<()> {
        let (mix, trace) = fit_first(target, r, cfg).map_err(|e| e.at_stage(0))?;
        let var = mix.marginal_variances();
        sweep.mean_marginal_variance.push(var.mean());
        variances.push(var);
        sweep.fits.push(mix);
        sweep.traces.push(trace);
        Ok(())
    };
    push(&mut sweep, &mut variances, 0)?;
    let mut r = 0;
    loop {
        if r >= cap {
            sweep.selected = cap;
            sweep.hit_max_rank = dim > 1;
            break;
        }
        push(&mut sweep, &mut variances, r + 1)?;
        let change = pct_change_of(&variances[r], &variances[r + 1])?;
        sweep.pct_change.push(change);
        if change < threshold {
            sweep.selected = r;
            break;
        }
        r += 1;
    }
    Ok(sweep)
}

/// Adds one component to a frozen mixture. `stage` is the 1-based index the
/// new component will have.
pub fn add_component<T: TargetModel + ?Sized>(
    target: &T,
    mix: &MixtureApprox,
    rank: usize,
    stage: usize,
    cfg: &VBoostConfig,
) -> Result<(MixtureApprox, FitTrace)> {
    let dim = target.dim();
    let mut init_rng = stream(cfg.seed, stage, rank, Purpose::Init);
    let (diag, rho0) = match cfg.init {
        InitMethod::Alg1 => {
            match init_component(target, mix, cfg.init_samples, &cfg.em, &mut init_rng) {
                Ok(found) => found,
                Err(Error::EmFailure(_)) => (
                    max_weight_init(target, mix, cfg.init_samples, &mut init_rng)?,
                    MAX_WEIGHT_RHO,
                ),
                Err(e) => return Err(e),
            }
        }
        InitMethod::MaxWeight => (
            max_weight_init(target, mix, cfg.init_samples, &mut init_rng)?,
            MAX_WEIGHT_RHO,
        ),
    };
    let factors = small_factors(
        dim,
        rank,
        &mut stream(cfg.seed, stage, rank, Purpose::Factors),
    );
    let start =
        GaussianComponent::from_parts(diag.mean().clone(), factors, diag.cov().log_diag().clone())?;
    let n = GaussianComponent::n_params(dim, rank);
    let mut init = start.to_flat().as_slice().to_vec();
    init.push(logit(rho0));

    let mut rng = stream(cfg.seed, stage, rank, Purpose::Optimize);
    let (flat, trace) = fit(
        |p: &DVector<f64>, rng: &mut ChaCha8Rng| {
            let params = BoostParams {
                new_comp: GaussianComponent::from_flat(&p.as_slice()[..n], dim, rank)?,
                rho_logit: p[n],
            };
            let (est, grad) = boost_grad(target, mix, &params, cfg.n_new, cfg.n_old, rng)?;
            Ok((est.value, grad.to_flat()))
        },
        DVector::from_vec(init),
        cfg.component_steps,
        &cfg.adam,
        &mut rng,
        cfg.record_every,
    )?;
    let comp = GaussianComponent::from_flat(&flat.as_slice()[..n], dim, rank)?;
    let extended = mix.extend(comp, logistic(flat[n]))?;
    Ok((extended, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    /// 1-based; equals the number of components after the stage.
    pub stage: usize,
    pub rank: usize,
    pub trace: FitTrace,
    pub eval: ElboEstimate,
    pub mixture: MixtureApprox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VBoostResult {
    pub mixture: MixtureApprox,
    pub stages: Vec<StageRecord>,
    pub rank_sweep: Option<RankSweep>,
}

fn evaluate<T: TargetModel + ?Sized>(
    target: &T,
    mix: &MixtureApprox,
    stage: usize,
    cfg: &VBoostConfig,
) -> Result<ElboEstimate> {
    let mut rng = stream(cfg.seed, stage, 0, Purpose::Eval);
    elbo_estimate(target, mix, cfg.eval_samples, &mut rng)
}

/// Runs the whole pipeline. Errors carry the stage they occurred in
/// (stage 0 is the rank sweep).
pub fn run<T: TargetModel + ?Sized>(target: &T, cfg: &VBoostConfig) -> Result<VBoostResult> {
    cfg.validate(target.dim())?;
    let (rank, first, first_trace, rank_sweep) = match cfg.rank {
        RankPolicy::Fixed { rank } => {
            let (mix, trace) = fit_first(target, rank, cfg).map_err(|e| e.at_stage(1))?;
            (rank, mix, trace, None)
        }
        RankPolicy::Sweep {
            threshold,
            max_rank,
        } => {
            let sweep = select_rank(target, threshold, max_rank, cfg)?;
            let r = sweep.selected;
            (
                r,
                sweep.fits[r].clone(),
                sweep.traces[r].clone(),
                Some(sweep),
            )
        }
    };
    let eval = evaluate(target, &first, 1, cfg).map_err(|e| e.at_stage(1))?;
    let mut stages = vec![StageRecord {
        stage: 1,
        rank,
        trace: first_trace,
        eval,
        mixture: first.clone(),
    }];
    let mut mix = first;
    for stage in 2..=cfg.max_components {
        let (next, trace) =
            add_component(target, &mix, rank, stage, cfg).map_err(|e| e.at_stage(stage))?;
        let eval = evaluate(target, &next, stage, cfg).map_err(|e| e.at_stage(stage))?;
        stages.push(StageRecord {
            stage,
            rank,
            trace,
            eval,
            mixture: next.clone(),
        });
        mix = next;
    }
    Ok(VBoostResult {
        mixture: mix,
        stages,
        rank_sweep,
    })
}
