use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vboost::oracle::{chain_moments, quadrature_moments, rwm_sample, QuadratureGrid};
use vboost::{run, select_rank, MixtureApprox, RankPolicy, RankSweep, VBoostResult};

use crate::config::{OracleMethod, RunConfig, Target};
use crate::CliError;

pub struct Overrides {
    pub out: Option<std::path::PathBuf>,
    pub seed: Option<u64>,
    pub eval_samples: Option<usize>,
}

/// Loads, overrides and validates a config and builds its target. Nothing is
/// written until this succeeds.
fn prepare(config: &Path, ov: &Overrides) -> Result<(RunConfig, Target), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(out) = &ov.out {
        cfg.out = std::path::absolute(out).map_err(|e| CliError::Config(e.to_string()))?;
    }
    if let Some(seed) = ov.seed {
        cfg.vboost.seed = seed;
    }
    if let Some(n) = ov.eval_samples {
        cfg.vboost.eval_samples = n;
    }
    let target = cfg.target.build()?;
    cfg.validate(target.model().dim())?;
    Ok((cfg, target))
}

fn runtime(e: vboost::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::Runtime(e.to_string()))?;
    for row in rows {
        w.write_record(row).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}

fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn trace_rows(result: &VBoostResult) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for stage in &result.stages {
        for r in &stage.trace.records {
            rows.push(vec![
                stage.stage.to_string(),
                r.step.to_string(),
                r.objective.to_string(),
                r.grad_norm.to_string(),
            ]);
        }
    }
    rows
}

pub fn cmd_run(config: &Path, ov: &Overrides) -> Result<(), CliError> {
    let (cfg, target) = prepare(config, ov)?;
    let result = run(target.model(), &cfg.vboost).map_err(runtime)?;

    let stages: Vec<Vec<String>> = result
        .stages
        .iter()
        .map(|s| {
            vec![
                s.stage.to_string(),
                s.mixture.n_components().to_string(),
                s.rank.to_string(),
                s.eval.value.to_string(),
                s.eval.std_error.to_string(),
            ]
        })
        .collect();
    let mut files = vec![
        ("mixture.json", (result.mixture.to_json().map_err(runtime)? + "\n").into_bytes()),
        (
            "trace.csv",
            csv_bytes(&["stage", "step", "elbo_estimate", "grad_norm"], &trace_rows(&result))?,
        ),
        (
            "stages.csv",
            csv_bytes(&["stage", "n_components", "rank", "eval_elbo", "eval_se"], &stages)?,
        ),
        ("config.resolved.json", resolved_json(&cfg)?),
    ];
    if let Some(sweep) = &result.rank_sweep {
        files.push(("rank_sweep.csv", sweep_csv(sweep)?));
    }
    write_outputs(&cfg.out, &files)
}

fn resolved_json(cfg: &RunConfig) -> Result<Vec<u8>, CliError> {
    let text = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok((text + "\n").into_bytes())
}

/// One row per rank, followed by each coordinate's marginal variance so the
/// change column can be recomputed from the file alone.
fn sweep_csv(sweep: &RankSweep) -> Result<Vec<u8>, CliError> {
    let dim = sweep.fits.first().map_or(0, |f| f.dim());
    let var_names: Vec<String> = (0..dim).map(|d| format!("var_{d}")).collect();
    let mut header = vec!["rank", "mean_marginal_variance", "pct_change"];
    header.extend(var_names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = sweep
        .fits
        .iter()
        .enumerate()
        .map(|(r, fit)| {
            let mut row = vec![
                r.to_string(),
                sweep.mean_marginal_variance[r].to_string(),
                sweep.pct_change.get(r).map(f64::to_string).unwrap_or_default(),
            ];
            row.extend(fit.marginal_variances().iter().map(f64::to_string));
            row
        })
        .collect();
    csv_bytes(&header, &rows)
}

pub fn cmd_rank(config: &Path, ov: &Overrides) -> Result<(), CliError> {
    let (cfg, target) = prepare(config, ov)?;
    let RankPolicy::Sweep { threshold, max_rank } = cfg.vboost.rank else {
        return Err(CliError::Config(
            "rank needs vboost.rank of kind \"sweep\"".into(),
        ));
    };
    let sweep = select_rank(target.model(), threshold, max_rank, &cfg.vboost).map_err(runtime)?;
    write_outputs(
        &cfg.out,
        &[("rank_sweep.csv", sweep_csv(&sweep)?)],
    )
}

/// Reference moments with standard errors; quadrature errors are reported as 0.
struct Reference {
    mean: DVector<f64>,
    mean_se: DVector<f64>,
    std: DVector<f64>,
    std_se: DVector<f64>,
    cov: DMatrix<f64>,
    cov_se: DMatrix<f64>,
}

fn quadrature_reference(cfg: &RunConfig, target: &Target, mix: &MixtureApprox) -> Result<Reference, CliError> {
    let dim = mix.dim();
    let centre = mix.mean();
    let sd = mix.marginal_variances().map(f64::sqrt);
    let points = cfg.oracle.points.unwrap_or(if dim == 1 { 4001 } else { 401 });
    let mut half = cfg.oracle.half_width;
    // Widen until the boundary holds negligible mass.
    let moments = loop {
        let lower: Vec<f64> = (0..dim).map(|d| centre[d] - half * sd[d]).collect();
        let upper: Vec<f64> = (0..dim).map(|d| centre[d] + half * sd[d]).collect();
        let grid = QuadratureGrid::new(lower, upper, vec![points; dim]).map_err(runtime)?;
        match quadrature_moments(target.model(), &grid) {
            Err(vboost::Error::GridTooSmall { .. }) if half < 16.0 * cfg.oracle.half_width => half *= 2.0,
            other => break other.map_err(runtime)?,
        }
    };
    Ok(Reference {
        std: moments.cov.diagonal().map(f64::sqrt),
        mean: moments.mean,
        mean_se: DVector::zeros(dim),
        std_se: DVector::zeros(dim),
        cov: moments.cov,
        cov_se: DMatrix::zeros(dim, dim),
    })
}

fn mcmc_reference(cfg: &RunConfig, target: &Target, mix: &MixtureApprox) -> Result<Reference, CliError> {
    let o = &cfg.oracle;
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let chain = rwm_sample(target.model(), &mix.mean(), o.n_steps, o.burn_in, o.proposal_scale, &mut rng)
        .map_err(runtime)?;
    let m = chain_moments(&chain.samples).map_err(runtime)?;
    Ok(Reference {
        mean: m.mean,
        mean_se: m.mean_se,
        std: m.std,
        std_se: m.std_se,
        cov: m.cov,
        cov_se: m.cov_se,
    })
}

fn moment_rows(mix: &MixtureApprox, reference: &Reference) -> Vec<Vec<String>> {
    let (mean, cov) = (mix.mean(), mix.cov());
    let dim = mean.len();
    let row = |id: String, vb: f64, oracle: f64, se: f64| vec![id, vb.to_string(), oracle.to_string(), se.to_string()];
    let mut rows = Vec::with_capacity(2 * dim + dim * (dim - 1) / 2);
    for d in 0..dim {
        rows.push(row(format!("mean[{d}]"), mean[d], reference.mean[d], reference.mean_se[d]));
    }
    for d in 0..dim {
        rows.push(row(format!("std[{d}]"), cov[(d, d)].sqrt(), reference.std[d], reference.std_se[d]));
    }
    for i in 0..dim {
        for j in i + 1..dim {
            rows.push(row(format!("cov[{i},{j}]"), cov[(i, j)], reference.cov[(i, j)], reference.cov_se[(i, j)]));
        }
    }
    rows
}

/// `--seed` selects the oracle seed here; the fit is read from `mixture`.
pub fn cmd_compare(mixture: &Path, config: &Path, ov: &Overrides) -> Result<(), CliError> {
    let seed = ov.seed;
    let (mut cfg, target) = prepare(
        config,
        &Overrides {
            seed: None,
            out: ov.out.clone(),
            eval_samples: ov.eval_samples,
        },
    )?;
    if let Some(seed) = seed {
        cfg.oracle.seed = seed;
    }
    let mix = MixtureApprox::load(mixture)
        .map_err(|e| CliError::Config(format!("cannot load mixture {}: {e}", mixture.display())))?;
    let dim = target.model().dim();
    if mix.dim() != dim {
        return Err(CliError::Config(format!(
            "mixture has dimension {} but the target has {dim}",
            mix.dim()
        )));
    }
    let use_quadrature = match cfg.oracle.method {
        OracleMethod::Auto => dim <= 2,
        OracleMethod::Quadrature if dim > 2 => {
            return Err(CliError::Config("quadrature oracle needs dimension 1 or 2".into()));
        }
        OracleMethod::Quadrature => true,
        OracleMethod::Mcmc => false,
    };
    let reference = if use_quadrature {
        quadrature_reference(&cfg, &target, &mix)?
    } else {
        mcmc_reference(&cfg, &target, &mix)?
    };
    let rows = moment_rows(&mix, &reference);
    write_outputs(
        &cfg.out,
        &[(
            "compare_moments.csv",
            csv_bytes(&["statistic", "vb_value", "oracle_value", "oracle_se"], &rows)?,
        )],
    )
}
