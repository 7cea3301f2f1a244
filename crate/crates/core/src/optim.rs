//! Adam gradient ascent with an optional geometric step-size anneal.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub step_size: f64,
    /// When set, the step size decays geometrically from `step_size` at the
    /// first step to `final_step_size` at the last.
    pub final_step_size: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            final_step_size: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step_size > 0.0
            && self.final_step_size.is_none_or(|a| a > 0.0)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }

    /// Step size used at step `step` (0-based) of an `n_steps` run.
    pub fn step_size_at(&self, step: usize, n_steps: usize) -> f64 {
        match self.final_step_size {
            Some(last) if n_steps > 1 => {
                let t = step as f64 / (n_steps - 1) as f64;
                self.step_size * (last / self.step_size).powf(t)
            }
            _ => self.step_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: DVector<f64>,
    pub second_moment: DVector<f64>,
    pub step_count: usize,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            first_moment: DVector::zeros(n_params),
            second_moment: DVector::zeros(n_params),
            step_count: 0,
            config,
        }
    }

    /// One bias-corrected ascent step of size `step_size`. A non-finite
    /// gradient is rejected without touching the state.
    pub fn step(
        &mut self,
        params: &DVector<f64>,
        grad: &DVector<f64>,
        step_size: f64,
    ) -> Result<DVector<f64>> {
        assert_eq!(
            params.len(),
            grad.len(),
            "adam: parameter and gradient lengths differ"
        );
        assert_eq!(params.len(), self.first_moment.len(), "adam: state length");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                step: self.step_count,
            });
        }
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut out = params.clone();
        for i in 0..params.len() {
            let g = grad[i];
            self.first_moment[i] = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
            self.second_moment[i] = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
            let m_hat = self.first_moment[i] / c1;
            let v_hat = self.second_moment[i] / c2;
            out[i] += step_size * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub records: Vec<TraceRecord>,
}

/// Runs exactly `n_steps` Adam steps on `objective`, which returns a
/// stochastic estimate of the objective and its gradient at the given
/// parameters. Records every `record_every`-th step and always the last.
pub fn fit<R, F>(
    mut objective: F,
    init: DVector<f64>,
    n_steps: usize,
    config: &AdamConfig,
    rng: &mut R,
    record_every: usize,
) -> Result<(DVector<f64>, FitTrace)>
where
    F: FnMut(&DVector<f64>, &mut R) -> Result<(f64, DVector<f64>)>,
    R: ?Sized,
{
    if n_steps == 0 {
        return Err(Error::InvalidArgument("fit needs at least one step".into()));
    }
    config.validate()?;
    let record_every = record_every.max(1);
    let mut state = AdamState::new(init.len(), *config);
    let mut params = init;
    let mut trace = FitTrace::default();
    for step in 0..n_steps {
        let (value, grad) = objective(&params, rng)?;
        let next = state
            .step(&params, &grad, config.step_size_at(step, n_steps))
            .map_err(|_| Error::NonFiniteGradient { step })?;
        if next.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { step });
        }
        params = next;
        if step % record_every == 0 || step + 1 == n_steps {
            trace.records.push(TraceRecord {
                step,
                objective: value,
                grad_norm: grad.norm(),
            });
        }
    }
    Ok((params, trace))
}
