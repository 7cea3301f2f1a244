//! Variational boosting.
//!
//! A posterior approximation is grown one Gaussian component at a time.
//! Each component has a low-rank plus diagonal covariance
//! `Σ = F Fᵀ + diag(exp(v))`, so densities, draws and gradients cost
//! `O(D r²)` rather than `O(D³)`. Fitting maximizes Monte Carlo ELBO
//! estimates with reparameterization gradients; components already in the
//! mixture are frozen and only their total weight shrinks as new ones are
//! added.
//!
//! ```no_run
//! use nalgebra::{DMatrix, DVector};
//! use vboost::{run, GaussianTarget, VBoostConfig};
//!
//! let target = GaussianTarget::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
//! let result = run(&target, &VBoostConfig { max_components: 3, ..Default::default() }).unwrap();
//! println!("{}", result.mixture.to_json().unwrap());
//! ```

pub mod driver;
pub mod elbo;
pub mod error;
pub mod init;
pub mod lowrank;
pub mod mixture;
pub mod numeric;
pub mod optim;
pub mod oracle;
pub mod targets;

pub use driver::{
    add_component, fit_first, marginal_variance_pct_change, run, select_rank, InitMethod,
    RankPolicy, RankSweep, StageRecord, VBoostConfig, VBoostResult,
};
pub use elbo::{
    boost_grad, elbo_estimate, first_component_grad, BoostGradient, BoostParams, ElboEstimate,
};
pub use error::{Error, Result};
pub use init::{EmConfig, EmStart, WeightedSample};
pub use lowrank::{ComponentGradient, ComponentNoise, GaussianComponent, LowRankDiagCov};
pub use mixture::{MarginalMixture, MixtureApprox, MixtureDocument};
pub use optim::{AdamConfig, FitTrace};
pub use targets::{GaussianTarget, GmmTarget, TargetModel};
