//! Independent reference computations used to check fitted approximations:
//! tensor-grid quadrature in one or two dimensions and a tuned random-walk
//! Metropolis sampler for everything else.

mod mcmc;
mod quadrature;

pub use mcmc::{chain_moments, ess, rwm_sample, ChainMoments, MhChain};
pub use quadrature::{kl_q_to_target, quadrature_moments, QuadratureGrid, QuadratureMoments};
