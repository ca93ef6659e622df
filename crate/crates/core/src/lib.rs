//! Third-order Langevin dynamics (TOLD) diffusion and its critically-damped
//! variant (TOLD++).
//!
//! * [`mat3`]: 3×3 algebra for the drift matrix (roots, exponentials, Cholesky).
//! * [`dynamics`]: closed-form perturbation kernels for both schemes.
//! * [`sde`]: Euler–Maruyama forward and reverse simulation.
//! * [`score`]: MLP score network, Adam and the denoising training loop.
//! * [`data`]: Gaussian-mixture and Swiss-roll generators.
//! * [`metrics`]: Gaussian-Fréchet distance, 1-D Wasserstein, Welch t-test.
//! * [`cli`]: the `told` command-line tool.

pub mod cli;
pub mod data;
pub mod dynamics;
pub mod error;
mod expoly;
pub mod mat3;
pub mod metrics;
pub mod score;
pub mod sde;
pub mod seeding;

pub use dynamics::{DynamicsParams, KernelMoments, PhaseState, Scheme, TransitionMatrix};
pub use error::{Error, Result};
pub use mat3::Mat3;
