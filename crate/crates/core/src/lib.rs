//! Online learning of control-affine dynamics `ẋ = f(x) + g(x)u` with a
//! matrix-variate Gaussian process, and safe control through chance-constrained
//! control barrier conditions.
//!
//! * [`kernels`], [`mvg`]: scalar kernels with analytic derivatives, matrix normals.
//! * [`dyn_gp`]: the Kronecker-structured posterior over `F(x) = [f(x) g(x)]`.
//! * [`barrier`]: barrier functions and the mean/variance of the barrier condition.
//! * [`controller`]: the deterministic second-order-cone constraint and its solver.
//! * [`trigger`]: self-triggered hold times for relative-degree-1 barriers.
//! * [`sim`]: the pendulum and the closed learn-and-filter loop.
//! * [`config`], [`experiment`]: JSON configs, artifacts, the oracle suite.
//! * [`oracles`]: independent reference computations used by tests and the suite.

pub mod barrier;
pub mod config;
pub mod controller;
pub mod dyn_gp;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod linalg;
pub mod mvg;
pub mod oracles;
pub mod sim;
pub mod trigger;

pub use error::{Error, Result};
