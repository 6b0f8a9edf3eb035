#![no_std]
//! Policy gradients through the log density gradient `grad_theta log d_gamma`
//! on tabular MDPs.
//!
//! * [`exact`]: linear-algebra solvers for occupancies, values, the log
//!   density gradient and all gradient formulas (including the residual
//!   decomposition of the practical actor-critic estimate).
//! * [`td`]: backward TD(0), the `Y_gamma` backup operator and linear TD.
//! * [`minmax`]: the Fenchel-dual saddle-point estimator and its projected,
//!   averaged stochastic version.
//! * [`mdp`], [`policy`], [`sampling`]: MDPs, softmax policies, samplers.
//!
//! The crate is `no_std` + `alloc`; file formats and the CLI live in the
//! `ldg` crate.

extern crate alloc;

pub mod error;
pub mod exact;
pub mod features;
pub mod linalg;
pub mod mdp;
pub mod minmax;
pub mod policy;
pub mod rng;
pub mod sampling;
pub mod td;

pub use nalgebra;

pub use error::{LdgError, Result};
pub use exact::{GradTable, GradientMethod, GradientReport, OccupancyTable, ValueTables};
pub use features::{FeatureKind, FeatureMap};
pub use mdp::{make_gridworld, mdp_by_name, StateActionPair, TabularMdp, TransitionSample};
pub use policy::{PolicyTable, SoftmaxPolicy};
pub use rng::LdgRng;
