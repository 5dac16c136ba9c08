//! Online SGD on the XOR-like Gaussian mixture and its order-parameter ODE.
//!
//! [`finite_net`] trains an explicit two-layer network on streamed samples
//! from [`mixture`]. [`dynamics`] integrates the deterministic
//! high-dimensional limit of the same learning rule, driven by the
//! Monte-Carlo expectations of [`moments`] and a difficulty [`schedule`].
//! [`metrics`] turns states into coverage, losses and transition matrices.

pub mod dynamics;
pub mod error;
pub mod finite_net;
pub mod metrics;
pub mod mixture;
pub mod moments;
pub mod schedule;
pub mod state;

pub use dynamics::{integrate, ode_step, rate_eval, OdeConfig, RateEval, TrajectoryRecord, TrajectoryRow};
pub use error::{Error, Result};
pub use finite_net::{FiniteNet, SgdConfig};
pub use metrics::{coverage, population_loss, zero_noise_error, CoverageReport, TransitionMatrix};
pub use mixture::{Axis, ClusterId, MixtureSpec, Sign};
pub use moments::{estimate_expectations, EstimatorOptions, ExpectationSet};
pub use schedule::{DifficultyChannel, Protocol, Ramp, Schedule, ScheduleSpec};
pub use state::{controlled_init, random_init, OrderState};
