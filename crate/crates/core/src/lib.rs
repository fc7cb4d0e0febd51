//! Predictive recursion for mixing-density estimation from dependent
//! observations, with simulators, diagnostics and reference oracles.

pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod numeric;
pub mod oracle;
pub mod processes;
pub mod recursion;
pub mod support;

pub use error::{Error, Result};
pub use kernels::{marginal, Kernel};
pub use processes::{simulate, ObservationStream, ProcessConfig, ProcessKind};
pub use recursion::{pr_fit, pr_step, FitTrace, TraceSpec, Truth, WeightSchedule};
pub use support::{normalize, uniform_density, MixingDensity, SupportGrid};
