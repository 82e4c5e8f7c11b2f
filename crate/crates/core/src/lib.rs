//! Curriculum learning for reinforcement-learning job shop scheduling.
//!
//! The pipeline runs in stages, each owned by one module:
//!
//! * [`instance`] generates and persists fixed-size JSSP datasets.
//! * [`env`] is the step-wise scheduling simulation with left-shift insertion.
//! * [`pdr`] holds the registry of priority dispatching rules.
//! * [`exact`] proves optimal makespans by branch-and-bound.
//! * [`curriculum`] grades instances by difficulty to solve (DTS) and builds curricula.
//! * [`agent`] is the graph policy and its clipped policy-gradient update.
//! * [`harness`] trains agents on curricula and analyses the learning curves.

pub mod agent;
pub mod curriculum;
pub mod env;
pub mod error;
pub mod exact;
pub mod harness;
pub mod instance;
pub mod io;
pub mod pdr;
pub mod seed;

pub use error::{Error, Result};
