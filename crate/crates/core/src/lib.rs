//! Event-level simulation of a Franson two-photon interferometer.
//!
//! A down-conversion source emits energy-entangled photon pairs, one photon
//! per party goes through an unbalanced Mach-Zehnder interferometer, and
//! detector time tags are matched into coincidences. Closed-form expectations
//! sit next to the event simulation so the two can be checked against each
//! other.

pub mod analysis;
pub mod coincidence;
pub mod config;
pub mod event_sim;
pub mod interferometer;
pub mod io;
pub mod par;
pub mod pipeline;
pub mod spdc_source;

pub use config::ExperimentConfig;
pub use par::Parallelism;
