//! Discrete-event simulator of batch analysis jobs running on VMs spread
//! over several IaaS clouds, with image propagation, remote data streaming,
//! and fault injection.

pub mod audit;
pub mod cloud;
pub mod faults;
pub mod ids;
pub mod jobs;
pub mod kernel;
pub mod metrics;
pub mod oracle;
pub mod run;
pub mod scenario;
pub mod scheduler;
pub mod sim;

pub use run::{run, run_scenario, simulate, RunError, RunOutput, RunSummary};
pub use scenario::{
    emit_preset_scenario, load_scenario, preset_scenario, ScenarioConfig, ScenarioError,
};
pub use sim::Simulation;
