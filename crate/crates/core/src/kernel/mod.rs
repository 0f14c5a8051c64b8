//! Simulation kernel: clock, event queue, and the fluid bandwidth model.

pub mod flows;
pub mod maxmin;
pub mod queue;
pub mod time;

pub use flows::{Flow, FlowNetwork, NetworkError, Rate};
pub use maxmin::{solve_max_min, FlowRequest, LinkSpec, SolveError};
pub use queue::{EventHandle, Kernel, KernelError, SimEvent};
pub use time::{SimDuration, SimTime};
