//! Deadline-constrained inference offloading over a slotted uplink.

mod dp;
mod levels;
mod mdp;
pub mod oracle;
mod sim;
mod trace;

pub use dp::{offline_dp_plan, DpPlan, PlannedTx};
pub use levels::{slots_for, ChannelModel, LevelInfo, LevelPredictions, LevelTable, Outcome};
pub use mdp::{build_mdp, online_act, Action, Decision, MdpConfig, MdpPolicy, QueueState};
pub use sim::{
    augment_decide, simulate, Augment, AugmentDecision, CompletionStats, DEFAULT_TAU, InferScheduler, SimOptions, Task, TaskStatus,
};
pub use trace::{gen_trace, Arrival};
