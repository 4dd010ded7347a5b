//! Federated training under a total delay budget, and centralized training
//! with filtered, compressed uploads.

mod centralized;
mod delay;
mod fc;
mod proxy;
mod run;
mod train;

pub use centralized::{
    assign_upload_compression, importance_filter, run_centralized, CentralConfig, CentralRun, CycleRecord,
};
pub use delay::{
    allocate_bandwidth, calibrate_bandwidth, compute_delay, expected_max_compute, expected_round_delay,
    mc_round_delay, round_delay, Allocation, Calibration, DeviceProfile, RoundDelay,
};
pub use fc::{fc_schedule, FcDecision, FcPlanner};
pub use proxy::{fit_proxy, update_divergence, ConvergenceProxy, PilotRound, B_DIV_MAX};
pub use run::{
    run_fl, write_rounds_csv, DeviceDefaults, FlConfig, FlData, ProxySetting, RoundRecord, Scheduler, TrainRun,
    DEFAULT_BANDWIDTH_HZ, DEFAULT_MODEL_BITS,
};
pub use train::{fedavg, local_update};
