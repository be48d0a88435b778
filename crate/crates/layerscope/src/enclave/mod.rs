//! Simulated TEE partitioning: plans and memory accounting, the host/worker
//! wire protocol, and both sides of partitioned training.

pub mod host;
pub mod plan;
pub mod protocol;
pub mod worker;

pub use host::{
    monolithic_baseline, run_partitioned_training, sweep_cuts, sweep_cuts_verified, worker_exe,
    CostReport, PartitionOutcome, SkippedCut, SweepReport, CROSSINGS_PER_BATCH, WORKER_ENV,
};
pub use plan::{
    account_from_specs, account_memory, cut_label, validate_from_specs, validate_plan,
    CopiedFrontLayer, MemoryAccount, PartitionPlan, SecureLayerCost, DEFAULT_BUDGET_BYTES,
};
pub use protocol::{Framed, Message, WorkerInit};
pub use worker::run_worker;
