//! Discrete-event simulation of a GPU cluster running an HPO study under the
//! trial-based or stage-based policy.

mod cluster;
mod engine;
mod plan;
mod router;
mod trace;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cluster::{GpuLabel, Placement, Worker, WorkerId, WorkerPool};
pub use engine::{simulate, RungLog, SimReport, Simulation, TrialOutcome};
pub use plan::{take_epochs, ExecutionPlan, UnitId, WorkUnit};
pub use router::{
    merge_studies, partition_cluster, qualified_trial_id, route, simulate_studies, ExecutorKey,
    ExecutorReport,
};
pub use trace::{
    parse_trace_csv, summarize_trace, trace_to_csv_string, write_trace_csv, TraceError, TraceEvent,
    TraceRecord, TraceSummary, TRACE_COLUMNS,
};

use crate::algo::AlgoError;
use crate::hp::HpError;
use crate::surrogate::SurrogateError;
use crate::tree::TreeError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("a stage needs {gpus} GPUs but a node has only {limit}")]
    Unsatisfiable { gpus: u32, limit: u32 },
    #[error("study {0} has no trials")]
    EmptyStudy(String),
    #[error("invalid cluster: {0}")]
    InvalidCluster(String),
    #[error("invalid cost model: {0}")]
    InvalidCost(String),
    #[error("simulation stalled with {0} trials still active")]
    Stalled(usize),
    #[error(transparent)]
    Hp(#[from] HpError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub nodes: u32,
    pub gpus_per_node: u32,
    pub gpu_memory_mb: u32,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            nodes: 4,
            gpus_per_node: 5,
            gpu_memory_mb: 12_000,
        }
    }
}

impl ClusterSpec {
    pub fn total_gpus(&self) -> u32 {
        self.nodes * self.gpus_per_node
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.nodes == 0 || self.gpus_per_node == 0 || self.gpu_memory_mb == 0 {
            return Err(SimError::InvalidCluster(
                "nodes, gpus_per_node and gpu_memory_mb must be positive".into(),
            ));
        }
        if self.nodes.checked_mul(self.gpus_per_node).is_none() {
            return Err(SimError::InvalidCluster("too many GPUs".into()));
        }
        Ok(())
    }
}

/// Time costs in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub epoch_time_s: f64,
    /// Time per epoch on `g` GPUs is `epoch_time_s / g^scaling_exponent`.
    pub scaling_exponent: f64,
    pub checkpoint_load_s: f64,
    pub container_start_s: f64,
    pub container_destroy_s: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            epoch_time_s: 1.0,
            scaling_exponent: 0.9,
            checkpoint_load_s: 0.5,
            container_start_s: 2.0,
            container_destroy_s: 0.0,
        }
    }
}

impl CostModel {
    /// No overheads and linear multi-GPU speedup: GPU time equals epochs.
    pub fn zero_overhead() -> Self {
        CostModel {
            epoch_time_s: 1.0,
            scaling_exponent: 1.0,
            checkpoint_load_s: 0.0,
            container_start_s: 0.0,
            container_destroy_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("checkpoint_load_s", self.checkpoint_load_s),
            ("container_start_s", self.container_start_s),
            ("container_destroy_s", self.container_destroy_s),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::InvalidCost(format!("{name} must be a non-negative number")));
            }
        }
        if !(self.epoch_time_s.is_finite() && self.epoch_time_s > 0.0) {
            return Err(SimError::InvalidCost("epoch_time_s must be positive".into()));
        }
        if !(self.scaling_exponent > 0.0 && self.scaling_exponent <= 1.0) {
            return Err(SimError::InvalidCost("scaling_exponent must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn epoch_duration(&self, gpus: u32) -> f64 {
        if gpus <= 1 {
            self.epoch_time_s
        } else {
            self.epoch_time_s / f64::from(gpus).powf(self.scaling_exponent)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    TrialBased,
    StageBased,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::TrialBased => "trial_based",
            Policy::StageBased => "stage_based",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
