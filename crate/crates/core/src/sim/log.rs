//! Raw per-run telemetry. Every derived metric is computed from these.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::{AdmissionRecord, RequestId};
use crate::fabric::{LedgerSample, TransferEvent};
use crate::hmm::HmmError;
use crate::imm::{ImmError, InstanceId, LifecycleEvent};
use crate::topology::DeviceId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("{strategy} is infeasible: {reason}")]
    Infeasible { strategy: String, reason: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl SimError {
    pub fn invariant(e: impl std::fmt::Display) -> SimError {
        SimError::Invariant(e.to_string())
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, SimError::Infeasible { .. })
    }
}

impl From<ImmError> for SimError {
    fn from(e: ImmError) -> Self {
        SimError::invariant(e)
    }
}

/// Out-of-memory is a property of the scenario; anything else is a bug.
pub(crate) fn hmm_error(strategy: &str, e: HmmError) -> SimError {
    if e.is_out_of_memory() {
        SimError::Infeasible {
            strategy: strategy.to_string(),
            reason: e.to_string(),
        }
    } else {
        SimError::invariant(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub arrival: f64,
    pub prefill_tokens: u32,
    pub decode_tokens: u32,
    pub first_token: Option<f64>,
    pub completion: Option<f64>,
    /// Instance that finished the request.
    pub instance: Option<InstanceId>,
    /// Times the request was pushed back to the queue by a restart.
    pub requeued: u32,
}

impl RequestRecord {
    pub fn ttft(&self) -> Option<f64> {
        self.first_token.map(|t| t - self.arrival)
    }

    /// Mean time per output token after the first; zero for one-token
    /// requests.
    pub fn tpot(&self) -> Option<f64> {
        let (first, done) = (self.first_token?, self.completion?);
        if self.decode_tokens <= 1 {
            return Some(0.0);
        }
        Some((done - first) / (self.decode_tokens - 1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub event: String,
    pub strategy: String,
    pub cmd_time: f64,
    pub ready_time: f64,
    /// `ready_time - cmd_time`.
    pub latency: f64,
    pub downtime: f64,
    /// Largest sum of used bytes over all devices while scaling.
    pub peak_mem: u64,
    /// Largest single-device usage while scaling.
    pub peak_device: u64,
    pub exec_duration: f64,
    /// Old resources released; `None` if the run ended first.
    pub commit_time: Option<f64>,
    pub from_devices: usize,
    pub to_devices: usize,
    /// Devices in both the old and the new configuration.
    pub shared_devices: Vec<DeviceId>,
    pub phases: Phases,
}

/// Where the scaling latency went, in seconds from the command.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Phases {
    pub group_init: f64,
    pub weight_transfer: f64,
    pub page_remap: f64,
    pub kv_init: f64,
    /// Waiting for an instance process beyond the weight work.
    pub instance_wait: f64,
    pub attach: f64,
    pub warmup: f64,
}

/// Tokens emitted at one iteration boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenSample {
    pub time: f64,
    pub tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub scenario: String,
    pub strategy: String,
    pub requests: Vec<RequestRecord>,
    pub scalings: Vec<ScalingRecord>,
    pub admissions: Vec<AdmissionRecord>,
    pub tokens: Vec<TokenSample>,
    pub ledger: Vec<LedgerSample>,
    pub transfers: Vec<TransferEvent>,
    pub lifecycle: Vec<LifecycleEvent>,
    pub downtime: Vec<(f64, f64)>,
    pub duplicate_disk_loads: u32,
    pub events_processed: u64,
    pub end_time: f64,
}
