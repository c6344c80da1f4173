//! Scenario files and the calibration they are resolved against.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::SloPolicy;
use crate::imm::ImmCosts;
use crate::sim::perf::PerfModel;
use crate::sim::strategy::{Strategy, StrategySpec};
use crate::sim::workload::{ArrivalPattern, Workload};
use crate::topology::{validate_config, ClusterSpec, DeviceId, ModelSpec, ParallelConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("unknown model preset '{0}'")]
    UnknownModel(String),
    #[error("invalid scenario '{scenario}': {reason}")]
    Invalid { scenario: String, reason: String },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
}

/// Cluster rate constants without the device list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterRates {
    pub hbm_bytes_per_device: u64,
    pub disk_bandwidth: f64,
    pub p2p_bandwidth: f64,
    pub p2p_latency: f64,
    pub zero_copy_cost: f64,
    pub page_map_cost: f64,
    pub kv_init_seconds_per_gb: f64,
    pub group_init_cost: f64,
    pub local_copy_bandwidth: f64,
    pub min_p2p_disk_ratio: f64,
}

impl ClusterRates {
    pub fn cluster(&self, devices: u32) -> ClusterSpec {
        ClusterSpec {
            devices: (0..devices).map(DeviceId).collect(),
            hbm_bytes_per_device: self.hbm_bytes_per_device,
            disk_bandwidth: self.disk_bandwidth,
            p2p_bandwidth: self.p2p_bandwidth,
            p2p_latency: self.p2p_latency,
            zero_copy_cost: self.zero_copy_cost,
            page_map_cost: self.page_map_cost,
            kv_init_seconds_per_gb: self.kv_init_seconds_per_gb,
            group_init_cost: self.group_init_cost,
            local_copy_bandwidth: self.local_copy_bandwidth,
            min_p2p_disk_ratio: self.min_p2p_disk_ratio,
        }
    }
}

impl Default for ClusterRates {
    fn default() -> Self {
        let c = ClusterSpec::with_devices(0);
        ClusterRates {
            hbm_bytes_per_device: c.hbm_bytes_per_device,
            disk_bandwidth: c.disk_bandwidth,
            p2p_bandwidth: c.p2p_bandwidth,
            p2p_latency: c.p2p_latency,
            zero_copy_cost: c.zero_copy_cost,
            page_map_cost: c.page_map_cost,
            kv_init_seconds_per_gb: c.kv_init_seconds_per_gb,
            group_init_cost: c.group_init_cost,
            local_copy_bandwidth: c.local_copy_bandwidth,
            min_p2p_disk_ratio: c.min_p2p_disk_ratio,
        }
    }
}

/// A model with its instance start-up costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub spec: ModelSpec,
    pub preinit_cost: f64,
    pub warmup_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    /// Where each constant comes from, keyed by field path.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
    pub cluster: ClusterRates,
    pub perf: PerfModel,
    pub standby_capacity: usize,
    pub models: BTreeMap<String, ModelProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Preset(String),
    Inline(ModelProfile),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLayout {
    pub dp: u32,
    pub tp: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSpec {
    pub at: f64,
    pub dp: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepStep {
    pub from_dp: u32,
    pub to_dp: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImmOverride {
    pub preinit_cost: Option<f64>,
    pub warmup_cost: Option<f64>,
    pub standby_capacity: Option<usize>,
}

fn default_strategies() -> Vec<StrategySpec> {
    vec![StrategySpec::plain(Strategy::Elastic)]
}
fn default_true() -> bool {
    true
}
fn default_throughput_window() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub model: ModelRef,
    pub devices: u32,
    #[serde(default)]
    pub cluster: Option<ClusterRates>,
    pub initial: InitialLayout,
    #[serde(default)]
    pub commands: Vec<CommandSpec>,
    /// Let the load estimator issue dp +/- 1 commands.
    #[serde(default)]
    pub autoscale: bool,
    pub workload: Workload,
    pub slo: SloPolicy,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategySpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub perf: Option<PerfModel>,
    #[serde(default)]
    pub imm: Option<ImmOverride>,
    #[serde(default = "default_true")]
    pub pause_intake_during_scaling: bool,
    /// Instances for neighbouring and commanded configurations are already
    /// in the standby pool when the run starts.
    #[serde(default = "default_true")]
    pub preseed_standby: bool,
    /// Expands into one run per step, each with a single command.
    #[serde(default)]
    pub sweep: Vec<SweepStep>,
    #[serde(default)]
    pub sweep_command_at: Option<f64>,
    /// Expands into one run per rate, replacing the arrival pattern with a
    /// fixed rate.
    #[serde(default)]
    pub rps_sweep: Vec<f64>,
    /// Length of the before and after throughput windows.
    #[serde(default = "default_throughput_window")]
    pub throughput_window: f64,
    #[serde(default)]
    pub out: Option<String>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    /// One scenario per sweep step or rate; the scenario itself otherwise.
    pub fn expand(&self) -> Vec<Scenario> {
        let mut out = Vec::new();
        if !self.sweep.is_empty() {
            let at = self.sweep_command_at.unwrap_or(10.0);
            for s in &self.sweep {
                let mut sc = self.clone();
                sc.name = format!("{}-dp{}-to-dp{}", self.name, s.from_dp, s.to_dp);
                sc.initial.dp = s.from_dp;
                sc.commands = vec![CommandSpec { at, dp: s.to_dp }];
                sc.sweep.clear();
                out.push(sc);
            }
        } else {
            out.push(self.clone());
        }
        if self.rps_sweep.is_empty() {
            return out;
        }
        let mut rates = Vec::new();
        for base in out {
            for r in &self.rps_sweep {
                let mut sc = base.clone();
                sc.name = format!("{}-rps{}", base.name, r);
                sc.workload.arrivals = ArrivalPattern::FixedRps { rps: *r };
                sc.rps_sweep.clear();
                rates.push(sc);
            }
        }
        rates
    }

    pub fn resolve(&self, cal: &Calibration) -> Result<Resolved, ScenarioError> {
        let invalid = |reason: String| ScenarioError::Invalid {
            scenario: self.name.clone(),
            reason,
        };
        let profile = match &self.model {
            ModelRef::Preset(name) => cal
                .models
                .get(name)
                .cloned()
                .ok_or_else(|| ScenarioError::UnknownModel(name.clone()))?,
            ModelRef::Inline(p) => p.clone(),
        };
        profile
            .spec
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        let cluster = self.cluster.unwrap_or(cal.cluster).cluster(self.devices);
        cluster.validate().map_err(|e| invalid(e.to_string()))?;
        let perf = self.perf.unwrap_or(cal.perf);
        perf.validate()
            .map_err(|f| invalid(format!("perf.{f} out of range")))?;
        self.slo.validate().map_err(|e| invalid(e.to_string()))?;
        self.workload
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        let ov = self.imm.unwrap_or_default();
        let imm = ImmCosts {
            preinit_cost: ov.preinit_cost.unwrap_or(profile.preinit_cost),
            warmup_cost: ov.warmup_cost.unwrap_or(profile.warmup_cost),
            standby_capacity: ov.standby_capacity.unwrap_or(cal.standby_capacity),
        };
        if !(imm.preinit_cost >= 0.0 && imm.warmup_cost >= 0.0) {
            return Err(invalid("start-up costs must be >= 0".into()));
        }
        let tp = self.initial.tp;
        let initial = ParallelConfig::on_first(self.initial.dp, tp, &cluster.devices);
        validate_config(&initial, &cluster, &profile.spec).map_err(|e| invalid(e.to_string()))?;
        let mut commands = Vec::new();
        for c in &self.commands {
            if !(c.at >= 0.0) {
                return Err(invalid("command time must be >= 0".into()));
            }
            if c.dp == 0 || (c.dp * tp) as usize > cluster.devices.len() {
                return Err(invalid(format!(
                    "command to dp {} does not fit {} devices",
                    c.dp,
                    cluster.devices.len()
                )));
            }
            commands.push((c.at, ParallelConfig::on_first(c.dp, tp, &cluster.devices)));
        }
        commands.sort_by(|a, b| a.0.total_cmp(&b.0));
        if self.strategies.is_empty() {
            return Err(invalid("no strategies".into()));
        }
        if !(self.throughput_window > 0.0) {
            return Err(invalid("throughput_window must be > 0".into()));
        }
        Ok(Resolved {
            name: self.name.clone(),
            model: profile.spec,
            cluster,
            perf,
            imm,
            slo: self.slo,
            workload: self.workload.clone(),
            initial,
            commands,
            autoscale: self.autoscale,
            strategies: self.strategies.clone(),
            seed: self.seed,
            pause_intake: self.pause_intake_during_scaling,
            preseed_standby: self.preseed_standby,
            throughput_window: self.throughput_window,
        })
    }
}

/// A scenario with every reference looked up and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub name: String,
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub perf: PerfModel,
    pub imm: ImmCosts,
    pub slo: SloPolicy,
    pub workload: Workload,
    pub initial: ParallelConfig,
    pub commands: Vec<(f64, ParallelConfig)>,
    pub autoscale: bool,
    pub strategies: Vec<StrategySpec>,
    pub seed: u64,
    pub pause_intake: bool,
    pub preseed_standby: bool,
    pub throughput_window: f64,
}
