//! Model geometry, parallel configurations and per-device weight footprints.
//!
//! The simulator models a single aggregate expert layer and a single
//! aggregate attention shard per device; layer count is folded into the
//! byte sizes.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One decimal gigabyte.
pub const GB: u64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev{}", self.0)
    }
}

/// Geometry of a MoE model as seen by the memory manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub num_experts_total: u32,
    pub experts_active_per_token: u32,
    pub bytes_per_expert: u64,
    /// Bytes of one TP shard of the non-expert weights, held by every device.
    pub attention_shard_bytes: u64,
    pub kv_bytes_per_token: u64,
    /// KV-cache tokens reserved on every device of an instance.
    pub kv_tokens_per_device: u64,
    #[serde(default = "default_pages_per_expert")]
    pub pages_per_expert: u32,
}

fn default_pages_per_expert() -> u32 {
    1
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        if self.num_experts_total == 0 {
            v.push(Violation::NonPositive("num_experts_total"));
        }
        if self.experts_active_per_token == 0 {
            v.push(Violation::NonPositive("experts_active_per_token"));
        }
        if self.bytes_per_expert == 0 {
            v.push(Violation::NonPositive("bytes_per_expert"));
        }
        if self.attention_shard_bytes == 0 {
            v.push(Violation::NonPositive("attention_shard_bytes"));
        }
        if self.kv_bytes_per_token == 0 {
            v.push(Violation::NonPositive("kv_bytes_per_token"));
        }
        if self.kv_tokens_per_device == 0 {
            v.push(Violation::NonPositive("kv_tokens_per_device"));
        }
        if self.pages_per_expert == 0 {
            v.push(Violation::NonPositive("pages_per_expert"));
        }
        if self.experts_active_per_token > self.num_experts_total {
            v.push(Violation::ActiveExceedsTotal {
                active: self.experts_active_per_token,
                total: self.num_experts_total,
            });
        }
        if self.pages_per_expert > 0
            && !self
                .bytes_per_expert
                .is_multiple_of(self.pages_per_expert as u64)
        {
            v.push(Violation::PageSplit {
                bytes_per_expert: self.bytes_per_expert,
                pages_per_expert: self.pages_per_expert,
            });
        }
        ConfigError::from_violations(v)
    }

    pub fn page_size(&self) -> u64 {
        self.bytes_per_expert / self.pages_per_expert.max(1) as u64
    }

    pub fn kv_bytes_per_device(&self) -> u64 {
        self.kv_bytes_per_token * self.kv_tokens_per_device
    }

    pub fn total_expert_bytes(&self) -> u64 {
        self.bytes_per_expert * self.num_experts_total as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub devices: Vec<DeviceId>,
    pub hbm_bytes_per_device: u64,
    /// Bytes per second.
    pub disk_bandwidth: f64,
    pub p2p_bandwidth: f64,
    /// Seconds.
    pub p2p_latency: f64,
    pub zero_copy_cost: f64,
    pub page_map_cost: f64,
    #[serde(default = "default_kv_init_rate")]
    pub kv_init_seconds_per_gb: f64,
    #[serde(default = "default_group_init_cost")]
    pub group_init_cost: f64,
    /// On-device copy bandwidth, used when regions cannot be shared.
    #[serde(default = "default_local_copy_bandwidth")]
    pub local_copy_bandwidth: f64,
    #[serde(default = "default_min_p2p_ratio")]
    pub min_p2p_disk_ratio: f64,
}

fn default_kv_init_rate() -> f64 {
    0.1
}
fn default_group_init_cost() -> f64 {
    1.0
}
fn default_local_copy_bandwidth() -> f64 {
    2.0e9
}
fn default_min_p2p_ratio() -> f64 {
    10.0
}

impl ClusterSpec {
    /// `n` devices numbered from zero with the default rate constants.
    pub fn with_devices(n: u32) -> Self {
        ClusterSpec {
            devices: (0..n).map(DeviceId).collect(),
            hbm_bytes_per_device: 64 * GB,
            disk_bandwidth: 1.0e9,
            p2p_bandwidth: 20.0e9,
            p2p_latency: 0.001,
            zero_copy_cost: 0.01,
            page_map_cost: 0.001,
            kv_init_seconds_per_gb: default_kv_init_rate(),
            group_init_cost: default_group_init_cost(),
            local_copy_bandwidth: default_local_copy_bandwidth(),
            min_p2p_disk_ratio: default_min_p2p_ratio(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        let unique: BTreeSet<_> = self.devices.iter().collect();
        if unique.len() != self.devices.len() {
            v.push(Violation::DuplicateDevice);
        }
        let rates = [
            ("hbm_bytes_per_device", self.hbm_bytes_per_device as f64),
            ("disk_bandwidth", self.disk_bandwidth),
            ("p2p_bandwidth", self.p2p_bandwidth),
            ("local_copy_bandwidth", self.local_copy_bandwidth),
        ];
        for (name, r) in rates {
            if !(r > 0.0) {
                v.push(Violation::NonPositive(name));
            }
        }
        let costs = [
            ("p2p_latency", self.p2p_latency),
            ("zero_copy_cost", self.zero_copy_cost),
            ("page_map_cost", self.page_map_cost),
            ("kv_init_seconds_per_gb", self.kv_init_seconds_per_gb),
            ("group_init_cost", self.group_init_cost),
        ];
        for (name, c) in costs {
            if !(c >= 0.0) || !c.is_finite() {
                v.push(Violation::Negative(name));
            }
        }
        if self.p2p_bandwidth < self.min_p2p_disk_ratio * self.disk_bandwidth {
            v.push(Violation::SlowP2p {
                ratio: self.p2p_bandwidth / self.disk_bandwidth,
                required: self.min_p2p_disk_ratio,
            });
        }
        ConfigError::from_violations(v)
    }

    pub fn contains(&self, d: DeviceId) -> bool {
        self.devices.contains(&d)
    }
}

/// A DP/TP/EP placement over an ordered device list.
///
/// Position `i` in `device_set` is TP rank `i % tp` of DP replica `i / tp`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub dp: u32,
    pub tp: u32,
    pub ep: u32,
    pub device_set: Vec<DeviceId>,
}

impl ParallelConfig {
    /// Builds a config with `ep = dp * tp`.
    pub fn new(dp: u32, tp: u32, device_set: Vec<DeviceId>) -> Self {
        ParallelConfig {
            dp,
            tp,
            ep: dp * tp,
            device_set,
        }
    }

    /// `dp * tp` devices taken from the front of `pool`.
    pub fn on_first(dp: u32, tp: u32, pool: &[DeviceId]) -> Self {
        let n = (dp * tp) as usize;
        Self::new(dp, tp, pool.iter().take(n).copied().collect())
    }

    pub fn num_devices(&self) -> usize {
        self.device_set.len()
    }

    pub fn position(&self, d: DeviceId) -> Option<usize> {
        self.device_set.iter().position(|x| *x == d)
    }

    pub fn tp_rank(&self, d: DeviceId) -> Option<u32> {
        self.position(d).map(|p| p as u32 % self.tp.max(1))
    }

    pub fn contains(&self, d: DeviceId) -> bool {
        self.device_set.contains(&d)
    }

    pub fn label(&self) -> String {
        format!("DP{}-TP{}-EP{}", self.dp, self.tp, self.ep)
    }
}

impl fmt::Display for ParallelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("{0} must be > 0")]
    NonPositive(&'static str),
    #[error("{0} must be a finite value >= 0")]
    Negative(&'static str),
    #[error("experts_active_per_token {active} exceeds num_experts_total {total}")]
    ActiveExceedsTotal { active: u32, total: u32 },
    #[error("bytes_per_expert {bytes_per_expert} is not divisible by pages_per_expert {pages_per_expert}")]
    PageSplit {
        bytes_per_expert: u64,
        pages_per_expert: u32,
    },
    #[error("ep {ep} != dp {dp} x tp {tp}")]
    EpMismatch { dp: u32, tp: u32, ep: u32 },
    #[error("device_set has {got} devices, dp x tp requires {want}")]
    DeviceCount { got: usize, want: usize },
    #[error("device list contains duplicates")]
    DuplicateDevice,
    #[error("device {0} is not part of the cluster")]
    UnknownDevice(DeviceId),
    #[error("weights need {need} bytes per device, hbm holds {have}")]
    WeightsExceedHbm { need: u64, have: u64 },
    #[error("p2p bandwidth is only {ratio:.2}x disk bandwidth, {required}x required")]
    SlowP2p { ratio: f64, required: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid configuration: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ConfigError(pub Vec<Violation>);

impl ConfigError {
    fn from_violations(v: Vec<Violation>) -> Result<(), ConfigError> {
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(v))
        }
    }
}

/// Checks a parallel config against the cluster inventory and the model size.
pub fn validate_config(
    cfg: &ParallelConfig,
    cluster: &ClusterSpec,
    model: &ModelSpec,
) -> Result<(), ConfigError> {
    let mut v = Vec::new();
    if cfg.dp == 0 {
        v.push(Violation::NonPositive("dp"));
    }
    if cfg.tp == 0 {
        v.push(Violation::NonPositive("tp"));
    }
    if cfg.ep != cfg.dp * cfg.tp {
        v.push(Violation::EpMismatch {
            dp: cfg.dp,
            tp: cfg.tp,
            ep: cfg.ep,
        });
    }
    let want = (cfg.dp * cfg.tp) as usize;
    if cfg.device_set.len() != want {
        v.push(Violation::DeviceCount {
            got: cfg.device_set.len(),
            want,
        });
    }
    let unique: BTreeSet<_> = cfg.device_set.iter().collect();
    if unique.len() != cfg.device_set.len() {
        v.push(Violation::DuplicateDevice);
    }
    for d in &cfg.device_set {
        if !cluster.contains(*d) {
            v.push(Violation::UnknownDevice(*d));
        }
    }
    if cfg.ep > 0 {
        let need = weights_per_device(model, cfg);
        if need > cluster.hbm_bytes_per_device {
            v.push(Violation::WeightsExceedHbm {
                need,
                have: cluster.hbm_bytes_per_device,
            });
        }
    }
    ConfigError::from_violations(v)
}

/// Per-rank expert counts: sums to `experts`, spread at most one apart, with
/// the surplus going to the lowest ranks.
pub fn balanced_quota(experts: u32, ep: u32) -> Vec<u32> {
    assert!(ep >= 1, "ep must be at least 1");
    let base = experts / ep;
    let extra = experts % ep;
    (0..ep).map(|r| base + u32::from(r < extra)).collect()
}

/// Largest per-device weight footprint of `cfg`.
pub fn weights_per_device(model: &ModelSpec, cfg: &ParallelConfig) -> u64 {
    let ep = cfg.ep.max(1) as u64;
    let max_quota = (model.num_experts_total as u64).div_ceil(ep);
    model.attention_shard_bytes + max_quota * model.bytes_per_expert
}

/// Expert to device assignment. Index is the expert id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertPlacement {
    pub assignment: Vec<DeviceId>,
}

impl ExpertPlacement {
    /// Contiguous blocks in device order, sized by [`balanced_quota`].
    pub fn contiguous(experts: u32, cfg: &ParallelConfig) -> Self {
        let quota = balanced_quota(experts, cfg.device_set.len() as u32);
        let mut assignment = Vec::with_capacity(experts as usize);
        for (dev, q) in cfg.device_set.iter().zip(quota) {
            assignment.extend(std::iter::repeat_n(*dev, q as usize));
        }
        ExpertPlacement { assignment }
    }

    pub fn num_experts(&self) -> u32 {
        self.assignment.len() as u32
    }

    pub fn device_of(&self, expert: u32) -> DeviceId {
        self.assignment[expert as usize]
    }

    /// Experts on `dev`, ascending.
    pub fn experts_on(&self, dev: DeviceId) -> Vec<u32> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == dev)
            .map(|(e, _)| e as u32)
            .collect()
    }

    pub fn count_on(&self, dev: DeviceId) -> u32 {
        self.assignment.iter().filter(|d| **d == dev).count() as u32
    }

    /// True when every expert sits on a device of `cfg` and the per-device
    /// counts match the balanced quota for that device's position.
    pub fn is_balanced_for(&self, cfg: &ParallelConfig) -> bool {
        if self.assignment.iter().any(|d| !cfg.contains(*d)) {
            return false;
        }
        let quota = balanced_quota(self.num_experts(), cfg.device_set.len() as u32);
        cfg.device_set
            .iter()
            .zip(quota)
            .all(|(d, q)| self.count_on(*d) == q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MB: u64 = 1_000_000;

    fn devs(n: u32) -> Vec<DeviceId> {
        (0..n).map(DeviceId).collect()
    }

    fn tiny_model(experts: u32) -> ModelSpec {
        ModelSpec {
            name: "tiny".into(),
            num_experts_total: experts,
            experts_active_per_token: 1,
            bytes_per_expert: MB,
            attention_shard_bytes: 64 * MB,
            kv_bytes_per_token: 1,
            kv_tokens_per_device: 1,
            pages_per_expert: 1,
        }
    }

    #[test]
    fn validate_dp2_tp2_ep4() {
        let cluster = ClusterSpec::with_devices(4);
        let cfg = ParallelConfig::new(2, 2, devs(4));
        assert!(validate_config(&cfg, &cluster, &tiny_model(64)).is_ok());
    }

    #[test]
    fn validate_rejects_ep_mismatch() {
        let cluster = ClusterSpec::with_devices(8);
        let cfg = ParallelConfig {
            dp: 3,
            tp: 2,
            ep: 4,
            device_set: devs(6),
        };
        let err = validate_config(&cfg, &cluster, &tiny_model(64)).unwrap_err();
        assert!(err.0.contains(&Violation::EpMismatch {
            dp: 3,
            tp: 2,
            ep: 4
        }));
    }

    #[test]
    fn validate_single_device() {
        let cluster = ClusterSpec::with_devices(1);
        let cfg = ParallelConfig::new(1, 1, devs(1));
        assert!(validate_config(&cfg, &cluster, &tiny_model(4)).is_ok());
    }

    #[test]
    fn validate_reports_every_violation() {
        let cluster = ClusterSpec::with_devices(2);
        let cfg = ParallelConfig {
            dp: 2,
            tp: 2,
            ep: 3,
            device_set: vec![DeviceId(0), DeviceId(0), DeviceId(7)],
        };
        let err = validate_config(&cfg, &cluster, &tiny_model(4)).unwrap_err();
        assert_eq!(err.0.len(), 4, "{err}");
    }

    #[test]
    fn validate_rejects_oversized_weights() {
        let mut cluster = ClusterSpec::with_devices(1);
        cluster.hbm_bytes_per_device = 10 * MB;
        let cfg = ParallelConfig::new(1, 1, devs(1));
        let err = validate_config(&cfg, &cluster, &tiny_model(4)).unwrap_err();
        assert!(matches!(err.0[0], Violation::WeightsExceedHbm { .. }));
    }

    #[test]
    fn quota_examples() {
        assert_eq!(balanced_quota(64, 4), vec![16; 4]);
        assert_eq!(balanced_quota(64, 6), vec![11, 11, 11, 11, 10, 10]);
        assert_eq!(balanced_quota(12, 6), vec![2; 6]);
        assert_eq!(balanced_quota(3, 5), vec![1, 1, 1, 0, 0]);
    }

    #[test]
    fn weights_examples() {
        let m = tiny_model(64);
        assert_eq!(
            weights_per_device(&m, &ParallelConfig::new(2, 2, devs(4))),
            80 * MB
        );
        assert_eq!(
            weights_per_device(&m, &ParallelConfig::new(4, 2, devs(8))),
            72 * MB
        );
        let mut zero = tiny_model(1);
        zero.bytes_per_expert = 0;
        assert_eq!(
            weights_per_device(&zero, &ParallelConfig::new(1, 1, devs(1))),
            zero.attention_shard_bytes
        );
    }

    #[test]
    fn model_validation() {
        assert!(tiny_model(8).validate().is_ok());
        let mut m = tiny_model(4);
        m.experts_active_per_token = 5;
        m.pages_per_expert = 3;
        assert_eq!(m.validate().unwrap_err().0.len(), 2);
    }

    #[test]
    fn cluster_requires_fast_p2p() {
        let mut c = ClusterSpec::with_devices(2);
        assert!(c.validate().is_ok());
        c.p2p_bandwidth = 5.0 * c.disk_bandwidth;
        assert!(c.validate().is_err());
    }

    #[test]
    fn contiguous_placement_is_balanced() {
        let cfg = ParallelConfig::new(3, 2, devs(6));
        let p = ExpertPlacement::contiguous(64, &cfg);
        assert!(p.is_balanced_for(&cfg));
        assert_eq!(p.experts_on(DeviceId(0)), (0..11).collect::<Vec<_>>());
        assert_eq!(p.experts_on(DeviceId(5)), (54..64).collect::<Vec<_>>());
    }

    /// Exhaustive over small device counts: the validator accepts exactly the
    /// configurations satisfying the invariants.
    #[test]
    fn validate_matches_invariants_exhaustively() {
        let cluster = ClusterSpec::with_devices(8);
        let model = tiny_model(16);
        for dp in 0..=4u32 {
            for tp in 0..=4u32 {
                for ep in 0..=8u32 {
                    for n in 0..=8u32 {
                        for shift in [0u32, 1] {
                            let set: Vec<DeviceId> = (shift..shift + n).map(DeviceId).collect();
                            let cfg = ParallelConfig {
                                dp,
                                tp,
                                ep,
                                device_set: set.clone(),
                            };
                            let expected = dp > 0
                                && tp > 0
                                && ep == dp * tp
                                && set.len() as u32 == dp * tp
                                && set.iter().all(|d| d.0 < 8);
                            assert_eq!(
                                validate_config(&cfg, &cluster, &model).is_ok(),
                                expected,
                                "{cfg:?}"
                            );
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn quota_is_balanced(e in 0u32..=512, ep in 1u32..=64) {
            let q = balanced_quota(e, ep);
            prop_assert_eq!(q.len() as u32, ep);
            prop_assert_eq!(q.iter().sum::<u32>(), e);
            let max = *q.iter().max().unwrap();
            let min = *q.iter().min().unwrap();
            prop_assert!(max - min <= 1);
            prop_assert!(q.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn weights_non_increasing_in_ep(e in 1u32..=256, tp in 1u32..=4, dp in 1u32..=8) {
            let m = tiny_model(e);
            let a = weights_per_device(&m, &ParallelConfig::new(dp, tp, devs(dp * tp)));
            let b = weights_per_device(&m, &ParallelConfig::new(dp + 1, tp, devs((dp + 1) * tp)));
            prop_assert!(b <= a);
        }
    }
}
