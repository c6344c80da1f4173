//! Request routing, the SLO-driven load estimator and downtime accounting.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imm::InstanceId;
use crate::topology::{DeviceId, ParallelConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("{0} must be > 0")]
    NonPositive(&'static str),
    #[error("attainment_target must be in (0, 1], got {0}")]
    Target(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloPolicy {
    pub ttft_max: f64,
    pub tpot_max: f64,
    #[serde(default = "default_target")]
    pub attainment_target: f64,
    #[serde(default = "default_window")]
    pub window: f64,
    #[serde(default = "default_trigger")]
    pub trigger_consecutive: u32,
    #[serde(default = "default_scale_down_utilization")]
    pub scale_down_utilization: f64,
}

fn default_target() -> f64 {
    0.9
}
fn default_window() -> f64 {
    5.0
}
fn default_trigger() -> u32 {
    2
}
fn default_scale_down_utilization() -> f64 {
    0.5
}

impl SloPolicy {
    pub fn new(ttft_max: f64, tpot_max: f64) -> Self {
        SloPolicy {
            ttft_max,
            tpot_max,
            attainment_target: default_target(),
            window: default_window(),
            trigger_consecutive: default_trigger(),
            scale_down_utilization: default_scale_down_utilization(),
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        for (name, v) in [
            ("ttft_max", self.ttft_max),
            ("tpot_max", self.tpot_max),
            ("window", self.window),
        ] {
            if !(v > 0.0) {
                return Err(PolicyError::NonPositive(name));
            }
        }
        if self.trigger_consecutive == 0 {
            return Err(PolicyError::NonPositive("trigger_consecutive"));
        }
        if !(self.attainment_target > 0.0 && self.attainment_target <= 1.0) {
            return Err(PolicyError::Target(self.attainment_target));
        }
        Ok(())
    }

    pub fn meets(&self, ttft: f64, tpot: f64) -> bool {
        ttft <= self.ttft_max && tpot <= self.tpot_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleDirection {
    Up,
    Down,
}

/// What the estimator sees at a window boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSignal {
    /// `None` when no request could be judged in the window.
    pub attainment: Option<f64>,
    /// Mean running batch over capacity.
    pub utilization: f64,
}

/// Consecutive-window hysteresis over attainment and utilization.
#[derive(Debug, Clone)]
pub struct Estimator {
    policy: SloPolicy,
    below: u32,
    idle: u32,
}

impl Estimator {
    pub fn new(policy: SloPolicy) -> Self {
        Estimator {
            policy,
            below: 0,
            idle: 0,
        }
    }

    pub fn policy(&self) -> &SloPolicy {
        &self.policy
    }

    /// Feeds one window. Windows observed while scaling is in flight reset
    /// the counters and never fire.
    pub fn observe(
        &mut self,
        signal: WindowSignal,
        scaling_in_flight: bool,
    ) -> Option<ScaleDirection> {
        if scaling_in_flight {
            self.below = 0;
            self.idle = 0;
            return None;
        }
        let a = signal.attainment?;
        let n = self.policy.trigger_consecutive;
        if a < self.policy.attainment_target {
            self.below += 1;
            self.idle = 0;
        } else if signal.utilization < self.policy.scale_down_utilization {
            self.idle += 1;
            self.below = 0;
        } else {
            self.below = 0;
            self.idle = 0;
        }
        if self.below >= n {
            self.below = 0;
            return Some(ScaleDirection::Up);
        }
        if self.idle >= n {
            self.idle = 0;
            return Some(ScaleDirection::Down);
        }
        None
    }
}

/// Next configuration one DP step away at the same TP, laid out on the
/// front of `pool`. `None` when the step leaves the pool or reaches zero.
pub fn step_config(
    current: &ParallelConfig,
    dir: ScaleDirection,
    pool: &[DeviceId],
) -> Option<ParallelConfig> {
    let dp = match dir {
        ScaleDirection::Up => current.dp + 1,
        ScaleDirection::Down => current.dp.checked_sub(1).filter(|d| *d > 0)?,
    };
    if (dp * current.tp) as usize > pool.len() {
        return None;
    }
    Some(ParallelConfig::on_first(dp, current.tp, pool))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionRecord {
    pub request: RequestId,
    pub time: f64,
    /// `None` when the request had to wait in the pending queue.
    pub instance: Option<InstanceId>,
}

/// Who serves new requests and what is waiting.
#[derive(Debug, Clone, Default)]
pub struct RoutingState {
    pub active: Option<InstanceId>,
    pub draining: Vec<InstanceId>,
    pub pending: VecDeque<RequestId>,
    /// Intake paused on the active instance.
    pub paused: bool,
}

impl RoutingState {
    /// Instance that should take a new request now, if any.
    pub fn target(&self) -> Option<InstanceId> {
        if self.paused {
            None
        } else {
            self.active
        }
    }

    /// Queues a request for the serving instance. The record names the
    /// instance that will pull it, or `None` when nothing is taking traffic.
    pub fn route(&mut self, request: RequestId, now: f64) -> AdmissionRecord {
        self.pending.push_back(request);
        AdmissionRecord {
            request,
            time: now,
            instance: self.target(),
        }
    }

    /// Stops all intake; requests queue until the next `switch_to`.
    pub fn take_down(&mut self) -> Option<InstanceId> {
        self.paused = false;
        self.active.take()
    }

    /// Atomically points new traffic at `new`; the previous target drains.
    pub fn switch_to(&mut self, new: InstanceId) -> Option<InstanceId> {
        let old = self.active.replace(new);
        if let Some(o) = old {
            self.draining.push(o);
        }
        self.paused = false;
        old
    }
}

/// Accumulates time during which no instance is active.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DowntimeTracker {
    down_since: Option<f64>,
    intervals: Vec<(f64, f64)>,
}

impl DowntimeTracker {
    pub fn set_serving(&mut self, serving: bool, now: f64) {
        match (serving, self.down_since) {
            (false, None) => self.down_since = Some(now),
            (true, Some(t)) => {
                self.intervals.push((t, now));
                self.down_since = None;
            }
            _ => {}
        }
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Total downtime inside `[from, to]`, counting an open interval up to `to`.
    pub fn total_between(&self, from: f64, to: f64) -> f64 {
        let open = self.down_since.map(|t| (t, to));
        self.intervals
            .iter()
            .copied()
            .chain(open)
            .map(|(a, b)| (b.min(to) - a.max(from)).max(0.0))
            .fold(0.0, |acc, d| acc + d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(a: f64, u: f64) -> WindowSignal {
        WindowSignal {
            attainment: Some(a),
            utilization: u,
        }
    }

    #[test]
    fn fires_on_second_consecutive_miss() {
        let mut e = Estimator::new(SloPolicy::new(1.0, 1.0));
        assert_eq!(e.observe(sig(0.95, 0.9), false), None);
        assert_eq!(e.observe(sig(0.80, 0.9), false), None);
        assert_eq!(e.observe(sig(0.78, 0.9), false), Some(ScaleDirection::Up));
    }

    #[test]
    fn single_miss_never_fires() {
        let mut e = Estimator::new(SloPolicy::new(1.0, 1.0));
        for a in [0.5, 0.95, 0.5, 0.95, 0.5] {
            assert_eq!(e.observe(sig(a, 0.9), false), None);
        }
    }

    #[test]
    fn low_utilization_scales_down() {
        let mut e = Estimator::new(SloPolicy::new(1.0, 1.0));
        assert_eq!(e.observe(sig(0.99, 0.1), false), None);
        assert_eq!(e.observe(sig(0.97, 0.2), false), Some(ScaleDirection::Down));
    }

    #[test]
    fn no_command_while_scaling() {
        let mut e = Estimator::new(SloPolicy::new(1.0, 1.0));
        for _ in 0..5 {
            assert_eq!(e.observe(sig(0.1, 1.0), true), None);
        }
        assert_eq!(e.observe(sig(0.1, 1.0), false), None);
    }

    #[test]
    fn empty_window_is_no_signal() {
        let mut e = Estimator::new(SloPolicy::new(1.0, 1.0));
        e.observe(sig(0.5, 1.0), false);
        let empty = WindowSignal {
            attainment: None,
            utilization: 0.0,
        };
        assert_eq!(e.observe(empty, false), None);
        assert_eq!(e.observe(sig(0.5, 1.0), false), Some(ScaleDirection::Up));
    }

    #[test]
    fn step_config_moves_dp() {
        let pool: Vec<DeviceId> = (0..8).map(DeviceId).collect();
        let c = ParallelConfig::on_first(2, 2, &pool);
        assert_eq!(step_config(&c, ScaleDirection::Up, &pool).unwrap().dp, 3);
        assert_eq!(
            step_config(&c, ScaleDirection::Down, &pool)
                .unwrap()
                .num_devices(),
            2
        );
        let full = ParallelConfig::on_first(4, 2, &pool);
        assert!(step_config(&full, ScaleDirection::Up, &pool).is_none());
        let one = ParallelConfig::on_first(1, 2, &pool);
        assert!(step_config(&one, ScaleDirection::Down, &pool).is_none());
    }

    #[test]
    fn policy_validation() {
        assert!(SloPolicy::new(1.0, 1.0).validate().is_ok());
        assert!(SloPolicy::new(0.0, 1.0).validate().is_err());
        let mut p = SloPolicy::new(1.0, 1.0);
        p.attainment_target = 1.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn routing_queues_when_paused_or_down() {
        let mut r = RoutingState::default();
        assert_eq!(r.route(RequestId(0), 0.0).instance, None);
        r.switch_to(InstanceId(1));
        assert_eq!(r.route(RequestId(1), 1.0).instance, Some(InstanceId(1)));
        assert_eq!(r.pending.len(), 2);
        r.paused = true;
        assert_eq!(r.route(RequestId(2), 2.0).instance, None);
        assert_eq!(r.switch_to(InstanceId(2)), Some(InstanceId(1)));
        assert_eq!(r.draining, vec![InstanceId(1)]);
        assert!(!r.paused);
    }

    #[test]
    fn downtime_accumulates() {
        let mut d = DowntimeTracker::default();
        d.set_serving(true, 0.0);
        d.set_serving(false, 10.0);
        d.set_serving(false, 11.0);
        d.set_serving(true, 15.0);
        d.set_serving(false, 20.0);
        assert_eq!(d.total_between(0.0, 22.0), 7.0);
        assert_eq!(d.total_between(12.0, 21.0), 4.0);
        let up = DowntimeTracker::default();
        assert!(up.total_between(0.0, 5.0).is_sign_positive());
    }
}
