//! Iteration timing for a continuously batched instance.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerfModel {
    /// Prompt tokens per second per DP replica.
    pub prefill_rate_per_dp: f64,
    /// Decode step time at zero load.
    pub decode_step_time: f64,
    /// Relative step-time growth per running request per device.
    pub batch_slowdown: f64,
    pub max_batch_per_device: u32,
    /// Step-time multiplier for instances sharing devices with another
    /// instance's weights.
    #[serde(default = "default_interference")]
    pub colocated_interference: f64,
}

fn default_interference() -> f64 {
    1.3
}

impl Default for PerfModel {
    fn default() -> Self {
        PerfModel {
            prefill_rate_per_dp: 8000.0,
            decode_step_time: 0.015,
            batch_slowdown: 0.1,
            max_batch_per_device: 12,
            colocated_interference: default_interference(),
        }
    }
}

impl PerfModel {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.prefill_rate_per_dp > 0.0) {
            return Err("prefill_rate_per_dp");
        }
        if !(self.decode_step_time > 0.0) {
            return Err("decode_step_time");
        }
        if !(self.batch_slowdown >= 0.0) {
            return Err("batch_slowdown");
        }
        if self.max_batch_per_device == 0 {
            return Err("max_batch_per_device");
        }
        if !(self.colocated_interference >= 1.0) {
            return Err("colocated_interference");
        }
        Ok(())
    }

    /// Concurrent requests an instance on `devices` devices can hold.
    pub fn capacity(&self, devices: usize, reduced_kv: bool) -> usize {
        let full = self.max_batch_per_device as usize * devices;
        if reduced_kv {
            full / 2
        } else {
            full
        }
    }

    pub fn prefill_time(&self, tokens: u64, dp: u32) -> f64 {
        tokens as f64 / (self.prefill_rate_per_dp * dp.max(1) as f64)
    }

    /// One decode step for `batch` running requests; zero when idle.
    pub fn decode_step(&self, batch: usize, devices: usize) -> f64 {
        if batch == 0 {
            return 0.0;
        }
        self.decode_step_time * (1.0 + self.batch_slowdown * batch as f64 / devices.max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idle_batch_has_no_step() {
        assert_eq!(PerfModel::default().decode_step(0, 4), 0.0);
    }

    #[test]
    fn more_devices_faster_step() {
        let p = PerfModel::default();
        for b in 1..64 {
            assert!(p.decode_step(b, 8) < p.decode_step(b, 4));
        }
    }

    #[test]
    fn reduced_kv_halves_capacity() {
        let p = PerfModel::default();
        assert_eq!(p.capacity(6, true) * 2, p.capacity(6, false));
    }

    #[test]
    fn prefill_scales_with_dp() {
        let p = PerfModel::default();
        assert_eq!(p.prefill_time(16000, 2), 1.0);
    }
}
