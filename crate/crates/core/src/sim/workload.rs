//! Seeded request traces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::RequestId;

const ARRIVAL_STREAM: u64 = 1;
const TOKEN_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("{0} must be > 0")]
    NonPositive(&'static str),
    #[error("{0} must be >= 0")]
    Negative(&'static str),
    #[error("token range [{min}, {max}] is empty")]
    EmptyRange { min: u32, max: u32 },
    #[error("rate table times must be strictly increasing")]
    UnorderedTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSegment {
    /// Segment ends here; the last one is extended to the trace duration.
    pub until: f64,
    pub rps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatePoint {
    pub t: f64,
    pub rps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArrivalPattern {
    FixedRps {
        rps: f64,
    },
    /// Piecewise-constant rate.
    VariableRps {
        segments: Vec<RateSegment>,
    },
    /// Rate interpolated linearly between table points.
    Patterned {
        points: Vec<RatePoint>,
    },
    /// All requests present at time zero.
    Offline {
        count: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum TokenDist {
    Fixed(u32),
    /// Inclusive on both ends.
    Uniform {
        min: u32,
        max: u32,
    },
}

impl TokenDist {
    fn validate(&self, name: &'static str) -> Result<(), WorkloadError> {
        match *self {
            TokenDist::Fixed(0) => Err(WorkloadError::NonPositive(name)),
            TokenDist::Uniform { min, max } if min > max => {
                Err(WorkloadError::EmptyRange { min, max })
            }
            TokenDist::Uniform { min: 0, .. } => Err(WorkloadError::NonPositive(name)),
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        match *self {
            TokenDist::Fixed(v) => v,
            TokenDist::Uniform { min, max } => rng.random_range(min..=max),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            TokenDist::Fixed(v) => v as f64,
            TokenDist::Uniform { min, max } => (min as f64 + max as f64) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub arrivals: ArrivalPattern,
    pub prefill_tokens: TokenDist,
    pub decode_tokens: TokenDist,
    /// No arrivals at or after this time.
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival: f64,
    pub prefill_tokens: u32,
    pub decode_tokens: u32,
}

impl Workload {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.duration >= 0.0) {
            return Err(WorkloadError::Negative("duration"));
        }
        self.prefill_tokens.validate("prefill_tokens")?;
        self.decode_tokens.validate("decode_tokens")?;
        match &self.arrivals {
            ArrivalPattern::FixedRps { rps } if !(*rps >= 0.0) => {
                Err(WorkloadError::Negative("rps"))
            }
            ArrivalPattern::VariableRps { segments } => {
                if segments.iter().any(|s| !(s.rps >= 0.0)) {
                    return Err(WorkloadError::Negative("rps"));
                }
                if segments.windows(2).any(|w| w[0].until >= w[1].until) {
                    return Err(WorkloadError::UnorderedTable);
                }
                Ok(())
            }
            ArrivalPattern::Patterned { points } => {
                if points.is_empty() {
                    return Err(WorkloadError::NonPositive("points"));
                }
                if points.iter().any(|p| !(p.rps >= 0.0)) {
                    return Err(WorkloadError::Negative("rps"));
                }
                if points.windows(2).any(|w| w[0].t >= w[1].t) {
                    return Err(WorkloadError::UnorderedTable);
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Instantaneous arrival rate at `t`.
    pub fn rate_at(&self, t: f64) -> f64 {
        match &self.arrivals {
            ArrivalPattern::FixedRps { rps } => *rps,
            ArrivalPattern::VariableRps { segments } => segments
                .iter()
                .find(|s| t < s.until)
                .or(segments.last())
                .map_or(0.0, |s| s.rps),
            ArrivalPattern::Patterned { points } => interpolate(points, t),
            ArrivalPattern::Offline { .. } => 0.0,
        }
    }

    /// Generates the trace. Arrival times and token counts come from
    /// separate streams of the same seed.
    pub fn generate(&self, seed: u64) -> Vec<Request> {
        let mut arrivals_rng = ChaCha8Rng::seed_from_u64(seed);
        arrivals_rng.set_stream(ARRIVAL_STREAM);
        let mut tokens_rng = ChaCha8Rng::seed_from_u64(seed);
        tokens_rng.set_stream(TOKEN_STREAM);

        let times = match &self.arrivals {
            ArrivalPattern::Offline { count } => vec![0.0; *count as usize],
            ArrivalPattern::FixedRps { rps } => {
                poisson(&mut arrivals_rng, 0.0, self.duration, *rps)
            }
            ArrivalPattern::VariableRps { segments } => {
                let mut out = Vec::new();
                let mut start = 0.0;
                for (i, s) in segments.iter().enumerate() {
                    let end = if i + 1 == segments.len() {
                        self.duration
                    } else {
                        s.until.min(self.duration)
                    };
                    if end > start {
                        out.extend(poisson(&mut arrivals_rng, start, end, s.rps));
                    }
                    start = start.max(end);
                }
                out
            }
            ArrivalPattern::Patterned { points } => {
                let peak = points.iter().map(|p| p.rps).fold(0.0, f64::max);
                poisson(&mut arrivals_rng, 0.0, self.duration, peak)
                    .into_iter()
                    .filter(|t| arrivals_rng.random::<f64>() * peak < interpolate(points, *t))
                    .collect()
            }
        };
        times
            .into_iter()
            .enumerate()
            .map(|(i, arrival)| Request {
                id: RequestId(i as u64),
                arrival,
                prefill_tokens: self.prefill_tokens.sample(&mut tokens_rng),
                decode_tokens: self.decode_tokens.sample(&mut tokens_rng),
            })
            .collect()
    }
}

fn interpolate(points: &[RatePoint], t: f64) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    if t <= first.t {
        return first.rps;
    }
    for w in points.windows(2) {
        if t < w[1].t {
            let f = (t - w[0].t) / (w[1].t - w[0].t);
            return w[0].rps + f * (w[1].rps - w[0].rps);
        }
    }
    points.last().map_or(0.0, |p| p.rps)
}

fn poisson(rng: &mut ChaCha8Rng, start: f64, end: f64, rps: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if rps <= 0.0 {
        return out;
    }
    let exp = Exp::new(rps).expect("positive rate");
    let mut t = start;
    loop {
        t += exp.sample(rng);
        if t >= end {
            return out;
        }
        out.push(t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(rps: f64, duration: f64) -> Workload {
        Workload {
            arrivals: ArrivalPattern::FixedRps { rps },
            prefill_tokens: TokenDist::Fixed(500),
            decode_tokens: TokenDist::Uniform { min: 250, max: 500 },
            duration,
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let w = fixed(5.0, 100.0);
        assert_eq!(w.generate(7), w.generate(7));
        assert_ne!(w.generate(7), w.generate(8));
    }

    #[test]
    fn rate_is_roughly_right() {
        let n = fixed(5.0, 2000.0).generate(1).len() as f64;
        assert!((n / 2000.0 - 5.0).abs() < 0.3, "{n}");
    }

    #[test]
    fn token_stream_is_independent_of_rate() {
        let a = fixed(2.0, 100.0).generate(3);
        let b = fixed(4.0, 100.0).generate(3);
        let n = a.len().min(b.len());
        for i in 0..n {
            assert_eq!(a[i].decode_tokens, b[i].decode_tokens);
        }
    }

    #[test]
    fn tokens_within_bounds() {
        for r in fixed(10.0, 50.0).generate(2) {
            assert_eq!(r.prefill_tokens, 500);
            assert!((250..=500).contains(&r.decode_tokens));
        }
    }

    #[test]
    fn variable_segments() {
        let w = Workload {
            arrivals: ArrivalPattern::VariableRps {
                segments: vec![
                    RateSegment {
                        until: 100.0,
                        rps: 0.0,
                    },
                    RateSegment {
                        until: 200.0,
                        rps: 10.0,
                    },
                ],
            },
            ..fixed(0.0, 200.0)
        };
        let trace = w.generate(5);
        assert!(trace
            .iter()
            .all(|r| r.arrival >= 100.0 && r.arrival < 200.0));
        assert!(trace.len() > 800);
        assert_eq!(w.rate_at(50.0), 0.0);
        assert_eq!(w.rate_at(150.0), 10.0);
    }

    #[test]
    fn patterned_follows_table() {
        let w = Workload {
            arrivals: ArrivalPattern::Patterned {
                points: vec![
                    RatePoint { t: 0.0, rps: 0.0 },
                    RatePoint {
                        t: 1000.0,
                        rps: 10.0,
                    },
                ],
            },
            ..fixed(0.0, 1000.0)
        };
        let trace = w.generate(9);
        let early = trace.iter().filter(|r| r.arrival < 500.0).count() as f64;
        let late = trace.len() as f64 - early;
        assert!(late > 2.5 * early, "{early} {late}");
        assert_eq!(w.rate_at(500.0), 5.0);
    }

    #[test]
    fn offline_all_at_zero() {
        let w = Workload {
            arrivals: ArrivalPattern::Offline { count: 10 },
            ..fixed(0.0, 0.0)
        };
        let t = w.generate(1);
        assert_eq!(t.len(), 10);
        assert!(t.iter().all(|r| r.arrival == 0.0));
    }

    #[test]
    fn validation() {
        assert!(fixed(1.0, 1.0).validate().is_ok());
        let mut w = fixed(1.0, 1.0);
        w.decode_tokens = TokenDist::Uniform { min: 5, max: 4 };
        assert!(w.validate().is_err());
        w.decode_tokens = TokenDist::Fixed(0);
        assert!(w.validate().is_err());
    }
}
