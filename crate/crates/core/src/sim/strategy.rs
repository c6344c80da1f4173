//! Scaling strategies and the cumulative ablation ladder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Elastic,
    ColdRestart,
    Extravagant,
    Colocated,
    Horizontal,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Elastic,
        Strategy::ColdRestart,
        Strategy::Extravagant,
        Strategy::Colocated,
        Strategy::Horizontal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Elastic => "elastic",
            Strategy::ColdRestart => "cold-restart",
            Strategy::Extravagant => "extravagant",
            Strategy::Colocated => "colocated",
            Strategy::Horizontal => "horizontal",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AblationFlags {
    pub disable_ipc_alloc: bool,
    pub disable_p2p: bool,
    pub disable_preinit: bool,
    pub disable_zero_copy: bool,
}

impl AblationFlags {
    /// The first `level` components switched off, in ladder order.
    pub fn cumulative(level: usize) -> Self {
        AblationFlags {
            disable_ipc_alloc: level >= 1,
            disable_p2p: level >= 2,
            disable_preinit: level >= 3,
            disable_zero_copy: level >= 4,
        }
    }

    pub fn level(self) -> Option<usize> {
        (0..=4).find(|l| AblationFlags::cumulative(*l) == self)
    }
}

const LADDER_SUFFIX: [&str; 5] = [
    "",
    "-ipc",
    "-ipc-p2p",
    "-ipc-p2p-preinit",
    "-ipc-p2p-preinit-zerocopy",
];

/// A strategy with its ablation flags. Ablations apply to Elastic only and
/// must be cumulative; they are written `elastic-ipc`, `elastic-ipc-p2p`
/// and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StrategySpec {
    pub strategy: Strategy,
    pub flags: AblationFlags,
}

impl StrategySpec {
    pub fn plain(strategy: Strategy) -> Self {
        StrategySpec {
            strategy,
            flags: AblationFlags::default(),
        }
    }

    pub fn ablation(level: usize) -> Self {
        StrategySpec {
            strategy: Strategy::Elastic,
            flags: AblationFlags::cumulative(level),
        }
    }

    pub fn ladder() -> Vec<StrategySpec> {
        (0..=4).map(StrategySpec::ablation).collect()
    }

    /// Row label used in ablation tables.
    pub fn ablation_label(&self) -> String {
        match self.flags.level() {
            Some(0) | None => "full".to_string(),
            Some(l) => LADDER_SUFFIX[l].replace('-', " -").trim().to_string(),
        }
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let suffix = self.flags.level().map_or("", |l| LADDER_SUFFIX[l]);
        write!(f, "{}{}", self.strategy.name(), suffix)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown strategy '{0}'")]
pub struct UnknownStrategy(pub String);

impl FromStr for StrategySpec {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        for strategy in Strategy::ALL {
            if s == strategy.name() {
                return Ok(StrategySpec::plain(strategy));
            }
        }
        for (level, suffix) in LADDER_SUFFIX.iter().enumerate().skip(1) {
            if s == format!("elastic{suffix}") {
                return Ok(StrategySpec::ablation(level));
            }
        }
        Err(UnknownStrategy(s.to_string()))
    }
}

impl Serialize for StrategySpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StrategySpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        let mut all: Vec<StrategySpec> = Strategy::ALL
            .iter()
            .map(|s| StrategySpec::plain(*s))
            .collect();
        all.extend(StrategySpec::ladder());
        for s in all {
            assert_eq!(s.to_string().parse::<StrategySpec>().unwrap(), s);
        }
        assert!("elastic-p2p".parse::<StrategySpec>().is_err());
    }

    #[test]
    fn ladder_is_cumulative() {
        let l = StrategySpec::ladder();
        assert_eq!(l[0], StrategySpec::plain(Strategy::Elastic));
        assert!(l[4].flags.disable_ipc_alloc && l[4].flags.disable_zero_copy);
        assert_eq!(l[2].ablation_label(), "-ipc -p2p");
        assert_eq!(l[0].ablation_label(), "full");
    }
}
