//! End-to-end scenarios on loopback. Each builds its topology, runs its
//! trials, tears everything down and returns a [`Report`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::report::Report;

pub mod intermittent;
pub mod ip_reconfig;
pub mod namespace;
pub mod reconfig;
pub mod video;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    Video,
    Intermittent,
    IpReconfig,
    Namespace,
    Reconfig,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 5] =
        [ScenarioName::Video, ScenarioName::Intermittent, ScenarioName::IpReconfig, ScenarioName::Namespace, ScenarioName::Reconfig];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Video => "video",
            ScenarioName::Intermittent => "intermittent",
            ScenarioName::IpReconfig => "ip_reconfig",
            ScenarioName::Namespace => "namespace",
            ScenarioName::Reconfig => "reconfig",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            ScenarioName::Video => "sequenced UDP stream through a lossy relay, tunneled or direct",
            ScenarioName::Intermittent => "file download across three links that take turns being up",
            ScenarioName::IpReconfig => "ping through a split tunnel while ingress and server move closer",
            ScenarioName::Namespace => "chunk fetches routed by namespace and balanced across producers",
            ScenarioName::Reconfig => "time from a config file edit to the proxy reporting the new version",
        }
    }

    /// Modes the scenario can run in; the first is the default.
    pub fn modes(self) -> &'static [Mode] {
        match self {
            ScenarioName::Video | ScenarioName::Intermittent => &[Mode::Overlay, Mode::Direct],
            _ => &[Mode::Overlay],
        }
    }

    pub fn default_trials(self) -> u32 {
        match self {
            ScenarioName::Intermittent => 10,
            ScenarioName::Reconfig => 5,
            _ => 1,
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = ScenarioError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioName::ALL.into_iter().find(|n| n.as_str() == s).ok_or_else(|| ScenarioError::UnknownScenario(s.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Overlay,
    Direct,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Overlay => "overlay",
            Mode::Direct => "direct",
        }
    }
}

impl FromStr for Mode {
    type Err = ScenarioError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overlay" => Ok(Mode::Overlay),
            "direct" => Ok(Mode::Direct),
            other => Err(ScenarioError::UnknownMode(other.into())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub mode: Mode,
    pub trials: u32,
    pub seed: u64,
    /// Sleep a random fraction of a rotation before each intermittent trial.
    pub phase_jitter: bool,
}

impl ScenarioSpec {
    pub fn new(name: ScenarioName) -> Self {
        Self { name, mode: name.modes()[0], trials: name.default_trials(), seed: 1, phase_jitter: true }
    }

    pub fn mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn trials(mut self, trials: u32) -> Self {
        self.trials = trials;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub(crate) fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
    #[error("scenario {0} has no {1} mode")]
    UnsupportedMode(ScenarioName, &'static str),
    #[error("setup failed: {0}")]
    Setup(#[from] std::io::Error),
}

pub async fn run_scenario(spec: &ScenarioSpec) -> Result<Report, ScenarioError> {
    if !spec.name.modes().contains(&spec.mode) {
        return Err(ScenarioError::UnsupportedMode(spec.name, spec.mode.as_str()));
    }
    let report = match spec.name {
        ScenarioName::Video => video::run(spec).await?,
        ScenarioName::Intermittent => intermittent::run(spec).await?,
        ScenarioName::IpReconfig => ip_reconfig::run(spec).await?,
        ScenarioName::Namespace => namespace::run(spec).await?,
        ScenarioName::Reconfig => reconfig::run(spec).await?,
    };
    Ok(report.finish())
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, max: std::time::Duration) -> std::time::Duration {
    max.mul_f64(rng.gen::<f64>())
}

pub(crate) fn ms(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_modes_parse() {
        for n in ScenarioName::ALL {
            assert_eq!(n.as_str().parse::<ScenarioName>().unwrap(), n);
        }
        assert!("nope".parse::<ScenarioName>().is_err());
        assert_eq!("direct".parse::<Mode>().unwrap(), Mode::Direct);
        assert_eq!(ScenarioSpec::new(ScenarioName::Intermittent).trials, 10);
    }

    #[tokio::test]
    async fn unsupported_mode_is_refused() {
        let spec = ScenarioSpec::new(ScenarioName::Namespace).mode(Mode::Direct);
        assert!(matches!(run_scenario(&spec).await, Err(ScenarioError::UnsupportedMode(..))));
    }
}
