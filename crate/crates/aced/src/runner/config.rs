//! Experiment configuration: JSON in, fully resolved struct out.
//!
//! Unknown keys are rejected, missing keys fall back to the defaults below,
//! and the resolved form is echoed into the run's output directory so a run
//! is reproducible from its artifacts alone.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agents::{AgentKind, AgentOptions, Support};
use crate::arbitration::ArbitrationConfig;
use crate::env::{BlockSchedule, BlockSpec, EnvFamily};
use crate::error::{Error, Result};
use crate::replay::{SamplingConfig, TopKCriterion};

pub const CONFIG_VERSION: u32 = 1;

/// How actions are selected during training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunMode {
    /// Reliability-weighted arbitration over the ensemble.
    Aced,
    /// One uniformly drawn agent's greedy action per step.
    RandomArbitration,
    /// Equal weights on every agent.
    UniformWeights,
    /// A single agent of the given kind.
    SingleAgent(AgentKind),
}

impl RunMode {
    pub fn as_string(&self) -> String {
        match self {
            RunMode::Aced => "aced".into(),
            RunMode::RandomArbitration => "random-arbitration".into(),
            RunMode::UniformWeights => "uniform-weights".into(),
            RunMode::SingleAgent(kind) => format!("single-agent:{kind}"),
        }
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aced" => Ok(RunMode::Aced),
            "random-arbitration" => Ok(RunMode::RandomArbitration),
            "uniform-weights" => Ok(RunMode::UniformWeights),
            _ => {
                if let Some(kind) = s.strip_prefix("single-agent:") {
                    Ok(RunMode::SingleAgent(kind.parse()?))
                } else {
                    Err(Error::Config(format!(
                        "mode: unknown value {s:?} (expected aced, random-arbitration, \
                         uniform-weights, or single-agent:<kind>)"
                    )))
                }
            }
        }
    }
}

impl Serialize for RunMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_string())
    }
}

impl<'de> Deserialize<'de> for RunMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(|e| {
            serde::de::Error::custom(match e {
                Error::Config(msg) => msg,
                other => other.to_string(),
            })
        })
    }
}

/// Fully resolved experiment parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub env: EnvFamily,
    pub schedule: Vec<BlockSpec>,
    pub roster: Vec<AgentKind>,
    pub mode: RunMode,

    // Arbitration.
    pub temperature_act: f64,
    pub momentum: f64,
    pub r_min: f64,
    pub r_max: f64,

    // Replay and sampling.
    pub replay_capacity: usize,
    pub presample_size: usize,
    pub batch_size: usize,
    pub temperature_samp: f64,
    pub priority_exponent: f64,
    pub is_exponent: f64,
    pub priority_floor: f64,
    pub n_step: u32,
    pub top_k_criterion: TopKCriterion,

    // Learning.
    pub discount: f64,
    pub step_size: f64,
    pub sync_period: u32,
    pub v_min: f64,
    pub v_max: f64,
    pub n_atoms: usize,
    pub rescale_alpha: f64,
    /// Auto mode tracks the ratio of the ensemble's scalar losses to the
    /// distributional agent's, overriding `rescale_alpha`.
    pub rescale_alpha_auto: bool,
    pub noisy_sigma_init: f64,
    pub reward_clipping: bool,

    // Loop control.
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub train_interval: u64,
    pub eval_episodes: u32,
    pub evals_per_block: u32,
    pub log_stride: u64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            env: EnvFamily::CollectGrid,
            schedule: BlockSchedule::default_with_block_length(20_000).blocks,
            roster: AgentKind::ALL.to_vec(),
            mode: RunMode::Aced,
            temperature_act: 0.3,
            momentum: 0.6,
            r_min: 0.2,
            r_max: 0.5,
            replay_capacity: 50_000,
            presample_size: 160,
            batch_size: 32,
            temperature_samp: 0.8,
            priority_exponent: 0.5,
            is_exponent: 0.4,
            priority_floor: 1e-6,
            n_step: 3,
            top_k_criterion: TopKCriterion::Reliability,
            discount: 0.99,
            step_size: 0.1,
            sync_period: 500,
            v_min: -10.0,
            v_max: 10.0,
            n_atoms: 51,
            rescale_alpha: 1.0,
            rescale_alpha_auto: false,
            noisy_sigma_init: 0.5,
            reward_clipping: true,
            total_steps: 100_000,
            warmup_steps: 2_000,
            train_interval: 1,
            eval_episodes: 30,
            evals_per_block: 2,
            log_stride: 100,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Resolves a mode-consistent roster: single-agent modes collapse the
    /// roster to that one kind.
    pub fn resolve(mut self) -> Result<Self> {
        if let RunMode::SingleAgent(kind) = self.mode {
            self.roster = vec![kind];
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version: expected {CONFIG_VERSION}, got {}",
                self.version
            )));
        }
        if self.roster.is_empty() {
            return Err(Error::Config("roster: must not be empty".into()));
        }
        let mut sorted = self.roster.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.roster.len() {
            return Err(Error::Config("roster: duplicate agent kinds".into()));
        }
        let schedule = BlockSchedule {
            blocks: self.schedule.clone(),
        };
        schedule
            .validate()
            .map_err(|e| Error::Config(format!("schedule: {e}")))?;
        if self.total_steps < schedule.total_steps() {
            return Err(Error::Config(format!(
                "total_steps: {} is shorter than the schedule total {}",
                self.total_steps,
                schedule.total_steps()
            )));
        }
        self.arbitration_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.sampling_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.replay_capacity == 0 {
            return Err(Error::Config("replay_capacity: must be positive".into()));
        }
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(
                "warmup_steps: must be in [1, total_steps)".into(),
            ));
        }
        if self.train_interval == 0 {
            return Err(Error::Config("train_interval: must be positive".into()));
        }
        if self.log_stride == 0 {
            return Err(Error::Config("log_stride: must be positive".into()));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::Config("step_size: must lie in (0, 1]".into()));
        }
        if self.sync_period == 0 {
            return Err(Error::Config("sync_period: must be positive".into()));
        }
        if !(self.rescale_alpha > 0.0) {
            return Err(Error::Config("rescale_alpha: must be positive".into()));
        }
        Support::new(self.v_min, self.v_max, self.n_atoms)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn arbitration_config(&self) -> ArbitrationConfig {
        ArbitrationConfig {
            temperature_act: self.temperature_act,
            momentum: self.momentum,
            r_min: self.r_min,
            r_max: self.r_max,
            n_agents: self.roster.len(),
        }
    }

    pub fn sampling_config(&self) -> SamplingConfig {
        SamplingConfig {
            presample_size: self.presample_size,
            batch_size: self.batch_size,
            temperature_samp: self.temperature_samp,
            priority_exponent: self.priority_exponent,
            is_exponent: self.is_exponent,
            priority_floor: self.priority_floor,
            n_step: self.n_step,
            discount: self.discount,
            top_k_criterion: self.top_k_criterion,
        }
    }

    pub fn agent_options(&self) -> AgentOptions {
        AgentOptions {
            sync_period: self.sync_period,
            step_size: self.step_size,
            support: Support {
                v_min: self.v_min,
                v_max: self.v_max,
                n_atoms: self.n_atoms,
            },
            rescale_alpha: self.rescale_alpha,
            noisy_sigma_init: self.noisy_sigma_init,
            noisy_sigma_frozen: false,
        }
    }

    pub fn block_schedule(&self) -> BlockSchedule {
        BlockSchedule {
            blocks: self.schedule.clone(),
        }
    }
}

/// Parses, defaults, and validates a JSON config.
pub fn load_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.resolve()
}

/// Canonical serialized form of a resolved config.
pub fn config_to_json(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_yields_paper_defaults() {
        let cfg = load_config("{}").unwrap();
        assert_eq!(cfg.temperature_act, 0.3);
        assert_eq!(cfg.temperature_samp, 0.8);
        assert!(cfg.temperature_act < cfg.temperature_samp);
        assert_eq!(cfg.momentum, 0.6);
        assert_eq!(cfg.r_min, 0.2);
        assert_eq!(cfg.r_max, 0.5);
        assert_eq!(cfg.discount, 0.99);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.n_step, 3);
        assert_eq!(cfg.priority_exponent, 0.5);
        assert_eq!(cfg.is_exponent, 0.4);
        assert_eq!(cfg.n_atoms, 51);
        assert_eq!(cfg.v_min, -10.0);
        assert_eq!(cfg.v_max, 10.0);
        assert_eq!(cfg.noisy_sigma_init, 0.5);
        assert_eq!(cfg.roster.len(), 5);
        assert_eq!(cfg.schedule.len(), 5);
        assert_eq!(cfg.schedule[1], cfg.schedule[3]);
        assert_eq!(cfg.presample_size, 5 * cfg.batch_size as usize);
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let err = load_config(r#"{"modee": "aced"}"#).unwrap_err();
        assert!(err.to_string().contains("modee"), "{err}");
    }

    #[test]
    fn bogus_mode_is_named_in_the_error() {
        let err = load_config(r#"{"mode": "bogus"}"#).unwrap_err();
        assert!(err.to_string().contains("mode"), "{err}");
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn roundtrip_is_idempotent() {
        let cfg = load_config(r#"{"mode": "single-agent:noisy", "seed": 9}"#).unwrap();
        let json = config_to_json(&cfg);
        let cfg2 = load_config(&json).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(config_to_json(&cfg2), json);
    }

    #[test]
    fn single_agent_mode_collapses_roster() {
        let cfg = load_config(r#"{"mode": "single-agent:standard"}"#).unwrap();
        assert_eq!(cfg.roster, vec![AgentKind::Standard]);
    }

    #[test]
    fn schedule_shorter_than_total_steps_rejected() {
        let err = load_config(r#"{"total_steps": 10}"#).unwrap_err();
        assert!(err.to_string().contains("total_steps"), "{err}");
    }

    #[test]
    fn mode_strings_roundtrip() {
        for s in [
            "aced",
            "random-arbitration",
            "uniform-weights",
            "single-agent:distributional",
        ] {
            let mode: RunMode = s.parse().unwrap();
            assert_eq!(mode.as_string(), s);
        }
        assert!("sunrise".parse::<RunMode>().is_err());
    }
}
