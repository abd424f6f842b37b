use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::bf16::BitPosition;
use crate::engine::ToyModelConfig;
use crate::faultlab::InjectionSite;
use crate::integrity::IntegrityConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    ScanBits,
    Selective,
    Persistence,
    Detect,
    Overhead,
    NoiseFloor,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::ScanBits,
        Experiment::Selective,
        Experiment::Persistence,
        Experiment::Detect,
        Experiment::Overhead,
        Experiment::NoiseFloor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::ScanBits => "scan-bits",
            Experiment::Selective => "selective",
            Experiment::Persistence => "persistence",
            Experiment::Detect => "detect",
            Experiment::Overhead => "overhead",
            Experiment::NoiseFloor => "noise-floor",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment `{s}`"))
    }
}

pub const REPRESENTATIVE_BITS: [u8; 4] = [0, 6, 14, 15];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrityFlags {
    pub enabled: bool,
    pub ttl: Option<u64>,
}

impl IntegrityFlags {
    pub fn to_config(&self) -> IntegrityConfig {
        let base = IntegrityConfig {
            enabled: self.enabled,
            ttl_requests: None,
        };
        match self.ttl {
            Some(n) => base.with_ttl(n),
            None => base,
        }
    }
}

/// Experiment descriptor. Unset optional fields take per-experiment defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When set, must match the subcommand.
    pub experiment: Option<Experiment>,
    pub seed: u64,
    /// One model per seed; each overrides `model.weight_seed`.
    pub model_seeds: Vec<u64>,
    pub model: ToyModelConfig,
    pub n_blocks: usize,
    pub block_size: usize,
    pub prefix_len: usize,
    pub prefix_seed: u64,
    /// Prefix of the second group in `selective`.
    pub group_b_prefix_seed: u64,
    pub bits: Option<Vec<u8>>,
    pub nc_levels: Option<Vec<usize>>,
    /// Trials per condition.
    pub trials: Option<usize>,
    /// Runs per condition (persistence, overhead, detect replays).
    pub runs: Option<usize>,
    /// Sequential requests per run.
    pub requests: Option<usize>,
    pub checkpoints: Vec<usize>,
    pub integrity: IntegrityFlags,
    /// Cycles per replay in `detect`.
    pub replay_cycles: usize,
    /// Verified hits required from the injection-free control arm.
    pub control_hits: u64,
    pub exhaustive_sweep: bool,
    /// Family-wise significance level.
    pub alpha: f64,
    /// Test mode for `noise-floor`: inject a real flip so divergences appear.
    pub force_divergence: bool,
    /// Where `scan-bits` flips: shared prefix blocks or a request's own blocks.
    pub site: InjectionSite,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: 2024,
            model_seeds: vec![1, 2],
            model: ToyModelConfig::default(),
            n_blocks: 1024,
            block_size: 16,
            prefix_len: 103,
            prefix_seed: 1,
            group_b_prefix_seed: 2,
            bits: None,
            nc_levels: None,
            trials: None,
            runs: None,
            requests: None,
            checkpoints: vec![25, 50, 75, 100],
            integrity: IntegrityFlags::default(),
            replay_cycles: 3,
            control_hits: 3000,
            exhaustive_sweep: true,
            alpha: 0.05,
            force_divergence: false,
            site: InjectionSite::Prefix,
        }
    }
}

/// Config with every per-experiment default filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub experiment: Experiment,
    pub bits: Vec<BitPosition>,
    pub nc_levels: Vec<usize>,
    pub trials: usize,
    pub runs: usize,
    pub requests: usize,
    pub base: ExperimentConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn resolve(&self, experiment: Experiment) -> Result<Resolved, HarnessError> {
        use Experiment::*;
        if let Some(e) = self.experiment {
            if e != experiment {
                return config_err(format!("config is for `{e}`, not `{experiment}`"));
            }
        }
        let default_bits: Vec<u8> = match experiment {
            ScanBits => (0..16).collect(),
            _ => REPRESENTATIVE_BITS.to_vec(),
        };
        let default_nc = match experiment {
            ScanBits => vec![2, 4, 8, 16, 32],
            NoiseFloor => vec![1, 2, 4, 8, 16, 32],
            _ => vec![2],
        };
        let default_trials = match experiment {
            NoiseFloor => 10,
            _ => 30,
        };
        let bits = self
            .bits
            .clone()
            .unwrap_or(default_bits)
            .into_iter()
            .map(|p| BitPosition::new(p).map_err(|e| HarnessError::Config(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let r = Resolved {
            experiment,
            bits,
            nc_levels: self.nc_levels.clone().unwrap_or(default_nc),
            trials: self.trials.unwrap_or(default_trials),
            runs: self.runs.unwrap_or(30),
            requests: self
                .requests
                .unwrap_or(if experiment == Detect { 10 } else { 100 }),
            base: self.clone(),
        };
        r.validate()?;
        Ok(r)
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, HarnessError> {
    Err(HarnessError::Config(msg.into()))
}

impl Resolved {
    fn validate(&self) -> Result<(), HarnessError> {
        let b = &self.base;
        let mut model = b.model.clone();
        for &s in &b.model_seeds {
            model.weight_seed = s;
            model.validate().map_err(HarnessError::Config)?;
        }
        if b.model_seeds.is_empty() {
            return config_err("model_seeds must not be empty");
        }
        if self.trials == 0 || self.runs == 0 || self.requests == 0 {
            return config_err("trials, runs and requests must be at least 1");
        }
        if self.bits.is_empty()
            && self.experiment != Experiment::NoiseFloor
            && self.experiment != Experiment::Overhead
        {
            return config_err("bits must not be empty");
        }
        if self.nc_levels.is_empty() || self.nc_levels.contains(&0) {
            return config_err("nc_levels must be non-empty and positive");
        }
        if b.block_size == 0 || b.n_blocks == 0 {
            return config_err("n_blocks and block_size must be positive");
        }
        if b.prefix_len < b.block_size + 1 {
            return config_err("prefix_len must exceed one block so at least one block is shared");
        }
        if b.model.vocab_size < 2 {
            return config_err("vocab_size must be at least 2");
        }
        if !(b.alpha > 0.0 && b.alpha < 1.0) {
            return config_err("alpha must lie in (0, 1)");
        }
        if b.integrity.ttl == Some(0) {
            return config_err("ttl must be at least 1");
        }
        let longest = b.prefix_len + crate::faultlab::SUFFIX_LEN_MAX + b.model.max_new_tokens;
        if longest > b.model.max_positions {
            return config_err(format!(
                "prompt plus generation can reach {longest} positions, model.max_positions is {}",
                b.model.max_positions
            ));
        }
        let max_nc = self.nc_levels.iter().copied().max().unwrap_or(1);
        let groups = if self.experiment == Experiment::Selective {
            2
        } else {
            1
        };
        let per_request = longest.div_ceil(b.block_size);
        let needed = 2 * per_request + groups * max_nc * per_request;
        if needed > b.n_blocks {
            return config_err(format!(
                "n_blocks = {} cannot hold {} concurrent requests (needs about {needed})",
                b.n_blocks,
                groups * max_nc
            ));
        }
        if self.experiment == Experiment::Selective && b.prefix_seed == b.group_b_prefix_seed {
            return config_err(
                "selective needs two distinct prefixes (group_b_prefix_seed equals prefix_seed)",
            );
        }
        if self.experiment == Experiment::Detect && !b.integrity.enabled {
            return config_err("detect requires the integrity mechanism (--integrity on)");
        }
        if self.experiment == Experiment::Persistence
            && b.checkpoints.iter().any(|&c| c == 0 || c > self.requests)
        {
            return config_err("checkpoints must lie in 1..=requests");
        }
        Ok(())
    }

    /// The explicit config that reproduces this run.
    pub fn to_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            experiment: Some(self.experiment),
            bits: Some(self.bits.iter().map(|b| b.get()).collect()),
            nc_levels: Some(self.nc_levels.clone()),
            trials: Some(self.trials),
            runs: Some(self.runs),
            requests: Some(self.requests),
            ..self.base.clone()
        }
    }

    pub fn model_config(&self, model_seed: u64) -> ToyModelConfig {
        ToyModelConfig {
            weight_seed: model_seed,
            ..self.base.model.clone()
        }
    }
}
