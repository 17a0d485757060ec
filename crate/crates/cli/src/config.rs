//! Experiment configuration: a flat key-value TOML file whose keys mirror
//! the environment and training parameter names, overridden field-by-field
//! by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use skygrid_core::baselines::DqnConfig;
use skygrid_core::channel::{ChannelParams, FadingMode};
use skygrid_core::marl::{RewardFormula, RewardScope, TrainConfig};
use skygrid_core::scenario::{FieldConfig, InterferencePower};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Maddpg,
    Dqn,
    Equal,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Maddpg => "maddpg",
            Algorithm::Dqn => "dqn",
            Algorithm::Equal => "equal",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "maddpg" => Ok(Algorithm::Maddpg),
            "dqn" => Ok(Algorithm::Dqn),
            "equal" => Ok(Algorithm::Equal),
            other => Err(ConfigError::Invalid(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Raw file keys; everything optional so the file can set any subset.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // Field geometry and service demand.
    pub side_len_m: Option<f64>,
    pub grid_dim: Option<usize>,
    pub uav_height_m: Option<f64>,
    pub num_ues: Option<usize>,
    pub power_budget_w: Option<f64>,
    pub rate_threshold_mbps: Option<f64>,
    // Propagation constants.
    pub alpha_los: Option<f64>,
    pub alpha_nlos: Option<f64>,
    pub env_b: Option<f64>,
    pub env_c: Option<f64>,
    pub rice_k: Option<f64>,
    pub mu_gain: Option<f64>,
    pub noise_power_w: Option<f64>,
    pub bandwidth_hz: Option<f64>,
    // Training hyperparameters.
    pub episodes: Option<usize>,
    pub steps_per_episode: Option<usize>,
    pub batch_size: Option<usize>,
    pub buffer_size: Option<usize>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub actor_lr: Option<f64>,
    pub critic_lr: Option<f64>,
    /// Per-step power change cap as a fraction of the budget.
    pub delta_max_fraction: Option<f64>,
    pub pad_width: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub reward_formula: Option<String>,
    pub reward_scope: Option<String>,
    pub interference_power: Option<String>,
    // DQN epsilon schedule.
    pub epsilon_start: Option<f64>,
    pub epsilon_end: Option<f64>,
    pub epsilon_decay_fraction: Option<f64>,
    // Experiment axes.
    pub algorithm: Option<String>,
    pub clusters: Option<Vec<usize>>,
    pub rate_thresholds_mbps: Option<Vec<f64>>,
    pub field_sides_m: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub fading: Option<String>,
    pub eval_steps: Option<usize>,
    pub kmeans_restarts: Option<usize>,
    pub paper_scale: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Command-line overrides, all optional; they win over file values.
#[derive(Clone, Debug, Default)]
pub struct CliOverrides {
    pub algo: Option<Algorithm>,
    pub clusters: Option<Vec<usize>>,
    pub ues: Option<usize>,
    pub rate_threshold_mbps: Option<Vec<f64>>,
    pub field_side_m: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub episodes: Option<usize>,
    pub steps: Option<usize>,
    pub fading: Option<FadingMode>,
    pub paper_scale: bool,
}

/// Fully resolved experiment: base configs plus the sweep axes.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub field_base: FieldConfig,
    pub channel: ChannelParams,
    pub train: TrainConfig,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_fraction: f64,
    pub algorithm: Algorithm,
    pub clusters: Vec<usize>,
    /// Thresholds in bits/s.
    pub rate_thresholds: Vec<f64>,
    pub side_lens: Vec<f64>,
    pub seeds: Vec<u64>,
    pub fading: FadingMode,
    /// Steps per final-policy evaluation rollout (one expected-mode and one
    /// sampled-mode rollout each run).
    pub eval_steps: usize,
    pub kmeans_restarts: usize,
    /// The delta_max fraction the per-axis budget gets multiplied by.
    pub delta_max_fraction: f64,
}

impl ExperimentConfig {
    /// Layer defaults, then the file, then CLI flags.
    pub fn resolve(file: FileConfig, cli: CliOverrides) -> Result<Self, ConfigError> {
        let parse_fading = |s: &str| match s.to_ascii_lowercase().as_str() {
            "sampled" => Ok(FadingMode::Sampled),
            "expected" => Ok(FadingMode::Expected),
            other => Err(ConfigError::Invalid(format!("unknown fading mode '{other}'"))),
        };

        let field_base = FieldConfig {
            side_len: file.side_len_m.unwrap_or(10_000.0),
            grid_dim: file.grid_dim.unwrap_or(100),
            uav_height: file.uav_height_m.unwrap_or(500.0),
            num_ues: cli.ues.or(file.num_ues).unwrap_or(30),
            power_budget: file.power_budget_w.unwrap_or(1.0),
            rate_threshold: file.rate_threshold_mbps.map(|m| m * 1e6).unwrap_or(30e6),
        };
        let channel = ChannelParams {
            alpha_los: file.alpha_los.unwrap_or(3.0),
            alpha_nlos: file.alpha_nlos.unwrap_or(4.0),
            b_env: file.env_b.unwrap_or(0.136),
            c_env: file.env_c.unwrap_or(11.95),
            rice_k: file.rice_k.unwrap_or(10.0),
            mu_gain: file.mu_gain.unwrap_or(0.5),
            noise_power: file.noise_power_w.unwrap_or(4e-15),
            bandwidth: file.bandwidth_hz.unwrap_or(1e7),
        };

        let reward_formula = match file.reward_formula.as_deref() {
            None | Some("shaped") => RewardFormula::Shaped,
            Some("literal") => RewardFormula::Literal,
            Some(other) => {
                return Err(ConfigError::Invalid(format!(
                    "unknown reward_formula '{other}'"
                )))
            }
        };
        let reward_scope = match file.reward_scope.as_deref() {
            None | Some("shared") => RewardScope::Shared,
            Some("per-agent") => RewardScope::PerAgent,
            Some(other) => {
                return Err(ConfigError::Invalid(format!("unknown reward_scope '{other}'")))
            }
        };
        let interference_power = match file.interference_power.as_deref() {
            None | Some("current-mean") => InterferencePower::CurrentMean,
            Some("static-budget") => InterferencePower::StaticBudget,
            Some(other) => {
                return Err(ConfigError::Invalid(format!(
                    "unknown interference_power '{other}'"
                )))
            }
        };

        let paper_scale = cli.paper_scale || file.paper_scale.unwrap_or(false);
        let mut episodes = file.episodes.unwrap_or(100);
        let mut steps = file.steps_per_episode.unwrap_or(200);
        if paper_scale {
            episodes = 500;
            steps = 500;
        }
        if let Some(e) = cli.episodes {
            episodes = e;
        }
        if let Some(s) = cli.steps {
            steps = s;
        }

        let delta_max_fraction = file.delta_max_fraction.unwrap_or(0.05);
        if delta_max_fraction <= 0.0 {
            return Err(ConfigError::Invalid("delta_max_fraction must be positive".into()));
        }
        let train = TrainConfig {
            episodes,
            steps_per_episode: steps,
            batch: file.batch_size.unwrap_or(64),
            buffer: file.buffer_size.unwrap_or(100_000),
            gamma: file.gamma.unwrap_or(0.95),
            tau: file.tau.unwrap_or(0.01),
            noise_sigma: file.noise_sigma.unwrap_or(0.2),
            actor_lr: file.actor_lr.unwrap_or(1e-4),
            critic_lr: file.critic_lr.unwrap_or(1e-4),
            delta_max: delta_max_fraction * field_base.power_budget,
            pad_width: file.pad_width,
            hidden: file.hidden.unwrap_or_else(|| vec![128, 128]),
            reward_formula,
            reward_scope,
            interference_power,
        };

        let algorithm = match (cli.algo, file.algorithm.as_deref()) {
            (Some(a), _) => a,
            (None, Some(s)) => s.parse()?,
            (None, None) => Algorithm::Maddpg,
        };
        let fading = match (cli.fading, file.fading.as_deref()) {
            (Some(f), _) => f,
            (None, Some(s)) => parse_fading(s)?,
            (None, None) => FadingMode::Sampled,
        };

        let clusters = cli.clusters.or(file.clusters).unwrap_or_else(|| vec![5]);
        let rate_thresholds: Vec<f64> = cli
            .rate_threshold_mbps
            .or(file.rate_thresholds_mbps)
            .map(|v| v.into_iter().map(|m| m * 1e6).collect())
            .unwrap_or_else(|| vec![field_base.rate_threshold]);
        let side_lens = cli
            .field_side_m
            .or(file.field_sides_m)
            .unwrap_or_else(|| vec![field_base.side_len]);
        let seeds = cli.seeds.or(file.seeds).unwrap_or_else(|| vec![0]);

        let config = Self {
            field_base,
            channel,
            train,
            epsilon_start: file.epsilon_start.unwrap_or(1.0),
            epsilon_end: file.epsilon_end.unwrap_or(0.05),
            epsilon_decay_fraction: file.epsilon_decay_fraction.unwrap_or(0.5),
            algorithm,
            clusters,
            rate_thresholds,
            side_lens,
            seeds,
            fading,
            eval_steps: file.eval_steps.unwrap_or(100),
            kmeans_restarts: file.kmeans_restarts.unwrap_or(10),
            delta_max_fraction,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.clusters.is_empty() || self.rate_thresholds.is_empty() || self.side_lens.is_empty()
        {
            return invalid("sweep axes must be non-empty".into());
        }
        if self.seeds.is_empty() {
            return invalid("need at least one seed".into());
        }
        if self.eval_steps == 0 {
            return invalid("eval_steps must be positive".into());
        }
        if self.kmeans_restarts == 0 {
            return invalid("kmeans_restarts must be positive".into());
        }
        for &k in &self.clusters {
            if k == 0 || k > self.field_base.num_ues {
                return invalid(format!(
                    "clusters value {k} outside 1..={}",
                    self.field_base.num_ues
                ));
            }
        }
        for &r in &self.rate_thresholds {
            if !(r > 0.0) {
                return invalid(format!("rate threshold {r} must be positive"));
            }
        }
        for &l in &self.side_lens {
            if !(l > 0.0) {
                return invalid(format!("field side {l} must be positive"));
            }
        }
        self.field_base
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.channel
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let dqn = self.dqn_config();
        dqn.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn dqn_config(&self) -> DqnConfig {
        DqnConfig {
            train: self.train.clone(),
            epsilon_start: self.epsilon_start,
            epsilon_end: self.epsilon_end,
            epsilon_decay_fraction: self.epsilon_decay_fraction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let config = ExperimentConfig::resolve(FileConfig::default(), CliOverrides::default())
            .unwrap();
        assert_eq!(config.field_base.num_ues, 30);
        assert_eq!(config.train.batch, 64);
        assert_eq!(config.train.episodes, 100);
        assert_eq!(config.rate_thresholds, vec![30e6]);
        assert_eq!(config.algorithm, Algorithm::Maddpg);
    }

    #[test]
    fn cli_overrides_file() {
        let file: FileConfig = toml::from_str(
            r#"
            algorithm = "equal"
            clusters = [3]
            episodes = 7
            rate_threshold_mbps = 10.0
            "#,
        )
        .unwrap();
        let cli = CliOverrides {
            algo: Some(Algorithm::Dqn),
            clusters: Some(vec![4, 8]),
            episodes: Some(9),
            ..CliOverrides::default()
        };
        let config = ExperimentConfig::resolve(file, cli).unwrap();
        assert_eq!(config.algorithm, Algorithm::Dqn);
        assert_eq!(config.clusters, vec![4, 8]);
        assert_eq!(config.train.episodes, 9);
        assert_eq!(config.field_base.rate_threshold, 10e6);
    }

    #[test]
    fn paper_scale_expands_run_length() {
        let cli = CliOverrides {
            paper_scale: true,
            ..CliOverrides::default()
        };
        let config = ExperimentConfig::resolve(FileConfig::default(), cli).unwrap();
        assert_eq!(config.train.episodes, 500);
        assert_eq!(config.train.steps_per_episode, 500);
        // An explicit flag still wins over the preset.
        let cli = CliOverrides {
            paper_scale: true,
            episodes: Some(50),
            ..CliOverrides::default()
        };
        let config = ExperimentConfig::resolve(FileConfig::default(), cli).unwrap();
        assert_eq!(config.train.episodes, 50);
        assert_eq!(config.train.steps_per_episode, 500);
    }

    #[test]
    fn rejects_bad_values() {
        let file: FileConfig = toml::from_str("clusters = [40]").unwrap();
        assert!(ExperimentConfig::resolve(file, CliOverrides::default()).is_err());
        let file: FileConfig = toml::from_str("gamma = 1.5").unwrap();
        assert!(ExperimentConfig::resolve(file, CliOverrides::default()).is_err());
        assert!(toml::from_str::<FileConfig>("no_such_key = 1").is_err());
    }
}
