//! Sweep execution: one independent, fully seeded run per (clusters,
//! threshold, field side, seed) grid point, fanned out over a worker pool
//! and merged back in grid order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use skygrid_core::baselines::{
    run_dqn_training, ue_slots, DqnPolicy, DqnTrainingRun, EqualPowerController,
};
use skygrid_core::channel::FadingMode;
use skygrid_core::clustering::kmeans;
use skygrid_core::marl::{
    greedy_rollout, run_training, AllocationEnv, EpisodeMetrics, MaddpgPolicy, PowerController,
    TrainingRun, TrainingScenario,
};
use skygrid_core::scenario::{generate_ues, FieldConfig};
use skygrid_core::seeding;

use crate::config::{Algorithm, ExperimentConfig};

/// One point of the sweep grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AxisPoint {
    pub clusters: usize,
    pub rate_threshold: f64,
    pub side_len: f64,
}

/// One row of the per-run episode series.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub mean_step_reward: f64,
    pub served: f64,
    pub power_fraction: f64,
}

/// Everything recorded about one finished run.
#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub clusters: usize,
    pub rate_threshold_bps: f64,
    pub side_len_m: f64,
    pub seed: u64,
    /// Hash of the resolved per-point configuration, seed excluded.
    pub config_hash: String,
    pub episodes: Vec<EpisodeRow>,
    /// Mean served count over the tail of the evaluation rollouts.
    pub final_served: f64,
    pub final_served_expected: f64,
    pub final_served_sampled: f64,
    /// Mean allocated-power fraction over the same tail.
    pub final_power_fraction: f64,
    pub feasibility_checks: u64,
    pub feasibility_violations: u64,
    /// Wall-clock seconds; reported on the console, never written to output
    /// files so that reruns stay byte-identical.
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunFailure {
    pub algorithm: String,
    pub clusters: usize,
    pub rate_threshold_bps: f64,
    pub side_len_m: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutcome {
    pub summaries: Vec<RunSummary>,
    pub failures: Vec<RunFailure>,
}

/// Stable tag for a grid point, mixed into per-run seed derivation.
fn axis_tag(point: &AxisPoint) -> u64 {
    let mut tag = seeding::mix(point.clusters as u64, 0x4158);
    tag = seeding::mix(tag, point.rate_threshold.to_bits());
    seeding::mix(tag, point.side_len.to_bits())
}

/// Hash of the per-point resolved configuration (axis applied, seed
/// excluded), for detecting config drift between runs of one sweep point.
fn config_hash(config: &ExperimentConfig, point: &AxisPoint) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        algorithm: &'static str,
        field: FieldConfig,
        channel: &'a skygrid_core::channel::ChannelParams,
        train: &'a skygrid_core::marl::TrainConfig,
        epsilon: (f64, f64, f64),
        fading: FadingMode,
        eval_steps: usize,
        kmeans_restarts: usize,
    }
    let key = Key {
        algorithm: config.algorithm.name(),
        field: field_for(config, point),
        channel: &config.channel,
        train: &config.train,
        epsilon: (
            config.epsilon_start,
            config.epsilon_end,
            config.epsilon_decay_fraction,
        ),
        fading: config.fading,
        eval_steps: config.eval_steps,
        kmeans_restarts: config.kmeans_restarts,
    };
    let json = serde_json::to_string(&key).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn field_for(config: &ExperimentConfig, point: &AxisPoint) -> FieldConfig {
    FieldConfig {
        side_len: point.side_len,
        rate_threshold: point.rate_threshold,
        ..config.field_base
    }
}

/// Per-policy evaluation: one expected-mode and one sampled-mode greedy
/// rollout of `eval_steps` steps from the equal-split reset; the reported
/// numbers are means over the final 10% of each rollout's steps.
pub struct EvalOutcome {
    pub served: f64,
    pub served_expected: f64,
    pub served_sampled: f64,
    pub power_fraction: f64,
}

pub fn evaluate_policy(
    scenario: &TrainingScenario,
    config: &ExperimentConfig,
    controller: &mut dyn PowerController,
    master_seed: u64,
) -> Result<EvalOutcome, anyhow::Error> {
    let tail = (config.eval_steps / 10).max(1);
    let mut served_modes = [0.0f64; 2];
    let mut power_acc = 0.0;
    for (slot, fading) in [FadingMode::Expected, FadingMode::Sampled].into_iter().enumerate() {
        let mut env = AllocationEnv::new(
            scenario,
            config.train.pad_width,
            config.train.delta_max,
            fading,
            config.train.interference_power,
            config.train.reward_formula,
        )?;
        let mut rng = seeding::stream(master_seed, seeding::SALT_EVAL + slot as u64);
        let metrics = greedy_rollout(&mut env, controller, config.eval_steps, &mut rng)?;
        let served_tail = &metrics.served[metrics.served.len() - tail..];
        served_modes[slot] =
            served_tail.iter().sum::<usize>() as f64 / served_tail.len() as f64;
        let power_tail = &metrics.power_fraction[metrics.power_fraction.len() - tail..];
        power_acc += power_tail.iter().sum::<f64>() / power_tail.len() as f64;
    }
    Ok(EvalOutcome {
        served: (served_modes[0] + served_modes[1]) / 2.0,
        served_expected: served_modes[0],
        served_sampled: served_modes[1],
        power_fraction: power_acc / 2.0,
    })
}

fn episode_rows(episodes: &[EpisodeMetrics]) -> Vec<EpisodeRow> {
    episodes
        .iter()
        .enumerate()
        .map(|(episode, m)| EpisodeRow {
            episode,
            mean_step_reward: m.mean_reward,
            served: m.mean_served,
            power_fraction: m.mean_power_fraction,
        })
        .collect()
}

/// A monitoring loop for the static equal split: no learning, same episode
/// structure and metrics as the trainers.
fn run_equal_baseline(
    scenario: &TrainingScenario,
    config: &ExperimentConfig,
    master_seed: u64,
) -> Result<(Vec<EpisodeMetrics>, u64, u64), anyhow::Error> {
    let mut env = AllocationEnv::new(
        scenario,
        config.train.pad_width,
        config.train.delta_max,
        config.fading,
        config.train.interference_power,
        config.train.reward_formula,
    )?;
    let mut controller = EqualPowerController {
        num_clusters: scenario.num_clusters(),
        pad_width: env.pad_width(),
    };
    let mut rng = seeding::stream(master_seed, seeding::SALT_ENV);
    let mut episodes = Vec::with_capacity(config.train.episodes);
    for _ in 0..config.train.episodes {
        let metrics = greedy_rollout(
            &mut env,
            &mut controller,
            config.train.steps_per_episode,
            &mut rng,
        )?;
        let steps = metrics.rewards.len() as f64;
        episodes.push(EpisodeMetrics {
            mean_reward: metrics.rewards.iter().sum::<f64>() / steps,
            mean_served: metrics.served.iter().sum::<usize>() as f64 / steps,
            mean_power_fraction: metrics.power_fraction.iter().sum::<f64>() / steps,
        });
    }
    Ok((episodes, env.feasibility.checks, env.feasibility.violations))
}

/// Artifacts of one run that the `train` subcommand persists.
pub enum TrainedPolicy {
    Maddpg(TrainingRun),
    Dqn(DqnTrainingRun),
    Equal,
}

/// Build the scenario for one grid point and seed: users from the seed-only
/// stream (so layouts match across cluster counts), then k-means and UAV
/// placement.
pub fn build_scenario(
    config: &ExperimentConfig,
    point: &AxisPoint,
    seed: u64,
) -> Result<TrainingScenario, anyhow::Error> {
    let field = field_for(config, point);
    let mut ue_rng = seeding::stream(seed, seeding::SALT_UES);
    let ues = generate_ues(&mut ue_rng, &field)?;
    let mut kmeans_rng = seeding::stream(seeding::mix(seed, point.clusters as u64), seeding::SALT_KMEANS);
    let assignment = kmeans(
        &ues,
        point.clusters,
        &mut kmeans_rng,
        config.kmeans_restarts,
        300,
        1e-4 * field.side_len,
    )?;
    Ok(TrainingScenario::assemble(
        field,
        config.channel,
        ues,
        assignment,
    )?)
}

/// Execute one grid point for one seed: scenario setup, the selected
/// algorithm's training (if any), and the final-policy evaluation.
pub fn single_run(
    config: &ExperimentConfig,
    point: &AxisPoint,
    seed: u64,
) -> Result<(RunSummary, TrainedPolicy), anyhow::Error> {
    let start = std::time::Instant::now();
    let scenario = build_scenario(config, point, seed)?;
    let master = seeding::mix(seed, axis_tag(point));

    let (episodes, feasibility, eval, policy) = match config.algorithm {
        Algorithm::Maddpg => {
            let run = run_training(&scenario, &config.train, config.fading, master)?;
            let mut controller = MaddpgPolicy { agents: &run.agents };
            let eval = evaluate_policy(&scenario, config, &mut controller, master)?;
            (
                episode_rows(&run.episodes),
                (run.feasibility.checks, run.feasibility.violations),
                eval,
                TrainedPolicy::Maddpg(run),
            )
        }
        Algorithm::Dqn => {
            let run = run_dqn_training(&scenario, &config.dqn_config(), config.fading, master)?;
            let mut controller = DqnPolicy {
                qnet: &run.qnet,
                slots: ue_slots(&scenario.assignment),
                num_clusters: scenario.num_clusters(),
                pad_width: scenario.max_cluster_size().max(config.train.pad_width.unwrap_or(0)),
            };
            let eval = evaluate_policy(&scenario, config, &mut controller, master)?;
            (
                episode_rows(&run.episodes),
                (run.feasibility.checks, run.feasibility.violations),
                eval,
                TrainedPolicy::Dqn(run),
            )
        }
        Algorithm::Equal => {
            let (episodes, checks, violations) = run_equal_baseline(&scenario, config, master)?;
            let mut controller = EqualPowerController {
                num_clusters: scenario.num_clusters(),
                pad_width: scenario.max_cluster_size().max(config.train.pad_width.unwrap_or(0)),
            };
            let mut eval = evaluate_policy(&scenario, config, &mut controller, master)?;
            // The equal split allocates the whole budget by definition; the
            // float vector only approximates that, so report it exactly.
            eval.power_fraction = 1.0;
            (episode_rows(&episodes), (checks, violations), eval, TrainedPolicy::Equal)
        }
    };

    let summary = RunSummary {
        algorithm: config.algorithm.name().to_string(),
        clusters: point.clusters,
        rate_threshold_bps: point.rate_threshold,
        side_len_m: point.side_len,
        seed,
        config_hash: config_hash(config, point),
        episodes,
        final_served: eval.served,
        final_served_expected: eval.served_expected,
        final_served_sampled: eval.served_sampled,
        final_power_fraction: eval.power_fraction,
        feasibility_checks: feasibility.0,
        feasibility_violations: feasibility.1,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    Ok((summary, policy))
}

/// Grid points in deterministic sweep order.
pub fn grid(config: &ExperimentConfig) -> Vec<(AxisPoint, u64)> {
    let mut points = Vec::new();
    for &clusters in &config.clusters {
        for &rate_threshold in &config.rate_thresholds {
            for &side_len in &config.side_lens {
                for &seed in &config.seeds {
                    points.push((
                        AxisPoint {
                            clusters,
                            rate_threshold,
                            side_len,
                        },
                        seed,
                    ));
                }
            }
        }
    }
    points
}

/// Run the whole sweep on a worker pool. Results are merged in grid order
/// regardless of completion order; failures are recorded without aborting
/// the remaining runs.
pub fn run_experiment(config: &ExperimentConfig) -> ExperimentOutcome {
    let results: Vec<Result<RunSummary, RunFailure>> = grid(config)
        .into_par_iter()
        .map(|(point, seed)| {
            single_run(config, &point, seed)
                .map(|(summary, _)| summary)
                .map_err(|e| RunFailure {
                    algorithm: config.algorithm.name().to_string(),
                    clusters: point.clusters,
                    rate_threshold_bps: point.rate_threshold,
                    side_len_m: point.side_len,
                    seed,
                    error: format!("{e:#}"),
                })
        })
        .collect();
    let mut outcome = ExperimentOutcome::default();
    for result in results {
        match result {
            Ok(summary) => outcome.summaries.push(summary),
            Err(failure) => outcome.failures.push(failure),
        }
    }
    outcome
}
