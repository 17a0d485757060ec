//! Comparison policies: the static equal-power split and a centralized DQN
//! that adjusts one UE's power per step.
//!
//! The DQN sees the same global state as the MADDPG critics (all agents'
//! observations concatenated) and picks one discrete action from
//! `2 * num_ues + 1` choices: raise or lower one UE's power by the step
//! scale, or do nothing. Network widths, buffer, batch size, discount, soft
//! update rate, and learning rate all mirror the MADDPG settings so that
//! differences reflect the algorithm rather than tuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::FadingMode;
use crate::clustering::ClusterAssignment;
use crate::marl::{
    flatten_observations, ActionVector, AllocationEnv, EpisodeMetrics, FeasibilityCounter,
    MarlError, Observation, PowerController, ReplayBuffer, TrainConfig, TrainingScenario,
};
use crate::neural::{soft_update, AdamState, Mlp, OutputActivation};
use crate::scenario::PowerAllocation;

/// Every UE in cluster `j` receives `power_budget / sizes[j]`; the whole
/// budget is always spent.
pub fn equal_power_allocation(
    cluster_sizes: &[usize],
    power_budget: f64,
) -> Result<PowerAllocation, MarlError> {
    if cluster_sizes.iter().any(|&s| s == 0) {
        return Err(MarlError::InvalidConfig(
            "equal power split needs non-empty clusters".into(),
        ));
    }
    if power_budget <= 0.0 {
        return Err(MarlError::NegativeBudget(power_budget));
    }
    Ok(PowerAllocation::equal_split(cluster_sizes, power_budget))
}

/// DQN baseline settings; everything not epsilon-related is shared with the
/// MADDPG [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DqnConfig {
    pub train: TrainConfig,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of all training steps over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<(), MarlError> {
        self.train.validate()?;
        for (name, eps) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&eps) {
                return Err(MarlError::InvalidConfig(format!("{name} {eps} outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return Err(MarlError::InvalidConfig("epsilon_decay_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Linear schedule value after `step` of `total_steps`.
    pub fn epsilon_at(&self, step: usize, total_steps: usize) -> f64 {
        let decay_steps = (self.epsilon_decay_fraction * total_steps as f64).max(1.0);
        let progress = (step as f64 / decay_steps).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * progress
    }
}

/// Size of the discrete action set for `num_ues` users.
pub fn dqn_action_count(num_ues: usize) -> usize {
    2 * num_ues + 1
}

/// Decode an action index into `(ue, direction)`; `None` is the no-op.
pub fn dqn_decode_action(index: usize, num_ues: usize) -> Option<(usize, f64)> {
    if index >= 2 * num_ues {
        None
    } else {
        let ue = index / 2;
        let sign = if index % 2 == 0 { 1.0 } else { -1.0 };
        Some((ue, sign))
    }
}

/// Epsilon-greedy action choice over the network's Q-values; greedy ties
/// break toward the lowest index. Exactly one uniform draw is consumed per
/// call regardless of epsilon.
pub fn dqn_select_action<R: Rng + ?Sized>(
    qnet: &Mlp,
    global_state: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize, MarlError> {
    let explore: f64 = rng.gen();
    if explore < epsilon {
        return Ok(rng.gen_range(0..qnet.output_len()));
    }
    let q = qnet.predict(global_state)?;
    let mut best = 0;
    let mut best_q = f64::NEG_INFINITY;
    for (i, &v) in q.iter().enumerate() {
        if v > best_q {
            best_q = v;
            best = i;
        }
    }
    Ok(best)
}

/// One step of experience for the centralized agent.
#[derive(Clone, Debug)]
pub struct DqnTransition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// One Adam step on the squared TD error `(r + gamma max_a' Q'(s', a') -
/// Q(s, a))^2`, then a Polyak update of the target network.
pub fn dqn_train_step(
    qnet: &mut Mlp,
    target_qnet: &mut Mlp,
    opt: &mut AdamState,
    batch: &[&DqnTransition],
    gamma: f64,
    tau: f64,
) -> Result<f64, MarlError> {
    assert!(!batch.is_empty());
    let w = batch.len();
    let width = qnet.input_len();
    let mut states = ndarray::Array2::zeros((w, width));
    let mut next_states = ndarray::Array2::zeros((w, width));
    for (row, t) in batch.iter().enumerate() {
        if t.state.len() != width || t.next_state.len() != width {
            return Err(MarlError::WidthMismatch("DQN transition state width".into()));
        }
        states
            .row_mut(row)
            .assign(&ndarray::Array1::from_vec(t.state.clone()));
        next_states
            .row_mut(row)
            .assign(&ndarray::Array1::from_vec(t.next_state.clone()));
    }
    let (next_q, _) = target_qnet.forward_batch(next_states.view())?;
    let targets: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(row, t)| {
            let best = next_q
                .row(row)
                .iter()
                .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            t.reward + gamma * best
        })
        .collect();

    let (q, cache) = qnet.forward_batch(states.view())?;
    let mut dq = ndarray::Array2::zeros(q.dim());
    let mut loss = 0.0;
    for (row, t) in batch.iter().enumerate() {
        let diff = q[[row, t.action]] - targets[row];
        loss += diff * diff;
        dq[[row, t.action]] = 2.0 * diff / w as f64;
    }
    loss /= w as f64;
    if !loss.is_finite() {
        return Err(MarlError::NonFiniteLoss {
            agent: 0,
            what: "DQN loss",
        });
    }
    let (grads, _) = qnet.backward_batch(&cache, dq.view(), false)?;
    opt.step(qnet, &grads)?;
    soft_update(target_qnet, qnet, tau)?;
    Ok(loss)
}

/// Map each UE to its (cluster, slot) coordinate.
pub fn ue_slots(assignment: &ClusterAssignment) -> Vec<(usize, usize)> {
    let slots = assignment.slot_indices();
    assignment
        .labels
        .iter()
        .zip(slots)
        .map(|(&cluster, slot)| (cluster, slot))
        .collect()
}

/// Expand a discrete action into per-cluster delta vectors: all zeros except
/// the chosen UE's slot at +/-1 (scaled by the environment's step size).
pub fn dqn_action_to_joint(
    index: usize,
    slots: &[(usize, usize)],
    num_clusters: usize,
    pad_width: usize,
) -> Vec<ActionVector> {
    let mut actions: Vec<ActionVector> = (0..num_clusters)
        .map(|_| ActionVector {
            deltas: vec![0.0; pad_width],
        })
        .collect();
    if let Some((ue, sign)) = dqn_decode_action(index, slots.len()) {
        let (cluster, slot) = slots[ue];
        actions[cluster].deltas[slot] = sign;
    }
    actions
}

/// Output of one DQN training run.
pub struct DqnTrainingRun {
    pub qnet: Mlp,
    pub target_qnet: Mlp,
    pub episodes: Vec<EpisodeMetrics>,
    pub step_rewards: Vec<f64>,
    pub feasibility: FeasibilityCounter,
}

/// Centralized DQN training over the same environment, reward, and episode
/// structure as the MADDPG loop. Deterministic for a given master seed.
pub fn run_dqn_training(
    scenario: &TrainingScenario,
    config: &DqnConfig,
    fading: FadingMode,
    seed: u64,
) -> Result<DqnTrainingRun, MarlError> {
    config.validate()?;
    let train = &config.train;
    let mut env = AllocationEnv::new(
        scenario,
        train.pad_width,
        train.delta_max,
        fading,
        train.interference_power,
        train.reward_formula,
    )?;
    let num_ues = scenario.ue_positions.len();
    let slots = ue_slots(&scenario.assignment);
    let actions_len = dqn_action_count(num_ues);

    let mut sizes = vec![env.global_width()];
    sizes.extend_from_slice(&train.hidden);
    sizes.push(actions_len);
    let mut rng_init = crate::seeding::stream(seed, crate::seeding::SALT_NET_INIT);
    let mut qnet = Mlp::init(&mut rng_init, &sizes, OutputActivation::Linear)?;
    let mut target_qnet = qnet.clone();
    let mut opt = AdamState::new(&qnet, train.critic_lr);

    let mut rng_explore = crate::seeding::stream(seed, crate::seeding::SALT_EXPLORE);
    let mut rng_env = crate::seeding::stream(seed, crate::seeding::SALT_ENV);
    let mut rng_replay = crate::seeding::stream(seed, crate::seeding::SALT_REPLAY);

    let mut buffer: ReplayBuffer<DqnTransition> = ReplayBuffer::new(train.buffer);
    let total_steps = train.episodes * train.steps_per_episode;
    let mut global_step = 0usize;
    let mut episodes = Vec::with_capacity(train.episodes);
    let mut step_rewards = Vec::with_capacity(total_steps);

    for _ in 0..train.episodes {
        let observations = env.reset(&mut rng_env)?;
        let mut state = flatten_observations(&observations);
        let (mut reward_acc, mut served_acc, mut power_acc) = (0.0, 0.0, 0.0);
        for _ in 0..train.steps_per_episode {
            let epsilon = config.epsilon_at(global_step, total_steps);
            let action = dqn_select_action(&qnet, &state, epsilon, &mut rng_explore)?;
            let joint = dqn_action_to_joint(action, &slots, env.num_agents(), env.pad_width());
            let outcome = env.step(&joint, &mut rng_env)?;
            let next_state = flatten_observations(&outcome.observations);
            buffer.push(DqnTransition {
                state,
                action,
                reward: outcome.reward.total,
                next_state: next_state.clone(),
            });
            if buffer.len() >= train.batch {
                let batch = buffer.sample(&mut rng_replay, train.batch)?;
                dqn_train_step(
                    &mut qnet,
                    &mut target_qnet,
                    &mut opt,
                    &batch,
                    train.gamma,
                    train.tau,
                )?;
            }
            reward_acc += outcome.reward.total;
            served_acc += outcome.total_served as f64;
            power_acc += outcome.power_fraction;
            step_rewards.push(outcome.reward.total);
            state = next_state;
            global_step += 1;
        }
        let steps = train.steps_per_episode as f64;
        episodes.push(EpisodeMetrics {
            mean_reward: reward_acc / steps,
            mean_served: served_acc / steps,
            mean_power_fraction: power_acc / steps,
        });
    }

    Ok(DqnTrainingRun {
        qnet,
        target_qnet,
        episodes,
        step_rewards,
        feasibility: env.feasibility,
    })
}

/// Greedy DQN policy for evaluation rollouts.
pub struct DqnPolicy<'a> {
    pub qnet: &'a Mlp,
    pub slots: Vec<(usize, usize)>,
    pub num_clusters: usize,
    pub pad_width: usize,
}

impl PowerController for DqnPolicy<'_> {
    fn joint_action(&mut self, observations: &[Observation]) -> Result<Vec<ActionVector>, MarlError> {
        let state = flatten_observations(observations);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let action = dqn_select_action(self.qnet, &state, 0.0, &mut rng)?;
        Ok(dqn_action_to_joint(
            action,
            &self.slots,
            self.num_clusters,
            self.pad_width,
        ))
    }
}

/// The equal-power baseline never moves power after the reset.
pub struct EqualPowerController {
    pub num_clusters: usize,
    pub pad_width: usize,
}

impl PowerController for EqualPowerController {
    fn joint_action(&mut self, _observations: &[Observation]) -> Result<Vec<ActionVector>, MarlError> {
        Ok((0..self.num_clusters)
            .map(|_| ActionVector {
                deltas: vec![0.0; self.pad_width],
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_split_divides_budget() {
        let allocation = equal_power_allocation(&[5], 1.0).unwrap();
        assert_eq!(allocation.clusters[0], vec![0.2; 5]);
    }

    #[test]
    fn equal_split_single_ue_gets_everything() {
        let allocation = equal_power_allocation(&[1, 3], 1.0).unwrap();
        assert_eq!(allocation.clusters[0], vec![1.0]);
        assert_eq!(allocation.clusters[1], vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn equal_split_rejects_empty_cluster() {
        assert!(equal_power_allocation(&[3, 0], 1.0).is_err());
    }

    #[test]
    fn equal_split_is_permutation_invariant() {
        // All entries within a cluster are identical, so any UE permutation
        // maps the allocation to itself.
        let allocation = equal_power_allocation(&[4], 1.0).unwrap();
        let first = allocation.clusters[0][0];
        assert!(allocation.clusters[0].iter().all(|&p| p == first));
    }

    fn flat_qnet(inputs: usize, outputs: usize, values: &[f64]) -> Mlp {
        // Zero weights, biases equal to the requested Q-values.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::init(&mut rng, &[inputs, outputs], OutputActivation::Linear).unwrap();
        for i in 0..net.num_params() {
            net.set_param(i, 0.0);
        }
        let weight_count = inputs * outputs;
        for (i, &v) in values.iter().enumerate() {
            net.set_param(weight_count + i, v);
        }
        net
    }

    #[test]
    fn greedy_selection_takes_unique_max() {
        let net = flat_qnet(3, 4, &[0.1, 0.9, 0.3, 0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = dqn_select_action(&net, &[0.0, 0.0, 0.0], 0.0, &mut rng).unwrap();
        assert_eq!(a, 1);
    }

    #[test]
    fn greedy_ties_break_to_lowest_index() {
        let net = flat_qnet(3, 4, &[0.5, 0.9, 0.9, 0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = dqn_select_action(&net, &[0.0, 0.0, 0.0], 0.0, &mut rng).unwrap();
        assert_eq!(a, 1);
    }

    #[test]
    fn full_exploration_is_uniform() {
        // Frequency oracle: 1e5 draws over 5 actions, each within 10% of 0.2.
        let net = flat_qnet(2, 5, &[0.0; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut freq = [0usize; 5];
        let draws = 100_000;
        for _ in 0..draws {
            let a = dqn_select_action(&net, &[0.0, 0.0], 1.0, &mut rng).unwrap();
            freq[a] += 1;
        }
        for &f in &freq {
            let share = f as f64 / draws as f64;
            assert!((share - 0.2).abs() < 0.02, "share = {share}");
        }
    }

    #[test]
    fn action_decode_covers_all_cases() {
        assert_eq!(dqn_decode_action(0, 3), Some((0, 1.0)));
        assert_eq!(dqn_decode_action(1, 3), Some((0, -1.0)));
        assert_eq!(dqn_decode_action(4, 3), Some((2, 1.0)));
        assert_eq!(dqn_decode_action(5, 3), Some((2, -1.0)));
        assert_eq!(dqn_decode_action(6, 3), None);
        assert_eq!(dqn_action_count(3), 7);
    }

    #[test]
    fn zero_discount_q_converges_to_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut qnet = Mlp::init(&mut rng, &[4, 16, 16, 3], OutputActivation::Linear).unwrap();
        let mut target = qnet.clone();
        let mut opt = AdamState::new(&qnet, 1e-2);
        let t = DqnTransition {
            state: vec![0.3, -0.2, 0.8, 0.1],
            action: 1,
            reward: 0.7,
            next_state: vec![0.0; 4],
        };
        let batch: Vec<&DqnTransition> = vec![&t; 8];
        for _ in 0..2000 {
            dqn_train_step(&mut qnet, &mut target, &mut opt, &batch, 0.0, 0.0).unwrap();
        }
        let q = qnet.predict(&t.state).unwrap();
        assert!((q[1] - 0.7).abs() < 1e-3, "q = {:?}", q);
    }

    #[test]
    fn zero_tau_freezes_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut qnet = Mlp::init(&mut rng, &[4, 8, 3], OutputActivation::Linear).unwrap();
        let mut target = qnet.clone();
        let frozen = target.clone();
        let mut opt = AdamState::new(&qnet, 1e-3);
        let t = DqnTransition {
            state: vec![0.1, 0.2, 0.3, 0.4],
            action: 0,
            reward: 1.0,
            next_state: vec![0.4, 0.3, 0.2, 0.1],
        };
        let batch: Vec<&DqnTransition> = vec![&t; 4];
        dqn_train_step(&mut qnet, &mut target, &mut opt, &batch, 0.9, 0.0).unwrap();
        assert_eq!(target, frozen);
        assert_ne!(qnet, frozen);
    }

    #[test]
    fn td_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let qnet = Mlp::init(&mut rng, &[4, 12, 12, 3], OutputActivation::Linear).unwrap();
        let target = qnet.clone();
        let transitions: Vec<DqnTransition> = (0..6)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(50 + i);
                DqnTransition {
                    state: (0..4).map(|_| r.gen_range(-1.0..1.0)).collect(),
                    action: r.gen_range(0..3),
                    reward: r.gen_range(-1.0..1.0),
                    next_state: (0..4).map(|_| r.gen_range(-1.0..1.0)).collect(),
                }
            })
            .collect();
        let gamma = 0.9;
        let w = transitions.len();

        // Frozen targets.
        let targets: Vec<f64> = transitions
            .iter()
            .map(|t| {
                let nq = target.predict(&t.next_state).unwrap();
                t.reward + gamma * nq.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            })
            .collect();

        // Analytic gradient along the train-step path.
        let mut states = ndarray::Array2::zeros((w, 4));
        for (row, t) in transitions.iter().enumerate() {
            states
                .row_mut(row)
                .assign(&ndarray::Array1::from_vec(t.state.clone()));
        }
        let (q, cache) = qnet.forward_batch(states.view()).unwrap();
        let mut dq = ndarray::Array2::zeros(q.dim());
        for (row, t) in transitions.iter().enumerate() {
            dq[[row, t.action]] = 2.0 * (q[[row, t.action]] - targets[row]) / w as f64;
        }
        let (analytic, _) = qnet.backward_batch(&cache, dq.view(), false).unwrap();

        let loss = |net: &Mlp| -> f64 {
            transitions
                .iter()
                .zip(&targets)
                .map(|(t, &y)| {
                    let q = net.predict(&t.state).unwrap()[t.action];
                    (q - y) * (q - y)
                })
                .sum::<f64>()
                / w as f64
        };

        let mut probe_net = qnet.clone();
        let n = probe_net.num_params();
        let h = 1e-5;
        let mut prng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let idx = prng.gen_range(0..n);
            let orig = probe_net.param(idx);
            probe_net.set_param(idx, orig + h);
            let plus = loss(&probe_net);
            probe_net.set_param(idx, orig - h);
            let minus = loss(&probe_net);
            probe_net.set_param(idx, orig);
            let fd = (plus - minus) / (2.0 * h);

            let mut flat = 0usize;
            let mut got = None;
            for (wg, bg) in analytic.weights.iter().zip(&analytic.biases) {
                if idx < flat + wg.len() {
                    got = Some(wg.as_slice().unwrap()[idx - flat]);
                    break;
                }
                flat += wg.len();
                if idx < flat + bg.len() {
                    got = Some(bg[idx - flat]);
                    break;
                }
                flat += bg.len();
            }
            let got = got.unwrap();
            let denom = got.abs().max(fd.abs()).max(1e-8);
            assert!(
                (got - fd).abs() / denom < 1e-4,
                "idx {idx}: analytic {got}, fd {fd}"
            );
        }
    }

    #[test]
    fn dqn_training_runs_and_respects_budget() {
        use crate::scenario::{generate_ues, FieldConfig};
        use crate::ChannelParams;

        let field = FieldConfig {
            num_ues: 6,
            ..FieldConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ues = generate_ues(&mut rng, &field).unwrap();
        let assignment = crate::clustering::kmeans(&ues, 2, &mut rng, 5, 100, 1e-4).unwrap();
        let scenario =
            TrainingScenario::assemble(field, ChannelParams::dense_urban(), ues, assignment)
                .unwrap();
        let config = DqnConfig {
            train: TrainConfig {
                episodes: 2,
                steps_per_episode: 12,
                batch: 8,
                buffer: 100,
                hidden: vec![8, 8],
                ..TrainConfig::default()
            },
            ..DqnConfig::default()
        };
        let a = run_dqn_training(&scenario, &config, FadingMode::Sampled, 21).unwrap();
        assert_eq!(a.feasibility.checks, 2 * 12 * 2);
        assert_eq!(a.feasibility.violations, 0);
        let b = run_dqn_training(&scenario, &config, FadingMode::Sampled, 21).unwrap();
        let bits = |run: &DqnTrainingRun| -> Vec<u64> {
            run.step_rewards.iter().map(|r| r.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }
}
