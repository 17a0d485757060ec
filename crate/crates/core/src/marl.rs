//! MADDPG power allocation over fixed UAV agents: observation and action
//! encoding, the shared replay buffer, the allocation environment, one-step
//! centralized-critic training, and the full training loop.
//!
//! Each agent observes only its own cluster (powers, normalized rates, a
//! load scalar, and a padding mask) and emits a bounded power delta per UE
//! slot. Critics are centralized: they score the concatenation of every
//! agent's observation and action. Observation vectors flatten as
//! `[powers | rates | mask | count]`, so one observation is `3 * pad + 1`
//! wide; the global state is the agent-ordered concatenation of these and a
//! joint action is the concatenation of the per-agent delta vectors.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelParams, FadingMode};
use crate::clustering::ClusterAssignment;
use crate::geo::{Point2, Point3};
use crate::neural::{soft_update, AdamState, Mlp, NeuralError, OutputActivation};
use crate::scenario::{
    self, EvaluationResult, FieldConfig, InterferencePower, NetworkSnapshot, PowerAllocation,
    ScenarioError,
};

#[derive(Debug, Error)]
pub enum MarlError {
    #[error("cluster {cluster} has {size} UEs but the pad width is {pad}")]
    ClusterTooLarge {
        cluster: usize,
        size: usize,
        pad: usize,
    },
    #[error("replay buffer holds {have} transitions, need {need}")]
    BufferUnderfilled { have: usize, need: usize },
    #[error("width mismatch: {0}")]
    WidthMismatch(String),
    #[error("power budget must be non-negative, got {0}")]
    NegativeBudget(f64),
    #[error("non-finite {what} for agent {agent}")]
    NonFiniteLoss { agent: usize, what: &'static str },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// How the scalar reward is assembled from an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardFormula {
    /// Served count plus `(total rate - wasted rate) / threshold`: each
    /// served UE contributes exactly 2, each unserved UE its fractional
    /// progress toward the threshold.
    Shaped,
    /// Served count plus the raw served-rate sum minus the wasted rate, in
    /// bits/s. Kept for comparison; the rate term dwarfs the count term.
    Literal,
}

/// Whether every agent trains on the global reward or on its own cluster's
/// share.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardScope {
    Shared,
    PerAgent,
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Mini-batch size per gradient update.
    pub batch: usize,
    /// Replay capacity in transitions.
    pub buffer: usize,
    pub gamma: f64,
    pub tau: f64,
    pub noise_sigma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Largest per-step power change per UE, in watts.
    pub delta_max: f64,
    /// Observation/action slots per agent; `None` sizes it to the largest
    /// cluster.
    pub pad_width: Option<usize>,
    /// Hidden layer widths for actors and critics.
    pub hidden: Vec<usize>,
    pub reward_formula: RewardFormula,
    pub reward_scope: RewardScope,
    pub interference_power: InterferencePower,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            steps_per_episode: 200,
            batch: 64,
            buffer: 100_000,
            gamma: 0.95,
            tau: 0.01,
            noise_sigma: 0.2,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            delta_max: 0.05,
            pad_width: None,
            hidden: vec![128, 128],
            reward_formula: RewardFormula::Shaped,
            reward_scope: RewardScope::Shared,
            interference_power: InterferencePower::CurrentMean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MarlError> {
        if self.episodes == 0 || self.steps_per_episode == 0 {
            return Err(MarlError::InvalidConfig("episodes and steps must be positive".into()));
        }
        if self.batch == 0 || self.buffer < self.batch {
            return Err(MarlError::InvalidConfig(format!(
                "need buffer ({}) >= batch ({}) > 0",
                self.buffer, self.batch
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(MarlError::InvalidConfig(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(MarlError::InvalidConfig(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.noise_sigma < 0.0 {
            return Err(MarlError::InvalidConfig("noise_sigma must be non-negative".into()));
        }
        if self.delta_max <= 0.0 {
            return Err(MarlError::InvalidConfig("delta_max must be positive".into()));
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return Err(MarlError::InvalidConfig("learning rates must be positive".into()));
        }
        if self.hidden.is_empty() {
            return Err(MarlError::InvalidConfig("need at least one hidden layer".into()));
        }
        Ok(())
    }
}

/// One agent's view of its cluster, padded to a fixed width.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Allocated power per slot, watts; zero in padded slots.
    pub powers: Vec<f64>,
    /// Rate per slot divided by the threshold; zero in padded slots.
    pub rates: Vec<f64>,
    /// Cluster size over pad width.
    pub count: f64,
    /// True for real slots, false for padding.
    pub mask: Vec<bool>,
}

impl Observation {
    /// Flattened width of an observation with `pad` slots.
    pub fn width(pad: usize) -> usize {
        3 * pad + 1
    }

    /// Flatten as `[powers | rates | mask | count]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let pad = self.powers.len();
        let mut out = Vec::with_capacity(Self::width(pad));
        out.extend_from_slice(&self.powers);
        out.extend_from_slice(&self.rates);
        out.extend(self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        out.push(self.count);
        out
    }

    /// Column range of the mask inside a flattened observation.
    pub fn mask_range(pad: usize) -> std::ops::Range<usize> {
        2 * pad..3 * pad
    }
}

/// Bounded power deltas, one slot per padded UE position.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionVector {
    /// Entries in [-1, 1]; padded slots are zero.
    pub deltas: Vec<f64>,
}

/// One step of experience shared by all agents.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Concatenation of all agents' flattened observations.
    pub global_state: Vec<f64>,
    /// Concatenation of all agents' action vectors.
    pub joint_action: Vec<f64>,
    /// Per-agent rewards; identical entries under [`RewardScope::Shared`].
    pub rewards: Vec<f64>,
    pub next_global_state: Vec<f64>,
}

/// Fixed-capacity FIFO ring with uniform sampling (with replacement).
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    cursor: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Insert, evicting the oldest item once full.
    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.cursor] = item;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Uniform sample of `count` items, with replacement. Fails until the
    /// buffer holds at least `count` items.
    pub fn sample<'a, R: Rng + ?Sized>(
        &'a self,
        rng: &mut R,
        count: usize,
    ) -> Result<Vec<&'a T>, MarlError> {
        if self.items.len() < count {
            return Err(MarlError::BufferUnderfilled {
                have: self.items.len(),
                need: count,
            });
        }
        Ok((0..count)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect())
    }
}

/// Online and target actor/critic networks plus optimizer state for one UAV.
#[derive(Clone, Debug)]
pub struct AgentBundle {
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
}

impl AgentBundle {
    /// Fresh networks with targets initialized to copies of the online nets.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        obs_width: usize,
        action_width: usize,
        global_width: usize,
        joint_action_width: usize,
        hidden: &[usize],
        actor_lr: f64,
        critic_lr: f64,
    ) -> Result<Self, MarlError> {
        let mut actor_sizes = vec![obs_width];
        actor_sizes.extend_from_slice(hidden);
        actor_sizes.push(action_width);
        let mut critic_sizes = vec![global_width + joint_action_width];
        critic_sizes.extend_from_slice(hidden);
        critic_sizes.push(1);
        let actor = Mlp::init(rng, &actor_sizes, OutputActivation::Tanh)?;
        let critic = Mlp::init(rng, &critic_sizes, OutputActivation::Linear)?;
        let actor_opt = AdamState::new(&actor, actor_lr);
        let critic_opt = AdamState::new(&critic, critic_lr);
        Ok(Self {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            actor_opt,
            critic_opt,
        })
    }
}

/// Observation for one cluster: powers and rates of its UEs in cluster-slot
/// order, rates normalized by the threshold, zero-padded to `pad_width`.
pub fn build_observation(
    cluster: usize,
    allocation: &PowerAllocation,
    eval: &EvaluationResult,
    assignment: &ClusterAssignment,
    pad_width: usize,
    rate_threshold: f64,
) -> Result<Observation, MarlError> {
    let members = assignment.member_lists();
    let size = assignment.sizes[cluster];
    if size > pad_width {
        return Err(MarlError::ClusterTooLarge {
            cluster,
            size,
            pad: pad_width,
        });
    }
    let mut powers = vec![0.0; pad_width];
    let mut rates = vec![0.0; pad_width];
    let mut mask = vec![false; pad_width];
    for (slot, &ue) in members[cluster].iter().enumerate() {
        powers[slot] = allocation.clusters[cluster][slot];
        rates[slot] = eval.per_ue[ue].rate / rate_threshold;
        mask[slot] = true;
    }
    Ok(Observation {
        powers,
        rates,
        count: size as f64 / pad_width as f64,
        mask,
    })
}

/// Actor output plus exploration noise, clipped to [-1, 1], padded slots
/// zeroed. With `noise_sigma == 0` no randomness is consumed.
pub fn select_action<R: Rng + ?Sized>(
    agent: &AgentBundle,
    obs: &Observation,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<ActionVector, MarlError> {
    let input = obs.to_vec();
    let mut deltas = agent.actor.predict(&input)?;
    if deltas.len() != obs.mask.len() {
        return Err(MarlError::WidthMismatch(format!(
            "actor emits {} deltas for {} slots",
            deltas.len(),
            obs.mask.len()
        )));
    }
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma)
            .map_err(|e| MarlError::InvalidConfig(e.to_string()))?;
        for d in deltas.iter_mut() {
            *d += noise.sample(rng);
        }
    }
    for (d, &real) in deltas.iter_mut().zip(&obs.mask) {
        *d = if real { d.clamp(-1.0, 1.0) } else { 0.0 };
    }
    Ok(ActionVector { deltas })
}

/// Apply bounded deltas to one cluster's powers and project back onto the
/// budget. Candidates are `clamp(p + delta_max * a, 0, budget)`; if they
/// exceed the budget, UEs are granted their candidate power in ascending
/// distance order until the budget runs out, the next UE receives the
/// remainder, and the rest get zero. The result always fits the budget.
pub fn apply_action(
    powers: &[f64],
    action: &ActionVector,
    delta_max: f64,
    distances: &[f64],
    power_budget: f64,
) -> Result<Vec<f64>, MarlError> {
    if power_budget < 0.0 {
        return Err(MarlError::NegativeBudget(power_budget));
    }
    if action.deltas.len() < powers.len() || distances.len() != powers.len() {
        return Err(MarlError::WidthMismatch(format!(
            "{} powers, {} deltas, {} distances",
            powers.len(),
            action.deltas.len(),
            distances.len()
        )));
    }
    let mut candidates: Vec<f64> = powers
        .iter()
        .zip(&action.deltas)
        .map(|(&p, &a)| (p + delta_max * a).clamp(0.0, power_budget))
        .collect();
    let total: f64 = candidates.iter().sum();
    if total <= power_budget {
        return Ok(candidates);
    }
    let mut order: Vec<usize> = (0..powers.len()).collect();
    order.sort_by(|&a, &b| {
        distances[a]
            .partial_cmp(&distances[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut remaining = power_budget;
    let mut granted = vec![0.0; powers.len()];
    for &i in &order {
        let grant = candidates[i].min(remaining);
        granted[i] = grant;
        remaining -= grant;
    }
    candidates.copy_from_slice(&granted);
    Ok(candidates)
}

/// Reward components for one evaluation.
#[derive(Clone, Debug)]
pub struct RewardBreakdown {
    pub total: f64,
    /// Number of served UEs.
    pub served_term: f64,
    /// Rate shaping after subtracting the wasted rate.
    pub rate_term: f64,
    /// Per-cluster share of the total (own served UEs and own rates only).
    pub per_cluster: Vec<f64>,
}

/// Served count plus effective-rate shaping. Under [`RewardFormula::Shaped`]
/// a served UE contributes exactly 2 (one for the count, one for its capped
/// rate) and an unserved UE contributes `rate / threshold` < 1.
pub fn compute_reward(
    eval: &EvaluationResult,
    rate_threshold: f64,
    formula: RewardFormula,
) -> RewardBreakdown {
    let k = eval.served_per_cluster.len();
    let mut rate_sum = vec![0.0f64; k];
    let mut wasted = vec![0.0f64; k];
    let mut served_rate_sum = vec![0.0f64; k];
    for (stats, &j) in eval.per_ue.iter().zip(&eval.cluster_of) {
        rate_sum[j] += stats.rate;
        if stats.served {
            wasted[j] += stats.rate - rate_threshold;
            served_rate_sum[j] += stats.rate;
        }
    }
    let per_cluster: Vec<f64> = (0..k)
        .map(|j| {
            let served = eval.served_per_cluster[j] as f64;
            match formula {
                RewardFormula::Shaped => served + (rate_sum[j] - wasted[j]) / rate_threshold,
                RewardFormula::Literal => served + (served_rate_sum[j] - wasted[j]),
            }
        })
        .collect();
    let served_term = eval.total_served as f64;
    let total: f64 = per_cluster.iter().sum();
    RewardBreakdown {
        total,
        served_term,
        rate_term: total - served_term,
        per_cluster,
    }
}

/// Counts every post-projection budget check performed during a run.
#[derive(Clone, Copy, Debug, Default)]
pub struct FeasibilityCounter {
    pub checks: u64,
    pub violations: u64,
}

/// Static inputs of one training run: the field, the channel, and the
/// already-clustered user layout.
#[derive(Clone, Debug)]
pub struct TrainingScenario {
    pub field: FieldConfig,
    pub channel: ChannelParams,
    pub ue_positions: Vec<Point2>,
    pub assignment: ClusterAssignment,
    pub uav_positions: Vec<Point3>,
}

impl TrainingScenario {
    /// Validate the pieces and place one UAV over each centroid.
    pub fn assemble(
        field: FieldConfig,
        channel: ChannelParams,
        ue_positions: Vec<Point2>,
        assignment: ClusterAssignment,
    ) -> Result<Self, MarlError> {
        field.validate()?;
        channel
            .validate()
            .map_err(ScenarioError::Channel)?;
        let uav_positions = scenario::place_uavs(&assignment, &field)?;
        Ok(Self {
            field,
            channel,
            ue_positions,
            assignment,
            uav_positions,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.assignment.centroids.len()
    }

    pub fn max_cluster_size(&self) -> usize {
        self.assignment.sizes.iter().copied().max().unwrap_or(0)
    }
}

/// The power-allocation environment: holds the current allocation, applies
/// joint actions under the budget projection, and evaluates the network
/// with fresh fading each step.
pub struct AllocationEnv<'a> {
    scenario: &'a TrainingScenario,
    snapshot: NetworkSnapshot,
    pad: usize,
    delta_max: f64,
    fading: FadingMode,
    interference: InterferencePower,
    reward_formula: RewardFormula,
    /// Horizontal UE-to-own-UAV distances per cluster, in slot order.
    distances: Vec<Vec<f64>>,
    pub feasibility: FeasibilityCounter,
    last_eval: Option<EvaluationResult>,
}

/// Everything an agent loop needs from one environment step.
pub struct StepOutcome {
    pub reward: RewardBreakdown,
    pub observations: Vec<Observation>,
    pub total_served: usize,
    pub power_fraction: f64,
}

impl<'a> AllocationEnv<'a> {
    pub fn new(
        scenario: &'a TrainingScenario,
        pad_width: Option<usize>,
        delta_max: f64,
        fading: FadingMode,
        interference: InterferencePower,
        reward_formula: RewardFormula,
    ) -> Result<Self, MarlError> {
        let pad = pad_width.unwrap_or_else(|| scenario.max_cluster_size());
        for (j, &size) in scenario.assignment.sizes.iter().enumerate() {
            if size > pad {
                return Err(MarlError::ClusterTooLarge {
                    cluster: j,
                    size,
                    pad,
                });
            }
        }
        let members = scenario.assignment.member_lists();
        let distances: Vec<Vec<f64>> = members
            .iter()
            .enumerate()
            .map(|(j, list)| {
                list.iter()
                    .map(|&ue| {
                        scenario.ue_positions[ue].dist(&scenario.uav_positions[j].ground())
                    })
                    .collect()
            })
            .collect();
        let snapshot = NetworkSnapshot {
            ue_positions: scenario.ue_positions.clone(),
            uav_positions: scenario.uav_positions.clone(),
            assignment: scenario.assignment.clone(),
            allocation: PowerAllocation::equal_split(
                &scenario.assignment.sizes,
                scenario.field.power_budget,
            ),
        };
        Ok(Self {
            scenario,
            snapshot,
            pad,
            delta_max,
            fading,
            interference,
            reward_formula,
            distances,
            feasibility: FeasibilityCounter::default(),
            last_eval: None,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.scenario.num_clusters()
    }

    pub fn pad_width(&self) -> usize {
        self.pad
    }

    pub fn obs_width(&self) -> usize {
        Observation::width(self.pad)
    }

    pub fn global_width(&self) -> usize {
        self.num_agents() * self.obs_width()
    }

    pub fn joint_action_width(&self) -> usize {
        self.num_agents() * self.pad
    }

    pub fn allocation(&self) -> &PowerAllocation {
        &self.snapshot.allocation
    }

    pub fn last_eval(&self) -> Option<&EvaluationResult> {
        self.last_eval.as_ref()
    }

    fn observe_all(&self, eval: &EvaluationResult) -> Result<Vec<Observation>, MarlError> {
        (0..self.num_agents())
            .map(|j| {
                build_observation(
                    j,
                    &self.snapshot.allocation,
                    eval,
                    &self.snapshot.assignment,
                    self.pad,
                    self.scenario.field.rate_threshold,
                )
            })
            .collect()
    }

    /// Reset to the equal split and evaluate once to form the initial
    /// observations.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<Observation>, MarlError> {
        self.snapshot.allocation = PowerAllocation::equal_split(
            &self.scenario.assignment.sizes,
            self.scenario.field.power_budget,
        );
        let eval = scenario::evaluate_network_with(
            &self.snapshot,
            &self.scenario.channel,
            &self.scenario.field,
            rng,
            self.fading,
            self.interference,
        )?;
        let obs = self.observe_all(&eval)?;
        self.last_eval = Some(eval);
        Ok(obs)
    }

    /// Apply one joint action, redraw fading, evaluate, and reward.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        actions: &[ActionVector],
        rng: &mut R,
    ) -> Result<StepOutcome, MarlError> {
        let k = self.num_agents();
        if actions.len() != k {
            return Err(MarlError::WidthMismatch(format!(
                "{} actions for {} agents",
                actions.len(),
                k
            )));
        }
        let budget = self.scenario.field.power_budget;
        for j in 0..k {
            let updated = apply_action(
                &self.snapshot.allocation.clusters[j],
                &actions[j],
                self.delta_max,
                &self.distances[j],
                budget,
            )?;
            self.feasibility.checks += 1;
            if updated.iter().sum::<f64>() > budget + 1e-9 {
                self.feasibility.violations += 1;
            }
            self.snapshot.allocation.clusters[j] = updated;
        }
        let eval = scenario::evaluate_network_with(
            &self.snapshot,
            &self.scenario.channel,
            &self.scenario.field,
            rng,
            self.fading,
            self.interference,
        )?;
        let reward = compute_reward(
            &eval,
            self.scenario.field.rate_threshold,
            self.reward_formula,
        );
        let observations = self.observe_all(&eval)?;
        let outcome = StepOutcome {
            reward,
            observations,
            total_served: eval.total_served,
            power_fraction: self.snapshot.allocation.budget_fraction(),
        };
        self.last_eval = Some(eval);
        Ok(outcome)
    }
}

/// Concatenate flattened observations into a global state vector.
pub fn flatten_observations(observations: &[Observation]) -> Vec<f64> {
    let mut out = Vec::new();
    for obs in observations {
        out.extend(obs.to_vec());
    }
    out
}

/// Concatenate per-agent deltas into a joint action vector.
pub fn flatten_actions(actions: &[ActionVector]) -> Vec<f64> {
    let mut out = Vec::new();
    for a in actions {
        out.extend_from_slice(&a.deltas);
    }
    out
}

/// Per-agent losses from one [`train_step`].
#[derive(Clone, Debug)]
pub struct TrainDiagnostics {
    pub critic_losses: Vec<f64>,
    /// Mean critic value of the re-chosen own action; the actor ascends this.
    pub actor_objectives: Vec<f64>,
}

fn check_widths(agents: &[AgentBundle]) -> Result<(usize, usize), MarlError> {
    let obs_w = agents[0].actor.input_len();
    let m = agents[0].actor.output_len();
    let k = agents.len();
    let critic_in = k * obs_w + k * m;
    for (j, a) in agents.iter().enumerate() {
        if a.actor.input_len() != obs_w
            || a.actor.output_len() != m
            || a.critic.input_len() != critic_in
            || a.critic.output_len() != 1
        {
            return Err(MarlError::WidthMismatch(format!(
                "agent {j} network widths disagree with agent 0"
            )));
        }
    }
    Ok((obs_w, m))
}

/// Run target actors over the per-agent observation slices of a batched
/// global state, masking padded slots, and return the joint action batch.
fn target_joint_actions(
    agents: &[AgentBundle],
    states: &Array2<f64>,
    obs_w: usize,
    m: usize,
) -> Result<Array2<f64>, MarlError> {
    let w = states.nrows();
    let mut joint = Array2::zeros((w, agents.len() * m));
    let mask_range = Observation::mask_range(m);
    for (i, agent) in agents.iter().enumerate() {
        let slice = states.slice(s![.., i * obs_w..(i + 1) * obs_w]);
        let (mut actions, _) = agent.target_actor.forward_batch(slice)?;
        let mask = slice.slice(s![.., mask_range.clone()]);
        actions.zip_mut_with(&mask, |a, &m| *a *= m);
        joint.slice_mut(s![.., i * m..(i + 1) * m]).assign(&actions);
    }
    Ok(joint)
}

/// One centralized training step on a shared mini-batch: per agent, form the
/// bootstrapped target from the target networks, descend the critic's mean
/// squared TD error, ascend the actor along the critic's action gradient,
/// and soft-update both targets.
pub fn train_step(
    agents: &mut [AgentBundle],
    batch: &[&Transition],
    gamma: f64,
    tau: f64,
) -> Result<TrainDiagnostics, MarlError> {
    assert!(!agents.is_empty() && !batch.is_empty());
    let (obs_w, m) = check_widths(agents)?;
    let k = agents.len();
    let (s_width, a_width) = (k * obs_w, k * m);
    let w = batch.len();
    for t in batch {
        if t.global_state.len() != s_width
            || t.joint_action.len() != a_width
            || t.next_global_state.len() != s_width
            || t.rewards.len() != k
        {
            return Err(MarlError::WidthMismatch(
                "transition widths disagree with agent networks".into(),
            ));
        }
    }

    let mut states = Array2::zeros((w, s_width));
    let mut next_states = Array2::zeros((w, s_width));
    let mut state_actions = Array2::zeros((w, s_width + a_width));
    let mut rewards = Array2::zeros((w, k));
    for (row, t) in batch.iter().enumerate() {
        states
            .row_mut(row)
            .assign(&Array1::from_vec(t.global_state.clone()));
        next_states
            .row_mut(row)
            .assign(&Array1::from_vec(t.next_global_state.clone()));
        state_actions
            .slice_mut(s![row, ..s_width])
            .assign(&Array1::from_vec(t.global_state.clone()));
        state_actions
            .slice_mut(s![row, s_width..])
            .assign(&Array1::from_vec(t.joint_action.clone()));
        rewards
            .row_mut(row)
            .assign(&Array1::from_vec(t.rewards.clone()));
    }

    // Next-step joint action from every target actor, shared by all critics.
    let next_joint = target_joint_actions(agents, &next_states, obs_w, m)?;
    let mut next_state_actions = Array2::zeros((w, s_width + a_width));
    next_state_actions
        .slice_mut(s![.., ..s_width])
        .assign(&next_states);
    next_state_actions
        .slice_mut(s![.., s_width..])
        .assign(&next_joint);

    let mut critic_losses = Vec::with_capacity(k);
    let mut actor_objectives = Vec::with_capacity(k);

    for j in 0..k {
        // Bootstrapped target y = r_j + gamma * Q'(s', a'_1..a'_K).
        let (next_q, _) = agents[j].target_critic.forward_batch(next_state_actions.view())?;
        let mut targets = next_q;
        targets
            .column_mut(0)
            .zip_mut_with(&rewards.column(j), |q, &r| *q = r + gamma * *q);

        // Critic descent on the mean squared TD error.
        let (q, critic_cache) = agents[j].critic.forward_batch(state_actions.view())?;
        let diff = &q - &targets;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / w as f64;
        if !loss.is_finite() {
            return Err(MarlError::NonFiniteLoss {
                agent: j,
                what: "critic loss",
            });
        }
        let dq = diff.mapv(|d| 2.0 * d / w as f64);
        let (critic_grads, _) = agents[j].critic.backward_batch(&critic_cache, dq.view(), false)?;
        let (critic, critic_opt) = (&mut agents[j].critic, &mut agents[j].critic_opt);
        critic_opt.step(critic, &critic_grads)?;
        critic_losses.push(loss);

        // Actor ascent on Q(s, a_1..mu_j(o_j)..a_K) via the chained gradient.
        let obs_slice = states.slice(s![.., j * obs_w..(j + 1) * obs_w]);
        let (own_actions, actor_cache) = agents[j].actor.forward_batch(obs_slice)?;
        let mask = obs_slice.slice(s![.., Observation::mask_range(m)]);
        let mut masked_actions = own_actions;
        masked_actions.zip_mut_with(&mask, |a, &mk| *a *= mk);

        let mut replaced = state_actions.clone();
        replaced
            .slice_mut(s![.., s_width + j * m..s_width + (j + 1) * m])
            .assign(&masked_actions);
        let (values, value_cache) = agents[j].critic.forward_batch(replaced.view())?;
        let objective = values.sum() / w as f64;
        if !objective.is_finite() {
            return Err(MarlError::NonFiniteLoss {
                agent: j,
                what: "actor objective",
            });
        }
        // Gradient of the loss -mean(Q) with respect to the critic output.
        let dvalue = Array2::from_elem((w, 1), -1.0 / w as f64);
        let input_grad = agents[j].critic.input_gradient_batch(&value_cache, dvalue.view())?;
        let mut action_grad = input_grad
            .slice(s![.., s_width + j * m..s_width + (j + 1) * m])
            .to_owned();
        action_grad.zip_mut_with(&mask, |g, &mk| *g *= mk);
        let (actor_grads, _) = agents[j].actor.backward_batch(&actor_cache, action_grad.view(), false)?;
        let (actor, actor_opt) = (&mut agents[j].actor, &mut agents[j].actor_opt);
        actor_opt.step(actor, &actor_grads)?;
        actor_objectives.push(objective);

        let agent = &mut agents[j];
        soft_update(&mut agent.target_actor, &agent.actor, tau)?;
        soft_update(&mut agent.target_critic, &agent.critic, tau)?;
    }

    Ok(TrainDiagnostics {
        critic_losses,
        actor_objectives,
    })
}

/// Per-episode aggregates of a training run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub mean_reward: f64,
    pub mean_served: f64,
    pub mean_power_fraction: f64,
}

/// Everything produced by one training run.
pub struct TrainingRun {
    pub agents: Vec<AgentBundle>,
    pub episodes: Vec<EpisodeMetrics>,
    pub step_rewards: Vec<f64>,
    pub feasibility: FeasibilityCounter,
}

/// The full training loop: for each episode reset to the equal split, then
/// alternate action selection (with exploration noise), the budget-projected
/// power update, a fresh-fading evaluation, replay insertion, and one
/// gradient update per step once the buffer can fill a batch. Deterministic
/// for a given master seed.
pub fn run_training(
    scenario: &TrainingScenario,
    config: &TrainConfig,
    fading: FadingMode,
    seed: u64,
) -> Result<TrainingRun, MarlError> {
    config.validate()?;
    let mut env = AllocationEnv::new(
        scenario,
        config.pad_width,
        config.delta_max,
        fading,
        config.interference_power,
        config.reward_formula,
    )?;
    let k = env.num_agents();
    let (obs_w, m) = (env.obs_width(), env.pad_width());

    let mut rng_init = crate::seeding::stream(seed, crate::seeding::SALT_NET_INIT);
    let mut agents: Vec<AgentBundle> = (0..k)
        .map(|_| {
            AgentBundle::new(
                &mut rng_init,
                obs_w,
                m,
                env.global_width(),
                env.joint_action_width(),
                &config.hidden,
                config.actor_lr,
                config.critic_lr,
            )
        })
        .collect::<Result<_, _>>()?;

    let mut rng_explore = crate::seeding::stream(seed, crate::seeding::SALT_EXPLORE);
    let mut rng_env = crate::seeding::stream(seed, crate::seeding::SALT_ENV);
    let mut rng_replay = crate::seeding::stream(seed, crate::seeding::SALT_REPLAY);

    let mut buffer: ReplayBuffer<Transition> = ReplayBuffer::new(config.buffer);
    let mut episodes = Vec::with_capacity(config.episodes);
    let mut step_rewards = Vec::with_capacity(config.episodes * config.steps_per_episode);

    for _ in 0..config.episodes {
        let mut observations = env.reset(&mut rng_env)?;
        let mut global = flatten_observations(&observations);
        let (mut reward_acc, mut served_acc, mut power_acc) = (0.0, 0.0, 0.0);
        for _ in 0..config.steps_per_episode {
            let actions: Vec<ActionVector> = agents
                .iter()
                .zip(&observations)
                .map(|(agent, obs)| select_action(agent, obs, config.noise_sigma, &mut rng_explore))
                .collect::<Result<_, _>>()?;
            let outcome = env.step(&actions, &mut rng_env)?;
            let rewards = match config.reward_scope {
                RewardScope::Shared => vec![outcome.reward.total; k],
                RewardScope::PerAgent => outcome.reward.per_cluster.clone(),
            };
            let next_global = flatten_observations(&outcome.observations);
            buffer.push(Transition {
                global_state: global,
                joint_action: flatten_actions(&actions),
                rewards,
                next_global_state: next_global.clone(),
            });
            if buffer.len() >= config.batch {
                let batch = buffer.sample(&mut rng_replay, config.batch)?;
                train_step(&mut agents, &batch, config.gamma, config.tau)?;
            }
            reward_acc += outcome.reward.total;
            served_acc += outcome.total_served as f64;
            power_acc += outcome.power_fraction;
            step_rewards.push(outcome.reward.total);
            global = next_global;
            observations = outcome.observations;
        }
        let steps = config.steps_per_episode as f64;
        episodes.push(EpisodeMetrics {
            mean_reward: reward_acc / steps,
            mean_served: served_acc / steps,
            mean_power_fraction: power_acc / steps,
        });
    }

    Ok(TrainingRun {
        agents,
        episodes,
        step_rewards,
        feasibility: env.feasibility,
    })
}

/// A policy driving the environment during evaluation rollouts.
pub trait PowerController {
    fn joint_action(&mut self, observations: &[Observation]) -> Result<Vec<ActionVector>, MarlError>;
}

/// Greedy MADDPG policy: deterministic actor outputs, no exploration noise.
pub struct MaddpgPolicy<'a> {
    pub agents: &'a [AgentBundle],
}

impl PowerController for MaddpgPolicy<'_> {
    fn joint_action(&mut self, observations: &[Observation]) -> Result<Vec<ActionVector>, MarlError> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        self.agents
            .iter()
            .zip(observations)
            .map(|(agent, obs)| select_action(agent, obs, 0.0, &mut rng))
            .collect()
    }
}

/// Per-step series from one evaluation rollout.
#[derive(Clone, Debug, Default)]
pub struct RolloutMetrics {
    pub served: Vec<usize>,
    pub power_fraction: Vec<f64>,
    pub rewards: Vec<f64>,
}

/// Roll a policy forward from the equal-split reset without training.
pub fn greedy_rollout<R: Rng + ?Sized>(
    env: &mut AllocationEnv,
    controller: &mut dyn PowerController,
    steps: usize,
    rng: &mut R,
) -> Result<RolloutMetrics, MarlError> {
    let mut observations = env.reset(rng)?;
    let mut metrics = RolloutMetrics::default();
    for _ in 0..steps {
        let actions = controller.joint_action(&observations)?;
        let outcome = env.step(&actions, rng)?;
        metrics.served.push(outcome.total_served);
        metrics.power_fraction.push(outcome.power_fraction);
        metrics.rewards.push(outcome.reward.total);
        observations = outcome.observations;
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::LinkStats;
    use crate::clustering;
    use crate::scenario::generate_ues;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_scenario(num_ues: usize, clusters: usize, seed: u64) -> TrainingScenario {
        let field = FieldConfig {
            num_ues,
            ..FieldConfig::default()
        };
        let channel = ChannelParams::dense_urban();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ues = generate_ues(&mut rng, &field).unwrap();
        let assignment = clustering::kmeans(&ues, clusters, &mut rng, 5, 200, 1e-4).unwrap();
        TrainingScenario::assemble(field, channel, ues, assignment).unwrap()
    }

    fn eval_with_rates(rates: &[f64], clusters: &[usize], threshold: f64) -> EvaluationResult {
        let k = clusters.iter().copied().max().unwrap_or(0) + 1;
        let geometry = crate::channel::link_geometry(
            Point2::new(0.0, 0.0),
            Point3::new(0.0, 0.0, 500.0),
        )
        .unwrap();
        let mut served_per_cluster = vec![0usize; k];
        let mut per_ue = Vec::new();
        let (mut total_rate, mut wasted) = (0.0, 0.0);
        for (&rate, &j) in rates.iter().zip(clusters) {
            let served = rate >= threshold;
            if served {
                served_per_cluster[j] += 1;
                wasted += rate - threshold;
            }
            total_rate += rate;
            per_ue.push(LinkStats {
                geometry,
                p_los: 0.5,
                p_eff: 0.0,
                interference: 0.0,
                rate,
                served,
            });
        }
        EvaluationResult {
            per_ue,
            cluster_of: clusters.to_vec(),
            total_served: served_per_cluster.iter().sum(),
            served_per_cluster,
            total_rate,
            wasted_rate: wasted,
        }
    }

    #[test]
    fn observation_zero_state_padding() {
        let assignment = ClusterAssignment {
            centroids: vec![Point2::new(0.0, 0.0)],
            labels: vec![0, 0, 0],
            sizes: vec![3],
            inertia: 0.0,
        };
        let allocation = PowerAllocation {
            clusters: vec![vec![0.0; 3]],
            budget: 1.0,
        };
        let eval = eval_with_rates(&[0.0, 0.0, 0.0], &[0, 0, 0], 30e6);
        let obs = build_observation(0, &allocation, &eval, &assignment, 5, 30e6).unwrap();
        assert_eq!(obs.powers, vec![0.0; 5]);
        assert_eq!(obs.rates, vec![0.0; 5]);
        assert_eq!(obs.mask, vec![true, true, true, false, false]);
        assert!((obs.count - 0.6).abs() < 1e-15);
    }

    #[test]
    fn observation_normalizes_rates_by_threshold() {
        let assignment = ClusterAssignment {
            centroids: vec![Point2::new(0.0, 0.0)],
            labels: vec![0, 0],
            sizes: vec![2],
            inertia: 0.0,
        };
        let allocation = PowerAllocation {
            clusters: vec![vec![0.3, 0.7]],
            budget: 1.0,
        };
        let eval = eval_with_rates(&[30e6, 15e6], &[0, 0], 30e6);
        let obs = build_observation(0, &allocation, &eval, &assignment, 2, 30e6).unwrap();
        assert_eq!(obs.rates, vec![1.0, 0.5]);
        assert_eq!(obs.powers, vec![0.3, 0.7]);
    }

    #[test]
    fn observation_rejects_oversized_cluster() {
        let assignment = ClusterAssignment {
            centroids: vec![Point2::new(0.0, 0.0)],
            labels: vec![0, 0, 0],
            sizes: vec![3],
            inertia: 0.0,
        };
        let allocation = PowerAllocation {
            clusters: vec![vec![0.0; 3]],
            budget: 1.0,
        };
        let eval = eval_with_rates(&[0.0; 3], &[0, 0, 0], 30e6);
        assert!(build_observation(0, &allocation, &eval, &assignment, 2, 30e6).is_err());
    }

    #[test]
    fn observation_order_follows_ue_order() {
        // Permuting UE indices permutes power and rate slots identically.
        let assignment = ClusterAssignment {
            centroids: vec![Point2::new(0.0, 0.0)],
            labels: vec![0, 0],
            sizes: vec![2],
            inertia: 0.0,
        };
        let allocation = PowerAllocation {
            clusters: vec![vec![0.3, 0.7]],
            budget: 1.0,
        };
        let eval = eval_with_rates(&[10e6, 20e6], &[0, 0], 30e6);
        let obs = build_observation(0, &allocation, &eval, &assignment, 2, 30e6).unwrap();

        let permuted_alloc = PowerAllocation {
            clusters: vec![vec![0.7, 0.3]],
            budget: 1.0,
        };
        let permuted_eval = eval_with_rates(&[20e6, 10e6], &[0, 0], 30e6);
        let permuted =
            build_observation(0, &permuted_alloc, &permuted_eval, &assignment, 2, 30e6).unwrap();
        assert_eq!(obs.powers[0], permuted.powers[1]);
        assert_eq!(obs.rates[0], permuted.rates[1]);
        assert_eq!(obs.powers[1], permuted.powers[0]);
        assert_eq!(obs.rates[1], permuted.rates[0]);
    }

    fn test_agent(obs_w: usize, m: usize, k: usize, seed: u64) -> AgentBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AgentBundle::new(&mut rng, obs_w, m, k * obs_w, k * m, &[16, 16], 1e-3, 1e-3).unwrap()
    }

    fn full_mask_obs(m: usize) -> Observation {
        Observation {
            powers: vec![0.1; m],
            rates: vec![0.5; m],
            count: 1.0,
            mask: vec![true; m],
        }
    }

    #[test]
    fn zeroed_actor_head_gives_zero_action() {
        let mut agent = test_agent(7, 2, 1, 3);
        let n = agent.actor.num_params();
        // Final layer: 2 x 16 weights + 2 biases at the tail of the flat order.
        for idx in n - (2 * 16 + 2)..n {
            agent.actor.set_param(idx, 0.0);
        }
        let obs = full_mask_obs(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let action = select_action(&agent, &obs, 0.0, &mut rng).unwrap();
        assert_eq!(action.deltas, vec![0.0, 0.0]);
    }

    #[test]
    fn noiseless_selection_is_deterministic() {
        let agent = test_agent(7, 2, 1, 4);
        let obs = full_mask_obs(2);
        let a = select_action(&agent, &obs, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = select_action(&agent, &obs, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn padded_slots_stay_zero_and_entries_stay_bounded() {
        let agent = test_agent(7, 2, 1, 5);
        let obs = Observation {
            powers: vec![0.4, 0.0],
            rates: vec![2.0, 0.0],
            count: 0.5,
            mask: vec![true, false],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let action = select_action(&agent, &obs, 5.0, &mut rng).unwrap();
            assert!(action.deltas[0] >= -1.0 && action.deltas[0] <= 1.0);
            assert_eq!(action.deltas[1], 0.0);
        }
    }

    #[test]
    fn exploration_noise_std_matches_sigma() {
        // Monte-Carlo oracle: per-slot noise std within 0.2 +/- 0.01.
        let mut agent = test_agent(7, 2, 1, 6);
        let n = agent.actor.num_params();
        for idx in n - (2 * 16 + 2)..n {
            agent.actor.set_param(idx, 0.0);
        }
        let obs = full_mask_obs(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let action = select_action(&agent, &obs, 0.2, &mut rng).unwrap();
            sum += action.deltas[0];
            sum_sq += action.deltas[0] * action.deltas[0];
        }
        let mean = sum / draws as f64;
        let std = (sum_sq / draws as f64 - mean * mean).sqrt();
        assert!((std - 0.2).abs() < 0.01, "std = {std}");
        assert!(mean.abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn apply_action_within_budget_is_identity() {
        let action = ActionVector {
            deltas: vec![1.0, -1.0],
        };
        let updated = apply_action(&[0.2, 0.3], &action, 0.05, &[10.0, 20.0], 1.0).unwrap();
        assert!((updated[0] - 0.25).abs() < 1e-15);
        assert!((updated[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn apply_action_grants_by_distance() {
        // Candidates [0.6, 0.6] against a budget of 1: nearer UE keeps its
        // candidate, the other receives the remainder.
        let action = ActionVector {
            deltas: vec![0.0, 0.0],
        };
        let updated = apply_action(&[0.6, 0.6], &action, 0.05, &[100.0, 200.0], 1.0).unwrap();
        assert!((updated[0] - 0.6).abs() < 1e-15);
        assert!((updated[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn apply_action_zeroes_after_budget_exhausted() {
        // Distances order the UEs (1, 2, 0); the nearest two use the budget.
        let action = ActionVector {
            deltas: vec![0.0, 0.0, 0.0],
        };
        let updated = apply_action(
            &[0.5, 0.5, 0.5],
            &action,
            0.05,
            &[300.0, 100.0, 200.0],
            1.0,
        )
        .unwrap();
        assert_eq!(updated[0], 0.0);
        assert!((updated[1] - 0.5).abs() < 1e-15);
        assert!((updated[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn apply_action_rejects_negative_budget() {
        let action = ActionVector { deltas: vec![0.0] };
        assert!(apply_action(&[0.1], &action, 0.05, &[1.0], -1.0).is_err());
    }

    #[test]
    fn apply_action_always_respects_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..2000 {
            let n = rng.gen_range(1usize..8);
            let budget = rng.gen_range(0.1..2.0);
            let powers: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..budget)).collect();
            let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let distances: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5000.0)).collect();
            let updated = apply_action(
                &powers,
                &ActionVector { deltas },
                rng.gen_range(0.01..0.5),
                &distances,
                budget,
            )
            .unwrap();
            assert!(updated.iter().sum::<f64>() <= budget + 1e-9);
            assert!(updated.iter().all(|&p| (0.0..=budget).contains(&p)));
        }
    }

    #[test]
    fn reward_zero_rates() {
        let eval = eval_with_rates(&[0.0, 0.0], &[0, 1], 30e6);
        let r = compute_reward(&eval, 30e6, RewardFormula::Shaped);
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn reward_three_at_threshold() {
        let eval = eval_with_rates(&[30e6, 30e6, 30e6], &[0, 0, 1], 30e6);
        let r = compute_reward(&eval, 30e6, RewardFormula::Shaped);
        assert!((r.total - 6.0).abs() < 1e-12);
        assert_eq!(r.served_term, 3.0);
        assert!((r.per_cluster[0] - 4.0).abs() < 1e-12);
        assert!((r.per_cluster[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn reward_mixed_served_unserved() {
        let eval = eval_with_rates(&[60e6, 15e6], &[0, 0], 30e6);
        let r = compute_reward(&eval, 30e6, RewardFormula::Shaped);
        assert!((r.total - 2.5).abs() < 1e-12);
    }

    #[test]
    fn reward_literal_formula() {
        let eval = eval_with_rates(&[60e6, 15e6], &[0, 0], 30e6);
        let r = compute_reward(&eval, 30e6, RewardFormula::Literal);
        // 1 served + (60e6 - 30e6) of capped served rate.
        assert!((r.total - (1.0 + 30e6)).abs() < 1e-3);
    }

    #[test]
    fn reward_invariant_under_ue_permutation() {
        let a = eval_with_rates(&[60e6, 15e6, 45e6], &[0, 0, 0], 30e6);
        let b = eval_with_rates(&[45e6, 60e6, 15e6], &[0, 0, 0], 30e6);
        let ra = compute_reward(&a, 30e6, RewardFormula::Shaped);
        let rb = compute_reward(&b, 30e6, RewardFormula::Shaped);
        assert!((ra.total - rb.total).abs() < 1e-12);
    }

    #[test]
    fn replay_ring_evicts_oldest() {
        let mut buffer = ReplayBuffer::new(2);
        buffer.push(1);
        buffer.push(2);
        buffer.push(3);
        assert_eq!(buffer.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sample = buffer.sample(&mut rng, 2).unwrap();
        assert!(sample.iter().all(|&&v| v == 2 || v == 3));
    }

    #[test]
    fn replay_rejects_underfilled_sampling() {
        let mut buffer = ReplayBuffer::new(10);
        buffer.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buffer.sample(&mut rng, 2).is_err());
        assert!(buffer.sample(&mut rng, 1).is_ok());
    }

    #[test]
    fn replay_sampling_is_roughly_uniform() {
        let mut buffer = ReplayBuffer::new(10);
        for i in 0..10 {
            buffer.push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut freq = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws / 10 {
            for &&v in buffer.sample(&mut rng, 10).unwrap().iter() {
                freq[v] += 1;
            }
        }
        for &f in &freq {
            let share = f as f64 / draws as f64;
            assert!((share - 0.1).abs() < 0.01, "share = {share}");
        }
    }

    fn synthetic_transition(k: usize, obs_w: usize, m: usize, reward: f64, seed: u64) -> Transition {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = vec![0.0; k * obs_w];
        for v in state.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        // Keep mask columns at 1 so actions pass through unmasked.
        for agent in 0..k {
            for c in Observation::mask_range(m) {
                state[agent * obs_w + c] = 1.0;
            }
        }
        let mut action = vec![0.0; k * m];
        for v in action.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        Transition {
            next_global_state: state.clone(),
            global_state: state,
            joint_action: action,
            rewards: vec![reward; k],
        }
    }

    #[test]
    fn zero_discount_critic_converges_to_reward() {
        let (k, m) = (2, 2);
        let obs_w = Observation::width(m);
        let mut agents: Vec<AgentBundle> = (0..k)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + j as u64);
                let mut a =
                    AgentBundle::new(&mut rng, obs_w, m, k * obs_w, k * m, &[16, 16], 1e-3, 1e-2)
                        .unwrap();
                a.critic_opt.learning_rate = 1e-2;
                a
            })
            .collect();
        let t = synthetic_transition(k, obs_w, m, 1.5, 7);
        let batch: Vec<&Transition> = vec![&t; 8];
        let mut last = TrainDiagnostics {
            critic_losses: vec![],
            actor_objectives: vec![],
        };
        for _ in 0..3000 {
            last = train_step(&mut agents, &batch, 0.0, 0.0).unwrap();
        }
        for &loss in &last.critic_losses {
            assert!(loss < 1e-6, "critic loss {loss}");
        }
        // Q(s, a) -> r within 1e-3.
        let mut input = t.global_state.clone();
        input.extend_from_slice(&t.joint_action);
        for agent in &agents {
            let q = agent.critic.predict(&input).unwrap()[0];
            assert!((q - 1.5).abs() < 1e-3, "q = {q}");
        }
    }

    #[test]
    fn zero_tau_keeps_targets_frozen() {
        let (k, m) = (2, 2);
        let obs_w = Observation::width(m);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut agents: Vec<AgentBundle> = (0..k)
            .map(|_| {
                AgentBundle::new(&mut rng, obs_w, m, k * obs_w, k * m, &[8, 8], 1e-3, 1e-3).unwrap()
            })
            .collect();
        let frozen: Vec<(Mlp, Mlp)> = agents
            .iter()
            .map(|a| (a.target_actor.clone(), a.target_critic.clone()))
            .collect();
        let t = synthetic_transition(k, obs_w, m, 0.3, 9);
        let batch: Vec<&Transition> = vec![&t; 4];
        train_step(&mut agents, &batch, 0.9, 0.0).unwrap();
        for (agent, (ta, tc)) in agents.iter().zip(&frozen) {
            assert_eq!(&agent.target_actor, ta);
            assert_eq!(&agent.target_critic, tc);
            assert_ne!(&agent.critic, tc); // online nets did move
        }
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        // Frozen critic; compare the implemented chained gradient of
        // mean Q(s, mu(o)) against central differences on actor parameters.
        let (k, m) = (1, 2);
        let obs_w = Observation::width(m);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let agent =
            AgentBundle::new(&mut rng, obs_w, m, k * obs_w, k * m, &[12, 12], 1e-3, 1e-3).unwrap();
        let transitions: Vec<Transition> = (0..6)
            .map(|i| synthetic_transition(k, obs_w, m, 0.0, 40 + i))
            .collect();
        let w = transitions.len();

        let mut states = Array2::zeros((w, obs_w));
        for (row, t) in transitions.iter().enumerate() {
            states
                .row_mut(row)
                .assign(&Array1::from_vec(t.global_state.clone()));
        }

        // Analytic gradient via the same path train_step uses.
        let (own_actions, actor_cache) = agent.actor.forward_batch(states.view()).unwrap();
        let mut joined = Array2::zeros((w, obs_w + m));
        joined.slice_mut(s![.., ..obs_w]).assign(&states);
        joined.slice_mut(s![.., obs_w..]).assign(&own_actions);
        let (_, value_cache) = agent.critic.forward_batch(joined.view()).unwrap();
        let dvalue = Array2::from_elem((w, 1), 1.0 / w as f64);
        let input_grad = agent
            .critic
            .input_gradient_batch(&value_cache, dvalue.view())
            .unwrap();
        let action_grad = input_grad.slice(s![.., obs_w..]).to_owned();
        let (analytic, _) = agent
            .actor
            .backward_batch(&actor_cache, action_grad.view(), false)
            .unwrap();

        let objective = |actor: &Mlp| -> f64 {
            let mut total = 0.0;
            for t in &transitions {
                let a = actor.predict(&t.global_state).unwrap();
                let mut input = t.global_state.clone();
                input.extend_from_slice(&a);
                total += agent.critic.predict(&input).unwrap()[0];
            }
            total / w as f64
        };

        let mut actor = agent.actor.clone();
        let n = actor.num_params();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..60 {
            let idx = rng.gen_range(0..n);
            let orig = actor.param(idx);
            actor.set_param(idx, orig + h);
            let plus = objective(&actor);
            actor.set_param(idx, orig - h);
            let minus = objective(&actor);
            actor.set_param(idx, orig);
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
    fn targets_stay_inside_online_envelope() {
        // After any soft-update sequence with tau in (0,1), each target
        // weight lies within the min/max envelope of its initial value and
        // the online values blended in.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut target = Mlp::init(&mut rng, &[4, 8, 2], OutputActivation::Tanh).unwrap();
        let n = target.num_params();
        let mut lo: Vec<f64> = (0..n).map(|i| target.param(i)).collect();
        let mut hi = lo.clone();
        for round in 0..20 {
            let online = Mlp::init(
                &mut ChaCha8Rng::seed_from_u64(round),
                &[4, 8, 2],
                OutputActivation::Tanh,
            )
            .unwrap();
            for i in 0..n {
                lo[i] = lo[i].min(online.param(i));
                hi[i] = hi[i].max(online.param(i));
            }
            soft_update(&mut target, &online, 0.3).unwrap();
            for i in 0..n {
                let v = target.param(i);
                assert!(v >= lo[i] - 1e-12 && v <= hi[i] + 1e-12);
            }
        }
    }

    #[test]
    fn warmup_step_stores_without_training() {
        let scenario = tiny_scenario(6, 2, 1);
        let config = TrainConfig {
            episodes: 1,
            steps_per_episode: 1,
            batch: 64,
            buffer: 1000,
            hidden: vec![8, 8],
            ..TrainConfig::default()
        };
        let run = run_training(&scenario, &config, FadingMode::Expected, 3).unwrap();
        assert_eq!(run.episodes.len(), 1);
        assert_eq!(run.step_rewards.len(), 1);
        assert_eq!(run.feasibility.checks, 2);
        assert_eq!(run.feasibility.violations, 0);
    }

    #[test]
    fn frozen_noiseless_policy_gives_constant_reward() {
        let scenario = tiny_scenario(6, 2, 2);
        let mut env = AllocationEnv::new(
            &scenario,
            None,
            0.05,
            FadingMode::Expected,
            InterferencePower::CurrentMean,
            RewardFormula::Shaped,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut agents_rng = ChaCha8Rng::seed_from_u64(5);
        let agents: Vec<AgentBundle> = (0..2)
            .map(|_| {
                AgentBundle::new(
                    &mut agents_rng,
                    env.obs_width(),
                    env.pad_width(),
                    env.global_width(),
                    env.joint_action_width(),
                    &[8, 8],
                    1e-3,
                    1e-3,
                )
                .unwrap()
            })
            .collect();
        // Zero actor heads: actions are exactly zero, so the allocation and
        // the expected-mode evaluation never change.
        let mut agents = agents;
        for agent in agents.iter_mut() {
            let n = agent.actor.num_params();
            let tail = env.pad_width() * 8 + env.pad_width();
            for idx in n - tail..n {
                agent.actor.set_param(idx, 0.0);
            }
        }
        let mut policy = MaddpgPolicy { agents: &agents };
        let metrics = greedy_rollout(&mut env, &mut policy, 5, &mut rng).unwrap();
        for w in metrics.rewards.windows(2) {
            assert_eq!(w[0].to_bits(), w[1].to_bits());
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let scenario = tiny_scenario(6, 2, 6);
        let config = TrainConfig {
            episodes: 2,
            steps_per_episode: 10,
            batch: 8,
            buffer: 100,
            hidden: vec![8, 8],
            ..TrainConfig::default()
        };
        let a = run_training(&scenario, &config, FadingMode::Sampled, 11).unwrap();
        let b = run_training(&scenario, &config, FadingMode::Sampled, 11).unwrap();
        let bits = |run: &TrainingRun| -> Vec<u64> {
            run.step_rewards.iter().map(|r| r.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.agents[0].actor, b.agents[0].actor);
        let c = run_training(&scenario, &config, FadingMode::Sampled, 12).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn training_run_respects_budget_everywhere() {
        let scenario = tiny_scenario(8, 2, 7);
        let config = TrainConfig {
            episodes: 2,
            steps_per_episode: 15,
            batch: 8,
            buffer: 100,
            hidden: vec![8, 8],
            ..TrainConfig::default()
        };
        let run = run_training(&scenario, &config, FadingMode::Sampled, 13).unwrap();
        assert_eq!(run.feasibility.checks, 2 * 15 * 2);
        assert_eq!(run.feasibility.violations, 0);
    }
}
