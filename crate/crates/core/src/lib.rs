//! Simulation and learning core for multi-UAV downlink coverage.
//!
//! Ground users scattered over a square field are grouped with k-means, one
//! UAV hovers over each cluster centroid, and per-user transmit powers are
//! tuned either by a fixed equal split, a centralized DQN, or cooperative
//! MADDPG agents (one per UAV). The objective is the number of users whose
//! Shannon rate clears a threshold under LoS/NLoS fading and inter-cluster
//! interference.
//!
//! Module map:
//! - [`channel`]: propagation, fading, and rate math for a single link
//! - [`clustering`]: k-means (k-means++ seeding, Lloyd iterations)
//! - [`scenario`]: field setup, user generation, network-wide evaluation
//! - [`neural`]: dense networks, backprop, Adam, soft target updates
//! - [`marl`]: MADDPG agents, replay, environment, training loop
//! - [`baselines`]: equal-power split and a centralized DQN

pub mod baselines;
pub mod channel;
pub mod clustering;
pub mod geo;
pub mod marl;
pub mod neural;
pub mod scenario;
pub mod seeding;

pub use channel::{ChannelParams, FadingDraw, FadingMode, LinkGeometry, LinkStats};
pub use clustering::ClusterAssignment;
pub use geo::{Point2, Point3};
pub use marl::{ActionVector, AgentBundle, Observation, TrainConfig, Transition};
pub use scenario::{
    EvaluationResult, FieldConfig, InterferencePower, NetworkSnapshot, PowerAllocation,
};
