//! Field construction, user generation, UAV placement, and network-wide
//! evaluation of the downlink.
//!
//! Users sit at the centers of distinct cells of a `grid_dim x grid_dim`
//! lattice over the square field. Each cluster's UAV hovers at the cluster
//! centroid at a fixed height and splits its bandwidth among all associated
//! users. Evaluation composes the channel layer per user and aggregates
//! served counts, total rate, and the rate wasted above the threshold.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    self, ChannelError, ChannelParams, FadingDraw, FadingMode, LinkStats,
};
use crate::clustering::ClusterAssignment;
use crate::geo::{Point2, Point3};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid field config: {0}")]
    InvalidField(String),
    #[error("{requested} UEs exceed the {cells} available grid cells")]
    TooManyUes { requested: usize, cells: usize },
    #[error("centroid ({x}, {y}) lies outside the field")]
    CentroidOutsideField { x: f64, y: f64 },
    #[error("allocation shape mismatch for cluster {cluster}: {got} powers for {expected} UEs")]
    AllocationShape {
        cluster: usize,
        expected: usize,
        got: usize,
    },
    #[error("snapshot is inconsistent: {0}")]
    InconsistentSnapshot(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Geometry and service parameters of one deployment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Side of the square field in meters.
    pub side_len: f64,
    /// Cells per side of the placement lattice.
    pub grid_dim: usize,
    /// Hover height of every UAV in meters.
    pub uav_height: f64,
    /// Number of ground users.
    pub num_ues: usize,
    /// Transmit power budget per UAV in watts.
    pub power_budget: f64,
    /// Service threshold in bits/s.
    pub rate_threshold: f64,
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.side_len > 0.0) {
            return Err(ScenarioError::InvalidField("side_len must be positive".into()));
        }
        if self.grid_dim == 0 {
            return Err(ScenarioError::InvalidField("grid_dim must be positive".into()));
        }
        if !(self.uav_height > 0.0) {
            return Err(ScenarioError::InvalidField("uav_height must be positive".into()));
        }
        if self.num_ues == 0 {
            return Err(ScenarioError::InvalidField("num_ues must be at least 1".into()));
        }
        if !(self.power_budget > 0.0) {
            return Err(ScenarioError::InvalidField("power_budget must be positive".into()));
        }
        if !(self.rate_threshold > 0.0) {
            return Err(ScenarioError::InvalidField(
                "rate_threshold must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Side of one lattice cell in meters.
    pub fn cell_side(&self) -> f64 {
        self.side_len / self.grid_dim as f64
    }
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            side_len: 10_000.0,
            grid_dim: 100,
            uav_height: 500.0,
            num_ues: 30,
            power_budget: 1.0,
            rate_threshold: 30e6,
        }
    }
}

/// Per-cluster transmit power vectors under a shared per-UAV budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    /// `clusters[j][s]` is the power for slot `s` of cluster `j`, in watts.
    pub clusters: Vec<Vec<f64>>,
    /// Budget per UAV in watts.
    pub budget: f64,
}

impl PowerAllocation {
    /// Every user in cluster `j` gets `budget / sizes[j]`.
    pub fn equal_split(sizes: &[usize], budget: f64) -> Self {
        let clusters = sizes
            .iter()
            .map(|&n| vec![budget / n as f64; n])
            .collect();
        Self { clusters, budget }
    }

    pub fn cluster_total(&self, j: usize) -> f64 {
        self.clusters[j].iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.clusters.iter().flatten().sum()
    }

    /// Fraction of the aggregate budget currently allocated.
    pub fn budget_fraction(&self) -> f64 {
        let cap = self.budget * self.clusters.len() as f64;
        if cap > 0.0 {
            self.total() / cap
        } else {
            0.0
        }
    }
}

/// Complete state of the network at one instant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkSnapshot {
    pub ue_positions: Vec<Point2>,
    pub uav_positions: Vec<Point3>,
    pub assignment: ClusterAssignment,
    pub allocation: PowerAllocation,
}

/// Aggregated outcome of evaluating every UE once.
#[derive(Clone, Debug)]
pub struct EvaluationResult {
    pub per_ue: Vec<LinkStats>,
    /// Serving cluster of each UE, parallel to `per_ue`.
    pub cluster_of: Vec<usize>,
    pub served_per_cluster: Vec<usize>,
    pub total_served: usize,
    /// Sum of all per-UE rates in bits/s.
    pub total_rate: f64,
    /// Sum over served UEs of (rate - threshold); the oversupplied rate.
    pub wasted_rate: f64,
}

/// How interfering UAVs' transmit power enters the interference term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterferencePower {
    /// Mean of the interferer's current allocation vector.
    CurrentMean,
    /// Static `budget / cluster_size` regardless of the current allocation.
    StaticBudget,
}

/// Draw `num_ues` distinct grid cells uniformly at random and return their
/// centers. Deterministic for a given random stream.
pub fn generate_ues<R: Rng + ?Sized>(
    rng: &mut R,
    field: &FieldConfig,
) -> Result<Vec<Point2>, ScenarioError> {
    field.validate()?;
    let cells = field.grid_dim * field.grid_dim;
    if field.num_ues > cells {
        return Err(ScenarioError::TooManyUes {
            requested: field.num_ues,
            cells,
        });
    }
    let side = field.cell_side();
    let chosen = rand::seq::index::sample(rng, cells, field.num_ues);
    Ok(chosen
        .iter()
        .map(|cell| {
            let row = cell / field.grid_dim;
            let col = cell % field.grid_dim;
            Point2::new((col as f64 + 0.5) * side, (row as f64 + 0.5) * side)
        })
        .collect())
}

/// One UAV per centroid, hovering at the configured height.
pub fn place_uavs(
    assignment: &ClusterAssignment,
    field: &FieldConfig,
) -> Result<Vec<Point3>, ScenarioError> {
    field.validate()?;
    assignment
        .centroids
        .iter()
        .map(|c| {
            if c.x < 0.0 || c.x > field.side_len || c.y < 0.0 || c.y > field.side_len {
                Err(ScenarioError::CentroidOutsideField { x: c.x, y: c.y })
            } else {
                Ok(Point3::new(c.x, c.y, field.uav_height))
            }
        })
        .collect()
}

fn check_snapshot_shape(snapshot: &NetworkSnapshot) -> Result<(), ScenarioError> {
    let k = snapshot.uav_positions.len();
    let n = snapshot.ue_positions.len();
    if snapshot.assignment.centroids.len() != k {
        return Err(ScenarioError::InconsistentSnapshot(format!(
            "{} centroids for {} UAVs",
            snapshot.assignment.centroids.len(),
            k
        )));
    }
    if snapshot.assignment.labels.len() != n {
        return Err(ScenarioError::InconsistentSnapshot(format!(
            "{} labels for {} UEs",
            snapshot.assignment.labels.len(),
            n
        )));
    }
    if snapshot.allocation.clusters.len() != k {
        return Err(ScenarioError::InconsistentSnapshot(format!(
            "{} allocation vectors for {} clusters",
            snapshot.allocation.clusters.len(),
            k
        )));
    }
    for (j, powers) in snapshot.allocation.clusters.iter().enumerate() {
        if powers.len() != snapshot.assignment.sizes[j] {
            return Err(ScenarioError::AllocationShape {
                cluster: j,
                expected: snapshot.assignment.sizes[j],
                got: powers.len(),
            });
        }
    }
    Ok(())
}

/// Evaluate every UE with the default current-mean interference model.
///
/// Per UE: geometry to its own UAV, LoS probability, effective received
/// power from its allocated transmit power, interference from every other
/// UAV at that UAV's average allocated power, Shannon rate with the cluster
/// size as the bandwidth share, and the served flag against the threshold.
/// Fading is drawn fresh per link per call; the draw order is fixed (UEs in
/// index order; for each UE the own link first, then interferers by
/// ascending UAV index). Expected mode consumes no randomness.
pub fn evaluate_network<R: Rng + ?Sized>(
    snapshot: &NetworkSnapshot,
    params: &ChannelParams,
    field: &FieldConfig,
    rng: &mut R,
    mode: FadingMode,
) -> Result<EvaluationResult, ScenarioError> {
    evaluate_network_with(snapshot, params, field, rng, mode, InterferencePower::CurrentMean)
}

/// [`evaluate_network`] with an explicit interference power model.
pub fn evaluate_network_with<R: Rng + ?Sized>(
    snapshot: &NetworkSnapshot,
    params: &ChannelParams,
    field: &FieldConfig,
    rng: &mut R,
    mode: FadingMode,
    interference_power: InterferencePower,
) -> Result<EvaluationResult, ScenarioError> {
    check_snapshot_shape(snapshot)?;
    let k = snapshot.uav_positions.len();
    let sizes = &snapshot.assignment.sizes;
    let avg_powers: Vec<f64> = (0..k)
        .map(|j| match interference_power {
            InterferencePower::CurrentMean => {
                snapshot.allocation.cluster_total(j) / sizes[j] as f64
            }
            InterferencePower::StaticBudget => snapshot.allocation.budget / sizes[j] as f64,
        })
        .collect();
    let slots = snapshot.assignment.slot_indices();

    let n = snapshot.ue_positions.len();
    let mut per_ue = Vec::with_capacity(n);
    let mut served_per_cluster = vec![0usize; k];
    let mut total_rate = 0.0;
    let mut wasted_rate = 0.0;
    let placeholder = FadingDraw {
        g_los: params.mu_gain,
        k_nlos: params.mu_gain,
        mode: FadingMode::Expected,
    };

    for (i, ue) in snapshot.ue_positions.iter().enumerate() {
        let j = snapshot.assignment.labels[i];
        let geometry = channel::link_geometry(*ue, snapshot.uav_positions[j])?;
        let own_draw = channel::sample_fading(rng, params, mode);
        let draws: Vec<FadingDraw> = (0..k)
            .map(|s| {
                if s == j {
                    placeholder
                } else {
                    channel::sample_fading(rng, params, mode)
                }
            })
            .collect();
        let interference = channel::inter_cluster_interference(
            *ue,
            j,
            &snapshot.uav_positions,
            &avg_powers,
            &draws,
            params,
        )?;
        let p_tx = snapshot.allocation.clusters[j][slots[i]];
        let p_los = channel::los_probability(geometry.elevation, params);
        let p_eff = channel::effective_received_power(p_tx, &geometry, &own_draw, params);
        let rate = channel::data_rate(p_eff, interference, sizes[j], params);
        let served = rate >= field.rate_threshold;
        if served {
            served_per_cluster[j] += 1;
            wasted_rate += rate - field.rate_threshold;
        }
        total_rate += rate;
        per_ue.push(LinkStats {
            geometry,
            p_los,
            p_eff,
            interference,
            rate,
            served,
        });
    }

    Ok(EvaluationResult {
        per_ue,
        cluster_of: snapshot.assignment.labels.clone(),
        total_served: served_per_cluster.iter().sum(),
        served_per_cluster,
        total_rate,
        wasted_rate,
    })
}

/// Outcome of the feasibility checks, one flag per constraint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintReport {
    /// Served flags agree with rate >= threshold.
    pub c1: bool,
    /// Every UE belongs to at most one cluster (sizes match label counts).
    pub c2: bool,
    /// Labels are valid cluster indices.
    pub c3: bool,
    /// Every cluster's total power fits its budget (1e-9 absolute slack).
    pub c4: bool,
    /// All UE and UAV ground positions lie inside the field.
    pub c5: bool,
    /// Per-cluster view of the budget check.
    pub c4_per_cluster: Vec<bool>,
}

impl ConstraintReport {
    pub fn all_ok(&self) -> bool {
        self.c1 && self.c2 && self.c3 && self.c4 && self.c5
    }
}

/// Feasibility report for a snapshot and its evaluation. Never fails; every
/// inconsistency shows up as a false flag.
pub fn check_constraints(
    snapshot: &NetworkSnapshot,
    result: &EvaluationResult,
    field: &FieldConfig,
) -> ConstraintReport {
    let k = snapshot.uav_positions.len();
    let n = snapshot.ue_positions.len();

    let c1 = result.per_ue.len() == n
        && result
            .per_ue
            .iter()
            .all(|s| s.served == (s.rate >= field.rate_threshold));

    let labels = &snapshot.assignment.labels;
    let c3 = labels.len() == n
        && snapshot.assignment.sizes.len() == k
        && labels.iter().all(|&l| l < k);
    let c2 = if c3 {
        let mut counts = vec![0usize; k];
        for &l in labels {
            counts[l] += 1;
        }
        counts == snapshot.assignment.sizes
    } else {
        false
    };

    let c4_per_cluster: Vec<bool> = snapshot
        .allocation
        .clusters
        .iter()
        .map(|powers| powers.iter().sum::<f64>() <= field.power_budget + 1e-9)
        .collect();
    let c4 = c4_per_cluster.iter().all(|&ok| ok);

    let inside = |x: f64, y: f64| x >= 0.0 && x <= field.side_len && y >= 0.0 && y <= field.side_len;
    let c5 = snapshot.uav_positions.iter().all(|p| inside(p.x, p.y))
        && snapshot.ue_positions.iter().all(|p| inside(p.x, p.y));

    ConstraintReport {
        c1,
        c2,
        c3,
        c4,
        c5,
        c4_per_cluster,
    }
}
