//! Air-to-ground propagation and rate model.
//!
//! A downlink between a hovering UAV and a ground user mixes a line-of-sight
//! path (Rician fading, path-loss exponent `alpha_los`) with a
//! non-line-of-sight path (Rayleigh fading, exponent `alpha_nlos`). The mix
//! weight is an elevation-dependent LoS probability. Rates follow Shannon
//! capacity over the cluster's bandwidth share; interference from other UAVs
//! is modeled through their NLoS paths only, at their average transmit power.
//!
//! Everything here is a pure function of its arguments; the only stateful
//! input is the random stream passed to [`sample_fading`].

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{Point2, Point3};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("coordinates must be finite")]
    NonFiniteCoordinate,
    #[error("UAV height must be positive, got {0}")]
    NonPositiveHeight(f64),
    #[error("list length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("cluster index {index} out of range for {count} UAVs")]
    BadClusterIndex { index: usize, count: usize },
    #[error("invalid channel parameters: {0}")]
    InvalidParams(String),
}

/// Propagation constants for one environment.
///
/// The defaults are the dense-urban set: exponents 3 (LoS) / 4 (NLoS),
/// sigmoid constants b = 0.136 and c = 11.95, Rice factor 10, mean channel
/// power gain 0.5, noise power 4e-15 W, and 10 MHz of bandwidth per UAV.
/// Other environments (rural, urban) plug in their own constants here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Path-loss exponent on the LoS link.
    pub alpha_los: f64,
    /// Path-loss exponent on the NLoS link; strictly larger than `alpha_los`.
    pub alpha_nlos: f64,
    /// Slope of the LoS-probability sigmoid.
    pub b_env: f64,
    /// Offset/prefactor of the LoS-probability sigmoid, in degrees.
    pub c_env: f64,
    /// Rice factor: LoS power over diffuse power in the Rician draw.
    pub rice_k: f64,
    /// Mean channel power gain of both fading families.
    pub mu_gain: f64,
    /// AWGN power in watts.
    pub noise_power: f64,
    /// Bandwidth per UAV in Hz, shared among its associated users.
    pub bandwidth: f64,
}

impl ChannelParams {
    pub fn dense_urban() -> Self {
        Self {
            alpha_los: 3.0,
            alpha_nlos: 4.0,
            b_env: 0.136,
            c_env: 11.95,
            rice_k: 10.0,
            mu_gain: 0.5,
            noise_power: 4e-15,
            bandwidth: 1e7,
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let fields = [
            ("alpha_los", self.alpha_los),
            ("alpha_nlos", self.alpha_nlos),
            ("b_env", self.b_env),
            ("c_env", self.c_env),
            ("rice_k", self.rice_k),
            ("mu_gain", self.mu_gain),
            ("noise_power", self.noise_power),
            ("bandwidth", self.bandwidth),
        ];
        for (name, value) in fields {
            if !value.is_finite() || value <= 0.0 {
                return Err(ChannelError::InvalidParams(format!(
                    "{name} must be finite and positive, got {value}"
                )));
            }
        }
        if self.alpha_nlos <= self.alpha_los {
            return Err(ChannelError::InvalidParams(format!(
                "alpha_nlos ({}) must exceed alpha_los ({})",
                self.alpha_nlos, self.alpha_los
            )));
        }
        Ok(())
    }
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self::dense_urban()
    }
}

/// Horizontal distance, slant distance, and elevation angle of one link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkGeometry {
    /// Ground-plane distance in meters.
    pub horiz_dist: f64,
    /// UE-to-UAV distance in meters; always at least the UAV height.
    pub slant_dist: f64,
    /// Elevation angle in radians, in (0, pi/2].
    pub elevation: f64,
}

/// Whether fading gains are drawn or pinned to their mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FadingMode {
    /// Fresh Rician/Rayleigh power gains per draw.
    Sampled,
    /// Deterministic gains equal to `mu_gain`; useful for exact tests.
    Expected,
}

/// One realization of the small-scale fading on a link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FadingDraw {
    /// LoS power gain (Rician).
    pub g_los: f64,
    /// NLoS power gain (Rayleigh, i.e. exponentially distributed power).
    pub k_nlos: f64,
    pub mode: FadingMode,
}

/// Fully evaluated downlink state for one UE.
#[derive(Clone, Copy, Debug)]
pub struct LinkStats {
    pub geometry: LinkGeometry,
    pub p_los: f64,
    /// Effective received power in watts.
    pub p_eff: f64,
    /// Inter-cluster interference power in watts.
    pub interference: f64,
    /// Shannon rate in bits/s over the cluster's bandwidth share.
    pub rate: f64,
    /// True iff `rate` met the threshold supplied at evaluation.
    pub served: bool,
}

/// Geometry of the link from a ground UE to a UAV.
///
/// The elevation satisfies `elevation = asin(h / slant_dist)`.
pub fn link_geometry(ue_xy: Point2, uav_xyz: Point3) -> Result<LinkGeometry, ChannelError> {
    if !ue_xy.is_finite() || !uav_xyz.is_finite() {
        return Err(ChannelError::NonFiniteCoordinate);
    }
    if uav_xyz.z <= 0.0 {
        return Err(ChannelError::NonPositiveHeight(uav_xyz.z));
    }
    let horiz_dist = ue_xy.dist(&uav_xyz.ground());
    let slant_dist = horiz_dist.hypot(uav_xyz.z);
    let elevation = (uav_xyz.z / slant_dist).asin();
    Ok(LinkGeometry {
        horiz_dist,
        slant_dist,
        elevation,
    })
}

/// LoS probability `1 / (1 + c exp(-b [theta_deg - c]))` as a function of the
/// elevation angle in radians. Strictly increasing in elevation for any
/// positive `b_env`/`c_env`.
pub fn los_probability(elevation: f64, params: &ChannelParams) -> f64 {
    debug_assert!(
        elevation > 0.0 && elevation <= std::f64::consts::FRAC_PI_2 + 1e-12,
        "elevation {elevation} outside (0, pi/2]"
    );
    let theta_deg = elevation.to_degrees();
    1.0 / (1.0 + params.c_env * (-params.b_env * (theta_deg - params.c_env)).exp())
}

/// Draw the per-link fading pair.
///
/// Sampled mode builds the Rician gain constructively: the complex amplitude
/// is `sqrt(mu K/(K+1)) + sqrt(mu/(K+1)) z` with `z` a standard complex
/// normal of unit total variance, and the power gain its squared magnitude,
/// so the mean is exactly `mu_gain` and the Rice factor exactly `rice_k`.
/// The NLoS gain is exponential with mean `mu_gain`. Expected mode returns
/// both gains pinned to `mu_gain` and consumes no randomness.
pub fn sample_fading<R: Rng + ?Sized>(
    rng: &mut R,
    params: &ChannelParams,
    mode: FadingMode,
) -> FadingDraw {
    debug_assert!(params.mu_gain > 0.0 && params.rice_k >= 0.0);
    match mode {
        FadingMode::Expected => FadingDraw {
            g_los: params.mu_gain,
            k_nlos: params.mu_gain,
            mode,
        },
        FadingMode::Sampled => {
            let los_amp = (params.mu_gain * params.rice_k / (params.rice_k + 1.0)).sqrt();
            let diffuse = (params.mu_gain / (params.rice_k + 1.0)).sqrt();
            // Each component carries half the unit variance of z.
            let component = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).unwrap();
            let re = los_amp + diffuse * component.sample(rng);
            let im = diffuse * component.sample(rng);
            let g_los = re * re + im * im;
            let k_nlos = Exp::new(1.0 / params.mu_gain).unwrap().sample(rng);
            FadingDraw {
                g_los,
                k_nlos,
                mode,
            }
        }
    }
}

/// Effective received power: the LoS and NLoS received powers weighted by
/// the LoS/NLoS probabilities.
pub fn effective_received_power(
    p_tx: f64,
    geom: &LinkGeometry,
    fading: &FadingDraw,
    params: &ChannelParams,
) -> f64 {
    debug_assert!(p_tx >= 0.0, "transmit power must be non-negative");
    let p_los = los_probability(geom.elevation, params);
    let received_los = p_tx * fading.g_los * geom.slant_dist.powf(-params.alpha_los);
    let received_nlos = p_tx * fading.k_nlos * geom.slant_dist.powf(-params.alpha_nlos);
    p_los * received_los + (1.0 - p_los) * received_nlos
}

/// Interference at a UE from every UAV other than its own: the sum of
/// `avg_power * k * slant^-alpha_nlos` over interferers; only NLoS paths
/// contribute. `fading_draws` holds one draw per UAV, indexed like
/// `uav_positions`; the entry for `own_cluster` is ignored.
pub fn inter_cluster_interference(
    ue_xy: Point2,
    own_cluster: usize,
    uav_positions: &[Point3],
    avg_powers: &[f64],
    fading_draws: &[FadingDraw],
    params: &ChannelParams,
) -> Result<f64, ChannelError> {
    if own_cluster >= uav_positions.len() {
        return Err(ChannelError::BadClusterIndex {
            index: own_cluster,
            count: uav_positions.len(),
        });
    }
    if avg_powers.len() != uav_positions.len() {
        return Err(ChannelError::LengthMismatch {
            expected: uav_positions.len(),
            got: avg_powers.len(),
        });
    }
    if fading_draws.len() != uav_positions.len() {
        return Err(ChannelError::LengthMismatch {
            expected: uav_positions.len(),
            got: fading_draws.len(),
        });
    }
    let mut total = 0.0;
    for (s, uav) in uav_positions.iter().enumerate() {
        if s == own_cluster {
            continue;
        }
        debug_assert!(avg_powers[s] >= 0.0);
        let geom = link_geometry(ue_xy, *uav)?;
        total += avg_powers[s] * fading_draws[s].k_nlos * geom.slant_dist.powf(-params.alpha_nlos);
    }
    Ok(total)
}

/// Shannon rate in bits/s: `(bandwidth / share_count) log2(1 + SINR)` where
/// the SINR is `p_eff / (interference + noise_power)`.
pub fn data_rate(p_eff: f64, interference: f64, share_count: usize, params: &ChannelParams) -> f64 {
    assert!(share_count >= 1, "share_count must be at least 1");
    let sinr = p_eff / (interference + params.noise_power);
    (params.bandwidth / share_count as f64) * (1.0 + sinr).log2()
}
