//! Feedback laws rendered to the operator: direction-conditioned pedal
//! resistance from lidar proximity, joint impedance, and gravity-compensated
//! force reflection onto the leader arms.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinechain::{JointState, KinematicChain};
use crate::simworld::{BaseTwist, LidarScan};

/// Ranges this close to the surface radius are treated as contact.
const SURFACE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialParams {
    /// Robot surface radius (m).
    pub r0: f64,
    /// Influence radius beyond which the potential vanishes (m).
    pub r_far: f64,
    pub k_phi: f64,
    /// Largest force the pedal renders (N).
    pub f_max: f64,
}

impl Default for PotentialParams {
    fn default() -> Self {
        Self {
            r0: 0.4,
            r_far: 0.5,
            k_phi: 1.0,
            f_max: 20.0,
        }
    }
}

impl PotentialParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.r0 && self.r0 < self.r_far) || !(self.k_phi > 0.0) || !(self.f_max > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "potential params need 0 < r0 < r_far, k_phi > 0, f_max > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Repulsive potential `1/2 (1/(r - r0) - 1/(r_far - r0))^2` on `(r0, r_far)`,
/// zero beyond `r_far`, infinite at or inside the surface.
pub fn potential(r: f64, p: &PotentialParams) -> f64 {
    if r >= p.r_far {
        0.0
    } else if r <= p.r0 {
        f64::INFINITY
    } else {
        let d = 1.0 / (r - p.r0) - 1.0 / (p.r_far - p.r0);
        0.5 * d * d
    }
}

/// Resistance magnitude `k_phi |d phi / d r|` for an obstacle at range `r`.
///
/// The law itself is unbounded as `r -> r0`; at the surface it returns `f_max`.
/// Callers rendering a force clamp the resultant to `f_max`.
pub fn potential_force(r: f64, p: &PotentialParams) -> f64 {
    if r >= p.r_far {
        0.0
    } else if r <= p.r0 + SURFACE_EPS {
        p.f_max
    } else {
        let u = r - p.r0;
        let d = 1.0 / u - 1.0 / (p.r_far - p.r0);
        p.k_phi * d / (u * u)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueSource {
    Collision,
    Guidance,
    Mixed,
}

/// Planar force (and yaw torque) rendered at the pedal, in the base frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PedalCue {
    pub force_xy: Vector2<f64>,
    pub yaw_torque: f64,
    pub source: CueSource,
    pub active: bool,
}

impl PedalCue {
    pub fn inactive(source: CueSource) -> Self {
        Self {
            force_xy: Vector2::zeros(),
            yaw_torque: 0.0,
            source,
            active: false,
        }
    }

    pub fn active(force_xy: Vector2<f64>, source: CueSource) -> Self {
        Self {
            force_xy,
            yaw_torque: 0.0,
            source,
            active: true,
        }
    }

    pub fn magnitude(&self) -> f64 {
        self.force_xy.norm()
    }
}

/// Which lidar beams feed the resistance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamSelection {
    /// Every beam in the half-plane of the commanded direction.
    #[default]
    HalfPlane,
    /// Only the interpolated range along the commanded direction.
    SingleRay,
}

/// Direction-conditioned pedal resistance with half-plane beam aggregation.
pub fn pedal_resistance(scan: &LidarScan, cmd: &BaseTwist, p: &PotentialParams) -> Result<PedalCue> {
    pedal_resistance_with(scan, cmd, p, BeamSelection::HalfPlane)
}

pub fn pedal_resistance_with(
    scan: &LidarScan,
    cmd: &BaseTwist,
    p: &PotentialParams,
    mode: BeamSelection,
) -> Result<PedalCue> {
    if scan.ranges.is_empty() {
        return Err(Error::EmptyScan);
    }
    let v = Vector2::new(cmd.vx, cmd.vy);
    let speed = v.norm();
    if speed == 0.0 || !speed.is_finite() {
        return Ok(PedalCue::inactive(CueSource::Collision));
    }
    let d = v / speed;

    let resultant = match mode {
        BeamSelection::HalfPlane => {
            let mut sum = Vector2::zeros();
            for (k, &r) in scan.ranges.iter().enumerate() {
                let u = scan.beam_direction(k);
                if u.dot(&d) > 0.0 {
                    sum -= u * potential_force(r, p);
                }
            }
            sum
        }
        BeamSelection::SingleRay => -d * potential_force(scan.ray_range(&d), p),
    };

    // keep only the part that opposes the commanded direction
    let along = resultant.dot(&d);
    if along >= 0.0 {
        return Ok(PedalCue::inactive(CueSource::Collision));
    }
    let magnitude = (-along).min(p.f_max);
    Ok(PedalCue::active(-d * magnitude, CueSource::Collision))
}

/// Sums active cues and clamps the result to `f_max`. A cue built from more
/// than one source is tagged `Mixed`.
pub fn merge_cues(cues: &[PedalCue], f_max: f64) -> PedalCue {
    let active: Vec<&PedalCue> = cues.iter().filter(|c| c.active).collect();
    match active.len() {
        0 => PedalCue::inactive(cues.first().map_or(CueSource::Collision, |c| c.source)),
        _ => {
            let mut f: Vector2<f64> = active.iter().map(|c| c.force_xy).sum();
            let n = f.norm();
            if n > f_max {
                f *= f_max / n;
            }
            let first = active[0].source;
            let source = if active.iter().all(|c| c.source == first) {
                first
            } else {
                CueSource::Mixed
            };
            PedalCue {
                force_xy: f,
                yaw_torque: active.iter().map(|c| c.yaw_torque).sum(),
                source,
                active: true,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceGains {
    pub kp: DVector<f64>,
    pub kd: DVector<f64>,
    /// Per-joint reflection strength in `[0, 1]`.
    pub reflection_scale: DVector<f64>,
}

fn table_row(values: &[f64], n: usize) -> DVector<f64> {
    DVector::from_fn(n, |i, _| values[i % values.len()])
}

impl ImpedanceGains {
    pub fn new(kp: DVector<f64>, kd: DVector<f64>, reflection_scale: DVector<f64>) -> Result<Self> {
        let g = Self { kp, kd, reflection_scale };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kp.len();
        for len in [self.kd.len(), self.reflection_scale.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        if self.kp.iter().chain(self.kd.iter()).any(|g| !(*g >= 0.0)) {
            return Err(Error::InvalidParameter("gains must be non-negative".into()));
        }
        if self.reflection_scale.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidParameter("reflection scale must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// High-gain follower tracking (rows repeat for chains other than 6-DoF).
    pub fn follower(n: usize) -> Self {
        Self {
            kp: DVector::from_element(n, 10.0),
            kd: table_row(&[0.1, 0.1, 0.01, 0.1, 0.1, 0.1], n),
            reflection_scale: DVector::from_element(n, 1.0),
        }
    }

    /// Low-gain, compliant leader.
    pub fn leader(n: usize) -> Self {
        Self {
            kp: table_row(&[0.05, 0.1, 0.1, 0.05, 0.1, 0.1], n),
            kd: DVector::from_element(n, 0.8),
            reflection_scale: table_row(&[0.5, 0.15, 0.6, 0.5, 0.15, 0.6], n),
        }
    }
}

fn same_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// `tau = Kp (q_des - q) + Kd (qdot_des - qdot) + tau_ff`, per joint.
pub fn impedance_torque(
    g: &ImpedanceGains,
    measured: &JointState,
    desired: &JointState,
    tau_ff: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = g.kp.len();
    for len in [
        g.kd.len(),
        measured.q.len(),
        measured.qdot.len(),
        desired.q.len(),
        desired.qdot.len(),
        tau_ff.len(),
    ] {
        same_len(n, len)?;
    }
    Ok(g.kp.component_mul(&(&desired.q - &measured.q))
        + g.kd.component_mul(&(&desired.qdot - &measured.qdot))
        + tau_ff)
}

/// Leader feedforward: negated, scaled follower interaction torque plus
/// leader gravity compensation, `-(tau_fol - g(q_fol)) s + g(q_lead)`.
pub fn reflection_feedforward(
    tau_fol: &DVector<f64>,
    q_fol: &DVector<f64>,
    q_lead: &DVector<f64>,
    s: &DVector<f64>,
    chain: &KinematicChain,
) -> Result<DVector<f64>> {
    let n = chain.dof();
    for len in [tau_fol.len(), q_fol.len(), q_lead.len(), s.len()] {
        same_len(n, len)?;
    }
    let interaction = tau_fol - chain.gravity_torques(q_fol)?;
    Ok(-interaction.component_mul(s) + chain.gravity_torques(q_lead)?)
}
