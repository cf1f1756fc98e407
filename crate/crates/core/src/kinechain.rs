//! Serial revolute chains: forward kinematics, geometric Jacobian,
//! Yoshikawa manipulability and static gravity torques.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{rotation_about, Pose};

/// Rows of the geometric Jacobian used by [`KinematicChain::manipulability`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianBlock {
    /// All six rows.
    #[default]
    Full,
    /// Linear-velocity rows (x, y, z).
    Position,
    /// Linear-velocity rows x and y only, for chains moving in the horizontal plane.
    Planar,
}

/// A chain of revolute joints. Joint `i` sits at `joint_origins[i]` relative to the
/// frame of joint `i - 1` (or the chain base) and rotates about `joint_axes[i]`
/// expressed in its own frame. `tool` places the end effector relative to the last joint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KinematicChain {
    joint_axes: Vec<Vector3<f64>>,
    joint_origins: Vec<Pose>,
    #[serde(default)]
    tool: Pose,
    link_masses: Vec<f64>,
    link_coms: Vec<Vector3<f64>>,
    joint_limits: Vec<(f64, f64)>,
    gravity: Vector3<f64>,
    #[serde(default)]
    manip_block: JacobianBlock,
}

/// Joint positions, velocities and torques of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub tau: DVector<f64>,
}

impl JointState {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qdot: DVector::zeros(n),
            tau: DVector::zeros(n),
        }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q
            .iter()
            .chain(self.qdot.iter())
            .chain(self.tau.iter())
            .all(|x| x.is_finite())
    }
}

/// World-frame quantities of one configuration.
struct ChainFrames {
    joint_positions: Vec<Vector3<f64>>,
    joint_axes: Vec<Vector3<f64>>,
    coms: Vec<Vector3<f64>>,
    end_effector: Pose,
}

impl KinematicChain {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        joint_axes: Vec<Vector3<f64>>,
        joint_origins: Vec<Pose>,
        tool: Pose,
        link_masses: Vec<f64>,
        link_coms: Vec<Vector3<f64>>,
        joint_limits: Vec<(f64, f64)>,
        gravity: Vector3<f64>,
    ) -> Result<Self> {
        let chain = Self {
            joint_axes,
            joint_origins,
            tool,
            link_masses,
            link_coms,
            joint_limits,
            gravity,
            manip_block: JacobianBlock::Full,
        };
        chain.validate()?;
        Ok(chain)
    }

    /// Checks the structural invariants; also run after deserialization.
    pub fn validate(&self) -> Result<()> {
        let n = self.joint_axes.len();
        for len in [
            self.joint_origins.len(),
            self.link_masses.len(),
            self.link_coms.len(),
            self.joint_limits.len(),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        if n == 0 {
            return Err(Error::InvalidParameter("chain has no joints".into()));
        }
        if self.joint_axes.iter().any(|a| (a.norm() - 1.0).abs() > 1e-12) {
            return Err(Error::InvalidParameter("joint axes must be unit vectors".into()));
        }
        if self.joint_limits.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidParameter("joint limits need min < max".into()));
        }
        if self.link_masses.iter().any(|m| *m < 0.0 || !m.is_finite()) {
            return Err(Error::InvalidParameter("link masses must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let chain: KinematicChain = serde_json::from_str(text)?;
        chain.validate()?;
        Ok(chain)
    }

    /// Planar chain in the xy-plane: z-axis joints, links along x,
    /// unit point masses at link midpoints, gravity along -z.
    pub fn planar(lengths: &[f64]) -> Result<Self> {
        let n = lengths.len();
        let mut origins = Vec::with_capacity(n);
        for i in 0..n {
            let offset = if i == 0 { 0.0 } else { lengths[i - 1] };
            origins.push(Pose::from_translation(Vector3::new(offset, 0.0, 0.0)));
        }
        let tool = Pose::from_translation(Vector3::new(*lengths.last().unwrap_or(&0.0), 0.0, 0.0));
        let mut chain = Self::new(
            vec![Vector3::z(); n],
            origins,
            tool,
            vec![1.0; n],
            lengths.iter().map(|l| Vector3::new(0.5 * l, 0.0, 0.0)).collect(),
            vec![(-std::f64::consts::PI, std::f64::consts::PI); n],
            Vector3::new(0.0, 0.0, -9.81),
        )?;
        chain.manip_block = JacobianBlock::Planar;
        Ok(chain)
    }

    /// The 6-DoF reference arm: yaw, shoulder pitch, elbow pitch, forearm roll,
    /// wrist pitch, wrist roll. Upper arm 0.30 m, forearm 0.10 + 0.15 m and a
    /// 0.10 m tool give 0.65 m of reach from the shoulder, which sits 0.10 m
    /// above the mount.
    pub fn reference_arm() -> Self {
        let y = Vector3::y();
        let x = Vector3::x();
        let z = Vector3::z();
        let offsets = [
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 0.10),
            Vector3::new(0.30, 0.0, 0.0),
            Vector3::new(0.10, 0.0, 0.0),
            Vector3::new(0.15, 0.0, 0.0),
            Vector3::zeros(),
        ];
        let tool = Vector3::new(0.10, 0.0, 0.0);
        let coms = (0..6)
            .map(|i| if i + 1 < 6 { offsets[i + 1] * 0.5 } else { tool * 0.5 })
            .collect();
        Self::new(
            vec![z, y, y, x, y, x],
            offsets.iter().map(|o| Pose::from_translation(*o)).collect(),
            Pose::from_translation(tool),
            vec![0.30, 0.60, 0.50, 0.30, 0.20, 0.10],
            coms,
            vec![
                (-2.6, 2.6),
                (-1.57, 1.57),
                (-2.7, 2.7),
                (-2.9, 2.9),
                (-1.9, 1.9),
                (-2.9, 2.9),
            ],
            Vector3::new(0.0, 0.0, -9.81),
        )
        .expect("reference arm is well formed")
    }

    pub fn with_manip_block(mut self, block: JacobianBlock) -> Self {
        self.manip_block = block;
        self
    }

    pub fn with_gravity(mut self, gravity: Vector3<f64>) -> Self {
        self.gravity = gravity;
        self
    }

    pub fn dof(&self) -> usize {
        self.joint_axes.len()
    }

    pub fn joint_limits(&self) -> &[(f64, f64)] {
        &self.joint_limits
    }

    pub fn gravity(&self) -> &Vector3<f64> {
        &self.gravity
    }

    pub fn manip_block(&self) -> JacobianBlock {
        self.manip_block
    }

    /// Sum of the translational offsets along the chain, an upper bound on reach.
    pub fn reach(&self) -> f64 {
        self.joint_origins
            .iter()
            .skip(1)
            .map(|o| o.translation().norm())
            .sum::<f64>()
            + self.tool.translation().norm()
    }

    /// Indices of joints outside their limits.
    pub fn limit_violations(&self, q: &DVector<f64>) -> Vec<usize> {
        q.iter()
            .zip(&self.joint_limits)
            .enumerate()
            .filter(|(_, (v, (lo, hi)))| **v < *lo || **v > *hi)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn clamp_to_limits(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            q.len(),
            q.iter()
                .zip(&self.joint_limits)
                .map(|(v, (lo, hi))| v.clamp(*lo, *hi)),
        )
    }

    fn check_dim(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    fn frames(&self, q: &DVector<f64>) -> ChainFrames {
        let n = self.dof();
        let mut t = Pose::identity();
        let mut joint_positions = Vec::with_capacity(n);
        let mut joint_axes = Vec::with_capacity(n);
        let mut coms = Vec::with_capacity(n);
        for i in 0..n {
            let at_joint = t.compose(&self.joint_origins[i]);
            joint_positions.push(*at_joint.translation());
            joint_axes.push(at_joint.rotation() * self.joint_axes[i]);
            t = at_joint.compose(&Pose::from_parts(
                rotation_about(&self.joint_axes[i], q[i]),
                Vector3::zeros(),
            ));
            coms.push(t.transform_point(&self.link_coms[i]));
        }
        ChainFrames {
            joint_positions,
            joint_axes,
            coms,
            end_effector: t.compose(&self.tool),
        }
    }

    /// End-effector pose in the chain base frame.
    pub fn forward_kinematics(&self, q: &DVector<f64>) -> Result<Pose> {
        self.check_dim(q)?;
        Ok(self.frames(q).end_effector)
    }

    /// 6 x n geometric Jacobian. Rows 0..3 are linear velocity of the
    /// end-effector origin, rows 3..6 angular velocity, both in the base frame.
    pub fn geometric_jacobian(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(q)?;
        let f = self.frames(q);
        let p_ee = f.end_effector.translation();
        let mut j = DMatrix::zeros(6, self.dof());
        for i in 0..self.dof() {
            let z = f.joint_axes[i];
            let lin = z.cross(&(p_ee - f.joint_positions[i]));
            j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        Ok(j)
    }

    /// Yoshikawa manipulability `sqrt(det(J J^T))` over the configured Jacobian block.
    /// When the block has more rows than joints this is `sqrt(det(J^T J))`,
    /// the non-degenerate form.
    pub fn manipulability(&self, q: &DVector<f64>) -> Result<f64> {
        let j = self.geometric_jacobian(q)?;
        let block = match self.manip_block {
            JacobianBlock::Full => j,
            JacobianBlock::Position => j.rows(0, 3).into_owned(),
            JacobianBlock::Planar => j.rows(0, 2).into_owned(),
        };
        // sqrt(det(J J^T)) equals the product of singular values; the SVD form
        // keeps singular configurations at zero instead of sqrt(roundoff)
        Ok(block.singular_values().iter().product())
    }

    /// Static joint torques that hold the chain against gravity, i.e. the
    /// gradient of gravitational potential energy with respect to `q`.
    pub fn gravity_torques(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(q)?;
        let f = self.frames(q);
        let n = self.dof();
        let mut tau = DVector::zeros(n);
        for i in 0..n {
            let z = f.joint_axes[i];
            let p = f.joint_positions[i];
            tau[i] = (i..n)
                .map(|j| -self.link_masses[j] * self.gravity.dot(&z.cross(&(f.coms[j] - p))))
                .sum();
        }
        Ok(tau)
    }

    /// Total gravitational potential energy `-sum m_j g . c_j`.
    pub fn potential_energy(&self, q: &DVector<f64>) -> Result<f64> {
        self.check_dim(q)?;
        let f = self.frames(q);
        Ok(f.coms
            .iter()
            .zip(&self.link_masses)
            .map(|(c, m)| -m * self.gravity.dot(c))
            .sum())
    }

    /// Position-block Jacobian of the end effector (3 x n).
    pub fn position_jacobian(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.geometric_jacobian(q)?.rows(0, 3).into_owned())
    }
}
