//! Scenario library and scripted operators for headless episodes.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Operator, OperatorInput, OperatorView, SuccessRule, WholeBodyAction, REST_POSE};
use crate::error::{Error, Result};
use crate::kinechain::KinematicChain;
use crate::simworld::{maps, BasePose, BaseTwist, World};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Open floor, operator idle.
    #[default]
    Idle,
    /// Operator drives at a wall and retries after each bump.
    WallApproach,
    /// Target placed beyond comfortable reach; operator approaches and manipulates.
    ReachLimited,
    /// Corridor with crates, enlarged footprint for a carried object.
    BlindCarry,
    /// Doorway 0.4 m wider than the base.
    NarrowTransport,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Idle,
        ScenarioKind::WallApproach,
        ScenarioKind::ReachLimited,
        ScenarioKind::BlindCarry,
        ScenarioKind::NarrowTransport,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::Idle => "idle",
            ScenarioKind::WallApproach => "wall_approach",
            ScenarioKind::ReachLimited => "reach_limited",
            ScenarioKind::BlindCarry => "blind_carry",
            ScenarioKind::NarrowTransport => "narrow_transport",
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scenario {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScenarioParams {
    None,
    Wall { speed: f64, heading: f64, jitter: f64 },
    Reach { target: Vector3<f64>, speed: f64, stop_distance: f64 },
    Waypoints { points: Vec<Vector2<f64>>, speed: f64, noise: f64 },
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub world: World,
    pub success: SuccessRule,
    /// s
    pub max_duration: f64,
    pub primary_arm: usize,
    /// Whether the manipulability surrogate is evaluated even without guidance.
    pub uses_field: bool,
    pub params: ScenarioParams,
}

impl Scenario {
    /// Seeded instance of `kind`.
    pub fn build(kind: ScenarioKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = match kind {
            ScenarioKind::Idle => Scenario {
                kind,
                world: maps::open_floor(),
                success: SuccessRule::Completed,
                max_duration: 10.0,
                primary_arm: 0,
                uses_field: false,
                params: ScenarioParams::None,
            },
            ScenarioKind::WallApproach => Scenario {
                kind,
                world: maps::wall_ahead(rng.random_range(1.2..2.0), 0.35),
                success: SuccessRule::NoCollision,
                max_duration: 15.0,
                primary_arm: 0,
                uses_field: false,
                params: ScenarioParams::Wall {
                    speed: rng.random_range(0.2..0.3),
                    heading: rng.random_range(-0.35..0.35),
                    jitter: 0.03,
                },
            },
            ScenarioKind::ReachLimited => Scenario {
                kind,
                world: maps::open_floor(),
                success: SuccessRule::TaskComplete { max_collisions: 0 },
                max_duration: 40.0,
                primary_arm: 0,
                uses_field: true,
                params: ScenarioParams::Reach {
                    target: Vector3::new(rng.random_range(1.2..1.5), rng.random_range(0.1..0.3), 0.25),
                    speed: rng.random_range(0.08..0.12),
                    stop_distance: rng.random_range(0.58..0.64),
                },
            },
            ScenarioKind::BlindCarry => {
                let mut world = maps::blind_carry_corridor();
                world.base_radius = 0.45;
                Scenario {
                    kind,
                    world,
                    success: SuccessRule::TaskComplete { max_collisions: 0 },
                    max_duration: 60.0,
                    primary_arm: 0,
                    uses_field: false,
                    params: ScenarioParams::Waypoints {
                        points: vec![
                            Vector2::new(1.2, -0.45),
                            Vector2::new(2.8, -0.45),
                            Vector2::new(3.6, 0.45),
                            Vector2::new(5.0, 0.45),
                            Vector2::new(7.0, 0.0),
                        ],
                        speed: rng.random_range(0.2..0.3),
                        noise: 0.04,
                    },
                }
            }
            ScenarioKind::NarrowTransport => {
                let mut world = maps::narrow_doorway();
                let y0 = rng.random_range(-0.2..0.2);
                world.base = BasePose::new(0.0, y0, 0.0);
                Scenario {
                    kind,
                    world,
                    success: SuccessRule::TaskComplete { max_collisions: 0 },
                    max_duration: 40.0,
                    primary_arm: 0,
                    uses_field: false,
                    params: ScenarioParams::Waypoints {
                        points: vec![Vector2::new(1.2, y0 * 0.5), Vector2::new(2.1, 0.0), Vector2::new(3.5, 0.0)],
                        speed: rng.random_range(0.15..0.25),
                        noise: 0.03,
                    },
                }
            }
        };
        Ok(s)
    }
}

fn rest_action(view: &OperatorView) -> WholeBodyAction {
    let rest = |c: &KinematicChain| {
        if c.dof() == REST_POSE.len() {
            c.clamp_to_limits(&DVector::from_row_slice(&REST_POSE))
        } else {
            DVector::zeros(c.dof())
        }
    };
    WholeBodyAction::hold(rest(&view.chains[0]), rest(&view.chains[1]))
}

/// The scripted operator matching a scenario.
pub fn scripted_operator(s: &Scenario, seed: u64) -> Box<dyn Operator> {
    let rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f0e);
    match &s.params {
        ScenarioParams::None => Box::new(ZeroOperator),
        ScenarioParams::Wall { speed, heading, jitter } => {
            Box::new(WallApproachOperator::new(*speed, *heading, *jitter, rng))
        }
        ScenarioParams::Reach { target, speed, stop_distance } => {
            Box::new(ReachOperator::new(*target, *speed, *stop_distance, s.primary_arm))
        }
        ScenarioParams::Waypoints { points, speed, noise } => {
            Box::new(WaypointOperator::new(points.clone(), *speed, *noise, rng))
        }
    }
}

/// Holds the rest pose with a zero base twist.
pub struct ZeroOperator;

impl Operator for ZeroOperator {
    fn command(&mut self, view: &OperatorView) -> OperatorInput {
        OperatorInput::Command(rest_action(view))
    }
}

/// Drives along a fixed heading; after each new contact event backs off for
/// one second and tries again.
pub struct WallApproachOperator {
    speed: f64,
    heading: f64,
    jitter: Normal<f64>,
    rng: ChaCha8Rng,
    seen_collisions: usize,
    backoff_until: f64,
}

impl WallApproachOperator {
    pub fn new(speed: f64, heading: f64, jitter: f64, rng: ChaCha8Rng) -> Self {
        Self {
            speed,
            heading,
            jitter: Normal::new(0.0, jitter.max(0.0)).expect("finite jitter"),
            rng,
            seen_collisions: 0,
            backoff_until: f64::NEG_INFINITY,
        }
    }
}

impl Operator for WallApproachOperator {
    fn command(&mut self, view: &OperatorView) -> OperatorInput {
        if view.collisions_total > self.seen_collisions {
            self.seen_collisions = view.collisions_total;
            self.backoff_until = view.time + 1.0;
        }
        let (s, c) = self.heading.sin_cos();
        let v = if view.time < self.backoff_until { -0.15 } else { self.speed };
        let mut a = rest_action(view);
        a.base_twist = BaseTwist::new(
            v * c + self.jitter.sample(&mut self.rng),
            v * s + self.jitter.sample(&mut self.rng),
            0.0,
        );
        OperatorInput::Command(a)
    }
}

/// Approaches a target with the base, reaches it with one arm through damped
/// least squares, then traces a small circle around it for two seconds.
pub struct ReachOperator {
    target: Vector3<f64>,
    speed: f64,
    stop_distance: f64,
    arm: usize,
    q_des: Option<DVector<f64>>,
    manipulating_since: Option<f64>,
}

const REACH_TOLERANCE: f64 = 0.02;
const MANIPULATION_TIME: f64 = 2.0;
const MAX_REACH_FROM_SHOULDER: f64 = 0.63;

impl ReachOperator {
    pub fn new(target: Vector3<f64>, speed: f64, stop_distance: f64, arm: usize) -> Self {
        Self { target, speed, stop_distance, arm, q_des: None, manipulating_since: None }
    }

    fn ik_step(chain: &KinematicChain, q: &DVector<f64>, goal: &Vector3<f64>) -> DVector<f64> {
        let x = *chain.forward_kinematics(q).expect("finite q").translation();
        let mut e = goal - x;
        if e.norm() > 0.03 {
            e *= 0.03 / e.norm();
        }
        let j: DMatrix<f64> = chain.position_jacobian(q).expect("finite q");
        let lambda2 = 0.05f64.powi(2);
        let jjt = &j * j.transpose() + DMatrix::identity(3, 3) * lambda2;
        let y = jjt.lu().solve(&DVector::from_column_slice(e.as_slice())).expect("damped system is regular");
        chain.clamp_to_limits(&(q + j.transpose() * y))
    }
}

impl Operator for ReachOperator {
    fn command(&mut self, view: &OperatorView) -> OperatorInput {
        let chain = &view.chains[self.arm];
        let mut action = rest_action(view);
        let q_des = self.q_des.get_or_insert_with(|| action.arm(self.arm).clone()).clone();
        let mount = view.world.arm_mount_in_world(self.arm);
        let target_m = mount.inverse().transform_point(&self.target);

        let reached = {
            let x = *chain.forward_kinematics(view.follower_q[self.arm]).expect("finite q").translation();
            (x - target_m).norm() < REACH_TOLERANCE
        };
        if self.manipulating_since.is_none() && reached {
            self.manipulating_since = Some(view.time);
        }

        let goal = match self.manipulating_since {
            Some(t0) => {
                if view.time - t0 >= MANIPULATION_TIME {
                    return OperatorInput::Done { success: true };
                }
                let ph = std::f64::consts::TAU * (view.time - t0) / MANIPULATION_TIME;
                target_m + Vector3::new(0.0, 0.03 * ph.cos() - 0.03, 0.03 * ph.sin())
            }
            None => {
                let shoulder = Vector3::new(0.0, 0.0, 0.1);
                let rel = target_m - shoulder;
                if rel.norm() > MAX_REACH_FROM_SHOULDER {
                    shoulder + rel * (MAX_REACH_FROM_SHOULDER / rel.norm())
                } else {
                    target_m
                }
            }
        };
        let q_next = Self::ik_step(chain, &q_des, &goal);
        self.q_des = Some(q_next.clone());
        if self.arm == 0 {
            action.q_left = q_next;
        } else {
            action.q_right = q_next;
        }

        let h = Vector2::new(target_m.x, target_m.y);
        if self.manipulating_since.is_none() && h.norm() > self.stop_distance {
            let d = h / h.norm() * self.speed;
            action.base_twist = BaseTwist::new(d.x, d.y, 0.0);
        }
        OperatorInput::Command(action)
    }
}

/// Follows waypoints (world frame) with a noisy heading.
pub struct WaypointOperator {
    points: Vec<Vector2<f64>>,
    speed: f64,
    noise: Normal<f64>,
    rng: ChaCha8Rng,
    next: usize,
}

impl WaypointOperator {
    pub fn new(points: Vec<Vector2<f64>>, speed: f64, noise: f64, rng: ChaCha8Rng) -> Self {
        Self { points, speed, noise: Normal::new(0.0, noise.max(0.0)).expect("finite noise"), rng, next: 0 }
    }
}

impl Operator for WaypointOperator {
    fn command(&mut self, view: &OperatorView) -> OperatorInput {
        let p = view.world.base.position();
        while self.next < self.points.len() && (self.points[self.next] - p).norm() < 0.15 {
            self.next += 1;
        }
        if self.next == self.points.len() {
            return OperatorInput::Done { success: true };
        }
        let to = self.points[self.next] - p;
        let v_world = to / to.norm() * self.speed;
        let v = view.world.base.to_base(&v_world);
        let mut a = rest_action(view);
        a.base_twist = BaseTwist::new(
            v.x + self.noise.sample(&mut self.rng),
            v.y + self.noise.sample(&mut self.rng),
            0.0,
        );
        OperatorInput::Command(a)
    }
}
