//! The 50 Hz whole-body loop: operator input, feedback laws, arm tracking,
//! world stepping and episode logging.

mod dataset;
mod metrics;
mod scenario;

pub use dataset::{export_dataset, load_dataset, DatasetManifest, DatasetRecord, ObservationRecord, LIDAR_SECTORS};
pub use metrics::{bootstrap_mean_diff_ci, compute_metrics, EpisodeMetrics, SuccessRule};
pub use scenario::{
    scripted_operator, ReachOperator, Scenario, ScenarioKind, WallApproachOperator, WaypointOperator,
    ZeroOperator,
};

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hapticlaw::{
    impedance_torque, merge_cues, pedal_resistance, reflection_feedforward, CueSource, ImpedanceGains, PedalCue,
    PotentialParams,
};
use crate::kinechain::{JointState, KinematicChain};
use crate::manipfield::{
    combine_guidance, guidance_cue, oracle_field, train_surrogate, Aabb, AscentFrame, GuidanceOutput, GuidanceParams,
    Surrogate, TrainConfig,
};
use crate::simworld::{BasePose, BaseTwist, World, CONTROL_DT, DEFAULT_BEAMS};

pub const SUBSTEPS: usize = 2;
pub const DEFAULT_COMPLIANCE_GAIN: f64 = 0.05;
/// Interaction torque above which a tick counts as contact (N·m).
pub const CONTACT_TORQUE_FLOOR: f64 = 0.05;
/// Folded, dexterous pose of the reference arm.
pub const REST_POSE: [f64; 6] = [0.0, -0.45, 1.43, 0.0, 1.44, 0.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackFlags {
    pub pedal_feedback: bool,
    pub arm_reflection: bool,
    pub guidance: bool,
}

impl FeedbackFlags {
    pub fn all() -> Self {
        Self { pedal_feedback: true, arm_reflection: true, guidance: true }
    }

    pub fn none() -> Self {
        Self::default()
    }

    /// Comma-separated list of `pedal`, `reflection`, `guidance`, or `all` / `none`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Self::none();
        for tok in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "all" => f = Self::all(),
                "none" => f = Self::none(),
                "pedal" | "pedal_feedback" => f.pedal_feedback = true,
                "reflection" | "arm_reflection" => f.arm_reflection = true,
                "guidance" => f.guidance = true,
                other => return Err(Error::InvalidParameter(format!("unknown feedback flag {other}"))),
            }
        }
        Ok(f)
    }
}

/// `a_t = [u_b; q_L; q_R]` plus gripper openings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WholeBodyAction {
    pub base_twist: BaseTwist,
    pub q_left: DVector<f64>,
    pub q_right: DVector<f64>,
    pub grippers: [f64; 2],
}

impl WholeBodyAction {
    pub fn hold(q_left: DVector<f64>, q_right: DVector<f64>) -> Self {
        Self { base_twist: BaseTwist::default(), q_left, q_right, grippers: [0.0; 2] }
    }

    pub fn is_finite(&self) -> bool {
        self.base_twist.is_finite()
            && self.q_left.iter().chain(self.q_right.iter()).all(|v| v.is_finite())
            && self.grippers.iter().all(|g| g.is_finite())
    }

    /// Flat layout: base velocities, then left and right joint targets.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = vec![self.base_twist.vx, self.base_twist.vy, self.base_twist.omega];
        v.extend(self.q_left.iter());
        v.extend(self.q_right.iter());
        DVector::from_vec(v)
    }

    pub fn from_vector(v: &[f64], n: usize) -> Result<Self> {
        if v.len() != 2 * n + 3 {
            return Err(Error::DimensionMismatch { expected: 2 * n + 3, got: v.len() });
        }
        Ok(Self {
            base_twist: BaseTwist::new(v[0], v[1], v[2]),
            q_left: DVector::from_row_slice(&v[3..3 + n]),
            q_right: DVector::from_row_slice(&v[3 + n..]),
            grippers: [0.0; 2],
        })
    }

    pub fn arm(&self, side: usize) -> &DVector<f64> {
        if side == 0 {
            &self.q_left
        } else {
            &self.q_right
        }
    }
}

/// What the operator hands the loop each tick.
#[derive(Clone, Debug, PartialEq)]
pub enum OperatorInput {
    Command(WholeBodyAction),
    /// Nothing new: keep the previous command.
    Hold,
    /// The operator declares the task finished.
    Done { success: bool },
    /// The command channel is gone.
    Closed,
}

/// Read-only state offered to the operator before each command.
pub struct OperatorView<'a> {
    pub tick: u64,
    pub time: f64,
    pub world: &'a World,
    pub chains: &'a [KinematicChain; 2],
    pub follower_q: [&'a DVector<f64>; 2],
    /// Measured follower torque from the previous tick.
    pub follower_tau: [&'a DVector<f64>; 2],
    pub collisions_total: usize,
    pub last_cue: &'a PedalCue,
}

pub trait Operator {
    fn command(&mut self, view: &OperatorView) -> OperatorInput;
    /// Cues rendered for this tick.
    fn feedback(&mut self, _record: &TickRecord) {}
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub flags: FeedbackFlags,
    pub chains: Option<[KinematicChain; 2]>,
    pub follower_gains: Option<ImpedanceGains>,
    pub leader_gains: Option<ImpedanceGains>,
    pub potential: PotentialParams,
    /// Defaults to [`session_guidance`].
    pub guidance: Option<GuidanceParams>,
    /// m/s per N of rendered cue, applied to scripted commands.
    pub compliance_gain: f64,
    pub lidar_beams: usize,
    /// Overrides the scenario's episode length (s).
    pub max_duration: Option<f64>,
    pub surrogate_path: Option<PathBuf>,
    /// Per-joint follower inertia (kg·m²) and viscous friction (N·m·s).
    pub joint_inertia: f64,
    pub joint_friction: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Idle,
            seed: 0,
            flags: FeedbackFlags::none(),
            chains: None,
            follower_gains: None,
            leader_gains: None,
            potential: PotentialParams::default(),
            guidance: None,
            compliance_gain: DEFAULT_COMPLIANCE_GAIN,
            lidar_beams: DEFAULT_BEAMS,
            max_duration: None,
            surrogate_path: None,
            joint_inertia: 0.05,
            joint_friction: 0.3,
        }
    }
}

impl SessionConfig {
    pub fn new(scenario: ScenarioKind, seed: u64, flags: FeedbackFlags) -> Self {
        Self { scenario, seed, flags, ..Default::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn chains(&self) -> [KinematicChain; 2] {
        self.chains.clone().unwrap_or_else(|| [KinematicChain::reference_arm(), KinematicChain::reference_arm()])
    }
}

/// Guidance settings for the reference arm: the manipulability threshold is
/// calibrated to the arm's field and the gradient term steers the base.
pub fn session_guidance() -> GuidanceParams {
    GuidanceParams { manip_threshold: 0.025, frame: AscentFrame::BaseMotion, ..GuidanceParams::default() }
}

/// Surrogate for [`KinematicChain::reference_arm`], trained once per process.
pub fn reference_surrogate() -> Arc<Surrogate> {
    static CELL: OnceLock<Arc<Surrogate>> = OnceLock::new();
    CELL.get_or_init(|| {
        let (bounds, resolution, samples, cfg) = reference_field_recipe();
        let grid = oracle_field(&KinematicChain::reference_arm(), bounds, resolution, samples, 0).expect("reference field");
        let (s, _) = train_surrogate(&grid.labeled_points(), &cfg).expect("reference surrogate");
        Arc::new(s)
    })
    .clone()
}

/// Oracle bounds, cell size, joint-space sample count and training setup
/// behind [`reference_surrogate`].
pub fn reference_field_recipe() -> (Aabb, f64, usize, TrainConfig) {
    (Aabb::cube(0.8), 0.05, 3_000_000, TrainConfig { epochs: 150, ..TrainConfig::default() })
}

/// Median of `w(q)` over uniformly sampled joint configurations.
pub fn manipulability_median(chain: &KinematicChain, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let q = DVector::from_iterator(chain.dof(), chain.joint_limits().iter().map(|&(lo, hi)| rng.random_range(lo..=hi)));
        ws.push(chain.manipulability(&q)?);
    }
    ws.sort_by(f64::total_cmp);
    Ok(ws[ws.len() / 2])
}

fn reference_median() -> f64 {
    static CELL: OnceLock<f64> = OnceLock::new();
    *CELL.get_or_init(|| manipulability_median(&KinematicChain::reference_arm(), 20_000, 0).expect("median"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanDigest {
    pub min_range: f64,
    pub sectors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub time: f64,
    /// Follower joint states at each 100 Hz sub-step, `[left, right]`.
    pub joint_states: Vec<[JointState; 2]>,
    pub base: BasePose,
    pub command: WholeBodyAction,
    pub effective_twist: BaseTwist,
    pub scan: ScanDigest,
    pub pedal: PedalCue,
    pub guidance: [Option<GuidanceOutput>; 2],
    /// Cue delivered to the operator.
    pub cue: PedalCue,
    pub m_hat: [Option<f64>; 2],
    pub w: [f64; 2],
    pub contact: bool,
    pub collision_events: usize,
    /// Measured follower torque (impedance plus gravity compensation).
    pub torque: [DVector<f64>; 2],
    pub interaction_torque: [DVector<f64>; 2],
    pub leader_feedforward: [DVector<f64>; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    /// Ran to the scenario's time limit.
    TimeLimit,
    /// Operator declared the task done.
    Finished { success: bool },
    /// Operator channel closed.
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub scenario: ScenarioKind,
    pub flags: FeedbackFlags,
    pub seed: u64,
    pub dof: [usize; 2],
    pub dt: f64,
    pub substeps: usize,
    pub compliance_gain: f64,
    pub w_median: f64,
    pub primary_arm: usize,
    pub success_rule: SuccessRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub meta: EpisodeMeta,
    pub status: EpisodeStatus,
    pub ticks: Vec<TickRecord>,
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    meta: EpisodeMeta,
    status: EpisodeStatus,
}

impl EpisodeLog {
    /// JSONL: a header line with metadata and status, then one line per tick.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = LogHeader { meta: self.meta.clone(), status: self.status };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for t in &self.ticks {
            serde_json::to_writer(&mut w, t)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or(Error::InsufficientData { needed: 1, got: 0 })??;
        let header: LogHeader = serde_json::from_str(&first)?;
        let mut ticks = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                ticks.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { meta: header.meta, status: header.status, ticks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

struct ArmState {
    follower: JointState,
    leader_q: DVector<f64>,
}

/// One running episode. Drive it with [`Session::step`] or [`run_episode`].
pub struct Session {
    cfg: SessionConfig,
    scenario: Scenario,
    world: World,
    chains: [KinematicChain; 2],
    follower_gains: ImpedanceGains,
    leader_gains: ImpedanceGains,
    guidance: GuidanceParams,
    surrogate: Option<Arc<Surrogate>>,
    arms: [ArmState; 2],
    last_command: WholeBodyAction,
    last_cue: PedalCue,
    collisions_total: usize,
    tick: u64,
    ticks: Vec<TickRecord>,
    status: Option<EpisodeStatus>,
    w_median: f64,
}

impl Session {
    pub fn new(cfg: SessionConfig) -> Result<Self> {
        let scenario = Scenario::build(cfg.scenario, cfg.seed)?;
        Self::with_scenario(cfg, scenario)
    }

    pub fn with_scenario(cfg: SessionConfig, scenario: Scenario) -> Result<Self> {
        cfg.potential.validate()?;
        if !(cfg.compliance_gain >= 0.0) || !(cfg.joint_inertia > 0.0) || !(cfg.joint_friction >= 0.0) {
            return Err(Error::InvalidParameter("compliance, inertia and friction must be non-negative".into()));
        }
        let chains = cfg.chains();
        let n = chains[0].dof();
        if chains[1].dof() != n {
            return Err(Error::DimensionMismatch { expected: n, got: chains[1].dof() });
        }
        let follower_gains = cfg.follower_gains.clone().unwrap_or_else(|| ImpedanceGains::follower(n));
        let leader_gains = cfg.leader_gains.clone().unwrap_or_else(|| ImpedanceGains::leader(n));
        follower_gains.validate()?;
        leader_gains.validate()?;
        for g in [&follower_gains, &leader_gains] {
            if g.kp.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: g.kp.len() });
            }
        }
        let guidance = cfg.guidance.unwrap_or_else(session_guidance);
        guidance.validate()?;
        let is_reference = cfg.chains.is_none();
        let surrogate = match &cfg.surrogate_path {
            Some(p) => Some(Arc::new(Surrogate::from_json(&std::fs::read_to_string(p)?)?)),
            None if is_reference && (cfg.flags.guidance || scenario.uses_field) => Some(reference_surrogate()),
            None => None,
        };
        let w_median = if is_reference {
            reference_median()
        } else {
            manipulability_median(&chains[scenario.primary_arm], 20_000, 0)?
        };
        let rest = |c: &KinematicChain| {
            if c.dof() == REST_POSE.len() {
                c.clamp_to_limits(&DVector::from_row_slice(&REST_POSE))
            } else {
                DVector::zeros(c.dof())
            }
        };
        let arms = [0, 1].map(|i| {
            let q = rest(&chains[i]);
            ArmState { follower: JointState::at_rest(q.clone()), leader_q: q }
        });
        let last_command = WholeBodyAction::hold(arms[0].leader_q.clone(), arms[1].leader_q.clone());
        let world = scenario.world.clone();
        Ok(Self {
            cfg,
            scenario,
            world,
            chains,
            follower_gains,
            leader_gains,
            guidance,
            surrogate,
            arms,
            last_command,
            last_cue: PedalCue::inactive(CueSource::Collision),
            collisions_total: 0,
            tick: 0,
            ticks: Vec::new(),
            status: None,
            w_median,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn chains(&self) -> &[KinematicChain; 2] {
        &self.chains
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn ticks(&self) -> &[TickRecord] {
        &self.ticks
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn status(&self) -> Option<EpisodeStatus> {
        self.status
    }

    pub fn max_ticks(&self) -> u64 {
        let dur = self.cfg.max_duration.unwrap_or(self.scenario.max_duration);
        (dur / CONTROL_DT).round() as u64
    }

    pub fn view(&self) -> OperatorView<'_> {
        OperatorView {
            tick: self.tick,
            time: self.world.time,
            world: &self.world,
            chains: &self.chains,
            follower_q: [&self.arms[0].follower.q, &self.arms[1].follower.q],
            follower_tau: [&self.arms[0].follower.tau, &self.arms[1].follower.tau],
            collisions_total: self.collisions_total,
            last_cue: &self.last_cue,
        }
    }

    fn sanitize(&self, mut a: WholeBodyAction) -> Result<WholeBodyAction> {
        let n = self.chains[0].dof();
        for q in [&a.q_left, &a.q_right] {
            if q.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: q.len() });
            }
        }
        if !a.is_finite() {
            return Err(Error::NonFinite("operator command"));
        }
        a.base_twist = a.base_twist.clamped(&self.world.limits);
        a.q_left = self.chains[0].clamp_to_limits(&a.q_left);
        a.q_right = self.chains[1].clamp_to_limits(&a.q_right);
        a.grippers = a.grippers.map(|g| g.clamp(0.0, 1.0));
        Ok(a)
    }

    /// Advances one control tick. Returns `None` once the episode has ended.
    pub fn step(&mut self, input: OperatorInput) -> Result<Option<&TickRecord>> {
        if self.status.is_some() {
            return Ok(None);
        }
        match input {
            OperatorInput::Command(a) => self.last_command = self.sanitize(a)?,
            OperatorInput::Hold => {}
            OperatorInput::Done { success } => {
                self.status = Some(EpisodeStatus::Finished { success });
                return Ok(None);
            }
            OperatorInput::Closed => {
                self.status = Some(EpisodeStatus::Timeout);
                return Ok(None);
            }
        }
        let cmd = self.last_command.clone();
        let flags = self.cfg.flags;

        let scan = self.world.lidar_scan(self.cfg.lidar_beams)?;
        let pedal = if flags.pedal_feedback {
            pedal_resistance(&scan, &cmd.base_twist, &self.cfg.potential)?
        } else {
            PedalCue::inactive(CueSource::Collision)
        };

        let mut m_hat = [None, None];
        let mut guidance = [None, None];
        for side in 0..2 {
            let x = *self.chains[side].forward_kinematics(&self.arms[side].follower.q)?.translation();
            if let Some(s) = &self.surrogate {
                let out = guidance_cue(&x, s.as_ref(), &self.guidance);
                m_hat[side] = Some(out.m_hat);
                if flags.guidance {
                    guidance[side] = Some(out);
                }
            }
        }
        let guided: Vec<GuidanceOutput> = guidance.iter().flatten().copied().collect();
        let guide_cue = combine_guidance(&guided, self.guidance.k_guide);
        let cue = merge_cues(&[pedal, guide_cue], self.cfg.potential.f_max);

        let effective = BaseTwist::new(
            cmd.base_twist.vx + cue.force_xy.x * self.cfg.compliance_gain,
            cmd.base_twist.vy + cue.force_xy.y * self.cfg.compliance_gain,
            cmd.base_twist.omega,
        )
        .clamped(&self.world.limits);

        let sub_dt = CONTROL_DT / SUBSTEPS as f64;
        let mut joint_states = Vec::with_capacity(SUBSTEPS);
        let mut torque = [DVector::zeros(0), DVector::zeros(0)];
        for _ in 0..SUBSTEPS {
            for side in 0..2 {
                self.arms[side].leader_q = cmd.arm(side).clone();
                torque[side] = self.arm_substep(side, sub_dt)?;
            }
            joint_states.push([0, 1].map(|s| {
                let mut js = self.arms[s].follower.clone();
                js.tau = torque[s].clone();
                js
            }));
        }

        let mut interaction = [DVector::zeros(0), DVector::zeros(0)];
        let mut leader_ff = [DVector::zeros(0), DVector::zeros(0)];
        let mut w = [0.0; 2];
        for side in 0..2 {
            let chain = &self.chains[side];
            let q = &self.arms[side].follower.q;
            interaction[side] = &torque[side] - chain.gravity_torques(q)?;
            let lq = &self.arms[side].leader_q;
            leader_ff[side] = if flags.arm_reflection {
                reflection_feedforward(&torque[side], q, lq, &self.leader_gains.reflection_scale, chain)?
            } else {
                chain.gravity_torques(lq)?
            };
            w[side] = chain.manipulability(q)?;
        }

        let outcome = self.world.advance(&effective, CONTROL_DT);
        self.collisions_total += outcome.events;
        self.last_cue = cue;
        self.tick += 1;

        let record = TickRecord {
            tick: self.tick,
            time: self.tick as f64 * CONTROL_DT,
            joint_states,
            base: self.world.base,
            command: cmd,
            effective_twist: effective,
            scan: ScanDigest { min_range: scan.min_range(), sectors: scan.sectors(LIDAR_SECTORS) },
            pedal,
            guidance,
            cue,
            m_hat,
            w,
            contact: outcome.contact,
            collision_events: outcome.events,
            torque,
            interaction_torque: interaction,
            leader_feedforward: leader_ff,
        };
        self.ticks.push(record);
        if self.tick >= self.max_ticks() {
            self.status = Some(EpisodeStatus::TimeLimit);
        }
        Ok(self.ticks.last())
    }

    /// Follower impedance tracking with gravity compensation; the plant is a
    /// per-joint inertia with viscous friction under the same gravity model.
    fn arm_substep(&mut self, side: usize, dt: f64) -> Result<DVector<f64>> {
        let chain = &self.chains[side];
        let arm = &mut self.arms[side];
        let g = chain.gravity_torques(&arm.follower.q)?;
        let desired = JointState::at_rest(arm.leader_q.clone());
        let tau = impedance_torque(&self.follower_gains, &arm.follower, &desired, &g)?;
        let qddot = (&tau - &g - &arm.follower.qdot * self.cfg.joint_friction) / self.cfg.joint_inertia;
        arm.follower.qdot += qddot * dt;
        let q = &arm.follower.q + &arm.follower.qdot * dt;
        let clamped = chain.clamp_to_limits(&q);
        for i in 0..q.len() {
            if clamped[i] != q[i] {
                arm.follower.qdot[i] = 0.0;
            }
        }
        arm.follower.q = clamped;
        arm.follower.tau = tau.clone();
        Ok(tau)
    }

    pub fn finish(self) -> EpisodeLog {
        EpisodeLog {
            meta: EpisodeMeta {
                scenario: self.cfg.scenario,
                flags: self.cfg.flags,
                seed: self.cfg.seed,
                dof: [self.chains[0].dof(), self.chains[1].dof()],
                dt: CONTROL_DT,
                substeps: SUBSTEPS,
                compliance_gain: self.cfg.compliance_gain,
                w_median: self.w_median,
                primary_arm: self.scenario.primary_arm,
                success_rule: self.scenario.success.clone(),
            },
            status: self.status.unwrap_or(EpisodeStatus::TimeLimit),
            ticks: self.ticks,
        }
    }

    /// World-frame end-effector position of arm `side`.
    pub fn end_effector_world(&self, side: usize) -> Result<Vector3<f64>> {
        let fk = self.chains[side].forward_kinematics(&self.arms[side].follower.q)?;
        Ok(self.world.arm_mount_in_world(side).transform_point(fk.translation()))
    }
}

/// Runs a full episode against `operator`.
pub fn run_episode(cfg: &SessionConfig, operator: &mut dyn Operator) -> Result<EpisodeLog> {
    let mut session = Session::new(cfg.clone())?;
    drive(&mut session, operator)?;
    Ok(session.finish())
}

/// Runs the scenario with its scripted operator.
pub fn run_scripted(cfg: &SessionConfig) -> Result<EpisodeLog> {
    let mut session = Session::new(cfg.clone())?;
    let mut op = scripted_operator(&session.scenario, cfg.seed);
    drive(&mut session, op.as_mut())?;
    Ok(session.finish())
}

fn drive(session: &mut Session, operator: &mut dyn Operator) -> Result<()> {
    while session.status.is_none() {
        let input = operator.command(&session.view());
        if let Some(rec) = session.step(input)? {
            operator.feedback(rec);
        }
    }
    Ok(())
}
