//! Extrinsic calibration of the wrist camera (gripper -> wrist camera) and the
//! head camera (base -> head camera) from fiducial observations.
//!
//! For every configuration the target seen through the arm chain and through
//! the head camera must coincide:
//!
//! ```text
//! T_BG,i * X_w * T_CwTag,i  ~=  X_h * T_ChTag,i
//! ```
//!
//! Both unknowns are refined with Levenberg-Marquardt on left-multiplicative
//! twist updates `X <- exp(delta) * X`.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{exp_map, log_map, Pose, Twist6};

/// Detections below this confidence are dropped before solving.
pub const MIN_CONFIDENCE: f64 = 0.5;

/// One calibration configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibSample {
    pub base_to_gripper: Pose,
    pub head_tag: Pose,
    pub wrist_tag: Pose,
    pub confidence: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
    /// Stop immediately once the cost drops below this value.
    pub absolute_tolerance: f64,
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Central-difference step for the residual Jacobian.
    pub fd_step: f64,
    /// Consecutive rejected steps before giving up.
    pub max_rejections: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            relative_tolerance: 1e-10,
            absolute_tolerance: 1e-24,
            max_iterations: 100,
            initial_damping: 1e-3,
            fd_step: 1e-7,
            max_rejections: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibEstimate {
    pub gripper_to_wristcam: Pose,
    pub base_to_headcam: Pose,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of each retained sample's residual at the solution.
    pub residual_norms: Vec<f64>,
    /// Set when the retained samples carry no rotational diversity.
    pub rotation_unobservable: bool,
    /// Samples dropped for low confidence.
    pub discarded: usize,
}

/// Both wrist extrinsics and a shared head extrinsic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointCalibEstimate {
    pub left_gripper_to_wristcam: Pose,
    pub right_gripper_to_wristcam: Pose,
    pub base_to_headcam: Pose,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `log(E)^v` with `E = (T_BG X_w T_CwTag)^-1 (X_h T_ChTag)`.
pub fn residual(sample: &CalibSample, x_w: &Pose, x_h: &Pose) -> Result<Twist6> {
    let via_arm = sample.base_to_gripper.compose(x_w).compose(&sample.wrist_tag);
    let via_head = x_h.compose(&sample.head_tag);
    log_map(&via_arm.inverse().compose(&via_head))
}

/// Rotation angle (rad) and translation distance (m) between two poses.
pub fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
    let rel = a.inverse().compose(b);
    (rel.rotation_angle(), (a.translation() - b.translation()).norm())
}

struct LmOutcome {
    poses: Vec<Pose>,
    cost: f64,
    iterations: usize,
    converged: bool,
}

/// Stacked residuals; samples at the log branch cut contribute zero.
fn stacked<F>(poses: &[Pose], n_res: usize, f: &F) -> DVector<f64>
where
    F: Fn(&[Pose], usize) -> Result<Twist6>,
{
    let mut r = DVector::zeros(6 * n_res);
    for i in 0..n_res {
        if let Ok(e) = f(poses, i) {
            r.fixed_rows_mut::<6>(6 * i).copy_from(&e.to_vector());
        }
    }
    r
}

fn perturb(poses: &[Pose], delta: &DVector<f64>) -> Result<Vec<Pose>> {
    poses
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let d = Twist6::new(
                Vector3::new(delta[6 * k], delta[6 * k + 1], delta[6 * k + 2]),
                Vector3::new(delta[6 * k + 3], delta[6 * k + 4], delta[6 * k + 5]),
            );
            Ok(exp_map(&d)?.compose(p))
        })
        .collect()
}

fn lm<F>(init: Vec<Pose>, n_res: usize, opts: &SolverOptions, f: F) -> Result<LmOutcome>
where
    F: Fn(&[Pose], usize) -> Result<Twist6>,
{
    let dim = 6 * init.len();
    let mut poses = init;
    let mut r = stacked(&poses, n_res, &f);
    let mut cost = r.norm_squared();
    let mut lambda = opts.initial_damping;
    let mut iterations = 0;
    let mut rejections = 0;

    if cost < opts.absolute_tolerance {
        return Ok(LmOutcome { poses, cost, iterations, converged: true });
    }

    while iterations < opts.max_iterations {
        iterations += 1;
        let mut jac = DMatrix::zeros(r.len(), dim);
        for k in 0..dim {
            let mut d = DVector::zeros(dim);
            d[k] = opts.fd_step;
            let plus = stacked(&perturb(&poses, &d)?, n_res, &f);
            d[k] = -opts.fd_step;
            let minus = stacked(&perturb(&poses, &d)?, n_res, &f);
            jac.set_column(k, &((plus - minus) / (2.0 * opts.fd_step)));
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * &r;

        loop {
            let mut a = jtj.clone();
            for k in 0..dim {
                a[(k, k)] += lambda;
            }
            let step = match a.cholesky() {
                Some(ch) => -ch.solve(&g),
                None => {
                    lambda *= 10.0;
                    rejections += 1;
                    if rejections >= opts.max_rejections {
                        return Ok(LmOutcome { poses, cost, iterations, converged: false });
                    }
                    continue;
                }
            };
            let candidate = perturb(&poses, &step)?;
            let r_new = stacked(&candidate, n_res, &f);
            let new_cost = r_new.norm_squared();
            if new_cost < cost {
                let rel = (cost - new_cost) / cost;
                poses = candidate;
                r = r_new;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-12);
                rejections = 0;
                if cost < opts.absolute_tolerance || rel < opts.relative_tolerance {
                    return Ok(LmOutcome { poses, cost, iterations, converged: true });
                }
                break;
            }
            // a vanishing step means we already sit at a stationary point
            if step.norm() < 1e-13 {
                return Ok(LmOutcome { poses, cost, iterations, converged: true });
            }
            lambda *= 10.0;
            rejections += 1;
            if rejections >= opts.max_rejections {
                return Ok(LmOutcome { poses, cost, iterations, converged: false });
            }
        }
    }
    Ok(LmOutcome { poses, cost, iterations, converged: false })
}

fn retained(samples: &[CalibSample]) -> (Vec<&CalibSample>, usize) {
    let kept: Vec<_> = samples
        .iter()
        .filter(|s| s.confidence.is_finite() && s.confidence >= MIN_CONFIDENCE)
        .collect();
    let dropped = samples.len() - kept.len();
    (kept, dropped)
}

/// True when every gripper orientation matches the first within `1e-3` rad.
pub fn rotations_degenerate(samples: &[&CalibSample]) -> bool {
    let Some(first) = samples.first() else { return true };
    samples.iter().all(|s| {
        first
            .base_to_gripper
            .inverse()
            .compose(&s.base_to_gripper)
            .rotation_angle()
            < 1e-3
    })
}

/// Refines both extrinsics of one arm from at least three confident samples.
pub fn solve_extrinsics(
    samples: &[CalibSample],
    init_w: &Pose,
    init_h: &Pose,
    opts: &SolverOptions,
) -> Result<CalibEstimate> {
    let (kept, discarded) = retained(samples);
    if kept.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, got: kept.len() });
    }
    let out = lm(vec![*init_w, *init_h], kept.len(), opts, |p, i| {
        residual(kept[i], &p[0], &p[1])
    })?;
    let residual_norms = kept
        .iter()
        .map(|s| residual(s, &out.poses[0], &out.poses[1]).map_or(f64::INFINITY, |e| e.norm()))
        .collect();
    Ok(CalibEstimate {
        gripper_to_wristcam: out.poses[0],
        base_to_headcam: out.poses[1],
        final_cost: out.cost,
        iterations: out.iterations,
        converged: out.converged,
        residual_norms,
        rotation_unobservable: rotations_degenerate(&kept),
        discarded,
    })
}

/// Solves both arms at once with a single head-camera extrinsic.
pub fn solve_extrinsics_joint(
    left: &[CalibSample],
    right: &[CalibSample],
    init_left_w: &Pose,
    init_right_w: &Pose,
    init_h: &Pose,
    opts: &SolverOptions,
) -> Result<JointCalibEstimate> {
    let (l, _) = retained(left);
    let (r, _) = retained(right);
    if l.len() < 3 || r.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, got: l.len().min(r.len()) });
    }
    let nl = l.len();
    let out = lm(vec![*init_left_w, *init_right_w, *init_h], nl + r.len(), opts, |p, i| {
        if i < nl {
            residual(l[i], &p[0], &p[2])
        } else {
            residual(r[i - nl], &p[1], &p[2])
        }
    })?;
    Ok(JointCalibEstimate {
        left_gripper_to_wristcam: out.poses[0],
        right_gripper_to_wristcam: out.poses[1],
        base_to_headcam: out.poses[2],
        final_cost: out.cost,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Cross-view consistency on held-out samples: residual norm per sample.
pub fn validate(samples: &[CalibSample], estimate: &CalibEstimate) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            Ok(residual(s, &estimate.gripper_to_wristcam, &estimate.base_to_headcam)?.norm())
        })
        .collect()
}

/// Independent Gaussian noise on the fiducial observations.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct TagNoise {
    pub sigma_rot: f64,
    pub sigma_trans: f64,
}

fn noisy(pose: &Pose, noise: &TagNoise, rng: &mut ChaCha8Rng) -> Result<Pose> {
    if noise.sigma_rot == 0.0 && noise.sigma_trans == 0.0 {
        return Ok(*pose);
    }
    let rot = Normal::new(0.0, noise.sigma_rot).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let tr = Normal::new(0.0, noise.sigma_trans).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let d = Twist6::new(
        Vector3::new(rot.sample(rng), rot.sample(rng), rot.sample(rng)),
        Vector3::new(tr.sample(rng), tr.sample(rng), tr.sample(rng)),
    );
    Ok(pose.compose(&exp_map(&d)?))
}

/// Synthetic calibration session consistent with the given extrinsics.
///
/// A target is placed ahead of the robot and the gripper visits `n` poses
/// with independent random orientations (up to ~0.8 rad from a nominal
/// downward-looking pose), so rotations are always non-trivial.
pub fn generate_synthetic_session(
    truth_w: &Pose,
    truth_h: &Pose,
    n: usize,
    noise: TagNoise,
    seed: u64,
) -> Result<Vec<CalibSample>> {
    if noise.sigma_rot < 0.0 || noise.sigma_trans < 0.0 {
        return Err(Error::InvalidParameter("noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_to_tag = exp_map(&Twist6::new(
        Vector3::new(0.0, 0.0, 0.3),
        Vector3::new(0.55, 0.0, 0.02),
    ))?;
    let nominal = Pose::from_axis_angle(&Vector3::y(), std::f64::consts::FRAC_PI_2);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let position = Vector3::new(
            rng.random_range(0.30..0.50),
            rng.random_range(-0.15..0.15),
            rng.random_range(0.25..0.45),
        );
        let tilt = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let orientation = exp_map(&Twist6::new(tilt, Vector3::zeros()))?.compose(&nominal);
        let base_to_gripper = Pose::from_parts(*orientation.rotation(), position);
        let wrist_tag = base_to_gripper.compose(truth_w).inverse().compose(&base_to_tag);
        let head_tag = truth_h.inverse().compose(&base_to_tag);
        samples.push(CalibSample {
            base_to_gripper,
            head_tag: noisy(&head_tag, &noise, &mut rng)?,
            wrist_tag: noisy(&wrist_tag, &noise, &mut rng)?,
            confidence: 1.0,
        });
    }
    Ok(samples)
}

/// Gripper -> wrist camera and base -> head camera used by the synthetic tests.
pub fn reference_extrinsics() -> (Pose, Pose) {
    let w = exp_map(&Twist6::new(
        Vector3::new(0.05, -0.1, 1.4),
        Vector3::new(0.04, 0.01, 0.06),
    ))
    .expect("finite");
    let h = exp_map(&Twist6::new(
        Vector3::new(-0.6, 0.9, 0.1),
        Vector3::new(0.10, 0.0, 0.85),
    ))
    .expect("finite");
    (w, h)
}
