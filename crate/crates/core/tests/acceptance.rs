//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::{DVector, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use teleop_core::bridge::{decode, encode, Bridge, ChannelOperator};
use teleop_core::chunkpolicy::{self, contact_gated_dataset, mode_accuracy, PolicyConfig, PolicyModel};
use teleop_core::extcalib::{self, pose_error, SolverOptions, TagNoise};
use teleop_core::hapticlaw::{pedal_resistance, potential, potential_force, PotentialParams};
use teleop_core::liegroup::{exp_map, log_map, Pose, Twist6};
use teleop_core::manipfield::{eval_surrogate, oracle_field, train_surrogate, Aabb};
use teleop_core::session::{
    bootstrap_mean_diff_ci, compute_metrics, reference_field_recipe, run_episode, run_scripted, EpisodeLog, FeedbackFlags, Operator,
    OperatorInput, OperatorView, ScenarioKind, SessionConfig, TickRecord,
};
use teleop_core::simworld::{BaseTwist, LidarScan};
use teleop_core::KinematicChain;

type Outcome = (bool, String);

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let n: f64 = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn lie_roundtrips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let twists: Vec<Twist6> = (0..1000)
        .map(|_| {
            let angle = rng.random_range(0.0..3.0);
            let w = random_unit(&mut rng) * angle;
            let v = Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0));
            Twist6::new(w, v)
        })
        .collect();
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for xi in &twists {
        let back = exp_map(xi).and_then(|p| log_map(&p)).map(|b| (b.to_vector() - xi.to_vector()).amax());
        worst = worst.max(back.unwrap_or(f64::INFINITY));
    }
    let secs = t.elapsed().as_secs_f64();
    (worst < 1e-9 && secs < 1.0, format!("max |log(exp(xi)) - xi| = {worst:.2e}, {secs:.3} s"))
}

fn perturbed(p: &Pose, rng: &mut ChaCha8Rng) -> Pose {
    let d = Twist6::new(random_unit(rng) * 0.1, random_unit(rng) * 0.05);
    p.compose(&exp_map(&d).unwrap())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn calibration_recovery() -> Outcome {
    let (tw, th) = extcalib::reference_extrinsics();
    let opts = SolverOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut slowest: f64 = 0.0;
    let mut solve = |noise: TagNoise, seed: u64, rng: &mut ChaCha8Rng| {
        let samples = extcalib::generate_synthetic_session(&tw, &th, 10, noise, seed).unwrap();
        let (iw, ih) = (perturbed(&tw, rng), perturbed(&th, rng));
        let t = Instant::now();
        let est = extcalib::solve_extrinsics(&samples, &iw, &ih, &opts).unwrap();
        slowest = slowest.max(t.elapsed().as_secs_f64());
        let (rw, tw_) = pose_error(&est.gripper_to_wristcam, &tw);
        let (rh, th_) = pose_error(&est.base_to_headcam, &th);
        (rw.max(rh), tw_.max(th_))
    };

    let mut clean = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let (r, t) = solve(TagNoise::default(), seed, &mut rng);
        clean = (clean.0.max(r), clean.1.max(t));
    }
    let noise = TagNoise { sigma_rot: 0.002, sigma_trans: 0.002 };
    let (rots, trans): (Vec<f64>, Vec<f64>) = (0..50).map(|seed| solve(noise, 100 + seed, &mut rng)).unzip();
    let (mr, mt) = (median(rots), median(trans));
    let ok = clean.0 < 1e-6 && clean.1 < 1e-6 && mr < 0.01 && mt < 0.01 && slowest < 1.0;
    (
        ok,
        format!(
            "noiseless worst {:.1e} rad / {:.1e} m; sigma 0.002 median {mr:.4} rad / {mt:.4} m; slowest solve {slowest:.3} s",
            clean.0, clean.1
        ),
    )
}

fn manipulability_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_w: f64 = 0.0;
    for _ in 0..1000 {
        let (l1, l2) = (rng.random_range(0.2..2.0), rng.random_range(0.2..2.0));
        let chain = KinematicChain::planar(&[l1, l2]).unwrap();
        let q = DVector::from_vec(vec![rng.random_range(-PI..PI), rng.random_range(-PI..PI)]);
        let w = chain.manipulability(&q).unwrap();
        worst_w = worst_w.max((w - l1 * l2 * q[1].sin().abs()).abs());
    }

    // FD oracle: translation differences and the rotation increment R(q+h) R(q-h)^T
    let arm = KinematicChain::reference_arm();
    let h = 1e-6;
    let mut worst_j: f64 = 0.0;
    for _ in 0..200 {
        let q = DVector::from_iterator(arm.dof(), arm.joint_limits().iter().map(|&(lo, hi)| rng.random_range(lo..hi)));
        let j = arm.geometric_jacobian(&q).unwrap();
        let mut fd = j.clone() * 0.0;
        for i in 0..arm.dof() {
            let (mut qp, mut qm) = (q.clone(), q.clone());
            qp[i] += h;
            qm[i] -= h;
            let (pp, pm) = (arm.forward_kinematics(&qp).unwrap(), arm.forward_kinematics(&qm).unwrap());
            let lin = (pp.translation() - pm.translation()) / (2.0 * h);
            let dr: Matrix3<f64> = pp.rotation() * pm.rotation().transpose();
            let skew = (dr - dr.transpose()) / 2.0;
            let ang = Vector3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]) / (2.0 * h);
            fd.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            fd.fixed_view_mut::<3, 1>(3, i).copy_from(&ang);
        }
        worst_j = worst_j.max((&j - &fd).norm() / j.norm());
    }
    (
        worst_w < 1e-9 && worst_j < 1e-4,
        format!("2-link |w - L1 L2 |sin q2|| max {worst_w:.1e}; Jacobian vs FD rel err max {worst_j:.1e}"),
    )
}

fn field_and_surrogate() -> Outcome {
    let planar = KinematicChain::planar(&[1.0, 1.0]).unwrap();
    let bounds = Aabb::new(Vector3::new(-2.0, -2.0, -0.05), Vector3::new(2.0, 2.0, 0.05)).unwrap();
    let grid = oracle_field(&planar, bounds, 0.05, 1_000_000, 4).unwrap();
    let ring: Vec<f64> = (0..8)
        .map(|k| {
            let a = k as f64 * PI / 4.0;
            grid.value_at(&(Vector3::new(a.cos(), a.sin(), 0.0) * 2f64.sqrt())).unwrap_or(0.0)
        })
        .collect();
    let ring_dev = ring.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);

    let (bounds, resolution, samples, cfg) = reference_field_recipe();
    let data = oracle_field(&KinematicChain::reference_arm(), bounds, resolution, samples, 0).unwrap().labeled_points();
    let t = Instant::now();
    let (s, rep) = train_surrogate(&data, &cfg).unwrap();
    let train_secs = t.elapsed().as_secs_f64();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dom = s.domain.unwrap();
    let h = 1e-5;
    let mut worst_g: f64 = 0.0;
    for _ in 0..100 {
        let x = Vector3::from_fn(|i, _| rng.random_range(dom.min[i]..dom.max[i]));
        let (_, g) = eval_surrogate(&s, &x);
        let fd = Vector3::from_fn(|i, _| {
            let (mut a, mut b) = (x, x);
            a[i] += h;
            b[i] -= h;
            (s.value(&a) - s.value(&b)) / (2.0 * h)
        });
        worst_g = worst_g.max((g - fd).norm() / g.norm().max(1e-9));
    }
    let ok = ring_dev <= 0.02 && rep.holdout_rmse < 0.05 * rep.max_label && worst_g < 1e-3 && train_secs < 60.0;
    (
        ok,
        format!(
            "ring max |w - 1| {ring_dev:.4}; holdout RMSE {:.5} vs 0.05 max {:.5}; grad rel err {worst_g:.1e}; training {train_secs:.1} s",
            rep.holdout_rmse,
            0.05 * rep.max_label
        ),
    )
}

fn potential_law() -> Outcome {
    let p = PotentialParams::default();
    let table = (p.r0, p.r_far, p.k_phi) == (0.4, 0.5, 1.0);
    let rs: Vec<f64> = (1..1000).map(|i| 0.4 + 0.1 * i as f64 / 1000.0).collect();
    let decreasing = rs.windows(2).all(|w| potential(w[1], &p) < potential(w[0], &p) && potential_force(w[1], &p) < potential_force(w[0], &p));
    let zero_far = [0.5, 0.5 + 1e-9, 0.7, 3.0, 50.0].iter().all(|&r| potential(r, &p) == 0.0 && potential_force(r, &p) == 0.0);
    let clamped = [0.0, 0.2, 0.4].iter().all(|&r| potential_force(r, &p) == p.f_max);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    let mut active = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(8..360);
        let scan = LidarScan {
            ranges: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
            angle_of_beam_0: rng.random_range(-PI..PI),
            angular_step: 2.0 * PI / n as f64,
            max_range: 8.0,
        };
        let cmd = BaseTwist { vx: rng.random_range(-0.3..0.3), vy: rng.random_range(-0.3..0.3), omega: rng.random_range(-0.5..0.5) };
        let cue = pedal_resistance(&scan, &cmd, &p).unwrap();
        active += usize::from(cue.active);
        if cue.force_xy.dot(&Vector2::new(cmd.vx, cmd.vy)) > 0.0 || cue.magnitude() > p.f_max * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    (
        table && decreasing && zero_far && clamped && violations == 0,
        format!(
            "r0 {} r_far {} k {}; decreasing {decreasing}, zero beyond r_far {zero_far}, clamped {clamped}; {violations} violations in 10^4 scans ({active} active)",
            p.r0, p.r_far, p.k_phi
        ),
    )
}

fn episodes(kind: ScenarioKind, flags: FeedbackFlags, seeds: std::ops::Range<u64>) -> Vec<EpisodeLog> {
    seeds.map(|s| run_scripted(&SessionConfig::new(kind, s, flags)).unwrap()).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn collision_ab() -> Outcome {
    let t = Instant::now();
    let pedal = FeedbackFlags { pedal_feedback: true, arm_reflection: false, guidance: false };
    let n_coll = |flags| -> Vec<f64> {
        episodes(ScenarioKind::WallApproach, flags, 0..50)
            .iter()
            .map(|l| compute_metrics(l, &l.meta.success_rule).unwrap().n_coll as f64)
            .collect()
    };
    let (with, without) = (n_coll(pedal), n_coll(FeedbackFlags::none()));
    let (lo, hi) = bootstrap_mean_diff_ci(&with, &without, 10_000, 0.95, 7).unwrap();
    let secs = t.elapsed().as_secs_f64();
    (
        hi < 0.0 && secs < 120.0,
        format!(
            "mean N_coll pedal {:.2} vs none {:.2}; 95% CI of difference [{lo:.2}, {hi:.2}]; {secs:.1} s",
            mean(&with),
            mean(&without)
        ),
    )
}

fn guidance_ab() -> Outcome {
    let guided = FeedbackFlags { pedal_feedback: false, arm_reflection: false, guidance: true };
    let stats = |flags| -> (f64, f64) {
        let m: Vec<_> = episodes(ScenarioKind::ReachLimited, flags, 0..50)
            .iter()
            .map(|l| compute_metrics(l, &l.meta.success_rule).unwrap())
            .collect();
        (mean(&m.iter().map(|m| m.t).collect::<Vec<_>>()), mean(&m.iter().map(|m| m.r_low).collect::<Vec<_>>()))
    };
    let ((tg, rg), (tn, rn)) = (stats(guided), stats(FeedbackFlags::none()));
    (
        tg < tn && rg < rn,
        format!("mean T {tg:.2} s vs {tn:.2} s; mean r_low {:.1}% vs {:.1}%", 100.0 * rg, 100.0 * rn),
    )
}

fn torque_augmentation() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut slowest: f64 = 0.0;
    for seed in 0..5u64 {
        let train_set = contact_gated_dataset(20, 40, 6, seed);
        let test_set = contact_gated_dataset(10, 40, 6, seed + 100);
        let mut acc = [0.0; 2];
        for (i, ablate) in [false, true].into_iter().enumerate() {
            let cfg = PolicyConfig { steps: 1000, seed, ablate_torque: ablate, ..Default::default() };
            let t = Instant::now();
            let (m, _) = chunkpolicy::train(&train_set, &cfg).unwrap();
            slowest = slowest.max(t.elapsed().as_secs_f64());
            acc[i] = mode_accuracy(&m, &test_set).unwrap();
        }
        ok &= acc[0] >= 0.9 && acc[1] <= 0.6;
        lines.push(format!("{:.2}/{:.2}", acc[0], acc[1]));
    }

    // central differences on the training loss at a fixed latent draw
    let recs = contact_gated_dataset(6, 16, 6, 9);
    let cfg = PolicyConfig { width: 32, latent_dim: 4, token_dim: 8, beta: 0.7, ..Default::default() };
    let mut m =
        PolicyModel::new(cfg, chunkpolicy::dims_of(&recs).unwrap(), chunkpolicy::Normalization::from_records(&recs)).unwrap();
    let batch: Vec<_> = m.samples(&recs).unwrap().into_iter().step_by(5).take(4).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let eps: Vec<Vec<f64>> =
        (0..batch.len()).map(|_| (0..m.config.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let (_, grad) = m.loss_and_grad(&batch, &eps);
    let n = m.param_count();
    let h = 1e-6;
    let mut worst_rel: f64 = 0.0;
    for i in (0..n).step_by(n / 20 + 1) {
        let w0 = m.weights[i];
        m.weights[i] = w0 + h;
        let up = m.loss_and_grad(&batch, &eps).0.total;
        m.weights[i] = w0 - h;
        let down = m.loss_and_grad(&batch, &eps).0.total;
        m.weights[i] = w0;
        let fd = (up - down) / (2.0 * h);
        worst_rel = worst_rel.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8));
    }
    ok &= worst_rel < 1e-3 && slowest < 300.0;
    (
        ok,
        format!(
            "mode accuracy torque/ablated per seed {}; gradient FD rel err {worst_rel:.1e}; slowest training {slowest:.1} s",
            lines.join(" ")
        ),
    )
}

fn jsonl(log: &EpisodeLog) -> Vec<u8> {
    let mut buf = Vec::new();
    log.write_jsonl(&mut buf).unwrap();
    buf
}

fn determinism() -> Outcome {
    let mut runs = 0;
    let mut mismatches = Vec::new();
    for kind in ScenarioKind::ALL {
        for (name, flags) in [("none", FeedbackFlags::none()), ("all", FeedbackFlags::all())] {
            for seed in [0, 17] {
                let cfg = SessionConfig::new(kind, seed, flags);
                let (a, b) = (run_scripted(&cfg).unwrap(), run_scripted(&cfg).unwrap());
                runs += 1;
                if jsonl(&a) != jsonl(&b) {
                    mismatches.push(format!("{}/{name}/{seed}", kind.as_str()));
                }
            }
        }
    }
    (mismatches.is_empty(), format!("{runs} scenario/flag/seed reruns, mismatches: {mismatches:?}"))
}

/// Times every call into the session-side channel end.
struct Timed {
    inner: ChannelOperator,
    worst: Duration,
}

impl Operator for Timed {
    fn command(&mut self, view: &OperatorView) -> OperatorInput {
        let t = Instant::now();
        let out = self.inner.command(view);
        self.worst = self.worst.max(t.elapsed());
        out
    }

    fn feedback(&mut self, record: &TickRecord) {
        let t = Instant::now();
        self.inner.feedback(record);
        self.worst = self.worst.max(t.elapsed());
    }
}

fn protocol() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut golden = 0;
    let mut inexact = Vec::new();
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let frame = text.trim_end_matches('\n');
        golden += 1;
        if decode(frame).and_then(|m| encode(&m)).ok().as_deref() != Some(frame) {
            inexact.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }

    let mut cfg = SessionConfig::new(ScenarioKind::WallApproach, 3, FeedbackFlags::all());
    cfg.max_duration = Some(6.0);
    let bridge = Bridge::new(8);
    let consumer = {
        let q = bridge.telemetry.clone();
        std::thread::spawn(move || {
            let mut n = 0;
            while q.pop_timeout(Duration::from_secs(2)).is_some() {
                n += 1;
                std::thread::sleep(Duration::from_millis(20));
            }
            n
        })
    };
    let mut op = Timed { inner: bridge.operator(), worst: Duration::ZERO };
    let log = run_episode(&cfg, &mut op).unwrap();
    bridge.close();
    let received = consumer.join().unwrap();
    // a stall is any channel call that waits for the consumer (one consumer pop is 20 ms)
    let stalls = usize::from(op.worst >= Duration::from_millis(10));
    let ok = golden >= 5 && inexact.is_empty() && stalls == 0 && log.ticks.len() == 300 && bridge.telemetry.dropped() > 0;
    (
        ok,
        format!(
            "{golden} golden frames, inexact {inexact:?}; slow consumer took {received} of 600 frames, {} dropped, worst channel call {:.2} ms, stalls {stalls}",
            bridge.telemetry.dropped(),
            op.worst.as_secs_f64() * 1e3
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("lie roundtrips", lie_roundtrips),
        ("calibration recovery", calibration_recovery),
        ("manipulability correctness", manipulability_correctness),
        ("field oracle and surrogate", field_and_surrogate),
        ("potential law", potential_law),
        ("collision A/B", collision_ab),
        ("guidance A/B", guidance_ab),
        ("torque augmentation", torque_augmentation),
        ("determinism", determinism),
        ("protocol", protocol),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let (ok, detail) = check();
        failed += usize::from(!ok);
        println!("{} {name}: {detail} [{:.1} s]", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
