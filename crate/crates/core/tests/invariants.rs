use nalgebra::{DVector, Vector2, Vector3};
use proptest::prelude::*;

use teleop_core::hapticlaw::{merge_cues, pedal_resistance, CueSource, PedalCue, PotentialParams};
use teleop_core::liegroup::{exp_map, log_map, Twist6};
use teleop_core::session::{
    compute_metrics, export_dataset, load_dataset, run_scripted, EpisodeLog, FeedbackFlags, ScenarioKind, SessionConfig,
};
use teleop_core::simworld::{BaseTwist, LidarScan};
use teleop_core::KinematicChain;

fn twist() -> impl Strategy<Value = Twist6> {
    (prop::array::uniform3(-1.7f64..1.7), prop::array::uniform3(-3.0f64..3.0))
        .prop_map(|(w, v)| Twist6::new(Vector3::from(w), Vector3::from(v)))
}

fn short(kind: ScenarioKind, seed: u64, flags: FeedbackFlags, secs: f64) -> SessionConfig {
    let mut cfg = SessionConfig::new(kind, seed, flags);
    cfg.max_duration = Some(secs);
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pose_inverse_composes_to_identity(a in twist(), b in twist()) {
        let (pa, pb) = (exp_map(&a).unwrap(), exp_map(&b).unwrap());
        let ab = pa.compose(&pb);
        prop_assert!(ab.compose(&ab.inverse()).max_abs_diff(&teleop_core::Pose::identity()) < 1e-12);
        prop_assert!(ab.orthonormality_error() < 1e-12);
        let back = log_map(&pa).unwrap();
        prop_assert!((back.to_vector() - a.to_vector()).amax() < 1e-9);
    }

    #[test]
    fn pedal_never_pushes_along_the_command(
        ranges in prop::collection::vec(0.0f64..2.0, 4..120),
        angle0 in -3.2f64..3.2,
        vx in -0.3f64..0.3,
        vy in -0.3f64..0.3,
    ) {
        let n = ranges.len();
        let scan = LidarScan { ranges, angle_of_beam_0: angle0, angular_step: std::f64::consts::TAU / n as f64, max_range: 8.0 };
        let p = PotentialParams::default();
        let cue = pedal_resistance(&scan, &BaseTwist { vx, vy, omega: 0.0 }, &p).unwrap();
        prop_assert!(cue.force_xy.dot(&Vector2::new(vx, vy)) <= 0.0);
        prop_assert!(cue.magnitude() <= p.f_max * (1.0 + 1e-12));
        if vx == 0.0 && vy == 0.0 {
            prop_assert!(!cue.active);
        }
    }

    #[test]
    fn merged_cue_is_clamped(fs in prop::collection::vec((-30.0f64..30.0, -30.0f64..30.0), 1..5)) {
        let cues: Vec<_> = fs.iter().map(|&(x, y)| PedalCue::active(Vector2::new(x, y), CueSource::Guidance)).collect();
        let m = merge_cues(&cues, 20.0);
        prop_assert!(m.magnitude() <= 20.0 * (1.0 + 1e-12));
        prop_assert_eq!(m.source, CueSource::Guidance);
    }

    #[test]
    fn manipulability_is_nonnegative_and_bounded(q in prop::collection::vec(-3.0f64..3.0, 2)) {
        let w = KinematicChain::planar(&[1.0, 1.0]).unwrap().manipulability(&DVector::from_vec(q)).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&w));
    }
}

#[test]
fn config_json_roundtrip_reproduces_the_episode() {
    let cfg = short(ScenarioKind::WallApproach, 5, FeedbackFlags { pedal_feedback: true, arm_reflection: true, guidance: false }, 3.0);
    let again = SessionConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
    let (a, b) = (run_scripted(&cfg).unwrap(), run_scripted(&again).unwrap());
    let text = |l: &EpisodeLog| {
        let mut buf = Vec::new();
        l.write_jsonl(&mut buf).unwrap();
        buf
    };
    assert_eq!(text(&a), text(&b));
    assert_ne!(text(&a), text(&run_scripted(&short(ScenarioKind::WallApproach, 6, cfg.flags, 3.0)).unwrap()));
}

#[test]
fn saved_logs_keep_their_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let log = run_scripted(&short(ScenarioKind::NarrowTransport, 2, FeedbackFlags::none(), 4.0)).unwrap();
    let path = dir.path().join("ep.jsonl");
    log.save(&path).unwrap();
    let back = EpisodeLog::load(&path).unwrap();
    assert_eq!(
        compute_metrics(&log, &log.meta.success_rule).unwrap(),
        compute_metrics(&back, &back.meta.success_rule).unwrap()
    );
}

#[test]
fn exported_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let logs: Vec<_> = (0..2)
        .map(|s| run_scripted(&short(ScenarioKind::WallApproach, s, FeedbackFlags::none(), 1.0)).unwrap())
        .collect();
    let manifest = export_dataset(&logs, dir.path()).unwrap();
    let (loaded, records) = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, manifest);
    assert_eq!(records.len(), logs.iter().map(|l| l.ticks.len()).sum::<usize>());
    assert!(records.iter().all(|r| r.observation.flat().iter().all(|v| v.is_finite())));
}
