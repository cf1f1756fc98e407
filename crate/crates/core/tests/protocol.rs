use std::path::PathBuf;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use teleop_core::bridge::*;
use teleop_core::session::{run_episode, FeedbackFlags, ScenarioKind, SessionConfig};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn golden_messages() -> Vec<(&'static str, WireMessage)> {
    let joint = |s: f64| WireJoint { q: vec![0.1 * s, -0.45, 1.43], qdot: vec![0.0, 0.02, -0.01], tau: vec![0.0, 1.25, 0.3] };
    let cue = |fx: f64, active: bool, source: &str| WireCue {
        force: [fx, 0.0],
        yaw_torque: 0.0,
        active,
        source: source.into(),
    };
    vec![
        (
            "state",
            WireMessage::new(
                42,
                Payload::State(StatePayload {
                    time: 0.84,
                    base: WirePose { x: 1.2, y: -0.05, theta: 0.1 },
                    joints: vec![
                        WireSubstep { left: joint(1.0), right: joint(-1.0) },
                        WireSubstep { left: joint(1.5), right: joint(-1.5) },
                    ],
                    twist: WireTwist { vx: 0.25, vy: 0.0, omega: 0.0 },
                    scan: WireScan {
                        min_range: 0.41,
                        sectors: vec![0.41, 2.0, 8.0, 8.0, 8.0, 8.0, 8.0, 2.0],
                        ranges: None,
                        angle0: None,
                    },
                    m_hat: [Some(0.0301), None],
                    w: [0.030, 0.0066],
                    contact: false,
                    collisions_total: 3,
                    map: None,
                }),
            ),
        ),
        (
            "state_with_map",
            WireMessage::new(
                1,
                Payload::State(StatePayload {
                    time: 0.02,
                    base: WirePose { x: 0.0, y: 0.0, theta: 0.0 },
                    joints: vec![],
                    twist: WireTwist { vx: 0.0, vy: 0.0, omega: 0.0 },
                    scan: WireScan {
                        min_range: 1.0,
                        sectors: vec![1.0, 8.0, 8.0, 8.0, 8.0, 8.0, 8.0, 8.0],
                        ranges: Some(vec![1.0, 1.0154266119857351, 8.0, 8.0]),
                        angle0: Some(0.0),
                    },
                    m_hat: [None, None],
                    w: [0.03, 0.03],
                    contact: false,
                    collisions_total: 0,
                    map: Some(WireMap {
                        obstacles: vec![vec![[1.35, -3.0], [1.55, -3.0], [1.55, 3.0], [1.35, 3.0]]],
                        base_radius: 0.35,
                    }),
                }),
            ),
        ),
        (
            "cue",
            WireMessage::new(
                42,
                Payload::Cue(CuePayload {
                    cue: cue(-1.7976931348623157, true, "collision"),
                    pedal: cue(-1.7976931348623157, true, "collision"),
                    guidance: [Some(cue(0.0, false, "guidance")), None],
                }),
            ),
        ),
        ("command", WireMessage::new(41, Payload::Command(CommandPayload::twist_only(0.3, 0.0, -0.1)))),
        (
            "command_full",
            WireMessage::new(
                41,
                Payload::Command(CommandPayload {
                    twist: WireTwist { vx: 0.1, vy: 0.05, omega: 0.0 },
                    q_left: Some(vec![0.0, -0.45, 1.43, 0.0, 1.44, 0.0]),
                    q_right: Some(vec![0.0, -0.45, 1.43, 0.0, 1.44, 0.0]),
                    grippers: Some([1.0, 0.0]),
                }),
            ),
        ),
        (
            "control",
            WireMessage::new(
                0,
                Payload::Control(ControlPayload {
                    action: ControlAction::Start,
                    scenario: Some(ScenarioKind::WallApproach),
                    seed: Some(7),
                    flags: Some(FeedbackFlags { pedal_feedback: true, arm_reflection: true, guidance: false }),
                }),
            ),
        ),
        (
            "ack",
            WireMessage::new(
                42,
                Payload::Ack(AckPayload {
                    status: AckStatus::Ok,
                    of_tick: Some(41),
                    applied_tick: Some(42),
                    message: None,
                }),
            ),
        ),
        ("ack_error", WireMessage::new(0, Payload::Ack(AckPayload::error("protocol error: missing twist")))),
        (
            "ack_busy",
            WireMessage::new(
                0,
                Payload::Ack(AckPayload {
                    status: AckStatus::Busy,
                    of_tick: None,
                    applied_tick: None,
                    message: Some("another operator is connected".into()),
                }),
            ),
        ),
    ]
}

#[test]
fn golden_frames_reencode_byte_exact() {
    let bless = std::env::var_os("TELEOP_BLESS").is_some();
    for (name, msg) in golden_messages() {
        let path = golden_dir().join(format!("{name}.json"));
        if bless {
            std::fs::create_dir_all(golden_dir()).unwrap();
            std::fs::write(&path, encode(&msg).unwrap() + "\n").unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let frame = text.trim_end_matches('\n');
        let decoded = decode(frame).unwrap();
        assert_eq!(decoded, msg, "{name}");
        assert_eq!(encode(&decoded).unwrap(), frame, "{name}");
    }
}

#[test]
fn golden_set_covers_every_kind() {
    let kinds: std::collections::BTreeSet<_> = golden_messages().iter().map(|(_, m)| m.kind()).collect();
    assert_eq!(kinds.into_iter().collect::<Vec<_>>(), ["ack", "command", "control", "cue", "state"]);
}

#[test]
fn live_frames_roundtrip() {
    let mut cfg = SessionConfig::new(ScenarioKind::WallApproach, 1, FeedbackFlags::all());
    cfg.max_duration = Some(0.5);
    let bridge = Bridge::new(1024);
    run_episode(&cfg, &mut bridge.operator()).unwrap();
    let mut n = 0;
    let mut saw_map = 0;
    while let Some(m) = bridge.telemetry.try_pop() {
        let text = encode(&m).unwrap();
        assert_eq!(decode(&text).unwrap(), m);
        if let Payload::State(s) = &m.payload {
            saw_map += usize::from(s.map.is_some());
            assert_eq!(s.joints.len(), 2);
            assert_eq!(s.scan.ranges.as_ref().map(Vec::len), Some(LIDAR_WIRE_BEAMS));
        }
        n += 1;
    }
    assert_eq!(n, 50);
    assert_eq!(saw_map, 1);
}

/// A consumer far slower than the loop must not slow the loop down.
#[test]
fn slow_consumer_never_stalls_the_loop() {
    let mut cfg = SessionConfig::new(ScenarioKind::WallApproach, 3, FeedbackFlags::none());
    cfg.max_duration = Some(6.0);
    // baseline without any consumer
    let baseline = {
        let bridge = Bridge::new(8);
        let t = Instant::now();
        run_episode(&cfg, &mut bridge.operator()).unwrap();
        t.elapsed()
    };

    let bridge = Bridge::new(8);
    let consumer = {
        let q = bridge.telemetry.clone();
        std::thread::spawn(move || {
            let mut ticks = Vec::new();
            while let Some(m) = q.pop_timeout(Duration::from_secs(2)) {
                ticks.push(m.tick);
                std::thread::sleep(Duration::from_millis(20));
            }
            ticks
        })
    };
    let t = Instant::now();
    let log = run_episode(&cfg, &mut bridge.operator()).unwrap();
    let elapsed = t.elapsed();
    bridge.close();
    let received = consumer.join().unwrap();

    assert_eq!(log.ticks.len(), 300);
    // 600 frames at 20 ms each would take 12 s if the producer waited
    assert!(elapsed < baseline * 3 + Duration::from_millis(500), "{elapsed:?} vs {baseline:?}");
    assert!(bridge.telemetry.dropped() > 0);
    assert!(received.windows(2).all(|w| w[0] <= w[1]), "reordered");
    assert!(received.len() < 600);
}

#[test]
fn commands_never_reorder() {
    let mut cfg = SessionConfig::new(ScenarioKind::Idle, 0, FeedbackFlags::none());
    cfg.max_duration = Some(2.0);
    let bridge = Bridge::new(16);
    let producer = {
        let b = bridge.clone();
        std::thread::spawn(move || {
            for i in 0..400u64 {
                b.submit(b.last_tick(), CommandPayload::twist_only(0.001 * i as f64, 0.0, 0.0));
                std::thread::sleep(Duration::from_micros(50));
            }
        })
    };
    let log = run_episode(&cfg, &mut bridge.operator()).unwrap();
    producer.join().unwrap();
    let vx: Vec<f64> = log.ticks.iter().map(|t| t.command.base_twist.vx).collect();
    assert!(vx.windows(2).all(|w| w[0] <= w[1]));
    let mut applied = Vec::new();
    while let Some(m) = bridge.acks.try_pop() {
        if let Payload::Ack(a) = m.payload {
            if let (AckStatus::Ok, Some(t), Some(of)) = (a.status, a.applied_tick, a.of_tick) {
                assert!(t >= of);
                applied.push(t);
            }
        }
    }
    // at most one command per tick
    assert!(applied.windows(2).all(|w| w[0] < w[1]));
}

proptest! {
    #[test]
    fn command_codec_is_lossless(vx in -1e3f64..1e3, vy in proptest::num::f64::NORMAL, om in -1.0f64..1.0,
                                 q in proptest::collection::vec(-10.0f64..10.0, 0..8), tick in 0u64..u64::MAX) {
        let msg = WireMessage::new(tick, Payload::Command(CommandPayload {
            twist: WireTwist { vx, vy, omega: om },
            q_left: (!q.is_empty()).then(|| q.clone()),
            q_right: None,
            grippers: None,
        }));
        let text = encode(&msg).unwrap();
        prop_assert_eq!(decode(&text).unwrap(), msg);
    }
}
