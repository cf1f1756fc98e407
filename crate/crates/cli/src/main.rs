use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde_json::json;

use teleop_core::chunkpolicy::{self, mode_accuracy, PolicyConfig, PolicyModel, PolicyOperator};
use teleop_core::extcalib::{self, generate_synthetic_session, solve_extrinsics, CalibSample, SolverOptions, TagNoise};
use teleop_core::manipfield::{
    eval_surrogate, oracle_field, overlay_mask, train_surrogate, Aabb, FieldGrid, Surrogate, TrainConfig,
};
use teleop_core::session::{
    compute_metrics, export_dataset, load_dataset, run_episode, run_scripted, DatasetRecord, EpisodeLog,
    FeedbackFlags, ScenarioKind, SessionConfig,
};
use teleop_core::{KinematicChain, Pose};

#[derive(Parser)]
#[command(name = "teleop", version, about = "Simulated whole-body teleoperation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extrinsic calibration.
    #[command(subcommand)]
    Calib(CalibCmd),
    /// Manipulability fields and surrogates.
    #[command(subcommand)]
    Field(FieldCmd),
    /// Simulated teleoperation episodes.
    #[command(subcommand)]
    Session(SessionCmd),
    /// Chunked imitation policies.
    #[command(subcommand)]
    Policy(PolicyCmd),
    /// WebSocket endpoint for an operator console.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum CalibCmd {
    /// Refine gripper→wrist-camera and base→head-camera from samples.
    Solve {
        #[arg(long)]
        input: PathBuf,
        /// JSON with `gripper_to_wristcam` and `base_to_headcam` poses.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        max_iterations: usize,
    },
    /// Writes a synthetic sample file plus its ground truth.
    Synth {
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Tag noise (rad and m).
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Ground truth, also usable as `--init` after perturbation.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum FieldCmd {
    /// Oracle field by joint-space sampling.
    Sample {
        #[arg(long)]
        chain: Option<PathBuf>,
        #[arg(long, default_value_t = 3_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0.05)]
        resolution: f64,
        /// Half side of the cube around the mount (m).
        #[arg(long, default_value_t = 0.8)]
        half_extent: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits a surrogate to a sampled grid.
    Train {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 150)]
        epochs: usize,
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluates a surrogate at points or over a grid.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// `x,y,z` in the mount frame; repeatable.
        #[arg(long, value_parser = parse_point)]
        point: Vec<[f64; 3]>,
        /// Writes an overlay grid over the surrogate domain instead.
        #[arg(long)]
        overlay: Option<PathBuf>,
        #[arg(long, default_value_t = 0.025)]
        threshold: f64,
        #[arg(long, default_value_t = 0.05)]
        resolution: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "idle")]
    scenario: ScenarioKind,
    /// `all`, `none`, or a comma list of pedal, reflection, guidance.
    #[arg(long, default_value = "all")]
    flags: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Session config JSON; command-line values override its scenario, seed and flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Episode length override (s).
    #[arg(long)]
    duration: Option<f64>,
}

impl RunArgs {
    fn session_config(&self) -> Result<SessionConfig> {
        let mut cfg = match &self.config {
            Some(p) => SessionConfig::from_json(&read(p)?)?,
            None => SessionConfig::default(),
        };
        cfg.scenario = self.scenario;
        cfg.seed = self.seed;
        cfg.flags = FeedbackFlags::parse(&self.flags)?;
        if self.duration.is_some() {
            cfg.max_duration = self.duration;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum SessionCmd {
    /// Runs one episode with the scenario's scripted operator.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints per-episode metrics for one or more logs.
    Metrics {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
    /// Flattens logs into a policy dataset directory.
    Export {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PolicyCmd {
    /// Trains a chunked policy on recorded demonstrations.
    Train {
        /// `records.jsonl` or an exported dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ablate_torque: bool,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "policy.json")]
        out: PathBuf,
        /// Training curve as JSONL.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Rolls the policy out in a scenario, or scores it on held-out records.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "idle")]
        scenario: ScenarioKind,
        #[arg(long, default_value_t = 25)]
        rollouts: usize,
        #[arg(long, default_value = "all")]
        flags: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        duration: Option<f64>,
        /// Mode accuracy on these records instead of rollouts.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Writes the contact-gated synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 40)]
        ticks: usize,
        #[arg(long, default_value_t = 6)]
        dof: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = teleop_core::bridge::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    #[arg(long, default_value = "idle")]
    scenario: ScenarioKind,
    #[arg(long, default_value = "all")]
    flags: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for finished episode logs.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    /// Run episodes as fast as possible instead of at 50 Hz.
    #[arg(long)]
    fast: bool,
}

fn parse_point(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| "expected x,y,z".to_string())
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn write(p: &Path, text: &str) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn calib(cmd: CalibCmd) -> Result<()> {
    match cmd {
        CalibCmd::Solve { input, init, out, max_iterations } => {
            let samples: Vec<CalibSample> = serde_json::from_str(&read(&input)?)?;
            let init: serde_json::Value = serde_json::from_str(&read(&init)?)?;
            let pose = |k: &str| -> Result<Pose> {
                Ok(serde_json::from_value(init.get(k).cloned().with_context(|| format!("init lacks {k}"))?)?)
            };
            let opts = SolverOptions { max_iterations, ..Default::default() };
            let est = solve_extrinsics(&samples, &pose("gripper_to_wristcam")?, &pose("base_to_headcam")?, &opts)?;
            write(&out, &serde_json::to_string_pretty(&est)?)?;
            println!(
                "cost {:.3e} after {} iterations (converged: {}), {} samples discarded",
                est.final_cost, est.iterations, est.converged, est.discarded
            );
            if est.rotation_unobservable {
                eprintln!("warning: samples carry no rotational diversity");
            }
        }
        CalibCmd::Synth { n, sigma, seed, out, truth } => {
            let (w, h) = extcalib::reference_extrinsics();
            let samples =
                generate_synthetic_session(&w, &h, n, TagNoise { sigma_rot: sigma, sigma_trans: sigma }, seed)?;
            write(&out, &serde_json::to_string_pretty(&samples)?)?;
            if let Some(t) = truth {
                write(&t, &serde_json::to_string_pretty(&json!({"gripper_to_wristcam": w, "base_to_headcam": h}))?)?;
            }
        }
    }
    Ok(())
}

fn field(cmd: FieldCmd) -> Result<()> {
    match cmd {
        FieldCmd::Sample { chain, samples, resolution, half_extent, seed, out } => {
            let chain = match chain {
                Some(p) => KinematicChain::from_json(&read(&p)?)?,
                None => KinematicChain::reference_arm(),
            };
            let grid = oracle_field(&chain, Aabb::cube(half_extent), resolution, samples, seed)?;
            write(&out, &serde_json::to_string(&grid)?)?;
            let max = grid.values.iter().flatten().copied().fold(0.0, f64::max);
            println!("{} of {} cells known, max {max:.4}", grid.known_cells(), grid.values.len());
        }
        FieldCmd::Train { grid, out, epochs, hidden, seed } => {
            let grid: FieldGrid = serde_json::from_str(&read(&grid)?)?;
            let cfg = TrainConfig { epochs, hidden, seed, ..Default::default() };
            let (s, report) = train_surrogate(&grid.labeled_points(), &cfg)?;
            write(&out, &serde_json::to_string(&s)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        FieldCmd::Eval { model, point, overlay, threshold, resolution } => {
            let s = Surrogate::from_json(&read(&model)?)?;
            for p in &point {
                let (m, g) = eval_surrogate(&s, &Vector3::new(p[0], p[1], p[2]));
                println!("{}", json!({"x": p, "m_hat": m, "grad": [g.x, g.y, g.z]}));
            }
            if let Some(path) = overlay {
                let domain = s.domain.context("surrogate has no recorded domain")?;
                let mut grid = FieldGrid::empty(domain, resolution)?;
                let centers: Vec<_> = (0..grid.values.len()).map(|c| grid.cell_center(c)).collect();
                let mask = overlay_mask(&centers, &s, threshold);
                for (c, v) in centers.iter().zip(&mask.values) {
                    grid.record(c, *v);
                }
                write(
                    &path,
                    &serde_json::to_string(&json!({"threshold": threshold, "grid": grid, "flags": mask.flags}))?,
                )?;
                println!("{} of {} cells above {threshold}", mask.flags.iter().filter(|f| **f).count(), centers.len());
            }
        }
    }
    Ok(())
}

fn metrics_line(log: &EpisodeLog) -> Result<serde_json::Value> {
    let m = compute_metrics(log, &log.meta.success_rule)?;
    Ok(json!({
        "scenario": log.meta.scenario,
        "seed": log.meta.seed,
        "flags": log.meta.flags,
        "status": log.status,
        "metrics": m,
    }))
}

fn session(cmd: SessionCmd) -> Result<()> {
    match cmd {
        SessionCmd::Run { run, out } => {
            let log = run_scripted(&run.session_config()?)?;
            log.save(&out)?;
            println!("{}", metrics_line(&log)?);
        }
        SessionCmd::Metrics { logs } => {
            for p in logs {
                println!("{}", metrics_line(&EpisodeLog::load(&p)?)?);
            }
        }
        SessionCmd::Export { logs, out } => {
            let logs = logs.iter().map(|p| EpisodeLog::load(p)).collect::<teleop_core::Result<Vec<_>>>()?;
            let m = export_dataset(&logs, &out)?;
            println!("{} records from {} episodes in {}", m.records, m.episodes, out.display());
        }
    }
    Ok(())
}

fn load_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    if path.is_dir() {
        return Ok(load_dataset(path)?.1);
    }
    read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

fn policy(cmd: PolicyCmd) -> Result<()> {
    match cmd {
        PolicyCmd::Train { data, ablate_torque, steps, horizon, seed, out, curve } => {
            let records = load_records(&data)?;
            let cfg = PolicyConfig { ablate_torque, steps, horizon, seed, ..Default::default() };
            let (model, points) = chunkpolicy::train(&records, &cfg)?;
            write(&out, &serde_json::to_string(&model)?)?;
            if let Some(c) = curve {
                let lines: Vec<String> = points.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
                write(&c, &(lines.join("\n") + "\n"))?;
            }
            let last = points.last().context("no training steps")?;
            println!("step {} loss {:.4e} (l1 {:.4e}, kl {:.4e}), {} parameters", last.step, last.loss, last.l1, last.kl, model.param_count());
        }
        PolicyCmd::Eval { model, scenario, rollouts, flags, seed, duration, data } => {
            let model = Arc::new(PolicyModel::from_json(&read(&model)?)?);
            if let Some(d) = data {
                let acc = mode_accuracy(&model, &load_records(&d)?)?;
                println!("{}", json!({"mode_accuracy": acc}));
                return Ok(());
            }
            let flags = FeedbackFlags::parse(&flags)?;
            let mut successes = 0;
            for i in 0..rollouts {
                let mut cfg = SessionConfig::new(scenario, seed + i as u64, flags);
                cfg.max_duration = duration;
                let mut op = PolicyOperator::new(model.clone());
                let log = run_episode(&cfg, &mut op)?;
                let line = metrics_line(&log)?;
                successes += usize::from(line["metrics"]["success"].as_bool() == Some(true));
                println!("{line}");
            }
            println!("{}", json!({"rollouts": rollouts, "success_rate": successes as f64 / rollouts.max(1) as f64}));
        }
        PolicyCmd::Synth { episodes, ticks, dof, seed, out } => {
            let recs = chunkpolicy::contact_gated_dataset(episodes, ticks, dof, seed);
            let lines: Vec<String> = recs.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
            write(&out, &(lines.join("\n") + "\n"))?;
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = teleop_server::ServerConfig {
        port: a.port,
        bind: a.bind,
        realtime: !a.fast,
        scenario: a.scenario,
        seed: a.seed,
        flags: FeedbackFlags::parse(&a.flags)?,
        log_dir: a.log_dir,
        ..Default::default()
    };
    let handle = teleop_server::serve(cfg)?;
    println!("listening on {}", handle.url());
    loop {
        std::thread::park();
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Calib(c) => calib(c),
        Command::Field(c) => field(c),
        Command::Session(c) => session(c),
        Command::Policy(c) => policy(c),
        Command::Serve(a) => serve(a),
    }
}
