//! Flat per-tick dataset export for policy learning.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EpisodeLog;
use crate::error::{Error, Result};

pub const LIDAR_SECTORS: usize = 8;
pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    /// Left then right joint positions.
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub tau: Vec<f64>,
    /// `[x, y, theta]`
    pub base_pose: [f64; 3],
    pub lidar_sectors: Vec<f64>,
}

impl ObservationRecord {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.q.len() * 3 + 3 + self.lidar_sectors.len());
        v.extend(&self.q);
        v.extend(&self.qdot);
        v.extend(&self.tau);
        v.extend(self.base_pose);
        v.extend(&self.lidar_sectors);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub episode: usize,
    pub tick: u64,
    pub observation: ObservationRecord,
    /// Base velocities then stacked joint targets, length `2n + 3`.
    pub action: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub episodes: usize,
    pub records: usize,
    pub dof: usize,
    pub observation_dim: usize,
    pub action_dim: usize,
    pub lidar_sectors: usize,
    pub observation_mean: Vec<f64>,
    pub observation_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

fn mean_std(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Writes `records.jsonl` and `manifest.json` under `dir`.
pub fn export_dataset(logs: &[EpisodeLog], dir: &Path) -> Result<DatasetManifest> {
    let first = logs.first().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    let dof = first.meta.dof[0];
    for log in logs {
        if log.meta.dof != [dof, dof] {
            return Err(Error::DimensionMismatch { expected: dof, got: log.meta.dof[0].max(log.meta.dof[1]) });
        }
    }
    std::fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(std::fs::File::create(dir.join(RECORDS_FILE))?);
    let mut obs_rows = Vec::new();
    let mut act_rows = Vec::new();
    for (e, log) in logs.iter().enumerate() {
        for t in &log.ticks {
            let last = t.joint_states.last().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
            let cat = |f: &dyn Fn(usize) -> Vec<f64>| [f(0), f(1)].concat();
            let observation = ObservationRecord {
                q: cat(&|s| last[s].q.as_slice().to_vec()),
                qdot: cat(&|s| last[s].qdot.as_slice().to_vec()),
                tau: cat(&|s| last[s].tau.as_slice().to_vec()),
                base_pose: [t.base.x, t.base.y, t.base.theta],
                lidar_sectors: t.scan.sectors.clone(),
            };
            let rec = DatasetRecord {
                episode: e,
                tick: t.tick,
                action: t.command.to_vector().as_slice().to_vec(),
                observation,
            };
            serde_json::to_writer(&mut out, &rec)?;
            writeln!(out)?;
            obs_rows.push(rec.observation.flat());
            act_rows.push(rec.action);
        }
    }
    out.flush()?;
    let obs_dim = 3 * 2 * dof + 3 + LIDAR_SECTORS;
    let act_dim = 2 * dof + 3;
    let (observation_mean, observation_std) = mean_std(&obs_rows, obs_dim);
    let (action_mean, action_std) = mean_std(&act_rows, act_dim);
    let manifest = DatasetManifest {
        episodes: logs.len(),
        records: obs_rows.len(),
        dof,
        observation_dim: obs_dim,
        action_dim: act_dim,
        lidar_sectors: LIDAR_SECTORS,
        observation_mean,
        observation_std,
        action_mean,
        action_std,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<DatasetRecord>)> {
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut records = Vec::with_capacity(manifest.records);
    for line in BufReader::new(std::fs::File::open(dir.join(RECORDS_FILE))?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    if records.len() != manifest.records {
        return Err(Error::DimensionMismatch { expected: manifest.records, got: records.len() });
    }
    Ok((manifest, records))
}
