use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpisodeLog, EpisodeStatus, CONTACT_TORQUE_FLOOR};
use crate::error::{Error, Result};
use crate::simworld::coalesce_contacts;

/// Per-scenario success predicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SuccessRule {
    /// Episode ended without losing the operator.
    Completed,
    NoCollision,
    /// Operator reported success within a collision budget.
    TaskComplete { max_collisions: usize },
    /// Final base position inside a disc, within a collision budget.
    ReachRegion { center: Vector2<f64>, radius: f64, max_collisions: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    pub n_coll: usize,
    /// s
    pub t: f64,
    pub r_low: f64,
    /// N·m
    pub sigma_tor: f64,
    /// J
    pub p: f64,
}

pub fn compute_metrics(log: &EpisodeLog, rule: &SuccessRule) -> Result<EpisodeMetrics> {
    let last = log.ticks.last().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    let n_coll = coalesce_contacts(log.ticks.iter().filter(|t| t.contact).map(|t| t.time));
    let arm = log.meta.primary_arm;
    let low = log.ticks.iter().filter(|t| t.w[arm] < log.meta.w_median).count();
    let r_low = low as f64 / log.ticks.len() as f64;

    let in_contact = |t: &super::TickRecord| {
        t.interaction_torque.iter().flat_map(|v| v.iter()).any(|x| x.abs() > CONTACT_TORQUE_FLOOR)
    };
    let mags: Vec<f64> = log
        .ticks
        .iter()
        .filter(|t| in_contact(t))
        .map(|t| t.torque.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt())
        .collect();
    let sigma_tor = if mags.len() < 2 {
        0.0
    } else {
        let mean = mags.iter().sum::<f64>() / mags.len() as f64;
        (mags.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / mags.len() as f64).sqrt()
    };

    let sub_dt = log.meta.dt / log.meta.substeps.max(1) as f64;
    let p = log
        .ticks
        .iter()
        .flat_map(|t| t.joint_states.iter())
        .flat_map(|pair| pair.iter())
        .map(|js| js.tau.dot(&js.qdot).abs() * sub_dt)
        .sum();

    let success = match rule {
        SuccessRule::Completed => log.status != EpisodeStatus::Timeout,
        SuccessRule::NoCollision => n_coll == 0 && log.status != EpisodeStatus::Timeout,
        SuccessRule::TaskComplete { max_collisions } => {
            log.status == EpisodeStatus::Finished { success: true } && n_coll <= *max_collisions
        }
        SuccessRule::ReachRegion { center, radius, max_collisions } => {
            (last.base.position() - center).norm() <= *radius && n_coll <= *max_collisions
        }
    };
    Ok(EpisodeMetrics { success, n_coll, t: last.time, r_low, sigma_tor, p })
}

/// Percentile bootstrap interval for `mean(a) - mean(b)`.
pub fn bootstrap_mean_diff_ci(a: &[f64], b: &[f64], n_boot: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() || n_boot == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean_of = |xs: &[f64], rng: &mut ChaCha8Rng| {
        (0..xs.len()).map(|_| xs[rng.random_range(0..xs.len())]).sum::<f64>() / xs.len() as f64
    };
    let mut diffs: Vec<f64> = (0..n_boot).map(|_| mean_of(a, &mut rng) - mean_of(b, &mut rng)).collect();
    diffs.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let idx = |q: f64| ((q * (n_boot - 1) as f64).round() as usize).min(n_boot - 1);
    Ok((diffs[idx(tail)], diffs[idx(1.0 - tail)]))
}
