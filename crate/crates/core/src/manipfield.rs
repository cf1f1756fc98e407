//! Cartesian manipulability field: a sampling oracle, a smooth learned
//! surrogate with analytic input gradients, guidance cues and overlay masks.

use nalgebra::{DVector, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hapticlaw::{CueSource, PedalCue};
use crate::kinechain::KinematicChain;
use crate::nn::{sigmoid, softplus, Adam, Mlp, ParamLayout};

/// Axis-aligned box in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        if !(min.iter().chain(max.iter()).all(|v| v.is_finite())) {
            return Err(Error::NonFinite("bounds"));
        }
        if (0..3).any(|i| max[i] <= min[i]) {
            return Err(Error::InvalidParameter("bounds must have positive extent".into()));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self { min: Vector3::repeat(-half), max: Vector3::repeat(half) }
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        (0..3).all(|i| x[i] >= self.min[i] && x[i] <= self.max[i])
    }
}

/// Per-cell best manipulability. `None` marks a cell no sample landed in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    pub bounds: Aabb,
    pub resolution: f64,
    pub dims: [usize; 3],
    pub values: Vec<Option<f64>>,
    pub counts: Vec<u32>,
    /// Set when no sample fell inside the bounds.
    pub all_unknown: bool,
}

impl FieldGrid {
    pub fn empty(bounds: Aabb, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::InvalidParameter("resolution must be positive".into()));
        }
        let ext = bounds.max - bounds.min;
        let dims = [0, 1, 2].map(|i| ((ext[i] / resolution).ceil() as usize).max(1));
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            bounds,
            resolution,
            dims,
            values: vec![None; n],
            counts: vec![0; n],
            all_unknown: true,
        })
    }

    pub fn cell_of(&self, x: &Vector3<f64>) -> Option<usize> {
        if !self.bounds.contains(x) {
            return None;
        }
        let mut idx = [0usize; 3];
        for i in 0..3 {
            let k = ((x[i] - self.bounds.min[i]) / self.resolution).floor() as usize;
            idx[i] = k.min(self.dims[i] - 1);
        }
        Some(idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2]))
    }

    pub fn cell_center(&self, cell: usize) -> Vector3<f64> {
        let ix = cell % self.dims[0];
        let iy = (cell / self.dims[0]) % self.dims[1];
        let iz = cell / (self.dims[0] * self.dims[1]);
        let top = self.bounds.min + Vector3::repeat(self.resolution).component_mul(&Vector3::new(
            ix as f64 + 0.5,
            iy as f64 + 0.5,
            iz as f64 + 0.5,
        ));
        top.zip_map(&self.bounds.max, f64::min)
    }

    pub fn value_at(&self, x: &Vector3<f64>) -> Option<f64> {
        self.cell_of(x).and_then(|c| self.values[c])
    }

    pub fn known_cells(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn record(&mut self, x: &Vector3<f64>, w: f64) {
        if let Some(c) = self.cell_of(x) {
            self.counts[c] += 1;
            self.values[c] = Some(self.values[c].map_or(w, |v| v.max(w)));
            self.all_unknown = false;
        }
    }

    /// Cell centers paired with their known values.
    pub fn labeled_points(&self) -> Vec<LabeledPoint> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(c, v)| v.map(|m| LabeledPoint { x: self.cell_center(c), m }))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub x: Vector3<f64>,
    pub m: f64,
}

/// Uniform joint-space sampling, keeping the per-cell maximum manipulability.
pub fn oracle_field(
    chain: &KinematicChain,
    bounds: Aabb,
    resolution: f64,
    n_samples: usize,
    seed: u64,
) -> Result<FieldGrid> {
    if n_samples == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut grid = FieldGrid::empty(bounds, resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limits = chain.joint_limits().to_vec();
    for _ in 0..n_samples {
        let q = DVector::from_iterator(limits.len(), limits.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)));
        let x = *chain.forward_kinematics(&q)?.translation();
        grid.record(&x, chain.manipulability(&q)?);
    }
    Ok(grid)
}

/// Anything that yields `(m̂(x), ∇ₓm̂(x))`.
pub trait ManipulabilityModel {
    fn eval(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>);
}

/// Wraps a closure as a model.
pub struct FnModel<F>(pub F);

impl<F: Fn(&Vector3<f64>) -> (f64, Vector3<f64>)> ManipulabilityModel for FnModel<F> {
    fn eval(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        (self.0)(x)
    }
}

/// `m̂(x) = output_scale · softplus(N((x - mean) / scale))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub layer_sizes: Vec<usize>,
    pub activation: String,
    pub input_mean: [f64; 3],
    pub input_scale: [f64; 3],
    pub output_scale: f64,
    /// Region covered by the training data.
    #[serde(default)]
    pub domain: Option<Aabb>,
    pub weights: Vec<f64>,
}

impl Surrogate {
    fn mlp(&self) -> (Mlp, usize) {
        let mut layout = ParamLayout::default();
        let mlp = Mlp::new(&mut layout, &self.layer_sizes);
        (mlp, layout.total())
    }

    pub fn validate(&self) -> Result<()> {
        if self.activation != "tanh" {
            return Err(Error::InvalidParameter(format!("unsupported activation {}", self.activation)));
        }
        if self.layer_sizes.len() < 2 || self.layer_sizes[0] != 3 || *self.layer_sizes.last().unwrap() != 1 {
            return Err(Error::InvalidParameter("surrogate must map 3 inputs to 1 output".into()));
        }
        let (_, total) = self.mlp();
        if self.weights.len() != total {
            return Err(Error::DimensionMismatch { expected: total, got: self.weights.len() });
        }
        if !self.weights.iter().all(|w| w.is_finite()) {
            return Err(Error::NonFinite("surrogate weights"));
        }
        if !(self.output_scale > 0.0) || self.input_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParameter("scales must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Surrogate = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    fn normalize(&self, x: &Vector3<f64>) -> [f64; 3] {
        [0, 1, 2].map(|i| (x[i] - self.input_mean[i]) / self.input_scale[i])
    }

    pub fn value(&self, x: &Vector3<f64>) -> f64 {
        let (mlp, _) = self.mlp();
        let t = mlp.forward(&self.weights, &self.normalize(x));
        self.output_scale * softplus(t.output()[0])
    }
}

impl ManipulabilityModel for Surrogate {
    fn eval(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        eval_surrogate(self, x)
    }
}

pub fn eval_surrogate(s: &Surrogate, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let (mlp, _) = s.mlp();
    let t = mlp.forward(&s.weights, &s.normalize(x));
    let z = t.output()[0];
    let dz = mlp.input_gradient(&s.weights, &t, &[1.0]);
    let k = s.output_scale * sigmoid(z);
    let grad = Vector3::new(
        k * dz[0] / s.input_scale[0],
        k * dz[1] / s.input_scale[1],
        k * dz[2] / s.input_scale[2],
    );
    (s.output_scale * softplus(z), grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine schedule).
    pub lr_final_frac: f64,
    pub holdout_frac: f64,
    /// Linear learning-rate ramp at the start of training.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 100,
            batch: 32,
            lr: 5e-3,
            lr_final_frac: 0.02,
            holdout_frac: 0.1,
            warmup_steps: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_mse: f64,
    pub holdout_mse: f64,
    pub holdout_rmse: f64,
    pub max_label: f64,
    pub n_train: usize,
    pub n_holdout: usize,
    pub epochs: usize,
}

pub const MIN_TRAINING_POINTS: usize = 1000;

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn mse(s: &Surrogate, data: &[LabeledPoint]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter().map(|p| (s.value(&p.x) - p.m).powi(2)).sum::<f64>() / data.len() as f64
}

pub fn train_surrogate(data: &[LabeledPoint], cfg: &TrainConfig) -> Result<(Surrogate, TrainReport)> {
    if data.len() < MIN_TRAINING_POINTS {
        return Err(Error::InsufficientData { needed: MIN_TRAINING_POINTS, got: data.len() });
    }
    if data.iter().any(|p| !p.m.is_finite() || !p.x.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite("training data"));
    }
    if cfg.batch == 0 || !(0.0..1.0).contains(&cfg.holdout_frac) {
        return Err(Error::InvalidParameter("batch must be positive, holdout in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = (data.len() as f64 * cfg.holdout_frac).round() as usize;
    let holdout: Vec<LabeledPoint> = order[..n_hold].iter().map(|&i| data[i]).collect();
    let train: Vec<LabeledPoint> = order[n_hold..].iter().map(|&i| data[i]).collect();

    let n = train.len() as f64;
    let mean = [0, 1, 2].map(|i| train.iter().map(|p| p.x[i]).sum::<f64>() / n);
    let scale = [0, 1, 2].map(|i| {
        let var = train.iter().map(|p| (p.x[i] - mean[i]).powi(2)).sum::<f64>() / n;
        if var.sqrt() > 1e-9 {
            var.sqrt()
        } else {
            1.0
        }
    });
    let max_label = train.iter().map(|p| p.m).fold(0.0, f64::max);
    let out_scale = if max_label > 1e-12 { max_label } else { 1.0 };
    let mut domain = Aabb { min: train[0].x, max: train[0].x };
    for p in &train {
        domain.min = domain.min.inf(&p.x);
        domain.max = domain.max.sup(&p.x);
    }

    let mut sizes = vec![3];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let mut layout = ParamLayout::default();
    let mlp = Mlp::new(&mut layout, &sizes);
    let mut params = vec![0.0; layout.total()];
    mlp.init(&mut params, &mut rng);
    // output weights scaled by the label spread, bias at the mean label
    let last = *mlp.layers.last().unwrap();
    let mean_t = train.iter().map(|p| p.m / out_scale).sum::<f64>() / n;
    let std_t = (train.iter().map(|p| (p.m / out_scale - mean_t).powi(2)).sum::<f64>() / n).sqrt();
    let spread = (4.0 * std_t).min(1.0);
    params[last.offset..last.end()].iter_mut().for_each(|v| *v *= spread);
    params[last.end() - 1] = inverse_softplus(mean_t.max(1e-6));

    let mut surrogate = Surrogate {
        layer_sizes: sizes,
        activation: "tanh".into(),
        input_mean: mean,
        input_scale: scale,
        output_scale: out_scale,
        domain: Some(domain),
        weights: params,
    };
    let mut opt = Adam::new(surrogate.weights.len(), cfg.lr);
    let mut grad = vec![0.0; surrogate.weights.len()];
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let inputs: Vec<[f64; 3]> = train.iter().map(|p| surrogate.normalize(&p.x)).collect();
    let targets: Vec<f64> = train.iter().map(|p| p.m / out_scale).collect();

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let checkpoint = surrogate.weights.clone();
        let progress = epoch as f64 / cfg.epochs.max(1) as f64;
        let lr = cfg.lr
            * (cfg.lr_final_frac + (1.0 - cfg.lr_final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in idx.chunks(cfg.batch) {
            step += 1;
            let lr = lr * (step as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
            grad.iter_mut().for_each(|g| *g = 0.0);
            let b = chunk.len() as f64;
            for &i in chunk {
                let t = mlp.forward(&surrogate.weights, &inputs[i]);
                let z = t.output()[0];
                let err = softplus(z) - targets[i];
                epoch_loss += err * err;
                mlp.backward(&surrogate.weights, &t, &[2.0 * err * sigmoid(z) / b], &mut grad);
            }
            opt.step_with_lr(&mut surrogate.weights, &grad, lr);
        }
        if !epoch_loss.is_finite() || !surrogate.weights.iter().all(|w| w.is_finite()) {
            surrogate.weights = checkpoint;
            return Err(Error::SurrogateDiverged { epoch, checkpoint: Box::new(surrogate) });
        }
    }

    let holdout_mse = mse(&surrogate, &holdout);
    let report = TrainReport {
        train_mse: mse(&surrogate, &train),
        holdout_mse,
        holdout_rmse: holdout_mse.sqrt(),
        max_label,
        n_train: train.len(),
        n_holdout: holdout.len(),
        epochs: cfg.epochs,
    };
    Ok((surrogate, report))
}

/// Which motion the gradient term of the guidance direction describes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AscentFrame {
    /// `+∇m̂`: direction the end effector would move to gain manipulability.
    #[default]
    EndEffector,
    /// `-∇m̂`: base displacement producing that end-effector motion.
    BaseMotion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceParams {
    pub alpha: f64,
    /// N
    pub k_guide: f64,
    pub manip_threshold: f64,
    /// m
    pub stretch_radius: f64,
    #[serde(default)]
    pub frame: AscentFrame,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            k_guide: 1.0,
            manip_threshold: 0.1,
            stretch_radius: 0.3,
            frame: AscentFrame::EndEffector,
        }
    }
}

impl GuidanceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter("alpha must lie in (0, 1)".into()));
        }
        if !(self.k_guide > 0.0 && self.manip_threshold > 0.0 && self.stretch_radius > 0.0) {
            return Err(Error::InvalidParameter("guidance gains and thresholds must be positive".into()));
        }
        Ok(())
    }

    pub fn is_stretched(&self, x: &Vector3<f64>) -> bool {
        x.xy().norm() > self.stretch_radius
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceOutput {
    pub cue: PedalCue,
    pub m_hat: f64,
    /// Gradient too small to normalize; only the radial term was used.
    pub degenerate: bool,
}

/// `x` is the end-effector position in the arm mount frame.
pub fn guidance_cue(x: &Vector3<f64>, model: &dyn ManipulabilityModel, p: &GuidanceParams) -> GuidanceOutput {
    let (m_hat, grad) = model.eval(x);
    let inactive = GuidanceOutput { cue: PedalCue::inactive(CueSource::Guidance), m_hat, degenerate: false };
    if !p.is_stretched(x) || !(m_hat < p.manip_threshold) {
        return inactive;
    }
    let radial = x / x.norm();
    let gn = grad.norm();
    let degenerate = !(gn >= 1e-9);
    let v = if degenerate {
        p.alpha * radial
    } else {
        let g = match p.frame {
            AscentFrame::EndEffector => grad / gn,
            AscentFrame::BaseMotion => -grad / gn,
        };
        p.alpha * radial + (1.0 - p.alpha) * g
    };
    let h = Vector2::new(v.x, v.y);
    let hn = h.norm();
    if hn < 1e-12 {
        return GuidanceOutput { degenerate, ..inactive };
    }
    GuidanceOutput {
        cue: PedalCue::active(h * (p.k_guide / hn), CueSource::Guidance),
        m_hat,
        degenerate,
    }
}

/// Sums the active per-arm cues and rescales the result to `k_guide`.
pub fn combine_guidance(outputs: &[GuidanceOutput], k_guide: f64) -> PedalCue {
    let sum: Vector2<f64> = outputs.iter().filter(|o| o.cue.active).map(|o| o.cue.force_xy).sum();
    let n = sum.norm();
    if n < 1e-12 {
        PedalCue::inactive(CueSource::Guidance)
    } else {
        PedalCue::active(sum * (k_guide / n), CueSource::Guidance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlayMask {
    pub flags: Vec<bool>,
    pub values: Vec<f64>,
}

/// Points are in the arm mount frame; points outside the surrogate's training
/// domain read as zero.
pub fn overlay_mask(points: &[Vector3<f64>], s: &Surrogate, threshold: f64) -> OverlayMask {
    let values: Vec<f64> = points
        .iter()
        .map(|x| match &s.domain {
            Some(d) if !d.contains(x) => 0.0,
            _ => s.value(x),
        })
        .collect();
    let flags = values.iter().map(|v| *v >= threshold).collect();
    OverlayMask { flags, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn two_link() -> KinematicChain {
        KinematicChain::planar(&[1.0, 1.0]).unwrap()
    }

    fn planar_bounds() -> Aabb {
        Aabb::new(Vector3::new(-2.0, -2.0, -0.05), Vector3::new(2.0, 2.0, 0.05)).unwrap()
    }

    /// Best |sin q2| over configurations reaching radius r.
    fn analytic_two_link(r: f64) -> f64 {
        let c = ((r * r - 2.0) / 2.0).clamp(-1.0, 1.0);
        (1.0 - c * c).sqrt()
    }

    fn disk_points(n: usize, seed: u64) -> Vec<LabeledPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let r = 2.0 * rng.random::<f64>().sqrt();
                let a = rng.random_range(-PI..PI);
                LabeledPoint { x: Vector3::new(r * a.cos(), r * a.sin(), 0.0), m: analytic_two_link(r) }
            })
            .collect()
    }

    #[test]
    fn single_sample_gives_one_cell() {
        let g = oracle_field(&two_link(), planar_bounds(), 0.1, 1, 3).unwrap();
        assert_eq!(g.known_cells(), 1);
        assert!(oracle_field(&two_link(), planar_bounds(), 0.1, 0, 3).is_err());
    }

    #[test]
    fn unreachable_bounds_are_flagged() {
        let far = Aabb::new(Vector3::new(5.0, 5.0, -1.0), Vector3::new(6.0, 6.0, 1.0)).unwrap();
        let g = oracle_field(&two_link(), far, 0.1, 500, 0).unwrap();
        assert!(g.all_unknown);
        assert_eq!(g.known_cells(), 0);
    }

    #[test]
    fn oracle_near_sqrt2_approaches_one() {
        let g = oracle_field(&two_link(), planar_bounds(), 0.05, 200_000, 7).unwrap();
        let x = Vector3::new(2f64.sqrt(), 0.0, 0.0);
        let v = g.value_at(&x).unwrap();
        assert!(v > 0.99 && v <= 1.0 + 1e-12, "{v}");
    }

    #[test]
    fn oracle_at_boundary_shrinks_with_resolution() {
        let mut last = f64::INFINITY;
        for res in [0.2, 0.05, 0.0125] {
            let b = Aabb::new(Vector3::new(2.0 - res, -res / 2.0, -0.05), Vector3::new(2.0, res / 2.0, 0.05)).unwrap();
            let chain = two_link();
            let mut grid = FieldGrid::empty(b, res).unwrap();
            // dense joint grid near full extension
            let steps = 400;
            for i in 0..=steps {
                for j in 0..=steps {
                    let q = DVector::from_vec(vec![
                        -0.2 + 0.4 * i as f64 / steps as f64,
                        -1.0 + 2.0 * j as f64 / steps as f64,
                    ]);
                    let x = *chain.forward_kinematics(&q).unwrap().translation();
                    grid.record(&x, chain.manipulability(&q).unwrap());
                }
            }
            let v = grid.values.iter().flatten().copied().fold(0.0, f64::max);
            // never above the analytic bound at the cell's inner radius
            assert!(v <= analytic_two_link(2.0 - res) + 1e-9);
            assert!(v < last);
            last = v;
        }
        assert!(last < 0.25);
    }

    #[test]
    fn oracle_is_monotone_in_samples() {
        let a = oracle_field(&two_link(), planar_bounds(), 0.2, 2000, 11).unwrap();
        let b = oracle_field(&two_link(), planar_bounds(), 0.2, 6000, 11).unwrap();
        for (va, vb) in a.values.iter().zip(&b.values) {
            if let Some(va) = va {
                assert!(vb.unwrap() >= *va);
            }
        }
    }

    #[test]
    fn constant_labels_are_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<_> = (0..1200)
            .map(|_| LabeledPoint {
                x: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                m: 0.37,
            })
            .collect();
        let cfg = TrainConfig { epochs: 30, hidden: vec![16, 16], ..Default::default() };
        let (s, _) = train_surrogate(&data, &cfg).unwrap();
        for p in data.iter().take(200) {
            let (m, g) = eval_surrogate(&s, &p.x);
            assert!((m - 0.37).abs() < 1e-3);
            assert!(g.norm() < 1e-3);
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let data = disk_points(999, 0);
        assert!(matches!(
            train_surrogate(&data, &TrainConfig::default()),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn divergence_returns_checkpoint() {
        let data = disk_points(1000, 0);
        let cfg = TrainConfig { lr: f64::INFINITY, epochs: 3, ..Default::default() };
        match train_surrogate(&data, &cfg) {
            Err(Error::SurrogateDiverged { epoch, checkpoint }) => {
                assert_eq!(epoch, 0);
                assert!(checkpoint.validate().is_ok());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    fn small_planar_surrogate() -> (Surrogate, TrainReport) {
        let cfg = TrainConfig { epochs: 80, hidden: vec![32, 32], lr: 1e-2, ..Default::default() };
        train_surrogate(&disk_points(3000, 2), &cfg).unwrap()
    }

    #[test]
    fn planar_surrogate_fits_and_is_seeded() {
        let (s, rep) = small_planar_surrogate();
        assert!(rep.holdout_rmse < 0.05 * rep.max_label, "rmse {}", rep.holdout_rmse);
        let (s2, _) = small_planar_surrogate();
        assert_eq!(s.weights, s2.weights);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.1..0.1));
            let (_, g) = eval_surrogate(&s, &x);
            let h = 1e-5;
            let fd = Vector3::from_fn(|i, _| {
                let mut a = x;
                a[i] += h;
                let mut b = x;
                b[i] -= h;
                (s.value(&a) - s.value(&b)) / (2.0 * h)
            });
            assert!((g - fd).norm() <= 1e-3 * g.norm().max(1e-6), "{g} vs {fd}");
        }

        let mask = overlay_mask(
            &(0..16)
                .flat_map(|k| {
                    let a = k as f64 * PI / 8.0;
                    [2f64.sqrt(), 1.99].map(|r| Vector3::new(r * a.cos(), r * a.sin(), 0.0))
                })
                .collect::<Vec<_>>(),
            &s,
            0.5,
        );
        for pair in mask.flags.chunks(2) {
            assert_eq!(pair, [true, false]);
        }

        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(Surrogate::from_json(&json).unwrap(), s);
    }

    #[test]
    fn radial_field_has_radial_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<_> = (0..2000)
            .map(|_| {
                let x = Vector3::from_fn(|_, _| rng.random_range(-1.5..1.5));
                LabeledPoint { x, m: (-x.norm_squared()).exp() }
            })
            .collect();
        let cfg = TrainConfig { epochs: 100, hidden: vec![32, 32], lr: 1e-2, ..Default::default() };
        let (s, _) = train_surrogate(&data, &cfg).unwrap();
        for r in [0.3, 0.6, 0.9, 1.2] {
            for _ in 0..25 {
                let x = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize() * r;
                let (_, g) = eval_surrogate(&s, &x);
                let angle = (-g).normalize().dot(&x.normalize()).min(1.0).acos().to_degrees();
                assert!(angle < 5.0, "r {r}: {angle} deg");
            }
        }
    }

    #[test]
    fn overlay_extremes() {
        let data = disk_points(1000, 4);
        let (s, _) = train_surrogate(&data, &TrainConfig { epochs: 2, ..Default::default() }).unwrap();
        let far: Vec<_> = (0..5).map(|k| Vector3::new(10.0 + k as f64, 0.0, 0.0)).collect();
        assert!(overlay_mask(&far, &s, 0.01).flags.iter().all(|f| !f));
        let near: Vec<_> = data.iter().take(20).map(|p| p.x).chain(far).collect();
        assert!(overlay_mask(&near, &s, 0.0).flags.iter().all(|f| *f));
    }

    fn fixed(m: f64, g: Vector3<f64>) -> FnModel<impl Fn(&Vector3<f64>) -> (f64, Vector3<f64>)> {
        FnModel(move |_: &Vector3<f64>| (m, g))
    }

    #[test]
    fn guidance_gating() {
        let p = GuidanceParams::default();
        let out = guidance_cue(&Vector3::new(0.2, 0.0, 0.1), &fixed(0.05, Vector3::x()), &p);
        assert!(!out.cue.active);
        let out = guidance_cue(&Vector3::new(0.5, 0.0, 0.0), &fixed(0.2, Vector3::x()), &p);
        assert!(!out.cue.active);
        // vertical component alone does not change activation
        for z in [-1.0, 0.0, 2.0] {
            assert!(guidance_cue(&Vector3::new(0.31, 0.0, z), &fixed(0.05, Vector3::x()), &p).cue.active);
            assert!(!guidance_cue(&Vector3::new(0.29, 0.0, z), &fixed(0.05, Vector3::x()), &p).cue.active);
        }
    }

    #[test]
    fn guidance_directions() {
        let p = GuidanceParams::default();
        let x = Vector3::new(0.5, 0.0, 0.0);
        let out = guidance_cue(&x, &fixed(0.05, Vector3::new(3.0, 0.0, 0.0)), &p);
        assert!((out.cue.force_xy - Vector2::new(p.k_guide, 0.0)).norm() < 1e-12);

        let out = guidance_cue(&x, &fixed(0.05, Vector3::new(0.0, 2.0, 0.0)), &p);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out.cue.force_xy - Vector2::new(h, h)).norm() < 1e-12);

        for c in [1e-6, 0.3, 1e4] {
            let g = Vector3::new(0.2, -0.7, 0.4);
            let a = guidance_cue(&x, &fixed(0.05, g), &p).cue.force_xy;
            let b = guidance_cue(&x, &fixed(0.05, g * c), &p).cue.force_xy;
            assert!((a - b).norm() < 1e-12);
        }

        let base = GuidanceParams { frame: AscentFrame::BaseMotion, ..p };
        let out = guidance_cue(&x, &fixed(0.05, Vector3::new(0.0, 2.0, 0.0)), &base);
        assert!((out.cue.force_xy - Vector2::new(h, -h)).norm() < 1e-12);
    }

    #[test]
    fn degenerate_gradient_falls_back() {
        let p = GuidanceParams::default();
        let out = guidance_cue(&Vector3::new(0.0, 0.6, 0.2), &fixed(0.05, Vector3::zeros()), &p);
        assert!(out.degenerate && out.cue.active);
        assert!((out.cue.force_xy - Vector2::new(0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn combined_cue_is_renormalized() {
        let a = GuidanceOutput { cue: PedalCue::active(Vector2::new(1.0, 0.0), CueSource::Guidance), m_hat: 0.0, degenerate: false };
        let b = GuidanceOutput { cue: PedalCue::active(Vector2::new(0.0, 1.0), CueSource::Guidance), m_hat: 0.0, degenerate: false };
        let c = combine_guidance(&[a, b], 2.0);
        assert!((c.force_xy.norm() - 2.0).abs() < 1e-12);
        assert!(!combine_guidance(&[], 2.0).active);
    }

    #[test]
    fn grid_json_roundtrip() {
        let g = oracle_field(&two_link(), planar_bounds(), 0.5, 100, 1).unwrap();
        let back: FieldGrid = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
