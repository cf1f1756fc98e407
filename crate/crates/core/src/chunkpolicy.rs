//! Torque-augmented chunked behavior cloning at desk scale: token assembly,
//! a fully-connected conditional VAE over whole-body action chunks, the
//! L1 + KL objective and temporal ensembling.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Linear, Mlp, MlpTrace, ParamLayout};
use crate::session::{
    DatasetRecord, ObservationRecord, Operator, OperatorInput, OperatorView, WholeBodyAction, LIDAR_SECTORS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub horizon: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub width: usize,
    pub token_dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Cosine schedule floor as a fraction of `lr`.
    pub lr_final_frac: f64,
    pub seed: u64,
    /// Drop the torque tokens from encoder and decoder.
    pub ablate_torque: bool,
    /// Temporal-ensemble decay per tick of prediction age.
    pub ensemble_k: f64,
    /// Record the training curve every this many steps.
    pub log_every: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            latent_dim: 32,
            beta: 10.0,
            width: 128,
            token_dim: 16,
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            warmup_steps: 100,
            lr_final_frac: 0.0,
            seed: 0,
            ablate_torque: false,
            ensemble_k: 0.1,
            log_every: 50,
        }
    }
}

/// Proprioception, torques and low-dimensional scene features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyObservation {
    pub q: Vec<f64>,
    pub tau: Vec<f64>,
    /// Base pose followed by lidar sectors; fills the image-feature slot.
    pub extra: Vec<f64>,
}

impl PolicyObservation {
    pub fn from_record(r: &ObservationRecord) -> Self {
        let mut extra = r.base_pose.to_vec();
        extra.extend(&r.lidar_sectors);
        Self { q: r.q.clone(), tau: r.tau.clone(), extra }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.tau).chain(&self.extra).all(|v| v.is_finite())
    }
}

/// `H × width` actions, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub horizon: usize,
    pub width: usize,
    pub actions: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, width: usize, actions: Vec<f64>) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        if actions.len() != horizon * width {
            return Err(Error::DimensionMismatch { expected: horizon * width, got: actions.len() });
        }
        Ok(Self { horizon, width, actions })
    }

    pub fn row(&self, h: usize) -> &[f64] {
        &self.actions[h * self.width..(h + 1) * self.width]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub q: usize,
    pub tau: usize,
    pub extra: usize,
    pub action: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub q_mean: Vec<f64>,
    pub q_std: Vec<f64>,
    pub tau_mean: Vec<f64>,
    pub tau_std: Vec<f64>,
    pub extra_mean: Vec<f64>,
    pub extra_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

fn column_stats<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.clone().count().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows.clone() {
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
    let std = var.into_iter().map(|v| if v.sqrt() > 1e-6 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

fn normalize(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect()
}

impl Normalization {
    pub fn from_records(records: &[DatasetRecord]) -> Self {
        let obs: Vec<PolicyObservation> = records.iter().map(|r| PolicyObservation::from_record(&r.observation)).collect();
        let (q_mean, q_std) = column_stats(obs.iter().map(|o| o.q.as_slice()), obs[0].q.len());
        let (tau_mean, tau_std) = column_stats(obs.iter().map(|o| o.tau.as_slice()), obs[0].tau.len());
        let (extra_mean, extra_std) = column_stats(obs.iter().map(|o| o.extra.as_slice()), obs[0].extra.len());
        let (action_mean, action_std) = column_stats(records.iter().map(|r| r.action.as_slice()), records[0].action.len());
        Self { q_mean, q_std, tau_mean, tau_std, extra_mean, extra_std, action_mean, action_std }
    }

    fn observation(&self, o: &PolicyObservation) -> PolicyObservation {
        PolicyObservation {
            q: normalize(&o.q, &self.q_mean, &self.q_std),
            tau: normalize(&o.tau, &self.tau_mean, &self.tau_std),
            extra: normalize(&o.extra, &self.extra_mean, &self.extra_std),
        }
    }

    fn chunk(&self, actions: &[f64]) -> Vec<f64> {
        let w = self.action_mean.len();
        actions.iter().enumerate().map(|(i, v)| (v - self.action_mean[i % w]) / self.action_std[i % w]).collect()
    }

    fn denormalize_chunk(&self, actions: &[f64]) -> Vec<f64> {
        let w = self.action_mean.len();
        actions.iter().enumerate().map(|(i, v)| v * self.action_std[i % w] + self.action_mean[i % w]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Cls,
    JointPos,
    Torque,
    Action(usize),
    Latent,
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequences {
    pub encoder: Option<Vec<Vec<f64>>>,
    pub encoder_kinds: Vec<TokenKind>,
    pub decoder: Vec<Vec<f64>>,
    pub decoder_kinds: Vec<TokenKind>,
}

/// Additive per-token terms: modality embedding and positional vector.
#[derive(Clone, Copy, Debug)]
struct TokenSlot {
    proj: Option<Linear>,
    modality: Option<usize>,
    position: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    d: usize,
    encoder_slots: Vec<(TokenKind, TokenSlot)>,
    encoder: Mlp,
    decoder_slots: Vec<(TokenKind, TokenSlot)>,
    decoder: Mlp,
    total: usize,
}

impl Layout {
    fn new(cfg: &PolicyConfig, dims: &PolicyDims) -> Self {
        let d = cfg.token_dim;
        let mut l = ParamLayout::default();
        let torque = !cfg.ablate_torque;

        let cls = l.block(d);
        let q_enc = l.linear(dims.q, d);
        let tau_enc = torque.then(|| l.linear(dims.tau, d));
        let act_enc = l.linear(dims.action, d);
        let m_q = l.block(d);
        let m_tau = torque.then(|| l.block(d));
        let m_a = l.block(d);
        let enc_len = 2 + usize::from(torque) + cfg.horizon;
        let p_enc = l.block(enc_len * d);

        let mut encoder_slots = vec![
            (TokenKind::Cls, TokenSlot { proj: None, modality: Some(cls), position: 0 }),
            (TokenKind::JointPos, TokenSlot { proj: Some(q_enc), modality: Some(m_q), position: 0 }),
        ];
        if let (Some(p), Some(m)) = (tau_enc, m_tau) {
            encoder_slots.push((TokenKind::Torque, TokenSlot { proj: Some(p), modality: Some(m), position: 0 }));
        }
        for h in 0..cfg.horizon {
            encoder_slots.push((TokenKind::Action(h), TokenSlot { proj: Some(act_enc), modality: Some(m_a), position: 0 }));
        }
        for (i, (_, s)) in encoder_slots.iter_mut().enumerate() {
            s.position = p_enc + i * d;
        }
        let encoder = Mlp::new(&mut l, &[enc_len * d, cfg.width, cfg.width, 2 * cfg.latent_dim]);

        let z_dec = l.linear(cfg.latent_dim, d);
        let q_dec = l.linear(dims.q, d);
        let tau_dec = torque.then(|| l.linear(dims.tau, d));
        let img_dec = l.linear(dims.extra, d);
        let m_z = l.block(d);
        let m_q2 = l.block(d);
        let m_tau2 = torque.then(|| l.block(d));
        let m_img = l.block(d);
        let dec_len = 3 + usize::from(torque);
        let p_dec = l.block(dec_len * d);
        let mut decoder_slots = vec![
            (TokenKind::Latent, TokenSlot { proj: Some(z_dec), modality: Some(m_z), position: 0 }),
            (TokenKind::JointPos, TokenSlot { proj: Some(q_dec), modality: Some(m_q2), position: 0 }),
        ];
        if let (Some(p), Some(m)) = (tau_dec, m_tau2) {
            decoder_slots.push((TokenKind::Torque, TokenSlot { proj: Some(p), modality: Some(m), position: 0 }));
        }
        decoder_slots.push((TokenKind::Image, TokenSlot { proj: Some(img_dec), modality: Some(m_img), position: 0 }));
        for (i, (_, s)) in decoder_slots.iter_mut().enumerate() {
            s.position = p_dec + i * d;
        }
        let decoder = Mlp::new(&mut l, &[dec_len * d, cfg.width, cfg.width, cfg.horizon * dims.action]);
        Self { d, encoder_slots, encoder, decoder_slots, decoder, total: l.total() }
    }
}

fn slot_input<'a>(kind: TokenKind, obs: &'a PolicyObservation, chunk: &'a [f64], z: &'a [f64], width: usize) -> &'a [f64] {
    match kind {
        TokenKind::Cls => &[],
        TokenKind::JointPos => &obs.q,
        TokenKind::Torque => &obs.tau,
        TokenKind::Action(h) => &chunk[h * width..(h + 1) * width],
        TokenKind::Latent => z,
        TokenKind::Image => &obs.extra,
    }
}

fn write_token(params: &[f64], slot: &TokenSlot, x: &[f64], d: usize, out: &mut [f64]) {
    match slot.proj {
        Some(p) => p.forward(params, x, out),
        None => out.iter_mut().for_each(|v| *v = 0.0),
    }
    for (i, o) in out.iter_mut().enumerate() {
        *o += params[slot.position + i];
        if let Some(m) = slot.modality {
            *o += params[m + i];
        }
    }
    debug_assert_eq!(out.len(), d);
}

fn backprop_token(params: &[f64], slot: &TokenSlot, x: &[f64], dtok: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
    if let Some(p) = slot.proj {
        p.backward(params, x, dtok, grad, dx);
    }
    for (i, g) in dtok.iter().enumerate() {
        grad[slot.position + i] += g;
        if let Some(m) = slot.modality {
            grad[m + i] += g;
        }
    }
}

/// Loss components averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l1: f64,
    pub kl: f64,
}

/// A normalized training example.
#[derive(Clone, Debug)]
pub struct ChunkSample {
    pub obs: PolicyObservation,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub l1: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub dims: PolicyDims,
    pub norm: Normalization,
    pub weights: Vec<f64>,
    #[serde(skip)]
    layout: Option<Arc<Layout>>,
}

impl PartialEq for PolicyModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.dims == other.dims && self.norm == other.norm && self.weights == other.weights
    }
}

/// `KL(N(mu, exp(logvar)) || N(0, I))`.
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu.iter().zip(logvar).map(|(m, lv)| 1.0 + lv - m * m - lv.exp()).sum::<f64>()
}

impl PolicyModel {
    pub fn new(config: PolicyConfig, dims: PolicyDims, norm: Normalization) -> Result<Self> {
        if config.horizon == 0 || config.latent_dim == 0 || config.width == 0 || config.token_dim == 0 {
            return Err(Error::InvalidParameter("policy sizes must be positive".into()));
        }
        if !(config.beta >= 0.0) {
            return Err(Error::InvalidParameter("beta must be non-negative".into()));
        }
        let layout = Layout::new(&config, &dims);
        let mut weights = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        layout.encoder.init(&mut weights, &mut rng);
        layout.decoder.init(&mut weights, &mut rng);
        let emb = Normal::new(0.0, 0.02).expect("valid");
        for (_, s) in layout.encoder_slots.iter().chain(&layout.decoder_slots) {
            if let Some(p) = s.proj {
                p.init(&mut weights, &mut rng);
            }
            for i in 0..layout.d {
                weights[s.position + i] = emb.sample(&mut rng);
            }
        }
        Ok(Self { config, dims, norm, weights, layout: Some(Arc::new(layout)) })
    }

    fn layout(&self) -> Arc<Layout> {
        match &self.layout {
            Some(l) => l.clone(),
            None => Arc::new(Layout::new(&self.config, &self.dims)),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut m: PolicyModel = serde_json::from_str(text)?;
        let layout = Layout::new(&m.config, &m.dims);
        if m.weights.len() != layout.total {
            return Err(Error::DimensionMismatch { expected: layout.total, got: m.weights.len() });
        }
        if !m.weights.iter().all(|w| w.is_finite()) {
            return Err(Error::NonFinite("policy weights"));
        }
        m.layout = Some(Arc::new(layout));
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn action_width(&self) -> usize {
        self.dims.action
    }

    fn check_obs(&self, obs: &PolicyObservation) -> Result<()> {
        for (expected, got) in [(self.dims.q, obs.q.len()), (self.dims.tau, obs.tau.len()), (self.dims.extra, obs.extra.len())] {
            if expected != got {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        Ok(())
    }

    /// Token sequences for a raw observation; the encoder side needs a chunk.
    /// The decoder's latent token uses `latent` (zero when absent).
    pub fn assemble_tokens(
        &self,
        obs: &PolicyObservation,
        chunk: Option<&ActionChunk>,
        latent: Option<&[f64]>,
    ) -> Result<TokenSequences> {
        self.check_obs(obs)?;
        let layout = self.layout();
        let o = self.norm.observation(obs);
        let zero = vec![0.0; self.config.latent_dim];
        let z = latent.unwrap_or(&zero);
        if z.len() != self.config.latent_dim {
            return Err(Error::DimensionMismatch { expected: self.config.latent_dim, got: z.len() });
        }
        let target = match chunk {
            Some(c) => {
                if c.width != self.dims.action || c.horizon != self.config.horizon {
                    return Err(Error::DimensionMismatch {
                        expected: self.config.horizon * self.dims.action,
                        got: c.actions.len(),
                    });
                }
                Some(self.norm.chunk(&c.actions))
            }
            None => None,
        };
        let build = |slots: &[(TokenKind, TokenSlot)], chunk: &[f64]| {
            slots
                .iter()
                .map(|(k, s)| {
                    let mut t = vec![0.0; layout.d];
                    write_token(&self.weights, s, slot_input(*k, &o, chunk, z, self.dims.action), layout.d, &mut t);
                    t
                })
                .collect::<Vec<_>>()
        };
        Ok(TokenSequences {
            encoder: target.as_ref().map(|t| build(&layout.encoder_slots, t)),
            encoder_kinds: layout.encoder_slots.iter().map(|(k, _)| *k).collect(),
            decoder: build(&layout.decoder_slots, &[]),
            decoder_kinds: layout.decoder_slots.iter().map(|(k, _)| *k).collect(),
        })
    }

    fn flat_tokens(&self, layout: &Layout, slots: &[(TokenKind, TokenSlot)], o: &PolicyObservation, chunk: &[f64], z: &[f64]) -> Vec<f64> {
        let d = layout.d;
        let mut flat = vec![0.0; slots.len() * d];
        for (i, (k, s)) in slots.iter().enumerate() {
            write_token(&self.weights, s, slot_input(*k, o, chunk, z, self.dims.action), d, &mut flat[i * d..(i + 1) * d]);
        }
        flat
    }

    fn decode(&self, layout: &Layout, o: &PolicyObservation, z: &[f64]) -> (Vec<f64>, MlpTrace) {
        let input = self.flat_tokens(layout, &layout.decoder_slots, o, &[], z);
        let trace = layout.decoder.forward(&self.weights, &input);
        (input, trace)
    }

    /// Predicted chunk for a raw observation; the latent defaults to the prior mean.
    pub fn infer_chunk(&self, obs: &PolicyObservation, latent: Option<&[f64]>) -> Result<ActionChunk> {
        self.check_obs(obs)?;
        let layout = self.layout();
        let zero = vec![0.0; self.config.latent_dim];
        let z = latent.unwrap_or(&zero);
        if z.len() != self.config.latent_dim {
            return Err(Error::DimensionMismatch { expected: self.config.latent_dim, got: z.len() });
        }
        let (_, trace) = self.decode(&layout, &self.norm.observation(obs), z);
        ActionChunk::new(self.config.horizon, self.dims.action, self.norm.denormalize_chunk(trace.output()))
    }

    /// Batch loss and its gradient for fixed reparameterization noise `eps`.
    pub fn loss_and_grad(&self, batch: &[ChunkSample], eps: &[Vec<f64>]) -> (LossParts, Vec<f64>) {
        let layout = self.layout();
        let p = &self.weights;
        let mut grad = vec![0.0; p.len()];
        let mut parts = LossParts::default();
        let b = batch.len() as f64;
        let lat = self.config.latent_dim;
        let d = layout.d;
        let out_len = self.config.horizon * self.dims.action;
        for (s, e) in batch.iter().zip(eps) {
            let enc_in = self.flat_tokens(&layout, &layout.encoder_slots, &s.obs, &s.target, &[]);
            let enc = layout.encoder.forward(p, &enc_in);
            let (mu, logvar) = enc.output().split_at(lat);
            let z: Vec<f64> = (0..lat).map(|i| mu[i] + (0.5 * logvar[i]).exp() * e[i]).collect();
            let (_, dec) = self.decode(&layout, &s.obs, &z);
            let pred = dec.output();

            let l1 = pred.iter().zip(&s.target).map(|(a, t)| (a - t).abs()).sum::<f64>() / out_len as f64;
            let kl = kl_standard_normal(mu, logvar);
            parts.l1 += l1 / b;
            parts.kl += kl / b;

            let dpred: Vec<f64> = pred
                .iter()
                .zip(&s.target)
                .map(|(a, t)| (a - t).signum() * f64::from(a != t) / (out_len as f64 * b))
                .collect();
            let ddec_in = layout.decoder.backward(p, &dec, &dpred, &mut grad);
            let mut dz = vec![0.0; lat];
            for (i, (k, slot)) in layout.decoder_slots.iter().enumerate() {
                let x = slot_input(*k, &s.obs, &[], &z, self.dims.action);
                let dtok = &ddec_in[i * d..(i + 1) * d];
                let dx = (*k == TokenKind::Latent).then_some(dz.as_mut_slice());
                backprop_token(p, slot, x, dtok, &mut grad, dx);
            }

            let w = self.config.beta / b;
            let mut denc = vec![0.0; 2 * lat];
            for i in 0..lat {
                let sd = (0.5 * logvar[i]).exp();
                denc[i] = dz[i] + w * mu[i];
                denc[lat + i] = dz[i] * e[i] * 0.5 * sd + w * 0.5 * (logvar[i].exp() - 1.0);
            }
            let denc_in = layout.encoder.backward(p, &enc, &denc, &mut grad);
            for (i, (k, slot)) in layout.encoder_slots.iter().enumerate() {
                let x = slot_input(*k, &s.obs, &s.target, &[], self.dims.action);
                backprop_token(p, slot, x, &denc_in[i * d..(i + 1) * d], &mut grad, None);
            }
        }
        parts.total = parts.l1 + self.config.beta * parts.kl;
        (parts, grad)
    }

    /// Normalized samples: each record paired with the next `H` actions of its episode.
    pub fn samples(&self, records: &[DatasetRecord]) -> Result<Vec<ChunkSample>> {
        let h = self.config.horizon;
        let mut out = Vec::new();
        for ep in split_episodes(records) {
            if ep.len() < h + 1 {
                return Err(Error::InsufficientData { needed: h + 1, got: ep.len() });
            }
            for i in 0..=ep.len() - h {
                let obs = PolicyObservation::from_record(&ep[i].observation);
                self.check_obs(&obs)?;
                let actions: Vec<f64> = ep[i..i + h].iter().flat_map(|r| r.action.iter().copied()).collect();
                if actions.len() != h * self.dims.action {
                    return Err(Error::DimensionMismatch { expected: h * self.dims.action, got: actions.len() });
                }
                out.push(ChunkSample { obs: self.norm.observation(&obs), target: self.norm.chunk(&actions) });
            }
        }
        Ok(out)
    }
}

fn split_episodes(records: &[DatasetRecord]) -> Vec<&[DatasetRecord]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].episode != records[start].episode {
            if i > start {
                out.push(&records[start..i]);
            }
            start = i;
        }
    }
    out
}

pub fn dims_of(records: &[DatasetRecord]) -> Result<PolicyDims> {
    let r = records.first().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    let o = PolicyObservation::from_record(&r.observation);
    Ok(PolicyDims { q: o.q.len(), tau: o.tau.len(), extra: o.extra.len(), action: r.action.len() })
}

/// Minimizes L1 reconstruction plus `beta`-weighted KL with Adam.
pub fn train(records: &[DatasetRecord], cfg: &PolicyConfig) -> Result<(PolicyModel, Vec<CurvePoint>)> {
    let dims = dims_of(records)?;
    let mut model = PolicyModel::new(cfg.clone(), dims, Normalization::from_records(records))?;
    let samples = model.samples(records)?;
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(model.weights.len(), cfg.lr);
    let mut curve = Vec::new();
    let batch = cfg.batch.max(1);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..samples.len())).collect();
        let chosen: Vec<ChunkSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        let eps: Vec<Vec<f64>> =
            (0..batch).map(|_| (0..cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let (parts, grad) = model.loss_and_grad(&chosen, &eps);
        if !parts.total.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("l1 {} kl {} (lr {}, beta {})", parts.l1, parts.kl, cfg.lr, cfg.beta),
            });
        }
        let progress = step as f64 / cfg.steps as f64;
        let warm = ((step + 1) as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
        let lr = cfg.lr * warm * (cfg.lr_final_frac + (1.0 - cfg.lr_final_frac) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        opt.step_with_lr(&mut model.weights, &grad, lr);
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            curve.push(CurvePoint { step, loss: parts.total, l1: parts.l1, kl: parts.kl });
        }
    }
    Ok((model, curve))
}

/// Weighted mean of the predictions for the current tick, weights `exp(-k age)`.
/// Entries whose age exceeds their horizon are skipped.
pub fn temporal_ensemble(buffer: &[(&ActionChunk, usize)], k: f64) -> Result<Vec<f64>> {
    let contributing: Vec<_> = buffer.iter().filter(|(c, age)| *age < c.horizon).collect();
    let first = contributing.first().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    let width = first.0.width;
    let mut out = vec![0.0; width];
    let mut total = 0.0;
    for (c, age) in &contributing {
        if c.width != width {
            return Err(Error::DimensionMismatch { expected: width, got: c.width });
        }
        let w = (-k * *age as f64).exp();
        total += w;
        for (o, a) in out.iter_mut().zip(c.row(*age)) {
            *o += w * a;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

/// Rolling buffer of chunks, one pushed per tick.
#[derive(Clone, Debug)]
pub struct TemporalEnsembler {
    pub k: f64,
    chunks: VecDeque<(ActionChunk, usize)>,
}

impl TemporalEnsembler {
    pub fn new(k: f64) -> Self {
        Self { k, chunks: VecDeque::new() }
    }

    pub fn push(&mut self, chunk: ActionChunk) -> Result<Vec<f64>> {
        for (_, age) in self.chunks.iter_mut() {
            *age += 1;
        }
        self.chunks.retain(|(c, age)| *age < c.horizon);
        self.chunks.push_back((chunk, 0));
        let view: Vec<(&ActionChunk, usize)> = self.chunks.iter().map(|(c, a)| (c, *a)).collect();
        temporal_ensemble(&view, self.k)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Drives a session from a trained policy with temporal ensembling.
pub struct PolicyOperator {
    model: Arc<PolicyModel>,
    ensembler: TemporalEnsembler,
    beams: usize,
}

impl PolicyOperator {
    pub fn new(model: Arc<PolicyModel>) -> Self {
        let k = model.config.ensemble_k;
        Self { model, ensembler: TemporalEnsembler::new(k), beams: crate::simworld::DEFAULT_BEAMS }
    }
}

impl Operator for PolicyOperator {
    fn command(&mut self, view: &OperatorView) -> OperatorInput {
        let scan = match view.world.lidar_scan(self.beams) {
            Ok(s) => s,
            Err(_) => return OperatorInput::Closed,
        };
        let b = view.world.base;
        let mut extra = vec![b.x, b.y, b.theta];
        extra.extend(scan.sectors(LIDAR_SECTORS));
        let obs = PolicyObservation {
            q: view.follower_q.iter().flat_map(|q| q.iter().copied()).collect(),
            tau: view.follower_tau.iter().flat_map(|t| t.iter().copied()).collect(),
            extra,
        };
        let n = view.chains[0].dof();
        let action = self
            .model
            .infer_chunk(&obs, None)
            .and_then(|c| self.ensembler.push(c))
            .and_then(|a| WholeBodyAction::from_vector(&a, n));
        match action {
            Ok(a) => OperatorInput::Command(a),
            Err(_) => OperatorInput::Closed,
        }
    }
}

/// Synthetic contact-gated task. Episodes come in pairs with identical joint
/// trajectories and scene features; only a torque signature on the first
/// left joints tells whether the arm is in contact. In contact the correct
/// action retreats, otherwise it advances.
pub fn contact_gated_dataset(episodes: usize, ticks: usize, n: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid");
    let mut out = Vec::with_capacity(episodes * ticks);
    let mut phase = 0.0;
    let mut q0 = Vec::new();
    for e in 0..episodes {
        let contact = e % 2 == 1;
        if !contact {
            phase = rng.random_range(0.0..std::f64::consts::TAU);
            q0 = (0..2 * n).map(|_| rng.random_range(-0.5..0.5)).collect();
        }
        for t in 0..ticks {
            let s = (0.3 * t as f64 + phase).sin();
            let q: Vec<f64> = q0.iter().map(|v| v + 0.1 * s).collect();
            let tau: Vec<f64> = (0..2 * n)
                .map(|j| noise.sample(&mut rng) + if contact && j < 2 { 1.5 } else { 0.0 })
                .collect();
            let mut sectors = vec![3.0; LIDAR_SECTORS];
            sectors[0] = 1.0 + 0.2 * s;
            let (vx, dq) = if contact { (-0.1, -0.05) } else { (0.2, 0.05) };
            let mut action = vec![vx, 0.0, 0.0];
            action.extend(q.iter().map(|v| v + dq));
            out.push(DatasetRecord {
                episode: e,
                tick: t as u64 + 1,
                observation: ObservationRecord {
                    q,
                    qdot: vec![0.0; 2 * n],
                    tau,
                    base_pose: [0.02 * t as f64, 0.0, 0.0],
                    lidar_sectors: sectors,
                },
                action,
            });
        }
    }
    out
}

/// Fraction of records whose predicted first action has the same mode
/// (sign of the forward base velocity) as the recorded action.
pub fn mode_accuracy(model: &PolicyModel, records: &[DatasetRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut correct = 0usize;
    for r in records {
        let chunk = model.infer_chunk(&PolicyObservation::from_record(&r.observation), None)?;
        let predicted = chunk.row(0)[0] > 0.05;
        let truth = r.action[0] > 0.05;
        correct += usize::from(predicted == truth);
    }
    Ok(correct as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PolicyConfig {
        PolicyConfig { width: 32, latent_dim: 4, token_dim: 8, steps: 300, ..Default::default() }
    }

    fn toy_records() -> Vec<DatasetRecord> {
        contact_gated_dataset(6, 16, 2, 3)
    }

    fn model_for(cfg: PolicyConfig) -> (PolicyModel, Vec<DatasetRecord>) {
        let recs = toy_records();
        let m = PolicyModel::new(cfg, dims_of(&recs).unwrap(), Normalization::from_records(&recs)).unwrap();
        (m, recs)
    }

    #[test]
    fn token_counts() {
        let (m, recs) = model_for(PolicyConfig { horizon: 10, ..small_cfg() });
        let obs = PolicyObservation::from_record(&recs[0].observation);
        let actions: Vec<f64> = recs[..10].iter().flat_map(|r| r.action.clone()).collect();
        let chunk = ActionChunk::new(10, m.dims.action, actions).unwrap();
        let t = m.assemble_tokens(&obs, Some(&chunk), None).unwrap();
        assert_eq!(t.encoder.as_ref().unwrap().len(), 13);
        assert_eq!(t.decoder_kinds.iter().filter(|k| **k == TokenKind::Torque).count(), 1);

        let (m, _) = model_for(PolicyConfig { horizon: 10, ablate_torque: true, ..small_cfg() });
        let t = m.assemble_tokens(&obs, Some(&chunk), None).unwrap();
        assert_eq!(t.encoder.as_ref().unwrap().len(), 12);
        assert!(!t.decoder_kinds.contains(&TokenKind::Torque));
        assert!(!t.encoder_kinds.contains(&TokenKind::Torque));
        assert!(m.assemble_tokens(&obs, None, None).unwrap().encoder.is_none());
    }

    #[test]
    fn torque_change_is_local_to_torque_tokens() {
        let (m, recs) = model_for(small_cfg());
        let obs = PolicyObservation::from_record(&recs[0].observation);
        let mut obs2 = obs.clone();
        obs2.tau[1] += 0.7;
        let actions: Vec<f64> = recs[..10].iter().flat_map(|r| r.action.clone()).collect();
        let chunk = ActionChunk::new(10, m.dims.action, actions).unwrap();
        let a = m.assemble_tokens(&obs, Some(&chunk), None).unwrap();
        let b = m.assemble_tokens(&obs2, Some(&chunk), None).unwrap();
        for (seq_a, seq_b, kinds) in [
            (a.encoder.as_ref().unwrap(), b.encoder.as_ref().unwrap(), &a.encoder_kinds),
            (&a.decoder, &b.decoder, &a.decoder_kinds),
        ] {
            for ((ta, tb), k) in seq_a.iter().zip(seq_b).zip(kinds) {
                assert_eq!(ta != tb, *k == TokenKind::Torque, "{k:?}");
            }
        }
    }

    #[test]
    fn wrong_dimensions_rejected() {
        let (m, recs) = model_for(small_cfg());
        let mut obs = PolicyObservation::from_record(&recs[0].observation);
        obs.tau.pop();
        assert!(matches!(m.assemble_tokens(&obs, None, None), Err(Error::DimensionMismatch { .. })));
        assert!(m.infer_chunk(&obs, None).is_err());
    }

    #[test]
    fn kl_properties() {
        assert_eq!(kl_standard_normal(&[0.0; 5], &[0.0; 5]), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(kl_standard_normal(&mu, &lv) >= 0.0);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (mut m, recs) = model_for(PolicyConfig { beta: 0.7, ..small_cfg() });
        let samples = m.samples(&recs).unwrap();
        let batch: Vec<_> = samples.iter().step_by(7).take(4).cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps: Vec<Vec<f64>> = (0..batch.len())
            .map(|_| (0..m.config.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let (_, grad) = m.loss_and_grad(&batch, &eps);
        let n = m.param_count();
        let h = 1e-6;
        let mut checked = 0;
        for i in (0..n).step_by(n / 10 + 1).take(10) {
            let w0 = m.weights[i];
            m.weights[i] = w0 + h;
            let up = m.loss_and_grad(&batch, &eps).0.total;
            m.weights[i] = w0 - h;
            let down = m.loss_and_grad(&batch, &eps).0.total;
            m.weights[i] = w0;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-3, "param {i}: fd {fd} analytic {}", grad[i]);
            checked += 1;
        }
        assert_eq!(checked, 10);
    }

    #[test]
    fn constant_action_is_memorized() {
        let mut recs = toy_records();
        for r in &mut recs {
            r.action.iter_mut().enumerate().for_each(|(i, a)| *a = 0.1 * i as f64 - 0.2);
        }
        let cfg = PolicyConfig { steps: 2000, lr: 3e-3, ..small_cfg() };
        let (m, curve) = train(&recs, &cfg).unwrap();
        assert!(curve.last().unwrap().loss < 1e-3, "{:?}", curve.last());
        let chunk = m.infer_chunk(&PolicyObservation::from_record(&recs[5].observation), None).unwrap();
        for (i, a) in chunk.row(3).iter().enumerate() {
            assert!((a - (0.1 * i as f64 - 0.2)).abs() < 1e-2);
        }
        assert_eq!(chunk.width, 2 * 2 + 3);
    }

    #[test]
    fn training_is_seeded() {
        let recs = toy_records();
        let cfg = PolicyConfig { steps: 30, ..small_cfg() };
        let (a, _) = train(&recs, &cfg).unwrap();
        let (b, _) = train(&recs, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        let obs = PolicyObservation::from_record(&recs[0].observation);
        assert_eq!(a.infer_chunk(&obs, None).unwrap(), a.infer_chunk(&obs, None).unwrap());
        let z = vec![0.5; cfg.latent_dim];
        assert_ne!(a.infer_chunk(&obs, Some(&z)).unwrap(), a.infer_chunk(&obs, None).unwrap());
        let back = PolicyModel::from_json(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(back.infer_chunk(&obs, None).unwrap(), a.infer_chunk(&obs, None).unwrap());
    }

    #[test]
    fn nan_loss_aborts() {
        let cfg = PolicyConfig { steps: 5, lr: f64::INFINITY, warmup_steps: 1, ..small_cfg() };
        assert!(matches!(train(&toy_records(), &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn short_episodes_rejected() {
        let recs = contact_gated_dataset(2, 5, 2, 0);
        assert!(matches!(train(&recs, &small_cfg()), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn paired_episodes_differ_only_in_torque() {
        let recs = contact_gated_dataset(4, 12, 2, 9);
        for (a, b) in recs[..12].iter().zip(&recs[12..24]) {
            assert_eq!(a.observation.q, b.observation.q);
            assert_eq!(a.observation.lidar_sectors, b.observation.lidar_sectors);
            assert!(b.observation.tau[0] - a.observation.tau[0] > 1.0);
            assert!(a.action[0] > 0.0 && b.action[0] < 0.0);
        }
    }

    fn chunk_of(rows: &[f64]) -> ActionChunk {
        ActionChunk::new(rows.len(), 1, rows.to_vec()).unwrap()
    }

    #[test]
    fn ensemble_examples() {
        let a = chunk_of(&[2.0, 2.0, 2.0]);
        assert_eq!(temporal_ensemble(&[(&a, 0), (&a, 1), (&a, 2)], 0.3).unwrap(), vec![2.0]);
        let x = chunk_of(&[1.0, 5.0]);
        let y = chunk_of(&[3.0, 5.0]);
        assert_eq!(temporal_ensemble(&[(&x, 0), (&y, 0)], 0.9).unwrap(), vec![2.0]);
        let zero = chunk_of(&[0.0, 0.0]);
        let one = chunk_of(&[7.0, 1.0]);
        let v = temporal_ensemble(&[(&zero, 0), (&one, 1)], std::f64::consts::LN_2).unwrap()[0];
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert!(temporal_ensemble(&[], 0.1).is_err());
    }

    #[test]
    fn ensembler_outlier_bound() {
        let mut e = TemporalEnsembler::new(0.1);
        let c = chunk_of(&[1.0; 5]);
        for _ in 0..8 {
            assert_eq!(e.push(c.clone()).unwrap(), vec![1.0]);
        }
        assert_eq!(e.len(), 5);
        let out = e.push(chunk_of(&[101.0; 5])).unwrap()[0];
        let wsum: f64 = (0..5).map(|a| (-0.1 * a as f64).exp()).sum();
        assert!((out - 1.0).abs() <= 100.0 / wsum + 1e-12);
    }
}
