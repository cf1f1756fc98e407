//! Minimal dense layers over a flat parameter vector, with hand-written
//! backpropagation and an Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Affine layer `y = W x + b` whose weights live at `offset` in a shared
/// parameter vector: `out * inp` row-major weights followed by `out` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub offset: usize,
}

impl Linear {
    pub fn param_count(&self) -> usize {
        self.inp * self.out + self.out
    }

    pub fn end(&self) -> usize {
        self.offset + self.param_count()
    }

    pub fn forward(&self, params: &[f64], x: &[f64], y: &mut [f64]) {
        let w = &params[self.offset..self.offset + self.inp * self.out];
        let b = &params[self.offset + self.inp * self.out..self.end()];
        for o in 0..self.out {
            let row = &w[o * self.inp..(o + 1) * self.inp];
            y[o] = b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grad` and, when given, writes
    /// (not accumulates) the input gradient into `dx`.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        dy: &[f64],
        grad: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        let wlen = self.inp * self.out;
        {
            let (gw, gb) = grad[self.offset..self.end()].split_at_mut(wlen);
            for o in 0..self.out {
                let d = dy[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, xi) in gw[o * self.inp..(o + 1) * self.inp].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        if let Some(dx) = dx {
            let w = &params[self.offset..self.offset + wlen];
            dx.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..self.out {
                let d = dy[o];
                if d == 0.0 {
                    continue;
                }
                for (v, wi) in dx.iter_mut().zip(&w[o * self.inp..(o + 1) * self.inp]) {
                    *v += d * wi;
                }
            }
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let limit = (6.0 / (self.inp + self.out) as f64).sqrt();
        for w in &mut params[self.offset..self.offset + self.inp * self.out] {
            *w = rng.random_range(-limit..limit);
        }
        for b in &mut params[self.offset + self.inp * self.out..self.end()] {
            *b = 0.0;
        }
    }
}

/// Lays out consecutive layers in one parameter vector.
#[derive(Default)]
pub struct ParamLayout {
    next: usize,
}

impl ParamLayout {
    pub fn linear(&mut self, inp: usize, out: usize) -> Linear {
        let l = Linear { inp, out, offset: self.next };
        self.next = l.end();
        l
    }

    /// Reserves a raw block of `len` parameters, returning its offset.
    pub fn block(&mut self, len: usize) -> usize {
        let at = self.next;
        self.next += len;
        at
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

/// Tanh-hidden multilayer perceptron with a linear last layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations recorded by [`Mlp::forward`]: `acts[0]` is the input, `acts[k]` the
/// output of layer `k - 1` after its nonlinearity (the last entry is linear).
pub struct MlpTrace {
    pub acts: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

impl Mlp {
    pub fn new(layout: &mut ParamLayout, sizes: &[usize]) -> Self {
        let layers = sizes.windows(2).map(|w| layout.linear(w[0], w[1])).collect();
        Self { layers }
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        for l in &self.layers {
            l.init(params, rng);
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out)
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> MlpTrace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; l.out];
            l.forward(params, &acts[k], &mut y);
            if k < last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
        }
        MlpTrace { acts }
    }

    /// Backpropagates `dout` (gradient w.r.t. the linear output), accumulating
    /// parameter gradients and returning the gradient w.r.t. the input.
    pub fn backward(&self, params: &[f64], trace: &MlpTrace, dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut delta = dout.to_vec();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let mut dx = vec![0.0; l.inp];
            l.backward(params, &trace.acts[k], &delta, grad, Some(&mut dx));
            if k > 0 {
                // through tanh of the previous layer
                for (d, a) in dx.iter_mut().zip(&trace.acts[k]) {
                    *d *= 1.0 - a * a;
                }
            }
            delta = dx;
        }
        delta
    }
}

impl Mlp {
    /// Gradient of the scalar `dout · output` w.r.t. the input only.
    pub fn input_gradient(&self, params: &[f64], trace: &MlpTrace, dout: &[f64]) -> Vec<f64> {
        let mut delta = dout.to_vec();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let w = &params[l.offset..l.offset + l.inp * l.out];
            let mut dx = vec![0.0; l.inp];
            for (o, d) in delta.iter().enumerate() {
                for (v, wi) in dx.iter_mut().zip(&w[o * l.inp..(o + 1) * l.inp]) {
                    *v += d * wi;
                }
            }
            if k > 0 {
                for (d, a) in dx.iter_mut().zip(&trace.acts[k]) {
                    *d *= 1.0 - a * a;
                }
            }
            delta = dx;
        }
        delta
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step_with_lr(params, grad, self.lr);
    }

    pub fn step_with_lr(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
