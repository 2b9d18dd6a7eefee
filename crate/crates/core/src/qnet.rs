//! Feedforward action-value network.
//!
//! Parameters are kept in one flat vector: for each layer the `out × in`
//! weight matrix (row-major) followed by the `out` biases. Hidden layers use
//! a rectifier, the output layer is linear and has width 1.
//!
//! Checkpoint layout (little-endian):
//!
//! | field    | type           |
//! |----------|----------------|
//! | magic    | `b"MSQN"`      |
//! | version  | u16 = 1        |
//! | n_layers | u32            |
//! | dims     | u32 × (n+1)    |
//! | per layer: weights row-major then biases | f64 ... |

use std::io::{self, Read, Write};

use rand::Rng;

use crate::error::{validation, Error, Result};
use crate::features::argmax;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MSQN";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Hidden widths used by the agent.
pub const HIDDEN: [usize; 2] = [128, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    weights: usize,
    biases: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    dims: Vec<usize>,
    shapes: Vec<LayerShape>,
    params: Vec<f64>,
}

fn shapes_for(dims: &[usize]) -> Result<(Vec<LayerShape>, usize)> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(validation(format!("invalid layer dims {dims:?}")));
    }
    if *dims.last().unwrap() != 1 {
        return Err(validation("output layer must have width 1"));
    }
    let mut offset = 0;
    let shapes = dims
        .windows(2)
        .map(|w| {
            let s = LayerShape {
                inputs: w[0],
                outputs: w[1],
                weights: offset,
                biases: offset + w[0] * w[1],
            };
            offset = s.biases + w[1];
            s
        })
        .collect();
    Ok((shapes, offset))
}

/// Per-example activations kept for the backward pass.
struct Trace {
    /// Input followed by each layer's post-activation output.
    acts: Vec<Vec<f64>>,
}

impl QNetwork {
    /// All parameters zero.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let (shapes, n) = shapes_for(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            shapes,
            params: vec![0.0; n],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        for s in net.shapes.clone() {
            let limit = (6.0 / (s.inputs + s.outputs) as f64).sqrt();
            for w in &mut net.params[s.weights..s.biases] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    /// The default topology for `input` features.
    pub fn standard(input: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend(HIDDEN);
        dims.push(1);
        Self::new(&dims, rng)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(validation(format!(
                "feature length {} does not match network input {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn layer(&self, s: &LayerShape, x: &[f64], out: &mut Vec<f64>, relu: bool) {
        out.clear();
        let w = &self.params[s.weights..s.biases];
        let b = &self.params[s.biases..s.biases + s.outputs];
        for (row, &bias) in w.chunks_exact(s.inputs).zip(b) {
            let z = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            out.push(if relu { z.max(0.0) } else { z });
        }
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.shapes.len() + 1);
        acts.push(x.to_vec());
        let last = self.shapes.len() - 1;
        for (l, s) in self.shapes.iter().enumerate() {
            let mut out = Vec::with_capacity(s.outputs);
            self.layer(s, &acts[l], &mut out, l < last);
            acts.push(out);
        }
        Trace { acts }
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        let mut b = Vec::new();
        let last = self.shapes.len() - 1;
        for (l, s) in self.shapes.iter().enumerate() {
            self.layer(s, &a, &mut b, l < last);
            std::mem::swap(&mut a, &mut b);
        }
        Ok(a[0])
    }

    /// One Q-value per row of `xs` (row-major, `input_dim` columns).
    pub fn forward_batch(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if !xs.len().is_multiple_of(d) {
            return Err(validation(
                "batch length is not a multiple of the input size",
            ));
        }
        xs.chunks_exact(d).map(|x| self.forward(x)).collect()
    }

    /// Which hidden units are active for each input, for finite-difference checks.
    pub fn relu_pattern(&self, xs: &[f64]) -> Vec<bool> {
        let d = self.input_dim();
        let last = self.shapes.len() - 1;
        let mut out = Vec::new();
        for x in xs.chunks_exact(d) {
            let t = self.trace(x);
            for acts in &t.acts[1..=last] {
                out.extend(acts.iter().map(|&a| a > 0.0));
            }
        }
        out
    }

    /// Weighted MSE `mean_i w_i (y_i − Q(x_i))²`, its gradient, and the TD
    /// errors `y_i − Q(x_i)`.
    pub fn loss_and_gradient(
        &self,
        xs: &[f64],
        targets: &[f64],
        weights: &[f64],
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let d = self.input_dim();
        let n = targets.len();
        if n == 0 || xs.len() != n * d || weights.len() != n {
            return Err(validation("inconsistent batch shapes"));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut td = Vec::with_capacity(n);
        let mut loss = 0.0;
        let last = self.shapes.len() - 1;
        let mut delta = Vec::new();
        let mut prev = Vec::new();
        for ((x, &y), &w) in xs.chunks_exact(d).zip(targets).zip(weights) {
            let t = self.trace(x);
            let q = t.acts[last + 1][0];
            let err = y - q;
            td.push(err);
            loss += w * err * err;
            delta.clear();
            delta.push(-2.0 * w * err / n as f64);
            for l in (0..=last).rev() {
                let s = &self.shapes[l];
                let input = &t.acts[l];
                let gw = &mut grad[s.weights..s.biases + s.outputs];
                let (gw, gb) = gw.split_at_mut(s.inputs * s.outputs);
                for ((row, g), &dj) in gw.chunks_exact_mut(s.inputs).zip(gb.iter_mut()).zip(&delta)
                {
                    *g += dj;
                    if dj != 0.0 {
                        for (r, &a) in row.iter_mut().zip(input) {
                            *r += dj * a;
                        }
                    }
                }
                if l == 0 {
                    break;
                }
                prev.clear();
                prev.resize(s.inputs, 0.0);
                let wts = &self.params[s.weights..s.biases];
                for (row, &dj) in wts.chunks_exact(s.inputs).zip(&delta) {
                    if dj != 0.0 {
                        for (p, &wv) in prev.iter_mut().zip(row) {
                            *p += dj * wv;
                        }
                    }
                }
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                std::mem::swap(&mut delta, &mut prev);
            }
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss} over batch of {n}; max |target| {:.3e}, max |param| {:.3e}",
                targets.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                self.params.iter().fold(0.0f64, |m, v| m.max(v.abs()))
            )));
        }
        Ok((loss, grad, td))
    }

    /// `θ_target ← (1−β) θ_target + β θ_local`.
    pub fn soft_update_from(&mut self, local: &QNetwork, beta: f64) -> Result<()> {
        if self.dims != local.dims {
            return Err(validation("soft update between different topologies"));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(validation(format!(
                "soft update rate {beta} outside [0, 1]"
            )));
        }
        for (t, &l) in self.params.iter_mut().zip(&local.params) {
            *t = (1.0 - beta) * *t + beta * l;
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, mut sink: impl Write) -> io::Result<()> {
        sink.write_all(&CHECKPOINT_MAGIC)?;
        sink.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        sink.write_all(&(self.shapes.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            sink.write_all(&(d as u32).to_le_bytes())?;
        }
        for p in &self.params {
            sink.write_all(&p.to_le_bytes())?;
        }
        sink.flush()
    }

    pub fn read_checkpoint(mut source: impl Read) -> Result<Self> {
        let mut buf4 = [0u8; 4];
        source.read_exact(&mut buf4)?;
        if buf4 != CHECKPOINT_MAGIC {
            return Err(validation("checkpoint has bad magic"));
        }
        let mut buf2 = [0u8; 2];
        source.read_exact(&mut buf2)?;
        let version = u16::from_le_bytes(buf2);
        if version != CHECKPOINT_VERSION {
            return Err(validation(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        source.read_exact(&mut buf4)?;
        let n_layers = u32::from_le_bytes(buf4) as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(validation(format!("implausible layer count {n_layers}")));
        }
        let mut dims = Vec::with_capacity(n_layers + 1);
        for _ in 0..=n_layers {
            source.read_exact(&mut buf4)?;
            dims.push(u32::from_le_bytes(buf4) as usize);
        }
        let mut net = Self::zeros(&dims)?;
        let mut buf8 = [0u8; 8];
        for p in &mut net.params {
            source.read_exact(&mut buf8)?;
            *p = f64::from_le_bytes(buf8);
        }
        if source.read(&mut buf8)? != 0 {
            return Err(validation("trailing bytes after checkpoint"));
        }
        Ok(net)
    }
}

/// RMSProp with L2 weight decay folded into the gradient and per-component
/// value clipping applied afterwards.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    sq: Vec<f64>,
}

impl RmsProp {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64, clip: f64) -> Self {
        Self {
            lr,
            rho: 0.99,
            eps: 1e-8,
            weight_decay,
            clip,
            sq: vec![0.0; n_params],
        }
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.sq
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.sq.len() || grad.len() != self.sq.len() {
            return Err(validation("optimizer state does not match parameter count"));
        }
        for ((p, &g), s) in params.iter_mut().zip(grad).zip(&mut self.sq) {
            let g = (g + self.weight_decay * *p).clamp(-self.clip, self.clip);
            *s = self.rho * *s + (1.0 - self.rho) * g * g;
            *p -= self.lr * g / (s.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Loss and TD errors of one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub loss: f64,
    pub td_errors: Vec<f64>,
}

/// One weighted-MSE step of `local` towards fixed `targets`.
pub fn train_batch(
    local: &mut QNetwork,
    opt: &mut RmsProp,
    xs: &[f64],
    targets: &[f64],
    weights: &[f64],
) -> Result<TrainStats> {
    let (loss, grad, td_errors) = local.loss_and_gradient(xs, targets, weights)?;
    opt.step(local.params_mut(), &grad)?;
    Ok(TrainStats { loss, td_errors })
}

/// `reward_n + γ · next_q_max`; the bootstrap term is skipped when `γ = 0`.
pub fn td_target(
    reward_n: f64,
    gamma: f64,
    next_q_max: impl FnOnce() -> Result<f64>,
) -> Result<f64> {
    if gamma == 0.0 {
        return Ok(reward_n);
    }
    Ok(reward_n + gamma * next_q_max()?)
}

/// Target-network value of the candidate the local network ranks highest.
pub fn double_q_value(local: &QNetwork, target: &QNetwork, candidates: &[f64]) -> Result<f64> {
    let q = local.forward_batch(candidates)?;
    if q.is_empty() {
        return Err(validation("empty candidate set"));
    }
    let best = argmax(&q);
    let d = local.input_dim();
    target.forward(&candidates[best * d..(best + 1) * d])
}
