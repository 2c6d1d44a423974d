//! Time-conditioned MLP `u(z, r, t)` with input `[z, r, t]`.
//!
//! The forward pass is generic over [`Real`], so the JVP is the same code run
//! on dual numbers. Parameter gradients come from a hand-written reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dual::{Dual, Real};
use crate::error::{check_len, Error, Result};
use crate::par;

/// Batch rows per gradient-accumulation chunk. Fixed so reductions happen in
/// the same order whatever the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / ((-x).exp() + 1.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let th = x.tanh();
                1.0 - th * th
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }

    /// Upper bound on `|σ′|`.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Tanh | Activation::Identity => 1.0,
            Activation::Silu => 1.1,
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored row-major (`outputs × inputs`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn apply<T: Real>(&self, x: &[T]) -> Vec<T> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                row.iter()
                    .zip(x)
                    .fold(T::cst(self.bias[o]), |acc, (&w, &xi)| acc + xi * w)
            })
            .collect()
    }

    fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub layers: Vec<Layer>,
}

/// Network input row `[z, r, t]`.
pub fn input_row(z: &[f64], r: f64, t: f64) -> Vec<f64> {
    let mut row = Vec::with_capacity(z.len() + 2);
    row.extend_from_slice(z);
    row.push(r);
    row.push(t);
    row
}

impl NetParams {
    /// Fan-in scaled uniform initialization. `widths` runs from the input
    /// width `d + 2` to the output width `d`.
    pub fn init(seed: u64, d: usize, widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::param("widths", "need at least input and output widths"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::param("widths", "zero width"));
        }
        if widths[0] != d + 2 {
            return Err(Error::param(
                "widths",
                format!("input width must be d + 2 = {}, got {}", d + 2, widths[0]),
            ));
        }
        if *widths.last().unwrap() != d {
            return Err(Error::param("widths", format!("output width must be d = {d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    inputs: w[0],
                    outputs: w[1],
                    weights: (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect(),
                    bias: (0..w[1]).map(|_| rng.random_range(-bound..bound)).collect(),
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            seed,
            layers,
        })
    }

    /// Same shape as `self` with every weight and bias set to zero.
    pub fn zeroed(&self) -> Self {
        let mut p = self.clone();
        p.layers.iter_mut().for_each(|l| {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        });
        p
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len(self.num_params(), flat.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Checks widths against the stored layers, e.g. after deserializing.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() + 1 != self.widths.len() {
            return Err(Error::param("layers", "layer count does not match widths"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs != self.widths[i]
                || l.outputs != self.widths[i + 1]
                || l.weights.len() != l.inputs * l.outputs
                || l.bias.len() != l.outputs
            {
                return Err(Error::param("layers", format!("layer {i} has inconsistent shape")));
            }
        }
        Ok(())
    }

    pub fn forward_generic<T: Real>(&self, input: &[T]) -> Vec<T> {
        let last = self.layers.len() - 1;
        let mut h = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        h
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        check_len(self.input_dim() - 2, z.len())
    }

    pub fn forward(&self, z: &[f64], r: f64, t: f64) -> Result<Vec<f64>> {
        self.check_input(z)?;
        Ok(self.forward_generic(&input_row(z, r, t)))
    }

    pub fn forward_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        for row in rows {
            check_len(self.input_dim(), row.len())?;
        }
        Ok(par::map_indexed(rows.len(), |i| self.forward_generic(&rows[i])))
    }

    /// Output and directional derivative along `(tz, tr, tt)` in one dual pass.
    #[allow(clippy::too_many_arguments)]
    pub fn jvp(
        &self,
        z: &[f64],
        r: f64,
        t: f64,
        tz: &[f64],
        tr: f64,
        tt: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(z)?;
        check_len(z.len(), tz.len())?;
        let mut input: Vec<Dual> = z.iter().zip(tz).map(|(&v, &e)| Dual::new(v, e)).collect();
        input.push(Dual::new(r, tr));
        input.push(Dual::new(t, tt));
        let out = self.forward_generic(&input);
        Ok((out.iter().map(|d| d.re).collect(), out.iter().map(|d| d.eps).collect()))
    }

    /// Product of layer Frobenius norms and the activation slope bound: a
    /// Lipschitz constant of the whole network in the input.
    pub fn lipschitz_bound(&self) -> f64 {
        let hidden = self.layers.len().saturating_sub(1) as i32;
        let norms: f64 = self
            .layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>().sqrt())
            .product();
        norms * self.activation.lipschitz().powi(hidden)
    }

    /// `mean_b ‖u(row_b) − target_b‖²` and its gradient in flat parameter
    /// layout. Targets are constants: no gradient flows into them.
    pub fn loss_and_grad(&self, rows: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        if rows.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        check_len(rows.len(), targets.len())?;
        for (row, tg) in rows.iter().zip(targets) {
            check_len(self.input_dim(), row.len())?;
            check_len(self.output_dim(), tg.len())?;
        }
        let chunks = rows.len().div_ceil(GRAD_CHUNK);
        let partial = par::map_indexed(chunks, |c| {
            let lo = c * GRAD_CHUNK;
            let hi = (lo + GRAD_CHUNK).min(rows.len());
            let mut grad = vec![0.0; self.num_params()];
            let mut loss = 0.0;
            for b in lo..hi {
                loss += self.backward_one(&rows[b], &targets[b], &mut grad);
            }
            (loss, grad)
        });
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.num_params()];
        for (l, g) in partial {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / rows.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        loss *= scale;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step: 0,
                reason: "non-finite residual in backprop".into(),
            });
        }
        Ok((loss, grad))
    }

    /// Accumulates the gradient of `‖u(row) − target‖²` into `grad`.
    fn backward_one(&self, row: &[f64], target: &[f64], grad: &mut [f64]) -> f64 {
        let last = self.layers.len() - 1;
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(row.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&acts[i]);
            let a = if i < last {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(a);
        }
        let out = &acts[self.layers.len()];
        let mut delta: Vec<f64> = out.iter().zip(target).map(|(u, y)| 2.0 * (u - y)).collect();
        let loss: f64 = out.iter().zip(target).map(|(u, y)| (u - y) * (u - y)).sum();

        let offsets = self.layer_offsets();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i < last {
                for (dv, &zv) in delta.iter_mut().zip(&pre[i]) {
                    *dv *= self.activation.derivative(zv);
                }
            }
            let off = offsets[i];
            let input = &acts[i];
            for o in 0..layer.outputs {
                let g = delta[o];
                let wrow = &mut grad[off + o * layer.inputs..off + (o + 1) * layer.inputs];
                for (gw, &x) in wrow.iter_mut().zip(input) {
                    *gw += g * x;
                }
                grad[off + layer.weights.len() + o] += g;
            }
            if i > 0 {
                let mut next = vec![0.0; layer.inputs];
                for o in 0..layer.outputs {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (n, &w) in next.iter_mut().zip(row) {
                        *n += w * delta[o];
                    }
                }
                delta = next;
            }
        }
        loss
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            offs.push(acc);
            acc += l.len();
        }
        offs
    }
}
