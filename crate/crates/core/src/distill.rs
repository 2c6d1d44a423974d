//! Distillation of tabulated oracle fields into a network.
//!
//! The hidden layers of a [`NetParams`] are held fixed and the affine readout
//! is solved by ridge-regularized least squares. Two kinds of rows can be
//! stacked into the same system:
//!
//! - value rows, `u(z, r, t) ≈ y` for a tabulated average field `y`;
//! - MeanFlow rows, `u + (t − r)(∂_z u·w + ∂_t u) ≈ f`, which is linear in the
//!   readout because the JVP of an affine map of fixed features is the same
//!   affine map of the feature JVP.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{input_row, Activation, Dual, Layer, NetParams, Real};
use crate::error::{check_len, Error, Result};
use crate::mixture::{GaussianMixture, ORACLE_STEPS};
use crate::objectives::{TimeSampler, TrainBatch};
use crate::par;
use crate::schedule::{trajectory_point, SamplePair, Schedule};

/// Network `[d+2, hidden, d]` with random hidden weights scaled per input
/// coordinate and a zero readout.
pub fn random_feature_net(
    seed: u64,
    d: usize,
    hidden: usize,
    input_scales: &[f64],
    bias_scale: f64,
) -> Result<NetParams> {
    check_len(d + 2, input_scales.len())?;
    let mut net = NetParams::init(seed, d, &[d + 2, hidden, d], Activation::Tanh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let first = &mut net.layers[0];
    for h in 0..hidden {
        for (i, &sc) in input_scales.iter().enumerate() {
            first.weights[h * (d + 2) + i] = rng.random_range(-sc..sc);
        }
        first.bias[h] = rng.random_range(-bias_scale..bias_scale);
    }
    let last = net.layers.last_mut().unwrap();
    last.weights.iter_mut().for_each(|w| *w = 0.0);
    last.bias.iter_mut().for_each(|b| *b = 0.0);
    Ok(net)
}

/// Output of every layer but the last, i.e. the readout's input features.
fn features<T: Real>(net: &NetParams, input: &[T]) -> Vec<T> {
    let mut h = input.to_vec();
    let hidden = net.layers.len() - 1;
    for layer in &net.layers[..hidden] {
        h = apply(layer, &h);
        h.iter_mut().for_each(|v| *v = activate(net.activation, *v));
    }
    h
}

fn apply<T: Real>(layer: &Layer, x: &[T]) -> Vec<T> {
    (0..layer.outputs)
        .map(|o| {
            layer.weights[o * layer.inputs..(o + 1) * layer.inputs]
                .iter()
                .zip(x)
                .fold(T::cst(layer.bias[o]), |acc, (&w, &xi)| acc + xi * w)
        })
        .collect()
}

fn activate<T: Real>(a: Activation, x: T) -> T {
    match a {
        Activation::Tanh => x.tanh(),
        Activation::Silu => x / ((-x).exp() + 1.0),
        Activation::Identity => x,
    }
}

/// One point of a MeanFlow residual row: at `(z, r, t)` the readout should
/// satisfy `u + (t − r)(∂_z u·tangent + ∂_t u) = field`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPoint {
    pub z: Vec<f64>,
    pub r: f64,
    pub t: f64,
    pub tangent: Vec<f64>,
    pub field: Vec<f64>,
}

/// Least-squares problem over the readout `[W | b]`.
#[derive(Debug, Default)]
pub struct ReadoutProblem {
    rows: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl ReadoutProblem {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds value rows `u(z, r, t) ≈ y` with weight `w`.
    pub fn add_values(
        &mut self,
        net: &NetParams,
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
        w: f64,
    ) -> Result<()> {
        check_len(inputs.len(), targets.len())?;
        let feats = par::map_indexed(inputs.len(), |i| features(net, &inputs[i]));
        for (mut f, y) in feats.into_iter().zip(targets) {
            check_len(net.output_dim(), y.len())?;
            f.push(1.0);
            self.rows.push(f.into_iter().map(|v| v * w).collect());
            self.targets.push(y.iter().map(|v| v * w).collect());
        }
        Ok(())
    }

    /// Adds MeanFlow residual rows with weight `w`.
    pub fn add_residuals(&mut self, net: &NetParams, points: &[ResidualPoint], w: f64) -> Result<()> {
        let feats = par::map_indexed(points.len(), |i| {
            let p = &points[i];
            let mut input: Vec<Dual> = p
                .z
                .iter()
                .zip(&p.tangent)
                .map(|(&v, &e)| Dual::new(v, e))
                .collect();
            input.push(Dual::constant(p.r));
            input.push(Dual::new(p.t, 1.0));
            let gap = p.t - p.r;
            let mut row: Vec<f64> = features(net, &input)
                .iter()
                .map(|f| f.re + gap * f.eps)
                .collect();
            row.push(1.0);
            row
        });
        for (row, p) in feats.into_iter().zip(points) {
            check_len(net.output_dim(), p.field.len())?;
            self.rows.push(row.into_iter().map(|v| v * w).collect());
            self.targets.push(p.field.iter().map(|v| v * w).collect());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Solves for the readout with Tikhonov damping `ridge` (relative to the
    /// largest singular value) and writes it into `net`. Returns the
    /// root-mean-square residual over all rows.
    pub fn solve_into(&self, net: &mut NetParams, ridge: f64) -> Result<f64> {
        if self.rows.is_empty() {
            return Err(Error::Precondition("no distillation rows".into()));
        }
        let cols = self.rows[0].len();
        let outs = net.output_dim();
        let last = net.layers.last().unwrap();
        check_len(last.inputs + 1, cols)?;
        let a = DMatrix::from_fn(self.rows.len(), cols, |i, j| self.rows[i][j]);
        let b = DMatrix::from_fn(self.rows.len(), outs, |i, j| self.targets[i][j]);
        let svd = a.clone().svd(true, true);
        let (u, vt) = (
            svd.u.as_ref().ok_or_else(|| Error::Precondition("SVD failed".into()))?,
            svd.v_t.as_ref().ok_or_else(|| Error::Precondition("SVD failed".into()))?,
        );
        let smax = svd.singular_values.max();
        let lambda = (ridge * smax).powi(2);
        let damp = DVector::from_iterator(
            svd.singular_values.len(),
            svd.singular_values.iter().map(|&s| s / (s * s + lambda)),
        );
        let utb = u.transpose() * &b;
        let scaled = DMatrix::from_fn(utb.nrows(), outs, |i, j| utb[(i, j)] * damp[i]);
        let x = vt.transpose() * scaled;
        let last = net.layers.last_mut().unwrap();
        for o in 0..outs {
            for h in 0..last.inputs {
                last.weights[o * last.inputs + h] = x[(h, o)];
            }
            last.bias[o] = x[(last.inputs, o)];
        }
        let resid = a * x - b;
        Ok((resid.norm_squared() / self.rows.len() as f64).sqrt())
    }
}

/// Convenience wrapper: fits the readout so `u(z, r, t) ≈ y` on the table.
pub fn fit_readout(
    net: &mut NetParams,
    z: &[Vec<f64>],
    r: &[f64],
    t: &[f64],
    y: &[Vec<f64>],
    ridge: f64,
) -> Result<f64> {
    check_len(z.len(), r.len())?;
    check_len(z.len(), t.len())?;
    let inputs: Vec<Vec<f64>> = (0..z.len()).map(|i| input_row(&z[i], r[i], t[i])).collect();
    let mut prob = ReadoutProblem::new();
    prob.add_values(net, &inputs, y, 1.0)?;
    prob.solve_into(net, ridge)
}

/// Settings for [`distill_average_fields`].
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub hidden: usize,
    pub points: usize,
    pub input_scale: f64,
    pub ridge: f64,
    pub residual_weight: f64,
    pub oracle_steps: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            hidden: 600,
            points: 2500,
            input_scale: 0.5,
            ridge: 1e-13,
            residual_weight: 1.0,
            oracle_steps: ORACLE_STEPS / 2,
            seed: 0,
        }
    }
}

/// Velocity and acceleration networks fitted to tabulated average fields.
#[derive(Debug, Clone)]
pub struct Distilled {
    pub velocity: NetParams,
    pub acceleration: NetParams,
    pub fit_rms: [f64; 2],
}

/// Points `z_t = α_t x + β_t ε` with `(r, t)` from a [`TimeSampler`] that
/// never collapses, carrying the marginal instantaneous fields.
pub fn sample_marginal_batch<R: Rng + ?Sized>(
    mix: &GaussianMixture,
    s: Schedule,
    n: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    let sampler = TimeSampler::new(0.0)?;
    let (mut z, mut r, mut t) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let (ri, ti) = sampler.sample(rng);
        let pair = SamplePair::new(mix.sample_data(rng), mix.sample_noise(rng))?;
        z.push(trajectory_point(&pair, s, ti)?);
        r.push(ri);
        t.push(ti);
    }
    TrainBatch::marginal(mix, s, z, r, t)
}

/// Tabulates the oracle `v̄` and `ā` on random points and fits one network
/// to each. Both networks see value rows and MeanFlow residual rows whose
/// tangent is the marginal velocity.
pub fn distill_average_fields(
    mix: &GaussianMixture,
    s: Schedule,
    cfg: &DistillConfig,
) -> Result<Distilled> {
    if cfg.hidden == 0 || cfg.points == 0 {
        return Err(Error::param("hidden", "width and point count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = sample_marginal_batch(mix, s, cfg.points, &mut rng)?;
    let steps = cfg.oracle_steps.max(2) & !1;
    let avg: Vec<_> = par::map_indexed(batch.len(), |i| {
        if batch.t[i] == batch.r[i] {
            return mix.fields(s, &batch.z[i], batch.t[i]);
        }
        mix.average_fields(s, &batch.z[i], batch.t[i], batch.r[i], steps)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let inputs: Vec<Vec<f64>> = (0..batch.len())
        .map(|i| input_row(&batch.z[i], batch.r[i], batch.t[i]))
        .collect();
    let d = mix.dim();
    let sc = cfg.input_scale;
    let mut scales = vec![sc; d];
    scales.extend([1.5 * sc, 1.5 * sc]);
    let fit = |k: u64, table: Vec<Vec<f64>>, field: &[Vec<f64>]| -> Result<(NetParams, f64)> {
        let mut net = random_feature_net(cfg.seed.wrapping_add(k), d, cfg.hidden, &scales, sc)?;
        let mut prob = ReadoutProblem::new();
        prob.add_values(&net, &inputs, &table, 1.0)?;
        if cfg.residual_weight > 0.0 {
            let points: Vec<ResidualPoint> = (0..batch.len())
                .map(|i| ResidualPoint {
                    z: batch.z[i].clone(),
                    r: batch.r[i],
                    t: batch.t[i],
                    tangent: batch.v[i].clone(),
                    field: field[i].clone(),
                })
                .collect();
            prob.add_residuals(&net, &points, cfg.residual_weight)?;
        }
        let rms = prob.solve_into(&mut net, cfg.ridge)?;
        Ok((net, rms))
    };
    let (velocity, rv) = fit(1, avg.iter().map(|f| f.v.clone()).collect(), &batch.v)?;
    let (acceleration, ra) = fit(2, avg.iter().map(|f| f.a.clone()).collect(), &batch.a)?;
    Ok(Distilled {
        velocity,
        acceleration,
        fit_rms: [rv, ra],
    })
}
