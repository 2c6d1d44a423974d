//! Training objectives: conditional flow matching (first and second order)
//! and first/second-order MeanFlow.
//!
//! MeanFlow targets are built from one forward-mode pass through the network
//! and then frozen, so the reverse pass only sees `‖u − const‖²`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{input_row, NetParams};
use crate::error::{check_len, Error, Result};
use crate::mixture::GaussianMixture;
use crate::par;
use crate::schedule::Schedule;

/// Draws `(r, t)` for MeanFlow training: both uniform on `[0, 1]`, swapped
/// into order, with a fraction of pairs collapsed to `r = t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSampler {
    pub equal_fraction: f64,
}

impl Default for TimeSampler {
    fn default() -> Self {
        Self { equal_fraction: 0.25 }
    }
}

impl TimeSampler {
    pub fn new(equal_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&equal_fraction) {
            return Err(Error::param("r_equals_t_fraction", "must lie in [0, 1]"));
        }
        Ok(Self { equal_fraction })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        let (r, t) = if a <= b { (a, b) } else { (b, a) };
        let collapse: f64 = rng.random();
        if collapse < self.equal_fraction {
            (t, t)
        } else {
            (r, t)
        }
    }
}

/// Which `z`-direction the second-order target's JVP uses.
///
/// Differentiating `ā` along the sampling path moves `z` with the velocity,
/// so [`Velocity`](Self::Velocity) is the chain-rule form. The
/// [`Acceleration`](Self::Acceleration) variant pushes the acceleration
/// through `∂_z u₂` instead and is kept for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TangentVariant {
    #[default]
    Velocity,
    Acceleration,
}

/// A batch of points with the velocity and acceleration used to build
/// targets. Training batches carry per-sample (conditional) fields; oracle
/// checks can carry marginal fields instead.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub z: Vec<Vec<f64>>,
    pub r: Vec<f64>,
    pub t: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
}

impl TrainBatch {
    /// Samples `x ~ data`, `ε ~ noise` and times. Without a time sampler
    /// `r = t` with `t ~ U[0, 1]`.
    pub fn conditional<R: Rng + ?Sized>(
        mix: &GaussianMixture,
        s: Schedule,
        size: usize,
        rng: &mut R,
        times: Option<&TimeSampler>,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        let mut b = TrainBatch {
            z: Vec::with_capacity(size),
            r: Vec::with_capacity(size),
            t: Vec::with_capacity(size),
            v: Vec::with_capacity(size),
            a: Vec::with_capacity(size),
        };
        for _ in 0..size {
            let x = mix.sample_data(rng);
            let eps = mix.sample_noise(rng);
            let (r, t) = match times {
                Some(ts) => ts.sample(rng),
                None => {
                    let t: f64 = rng.random();
                    (t, t)
                }
            };
            let c = s.coefficients(t);
            let comb = |p: f64, q: f64| -> Vec<f64> {
                x.iter().zip(&eps).map(|(&xi, &ei)| p * xi + q * ei).collect()
            };
            b.z.push(comb(c.alpha, c.beta));
            b.v.push(comb(c.d_alpha, c.d_beta));
            b.a.push(comb(c.dd_alpha, c.dd_beta));
            b.r.push(r);
            b.t.push(t);
        }
        Ok(b)
    }

    /// Batch at given `(z, r, t)` carrying the marginal oracle fields.
    pub fn marginal(
        mix: &GaussianMixture,
        s: Schedule,
        z: Vec<Vec<f64>>,
        r: Vec<f64>,
        t: Vec<f64>,
    ) -> Result<Self> {
        check_len(z.len(), r.len())?;
        check_len(z.len(), t.len())?;
        let fields: Vec<_> = par::map_indexed(z.len(), |i| mix.fields(s, &z[i], t[i]))
            .into_iter()
            .collect::<Result<_>>()?;
        let (v, a) = fields.into_iter().map(|f| (f.v, f.a)).unzip();
        Ok(Self { z, r, t, v, a })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Copy with every `r` set to its `t`.
    pub fn collapsed(&self) -> Self {
        let mut b = self.clone();
        b.r = b.t.clone();
        b
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        let pick = |v: &Vec<Vec<f64>>| order.iter().map(|&i| v[i].clone()).collect();
        TrainBatch {
            z: pick(&self.z),
            r: order.iter().map(|&i| self.r[i]).collect(),
            t: order.iter().map(|&i| self.t[i]).collect(),
            v: pick(&self.v),
            a: pick(&self.a),
        }
    }

    fn rows(&self, use_r: bool) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                let r = if use_r { self.r[i] } else { self.t[i] };
                input_row(&self.z[i], r, self.t[i])
            })
            .collect()
    }

    fn mean_gap(&self) -> f64 {
        self.r.iter().zip(&self.t).map(|(r, t)| (t - r).abs()).sum::<f64>() / self.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub velocity_term: f64,
    pub acceleration_term: f64,
    pub batch_size: usize,
    pub mean_gap: f64,
}

/// Loss value plus gradients for the velocity network and, for two-network
/// objectives, the acceleration network.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub report: LossReport,
    pub grad_velocity: Vec<f64>,
    pub grad_acceleration: Option<Vec<f64>>,
}

/// `v_t − (t − r)·du`, the frozen MeanFlow regression target.
pub fn meanflow_target(v: &[f64], du: &[f64], t: f64, r: f64) -> Vec<f64> {
    v.iter().zip(du).map(|(&vi, &di)| vi - (t - r) * di).collect()
}

/// Targets `field − (t − r)·(∂_z u·tangent + ∂_t u)` for every batch element.
fn meanflow_targets(
    net: &NetParams,
    batch: &TrainBatch,
    field: &[Vec<f64>],
    tangent: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    par::map_indexed(batch.len(), |i| {
        let (_, du) = net.jvp(&batch.z[i], batch.r[i], batch.t[i], &tangent[i], 0.0, 1.0)?;
        Ok(meanflow_target(&field[i], &du, batch.t[i], batch.r[i]))
    })
    .into_iter()
    .collect()
}

fn check_batch(batch: &TrainBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    Ok(())
}

fn report(batch: &TrainBatch, velocity_term: f64, acceleration_term: f64) -> LossReport {
    LossReport {
        loss: velocity_term + acceleration_term,
        velocity_term,
        acceleration_term,
        batch_size: batch.len(),
        mean_gap: batch.mean_gap(),
    }
}

/// Conditional first-order flow matching: `‖u(z_t, t, t) − v_t‖²`.
pub fn cfm_loss(net: &NetParams, batch: &TrainBatch) -> Result<LossOutput> {
    check_batch(batch)?;
    let (loss, grad) = net.loss_and_grad(&batch.rows(false), &batch.v)?;
    Ok(LossOutput {
        report: report(batch, loss, 0.0),
        grad_velocity: grad,
        grad_acceleration: None,
    })
}

/// Conditional second-order flow matching: velocity and acceleration terms.
pub fn cso_loss(net_v: &NetParams, net_a: &NetParams, batch: &TrainBatch) -> Result<LossOutput> {
    check_batch(batch)?;
    let rows = batch.rows(false);
    let (lv, gv) = net_v.loss_and_grad(&rows, &batch.v)?;
    let (la, ga) = net_a.loss_and_grad(&rows, &batch.a)?;
    Ok(LossOutput {
        report: report(batch, lv, la),
        grad_velocity: gv,
        grad_acceleration: Some(ga),
    })
}

/// First-order MeanFlow: `‖u(z_t, r, t) − sg(v_t − (t−r)(v_t·∂_z u + ∂_t u))‖²`.
pub fn meanflow_loss(net: &NetParams, batch: &TrainBatch) -> Result<LossOutput> {
    check_batch(batch)?;
    let targets = meanflow_targets(net, batch, &batch.v, &batch.v)?;
    let (loss, grad) = net.loss_and_grad(&batch.rows(true), &targets)?;
    Ok(LossOutput {
        report: report(batch, loss, 0.0),
        grad_velocity: grad,
        grad_acceleration: None,
    })
}

/// Second-order MeanFlow: the first-order term plus
/// `‖u₂(z_t, r, t) − sg(a_t − (t−r)(w·∂_z u₂ + ∂_t u₂))‖²`, where `w` is
/// chosen by `variant`.
pub fn second_order_meanflow_loss(
    net_v: &NetParams,
    net_a: &NetParams,
    batch: &TrainBatch,
    variant: TangentVariant,
) -> Result<LossOutput> {
    check_batch(batch)?;
    let rows = batch.rows(true);
    let tv = meanflow_targets(net_v, batch, &batch.v, &batch.v)?;
    let tangent = match variant {
        TangentVariant::Velocity => &batch.v,
        TangentVariant::Acceleration => &batch.a,
    };
    let ta = meanflow_targets(net_a, batch, &batch.a, tangent)?;
    let (lv, gv) = net_v.loss_and_grad(&rows, &tv)?;
    let (la, ga) = net_a.loss_and_grad(&rows, &ta)?;
    Ok(LossOutput {
        report: report(batch, lv, la),
        grad_velocity: gv,
        grad_acceleration: Some(ga),
    })
}
