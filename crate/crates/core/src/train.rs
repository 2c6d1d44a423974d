//! Training loop with Adam, JSON checkpoints, and deterministic resume.
//!
//! Step `k` draws its batch from a ChaCha stream keyed by `(seed, k)`, so a
//! run resumed from a checkpoint at step `k` continues exactly as the
//! uninterrupted run would have.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, NetParams, OptState};
use crate::error::{Error, Result};
use crate::mixture::GaussianMixture;
use crate::objectives::{
    cfm_loss, cso_loss, meanflow_loss, second_order_meanflow_loss, LossOutput, LossReport,
    TangentVariant, TimeSampler, TrainBatch,
};
use crate::schedule::Schedule;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Conditional first-order flow matching, `r = t`.
    Cfm,
    /// Conditional second-order flow matching, `r = t`.
    Cso,
    MeanFlow,
    SecondOrderMeanFlow,
}

impl Objective {
    pub fn has_acceleration(self) -> bool {
        matches!(self, Objective::Cso | Objective::SecondOrderMeanFlow)
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfm" => Ok(Objective::Cfm),
            "cso" => Ok(Objective::Cso),
            "mean_flow" | "meanflow" => Ok(Objective::MeanFlow),
            "second_order_mean_flow" | "second_order_meanflow" => Ok(Objective::SecondOrderMeanFlow),
            _ => Err(Error::param("objective", format!("unknown objective `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub schedule: Schedule,
    /// Layer widths from `d + 2` to `d`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    /// When set, the rate follows a cosine from `learning_rate` down to this
    /// value at the last step.
    #[serde(default)]
    pub final_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub steps: u64,
    /// Fraction of MeanFlow pairs collapsed to `r = t`.
    pub r_equals_t_fraction: f64,
    #[serde(default)]
    pub tangent: TangentVariant,
    pub seed: u64,
}

impl TrainConfig {
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.final_learning_rate {
            None => self.learning_rate,
            Some(end) => {
                let frac = (step as f64 / self.steps.max(1) as f64).min(1.0);
                end + 0.5 * (self.learning_rate - end) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.widths.first() != Some(&(d + 2)) || self.widths.last() != Some(&d) {
            return Err(Error::param(
                "widths",
                format!("must start at {} and end at {d} for {d}-dimensional data", d + 2),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if let Some(f) = self.final_learning_rate {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::param("final_learning_rate", "must be non-negative"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        TimeSampler::new(self.r_equals_t_fraction)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub velocity_term: f64,
    pub acceleration_term: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub step: u64,
    pub velocity: NetParams,
    pub acceleration: Option<NetParams>,
    pub opt_velocity: OptState,
    pub opt_acceleration: Option<OptState>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.velocity.validate()?;
        if let Some(a) = &ck.acceleration {
            a.validate()?;
        }
        if ck.config.objective.has_acceleration() != ck.acceleration.is_some() {
            return Err(Error::Config("acceleration network does not match objective".into()));
        }
        Ok(ck)
    }

    pub fn dim(&self) -> usize {
        self.velocity.output_dim()
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    mixture: GaussianMixture,
    state: Checkpoint,
    times: TimeSampler,
}

impl Trainer {
    pub fn new(config: TrainConfig, mixture: GaussianMixture) -> Result<Self> {
        let d = mixture.dim();
        config.validate(d)?;
        let velocity = NetParams::init(config.seed, d, &config.widths, config.activation)?;
        let acceleration = if config.objective.has_acceleration() {
            Some(NetParams::init(
                config.seed.wrapping_add(1),
                d,
                &config.widths,
                config.activation,
            )?)
        } else {
            None
        };
        let opt_velocity = OptState::adam(velocity.num_params(), config.learning_rate);
        let opt_acceleration = acceleration
            .as_ref()
            .map(|a| OptState::adam(a.num_params(), config.learning_rate));
        let times = TimeSampler::new(config.r_equals_t_fraction)?;
        Ok(Self {
            mixture,
            times,
            state: Checkpoint {
                version: CHECKPOINT_VERSION,
                config,
                step: 0,
                velocity,
                acceleration,
                opt_velocity,
                opt_acceleration,
            },
        })
    }

    pub fn resume(checkpoint: Checkpoint, mixture: GaussianMixture) -> Result<Self> {
        checkpoint.config.validate(mixture.dim())?;
        if checkpoint.dim() != mixture.dim() {
            return Err(Error::Shape {
                expected: mixture.dim(),
                got: checkpoint.dim(),
            });
        }
        let times = TimeSampler::new(checkpoint.config.r_equals_t_fraction)?;
        Ok(Self {
            mixture,
            times,
            state: checkpoint,
        })
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    /// The batch used at step `k`.
    pub fn batch_at(&self, k: u64) -> Result<TrainBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.config.seed);
        rng.set_stream(k);
        let cfg = &self.state.config;
        let times = match cfg.objective {
            Objective::Cfm | Objective::Cso => None,
            _ => Some(&self.times),
        };
        TrainBatch::conditional(&self.mixture, cfg.schedule, cfg.batch_size, &mut rng, times)
    }

    /// Loss and gradients of the current parameters on `batch`.
    pub fn evaluate(&self, batch: &TrainBatch) -> Result<LossOutput> {
        let st = &self.state;
        let accel = || {
            st.acceleration
                .as_ref()
                .ok_or_else(|| Error::Config("objective needs an acceleration network".into()))
        };
        match st.config.objective {
            Objective::Cfm => cfm_loss(&st.velocity, batch),
            Objective::Cso => cso_loss(&st.velocity, accel()?, batch),
            Objective::MeanFlow => meanflow_loss(&st.velocity, batch),
            Objective::SecondOrderMeanFlow => {
                second_order_meanflow_loss(&st.velocity, accel()?, batch, st.config.tangent)
            }
        }
    }

    /// One optimizer step. Aborts with the step index on a non-finite loss.
    pub fn train_step(&mut self) -> Result<LossReport> {
        let k = self.state.step;
        let batch = self.batch_at(k)?;
        let out = self.evaluate(&batch).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training {
                step: k as usize,
                reason,
            },
            other => other,
        })?;
        if !out.report.loss.is_finite() {
            return Err(Error::Training {
                step: k as usize,
                reason: "non-finite loss".into(),
            });
        }
        let st = &mut self.state;
        let lr = st.config.learning_rate_at(k);
        st.opt_velocity.lr = lr;
        if let Some(o) = st.opt_acceleration.as_mut() {
            o.lr = lr;
        }
        let mut flat = st.velocity.to_flat();
        st.opt_velocity.step(&mut flat, &out.grad_velocity)?;
        st.velocity.set_flat(&flat)?;
        if let (Some(net), Some(opt), Some(g)) = (
            st.acceleration.as_mut(),
            st.opt_acceleration.as_mut(),
            out.grad_acceleration.as_ref(),
        ) {
            let mut flat = net.to_flat();
            opt.step(&mut flat, g)?;
            net.set_flat(&flat)?;
        }
        st.step += 1;
        Ok(out.report)
    }

    /// Runs until `config.steps`, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut records = Vec::new();
        while self.state.step < self.state.config.steps {
            let rep = self.train_step()?;
            let rec = LossRecord {
                step: self.state.step,
                loss: rep.loss,
                velocity_term: rep.velocity_term,
                acceleration_term: rep.acceleration_term,
            };
            on_step(&rec);
            records.push(rec);
        }
        Ok(records)
    }
}
