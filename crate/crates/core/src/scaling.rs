//! Wall-clock scaling of the attention kernels and of the ViT sampling
//! pipeline, with log-log exponent fits.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::stats;
use crate::vit::{attn_approx, attn_exact, smf_vit_step, ApproxAttnConfig, AttnWeights, Kernel, ViTStack};

/// A timed run shorter than this is repeated in an inner loop.
pub const MIN_RUN_SECONDS: f64 = 1e-3;
pub const MIN_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub label: String,
    pub sizes: Vec<usize>,
    /// Median seconds per call at each size.
    pub seconds: Vec<f64>,
    pub repeats: usize,
    pub exponent: f64,
    pub r_squared: f64,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,median_seconds,fitted_exponent,r_squared\n");
        for (n, t) in self.sizes.iter().zip(&self.seconds) {
            out.push_str(&format!("{n},{t:.9e},{:.6},{:.6}\n", self.exponent, self.r_squared));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ScalingOp {
    ExactAttention { width: usize },
    ApproxAttention { width: usize, config: ApproxAttnConfig },
}

impl ScalingOp {
    pub fn label(&self) -> String {
        match self {
            ScalingOp::ExactAttention { width } => format!("exact_attention_d{width}"),
            ScalingOp::ApproxAttention { width, config } => {
                format!("approx_attention_d{width}_g{}", config.degree)
            }
        }
    }
}

/// Median seconds per call of `f`, over `repeats` timed runs after one
/// warm-up. Each run loops `f` enough times to last [`MIN_RUN_SECONDS`].
pub fn median_seconds(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    let once = start.elapsed().as_secs_f64();
    let inner = if once >= MIN_RUN_SECONDS {
        1
    } else {
        ((MIN_RUN_SECONDS / once.max(1e-9)).ceil() as usize).max(1)
    };
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        times.push(start.elapsed().as_secs_f64() / inner as f64);
    }
    Ok(stats::median(&mut times))
}

fn check_sizes(sizes: &[usize], repeats: usize) -> Result<()> {
    if sizes.len() < 4 {
        return Err(Error::Precondition("need at least four sizes".into()));
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) || sizes[0] == 0 {
        return Err(Error::Precondition("sizes must be positive and strictly increasing".into()));
    }
    if repeats < MIN_REPEATS {
        return Err(Error::param("repeats", format!("must be at least {MIN_REPEATS}")));
    }
    Ok(())
}

fn fit(label: String, sizes: &[usize], seconds: Vec<f64>, repeats: usize) -> Result<ScalingReport> {
    let x: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let f = stats::loglog_fit(&x, &seconds)?;
    Ok(ScalingReport {
        label,
        sizes: sizes.to_vec(),
        seconds,
        repeats,
        exponent: f.slope,
        r_squared: f.r_squared,
    })
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..=a))
}

/// Times one attention kernel across sequence lengths on a single thread.
/// Inputs have entries in `[−1, 1]` and the logit scale keeps `|q·k| ≤ 1`.
pub fn time_scaling(op: ScalingOp, sizes: &[usize], repeats: usize, seed: u64) -> Result<ScalingReport> {
    check_sizes(sizes, repeats)?;
    if sizes[sizes.len() - 1] < 8 * sizes[0] {
        return Err(Error::Precondition("sizes must span at least 8×".into()));
    }
    let width = match op {
        ScalingOp::ExactAttention { width } | ScalingOp::ApproxAttention { width, .. } => width,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = 1.0 / (width as f64).sqrt();
    let mut w = AttnWeights::new(
        uniform(&mut rng, width, width, a),
        uniform(&mut rng, width, width, a),
        uniform(&mut rng, width, width, a),
    )?;
    let fro = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.logit_scale = (1.0 / (width as f64 * fro(&w.wq) * fro(&w.wk))).min(1.0);
    let mut seconds = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let x = uniform(&mut rng, n, width, 1.0);
        let t = par::single_threaded(|| {
            median_seconds(repeats, || match op {
                ScalingOp::ExactAttention { .. } => attn_exact(x.view(), &w).map(drop),
                ScalingOp::ApproxAttention { config, .. } => {
                    attn_approx(x.view(), &w, &config).map(drop)
                }
            })
        })?;
        seconds.push(t);
    }
    fit(op.label(), sizes, seconds, repeats)
}

/// Pipeline settings shared across spatial sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub kernel: Kernel,
    pub blocks: usize,
    pub steps: usize,
    pub seed: u64,
}

/// Channels used for a spatial size `n`: `⌈log₂ n⌉`.
pub fn channels(n: usize) -> usize {
    (usize::BITS - (n.max(2) - 1).leading_zeros()) as usize
}

/// Times a full `steps`-step second-order ViT sampling run for each spatial
/// size `n`, using `n²` tokens with `⌈log₂ n⌉` channels. The exponent is
/// fitted against `n`.
pub fn pipeline_scaling(cfg: &PipelineConfig, sizes: &[usize], repeats: usize) -> Result<ScalingReport> {
    check_sizes(sizes, repeats)?;
    if cfg.steps == 0 {
        return Err(Error::param("steps", "must be at least 1"));
    }
    let bound = match cfg.kernel {
        Kernel::Exact => 1.0,
        Kernel::Approx(c) => c.bound,
    };
    let mut seconds = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let c = channels(n);
        let mut vit1 = ViTStack::init(cfg.seed, c + 2, cfg.blocks, 1.0)?;
        let mut vit2 = ViTStack::init(cfg.seed + 1, c + 2, cfg.blocks, 1.0)?;
        vit1.calibrate(bound)?;
        vit2.calibrate(bound)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 2);
        let z0 = uniform(&mut rng, n * n, c, 1.0);
        let run = || -> Result<()> {
            let mut z = z0.clone();
            let h = 1.0 / cfg.steps as f64;
            for i in 0..cfg.steps {
                let t_prev = 1.0 - h * i as f64;
                let t_next = (t_prev - h).max(0.0);
                z = smf_vit_step(&vit1, &vit2, z.view(), t_prev, t_next, &cfg.kernel)?.0;
            }
            Ok(())
        };
        seconds.push(par::single_threaded(|| median_seconds(repeats, run))?);
    }
    let label = match cfg.kernel {
        Kernel::Exact => "pipeline_exact".to_string(),
        Kernel::Approx(c) => format!("pipeline_approx_g{}", c.degree),
    };
    fit(label, sizes, seconds, repeats)
}
