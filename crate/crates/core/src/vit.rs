//! Single-head attention, a residual ViT stack, a polynomial-feature
//! approximation of softmax attention, and the ViT-backed sampling step.
//!
//! Tokens are rows. With `Q = s·X W_Q`, `K = X W_K`, `V = X W_V` the exact
//! kernel is `softmax(Q Kᵀ) V`. The approximate kernel replaces `exp(q·k)` by
//! its degree-`g` Taylor polynomial, written as `Φ(q)·Φ(k)` with the
//! tensor-power map `Φ(x) = [x^{⊗j} / √j!]_{j ≤ g}`, so the output is
//! `Φ(Q)(Φ(K)ᵀ[V | 1])` and no `n × n` matrix is formed.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::par;
use crate::stats;

/// Variance floor in [`layernorm`].
pub const LN_EPS: f64 = 1e-12;
/// Default floor for approximate attention row sums.
pub const DEFAULT_ETA: f64 = 1e-6;
/// Largest feature rank accepted by [`ApproxAttnConfig`].
pub const MAX_RANK: usize = 1 << 17;

const ROW_BLOCK: usize = 64;
/// Cap on `rows × rank` per feature block, to bound scratch memory.
const BLOCK_ENTRIES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    /// Multiplies every logit; set by [`ViTStack::calibrate`].
    pub logit_scale: f64,
}

impl AttnWeights {
    pub fn new(wq: Array2<f64>, wk: Array2<f64>, wv: Array2<f64>) -> Result<Self> {
        let w = Self {
            wq,
            wk,
            wv,
            logit_scale: 1.0,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn width(&self) -> usize {
        self.wq.nrows()
    }

    /// Largest absolute entry over `W_Q`, `W_K`, `W_V`.
    pub fn entry_bound(&self) -> f64 {
        [&self.wq, &self.wk, &self.wv]
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.wq.nrows();
        for (name, m) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::param(name, format!("expected {d}×{d}, got {:?}", m.dim())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::param(name, "non-finite entry"));
            }
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::param("logit_scale", "must be positive"));
        }
        Ok(())
    }

    fn project(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        check_len(self.width(), x.ncols())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite attention input".into()));
        }
        let q = x.dot(&self.wq) * self.logit_scale;
        Ok((q, x.dot(&self.wk), x.dot(&self.wv)))
    }
}

fn row_blocks(n: usize, rank: usize) -> Vec<(usize, usize)> {
    let size = (BLOCK_ENTRIES / rank.max(1)).clamp(1, ROW_BLOCK);
    (0..n.div_ceil(size))
        .map(|b| (b * size, ((b + 1) * size).min(n)))
        .collect()
}

fn stack_rows(parts: Vec<Array2<f64>>, cols: usize) -> Array2<f64> {
    if parts.is_empty() {
        return Array2::zeros((0, cols));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("blocks share a width")
}

/// Row-normalized `exp(Q Kᵀ)` as a dense matrix. Reference use only.
pub fn attention_matrix(x: ArrayView2<f64>, w: &AttnWeights) -> Result<Array2<f64>> {
    let (q, k, _) = w.project(x)?;
    let mut a = q.dot(&k.t());
    for mut row in a.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(a)
}

/// Exact softmax attention, row blocks in parallel.
pub fn attn_exact(x: ArrayView2<f64>, w: &AttnWeights) -> Result<Array2<f64>> {
    let (q, k, v) = w.project(x)?;
    let kt = k.t();
    let blocks = row_blocks(x.nrows(), 1);
    let parts = par::map_indexed(blocks.len(), |b| {
        let (lo, hi) = blocks[b];
        let mut logits = q.slice(s![lo..hi, ..]).dot(&kt);
        let mut sums = Array1::zeros(hi - lo);
        for (i, mut row) in logits.rows_mut().into_iter().enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            sums[i] = row.sum();
        }
        let mut out = logits.dot(&v);
        for (mut row, &sum) in out.rows_mut().into_iter().zip(&sums) {
            row.mapv_inplace(|v| v / sum);
        }
        out
    });
    let out = stack_rows(parts, x.ncols());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("attention overflow".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxAttnConfig {
    /// Taylor degree `g`.
    pub degree: usize,
    /// Required bound `B` on `|q·k|`.
    pub bound: f64,
    /// Row-sum floor `η`.
    pub eta: f64,
}

impl Default for ApproxAttnConfig {
    fn default() -> Self {
        Self {
            degree: 4,
            bound: 1.0,
            eta: DEFAULT_ETA,
        }
    }
}

impl ApproxAttnConfig {
    pub fn new(degree: usize, bound: f64) -> Self {
        Self {
            degree,
            bound,
            ..Self::default()
        }
    }

    /// Feature rank `k = Σ_{j ≤ g} width^j` for the tensor-power map.
    pub fn rank(&self, width: usize) -> Result<usize> {
        let mut total: usize = 0;
        let mut term: usize = 1;
        for j in 0..=self.degree {
            total = total
                .checked_add(term)
                .filter(|&k| k <= MAX_RANK)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "feature rank exceeds {MAX_RANK} at width {width}, degree {}",
                        self.degree
                    ))
                })?;
            if j < self.degree {
                term = term.saturating_mul(width);
            }
        }
        Ok(total)
    }

    pub fn validate(&self, width: usize) -> Result<usize> {
        if self.degree == 0 {
            return Err(Error::param("degree", "must be at least 1"));
        }
        if !(self.bound > 0.0 && self.bound <= 1.0) {
            return Err(Error::param("bound", "must lie in (0, 1]"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::param("eta", "must be positive"));
        }
        self.rank(width)
    }

    /// Relative Taylor remainder `e^b b^{g+1} / (g+1)!` for logits in `[−b, b]`.
    pub fn relative_remainder(&self, b: f64) -> f64 {
        let g = self.degree as i32;
        let fact: f64 = (1..=self.degree + 1).map(|i| i as f64).product();
        b.exp() * b.powi(g + 1) / fact
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnReport {
    pub rank: usize,
    pub clamp_events: usize,
    /// `max‖q_i‖ · max‖k_j‖`, which bounds every `|q_i·k_j|`.
    pub logit_bound: f64,
    /// Guaranteed `‖O − Attn‖∞` from the Taylor remainder.
    pub error_bound: f64,
}

fn write_features(x: &[f64], degree: usize, out: &mut [f64]) {
    out[0] = 1.0;
    let (mut start, mut len, mut pos) = (0, 1, 1);
    for j in 1..=degree {
        let c = 1.0 / (j as f64).sqrt();
        for a in start..start + len {
            let base = out[a] * c;
            for &xb in x {
                out[pos] = base * xb;
                pos += 1;
            }
        }
        start += len;
        len *= x.len();
    }
}

/// Tensor-power Taylor features of every row, shape `n × rank`.
pub fn taylor_features(x: ArrayView2<f64>, degree: usize, rank: usize) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), rank));
    for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        let src: Vec<f64> = row.to_vec();
        write_features(&src, degree, dst.as_slice_mut().expect("standard layout"));
    }
    out
}

fn row_norms(m: &Array2<f64>) -> (usize, f64) {
    m.rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .enumerate()
        .fold((0, 0.0), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

/// Approximate attention with its error report.
pub fn attn_approx(
    x: ArrayView2<f64>,
    w: &AttnWeights,
    cfg: &ApproxAttnConfig,
) -> Result<(Array2<f64>, AttnReport)> {
    let d = x.ncols();
    let rank = cfg.validate(d)?;
    let (q, k, v) = w.project(x)?;
    let (qi, qn) = row_norms(&q);
    let (kj, kn) = row_norms(&k);
    let logit_bound = qn * kn;
    if logit_bound > cfg.bound {
        return Err(Error::Precondition(format!(
            "logit bound {logit_bound:.6} exceeds {} (query row {qi}, key row {kj})",
            cfg.bound
        )));
    }
    let n = x.nrows();
    let blocks = row_blocks(n, rank);
    let ones = Array2::ones((n, 1));
    let v1 = concatenate(Axis(1), &[v.view(), ones.view()]).expect("same row count");
    let partial = par::map_indexed(blocks.len(), |b| {
        let (lo, hi) = blocks[b];
        let phi = taylor_features(k.slice(s![lo..hi, ..]), cfg.degree, rank);
        phi.t().dot(&v1.slice(s![lo..hi, ..]))
    });
    let mut summary = Array2::<f64>::zeros((rank, d + 1));
    for p in &partial {
        summary += p;
    }
    let parts = par::map_indexed(blocks.len(), |b| {
        let (lo, hi) = blocks[b];
        let phi = taylor_features(q.slice(s![lo..hi, ..]), cfg.degree, rank);
        let raw = phi.dot(&summary);
        let mut clamps = 0;
        let mut out = raw.slice(s![.., ..d]).to_owned();
        for (mut row, &den) in out.rows_mut().into_iter().zip(raw.column(d)) {
            let den = if den < cfg.eta {
                clamps += 1;
                cfg.eta
            } else {
                den
            };
            row.mapv_inplace(|v| v / den);
        }
        (out, clamps)
    });
    let clamp_events = parts.iter().map(|p| p.1).sum();
    let out = stack_rows(parts.into_iter().map(|p| p.0).collect(), d);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite approximate attention".into()));
    }
    let rho = cfg.relative_remainder(logit_bound);
    let vmax = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let error_bound = if rho < 1.0 {
        2.0 * rho / (1.0 - rho) * vmax
    } else {
        f64::INFINITY
    };
    Ok((
        out,
        AttnReport {
            rank,
            clamp_events,
            logit_bound,
            error_bound,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormParams {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
        }
    }

    /// Largest row norm the normalized-then-affine output can have.
    fn output_norm_bound(&self) -> f64 {
        let width = self.gamma.len() as f64;
        let g = self.gamma.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        g * width.sqrt() + self.beta.dot(&self.beta).sqrt()
    }
}

/// Per-row `(x − mean) / sqrt(max(var, LN_EPS))` without affine terms.
pub fn layernorm(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    let width = x.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / width;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width;
        let sd = var.max(LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) / sd);
    }
    out
}

fn layernorm_affine(x: ArrayView2<f64>, p: &LayerNormParams) -> Array2<f64> {
    let mut out = layernorm(x);
    for mut row in out.rows_mut() {
        row.zip_mut_with(&p.gamma, |v, g| *v *= g);
        row += &p.beta;
    }
    out
}

/// Row-wise `y_i = W x_i + b`.
pub fn mlp_block(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Result<Array2<f64>> {
    check_len(w.ncols(), x.ncols())?;
    check_len(w.nrows(), b.len())?;
    Ok(x.dot(&w.t()) + b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTBlock {
    pub attn: AttnWeights,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub mlp_w: Array2<f64>,
    pub mlp_b: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    Exact,
    Approx(ApproxAttnConfig),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardReport {
    pub clamp_events: usize,
    /// Per-block attention error bounds; empty for the exact kernel.
    pub attention_bounds: Vec<f64>,
}

impl ForwardReport {
    fn merge(&mut self, other: ForwardReport) {
        self.clamp_events += other.clamp_events;
        self.attention_bounds.extend(other.attention_bounds);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTStack {
    pub width: usize,
    pub blocks: Vec<ViTBlock>,
}

impl ViTStack {
    /// `blocks` residual blocks with entries uniform in `[−R, R]/√width`,
    /// identity layer norms, and logits calibrated to `|q·k| ≤ 1`.
    pub fn init(seed: u64, width: usize, blocks: usize, entry_bound: f64) -> Result<Self> {
        if width == 0 || blocks == 0 {
            return Err(Error::param("blocks", "width and block count must be positive"));
        }
        if !(entry_bound > 0.0 && entry_bound.is_finite()) {
            return Err(Error::param("entry_bound", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = entry_bound / (width as f64).sqrt();
        let mat = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((width, width), |_| rng.random_range(-a..=a))
        };
        let blocks = (0..blocks)
            .map(|_| {
                let attn = AttnWeights::new(mat(&mut rng), mat(&mut rng), mat(&mut rng))?;
                let mlp_w = mat(&mut rng);
                let mlp_b = Array1::from_shape_fn(width, |_| rng.random_range(-a..=a));
                Ok(ViTBlock {
                    attn,
                    ln1: LayerNormParams::identity(width),
                    ln2: LayerNormParams::identity(width),
                    mlp_w,
                    mlp_b,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut stack = Self { width, blocks };
        stack.calibrate(1.0)?;
        Ok(stack)
    }

    /// Sets each block's logit scale so that `|q·k| ≤ bound` for every input,
    /// using `‖q‖‖k‖ ≤ ‖x‖² ‖W_Q‖_F ‖W_K‖_F` and the layer-norm output bound.
    pub fn calibrate(&mut self, bound: f64) -> Result<()> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::param("bound", "must be positive"));
        }
        for b in &mut self.blocks {
            let xn = b.ln1.output_norm_bound();
            let fq = b.attn.wq.dot_frobenius();
            let fk = b.attn.wk.dot_frobenius();
            let worst = xn * xn * fq * fk;
            b.attn.logit_scale = if worst > bound { bound / worst } else { 1.0 };
        }
        Ok(())
    }

    /// Multiplies value and MLP weights by `factor`.
    pub fn scale_values(&mut self, factor: f64) {
        for b in &mut self.blocks {
            b.attn.wv *= factor;
            b.mlp_w *= factor;
            b.mlp_b *= factor;
        }
    }

    /// Largest absolute weight over attention and MLP matrices.
    pub fn entry_bound(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                b.mlp_w
                    .iter()
                    .fold(b.attn.entry_bound(), |m, v| m.max(v.abs()))
            })
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::param("blocks", "at least one block required"));
        }
        for b in &self.blocks {
            b.attn.validate()?;
            check_len(self.width, b.attn.width())?;
            for ln in [&b.ln1, &b.ln2] {
                check_len(self.width, ln.gamma.len())?;
                check_len(self.width, ln.beta.len())?;
            }
            check_len(self.width, b.mlp_w.nrows())?;
            check_len(self.width, b.mlp_w.ncols())?;
            check_len(self.width, b.mlp_b.len())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }
}

trait Frobenius {
    fn dot_frobenius(&self) -> f64;
}

impl Frobenius for Array2<f64> {
    fn dot_frobenius(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn attend(x: ArrayView2<f64>, w: &AttnWeights, kernel: &Kernel) -> Result<(Array2<f64>, ForwardReport)> {
    match kernel {
        Kernel::Exact => Ok((attn_exact(x, w)?, ForwardReport::default())),
        Kernel::Approx(cfg) => {
            let (o, rep) = attn_approx(x, w, cfg)?;
            Ok((
                o,
                ForwardReport {
                    clamp_events: rep.clamp_events,
                    attention_bounds: vec![rep.error_bound],
                },
            ))
        }
    }
}

/// Applies every block: `Y = Attn(LN₁(X)) + X`, then `X = MLP(LN₂(Y)) + Y`.
pub fn vit_forward(
    stack: &ViTStack,
    x: ArrayView2<f64>,
    kernel: &Kernel,
) -> Result<(Array2<f64>, ForwardReport)> {
    check_len(stack.width, x.ncols())?;
    let mut h = x.to_owned();
    let mut report = ForwardReport::default();
    for b in &stack.blocks {
        let (att, rep) = attend(layernorm_affine(h.view(), &b.ln1).view(), &b.attn, kernel)?;
        report.merge(rep);
        let y = att + &h;
        h = mlp_block(layernorm_affine(y.view(), &b.ln2).view(), &b.mlp_w, &b.mlp_b)? + &y;
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite ViT output".into()));
    }
    Ok((h, report))
}

/// One second-order step `Z + h·ViT₁(·)_{:, :d} + ½h²·ViT₂(·)_{:, :d}` where
/// both networks see `Z ‖ t_next·1 ‖ t_prev·1` and `h = t_next − t_prev`.
pub fn smf_vit_step(
    vit1: &ViTStack,
    vit2: &ViTStack,
    z: ArrayView2<f64>,
    t_prev: f64,
    t_next: f64,
    kernel: &Kernel,
) -> Result<(Array2<f64>, ForwardReport)> {
    for t in [t_prev, t_next] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
    }
    let d = z.ncols();
    check_len(d + 2, vit1.width)?;
    check_len(d + 2, vit2.width)?;
    let n = z.nrows();
    let input = concatenate(
        Axis(1),
        &[
            z,
            Array2::from_elem((n, 1), t_next).view(),
            Array2::from_elem((n, 1), t_prev).view(),
        ],
    )
    .expect("same row count");
    let h = t_next - t_prev;
    let (u1, mut report) = vit_forward(vit1, input.view(), kernel)?;
    let (u2, rep2) = vit_forward(vit2, input.view(), kernel)?;
    report.merge(rep2);
    let out = &z + &(u1.slice(s![.., ..d]).to_owned() * h) + &(u2.slice(s![.., ..d]).to_owned() * (0.5 * h * h));
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub eps: Vec<f64>,
    pub gaps: Vec<f64>,
    /// `gap / ε` per level.
    pub constants: Vec<f64>,
    pub slope: f64,
    pub r_squared: f64,
    /// Median of `constants`.
    pub constant: f64,
    /// `(max − min) / median` over `constants`.
    pub variation: f64,
    pub clamp_events: usize,
}

/// Perturbation direction used by [`error_propagation_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeDirection {
    /// Entries uniform in `[−1, 1]` from the seed.
    Random { seed: u64 },
    /// The sign pattern of the Jacobian row of the exact step with the
    /// largest absolute sum: the unit-∞-norm perturbation that moves some
    /// output entry the most to first order.
    WorstCase,
}

/// Step used for the finite-difference Jacobian of [`ProbeDirection::WorstCase`].
const JACOBIAN_STEP: f64 = 1e-6;

fn worst_case_direction(
    vit1: &ViTStack,
    vit2: &ViTStack,
    z: ArrayView2<f64>,
    t_prev: f64,
    t_next: f64,
) -> Result<Array2<f64>> {
    let (n, d) = z.dim();
    let m = n * d;
    let columns = par::map_indexed(m, |j| -> Result<Array2<f64>> {
        let mut zp = z.to_owned();
        let mut zm = z.to_owned();
        zp[(j / d, j % d)] += JACOBIAN_STEP;
        zm[(j / d, j % d)] -= JACOBIAN_STEP;
        let (a, _) = smf_vit_step(vit1, vit2, zp.view(), t_prev, t_next, &Kernel::Exact)?;
        let (b, _) = smf_vit_step(vit1, vit2, zm.view(), t_prev, t_next, &Kernel::Exact)?;
        Ok((a - b) / (2.0 * JACOBIAN_STEP))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let row_sum = |i: usize| columns.iter().map(|c| c[(i / d, i % d)].abs()).sum::<f64>();
    let best = (0..m)
        .max_by(|&a, &b| row_sum(a).total_cmp(&row_sum(b)))
        .ok_or_else(|| Error::Precondition("empty input".into()))?;
    Ok(Array2::from_shape_fn((n, d), |(r, c)| {
        let v = columns[r * d + c][(best / d, best % d)];
        if v < 0.0 {
            -1.0
        } else {
            1.0
        }
    }))
}

/// Compares the approximate step on `Z + εP` with the exact step on `Z` for
/// a direction `P` with entries in `[−1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn error_propagation_probe(
    vit1: &ViTStack,
    vit2: &ViTStack,
    z: ArrayView2<f64>,
    eps: &[f64],
    cfg: &ApproxAttnConfig,
    t_prev: f64,
    t_next: f64,
    direction: ProbeDirection,
) -> Result<ProbeReport> {
    if eps.len() < 4 || eps.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::Precondition("need at least four positive ε levels".into()));
    }
    let ratio = eps[1] / eps[0];
    if eps
        .windows(2)
        .any(|w| ((w[1] / w[0]) / ratio - 1.0).abs() > 1e-9)
    {
        return Err(Error::Precondition("ε levels must be geometric".into()));
    }
    let dir = match direction {
        ProbeDirection::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Array2::from_shape_fn(z.dim(), |_| rng.random_range(-1.0..=1.0))
        }
        ProbeDirection::WorstCase => worst_case_direction(vit1, vit2, z, t_prev, t_next)?,
    };
    let (base, _) = smf_vit_step(vit1, vit2, z, t_prev, t_next, &Kernel::Exact)?;
    let kernel = Kernel::Approx(*cfg);
    let mut gaps = Vec::with_capacity(eps.len());
    let mut clamp_events = 0;
    for &e in eps {
        let zp = &z + &(&dir * e);
        let (out, rep) = smf_vit_step(vit1, vit2, zp.view(), t_prev, t_next, &kernel)?;
        clamp_events += rep.clamp_events;
        gaps.push((&out - &base).iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    }
    let fit = stats::loglog_fit(eps, &gaps)?;
    let constants: Vec<f64> = gaps.iter().zip(eps).map(|(g, e)| g / e).collect();
    let constant = stats::median(&mut constants.clone());
    let (lo, hi) = constants
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &c| (lo.min(c), hi.max(c)));
    Ok(ProbeReport {
        eps: eps.to_vec(),
        gaps,
        constants,
        slope: fit.slope,
        r_squared: fit.r_squared,
        constant,
        variation: (hi - lo) / constant,
        clamp_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(seed: u64, n: usize, d: usize, scale: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-scale..=scale))
    }

    fn weights(seed: u64, d: usize, scale: f64) -> AttnWeights {
        AttnWeights::new(
            random(seed, d, d, scale),
            random(seed + 1, d, d, scale),
            random(seed + 2, d, d, 1.0),
        )
        .unwrap()
    }

    fn naive_attention(x: &Array2<f64>, w: &AttnWeights) -> Array2<f64> {
        let (n, d) = x.dim();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let mut num = vec![0.0; d];
            let mut den = 0.0;
            for j in 0..n {
                let mut logit = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        for c in 0..d {
                            logit += x[[i, a]] * w.wq[[a, c]] * w.wk[[b, c]] * x[[j, b]];
                        }
                    }
                }
                let e = (w.logit_scale * logit).exp();
                den += e;
                for c in 0..d {
                    let v: f64 = (0..d).map(|a| x[[j, a]] * w.wv[[a, c]]).sum();
                    num[c] += e * v;
                }
            }
            for c in 0..d {
                out[[i, c]] = num[c] / den;
            }
        }
        out
    }

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn exact_matches_double_loop() {
        let x = random(1, 3, 2, 1.0);
        let w = weights(2, 2, 0.7);
        assert!(max_abs(&(attn_exact(x.view(), &w).unwrap() - naive_attention(&x, &w))) < 1e-12);
        let x = random(3, 40, 4, 1.0);
        let w = weights(4, 4, 0.5);
        assert!(max_abs(&(attn_exact(x.view(), &w).unwrap() - naive_attention(&x, &w))) < 1e-12);
    }

    #[test]
    fn exact_rows_are_stochastic() {
        let x = random(5, 70, 3, 2.0);
        let a = attention_matrix(x.view(), &weights(6, 3, 1.0)).unwrap();
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_trivial_cases() {
        let w = weights(7, 3, 1.0);
        let zero = Array2::zeros((5, 3));
        assert_eq!(attn_exact(zero.view(), &w).unwrap(), zero);
        let one = random(8, 1, 3, 1.0);
        let o = attn_exact(one.view(), &w).unwrap();
        assert!(max_abs(&(o - one.dot(&w.wv))) < 1e-14);
    }

    #[test]
    fn feature_inner_product_is_taylor_polynomial() {
        let x = random(9, 2, 3, 0.6);
        for g in 1..=5 {
            let cfg = ApproxAttnConfig::new(g, 1.0);
            let k = cfg.rank(3).unwrap();
            let phi = taylor_features(x.view(), g, k);
            let dot = x.row(0).dot(&x.row(1));
            let mut fact = 1.0;
            let mut poly = 0.0;
            for j in 0..=g {
                if j > 0 {
                    fact *= j as f64;
                }
                poly += dot.powi(j as i32) / fact;
            }
            assert!((phi.row(0).dot(&phi.row(1)) - poly).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_and_config_validation() {
        assert_eq!(ApproxAttnConfig::new(2, 1.0).rank(3).unwrap(), 13);
        assert_eq!(ApproxAttnConfig::new(4, 1.0).rank(4).unwrap(), 341);
        assert!(matches!(ApproxAttnConfig::new(9, 1.0).rank(8), Err(Error::Config(_))));
        assert!(ApproxAttnConfig::new(0, 1.0).validate(3).is_err());
        assert!(ApproxAttnConfig::new(2, 1.5).validate(3).is_err());
    }

    #[test]
    fn approx_zero_input_is_exact() {
        let w = weights(10, 3, 1.0);
        let zero = Array2::zeros((6, 3));
        let (o, rep) = attn_approx(zero.view(), &w, &ApproxAttnConfig::default()).unwrap();
        assert_eq!(o, attn_exact(zero.view(), &w).unwrap());
        assert_eq!(rep.clamp_events, 0);
    }

    #[test]
    fn approx_precondition_names_pair() {
        let x = random(11, 10, 3, 3.0);
        let w = weights(12, 3, 2.0);
        match attn_approx(x.view(), &w, &ApproxAttnConfig::default()) {
            Err(Error::Precondition(msg)) => assert!(msg.contains("query row") && msg.contains("key row")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn approx_respects_remainder_bound() {
        for (g, seed) in [(2, 20), (4, 21), (6, 22)] {
            let x = random(seed, 256, 4, 1.0);
            let mut w = weights(seed + 100, 4, 0.5);
            let (q, k, _) = w.project(x.view()).unwrap();
            w.logit_scale = 0.999 / (row_norms(&q).1 * row_norms(&k).1);
            let cfg = ApproxAttnConfig::new(g, 1.0);
            let (o, rep) = attn_approx(x.view(), &w, &cfg).unwrap();
            let err = max_abs(&(o - attn_exact(x.view(), &w).unwrap()));
            assert!(err <= rep.error_bound, "g={g}: {err} > {}", rep.error_bound);
            assert_eq!(rep.clamp_events, 0);
            if g == 4 {
                assert!(err < 1e-3, "{err}");
            }
        }
    }

    #[test]
    fn layernorm_properties() {
        let x = random(30, 5, 6, 3.0);
        let y = layernorm(x.view());
        for row in y.rows() {
            let mean = row.sum() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
        assert!(max_abs(&(layernorm(y.view()) - &y)) < 1e-10);
        let affine = x.mapv(|v| 2.5 * v - 4.0);
        assert!(max_abs(&(layernorm(affine.view()) - &y)) < 1e-10);
        let constant = Array2::from_elem((2, 4), 3.0);
        assert_eq!(layernorm(constant.view()), Array2::<f64>::zeros((2, 4)));
    }

    #[test]
    fn mlp_block_cases() {
        let x = random(31, 4, 3, 1.0);
        let eye = Array2::eye(3);
        assert_eq!(mlp_block(x.view(), &eye, &Array1::zeros(3)).unwrap(), x);
        let b = Array1::from(vec![1.0, -2.0, 0.5]);
        let zero = Array2::zeros((4, 3));
        let y = mlp_block(zero.view(), &random(32, 3, 3, 1.0), &b).unwrap();
        assert!(y.rows().into_iter().all(|r| r == b));
        let w = random(33, 3, 3, 1.0);
        let y = mlp_block(x.view(), &w, &b).unwrap();
        for i in 0..4 {
            for o in 0..3 {
                let want: f64 = b[o] + (0..3).map(|j| w[[o, j]] * x[[i, j]]).sum::<f64>();
                assert!((y[[i, o]] - want).abs() < 1e-12);
            }
        }
        assert!(mlp_block(x.view(), &Array2::zeros((3, 2)), &b).is_err());
    }

    fn naive_forward(stack: &ViTStack, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for b in &stack.blocks {
            let ln = |m: &Array2<f64>, p: &LayerNormParams| {
                let mut out = m.clone();
                for mut row in out.rows_mut() {
                    let mean = row.sum() / row.len() as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (*v - mean) / var.max(LN_EPS).sqrt() * p.gamma[j] + p.beta[j];
                    }
                }
                out
            };
            let y = naive_attention(&ln(&h, &b.ln1), &b.attn) + &h;
            let z = ln(&y, &b.ln2);
            let mut m = y.clone();
            for i in 0..m.nrows() {
                for o in 0..m.ncols() {
                    m[[i, o]] += b.mlp_b[o] + (0..z.ncols()).map(|j| b.mlp_w[[o, j]] * z[[i, j]]).sum::<f64>();
                }
            }
            h = m;
        }
        h
    }

    #[test]
    fn forward_matches_reference() {
        let stack = ViTStack::init(40, 4, 2, 1.0).unwrap();
        let x = random(41, 20, 4, 1.5);
        let (y, _) = vit_forward(&stack, x.view(), &Kernel::Exact).unwrap();
        assert!(max_abs(&(y - naive_forward(&stack, &x))) < 1e-10);
    }

    #[test]
    fn forward_zero_weights_adds_bias() {
        let mut stack = ViTStack::init(42, 3, 1, 1.0).unwrap();
        stack.scale_values(0.0);
        stack.blocks[0].mlp_b = Array1::from(vec![0.1, 0.2, 0.3]);
        let x = random(43, 5, 3, 1.0);
        let (y, _) = vit_forward(&stack, x.view(), &Kernel::Exact).unwrap();
        assert!(max_abs(&(y - (&x + &stack.blocks[0].mlp_b))) < 1e-15);
    }

    #[test]
    fn forward_is_deterministic_and_kernels_agree() {
        let a = ViTStack::init(44, 4, 3, 1.0).unwrap();
        let b = ViTStack::init(44, 4, 3, 1.0).unwrap();
        assert_eq!(a, b);
        let x = random(45, 50, 4, 1.0);
        let (ya, _) = vit_forward(&a, x.view(), &Kernel::Exact).unwrap();
        let (yb, _) = vit_forward(&b, x.view(), &Kernel::Exact).unwrap();
        assert_eq!(ya, yb);
        let (yc, rep) = vit_forward(&a, x.view(), &Kernel::Approx(ApproxAttnConfig::new(6, 1.0))).unwrap();
        assert_eq!(rep.clamp_events, 0);
        assert!(max_abs(&(yc - ya)) < 1e-3);
    }

    #[test]
    fn json_roundtrip() {
        let s = ViTStack::init(46, 4, 2, 0.5).unwrap();
        assert_eq!(ViTStack::from_json(&s.to_json().unwrap()).unwrap(), s);
        let mut bad = s.clone();
        bad.blocks[1].mlp_b = Array1::zeros(3);
        assert!(ViTStack::from_json(&bad.to_json().unwrap()).is_err());
    }

    #[test]
    fn smf_step_trivial_cases() {
        let v1 = ViTStack::init(50, 4, 1, 1.0).unwrap();
        let mut v2 = ViTStack::init(51, 4, 1, 1.0).unwrap();
        let z = random(52, 8, 2, 1.0);
        let (same, _) = smf_vit_step(&v1, &v2, z.view(), 0.5, 0.5, &Kernel::Exact).unwrap();
        assert_eq!(same, z);
        v2.scale_values(0.0);
        let (out, _) = smf_vit_step(&v1, &v2, z.view(), 0.8, 0.6, &Kernel::Exact).unwrap();
        // With zero value and MLP weights the second network returns its input.
        let mut input = Array2::from_elem((8, 4), 0.6);
        input.slice_mut(s![.., ..2]).assign(&z);
        input.column_mut(3).fill(0.8);
        let (u1, _) = vit_forward(&v1, input.view(), &Kernel::Exact).unwrap();
        let first = &z + &(u1.slice(s![.., ..2]).to_owned() * -0.2);
        let second = &first + &(z.clone() * (0.5 * 0.04));
        assert!(max_abs(&(out - second)) < 1e-14);
        assert!(smf_vit_step(&v1, &v2, z.view(), 1.2, 0.5, &Kernel::Exact).is_err());
    }

    #[test]
    fn probe_is_linear_in_eps() {
        let mut v1 = ViTStack::init(60, 4, 1, 1.0).unwrap();
        let mut v2 = ViTStack::init(61, 4, 1, 1.0).unwrap();
        v1.calibrate(0.5).unwrap();
        v2.calibrate(0.5).unwrap();
        let z = random(62, 12, 2, 1.0);
        let cfg = ApproxAttnConfig::new(8, 0.5);
        let eps = [1e-1, 1e-2, 1e-3, 1e-4];
        let random = ProbeDirection::Random { seed: 3 };
        let rep = error_propagation_probe(&v1, &v2, z.view(), &eps, &cfg, 0.7, 0.5, random).unwrap();
        assert!((0.9..=1.1).contains(&rep.slope), "{rep:?}");
        assert_eq!(rep.clamp_events, 0);
        assert!(error_propagation_probe(&v1, &v2, z.view(), &eps[..3], &cfg, 0.7, 0.5, random).is_err());
        // No unit perturbation moves the output further to first order.
        let worst = error_propagation_probe(&v1, &v2, z.view(), &eps, &cfg, 0.7, 0.5, ProbeDirection::WorstCase)
            .unwrap();
        assert!(worst.constants[3] >= rep.constants[3] - 1e-6, "{worst:?} vs {rep:?}");
    }

    #[test]
    fn exact_kernel_on_both_sides_has_zero_gap() {
        let v1 = ViTStack::init(70, 4, 1, 1.0).unwrap();
        let v2 = ViTStack::init(71, 4, 1, 1.0).unwrap();
        let z = random(72, 6, 2, 1.0);
        let (a, _) = smf_vit_step(&v1, &v2, z.view(), 0.9, 0.4, &Kernel::Exact).unwrap();
        let (b, _) = smf_vit_step(&v1, &v2, z.view(), 0.9, 0.4, &Kernel::Exact).unwrap();
        assert_eq!(max_abs(&(a - b)), 0.0);
    }
}
