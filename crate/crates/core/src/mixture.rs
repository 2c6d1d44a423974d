//! Gaussian-mixture data with closed-form marginal velocity and acceleration
//! fields, a classical RK4 integrator for the probability-flow ODE, and the
//! marginal average fields built on top of it.
//!
//! For component `i` with `x ~ N(m_i, Σ_i)` and `ε ~ N(μ·1, σ²I)`, the
//! point `z = αx + βε` is Gaussian with mean `αm_i + βμ` and covariance
//! `C_i = α²Σ_i + β²σ²I`. Conditioning gives
//!
//! ```text
//! E[x | z, i] = m_i + α Σ_i C_i⁻¹ (z − αm_i − βμ)
//! E[ε | z, i] = μ   + β σ²  C_i⁻¹ (z − αm_i − βμ)
//! ```
//!
//! and the marginal fields mix these with posterior responsibilities
//! computed in log space.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Real};
use crate::error::{check_len, Error, Result};
use crate::par;
use crate::schedule::{check_time, Coefficients, Noise, Schedule};

/// Below this time the `t → 0` limit of the posterior fields is returned.
pub const T_MIN: f64 = 1e-6;
/// Default RK4 step count for oracle evaluations.
pub const ORACLE_STEPS: usize = 1024;
/// RK4 step count for acceptance-grade references.
pub const REFERENCE_STEPS: usize = 4096;
pub const MIN_STEPS: usize = 16;

/// On-disk mixture description. Covariances are diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
    pub seed: u64,
    #[serde(default)]
    pub noise: Noise,
}

impl MixtureSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Row-major `d×d` covariances.
    covariances: Vec<Vec<f64>>,
    /// Lower Cholesky factors of the covariances, for sampling.
    factors: Vec<Vec<f64>>,
    noise: Noise,
}

/// Marginal velocity and acceleration at one `(z, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldValue {
    pub v: Vec<f64>,
    pub a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub responsibilities: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub mean_eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySolution {
    /// Grid from the start time to the end time (descending when
    /// integrating toward data).
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub steps: usize,
}

impl TrajectorySolution {
    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("solution has at least one state")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResidual {
    pub velocity: f64,
    pub acceleration: f64,
}

impl GaussianMixture {
    /// Builds a mixture with full covariance matrices (row-major `d×d`).
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<f64>>,
        noise: Noise,
    ) -> Result<Self> {
        noise.validate()?;
        if weights.is_empty() {
            return Err(Error::param("weights", "at least one component required"));
        }
        if means.len() != weights.len() {
            return Err(Error::param(
                "means",
                format!("{} means for {} weights", means.len(), weights.len()),
            ));
        }
        if covariances.len() != weights.len() {
            return Err(Error::param(
                "covariances",
                format!("{} covariances for {} weights", covariances.len(), weights.len()),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("weights", "entries must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::param("weights", format!("sum to {total}, expected 1")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::param("means", "dimension must be at least 1"));
        }
        let mut factors = Vec::with_capacity(weights.len());
        for (i, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != dim || m.iter().any(|v| !v.is_finite()) {
                return Err(Error::param(
                    "means",
                    format!("component {i} must be a finite vector of length {dim}"),
                ));
            }
            if c.len() != dim * dim {
                return Err(Error::param(
                    "covariances",
                    format!("component {i} must be {dim}x{dim}"),
                ));
            }
            for r in 0..dim {
                for k in 0..r {
                    if (c[r * dim + k] - c[k * dim + r]).abs() > 1e-12 * (1.0 + c[r * dim + k].abs()) {
                        return Err(Error::param(
                            "covariances",
                            format!("component {i} is not symmetric"),
                        ));
                    }
                }
            }
            let mut l = c.clone();
            cholesky(&mut l, dim).map_err(|_| {
                Error::param(
                    "covariances",
                    format!("component {i} is not positive definite"),
                )
            })?;
            factors.push(l);
        }
        Ok(Self {
            dim,
            weights,
            means,
            covariances,
            factors,
            noise,
        })
    }

    pub fn diagonal(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
        noise: Noise,
    ) -> Result<Self> {
        let dim = means.first().map_or(0, Vec::len);
        let mut covs = Vec::with_capacity(variances.len());
        for (i, diag) in variances.iter().enumerate() {
            if diag.len() != dim {
                return Err(Error::param(
                    "covariances",
                    format!("component {i} needs {dim} diagonal entries"),
                ));
            }
            if diag.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::param(
                    "covariances",
                    format!("component {i} has a non-positive variance"),
                ));
            }
            let mut c = vec![0.0; dim * dim];
            for (k, &v) in diag.iter().enumerate() {
                c[k * dim + k] = v;
            }
            covs.push(c);
        }
        Self::new(weights, means, covs, noise)
    }

    /// Single isotropic-free Gaussian `N(mean, diag(variances))`.
    pub fn single(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        Self::diagonal(vec![1.0], vec![mean], vec![variances], Noise::default())
    }

    pub fn from_spec(spec: &MixtureSpec) -> Result<Self> {
        Self::diagonal(
            spec.weights.clone(),
            spec.means.clone(),
            spec.covariances.clone(),
            spec.noise,
        )
    }

    /// Diagonal description; fails if a covariance has off-diagonal terms.
    pub fn to_spec(&self, seed: u64) -> Result<MixtureSpec> {
        let d = self.dim;
        let mut covariances = Vec::with_capacity(self.components());
        for c in &self.covariances {
            for r in 0..d {
                for k in 0..d {
                    if r != k && c[r * d + k] != 0.0 {
                        return Err(Error::param("covariances", "not diagonal"));
                    }
                }
            }
            covariances.push((0..d).map(|k| c[k * d + k]).collect());
        }
        Ok(MixtureSpec {
            weights: self.weights.clone(),
            means: self.means.clone(),
            covariances,
            seed,
            noise: self.noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn noise(&self) -> Noise {
        self.noise
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sample_data<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = i;
                break;
            }
        }
        let d = self.dim;
        let xi: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let l = &self.factors[comp];
        (0..d)
            .map(|r| self.means[comp][r] + (0..=r).map(|k| l[r * d + k] * xi[k]).sum::<f64>())
            .collect()
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim)
            .map(|_| {
                let g: f64 = rng.sample(StandardNormal);
                self.noise.mu + self.noise.sigma * g
            })
            .collect()
    }

    fn check_point(&self, z: &[f64], t: f64) -> Result<()> {
        check_len(self.dim, z.len())?;
        check_time(t)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite state".into()));
        }
        Ok(())
    }

    /// Posterior means `E[x | z]`, `E[ε | z]` under the schedule at time `t`.
    pub fn posterior(&self, s: Schedule, z: &[f64], t: f64) -> Result<Posterior> {
        self.check_point(z, t)?;
        let c = s.coefficients(t);
        let (mean_x, mean_eps, responsibilities) = self.posterior_generic(c.alpha, c.beta, z)?;
        Ok(Posterior {
            responsibilities,
            mean_x,
            mean_eps,
        })
    }

    fn posterior_generic<T: Real>(
        &self,
        alpha: T,
        beta: T,
        z: &[T],
    ) -> Result<(Vec<T>, Vec<T>, Vec<f64>)> {
        let d = self.dim;
        let k = self.components();
        let (mu, var_eps) = (self.noise.mu, self.noise.sigma * self.noise.sigma);
        let mut logp = Vec::with_capacity(k);
        let mut cond_x = Vec::with_capacity(k);
        let mut cond_e = Vec::with_capacity(k);
        let mut cov = vec![T::zero(); d * d];
        let mut resid = vec![T::zero(); d];
        for i in 0..k {
            let m = &self.means[i];
            let sigma = &self.covariances[i];
            for r in 0..d {
                for q in 0..d {
                    let mut v = alpha * alpha * sigma[r * d + q];
                    if r == q {
                        v += beta * beta * var_eps;
                    }
                    cov[r * d + q] = v;
                }
                resid[r] = z[r] - alpha * m[r] - beta * mu;
            }
            cholesky(&mut cov, d)
                .map_err(|_| Error::param("covariances", "marginal covariance not positive definite"))?;
            let w = cholesky_solve(&cov, d, &resid);
            let mut quad = T::zero();
            let mut logdet = T::zero();
            for r in 0..d {
                quad += resid[r] * w[r];
                logdet += cov[r * d + r].ln();
            }
            let lw = if self.weights[i] > 0.0 {
                T::cst(self.weights[i].ln())
            } else {
                T::cst(f64::NEG_INFINITY)
            };
            logp.push(lw - logdet - quad * 0.5);
            let ex: Vec<T> = (0..d)
                .map(|r| {
                    let sw = (0..d).fold(T::zero(), |acc, q| acc + w[q] * sigma[r * d + q]);
                    alpha * sw + m[r]
                })
                .collect();
            let ee: Vec<T> = (0..d).map(|r| beta * w[r] * var_eps + mu).collect();
            cond_x.push(ex);
            cond_e.push(ee);
        }
        let max = logp
            .iter()
            .map(|v| v.value())
            .fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<T> = logp
            .iter()
            .map(|&lp| {
                if lp.value() == f64::NEG_INFINITY {
                    T::zero()
                } else {
                    (lp + -max).exp()
                }
            })
            .collect();
        let total = unnorm.iter().fold(T::zero(), |acc, &v| acc + v);
        let resp: Vec<T> = unnorm.iter().map(|&v| v / total).collect();
        let mut mean_x = vec![T::zero(); d];
        let mut mean_e = vec![T::zero(); d];
        for i in 0..k {
            for r in 0..d {
                mean_x[r] += resp[i] * cond_x[i][r];
                mean_e[r] += resp[i] * cond_e[i][r];
            }
        }
        Ok((mean_x, mean_e, resp.iter().map(|v| v.value()).collect()))
    }

    fn field_generic<T: Real>(
        &self,
        c: &Coefficients<T>,
        z: &[T],
        second: bool,
    ) -> Result<Vec<T>> {
        let (a, b) = if second {
            (c.dd_alpha, c.dd_beta)
        } else {
            (c.d_alpha, c.d_beta)
        };
        let (mx, me, _) = self.posterior_generic(c.alpha, c.beta, z)?;
        Ok(mx.iter().zip(&me).map(|(&x, &e)| a * x + b * e).collect())
    }

    fn limit_field(&self, s: Schedule, z: &[f64], second: bool) -> Vec<f64> {
        let c = s.coefficients(0.0);
        let (a, b) = if second {
            (c.dd_alpha, c.dd_beta)
        } else {
            (c.d_alpha, c.d_beta)
        };
        z.iter().map(|&zi| a * zi + b * self.noise.mu).collect()
    }

    /// `v(z, t) = E[α′x + β′ε | z_t = z]`.
    pub fn marginal_velocity(&self, s: Schedule, z: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(z, t)?;
        if t < T_MIN {
            return Ok(self.limit_field(s, z, false));
        }
        self.field_generic(&s.coefficients(t), z, false)
    }

    /// `a(z, t) = E[α″x + β″ε | z_t = z]`.
    pub fn marginal_acceleration(&self, s: Schedule, z: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(z, t)?;
        if t < T_MIN {
            return Ok(self.limit_field(s, z, true));
        }
        self.field_generic(&s.coefficients(t), z, true)
    }

    pub fn fields(&self, s: Schedule, z: &[f64], t: f64) -> Result<FieldValue> {
        Ok(FieldValue {
            v: self.marginal_velocity(s, z, t)?,
            a: self.marginal_acceleration(s, z, t)?,
        })
    }

    /// Directional derivative of the marginal velocity,
    /// `∂_z v · tz + ∂_t v · tt`, from one dual-number pass.
    pub fn velocity_jvp(
        &self,
        s: Schedule,
        z: &[f64],
        t: f64,
        tz: &[f64],
        tt: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_point(z, t)?;
        check_len(self.dim, tz.len())?;
        let zd: Vec<Dual> = z.iter().zip(tz).map(|(&v, &e)| Dual::new(v, e)).collect();
        let c = s.coefficients(Dual::new(t, tt));
        let out = self.field_generic(&c, &zd, false)?;
        Ok((out.iter().map(|d| d.re).collect(), out.iter().map(|d| d.eps).collect()))
    }

    /// Second time derivative of a probability-flow trajectory through
    /// `(z, t)`: `d/dt v(z_t, t) = ∂_t v + (∂_z v)·v`.
    ///
    /// This is the curvature of the deterministic sampling path. It differs
    /// in general from [`marginal_acceleration`](Self::marginal_acceleration),
    /// which averages per-sample accelerations.
    pub fn path_acceleration(&self, s: Schedule, z: &[f64], t: f64) -> Result<Vec<f64>> {
        let v = self.marginal_velocity(s, z, t)?;
        Ok(self.velocity_jvp(s, z, t, &v, 1.0)?.1)
    }

    pub fn marginal_velocity_batch(
        &self,
        s: Schedule,
        zs: &[Vec<f64>],
        t: f64,
    ) -> Result<Vec<Vec<f64>>> {
        par::map_indexed(zs.len(), |i| self.marginal_velocity(s, &zs[i], t))
            .into_iter()
            .collect()
    }

    /// Classical RK4 on the marginal-velocity ODE from `(z, t)` to time `r`
    /// over `n_steps` uniform steps. `r` may lie on either side of `t`.
    pub fn solve_flow_ode(
        &self,
        s: Schedule,
        z: &[f64],
        t: f64,
        r: f64,
        n_steps: usize,
    ) -> Result<TrajectorySolution> {
        self.check_point(z, t)?;
        check_time(r)?;
        if r == t {
            return Err(Error::DegenerateInterval(t));
        }
        if n_steps < MIN_STEPS {
            return Err(Error::Precondition(format!(
                "RK4 needs at least {MIN_STEPS} steps, got {n_steps}"
            )));
        }
        let h = (r - t) / n_steps as f64;
        let d = self.dim;
        let mut times = Vec::with_capacity(n_steps + 1);
        let mut states = Vec::with_capacity(n_steps + 1);
        times.push(t);
        states.push(z.to_vec());
        let mut y = z.to_vec();
        let mut tmp = vec![0.0; d];
        let field = |y: &[f64], tau: f64, step: usize| -> Result<Vec<f64>> {
            let tau = tau.clamp(0.0, 1.0);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step });
            }
            self.marginal_velocity(s, y, tau)
        };
        for step in 0..n_steps {
            let tau = t + step as f64 * h;
            let k1 = field(&y, tau, step)?;
            for j in 0..d {
                tmp[j] = y[j] + 0.5 * h * k1[j];
            }
            let k2 = field(&tmp, tau + 0.5 * h, step)?;
            for j in 0..d {
                tmp[j] = y[j] + 0.5 * h * k2[j];
            }
            let k3 = field(&tmp, tau + 0.5 * h, step)?;
            for j in 0..d {
                tmp[j] = y[j] + h * k3[j];
            }
            let next = if step + 1 == n_steps { r } else { tau + h };
            let k4 = field(&tmp, next, step)?;
            for j in 0..d {
                y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step });
            }
            times.push(next);
            states.push(y.clone());
        }
        Ok(TrajectorySolution {
            times,
            states,
            steps: n_steps,
        })
    }

    /// `v̄(z, r, t) = (z − z_r)/(t − r)` with `z_r` from the flow ODE.
    pub fn average_velocity(
        &self,
        s: Schedule,
        z: &[f64],
        t: f64,
        r: f64,
        n_steps: usize,
    ) -> Result<Vec<f64>> {
        interval(r, t)?;
        let sol = self.solve_flow_ode(s, z, t, r, n_steps)?;
        Ok(displacement_rate(z, sol.endpoint(), t - r))
    }

    /// `ā(z, r, t)`: composite Simpson quadrature with `panels` panels of the
    /// marginal acceleration along the flow path.
    pub fn average_acceleration(
        &self,
        s: Schedule,
        z: &[f64],
        t: f64,
        r: f64,
        panels: usize,
    ) -> Result<Vec<f64>> {
        interval(r, t)?;
        let sol = self.solve_flow_ode(s, z, t, r, 2 * panels)?;
        self.simpson_acceleration(s, &sol, t - r)
    }

    /// Both average fields from a single path solve with `n_steps` steps
    /// (`n_steps` must be even; Simpson uses `n_steps / 2` panels).
    pub fn average_fields(
        &self,
        s: Schedule,
        z: &[f64],
        t: f64,
        r: f64,
        n_steps: usize,
    ) -> Result<FieldValue> {
        interval(r, t)?;
        if n_steps % 2 != 0 {
            return Err(Error::Precondition("step count must be even".into()));
        }
        let sol = self.solve_flow_ode(s, z, t, r, n_steps)?;
        Ok(FieldValue {
            v: displacement_rate(z, sol.endpoint(), t - r),
            a: self.simpson_acceleration(s, &sol, t - r)?,
        })
    }

    fn simpson_acceleration(
        &self,
        s: Schedule,
        sol: &TrajectorySolution,
        width: f64,
    ) -> Result<Vec<f64>> {
        let nodes = sol.states.len();
        debug_assert!(nodes % 2 == 1);
        let accel: Vec<Vec<f64>> = par::map_indexed(nodes, |i| {
            self.marginal_acceleration(s, &sol.states[i], sol.times[i].clamp(0.0, 1.0))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let h = width / (nodes - 1) as f64;
        let mut acc = vec![0.0; self.dim];
        for (i, a) in accel.iter().enumerate() {
            let w = if i == 0 || i == nodes - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            for (o, &v) in acc.iter_mut().zip(a) {
                *o += w * v;
            }
        }
        Ok(acc.iter().map(|v| v * h / 3.0 / width).collect())
    }

    /// Additive-consistency residuals `‖(t−r)f(r,t) − (s−r)f(r,s) − (t−s)f(s,t)‖∞`
    /// for `f = v̄` and `f = ā`, with `z` given at time `t`.
    pub fn consistency_report(
        &self,
        s: Schedule,
        z: &[f64],
        r: f64,
        s_mid: f64,
        t: f64,
        n_steps: usize,
    ) -> Result<ConsistencyResidual> {
        if !(r < s_mid && s_mid < t) {
            return Err(Error::Domain(format!(
                "expected r < s < t, got ({r}, {s_mid}, {t})"
            )));
        }
        let z_mid = self.solve_flow_ode(s, z, t, s_mid, n_steps)?.endpoint().to_vec();
        let whole = self.average_fields(s, z, t, r, n_steps)?;
        let lower = self.average_fields(s, &z_mid, s_mid, r, n_steps)?;
        let upper = self.average_fields(s, z, t, s_mid, n_steps)?;
        let residual = |f: fn(&FieldValue) -> &Vec<f64>| {
            (0..self.dim)
                .map(|j| {
                    ((t - r) * f(&whole)[j] - (s_mid - r) * f(&lower)[j] - (t - s_mid) * f(&upper)[j])
                        .abs()
                })
                .fold(0.0, f64::max)
        };
        Ok(ConsistencyResidual {
            velocity: residual(|f| &f.v),
            acceleration: residual(|f| &f.a),
        })
    }
}

fn interval(r: f64, t: f64) -> Result<()> {
    check_time(r)?;
    check_time(t)?;
    if r < t {
        Ok(())
    } else if r == t {
        Err(Error::DegenerateInterval(t))
    } else {
        Err(Error::Domain(format!("expected r < t, got r={r}, t={t}")))
    }
}

fn displacement_rate(z_t: &[f64], z_r: &[f64], width: f64) -> Vec<f64> {
    z_t.iter().zip(z_r).map(|(a, b)| (a - b) / width).collect()
}

/// In-place lower Cholesky factorization of a row-major `d×d` matrix.
/// The strict upper triangle is zeroed.
pub(crate) fn cholesky<T: Real>(a: &mut [T], d: usize) -> std::result::Result<(), ()> {
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        if !(diag.value() > 0.0) {
            return Err(());
        }
        let l = diag.sqrt();
        a[j * d + j] = l;
        for i in (j + 1)..d {
            let mut v = a[i * d + j];
            for k in 0..j {
                v -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = v / l;
        }
        for k in (j + 1)..d {
            a[j * d + k] = T::zero();
        }
    }
    Ok(())
}

/// Solves `L Lᵀ x = b` given the factor from [`cholesky`].
pub(crate) fn cholesky_solve<T: Real>(l: &[T], d: usize, b: &[T]) -> Vec<T> {
    let mut y = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            let v = l[i * d + k] * y[k];
            y[i] -= v;
        }
        y[i] = y[i] / l[i * d + i];
    }
    for i in (0..d).rev() {
        for k in (i + 1)..d {
            let v = l[k * d + i] * y[k];
            y[i] -= v;
        }
        y[i] = y[i] / l[i * d + i];
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::max_abs_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn std_normal_1d() -> GaussianMixture {
        GaussianMixture::single(vec![0.0], vec![1.0]).unwrap()
    }

    fn two_component() -> GaussianMixture {
        GaussianMixture::diagonal(
            vec![0.5, 0.5],
            vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
            vec![vec![0.3, 0.3], vec![0.3, 0.3]],
            Noise::default(),
        )
        .unwrap()
    }

    /// Analytic flow map of `N(0, 1)` data under the linear schedule:
    /// `z_r = (s_r / s_t) z` with `s_τ² = (1−τ)² + τ²`.
    fn linear_gaussian_flow(z: f64, t: f64, r: f64) -> f64 {
        let s = |tau: f64| ((1.0 - tau).powi(2) + tau * tau).sqrt();
        s(r) / s(t) * z
    }

    /// Self-normalized importance sampling estimate of `E[g(x, ε) | z_t = z]`
    /// for one-dimensional standard-normal data and noise. Returns the
    /// estimate and its standard error.
    fn mc_conditional<R: Rng>(
        rng: &mut R,
        s: Schedule,
        z: f64,
        t: f64,
        n: usize,
        g: impl Fn(f64, f64) -> f64,
    ) -> (f64, f64) {
        let c = s.eval(t).unwrap();
        let (mut sw, mut swg, mut swg2, mut sw2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            let eps = (z - c.alpha * x) / c.beta;
            let w = (-0.5 * eps * eps).exp();
            let val = g(x, eps);
            sw += w;
            sw2 += w * w;
            swg += w * val;
            swg2 += w * val * val;
        }
        let mean = swg / sw;
        let var = (swg2 / sw - mean * mean).max(0.0);
        let ess = sw * sw / sw2;
        (mean, (var / ess).sqrt())
    }

    #[test]
    fn standard_gaussian_velocity_vanishes_at_midpoint() {
        let mix = std_normal_1d();
        for &z in &[-2.0, 0.3, 1.7] {
            let v = mix.marginal_velocity(Schedule::Linear, &[z], 0.5).unwrap();
            assert!(v[0].abs() < 1e-14);
        }
    }

    #[test]
    fn standard_gaussian_velocity_closed_form() {
        let mix = std_normal_1d();
        for &(t, z) in &[(0.2, 1.3), (0.7, -0.4), (0.95, 2.0)] {
            let v = mix.marginal_velocity(Schedule::Linear, &[z], t).unwrap()[0];
            let expected = (2.0 * t - 1.0) / (2.0 * t * t - 2.0 * t + 1.0) * z;
            assert!((v - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn velocity_matches_monte_carlo_oracle() {
        let mix = std_normal_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(t, z) in &[(0.3, 0.8), (0.8, -1.2)] {
            let v = mix.marginal_velocity(Schedule::Linear, &[z], t).unwrap()[0];
            let (mc, se) = mc_conditional(&mut rng, Schedule::Linear, z, t, 1_000_000, |x, e| e - x);
            assert!((v - mc).abs() <= 3.0 * se, "t={t}: {v} vs {mc} ± {se}");
        }
    }

    #[test]
    fn trig_acceleration_matches_monte_carlo_oracle() {
        let mix = std_normal_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = Schedule::Trig.eval(0.5).unwrap();
        let a = mix.marginal_acceleration(Schedule::Trig, &[1.0], 0.5).unwrap()[0];
        let (mc, se) = mc_conditional(&mut rng, Schedule::Trig, 1.0, 0.5, 1_000_000, |x, e| {
            c.dd_alpha * x + c.dd_beta * e
        });
        assert!((a - mc).abs() <= 3.0 * se, "{a} vs {mc} ± {se}");
    }

    #[test]
    fn symmetric_mixture_velocity_stays_on_axis() {
        let mix = two_component();
        for s in Schedule::ALL {
            for &t in &[0.1, 0.5, 0.9] {
                let v = mix.marginal_velocity(s, &[0.7, 0.0], t).unwrap();
                assert!(v[1].abs() < 1e-14, "{s} t={t}: {v:?}");
            }
        }
    }

    #[test]
    fn linear_acceleration_is_zero_and_poly2_is_constant_mix() {
        let mix = two_component();
        let z = [0.4, -0.9];
        let a = mix.marginal_acceleration(Schedule::Linear, &z, 0.4).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
        let p = mix.posterior(Schedule::Poly2, &z, 0.4).unwrap();
        let a = mix.marginal_acceleration(Schedule::Poly2, &z, 0.4).unwrap();
        for j in 0..2 {
            assert!((a[j] - (2.0 * p.mean_x[j] - 2.0 * p.mean_eps[j])).abs() < 1e-14);
        }
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let mix = two_component();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t: f64 = rng.random();
            let z = vec![rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
            let p = mix.posterior(Schedule::Trig, &z, t).unwrap();
            assert!((p.responsibilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn far_tail_does_not_underflow() {
        let mix = two_component();
        let v = mix.marginal_velocity(Schedule::Linear, &[80.0, 0.0], 0.05).unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn point_mass_reduces_to_conditional_fields() {
        let x0 = [0.7, -1.2];
        let mix = GaussianMixture::diagonal(
            vec![1.0],
            vec![x0.to_vec()],
            vec![vec![1e-12, 1e-12]],
            Noise::default(),
        )
        .unwrap();
        for s in Schedule::ALL {
            for &t in &[0.2, 0.5, 0.9] {
                let c = s.eval(t).unwrap();
                let eps = [0.3, 1.1];
                let z: Vec<f64> = (0..2).map(|j| c.alpha * x0[j] + c.beta * eps[j]).collect();
                let pair = crate::schedule::SamplePair::new(x0.to_vec(), eps.to_vec()).unwrap();
                let f = mix.fields(s, &z, t).unwrap();
                let v = crate::schedule::conditional_velocity(&pair, s, t).unwrap();
                let a = crate::schedule::conditional_acceleration(&pair, s, t).unwrap();
                assert!(max_abs_diff(&f.v, &v) <= 1e-6, "{s} {t}");
                assert!(max_abs_diff(&f.a, &a) <= 1e-6, "{s} {t}");
            }
        }
    }

    #[test]
    fn limit_below_clamp() {
        let mix = two_component();
        let z = [1.0, 2.0];
        let v = mix.marginal_velocity(Schedule::Linear, &z, 0.0).unwrap();
        assert_eq!(v, vec![-1.0, -2.0]);
        let v_small = mix.marginal_velocity(Schedule::Linear, &z, 2.0 * T_MIN).unwrap();
        assert!(max_abs_diff(&v, &v_small) < 1e-4);
    }

    #[test]
    fn parameter_errors() {
        let err = GaussianMixture::diagonal(
            vec![0.6, 0.6],
            vec![vec![0.0], vec![1.0]],
            vec![vec![1.0], vec![1.0]],
            Noise::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parameter { ref field, .. } if field == "weights"));
        let err = GaussianMixture::new(
            vec![1.0],
            vec![vec![0.0, 0.0]],
            vec![vec![1.0, 2.0, 2.0, 1.0]],
            Noise::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parameter { ref field, .. } if field == "covariances"));
        let mix = std_normal_1d();
        assert!(matches!(
            mix.marginal_velocity(Schedule::Linear, &[f64::NAN], 0.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn spec_round_trip() {
        let mix = two_component();
        let spec = mix.to_spec(5).unwrap();
        let back = GaussianMixture::from_spec(&MixtureSpec::from_json(&spec.to_json().unwrap()).unwrap())
            .unwrap();
        assert_eq!(mix, back);
    }

    #[test]
    fn rk4_matches_analytic_linear_gaussian_flow() {
        let mix = std_normal_1d();
        for &(z, t, r) in &[(1.3, 1.0, 0.0), (-0.6, 0.8, 0.1), (2.0, 0.5, 0.45)] {
            let sol = mix.solve_flow_ode(Schedule::Linear, &[z], t, r, ORACLE_STEPS).unwrap();
            let expected = linear_gaussian_flow(z, t, r);
            assert!((sol.endpoint()[0] - expected).abs() <= 1e-8);
            assert_eq!(sol.times.len(), ORACLE_STEPS + 1);
            assert_eq!(*sol.times.last().unwrap(), r);
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let mix = two_component();
        let z = [0.5, 1.0];
        let ends: Vec<Vec<f64>> = [16, 32, 64]
            .iter()
            .map(|&n| mix.solve_flow_ode(Schedule::Trig, &z, 1.0, 0.0, n).unwrap().endpoint().to_vec())
            .collect();
        let reference = mix.solve_flow_ode(Schedule::Trig, &z, 1.0, 0.0, 4096).unwrap();
        let e1 = max_abs_diff(&ends[0], reference.endpoint());
        let e2 = max_abs_diff(&ends[1], reference.endpoint());
        let e3 = max_abs_diff(&ends[2], reference.endpoint());
        let ratio = max_abs_diff(&ends[0], &ends[1]) / max_abs_diff(&ends[1], &ends[2]);
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
        let order = crate::stats::loglog_fit(&[16.0, 32.0, 64.0], &[e1, e2, e3]).unwrap();
        assert!((-4.5..=-3.5).contains(&order.slope), "slope {}", order.slope);
    }

    #[test]
    fn tiny_interval_leaves_state_unchanged() {
        let mix = two_component();
        let z = [0.5, 1.0];
        let sol = mix.solve_flow_ode(Schedule::Trig, &z, 0.5 + 1e-9, 0.5, 16).unwrap();
        assert!(max_abs_diff(sol.endpoint(), &z) <= 1e-8);
    }

    #[test]
    fn solver_preconditions() {
        let mix = std_normal_1d();
        assert!(matches!(
            mix.solve_flow_ode(Schedule::Linear, &[0.0], 0.5, 0.2, 8),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            mix.average_velocity(Schedule::Linear, &[0.0], 0.5, 0.5, 64),
            Err(Error::DegenerateInterval(_))
        ));
    }

    #[test]
    fn average_velocity_boundary_and_analytic() {
        let mix = std_normal_1d();
        let z = [1.1];
        let vb = mix.average_velocity(Schedule::Linear, &z, 1.0, 0.0, ORACLE_STEPS).unwrap();
        let z0 = linear_gaussian_flow(1.1, 1.0, 0.0);
        assert!((vb[0] - (1.1 - z0)).abs() <= 1e-8);

        let mix = two_component();
        let z = [0.3, -0.4];
        for s in Schedule::ALL {
            let v = mix.marginal_velocity(s, &z, 0.6).unwrap();
            let vb = mix.average_velocity(s, &z, 0.6, 0.6 - 1e-6, 16).unwrap();
            assert!(max_abs_diff(&v, &vb) <= 1e-4, "{s}");
            let a = mix.marginal_acceleration(s, &z, 0.6).unwrap();
            let ab = mix.average_acceleration(s, &z, 0.6, 0.6 - 1e-6, 16).unwrap();
            assert!(max_abs_diff(&a, &ab) <= 1e-4, "{s}");
        }
    }

    #[test]
    fn linear_average_acceleration_vanishes() {
        let mix = two_component();
        let ab = mix.average_acceleration(Schedule::Linear, &[0.1, 0.2], 0.9, 0.1, 64).unwrap();
        assert!(ab.iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn poly2_average_acceleration_matches_dense_quadrature() {
        let mix = GaussianMixture::single(vec![0.5], vec![0.4]).unwrap();
        let (z, t, r) = ([0.9], 0.85, 0.15);
        let ab = mix.average_acceleration(Schedule::Poly2, &z, t, r, ORACLE_STEPS).unwrap()[0];
        // Dense trapezoid-free oracle: 10⁵ Simpson panels of 2(E[x|z] − E[ε|z])
        // along an independently integrated fine path.
        let panels = 100_000;
        let sol = mix.solve_flow_ode(Schedule::Poly2, &z, t, r, 2 * panels).unwrap();
        let h = (t - r) / (2 * panels) as f64;
        let mut acc = 0.0;
        for (i, (zi, &ti)) in sol.states.iter().zip(&sol.times).enumerate() {
            let p = mix.posterior(Schedule::Poly2, zi, ti).unwrap();
            let f = 2.0 * (p.mean_x[0] - p.mean_eps[0]);
            let w = if i == 0 || i == 2 * panels { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f;
        }
        let oracle = acc * h / 3.0 / (t - r);
        assert!((ab - oracle).abs() <= 1e-6, "{ab} vs {oracle}");
    }

    #[test]
    fn consistency_residuals_small() {
        let mix = two_component();
        let z = [0.8, -0.3];
        let lin = mix.consistency_report(Schedule::Linear, &z, 0.1, 0.4, 0.9, ORACLE_STEPS).unwrap();
        assert!(lin.velocity <= 1e-10 && lin.acceleration <= 1e-10, "{lin:?}");
        let trig = mix.consistency_report(Schedule::Trig, &z, 0.2, 0.55, 0.95, 4096).unwrap();
        assert!(trig.velocity <= 1e-8, "{trig:?}");
        let poly = mix.consistency_report(Schedule::Poly2, &z, 0.05, 0.3, 0.7, 4096).unwrap();
        assert!(poly.acceleration <= 1e-8, "{poly:?}");
    }

    #[test]
    fn path_acceleration_matches_finite_difference_along_flow() {
        let mix = two_component();
        let z = [0.6, 0.4];
        let t = 0.55;
        let pa = mix.path_acceleration(Schedule::Trig, &z, t).unwrap();
        let v = mix.marginal_velocity(Schedule::Trig, &z, t).unwrap();
        let h = 1e-5;
        let zp: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let zm: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let vp = mix.marginal_velocity(Schedule::Trig, &zp, t + h).unwrap();
        let vm = mix.marginal_velocity(Schedule::Trig, &zm, t - h).unwrap();
        for j in 0..2 {
            let fd = (vp[j] - vm[j]) / (2.0 * h);
            assert!((pa[j] - fd).abs() < 1e-7, "{} vs {fd}", pa[j]);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_centered() {
        let mix = two_component();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let x = mix.sample_data(&mut a);
            assert_eq!(x, mix.sample_data(&mut b));
            mean[0] += x[0] / n as f64;
            mean[1] += x[1] / n as f64;
        }
        // Per-axis std is sqrt(4 + 0.3) and sqrt(0.3).
        assert!(mean[0].abs() < 3.0 * (4.3f64 / n as f64).sqrt());
        assert!(mean[1].abs() < 3.0 * (0.3f64 / n as f64).sqrt());
    }
}
