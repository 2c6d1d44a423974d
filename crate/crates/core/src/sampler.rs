//! One-step and multi-step generation, and empirical convergence orders.
//!
//! A step from `t_{i−1}` down to `t_i` with `h = t_i − t_{i−1} < 0` is
//!
//! ```text
//! first order:   z ← z + h·v
//! second order:  z ← z + h·v + ½h²·a
//! ```
//!
//! where `(v, a)` come from a [`FieldSource`]. Learned networks and the
//! oracle average fields are queried as `(z, r = t_i, t = t_{i−1})`; the
//! instantaneous oracle ignores `r` and evaluates at the left endpoint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::NetParams;
use crate::error::{check_len, Error, Result};
use crate::mixture::{GaussianMixture, ORACLE_STEPS, REFERENCE_STEPS};
use crate::par;
use crate::schedule::{Noise, Schedule};
use crate::stats;

/// Descending time nodes `1 ≥ t₀ > t₁ > … > t_T ≥ 0` for `T` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// `T` equal steps from 1 to 0.
    pub fn uniform(steps: usize) -> Result<Self> {
        Self::uniform_between(steps, 1.0, 0.0)
    }

    pub fn uniform_between(steps: usize, from: f64, to: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("steps", "must be at least 1"));
        }
        let h = (from - to) / steps as f64;
        let mut times: Vec<f64> = (0..steps).map(|i| from - h * i as f64).collect();
        times.push(to);
        Self::from_times(times)
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::param("grid", "needs at least two nodes"));
        }
        if times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::param("grid", "nodes must lie in [0, 1]"));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::param("grid", "nodes must be strictly decreasing"));
        }
        Ok(Self { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }
}

/// Generated states with the seed and grid that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub states: Vec<Vec<f64>>,
    pub seed: u64,
    pub grid: TimeGrid,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.states.first() {
            let header: Vec<String> = (0..first.len()).map(|j| format!("x{j}")).collect();
            out.push_str(&header.join(","));
            out.push('\n');
        }
        for row in &self.states {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// `n` draws of `z₁ ~ N(μ·1, σ²I)` in dimension `d`.
pub fn draw_noise(noise: Noise, d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    noise.mu + noise.sigma * e
                })
                .collect()
        })
        .collect()
}

/// Velocity and acceleration fields queried by the samplers.
pub trait FieldSource: Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, z: &[f64], r: f64, t: f64) -> Result<Vec<f64>>;
    fn acceleration(&self, z: &[f64], r: f64, t: f64) -> Result<Vec<f64>>;
}

/// Learned `u₁` and optional `u₂`.
#[derive(Debug, Clone, Copy)]
pub struct NetworkFields<'a> {
    pub velocity: &'a NetParams,
    pub acceleration: Option<&'a NetParams>,
}

impl FieldSource for NetworkFields<'_> {
    fn dim(&self) -> usize {
        self.velocity.output_dim()
    }

    fn velocity(&self, z: &[f64], r: f64, t: f64) -> Result<Vec<f64>> {
        self.velocity.forward(z, r, t)
    }

    fn acceleration(&self, z: &[f64], r: f64, t: f64) -> Result<Vec<f64>> {
        match self.acceleration {
            Some(net) => net.forward(z, r, t),
            None => Err(Error::Sampling("no acceleration network loaded".into())),
        }
    }
}

/// Marginal average fields `v̄`, `ā` of a mixture, from an RK4 solve.
#[derive(Debug, Clone, Copy)]
pub struct OracleAverage<'a> {
    pub mixture: &'a GaussianMixture,
    pub schedule: Schedule,
    pub steps: usize,
}

impl<'a> OracleAverage<'a> {
    pub fn new(mixture: &'a GaussianMixture, schedule: Schedule) -> Self {
        Self {
            mixture,
            schedule,
            steps: ORACLE_STEPS,
        }
    }
}

impl FieldSource for OracleAverage<'_> {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn velocity(&self, z: &[f64], r: f64, t: f64) -> Result<Vec<f64>> {
        if r == t {
            return self.mixture.marginal_velocity(self.schedule, z, t);
        }
        self.mixture
            .average_velocity(self.schedule, z, t, r, self.steps)
    }

    fn acceleration(&self, z: &[f64], r: f64, t: f64) -> Result<Vec<f64>> {
        if r == t {
            return self.mixture.marginal_acceleration(self.schedule, z, t);
        }
        self.mixture
            .average_acceleration(self.schedule, z, t, r, self.steps / 2)
    }
}

/// Instantaneous flow velocity and its total time derivative along the
/// flow, both at `t`.
#[derive(Debug, Clone, Copy)]
pub struct OracleInstantaneous<'a> {
    pub mixture: &'a GaussianMixture,
    pub schedule: Schedule,
}

impl FieldSource for OracleInstantaneous<'_> {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn velocity(&self, z: &[f64], _r: f64, t: f64) -> Result<Vec<f64>> {
        self.mixture.marginal_velocity(self.schedule, z, t)
    }

    fn acceleration(&self, z: &[f64], _r: f64, t: f64) -> Result<Vec<f64>> {
        self.mixture.path_acceleration(self.schedule, z, t)
    }
}

/// Field that is identically zero.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField(pub usize);

impl FieldSource for ZeroField {
    fn dim(&self) -> usize {
        self.0
    }

    fn velocity(&self, _z: &[f64], _r: f64, _t: f64) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.0])
    }

    fn acceleration(&self, _z: &[f64], _r: f64, _t: f64) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.0])
    }
}

/// Pairs the velocity of one source with the acceleration of another.
#[derive(Clone, Copy)]
pub struct Combined<'a> {
    pub velocity: &'a dyn FieldSource,
    pub acceleration: &'a dyn FieldSource,
}

impl FieldSource for Combined<'_> {
    fn dim(&self) -> usize {
        self.velocity.dim()
    }

    fn velocity(&self, z: &[f64], r: f64, t: f64) -> Result<Vec<f64>> {
        self.velocity.velocity(z, r, t)
    }

    fn acceleration(&self, z: &[f64], r: f64, t: f64) -> Result<Vec<f64>> {
        self.acceleration.acceleration(z, r, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    First,
    Second,
}

impl std::str::FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "first" => Ok(Order::First),
            "2" | "second" => Ok(Order::Second),
            _ => Err(Error::param("order", format!("unknown order `{s}`"))),
        }
    }
}

fn integrate_one(
    field: &dyn FieldSource,
    z: &[f64],
    grid: &TimeGrid,
    order: Order,
) -> Result<Vec<f64>> {
    check_len(field.dim(), z.len())?;
    let mut state = z.to_vec();
    for (i, w) in grid.times.windows(2).enumerate() {
        let (t, r) = (w[0], w[1]);
        let h = r - t;
        let v = field.velocity(&state, r, t)?;
        check_len(state.len(), v.len())?;
        let a = match order {
            Order::First => None,
            Order::Second => Some(field.acceleration(&state, r, t)?),
        };
        for (j, s) in state.iter_mut().enumerate() {
            *s += h * v[j];
        }
        if let Some(a) = a {
            check_len(state.len(), a.len())?;
            for (s, ai) in state.iter_mut().zip(&a) {
                *s += 0.5 * h * h * ai;
            }
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: i + 1 });
        }
    }
    Ok(state)
}

fn integrate(
    field: &dyn FieldSource,
    z: &[Vec<f64>],
    grid: &TimeGrid,
    order: Order,
) -> Result<Vec<Vec<f64>>> {
    par::map_indexed(z.len(), |i| integrate_one(field, &z[i], grid, order))
        .into_iter()
        .collect()
}

/// `z₀ = z₁ − u₁(z₁, 0, 1)` for each row.
pub fn one_step_first_order(field: &dyn FieldSource, z1: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let out = par::map_indexed(z1.len(), |i| {
        check_len(field.dim(), z1[i].len())?;
        let u = field.velocity(&z1[i], 0.0, 1.0)?;
        let z0: Vec<f64> = z1[i].iter().zip(&u).map(|(z, u)| z - u).collect();
        if z0.iter().all(|v| v.is_finite()) {
            Ok(z0)
        } else {
            Err(Error::Sampling(format!("non-finite one-step output for row {i}")))
        }
    });
    out.into_iter().collect()
}

pub fn euler_first_order(
    field: &dyn FieldSource,
    z: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<Vec<Vec<f64>>> {
    integrate(field, z, grid, Order::First)
}

pub fn euler_second_order(
    field: &dyn FieldSource,
    z: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<Vec<Vec<f64>>> {
    integrate(field, z, grid, Order::Second)
}

/// Draws `n` noise rows from `seed` and integrates them over `grid`.
pub fn generate(
    field: &dyn FieldSource,
    noise: Noise,
    n: usize,
    seed: u64,
    grid: &TimeGrid,
    order: Order,
) -> Result<SampleBatch> {
    noise.validate()?;
    let z1 = draw_noise(noise, field.dim(), n, seed);
    let states = integrate(field, &z1, grid, order)?;
    Ok(SampleBatch {
        states,
        seed,
        grid: grid.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMode {
    /// One step of size `1/T` from `t = 1`.
    Local,
    /// `T` uniform steps from 1 to 0.
    Global,
}

/// Errors at or below this are treated as exact and not fitted.
pub const EXACT_ERROR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub order: Order,
    pub mode: ErrorMode,
    pub steps: Vec<usize>,
    /// Mean Euclidean endpoint error per step count.
    pub errors: Vec<f64>,
    /// Slope of `log error` against `log(1/T)`; `None` when every error is
    /// below [`EXACT_ERROR`].
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
}

/// Measures how the endpoint error of the order-`order` sampler scales with
/// the step count against an RK4 reference with [`REFERENCE_STEPS`] steps.
pub fn convergence_order(
    field: &dyn FieldSource,
    order: Order,
    mode: ErrorMode,
    mixture: &GaussianMixture,
    schedule: Schedule,
    starts: &[Vec<f64>],
    steps: &[usize],
) -> Result<ConvergenceReport> {
    if steps.len() < 4 {
        return Err(Error::Precondition("need at least four step counts".into()));
    }
    let ratio = steps[1] as f64 / steps[0] as f64;
    let geometric = steps
        .windows(2)
        .all(|w| w[0] > 0 && ((w[1] as f64 / w[0] as f64) - ratio).abs() < 1e-12 && ratio > 1.0);
    if !geometric {
        return Err(Error::Precondition("step counts must grow geometrically".into()));
    }
    if starts.is_empty() {
        return Err(Error::Precondition("no starting points".into()));
    }
    let mut errors = Vec::with_capacity(steps.len());
    for &n in steps {
        let grid = match mode {
            ErrorMode::Local => TimeGrid::uniform_between(1, 1.0, 1.0 - 1.0 / n as f64)?,
            ErrorMode::Global => TimeGrid::uniform(n)?,
        };
        let reference: Vec<Vec<f64>> = par::map_indexed(starts.len(), |i| {
            mixture
                .solve_flow_ode(schedule, &starts[i], grid.start(), grid.end(), REFERENCE_STEPS)
                .map(|sol| sol.endpoint().to_vec())
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let got = integrate(field, starts, &grid, order)?;
        let mean = got
            .iter()
            .zip(&reference)
            .map(|(g, r)| {
                let diff: Vec<f64> = g.iter().zip(r).map(|(a, b)| a - b).collect();
                stats::norm2(&diff)
            })
            .sum::<f64>()
            / starts.len() as f64;
        errors.push(mean);
    }
    let (slope, r_squared) = if errors.iter().all(|&e| e <= EXACT_ERROR) {
        (None, None)
    } else {
        let inv: Vec<f64> = steps.iter().map(|&n| 1.0 / n as f64).collect();
        let floor: Vec<f64> = errors.iter().map(|&e| e.max(f64::MIN_POSITIVE)).collect();
        let fit = stats::loglog_fit(&inv, &floor)?;
        (Some(fit.slope), Some(fit.r_squared))
    };
    Ok(ConvergenceReport {
        order,
        mode,
        steps: steps.to_vec(),
        errors,
        slope,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;

    fn gaussian() -> GaussianMixture {
        GaussianMixture::single(vec![1.0, -0.5], vec![0.25, 0.5]).unwrap()
    }

    fn starts(n: usize) -> Vec<Vec<f64>> {
        draw_noise(Noise::default(), 2, n, 7)
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::uniform(0).is_err());
        assert!(TimeGrid::from_times(vec![1.0]).is_err());
        assert!(TimeGrid::from_times(vec![1.0, 1.0]).is_err());
        assert!(TimeGrid::from_times(vec![0.5, 0.7]).is_err());
        assert!(TimeGrid::from_times(vec![1.2, 0.0]).is_err());
        let g = TimeGrid::uniform(4).unwrap();
        assert_eq!(g.times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(g.steps(), 4);
    }

    #[test]
    fn zero_field_is_identity() {
        let z = starts(5);
        assert_eq!(one_step_first_order(&ZeroField(2), &z).unwrap(), z);
        let g = TimeGrid::uniform(3).unwrap();
        assert_eq!(euler_second_order(&ZeroField(2), &z, &g).unwrap(), z);
    }

    #[test]
    fn single_euler_step_matches_one_step() {
        let net = NetParams::init(3, 2, &[4, 8, 2], Activation::Tanh).unwrap();
        let f = NetworkFields { velocity: &net, acceleration: None };
        let z = starts(6);
        let a = one_step_first_order(&f, &z).unwrap();
        let b = euler_first_order(&f, &z, &TimeGrid::uniform(1).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_acceleration_network_is_an_error() {
        let net = NetParams::init(3, 2, &[4, 2], Activation::Tanh).unwrap();
        let f = NetworkFields { velocity: &net, acceleration: None };
        let r = euler_second_order(&f, &starts(1), &TimeGrid::uniform(2).unwrap());
        assert!(matches!(r, Err(Error::Sampling(_))));
    }

    #[test]
    fn zero_acceleration_reduces_second_to_first_order() {
        let net = NetParams::init(4, 2, &[4, 8, 2], Activation::Tanh).unwrap();
        let nf = NetworkFields { velocity: &net, acceleration: None };
        let zero = ZeroField(2);
        let f = Combined { velocity: &nf, acceleration: &zero };
        let z = starts(4);
        let g = TimeGrid::uniform(5).unwrap();
        assert_eq!(
            euler_first_order(&f, &z, &g).unwrap(),
            euler_second_order(&f, &z, &g).unwrap()
        );
    }

    #[test]
    fn oracle_average_one_step_matches_rk4() {
        let mix = gaussian();
        let f = OracleAverage::new(&mix, Schedule::Trig);
        let z = starts(4);
        let one = one_step_first_order(&f, &z).unwrap();
        for (z1, z0) in z.iter().zip(&one) {
            let sol = mix.solve_flow_ode(Schedule::Trig, z1, 1.0, 0.0, REFERENCE_STEPS).unwrap();
            assert!(stats::max_abs_diff(z0, sol.endpoint()) < 1e-6);
        }
    }

    #[test]
    fn oracle_average_is_step_count_independent() {
        let mix = gaussian();
        let f = OracleAverage::new(&mix, Schedule::Trig);
        let z = starts(3);
        let base = euler_first_order(&f, &z, &TimeGrid::uniform(1).unwrap()).unwrap();
        for n in [2, 4, 8] {
            let other = euler_first_order(&f, &z, &TimeGrid::uniform(n).unwrap()).unwrap();
            for (a, b) in base.iter().zip(&other) {
                assert!(stats::max_abs_diff(a, b) < 1e-8);
            }
        }
    }

    #[test]
    fn linear_schedule_average_acceleration_vanishes() {
        // α'' = β'' = 0, so E[a | z] and its path average are zero.
        let mix = gaussian();
        let f = OracleAverage { mixture: &mix, schedule: Schedule::Linear, steps: 64 };
        let z = starts(3);
        let g = TimeGrid::uniform(4).unwrap();
        assert_eq!(
            euler_first_order(&f, &z, &g).unwrap(),
            euler_second_order(&f, &z, &g).unwrap()
        );
    }

    #[test]
    fn exact_average_field_reports_no_slope() {
        let mix = gaussian();
        let f = OracleAverage { mixture: &mix, schedule: Schedule::Trig, steps: REFERENCE_STEPS };
        let rep = convergence_order(
            &f,
            Order::First,
            ErrorMode::Global,
            &mix,
            Schedule::Trig,
            &starts(2),
            &[1, 2, 4, 8],
        )
        .unwrap();
        assert!(rep.errors.iter().all(|&e| e <= 1e-8), "{:?}", rep.errors);
        assert_eq!(rep.slope, None);
    }

    #[test]
    fn instantaneous_orders() {
        let mix = gaussian();
        let f = OracleInstantaneous { mixture: &mix, schedule: Schedule::Trig };
        let z = starts(8);
        let steps = [4, 8, 16, 32, 64];
        let run = |o, m| {
            convergence_order(&f, o, m, &mix, Schedule::Trig, &z, &steps)
                .unwrap()
                .slope
                .unwrap()
        };
        let l1 = run(Order::First, ErrorMode::Local);
        let l2 = run(Order::Second, ErrorMode::Local);
        let g1 = run(Order::First, ErrorMode::Global);
        let g2 = run(Order::Second, ErrorMode::Global);
        assert!((1.7..=2.3).contains(&l1), "{l1}");
        assert!((2.6..=3.4).contains(&l2), "{l2}");
        assert!((0.8..=1.2).contains(&g1), "{g1}");
        assert!((1.7..=2.3).contains(&g2), "{g2}");
    }

    #[test]
    fn rejects_bad_step_families() {
        let mix = gaussian();
        let f = ZeroField(2);
        let c = |s: &[usize]| {
            convergence_order(&f, Order::First, ErrorMode::Local, &mix, Schedule::Trig, &starts(1), s)
        };
        assert!(c(&[4, 8, 16]).is_err());
        assert!(c(&[4, 8, 12, 16]).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let b = SampleBatch {
            states: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            seed: 0,
            grid: TimeGrid::uniform(1).unwrap(),
        };
        let csv = b.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x0,x1");
        assert_eq!(lines.len(), 3);
    }
}
