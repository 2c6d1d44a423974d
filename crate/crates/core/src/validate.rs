//! Invariant suites over the schedules, the mixture oracle, and the
//! samplers, collected into a pass/fail report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mixture::{GaussianMixture, ORACLE_STEPS, REFERENCE_STEPS};
use crate::par;
use crate::sampler::{
    convergence_order, draw_noise, euler_first_order, one_step_first_order, ErrorMode,
    OracleAverage, OracleInstantaneous, Order, TimeGrid,
};
use crate::schedule::{
    conditional_average_acceleration, conditional_average_velocity, trajectory_point, SamplePair,
    Schedule, TimePair,
};
use crate::stats;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Deliberate defects used to check that the suites can fail.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    #[default]
    None,
    /// Flips the sign of every oracle `ā`.
    NegateAverageAcceleration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// `None` when the quantity is not applicable (e.g. an exact result).
    pub value: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, upper: f64) -> Self {
        Self::within(name, value, None, Some(upper))
    }

    pub fn at_least(name: impl Into<String>, value: f64, lower: f64) -> Self {
        Self::within(name, value, Some(lower), None)
    }

    pub fn within(name: impl Into<String>, value: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        let passed = value.is_finite()
            && lower.is_none_or(|l| value >= l)
            && upper.is_none_or(|u| value <= u);
        Self {
            name: name.into(),
            value: Some(value),
            lower,
            upper,
            passed,
        }
    }

    /// Passes with no value: the quantity is identically exact.
    pub fn exact(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: None,
            lower: None,
            upper: None,
            passed: true,
        }
    }

    fn failed(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: None,
            lower: None,
            upper: None,
            passed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub schema_version: u32,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn new(checks: Vec<Check>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            checks,
            passed,
        }
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    /// Random `(z, r, s, t)` quadruples per schedule.
    pub points: usize,
    pub seed: u64,
    #[serde(default)]
    pub fault: Fault,
    /// Also run the sampler order suite.
    #[serde(default = "yes")]
    pub orders: bool,
}

fn yes() -> bool {
    true
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            points: 100,
            seed: 0,
            fault: Fault::None,
            orders: true,
        }
    }
}

pub const CONSISTENCY_TOL: f64 = 1e-8;
pub const CONDITIONAL_TOL: f64 = 1e-12;
pub const BOUNDARY_SLOPE_MIN: f64 = 0.9;
pub const BOUNDARY_GAPS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];
pub const ONE_STEP_TOL: f64 = 1e-6;
/// Boundary gaps at or below this mean the average field equals the
/// instantaneous one (e.g. zero acceleration on the linear schedule).
pub const EXACT_GAP: f64 = 1e-13;

fn point_at<R: Rng>(mix: &GaussianMixture, s: Schedule, t: f64, rng: &mut R) -> Result<Vec<f64>> {
    let pair = SamplePair::new(mix.sample_data(rng), mix.sample_noise(rng))?;
    trajectory_point(&pair, s, t)
}

fn sorted3<R: Rng>(rng: &mut R) -> (f64, f64, f64) {
    loop {
        let mut v = [rng.random::<f64>(), rng.random(), rng.random()];
        v.sort_by(f64::total_cmp);
        if v[1] - v[0] > 1e-3 && v[2] - v[1] > 1e-3 {
            return (v[0], v[1], v[2]);
        }
    }
}

/// Additive consistency of the closed-form conditional average fields.
pub fn conditional_suite(mix: &GaussianMixture, cfg: &ValidateConfig) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for s in Schedule::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0de);
        let (mut worst_v, mut worst_a) = (0.0_f64, 0.0_f64);
        for _ in 0..cfg.points {
            let p = SamplePair::new(mix.sample_data(&mut rng), mix.sample_noise(&mut rng))?;
            let (r, m, t) = sorted3(&mut rng);
            let tp = |a, b| TimePair::new(a, b);
            let res = |f: &dyn Fn(TimePair) -> Result<Vec<f64>>| -> Result<f64> {
                let (w, lo, hi) = (f(tp(r, t)?)?, f(tp(r, m)?)?, f(tp(m, t)?)?);
                Ok((0..w.len())
                    .map(|j| ((t - r) * w[j] - (m - r) * lo[j] - (t - m) * hi[j]).abs())
                    .fold(0.0, f64::max))
            };
            worst_v = worst_v.max(res(&|tp| conditional_average_velocity(&p, s, tp))?);
            worst_a = worst_a.max(res(&|tp| conditional_average_acceleration(&p, s, tp))?);
        }
        checks.push(Check::at_most(format!("conditional.{s}.velocity_consistency"), worst_v, CONDITIONAL_TOL));
        checks.push(Check::at_most(format!("conditional.{s}.acceleration_consistency"), worst_a, CONDITIONAL_TOL));
    }
    Ok(checks)
}

/// Additive consistency of the marginal average fields, with `z` drawn at
/// time `t` and RK4 references of [`REFERENCE_STEPS`] steps.
pub fn consistency_suite(mix: &GaussianMixture, cfg: &ValidateConfig) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for s in Schedule::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut cases = Vec::with_capacity(cfg.points);
        for _ in 0..cfg.points {
            let (r, m, t) = sorted3(&mut rng);
            cases.push((point_at(mix, s, t, &mut rng)?, r, m, t));
        }
        let res = par::map_indexed(cases.len(), |i| {
            let (z, r, m, t) = &cases[i];
            mix.consistency_report(s, z, *r, *m, *t, REFERENCE_STEPS)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let worst_v = res.iter().map(|c| c.velocity).fold(0.0, f64::max);
        let worst_a = res.iter().map(|c| c.acceleration).fold(0.0, f64::max);
        checks.push(Check::at_most(format!("mixture.{s}.velocity_consistency"), worst_v, CONSISTENCY_TOL));
        checks.push(Check::at_most(format!("mixture.{s}.acceleration_consistency"), worst_a, CONSISTENCY_TOL));
    }
    Ok(checks)
}

/// As `r → t` the average fields approach the instantaneous ones at rate
/// `t − r`; reports the log-log slope of the gap.
pub fn boundary_suite(mix: &GaussianMixture, cfg: &ValidateConfig) -> Result<Vec<Check>> {
    let sign = if cfg.fault == Fault::NegateAverageAcceleration { -1.0 } else { 1.0 };
    let points = cfg.points.clamp(1, 20);
    let mut checks = Vec::new();
    for s in Schedule::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb0d7);
        let mut cases = Vec::with_capacity(points);
        for _ in 0..points {
            let t = rng.random_range(0.2..0.95);
            cases.push((point_at(mix, s, t, &mut rng)?, t));
        }
        let mut gap_v = vec![0.0; BOUNDARY_GAPS.len()];
        let mut gap_a = vec![0.0; BOUNDARY_GAPS.len()];
        for (k, &delta) in BOUNDARY_GAPS.iter().enumerate() {
            let per = par::map_indexed(cases.len(), |i| -> Result<(f64, f64)> {
                let (z, t) = &cases[i];
                let inst = mix.fields(s, z, *t)?;
                let avg = mix.average_fields(s, z, *t, t - delta, ORACLE_STEPS)?;
                let a: Vec<f64> = avg.a.iter().map(|v| sign * v).collect();
                Ok((stats::max_abs_diff(&avg.v, &inst.v), stats::max_abs_diff(&a, &inst.a)))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            gap_v[k] = per.iter().map(|p| p.0).sum::<f64>() / points as f64;
            gap_a[k] = per.iter().map(|p| p.1).sum::<f64>() / points as f64;
        }
        for (field, gaps) in [("velocity", gap_v), ("acceleration", gap_a)] {
            let name = format!("mixture.{s}.{field}_boundary_slope");
            if gaps.iter().all(|&g| g <= EXACT_GAP) {
                checks.push(Check::exact(name));
                continue;
            }
            checks.push(match stats::loglog_fit(&BOUNDARY_GAPS, &gaps) {
                Ok(fit) => Check::at_least(name, fit.slope, BOUNDARY_SLOPE_MIN),
                Err(_) => Check::failed(name),
            });
        }
    }
    Ok(checks)
}

/// Single-Gaussian data on the trig schedule used by the sampler suite.
pub fn order_study_mixture() -> Result<GaussianMixture> {
    GaussianMixture::single(vec![1.0, -0.5], vec![0.25, 0.5])
}

pub const ORDER_STEPS: [usize; 5] = [4, 8, 16, 32, 64];

/// Local and global orders with instantaneous oracle fields, and the
/// step-count independence of the oracle average field.
pub fn sampler_suite(cfg: &ValidateConfig) -> Result<Vec<Check>> {
    let mix = order_study_mixture()?;
    let s = Schedule::Trig;
    let starts = draw_noise(mix.noise(), mix.dim(), 8, cfg.seed ^ 0x5a);
    let inst = OracleInstantaneous { mixture: &mix, schedule: s };
    let mut checks = Vec::new();
    let bands = [
        (Order::First, ErrorMode::Local, "local_first_order", 1.7, 2.3),
        (Order::Second, ErrorMode::Local, "local_second_order", 2.6, 3.4),
        (Order::First, ErrorMode::Global, "global_first_order", 0.8, 1.2),
        (Order::Second, ErrorMode::Global, "global_second_order", 1.7, 2.3),
    ];
    for (order, mode, name, lo, hi) in bands {
        let rep = convergence_order(&inst, order, mode, &mix, s, &starts, &ORDER_STEPS)?;
        let name = format!("sampler.trig.{name}_slope");
        checks.push(match rep.slope {
            Some(slope) => Check::within(name, slope, Some(lo), Some(hi)),
            None => Check::failed(name),
        });
    }
    let avg = OracleAverage::new(&mix, s);
    let one = one_step_first_order(&avg, &starts)?;
    let many = euler_first_order(&avg, &starts, &TimeGrid::uniform(16)?)?;
    let gap = one
        .iter()
        .zip(&many)
        .map(|(a, b)| stats::max_abs_diff(a, b))
        .fold(0.0, f64::max);
    checks.push(Check::at_most("sampler.trig.one_vs_sixteen_steps", gap, ONE_STEP_TOL));
    Ok(checks)
}

/// Every suite, in a fixed order.
pub fn run_all(mix: &GaussianMixture, cfg: &ValidateConfig) -> Result<ValidationReport> {
    let mut checks = conditional_suite(mix, cfg)?;
    checks.extend(consistency_suite(mix, cfg)?);
    checks.extend(boundary_suite(mix, cfg)?);
    if cfg.orders {
        checks.extend(sampler_suite(cfg)?);
    }
    Ok(ValidationReport::new(checks))
}
