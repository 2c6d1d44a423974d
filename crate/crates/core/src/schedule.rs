//! Interpolation schedules `z_t = α(t)·x + β(t)·ε` and the closed-form
//! per-sample (conditional) quantities derived from them.
//!
//! Every schedule has an exact antiderivative of its velocity and
//! acceleration, so averages over `[r, t]` are computed by telescoping
//! rather than quadrature.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// `α = 1 − t`, `β = t`. Zero acceleration.
    Linear,
    /// `α = cos(πt/2)`, `β = sin(πt/2)`.
    Trig,
    /// `α = (1 − t)²`, `β = 1 − (1 − t)²`. Constant acceleration.
    Poly2,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [Schedule::Linear, Schedule::Trig, Schedule::Poly2];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Linear => "linear",
            Schedule::Trig => "trig",
            Schedule::Poly2 => "poly2",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::Linear),
            "trig" => Ok(Schedule::Trig),
            "poly2" => Ok(Schedule::Poly2),
            other => Err(Error::param("schedule", format!("unknown schedule `{other}`"))),
        }
    }
}

/// `(α, β)` and their first two time derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients<T = f64> {
    pub alpha: T,
    pub beta: T,
    pub d_alpha: T,
    pub d_beta: T,
    pub dd_alpha: T,
    pub dd_beta: T,
}

impl Schedule {
    /// Evaluates the schedule at `t ∈ [0, 1]`.
    pub fn eval(self, t: f64) -> Result<Coefficients> {
        check_time(t)?;
        Ok(self.coefficients(t))
    }

    /// Unchecked evaluation, generic so a dual-valued `t` carries time
    /// derivatives of every coefficient.
    pub fn coefficients<T: Real>(self, t: T) -> Coefficients<T> {
        match self {
            Schedule::Linear => Coefficients {
                alpha: -t + 1.0,
                beta: t,
                d_alpha: T::cst(-1.0),
                d_beta: T::one(),
                dd_alpha: T::zero(),
                dd_beta: T::zero(),
            },
            Schedule::Trig => {
                let theta = t * FRAC_PI_2;
                let (c, s) = (theta.cos(), theta.sin());
                let w = FRAC_PI_2;
                Coefficients {
                    alpha: c,
                    beta: s,
                    d_alpha: s * -w,
                    d_beta: c * w,
                    dd_alpha: c * -(w * w),
                    dd_beta: s * -(w * w),
                }
            }
            Schedule::Poly2 => {
                let u = -t + 1.0;
                Coefficients {
                    alpha: u * u,
                    beta: -(u * u) + 1.0,
                    d_alpha: u * -2.0,
                    d_beta: u * 2.0,
                    dd_alpha: T::cst(2.0),
                    dd_beta: T::cst(-2.0),
                }
            }
        }
    }
}

/// Parameters of the Gaussian noise `ε ~ N(μ·1, σ²·I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for Noise {
    fn default() -> Self {
        Self { mu: 0.0, sigma: 1.0 }
    }
}

impl Noise {
    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::param("noise.mu", "must be finite"));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::param("noise.sigma", "must be positive"));
        }
        Ok(())
    }
}

/// A data point and the noise it is paired with.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
}

impl SamplePair {
    pub fn new(x: Vec<f64>, eps: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::param("x", "dimension must be at least 1"));
        }
        check_len(x.len(), eps.len())?;
        Ok(Self { x, eps })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    fn combine(&self, a: f64, b: f64) -> Vec<f64> {
        self.x
            .iter()
            .zip(&self.eps)
            .map(|(&x, &e)| a * x + b * e)
            .collect()
    }
}

/// An ordered pair of times `0 ≤ r ≤ t ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePair {
    pub r: f64,
    pub t: f64,
}

impl TimePair {
    pub fn new(r: f64, t: f64) -> Result<Self> {
        check_time(r)?;
        check_time(t)?;
        if r > t {
            return Err(Error::Domain(format!("expected r <= t, got r={r}, t={t}")));
        }
        Ok(Self { r, t })
    }

    pub fn width(&self) -> f64 {
        self.t - self.r
    }

    fn strict_width(&self) -> Result<f64> {
        let h = self.width();
        if h > 0.0 {
            Ok(h)
        } else {
            Err(Error::DegenerateInterval(self.t))
        }
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [0, 1]")))
    }
}

pub fn trajectory_point(p: &SamplePair, s: Schedule, t: f64) -> Result<Vec<f64>> {
    let c = s.eval(t)?;
    Ok(p.combine(c.alpha, c.beta))
}

pub fn conditional_velocity(p: &SamplePair, s: Schedule, t: f64) -> Result<Vec<f64>> {
    let c = s.eval(t)?;
    Ok(p.combine(c.d_alpha, c.d_beta))
}

pub fn conditional_acceleration(p: &SamplePair, s: Schedule, t: f64) -> Result<Vec<f64>> {
    let c = s.eval(t)?;
    Ok(p.combine(c.dd_alpha, c.dd_beta))
}

/// `(z_t − z_r)/(t − r)` for the per-sample path.
pub fn conditional_average_velocity(p: &SamplePair, s: Schedule, tp: TimePair) -> Result<Vec<f64>> {
    let h = tp.strict_width()?;
    let (cr, ct) = (s.eval(tp.r)?, s.eval(tp.t)?);
    Ok(p.combine((ct.alpha - cr.alpha) / h, (ct.beta - cr.beta) / h))
}

/// `(v_t − v_r)/(t − r)` for the per-sample path.
pub fn conditional_average_acceleration(
    p: &SamplePair,
    s: Schedule,
    tp: TimePair,
) -> Result<Vec<f64>> {
    let h = tp.strict_width()?;
    let (cr, ct) = (s.eval(tp.r)?, s.eval(tp.t)?);
    Ok(p.combine((ct.d_alpha - cr.d_alpha) / h, (ct.d_beta - cr.d_beta) / h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Dual;
    use proptest::prelude::*;

    fn pair1(x: f64, e: f64) -> SamplePair {
        SamplePair::new(vec![x], vec![e]).unwrap()
    }

    /// Composite Simpson rule, used as an independent quadrature oracle.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        let n = 2 * panels;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn boundary_values() {
        for s in Schedule::ALL {
            let c0 = s.eval(0.0).unwrap();
            let c1 = s.eval(1.0).unwrap();
            assert_eq!((c0.alpha, c0.beta), (1.0, 0.0), "{s}");
            assert!(c1.alpha.abs() < 1e-16 && (c1.beta - 1.0).abs() < 1e-16, "{s}");
        }
    }

    #[test]
    fn linear_at_point_three() {
        let c = Schedule::Linear.eval(0.3).unwrap();
        assert!((c.alpha - 0.7).abs() < 1e-15);
        assert_eq!(c.beta, 0.3);
        assert_eq!((c.d_alpha, c.d_beta, c.dd_alpha, c.dd_beta), (-1.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn trig_midpoint() {
        let c = Schedule::Trig.eval(0.5).unwrap();
        assert!((c.alpha - 0.707_106_8).abs() < 1e-7);
        assert!((c.alpha - c.beta).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_time_is_domain_error() {
        assert!(matches!(Schedule::Trig.eval(1.5), Err(Error::Domain(_))));
        assert!(matches!(Schedule::Linear.eval(-1e-9), Err(Error::Domain(_))));
    }

    #[test]
    fn derivatives_agree_with_dual_evaluation() {
        for s in Schedule::ALL {
            for &t in &[0.1, 0.45, 0.9] {
                let c = s.eval(t).unwrap();
                let d = s.coefficients(Dual::variable(t));
                assert!((d.alpha.eps - c.d_alpha).abs() < 1e-14);
                assert!((d.beta.eps - c.d_beta).abs() < 1e-14);
                assert!((d.d_alpha.eps - c.dd_alpha).abs() < 1e-14);
                assert!((d.d_beta.eps - c.dd_beta).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn trajectory_examples() {
        let p = SamplePair::new(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(trajectory_point(&p, Schedule::Linear, 0.25).unwrap(), vec![0.75, 0.25]);
        for s in Schedule::ALL {
            assert_eq!(trajectory_point(&p, s, 0.0).unwrap(), p.x);
            let z1 = trajectory_point(&p, s, 1.0).unwrap();
            assert!(z1.iter().zip(&p.eps).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(matches!(
            SamplePair::new(vec![1.0, 2.0], vec![0.0]),
            Err(Error::Shape { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn velocity_examples() {
        let p = pair1(0.4, -1.1);
        let v = conditional_velocity(&p, Schedule::Linear, 0.77).unwrap();
        assert!((v[0] - (-1.1 - 0.4)).abs() < 1e-15);
        let v = conditional_velocity(&p, Schedule::Poly2, 0.0).unwrap();
        assert!((v[0] - (-2.0 * 0.4 + 2.0 * -1.1)).abs() < 1e-15);
        let v = conditional_velocity(&pair1(1.0, 0.0), Schedule::Trig, 0.5).unwrap();
        assert!((v[0] + 1.1107).abs() < 1e-4);
    }

    #[test]
    fn acceleration_examples() {
        let p = pair1(0.4, -1.1);
        assert_eq!(conditional_acceleration(&p, Schedule::Linear, 0.3).unwrap(), vec![0.0]);
        let a = conditional_acceleration(&p, Schedule::Poly2, 0.6).unwrap();
        assert!((a[0] - (0.8 + 2.2)).abs() < 1e-15);
        let a = conditional_acceleration(&pair1(1.0, 0.0), Schedule::Trig, 0.0).unwrap();
        assert!((a[0] + FRAC_PI_2 * FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn average_velocity_examples() {
        let p = pair1(0.4, -1.1);
        let tp = TimePair::new(0.2, 0.9).unwrap();
        let vb = conditional_average_velocity(&p, Schedule::Linear, tp).unwrap();
        assert!((vb[0] + 1.5).abs() < 1e-14);
        let full = TimePair::new(0.0, 1.0).unwrap();
        let vb = conditional_average_velocity(&pair1(1.0, 0.0), Schedule::Poly2, full).unwrap();
        assert!((vb[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn average_fields_match_simpson_quadrature() {
        let p = pair1(0.8, -0.3);
        let tp = TimePair::new(0.2, 0.8).unwrap();
        let vb = conditional_average_velocity(&p, Schedule::Trig, tp).unwrap()[0];
        let q = simpson(
            |t| conditional_velocity(&p, Schedule::Trig, t).unwrap()[0],
            0.2,
            0.8,
            10_000,
        ) / 0.6;
        assert!((vb - q).abs() <= 1e-12, "{vb} vs {q}");

        let tp = TimePair::new(0.1, 0.9).unwrap();
        let ab = conditional_average_acceleration(&p, Schedule::Trig, tp).unwrap()[0];
        let q = simpson(
            |t| conditional_acceleration(&p, Schedule::Trig, t).unwrap()[0],
            0.1,
            0.9,
            10_000,
        ) / 0.8;
        assert!((ab - q).abs() <= 1e-12, "{ab} vs {q}");
    }

    #[test]
    fn average_acceleration_examples() {
        let p = pair1(0.4, -1.1);
        let tp = TimePair::new(0.3, 0.6).unwrap();
        assert_eq!(
            conditional_average_acceleration(&p, Schedule::Linear, tp).unwrap(),
            vec![0.0]
        );
        let ab = conditional_average_acceleration(&p, Schedule::Poly2, tp).unwrap();
        assert!((ab[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn degenerate_interval_is_error() {
        let p = pair1(1.0, 0.0);
        let tp = TimePair::new(0.4, 0.4).unwrap();
        assert!(matches!(
            conditional_average_velocity(&p, Schedule::Trig, tp),
            Err(Error::DegenerateInterval(_))
        ));
        assert!(matches!(
            conditional_average_acceleration(&p, Schedule::Trig, tp),
            Err(Error::DegenerateInterval(_))
        ));
        assert!(TimePair::new(0.5, 0.4).is_err());
    }

    #[test]
    fn boundary_limit_is_first_order() {
        let p = pair1(0.9, 0.2);
        let t = 0.6;
        let v = conditional_velocity(&p, Schedule::Trig, t).unwrap()[0];
        let hs = [1e-2, 1e-3, 1e-4, 1e-5];
        let errs: Vec<f64> = hs
            .iter()
            .map(|&h| {
                let tp = TimePair::new(t - h, t).unwrap();
                (conditional_average_velocity(&p, Schedule::Trig, tp).unwrap()[0] - v).abs()
            })
            .collect();
        let fit = crate::stats::loglog_fit(&hs, &errs).unwrap();
        assert!(fit.slope >= 0.9, "slope {}", fit.slope);
    }

    fn schedule_strategy() -> impl Strategy<Value = Schedule> {
        prop_oneof![Just(Schedule::Linear), Just(Schedule::Trig), Just(Schedule::Poly2)]
    }

    proptest! {
        #[test]
        fn additive_consistency(
            s in schedule_strategy(),
            x in -3.0..3.0f64, e in -3.0..3.0f64,
            a in 0.0..1.0f64, b in 0.0..1.0f64, c in 0.0..1.0f64,
        ) {
            let mut ts = [a, b, c];
            ts.sort_by(f64::total_cmp);
            let [r, m, t] = ts;
            prop_assume!(m - r > 1e-6 && t - m > 1e-6);
            let p = pair1(x, e);
            let tp = |a, b| TimePair::new(a, b).unwrap();
            let lhs = (t - r) * conditional_average_velocity(&p, s, tp(r, t)).unwrap()[0];
            let rhs = (m - r) * conditional_average_velocity(&p, s, tp(r, m)).unwrap()[0]
                + (t - m) * conditional_average_velocity(&p, s, tp(m, t)).unwrap()[0];
            prop_assert!((lhs - rhs).abs() <= 1e-12);
            let lhs = (t - r) * conditional_average_acceleration(&p, s, tp(r, t)).unwrap()[0];
            let rhs = (m - r) * conditional_average_acceleration(&p, s, tp(r, m)).unwrap()[0]
                + (t - m) * conditional_average_acceleration(&p, s, tp(m, t)).unwrap()[0];
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn displacement_and_velocity_increment(
            s in schedule_strategy(),
            x in -3.0..3.0f64, e in -3.0..3.0f64,
            a in 0.0..1.0f64, b in 0.0..1.0f64,
        ) {
            let (r, t) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(t - r > 1e-6);
            let p = pair1(x, e);
            let tp = TimePair::new(r, t).unwrap();
            let disp = trajectory_point(&p, s, t).unwrap()[0] - trajectory_point(&p, s, r).unwrap()[0];
            let vb = conditional_average_velocity(&p, s, tp).unwrap()[0];
            prop_assert!(((t - r) * vb - disp).abs() <= 1e-12);
            let dv = conditional_velocity(&p, s, t).unwrap()[0] - conditional_velocity(&p, s, r).unwrap()[0];
            let ab = conditional_average_acceleration(&p, s, tp).unwrap()[0];
            prop_assert!(((t - r) * ab - dv).abs() <= 1e-12);
        }
    }
}
