//! Time-indexed scalar schedules.
//!
//! Houses the base noise schedule (decay factor and diffusion rate), the
//! self-conditioning perturbation schedule (signal shrink and noise gain),
//! the milestone-stepped timestep scaling factor used by confidence-driven
//! noise scaling, and the optimizer learning-rate schedule. All evaluations
//! are pure functions of immutable configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp on the squared decay factor so it stays strictly positive.
pub const ALPHA_BAR_MIN: f64 = 1e-5;
/// The cosine form decays so fast near t = 1 that a 1e-5 floor flattens the
/// last few grid points of a 1,000-point sweep; a lower floor keeps alpha
/// strictly decreasing there while alpha(1) stays well under 1e-2.
pub const ALPHA_BAR_MIN_COSINE: f64 = 1e-6;
/// Upper clamp keeping the diffusion rate strictly positive near t = 0.
pub const ALPHA_BAR_MAX: f64 = 1.0 - 1e-5;

/// Default minimum diffusion time.
pub const DEFAULT_T_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Sqrt,
    Linear,
    Cosine,
}

/// Variance-preserving noise schedule: alpha(t)^2 + sigma(t)^2 = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Small time shift keeping the origin away from the singular point.
    pub shift: f64,
    /// Minimum diffusion time epsilon.
    pub t_floor: f64,
    /// Clamp bounds on the squared decay factor.
    pub alpha_bar_bounds: (f64, f64),
}

const LINEAR_BETA_MIN: f64 = 0.1;
const LINEAR_BETA_MAX: f64 = 20.0;

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind) -> Self {
        let shift = match kind {
            ScheduleKind::Sqrt => 1e-4,
            ScheduleKind::Linear => 0.0,
            ScheduleKind::Cosine => 8e-3,
        };
        let floor = match kind {
            ScheduleKind::Cosine => ALPHA_BAR_MIN_COSINE,
            _ => ALPHA_BAR_MIN,
        };
        NoiseSchedule {
            kind,
            shift,
            t_floor: DEFAULT_T_FLOOR,
            alpha_bar_bounds: (floor, ALPHA_BAR_MAX),
        }
    }

    pub fn with_t_floor(mut self, t_floor: f64) -> Self {
        self.t_floor = t_floor;
        self
    }

    /// Squared decay factor before clamping. Defined for any t in [0, 1].
    pub fn alpha_bar_raw(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Sqrt => 1.0 - (t + self.shift).sqrt(),
            ScheduleKind::Linear => {
                (-LINEAR_BETA_MIN * t - 0.5 * (LINEAR_BETA_MAX - LINEAR_BETA_MIN) * t * t).exp()
            }
            ScheduleKind::Cosine => {
                let s = self.shift;
                let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
                let num = f(t);
                let den = f(0.0);
                (num * num) / (den * den)
            }
        }
    }

    fn alpha_bar(&self, t: f64) -> f64 {
        let (lo, hi) = self.alpha_bar_bounds;
        self.alpha_bar_raw(t).clamp(lo, hi)
    }

    /// (alpha(t), sigma(t)) with the clamped squared decay factor.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        if !(self.t_floor..=1.0).contains(&t) {
            return Err(Error::Domain(format!(
                "t = {t} outside schedule domain [{}, 1]",
                self.t_floor
            )));
        }
        let ab = self.alpha_bar(t);
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Transition standard deviation sigma_{t|s} for s < t:
    /// sqrt(sigma_t^2 - (alpha_t^2 / alpha_s^2) * sigma_s^2).
    pub fn sigma_t_given_s(&self, s: f64, t: f64) -> Result<f64> {
        if s >= t {
            return Err(Error::TimeOrdering { s, t });
        }
        let (alpha_s, sigma_s) = self.alpha_sigma(s)?;
        let (alpha_t, sigma_t) = self.alpha_sigma(t)?;
        let ratio = (alpha_t / alpha_s).powi(2);
        let radicand = sigma_t * sigma_t - ratio * sigma_s * sigma_s;
        if radicand < -1e-12 {
            return Err(Error::ScheduleInconsistency(format!(
                "negative transition variance {radicand} at s = {s}, t = {t}"
            )));
        }
        Ok(radicand.max(0.0).sqrt())
    }
}

/// Linear schedules for the self-conditioning perturbation factors:
/// lambda shrinks the signal term, gamma inflates the effective noise.
/// Both interpolate from their max at t = 0 to their min at t = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSchedule {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for PerturbSchedule {
    fn default() -> Self {
        PerturbSchedule {
            lambda_min: 0.90,
            lambda_max: 0.95,
            gamma_min: 0.15,
            gamma_max: 0.35,
        }
    }
}

impl PerturbSchedule {
    /// The identity perturbation: lambda = 1, gamma = 0 everywhere.
    pub fn identity() -> Self {
        PerturbSchedule {
            lambda_min: 1.0,
            lambda_max: 1.0,
            gamma_min: 0.0,
            gamma_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lambda_min && self.lambda_min <= self.lambda_max && self.lambda_max <= 1.0)
        {
            return Err(Error::Config(format!(
                "lambda anchors must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.lambda_min, self.lambda_max
            )));
        }
        if !(0.0 <= self.gamma_min && self.gamma_min <= self.gamma_max) {
            return Err(Error::Config(format!(
                "gamma anchors must satisfy 0 <= min <= max, got [{}, {}]",
                self.gamma_min, self.gamma_max
            )));
        }
        Ok(())
    }

    /// (lambda_t, gamma_t) = ((min - max) t + max, ...) for t in [0, 1].
    pub fn at(&self, t: f64) -> (f64, f64) {
        debug_assert!((0.0..=1.0).contains(&t), "perturbation time out of range");
        let lambda = (self.lambda_min - self.lambda_max) * t + self.lambda_max;
        let gamma = (self.gamma_min - self.gamma_max) * t + self.gamma_max;
        (lambda, gamma)
    }
}

/// Milestone-stepped timestep scaling for confidence-driven noise scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseScalingConfig {
    /// Ascending iteration counts ending each phase.
    pub milestones: Vec<u64>,
    /// Scaling factor per phase; the last value holds past the last milestone.
    pub scalings: Vec<f64>,
    /// Probability of applying the rescale at a given training step.
    pub apply_prob: f64,
    /// Rescaled times are clamped to this ceiling.
    pub t_ceiling: f64,
}

impl NoiseScalingConfig {
    pub fn new(milestones: Vec<u64>, scalings: Vec<f64>) -> Self {
        NoiseScalingConfig {
            milestones,
            scalings,
            apply_prob: 0.5,
            t_ceiling: 1.0 - DEFAULT_T_FLOOR,
        }
    }

    /// A configuration that never rescales (the uniform-schedule baseline).
    pub fn disabled() -> Self {
        NoiseScalingConfig {
            milestones: vec![u64::MAX],
            scalings: vec![1.0],
            apply_prob: 0.0,
            t_ceiling: 1.0 - DEFAULT_T_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.milestones.is_empty() {
            return Err(Error::Config("timestep scaling has no phases".into()));
        }
        if self.milestones.len() != self.scalings.len() {
            return Err(Error::Config(format!(
                "{} milestones but {} scalings",
                self.milestones.len(),
                self.scalings.len()
            )));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("milestones must be strictly ascending".into()));
        }
        if self.scalings.iter().any(|&b| b < 1.0) {
            return Err(Error::Config("scaling factors must all be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::Config(format!(
                "apply probability {} outside [0, 1]",
                self.apply_prob
            )));
        }
        Ok(())
    }

    /// beta(n): the scaling of the first phase whose milestone exceeds n;
    /// past the last milestone the final scaling holds.
    pub fn beta_at(&self, n: u64) -> Result<f64> {
        if self.milestones.is_empty() {
            return Err(Error::Config("timestep scaling has no phases".into()));
        }
        for (m, b) in self.milestones.iter().zip(&self.scalings) {
            if n < *m {
                return Ok(*b);
            }
        }
        Ok(*self.scalings.last().unwrap())
    }
}

/// Inverse-sqrt learning-rate schedule with linear warmup:
/// lr(n) = lr_max * min(n / warmup, sqrt(warmup / n)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub warmup: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        // Reference recipe uses 10,000 warmup steps; desk-scale runs are far
        // shorter, so the default is scaled down.
        LrSchedule {
            lr_max: 5e-4,
            warmup: 500,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, n: u64) -> f64 {
        assert!(n >= 1, "learning rate is defined for n >= 1");
        let n = n as f64;
        let w = self.warmup as f64;
        self.lr_max * (n / w).min((w / n).sqrt())
    }
}
