use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrPolicy {
    /// Constant amplitude triangle wave.
    Triangular,
    /// Amplitude halves after every full cycle.
    #[default]
    Triangular2,
}

impl std::str::FromStr for LrPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triangular" => Ok(Self::Triangular),
            "triangular2" => Ok(Self::Triangular2),
            other => Err(Error::Config(format!("unknown learning-rate policy `{other}`"))),
        }
    }
}

impl std::fmt::Display for LrPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrPolicy::Triangular => "triangular",
            LrPolicy::Triangular2 => "triangular2",
        })
    }
}

/// Cyclical learning rate: a triangle wave between `base_lr` and `max_lr`
/// with half-period `step_size` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicalSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    pub step_size: usize,
    pub policy: LrPolicy,
}

impl CyclicalSchedule {
    pub fn new(base_lr: f64, max_lr: f64, step_size: usize, policy: LrPolicy) -> Result<Self> {
        if !(base_lr >= 0.0) || !(max_lr >= base_lr) || !max_lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= base ({base_lr}) <= max ({max_lr})"
            )));
        }
        if step_size == 0 {
            return Err(Error::Config("cycle step size must be >= 1".into()));
        }
        Ok(Self {
            base_lr,
            max_lr,
            step_size,
            policy,
        })
    }

    pub fn lr(&self, iteration: usize) -> f64 {
        cyclical_lr(iteration, self)
    }
}

/// `base + (max − base)·max(0, 1 − |it/step − 2·cycle − 1|)`, the amplitude
/// scaled by `2^-cycle` under [`LrPolicy::Triangular2`].
pub fn cyclical_lr(iteration: usize, schedule: &CyclicalSchedule) -> f64 {
    let step = schedule.step_size;
    let cycle = iteration / (2 * step);
    let x = (iteration as f64 / step as f64 - 2.0 * cycle as f64 - 1.0).abs();
    let mut frac = (1.0 - x).max(0.0);
    if schedule.policy == LrPolicy::Triangular2 {
        frac /= 2f64.powi(cycle.min(1023) as i32);
    }
    // Convex combination so both endpoints are hit exactly.
    schedule.base_lr * (1.0 - frac) + schedule.max_lr * frac
}
