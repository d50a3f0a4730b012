//! Cosine-annealing learning-rate schedules, with and without warm restarts.

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// `eta_min + (eta_max - eta_min) * (1 + cos(pi * t_cur / t_i)) / 2`.
pub fn cosine_lr(eta_min: f64, eta_max: f64, t_cur: f64, t_i: f64) -> f64 {
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (core::f64::consts::PI * t_cur / t_i).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// Single cosine arc over the whole run.
    Calr { epochs: f64 },
    /// Repeated cosine arcs: cycle i spans `t0 * mult^i` epochs.
    Calwr { t0: f64, mult: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub eta_min: f64,
    pub eta_max: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, eta_min: f64, eta_max: f64) -> Result<Self> {
        if !(eta_min >= 0.0 && eta_max > eta_min) {
            return Err(Error::Invalid(alloc::format!(
                "need eta_max > eta_min >= 0, got {eta_max} and {eta_min}"
            )));
        }
        match kind {
            ScheduleKind::Calr { epochs } => {
                if !(epochs > 0.0) {
                    return Err(Error::Invalid("schedule span must be positive".into()));
                }
            }
            ScheduleKind::Calwr { t0, mult } => {
                if !(t0 >= 1.0) || !(mult >= 1.0) {
                    return Err(Error::Invalid(
                        "warm restarts need t0 >= 1 and mult >= 1".into(),
                    ));
                }
            }
        }
        Ok(Schedule { kind, eta_min, eta_max })
    }

    /// Learning rate at fractional epoch `progress` from the start of the
    /// run. Cycle boundaries restart at `eta_max`.
    pub fn lr_at(&self, progress: f64) -> Result<f64> {
        if !(progress >= 0.0) {
            return Err(Error::Invalid(alloc::format!(
                "schedule progress must be non-negative, got {progress}"
            )));
        }
        match self.kind {
            ScheduleKind::Calr { epochs } => {
                let t = progress.min(epochs);
                Ok(cosine_lr(self.eta_min, self.eta_max, t, epochs))
            }
            ScheduleKind::Calwr { t0, mult } => {
                let (t_cur, t_i) = cycle_position(progress, t0, mult);
                Ok(cosine_lr(self.eta_min, self.eta_max, t_cur, t_i))
            }
        }
    }
}

/// Position inside the current warm-restart cycle: (epochs into the cycle,
/// cycle length).
fn cycle_position(progress: f64, t0: f64, mult: f64) -> (f64, f64) {
    let mut start = 0.0;
    let mut t_i = t0;
    // Each iteration consumes one full cycle; progress is finite so this
    // terminates (mult >= 1 and t_i >= 1).
    while progress >= start + t_i {
        start += t_i;
        t_i *= mult;
    }
    (progress - start, t_i)
}

/// Epochs at which a warm-restart schedule begins a new cycle (excluding 0),
/// up to and including `horizon`.
pub fn restart_epochs(t0: f64, mult: f64, horizon: f64) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec::Vec::new();
    let mut next = t0;
    let mut t_i = t0;
    while next <= horizon {
        out.push(next);
        t_i *= mult;
        next += t_i;
    }
    out
}
