use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Variance schedule with its cumulative products. Index `s - 1` holds step
/// `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta_first: f64,
    pub beta_last: f64,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.steps(),
            beta_first: self.beta_first,
            beta_last: self.beta_last,
        }
    }
}

/// The three numbers a schedule is rebuilt from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_first: f64,
    pub beta_last: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_first: 1e-4,
            beta_last: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(self) -> Result<NoiseSchedule, DiffusionError> {
        make_schedule(self.steps, self.beta_first, self.beta_last)
    }
}

/// Linearly spaced betas from `beta_first` to `beta_last` over `steps`.
pub fn make_schedule(
    steps: usize,
    beta_first: f64,
    beta_last: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::Schedule(
            "step count must be at least 1".into(),
        ));
    }
    if !(beta_first > 0.0 && beta_first <= beta_last && beta_last < 1.0) {
        return Err(DiffusionError::Schedule(format!(
            "need 0 < beta_first <= beta_last < 1, got {beta_first} and {beta_last}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_first
            } else {
                beta_first + (beta_last - beta_first) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        beta_first,
        beta_last,
        beta,
        alpha,
        alpha_bar,
    })
}

/// Closed-form corruption `sqrt(abar_s) x0 + sqrt(1 - abar_s) eps` at step
/// `s` in `1..=S`.
pub fn forward_diffuse(x0: &[f64], s: usize, eps: &[f64], schedule: &NoiseSchedule) -> Vec<f64> {
    assert!(
        (1..=schedule.steps()).contains(&s),
        "step {s} outside 1..={}",
        schedule.steps()
    );
    assert_eq!(x0.len(), eps.len(), "signal and noise lengths differ");
    let ab = schedule.alpha_bar[s - 1];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}
