use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::PlanError;
use crate::diffusion::{sample_with_grad, GeneratorModel, Jacobian};
use crate::rng::{indexed_rng, Stream};
use crate::simkit::{DayContext, PolicyVector, Profile, HOURS, POLICY_DIM};

/// Affine map from per-unit load to a multiple of nodal base demand:
/// `lo -> 0`, `hi -> top`, clipped to `[0, top]`. Built once from the
/// training corpus extremes so it does not depend on the policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DemandScaling {
    pub lo: f64,
    pub hi: f64,
    pub top: f64,
}

impl DemandScaling {
    pub fn from_model(model: &GeneratorModel, top: f64) -> Result<Self, PlanError> {
        let (lo, hi) = model.load_range.ok_or(PlanError::Config(
            "model carries no training load range".into(),
        ))?;
        if !(hi > lo && top > 0.0) {
            return Err(PlanError::Config(format!(
                "degenerate scaling: range [{lo}, {hi}], top {top}"
            )));
        }
        Ok(Self { lo, hi, top })
    }

    pub fn gain(&self) -> f64 {
        self.top / (self.hi - self.lo)
    }

    /// Scaled value and its derivative (zero where clipped).
    pub fn apply(&self, d: f64) -> (f64, f64) {
        let u = (d - self.lo) * self.gain();
        if u <= 0.0 {
            (0.0, 0.0)
        } else if u >= self.top {
            (self.top, 0.0)
        } else {
            (u, self.gain())
        }
    }
}

/// One sampled day: the scaled profile, its Jacobian in the policy, and the
/// nodal demand it implies.
#[derive(Clone, Debug, PartialEq)]
pub struct NodalScenario {
    pub day: usize,
    /// Multiples of nodal base demand, in `[0, top]`.
    pub scaled: Profile,
    pub scaled_jacobian: Jacobian,
    /// Hours x buses (MW).
    pub demand: Vec<Vec<f64>>,
}

impl NodalScenario {
    /// `d demand[t][b] / d policy_k = base_b * scaled_jacobian[t][k]`,
    /// contracted against `weights` (hours x buses).
    pub fn policy_gradient(&self, base: &[f64], weights: &[Vec<f64>]) -> [f64; POLICY_DIM] {
        let mut g = [0.0; POLICY_DIM];
        for t in 0..HOURS {
            let w: f64 = base.iter().zip(&weights[t]).map(|(b, w)| b * w).sum();
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += w * self.scaled_jacobian[t][k];
            }
        }
        g
    }
}

/// Draws `count` days uniformly with replacement and one noise vector each,
/// then samples scenarios with their Jacobians. Scenario `i` uses its own
/// generator, so results do not depend on thread scheduling.
pub fn scenario_batch(
    model: &GeneratorModel,
    policy: &PolicyVector,
    pool: &[DayContext],
    count: usize,
    scaling: &DemandScaling,
    base_demand: &[f64],
    seed: u64,
    iteration: u64,
) -> Result<Vec<NodalScenario>, PlanError> {
    if pool.is_empty() {
        return Err(PlanError::EmptyPool);
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_rng(seed, Stream::Plan, iteration * count as u64 + i as u64);
            let day = rng.random_range(0..pool.len());
            let eps: Profile = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let (scenario, jac) = sample_with_grad(model, policy, &pool[day], &eps)?;
            let mut scaled = [0.0; HOURS];
            let mut scaled_jacobian = [[0.0; POLICY_DIM]; HOURS];
            for t in 0..HOURS {
                let (u, du) = scaling.apply(scenario.demand[t]);
                scaled[t] = u;
                for k in 0..POLICY_DIM {
                    scaled_jacobian[t][k] = du * jac[t][k];
                }
            }
            let demand = scaled
                .iter()
                .map(|u| base_demand.iter().map(|b| u * b).collect())
                .collect();
            Ok(NodalScenario {
                day,
                scaled,
                scaled_jacobian,
                demand,
            })
        })
        .collect()
}
