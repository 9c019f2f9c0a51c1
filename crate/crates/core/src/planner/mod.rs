//! Projected stochastic gradient descent over capacity additions and the
//! free policy components, with gradients of sampled operating cost taken
//! through the scenario generator and the dispatch sensitivities.

mod batch;

pub use batch::{scenario_batch, DemandScaling, NodalScenario};

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionError, GeneratorModel};
use crate::gridopt::{
    cost_gradients, sensitivities, solve_operations, GridError, InvestmentVector, NetworkCase,
};
use crate::simkit::{DayContext, PolicyVector, SimError, POLICY_DIM};

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("invalid planner configuration: {0}")]
    Config(String),
    #[error("day pool is empty")]
    EmptyPool,
    #[error(
        "objective {objective:.6e} at iteration {iteration} exceeds {factor} times \
         the initial {initial:.6e}"
    )]
    Diverged {
        iteration: usize,
        objective: f64,
        initial: f64,
        factor: f64,
    },
    #[error("non-finite gradient at iteration {0}")]
    NonFinite(usize),
    #[error("iteration {iteration}: {source}")]
    Dispatch {
        iteration: usize,
        #[source]
        source: GridError,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("trajectory output: {0}")]
    Io(#[from] std::io::Error),
}

/// Policy components held fixed (`Some(value)`) or optimised (`None`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyPins {
    pub ev_adopt: Option<f64>,
    pub ev_flex: Option<f64>,
    pub hp_adopt: Option<f64>,
    pub hp_eff: Option<f64>,
}

impl Default for PolicyPins {
    fn default() -> Self {
        Self {
            ev_adopt: Some(1.0),
            ev_flex: None,
            hp_adopt: Some(0.0),
            hp_eff: Some(0.0),
        }
    }
}

impl PolicyPins {
    pub fn to_array(self) -> [Option<f64>; POLICY_DIM] {
        [self.ev_adopt, self.ev_flex, self.hp_adopt, self.hp_eff]
    }

    pub fn set(&mut self, name: &str, value: Option<f64>) -> Result<(), PlanError> {
        let slot = match name {
            "ev_adopt" | "pi_ev_adopt" => &mut self.ev_adopt,
            "ev_flex" | "pi_ev_flex" => &mut self.ev_flex,
            "hp_adopt" | "pi_hp_adopt" => &mut self.hp_adopt,
            "hp_eff" | "pi_hp_eff" => &mut self.hp_eff,
            _ => return Err(PlanError::Config(format!("unknown policy component `{name}`"))),
        };
        *slot = value;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    /// Annualised cost of generation and transmission additions ($/MW-yr).
    pub gen_cost: f64,
    pub branch_cost: f64,
    /// Cost of full charging flexibility ($), linear in `ev_flex`.
    pub policy_cost: f64,
    pub learning_rate: f64,
    /// Optional separate rates for the capacity and policy blocks.
    pub capacity_rate: Option<f64>,
    pub policy_rate: Option<f64>,
    pub batch_days: usize,
    pub max_iterations: usize,
    /// Moving-average window and relative tolerance of the stopping rule.
    pub window: usize,
    pub tolerance: f64,
    pub pins: PolicyPins,
    /// Upper end of the demand scaling interval, as a multiple of base
    /// demand; the lower end is 0.
    pub scale_top: f64,
    pub reg: f64,
    pub days_per_year: f64,
    /// Abort when the objective exceeds this multiple of its first value.
    pub divergence_factor: f64,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            gen_cost: 1e6,
            branch_cost: 1e6,
            policy_cost: 1.1e9,
            learning_rate: 1e-9,
            capacity_rate: None,
            policy_rate: None,
            batch_days: 5,
            max_iterations: 400,
            window: 20,
            tolerance: 1e-4,
            pins: PolicyPins::default(),
            scale_top: 1.3,
            reg: crate::gridopt::DEFAULT_REG,
            days_per_year: 365.0,
            divergence_factor: 10.0,
            seed: 0,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::Config(m.into()));
        let rates = [Some(self.learning_rate), self.capacity_rate, self.policy_rate];
        if rates.iter().flatten().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("learning rates must be finite and >= 0");
        }
        if self.batch_days == 0 || self.window == 0 {
            return bad("batch size and window must be at least 1");
        }
        if !(self.scale_top > 0.0 && self.reg >= 0.0 && self.days_per_year > 0.0) {
            return bad("scale top and days per year must be positive, reg >= 0");
        }
        if [self.gen_cost, self.branch_cost, self.policy_cost]
            .iter()
            .any(|c| !c.is_finite())
        {
            return bad("costs must be finite");
        }
        if self.pins.to_array().iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("pinned policy values must lie in [0, 1]");
        }
        Ok(())
    }

    fn rates(&self) -> (f64, f64) {
        (
            self.capacity_rate.unwrap_or(self.learning_rate),
            self.policy_rate.unwrap_or(self.learning_rate),
        )
    }

    /// Policy cost per unit of each component; only `ev_flex` is priced.
    fn policy_cost_vector(&self) -> [f64; POLICY_DIM] {
        [0.0, self.policy_cost, 0.0, 0.0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanState {
    pub iteration: usize,
    pub eta: InvestmentVector,
    /// Full policy; pinned entries never move.
    pub policy: [f64; POLICY_DIM],
    pub warnings: usize,
}

impl PlanState {
    /// Zero capacity additions, free components at zero.
    pub fn initial(case: &NetworkCase, config: &PlanConfig) -> Self {
        Self {
            iteration: 0,
            eta: InvestmentVector::zeros(case),
            policy: config.pins.to_array().map(|p| p.unwrap_or(0.0)),
            warnings: 0,
        }
    }

    pub fn policy_vector(&self) -> Result<PolicyVector, PlanError> {
        Ok(PolicyVector::from_array(self.policy)?)
    }
}

/// Batch objective and gradient estimates at one iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub objective: f64,
    /// Annualised mean operating cost alone.
    pub operations: f64,
    pub d_eta: InvestmentVector,
    /// Zero on pinned components.
    pub d_policy: [f64; POLICY_DIM],
    pub warnings: usize,
}

/// Objective `gamma' eta + policy cost + (days/N) sum_i cost_i` and its
/// gradient estimates on one batch.
pub fn estimate_gradients(
    state: &PlanState,
    batch: &[NodalScenario],
    case: &NetworkCase,
    config: &PlanConfig,
) -> Result<GradientEstimate, PlanError> {
    let per = batch
        .par_iter()
        .map(|sc| -> Result<_, GridError> {
            let sol = solve_operations(case, &state.eta, &sc.demand, config.reg)?;
            let sens = sensitivities(&sol, case, &cost_gradients(&sol, case))?;
            let d_pi = sc.policy_gradient(&case.base_demand, &sens.demand);
            Ok((sol.cost, sens.capacity, d_pi, sol.ambiguous + sens.degenerate))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| PlanError::Dispatch {
            iteration: state.iteration,
            source,
        })?;
    let w = config.days_per_year / batch.len() as f64;
    let mut d_eta = InvestmentVector {
        gen: vec![config.gen_cost; case.generators()],
        branch: vec![config.branch_cost; case.branches()],
    };
    let pcost = config.policy_cost_vector();
    let mut d_policy = pcost;
    let mut operations = 0.0;
    let mut warnings = 0;
    // Fixed summation order over scenarios.
    for (cost, cap, d_pi, warn) in &per {
        operations += w * cost;
        warnings += warn;
        for (a, b) in d_eta.gen.iter_mut().zip(&cap.gen) {
            *a += w * b;
        }
        for (a, b) in d_eta.branch.iter_mut().zip(&cap.branch) {
            *a += w * b;
        }
        for k in 0..POLICY_DIM {
            d_policy[k] += w * d_pi[k];
        }
    }
    for (k, pin) in config.pins.to_array().iter().enumerate() {
        if pin.is_some() {
            d_policy[k] = 0.0;
        }
    }
    let invest: f64 = state
        .eta
        .gen
        .iter()
        .map(|v| v * config.gen_cost)
        .chain(state.eta.branch.iter().map(|v| v * config.branch_cost))
        .sum();
    let policy: f64 = pcost.iter().zip(&state.policy).map(|(c, p)| c * p).sum();
    if d_eta.iter().chain(d_policy).any(|v| !v.is_finite()) {
        return Err(PlanError::NonFinite(state.iteration));
    }
    Ok(GradientEstimate {
        objective: invest + policy + operations,
        operations,
        d_eta,
        d_policy,
        warnings,
    })
}

/// Gradient step followed by projection onto `eta >= 0` and the unit box
/// for free policy components.
pub fn step(
    state: &PlanState,
    est: &GradientEstimate,
    eta_rate: f64,
    policy_rate: f64,
    pins: &PolicyPins,
) -> PlanState {
    let project = |v: f64| v.max(0.0);
    let eta = InvestmentVector {
        gen: state
            .eta
            .gen
            .iter()
            .zip(&est.d_eta.gen)
            .map(|(e, g)| project(e - eta_rate * g))
            .collect(),
        branch: state
            .eta
            .branch
            .iter()
            .zip(&est.d_eta.branch)
            .map(|(e, g)| project(e - eta_rate * g))
            .collect(),
    };
    let mut policy = state.policy;
    for (k, pin) in pins.to_array().iter().enumerate() {
        policy[k] = match pin {
            Some(v) => *v,
            None => (policy[k] - policy_rate * est.d_policy[k]).clamp(0.0, 1.0),
        };
    }
    PlanState {
        iteration: state.iteration + 1,
        eta,
        policy,
        warnings: state.warnings + est.warnings,
    }
}

/// One row per executed iteration; values are those at which the batch
/// objective was evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub iteration: usize,
    pub objective: f64,
    pub policy: [f64; POLICY_DIM],
    pub eta: InvestmentVector,
    pub grad_norm_eta: f64,
    pub grad_norm_policy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub final_state: PlanState,
    pub converged: bool,
}

impl Trajectory {
    /// Mean objective over the last `window` records ending at `end`
    /// (exclusive).
    pub fn moving_average(&self, end: usize, window: usize) -> Option<f64> {
        moving_average(&self.records, end, window)
    }

    pub fn write_csv<W: Write>(&self, case: &NetworkCase, writer: W) -> Result<(), PlanError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["iter".to_string(), "J_hat".into(), "pi_ev_flex".into()];
        header.extend(case.gen_names.iter().map(|n| format!("eta_{n}")));
        header.extend(case.branch_names.iter().map(|n| format!("eta_{n}")));
        header.extend(["grad_norm_eta".into(), "grad_norm_pi".into()]);
        w.write_record(&header).map_err(csv_io)?;
        for r in &self.records {
            let mut row = vec![r.iteration.to_string(), r.objective.to_string(), r.policy[1].to_string()];
            row.extend(r.eta.iter().map(|v| v.to_string()));
            row.extend([r.grad_norm_eta.to_string(), r.grad_norm_policy.to_string()]);
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

fn moving_average(records: &[TrajectoryRecord], end: usize, window: usize) -> Option<f64> {
    if window == 0 || end < window || end > records.len() {
        return None;
    }
    Some(records[end - window..end].iter().map(|r| r.objective).sum::<f64>() / window as f64)
}

/// Runs the planning loop until the moving-average objective settles or the
/// iteration budget is spent.
pub fn run(
    config: &PlanConfig,
    model: &GeneratorModel,
    case: &NetworkCase,
    pool: &[DayContext],
) -> Result<Trajectory, PlanError> {
    run_observed(config, model, case, pool, |_| {})
}

pub fn run_observed<F: FnMut(&TrajectoryRecord)>(
    config: &PlanConfig,
    model: &GeneratorModel,
    case: &NetworkCase,
    pool: &[DayContext],
    mut on_iteration: F,
) -> Result<Trajectory, PlanError> {
    config.validate()?;
    if pool.is_empty() {
        return Err(PlanError::EmptyPool);
    }
    let scaling = DemandScaling::from_model(model, config.scale_top)?;
    let (eta_rate, policy_rate) = config.rates();
    let mut state = PlanState::initial(case, config);
    let mut records: Vec<TrajectoryRecord> = Vec::new();
    let mut converged = false;
    let mut initial = None;
    while state.iteration < config.max_iterations {
        let batch = scenario_batch(
            model,
            &state.policy_vector()?,
            pool,
            config.batch_days,
            &scaling,
            &case.base_demand,
            config.seed,
            state.iteration as u64,
        )?;
        let est = estimate_gradients(&state, &batch, case, config)?;
        let first = *initial.get_or_insert(est.objective);
        if est.objective > config.divergence_factor * first.abs().max(f64::MIN_POSITIVE) {
            return Err(PlanError::Diverged {
                iteration: state.iteration,
                objective: est.objective,
                initial: first,
                factor: config.divergence_factor,
            });
        }
        let record = TrajectoryRecord {
            iteration: state.iteration,
            objective: est.objective,
            policy: state.policy,
            eta: state.eta.clone(),
            grad_norm_eta: est.d_eta.norm(),
            grad_norm_policy: est
                .d_policy
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt(),
        };
        on_iteration(&record);
        records.push(record);
        state = step(&state, &est, eta_rate, policy_rate, &config.pins);

        // Compare consecutive non-overlapping windows.
        let n = records.len();
        if let (Some(now), Some(before)) = (
            moving_average(&records, n, config.window),
            n.checked_sub(config.window)
                .and_then(|e| moving_average(&records, e, config.window)),
        ) {
            if (now - before).abs() <= config.tolerance * before.abs() {
                converged = true;
                break;
            }
        }
    }
    Ok(Trajectory {
        records,
        final_state: state,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(case: &NetworkCase, d_eta: f64, d_pi: f64) -> GradientEstimate {
        GradientEstimate {
            objective: 0.0,
            operations: 0.0,
            d_eta: InvestmentVector {
                gen: vec![d_eta; case.generators()],
                branch: vec![d_eta; case.branches()],
            },
            d_policy: [0.0, d_pi, 0.0, 0.0],
            warnings: 0,
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let case = NetworkCase::bundled_case5();
        let cfg = PlanConfig::default();
        let mut s = PlanState::initial(&case, &cfg);
        s.eta.gen[2] = 5.0;
        s.policy[1] = 0.4;
        let next = step(&s, &est(&case, 0.0, 0.0), 1.0, 1.0, &cfg.pins);
        assert_eq!(next.eta, s.eta);
        assert_eq!(next.policy, s.policy);
        assert_eq!(next.iteration, 1);
    }

    #[test]
    fn projection_keeps_the_box() {
        let case = NetworkCase::bundled_case5();
        let cfg = PlanConfig::default();
        let s = PlanState::initial(&case, &cfg);
        let up = step(&s, &est(&case, 5.0, 5.0), 1.0, 1.0, &cfg.pins);
        assert!(up.eta.iter().all(|v| v == 0.0));
        assert_eq!(up.policy, [1.0, 0.0, 0.0, 0.0]);
        let down = step(&s, &est(&case, -5.0, -5.0), 1.0, 1.0, &cfg.pins);
        assert!(down.eta.iter().all(|v| v == 5.0));
        assert_eq!(down.policy[1], 1.0);
        // Projecting twice changes nothing.
        let again = step(&down, &est(&case, 0.0, 0.0), 1.0, 1.0, &cfg.pins);
        assert_eq!(again.eta, down.eta);
        assert_eq!(again.policy, down.policy);
    }

    #[test]
    fn scaling_clips_and_zeroes_the_derivative() {
        let s = DemandScaling {
            lo: 0.2,
            hi: 1.2,
            top: 1.3,
        };
        assert_eq!(s.apply(0.1), (0.0, 0.0));
        assert_eq!(s.apply(2.0), (1.3, 0.0));
        let (u, du) = s.apply(0.7);
        assert!((u - 0.65).abs() < 1e-12 && (du - 1.3).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(PlanConfig::default().validate().is_ok());
        let bad = PlanConfig {
            batch_days: 0,
            ..PlanConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut pins = PolicyPins::default();
        assert!(pins.set("pi_hp_eff", Some(2.0)).is_ok());
        let bad = PlanConfig {
            pins,
            ..PlanConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(pins.set("nope", None).is_err());
    }
}
