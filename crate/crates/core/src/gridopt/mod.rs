//! Hourly DC dispatch with soft generation and flow limits, and its
//! sensitivities with respect to nodal demand and capacity additions.
//!
//! Sensitivities come from the optimality system restricted to the active
//! set: one transposed solve per hour yields the derivative of any linear
//! functional of the optimal dispatch with respect to every right-hand side.

mod case;
mod check;
mod dispatch;
mod qp;

pub use case::{
    compute_ptdf, load_case, BranchRecord, BusRecord, CaseFile, GeneratorRecord, NetworkCase,
    Penalties, CASE5_JSON,
};
pub use check::{check_all, check_one, FdCheck, Perturbation};
pub use dispatch::{
    hour_problem, operations_cost_gradient, solve_operations, DispatchSolution, HourDispatch,
    InvestmentVector, Layout,
};
pub use qp::{QpProblem, QpSolution, Start, ACTIVE_TOL};

use nalgebra::DVector;

/// Default quadratic regularisation on all dispatch variables.
pub const DEFAULT_REG: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("invalid case: {0}")]
    Case(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error(
        "interior point stopped after {iterations} iterations \
         (primal residual {primal:.3e}, dual residual {dual:.3e}, gap {gap:.3e})"
    )]
    NoConvergence {
        iterations: usize,
        primal: f64,
        dual: f64,
        gap: f64,
    },
    #[error("hour {hour}: {source}")]
    Hour {
        hour: usize,
        #[source]
        source: Box<GridError>,
    },
    #[error("case file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Derivatives of `sum_t grad_t' x_t*` with respect to nodal demands and
/// capacity additions.
#[derive(Clone, Debug, PartialEq)]
pub struct Sensitivity {
    /// Hours x buses.
    pub demand: Vec<Vec<f64>>,
    pub capacity: InvestmentVector,
    /// Hours whose active-set system was singular; a least-squares solution
    /// was used for them.
    pub degenerate: usize,
}

/// Both sensitivities from one adjoint solve per hour. `grad` holds one
/// gradient per hour over `[p, s_G, s_F]`.
pub fn sensitivities(
    sol: &DispatchSolution,
    case: &NetworkCase,
    grad: &[Vec<f64>],
) -> Result<Sensitivity, GridError> {
    let lay = Layout::of(case);
    if grad.len() != sol.hours.len() || grad.iter().any(|g| g.len() != lay.vars()) {
        return Err(GridError::Input(format!(
            "need {} hourly gradients of length {}",
            sol.hours.len(),
            lay.vars()
        )));
    }
    let mut out = Sensitivity {
        demand: Vec::with_capacity(grad.len()),
        capacity: InvestmentVector::zeros(case),
        degenerate: 0,
    };
    for (hour, g) in sol.hours.iter().zip(grad) {
        let prob = hour_problem(case, &sol.eta, &hour.demand, sol.reg);
        let (u, v, degenerate) = prob.adjoint(&hour.qp, &DVector::from_column_slice(g));
        out.degenerate += usize::from(degenerate);
        // Balance right-hand side is the total demand; flow rows carry
        // +-B d.
        let row: Vec<f64> = (0..case.buses())
            .map(|b| {
                u[0] + (0..lay.branches)
                    .map(|l| {
                        (v[lay.flow_up_row(l)] - v[lay.flow_down_row(l)]) * case.ptdf[(l, b)]
                    })
                    .sum::<f64>()
            })
            .collect();
        out.demand.push(row);
        for gi in 0..lay.gens {
            out.capacity.gen[gi] += v[lay.cap_row(gi)];
        }
        for l in 0..lay.branches {
            out.capacity.branch[l] += v[lay.flow_up_row(l)] + v[lay.flow_down_row(l)];
        }
    }
    Ok(out)
}

/// `d (sum_t grad_t' x_t*) / d d_t`, hours x buses.
pub fn sensitivity_demand(
    sol: &DispatchSolution,
    case: &NetworkCase,
    grad: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, GridError> {
    Ok(sensitivities(sol, case, grad)?.demand)
}

/// `d (sum_t grad_t' x_t*) / d eta`.
pub fn sensitivity_capacity(
    sol: &DispatchSolution,
    case: &NetworkCase,
    grad: &[Vec<f64>],
) -> Result<InvestmentVector, GridError> {
    Ok(sensitivities(sol, case, grad)?.capacity)
}

/// The operations-cost gradient repeated for every hour of `sol`.
pub fn cost_gradients(sol: &DispatchSolution, case: &NetworkCase) -> Vec<Vec<f64>> {
    vec![operations_cost_gradient(case); sol.hours.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One bus; generators given as (cost, p_max).
    pub(crate) fn single_bus(gens: &[(f64, f64)], rho: f64) -> NetworkCase {
        let file = CaseFile {
            name: "one-bus".into(),
            slack_bus: 1,
            buses: vec![BusRecord {
                id: 1,
                demand: 100.0,
            }],
            generators: gens
                .iter()
                .enumerate()
                .map(|(i, &(cost, p_max))| GeneratorRecord {
                    name: format!("g{}", i + 1),
                    bus: 1,
                    cost,
                    p_max,
                })
                .collect(),
            branches: vec![],
            penalties: Penalties {
                generation: rho,
                flow: rho,
            },
            ptdf: None,
        };
        NetworkCase::from_file(file).unwrap()
    }

    #[test]
    fn zero_demand_costs_nothing() {
        let case = NetworkCase::bundled_case5();
        let sol = solve_operations(&case, &InvestmentVector::zeros(&case), &[vec![0.0; 5]], 0.0)
            .unwrap();
        let h = &sol.hours[0];
        assert!(h.p.iter().chain(&h.s_g).chain(&h.s_f).all(|v| v.abs() < 1e-9));
        assert!(sol.cost.abs() < 1e-9);
    }

    #[test]
    fn shortfall_is_covered_by_penalised_slack() {
        let case = single_bus(&[(10.0, 100.0)], 1000.0);
        let eta = InvestmentVector::zeros(&case);
        let sol = solve_operations(&case, &eta, &[vec![150.0]], 0.0).unwrap();
        let h = &sol.hours[0];
        assert!((h.p[0] - 150.0).abs() < 1e-9 && (h.s_g[0] - 50.0).abs() < 1e-9);
        assert!((sol.cost - (10.0 * 150.0 + 1000.0 * 50.0)).abs() < 1e-6);

        // Extra demand is served by the same unit and its slack; extra
        // capacity only removes slack.
        let grad = cost_gradients(&sol, &case);
        let sens = sensitivities(&sol, &case, &grad).unwrap();
        assert!((sens.demand[0][0] - 1010.0).abs() < 1e-6);
        assert!((sens.capacity.gen[0] + 1000.0).abs() < 1e-6);
    }

    #[test]
    fn interior_hours_price_at_marginal_cost() {
        let case = single_bus(&[(10.0, 100.0), (25.0, 100.0)], 1000.0);
        let eta = InvestmentVector::zeros(&case);
        let demand = vec![vec![150.0]; 3];
        let sol = solve_operations(&case, &eta, &demand, DEFAULT_REG).unwrap();
        let sens = sensitivities(&sol, &case, &cost_gradients(&sol, &case)).unwrap();
        for (h, row) in sol.hours.iter().zip(&sens.demand) {
            assert!((row[0] - 25.0).abs() < 1e-6);
            assert!((h.lmp[0] - 25.0).abs() < 1e-3);
            assert!((h.p.iter().sum::<f64>() - 150.0).abs() < 1e-9);
        }
        // Only the cheap unit is at its limit: 15 $/MWh saved per MW per hour.
        assert!((sens.capacity.gen[0] + 3.0 * 15.0).abs() < 1e-6);
        assert!(sens.capacity.gen[1].abs() < 1e-9);
    }

    #[test]
    fn binding_cap_saves_penalty_net_of_fuel() {
        // The unserved remainder lands on the zero-cost unit's slack.
        let (c, rho) = (10.0, 1000.0);
        let case = single_bus(&[(c, 100.0), (0.0, 0.0)], rho);
        let eta = InvestmentVector::zeros(&case);
        let demand = vec![vec![150.0], vec![130.0], vec![80.0]];
        let sol = solve_operations(&case, &eta, &demand, DEFAULT_REG).unwrap();
        let sens = sensitivities(&sol, &case, &cost_gradients(&sol, &case)).unwrap();
        assert!((sens.capacity.gen[0] + 2.0 * (rho - c)).abs() < 1e-6);
        assert!((sens.demand[0][0] - rho).abs() < 1e-6);
        assert!((sens.demand[2][0] - c).abs() < 1e-6);
    }

    #[test]
    fn balance_holds_and_duals_close_the_gap() {
        let case = NetworkCase::bundled_case5();
        let eta = InvestmentVector::zeros(&case);
        let demand: Vec<Vec<f64>> = (0..24)
            .map(|t| {
                let k = 0.4 + 0.9 * (t as f64 / 23.0);
                case.base_demand.iter().map(|d| d * k).collect()
            })
            .collect();
        let sol = solve_operations(&case, &eta, &demand, DEFAULT_REG).unwrap();
        for (h, d) in sol.hours.iter().zip(&demand) {
            let total: f64 = d.iter().sum();
            assert!((h.p.iter().sum::<f64>() - total).abs() < 1e-6 * total.max(1.0));
            let prob = hour_problem(&case, &eta, d, DEFAULT_REG);
            let obj = prob.objective(&h.qp.x);
            assert!(prob.duality_gap(&h.qp).abs() < 1e-6 * obj.abs().max(1.0));
            assert!(h.s_g.iter().chain(&h.s_f).all(|&s| s >= 0.0));
            for (l, f) in h.flow.iter().enumerate() {
                assert!(f.abs() <= case.f_max[l] + h.s_f[l] + 1e-6);
            }
        }
        let again = solve_operations(&case, &eta, &demand, DEFAULT_REG).unwrap();
        assert_eq!(again, sol);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let case = NetworkCase::bundled_case5();
        let eta = InvestmentVector::zeros(&case);
        assert!(solve_operations(&case, &eta, &[vec![0.0; 4]], 0.0).is_err());
        assert!(solve_operations(&case, &eta, &[vec![f64::NAN; 5]], 0.0).is_err());
        assert!(solve_operations(&case, &eta, &[vec![0.0; 5]], -1.0).is_err());
        let mut neg = eta.clone();
        neg.gen[0] = -1.0;
        assert!(solve_operations(&case, &neg, &[vec![0.0; 5]], 0.0).is_err());
    }
}
