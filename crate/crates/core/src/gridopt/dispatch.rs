use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::case::NetworkCase;
use super::qp::{QpProblem, QpSolution, Start};
use super::GridError;

/// Capacity additions (MW) per generator and per branch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvestmentVector {
    pub gen: Vec<f64>,
    pub branch: Vec<f64>,
}

impl InvestmentVector {
    pub fn zeros(case: &NetworkCase) -> Self {
        Self {
            gen: vec![0.0; case.generators()],
            branch: vec![0.0; case.branches()],
        }
    }

    pub fn check(&self, case: &NetworkCase) -> Result<(), GridError> {
        if self.gen.len() != case.generators() || self.branch.len() != case.branches() {
            return Err(GridError::Input(format!(
                "investment vector has {}+{} entries, case needs {}+{}",
                self.gen.len(),
                self.branch.len(),
                case.generators(),
                case.branches()
            )));
        }
        if self.iter().any(|v| !(v.is_finite() && v >= 0.0)) {
            return Err(GridError::Input("capacity additions must be >= 0".into()));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.gen.iter().chain(&self.branch).copied()
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Index ranges of the per-hour variable vector `[p, s_G, s_F]` and of the
/// inequality rows.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub gens: usize,
    pub branches: usize,
}

impl Layout {
    pub fn of(case: &NetworkCase) -> Self {
        Self {
            gens: case.generators(),
            branches: case.branches(),
        }
    }
    pub fn vars(self) -> usize {
        2 * self.gens + self.branches
    }
    pub fn p(self, g: usize) -> usize {
        g
    }
    pub fn s_g(self, g: usize) -> usize {
        self.gens + g
    }
    pub fn s_f(self, l: usize) -> usize {
        2 * self.gens + l
    }
    /// Rows `0..vars` are the sign constraints `-x <= 0`.
    pub fn cap_row(self, g: usize) -> usize {
        self.vars() + g
    }
    pub fn flow_up_row(self, l: usize) -> usize {
        self.vars() + self.gens + l
    }
    pub fn flow_down_row(self, l: usize) -> usize {
        self.vars() + self.gens + self.branches + l
    }
    pub fn rows(self) -> usize {
        self.vars() + self.gens + 2 * self.branches
    }
}

/// Linear cost coefficients `(c, rho_G, rho_F)` of one hour: the gradient
/// of the operations cost with respect to the hour's variables.
pub fn operations_cost_gradient(case: &NetworkCase) -> Vec<f64> {
    case.gen_cost
        .iter()
        .chain(&case.rho_g)
        .chain(&case.rho_f)
        .copied()
        .collect()
}

/// One hour of the dispatch problem as a QP.
pub fn hour_problem(
    case: &NetworkCase,
    eta: &InvestmentVector,
    demand: &[f64],
    reg: f64,
) -> QpProblem {
    let lay = Layout::of(case);
    let (n, m) = (lay.vars(), lay.rows());
    // Flow response to each generator's output.
    let gen_ptdf = DMatrix::from_fn(lay.branches, lay.gens, |l, g| case.ptdf[(l, case.gen_bus[g])]);
    let base_flow = &case.ptdf * DVector::from_column_slice(demand);
    let mut a = DMatrix::zeros(1, n);
    for g in 0..lay.gens {
        a[(0, lay.p(g))] = 1.0;
    }
    let mut gm = DMatrix::zeros(m, n);
    let mut h = DVector::zeros(m);
    for i in 0..n {
        gm[(i, i)] = -1.0;
    }
    for g in 0..lay.gens {
        let r = lay.cap_row(g);
        gm[(r, lay.p(g))] = 1.0;
        gm[(r, lay.s_g(g))] = -1.0;
        h[r] = case.gen_p_max[g] + eta.gen[g];
    }
    for l in 0..lay.branches {
        let (up, down) = (lay.flow_up_row(l), lay.flow_down_row(l));
        for g in 0..lay.gens {
            gm[(up, lay.p(g))] = gen_ptdf[(l, g)];
            gm[(down, lay.p(g))] = -gen_ptdf[(l, g)];
        }
        gm[(up, lay.s_f(l))] = -1.0;
        gm[(down, lay.s_f(l))] = -1.0;
        let limit = case.f_max[l] + eta.branch[l];
        h[up] = limit + base_flow[l];
        h[down] = limit - base_flow[l];
    }
    QpProblem {
        q_diag: DVector::from_element(n, reg),
        c: DVector::from_vec(operations_cost_gradient(case)),
        a,
        b: DVector::from_vec(vec![demand.iter().sum()]),
        g: gm,
        h,
    }
}

/// A primal-dual point strictly inside every inequality: demand split
/// evenly, slacks covering any excess with unit margin, limit multipliers at
/// `eps` and sign multipliers solving stationarity. Only the balance row is
/// violated, and only when total demand is zero.
fn interior_start(case: &NetworkCase, eta: &InvestmentVector, demand: &[f64], reg: f64) -> Start {
    let lay = Layout::of(case);
    let total: f64 = demand.iter().sum();
    let share = (total / lay.gens as f64).max(1e-3 * (1.0 + total));
    let mut x = DVector::zeros(lay.vars());
    let mut inj: Vec<f64> = demand.iter().map(|d| -d).collect();
    for g in 0..lay.gens {
        x[lay.p(g)] = share;
        x[lay.s_g(g)] = (share - case.gen_p_max[g] - eta.gen[g]).max(0.0) + 1.0;
        inj[case.gen_bus[g]] += share;
    }
    let flow = &case.ptdf * DVector::from_vec(inj);
    for l in 0..lay.branches {
        x[lay.s_f(l)] = (flow[l].abs() - case.f_max[l] - eta.branch[l]).max(0.0) + 1.0;
    }
    let rho_min = case.rho_g.iter().chain(&case.rho_f).fold(f64::INFINITY, |a, &b| a.min(b));
    let eps = (0.25 * rho_min).min(1.0);
    let mut z = DVector::from_element(lay.rows(), eps);
    // With equal multipliers on both flow directions their contributions
    // to the generator rows cancel.
    for g in 0..lay.gens {
        z[g] = case.gen_cost[g] + reg * x[lay.p(g)] + eps;
        z[lay.s_g(g)] = case.rho_g[g] + reg * x[lay.s_g(g)] - eps;
    }
    for l in 0..lay.branches {
        z[lay.s_f(l)] = case.rho_f[l] + reg * x[lay.s_f(l)] - 2.0 * eps;
    }
    Start {
        x,
        y: DVector::zeros(1),
        z,
    }
}

/// Optimal dispatch of one hour.
#[derive(Clone, Debug, PartialEq)]
pub struct HourDispatch {
    pub demand: Vec<f64>,
    pub p: Vec<f64>,
    pub s_g: Vec<f64>,
    pub s_f: Vec<f64>,
    /// Branch flows `B (A p - d)`.
    pub flow: Vec<f64>,
    /// Marginal cost of demand at the slack bus.
    pub balance_price: f64,
    /// Marginal cost of demand at each bus.
    pub lmp: Vec<f64>,
    pub cap_dual: Vec<f64>,
    pub flow_dual_up: Vec<f64>,
    pub flow_dual_down: Vec<f64>,
    /// Generation plus penalty cost, without the regulariser.
    pub cost: f64,
    pub qp: QpSolution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DispatchSolution {
    pub hours: Vec<HourDispatch>,
    pub eta: InvestmentVector,
    pub reg: f64,
    pub cost: f64,
    /// Inequalities with an unclear active/inactive classification, summed
    /// over hours.
    pub ambiguous: usize,
}

fn hour_dispatch(
    case: &NetworkCase,
    eta: &InvestmentVector,
    demand: &[f64],
    reg: f64,
) -> Result<HourDispatch, GridError> {
    let lay = Layout::of(case);
    let prob = hour_problem(case, eta, demand, reg);
    let qp = prob.solve_from(Some(interior_start(case, eta, demand, reg)))?;
    let x = &qp.x;
    let p: Vec<f64> = (0..lay.gens).map(|g| x[lay.p(g)]).collect();
    let s_g: Vec<f64> = (0..lay.gens).map(|g| x[lay.s_g(g)]).collect();
    let s_f: Vec<f64> = (0..lay.branches).map(|l| x[lay.s_f(l)]).collect();
    let mut inj = DVector::from_iterator(demand.len(), demand.iter().map(|d| -d));
    for g in 0..lay.gens {
        inj[case.gen_bus[g]] += p[g];
    }
    let flow = (&case.ptdf * inj).iter().copied().collect();
    let cap_dual: Vec<f64> = (0..lay.gens).map(|g| qp.z[lay.cap_row(g)]).collect();
    let flow_dual_up: Vec<f64> = (0..lay.branches).map(|l| qp.z[lay.flow_up_row(l)]).collect();
    let flow_dual_down: Vec<f64> = (0..lay.branches)
        .map(|l| qp.z[lay.flow_down_row(l)])
        .collect();
    let balance_price = -qp.y[0];
    let lmp = (0..case.buses())
        .map(|b| {
            balance_price
                - (0..lay.branches)
                    .map(|l| (flow_dual_up[l] - flow_dual_down[l]) * case.ptdf[(l, b)])
                    .sum::<f64>()
        })
        .collect();
    let cost = prob.c.dot(x);
    Ok(HourDispatch {
        demand: demand.to_vec(),
        p,
        s_g,
        s_f,
        flow,
        balance_price,
        lmp,
        cap_dual,
        flow_dual_up,
        flow_dual_down,
        cost,
        qp,
    })
}

/// Cost-minimising dispatch for each hour of `demand` (hours x buses, MW)
/// with soft generation and flow limits. Hours are independent and solved
/// in parallel.
pub fn solve_operations(
    case: &NetworkCase,
    eta: &InvestmentVector,
    demand: &[Vec<f64>],
    reg: f64,
) -> Result<DispatchSolution, GridError> {
    eta.check(case)?;
    if !(reg.is_finite() && reg >= 0.0) {
        return Err(GridError::Input(format!("regularisation {reg} must be >= 0")));
    }
    for (t, d) in demand.iter().enumerate() {
        if d.len() != case.buses() || d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(GridError::Input(format!(
                "hour {t}: need {} finite nonnegative nodal demands",
                case.buses()
            )));
        }
    }
    let hours = demand
        .par_iter()
        .enumerate()
        .map(|(t, d)| {
            hour_dispatch(case, eta, d, reg).map_err(|e| match e {
                GridError::NoConvergence { .. } | GridError::Singular(_) => GridError::Hour {
                    hour: t,
                    source: Box::new(e),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DispatchSolution {
        cost: hours.iter().map(|h| h.cost).sum(),
        ambiguous: hours.iter().map(|h| h.qp.ambiguous).sum(),
        hours,
        eta: eta.clone(),
        reg,
    })
}
