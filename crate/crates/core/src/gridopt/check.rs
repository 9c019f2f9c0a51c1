use super::{
    cost_gradients, sensitivities, solve_operations, DispatchSolution, GridError, InvestmentVector,
    NetworkCase,
};

/// Outcome of comparing analytic sensitivities with re-solved differences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdCheck {
    pub compared: usize,
    /// Perturbations that changed the active set and were left out.
    pub skipped: usize,
    /// Largest `|fd - analytic| / max(|analytic|, 1)`.
    pub worst_rel: f64,
}

impl FdCheck {
    pub fn record(&mut self, fd: f64, analytic: f64) {
        self.compared += 1;
        let rel = (fd - analytic).abs() / analytic.abs().max(1.0);
        self.worst_rel = self.worst_rel.max(rel);
    }

    pub fn merge(&mut self, other: FdCheck) {
        self.compared += other.compared;
        self.skipped += other.skipped;
        self.worst_rel = self.worst_rel.max(other.worst_rel);
    }
}

/// What to perturb.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    Demand { hour: usize, bus: usize },
    Generator(usize),
    Branch(usize),
}

fn same_active_set(a: &DispatchSolution, b: &DispatchSolution) -> bool {
    a.hours
        .iter()
        .zip(&b.hours)
        .all(|(x, y)| x.qp.active == y.qp.active)
}

/// Central difference of the operations cost under one perturbation of size
/// `step` (forward difference when the value sits below `step`), compared with
/// the adjoint sensitivity. Returns `None` if the active set changed.
pub fn check_one(
    case: &NetworkCase,
    eta: &InvestmentVector,
    demand: &[Vec<f64>],
    reg: f64,
    step: f64,
    what: Perturbation,
) -> Result<Option<(f64, f64)>, GridError> {
    let base = solve_operations(case, eta, demand, reg)?;
    let sens = sensitivities(&base, case, &cost_gradients(&base, case))?;
    let shifted = |delta: f64| -> Result<DispatchSolution, GridError> {
        let mut d = demand.to_vec();
        let mut e = eta.clone();
        match what {
            Perturbation::Demand { hour, bus } => d[hour][bus] += delta,
            Perturbation::Generator(g) => e.gen[g] += delta,
            Perturbation::Branch(l) => e.branch[l] += delta,
        }
        solve_operations(case, &e, &d, reg)
    };
    let (analytic, at_zero) = match what {
        Perturbation::Demand { hour, bus } => (sens.demand[hour][bus], demand[hour][bus] < step),
        Perturbation::Generator(g) => (sens.capacity.gen[g], eta.gen[g] < step),
        Perturbation::Branch(l) => (sens.capacity.branch[l], eta.branch[l] < step),
    };
    let up = shifted(step)?;
    let (down, span) = if at_zero {
        (base.clone(), step)
    } else {
        (shifted(-step)?, 2.0 * step)
    };
    if !same_active_set(&base, &up) || !same_active_set(&base, &down) {
        return Ok(None);
    }
    Ok(Some(((up.cost - down.cost) / span, analytic)))
}

/// Checks every nodal demand of every hour and every capacity entry.
pub fn check_all(
    case: &NetworkCase,
    eta: &InvestmentVector,
    demand: &[Vec<f64>],
    reg: f64,
    step: f64,
) -> Result<FdCheck, GridError> {
    let mut out = FdCheck::default();
    let mut targets: Vec<Perturbation> = (0..demand.len())
        .flat_map(|hour| (0..case.buses()).map(move |bus| Perturbation::Demand { hour, bus }))
        .collect();
    targets.extend((0..case.generators()).map(Perturbation::Generator));
    targets.extend((0..case.branches()).map(Perturbation::Branch));
    for what in targets {
        match check_one(case, eta, demand, reg, step, what)? {
            Some((fd, an)) => out.record(fd, an),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}
