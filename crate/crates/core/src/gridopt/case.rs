use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::GridError;

/// The bundled PJM 5-bus case (MATPOWER `case5` costs and reactances).
pub const CASE5_JSON: &str = include_str!("../../data/case5.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: u32,
    /// Base demand (MW).
    #[serde(default)]
    pub demand: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorRecord {
    pub name: String,
    pub bus: u32,
    /// Marginal cost ($/MWh).
    pub cost: f64,
    pub p_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchRecord {
    pub name: String,
    pub from: u32,
    pub to: u32,
    /// Series reactance (p.u.); only ratios matter for the PTDF.
    pub reactance: f64,
    pub f_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Penalties {
    pub generation: f64,
    pub flow: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self {
            generation: 10_000.0,
            flow: 10_000.0,
        }
    }
}

/// Case file layout. `ptdf`, when given, is used as is (branch rows, bus
/// columns) instead of being derived from the reactances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    pub name: String,
    pub slack_bus: u32,
    pub buses: Vec<BusRecord>,
    pub generators: Vec<GeneratorRecord>,
    pub branches: Vec<BranchRecord>,
    #[serde(default)]
    pub penalties: Penalties,
    #[serde(default)]
    pub ptdf: Option<Vec<Vec<f64>>>,
}

/// A network ready for dispatch. Buses, generators and branches are indexed
/// by position in the file.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkCase {
    pub name: String,
    pub bus_ids: Vec<u32>,
    pub slack: usize,
    pub gen_names: Vec<String>,
    pub gen_bus: Vec<usize>,
    pub gen_cost: Vec<f64>,
    pub gen_p_max: Vec<f64>,
    pub branch_names: Vec<String>,
    pub f_max: Vec<f64>,
    /// Per-generator and per-branch violation penalties ($/MWh).
    pub rho_g: Vec<f64>,
    pub rho_f: Vec<f64>,
    pub base_demand: Vec<f64>,
    /// Branch flow per unit of net injection at each bus, withdrawn at the
    /// slack bus.
    pub ptdf: DMatrix<f64>,
}

impl NetworkCase {
    pub fn buses(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn generators(&self) -> usize {
        self.gen_bus.len()
    }

    pub fn branches(&self) -> usize {
        self.f_max.len()
    }

    pub fn from_json(text: &str) -> Result<Self, GridError> {
        let file: CaseFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    pub fn bundled_case5() -> Self {
        Self::from_json(CASE5_JSON).expect("bundled case is valid")
    }

    pub fn from_file(file: CaseFile) -> Result<Self, GridError> {
        if file.buses.is_empty() {
            return Err(GridError::Case("no buses".into()));
        }
        if file.generators.is_empty() {
            return Err(GridError::Case("no generators".into()));
        }
        let mut index = HashMap::new();
        for (i, b) in file.buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(GridError::Case(format!("bus {} listed twice", b.id)));
            }
            if !(b.demand.is_finite() && b.demand >= 0.0) {
                return Err(GridError::Case(format!("bus {} demand {}", b.id, b.demand)));
            }
        }
        let bus = |id: u32| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| GridError::Case(format!("unknown bus {id}")))
        };
        let slack = bus(file.slack_bus)?;
        let (rg, rf) = (file.penalties.generation, file.penalties.flow);
        for g in &file.generators {
            bus(g.bus)?;
            if !(g.p_max.is_finite() && g.p_max >= 0.0 && g.cost.is_finite() && g.cost >= 0.0) {
                return Err(GridError::Case(format!("generator {} data", g.name)));
            }
            if !(rg > g.cost && rf > g.cost) {
                return Err(GridError::Case(format!(
                    "penalties must exceed the cost of generator {}",
                    g.name
                )));
            }
        }
        for l in &file.branches {
            bus(l.from)?;
            bus(l.to)?;
            if l.from == l.to {
                return Err(GridError::Case(format!("branch {} is a self-loop", l.name)));
            }
            if !(l.f_max.is_finite() && l.f_max >= 0.0) {
                return Err(GridError::Case(format!("branch {} limit", l.name)));
            }
        }
        let n = file.buses.len();
        let ptdf = match &file.ptdf {
            Some(rows) => {
                if rows.len() != file.branches.len() || rows.iter().any(|r| r.len() != n) {
                    return Err(GridError::Case("ptdf must be branches x buses".into()));
                }
                DMatrix::from_fn(rows.len(), n, |l, b| rows[l][b])
            }
            None => {
                let lines: Vec<(usize, usize, f64)> = file
                    .branches
                    .iter()
                    .map(|l| Ok((bus(l.from)?, bus(l.to)?, l.reactance)))
                    .collect::<Result<_, GridError>>()?;
                compute_ptdf(n, &lines, slack)?
            }
        };
        Ok(Self {
            name: file.name,
            bus_ids: file.buses.iter().map(|b| b.id).collect(),
            slack,
            gen_bus: file
                .generators
                .iter()
                .map(|g| bus(g.bus))
                .collect::<Result<_, _>>()?,
            gen_names: file.generators.iter().map(|g| g.name.clone()).collect(),
            gen_cost: file.generators.iter().map(|g| g.cost).collect(),
            gen_p_max: file.generators.iter().map(|g| g.p_max).collect(),
            branch_names: file.branches.iter().map(|l| l.name.clone()).collect(),
            f_max: file.branches.iter().map(|l| l.f_max).collect(),
            rho_g: vec![rg; file.generators.len()],
            rho_f: vec![rf; file.branches.len()],
            base_demand: file.buses.iter().map(|b| b.demand).collect(),
            ptdf,
        })
    }
}

/// Reads a case from a JSON file.
pub fn load_case(path: &Path) -> Result<NetworkCase, GridError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| GridError::Case(format!("{}: {e}", path.display())))?;
    NetworkCase::from_json(&text)
}

/// DC power-transfer factors from branch reactances. Column `slack` is zero.
/// Fails if some bus has no path to the slack bus.
pub fn compute_ptdf(
    buses: usize,
    lines: &[(usize, usize, f64)],
    slack: usize,
) -> Result<DMatrix<f64>, GridError> {
    let mut lap = DMatrix::<f64>::zeros(buses, buses);
    for &(f, t, x) in lines {
        if !(x.is_finite() && x > 0.0) {
            return Err(GridError::Case(format!("reactance {x} must be positive")));
        }
        let y = 1.0 / x;
        lap[(f, f)] += y;
        lap[(t, t)] += y;
        lap[(f, t)] -= y;
        lap[(t, f)] -= y;
    }
    let keep: Vec<usize> = (0..buses).filter(|&b| b != slack).collect();
    let reduced = lap.select_rows(&keep).select_columns(&keep);
    // The reduced Laplacian is positive definite exactly when every bus
    // reaches the slack.
    let chol = reduced
        .cholesky()
        .ok_or_else(|| GridError::Singular("network is not connected".into()))?;
    let reach = chol.inverse();
    let mut ptdf = DMatrix::zeros(lines.len(), buses);
    for (l, &(f, t, x)) in lines.iter().enumerate() {
        for (j, &b) in keep.iter().enumerate() {
            let angle = |bus: usize| {
                keep.iter()
                    .position(|&k| k == bus)
                    .map_or(0.0, |i| reach[(i, j)])
            };
            ptdf[(l, b)] = (angle(f) - angle(t)) / x;
        }
    }
    Ok(ptdf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_case_shape() {
        let case = NetworkCase::bundled_case5();
        assert_eq!((case.buses(), case.generators(), case.branches()), (5, 5, 6));
        assert_eq!(case.base_demand.iter().sum::<f64>(), 1000.0);
        assert!(case.ptdf.column(case.slack).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_bus_line_carries_everything() {
        let p = compute_ptdf(2, &[(0, 1, 0.1)], 0).unwrap();
        assert_eq!(p[(0, 0)], 0.0);
        assert!((p[(0, 1)] + 1.0).abs() < 1e-12);
        let p = compute_ptdf(2, &[(0, 1, 0.1)], 1).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flows_conserve_at_every_bus() {
        let case = NetworkCase::bundled_case5();
        let lines = [(0, 1), (0, 3), (0, 4), (1, 2), (2, 3), (3, 4)];
        for b in 0..5 {
            if b == case.slack {
                continue;
            }
            // Unit injection at b, withdrawn at the slack.
            let mut net = [0.0; 5];
            for (l, &(f, t)) in lines.iter().enumerate() {
                net[f] -= case.ptdf[(l, b)];
                net[t] += case.ptdf[(l, b)];
            }
            net[b] += 1.0;
            net[case.slack] -= 1.0;
            assert!(net.iter().all(|v| v.abs() < 1e-12), "bus {b}: {net:?}");
        }
    }

    #[test]
    fn disconnected_network_is_an_error() {
        let err = compute_ptdf(3, &[(0, 1, 0.1)], 0).unwrap_err();
        assert!(matches!(err, GridError::Singular(_)));
    }

    #[test]
    fn explicit_ptdf_is_used() {
        let mut file: CaseFile = serde_json::from_str(CASE5_JSON).unwrap();
        file.ptdf = Some(vec![vec![0.5; 5]; 6]);
        let case = NetworkCase::from_file(file).unwrap();
        assert!(case.ptdf.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bad_cases_are_rejected() {
        let mut file: CaseFile = serde_json::from_str(CASE5_JSON).unwrap();
        file.penalties.generation = 20.0;
        assert!(NetworkCase::from_file(file).is_err());
        let mut file: CaseFile = serde_json::from_str(CASE5_JSON).unwrap();
        file.branches[0].to = 9;
        assert!(NetworkCase::from_file(file).is_err());
        assert!(NetworkCase::from_json("{").is_err());
    }
}
