use std::path::PathBuf;

use anyhow::Result;
use rand::Rng;
use serde::Serialize;

use diffscen::diffusion::{sample, sample_with_grad, GeneratorModel};
use diffscen::gridopt::{check_one, solve_operations, FdCheck, NetworkCase, Perturbation};
use diffscen::planner::{
    estimate_gradients, scenario_batch, DemandScaling, NodalScenario, PlanConfig, PlanState,
    PolicyPins,
};
use diffscen::rng::{indexed_rng, Stream};
use diffscen::simkit::{DayContext, PolicyVector, HOURS, POLICY_DIM};

use crate::commands::{baseline, create, model, network, noise};
use crate::config::PipelineConfig;
use crate::manifest::RunManifest;
use crate::CheckFailed;

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub name: &'static str,
    pub compared: usize,
    pub skipped: usize,
    pub worst_rel: f64,
    pub passed: bool,
}

impl CheckLine {
    fn new(name: &'static str, fd: FdCheck, tolerance: f64) -> Self {
        Self {
            name,
            compared: fd.compared,
            skipped: fd.skipped,
            worst_rel: fd.worst_rel,
            // Strict, so a zero tolerance always fails.
            passed: fd.compared > 0 && fd.worst_rel < tolerance,
        }
    }
}

#[derive(Debug, Serialize)]
struct Report {
    tolerance: f64,
    model_checksum: &'static str,
    checks: Vec<CheckLine>,
}

fn random_policy<R: Rng>(rng: &mut R) -> [f64; POLICY_DIM] {
    std::array::from_fn(|_| rng.random_range(0.05..0.95))
}

/// Sampler Jacobian against central differences, on entries above 1e-3 in
/// magnitude.
pub fn sampler_check(
    model: &GeneratorModel,
    days: &[DayContext],
    triples: usize,
    step: f64,
    seed: u64,
) -> Result<FdCheck> {
    let mut out = FdCheck::default();
    for k in 0..triples {
        let mut rng = indexed_rng(seed, Stream::Check, k as u64);
        let pi = random_policy(&mut rng);
        let day = &days[rng.random_range(0..days.len())];
        let eps = noise(seed, Stream::Check, 1_000_000 + k as u64);
        let (_, jac) = sample_with_grad(model, &PolicyVector::from_array(pi)?, day, &eps)?;
        for j in 0..POLICY_DIM {
            let (mut up, mut down) = (pi, pi);
            up[j] += step;
            down[j] -= step;
            let up = sample(model, &PolicyVector::from_array(up)?, day, &eps)?;
            let down = sample(model, &PolicyVector::from_array(down)?, day, &eps)?;
            for t in 0..HOURS {
                let an = jac[t][j];
                if an.abs() <= 1e-3 {
                    continue;
                }
                let fd = (up.demand[t] - down.demand[t]) / (2.0 * step);
                out.compared += 1;
                out.worst_rel = out.worst_rel.max((fd - an).abs() / an.abs());
            }
        }
    }
    Ok(out)
}

/// Dispatch sensitivities against re-solved differences at random demand
/// entries and capacities, on one sampled day.
pub fn kkt_check(
    case: &NetworkCase,
    demand: &[Vec<f64>],
    plan: &PlanConfig,
    count: usize,
    step: f64,
    seed: u64,
) -> Result<FdCheck> {
    let eta = diffscen::gridopt::InvestmentVector::zeros(case);
    let mut rng = indexed_rng(seed, Stream::Check, 2_000_000);
    let mut out = FdCheck::default();
    for _ in 0..count {
        let what = match rng.random_range(0..3) {
            0 => Perturbation::Generator(rng.random_range(0..case.generators())),
            1 if case.branches() > 0 => Perturbation::Branch(rng.random_range(0..case.branches())),
            _ => Perturbation::Demand {
                hour: rng.random_range(0..demand.len()),
                bus: rng.random_range(0..case.buses()),
            },
        };
        match check_one(case, &eta, demand, plan.reg, step, what)? {
            Some((fd, an)) => out.record(fd, an),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

fn same_active_sets(case: &NetworkCase, reg: f64, a: &[NodalScenario], b: &[NodalScenario]) -> Result<bool> {
    let eta = diffscen::gridopt::InvestmentVector::zeros(case);
    for (x, y) in a.iter().zip(b) {
        let sx = solve_operations(case, &eta, &x.demand, reg)?;
        let sy = solve_operations(case, &eta, &y.demand, reg)?;
        if sx.hours.iter().zip(&sy.hours).any(|(p, q)| p.qp.active != q.qp.active) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Planner policy gradient on one batch against differences of the batch
/// objective under common noise.
pub fn policy_check(
    model: &GeneratorModel,
    case: &NetworkCase,
    days: &[DayContext],
    plan: &PlanConfig,
    step: f64,
    seed: u64,
) -> Result<FdCheck> {
    let free = PlanConfig {
        pins: PolicyPins {
            ev_adopt: None,
            ev_flex: None,
            hp_adopt: None,
            hp_eff: None,
        },
        ..plan.clone()
    };
    let scaling = DemandScaling::from_model(model, free.scale_top)?;
    let mut rng = indexed_rng(seed, Stream::Check, 3_000_000);
    let pi = random_policy(&mut rng);
    let mut state = PlanState::initial(case, &free);
    state.policy = pi;
    let batch_at = |p: [f64; POLICY_DIM]| -> Result<Vec<NodalScenario>> {
        Ok(scenario_batch(
            model,
            &PolicyVector::from_array(p)?,
            days,
            free.batch_days,
            &scaling,
            &case.base_demand,
            seed,
            0,
        )?)
    };
    let objective = |p: [f64; POLICY_DIM], batch: &[NodalScenario]| -> Result<f64> {
        let mut s = state.clone();
        s.policy = p;
        Ok(estimate_gradients(&s, batch, case, &free)?.objective)
    };
    let base = batch_at(pi)?;
    let est = estimate_gradients(&state, &base, case, &free)?;
    let mut out = FdCheck::default();
    for j in 0..POLICY_DIM {
        let (mut up, mut down) = (pi, pi);
        up[j] += step;
        down[j] -= step;
        let (bu, bd) = (batch_at(up)?, batch_at(down)?);
        if !same_active_sets(case, free.reg, &base, &bu)? || !same_active_sets(case, free.reg, &base, &bd)? {
            out.skipped += 1;
            continue;
        }
        let fd = (objective(up, &bu)? - objective(down, &bd)?) / (2.0 * step);
        out.record(fd, est.d_policy[j]);
    }
    Ok(out)
}

pub fn grad_check(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let mut manifest = RunManifest::start("grad-check");
    // Loading verifies the stored weight checksum.
    let model = model(cfg, &mut manifest)?;
    let case = network(cfg, &mut manifest)?;
    let provider = baseline(cfg, &mut manifest)?;
    let days = provider.days();
    let c = &cfg.check;
    let tol = c.tolerance;

    let sampler = sampler_check(&model, days, c.sampler_triples, c.sampler_step, cfg.seed)?;
    let scaling = DemandScaling::from_model(&model, cfg.plan.scale_top)?;
    let mut rng = indexed_rng(cfg.seed, Stream::Check, 4_000_000);
    let day_batch = scenario_batch(
        &model,
        &PolicyVector::from_array(random_policy(&mut rng))?,
        days,
        1,
        &scaling,
        &case.base_demand,
        cfg.seed,
        1 << 40,
    )?;
    let kkt = kkt_check(&case, &day_batch[0].demand, &cfg.plan, c.kkt_perturbations, c.kkt_step, cfg.seed)?;
    let policy = policy_check(&model, &case, days, &cfg.plan, c.policy_step, cfg.seed)?;

    let report = Report {
        tolerance: tol,
        model_checksum: "ok",
        checks: vec![
            CheckLine::new("sampler_jacobian", sampler, tol),
            CheckLine::new("kkt_sensitivities", kkt, tol),
            CheckLine::new("planner_policy_gradient", policy, tol),
        ],
    };
    println!("model checksum                ok");
    for l in &report.checks {
        println!(
            "{:<29} {}  worst rel {:.3e} over {} entries ({} skipped)",
            l.name,
            if l.passed { "PASS" } else { "FAIL" },
            l.worst_rel,
            l.compared,
            l.skipped
        );
    }
    let path = cfg.paths.out.join("grad_check.json");
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    std::io::Write::flush(&mut w)?;
    let outputs = vec![path];
    manifest.finish(cfg, &outputs)?;
    let failed: Vec<&str> = report.checks.iter().filter(|l| !l.passed).map(|l| l.name).collect();
    if !failed.is_empty() {
        return Err(CheckFailed(failed.join(", ")).into());
    }
    Ok(outputs)
}
