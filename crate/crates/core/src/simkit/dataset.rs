//! Training-set generation and its CSV form.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;

use super::{
    simulate_scenario, BaselineProvider, DayContext, LoadScenario, PolicyVector, SimError,
    SimNoiseSpec, HOURS, POLICY_DIM,
};
use crate::rng::{indexed_rng, stream_rng, Stream};

/// One simulated day: the policy it was drawn under, its context and the
/// resulting demand.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRecord {
    pub policy: PolicyVector,
    pub context: DayContext,
    pub scenario: LoadScenario,
}

/// Simulates `m` days with policies uniform on the unit hypercube.
///
/// Contexts are assigned up front from one generator; each record then gets
/// its own generator keyed by index, so the output does not depend on how
/// rayon schedules the work.
pub fn generate_training_set(
    m: usize,
    provider: &BaselineProvider,
    noise: &SimNoiseSpec,
    seed: u64,
) -> Result<Vec<TrainingRecord>, SimError> {
    if m == 0 {
        return Err(SimError::EmptyDataset);
    }
    noise.validate()?;
    let mut ctx_rng = stream_rng(seed, Stream::Simulate);
    let indices = provider.draw_indices(m, &mut ctx_rng)?;
    let days = provider.days();
    let records = indices
        .par_iter()
        .enumerate()
        .map(|(i, &day)| {
            let mut rng = indexed_rng(seed, Stream::Simulate, i as u64);
            let policy = PolicyVector {
                ev_adopt: rng.random::<f64>(),
                ev_flex: rng.random::<f64>(),
                hp_adopt: rng.random::<f64>(),
                hp_eff: rng.random::<f64>(),
            };
            let context = days[day].clone();
            let scenario = simulate_scenario(&policy, &context, noise, &mut rng);
            TrainingRecord {
                policy,
                context,
                scenario,
            }
        })
        .collect();
    Ok(records)
}

fn header() -> Vec<String> {
    let mut h: Vec<String> = PolicyVector::NAMES
        .iter()
        .map(|n| format!("pi_{n}"))
        .collect();
    for prefix in ["temp", "base", "load"] {
        h.extend((0..HOURS).map(|t| format!("{prefix}{t:02}")));
    }
    h
}

pub fn write_dataset_csv<W: Write>(writer: W, records: &[TrainingRecord]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header())?;
    for r in records {
        let row = r
            .policy
            .to_array()
            .into_iter()
            .chain(r.context.temperature)
            .chain(r.context.base_load)
            .chain(r.scenario.demand)
            .map(|v| v.to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(reader: R) -> Result<Vec<TrainingRecord>, SimError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let expected = header();
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != expected {
        return Err(SimError::Format(
            "dataset header must be pi_*, temp00..23, base00..23, load00..23".into(),
        ));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row: Vec<f64> = rec
            .iter()
            .zip(&expected)
            .map(|(v, name)| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| SimError::Format(format!("row {}: column {name}: {e}", line + 1)))
            })
            .collect::<Result<_, _>>()?;
        let block = |k: usize| -> [f64; HOURS] {
            let start = POLICY_DIM + k * HOURS;
            row[start..start + HOURS].try_into().expect("fixed width")
        };
        let policy = PolicyVector::from_array(row[..POLICY_DIM].try_into().expect("fixed width"))?;
        let context = DayContext::new(block(0), block(1))?;
        let demand = block(2);
        if demand.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(SimError::Format(format!(
                "row {}: negative or non-finite load",
                line + 1
            )));
        }
        out.push(TrainingRecord {
            policy,
            context,
            scenario: LoadScenario { demand },
        });
    }
    if out.is_empty() {
        return Err(SimError::EmptyDataset);
    }
    Ok(out)
}
