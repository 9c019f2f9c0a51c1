use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand_distr::{Distribution, StandardNormal};

use diffscen::diffusion::{sample, sample_with_grad, train_observed, GeneratorModel};
use diffscen::gridopt::{load_case, NetworkCase};
use diffscen::planner::run_observed;
use diffscen::rng::{indexed_rng, Stream};
use diffscen::simkit::{
    generate_training_set, read_baseline_csv, read_dataset_csv, write_dataset_csv,
    BaselineProvider, BaselineSampling, PolicyVector, Profile, HOURS,
};

use crate::config::PipelineConfig;
use crate::manifest::RunManifest;
use crate::InputError;

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path)
        .map_err(|e| InputError(format!("cannot open {}: {e}", path.display())))?;
    Ok(BufReader::new(f))
}

pub fn baseline(cfg: &PipelineConfig, manifest: &mut RunManifest) -> Result<BaselineProvider> {
    match &cfg.paths.baseline {
        Some(path) => {
            manifest.input(path);
            let days = read_baseline_csv(open(path)?)
                .with_context(|| format!("reading baseline {}", path.display()))?
                .into_iter()
                .map(|(_, day)| day)
                .collect();
            Ok(BaselineProvider::new(days, BaselineSampling::WithReplacement)?)
        }
        None => Ok(BaselineProvider::synthetic(cfg.simulate.baseline_seed)),
    }
}

pub fn network(cfg: &PipelineConfig, manifest: &mut RunManifest) -> Result<NetworkCase> {
    match &cfg.paths.case {
        Some(path) => {
            manifest.input(path);
            load_case(path).with_context(|| format!("loading case {}", path.display()))
        }
        None => Ok(NetworkCase::bundled_case5()),
    }
}

pub fn model(cfg: &PipelineConfig, manifest: &mut RunManifest) -> Result<GeneratorModel> {
    let path = cfg.paths.model();
    manifest.input(&path);
    GeneratorModel::load(open(&path)?).with_context(|| format!("loading model {}", path.display()))
}

/// Standard normal noise for draw `index` of `stream`.
pub fn noise(seed: u64, stream: Stream, index: u64) -> Profile {
    let mut rng = indexed_rng(seed, stream, index);
    std::array::from_fn(|_| StandardNormal.sample(&mut rng))
}

pub fn simulate(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let mut manifest = RunManifest::start("simulate");
    let provider = baseline(cfg, &mut manifest)?;
    let records = generate_training_set(
        cfg.simulate.samples,
        &provider,
        &cfg.simulate.noise,
        cfg.seed,
    )?;
    let path = cfg.paths.dataset();
    let mut w = create(&path)?;
    write_dataset_csv(&mut w, &records)?;
    w.flush()?;

    let n = records.len() as f64;
    let mean = records.iter().flat_map(|r| r.scenario.demand).sum::<f64>() / (n * HOURS as f64);
    let peak = records
        .iter()
        .flat_map(|r| r.scenario.demand)
        .fold(f64::NEG_INFINITY, f64::max);
    println!(
        "wrote {} samples to {} (mean load {mean:.3} p.u., peak {peak:.3} p.u.)",
        records.len(),
        path.display()
    );
    let outputs = vec![path];
    manifest.finish(cfg, &outputs)?;
    Ok(outputs)
}

pub fn train(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let mut manifest = RunManifest::start("train");
    let data_path = cfg.paths.dataset();
    manifest.input(&data_path);
    let records = read_dataset_csv(open(&data_path)?)
        .with_context(|| format!("reading dataset {}", data_path.display()))?;
    let schedule = cfg.diffusion.schedule.build()?;
    let tc = &cfg.diffusion.train;
    let every = (tc.epochs / 10).max(1);
    let (model, report) = train_observed(&records, schedule, tc, cfg.seed, |epoch, loss| {
        if (epoch + 1) % every == 0 {
            eprintln!("epoch {:>5}/{}  loss {loss:.5}", epoch + 1, tc.epochs);
        }
    })?;

    let model_path = cfg.paths.model();
    let mut w = create(&model_path)?;
    model.save(&mut w)?;
    w.flush()?;
    let loss_path = cfg.paths.out.join("train_loss.csv");
    let mut w = create(&loss_path)?;
    writeln!(w, "epoch,loss")?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        writeln!(w, "{e},{l}")?;
    }
    w.flush()?;
    println!(
        "trained on {} samples for {} epochs; final loss {:.5}; model at {}",
        records.len(),
        tc.epochs,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        model_path.display()
    );
    let outputs = vec![model_path, loss_path];
    manifest.finish(cfg, &outputs)?;
    Ok(outputs)
}

pub fn sample_cmd(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let mut manifest = RunManifest::start("sample");
    let model = model(cfg, &mut manifest)?;
    let provider = baseline(cfg, &mut manifest)?;
    let days = provider.days();
    let sc = &cfg.sample;
    let day = days.get(sc.day).ok_or_else(|| {
        InputError(format!("day {} is outside the {}-day baseline", sc.day, days.len()))
    })?;
    let policy = PolicyVector::from_array(sc.policy)?;
    let draws = (0..sc.draws)
        .map(|k| Ok(sample(&model, &policy, day, &noise(cfg.seed, Stream::Sample, k as u64))?))
        .collect::<Result<Vec<_>>>()?;

    let scenario_path = cfg.paths.out.join("scenario.csv");
    let mut w = csv::Writer::from_writer(create(&scenario_path)?);
    let mut header = vec!["hour".to_string()];
    header.extend((0..sc.draws).map(|k| format!("draw{k}")));
    w.write_record(&header)?;
    for t in 0..HOURS {
        let mut row = vec![t.to_string()];
        row.extend(draws.iter().map(|d| d.demand[t].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    let mut outputs = vec![scenario_path];

    if sc.jacobian {
        let (scenario, jac) =
            sample_with_grad(&model, &policy, day, &noise(cfg.seed, Stream::Sample, 0))?;
        let path = cfg.paths.out.join("jacobian.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        let mut header = vec!["hour".to_string(), "demand".into()];
        header.extend(PolicyVector::NAMES.iter().map(|n| format!("d_{n}")));
        w.write_record(&header)?;
        for t in 0..HOURS {
            let mut row = vec![t.to_string(), scenario.demand[t].to_string()];
            row.extend(jac[t].iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        outputs.push(path);
    }
    let peak = draws[0]
        .demand
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (t, &d)| if d > a.1 { (t, d) } else { a });
    println!(
        "sampled {} scenario(s) for policy {:?} on day {}; first draw peaks at {:.3} p.u. (hour {})",
        sc.draws, sc.policy, sc.day, peak.1, peak.0
    );
    manifest.finish(cfg, &outputs)?;
    Ok(outputs)
}

pub fn plan(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let mut manifest = RunManifest::start("plan");
    let model = model(cfg, &mut manifest)?;
    let case = network(cfg, &mut manifest)?;
    let provider = baseline(cfg, &mut manifest)?;
    let every = (cfg.plan.max_iterations / 20).max(1);
    let traj = run_observed(&cfg.plan, &model, &case, provider.days(), |r| {
        if r.iteration % every == 0 {
            eprintln!(
                "iter {:>4}  J {:.4e}  ev_flex {:.3}  |eta| {:.3}",
                r.iteration,
                r.objective,
                r.policy[1],
                r.eta.norm()
            );
        }
    })?;
    let path = cfg.paths.out.join("trajectory.csv");
    let mut w = create(&path)?;
    traj.write_csv(&case, &mut w)?;
    w.flush()?;
    let s = &traj.final_state;
    println!(
        "{} after {} iterations; ev_flex {:.4}; generator additions {:?} MW; branch additions {:?} MW",
        if traj.converged { "converged" } else { "stopped" },
        traj.records.len(),
        s.policy[1],
        s.eta.gen,
        s.eta.branch
    );
    if s.warnings > 0 {
        eprintln!("warning: {} ambiguous or degenerate active-set classifications", s.warnings);
    }
    let outputs = vec![path];
    manifest.finish(cfg, &outputs)?;
    Ok(outputs)
}
