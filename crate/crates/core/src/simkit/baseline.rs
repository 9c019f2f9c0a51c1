//! Day contexts: a synthetic climate/load year, or user-supplied CSV days.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DayContext, Profile, SimError, HOURS};
use crate::rng::{indexed_rng, Stream};

fn bell(t: f64, center: f64, sd: f64) -> f64 {
    (-0.5 * ((t - center) / sd).powi(2)).exp()
}

/// Unnormalised synthetic day: `(temperature, base load shape)`.
///
/// Temperature follows a seasonal sinusoid (coldest around 20 January)
/// with an afternoon-peaking diurnal swing. Base load has a morning and an
/// evening peak whose level rises in both winter and summer.
fn synth_day_raw<R: Rng + ?Sized>(day: u32, rng: &mut R, noisy: bool) -> (Profile, Profile) {
    let phase = 2.0 * PI * (day as f64 - 20.0) / 365.0;
    let daily_mean = 11.0 - 14.0 * phase.cos();
    let winter = (0.5 + 0.5 * phase.cos()).powi(2);
    let season_level = 1.0 + 0.16 * (2.0 * phase).cos();

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut z = || if noisy { std_normal.sample(rng) } else { 0.0 };

    let day_offset = 2.5 * z();
    let day_scale = 1.0 + 0.03 * z();
    let mut temperature = [0.0; HOURS];
    let mut base = [0.0; HOURS];
    let mut drift = 0.0;
    for t in 0..HOURS {
        let tf = t as f64;
        drift = 0.7 * drift + 0.4 * z();
        temperature[t] =
            daily_mean + day_offset + 5.0 * (2.0 * PI * (tf - 9.0) / 24.0).sin() + drift;
        let shape = 0.58 + (0.14 + 0.10 * winter) * bell(tf, 8.0, 1.6) + 0.30 * bell(tf, 18.5, 2.4)
            - 0.10 * bell(tf, 3.5, 2.2);
        base[t] = season_level * shape * day_scale * (1.0 + 0.01 * z());
    }
    (temperature, base)
}

/// Noise-free yearly peak of the raw base-load shape.
fn nominal_peak() -> f64 {
    static PEAK: OnceLock<f64> = OnceLock::new();
    *PEAK.get_or_init(|| {
        // Never consulted: noise is off.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (1..=365u32)
            .map(|d| {
                synth_day_raw(d, &mut rng, false)
                    .1
                    .into_iter()
                    .fold(f64::MIN, f64::max)
            })
            .fold(f64::MIN, f64::max)
    })
}

/// One synthetic day, base load scaled by the noise-free yearly peak and
/// capped at 1.
pub fn synth_baseline<R: Rng + ?Sized>(
    day: u32,
    rng: &mut R,
    noisy: bool,
) -> Result<DayContext, SimError> {
    if !(1..=365).contains(&day) {
        return Err(SimError::DayOfYear(day));
    }
    let (temperature, raw) = synth_day_raw(day, rng, noisy);
    let peak = nominal_peak();
    DayContext::new(temperature, raw.map(|b| (b / peak).min(1.0)))
}

/// A full synthetic year (days 1..=365) normalised so its peak hour is 1.
pub fn synth_year(seed: u64, noisy: bool) -> Vec<DayContext> {
    let raw: Vec<(Profile, Profile)> = (1..=365u32)
        .map(|d| {
            let mut rng = indexed_rng(seed, Stream::Simulate, u64::from(d) + (1 << 40));
            synth_day_raw(d, &mut rng, noisy)
        })
        .collect();
    let peak = raw
        .iter()
        .flat_map(|(_, b)| b.iter().copied())
        .fold(f64::MIN, f64::max);
    raw.into_iter()
        .map(|(temperature, base)| DayContext {
            temperature,
            base_load: base.map(|b| b / peak),
        })
        .collect()
}

/// How contexts are drawn from a finite pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BaselineSampling {
    /// Uniform with replacement.
    #[default]
    WithReplacement,
    /// Each day used at most once; exhausting the pool is an error.
    WithoutReplacement,
}

/// Source of day contexts for dataset generation.
#[derive(Clone, Debug)]
pub struct BaselineProvider {
    days: Vec<DayContext>,
    sampling: BaselineSampling,
}

impl BaselineProvider {
    pub fn new(days: Vec<DayContext>, sampling: BaselineSampling) -> Result<Self, SimError> {
        if days.is_empty() {
            return Err(SimError::EmptyProvider);
        }
        for d in &days {
            d.validate()?;
        }
        Ok(Self { days, sampling })
    }

    pub fn synthetic(seed: u64) -> Self {
        Self {
            days: synth_year(seed, true),
            sampling: BaselineSampling::WithReplacement,
        }
    }

    pub fn days(&self) -> &[DayContext] {
        &self.days
    }

    pub fn sampling(&self) -> BaselineSampling {
        self.sampling
    }

    /// Pool indices for `count` draws.
    pub fn draw_indices<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, SimError> {
        match self.sampling {
            BaselineSampling::WithReplacement => Ok((0..count)
                .map(|_| rng.random_range(0..self.days.len()))
                .collect()),
            BaselineSampling::WithoutReplacement => {
                if count > self.days.len() {
                    return Err(SimError::Exhausted(self.days.len()));
                }
                let mut idx: Vec<usize> = (0..self.days.len()).collect();
                idx.shuffle(rng);
                idx.truncate(count);
                Ok(idx)
            }
        }
    }
}

fn header() -> Vec<String> {
    let mut h = vec!["date".to_string()];
    h.extend((0..HOURS).map(|t| format!("t{t:02}")));
    h.extend((0..HOURS).map(|t| format!("l{t:02}")));
    h
}

/// Reads `date, t00..t23 (°C), l00..l23 (p.u.)` rows.
pub fn read_baseline_csv<R: Read>(reader: R) -> Result<Vec<(String, DayContext)>, SimError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let expected = header();
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if found != expected {
        return Err(SimError::Format(format!(
            "baseline header mismatch: expected date,t00..t23,l00..l23, found {}",
            found.join(",")
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64, SimError> {
            rec[i].trim().parse::<f64>().map_err(|e| {
                SimError::Format(format!("row {}: column {}: {e}", line + 1, expected[i]))
            })
        };
        let mut temperature = [0.0; HOURS];
        let mut base = [0.0; HOURS];
        for t in 0..HOURS {
            temperature[t] = parse(1 + t)?;
            base[t] = parse(1 + HOURS + t)?;
        }
        let ctx = DayContext::new(temperature, base)
            .map_err(|e| SimError::Format(format!("row {}: {e}", line + 1)))?;
        out.push((rec[0].to_string(), ctx));
    }
    if out.is_empty() {
        return Err(SimError::EmptyProvider);
    }
    Ok(out)
}

pub fn write_baseline_csv<W: Write>(
    writer: W,
    days: &[(String, DayContext)],
) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header())?;
    for (date, ctx) in days {
        let mut row = vec![date.clone()];
        row.extend(ctx.temperature.iter().map(f64::to_string));
        row.extend(ctx.base_load.iter().map(f64::to_string));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}
