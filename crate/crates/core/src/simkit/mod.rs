//! Ground-truth simulator for policy-dependent daily load profiles.
//!
//! A day is described by its context (hourly temperature and base load, in
//! per-unit of the yearly peak). The policy vector adds an EV charging bump
//! with a flat EV component, and a temperature-driven heat-pump component.

mod baseline;
mod dataset;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use baseline::{
    read_baseline_csv, synth_baseline, synth_year, write_baseline_csv, BaselineProvider,
    BaselineSampling,
};
pub use dataset::{generate_training_set, read_dataset_csv, write_dataset_csv, TrainingRecord};

pub const HOURS: usize = 24;
pub const POLICY_DIM: usize = 4;

/// One day's worth of hourly values.
pub type Profile = [f64; HOURS];

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("policy component `{name}` = {value} outside [0, 1]")]
    Policy { name: &'static str, value: f64 },
    #[error("invalid day context: {0}")]
    Context(String),
    #[error("day of year {0} outside 1..=365")]
    DayOfYear(u32),
    #[error("baseline provider exhausted after {0} days")]
    Exhausted(usize),
    #[error("baseline provider has no days")]
    EmptyProvider,
    #[error("training set size must be at least 1")]
    EmptyDataset,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed csv: {0}")]
    Format(String),
}

/// Policy condition: EV adoption, EV charging flexibility, heat-pump
/// adoption and building efficiency, each a fraction in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyVector {
    pub ev_adopt: f64,
    pub ev_flex: f64,
    pub hp_adopt: f64,
    pub hp_eff: f64,
}

impl PolicyVector {
    pub const NAMES: [&'static str; POLICY_DIM] = ["ev_adopt", "ev_flex", "hp_adopt", "hp_eff"];

    pub fn new(ev_adopt: f64, ev_flex: f64, hp_adopt: f64, hp_eff: f64) -> Result<Self, SimError> {
        let p = Self {
            ev_adopt,
            ev_flex,
            hp_adopt,
            hp_eff,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_array(a: [f64; POLICY_DIM]) -> Result<Self, SimError> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; POLICY_DIM] {
        [self.ev_adopt, self.ev_flex, self.hp_adopt, self.hp_eff]
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, value) in Self::NAMES.iter().zip(self.to_array()) {
            if !(0.0..=1.0).contains(&value) {
                return Err(SimError::Policy { name, value });
            }
        }
        Ok(())
    }
}

/// Exogenous day context: temperature (°C) and base load (p.u.).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayContext {
    pub temperature: Profile,
    pub base_load: Profile,
}

impl DayContext {
    pub fn new(temperature: Profile, base_load: Profile) -> Result<Self, SimError> {
        let ctx = Self {
            temperature,
            base_load,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if let Some(t) = self.temperature.iter().find(|t| !t.is_finite()) {
            return Err(SimError::Context(format!("non-finite temperature {t}")));
        }
        if let Some(b) = self.base_load.iter().find(|&&b| !(b > 0.0 && b <= 1.0)) {
            return Err(SimError::Context(format!("base load {b} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn mean_temperature(&self) -> f64 {
        mean(&self.temperature)
    }
}

/// Daily demand profile in p.u. of the yearly peak.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadScenario {
    pub demand: Profile,
}

/// Distribution parameters of the simulator's random perturbations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimNoiseSpec {
    pub center_jitter_sd: f64,
    pub width_jitter_sd: f64,
    pub uniform_add_mean: f64,
    pub uniform_add_sd: f64,
    pub smooth_mean_base: f64,
    pub smooth_sd_base: f64,
    pub smooth_mean_max: f64,
    pub smooth_sd_max: f64,
    /// Replace every draw by its mean.
    pub deterministic: bool,
}

impl Default for SimNoiseSpec {
    fn default() -> Self {
        Self {
            center_jitter_sd: 0.05,
            width_jitter_sd: 0.1,
            uniform_add_mean: 0.1,
            uniform_add_sd: 0.01,
            smooth_mean_base: 0.05,
            smooth_sd_base: 0.07,
            smooth_mean_max: 0.8,
            smooth_sd_max: 0.3,
            deterministic: false,
        }
    }
}

impl SimNoiseSpec {
    pub fn deterministic() -> Self {
        Self {
            deterministic: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let sds = [
            self.center_jitter_sd,
            self.width_jitter_sd,
            self.uniform_add_sd,
            self.smooth_sd_base,
            self.smooth_sd_max,
        ];
        if sds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(SimError::Context(
                "noise standard deviations must be >= 0".into(),
            ));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, mean: f64, sd: f64, rng: &mut R) -> f64 {
        if self.deterministic || sd == 0.0 {
            mean
        } else {
            Normal::new(mean, sd).expect("validated sd").sample(rng)
        }
    }
}

/// Fixed constants of the load model.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConstants {
    pub ev_peak_hour: f64,
    pub ev_base_sd_hours: f64,
    pub ev_max_sd_hours: f64,
    pub ev_max_shift_hours: f64,
    pub ev_max_height: f64,
    pub hp_max_height: f64,
    pub hourly_temp_weight: f64,
    pub daily_temp_weight: f64,
    pub temp_threshold: f64,
    pub softplus_temperature: f64,
    /// Blended temperature at which full adoption reaches `hp_max_height`.
    pub hp_reference_temp: f64,
}

pub const SIM: SimConstants = SimConstants {
    ev_peak_hour: 18.0,
    ev_base_sd_hours: 1.0,
    ev_max_sd_hours: 4.0,
    ev_max_shift_hours: 5.0,
    ev_max_height: 0.75,
    hp_max_height: 2.0,
    hourly_temp_weight: 0.8,
    daily_temp_weight: 0.2,
    temp_threshold: 19.0,
    softplus_temperature: 1.3,
    hp_reference_temp: -10.0,
};

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Gaussian bump on the 24-hour circle: mass past midnight lands on the
/// morning hours of the same day.
fn wrapped_bump(center: f64, sd: f64) -> Profile {
    let mut out = [0.0; HOURS];
    for (t, o) in out.iter_mut().enumerate() {
        for wrap in -2i32..=2 {
            let dx = t as f64 + 24.0 * wrap as f64 - center;
            *o += (-0.5 * (dx / sd).powi(2)).exp();
        }
    }
    out
}

/// The EV charging bump alone (no flat component), given jitter factors.
///
/// The unshifted bump (flexibility 0) peaks at `0.75 * ev_adopt`. Its
/// energy is then kept fixed while flexibility shifts the centre later and
/// widens it, so flexibility only reshapes charging demand.
pub fn ev_bump(policy: &PolicyVector, center_jitter: f64, width_jitter: f64) -> Profile {
    let c = &SIM;
    let base_center = c.ev_peak_hour * center_jitter;
    let base_sd = (c.ev_base_sd_hours * width_jitter).max(0.05);
    let reference = wrapped_bump(base_center, base_sd);
    let peak = reference.iter().copied().fold(f64::MIN, f64::max);
    let energy = c.ev_max_height * policy.ev_adopt * reference.iter().sum::<f64>() / peak;

    let center = (c.ev_peak_hour + c.ev_max_shift_hours * policy.ev_flex) * center_jitter;
    let sd = ((c.ev_base_sd_hours + (c.ev_max_sd_hours - c.ev_base_sd_hours) * policy.ev_flex)
        * width_jitter)
        .max(0.05);
    let shape = wrapped_bump(center, sd);
    let total: f64 = shape.iter().sum();
    shape.map(|v| energy * v / total)
}

/// EV charging load (p.u.): shifted, widened bump plus a flat addition.
pub fn ev_load<R: Rng + ?Sized>(
    policy: &PolicyVector,
    noise: &SimNoiseSpec,
    rng: &mut R,
) -> Profile {
    let center_jitter = noise.draw(1.0, noise.center_jitter_sd, rng);
    let width_jitter = noise.draw(1.0, noise.width_jitter_sd, rng);
    let flat = policy.ev_adopt * noise.draw(noise.uniform_add_mean, noise.uniform_add_sd, rng);
    if policy.ev_adopt == 0.0 {
        return [0.0; HOURS];
    }
    ev_bump(policy, center_jitter, width_jitter).map(|v| (v + flat).max(0.0))
}

/// Softplus heating signal before adoption scaling and smoothing.
pub fn heat_signal(temperature: &Profile) -> Profile {
    let c = &SIM;
    let daily = mean(temperature);
    temperature.map(|t| {
        let blended = c.hourly_temp_weight * t + c.daily_temp_weight * daily;
        softplus(c.temp_threshold - blended, c.softplus_temperature)
    })
}

fn softplus(x: f64, tau: f64) -> f64 {
    let z = x / tau;
    // log(1 + e^z) without overflow for large z.
    tau * if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Scale that maps the heating signal at the reference temperature to the
/// maximum heat-pump peak.
pub fn hp_scale() -> f64 {
    let c = &SIM;
    c.hp_max_height
        / softplus(
            c.temp_threshold - c.hp_reference_temp,
            c.softplus_temperature,
        )
}

/// Mean and standard deviation of the smoothing factor at efficiency `eff`.
pub fn smoothing_distribution(noise: &SimNoiseSpec, eff: f64) -> (f64, f64) {
    (
        noise.smooth_mean_base + (noise.smooth_mean_max - noise.smooth_mean_base) * eff,
        noise.smooth_sd_base + (noise.smooth_sd_max - noise.smooth_sd_base) * eff,
    )
}

/// Heat-pump load for a given smoothing factor (clamped to `[0, 1]`).
pub fn hp_load_with_factor(policy: &PolicyVector, temperature: &Profile, factor: f64) -> Profile {
    if policy.hp_adopt == 0.0 {
        return [0.0; HOURS];
    }
    let a = factor.clamp(0.0, 1.0);
    let raw = heat_signal(temperature);
    let m = mean(&raw);
    let scale = hp_scale() * policy.hp_adopt;
    raw.map(|h| scale * ((1.0 - a) * h + a * m))
}

/// Heat-pump load (p.u.) driven by the day's temperature profile.
pub fn hp_load<R: Rng + ?Sized>(
    policy: &PolicyVector,
    temperature: &Profile,
    noise: &SimNoiseSpec,
    rng: &mut R,
) -> Profile {
    let (m, sd) = smoothing_distribution(noise, policy.hp_eff);
    let factor = noise.draw(m, sd, rng);
    hp_load_with_factor(policy, temperature, factor)
}

/// Base load plus EV and heat-pump loads, floored at zero.
pub fn simulate_scenario<R: Rng + ?Sized>(
    policy: &PolicyVector,
    context: &DayContext,
    noise: &SimNoiseSpec,
    rng: &mut R,
) -> LoadScenario {
    let ev = ev_load(policy, noise, rng);
    let hp = hp_load(policy, &context.temperature, noise, rng);
    let mut demand = [0.0; HOURS];
    for t in 0..HOURS {
        demand[t] = (context.base_load[t] + ev[t] + hp[t]).max(0.0);
    }
    LoadScenario { demand }
}
