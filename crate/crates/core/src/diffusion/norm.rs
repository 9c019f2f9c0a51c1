use serde::{Deserialize, Serialize};

use crate::simkit::{DayContext, Profile, TrainingRecord, HOURS};

/// Per-hour mean and standard deviation of residuals, temperatures and base
/// loads over a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub residual_mean: Profile,
    pub residual_std: Profile,
    pub temperature_mean: Profile,
    pub temperature_std: Profile,
    pub base_mean: Profile,
    pub base_std: Profile,
}

/// Channels with (numerically) zero spread get unit scale, so constant data
/// normalises to zero instead of dividing by zero.
const MIN_STD: f64 = 1e-8;

fn channel_stats(rows: &[Profile]) -> (Profile, Profile) {
    let n = rows.len() as f64;
    let mut mean = [0.0; HOURS];
    for r in rows {
        for t in 0..HOURS {
            mean[t] += r[t];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = [0.0; HOURS];
    for r in rows {
        for t in 0..HOURS {
            std[t] += (r[t] - mean[t]).powi(2);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n).sqrt();
        if *s < MIN_STD {
            *s = 1.0;
        }
    }
    (mean, std)
}

/// Demand minus base load.
pub fn residual(record: &TrainingRecord) -> Profile {
    let mut r = [0.0; HOURS];
    for (t, v) in r.iter_mut().enumerate() {
        *v = record.scenario.demand[t] - record.context.base_load[t];
    }
    r
}

impl NormStats {
    /// Statistics of a non-empty training set.
    pub fn from_records(records: &[TrainingRecord]) -> Self {
        assert!(!records.is_empty(), "statistics of an empty set");
        let residuals: Vec<Profile> = records.iter().map(residual).collect();
        let temps: Vec<Profile> = records.iter().map(|r| r.context.temperature).collect();
        let bases: Vec<Profile> = records.iter().map(|r| r.context.base_load).collect();
        let (residual_mean, residual_std) = channel_stats(&residuals);
        let (temperature_mean, temperature_std) = channel_stats(&temps);
        let (base_mean, base_std) = channel_stats(&bases);
        Self {
            residual_mean,
            residual_std,
            temperature_mean,
            temperature_std,
            base_mean,
            base_std,
        }
    }

    pub fn normalize_residual(&self, r: &Profile) -> Profile {
        std::array::from_fn(|t| (r[t] - self.residual_mean[t]) / self.residual_std[t])
    }

    pub fn denormalize_residual(&self, x: &[f64]) -> Profile {
        std::array::from_fn(|t| x[t] * self.residual_std[t] + self.residual_mean[t])
    }

    /// Normalised temperatures followed by normalised base loads (48 values).
    pub fn context_features(&self, z: &DayContext) -> Vec<f64> {
        let temp = (0..HOURS)
            .map(|t| (z.temperature[t] - self.temperature_mean[t]) / self.temperature_std[t]);
        let base = (0..HOURS).map(|t| (z.base_load[t] - self.base_mean[t]) / self.base_std[t]);
        temp.chain(base).collect()
    }

    pub fn all_valid(&self) -> bool {
        let stds = [&self.residual_std, &self.temperature_std, &self.base_std];
        let means = [&self.residual_mean, &self.temperature_mean, &self.base_mean];
        stds.iter()
            .all(|s| s.iter().all(|v| v.is_finite() && *v > 0.0))
            && means.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::{generate_training_set, BaselineProvider, SimNoiseSpec};

    #[test]
    fn round_trip_is_identity() {
        let data = generate_training_set(
            300,
            &BaselineProvider::synthetic(0),
            &SimNoiseSpec::default(),
            1,
        )
        .unwrap();
        let stats = NormStats::from_records(&data);
        assert!(stats.all_valid());
        for rec in data.iter().take(50) {
            let r = residual(rec);
            let back = stats.denormalize_residual(&stats.normalize_residual(&r));
            for t in 0..HOURS {
                assert!((back[t] - r[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalised_residuals_are_standardised() {
        let data = generate_training_set(
            500,
            &BaselineProvider::synthetic(0),
            &SimNoiseSpec::default(),
            2,
        )
        .unwrap();
        let stats = NormStats::from_records(&data);
        let xs: Vec<Profile> = data
            .iter()
            .map(|r| stats.normalize_residual(&residual(r)))
            .collect();
        let (m, s) = channel_stats(&xs);
        for t in 0..HOURS {
            assert!(m[t].abs() < 1e-10 && (s[t] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_channels_get_unit_scale() {
        let rows = vec![[2.0; HOURS]; 4];
        let (m, s) = channel_stats(&rows);
        assert_eq!(m, [2.0; HOURS]);
        assert_eq!(s, [1.0; HOURS]);
    }
}
