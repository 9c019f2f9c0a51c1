use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::norm::NormStats;
use super::schedule::{NoiseSchedule, ScheduleSpec};
use super::{DiffusionError, INPUT_DIM};
use crate::autodiff::MlpParams;
use crate::simkit::HOURS;

/// Coefficient applied to `x_s - sqrt(abar_s) x0_hat` in the reverse step
/// `x_{s-1} = (x_s - c_s (x_s - sqrt(abar_s) x0_hat)) / sqrt(alpha_s)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseForm {
    /// `c_s = beta_s / (1 - abar_s)`: the mean of the Gaussian posterior
    /// `q(x_{s-1} | x_s, x0_hat)`. The last step returns `x0_hat` exactly.
    #[default]
    PosteriorMean,
    /// `c_s = beta_s / sqrt(1 - abar_s)`. Leaves part of the initial noise in
    /// the output and shrinks the prediction; kept for comparison.
    RootDenominator,
}

impl ReverseForm {
    pub fn coefficient(self, schedule: &NoiseSchedule, s: usize) -> f64 {
        let beta = schedule.beta[s - 1];
        let rest = 1.0 - schedule.alpha_bar[s - 1];
        match self {
            ReverseForm::PosteriorMean => beta / rest,
            ReverseForm::RootDenominator => beta / rest.sqrt(),
        }
    }
}

/// How the network output becomes the clean-signal estimate at step `s`:
/// `x0_hat = c_skip x_s + c_out mlp(...)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserForm {
    /// `c_skip = 0`, `c_out = 1`: the network predicts `x0` outright.
    Direct,
    /// `c_skip = sqrt(abar_s)`, `c_out = sqrt(1 - abar_s)`. The skip term is
    /// the best linear guess of a unit-variance signal, so the network only
    /// supplies the correction, and near-clean inputs pass through unchanged.
    #[default]
    Skip,
}

impl DenoiserForm {
    pub fn coefficients(self, schedule: &NoiseSchedule, s: usize) -> (f64, f64) {
        match self {
            DenoiserForm::Direct => (0.0, 1.0),
            DenoiserForm::Skip => {
                let ab = schedule.alpha_bar[s - 1];
                (ab.sqrt(), (1.0 - ab).sqrt())
            }
        }
    }
}

/// A denoiser together with everything needed to sample from it.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub denoiser: MlpParams,
    pub schedule: NoiseSchedule,
    /// `None` until trained.
    pub norm: Option<NormStats>,
    pub denoiser_form: DenoiserForm,
    pub reverse_form: ReverseForm,
    /// Smallest and largest demand (p.u.) seen in training.
    pub load_range: Option<(f64, f64)>,
}

pub const MODEL_FORMAT: &str = "diffscen-generator";
pub const MODEL_VERSION: u32 = 1;

/// On-disk layout. Floats are written with shortest round-trip formatting,
/// so reading a file back gives bit-identical weights.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    schedule: ScheduleSpec,
    denoiser_form: DenoiserForm,
    reverse_form: ReverseForm,
    norm: NormStats,
    load_range: [f64; 2],
    denoiser: MlpParams,
    /// Hex SHA-256 of the little-endian weight bytes (w1, b1, w2, b2).
    weights_sha256: String,
}

pub fn weights_digest(params: &MlpParams) -> String {
    let mut h = Sha256::new();
    for block in params.blocks() {
        for v in block {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl GeneratorModel {
    pub fn norm(&self) -> Result<&NormStats, DiffusionError> {
        self.norm.as_ref().ok_or(DiffusionError::Untrained)
    }

    pub fn check_layout(&self) -> Result<(), DiffusionError> {
        let p = &self.denoiser;
        if p.input_dim != INPUT_DIM || p.output_dim != HOURS {
            return Err(DiffusionError::Layout(format!(
                "denoiser maps {} -> {}, expected {INPUT_DIM} -> {HOURS}",
                p.input_dim, p.output_dim
            )));
        }
        p.validate()?;
        Ok(())
    }

    pub fn save<W: Write>(&self, writer: W) -> Result<(), DiffusionError> {
        let norm = self.norm()?.clone();
        let (lo, hi) = self.load_range.ok_or(DiffusionError::Untrained)?;
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            schedule: self.schedule.spec(),
            denoiser_form: self.denoiser_form,
            reverse_form: self.reverse_form,
            norm,
            load_range: [lo, hi],
            weights_sha256: weights_digest(&self.denoiser),
            denoiser: self.denoiser.clone(),
        };
        serde_json::to_writer_pretty(writer, &file)?;
        Ok(())
    }

    pub fn load<R: Read>(reader: R) -> Result<Self, DiffusionError> {
        let file: ModelFile = serde_json::from_reader(reader)?;
        if file.format != MODEL_FORMAT {
            return Err(DiffusionError::Layout(format!(
                "not a model file: format `{}`",
                file.format
            )));
        }
        if file.version != MODEL_VERSION {
            return Err(DiffusionError::Version(file.version));
        }
        let digest = weights_digest(&file.denoiser);
        if digest != file.weights_sha256 {
            return Err(DiffusionError::Checksum {
                stored: file.weights_sha256,
                computed: digest,
            });
        }
        if !file.norm.all_valid() {
            return Err(DiffusionError::Layout(
                "normalisation statistics invalid".into(),
            ));
        }
        let model = Self {
            denoiser: file.denoiser,
            schedule: file.schedule.build()?,
            norm: Some(file.norm),
            denoiser_form: file.denoiser_form,
            reverse_form: file.reverse_form,
            load_range: Some((file.load_range[0], file.load_range[1])),
        };
        model.check_layout()?;
        Ok(model)
    }
}
