use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{DenoiserForm, GeneratorModel, ReverseForm};
use super::norm::{residual, NormStats};
use super::schedule::{forward_diffuse, NoiseSchedule};
use super::{DiffusionError, INPUT_DIM};
use crate::autodiff::{mlp_on_tape, Activation, MlpParams, Tape, Tensor};
use crate::rng::{stream_rng, Stream};
use crate::simkit::{TrainingRecord, HOURS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// `theta <- theta - lr * grad`.
    Sgd,
    /// Adaptive moments with the usual (0.9, 0.999, 1e-8) constants.
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Rate reached at the last epoch by cosine annealing; equal to
    /// `learning_rate` for a constant rate.
    pub final_learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    pub optimizer: Optimizer,
    pub denoiser_form: DenoiserForm,
    pub reverse_form: ReverseForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            final_learning_rate: 1e-5,
            epochs: 2000,
            batch_size: 64,
            hidden_width: 128,
            activation: Activation::Silu,
            optimizer: Optimizer::Adam,
            denoiser_form: DenoiserForm::default(),
            reverse_form: ReverseForm::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: &str| Err(DiffusionError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.final_learning_rate.is_finite()
            && self.final_learning_rate > 0.0
            && self.final_learning_rate <= self.learning_rate)
        {
            return bad("final learning rate must be positive and at most the initial rate");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_width == 0 {
            return bad("epochs, batch size and hidden width must be at least 1");
        }
        Ok(())
    }
}

impl TrainConfig {
    /// Cosine-annealed rate for `epoch`.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let progress = epoch as f64 / (self.epochs - 1) as f64;
        let (hi, lo) = (self.learning_rate, self.final_learning_rate);
        lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Mean minibatch loss of every epoch, in normalised units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Rows of denoiser inputs with their clean targets. The estimate for row
/// `i` is `skip_i + out_scale_i * mlp(input_i)` (elementwise).
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub skip: Tensor,
    pub out_scale: Tensor,
}

/// `(1/B) sum_i ||target_i - x0_hat_i||^2` and its gradient with respect to
/// each parameter block (w1, b1, w2, b2).
pub fn minibatch_loss_and_grad(
    params: &MlpParams,
    batch: &Minibatch,
) -> Result<(f64, [Vec<f64>; 4]), DiffusionError> {
    let rows = batch.inputs.rows();
    let mut tape = Tape::new();
    let x = tape.constant(batch.inputs.clone());
    let y = tape.constant(batch.targets.clone());
    let skip = tape.constant(batch.skip.clone());
    let out_scale = tape.constant(batch.out_scale.clone());
    let nodes = params.record(&mut tape, true);
    let out = mlp_on_tape(&mut tape, &nodes, params.activation, x)?;
    let scaled = tape.mul(out, out_scale)?;
    let pred = tape.add(skip, scaled)?;
    let diff = tape.sub(pred, y)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    let loss = tape.scale(total, 1.0 / rows as f64);
    let value = tape.value(loss).values()[0];
    let mut grads = tape.backward(loss, &Tensor::scalar(1.0))?;
    let mut take = |id| grads.take(id).map(Tensor::into_values).unwrap_or_default();
    let g = [
        take(nodes.w1),
        take(nodes.b1),
        take(nodes.w2),
        take(nodes.b2),
    ];
    Ok((value, g))
}

/// One denoiser input row: noisy residual, policy, context features, step
/// fraction.
pub(crate) fn input_row(
    x_s: &[f64],
    policy: &[f64],
    context: &[f64],
    s: usize,
    steps: usize,
    out: &mut Vec<f64>,
) {
    out.extend_from_slice(x_s);
    out.extend(policy.iter().map(|v| (v - POLICY_CENTER) * POLICY_GAIN));
    out.extend_from_slice(context);
    out.push(step_feature(s, steps));
}

/// Policy components are uniform on [0, 1] in the simulated corpus; this
/// affine map gives them zero mean and unit variance like the other inputs.
pub(crate) const POLICY_CENTER: f64 = 0.5;
pub(crate) const POLICY_GAIN: f64 = 3.464_101_615_137_754_6;

/// Step number fed to the denoiser, as a fraction of the chain length.
pub(crate) fn step_feature(s: usize, steps: usize) -> f64 {
    s as f64 / steps as f64
}

struct Prepared {
    x0: Vec<f64>,
    policy: [f64; 4],
    context: Vec<f64>,
}

struct AdamState {
    m: [Vec<f64>; 4],
    v: [Vec<f64>; 4],
    t: i32,
}

/// Fits the denoiser to predict clean normalised residuals from their
/// forward-diffused versions.
pub fn train(
    records: &[TrainingRecord],
    schedule: NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(GeneratorModel, TrainReport), DiffusionError> {
    train_observed(records, schedule, cfg, seed, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_observed<F: FnMut(usize, f64)>(
    records: &[TrainingRecord],
    schedule: NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: F,
) -> Result<(GeneratorModel, TrainReport), DiffusionError> {
    if records.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    cfg.validate()?;
    let norm = NormStats::from_records(records);
    let data: Vec<Prepared> = records
        .iter()
        .map(|r| Prepared {
            x0: norm.normalize_residual(&residual(r)).to_vec(),
            policy: r.policy.to_array(),
            context: norm.context_features(&r.context),
        })
        .collect();

    let mut rng = stream_rng(seed, Stream::Train);
    let mut params = MlpParams::init(INPUT_DIM, cfg.hidden_width, HOURS, cfg.activation, &mut rng);
    let mut adam = AdamState {
        m: params.blocks().map(|b| vec![0.0; b.len()]),
        v: params.blocks().map(|b| vec![0.0; b.len()]),
        t: 0,
    };
    let steps = schedule.steps();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.rate_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut inputs = Vec::with_capacity(chunk.len() * INPUT_DIM);
            let mut targets = Vec::with_capacity(chunk.len() * HOURS);
            let mut skip = Vec::with_capacity(chunk.len() * HOURS);
            let mut out_scale = Vec::with_capacity(chunk.len() * HOURS);
            for &i in chunk {
                let rec = &data[i];
                let s = rng.random_range(1..=steps);
                let eps: Vec<f64> = (0..HOURS)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let x_s = forward_diffuse(&rec.x0, s, &eps, &schedule);
                let (c_skip, c_out) = cfg.denoiser_form.coefficients(&schedule, s);
                skip.extend(x_s.iter().map(|v| c_skip * v));
                out_scale.extend(std::iter::repeat_n(c_out, HOURS));
                input_row(&x_s, &rec.policy, &rec.context, s, steps, &mut inputs);
                targets.extend_from_slice(&rec.x0);
            }
            let n = chunk.len();
            let batch = Minibatch {
                inputs: Tensor::matrix(n, INPUT_DIM, inputs)?,
                targets: Tensor::matrix(n, HOURS, targets)?,
                skip: Tensor::matrix(n, HOURS, skip)?,
                out_scale: Tensor::matrix(n, HOURS, out_scale)?,
            };
            let (loss, grads) = minibatch_loss_and_grad(&params, &batch)?;
            if !loss.is_finite() {
                return Err(DiffusionError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            apply_update(&mut params, &grads, lr, cfg.optimizer, &mut adam);
            epoch_loss += loss;
            batches += 1;
        }
        let mean_loss = epoch_loss / batches as f64;
        report.epoch_losses.push(mean_loss);
        on_epoch(epoch, mean_loss);
    }

    let (lo, hi) = records
        .iter()
        .flat_map(|r| r.scenario.demand)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
            (lo.min(d), hi.max(d))
        });
    let model = GeneratorModel {
        denoiser: params,
        schedule,
        norm: Some(norm),
        denoiser_form: cfg.denoiser_form,
        reverse_form: cfg.reverse_form,
        load_range: Some((lo, hi)),
    };
    Ok((model, report))
}

fn apply_update(
    params: &mut MlpParams,
    grads: &[Vec<f64>; 4],
    lr: f64,
    optimizer: Optimizer,
    adam: &mut AdamState,
) {
    match optimizer {
        Optimizer::Sgd => {
            for (block, g) in params.blocks_mut().into_iter().zip(grads) {
                for (w, gi) in block.iter_mut().zip(g) {
                    *w -= lr * gi;
                }
            }
        }
        Optimizer::Adam => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            adam.t += 1;
            let c1 = 1.0 - B1.powi(adam.t);
            let c2 = 1.0 - B2.powi(adam.t);
            for (k, block) in params.blocks_mut().into_iter().enumerate() {
                for (j, w) in block.iter_mut().enumerate() {
                    let g = grads[k][j];
                    let m = &mut adam.m[k][j];
                    let v = &mut adam.v[k][j];
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::ScheduleSpec;
    use crate::simkit::{generate_training_set, BaselineProvider, SimNoiseSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = MlpParams::init(INPUT_DIM, 16, HOURS, Activation::Silu, &mut rng);
        let inputs = Tensor::matrix(
            5,
            INPUT_DIM,
            (0..5 * INPUT_DIM)
                .map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0)
                .collect(),
        )
        .unwrap();
        let targets = Tensor::matrix(
            5,
            HOURS,
            (0..5 * HOURS).map(|i| (i as f64 * 0.3).cos()).collect(),
        )
        .unwrap();
        let batch = Minibatch {
            skip: Tensor::matrix(5, HOURS, (0..5 * HOURS).map(|i| 0.01 * i as f64).collect())
                .unwrap(),
            out_scale: Tensor::matrix(
                5,
                HOURS,
                (0..5 * HOURS).map(|i| 0.5 + 0.02 * i as f64).collect(),
            )
            .unwrap(),
            inputs,
            targets,
        };
        let (_, grads) = minibatch_loss_and_grad(&params, &batch).unwrap();
        let loss = |p: &MlpParams| minibatch_loss_and_grad(p, &batch).unwrap().0;
        let h = 1e-5;
        for block in 0..4 {
            let len = params.blocks()[block].len();
            for j in (0..len).step_by(len / 7 + 1) {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.blocks_mut()[block][j] += h;
                minus.blocks_mut()[block][j] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads[block][j];
                let rel = (fd - an).abs() / an.abs().max(1e-4);
                assert!(rel < 1e-4, "block {block} entry {j}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn single_record_overfits() {
        let data = generate_training_set(
            1,
            &BaselineProvider::synthetic(0),
            &SimNoiseSpec::default(),
            5,
        )
        .unwrap();
        // One record normalises to a zero target; the skip form would have
        // to cancel a large multiple of the noisy input at small steps.
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            denoiser_form: DenoiserForm::Direct,
            learning_rate: 0.02,
            final_learning_rate: 0.02,
            epochs: 20_000,
            batch_size: 1,
            hidden_width: 32,
            ..TrainConfig::default()
        };
        let sched = ScheduleSpec::default().build().unwrap();
        let (_, report) = train(&data, sched, &cfg, 0).unwrap();
        let tail: f64 = report.epoch_losses.iter().rev().take(50).sum::<f64>() / 50.0;
        assert!(tail < 1e-3, "final loss {tail}");
    }

    #[test]
    fn empty_dataset_and_bad_config() {
        let sched = ScheduleSpec::default().build().unwrap();
        assert!(matches!(
            train(&[], sched.clone(), &TrainConfig::default(), 0),
            Err(DiffusionError::EmptyDataset)
        ));
        let data = generate_training_set(
            2,
            &BaselineProvider::synthetic(0),
            &SimNoiseSpec::default(),
            5,
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&data, sched, &cfg, 0),
            Err(DiffusionError::Config(_))
        ));
    }

    #[test]
    fn divergent_rate_reports_non_finite_loss() {
        let data = generate_training_set(
            64,
            &BaselineProvider::synthetic(0),
            &SimNoiseSpec::default(),
            5,
        )
        .unwrap();
        let cfg = TrainConfig {
            // Adam steps are bounded by the rate, so use plain SGD here.
            optimizer: Optimizer::Sgd,
            learning_rate: 1e6,
            final_learning_rate: 1e6,
            epochs: 50,
            batch_size: 8,
            hidden_width: 8,
            ..TrainConfig::default()
        };
        let sched = ScheduleSpec::default().build().unwrap();
        let err = train(&data, sched, &cfg, 0).unwrap_err();
        assert!(
            matches!(
                err,
                DiffusionError::NonFiniteLoss { .. } | DiffusionError::Autodiff(_)
            ),
            "{err}"
        );
    }

    #[test]
    fn training_is_reproducible() {
        let data = generate_training_set(
            50,
            &BaselineProvider::synthetic(0),
            &SimNoiseSpec::default(),
            5,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            hidden_width: 8,
            ..TrainConfig::default()
        };
        let sched = ScheduleSpec::default().build().unwrap();
        let (a, ra) = train(&data, sched.clone(), &cfg, 4).unwrap();
        let (b, rb) = train(&data, sched, &cfg, 4).unwrap();
        assert_eq!(a.denoiser, b.denoiser);
        assert_eq!(ra, rb);
    }
}
