use super::model::GeneratorModel;
use super::train::{step_feature, POLICY_CENTER, POLICY_GAIN};
use super::DiffusionError;
use crate::autodiff::{forward, mlp_on_tape, Leaf, Recording, Tensor};
use crate::simkit::{DayContext, LoadScenario, PolicyVector, Profile, HOURS, POLICY_DIM};

/// `jacobian[t][k]` = d demand_t / d policy_k.
pub type Jacobian = [[f64; POLICY_DIM]; HOURS];

/// Runs the full reverse chain on a tape with the policy as the only
/// differentiable leaf. Output is the normalised residual `x_0`.
fn record_chain(
    model: &GeneratorModel,
    policy: &PolicyVector,
    context: &DayContext,
    eps: &Profile,
) -> Result<Recording, DiffusionError> {
    policy.validate()?;
    context.validate()?;
    model.check_layout()?;
    let norm = model.norm()?;
    let features = norm.context_features(context);
    let sched = &model.schedule;
    let steps = sched.steps();
    let leaves = vec![Leaf::variable(Tensor::row(policy.to_array().to_vec()))];
    let rec = forward(leaves, |tape, leaves| {
        let shift = tape.constant(Tensor::row(vec![-POLICY_CENTER * POLICY_GAIN; POLICY_DIM]));
        let scaled = tape.scale(leaves[0], POLICY_GAIN);
        let pi = tape.add(scaled, shift)?;
        let nodes = model.denoiser.record(tape, false);
        let ctx = tape.constant(Tensor::row(features.clone()));
        let mut x = tape.constant(Tensor::row(eps.to_vec()));
        for s in (1..=steps).rev() {
            let step = tape.constant(Tensor::row(vec![step_feature(s, steps)]));
            let input = tape.concat(&[x, pi, ctx, step])?;
            let out = mlp_on_tape(tape, &nodes, model.denoiser.activation, input)?;
            let (c_skip, c_out) = model.denoiser_form.coefficients(sched, s);
            let kept = tape.scale(x, c_skip);
            let added = tape.scale(out, c_out);
            let x0 = tape.add(kept, added)?;
            let c = model.reverse_form.coefficient(sched, s);
            let shrunk = tape.scale(x0, sched.alpha_bar[s - 1].sqrt());
            let gap = tape.sub(x, shrunk)?;
            let pull = tape.scale(gap, c);
            let moved = tape.sub(x, pull)?;
            x = tape.scale(moved, 1.0 / sched.alpha[s - 1].sqrt());
        }
        Ok(x)
    })?;
    Ok(rec)
}

/// Demand before flooring: base load plus denormalised residual.
fn unfloored(
    model: &GeneratorModel,
    context: &DayContext,
    rec: &Recording,
) -> Result<Profile, DiffusionError> {
    let r = model
        .norm()?
        .denormalize_residual(rec.output_value().values());
    Ok(std::array::from_fn(|t| context.base_load[t] + r[t]))
}

/// Deterministic reverse sampling from the fixed initial noise `eps`.
pub fn sample(
    model: &GeneratorModel,
    policy: &PolicyVector,
    context: &DayContext,
    eps: &Profile,
) -> Result<LoadScenario, DiffusionError> {
    let rec = record_chain(model, policy, context, eps)?;
    let raw = unfloored(model, context, &rec)?;
    Ok(LoadScenario {
        demand: raw.map(|d| d.max(0.0)),
    })
}

/// [`sample`] plus the Jacobian of every output hour with respect to the
/// policy, by one reverse pass per hour through the recorded chain. Hours
/// clipped at zero get a zero row.
pub fn sample_with_grad(
    model: &GeneratorModel,
    policy: &PolicyVector,
    context: &DayContext,
    eps: &Profile,
) -> Result<(LoadScenario, Jacobian), DiffusionError> {
    let rec = record_chain(model, policy, context, eps)?;
    let raw = unfloored(model, context, &rec)?;
    let std = &model.norm()?.residual_std;
    let mut jac = [[0.0; POLICY_DIM]; HOURS];
    let mut seed = Tensor::row(vec![0.0; HOURS]);
    for t in 0..HOURS {
        if raw[t] <= 0.0 {
            continue;
        }
        seed.values_mut()[t] = 1.0;
        let grads = rec.backward(&seed)?;
        seed.values_mut()[t] = 0.0;
        let g = grads[0].as_ref().expect("policy leaf is differentiable");
        for k in 0..POLICY_DIM {
            jac[t][k] = std[t] * g.values()[k];
        }
    }
    let scenario = LoadScenario {
        demand: raw.map(|d| d.max(0.0)),
    };
    Ok((scenario, jac))
}
