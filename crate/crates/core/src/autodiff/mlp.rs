use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tape::{Activation, NodeId, Tape};
use super::tensor::{gemm, Tensor};
use super::AutodiffError;

/// Weights of a single-hidden-layer perceptron
/// `y = act(x W1 + b1) W2 + b2`, with row-vector inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub activation: Activation,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// `[input_dim, hidden_dim]`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[hidden_dim, output_dim]`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Tape handles for the four parameter blocks.
#[derive(Clone, Copy, Debug)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl MlpParams {
    pub fn zeros(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        activation: Activation,
    ) -> Self {
        Self {
            activation,
            input_dim,
            hidden_dim,
            output_dim,
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim * output_dim],
            b2: vec![0.0; output_dim],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim, output_dim, activation);
        let a1 = (6.0 / (input_dim + hidden_dim) as f64).sqrt();
        let a2 = (6.0 / (hidden_dim + output_dim) as f64).sqrt();
        let u1 = Uniform::new_inclusive(-a1, a1).expect("finite bound");
        let u2 = Uniform::new_inclusive(-a2, a2).expect("finite bound");
        p.w1.iter_mut().for_each(|w| *w = u1.sample(rng));
        p.w2.iter_mut().for_each(|w| *w = u2.sample(rng));
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Checks that the weight buffers match the declared dimensions.
    pub fn validate(&self) -> Result<(), AutodiffError> {
        let expect = [
            ("w1", self.input_dim * self.hidden_dim, self.w1.len()),
            ("b1", self.hidden_dim, self.b1.len()),
            ("w2", self.hidden_dim * self.output_dim, self.w2.len()),
            ("b2", self.output_dim, self.b2.len()),
        ];
        for (name, want, got) in expect {
            if want != got {
                return Err(AutodiffError::Parameter {
                    name,
                    expected: want,
                    found: got,
                });
            }
        }
        let finite = self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|v| v.is_finite());
        if !finite {
            return Err(AutodiffError::NonFiniteValue { node: 0 });
        }
        Ok(())
    }

    pub fn w1_tensor(&self) -> Tensor {
        Tensor::matrix(self.input_dim, self.hidden_dim, self.w1.clone()).expect("validated dims")
    }

    pub fn b1_tensor(&self) -> Tensor {
        Tensor::row(self.b1.clone())
    }

    pub fn w2_tensor(&self) -> Tensor {
        Tensor::matrix(self.hidden_dim, self.output_dim, self.w2.clone()).expect("validated dims")
    }

    pub fn b2_tensor(&self) -> Tensor {
        Tensor::row(self.b2.clone())
    }

    /// Places the parameters on `tape`, as variables when `trainable`.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> MlpNodes {
        let mut leaf = |t: Tensor| {
            if trainable {
                tape.variable(t)
            } else {
                tape.constant(t)
            }
        };
        MlpNodes {
            w1: leaf(self.w1_tensor()),
            b1: leaf(self.b1_tensor()),
            w2: leaf(self.w2_tensor()),
            b2: leaf(self.b2_tensor()),
        }
    }

    /// Flat views in the order w1, b1, w2, b2.
    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn blocks(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

/// Records the perceptron applied to the `[m, input_dim]` node `x`.
pub fn mlp_on_tape(
    tape: &mut Tape,
    nodes: &MlpNodes,
    activation: Activation,
    x: NodeId,
) -> Result<NodeId, AutodiffError> {
    let h = tape.matmul(x, nodes.w1)?;
    let h = tape.add_bias(h, nodes.b1)?;
    let h = tape.activation(h, activation);
    let y = tape.matmul(h, nodes.w2)?;
    tape.add_bias(y, nodes.b2)
}

/// Evaluates the perceptron on an `[m, input_dim]` batch without recording.
pub fn mlp_apply(params: &MlpParams, input: &Tensor) -> Result<Tensor, AutodiffError> {
    params.validate()?;
    let m = if input.is_matrix() { input.rows() } else { 1 };
    if input.len() != m * params.input_dim {
        return Err(AutodiffError::Shape {
            op: "mlp_apply",
            shapes: vec![
                input.shape().to_vec(),
                vec![params.input_dim, params.hidden_dim],
            ],
        });
    }
    let (i, h, o) = (params.input_dim, params.hidden_dim, params.output_dim);
    let mut hidden = vec![0.0; m * h];
    gemm(
        m,
        i,
        h,
        input.values(),
        false,
        &params.w1,
        false,
        &mut hidden,
        false,
    );
    for row in hidden.chunks_mut(h) {
        for (x, b) in row.iter_mut().zip(&params.b1) {
            *x = params.activation.apply(*x + b);
        }
    }
    let mut out = vec![0.0; m * o];
    gemm(m, h, o, &hidden, false, &params.w2, false, &mut out, false);
    for row in out.chunks_mut(o) {
        for (x, b) in row.iter_mut().zip(&params.b2) {
            *x += b;
        }
    }
    Tensor::matrix(m, o, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::{forward, Leaf};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let p = MlpParams::zeros(5, 7, 3, Activation::Silu);
        let x = Tensor::row(vec![0.3, -1.0, 2.0, 5.0, -0.2]);
        let y = mlp_apply(&p, &x).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_tanh_closed_form() {
        let mut p = MlpParams::zeros(1, 1, 1, Activation::Tanh);
        p.w1 = vec![1.0];
        p.w2 = vec![1.0];
        let y = mlp_apply(&p, &Tensor::row(vec![0.5])).unwrap();
        assert!((y.values()[0] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((y.values()[0] - 0.46212).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = MlpParams::zeros(4, 3, 2, Activation::Tanh);
        let err = mlp_apply(&p, &Tensor::row(vec![1.0; 5])).unwrap_err();
        assert!(matches!(
            err,
            AutodiffError::Shape {
                op: "mlp_apply",
                ..
            }
        ));

        let mut bad = p.clone();
        bad.w2.pop();
        assert!(matches!(
            mlp_apply(&bad, &Tensor::row(vec![1.0; 4])),
            Err(AutodiffError::Parameter { name: "w2", .. })
        ));
    }

    #[test]
    fn tape_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::init(6, 16, 4, Activation::Silu, &mut rng);
        let x = Tensor::matrix(2, 6, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let direct = mlp_apply(&p, &x).unwrap();
        let rec = forward(vec![Leaf::constant(x)], |tape, leaves| {
            let nodes = p.record(tape, false);
            mlp_on_tape(tape, &nodes, p.activation, leaves[0])
        })
        .unwrap();
        assert_eq!(rec.output_value().values(), direct.values());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for act in [Activation::Tanh, Activation::Silu] {
            let p = MlpParams::init(5, 32, 3, act, &mut rng);
            let x0: Vec<f64> = (0..5).map(|i| 0.4 * (i as f64 - 2.0)).collect();
            let rec = forward(
                vec![Leaf::variable(Tensor::row(x0.clone()))],
                |tape, leaves| {
                    let nodes = p.record(tape, false);
                    let y = mlp_on_tape(tape, &nodes, act, leaves[0])?;
                    Ok(tape.sum(y))
                },
            )
            .unwrap();
            let g = rec.backward(&Tensor::scalar(1.0)).unwrap()[0]
                .clone()
                .unwrap();
            let f = |x: &[f64]| -> f64 {
                mlp_apply(&p, &Tensor::row(x.to_vec()))
                    .unwrap()
                    .values()
                    .iter()
                    .sum()
            };
            let h = 1e-6;
            for i in 0..5 {
                let mut xp = x0.clone();
                let mut xm = x0.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                let an = g.values()[i];
                let rel = (fd - an).abs() / an.abs().max(1e-3);
                assert!(rel < 1e-6, "{act:?} input {i}: fd {fd} vs {an}");
            }
        }
    }
}
