#![allow(dead_code)]

use dropact_core::activations::{ActivationKind, Mode, Realization, RRELU_LOWER, RRELU_UPPER};
use dropact_core::networks::{ActivationSource, ForwardOptions, LayerSpec, Mlp};
use dropact_core::rng::generator;
use dropact_core::tape::{finite_difference_grad, Tape, Var};
use dropact_core::tensor::{relative_error, Tensor};
use dropact_core::Result;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[derive(Clone, Debug)]
pub enum Loss {
    Mse(Tensor),
    CrossEntropy(Vec<usize>),
}

/// A random model with a batch, a loss and one frozen set of activation realizations.
pub struct GradCase {
    pub model: Mlp,
    pub input: Tensor,
    pub loss: Loss,
    pub batch_stats: bool,
    pub realizations: Vec<Option<Realization>>,
}

pub fn random_case(seed: u64) -> GradCase {
    let mut rng = generator(seed);
    let d_in = rng.random_range(2..=4);
    let depth = rng.random_range(1..=3);
    let with_bn = rng.random_bool(0.5);
    let activation = match rng.random_range(0..3) {
        0 => ActivationKind::Relu,
        1 => ActivationKind::drop_act(rng.random_range(0.3..0.95)),
        _ => ActivationKind::rrelu(RRELU_LOWER, RRELU_UPPER),
    };
    let mut specs = Vec::new();
    for _ in 0..depth {
        specs.push(LayerSpec::Affine {
            out: rng.random_range(2..=5),
            bias: !with_bn,
        });
        if with_bn {
            specs.push(LayerSpec::BatchNorm);
        }
        specs.push(LayerSpec::Activation { activation });
    }
    let d_out = rng.random_range(1..=3);
    specs.push(LayerSpec::Affine { out: d_out, bias: true });
    let mut model = Mlp::new(d_in, specs, &mut rng).unwrap();
    // non-trivial biases and batch-norm affine parameters
    for t in model.parameters_mut() {
        let bumped: Vec<f64> = t.data().iter().map(|v| v + 0.1 * rng.random_range(-1.0..1.0)).collect();
        *t = Tensor::new(t.shape().to_vec(), bumped).unwrap();
    }
    let n = rng.random_range(3..=6);
    let input = normal_matrix(n, d_in, &mut rng);
    let loss = if rng.random_bool(0.5) || d_out < 2 {
        Loss::Mse(normal_matrix(n, d_out, &mut rng))
    } else {
        Loss::CrossEntropy((0..n).map(|_| rng.random_range(0..d_out)).collect())
    };
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let rec = model
        .record_with(
            &mut tape,
            x,
            ForwardOptions {
                activation_mode: Mode::Train,
                batch_stats: with_bn,
                source: ActivationSource::Sample(&mut rng),
                stop_after: None,
            },
        )
        .unwrap();
    GradCase {
        model,
        input,
        loss,
        batch_stats: with_bn,
        realizations: rec.realizations,
    }
}

impl GradCase {
    fn record(&self, model: &Mlp) -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(self.input.clone());
        let rec = model.record_with(
            &mut tape,
            x,
            ForwardOptions {
                activation_mode: Mode::Train,
                batch_stats: self.batch_stats,
                source: ActivationSource::Replay(&self.realizations),
                stop_after: None,
            },
        )?;
        let loss = match &self.loss {
            Loss::Mse(y) => tape.mse(rec.output, y)?,
            Loss::CrossEntropy(labels) => tape.softmax_cross_entropy(rec.output, labels)?,
        };
        Ok((tape, loss, rec.params))
    }

    fn loss_with(&self, index: usize, value: &Tensor) -> Result<f64> {
        let mut model = self.model.clone();
        *model.parameters_mut()[index] = value.clone();
        let (tape, loss, _) = self.record(&model)?;
        tape.value(loss).item()
    }

    /// Largest relative error between reverse-mode and central-difference
    /// gradients over every parameter entry.
    pub fn max_gradient_error(&self, h: f64) -> Result<f64> {
        let (tape, loss, params) = self.record(&self.model)?;
        let grads = tape.backward(loss)?;
        let mut worst: f64 = 0.0;
        for (i, (var, theta)) in params.iter().zip(self.model.parameters()).enumerate() {
            let analytic = grads.wrt(*var);
            let numeric = finite_difference_grad(|t| self.loss_with(i, t), theta, h)?;
            for (a, b) in analytic.data().iter().zip(numeric.data()) {
                worst = worst.max(relative_error(*a, *b));
            }
        }
        Ok(worst)
    }
}

/// Test-only IDX writer: images are `u8` pixels, all big-endian headers.
pub fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = 0x0000_0803u32.to_be_bytes().to_vec();
    for v in [count, rows, cols] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = 0x0000_0801u32.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Four 2×3 images whose pixels run 0, 10, 20, ... and labels 0, 1, 2, 1.
pub fn four_image_fixture() -> (Vec<u8>, Vec<u8>) {
    let pixels: Vec<u8> = (0..24).map(|i| (i * 10) as u8).collect();
    (idx_images(4, 2, 3, &pixels), idx_labels(&[0, 1, 2, 1]))
}
