//! ReLU, Drop-Activation and the randomized leaky ReLU comparator.
//!
//! Every variant is identity on `x >= 0` and multiplies negative inputs by a
//! slope: `0` for ReLU, `1 - keep` for a training-mode Drop-Activation draw,
//! `1 - p` for the test-time blend `(1 - p)·I + p·ReLU`, a fresh `U(a, b)` draw
//! for training-mode RReLU and `(a + b) / 2` for its test-time rule.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{check_retain, Error, Result};
use crate::tensor::Tensor;

/// Lower RReLU slope bound used by the comparator experiments.
pub const RRELU_LOWER: f64 = 1.0 / 8.0;
/// Upper RReLU slope bound used by the comparator experiments.
pub const RRELU_UPPER: f64 = 1.0 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    DropActTrain { p: f64 },
    DropActTest { p: f64 },
    RReluTrain { a: f64, b: f64 },
    RReluTest { a: f64, b: f64 },
}

/// Training or inference behaviour of stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Test,
}

impl ActivationKind {
    pub fn drop_act(p: f64) -> Self {
        ActivationKind::DropActTrain { p }
    }

    pub fn rrelu(a: f64, b: f64) -> Self {
        ActivationKind::RReluTrain { a, b }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::Relu => Ok(()),
            ActivationKind::DropActTrain { p } | ActivationKind::DropActTest { p } => {
                check_retain(p)
            }
            ActivationKind::RReluTrain { a, b } | ActivationKind::RReluTest { a, b } => {
                check_rrelu(a, b)
            }
        }
    }

    /// The member of this kind's train/test pair that applies in `mode`.
    pub fn in_mode(self, mode: Mode) -> Self {
        use ActivationKind::*;
        match (self, mode) {
            (DropActTrain { p } | DropActTest { p }, Mode::Train) => DropActTrain { p },
            (DropActTrain { p } | DropActTest { p }, Mode::Test) => DropActTest { p },
            (RReluTrain { a, b } | RReluTest { a, b }, Mode::Train) => RReluTrain { a, b },
            (RReluTrain { a, b } | RReluTest { a, b }, Mode::Test) => RReluTest { a, b },
            (Relu, _) => Relu,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            ActivationKind::DropActTrain { .. } | ActivationKind::RReluTrain { .. }
        )
    }

    /// Retain probability for Drop-Activation kinds.
    pub fn retain_probability(&self) -> Option<f64> {
        match *self {
            ActivationKind::DropActTrain { p } | ActivationKind::DropActTest { p } => Some(p),
            _ => None,
        }
    }

    /// Negative-branch slope of the deterministic kinds.
    fn fixed_slope(&self) -> Option<f64> {
        match *self {
            ActivationKind::Relu => Some(0.0),
            ActivationKind::DropActTest { p } => Some(1.0 - p),
            ActivationKind::RReluTest { a, b } => Some(0.5 * (a + b)),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::DropActTrain { .. } | ActivationKind::DropActTest { .. } => "dropact",
            ActivationKind::RReluTrain { .. } | ActivationKind::RReluTest { .. } => "rrelu",
        }
    }
}

fn check_rrelu(a: f64, b: f64) -> Result<()> {
    if a > 0.0 && a < b && b < 1.0 {
        Ok(())
    } else {
        Err(Error::param("a,b", format!("need 0 < a < b < 1, got a={a}, b={b}")))
    }
}

/// One Bernoulli(p) realization of keep/drop decisions.
///
/// A mask covers either one row of activations (`len == width`) and is then
/// shared by every row of a batch, or a whole batch stacked row by row
/// (`len == rows * width`) with an independent draw per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropMask {
    keep: Vec<bool>,
}

impl DropMask {
    pub fn new(keep: Vec<bool>) -> Self {
        DropMask { keep }
    }

    pub fn all(width: usize, keep: bool) -> Self {
        DropMask {
            keep: vec![keep; width],
        }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len() as f64
    }
}

/// The random state a stochastic activation realized during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Realization {
    Mask(DropMask),
    Slopes(Vec<f64>),
}

/// Whether a batch draws one mask per sample or one mask for all rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSharing {
    #[default]
    PerSample,
    PerBatch,
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else if slope == 0.0 {
        // 0.0 rather than -0.0 so slope-0 variants are bitwise ReLU
        0.0
    } else {
        slope * x
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| leaky(v, 0.0)).collect(),
    )
}

/// Draws `width` i.i.d. Bernoulli(p) keep flags; exactly one uniform per flag,
/// so generator consumption does not depend on `p`.
pub fn sample_mask<R: RngCore + ?Sized>(width: usize, p: f64, rng: &mut R) -> Result<DropMask> {
    check_retain(p)?;
    if width == 0 {
        return Err(Error::param("width", "must be at least 1"));
    }
    let keep = (0..width).map(|_| rng.random::<f64>() < p).collect();
    Ok(DropMask { keep })
}

/// Per-element negative slope implied by `mask`, broadcasting a single-row
/// mask over the rows of `x`.
fn mask_slopes<'a>(x: &Tensor, mask: &'a DropMask) -> Result<impl Iterator<Item = f64> + 'a> {
    let width = x.last_extent();
    if mask.len() != x.len() && mask.len() != width {
        return Err(Error::Shape {
            op: "drop_act_train",
            msg: format!(
                "mask of length {} does not match input of shape {:?}",
                mask.len(),
                x.shape()
            ),
        });
    }
    let keep = &mask.keep;
    let n = keep.len();
    let len = x.len();
    Ok((0..len).map(move |i| if keep[i % n] { 0.0 } else { 1.0 }))
}

/// Training-mode Drop-Activation: `x` where `x >= 0`, else `(1 - keep)·x`.
pub fn drop_act_train(x: &Tensor, mask: &DropMask) -> Result<Tensor> {
    let slopes = mask_slopes(x, mask)?;
    let data = x.data().iter().zip(slopes).map(|(&v, s)| leaky(v, s)).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Test-mode Drop-Activation: the leaky ReLU with negative slope `1 - p`.
pub fn drop_act_test(x: &Tensor, p: f64) -> Result<Tensor> {
    check_retain(p)?;
    Ok(leaky_relu(x, 1.0 - p))
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| leaky(v, slope)).collect(),
    )
}

/// One `U(a, b)` slope per element, drawn regardless of sign.
pub fn sample_rrelu_slopes<R: RngCore + ?Sized>(
    n: usize,
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_rrelu(a, b)?;
    Ok((0..n).map(|_| a + (b - a) * rng.random::<f64>()).collect())
}

/// Applies per-element negative slopes (the realized RReLU draws).
pub fn rrelu_with_slopes(x: &Tensor, slopes: &[f64]) -> Result<Tensor> {
    if slopes.len() != x.len() {
        return Err(Error::Shape {
            op: "rrelu",
            msg: format!("{} slopes for {} inputs", slopes.len(), x.len()),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(slopes)
        .map(|(&v, &s)| leaky(v, s))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub fn rrelu_train<R: RngCore + ?Sized>(x: &Tensor, a: f64, b: f64, rng: &mut R) -> Result<Tensor> {
    let slopes = sample_rrelu_slopes(x.len(), a, b, rng)?;
    rrelu_with_slopes(x, &slopes)
}

pub fn rrelu_test(x: &Tensor, a: f64, b: f64) -> Result<Tensor> {
    check_rrelu(a, b)?;
    Ok(leaky_relu(x, 0.5 * (a + b)))
}

/// Samples whatever random state `kind` needs for an input of `shape`.
pub fn sample_realization<R: RngCore + ?Sized>(
    kind: ActivationKind,
    shape: &[usize],
    sharing: MaskSharing,
    rng: &mut R,
) -> Result<Option<Realization>> {
    let len: usize = shape.iter().product();
    let width = shape.last().copied().unwrap_or(1);
    match kind {
        ActivationKind::DropActTrain { p } => {
            let n = match sharing {
                MaskSharing::PerSample => len,
                MaskSharing::PerBatch => width,
            };
            Ok(Some(Realization::Mask(sample_mask(n, p, rng)?)))
        }
        ActivationKind::RReluTrain { a, b } => Ok(Some(Realization::Slopes(
            sample_rrelu_slopes(len, a, b, rng)?,
        ))),
        _ => Ok(None),
    }
}

fn missing_realization(kind: ActivationKind) -> Error {
    Error::Contract(format!("{kind:?} needs its realized mask or slopes"))
}

/// Forward pass of any kind given its realization (if stochastic).
pub fn apply(kind: ActivationKind, x: &Tensor, realization: Option<&Realization>) -> Result<Tensor> {
    kind.validate()?;
    match (kind, realization) {
        (ActivationKind::DropActTrain { .. }, Some(Realization::Mask(mask))) => {
            drop_act_train(x, mask)
        }
        (ActivationKind::RReluTrain { .. }, Some(Realization::Slopes(s))) => {
            rrelu_with_slopes(x, s)
        }
        (k, _) if k.is_stochastic() => Err(missing_realization(k)),
        (k, _) => Ok(leaky_relu(x, k.fixed_slope().expect("deterministic kind"))),
    }
}

/// Gradient with respect to the activation input: `upstream` times the branch
/// slope used in the forward pass (1 on `x >= 0`).
pub fn activation_backward(
    kind: ActivationKind,
    x: &Tensor,
    realization: Option<&Realization>,
    upstream: &Tensor,
) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::Dimension {
            op: "activation_backward",
            left: x.shape().to_vec(),
            right: upstream.shape().to_vec(),
        });
    }
    let branch = |v: f64, g: f64, slope: f64| if v >= 0.0 { g } else { g * slope };
    let data: Vec<f64> = match (kind, realization) {
        (ActivationKind::DropActTrain { .. }, Some(Realization::Mask(mask))) => x
            .data()
            .iter()
            .zip(upstream.data())
            .zip(mask_slopes(x, mask)?)
            .map(|((&v, &g), s)| branch(v, g, s))
            .collect(),
        (ActivationKind::RReluTrain { .. }, Some(Realization::Slopes(slopes))) => {
            if slopes.len() != x.len() {
                return Err(Error::Shape {
                    op: "activation_backward",
                    msg: format!("{} slopes for {} inputs", slopes.len(), x.len()),
                });
            }
            x.data()
                .iter()
                .zip(upstream.data())
                .zip(slopes)
                .map(|((&v, &g), &s)| branch(v, g, s))
                .collect()
        }
        (k, _) if k.is_stochastic() => return Err(missing_realization(k)),
        (k, _) => {
            let s = k.fixed_slope().expect("deterministic kind");
            x.data()
                .iter()
                .zip(upstream.data())
                .map(|(&v, &g)| branch(v, g, s))
                .collect()
        }
    };
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}
