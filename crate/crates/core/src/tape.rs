//! Reverse-mode differentiation over a recorded sequence of primitive ops.
//!
//! A [`Tape`] is append-only: each op reads earlier nodes only, so node order
//! is a topological order and backward is a single reverse sweep. Gradients
//! of a node consumed several times are summed.

use crate::activations::{self, ActivationKind, Realization};
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics a batch-norm node was evaluated with.
#[derive(Clone, Debug)]
pub enum BnStats {
    /// Statistics of the batch itself; gradients flow through them.
    Batch,
    /// Externally supplied (running) statistics, treated as constants.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Activation {
        input: Var,
        kind: ActivationKind,
        realization: Option<Realization>,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        offset: Var,
        eps: f64,
        stats: BnStats,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    SumSquares(Var),
    Mse {
        pred: Var,
        target: Tensor,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; zeros of the matching shape if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

/// Batch mean and biased variance per column of an `[n×d]` matrix.
pub fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = x.last_extent();
    let n = x.len() / d;
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    (mean, var)
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.last_extent();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}

/// Row-wise softmax probabilities of `[n×classes]` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::Shape {
            op: "softmax",
            msg: format!("expected [n×classes], got {:?}", logits.shape()),
        });
    }
    Ok(softmax_rows(logits))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_bias(self.value(bias))?;
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c)?;
        Ok(self.push(v, Op::Scale(a, c)))
    }

    /// Applies an activation; stochastic kinds need their realization, which
    /// is stored so backward uses the same branch slopes as forward.
    pub fn activation(
        &mut self,
        input: Var,
        kind: ActivationKind,
        realization: Option<Realization>,
    ) -> Result<Var> {
        let v = activations::apply(kind, self.value(input), realization.as_ref())?;
        Ok(self.push(
            v,
            Op::Activation {
                input,
                kind,
                realization,
            },
        ))
    }

    /// Per-column batch normalization of an `[n×d]` input.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        offset: Var,
        eps: f64,
        stats: BnStats,
    ) -> Result<Var> {
        let (normalized, inv_std, out) =
            bn_forward(self.value(input), self.value(scale), self.value(offset), eps, &stats)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                scale,
                offset,
                eps,
                stats,
                normalized,
                inv_std,
            },
        ))
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).squared_norm();
        Ok(self.push(Tensor::checked("sum_squares", vec![], vec![s])?, Op::SumSquares(x)))
    }

    /// Mean over all elements of `(pred − target)²`.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        let diff = p.sub(target).map_err(|_| Error::Dimension {
            op: "mse",
            left: p.shape().to_vec(),
            right: target.shape().to_vec(),
        })?;
        let loss = diff.squared_norm() / diff.len() as f64;
        let value = Tensor::checked("mse", vec![], vec![loss])?;
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.rank() != 2 || l.rows() != labels.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                msg: format!("logits {:?} for {} labels", l.shape(), labels.len()),
            });
        }
        let classes = l.last_extent();
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                msg: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let probs = softmax_rows(l);
        let nll: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let row = l.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[c]
            })
            .collect();
        let loss = pairwise_sum(&nll) / labels.len() as f64;
        let value = Tensor::checked("softmax_cross_entropy", vec![], vec![loss])?;
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse accumulation from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (target, contribution) in self.local_grads(node, &g)? {
                accumulate(&mut grads[target.0], contribution)?;
            }
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { shapes, grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, g.matmul(&val(*b).transpose()?)?),
                (*b, val(*a).transpose()?.matmul(g)?),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::AddBias(x, bias) => {
                let n = g.last_extent();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![
                    (*x, g.clone()),
                    (*bias, Tensor::checked("add_bias_backward", val(*bias).shape().to_vec(), db)?),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0)?)],
            Op::Scale(a, c) => vec![(*a, g.scale(*c)?)],
            Op::Activation {
                input,
                kind,
                realization,
            } => vec![(
                *input,
                activations::activation_backward(*kind, val(*input), realization.as_ref(), g)?,
            )],
            Op::BatchNorm {
                input,
                scale,
                offset,
                stats,
                normalized,
                inv_std,
                ..
            } => {
                let (dx, dscale, doffset) =
                    bn_backward(g, normalized, inv_std, val(*scale), matches!(stats, BnStats::Batch))?;
                vec![(*input, dx), (*scale, dscale), (*offset, doffset)]
            }
            Op::SumSquares(x) => {
                let s = g.item()?;
                vec![(*x, val(*x).scale(2.0 * s)?)]
            }
            Op::Mse { pred, target } => {
                let s = g.item()?;
                let p = val(*pred);
                let c = 2.0 * s / p.len() as f64;
                vec![(*pred, p.sub(target)?.scale(c)?)]
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let s = g.item()? / labels.len() as f64;
                let classes = probs.last_extent();
                let mut d = probs.data().to_vec();
                for (i, &c) in labels.iter().enumerate() {
                    d[i * classes + c] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= s);
                vec![(*logits, Tensor::checked("softmax_ce_backward", probs.shape().to_vec(), d)?)]
            }
        })
    }

    /// Recomputes every non-leaf value from the recorded leaves and ops.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |x: &Var| &values[x.0];
            let out = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::MatMul(a, b) => v(a).matmul(v(b))?,
                Op::Transpose(a) => v(a).transpose()?,
                Op::AddBias(x, b) => v(x).add_bias(v(b))?,
                Op::Add(a, b) => v(a).add(v(b))?,
                Op::Sub(a, b) => v(a).sub(v(b))?,
                Op::Scale(a, c) => v(a).scale(*c)?,
                Op::Activation {
                    input,
                    kind,
                    realization,
                } => activations::apply(*kind, v(input), realization.as_ref())?,
                Op::BatchNorm {
                    input,
                    scale,
                    offset,
                    eps,
                    stats,
                    ..
                } => bn_forward(v(input), v(scale), v(offset), *eps, stats)?.2,
                Op::SumSquares(x) => Tensor::checked("sum_squares", vec![], vec![v(x).squared_norm()])?,
                Op::Mse { pred, target } => {
                    let d = v(pred).sub(target)?;
                    Tensor::checked("mse", vec![], vec![d.squared_norm() / d.len() as f64])?
                }
                Op::SoftmaxCrossEntropy { logits, labels, .. } => {
                    let mut t = Tape::new();
                    let l = t.leaf(v(logits).clone());
                    let loss = t.softmax_cross_entropy(l, labels)?;
                    t.value(loss).clone()
                }
            };
            values.push(out);
        }
        Ok(values)
    }

    /// True when [`Tape::replay`] reproduces every stored value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let values = self.replay()?;
        Ok(values.iter().zip(&self.nodes).all(|(v, n)| {
            v.shape() == n.value.shape()
                && v.data()
                    .iter()
                    .zip(n.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        }))
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        None => contribution,
        Some(existing) => existing.add(&contribution)?,
    });
    Ok(())
}

type BnForward = (Tensor, Vec<f64>, Tensor);

fn bn_forward(x: &Tensor, scale: &Tensor, offset: &Tensor, eps: f64, stats: &BnStats) -> Result<BnForward> {
    if x.rank() != 2 {
        return Err(Error::Shape {
            op: "batch_norm",
            msg: format!("expected [n×d] input, got {:?}", x.shape()),
        });
    }
    let d = x.last_extent();
    if scale.len() != d || offset.len() != d {
        return Err(Error::Dimension {
            op: "batch_norm",
            left: x.shape().to_vec(),
            right: scale.shape().to_vec(),
        });
    }
    let (mean, var) = match stats {
        BnStats::Batch => column_moments(x),
        BnStats::Fixed { mean, var } => {
            if mean.len() != d || var.len() != d {
                return Err(Error::Shape {
                    op: "batch_norm",
                    msg: format!("running statistics of width {} for {d} units", mean.len()),
                });
            }
            (mean.clone(), var.clone())
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        for j in 0..d {
            let h = (row[j] - mean[j]) * inv_std[j];
            normalized.push(h);
            out.push(scale.data()[j] * h + offset.data()[j]);
        }
    }
    let normalized = Tensor::checked("batch_norm", x.shape().to_vec(), normalized)?;
    let out = Tensor::checked("batch_norm", x.shape().to_vec(), out)?;
    Ok((normalized, inv_std, out))
}

fn bn_backward(
    g: &Tensor,
    normalized: &Tensor,
    inv_std: &[f64],
    scale: &Tensor,
    through_stats: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = g.last_extent();
    let n = (g.len() / d) as f64;
    let mut sum_g = vec![0.0; d];
    let mut sum_gh = vec![0.0; d];
    for (grow, hrow) in g.data().chunks(d).zip(normalized.data().chunks(d)) {
        for j in 0..d {
            sum_g[j] += grow[j];
            sum_gh[j] += grow[j] * hrow[j];
        }
    }
    let mut dx = Vec::with_capacity(g.len());
    for (grow, hrow) in g.data().chunks(d).zip(normalized.data().chunks(d)) {
        for j in 0..d {
            let k = scale.data()[j] * inv_std[j];
            dx.push(if through_stats {
                k * (grow[j] - sum_g[j] / n - hrow[j] * sum_gh[j] / n)
            } else {
                k * grow[j]
            });
        }
    }
    Ok((
        Tensor::checked("batch_norm_backward", g.shape().to_vec(), dx)?,
        Tensor::checked("batch_norm_backward", scale.shape().to_vec(), sum_gh)?,
        Tensor::checked("batch_norm_backward", scale.shape().to_vec(), sum_g)?,
    ))
}

/// Central differences `(L(θ + h·e_i) − L(θ − h·e_i)) / 2h` per coordinate.
pub fn finite_difference_grad<F>(mut eval_loss: F, theta: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::param("h", format!("step must be positive, got {h}")));
    }
    let mut probe = theta.data().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = eval_loss(&Tensor::new(theta.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - h;
        let minus = eval_loss(&Tensor::new(theta.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::checked("finite_difference_grad", theta.shape().to_vec(), grad)
}
