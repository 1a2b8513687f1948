//! Drop-Activation on a bias-free one-hidden-layer ReLU network as an
//! explicit penalty.
//!
//! For `ŷ = W2·r(W1·x)` trained with masks `P ~ Bernoulli(p)^k`, the expected
//! squared loss over masks equals the test-time loss plus
//! `(1 − p)/p · ‖W2·W1·x − W2·r_p(W1·x)‖²`, where `r_p` is the leaky ReLU with
//! slope `1 − p`. [`closed_form_loss`] evaluates that identity's right-hand
//! side, [`enumerated_expected_loss`] its left-hand side exactly over all `2^k`
//! masks, and [`monte_carlo_expected_loss`] samples it.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_retain, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{pairwise_sum, Tensor};

/// Largest hidden width [`enumerated_expected_loss`] accepts.
pub const MAX_ENUMERATION_WIDTH: usize = 20;

/// `W1: [k×d_in]`, `W2: [d_out×k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHiddenNet {
    w1: Tensor,
    w2: Tensor,
}

impl OneHiddenNet {
    pub fn new(w1: Tensor, w2: Tensor) -> Result<Self> {
        if w1.rank() != 2 || w2.rank() != 2 || w2.shape()[1] != w1.shape()[0] {
            return Err(Error::Dimension {
                op: "one_hidden_net",
                left: w1.shape().to_vec(),
                right: w2.shape().to_vec(),
            });
        }
        Ok(OneHiddenNet { w1, w2 })
    }

    pub fn w1(&self) -> &Tensor {
        &self.w1
    }

    pub fn w2(&self) -> &Tensor {
        &self.w2
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn output_width(&self) -> usize {
        self.w2.shape()[0]
    }

    /// `W1·x` for one sample.
    pub fn preactivation(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_width() {
            return Err(Error::Dimension {
                op: "preactivation",
                left: self.w1.shape().to_vec(),
                right: vec![x.len()],
            });
        }
        Ok(mat_vec(&self.w1, x))
    }

    /// `W2·h` for one hidden vector.
    pub fn readout(&self, h: &[f64]) -> Vec<f64> {
        mat_vec(&self.w2, h)
    }

    /// Test-time output `W2·r_p(W1·x)`; `p = 1` gives the plain ReLU network.
    pub fn predict(&self, x: &[f64], p: f64) -> Result<Vec<f64>> {
        check_retain(p)?;
        let v = self.preactivation(x)?;
        Ok(self.readout(&leaky(&v, 1.0 - p)))
    }

    /// Training-time output `W2·(I − P + P·r)(W1·x)` for one mask.
    pub fn predict_masked(&self, x: &[f64], keep: &[bool]) -> Result<Vec<f64>> {
        let v = self.preactivation(x)?;
        if keep.len() != v.len() {
            return Err(Error::Shape {
                op: "predict_masked",
                msg: format!("mask of length {} for {} hidden units", keep.len(), v.len()),
            });
        }
        Ok(self.readout(&masked(&v, keep)))
    }

    /// Replaces `(W1, W2)` by `(c·W1, W2/c)`.
    pub fn rescaled(&self, c: f64) -> Result<Self> {
        OneHiddenNet::new(self.w1.scale(c)?, self.w2.scale(1.0 / c)?)
    }
}

fn mat_vec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = m.last_extent();
    m.data()
        .chunks(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn leaky(v: &[f64], slope: f64) -> Vec<f64> {
    v.iter()
        .map(|&a| if a >= 0.0 { a } else { slope * a })
        .collect()
}

fn masked(v: &[f64], keep: &[bool]) -> Vec<f64> {
    v.iter()
        .zip(keep)
        .map(|(&a, &k)| if a >= 0.0 || !k { a } else { 0.0 })
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Training pairs stored row-wise: `inputs: [n×d_in]`, `targets: [n×d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    inputs: Tensor,
    targets: Tensor,
}

impl SampleSet {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rank() != 2 || targets.rank() != 2 || inputs.rows() != targets.rows() {
            return Err(Error::Dimension {
                op: "sample_set",
                left: inputs.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        Ok(SampleSet { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        (0..self.len()).map(|i| (self.inputs.row(i), self.targets.row(i)))
    }

    fn check(&self, net: &OneHiddenNet) -> Result<()> {
        if self.inputs.last_extent() != net.input_width()
            || self.targets.last_extent() != net.output_width()
        {
            return Err(Error::Dimension {
                op: "sample_set",
                left: vec![net.input_width(), net.output_width()],
                right: vec![self.inputs.last_extent(), self.targets.last_extent()],
            });
        }
        Ok(())
    }
}

/// Diagonal of `D`: flag `j` is set iff `(W1·x)_j > 0` (strictly).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationPattern {
    flags: Vec<bool>,
}

impl ActivationPattern {
    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// `D·v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.flags)
            .map(|(&a, &d)| if d { a } else { 0.0 })
            .collect()
    }
}

pub fn activation_pattern(net: &OneHiddenNet, x: &[f64]) -> Result<ActivationPattern> {
    let v = net.preactivation(x)?;
    Ok(ActivationPattern {
        flags: v.iter().map(|&a| a > 0.0).collect(),
    })
}

fn check_penalty_p(p: f64) -> Result<()> {
    check_retain(p).map_err(|_| {
        Error::param("p", format!("{p} is outside (0, 1]; the penalty coefficient (1 - p)/p is undefined"))
    })
}

/// `(1 − p)/p · ‖W2·W1·x − W2·r_p(W1·x)‖²`.
pub fn penalty_term(net: &OneHiddenNet, x: &[f64], p: f64) -> Result<f64> {
    check_penalty_p(p)?;
    let v = net.preactivation(x)?;
    let linear = net.readout(&v);
    let blended = net.readout(&leaky(&v, 1.0 - p));
    Ok((1.0 - p) / p * squared_distance(&linear, &blended))
}

/// The same penalty through the activation pattern: `p(1 − p)·‖W2·(I − D)·W1·x‖²`.
pub fn penalty_via_pattern(net: &OneHiddenNet, x: &[f64], p: f64) -> Result<f64> {
    check_penalty_p(p)?;
    let v = net.preactivation(x)?;
    let pattern = activation_pattern(net, x)?;
    let off: Vec<f64> = v
        .iter()
        .zip(pattern.flags())
        .map(|(&a, &d)| if d { 0.0 } else { a })
        .collect();
    let z = net.readout(&off);
    Ok(p * (1.0 - p) * z.iter().map(|a| a * a).sum::<f64>())
}

/// `Σ_i ‖W2·r_p(W1·x_i) − y_i‖² + (1 − p)/p · ‖W2·W1·x_i − W2·r_p(W1·x_i)‖²`.
pub fn closed_form_loss(net: &OneHiddenNet, data: &SampleSet, p: f64) -> Result<f64> {
    check_penalty_p(p)?;
    data.check(net)?;
    let per_sample = data
        .pairs()
        .map(|(x, y)| {
            let v = net.preactivation(x)?;
            let blended = net.readout(&leaky(&v, 1.0 - p));
            let linear = net.readout(&v);
            Ok(squared_distance(&blended, y) + (1.0 - p) / p * squared_distance(&linear, &blended))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&per_sample))
}

/// Variance of the training-mode output at `x` over masks, summed over
/// output components: `p(1 − p)·Σ_j [(W1·x)_j ≤ 0]·(W1·x)_j²·‖W2[:, j]‖²`.
///
/// Differs from [`penalty_term`] by the cross terms
/// `p(1 − p)·Σ_{i≠j} u_i·u_j·⟨W2[:, i], W2[:, j]⟩` with `u = (I − D)·W1·x`, so
/// the two agree when at most one unit is inactive or the affected columns
/// of `W2` are orthogonal.
pub fn mask_variance(net: &OneHiddenNet, x: &[f64], p: f64) -> Result<f64> {
    check_retain(p)?;
    let v = net.preactivation(x)?;
    let k = net.hidden();
    let w2 = net.w2().data();
    let total: f64 = v
        .iter()
        .enumerate()
        .filter(|(_, &a)| a < 0.0)
        .map(|(j, &a)| {
            let col: f64 = (0..net.output_width()).map(|r| w2[r * k + j] * w2[r * k + j]).sum();
            a * a * col
        })
        .sum();
    Ok(p * (1.0 - p) * total)
}

/// Test-time loss plus [`mask_variance`] per sample: the expected training
/// loss over masks in closed form.
pub fn exact_expected_loss(net: &OneHiddenNet, data: &SampleSet, p: f64) -> Result<f64> {
    check_retain(p)?;
    data.check(net)?;
    let per_sample = data
        .pairs()
        .map(|(x, y)| Ok(squared_distance(&net.predict(x, p)?, y) + mask_variance(net, x, p)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&per_sample))
}

/// Test-time squared loss `Σ_i ‖W2·r_p(W1·x_i) − y_i‖²`.
pub fn prediction_loss(net: &OneHiddenNet, data: &SampleSet, p: f64) -> Result<f64> {
    data.check(net)?;
    let per_sample = data
        .pairs()
        .map(|(x, y)| Ok(squared_distance(&net.predict(x, p)?, y)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&per_sample))
}

/// Exact expectation over all `2^k` masks of `Σ_i ‖W2·(I − P + P·r)(W1·x_i) − y_i‖²`.
pub fn enumerated_expected_loss(net: &OneHiddenNet, data: &SampleSet, p: f64) -> Result<f64> {
    check_retain(p)?;
    data.check(net)?;
    let k = net.hidden();
    if k > MAX_ENUMERATION_WIDTH {
        return Err(Error::Capacity(format!(
            "hidden width {k} needs 2^{k} masks; enumeration is limited to width \
             {MAX_ENUMERATION_WIDTH}, use monte_carlo_expected_loss instead"
        )));
    }
    let pre: Vec<Vec<f64>> = data
        .pairs()
        .map(|(x, _)| net.preactivation(x))
        .collect::<Result<_>>()?;
    let mut keep = vec![false; k];
    let mut per_sample = vec![0.0; data.len()];
    let weighted: Vec<f64> = (0u64..1 << k)
        .map(|bits| {
            let mut weight = 1.0;
            for (j, flag) in keep.iter_mut().enumerate() {
                *flag = bits >> j & 1 == 1;
                weight *= if *flag { p } else { 1.0 - p };
            }
            for ((v, (_, y)), slot) in pre.iter().zip(data.pairs()).zip(per_sample.iter_mut()) {
                *slot = squared_distance(&net.readout(&masked(v, &keep)), y);
            }
            weight * pairwise_sum(&per_sample)
        })
        .collect();
    Ok(pairwise_sum(&weighted))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// Running mean and unbiased variance (Welford).
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningMoments {
    count: usize,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; 0 with fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Sample mean and standard error of the training loss, drawing a fresh mask
/// per trial per sample.
pub fn monte_carlo_expected_loss<R: RngCore + ?Sized>(
    net: &OneHiddenNet,
    data: &SampleSet,
    p: f64,
    trials: usize,
    rng: &mut R,
) -> Result<MonteCarloEstimate> {
    check_retain(p)?;
    data.check(net)?;
    if trials == 0 {
        return Err(Error::param("trials", "must be at least 1"));
    }
    let pre: Vec<Vec<f64>> = data
        .pairs()
        .map(|(x, _)| net.preactivation(x))
        .collect::<Result<_>>()?;
    let mut keep = vec![false; net.hidden()];
    let mut moments = RunningMoments::default();
    for _ in 0..trials {
        let mut total = 0.0;
        for (v, (_, y)) in pre.iter().zip(data.pairs()) {
            keep.iter_mut().for_each(|f| *f = rng.random::<f64>() < p);
            total += squared_distance(&net.readout(&masked(v, &keep)), y);
        }
        moments.push(total);
    }
    Ok(MonteCarloEstimate {
        mean: moments.mean(),
        stderr: moments.stderr(),
        trials,
    })
}

/// Network and samples with every entry drawn from `N(0, 1)`.
pub fn random_instance<R: RngCore + ?Sized>(
    k: usize,
    d_in: usize,
    d_out: usize,
    n: usize,
    rng: &mut R,
) -> Result<(OneHiddenNet, SampleSet)> {
    if k == 0 || d_in == 0 || d_out == 0 || n == 0 {
        return Err(Error::param("k,d_in,d_out,n", "all dimensions must be positive"));
    }
    let mut normal = |len: usize| -> Vec<f64> {
        (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect()
    };
    let w1 = Tensor::matrix(k, d_in, normal(k * d_in))?;
    let w2 = Tensor::matrix(d_out, k, normal(d_out * k))?;
    let x = Tensor::matrix(n, d_in, normal(n * d_in))?;
    let y = Tensor::matrix(n, d_out, normal(n * d_out))?;
    Ok((OneHiddenNet::new(w1, w2)?, SampleSet::new(x, y)?))
}

/// Records the closed-form penalized loss on `tape` as a function of the
/// leaves `w1` (`[k×d_in]`) and `w2` (`[d_out×k]`).
pub fn record_closed_form_loss(tape: &mut Tape, w1: Var, w2: Var, data: &SampleSet, p: f64) -> Result<Var> {
    check_penalty_p(p)?;
    let x = tape.leaf(data.inputs().clone());
    let y = tape.leaf(data.targets().clone());
    let w1t = tape.transpose(w1)?;
    let w2t = tape.transpose(w2)?;
    let v = tape.matmul(x, w1t)?;
    let h = tape.activation(v, crate::activations::ActivationKind::DropActTest { p }, None)?;
    let blended = tape.matmul(h, w2t)?;
    let linear = tape.matmul(v, w2t)?;
    let fit = tape.sub(blended, y)?;
    let fit = tape.sum_squares(fit)?;
    let gap = tape.sub(linear, blended)?;
    let gap = tape.sum_squares(gap)?;
    let gap = tape.scale(gap, (1.0 - p) / p)?;
    tape.add(fit, gap)
}
