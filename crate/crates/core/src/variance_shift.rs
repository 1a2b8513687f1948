//! Train/test variance shift of a Drop-Activation layer feeding batch norm.
//!
//! With `x ~ N(0, I_d)`, `X_train = Σ w_i((1 − P_i)x_i + P_i·r(x_i))` and
//! `X_test = Σ w_i((1 − p)x_i + p·r(x_i))` share the mean `p·Σw_i/√(2π)` and
//! have variances
//!
//! ```text
//! Var(X_train) = Σw_i² · (1 − p/2 − p²/(2π))
//! Var(X_test)  = Σw_i² · ((1/2 − 1/(2π))p² − p + 1)
//! ```
//!
//! so their ratio depends on `p` alone.

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::Mode;
use crate::error::{Error, Result};
use crate::networks::{ActivationSource, ForwardOptions, Layer, Mlp};
use crate::penalty::RunningMoments;
use crate::rng::derived;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{train_with_hook, Dataset, RunRecord, TrainConfig};

fn check_p(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::param("p", format!("{p} is outside [0, 1]")))
    }
}

fn sum_squares(w: &[f64]) -> f64 {
    w.iter().map(|v| v * v).sum()
}

pub fn analytic_mean(w: &[f64], p: f64) -> f64 {
    p * w.iter().sum::<f64>() / (2.0 * PI).sqrt()
}

fn train_factor(p: f64) -> f64 {
    1.0 - p / 2.0 - p * p / (2.0 * PI)
}

fn test_factor(p: f64) -> f64 {
    (0.5 - 1.0 / (2.0 * PI)) * p * p - p + 1.0
}

pub fn analytic_var_train(w: &[f64], p: f64) -> f64 {
    sum_squares(w) * train_factor(p)
}

pub fn analytic_var_test(w: &[f64], p: f64) -> f64 {
    sum_squares(w) * test_factor(p)
}

/// `Var(X_test) / Var(X_train)`; 1 at both `p = 0` and `p = 1`.
pub fn analytic_shift_ratio(p: f64) -> Result<f64> {
    check_p(p)?;
    Ok(test_factor(p) / train_factor(p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxConfig {
    pub weights: Vec<f64>,
    pub p: f64,
    pub sample_count: usize,
    pub seed: u64,
}

impl BoxConfig {
    /// `d` weights drawn i.i.d. from `N(0, 1)` with a generator seeded by `weight_seed`.
    pub fn gaussian_weights(d: usize, p: f64, sample_count: usize, weight_seed: u64, seed: u64) -> Self {
        let mut rng = derived(weight_seed, &[0x5745_4947]);
        let weights = (0..d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        BoxConfig {
            weights,
            p,
            sample_count,
            seed,
        }
    }

    pub fn width(&self) -> usize {
        self.weights.len()
    }

    fn validate(&self) -> Result<()> {
        check_p(self.p)?;
        if self.weights.is_empty() {
            return Err(Error::param("weights", "width must be at least 1"));
        }
        if self.weights.iter().all(|&w| w == 0.0) {
            return Err(Error::param("weights", "all weights are zero; both variances vanish"));
        }
        if self.sample_count < 2 {
            return Err(Error::param("sample_count", "need at least 2 samples"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRatioReport {
    pub p: f64,
    pub width: usize,
    pub sample_count: usize,
    pub analytic_mean: f64,
    pub analytic_var_train: f64,
    pub analytic_var_test: f64,
    pub analytic_ratio: f64,
    pub empirical_mean_train: f64,
    pub empirical_mean_test: f64,
    pub stderr_mean_train: f64,
    pub stderr_mean_test: f64,
    pub empirical_var_train: f64,
    pub empirical_var_test: f64,
    pub empirical_ratio: f64,
}

const SIM_CHUNK: usize = 4096;

/// Draws `x ~ N(0, I)` per sample and evaluates `X_train` (fresh mask per
/// sample) and `X_test` on the same `x`. Chunks of samples use seeds derived
/// from `(seed, chunk)` and are reduced in chunk order, so the result does not
/// depend on the number of worker threads.
pub fn simulate_box(cfg: &BoxConfig) -> Result<ShiftRatioReport> {
    cfg.validate()?;
    let w = &cfg.weights;
    let p = cfg.p;
    let chunks = cfg.sample_count.div_ceil(SIM_CHUNK);
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = derived(cfg.seed, &[c as u64]);
            let n = SIM_CHUNK.min(cfg.sample_count - c * SIM_CHUNK);
            let mut train = Vec::with_capacity(n);
            let mut test = Vec::with_capacity(n);
            for _ in 0..n {
                let (a, b) = box_sample(w, p, &mut rng);
                train.push(a);
                test.push(b);
            }
            (train, test)
        })
        .collect();
    let mut train = RunningMoments::default();
    let mut test = RunningMoments::default();
    for (a, b) in &partial {
        a.iter().for_each(|&v| train.push(v));
        b.iter().for_each(|&v| test.push(v));
    }
    let analytic_ratio = analytic_shift_ratio(p)?;
    Ok(ShiftRatioReport {
        p,
        width: w.len(),
        sample_count: cfg.sample_count,
        analytic_mean: analytic_mean(w, p),
        analytic_var_train: analytic_var_train(w, p),
        analytic_var_test: analytic_var_test(w, p),
        analytic_ratio,
        empirical_mean_train: train.mean(),
        empirical_mean_test: test.mean(),
        stderr_mean_train: train.stderr(),
        stderr_mean_test: test.stderr(),
        empirical_var_train: train.variance(),
        empirical_var_test: test.variance(),
        empirical_ratio: test.variance() / train.variance(),
    })
}

fn box_sample<R: RngCore + ?Sized>(w: &[f64], p: f64, rng: &mut R) -> (f64, f64) {
    let mut train = 0.0;
    let mut test = 0.0;
    for &wi in w {
        let x: f64 = StandardNormal.sample(rng);
        let keep = rng.random::<f64>() < p;
        let r = x.max(0.0);
        train += wi * if keep { r } else { x };
        test += wi * ((1.0 - p) * x + p * r);
    }
    (train, test)
}

/// Layer indices of the first `BatchNorm → Activation → Affine → BatchNorm`
/// run; the monitored quantity is the output of that affine layer.
pub fn find_monitored_block(model: &Mlp) -> Result<usize> {
    model
        .layers()
        .windows(4)
        .position(|w| {
            matches!(
                w,
                [Layer::BatchNorm(_), Layer::Activation(_), Layer::Affine { .. }, Layer::BatchNorm(_)]
            )
        })
        .map(|i| i + 2)
        .ok_or_else(|| {
            Error::Config(
                "model has no BatchNorm → Activation → Affine → BatchNorm block to monitor".into(),
            )
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockShift {
    pub epoch: usize,
    pub var_train: f64,
    pub var_test: f64,
    pub ratio: f64,
}

fn mean_unit_variance(t: &Tensor) -> f64 {
    let d = t.last_extent();
    let mut total = 0.0;
    for j in 0..d {
        let mut m = RunningMoments::default();
        for row in t.data().chunks(d) {
            m.push(row[j]);
        }
        total += m.variance();
    }
    total / d as f64
}

/// Per-unit variance (averaged over units) of the monitored affine output over
/// `inputs`, once with training-mode activations (fresh masks from `rng`) and
/// once with test-mode activations. Batch norm uses running statistics in both
/// passes, so only the activation's train/test switch differs; the model is
/// not mutated.
pub fn measure_block_shift(model: &Mlp, inputs: &Tensor, rng: &mut dyn RngCore) -> Result<(f64, f64)> {
    let block = find_monitored_block(model)?;
    let probe = |mode: Mode, source: ActivationSource<'_>| -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.leaf(inputs.clone());
        let rec = model.record_with(
            &mut tape,
            input,
            ForwardOptions {
                activation_mode: mode,
                batch_stats: false,
                source,
                stop_after: Some(block),
            },
        )?;
        Ok(tape.value(rec.output).clone())
    };
    let train = probe(Mode::Train, ActivationSource::Sample(rng))?;
    let test = probe(Mode::Test, ActivationSource::Replay(&[]))?;
    Ok((mean_unit_variance(&train), mean_unit_variance(&test)))
}

/// Trains `model` and measures the monitored block's test/train variance
/// ratio on `data` at every epoch listed in `schedule` (0 = before training).
pub fn bn_block_shift_monitor(
    model: &mut Mlp,
    data: &Dataset,
    cfg: &TrainConfig,
    schedule: &[usize],
) -> Result<(Vec<BlockShift>, RunRecord)> {
    find_monitored_block(model)?;
    let mut probe_rng = derived(cfg.seed, &[crate::rng::stream::EVAL]);
    let mut series = Vec::with_capacity(schedule.len());
    let mut measure = |epoch: usize, m: &Mlp, series: &mut Vec<BlockShift>| -> Result<()> {
        let (var_train, var_test) = measure_block_shift(m, &data.inputs, &mut probe_rng)?;
        series.push(BlockShift {
            epoch,
            var_train,
            var_test,
            ratio: var_test / var_train,
        });
        Ok(())
    };
    if schedule.contains(&0) {
        measure(0, model, &mut series)?;
    }
    let record = train_with_hook(model, data, None, cfg, |epoch, m| {
        if schedule.contains(&epoch) {
            measure(epoch, m, &mut series)?;
        }
        Ok(())
    })?;
    Ok((series, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_values() {
        let inv = 1.0 / (2.0 * PI).sqrt();
        assert!((analytic_mean(&[1.0], 1.0) - 0.398942).abs() < 1e-6);
        assert_eq!(analytic_mean(&[1.0, -1.0], 0.7), 0.0);
        assert!((analytic_mean(&[1.0, 1.0], 0.5) - inv).abs() < 1e-15);
    }

    #[test]
    fn variance_endpoints() {
        assert_eq!(analytic_var_train(&[1.0], 0.0), 1.0);
        assert!((analytic_var_train(&[1.0], 1.0) - 0.340845).abs() < 1e-6);
        assert_eq!(analytic_var_test(&[2.0], 0.0), 4.0);
        let relu_var = 0.5 - 1.0 / (2.0 * PI);
        assert!((analytic_var_test(&[1.0], 1.0) - relu_var).abs() < 1e-15);
        assert!((analytic_var_train(&[1.0], 1.0) - relu_var).abs() < 1e-15);
    }

    #[test]
    fn ratio_anchor_and_endpoints() {
        assert!((analytic_shift_ratio(0.95).unwrap() - 0.9377).abs() <= 1e-4);
        assert_eq!(analytic_shift_ratio(0.0).unwrap(), 1.0);
        assert!((analytic_shift_ratio(1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(analytic_shift_ratio(1.2).is_err());
    }

    #[test]
    fn all_zero_weights_rejected() {
        let cfg = BoxConfig {
            weights: vec![0.0; 3],
            p: 0.5,
            sample_count: 10,
            seed: 0,
        };
        assert!(matches!(simulate_box(&cfg), Err(Error::Parameter { .. })));
    }

    #[test]
    fn p_one_box_has_identical_train_and_test() {
        let cfg = BoxConfig::gaussian_weights(8, 1.0, 2000, 1, 2);
        let r = simulate_box(&cfg).unwrap();
        assert_eq!(r.empirical_var_train, r.empirical_var_test);
        assert_eq!(r.empirical_ratio, 1.0);
    }
}
