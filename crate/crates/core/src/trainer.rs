//! SGD with classical momentum, the training loop, and the experiment drivers
//! built on it: curve fitting and the retain-probability grid search.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationKind, Mode};
use crate::datasets::{gen_regression, train_val_split, LabeledImages, RegressionData, RegressionTask};
use crate::error::{check_retain, Error, Result};
use crate::networks::{build_classifier, build_regression_net_with_widths, ActivationSource, Mlp};
use crate::rng::{derive_seed, derived, stream};
use crate::tape::Tape;
use crate::tensor::{pairwise_sum, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// `(epoch, multiplier)`: from that epoch on the rate is multiplied by the factor.
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
    /// Retain probability where the experiment uses Drop-Activation.
    pub p: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_size: None,
            lr_schedule: Vec::new(),
            seed: 0,
            p: 0.95,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", format!("{} is outside [0, 1)", self.momentum)));
        }
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        check_retain(self.p)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.learning_rate, |lr, (_, m)| lr * m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression(Tensor),
    Classes(Vec<usize>),
}

/// Inputs `[n×d]` with regression targets or class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn regression(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rank() != 2 || targets.rank() != 2 || inputs.rows() != targets.rows() {
            return Err(Error::Dimension {
                op: "dataset",
                left: inputs.shape().to_vec(),
                right: targets.shape().to_vec(),
            });
        }
        Ok(Dataset {
            inputs,
            targets: Targets::Regression(targets),
        })
    }

    pub fn classification(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                msg: format!("inputs {:?} for {} labels", inputs.shape(), labels.len()),
            });
        }
        Ok(Dataset {
            inputs,
            targets: Targets::Classes(labels),
        })
    }

    pub fn from_images(images: &LabeledImages) -> Result<Self> {
        Self::classification(images.flattened(), images.labels.clone())
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let d = self.inputs.last_extent();
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(self.inputs.row(i));
        }
        let inputs = Tensor::new(vec![idx.len(), d], x)?;
        Ok(match &self.targets {
            Targets::Regression(t) => {
                let k = t.last_extent();
                let mut y = Vec::with_capacity(idx.len() * k);
                for &i in idx {
                    y.extend_from_slice(t.row(i));
                }
                Dataset::regression(inputs, Tensor::new(vec![idx.len(), k], y)?)?
            }
            Targets::Classes(l) => Dataset::classification(inputs, idx.iter().map(|&i| l[i]).collect())?,
        })
    }

    pub fn metric_name(&self) -> &'static str {
        match self.targets {
            Targets::Regression(_) => "mse",
            Targets::Classes(_) => "error_rate",
        }
    }
}

/// Per-epoch history of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub train_loss: Vec<f64>,
    /// Test-mode metric on the evaluation set (training set if none was given).
    pub metric: Vec<f64>,
    pub metric_name: String,
    /// Seconds since the start of training at the end of each epoch.
    pub wall_time: Vec<f64>,
    pub config: TrainConfig,
}

impl RunRecord {
    pub fn final_metric(&self) -> Option<f64> {
        self.metric.last().copied()
    }

    /// True when every loss and metric matches `other` bit for bit (wall time excluded).
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.train_loss) == bits(&other.train_loss)
            && bits(&self.metric) == bits(&other.metric)
            && self.metric_name == other.metric_name
            && self.config == other.config
    }
}

/// `v ← momentum·v + g; θ ← θ − lr·v`.
pub fn sgd_momentum_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Contract(format!(
            "sgd step: parameter {:?}, gradient {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    let v: Vec<f64> = velocity
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| momentum * v + g)
        .collect();
    let theta: Vec<f64> = param.data().iter().zip(&v).map(|(&t, &v)| t - lr * v).collect();
    *velocity = Tensor::checked("sgd_momentum_step", velocity.shape().to_vec(), v)?;
    *param = Tensor::checked("sgd_momentum_step", param.shape().to_vec(), theta)?;
    Ok(())
}

/// Momentum buffers for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<Tensor>,
    momentum: f64,
}

impl Sgd {
    pub fn new(params: &[&Tensor], momentum: f64) -> Self {
        Sgd {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            momentum,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::Contract(format!(
                "sgd step over {} parameters with {} gradients and {} buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            sgd_momentum_step(p, g, v, lr, self.momentum)?;
        }
        Ok(())
    }
}

/// Test-mode evaluation: MSE for regression, error rate for classification.
/// Does not mutate the model.
pub fn evaluate(model: &Mlp, data: &Dataset) -> Result<f64> {
    let out = model.predict(&data.inputs)?;
    Ok(match &data.targets {
        Targets::Regression(t) => {
            let d = out.sub(t)?;
            d.squared_norm() / d.len() as f64
        }
        Targets::Classes(labels) => {
            let wrong = labels
                .iter()
                .enumerate()
                .filter(|&(i, &c)| argmax(out.row(i)) != c)
                .count();
            wrong as f64 / labels.len() as f64
        }
    })
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn batch_step(
    model: &mut Mlp,
    batch: &Dataset,
    sgd: &mut Sgd,
    lr: f64,
    mask_rng: &mut dyn RngCore,
) -> Result<f64> {
    let mut tape = Tape::new();
    let input = tape.leaf(batch.inputs.clone());
    let rec = model.record(&mut tape, input, ActivationSource::Sample(mask_rng))?;
    let loss = match &batch.targets {
        Targets::Regression(t) => tape.mse(rec.output, t)?,
        Targets::Classes(l) => tape.softmax_cross_entropy(rec.output, l)?,
    };
    let loss_value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = rec.params.iter().map(|&v| grads.wrt(v)).collect();
    sgd.step(model.parameters_mut(), &grads, lr)?;
    model.apply_bn_updates(&rec.bn_batch_stats);
    Ok(loss_value)
}

pub fn train(model: &mut Mlp, data: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<RunRecord> {
    train_with_hook(model, data, eval, cfg, |_, _| Ok(()))
}

/// Trains in `Train` mode with fresh activation randomness per batch, calling
/// `hook(epoch, model)` after each epoch (1-based). The model's mode is
/// restored afterwards. A non-finite loss aborts with [`Error::Diverged`]
/// carrying the history so far.
pub fn train_with_hook<F>(
    model: &mut Mlp,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mut hook: F,
) -> Result<RunRecord>
where
    F: FnMut(usize, &Mlp) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::param("data", "training set is empty"));
    }
    let eval = eval.unwrap_or(data);
    let mut record = RunRecord {
        train_loss: Vec::with_capacity(cfg.epochs),
        metric: Vec::with_capacity(cfg.epochs),
        metric_name: eval.metric_name().to_string(),
        wall_time: Vec::with_capacity(cfg.epochs),
        config: cfg.clone(),
    };
    let mut shuffle_rng = derived(cfg.seed, &[stream::SHUFFLE]);
    let mut mask_rng = derived(cfg.seed, &[stream::MASKS]);
    let prior_mode = model.mode();
    model.set_mode(Mode::Train);
    let mut sgd = Sgd::new(&model.parameters(), cfg.momentum);
    let n = data.len();
    let batch_size = cfg.batch_size.unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let start = Instant::now();

    let outcome = (|| -> Result<()> {
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr_at(epoch);
            let mut losses = Vec::new();
            if batch_size == n {
                losses.push(batch_step(model, data, &mut sgd, lr, &mut mask_rng)?);
            } else {
                order.shuffle(&mut shuffle_rng);
                for chunk in order.chunks(batch_size) {
                    let batch = data.subset(chunk)?;
                    losses.push(batch_step(model, &batch, &mut sgd, lr, &mut mask_rng)?);
                }
            }
            let loss = pairwise_sum(&losses) / losses.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            record.train_loss.push(loss);
            record.metric.push(evaluate(model, eval)?);
            record.wall_time.push(start.elapsed().as_secs_f64());
            hook(epoch + 1, model)?;
        }
        Ok(())
    })();
    model.set_mode(prior_mode);

    match outcome {
        Ok(()) => Ok(record),
        Err(e @ Error::NonFinite { .. }) => Err(Error::Diverged {
            epoch: record.train_loss.len(),
            cause: e.to_string(),
            record: Box::new(record),
        }),
        Err(e) => Err(e),
    }
}

/// Setup for one curve-fitting run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionExperiment {
    pub task: RegressionTask,
    pub widths: Vec<usize>,
    /// Inputs are multiplied by this before entering the network.
    pub input_scale: f64,
    pub train: TrainConfig,
}

impl RegressionExperiment {
    /// Full-width network, full-batch descent with lr `1e-3`, momentum 0.9.
    pub fn new(task: RegressionTask, seed: u64) -> Self {
        RegressionExperiment {
            task,
            widths: crate::networks::REGRESSION_WIDTHS.to_vec(),
            input_scale: 0.1,
            train: TrainConfig {
                learning_rate: 1e-3,
                momentum: 0.9,
                epochs: 20_000,
                batch_size: None,
                lr_schedule: Vec::new(),
                seed,
                p: 0.95,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionOutcome {
    pub data: RegressionData,
    /// Test-mode MSE on the noisy training points.
    pub train_mse: f64,
    /// Test-mode MSE against the noise-free target on the dense grid.
    pub grid_mse: f64,
    /// Test-mode prediction at each grid point.
    pub prediction: Vec<f64>,
    pub record: RunRecord,
}

/// Trains the regression network on the task's noisy samples and scores it
/// on the noise-free grid.
pub fn run_regression_experiment(exp: &RegressionExperiment, activation: ActivationKind) -> Result<RegressionOutcome> {
    let data = gen_regression(&exp.task)?;
    let scale = exp.input_scale;
    let train_set = Dataset::regression(data.train_inputs().scale(scale)?, data.train_targets())?;
    let grid_set = Dataset::regression(data.grid_inputs().scale(scale)?, data.grid_targets())?;
    let mut init = derived(exp.train.seed, &[stream::INIT]);
    let mut model = build_regression_net_with_widths(&exp.widths, activation, &mut init)?;
    // the grid is scored once at the end; the per-epoch metric is the training MSE
    let record = train(&mut model, &train_set, None, &exp.train)?;
    let prediction = model.predict(&grid_set.inputs)?.into_data();
    Ok(RegressionOutcome {
        train_mse: evaluate(&model, &train_set)?,
        grid_mse: evaluate(&model, &grid_set)?,
        prediction,
        data,
        record,
    })
}

/// Classifier architecture and protocol for the grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub hidden: Vec<usize>,
    pub with_bn: bool,
    pub val_fraction: f64,
    pub train: TrainConfig,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            hidden: vec![64, 32],
            with_bn: false,
            val_fraction: 0.1,
            train: TrainConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                epochs: 30,
                batch_size: Some(32),
                lr_schedule: Vec::new(),
                seed: 0,
                p: 0.95,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyOutcome {
    pub record: RunRecord,
    /// Final-epoch validation error rate.
    pub val_error: f64,
    pub model: Mlp,
}

/// Splits with `seed`, builds the classifier from `seed`, trains with `seed`.
pub fn run_classification(
    data: &LabeledImages,
    activation: ActivationKind,
    cfg: &ClassifyConfig,
    seed: u64,
) -> Result<ClassifyOutcome> {
    let all = Dataset::from_images(data)?;
    let (train_idx, val_idx) = train_val_split(all.len(), cfg.val_fraction, seed)?;
    let train_set = all.subset(&train_idx)?;
    let val_set = all.subset(&val_idx)?;
    let mut init = derived(seed, &[stream::INIT]);
    let mut model = build_classifier(
        all.inputs.last_extent(),
        &cfg.hidden,
        data.class_count,
        activation,
        cfg.with_bn,
        &mut init,
    )?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let record = train(&mut model, &train_set, Some(&val_set), &train_cfg)?;
    Ok(ClassifyOutcome {
        val_error: record.final_metric().expect("at least one epoch"),
        record,
        model,
    })
}

/// Grid `p_min, p_min + step, …` up to `p_max` (inclusive within 1e-9),
/// rounded to 12 decimals.
pub fn grid_points(p_min: f64, p_max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::param("p_step", "must be positive"));
    }
    if !(p_min <= p_max) {
        return Err(Error::param("p_min", format!("{p_min} exceeds p_max {p_max}")));
    }
    let count = ((p_max - p_min) / step + 1e-9).floor() as usize + 1;
    let points: Vec<f64> = (0..count)
        .map(|i| ((p_min + i as f64 * step) * 1e12).round() / 1e12)
        .collect();
    for &p in &points {
        check_retain(p)?;
    }
    if points.is_empty() {
        return Err(Error::param("p_min", "empty grid"));
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub p: f64,
    pub mean_error: f64,
    /// `1.96 · stderr`; 0 when only one repeat was run.
    pub ci_halfwidth: f64,
    pub repeats: usize,
    pub degenerate_ci: bool,
    pub errors: Vec<f64>,
}

/// Seed of repeat `repeat` at grid index `p_index`.
pub fn grid_seed(master: u64, p_index: usize, repeat: usize) -> u64 {
    derive_seed(master, &[p_index as u64, repeat as u64])
}

/// Trains `repeats` classifiers per grid value of `p` and summarizes the
/// final validation error. Runs are independent and may execute in parallel;
/// the result does not depend on scheduling.
pub fn grid_search_p(
    data: &LabeledImages,
    points: &[f64],
    repeats: usize,
    cfg: &ClassifyConfig,
    master_seed: u64,
) -> Result<Vec<GridRow>> {
    if points.is_empty() {
        return Err(Error::param("grid", "empty grid"));
    }
    if repeats == 0 {
        return Err(Error::param("repeats", "must be at least 1"));
    }
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|i| (0..repeats).map(move |r| (i, r)))
        .collect();
    let errors = jobs
        .par_iter()
        .map(|&(i, r)| {
            run_classification(
                data,
                ActivationKind::drop_act(points[i]),
                cfg,
                grid_seed(master_seed, i, r),
            )
            .map(|o| o.val_error)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(points
        .iter()
        .zip(errors.chunks(repeats))
        .map(|(&p, errs)| summarize(p, errs))
        .collect())
}

fn summarize(p: f64, errs: &[f64]) -> GridRow {
    let n = errs.len();
    let mean = pairwise_sum(errs) / n as f64;
    let halfwidth = if n > 1 {
        let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    GridRow {
        p,
        mean_error: mean,
        ci_halfwidth: halfwidth,
        repeats: n,
        degenerate_ci: n < 2,
        errors: errs.to_vec(),
    }
}
