//! The `dropact` command line: verification suites and experiment drivers.
//!
//! Exit status: 0 success, 1 a verification failed its tolerance (or a run
//! failed), 2 usage or parameter error, 3 file input/output or format error.

mod config;
pub mod sink;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::activations::{ActivationKind, RRELU_LOWER, RRELU_UPPER};
use crate::datasets::{
    gen_blobs, load_idx_pair, train_val_split, BlobsConfig, LabeledImages, RegressionTarget, RegressionTask,
};
use crate::error::{Error, Result};
use crate::networks::build_classifier;
use crate::penalty::{closed_form_loss, enumerated_expected_loss, random_instance, MAX_ENUMERATION_WIDTH};
use crate::rng::{derive_seed, derived, generator, stream};
use crate::trainer::{
    grid_points, grid_search_p, run_classification, run_regression_experiment, ClassifyConfig, Dataset,
    RegressionExperiment, TrainConfig,
};
use crate::variance_shift::{analytic_shift_ratio, bn_block_shift_monitor, simulate_box, BoxConfig};

pub use config::parse_config;
pub use sink::{Cell, Format, Meta, ResultSink, Table};

#[derive(Parser, Debug)]
#[command(
    name = "dropact",
    version,
    about = "Drop-Activation verification suites and experiments",
    arg_required_else_help = true,
    args_override_self = true
)]
pub struct Cli {
    /// Read `key = value` defaults from this file; flags on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Check the penalized-loss identity on random one-hidden-layer instances.
    #[command(name = "verify-property1")]
    VerifyProperty1(Property1Args),
    /// Compare the simulated variance-shift ratio with its closed form.
    VerifyShiftRatio(ShiftArgs),
    /// Tabulate the closed-form shift ratio over p in [0, 1].
    CurveShiftRatio(CurveArgs),
    /// Simulate the dropout-free BN block and report means and variances.
    SimulateBox(ShiftArgs),
    /// Fit a 1-D regression target with a ReLU-family network.
    TrainRegression(RegressionArgs),
    /// Grid search over the retain probability with repeated classifier runs.
    GridSearch(GridArgs),
    /// Train one classifier and report per-epoch loss and validation error.
    TrainClassify(ClassifyArgs),
    /// Train a classifier with batch norm and track the block variance-shift ratio.
    MonitorBn(MonitorArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Output file; standard output when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Property1Args {
    /// Hidden width k (at most 20, all 2^k masks are enumerated).
    #[arg(long, default_value_t = 8, value_parser = hidden_width)]
    pub hidden: usize,
    /// Samples per instance.
    #[arg(long, default_value_t = 5, value_parser = positive_usize)]
    pub samples: usize,
    #[arg(long, default_value_t = 4, value_parser = positive_usize)]
    pub input_width: usize,
    #[arg(long, default_value_t = 3, value_parser = positive_usize)]
    pub output_width: usize,
    /// Retain probability.
    #[arg(long, default_value_t = 0.95, value_parser = retain_probability)]
    pub p: f64,
    #[arg(long, default_value_t = 10, value_parser = positive_usize)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-10, value_parser = positive_f64)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ShiftArgs {
    #[arg(long, default_value_t = 0.95, value_parser = retain_probability)]
    pub p: f64,
    /// Number of i.i.d. N(0, 1) weights feeding the second BN.
    #[arg(long, default_value_t = 512, value_parser = positive_usize)]
    pub width: usize,
    #[arg(long, default_value_t = 100_000, value_parser = at_least_two)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the weight draw (defaults to `--seed`).
    #[arg(long)]
    pub weight_seed: Option<u64>,
    /// Explicit comma-separated weights; overrides `--width`.
    #[arg(long, value_parser = real_list)]
    pub weights: Option<RealList>,
    /// Relative tolerance on the ratio (verify-shift-ratio only).
    #[arg(long, default_value_t = 0.03, value_parser = positive_f64)]
    pub tol: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CurveArgs {
    /// Grid spacing; `1/p_step` must be a whole number.
    #[arg(long, default_value_t = 0.001, value_parser = positive_f64)]
    pub p_step: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetArg {
    Xsinx,
    Piecewise,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationArg {
    Relu,
    Dropact,
    Rrelu,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionEmit {
    /// One row with the final training and grid errors.
    Summary,
    /// One row per epoch.
    History,
    /// The test-mode prediction at every grid point.
    Prediction,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ActivationArgs {
    #[arg(long, value_enum, default_value_t = ActivationArg::Dropact)]
    pub activation: ActivationArg,
    #[arg(long, default_value_t = 0.95, value_parser = retain_probability)]
    pub p: f64,
    #[arg(long, default_value_t = RRELU_LOWER)]
    pub rrelu_lower: f64,
    #[arg(long, default_value_t = RRELU_UPPER)]
    pub rrelu_upper: f64,
}

impl ActivationArgs {
    fn kind(&self) -> Result<ActivationKind> {
        let kind = match self.activation {
            ActivationArg::Relu => ActivationKind::Relu,
            ActivationArg::Dropact => ActivationKind::drop_act(self.p),
            ActivationArg::Rrelu => ActivationKind::rrelu(self.rrelu_lower, self.rrelu_upper),
        };
        kind.validate()?;
        Ok(kind)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct RegressionArgs {
    #[arg(long, value_enum, default_value_t = TargetArg::Xsinx)]
    pub target: TargetArg,
    #[command(flatten)]
    pub activation: ActivationArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20_000, value_parser = positive_usize)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9, value_parser = momentum)]
    pub momentum: f64,
    /// Hidden widths, comma separated.
    #[arg(long, default_value = "1000,800,200", value_parser = width_list)]
    pub widths: WidthList,
    /// Multiplier applied to x before it enters the network.
    #[arg(long, default_value_t = 0.1, value_parser = positive_f64)]
    pub input_scale: f64,
    #[arg(long, default_value_t = 20, value_parser = at_least_two)]
    pub n_train: usize,
    /// Noise standard deviation (target-specific default when omitted).
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 1001, value_parser = at_least_two)]
    pub grid_points: usize,
    #[arg(long, value_enum, default_value_t = RegressionEmit::Summary)]
    pub emit: RegressionEmit,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Labelled data: an IDX image/label pair, or synthetic Gaussian blobs.
#[derive(Args, Debug, Clone, Serialize)]
pub struct DataArgs {
    #[arg(long, value_name = "IDX", requires = "train_labels")]
    pub train_images: Option<PathBuf>,
    #[arg(long, value_name = "IDX", requires = "train_images")]
    pub train_labels: Option<PathBuf>,
    /// Keep only the first N examples.
    #[arg(long, value_parser = positive_usize)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 600, value_parser = positive_usize)]
    pub blobs_samples: usize,
    #[arg(long, default_value_t = 16, value_parser = positive_usize)]
    pub blobs_width: usize,
    #[arg(long, default_value_t = 4)]
    pub blobs_classes: usize,
    #[arg(long, default_value_t = 0.6)]
    pub blobs_separation: f64,
    /// Seed of the synthetic data (independent of the training seed).
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<LabeledImages> {
        let data = match (&self.train_images, &self.train_labels) {
            (Some(images), Some(labels)) => load_idx_pair(images, labels).map_err(|e| match e {
                Error::Shape { msg, .. } => Error::Format {
                    what: format!("{} / {}", images.display(), labels.display()),
                    expected: "matching image and label counts".into(),
                    found: msg,
                },
                other => other,
            })?,
            _ => gen_blobs(&BlobsConfig {
                samples: self.blobs_samples,
                input_width: self.blobs_width,
                classes: self.blobs_classes,
                separation: self.blobs_separation,
                seed: self.data_seed,
            })?,
        };
        match self.limit {
            Some(n) if n < data.len() => data.subset(&(0..n).collect::<Vec<_>>()),
            _ => Ok(data),
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ClassifierArgs {
    /// Hidden widths, comma separated.
    #[arg(long, default_value = "64,32", value_parser = width_list)]
    pub hidden: WidthList,
    #[arg(long, default_value_t = 30, value_parser = positive_usize)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05, value_parser = positive_f64)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9, value_parser = momentum)]
    pub momentum: f64,
    #[arg(long, default_value_t = 32, value_parser = positive_usize)]
    pub batch_size: usize,
}

impl ClassifierArgs {
    fn train_config(&self, seed: u64, p: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: Some(self.batch_size),
            lr_schedule: Vec::new(),
            seed,
            p,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GridArgs {
    #[arg(long, default_value_t = 0.6, value_parser = retain_probability)]
    pub p_min: f64,
    #[arg(long, default_value_t = 1.0, value_parser = retain_probability)]
    pub p_max: f64,
    #[arg(long, default_value_t = 0.05, value_parser = positive_f64)]
    pub p_step: f64,
    #[arg(long, default_value_t = 20, value_parser = positive_usize)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0.1, value_parser = open_unit)]
    pub val_fraction: f64,
    /// Insert batch norm after every hidden affine layer.
    #[arg(long)]
    pub bn: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub activation: ActivationArgs,
    #[arg(long, default_value_t = 0.1, value_parser = open_unit)]
    pub val_fraction: f64,
    #[arg(long)]
    pub bn: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct MonitorArgs {
    #[arg(long, default_value_t = 0.95, value_parser = retain_probability)]
    pub p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// Comma-separated positive widths, parsed as one flag value.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct WidthList(pub Vec<usize>);

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct RealList(pub Vec<f64>);

fn retain_probability(s: &str) -> std::result::Result<f64, String> {
    let p: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if p > 0.0 && p <= 1.0 {
        Ok(p)
    } else {
        Err(format!("{p} is outside the range (0,1]"))
    }
}

fn open_unit(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside the range (0,1)"))
    }
}

fn momentum(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside the range [0,1)"))
    }
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive and finite"))
    }
}

fn positive_usize(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("`{s}` is not a positive integer")),
    }
}

fn at_least_two(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 2 => Ok(n),
        _ => Err(format!("`{s}` must be an integer ≥ 2")),
    }
}

fn hidden_width(s: &str) -> std::result::Result<usize, String> {
    let k = positive_usize(s)?;
    if k <= MAX_ENUMERATION_WIDTH {
        Ok(k)
    } else {
        Err(format!(
            "{k} exceeds {MAX_ENUMERATION_WIDTH}; exact enumeration of 2^{k} masks is not supported"
        ))
    }
}

fn width_list(s: &str) -> std::result::Result<WidthList, String> {
    s.split(',')
        .map(|t| positive_usize(t.trim()))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(WidthList)
}

fn real_list(s: &str) -> std::result::Result<RealList, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(RealList)
}

/// Exit status for an error raised while running a subcommand.
pub fn exit_status(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Format { .. } | Error::Length { .. } => 3,
        Error::Parameter { .. } | Error::Config(_) | Error::Capacity(_) => 2,
        _ => 1,
    }
}

/// Result of a subcommand: the table to write and whether every check passed.
pub struct Outcome {
    pub table: Table,
    pub seed: Option<u64>,
    pub passed: bool,
}

/// `|a − b| / max(|a|, |b|)`, 0 when both are 0.
fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

impl Command {
    pub fn output(&self) -> &OutputArgs {
        match self {
            Command::VerifyProperty1(a) => &a.output,
            Command::VerifyShiftRatio(a) | Command::SimulateBox(a) => &a.output,
            Command::CurveShiftRatio(a) => &a.output,
            Command::TrainRegression(a) => &a.output,
            Command::GridSearch(a) => &a.output,
            Command::TrainClassify(a) => &a.output,
            Command::MonitorBn(a) => &a.output,
        }
    }

    /// Runs the computation without writing anything.
    pub fn execute(&self) -> Result<Outcome> {
        match self {
            Command::VerifyProperty1(a) => verify_property1(a),
            Command::VerifyShiftRatio(a) => verify_shift_ratio(a),
            Command::CurveShiftRatio(a) => curve_shift_ratio(a),
            Command::SimulateBox(a) => simulate(a),
            Command::TrainRegression(a) => train_regression(a),
            Command::GridSearch(a) => grid_search(a),
            Command::TrainClassify(a) => train_classify(a),
            Command::MonitorBn(a) => monitor_bn(a),
        }
    }

    /// Executes and writes the result; returns the exit status.
    pub fn run(&self) -> Result<u8> {
        let outcome = self.execute()?;
        let out = self.output();
        let sink = ResultSink {
            format: out.format,
            path: out.out.clone(),
        };
        let meta = Meta {
            seed: outcome.seed,
            config: config_value(self),
        };
        sink.write(&outcome.table, &meta)?;
        Ok(if outcome.passed { 0 } else { 1 })
    }
}

/// The resolved flags, minus output plumbing.
fn config_value(cmd: &Command) -> Value {
    let mut v = serde_json::to_value(cmd).expect("arguments serialize");
    if let Value::Object(map) = &mut v {
        map.remove("output");
    }
    v
}

fn verify_property1(a: &Property1Args) -> Result<Outcome> {
    if a.hidden > MAX_ENUMERATION_WIDTH {
        return Err(Error::Capacity(format!("hidden width {} > {MAX_ENUMERATION_WIDTH}", a.hidden)));
    }
    let mut table = Table::new(&["k", "p", "seed", "enumerated", "closed_form", "rel_err", "pass"]);
    let mut passed = true;
    for i in 0..a.instances {
        let seed = derive_seed(a.seed, &[i as u64]);
        let (net, data) = random_instance(a.hidden, a.input_width, a.output_width, a.samples, &mut generator(seed))?;
        let enumerated = enumerated_expected_loss(&net, &data, a.p)?;
        let closed = closed_form_loss(&net, &data, a.p)?;
        let err = rel_err(enumerated, closed);
        let ok = err <= a.tol;
        passed &= ok;
        table.push(vec![
            a.hidden.into(),
            a.p.into(),
            seed.into(),
            enumerated.into(),
            closed.into(),
            err.into(),
            ok.into(),
        ]);
    }
    Ok(Outcome {
        table,
        seed: Some(a.seed),
        passed,
    })
}

fn box_config(a: &ShiftArgs) -> BoxConfig {
    match &a.weights {
        Some(RealList(w)) => BoxConfig {
            weights: w.clone(),
            p: a.p,
            sample_count: a.samples,
            seed: a.seed,
        },
        None => BoxConfig::gaussian_weights(a.width, a.p, a.samples, a.weight_seed.unwrap_or(a.seed), a.seed),
    }
}

fn verify_shift_ratio(a: &ShiftArgs) -> Result<Outcome> {
    let report = simulate_box(&box_config(a))?;
    let err = rel_err(report.empirical_ratio, report.analytic_ratio);
    let ok = err <= a.tol;
    let mut table = Table::new(&["p", "width", "samples", "seed", "analytic", "empirical", "rel_err", "pass"]);
    table.push(vec![
        report.p.into(),
        report.width.into(),
        report.sample_count.into(),
        a.seed.into(),
        report.analytic_ratio.into(),
        report.empirical_ratio.into(),
        err.into(),
        ok.into(),
    ]);
    Ok(Outcome {
        table,
        seed: Some(a.seed),
        passed: ok,
    })
}

fn curve_shift_ratio(a: &CurveArgs) -> Result<Outcome> {
    let n = (1.0 / a.p_step).round();
    if (n * a.p_step - 1.0).abs() > 1e-9 || n > 1e7 {
        return Err(Error::param(
            "p_step",
            format!("{} does not divide [0, 1] into at most 10^7 equal steps", a.p_step),
        ));
    }
    let n = n as usize;
    let mut table = Table::new(&["p", "ratio"]);
    for i in 0..=n {
        let p = i as f64 / n as f64;
        table.push(vec![p.into(), analytic_shift_ratio(p)?.into()]);
    }
    Ok(Outcome {
        table,
        seed: None,
        passed: true,
    })
}

fn simulate(a: &ShiftArgs) -> Result<Outcome> {
    let r = simulate_box(&box_config(a))?;
    let mut table = Table::new(&[
        "p",
        "width",
        "samples",
        "seed",
        "analytic_mean",
        "empirical_mean_train",
        "empirical_mean_test",
        "stderr_mean_train",
        "stderr_mean_test",
        "analytic_var_train",
        "empirical_var_train",
        "analytic_var_test",
        "empirical_var_test",
        "analytic_ratio",
        "empirical_ratio",
    ]);
    table.push(vec![
        r.p.into(),
        r.width.into(),
        r.sample_count.into(),
        a.seed.into(),
        r.analytic_mean.into(),
        r.empirical_mean_train.into(),
        r.empirical_mean_test.into(),
        r.stderr_mean_train.into(),
        r.stderr_mean_test.into(),
        r.analytic_var_train.into(),
        r.empirical_var_train.into(),
        r.analytic_var_test.into(),
        r.empirical_var_test.into(),
        r.analytic_ratio.into(),
        r.empirical_ratio.into(),
    ]);
    Ok(Outcome {
        table,
        seed: Some(a.seed),
        passed: true,
    })
}

fn train_regression(a: &RegressionArgs) -> Result<Outcome> {
    let target = match a.target {
        TargetArg::Xsinx => RegressionTarget::XSinX,
        TargetArg::Piecewise => RegressionTarget::PiecewiseConstant,
    };
    let kind = a.activation.kind()?;
    let mut task = RegressionTask::new(target, a.seed);
    task.n_train = a.n_train;
    task.grid_size = a.grid_points;
    if let Some(noise) = a.noise {
        task.noise_sigma = noise;
    }
    task.validate()?;
    let mut exp = RegressionExperiment::new(task, a.seed);
    exp.widths = a.widths.0.clone();
    exp.input_scale = a.input_scale;
    exp.train.epochs = a.epochs;
    exp.train.learning_rate = a.lr;
    exp.train.momentum = a.momentum;
    exp.train.p = a.activation.p;
    let out = run_regression_experiment(&exp, kind)?;

    let table = match a.emit {
        RegressionEmit::Summary => {
            let mut t = Table::new(&["target", "activation", "p", "seed", "epochs", "train_mse", "grid_mse"]);
            t.push(vec![
                format!("{:?}", a.target).to_lowercase().into(),
                kind.name().into(),
                a.activation.p.into(),
                a.seed.into(),
                a.epochs.into(),
                out.train_mse.into(),
                out.grid_mse.into(),
            ]);
            t
        }
        RegressionEmit::History => {
            let mut t = Table::new(&["epoch", "train_loss", "train_mse"]);
            for (i, (l, m)) in out.record.train_loss.iter().zip(&out.record.metric).enumerate() {
                t.push(vec![(i + 1).into(), (*l).into(), (*m).into()]);
            }
            t
        }
        RegressionEmit::Prediction => {
            let mut t = Table::new(&["x", "target", "prediction"]);
            for ((x, f), yhat) in out.data.grid_x.iter().zip(&out.data.grid_f).zip(&out.prediction) {
                t.push(vec![(*x).into(), (*f).into(), (*yhat).into()]);
            }
            t
        }
    };
    Ok(Outcome {
        table,
        seed: Some(a.seed),
        passed: true,
    })
}

fn classify_config(c: &ClassifierArgs, with_bn: bool, val_fraction: f64, seed: u64, p: f64) -> ClassifyConfig {
    ClassifyConfig {
        hidden: c.hidden.0.clone(),
        with_bn,
        val_fraction,
        train: c.train_config(seed, p),
    }
}

fn grid_search(a: &GridArgs) -> Result<Outcome> {
    let data = a.data.load()?;
    let points = grid_points(a.p_min, a.p_max, a.p_step)?;
    let cfg = classify_config(&a.classifier, a.bn, a.val_fraction, a.seed, 0.95);
    let rows = grid_search_p(&data, &points, a.repeats, &cfg, a.seed)?;
    let mut table = Table::new(&[
        "p",
        "mean_error",
        "ci_low",
        "ci_high",
        "ci_halfwidth",
        "repeats",
        "degenerate_ci",
    ]);
    for r in rows {
        table.push(vec![
            r.p.into(),
            r.mean_error.into(),
            (r.mean_error - r.ci_halfwidth).into(),
            (r.mean_error + r.ci_halfwidth).into(),
            r.ci_halfwidth.into(),
            r.repeats.into(),
            r.degenerate_ci.into(),
        ]);
    }
    Ok(Outcome {
        table,
        seed: Some(a.seed),
        passed: true,
    })
}

fn train_classify(a: &ClassifyArgs) -> Result<Outcome> {
    let data = a.data.load()?;
    let kind = a.activation.kind()?;
    let cfg = classify_config(&a.classifier, a.bn, a.val_fraction, a.seed, a.activation.p);
    let out = run_classification(&data, kind, &cfg, a.seed)?;
    let mut table = Table::new(&["epoch", "train_loss", "val_error"]);
    for (i, (l, m)) in out.record.train_loss.iter().zip(&out.record.metric).enumerate() {
        table.push(vec![(i + 1).into(), (*l).into(), (*m).into()]);
    }
    Ok(Outcome {
        table,
        seed: Some(a.seed),
        passed: true,
    })
}

fn monitor_bn(a: &MonitorArgs) -> Result<Outcome> {
    let images = a.data.load()?;
    if a.classifier.hidden.0.len() < 2 {
        return Err(Error::param(
            "hidden",
            "need at least two hidden layers for a BN → activation → affine → BN block",
        ));
    }
    let all = Dataset::from_images(&images)?;
    let (train_idx, _) = train_val_split(all.len(), 0.1, a.seed)?;
    let train_set = all.subset(&train_idx)?;
    let mut model = build_classifier(
        all.inputs.last_extent(),
        &a.classifier.hidden.0,
        images.class_count,
        ActivationKind::drop_act(a.p),
        true,
        &mut derived(a.seed, &[stream::INIT]),
    )?;
    let cfg = a.classifier.train_config(a.seed, a.p);
    let schedule: Vec<usize> = (0..=cfg.epochs).collect();
    let (series, _) = bn_block_shift_monitor(&mut model, &train_set, &cfg, &schedule)?;
    let mut table = Table::new(&["epoch", "var_train", "var_test", "ratio"]);
    for s in series {
        table.push(vec![s.epoch.into(), s.var_train.into(), s.var_test.into(), s.ratio.into()]);
    }
    Ok(Outcome {
        table,
        seed: Some(a.seed),
        passed: true,
    })
}

/// Parses `argv` (program name first) after config-file expansion.
pub fn parse_args<I, T>(argv: I) -> std::result::Result<Cli, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv = config::expand_argv(argv.into_iter().map(Into::into).collect()).map_err(CliError::Run)?;
    Cli::try_parse_from(argv).map_err(CliError::Usage)
}

#[derive(Debug)]
pub enum CliError {
    Usage(clap::Error),
    Run(Error),
}

/// Full command-line pipeline; returns the process exit status.
pub fn run_from<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let cli = match parse_args(argv) {
        Ok(cli) => cli,
        Err(CliError::Usage(e)) => {
            let _ = e.print();
            return e.exit_code().clamp(0, 2) as u8;
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            return exit_status(&e);
        }
    };
    match cli.command.run() {
        Ok(status) => {
            if status != 0 {
                eprintln!("verification failed: at least one row exceeded its tolerance");
            }
            status
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_status(&e)
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(run_from(std::env::args_os()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_property1_flags() {
        let cli = parse_args(["dropact", "verify-property1", "--hidden", "8", "--samples", "5", "--p", "0.95", "--seed", "42"])
            .unwrap();
        match cli.command {
            Command::VerifyProperty1(a) => {
                assert_eq!((a.hidden, a.samples, a.p, a.seed), (8, 5, 0.95, 42));
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn bad_retain_probability_names_flag_and_range() {
        let Err(CliError::Usage(e)) = parse_args(["dropact", "verify-property1", "--p", "1.5"]) else {
            panic!("expected a usage error");
        };
        assert_eq!(e.exit_code(), 2);
        let msg = e.to_string();
        assert!(msg.contains("--p") && msg.contains("(0,1]"), "{msg}");
    }

    #[test]
    fn later_flag_overrides_earlier() {
        let cli = parse_args(["dropact", "curve-shift-ratio", "--p-step", "0.1", "--p-step", "0.5"]).unwrap();
        match cli.command {
            Command::CurveShiftRatio(a) => assert_eq!(a.p_step, 0.5),
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn curve_has_grid_rows() {
        let out = curve_shift_ratio(&CurveArgs {
            p_step: 0.25,
            output: OutputArgs {
                format: Format::Csv,
                out: None,
            },
        })
        .unwrap();
        let ps: Vec<Cell> = out.table.rows.iter().map(|r| r[0].clone()).collect();
        assert_eq!(
            ps,
            vec![Cell::Float(0.0), Cell::Float(0.25), Cell::Float(0.5), Cell::Float(0.75), Cell::Float(1.0)]
        );
    }

    #[test]
    fn error_statuses() {
        assert_eq!(exit_status(&Error::Config("x".into())), 2);
        assert_eq!(
            exit_status(&Error::Length {
                what: "f".into(),
                expected: 1,
                found: 0
            }),
            3
        );
        assert_eq!(exit_status(&Error::Contract("x".into())), 1);
    }
}
