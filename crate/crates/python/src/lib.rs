//! Python bindings. Matrices cross the boundary as lists of rows.

use dropact_core::activations::{self, RRELU_LOWER, RRELU_UPPER};
use dropact_core::datasets;
use dropact_core::networks::{build_classifier, build_one_hidden};
use dropact_core::penalty;
use dropact_core::rng::generator;
use dropact_core::trainer::{self, Dataset};
use dropact_core::variance_shift;
use dropact_core::{ActivationKind, BoxConfig, DropMask, Error, Mode, OneHiddenNet, SampleSet, Tensor, TrainConfig};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::Diverged { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for dropact_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).py()
}

type Rows = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn activation_kind(name: &str, p: f64) -> PyResult<ActivationKind> {
    let kind = match name {
        "relu" => ActivationKind::Relu,
        "dropact" => ActivationKind::drop_act(p),
        "rrelu" => ActivationKind::rrelu(RRELU_LOWER, RRELU_UPPER),
        other => return Err(PyValueError::new_err(format!("unknown activation {other:?}; use relu, dropact or rrelu"))),
    };
    kind.validate().py()?;
    Ok(kind)
}

#[pyfunction]
fn relu(x: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(activations::relu(&Tensor::vector(x).py()?).into_data())
}

/// Training-time rule: `x` where kept or non-negative, otherwise 0.
#[pyfunction]
fn drop_act_train(x: Vec<f64>, keep: Vec<bool>) -> PyResult<Vec<f64>> {
    let x = Tensor::vector(x).py()?;
    Ok(activations::drop_act_train(&x, &DropMask::new(keep)).py()?.into_data())
}

#[pyfunction]
fn drop_act_test(x: Vec<f64>, p: f64) -> PyResult<Vec<f64>> {
    Ok(activations::drop_act_test(&Tensor::vector(x).py()?, p).py()?.into_data())
}

#[pyfunction]
#[pyo3(signature = (x, a = RRELU_LOWER, b = RRELU_UPPER))]
fn rrelu_test(x: Vec<f64>, a: f64, b: f64) -> PyResult<Vec<f64>> {
    Ok(activations::rrelu_test(&Tensor::vector(x).py()?, a, b).py()?.into_data())
}

/// Each flag is `True` (keep the ReLU) with probability `p`.
#[pyfunction]
fn sample_mask(width: usize, p: f64, seed: u64) -> PyResult<Vec<bool>> {
    Ok(activations::sample_mask(width, p, &mut generator(seed)).py()?.keep().to_vec())
}

#[pyfunction]
fn analytic_shift_ratio(p: f64) -> PyResult<f64> {
    variance_shift::analytic_shift_ratio(p).py()
}

#[pyfunction]
fn analytic_var_train(w: Vec<f64>, p: f64) -> f64 {
    variance_shift::analytic_var_train(&w, p)
}

#[pyfunction]
fn analytic_var_test(w: Vec<f64>, p: f64) -> f64 {
    variance_shift::analytic_var_test(&w, p)
}

/// Monte Carlo of the dropout-free BN block; returns the full report as a dict.
#[pyfunction]
#[pyo3(signature = (weights, p = 0.95, samples = 100_000, seed = 0))]
fn simulate_box<'py>(py: Python<'py>, weights: Vec<f64>, p: f64, samples: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = variance_shift::simulate_box(&BoxConfig {
        weights,
        p,
        sample_count: samples,
        seed,
    })
    .py()?;
    let d = PyDict::new(py);
    d.set_item("p", r.p)?;
    d.set_item("width", r.width)?;
    d.set_item("sample_count", r.sample_count)?;
    d.set_item("analytic_mean", r.analytic_mean)?;
    d.set_item("analytic_var_train", r.analytic_var_train)?;
    d.set_item("analytic_var_test", r.analytic_var_test)?;
    d.set_item("analytic_ratio", r.analytic_ratio)?;
    d.set_item("empirical_mean_train", r.empirical_mean_train)?;
    d.set_item("empirical_mean_test", r.empirical_mean_test)?;
    d.set_item("stderr_mean_train", r.stderr_mean_train)?;
    d.set_item("stderr_mean_test", r.stderr_mean_test)?;
    d.set_item("empirical_var_train", r.empirical_var_train)?;
    d.set_item("empirical_var_test", r.empirical_var_test)?;
    d.set_item("empirical_ratio", r.empirical_ratio)?;
    Ok(d)
}

/// Bias-free one-hidden-layer network `W2·σ(W1·x)`.
#[pyclass(name = "OneHiddenNet", module = "dropact", skip_from_py_object)]
#[derive(Clone)]
struct PyOneHiddenNet {
    inner: OneHiddenNet,
}

fn samples(inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> PyResult<SampleSet> {
    SampleSet::new(matrix(inputs)?, matrix(targets)?).py()
}

#[pymethods]
impl PyOneHiddenNet {
    #[new]
    fn new(w1: Vec<Vec<f64>>, w2: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(PyOneHiddenNet {
            inner: OneHiddenNet::new(matrix(&w1)?, matrix(&w2)?).py()?,
        })
    }

    /// A Gaussian instance: `(net, inputs, targets)`.
    #[staticmethod]
    fn random(k: usize, d_in: usize, d_out: usize, n: usize, seed: u64) -> PyResult<(Self, Rows, Rows)> {
        let (net, data) = penalty::random_instance(k, d_in, d_out, n, &mut generator(seed)).py()?;
        Ok((PyOneHiddenNet { inner: net }, rows(data.inputs()), rows(data.targets())))
    }

    #[getter]
    fn w1(&self) -> Vec<Vec<f64>> {
        rows(self.inner.w1())
    }

    #[getter]
    fn w2(&self) -> Vec<Vec<f64>> {
        rows(self.inner.w2())
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.hidden()
    }

    /// Test-time output with the averaged activation.
    fn predict(&self, x: Vec<f64>, p: f64) -> PyResult<Vec<f64>> {
        self.inner.predict(&x, p).py()
    }

    fn predict_masked(&self, x: Vec<f64>, keep: Vec<bool>) -> PyResult<Vec<f64>> {
        self.inner.predict_masked(&x, &keep).py()
    }

    fn penalty_term(&self, x: Vec<f64>, p: f64) -> PyResult<f64> {
        penalty::penalty_term(&self.inner, &x, p).py()
    }

    fn closed_form_loss(&self, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, p: f64) -> PyResult<f64> {
        penalty::closed_form_loss(&self.inner, &samples(&inputs, &targets)?, p).py()
    }

    /// Expectation over all `2^k` masks.
    fn enumerated_expected_loss(&self, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, p: f64) -> PyResult<f64> {
        penalty::enumerated_expected_loss(&self.inner, &samples(&inputs, &targets)?, p).py()
    }

    /// Test-time loss plus the per-unit mask variance; equals the enumeration.
    fn exact_expected_loss(&self, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, p: f64) -> PyResult<f64> {
        penalty::exact_expected_loss(&self.inner, &samples(&inputs, &targets)?, p).py()
    }

    fn __repr__(&self) -> String {
        format!(
            "OneHiddenNet(d_in={}, k={}, d_out={})",
            self.inner.input_width(),
            self.inner.hidden(),
            self.inner.output_width()
        )
    }
}

#[pyclass(name = "Mlp", module = "dropact", skip_from_py_object)]
#[derive(Clone)]
struct PyMlp {
    inner: dropact_core::Mlp,
}

#[pymethods]
impl PyMlp {
    /// `Affine(+BN) → activation` per hidden width, then a logit layer.
    #[staticmethod]
    #[pyo3(signature = (input_width, hidden, classes, activation = "dropact", p = 0.95, bn = false, seed = 0))]
    fn classifier(
        input_width: usize,
        hidden: Vec<usize>,
        classes: usize,
        activation: &str,
        p: f64,
        bn: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let kind = activation_kind(activation, p)?;
        let inner = build_classifier(input_width, &hidden, classes, kind, bn, &mut generator(seed)).py()?;
        Ok(PyMlp { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (k, d_in, d_out, activation = "relu", p = 0.95, seed = 0))]
    fn one_hidden(k: usize, d_in: usize, d_out: usize, activation: &str, p: f64, seed: u64) -> PyResult<Self> {
        let kind = activation_kind(activation, p)?;
        let inner = build_one_hidden(k, d_in, d_out, kind, &mut generator(seed)).py()?;
        Ok(PyMlp { inner })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Test-mode output; leaves the model untouched.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.predict(&matrix(&x)?).py()?))
    }

    /// Training-mode output with masks drawn from `seed`; updates BN running statistics.
    fn forward(&mut self, x: Vec<Vec<f64>>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        self.inner.set_mode(Mode::Train);
        Ok(rows(&self.inner.forward(&matrix(&x)?, &mut generator(seed)).py()?))
    }

    /// SGD with momentum. Pass `labels` for cross-entropy or `targets` for MSE.
    /// Returns the per-epoch training loss.
    #[pyo3(signature = (inputs, labels = None, targets = None, lr = 0.01, momentum = 0.9, epochs = 10, batch_size = None, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        inputs: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
        targets: Option<Vec<Vec<f64>>>,
        lr: f64,
        momentum: f64,
        epochs: usize,
        batch_size: Option<usize>,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let x = matrix(&inputs)?;
        let data = match (labels, targets) {
            (Some(l), None) => Dataset::classification(x, l),
            (None, Some(t)) => Dataset::regression(x, matrix(&t)?),
            _ => return Err(PyValueError::new_err("pass exactly one of labels= or targets=")),
        }
        .py()?;
        let cfg = TrainConfig {
            learning_rate: lr,
            momentum,
            epochs,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        Ok(trainer::train(&mut self.inner, &data, None, &cfg).py()?.train_loss)
    }

    fn __repr__(&self) -> String {
        format!(
            "Mlp(input_width={}, output_width={}, parameters={})",
            self.inner.input_width(),
            self.inner.output_width(),
            self.inner.parameter_count()
        )
    }
}

/// `(shape, pixels scaled to [0, 1])`.
#[pyfunction]
fn load_idx_images(path: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let t = datasets::load_idx_images(path).py()?;
    Ok((t.shape().to_vec(), t.into_data()))
}

#[pyfunction]
fn load_idx_labels(path: &str) -> PyResult<Vec<usize>> {
    datasets::load_idx_labels(path).py()
}

#[pymodule]
fn dropact(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("RRELU_LOWER", RRELU_LOWER)?;
    m.add("RRELU_UPPER", RRELU_UPPER)?;
    m.add_function(wrap_pyfunction!(relu, m)?)?;
    m.add_function(wrap_pyfunction!(drop_act_train, m)?)?;
    m.add_function(wrap_pyfunction!(drop_act_test, m)?)?;
    m.add_function(wrap_pyfunction!(rrelu_test, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_shift_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_var_train, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_var_test, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_box, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx_images, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx_labels, m)?)?;
    m.add_class::<PyOneHiddenNet>()?;
    m.add_class::<PyMlp>()?;
    Ok(())
}
