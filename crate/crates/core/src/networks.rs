//! Layer-spec driven feed-forward networks with a train/test mode switch.

use std::io::{Read, Write};

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activations::{sample_realization, ActivationKind, MaskSharing, Mode, Realization};
use crate::error::{Error, Result};
use crate::penalty::OneHiddenNet;
use crate::tape::{column_moments, BnStats, Tape, Var};
use crate::tensor::Tensor;

pub const BN_UPDATE_RATE: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Hidden widths of the curve-fitting network.
pub const REGRESSION_WIDTHS: [usize; 3] = [1000, 800, 200];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine { out: usize, bias: bool },
    Activation { activation: ActivationKind },
    BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub scale: Tensor,
    pub offset: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub update_rate: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn new(width: usize) -> Self {
        BatchNormLayer {
            scale: Tensor::full(&[width], 1.0),
            offset: Tensor::zeros(&[width]),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            update_rate: BN_UPDATE_RATE,
            eps: BN_EPSILON,
        }
    }

    pub fn width(&self) -> usize {
        self.scale.len()
    }

    fn running(&self) -> BnStats {
        BnStats::Fixed {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
        }
    }

    /// Folds one batch's statistics into the running estimates; the running
    /// variance uses the unbiased batch variance.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64], batch_size: usize) {
        let correction = if batch_size > 1 {
            batch_size as f64 / (batch_size - 1) as f64
        } else {
            1.0
        };
        let r = self.update_rate;
        for (rm, &m) in self.running_mean.iter_mut().zip(batch_mean) {
            *rm = (1.0 - r) * *rm + r * m;
        }
        for (rv, &v) in self.running_var.iter_mut().zip(batch_var) {
            *rv = (1.0 - r) * *rv + r * v * correction;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `y = x·Wᵀ + b` with `weight: [out×in]`.
    Affine { weight: Tensor, bias: Option<Tensor> },
    Activation(ActivationKind),
    BatchNorm(BatchNormLayer),
}

/// Where stochastic activations get their randomness during a recorded forward.
pub enum ActivationSource<'a> {
    Sample(&'a mut dyn RngCore),
    /// Reuse realizations from an earlier pass, one entry per activation layer.
    Replay(&'a [Option<Realization>]),
}

/// How to evaluate a forward pass independently of the model's own mode.
pub struct ForwardOptions<'a> {
    pub activation_mode: Mode,
    /// Normalize with batch statistics (gradients flow through them) rather
    /// than running statistics.
    pub batch_stats: bool,
    pub source: ActivationSource<'a>,
    /// Stop after this layer index (inclusive).
    pub stop_after: Option<usize>,
}

/// Result of recording a forward pass on a tape.
#[derive(Debug)]
pub struct Recorded {
    pub output: Var,
    /// Leaves for [`Mlp::parameters`], in the same order.
    pub params: Vec<Var>,
    /// One entry per activation layer reached.
    pub realizations: Vec<Option<Realization>>,
    /// `(layer index, batch mean, batch variance, batch size)` for every batch-norm evaluated with batch statistics.
    pub bn_batch_stats: Vec<(usize, Vec<f64>, Vec<f64>, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    input_width: usize,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    mode: Mode,
    mask_sharing: MaskSharing,
}

fn he_normal(out: usize, fan_in: usize, rng: &mut dyn RngCore) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..out * fan_in)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::from_parts(vec![out, fan_in], data)
}

impl Mlp {
    /// Builds a model in `Train` mode. Affine weights are drawn from
    /// `N(0, 2/fan_in)`, biases start at zero.
    pub fn new(input_width: usize, specs: Vec<LayerSpec>, rng: &mut dyn RngCore) -> Result<Self> {
        if input_width == 0 {
            return Err(Error::param("input_width", "must be positive"));
        }
        let mut width = input_width;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in &specs {
            layers.push(match *spec {
                LayerSpec::Affine { out, bias } => {
                    if out == 0 {
                        return Err(Error::param("out", "affine width must be positive"));
                    }
                    let weight = he_normal(out, width, rng);
                    width = out;
                    Layer::Affine {
                        weight,
                        bias: bias.then(|| Tensor::zeros(&[out])),
                    }
                }
                LayerSpec::Activation { activation } => {
                    activation.validate()?;
                    Layer::Activation(activation)
                }
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNormLayer::new(width)),
            });
        }
        Ok(Mlp {
            input_width,
            specs,
            layers,
            mode: Mode::Train,
            mask_sharing: MaskSharing::PerSample,
        })
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Affine { weight, .. } => Some(weight.shape()[0]),
                _ => None,
            })
            .unwrap_or(self.input_width)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switches every activation and batch-norm layer at once.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn mask_sharing(&self) -> MaskSharing {
        self.mask_sharing
    }

    pub fn set_mask_sharing(&mut self, sharing: MaskSharing) {
        self.mask_sharing = sharing;
    }

    /// Replaces the kind of every activation layer (keeping layer positions).
    pub fn set_activation(&mut self, kind: ActivationKind) -> Result<()> {
        kind.validate()?;
        for (layer, spec) in self.layers.iter_mut().zip(self.specs.iter_mut()) {
            if let Layer::Activation(k) = layer {
                *k = kind;
                *spec = LayerSpec::Activation { activation: kind };
            }
        }
        Ok(())
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Affine { weight, bias } => {
                    out.push(weight);
                    out.extend(bias.as_ref());
                }
                Layer::BatchNorm(bn) => {
                    out.push(&bn.scale);
                    out.push(&bn.offset);
                }
                Layer::Activation(_) => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Affine { weight, bias } => {
                    out.push(weight);
                    out.extend(bias.as_mut());
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.scale);
                    out.push(&mut bn.offset);
                }
                Layer::Activation(_) => {}
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Records a forward pass following the model's current mode.
    pub fn record(&self, tape: &mut Tape, input: Var, source: ActivationSource<'_>) -> Result<Recorded> {
        self.record_with(
            tape,
            input,
            ForwardOptions {
                activation_mode: self.mode,
                batch_stats: self.mode == Mode::Train,
                source,
                stop_after: None,
            },
        )
    }

    pub fn record_with(&self, tape: &mut Tape, input: Var, opts: ForwardOptions<'_>) -> Result<Recorded> {
        let ForwardOptions {
            activation_mode,
            batch_stats,
            mut source,
            stop_after,
        } = opts;
        let x = tape.value(input);
        if x.rank() != 2 || x.last_extent() != self.input_width {
            return Err(Error::Dimension {
                op: "mlp_forward",
                left: vec![x.rows(), self.input_width],
                right: x.shape().to_vec(),
            });
        }
        let mut h = input;
        let mut params = Vec::new();
        let mut realizations = Vec::new();
        let mut bn_batch_stats = Vec::new();
        let last = stop_after.unwrap_or(usize::MAX);
        for (idx, layer) in self.layers.iter().enumerate().take_while(|(i, _)| *i <= last) {
            h = match layer {
                Layer::Affine { weight, bias } => {
                    let w = tape.leaf(weight.clone());
                    params.push(w);
                    let wt = tape.transpose(w)?;
                    let mut out = tape.matmul(h, wt)?;
                    if let Some(b) = bias {
                        let b = tape.leaf(b.clone());
                        params.push(b);
                        out = tape.add_bias(out, b)?;
                    }
                    out
                }
                Layer::Activation(kind) => {
                    let kind = kind.in_mode(activation_mode);
                    let realization = if kind.is_stochastic() {
                        match &mut source {
                            ActivationSource::Sample(rng) => {
                                sample_realization(kind, tape.value(h).shape(), self.mask_sharing, &mut **rng)?
                            }
                            ActivationSource::Replay(stored) => {
                                stored.get(realizations.len()).cloned().flatten()
                            }
                        }
                    } else {
                        None
                    };
                    realizations.push(realization.clone());
                    tape.activation(h, kind, realization)?
                }
                Layer::BatchNorm(bn) => {
                    let s = tape.leaf(bn.scale.clone());
                    let o = tape.leaf(bn.offset.clone());
                    params.push(s);
                    params.push(o);
                    let stats = if batch_stats {
                        let value = tape.value(h);
                        let (mean, var) = column_moments(value);
                        bn_batch_stats.push((idx, mean, var, value.rows()));
                        BnStats::Batch
                    } else {
                        bn.running()
                    };
                    tape.batch_norm(h, s, o, bn.eps, stats)?
                }
            };
        }
        Ok(Recorded {
            output: h,
            params,
            realizations,
            bn_batch_stats,
        })
    }

    pub fn apply_bn_updates(&mut self, updates: &[(usize, Vec<f64>, Vec<f64>, usize)]) {
        for (idx, mean, var, n) in updates {
            if let Layer::BatchNorm(bn) = &mut self.layers[*idx] {
                bn.update_running(mean, var, *n);
            }
        }
    }

    /// Forward in the current mode. In `Train` mode this samples activation
    /// randomness from `rng` and updates batch-norm running statistics.
    pub fn forward(&mut self, x: &Tensor, rng: &mut dyn RngCore) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let rec = self.record(&mut tape, input, ActivationSource::Sample(rng))?;
        if self.mode == Mode::Train {
            self.apply_bn_updates(&rec.bn_batch_stats);
        }
        Ok(tape.value(rec.output).clone())
    }

    /// Deterministic inference: test-time activations and running statistics.
    /// Never mutates the model.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let rec = self.record_with(
            &mut tape,
            input,
            ForwardOptions {
                activation_mode: Mode::Test,
                batch_stats: false,
                source: ActivationSource::Replay(&[]),
                stop_after: None,
            },
        )?;
        Ok(tape.value(rec.output).clone())
    }

    /// Sets every batch-norm's running statistics to the (biased) statistics
    /// of `x` as it reaches that layer, propagating with test-time activations.
    pub fn sync_bn_stats(&mut self, x: &Tensor) -> Result<()> {
        let mut h = x.clone();
        for idx in 0..self.layers.len() {
            if let Layer::BatchNorm(bn) = &mut self.layers[idx] {
                let (mean, var) = column_moments(&h);
                bn.running_mean = mean;
                bn.running_var = var;
            }
            let mut tape = Tape::new();
            let input = tape.leaf(h);
            let single = Mlp {
                input_width: tape.value(input).last_extent(),
                specs: vec![self.specs[idx]],
                layers: vec![self.layers[idx].clone()],
                mode: Mode::Test,
                mask_sharing: self.mask_sharing,
            };
            let rec = single.record(&mut tape, input, ActivationSource::Replay(&[]))?;
            h = tape.value(rec.output).clone();
        }
        Ok(())
    }

    /// Bias-free `Affine → Activation → Affine` models convert to the
    /// two-matrix form used by the penalty analysis.
    pub fn to_one_hidden(&self) -> Result<OneHiddenNet> {
        match self.layers.as_slice() {
            [Layer::Affine { weight: w1, bias: None }, Layer::Activation(_), Layer::Affine { weight: w2, bias: None }] => {
                OneHiddenNet::new(w1.clone(), w2.clone())
            }
            _ => Err(Error::Config(
                "model is not a bias-free one-hidden-layer network".into(),
            )),
        }
    }

    pub fn from_one_hidden(net: &OneHiddenNet, activation: ActivationKind) -> Result<Self> {
        activation.validate()?;
        let k = net.hidden();
        Ok(Mlp {
            input_width: net.input_width(),
            specs: vec![
                LayerSpec::Affine { out: k, bias: false },
                LayerSpec::Activation { activation },
                LayerSpec::Affine {
                    out: net.output_width(),
                    bias: false,
                },
            ],
            layers: vec![
                Layer::Affine {
                    weight: net.w1().clone(),
                    bias: None,
                },
                Layer::Activation(activation),
                Layer::Affine {
                    weight: net.w2().clone(),
                    bias: None,
                },
            ],
            mode: Mode::Train,
            mask_sharing: MaskSharing::PerSample,
        })
    }

    fn state_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Affine { weight, bias } => {
                    out.push(weight.clone());
                    out.extend(bias.clone());
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.scale.clone());
                    out.push(bn.offset.clone());
                    out.push(Tensor::from_parts(vec![bn.width()], bn.running_mean.clone()));
                    out.push(Tensor::from_parts(vec![bn.width()], bn.running_var.clone()));
                }
                Layer::Activation(_) => {}
            }
        }
        out
    }

    /// Writes parameters and batch-norm running statistics in layer order.
    pub fn save_params(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_tensors(w, &self.state_tensors())
    }

    /// Loads tensors written by [`Mlp::save_params`] for the same architecture.
    pub fn load_params(&mut self, r: &mut impl Read) -> Result<()> {
        let loaded = read_tensors(r)?;
        let expected = self.state_tensors();
        if loaded.len() != expected.len() {
            return Err(Error::Format {
                what: "parameter file".into(),
                expected: format!("{} tensors", expected.len()),
                found: format!("{} tensors", loaded.len()),
            });
        }
        for (l, e) in loaded.iter().zip(&expected) {
            if l.shape() != e.shape() {
                return Err(Error::Format {
                    what: "parameter file".into(),
                    expected: format!("shape {:?}", e.shape()),
                    found: format!("shape {:?}", l.shape()),
                });
            }
        }
        let mut it = loaded.into_iter();
        for layer in &mut self.layers {
            match layer {
                Layer::Affine { weight, bias } => {
                    *weight = it.next().expect("count checked");
                    if let Some(b) = bias {
                        *b = it.next().expect("count checked");
                    }
                }
                Layer::BatchNorm(bn) => {
                    bn.scale = it.next().expect("count checked");
                    bn.offset = it.next().expect("count checked");
                    bn.running_mean = it.next().expect("count checked").into_data();
                    bn.running_var = it.next().expect("count checked").into_data();
                }
                Layer::Activation(_) => {}
            }
        }
        Ok(())
    }
}

pub const PARAMS_MAGIC: &[u8; 4] = b"DACT";
pub const PARAMS_VERSION: u32 = 1;

/// `"DACT"`, version, then per tensor: rank, extents, little-endian `f64` payload.
/// All integers are little-endian `u32`.
pub fn write_tensors(w: &mut impl Write, tensors: &[Tensor]) -> std::io::Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors(r: &mut impl Read) -> Result<Vec<Tensor>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<parameter stream>", e))?;
    let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != PARAMS_MAGIC {
        return Err(Error::Format {
            what: "parameter file".into(),
            expected: "magic \"DACT\"".into(),
            found: format!("{magic:?}"),
        });
    }
    let version = cur.u32()?;
    if version != PARAMS_VERSION {
        return Err(Error::Format {
            what: "parameter file".into(),
            expected: format!("version {PARAMS_VERSION}"),
            found: format!("version {version}"),
        });
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = cur
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(Tensor::new(shape, data)?);
    }
    Ok(out)
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Length {
                what: "parameter file".into(),
                expected: end as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn hidden_stack(widths: &[usize], activation: ActivationKind, with_bn: bool) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for &w in widths {
        specs.push(LayerSpec::Affine { out: w, bias: !with_bn });
        if with_bn {
            specs.push(LayerSpec::BatchNorm);
        }
        specs.push(LayerSpec::Activation { activation });
    }
    specs
}

/// `1 → 1000 → 800 → 200 → 1` with biases and `activation` after each hidden affine.
pub fn build_regression_net(activation: ActivationKind, rng: &mut dyn RngCore) -> Result<Mlp> {
    build_regression_net_with_widths(&REGRESSION_WIDTHS, activation, rng)
}

pub fn build_regression_net_with_widths(
    widths: &[usize],
    activation: ActivationKind,
    rng: &mut dyn RngCore,
) -> Result<Mlp> {
    let mut specs = hidden_stack(widths, activation, false);
    specs.push(LayerSpec::Affine { out: 1, bias: true });
    Mlp::new(1, specs, rng)
}

/// Bias-free `d_in → k → d_out` network.
pub fn build_one_hidden(
    k: usize,
    d_in: usize,
    d_out: usize,
    activation: ActivationKind,
    rng: &mut dyn RngCore,
) -> Result<Mlp> {
    if k == 0 || d_out == 0 {
        return Err(Error::param("k,d_out", "dimensions must be positive"));
    }
    Mlp::new(
        d_in,
        vec![
            LayerSpec::Affine { out: k, bias: false },
            LayerSpec::Activation { activation },
            LayerSpec::Affine { out: d_out, bias: false },
        ],
        rng,
    )
}

/// `Affine(+BatchNorm) → activation` per hidden width, then a linear layer of
/// `classes` logits. With batch norm the hidden affines drop their bias.
pub fn build_classifier(
    input_width: usize,
    hidden_widths: &[usize],
    classes: usize,
    activation: ActivationKind,
    with_bn: bool,
    rng: &mut dyn RngCore,
) -> Result<Mlp> {
    if hidden_widths.is_empty() {
        return Err(Error::param("hidden_widths", "need at least one hidden layer"));
    }
    if classes < 2 {
        return Err(Error::param("classes", "need at least two classes"));
    }
    let mut specs = hidden_stack(hidden_widths, activation, with_bn);
    specs.push(LayerSpec::Affine { out: classes, bias: true });
    Mlp::new(input_width, specs, rng)
}
