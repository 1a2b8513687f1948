//! Synthetic curve-fitting tasks, a synthetic classification set, and an
//! IDX (MNIST/EMNIST) reader.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionTarget {
    XSinX,
    PiecewiseConstant,
}

/// `(upper end, value)` of each piecewise segment, left to right; the last
/// segment is closed on the right.
const PIECEWISE_SEGMENTS: [(f64, f64); 4] = [(-5.0, -2.0), (0.0, 1.0), (5.0, 3.0), (f64::INFINITY, -1.0)];

impl RegressionTarget {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            RegressionTarget::XSinX => x * x.sin(),
            RegressionTarget::PiecewiseConstant => PIECEWISE_SEGMENTS
                .iter()
                .find(|(end, _)| x < *end)
                .map(|&(_, v)| v)
                .expect("last segment is unbounded"),
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            RegressionTarget::XSinX => 1.0,
            RegressionTarget::PiecewiseConstant => 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTask {
    pub target: RegressionTarget,
    pub lo: f64,
    pub hi: f64,
    pub n_train: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub grid_size: usize,
}

impl RegressionTask {
    /// Domain `[-10, 10]`, 20 noisy samples, 1001-point evaluation grid.
    pub fn new(target: RegressionTarget, seed: u64) -> Self {
        RegressionTask {
            target,
            lo: -10.0,
            hi: 10.0,
            n_train: 20,
            noise_sigma: target.default_noise(),
            seed,
            grid_size: 1001,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::param("lo,hi", format!("need lo < hi, got [{}, {}]", self.lo, self.hi)));
        }
        if self.n_train < 2 {
            return Err(Error::param("n_train", "need at least 2 samples"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::param("noise_sigma", "must be non-negative"));
        }
        if self.grid_size < 2 {
            return Err(Error::param("grid_size", "need at least 2 points"));
        }
        Ok(())
    }
}

/// Noisy training pairs and the noise-free target on an equispaced grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionData {
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
    pub grid_x: Vec<f64>,
    pub grid_f: Vec<f64>,
}

impl RegressionData {
    pub fn train_inputs(&self) -> Tensor {
        column(&self.train_x)
    }

    pub fn train_targets(&self) -> Tensor {
        column(&self.train_y)
    }

    pub fn grid_inputs(&self) -> Tensor {
        column(&self.grid_x)
    }

    pub fn grid_targets(&self) -> Tensor {
        column(&self.grid_f)
    }
}

fn column(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len(), 1], v.to_vec()).expect("finite column")
}

pub fn gen_regression(task: &RegressionTask) -> Result<RegressionData> {
    task.validate()?;
    let mut rng = derived(task.seed, &[stream::DATA]);
    let train_x: Vec<f64> = (0..task.n_train).map(|_| rng.random_range(task.lo..task.hi)).collect();
    let train_y = train_x
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            task.target.eval(x) + task.noise_sigma * z
        })
        .collect();
    let steps = (task.grid_size - 1) as f64;
    let grid_x: Vec<f64> = (0..task.grid_size)
        .map(|i| task.lo + (task.hi - task.lo) * i as f64 / steps)
        .collect();
    let grid_f = grid_x.iter().map(|&x| task.target.eval(x)).collect();
    Ok(RegressionData {
        train_x,
        train_y,
        grid_x,
        grid_f,
    })
}

/// Images `[n×rows×cols]` scaled to `[0, 1]` with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Shape {
                op: "labeled_images",
                msg: format!("{} images but {} labels", images.rows(), labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::param(
                "labels",
                format!("label {bad} out of range for {class_count} classes"),
            ));
        }
        Ok(LabeledImages {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flattens each image to one row: `[n × rows·cols]`.
    pub fn flattened(&self) -> Tensor {
        let n = self.len();
        self.images
            .reshape(vec![n, self.images.len() / n])
            .expect("same element count")
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let per = self.images.len() / self.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Self::new(
            Tensor::new(shape, data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxCursor<'a> {
    what: String,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxCursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_be_bytes(s.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Length {
                what: self.what.clone(),
                expected: end as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::Format {
                what: self.what.clone(),
                expected: format!("magic 0x{expected:08x}"),
                found: format!("0x{found:08x}"),
            });
        }
        Ok(())
    }

    /// Strict mode: nothing may follow the declared payload.
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Length {
                what: self.what.clone(),
                expected: self.pos as u64,
                found: self.bytes.len() as u64,
            });
        }
        Ok(())
    }
}

/// Parses an IDX image file: magic `0x00000803`, big-endian `u32` count,
/// rows and cols, then one unsigned byte per pixel scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8], what: &str) -> Result<Tensor> {
    let mut cur = IdxCursor {
        what: what.to_string(),
        bytes,
        pos: 0,
    };
    cur.magic(IDX_IMAGES_MAGIC)?;
    let n = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let pixels = cur.take(n * rows * cols)?;
    cur.finish()?;
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, rows, cols], data)
}

/// Parses an IDX label file: magic `0x00000801`, big-endian `u32` count, one byte per label.
pub fn parse_idx_labels(bytes: &[u8], what: &str) -> Result<Vec<usize>> {
    let mut cur = IdxCursor {
        what: what.to_string(),
        bytes,
        pos: 0,
    };
    cur.magic(IDX_LABELS_MAGIC)?;
    let n = cur.u32()? as usize;
    let labels = cur.take(n)?.iter().map(|&b| usize::from(b)).collect();
    cur.finish()?;
    Ok(labels)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_images(&bytes, &path.display().to_string())
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_labels(&bytes, &path.display().to_string())
}

/// Loads an image/label pair; the class count is `max label + 1`.
pub fn load_idx_pair(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledImages> {
    let images = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledImages::new(images, labels, classes)
}

/// Seeded shuffle of `0..n`, then the first `round(n·val_fraction)` indices
/// form the validation part. Both parts keep shuffled order.
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::param("val_fraction", format!("{val_fraction} is outside (0, 1)")));
    }
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::param(
            "val_fraction",
            format!("splitting {n} items at {val_fraction} leaves an empty side"),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived(seed, &[stream::SPLIT]));
    let train = idx.split_off(n_val);
    Ok((train, idx))
}

/// Gaussian-mixture classification data: class centres drawn from
/// `N(0, separation²·I)`, samples `centre + N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobsConfig {
    pub samples: usize,
    pub input_width: usize,
    pub classes: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            samples: 600,
            input_width: 16,
            classes: 4,
            separation: 0.6,
            seed: 0,
        }
    }
}

pub fn gen_blobs(cfg: &BlobsConfig) -> Result<LabeledImages> {
    if cfg.samples == 0 || cfg.input_width == 0 || cfg.classes < 2 {
        return Err(Error::param(
            "blobs",
            "need samples ≥ 1, input_width ≥ 1 and classes ≥ 2",
        ));
    }
    let mut rng = derived(cfg.seed, &[stream::DATA]);
    let spread = Normal::new(0.0, cfg.separation.abs()).map_err(|e| Error::param("separation", e.to_string()))?;
    let centres: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.input_width).map(|_| spread.sample(&mut rng)).collect())
        .collect();
    let mut data = Vec::with_capacity(cfg.samples * cfg.input_width);
    let mut labels = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let c = i % cfg.classes;
        labels.push(c);
        for &m in &centres[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + z);
        }
    }
    LabeledImages::new(
        Tensor::new(vec![cfg.samples, cfg.input_width], data)?,
        labels,
        cfg.classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xsinx_noise_free() {
        let mut task = RegressionTask::new(RegressionTarget::XSinX, 3);
        task.noise_sigma = 0.0;
        let d = gen_regression(&task).unwrap();
        for (x, y) in d.train_x.iter().zip(&d.train_y) {
            assert_eq!(*y, x * x.sin());
            assert!((-10.0..10.0).contains(x));
        }
        assert_eq!(RegressionTarget::XSinX.eval(0.0), 0.0);
        assert_eq!(d.grid_x.len(), 1001);
        assert_eq!(d.grid_x[0], -10.0);
        assert_eq!(d.grid_x[1000], 10.0);
    }

    #[test]
    fn piecewise_table() {
        let f = |x| RegressionTarget::PiecewiseConstant.eval(x);
        assert_eq!((f(-9.0), f(-1.0), f(1.0), f(9.0)), (-2.0, 1.0, 3.0, -1.0));
        assert_eq!((f(-5.0), f(0.0), f(5.0), f(10.0)), (1.0, 3.0, -1.0, -1.0));
    }

    #[test]
    fn regression_noise_is_reproducible() {
        let task = RegressionTask::new(RegressionTarget::PiecewiseConstant, 17);
        assert_eq!(gen_regression(&task).unwrap(), gen_regression(&task).unwrap());
        let other = RegressionTask { seed: 18, ..task };
        assert_ne!(gen_regression(&other).unwrap().train_y, gen_regression(&task).unwrap().train_y);
    }

    #[test]
    fn invalid_task_rejected() {
        let mut task = RegressionTask::new(RegressionTarget::XSinX, 0);
        task.lo = 1.0;
        task.hi = 1.0;
        assert!(gen_regression(&task).is_err());
    }

    fn image_file(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [n, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(pixels);
        b
    }

    #[test]
    fn idx_pixels_scale_by_255() {
        let t = parse_idx_images(&image_file(1, 2, 2, &[0, 128, 255, 64]), "t").unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
        assert!((t.data()[1] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn idx_wrong_magic() {
        let mut b = image_file(1, 1, 1, &[0]);
        b[3] = 0x02;
        let err = parse_idx_images(&b, "t").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("0x00000803") && err.to_string().contains("0x00000802"));
    }

    #[test]
    fn idx_truncated_and_trailing() {
        let b = image_file(2, 2, 2, &[1; 7]);
        assert!(matches!(parse_idx_images(&b, "t"), Err(Error::Length { expected: 24, found: 23, .. })));
        let b = image_file(1, 1, 1, &[1, 2]);
        assert!(matches!(parse_idx_images(&b, "t"), Err(Error::Length { .. })));
        let mut l = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        l.extend(3u32.to_be_bytes());
        l.extend([1, 2]);
        assert!(matches!(parse_idx_labels(&l, "l"), Err(Error::Length { .. })));
    }

    #[test]
    fn split_sizes_and_partition() {
        let (train, val) = train_val_split(100, 0.1, 5).unwrap();
        assert_eq!((train.len(), val.len()), (90, 10));
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(train_val_split(100, 0.1, 5).unwrap(), (train, val));
    }

    #[test]
    fn split_rejects_empty_sides() {
        assert!(train_val_split(5, 0.05, 0).is_err());
        assert!(train_val_split(5, 0.0, 0).is_err());
        assert!(train_val_split(2, 0.9, 0).is_err());
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let cfg = BlobsConfig { samples: 40, ..Default::default() };
        let a = gen_blobs(&cfg).unwrap();
        assert_eq!(a, gen_blobs(&cfg).unwrap());
        assert_eq!(a.labels.iter().filter(|&&l| l == 3).count(), 10);
        assert_eq!(a.flattened().shape(), &[40, 16]);
    }
}
