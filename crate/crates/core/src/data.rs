//! Datasets: MNIST IDX files, labelled CSV tables, synthetic Gaussian clouds,
//! plus a binary cache and seeded mini-batch iteration.

use std::path::Path;

use crate::blob::{Blob, Block};
use crate::error::{Result, SnnError};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Affine standardization `(x - mean) / std` applied to every feature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    classes: usize,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if samples.shape().len() != 2 {
            return Err(SnnError::Shape(format!(
                "samples must be [n, features], got {:?}",
                samples.shape()
            )));
        }
        if samples.shape()[0] != labels.len() {
            return Err(SnnError::Shape(format!(
                "{} samples but {} labels",
                samples.shape()[0],
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(SnnError::Contract(format!(
                "label {y} of sample {i} is outside [0, {classes})"
            )));
        }
        Ok(Dataset {
            samples,
            labels,
            classes,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn normalization(&self) -> Option<Normalization> {
        self.normalization
    }

    pub fn normalize(&mut self, norm: Normalization) -> Result<()> {
        if !(norm.std > 0.0 && norm.std.is_finite() && norm.mean.is_finite()) {
            return Err(SnnError::Config(format!("invalid normalization {norm:?}")));
        }
        self.samples = self.samples.map(|x| (x - norm.mean) / norm.std);
        self.normalization = Some(norm);
        Ok(())
    }

    /// Rows `idx` as a batch.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let f = self.features();
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(self.samples.row(i));
        }
        let x = Tensor::new(vec![idx.len(), f], data).expect("rows of a valid dataset");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (samples, labels) = self.gather(&idx);
        Dataset {
            samples,
            labels,
            classes: self.classes,
            normalization: self.normalization,
        }
    }

    pub fn to_blob(&self) -> Blob {
        let mut b = Blob::new();
        b.push("samples", Block::Tensor(self.samples.clone()));
        b.push("labels", Block::Indices(self.labels.iter().map(|&y| y as u64).collect()));
        b.push("classes", Block::Indices(vec![self.classes as u64]));
        if let Some(n) = self.normalization {
            b.push("normalization", Block::Tensor(Tensor::new(vec![2], vec![n.mean, n.std]).expect("finite")));
        }
        b
    }

    pub fn from_blob(b: &Blob) -> Result<Self> {
        let labels = b.indices("labels")?.iter().map(|&y| y as usize).collect();
        let classes = *b
            .indices("classes")?
            .first()
            .ok_or_else(|| SnnError::Contract("empty `classes` block".into()))? as usize;
        let mut ds = Dataset::new(b.tensor("samples")?.clone(), labels, classes)?;
        if let Ok(n) = b.tensor("normalization") {
            ds.normalization = Some(Normalization {
                mean: n.data()[0],
                std: n.data()[1],
            });
        }
        Ok(ds)
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        self.to_blob().write(path)
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        Self::from_blob(&Blob::read(path)?)
    }
}

fn parse_err(path: &Path, offset: u64, msg: impl Into<String>) -> SnnError {
    SnnError::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, bytes.len() as u64, "truncated header"))
}

/// Reads an IDX pair, scales pixels to `[0, 1]` and standardizes with the MNIST constants.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut ds = load_idx_unit(images_path, labels_path)?;
    ds.normalize(Normalization {
        mean: MNIST_MEAN,
        std: MNIST_STD,
    })?;
    Ok(ds)
}

/// Reads an IDX pair with pixels scaled to `[0, 1]`.
pub fn load_idx_unit(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = std::fs::read(images_path).map_err(|e| SnnError::io(images_path, e))?;
    let lab = std::fs::read(labels_path).map_err(|e| SnnError::io(labels_path, e))?;

    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(
            images_path,
            0,
            format!("expected image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let features = rows * cols;
    let want = 16 + n * features;
    if img.len() != want {
        return Err(parse_err(
            images_path,
            img.len().min(want) as u64,
            format!("expected {want} bytes for {n} images of {rows}x{cols}, file has {}", img.len()),
        ));
    }

    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(
            labels_path,
            0,
            format!("expected label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}"),
        ));
    }
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(parse_err(
            labels_path,
            4,
            format!("{n_labels} labels for {n} images"),
        ));
    }
    if lab.len() != 8 + n {
        return Err(parse_err(
            labels_path,
            lab.len().min(8 + n) as u64,
            format!("expected {} bytes, file has {}", 8 + n, lab.len()),
        ));
    }

    let samples = Tensor::new(
        vec![n, features],
        img[16..].iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = lab[8..].iter().map(|&y| y as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(samples, labels, classes)
}

/// CSV with header `label,f0,f1,...`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(parse_err(path, 0, "header must start with `label` followed by feature columns"));
    }
    let features = header.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        if rec.len() != header.len() {
            return Err(parse_err(path, offset, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let y: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, offset, format!("bad label `{}`", &rec[0])))?;
        labels.push(y);
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, offset, format!("bad feature value `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, offset, format!("non-finite feature value `{field}`")));
            }
            data.push(v);
        }
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![labels.len(), features], data)?, labels, classes)
}

fn csv_err(path: &Path, e: csv::Error) -> SnnError {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SnnError::io(path, io),
        other => parse_err(path, offset, format!("{other:?}")),
    }
}

/// Mini-batches in storage order or in a seeded random order. The last batch may be short.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iter<'a>(ds: &'a Dataset, batch_size: usize, shuffle: bool, rng: &mut Rng) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(SnnError::Config("batch size must be at least 1".into()));
    }
    let order = if shuffle {
        rng.permutation(ds.len())
    } else {
        (0..ds.len()).collect()
    };
    Ok(BatchIter {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.ds.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticGaussianSpec {
    pub mu: f64,
    pub sigma: f64,
    pub dims: Vec<usize>,
    pub n: usize,
    pub seed: u64,
}

/// `n` i.i.d. `N(mu, sigma²)` samples; label 1 when `w·(x - mu) > 0` for a
/// random hyperplane normal `w` drawn from the same seed.
pub fn synth_gaussian(spec: &SyntheticGaussianSpec) -> Result<Dataset> {
    if !(spec.sigma > 0.0 && spec.sigma.is_finite() && spec.mu.is_finite()) {
        return Err(SnnError::Config(format!(
            "synthetic data needs finite mu and sigma > 0, got mu={} sigma={}",
            spec.mu, spec.sigma
        )));
    }
    let features: usize = spec.dims.iter().product();
    if features == 0 {
        return Err(SnnError::Config("synthetic data needs at least one feature".into()));
    }
    let mut rng = Rng::stream(spec.seed, stream::DATA);
    let normal: Vec<f64> = (0..features).map(|_| rng.standard_normal()).collect();
    let samples = rng.normal_tensor(&[spec.n, features], spec.mu, spec.sigma);
    let labels = (0..spec.n)
        .map(|i| {
            let s: f64 = samples.row(i).iter().zip(&normal).map(|(x, w)| (x - spec.mu) * w).sum();
            usize::from(s > 0.0)
        })
        .collect();
    Dataset::new(samples, labels, 2)
}
