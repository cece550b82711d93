//! Dataset loading: IDX image/label files, labelled CSV, and two seeded
//! synthetic generators.
//!
//! Two moons: `n/2` points on the upper arc `(cos t, sin t)` (class 0) and the
//! rest on the lower arc `(1 - cos t, 0.5 - sin t)` (class 1), with `t` evenly
//! spaced on `[0, pi]`, Gaussian noise of standard deviation `noise` added to
//! each coordinate, then shuffled.
//!
//! Blobs: `k` centers drawn uniformly from `[-5, 5]^dim`; sample `i` belongs to
//! class `i mod k` and is its center plus isotropic Gaussian noise of
//! standard deviation `std`; then shuffled.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ndcore::Matrix;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-per-sample features with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Domain(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Domain(format!("label {bad} with only {n_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// First `n` rows and the remainder.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    TwoMoons { noise: f64 },
    Blobs { centers: usize, dim: usize, std: f64 },
    Csv { train: PathBuf, eval: Option<PathBuf> },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: Option<PathBuf>,
        eval_labels: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    /// Sample counts. Synthetic sources generate exactly this many; file
    /// sources without a separate eval file hold out the last `n_eval` rows.
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if !(noise >= 0.0) {
        return Err(Error::Domain(format!("noise must be nonnegative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Domain(e.to_string()))?;
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let arc = |k: usize, count: usize| {
        if count <= 1 {
            0.0
        } else {
            PI * k as f64 / (count - 1) as f64
        }
    };
    let mut rows = Vec::with_capacity(n);
    for k in 0..n_outer {
        let t = arc(k, n_outer);
        rows.push(([t.cos(), t.sin()], 0usize));
    }
    for k in 0..n_inner {
        let t = arc(k, n_inner);
        rows.push(([1.0 - t.cos(), 0.5 - t.sin()], 1usize));
    }
    for (x, _) in rows.iter_mut() {
        x[0] += normal.sample(&mut rng);
        x[1] += normal.sample(&mut rng);
    }
    rows.shuffle(&mut rng);
    let data = rows.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let labels = rows.iter().map(|&(_, y)| y).collect();
    Dataset::new(Matrix::from_vec(n, 2, data)?, labels, 2)
}

pub fn blobs(n: usize, centers: usize, dim: usize, std: f64, seed: u64) -> Result<Dataset> {
    if centers == 0 || dim == 0 {
        return Err(Error::Domain("blobs need at least one center and one dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).map_err(|e| Error::Domain(e.to_string()))?;
    let c: Vec<Vec<f64>> = (0..centers)
        .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let mut rows: Vec<(Vec<f64>, usize)> = (0..n)
        .map(|i| {
            let k = i % centers;
            let x = c[k].iter().map(|&m| m + normal.sample(&mut rng)).collect();
            (x, k)
        })
        .collect();
    rows.shuffle(&mut rng);
    let data = rows.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let labels = rows.iter().map(|(_, y)| *y).collect();
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, centers)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Parse {
            offset: offset as u64,
            msg: "unexpected end of file in header".into(),
        })
}

/// Parses an IDX unsigned-byte file, returning its dimensions and payload.
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected_magic {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {expected_magic:#010x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Parse {
            offset: (header + payload.len().min(expected)) as u64,
            msg: format!(
                "payload has {} bytes, dimensions {dims:?} require {expected}",
                payload.len()
            ),
        });
    }
    Ok((dims, payload))
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` and each
/// image is flattened to one row.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = read(images)?;
    let lbl_bytes = read(labels)?;
    let (dims, pixels) = parse_idx(&img_bytes, IDX_IMAGES_MAGIC)?;
    let (ldims, lbls) = parse_idx(&lbl_bytes, IDX_LABELS_MAGIC)?;
    let n = dims[0];
    if ldims[0] != n {
        return Err(Error::Domain(format!(
            "{} has {n} images but {} has {} labels",
            images.display(),
            labels.display(),
            ldims[0]
        )));
    }
    let per = dims[1..].iter().product::<usize>();
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = lbls.iter().map(|&l| l as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::from_vec(n, per, data)?, labels, n_classes)
}

/// Serializes images (`n x rows x cols`, one byte per pixel) as IDX.
pub fn idx_images_bytes(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn idx_labels_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads a CSV whose header is `label,f0,f1,...`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("label") {
        return Err(Error::Parse {
            offset: 0,
            msg: "first header column must be `label`".into(),
        });
    }
    let dim = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let offset = record.position().map_or(0, |p| p.byte());
        let parse_err = |msg: String| Error::Parse { offset, msg };
        if record.len() != dim + 1 {
            return Err(parse_err(format!("expected {} fields, got {}", dim + 1, record.len())));
        }
        let label = record[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(format!("label {:?}: {e}", &record[0])))?;
        labels.push(label);
        for f in record.iter().skip(1) {
            // accept the unicode minus sign as well as '-'
            let t = f.trim().replace('\u{2212}', "-");
            data.push(
                t.parse::<f64>()
                    .map_err(|e| parse_err(format!("feature {f:?}: {e}")))?,
            );
        }
    }
    let n = labels.len();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, n_classes)
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..data.dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for r in 0..data.len() {
        let mut rec = vec![data.labels[r].to_string()];
        rec.extend(data.features.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn reconcile_classes(train: &mut Dataset, eval: &mut Dataset) {
    let k = train.n_classes.max(eval.n_classes);
    train.n_classes = k;
    eval.n_classes = k;
}

/// Loads (or generates) the train and eval sets described by `spec`.
pub fn load_dataset(spec: &DataSpec) -> Result<(Dataset, Dataset)> {
    let total = spec.n_train + spec.n_eval;
    let (mut train, mut eval) = match &spec.source {
        DataSource::TwoMoons { noise } => two_moons(total, *noise, spec.seed)?.split_at(spec.n_train),
        DataSource::Blobs { centers, dim, std } => {
            blobs(total, *centers, *dim, *std, spec.seed)?.split_at(spec.n_train)
        }
        DataSource::Csv { train, eval } => {
            let t = load_csv(train)?;
            match eval {
                Some(e) => (t, load_csv(e)?),
                None => t.split_at(t.len().saturating_sub(spec.n_eval)),
            }
        }
        DataSource::Idx {
            train_images,
            train_labels,
            eval_images,
            eval_labels,
        } => {
            let t = load_idx(train_images, train_labels)?;
            match (eval_images, eval_labels) {
                (Some(i), Some(l)) => (t, load_idx(i, l)?),
                _ => t.split_at(t.len().saturating_sub(spec.n_eval)),
            }
        }
    };
    if train.dim() != eval.dim() {
        return Err(Error::Domain(format!(
            "train has {} features but eval has {}",
            train.dim(),
            eval.dim()
        )));
    }
    reconcile_classes(&mut train, &mut eval);
    Ok((train, eval))
}
