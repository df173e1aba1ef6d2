//! Datasets: a synthetic random-teacher task and IDX (MNIST-style) files.

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const TEACHER_WIDTH: usize = 64;
const MAX_RESEEDS: u64 = 1000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated file ({got} bytes, header promises {want})")]
    Truncated { path: PathBuf, got: usize, want: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("requested {want} samples, only {have} available")]
    NotEnough { want: usize, have: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: u8, classes: usize },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("no teacher seed in {0} tries gives balanced classes")]
    Degenerate(u64),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    SyntheticTeacher,
    IdxFiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    Regression,
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default)]
    pub source: DataSource,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_probe")]
    pub n_probe: usize,
    #[serde(default = "default_d_in")]
    pub d_in: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub teacher_seed: u64,
    #[serde(default)]
    pub target: TargetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

fn default_n_train() -> usize {
    1024
}
fn default_n_probe() -> usize {
    256
}
fn default_d_in() -> usize {
    16
}
fn default_classes() -> usize {
    1
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DataSource::SyntheticTeacher,
            n_train: default_n_train(),
            n_probe: default_n_probe(),
            d_in: default_d_in(),
            classes: default_classes(),
            teacher_seed: 0,
            target: TargetKind::Regression,
            images: None,
            labels: None,
        }
    }
}

/// Column-sample data: inputs `d_in × n`, targets `C × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x_train: Array2<f64>,
    pub y_train: Array2<f64>,
    pub x_probe: Array2<f64>,
    pub y_probe: Array2<f64>,
    pub target: TargetKind,
}

impl Dataset {
    pub fn d_in(&self) -> usize {
        self.x_train.nrows()
    }

    pub fn classes(&self) -> usize {
        self.y_train.nrows()
    }

    pub fn n_train(&self) -> usize {
        self.x_train.ncols()
    }
}

/// Builds the dataset a spec describes.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    match spec.source {
        DataSource::SyntheticTeacher => make_synthetic(spec, spec.teacher_seed),
        DataSource::IdxFiles => {
            let (images, labels) = match (&spec.images, &spec.labels) {
                (Some(i), Some(l)) => (i, l),
                _ => return Err(DataError::Spec("idx_files needs `images` and `labels` paths".into())),
            };
            let idx = load_idx(images, labels, Some(spec.n_train + spec.n_probe))?;
            idx.to_dataset(spec.n_train, spec.n_probe, spec.classes)
        }
    }
}

struct Teacher {
    w: Array2<f64>,
    v: Array2<f64>,
}

impl Teacher {
    fn new(d_in: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = Array2::from_shape_fn((TEACHER_WIDTH, d_in), |_| StandardNormal.sample(rng)) / (d_in as f64).sqrt();
        let v = Array2::from_shape_fn((out, TEACHER_WIDTH), |_| StandardNormal.sample(rng)) / (TEACHER_WIDTH as f64).sqrt();
        Teacher { w, v }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        self.v.dot(&self.w.dot(x).mapv(f64::tanh))
    }
}

fn one_hot(scores: &Array2<f64>) -> Array2<f64> {
    let mut y = Array2::zeros(scores.raw_dim());
    for (i, col) in scores.columns().into_iter().enumerate() {
        let k = col.iter().enumerate().fold(0, |best, (k, &v)| if v > col[best] { k } else { best });
        y[[k, i]] = 1.0;
    }
    y
}

fn balanced(y: &Array2<f64>) -> bool {
    let n = y.ncols() as f64;
    y.sum_axis(Axis(1)).iter().all(|&c| (0.05..=0.95).contains(&(c / n)))
}

/// Gaussian inputs labelled by a random width-64 tanh teacher.
///
/// Regression targets are standardized per output with training-set
/// statistics. One-hot targets take the teacher's argmax; for binary tasks the
/// teacher is redrawn until both classes hold 5–95% of the training set.
pub fn make_synthetic(spec: &DatasetSpec, seed: u64) -> Result<Dataset, DataError> {
    if spec.n_train == 0 || spec.d_in == 0 || spec.classes == 0 {
        return Err(DataError::Spec("n_train, d_in and classes must be positive".into()));
    }
    if spec.target == TargetKind::OneHot && spec.classes < 2 {
        return Err(DataError::Spec("one-hot targets need at least two classes".into()));
    }
    let n = spec.n_train + spec.n_probe;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((spec.d_in, n), |_| StandardNormal.sample(&mut rng));
    let mut attempt = 0;
    let y = loop {
        if attempt == MAX_RESEEDS {
            return Err(DataError::Degenerate(MAX_RESEEDS));
        }
        let mut teacher_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ea_c4e2);
        teacher_rng.set_stream(attempt);
        attempt += 1;
        let scores = Teacher::new(spec.d_in, spec.classes, &mut teacher_rng).apply(&x);
        match spec.target {
            TargetKind::Regression => {
                let train = scores.slice(s![.., ..spec.n_train]);
                let mean = train.mean_axis(Axis(1)).expect("n_train > 0");
                let std = train.std_axis(Axis(1), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
                break (&scores - &mean.insert_axis(Axis(1))) / &std.insert_axis(Axis(1));
            }
            TargetKind::OneHot => {
                let y = one_hot(&scores);
                if spec.classes > 2 || balanced(&y.slice(s![.., ..spec.n_train]).to_owned()) {
                    break y;
                }
            }
        }
    };
    Ok(Dataset {
        x_train: x.slice(s![.., ..spec.n_train]).to_owned(),
        y_train: y.slice(s![.., ..spec.n_train]).to_owned(),
        x_probe: x.slice(s![.., spec.n_train..]).to_owned(),
        y_probe: y.slice(s![.., spec.n_train..]).to_owned(),
        target: spec.target,
    })
}

/// Raw contents of an IDX image/label pair.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxData {
    pub rows: usize,
    pub cols: usize,
    /// One row per image, pixels scaled to `[0, 1]`.
    pub images: Array2<f64>,
    pub labels: Vec<u8>,
}

impl IdxData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n_train` samples for training, the next `n_probe` as probe set.
    pub fn to_dataset(&self, n_train: usize, n_probe: usize, classes: usize) -> Result<Dataset, DataError> {
        let want = n_train + n_probe;
        if want > self.len() {
            return Err(DataError::NotEnough { want, have: self.len() });
        }
        if let Some(&label) = self.labels[..want].iter().find(|&&l| l as usize >= classes) {
            return Err(DataError::LabelRange { label, classes });
        }
        let x = self.images.slice(s![..want, ..]).t().to_owned();
        let mut y = Array2::zeros((classes, want));
        for (i, &l) in self.labels[..want].iter().enumerate() {
            y[[l as usize, i]] = 1.0;
        }
        Ok(Dataset {
            x_train: x.slice(s![.., ..n_train]).to_owned(),
            y_train: y.slice(s![.., ..n_train]).to_owned(),
            x_probe: x.slice(s![.., n_train..]).to_owned(),
            y_probe: y.slice(s![.., n_train..]).to_owned(),
            target: TargetKind::OneHot,
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { path: path.to_path_buf(), got: bytes.len(), want: at + 4 })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic { path: path.to_path_buf(), found, expected });
    }
    Ok(())
}

/// Reads an IDX pair, keeping only the first `take` samples when given.
pub fn load_idx(images: &Path, labels: &Path, take: Option<usize>) -> Result<IdxData, DataError> {
    let img = read(images)?;
    check_magic(&img, IDX_IMAGES_MAGIC, images)?;
    let count = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let pixels = rows * cols;
    if img.len() < 16 + count * pixels {
        return Err(DataError::Truncated { path: images.to_path_buf(), got: img.len(), want: 16 + count * pixels });
    }

    let lab = read(labels)?;
    check_magic(&lab, IDX_LABELS_MAGIC, labels)?;
    let label_count = be_u32(&lab, 4, labels)? as usize;
    if lab.len() < 8 + label_count {
        return Err(DataError::Truncated { path: labels.to_path_buf(), got: lab.len(), want: 8 + label_count });
    }
    if label_count != count {
        return Err(DataError::CountMismatch { images: count, labels: label_count });
    }

    let n = take.map_or(count, |t| t.min(count));
    let body = &img[16..16 + n * pixels];
    let images = Array1::from_iter(body.iter().map(|&p| p as f64 / 255.0))
        .into_shape_with_order((n, pixels))
        .expect("length is n · pixels");
    Ok(IdxData { rows, cols, images, labels: lab[8..8 + n].to_vec() })
}

/// Writes an IDX pair; `pixels` holds `labels.len()` images of `rows × cols` bytes.
pub fn write_idx(images: &Path, labels: &Path, rows: usize, cols: usize, pixels: &[u8], label_bytes: &[u8]) -> Result<(), DataError> {
    let n = label_bytes.len();
    if pixels.len() != n * rows * cols {
        return Err(DataError::CountMismatch { images: pixels.len() / (rows * cols).max(1), labels: n });
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(label_bytes);
    fs::write(images, img).map_err(|source| DataError::Io { path: images.to_path_buf(), source })?;
    fs::write(labels, lab).map_err(|source| DataError::Io { path: labels.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_disjoint() {
        let spec = DatasetSpec { n_train: 50, n_probe: 10, d_in: 4, classes: 2, ..Default::default() };
        let a = make_synthetic(&spec, 3).unwrap();
        assert_eq!(a, make_synthetic(&spec, 3).unwrap());
        assert_ne!(a, make_synthetic(&spec, 4).unwrap());
        assert_eq!(a.x_train.dim(), (4, 50));
        assert_eq!(a.x_probe.dim(), (4, 10));
        let m = a.y_train.mean_axis(Axis(1)).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn empty_probe_is_allowed() {
        let spec = DatasetSpec { n_train: 8, n_probe: 0, ..Default::default() };
        assert_eq!(make_synthetic(&spec, 0).unwrap().x_probe.ncols(), 0);
    }

    #[test]
    fn binary_classes_are_balanced_over_seeds() {
        let spec = DatasetSpec { n_train: 1024, n_probe: 0, d_in: 8, classes: 2, target: TargetKind::OneHot, ..Default::default() };
        for seed in 0..10 {
            let d = make_synthetic(&spec, seed).unwrap();
            let frac = d.y_train.row(0).sum() / 1024.0;
            assert!((0.05..=0.95).contains(&frac), "seed {seed}: {frac}");
            assert!(d.y_train.columns().into_iter().all(|c| c.sum() == 1.0));
        }
    }

    #[test]
    fn idx_scaling_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&i, &l, 2, 2, &[0, 255, 128, 64], &[3]).unwrap();
        let d = load_idx(&i, &l, None).unwrap();
        assert_eq!(d.images.row(0).to_vec(), vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);

        let mut bytes = fs::read(&i).unwrap();
        bytes[3] = 0x02;
        fs::write(&i, &bytes).unwrap();
        let err = load_idx(&i, &l, None).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn idx_truncation_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&i, &l, 1, 2, &[1, 2, 3, 4], &[0, 1]).unwrap();
        let bytes = fs::read(&i).unwrap();
        fs::write(&i, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&i, &l, None), Err(DataError::Truncated { .. })));
        write_idx(&i, &l, 1, 2, &[1, 2, 3, 4], &[0, 1]).unwrap();
        let i3 = dir.path().join("img3");
        write_idx(&i3, &dir.path().join("lab3"), 1, 2, &[1, 2, 3, 4, 5, 6], &[0, 1, 1]).unwrap();
        assert!(matches!(load_idx(&i3, &l, None), Err(DataError::CountMismatch { images: 3, labels: 2 })));
    }
}
