//! Datasets: MNIST IDX files, deterministic train/dev splits and synthetic
//! Gaussian blobs.
//!
//! IDX layout (big-endian): images start with magic `0x00000803`, then the
//! image count, rows and columns, then one unsigned byte per pixel; labels
//! start with magic `0x00000801` and the count, then one byte per label.
//! Files whose name ends in `.gz` are decompressed on the fly.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "dev" => Some(Split::Dev),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Inputs (one row per example), labels and a split tag per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&k) = labels.iter().find(|&&k| k >= num_classes) {
            return Err(Error::invalid(format!("label {k} outside 0..{num_classes}")));
        }
        let splits = vec![Split::Train; labels.len()];
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.splits.iter_mut().for_each(|s| *s = split);
        self
    }

    /// Indices tagged `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// Copies the listed rows into a batch.
    pub fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.inputs.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Appends `other`, tagging its examples `split`.
    pub fn append(&mut self, other: Dataset, split: Split) -> Result<()> {
        if other.dim() != self.dim() || other.num_classes != self.num_classes {
            return Err(Error::invalid("appended dataset has a different shape"));
        }
        let n = self.len();
        let mut data = std::mem::replace(&mut self.inputs, Matrix::zeros(0, 0)).into_vec();
        data.extend_from_slice(other.inputs.data());
        self.inputs = Matrix::from_vec(n + other.len(), other.dim(), data)?;
        self.labels.extend_from_slice(&other.labels);
        self.splits.extend(std::iter::repeat_n(split, other.len()));
        Ok(())
    }
}

/// Moves `dev_size` randomly chosen training examples into the dev split.
/// The choice depends only on `seed` and the set of training indices.
pub fn split_train_dev(mut dataset: Dataset, dev_size: usize, seed: u64) -> Result<Dataset> {
    let mut train = dataset.indices(Split::Train);
    if dev_size >= train.len() && dev_size > 0 {
        return Err(Error::invalid(format!(
            "dev size {dev_size} must be smaller than the {} training examples",
            train.len()
        )));
    }
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut train);
    for &i in &train[..dev_size] {
        dataset.splits[i] = Split::Dev;
    }
    Ok(dataset)
}

fn open(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let res = if gz {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)
    } else {
        BufReader::new(file).read_to_end(&mut bytes)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

struct Header<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl Header<'_> {
    fn u32_at(&self, offset: usize, field: &'static str) -> Result<u32> {
        self.bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| self.err(field, offset, "file truncated"))
    }

    fn err(&self, field: &'static str, offset: usize, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            field,
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn magic(&self, expect: u32) -> Result<()> {
        let magic = self.u32_at(0, "magic")?;
        if magic != expect {
            return Err(self.err(
                "magic",
                0,
                format!("magic mismatch: found {magic:#010x}, expected {expect:#010x}"),
            ));
        }
        Ok(())
    }
}

/// Raw IDX image payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len() / (self.rows * self.cols).max(1)
    }
}

pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<IdxImages> {
    let h = Header { path, bytes };
    h.magic(IMAGE_MAGIC)?;
    let n = h.u32_at(4, "image count")? as usize;
    let rows = h.u32_at(8, "rows")? as usize;
    let cols = h.u32_at(12, "cols")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(h.err(
            "pixel data",
            16 + body.len(),
            format!("file truncated: header promises {need} pixel bytes, found {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(h.err("pixel data", 16 + need, "trailing bytes after the last image"));
    }
    Ok(IdxImages {
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let h = Header { path, bytes };
    h.magic(LABEL_MAGIC)?;
    let n = h.u32_at(4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(h.err(
            "label data",
            8 + body.len(),
            format!("file truncated: header promises {n} labels, found {}", body.len()),
        ));
    }
    if body.len() > n {
        return Err(h.err("label data", 8 + n, "trailing bytes after the last label"));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGE_MAGIC,
        images.count() as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an image/label IDX pair. Pixels are scaled by `1/255` into `[0, 1]`;
/// all examples are tagged [`Split::Train`].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx_images(images, &open(images)?)?;
    let lab = parse_idx_labels(labels, &open(labels)?)?;
    if img.count() != lab.len() {
        return Err(Error::Parse {
            path: labels.to_path_buf(),
            field: "label count",
            offset: 4,
            reason: format!(
                "count mismatch: {} labels for {} images in {}",
                lab.len(),
                img.count(),
                images.display()
            ),
        });
    }
    dataset_from_idx(&img, &lab)
}

pub fn dataset_from_idx(img: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    let data = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Matrix::from_vec(labels.len(), img.rows * img.cols, data)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(inputs, labels, classes)
}

/// Inverse of [`dataset_from_idx`] for 8-bit pixel data.
pub fn dataset_to_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(IdxImages, Vec<u8>)> {
    if rows * cols != ds.dim() {
        return Err(Error::invalid("image shape does not match input width"));
    }
    let pixels = ds
        .inputs()
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let labels = ds.labels().iter().map(|&l| l as u8).collect();
    Ok((IdxImages { rows, cols, pixels }, labels))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Locations of the four MNIST files inside `dir`, with or without `.gz`.
#[derive(Clone, Debug)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn locate(dir: &Path) -> Result<Self> {
        let find = |stem: &str| -> Result<PathBuf> {
            for cand in [stem.to_string(), format!("{stem}.gz"), stem.replacen("-idx", ".idx", 1)] {
                let p = dir.join(&cand);
                if p.is_file() {
                    return Ok(p);
                }
            }
            Err(Error::io(
                dir.join(stem),
                std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
            ))
        };
        Ok(MnistFiles {
            train_images: find("train-images-idx3-ubyte")?,
            train_labels: find("train-labels-idx1-ubyte")?,
            test_images: find("t10k-images-idx3-ubyte")?,
            test_labels: find("t10k-labels-idx1-ubyte")?,
        })
    }

    pub fn all(&self) -> [&Path; 4] {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
    }
}

/// Full MNIST: the 60 000 training images split into train and dev by
/// `seed`, with the 10 000 test images appended as [`Split::Test`].
pub fn load_mnist(dir: &Path, dev_size: usize, seed: u64) -> Result<Dataset> {
    let files = MnistFiles::locate(dir)?;
    let train = load_idx(&files.train_images, &files.train_labels)?;
    let test = load_idx(&files.test_images, &files.test_labels)?;
    let mut ds = split_train_dev(train, dev_size, seed)?;
    ds.append(test, Split::Test)?;
    Ok(ds)
}

/// Gaussian clusters with unit variance. Class centers sit on distinct
/// coordinate axes (random axis and sign per class) at distance
/// `separation` from each other.
pub fn synth_blobs(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("synth_blobs needs at least two classes"));
    }
    if dim < classes {
        return Err(Error::invalid("synth_blobs needs dim >= classes"));
    }
    let mut rng = Rng::new(seed);
    let mut axes: Vec<usize> = (0..dim).collect();
    rng.shuffle(&mut axes);
    let radius = separation / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut v = vec![0.0; dim];
            v[axes[c]] = if rng.uniform() < 0.5 { -radius } else { radius };
            v
        })
        .collect();
    let n = n_per_class * classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        data.extend(centers[c].iter().map(|&m| m + rng.normal()));
        labels.push(c);
    }
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, classes)
}
