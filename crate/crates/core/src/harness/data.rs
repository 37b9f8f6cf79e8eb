//! MNIST IDX files and seeded Gaussian-cluster data.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{input_err, Error, Result};
use crate::numkit::rng::shuffle;
use crate::numkit::{Matrix, SeedStream};
use crate::stream::Dataset;

const IMAGES_MAGIC: u32 = 2051;
const LABELS_MAGIC: u32 = 2049;

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

/// File contents, gunzipped when they start with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| format_err(0, format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(offset as u64, "file ends inside the header"))
}

fn check_magic(bytes: &[u8], expect: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expect {
        return Err(format_err(0, format!("magic {magic}, expected {expect}")));
    }
    Ok(())
}

fn check_len(bytes: &[u8], need: usize) -> Result<()> {
    if bytes.len() < need {
        return Err(format_err(
            bytes.len() as u64,
            format!("file truncated: {} of {need} bytes", bytes.len()),
        ));
    }
    Ok(())
}

/// Parses an IDX image file into `n×(rows·cols)` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(format_err(8, format!("degenerate image shape {rows}x{cols}")));
    }
    let d = rows * cols;
    check_len(bytes, 16 + n * d)?;
    let data = bytes[16..16 + n * d].iter().map(|&p| f64::from(p) / 255.0).collect();
    Matrix::new(n, d, data)
}

pub fn parse_idx_labels(bytes: &[u8], num_classes: usize) -> Result<Vec<usize>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    check_len(bytes, 8 + n)?;
    bytes[8..8 + n]
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let y = usize::from(y);
            if y >= num_classes {
                Err(format_err(8 + i as u64, format!("label {y} out of range")))
            } else {
                Ok(y)
            }
        })
        .collect()
}

/// Loads an IDX image/label pair (each optionally gzip-compressed).
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&read_maybe_gz(images)?)?;
    let y = parse_idx_labels(&read_maybe_gz(labels)?, 10)?;
    if x.rows() != y.len() {
        return Err(format_err(
            4,
            format!("{} images but {} labels", x.rows(), y.len()),
        ));
    }
    Dataset::new(x, y, 10)
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_owned(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(input_err!("{stem}[.gz] not found in {}", dir.display()))
}

/// `(train, test)` from the four standard MNIST files in `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist_idx(
        &find(dir, "train-images-idx3-ubyte")?,
        &find(dir, "train-labels-idx1-ubyte")?,
    )?;
    let test = load_mnist_idx(
        &find(dir, "t10k-images-idx3-ubyte")?,
        &find(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    Ok((train, test))
}

/// Gaussian clusters, one per class, around means drawn from `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn means(&self) -> Matrix {
        let mut rng = SeedStream::new(self.seed).split(0).rng();
        let data = (0..self.classes * self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Matrix::new(self.classes, self.dim, data).expect("sized by construction")
    }

    /// `n` balanced examples drawn from substream `stream` of the seed.
    pub fn sample(&self, n: usize, stream: u64) -> Result<Dataset> {
        if self.classes < 2 || self.dim == 0 {
            return Err(input_err!("synthetic data needs C >= 2 and D >= 1"));
        }
        let means = self.means();
        let mut rng = SeedStream::new(self.seed).split(1 + stream).rng();
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        shuffle(&mut rng, &mut labels);
        let mut data = Vec::with_capacity(n * self.dim);
        for &y in &labels {
            for &m in means.row(y) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(m + self.spread * noise);
            }
        }
        Dataset::new(Matrix::new(n, self.dim, data)?, labels, self.classes)
    }
}

/// `n` examples from `C` seeded Gaussian clusters in `D` dimensions.
pub fn gen_synthetic(classes: usize, dim: usize, n: usize, spread: f64, seed: u64) -> Result<Dataset> {
    SyntheticSpec {
        classes,
        dim,
        spread,
        seed,
    }
    .sample(n, 0)
}
