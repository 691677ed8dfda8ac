//! Labeled feature matrices: IDX ingestion, synthetic Gaussian blobs,
//! seeded splits and epoch shuffles.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `n × d` features in `[0, 1]` (row-major) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Consistency("dataset has no samples".into()));
        }
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::Consistency("class count must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Consistency(format!(
                "label {bad} not below class count {class_count}"
            )));
        }
        if let Some(bad) = features.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Consistency(format!("feature {bad} outside [0, 1]")));
        }
        Ok(Dataset {
            name: name.into(),
            dim,
            features,
            labels,
            class_count,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features
            .chunks_exact(self.dim)
            .zip(self.labels.iter().copied())
    }

    /// Widen the label space, e.g. so train and test agree.
    pub fn with_class_count(mut self, class_count: usize) -> Result<Self> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Consistency(format!(
                "label {bad} not below class count {class_count}"
            )));
        }
        self.class_count = class_count;
        Ok(self)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(name, self.dim, features, labels, self.class_count)
    }

    /// First `n` rows (all rows if `n` exceeds the length).
    pub fn truncated(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.name.clone())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::io(
                self.path,
                std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    format!(
                        "truncated IDX file: wanted {n} bytes at offset {}",
                        self.pos
                    ),
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn expect_magic(cur: &mut Cursor<'_>, want: u32, what: &str) -> Result<()> {
    let magic = cur.u32_be()?;
    if magic != want {
        return Err(Error::Format(format!(
            "{}: expected {what} magic {want:#010x}, found {magic:#010x}",
            cur.path.display()
        )));
    }
    Ok(())
}

/// Parse an IDX image/label file pair. Pixels are scaled by `1/255`;
/// the class count is `max(label) + 1`.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let image_bytes = read_file(image_path)?;
    let label_bytes = read_file(label_path)?;

    let mut img = Cursor {
        bytes: &image_bytes,
        pos: 0,
        path: image_path,
    };
    expect_magic(&mut img, IDX_IMAGES_MAGIC, "image")?;
    let count = img.u32_be()? as usize;
    let rows = img.u32_be()? as usize;
    let cols = img.u32_be()? as usize;

    let mut lab = Cursor {
        bytes: &label_bytes,
        pos: 0,
        path: label_path,
    };
    expect_magic(&mut lab, IDX_LABELS_MAGIC, "label")?;
    let label_count = lab.u32_be()? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }

    let dim = rows * cols;
    let pixels = img.take(count * dim)?;
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = lab.take(count)?.iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = image_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, dim, features, labels, classes)
}

/// Encode a dataset as an IDX pair with `rows × cols` images. Features are
/// quantized to the nearest multiple of `1/255`.
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.dim() {
        return Err(Error::Shape(format!(
            "{rows}x{cols} images cannot hold {} features",
            ds.dim()
        )));
    }
    if ds.class_count() > 256 {
        return Err(Error::Format("IDX labels are single bytes".into()));
    }
    let n = ds.len() as u32;
    let mut images = Vec::with_capacity(16 + ds.features().len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    images.extend(ds.features().iter().map(|&v| (v * 255.0).round() as u8));

    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    labels.extend(ds.labels().iter().map(|&l| l as u8));
    Ok((images, labels))
}

const MAX_CENTER_ATTEMPTS: usize = 10_000;

/// Parameters of [`synthetic_blobs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

/// Isotropic Gaussian blobs around seeded class centers in `[0.2, 0.8]^d`,
/// clamped to the unit box. Sample `i` belongs to class `i % classes`.
pub fn synthetic_blobs(spec: BlobSpec) -> Result<Dataset> {
    let BlobSpec {
        n,
        dim,
        classes,
        separation,
        noise,
        seed,
    } = spec;
    if dim == 0 || classes == 0 || n < classes {
        return Err(Error::Config(format!(
            "blobs need d >= 1, classes >= 1 and n >= classes (n={n}, d={dim}, classes={classes})"
        )));
    }
    if !(separation.is_finite() && separation >= 0.0 && noise.is_finite() && noise >= 0.0) {
        return Err(Error::Config(
            "separation and noise must be finite and non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while centers.len() < classes {
        let mut placed = false;
        for _ in 0..MAX_CENTER_ATTEMPTS {
            let c: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..=0.8)).collect();
            let far = centers.iter().all(|o| {
                o.iter()
                    .zip(&c)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    >= separation
            });
            if far {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place center {} at separation {separation} after {MAX_CENTER_ATTEMPTS} draws",
                centers.len()
            )));
        }
    }

    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for &c in &centers[class] {
            let eps: f64 = rng.sample(StandardNormal);
            features.push((c + noise * eps).clamp(0.0, 1.0));
        }
        labels.push(class);
    }
    Dataset::new(format!("blobs-{seed}"), dim, features, labels, classes)
}

/// Seeded train/test partition of `0..n`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} leaves an empty part of {n} samples"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = perm.split_off(n_train);
    Ok((perm, test))
}

pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.len(), train_fraction, seed)?;
    Ok((
        ds.subset(&train, format!("{}-train", ds.name()))?,
        ds.subset(&test, format!("{}-test", ds.name()))?,
    ))
}

/// A seeded shuffle of `0..n` cut into batches of `batch_size`; the last
/// batch may be short.
pub fn minibatches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    minibatches_with(n, batch_size, &mut rng)
}

pub(crate) fn minibatches_with<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
