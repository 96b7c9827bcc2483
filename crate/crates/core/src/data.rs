//! IDX ingestion, symmetry augmentations and stratified splits.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::groups::{grid_permutation, PointGroup};
use crate::seeds::sub_seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated IDX file: {0}")]
    TruncatedFile(String),
    #[error("{images} images but {labels} labels")]
    LabelImageCountMismatch { images: usize, labels: usize },
    #[error("not enough samples: {0}")]
    InsufficientData(String),
    #[error("label {label} outside 0..{n_classes}")]
    LabelOutOfRange { label: usize, n_classes: usize },
}

/// Per-dataset affine normalisation `(x − mean) / sd`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Row-major `[N, C, H, W]` pixels.
    pub pixels: Vec<f64>,
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self, DataError> {
        let s = images.shape().to_vec();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(DataError::LabelImageCountMismatch {
                images: s.first().copied().unwrap_or(0),
                labels: labels.len(),
            });
        }
        Self::from_pixels(images.into_data(), [s[1], s[2], s[3]], labels, n_classes)
    }

    pub fn from_pixels(
        pixels: Vec<f64>,
        shape: [usize; 3],
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self, DataError> {
        let per: usize = shape.iter().product();
        if pixels.len() != per * labels.len() {
            return Err(DataError::LabelImageCountMismatch {
                images: pixels.len() / per.max(1),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DataError::LabelOutOfRange { label, n_classes });
        }
        Ok(Dataset {
            pixels,
            shape,
            labels,
            n_classes,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn sample_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        data
    }

    /// Images and labels at `indices` (non-empty), in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.shape;
        let images = Tensor::new(vec![indices.len(), c, h, w], self.gather(indices))
            .expect("batches are non-empty and finite");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// All images as one `[N, C, H, W]` tensor.
    pub fn images(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx).0
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            pixels: self.gather(indices),
            shape: self.shape,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            normalization: self.normalization,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Mean and standard deviation over all pixels.
    pub fn pixel_stats(&self) -> Normalization {
        let d = &self.pixels;
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Normalization {
            mean,
            sd: var.sqrt().max(1e-12),
        }
    }

    pub fn normalized(&self, stats: Normalization) -> Dataset {
        Dataset {
            pixels: self.pixels.iter().map(|v| (v - stats.mean) / stats.sd).collect(),
            normalization: Some(stats),
            ..self.clone()
        }
    }

    fn map_images(&self, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Dataset {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for i in 0..self.len() {
            pixels.extend(f(i, self.image(i)));
        }
        Dataset {
            pixels,
            ..self.clone()
        }
    }
}

fn open(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| DataError::TruncatedFile(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &mut &[u8], expected: u32, ndim: usize) -> Result<Vec<usize>, DataError> {
    let short = || DataError::TruncatedFile("header ended early".into());
    let magic = bytes.read_u32::<BigEndian>().map_err(|_| short())?;
    if magic != expected {
        return Err(DataError::BadMagic {
            found: magic,
            expected,
        });
    }
    (0..ndim)
        .map(|_| bytes.read_u32::<BigEndian>().map(|d| d as usize).map_err(|_| short()))
        .collect()
}

/// Parses an IDX image tensor (`u8`, 3 dims); pixels scaled to `[0, 1]`.
pub fn parse_idx_images(mut bytes: &[u8]) -> Result<Tensor, DataError> {
    let dims = header(&mut bytes, IDX_IMAGES_MAGIC, 3)?;
    let n = dims.iter().product::<usize>();
    if bytes.len() < n {
        return Err(DataError::TruncatedFile(format!(
            "{} pixel bytes present, {n} declared",
            bytes.len()
        )));
    }
    if n == 0 {
        return Err(DataError::InsufficientData("empty image file".into()));
    }
    let data = bytes[..n].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data).expect("finite"))
}

/// Parses an IDX label vector (`u8`).
pub fn parse_idx_labels(mut bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let n = header(&mut bytes, IDX_LABELS_MAGIC, 1)?[0];
    if bytes.len() < n {
        return Err(DataError::TruncatedFile(format!(
            "{} label bytes present, {n} declared",
            bytes.len()
        )));
    }
    Ok(bytes[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair, gzip-compressed or not.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = parse_idx_images(&open(images_path)?)?;
    let labels = parse_idx_labels(&open(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(DataError::LabelImageCountMismatch {
            images: images.shape()[0],
            labels: labels.len(),
        });
    }
    let n_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(images, labels, n_classes)
}

/// Bilinear rotation of one `n × n` plane by `theta` (counter-clockwise)
/// about its centre; samples outside the image read as zero.
pub fn rotate_image(plane: &[f64], n: usize, theta: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let (s, co) = theta.sin_cos();
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= n as isize || j >= n as isize {
            0.0
        } else {
            plane[i as usize * n + j as usize]
        }
    };
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64 - c, c - i as f64);
            // inverse rotation of the output point
            let (sx, sy) = (co * x + s * y, -s * x + co * y);
            let (fi, fj) = (c - sy, sx + c);
            let (i0, j0) = (fi.floor(), fj.floor());
            let (di, dj) = (fi - i0, fj - j0);
            let (i0, j0) = (i0 as isize, j0 as isize);
            out[i * n + j] = (1.0 - di) * (1.0 - dj) * at(i0, j0)
                + (1.0 - di) * dj * at(i0, j0 + 1)
                + di * (1.0 - dj) * at(i0 + 1, j0)
                + di * dj * at(i0 + 1, j0 + 1);
        }
    }
    out
}

/// Every image rotated by an independent uniform angle in `[0, 2π)`.
pub fn rot_mnist(base: &Dataset, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, _] = base.image_shape();
    base.map_images(|_, img| {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        img.chunks(h * h)
            .take(c)
            .flat_map(|p| rotate_image(p, h, theta))
            .collect()
    })
}

/// Every image transformed by an independent uniform element of `g`.
pub fn group_augment(base: &Dataset, g: PointGroup, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [_, h, _] = base.image_shape();
    let perms: Vec<Vec<usize>> = g.elements().iter().map(|&a| grid_permutation(a, h)).collect();
    base.map_images(|_, img| {
        let perm = &perms[rng.gen_range(0..perms.len())];
        img.chunks(h * h)
            .flat_map(|p| perm.iter().map(move |&q| p[q]))
            .collect()
    })
}

/// Per-class quotas summing to `total`, proportional to `weights`
/// (largest remainder), never exceeding `caps`.
fn quotas(total: usize, weights: &[usize], caps: &[usize]) -> Option<Vec<usize>> {
    let wsum: usize = weights.iter().sum();
    if total > caps.iter().sum() || wsum == 0 {
        return (total == 0).then(|| vec![0; weights.len()]);
    }
    let exact: Vec<f64> = weights.iter().map(|&w| total as f64 * w as f64 / wsum as f64).collect();
    let mut q: Vec<usize> = exact.iter().zip(caps).map(|(e, &c)| (e.floor() as usize).min(c)).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = total - q.iter().sum::<usize>();
    while left > 0 {
        let before = left;
        for &c in &order {
            if left > 0 && q[c] < caps[c] {
                q[c] += 1;
                left -= 1;
            }
        }
        if left == before {
            return None;
        }
    }
    Some(q)
}

/// Disjoint, seeded, label-stratified train/validation/test subsets.
pub fn subset_split(
    ds: &Dataset,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    if n_train + n_val + n_test > ds.len() {
        return Err(DataError::InsufficientData(format!(
            "{} samples requested from {}",
            n_train + n_val + n_test,
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for v in by_class.iter_mut() {
        v.shuffle(&mut rng);
    }
    let counts = ds.class_counts();
    let mut avail = counts.clone();
    let mut cursor = vec![0; ds.n_classes];
    let mut pick = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<usize>, DataError> {
        let q = quotas(n, &counts, &avail)
            .ok_or_else(|| DataError::InsufficientData("cannot stratify".into()))?;
        let mut idx = Vec::with_capacity(n);
        for (c, &k) in q.iter().enumerate() {
            idx.extend_from_slice(&by_class[c][cursor[c]..cursor[c] + k]);
            cursor[c] += k;
            avail[c] -= k;
        }
        idx.shuffle(rng);
        Ok(idx)
    };
    let train = pick(n_train, &mut rng)?;
    let val = pick(n_val, &mut rng)?;
    let test = pick(n_test, &mut rng)?;
    Ok((ds.subset(&train), ds.subset(&val), ds.subset(&test)))
}

/// Normalises all three splits with statistics of the training split.
pub fn normalize_splits(train: &Dataset, val: &Dataset, test: &Dataset) -> (Dataset, Dataset, Dataset) {
    let stats = train.pixel_stats();
    (train.normalized(stats), val.normalized(stats), test.normalized(stats))
}

/// Symmetry applied independently to every split before normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Augment {
    #[serde(rename = "none")]
    None,
    /// Continuous random rotation.
    #[serde(rename = "rot")]
    Rot,
    /// Random element of the group (exact grid transforms).
    #[serde(rename = "group")]
    Group(PointGroup),
}

/// Seeded split → per-split augmentation → train-statistics normalisation.
/// Seeds come from `sub_seed(seed, "data", 0)` and `sub_seed(seed, "augment", split)`.
pub fn prepare_splits(
    pool: &Dataset,
    sizes: [usize; 3],
    augment: Augment,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let (tr, va, te) = subset_split(pool, sizes[0], sizes[1], sizes[2], sub_seed(seed, "data", 0))?;
    let aug = |d: Dataset, i: u64| match augment {
        Augment::None => d,
        Augment::Rot => rot_mnist(&d, sub_seed(seed, "augment", i)),
        Augment::Group(g) => group_augment(&d, g, sub_seed(seed, "augment", i)),
    };
    let (tr, va, te) = (aug(tr, 0), aug(va, 1), aug(te, 2));
    Ok(normalize_splits(&tr, &va, &te))
}
