//! Datasets with stable example indices: synthetic 2-D generators and an
//! IDX (MNIST-style) loader.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Range of valid input values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Images in `[0, 1]`.
    Unit,
    /// Synthetic points; attacks never clamp.
    Unbounded,
}

impl Domain {
    pub fn clamp(self) -> Option<(f32, f32)> {
        match self {
            Domain::Unit => Some((0.0, 1.0)),
            Domain::Unbounded => None,
        }
    }
}

/// Examples and labels; example `i` is always row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub domain: Domain,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, domain: Domain) -> Result<Self> {
        if inputs.batch() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.batch(),
                labels: labels.len(),
            });
        }
        if classes < 2 {
            return Err(Error::Config(format!("need ≥ 2 classes, got {classes}")));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one example.
    pub fn input_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels of the given example indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (inputs, labels) = self.batch(indices);
        Dataset {
            inputs,
            labels,
            classes: self.classes,
            domain: self.domain,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Two interleaving half circles. Even indices sit on the upper arc
/// `(cos t, sin t)`, odd ones on the lower arc `(1 − cos t, ½ − sin t)`,
/// `t ~ U[0, π]`, plus isotropic Gaussian noise.
pub fn two_moons(n: usize, noise_sd: f32, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("two_moons needs n ≥ 2, got {n}")));
    }
    let normal = Normal::new(0.0f32, noise_sd)
        .map_err(|e| Error::Config(format!("noise sd {noise_sd}: {e}")))?;
    let mut rng = rng::stream(seed, Stream::Data, &[0]);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t: f32 = rng.random_range(0.0..=PI);
        let label = i % 2;
        let (px, py) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let (nx, ny) = if noise_sd > 0.0 {
            (normal.sample(&mut rng), normal.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        data.push(px + nx);
        data.push(py + ny);
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2, Domain::Unbounded)
}

/// One isotropic Gaussian cluster per center; example `i` belongs to
/// center `i mod k`.
pub fn gaussian_blobs(n: usize, centers: &[Vec<f32>], sd: f32, seed: u64) -> Result<Dataset> {
    if centers.len() < 2 {
        return Err(Error::Config("gaussian_blobs needs ≥ 2 centers".into()));
    }
    let dim = centers[0].len();
    if dim == 0 || centers.iter().any(|c| c.len() != dim) {
        return Err(Error::Config(
            "blob centers must share a positive dimension".into(),
        ));
    }
    if n == 0 {
        return Err(Error::Config("gaussian_blobs needs n ≥ 1".into()));
    }
    let normal =
        Normal::new(0.0f32, sd).map_err(|e| Error::Config(format!("blob sd {sd}: {e}")))?;
    let mut rng = rng::stream(seed, Stream::Data, &[1]);
    let k = centers.len();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for &m in &centers[c] {
            data.push(if sd > 0.0 {
                m + normal.sample(&mut rng)
            } else {
                m
            });
        }
        labels.push(c);
    }
    Dataset::new(
        Tensor::new(vec![n, dim], data)?,
        labels,
        k,
        Domain::Unbounded,
    )
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_magic(r: &mut Reader<'_>, expected: u32) -> Result<()> {
    let found = r.u32_be("IDX magic")?;
    if found != expected {
        return Err(Error::BadMagic {
            expected: format!("{expected:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

/// Parses an IDX image file into `[N, 1, rows, cols]` values in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, IDX_IMAGES_MAGIC)?;
    let n = r.u32_be("IDX image count")? as usize;
    let rows = r.u32_be("IDX rows")? as usize;
    let cols = r.u32_be("IDX cols")? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::IdxDimensions(format!("{n}×{rows}×{cols}")));
    }
    let pixels = r.take(n * rows * cols, "IDX pixels")?;
    if !r.at_end() {
        return Err(Error::IdxDimensions(format!(
            "{} trailing bytes after {n}×{rows}×{cols} pixels",
            r.remaining()
        )));
    }
    let data = pixels.iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, IDX_LABELS_MAGIC)?;
    let n = r.u32_be("IDX label count")? as usize;
    let labels = r.take(n, "IDX labels")?;
    if !r.at_end() {
        return Err(Error::IdxDimensions(format!(
            "{} trailing bytes after {n} labels",
            r.remaining()
        )));
    }
    Ok(labels.iter().map(|&b| usize::from(b)).collect())
}

/// Loads a pair of IDX files. The class count is one past the largest label
/// (at least 2).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let inputs = parse_idx_images(&read_file(images)?)?;
    let labels = parse_idx_labels(&read_file(labels)?)?;
    if inputs.batch() != labels.len() {
        return Err(Error::CountMismatch {
            images: inputs.batch(),
            labels: labels.len(),
        });
    }
    let classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    Dataset::new(inputs, labels, classes, Domain::Unit)
}

/// Encodes `[N, 1, rows, cols]` (or `[N, rows, cols]`) values in `[0, 1]`
/// as an IDX image file, rounding to the nearest gray level.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let s = images.shape();
    let (n, rows, cols) = match s {
        [n, 1, r, c] | [n, r, c] => (*n, *r, *c),
        _ => return Err(Error::IdxDimensions(format!("cannot encode shape {s:?}"))),
    };
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend(
        images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(
            u8::try_from(l)
                .map_err(|_| Error::IdxDimensions(format!("label {l} does not fit in one byte")))?,
        );
    }
    Ok(out)
}

/// Writes a dataset as an IDX image file and an IDX label file.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    fs::write(images, encode_idx_images(&dataset.inputs)?).map_err(|e| Error::io(images, e))?;
    fs::write(labels, encode_idx_labels(&dataset.labels)?).map_err(|e| Error::io(labels, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let d = two_moons(100, 0.0, 3).unwrap();
        assert_eq!(d.class_counts(), vec![50, 50]);
        for i in 0..d.len() {
            let p = d.inputs.row(i);
            let (cx, cy) = if d.labels[i] == 0 {
                (0.0, 0.0)
            } else {
                (1.0, 0.5)
            };
            let r = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-6);
            if d.labels[i] == 0 {
                assert!(p[1] >= 0.0);
            } else {
                assert!(p[1] <= 0.5);
            }
        }
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(
            two_moons(50, 0.1, 1).unwrap(),
            two_moons(50, 0.1, 1).unwrap()
        );
        assert_ne!(
            two_moons(50, 0.1, 1).unwrap(),
            two_moons(50, 0.1, 2).unwrap()
        );
        let c = vec![vec![0.0, 0.0], vec![3.0, 3.0], vec![-3.0, 3.0]];
        assert_eq!(
            gaussian_blobs(30, &c, 0.5, 4).unwrap(),
            gaussian_blobs(30, &c, 0.5, 4).unwrap()
        );
        assert_eq!(two_moons(7, 0.1, 1).unwrap().class_counts(), vec![4, 3]);
    }

    #[test]
    fn blobs_without_noise_sit_on_centers() {
        let c = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let d = gaussian_blobs(99, &c, 0.0, 0).unwrap();
        assert_eq!(d.class_counts(), vec![33, 33, 33]);
        for i in 0..d.len() {
            assert_eq!(d.inputs.row(i), c[d.labels[i]].as_slice());
        }
    }

    #[test]
    fn idx_parsing() {
        let labels = [0u8, 0, 8, 1, 0, 0, 0, 3, 2, 0, 1];
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![2, 0, 1]);
        let mut img = vec![0u8, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2];
        img.extend([255, 0]);
        let t = parse_idx_images(&img).unwrap();
        assert_eq!(t.shape(), &[1, 1, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0]);
        assert!(matches!(
            parse_idx_images(&labels),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            parse_idx_images(&img[..17]),
            Err(Error::Truncated(_))
        ));
    }
}
