//! Datasets, IDX loading, synthetic class blobs and Poisson batch sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::DetRng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// In-memory labelled examples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    example_shape: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        example_shape: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let dim: usize = example_shape.iter().product();
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} labels of shape {example_shape:?} need {} values, got {}",
                labels.len(),
                labels.len() * dim,
                inputs.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Config(format!("label {bad} outside 0..{n_classes}")));
        }
        Ok(Self {
            inputs,
            labels,
            example_shape,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.example_shape
    }

    pub fn example_size(&self) -> usize {
        self.example_shape.iter().product()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let d = self.example_size();
        &self.inputs[i * d..(i + 1) * d]
    }

    /// Gathers `indices` into a `[n, ...shape]` batch and its labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Batch("empty index set".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.example_size());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Batch(format!("index {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(self.example(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.example_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (batch, labels) = self.batch(indices)?;
        Dataset::new(batch.into_data(), labels, self.example_shape.clone(), self.n_classes)
    }

    /// Seeded shuffle, then the first `holdout` fraction becomes the second set.
    pub fn split(&self, holdout: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(holdout > 0.0 && holdout < 1.0) {
            return Err(Error::Config(format!("holdout fraction {holdout} outside (0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut DetRng::seed_from_u64(seed));
        let n_hold = ((self.len() as f64) * holdout).round() as usize;
        let n_hold = n_hold.clamp(1, self.len().saturating_sub(1));
        let (hold, keep) = order.split_at(n_hold);
        Ok((self.subset(keep)?, self.subset(hold)?))
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset,
            message: format!("header truncated: need {} bytes, file has {}", offset + 4, bytes.len()),
        })
}

/// Parses an IDX image file (`0x00000803`) into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(bytes, 4, path)? as usize;
    let rows = read_u32_be(bytes, 8, path)? as usize;
    let cols = read_u32_be(bytes, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected),
            message: format!("expected {expected} bytes for {count}x{rows}x{cols}, found {}", bytes.len()),
        });
    }
    let pixels = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((count, rows, cols, pixels))
}

/// Parses an IDX label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(bytes, 4, path)? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected),
            message: format!("expected {expected} bytes for {count} labels, found {}", bytes.len()),
        });
    }
    Ok(bytes[8..].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image/label pair, scaling pixels into `[0, 1]`.
pub fn load_idx_dataset(images: &Path, labels: &Path, n_classes: usize) -> Result<Dataset> {
    let img_bytes = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (count, rows, cols, pixels) = parse_idx_images(&img_bytes, images)?;
    let label_values = parse_idx_labels(&lbl_bytes, labels)?;
    if label_values.len() != count {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            offset: 4,
            message: format!("{} labels for {count} images", label_values.len()),
        });
    }
    if let Some(pos) = label_values.iter().position(|&l| l >= n_classes) {
        return Err(Error::Format {
            path: labels.to_path_buf(),
            offset: 8 + pos,
            message: format!("label {} outside 0..{n_classes}", label_values[pos]),
        });
    }
    Dataset::new(pixels, label_values, vec![1, rows, cols], n_classes)
}

/// Serializes images and labels in IDX format; the inverse of the loaders
/// for pixel values that are multiples of 1/255.
pub fn encode_idx(images: &[u8], count: usize, rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(images);
    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    (img, lbl)
}

/// Gaussian class blobs with unit within-class variance.
///
/// Class means are orthogonal (when `dim >= n_classes`) and pairwise
/// `separation` apart. `example_shape` lets the blobs be fed to a
/// convolutional network; its product must equal `dim`.
pub fn synth_dataset(
    n_classes: usize,
    n_per_class: usize,
    example_shape: &[usize],
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(separation >= 0.0) {
        return Err(Error::Config(format!("separation must be >= 0, got {separation}")));
    }
    if n_classes < 2 || n_per_class == 0 {
        return Err(Error::Config("need at least two classes and one example per class".into()));
    }
    let dim: usize = example_shape.iter().product();
    let mut rng = DetRng::seed_from_u64(seed);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        if means.len() < dim {
            for m in &means {
                let dot: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(m).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        means.push(v);
    }
    let radius = separation / std::f64::consts::SQRT_2;

    let mut order: Vec<usize> = (0..n_classes * n_per_class).map(|i| i % n_classes).collect();
    order.shuffle(&mut rng);
    let mut inputs = Vec::with_capacity(order.len() * dim);
    for &class in &order {
        for &m in &means[class] {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs.push(radius * m + z);
        }
    }
    Dataset::new(inputs, order, example_shape.to_vec(), n_classes)
}

/// Indices of one Poisson-sampled batch: each of `n` examples joins
/// independently with probability `q`.
pub fn poisson_sample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Vec<usize> {
    if q >= 1.0 {
        return (0..n).collect();
    }
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

/// Endless stream of Poisson-sampled index sets.
pub struct PoissonBatches<R> {
    n: usize,
    q: f64,
    rng: R,
}

pub fn poisson_batches<R: Rng>(n: usize, q: f64, rng: R) -> Result<PoissonBatches<R>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("sample rate {q} outside (0, 1]")));
    }
    Ok(PoissonBatches { n, q, rng })
}

impl<R: Rng> Iterator for PoissonBatches<R> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(poisson_sample(self.n, self.q, &mut self.rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, img: &[u8], lbl: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let a = dir.join("images.idx");
        let b = dir.join("labels.idx");
        std::fs::write(&a, img).unwrap();
        std::fs::write(&b, lbl).unwrap();
        (a, b)
    }

    #[test]
    fn idx_header_echo() {
        let dir = tempfile::tempdir().unwrap();
        let count = 10_000;
        let pixels: Vec<u8> = (0..count * 28 * 28).map(|i| (i % 256) as u8).collect();
        let labels: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
        let (img, lbl) = encode_idx(&pixels, count, 28, 28, &labels);
        let (a, b) = write_pair(dir.path(), &img, &lbl);
        let ds = load_idx_dataset(&a, &b, 10).unwrap();
        assert_eq!(ds.len(), 10_000);
        assert_eq!(ds.example_shape(), &[1, 28, 28]);
        assert!(ds.example(0).iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.example(0)[255], 1.0);
    }

    #[test]
    fn idx_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = encode_idx(&[0u8; 2 * 4], 2, 2, 2, &[0, 1]);
        let (a, b) = write_pair(dir.path(), &img[..img.len() - 3], &lbl);
        let err = load_idx_dataset(&a, &b, 10).unwrap_err().to_string();
        assert!(err.contains("expected 24 bytes") && err.contains("found 21"), "{err}");
    }

    #[test]
    fn idx_bad_magic_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lbl) = encode_idx(&[0u8; 4], 1, 2, 2, &[3]);
        let (a, b) = write_pair(dir.path(), &img, &lbl);
        let err = load_idx_dataset(&a, &b, 3).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 8, .. }), "{err}");

        img[3] = 0x01;
        let (a, b) = write_pair(dir.path(), &img, &lbl);
        assert!(matches!(
            load_idx_dataset(&a, &b, 10).unwrap_err(),
            Error::Format { offset: 0, .. }
        ));
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = synth_dataset(3, 20, &[8], 4.0, 1).unwrap();
        let b = synth_dataset(3, 20, &[8], 4.0, 1).unwrap();
        let c = synth_dataset(3, 20, &[8], 4.0, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 60);
        assert!(synth_dataset(3, 20, &[8], -1.0, 1).is_err());
    }

    #[test]
    fn split_sizes() {
        let ds = synth_dataset(2, 50, &[4], 4.0, 0).unwrap();
        let (train, val) = ds.split(0.1, 3).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(val.len(), 10);
    }

    #[test]
    fn poisson_full_rate() {
        let mut rng = DetRng::seed_from_u64(0);
        assert_eq!(poisson_sample(7, 1.0, &mut rng), (0..7).collect::<Vec<_>>());
        assert!(poisson_batches(7, 0.0, DetRng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn poisson_mean_batch_size() {
        let n = 1000;
        let q = 0.05;
        let draws = 10_000;
        let total: usize = poisson_batches(n, q, DetRng::seed_from_u64(4))
            .unwrap()
            .take(draws)
            .map(|b| b.len())
            .sum();
        let mean = total as f64 / draws as f64;
        assert!((mean / (q * n as f64) - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn tiny_rates_give_empty_batches() {
        let empties = poisson_batches(10, 0.01, DetRng::seed_from_u64(5))
            .unwrap()
            .take(100)
            .filter(|b| b.is_empty())
            .count();
        assert!(empties > 50);
    }
}
