//! Datasets: IDX image files and synthetic Gaussian blobs.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::validation("dataset must hold at least one sample"));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor<f32> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Shape of one sample (the input shape without the batch dimension).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels for the given rows.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let x = self.inputs.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, y) = self.batch(indices)?;
        Dataset::new(x, y, self.num_classes)
    }

    /// Same samples with each input flattened to a vector.
    pub fn flattened(&self) -> Dataset {
        let shape = vec![self.inputs.rows(), self.inputs.row_len()];
        Dataset {
            inputs: self.inputs.reshaped(shape).expect("same element count"),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Ingestion {
            offset: offset as u64,
            message: format!("truncated file while reading {what}"),
        })
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Ingestion {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let need = count * rows * cols;
    let pixels = &bytes[16..];
    if pixels.len() < need {
        return Err(Error::Ingestion {
            offset: bytes.len() as u64,
            message: format!("truncated pixel data: need {need} bytes after header, found {}", pixels.len()),
        });
    }
    Ok((count, rows, cols, &pixels[..need]))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Ingestion {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_u32(bytes, 4, "label count")? as usize;
    let labels = &bytes[8..];
    if labels.len() < count {
        return Err(Error::Ingestion {
            offset: bytes.len() as u64,
            message: format!("truncated label data: need {count} bytes after header, found {}", labels.len()),
        });
    }
    Ok(&labels[..count])
}

/// Builds a dataset of `[N, 1, rows, cols]` images with pixels scaled to
/// `[0, 1]`.
pub fn dataset_from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != count {
        return Err(Error::Ingestion {
            offset: 4,
            message: format!("{count} images but {} labels", labels.len()),
        });
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::Ingestion {
            offset: 4,
            message: "IDX file holds no samples".into(),
        });
    }
    let inputs = Tensor::new(
        vec![count, 1, rows, cols],
        pixels.iter().map(|&p| f32::from(p) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(inputs, labels, num_classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| {
        fs::read(p).map_err(|e| Error::File {
            path: p.to_path_buf(),
            message: e.to_string(),
        })
    };
    let images = read(images_path.as_ref())?;
    let labels = read(labels_path.as_ref())?;
    dataset_from_idx(&images, &labels)
}

/// Unit-norm class centres. They depend only on `(num_classes, dim)`, so
/// training and test sets drawn with different seeds share them.
pub fn blob_means(num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(0, &[tag::MEANS, num_classes as u64, dim as u64]);
    (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Gaussian blobs around [`blob_means`]; sample `i` has label
/// `i % num_classes`, so classes are balanced to within one.
pub fn synth_blobs(n: usize, num_classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if num_classes < 2 || dim == 0 {
        return Err(Error::validation(format!(
            "synthetic blobs need at least two classes and a positive dimension, got {num_classes} classes, dim {dim}"
        )));
    }
    if n < num_classes {
        return Err(Error::validation(format!(
            "need at least one sample per class: n = {n} < {num_classes} classes"
        )));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::validation(format!("spread must be finite and non-negative, got {spread}")));
    }
    let means = blob_means(num_classes, dim);
    let mut rng = rng::stream(seed, &[tag::SYNTH]);
    let mut values = Vec::with_capacity(n * dim);
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    for &label in &labels {
        for &m in &means[label] {
            let noise: f64 = rng.sample(StandardNormal);
            values.push((m + spread * noise) as f32);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], values)?, labels, num_classes)
}
