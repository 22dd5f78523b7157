//! CIFAR-10 binary ingestion and a synthetic stand-in dataset.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CfdrError, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const CIFAR_CLASSES: usize = 10;

pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Cifar10Binary,
    SyntheticBlobs,
}

/// 32×32×3 byte images in CIFAR planar layout (1024 R, 1024 G, 1024 B).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Option<Vec<u8>>,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Option<Vec<u8>>, split: Split, provenance: Provenance) -> Result<Self> {
        if pixels.len() % IMAGE_BYTES != 0 {
            return Err(CfdrError::Data(format!(
                "pixel buffer of {} bytes is not a whole number of images",
                pixels.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() * IMAGE_BYTES != pixels.len() {
                return Err(CfdrError::Data("label count does not match image count".into()));
            }
        }
        Ok(Dataset {
            pixels,
            labels,
            split,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / IMAGE_BYTES
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn labels_usize(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| l.iter().map(|&b| b as usize).collect())
    }

    /// `[N, 3, 32, 32]` with pixels scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = self.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        Tensor::new(vec![self.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut pixels = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        let mut labels = self.labels.as_ref().map(|_| Vec::with_capacity(indices.len()));
        for &i in indices {
            if i >= self.len() {
                return Err(CfdrError::OutOfRange {
                    what: "dataset index",
                    value: i,
                    limit: self.len(),
                });
            }
            pixels.extend_from_slice(&self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]);
            if let (Some(dst), Some(src)) = (labels.as_mut(), self.labels.as_ref()) {
                dst.push(src[i]);
            }
        }
        Dataset::new(pixels, labels, self.split, self.provenance)
    }

    /// Contiguous range `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (start..end).collect();
        self.subset(&idx)
    }

    /// Same images with labels removed.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    /// Re-encodes labeled data as CIFAR-10 binary records.
    pub fn to_cifar_bytes(&self) -> Result<Vec<u8>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| CfdrError::Data("CIFAR records need labels".into()))?;
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for (i, &l) in labels.iter().enumerate() {
            out.push(l);
            out.extend_from_slice(&self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]);
        }
        Ok(out)
    }
}

/// Parses concatenated 3073-byte CIFAR-10 records.
pub fn parse_cifar_records(bytes: &[u8], split: Split, source: &str) -> Result<Dataset> {
    if bytes.len() % RECORD_BYTES != 0 {
        let n = bytes.len() / RECORD_BYTES;
        return Err(CfdrError::Data(format!(
            "{source}: size {} is not a multiple of {RECORD_BYTES} (expected {} or {} bytes)",
            bytes.len(),
            n * RECORD_BYTES,
            (n + 1) * RECORD_BYTES
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(CfdrError::Data(format!(
                "{source}: record {i} has label {} (valid range 0-9)",
                rec[0]
            )));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::new(pixels, Some(labels), split, Provenance::Cifar10Binary)
}

pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<&str> = match split {
        Split::Train => CIFAR_TRAIN_FILES.to_vec(),
        Split::Test => vec![CIFAR_TEST_FILE],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CfdrError::Data(format!("missing CIFAR-10 file {}", path.display()))
            } else {
                CfdrError::io(&path, e)
            }
        })?;
        let part = parse_cifar_records(&bytes, split, &path.display().to_string())?;
        pixels.extend_from_slice(part.pixels());
        labels.extend_from_slice(part.labels().expect("cifar records are labeled"));
    }
    Dataset::new(pixels, Some(labels), split, Provenance::Cifar10Binary)
}

fn hue_to_rgb(h: f32) -> [f32; 3] {
    let h6 = (h.fract()) * 6.0;
    let x = 1.0 - ((h6 % 2.0) - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Class-colored Gaussian blobs on grey noise. Class `c` takes hue
/// `c / classes`; blob position and width vary per image.
pub fn make_synthetic_blobs(n: usize, classes: usize, seed: u64, split: Split) -> Result<Dataset> {
    if n == 0 {
        return Err(CfdrError::InvalidConfig("synthetic dataset needs n > 0".into()));
    }
    if classes == 0 || classes > 256 || n < classes {
        return Err(CfdrError::InvalidConfig(format!(
            "synthetic dataset needs 1 <= classes <= min(n, 256), got n={n} classes={classes}"
        )));
    }
    let tag = match split {
        Split::Train => "blobs-train",
        Split::Test => "blobs-test",
    };
    let mut r = rng::substream(seed, tag, 0);
    let side = IMAGE_SIDE;
    let plane = side * side;
    let mut pixels = vec![0u8; n * IMAGE_BYTES];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = r.gen_range(0..classes);
        labels.push(label as u8);
        let color = hue_to_rgb(label as f32 / classes as f32);
        let cx: f32 = r.gen_range(9.0..23.0);
        let cy: f32 = r.gen_range(9.0..23.0);
        let sigma: f32 = r.gen_range(4.0..7.0);
        let img = &mut pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES];
        for y in 0..side {
            for x in 0..side {
                let bg: f32 = r.gen_range(0.15..0.55);
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                let alpha = (-d2 / (2.0 * sigma * sigma)).exp();
                for (c, &col) in color.iter().enumerate() {
                    let v = bg * (1.0 - alpha) + col * alpha;
                    img[c * plane + y * side + x] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Dataset::new(pixels, Some(labels), split, Provenance::SyntheticBlobs)
}
