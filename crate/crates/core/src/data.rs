//! Datasets for desk-scale runs: seeded synthetic blobs plus the MNIST IDX and
//! CIFAR-10 binary layouts.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Argument(format!(
                "label {bad} >= class count {classes}"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(channels, height, width)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_len(&self) -> usize {
        let (c, h, w) = self.image_shape();
        c * h * w
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let len = self.image_len();
        let (c, h, w) = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..][..len]);
        }
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `count` samples, order preserved.
    pub fn take(&self, count: usize) -> Self {
        let n = count.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx);
        Self {
            images,
            labels,
            classes: self.classes,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Per-channel affine normalization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(train: &Dataset) -> Self {
        let (c, h, w) = train.image_shape();
        let plane = h * w;
        let count = (train.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for (ch, (m, s)) in mean.iter_mut().zip(std.iter_mut()).enumerate() {
            let values = || {
                (0..train.len())
                    .flat_map(move |n| train.images.data()[(n * c + ch) * plane..][..plane].iter())
            };
            *m = values().sum::<f64>() / count;
            let var = values().map(|v| (v - *m) * (v - *m)).sum::<f64>() / count;
            *s = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let (c, h, w) = data.image_shape();
        let plane = h * w;
        let mut images = data.images.clone();
        for (i, v) in images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        Dataset {
            images,
            labels: data.labels.clone(),
            classes: data.classes,
            split: data.split,
        }
    }
}

/// Fits normalization on `train` and applies it to both splits.
pub fn normalize_splits(train: &Dataset, eval: &Dataset) -> (Dataset, Dataset, Normalization) {
    let norm = Normalization::fit(train);
    (norm.apply(train), norm.apply(eval), norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Prototype amplitude relative to unit-variance pixel noise.
    pub snr: f64,
    pub seed: u64,
}

const PROTOTYPE_STREAM: u64 = 0x5eed_0001;
const TRAIN_STREAM: u64 = 0x5eed_0002;
const EVAL_STREAM: u64 = 0x5eed_0003;

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

impl SynthSpec {
    /// One unit-RMS pattern per class: two Gaussian bumps of random sign per channel.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = stream(self.seed, PROTOTYPE_STREAM);
        let s = self.image_size;
        (0..self.classes)
            .map(|_| {
                let mut img = vec![0.0; self.channels * s * s];
                for ch in 0..self.channels {
                    for _ in 0..2 {
                        let cy = rng.random_range(0.0..s as f64);
                        let cx = rng.random_range(0.0..s as f64);
                        let sigma: f64 = rng.random_range(0.8..2.0);
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        for y in 0..s {
                            for x in 0..s {
                                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                                img[(ch * s + y) * s + x] +=
                                    sign * (-d2 / (2.0 * sigma * sigma)).exp();
                            }
                        }
                    }
                }
                let rms = (img.iter().map(|v| v * v).sum::<f64>() / img.len() as f64).sqrt();
                img.iter().map(|v| v / rms).collect()
            })
            .collect()
    }
}

/// Class-conditional Gaussian-pattern images, `per_class` of each class,
/// interleaved so sample `i` has label `i % classes`. Not normalized.
pub fn synth_blobs(spec: &SynthSpec, per_class: usize, split: Split) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.image_size == 0 || spec.channels == 0 || per_class == 0 {
        return Err(Error::Argument(
            "synthetic dataset extents must be positive".into(),
        ));
    }
    let protos = spec.prototypes();
    let mut rng = stream(
        spec.seed,
        match split {
            Split::Train => TRAIN_STREAM,
            Split::Eval => EVAL_STREAM,
        },
    );
    let n = per_class * spec.classes;
    let len = spec.channels * spec.image_size * spec.image_size;
    let mut data = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % spec.classes;
        for &p in &protos[y] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(spec.snr * p + noise);
        }
        labels.push(y);
    }
    let images = Tensor::new(
        vec![n, spec.channels, spec.image_size, spec.image_size],
        data,
    )?;
    Dataset::new(images, labels, spec.classes, split)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            message: format!("expected 4 header bytes, file has {} bytes", bytes.len()),
        })
}

/// Parses an IDX image file (magic 0x803, u8 pixels). Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(
    bytes: &[u8],
    limit: Option<usize>,
) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
            ),
        });
    }
    let (n, rows, cols) = (
        be_u32(bytes, 4)? as usize,
        be_u32(bytes, 8)? as usize,
        be_u32(bytes, 12)? as usize,
    );
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            message: format!(
                "expected {expected} bytes for {n} images of {rows}x{cols}, found {}",
                bytes.len()
            ),
        });
    }
    let keep = limit.map_or(n, |l| l.min(n));
    Ok((
        keep,
        rows,
        cols,
        bytes[16..16 + keep * rows * cols].to_vec(),
    ))
}

pub fn parse_idx_labels(bytes: &[u8], limit: Option<usize>) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
            ),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            offset: bytes.len().min(8 + n) as u64,
            message: format!(
                "expected {} bytes for {n} labels, found {}",
                8 + n,
                bytes.len()
            ),
        });
    }
    let keep = limit.map_or(n, |l| l.min(n));
    Ok(bytes[8..8 + keep].to_vec())
}

/// MNIST-format image/label pair; pixels scaled to `[0, 1]`, ten classes.
pub fn load_idx(
    images: &Path,
    labels: &Path,
    limit: Option<usize>,
    split: Split,
) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images)?, limit)?;
    let labels = parse_idx_labels(&read_file(labels)?, limit)?;
    if labels.len() != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{n} images but {} labels", labels.len()),
        });
    }
    let tensor = Tensor::new(
        vec![n, 1, rows, cols],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    Dataset::new(
        tensor,
        labels.into_iter().map(usize::from).collect(),
        10,
        split,
    )
}

/// Record geometry of the CIFAR binary layout: one label byte, then channel planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CifarLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for CifarLayout {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
        }
    }
}

impl CifarLayout {
    pub fn record_len(&self) -> usize {
        1 + self.channels * self.height * self.width
    }
}

pub fn parse_cifar(
    bytes: &[u8],
    layout: CifarLayout,
    limit: Option<usize>,
    split: Split,
) -> Result<Dataset> {
    let rec = layout.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        let whole = bytes.len() / rec;
        return Err(Error::Format {
            offset: (whole * rec) as u64,
            message: format!(
                "file length {} is not a positive multiple of the {rec}-byte record (expected {} bytes for {} records)",
                bytes.len(),
                (whole + 1) * rec,
                whole + 1
            ),
        });
    }
    let n = limit.map_or(bytes.len() / rec, |l| l.min(bytes.len() / rec));
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (rec - 1));
    for (i, r) in bytes.chunks_exact(rec).take(n).enumerate() {
        if r[0] >= 10 {
            return Err(Error::Format {
                offset: (i * rec) as u64,
                message: format!("label {} out of range for 10 classes", r[0]),
            });
        }
        labels.push(usize::from(r[0]));
        pixels.extend(r[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    let images = Tensor::new(
        vec![n, layout.channels, layout.height, layout.width],
        pixels,
    )?;
    Dataset::new(images, labels, 10, split)
}

pub fn load_cifar_binary(
    path: &Path,
    layout: CifarLayout,
    limit: Option<usize>,
    split: Split,
) -> Result<Dataset> {
    parse_cifar(&read_file(path)?, layout, limit, split)
}

/// Inverse of [`parse_cifar`]; pixel values are clamped to `[0, 1]` and rounded to bytes.
pub fn encode_cifar(data: &Dataset) -> Result<Vec<u8>> {
    if data.classes > 10 {
        return Err(Error::Argument("CIFAR layout stores labels 0..10".into()));
    }
    let len = data.image_len();
    let mut out = Vec::with_capacity(data.len() * (len + 1));
    for (i, &y) in data.labels.iter().enumerate() {
        out.push(y as u8);
        out.extend(
            data.images.data()[i * len..][..len]
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec {
            classes: 4,
            channels: 1,
            image_size: 8,
            snr: 1.0,
            seed,
        }
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let a = synth_blobs(&spec(3), 10, Split::Train).unwrap();
        let b = synth_blobs(&spec(3), 10, Split::Train).unwrap();
        assert_eq!(a.images().to_le_bytes(), b.images().to_le_bytes());
        let c = synth_blobs(&spec(4), 10, Split::Train).unwrap();
        assert_ne!(a.images(), c.images());
        let e = synth_blobs(&spec(3), 10, Split::Eval).unwrap();
        assert_ne!(a.images(), e.images());
    }

    #[test]
    fn synth_is_balanced() {
        let d = synth_blobs(&spec(1), 100, Split::Eval).unwrap();
        let mut counts = [0usize; 4];
        for &y in d.labels() {
            counts[y] += 1;
        }
        assert_eq!(counts, [100; 4]);
        // Majority-class baseline.
        assert_eq!(*counts.iter().max().unwrap() as f64 / d.len() as f64, 0.25);
    }

    #[test]
    fn synth_rejects_single_class() {
        let mut s = spec(1);
        s.classes = 1;
        assert!(synth_blobs(&s, 10, Split::Train).is_err());
    }

    #[test]
    fn nearest_prototype_probe_is_perfect_at_high_snr() {
        let mut s = spec(9);
        s.snr = 1e4;
        let d = synth_blobs(&s, 50, Split::Train).unwrap();
        let protos = s.prototypes();
        // Linear probe: score_k = <x, p_k> - snr/2 * ||p_k||^2.
        let len = 64;
        let mut correct = 0;
        for i in 0..d.len() {
            let x = &d.images().data()[i * len..][..len];
            let scores: Vec<f64> = protos
                .iter()
                .map(|p| {
                    let dot: f64 = x.iter().zip(p).map(|(a, b)| a * b).sum();
                    let nn: f64 = p.iter().map(|v| v * v).sum();
                    dot - 0.5 * s.snr * nn
                })
                .collect();
            if crate::model::argmax(&scores) == d.labels()[i] {
                correct += 1;
            }
        }
        assert_eq!(correct, d.len());
    }

    #[test]
    fn normalization_uses_train_statistics() {
        let tr = synth_blobs(&spec(2), 50, Split::Train).unwrap();
        let ev = synth_blobs(&spec(2), 10, Split::Eval).unwrap();
        let (ntr, nev, norm) = normalize_splits(&tr, &ev);
        let mean: f64 = ntr.images().sum() / ntr.images().len() as f64;
        let var: f64 =
            ntr.images().data().iter().map(|v| v * v).sum::<f64>() / ntr.images().len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        assert_eq!(nev, norm.apply(&ev));
        assert_eq!(Normalization::fit(&tr), norm);
    }

    #[test]
    fn single_cifar_record() {
        let layout = CifarLayout::default();
        let mut bytes = vec![7u8];
        bytes.extend((0..3072).map(|i| (i % 251) as u8));
        assert_eq!(bytes.len(), 3073);
        let d = parse_cifar(&bytes, layout, None, Split::Train).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.labels(), &[7]);
        assert_eq!(d.image_shape(), (3, 32, 32));
        assert_eq!(
            d.images().data()[1024],
            f64::from((1024 % 251) as u8) / 255.0
        );
    }

    #[test]
    fn truncated_cifar_names_lengths() {
        let bytes = vec![1u8; 3073 + 100];
        let err = parse_cifar(&bytes, CifarLayout::default(), None, Split::Train).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format { offset: 3073, .. }), "{msg}");
        assert!(msg.contains("3173") && msg.contains("6146"), "{msg}");
    }

    #[test]
    fn cifar_round_trip_is_exact() {
        let s = SynthSpec {
            classes: 10,
            channels: 3,
            image_size: 32,
            snr: 2.0,
            seed: 5,
        };
        let raw = synth_blobs(&s, 2, Split::Train).unwrap();
        // Quantize to representable pixels first.
        let pixels = Tensor::new(
            raw.images().shape().to_vec(),
            raw.images()
                .data()
                .iter()
                .map(|v| ((v * 0.1 + 0.5).clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
        )
        .unwrap();
        let d = Dataset::new(pixels, raw.labels().to_vec(), 10, Split::Train).unwrap();
        let bytes = encode_cifar(&d).unwrap();
        assert_eq!(bytes.len(), 20 * 3073);
        let back = parse_cifar(&bytes, CifarLayout::default(), None, Split::Train).unwrap();
        assert_eq!(back, d);
        assert_eq!(
            parse_cifar(&bytes, CifarLayout::default(), Some(3), Split::Train).unwrap(),
            d.take(3)
        );
    }

    fn idx_images(n: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [n, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend((0..n * rows * cols).map(|i| (i * 7 % 256) as u8));
        b
    }

    #[test]
    fn idx_parse_and_errors() {
        let bytes = idx_images(3, 4, 5);
        let (n, r, c, px) = parse_idx_images(&bytes, None).unwrap();
        assert_eq!((n, r, c, px.len()), (3, 4, 5, 60));
        assert_eq!(parse_idx_images(&bytes, Some(2)).unwrap().0, 2);

        let err = parse_idx_images(&bytes[..bytes.len() - 1], None)
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("expected 76 bytes") && err.contains("found 75"),
            "{err}"
        );
        let mut bad = bytes.clone();
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&bad, None),
            Err(Error::Format { offset: 0, .. })
        ));

        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend(3u32.to_be_bytes());
        labels.extend([1u8, 0, 9]);
        assert_eq!(parse_idx_labels(&labels, None).unwrap(), vec![1, 0, 9]);
        assert!(parse_idx_labels(&labels[..10], None).is_err());
    }

    #[test]
    fn idx_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        std::fs::write(&ip, idx_images(2, 4, 4)).unwrap();
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend(2u32.to_be_bytes());
        labels.extend([3u8, 8]);
        std::fs::write(&lp, labels).unwrap();
        let d = load_idx(&ip, &lp, None, Split::Train).unwrap();
        assert_eq!(d.labels(), &[3, 8]);
        assert_eq!(d.image_shape(), (1, 4, 4));
        assert!(load_idx(&dir.path().join("missing"), &lp, None, Split::Train).is_err());
    }
}
