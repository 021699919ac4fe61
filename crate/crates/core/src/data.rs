//! Datasets: CIFAR binary files, synthetic desk-scale tasks, batching and
//! augmentation.
//!
//! CIFAR records are `label byte(s) | 1024 R | 1024 G | 1024 B`, each plane
//! row-major. Pixels are mapped from `[0, 255]` to `[0, 1]` and nothing
//! else. The last 5000 training records, in file order, form the
//! validation split.

use std::path::Path;
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::DenseArray;
use crate::error::{Error, Result};
use crate::nn::checkpoint::Container;
use crate::rng::{self, Rng};

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_TRAIN_FILE: usize = 10_000;
pub const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";
pub const CIFAR100_TRAIN_FILE: &str = "train.bin";
pub const CIFAR100_TEST_FILE: &str = "test.bin";
pub const VALIDATION_SIZE: usize = 5_000;
pub const DEFAULT_PAD: usize = 4;
/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "SUPERMASK_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[N, …]`: `[N, 3, 32, 32]` for CIFAR, `[N, D]` for vector tasks.
    pub images: DenseArray,
    pub labels: Vec<usize>,
    pub split: Split,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: DenseArray, labels: Vec<usize>, split: Split, n_classes: usize) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Input(format!("label {l} out of range for {n_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            split,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn batch(&self, indices: &[usize]) -> (DenseArray, Vec<usize>) {
        let d = self.sample_len();
        let src = self.images.values();
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            values.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (DenseArray::new(shape, values).expect("batch shape"), labels)
    }

    /// Contiguous sub-range `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Self {
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = self.batch(&idx);
        Self {
            images,
            labels,
            split,
            n_classes: self.n_classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

/// Records of one CIFAR binary file, before normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCifarBatch {
    /// 1 for CIFAR-10, 2 for CIFAR-100 (coarse, fine).
    pub label_bytes: usize,
    /// Coarse labels (CIFAR-100 only).
    pub coarse: Vec<u8>,
    /// Class labels (fine labels for CIFAR-100).
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl RawCifarBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn record_bytes(&self) -> usize {
        self.label_bytes + CIFAR_IMAGE_BYTES
    }
}

pub fn parse_cifar_records(bytes: &[u8], label_bytes: usize, expected_records: Option<usize>) -> Result<RawCifarBatch> {
    let rec = label_bytes + CIFAR_IMAGE_BYTES;
    if let Some(n) = expected_records {
        if bytes.len() != n * rec {
            return Err(Error::Format(format!(
                "CIFAR file size mismatch: expected {} bytes ({n} records of {rec}), found {}",
                n * rec,
                bytes.len()
            )));
        }
    } else if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format(format!(
            "CIFAR file size {} is not a multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut out = RawCifarBatch {
        label_bytes,
        coarse: Vec::with_capacity(if label_bytes == 2 { n } else { 0 }),
        labels: Vec::with_capacity(n),
        pixels: Vec::with_capacity(n * CIFAR_IMAGE_BYTES),
    };
    for r in bytes.chunks_exact(rec) {
        if label_bytes == 2 {
            out.coarse.push(r[0]);
        }
        out.labels.push(r[label_bytes - 1]);
        out.pixels.extend_from_slice(&r[label_bytes..]);
    }
    Ok(out)
}

/// Inverse of [`parse_cifar_records`].
pub fn encode_cifar_records(raw: &RawCifarBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(raw.len() * raw.record_bytes());
    for (i, &label) in raw.labels.iter().enumerate() {
        if raw.label_bytes == 2 {
            out.push(raw.coarse[i]);
        }
        out.push(label);
        out.extend_from_slice(&raw.pixels[i * CIFAR_IMAGE_BYTES..(i + 1) * CIFAR_IMAGE_BYTES]);
    }
    out
}

pub fn read_cifar_file(path: &Path, label_bytes: usize, expected_records: Option<usize>) -> Result<RawCifarBatch> {
    let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    parse_cifar_records(&bytes, label_bytes, expected_records)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn raw_to_dataset(raw: &RawCifarBatch, start: usize, end: usize, split: Split, n_classes: usize) -> Result<LabeledDataset> {
    let pixels = &raw.pixels[start * CIFAR_IMAGE_BYTES..end * CIFAR_IMAGE_BYTES];
    let values = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    let images = DenseArray::new(vec![end - start, 3, 32, 32], values)?;
    let labels = raw.labels[start..end].iter().map(|&l| usize::from(l)).collect();
    LabeledDataset::new(images, labels, split, n_classes).map_err(|e| Error::Format(e.to_string()))
}

fn concat(batches: Vec<RawCifarBatch>) -> RawCifarBatch {
    let label_bytes = batches[0].label_bytes;
    let mut out = RawCifarBatch {
        label_bytes,
        coarse: Vec::new(),
        labels: Vec::new(),
        pixels: Vec::new(),
    };
    for b in batches {
        out.coarse.extend(b.coarse);
        out.labels.extend(b.labels);
        out.pixels.extend(b.pixels);
    }
    out
}

fn split_train(train: &RawCifarBatch, test: &RawCifarBatch, n_classes: usize) -> Result<Splits> {
    let n = train.len();
    if n <= VALIDATION_SIZE {
        return Err(Error::Format(format!("only {n} training records; need more than {VALIDATION_SIZE}")));
    }
    let cut = n - VALIDATION_SIZE;
    Ok(Splits {
        train: raw_to_dataset(train, 0, cut, Split::Train, n_classes)?,
        val: raw_to_dataset(train, cut, n, Split::Val, n_classes)?,
        test: raw_to_dataset(test, 0, test.len(), Split::Test, n_classes)?,
    })
}

/// Loads the five CIFAR-10 training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Splits> {
    let train = CIFAR10_TRAIN_FILES
        .iter()
        .map(|f| read_cifar_file(&dir.join(f), 1, Some(CIFAR_RECORDS_PER_TRAIN_FILE)))
        .collect::<Result<Vec<_>>>()?;
    let test = read_cifar_file(&dir.join(CIFAR10_TEST_FILE), 1, Some(10_000))?;
    split_train(&concat(train), &test, 10)
}

/// Loads CIFAR-100 (`train.bin`, `test.bin`), keeping the fine labels.
pub fn load_cifar100(dir: &Path) -> Result<Splits> {
    let train = read_cifar_file(&dir.join(CIFAR100_TRAIN_FILE), 2, Some(50_000))?;
    let test = read_cifar_file(&dir.join(CIFAR100_TEST_FILE), 2, Some(10_000))?;
    split_train(&train, &test, 100)
}

/// Pads one `C×H×W` image with `pad` zeros, crops back to `H×W` at offset
/// `(dy, dx)` of the padded image, and optionally mirrors it horizontally.
pub fn augment_image(img: &[f32], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy as usize >= h {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx as usize >= w {
                    continue;
                }
                let tx = if flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + tx] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Random zero-pad-and-crop plus horizontal flip with probability 0.5, per
/// image of an `[N, C, H, W]` batch.
pub fn augment(batch: &DenseArray, pad: usize, rng: &mut Rng) -> Result<DenseArray> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::Input(format!("augmentation needs [N, C, H, W] images, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = c * h * w;
    let mut values = Vec::with_capacity(batch.len());
    for i in 0..n {
        let dy = rng.random_range(0..=2 * pad);
        let dx = rng.random_range(0..=2 * pad);
        let flip = rng.random_bool(0.5);
        values.extend(augment_image(&batch.values()[i * d..(i + 1) * d], c, h, w, pad, dy, dx, flip));
    }
    DenseArray::new(s.to_vec(), values)
}

fn split_sizes(n: usize) -> (usize, usize) {
    let val = (n * 15 / 100).max(1);
    let test = (n * 15 / 100).max(1);
    (val, test)
}

fn into_splits(images: Vec<f32>, labels: Vec<usize>, sample: &[usize], n_classes: usize) -> Result<Splits> {
    let n = labels.len();
    let (nv, nt) = split_sizes(n);
    let mut shape = vec![n];
    shape.extend_from_slice(sample);
    let all = LabeledDataset::new(DenseArray::new(shape, images)?, labels, Split::Train, n_classes)?;
    let cut1 = n - nv - nt;
    let cut2 = n - nt;
    Ok(Splits {
        train: all.slice(0, cut1, Split::Train),
        val: all.slice(cut1, cut2, Split::Val),
        test: all.slice(cut2, n, Split::Test),
    })
}

/// Two Gaussian blobs in the plane, mirror images through the origin, so a
/// bias-free network can separate them. 70/15/15 train/val/test.
pub fn make_synthetic_task(n: usize, seed: u64) -> Result<Splits> {
    if n < 8 {
        return Err(Error::Config("synthetic task needs at least 8 samples".into()));
    }
    let mut r = rng::stream(seed, "synthetic");
    let (ux, uy) = (0.3f64.cos(), 0.3f64.sin());
    let (sep, std) = (1.5, 0.5);
    let mut images = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = usize::from(r.random_bool(0.5));
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let nx: f64 = r.sample(StandardNormal);
        let ny: f64 = r.sample(StandardNormal);
        images.push((sign * sep * ux + std * nx) as f32);
        images.push((sign * sep * uy + std * ny) as f32);
        labels.push(label);
    }
    into_splits(images, labels, &[2], 2)
}

/// `classes` isotropic Gaussian blobs in `dim` dimensions.
pub fn make_blobs(n: usize, classes: usize, dim: usize, seed: u64) -> Result<Splits> {
    if n < 8 || classes < 2 || dim == 0 {
        return Err(Error::Config("blob task needs n ≥ 8, ≥ 2 classes, dim ≥ 1".into()));
    }
    let mut r = rng::stream(seed, "synthetic-blobs");
    let centers: Vec<f64> = (0..classes * dim).map(|_| 2.0 * r.sample::<f64, _>(StandardNormal)).collect();
    let mut images = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = r.random_range(0..classes);
        for j in 0..dim {
            images.push((centers[k * dim + j] + 0.5 * r.sample::<f64, _>(StandardNormal)) as f32);
        }
        labels.push(k);
    }
    into_splits(images, labels, &[dim], classes)
}

/// Small images in `[0, 1]`: a fixed random template per class blended with
/// uniform noise. Exercises the convolutional path and augmentation.
pub fn make_synthetic_images(n: usize, classes: usize, channels: usize, size: usize, seed: u64) -> Result<Splits> {
    if n < 8 || classes < 2 || size < 4 {
        return Err(Error::Config("image task needs n ≥ 8, ≥ 2 classes, size ≥ 4".into()));
    }
    let mut r = rng::stream(seed, "synthetic-images");
    let d = channels * size * size;
    let templates: Vec<f32> = (0..classes * d).map(|_| r.random::<f32>()).collect();
    let mut images = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = r.random_range(0..classes);
        for j in 0..d {
            images.push(0.6 * templates[k * d + j] + 0.4 * r.random::<f32>());
        }
        labels.push(k);
    }
    into_splits(images, labels, &[channels, size, size], classes)
}

fn labels_bytes(labels: &[usize]) -> Vec<u8> {
    labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect()
}

fn labels_from_bytes(b: &[u8]) -> Result<Vec<usize>> {
    if !b.len().is_multiple_of(4) {
        return Err(Error::Format("label section length is not a multiple of 4".into()));
    }
    Ok(b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect())
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    n_classes: usize,
}

/// Serializes all three splits into the checkpoint container format.
pub fn dataset_to_container(s: &Splits) -> Result<Container> {
    let mut c = Container::new();
    c.push_json("meta", &DatasetMeta { n_classes: s.train.n_classes })?;
    for (name, ds) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        c.push_array(format!("{name}.images"), &ds.images);
        c.push(format!("{name}.labels"), labels_bytes(&ds.labels));
    }
    Ok(c)
}

pub fn dataset_from_container(c: &Container) -> Result<Splits> {
    let meta: DatasetMeta = c.json("meta")?;
    let part = |name: &str, split: Split| -> Result<LabeledDataset> {
        let images = c.array(&format!("{name}.images"))?;
        let labels = labels_from_bytes(
            c.get(&format!("{name}.labels"))
                .ok_or_else(|| Error::Format(format!("missing `{name}.labels`")))?,
        )?;
        LabeledDataset::new(images, labels, split, meta.n_classes).map_err(|e| Error::Format(e.to_string()))
    };
    Ok(Splits {
        train: part("train", Split::Train)?,
        val: part("val", Split::Val)?,
        test: part("test", Split::Test)?,
    })
}

pub fn save_dataset(path: &Path, s: &Splits) -> Result<()> {
    dataset_to_container(s)?.write(path)
}

pub fn load_dataset(path: &Path) -> Result<Splits> {
    dataset_from_container(&Container::read(path)?)
}

/// Shuffled index order for one epoch.
pub fn shuffled_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Batch producer running on a worker thread.
///
/// The channel holds at most `depth` finished batches, so the producer is
/// never more than `depth` batches ahead of the consumer. Batches arrive in
/// order and augmentation draws from one stream, so the sequence is the same
/// as producing them inline.
pub struct Prefetcher {
    rx: mpsc::Receiver<Result<(DenseArray, Vec<usize>)>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(ds: LabeledDataset, order: Vec<usize>, batch_size: usize, augment_with: Option<(usize, Rng)>, depth: usize) -> Self {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let handle = thread::spawn(move || {
            let mut aug = augment_with;
            for chunk in order.chunks(batch_size.max(1)) {
                let (x, y) = ds.batch(chunk);
                let x = match aug.as_mut() {
                    Some((pad, r)) => augment(&x, *pad, r),
                    None => Ok(x),
                };
                if tx.send(x.map(|x| (x, y))).is_err() {
                    return;
                }
            }
        });
        Self { rx, handle: Some(handle) }
    }
}

impl Iterator for Prefetcher {
    type Item = Result<(DenseArray, Vec<usize>)>;
    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // closing the receiver makes a blocked producer's send fail, so the join returns
        let (_, closed) = mpsc::sync_channel(1);
        drop(std::mem::replace(&mut self.rx, closed));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fake_raw(n: usize, label_bytes: usize) -> RawCifarBatch {
        RawCifarBatch {
            label_bytes,
            coarse: if label_bytes == 2 { (0..n).map(|i| (i % 20) as u8).collect() } else { Vec::new() },
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
            pixels: (0..n * CIFAR_IMAGE_BYTES).map(|i| (i * 7 % 256) as u8).collect(),
        }
    }

    #[test]
    fn train_file_size_arithmetic() {
        assert_eq!(CIFAR_RECORDS_PER_TRAIN_FILE * (1 + CIFAR_IMAGE_BYTES), 30_730_000);
    }

    #[test]
    fn wrong_size_reports_both_counts() {
        let err = parse_cifar_records(&[0u8; 3073 * 2], 1, Some(3)).unwrap_err().to_string();
        assert!(err.contains("9219") && err.contains("6146"), "{err}");
    }

    #[test]
    fn record_layout_and_roundtrip() {
        for lb in [1, 2] {
            let raw = fake_raw(3, lb);
            let bytes = encode_cifar_records(&raw);
            assert_eq!(bytes.len(), 3 * (lb + CIFAR_IMAGE_BYTES));
            assert_eq!(bytes[lb - 1], 0);
            let back = parse_cifar_records(&bytes, lb, Some(3)).unwrap();
            assert_eq!(back, raw);
            assert_eq!(encode_cifar_records(&back), bytes);
        }
    }

    #[test]
    fn normalized_pixels_in_unit_interval() {
        let raw = fake_raw(4, 1);
        let ds = raw_to_dataset(&raw, 0, 4, Split::Train, 10).unwrap();
        assert!(ds.images.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.images.values()[1], 7.0 / 255.0);
        assert_eq!(ds.images.shape(), &[4, 3, 32, 32]);
    }

    #[test]
    fn augmentation_identities() {
        let (c, h, w) = (3, 8, 6);
        let img: Vec<f32> = (0..c * h * w).map(|v| v as f32 / 200.0).collect();
        assert_eq!(augment_image(&img, c, h, w, 4, 4, 4, false), img);
        let once = augment_image(&img, c, h, w, 0, 0, 0, true);
        assert_ne!(once, img);
        assert_eq!(augment_image(&once, c, h, w, 0, 0, 0, true), img);
    }

    #[test]
    fn augmentation_keeps_shape_and_range() {
        let splits = make_synthetic_images(40, 3, 3, 8, 1).unwrap();
        let (x, y) = splits.train.batch(&[0, 1, 2, 3]);
        let a = augment(&x, 2, &mut Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(y.len(), 4);
    }

    #[test]
    fn synthetic_tasks_are_deterministic() {
        let a = make_synthetic_task(200, 3).unwrap();
        let b = make_synthetic_task(200, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), 200);
        assert_eq!(a.val.len(), 30);
        let c = make_blobs(100, 10, 5, 1).unwrap();
        assert_eq!(c.train.sample_shape(), &[5]);
    }

    #[test]
    fn dataset_container_roundtrip() {
        let s = make_blobs(60, 3, 4, 9).unwrap();
        let c = dataset_to_container(&s).unwrap();
        let back = dataset_from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn prefetcher_matches_inline_batches() {
        let s = make_synthetic_images(60, 3, 1, 6, 2).unwrap();
        let order = shuffled_order(s.train.len(), &mut Rng::seed_from_u64(1));
        let inline: Vec<_> = {
            let mut r = Rng::seed_from_u64(5);
            order
                .chunks(8)
                .map(|c| {
                    let (x, y) = s.train.batch(c);
                    (augment(&x, 1, &mut r).unwrap(), y)
                })
                .collect()
        };
        let pre: Vec<_> = Prefetcher::spawn(s.train.clone(), order, 8, Some((1, Rng::seed_from_u64(5))), 2)
            .map(|b| b.unwrap())
            .collect();
        assert_eq!(inline, pre);
    }

    #[test]
    fn dropping_prefetcher_early_does_not_hang() {
        let s = make_synthetic_task(400, 1).unwrap();
        let order: Vec<usize> = (0..s.train.len()).collect();
        let mut p = Prefetcher::spawn(s.train.clone(), order, 4, None, 1);
        assert!(p.next().is_some());
        drop(p);
    }
}
