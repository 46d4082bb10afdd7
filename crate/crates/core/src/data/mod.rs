//! Image datasets, deterministic splits, augmentation and mini-batching.

pub mod augment;
pub mod cifar;
pub mod mnist;
pub mod synthetic;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::AugmentDraw;
pub use cifar::{load_cifar10, write_cifar10};
pub use mnist::{load_mnist, write_mnist};
pub use synthetic::SyntheticSpec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Images stored as bytes, `(C, H, W)` row-major per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn empty(name: &str, channels: usize, height: usize, width: usize, num_classes: usize) -> Self {
        Dataset { name: name.into(), channels, height, width, num_classes, pixels: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Pixels of example `i` scaled to `[0, 1]`.
    pub fn image_f32(&self, i: usize) -> Vec<f32> {
        self.image_bytes(i).iter().map(|&b| b as f32 / 255.0).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(&self.name, self.channels, self.height, self.width, self.num_classes);
        out.pixels.reserve(indices.len() * self.image_len());
        for &i in indices {
            out.pixels.extend_from_slice(self.image_bytes(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Per-channel mean and standard deviation of `[0, 1]`-scaled pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::invalid("cannot compute normalization statistics of an empty split"));
        }
        let plane = ds.height * ds.width;
        let mut sum = vec![0f64; ds.channels];
        let mut sq = vec![0f64; ds.channels];
        for i in 0..ds.len() {
            for (c, chunk) in ds.image_bytes(i).chunks_exact(plane).enumerate() {
                for &b in chunk {
                    let v = b as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (ds.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| ((s / n - m * m).max(0.0).sqrt()).max(1e-6) as f32).collect();
        Ok(Normalization { mean: mean.into_iter().map(|m| m as f32).collect(), std })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { pad: 4, flip: true }
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub kind: SplitKind,
    pub data: Dataset,
    /// Positions of the examples in the dataset they were drawn from.
    pub source_indices: Vec<usize>,
    /// Statistics of the training split, shared by all three splits.
    pub norm: Normalization,
}

impl Split {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Stacks the listed examples into a normalized `(B, C, H, W)` tensor.
    /// Augmentation, when requested, runs before normalization.
    pub fn batch<T: Scalar>(
        &self,
        positions: &[usize],
        augment: Option<(AugmentConfig, &mut dyn rand::RngCore)>,
    ) -> (Tensor<T>, Vec<usize>) {
        let d = &self.data;
        let plane = d.height * d.width;
        let mut data = Vec::with_capacity(positions.len() * d.image_len());
        let mut labels = Vec::with_capacity(positions.len());
        let mut augment = augment;
        for &p in positions {
            let mut img = d.image_f32(p);
            if let Some((cfg, rng)) = augment.as_mut() {
                img = augment::augment(&img, d.channels, d.height, d.width, cfg.pad, cfg.flip, &mut **rng);
            }
            for (c, chunk) in img.chunks_exact(plane).enumerate() {
                let (m, s) = (self.norm.mean[c], self.norm.std[c]);
                data.extend(chunk.iter().map(|&v| T::lit(((v - m) / s) as f64)));
            }
            labels.push(d.labels[p] as usize);
        }
        let t = Tensor::new([positions.len(), d.channels, d.height, d.width], data).expect("batch shape");
        (t, labels)
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Optional stratified caps on split sizes. Without a `val` cap one tenth of
/// the development set is held out (5000 images for CIFAR-10).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetCaps {
    pub train: Option<usize>,
    pub val: Option<usize>,
    pub test: Option<usize>,
}

/// Draws `n` of `pool` with per-class counts proportional to the class sizes
/// in `pool` (largest remainder), each class sampled uniformly. Sorted output.
pub fn stratified_sample<R: Rng + ?Sized>(labels: &[u8], pool: &[usize], num_classes: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let n = n.min(pool.len());
    let mut groups = vec![Vec::new(); num_classes];
    for &i in pool {
        groups[labels[i] as usize].push(i);
    }
    let total = pool.len().max(1);
    let exact: Vec<f64> = groups.iter().map(|g| g.len() as f64 * n as f64 / total as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = n - quota.iter().sum::<usize>();
    for &c in order.iter().cycle().take(num_classes * 2) {
        if missing == 0 {
            break;
        }
        if quota[c] < groups[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut out = Vec::with_capacity(n);
    for (g, q) in groups.iter_mut().zip(quota) {
        g.shuffle(rng);
        out.extend_from_slice(&g[..q]);
    }
    out.sort_unstable();
    out
}

/// Carves train/val from `dev`, optionally caps `test`, and computes
/// normalization on the train portion. Membership depends only on `seed`.
pub fn make_splits(dev: &Dataset, test: &Dataset, caps: SubsetCaps, seed: u64) -> Result<Splits> {
    if dev.len() < 2 || test.is_empty() {
        return Err(Error::invalid("need at least two development examples and one test example"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..dev.len()).collect();
    let val_n = caps.val.unwrap_or(dev.len() / 10).clamp(1, dev.len() - 1);
    let val_idx = stratified_sample(&dev.labels, &all, dev.num_classes, val_n, &mut rng);
    let mut in_val = vec![false; dev.len()];
    for &i in &val_idx {
        in_val[i] = true;
    }
    let rest: Vec<usize> = all.into_iter().filter(|&i| !in_val[i]).collect();
    let train_idx = match caps.train {
        Some(n) => stratified_sample(&dev.labels, &rest, dev.num_classes, n, &mut rng),
        None => rest,
    };
    if train_idx.is_empty() || train_idx.iter().any(|&i| in_val[i]) {
        return Err(Error::invalid("train/val split is empty or overlapping"));
    }
    let test_all: Vec<usize> = (0..test.len()).collect();
    let test_idx = match caps.test {
        Some(n) => stratified_sample(&test.labels, &test_all, test.num_classes, n, &mut rng),
        None => test_all,
    };
    if test_idx.is_empty() {
        return Err(Error::invalid("test cap selects no examples"));
    }
    let train_data = dev.subset(&train_idx);
    let norm = Normalization::from_dataset(&train_data)?;
    Ok(Splits {
        train: Split { kind: SplitKind::Train, data: train_data, source_indices: train_idx, norm: norm.clone() },
        val: Split { kind: SplitKind::Val, data: dev.subset(&val_idx), source_indices: val_idx, norm: norm.clone() },
        test: Split { kind: SplitKind::Test, data: test.subset(&test_idx), source_indices: test_idx, norm },
    })
}

/// Shuffled index batches for one epoch; the order is a function of `(seed, epoch)`.
/// The final batch may be smaller than `batch_size`.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if len == 0 {
        return Err(Error::invalid("cannot batch an empty split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Sequential batches, for evaluation.
pub fn sequential_batches(len: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let idx: Vec<usize> = (0..len).collect();
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: usize) -> Dataset {
        let mut ds = Dataset::empty("toy", 1, 2, 2, classes);
        for i in 0..n {
            ds.labels.push((i % classes) as u8);
            ds.pixels.extend_from_slice(&[(i % 256) as u8, 0, 255, 128]);
        }
        ds
    }

    #[test]
    fn batch_counts() {
        assert_eq!(make_batches(512, 128, 0, 0).unwrap().len(), 4);
        let b = make_batches(513, 128, 0, 0).unwrap();
        assert_eq!(b.len(), 5);
        assert_eq!(b[4].len(), 1);
        assert!(make_batches(0, 4, 0, 0).is_err());
        assert!(make_batches(4, 0, 0, 0).is_err());
    }

    #[test]
    fn batches_are_seeded_permutations() {
        let a = make_batches(100, 7, 3, 1).unwrap();
        assert_eq!(a, make_batches(100, 7, 3, 1).unwrap());
        assert_ne!(a, make_batches(100, 7, 3, 2).unwrap());
        let mut flat: Vec<usize> = a.concat();
        flat.sort_unstable();
        assert_eq!(flat, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_keeps_class_balance() {
        let labels: Vec<u8> = (0..1000).map(|i| (i % 10) as u8).collect();
        let pool: Vec<usize> = (0..1000).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = stratified_sample(&labels, &pool, 10, 105, &mut rng);
        assert_eq!(s.len(), 105);
        let mut counts = [0; 10];
        for &i in &s {
            counts[labels[i] as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10 || c == 11), "{counts:?}");
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let dev = toy(200, 4);
        let test = toy(40, 4);
        let caps = SubsetCaps { train: Some(100), val: Some(40), test: Some(20) };
        let a = make_splits(&dev, &test, caps, 9).unwrap();
        let b = make_splits(&dev, &test, caps, 9).unwrap();
        assert_eq!(a.val.source_indices, b.val.source_indices);
        assert_eq!(a.train.source_indices, b.train.source_indices);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (100, 40, 20));
        assert!(a.train.source_indices.iter().all(|i| !a.val.source_indices.contains(i)));
        assert_eq!(a.val.data.class_counts(), vec![10; 4]);

        let full = make_splits(&dev, &test, SubsetCaps::default(), 9).unwrap();
        assert_eq!((full.train.len(), full.val.len(), full.test.len()), (180, 20, 40));
    }

    #[test]
    fn normalization_uses_train_only() {
        let dev = toy(50, 2);
        let test = toy(10, 2);
        let s = make_splits(&dev, &test, SubsetCaps { train: Some(30), val: Some(10), test: None }, 1).unwrap();
        let expect = Normalization::from_dataset(&dev.subset(&s.train.source_indices)).unwrap();
        assert_eq!(s.train.norm, expect);
        assert_eq!(s.test.norm, expect);
        let (x, labels) = s.train.batch::<f64>(&[0, 1], None);
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(labels.len(), 2);
    }

    #[test]
    fn augmented_batch_keeps_shape() {
        let dev = toy(20, 2);
        let s = make_splits(&dev, &dev, SubsetCaps::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, _) = s.train.batch::<f32>(&[0, 1, 2], Some((AugmentConfig { pad: 1, flip: true }, &mut rng)));
        assert_eq!(x.shape(), &[3, 1, 2, 2]);
    }
}
