//! Datasets: loading, synthesis, subsetting, batching.
//!
//! Images are always f32 in [0, 1], shaped (N, C, H, W). Every example
//! carries a stable id assigned at load time; subsets and batches preserve
//! ids, and anything that needs per-example randomness (attack starts,
//! member draws) keys its stream on the id rather than the position, so
//! reordering a batch reorders results without changing them.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::arch::DatasetId;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

/// An in-memory labeled image set.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    ids: Vec<u64>,
    num_classes: usize,
    source: DatasetId,
}

impl Dataset {
    /// Validates counts, label range, and the [0, 1] pixel domain; assigns
    /// ids 0..n.
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        source: DatasetId,
    ) -> Result<Dataset> {
        let n = match images.shape() {
            &[n, _, _, _] => n,
            other => {
                return Err(Error::Shape(format!(
                    "images must be (n, c, h, w), got {other:?}"
                )))
            }
        };
        let ids = (0..n as u64).collect();
        Self::with_ids(images, labels, ids, num_classes, source)
    }

    fn with_ids(
        images: Tensor<f32>,
        labels: Vec<usize>,
        ids: Vec<u64>,
        num_classes: usize,
        source: DatasetId,
    ) -> Result<Dataset> {
        let n = images.shape()[0];
        if labels.len() != n || ids.len() != n {
            return Err(Error::Format(format!(
                "{n} images but {} labels / {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Argument(format!("need >= 2 classes, got {num_classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !images.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::Format("pixel outside [0, 1]".into()));
        }
        Ok(Dataset {
            images,
            labels,
            ids,
            num_classes,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn source(&self) -> DatasetId {
        self.source
    }

    /// (c, h, w) of one example.
    pub fn example_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Copies example `i` out as a (c, h, w) tensor.
    pub fn example(&self, i: usize) -> Result<Tensor<f32>> {
        let (c, h, w) = self.example_shape();
        let stride = c * h * w;
        if i >= self.len() {
            return Err(Error::Index(format!("example {i} of {}", self.len())));
        }
        Tensor::from_vec(&[c, h, w], self.images.data()[i * stride..][..stride].to_vec())
    }

    /// Copies the given rows into a batch, preserving ids.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let (c, h, w) = self.example_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("example {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * stride..][..stride]);
            labels.push(self.labels[i]);
            ids.push(self.ids[i]);
        }
        Ok(Batch {
            images: Tensor::from_vec(&[indices.len(), c, h, w], data)?,
            labels,
            ids,
        })
    }
}

/// A slice of a dataset ready for the model: images (n, c, h, w) plus
/// aligned labels and stable ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes(b.try_into().expect("4 bytes"))
}

/// Loads an IDX image/label pair (the MNIST container format). Pixels are
/// scaled by 1/255 into [0, 1]; shape comes from the header.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = std::fs::read(images_path)?;
    let lab = std::fs::read(labels_path)?;
    if img.len() < 16 || be_u32(&img[0..4]) != 2051 {
        return Err(Error::Format(format!(
            "{} is not an IDX image file",
            images_path.display()
        )));
    }
    if lab.len() < 8 || be_u32(&lab[0..4]) != 2049 {
        return Err(Error::Format(format!(
            "{} is not an IDX label file",
            labels_path.display()
        )));
    }
    let n = be_u32(&img[4..8]) as usize;
    let rows = be_u32(&img[8..12]) as usize;
    let cols = be_u32(&img[12..16]) as usize;
    if img.len() != 16 + n * rows * cols {
        return Err(Error::Format(format!(
            "image payload is {} bytes, header promises {}",
            img.len() - 16,
            n * rows * cols
        )));
    }
    let n_lab = be_u32(&lab[4..8]) as usize;
    if n_lab != n {
        return Err(Error::Format(format!("{n} images but {n_lab} labels")));
    }
    if lab.len() != 8 + n {
        return Err(Error::Format("label payload length mismatch".into()));
    }
    let data: Vec<f32> = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let images = Tensor::from_vec(&[n, 1, rows, cols], data)?;
    Dataset::new(images, labels, 10, DatasetId::Mnist)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Loads CIFAR-10 binary batches (1 label byte + 3072 channel-major pixel
/// bytes per record), concatenated in the order given.
pub fn load_cifar10(batch_paths: &[&Path]) -> Result<Dataset> {
    if batch_paths.is_empty() {
        return Err(Error::Argument("no CIFAR batch files given".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD}",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let y = rec[0] as usize;
            if y > 9 {
                return Err(Error::Format(format!("{}: label {y} > 9", path.display())));
            }
            labels.push(y);
            data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    let images = Tensor::from_vec(&[n, 3, 32, 32], data)?;
    Dataset::new(images, labels, 10, DatasetId::Cifar10)
}

/// Writes a dataset back out in the CIFAR-10 binary layout, quantizing each
/// pixel to round(v * 255). Requires CIFAR-shaped data (3x32x32, <= 10
/// classes).
pub fn save_cifar10(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.example_shape() != (3, 32, 32) {
        return Err(Error::Argument(format!(
            "CIFAR layout needs 3x32x32 images, got {:?}",
            ds.example_shape()
        )));
    }
    if ds.num_classes() > 10 {
        return Err(Error::Argument("CIFAR layout carries at most 10 classes".into()));
    }
    let stride = 3 * 32 * 32;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels()[i] as u8);
        for &v in &ds.images().data()[i * stride..][..stride] {
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Largest class count the synthetic generator supports (3x3 block grid).
pub const SYNTHETIC_MAX_CLASSES: usize = 512;

/// Generates a deterministic synthetic dataset: each class has a fixed
/// block-pattern template (blocks at 0.8 or 0.2 by the bits of the class
/// index) plus uniform noise in +-0.1, clipped to [0, 1]. Classes are
/// interleaved so any prefix stays balanced.
pub fn make_synthetic(num_classes: usize, per_class: usize, side: usize, seed: u64) -> Result<Dataset> {
    if !(2..=SYNTHETIC_MAX_CLASSES).contains(&num_classes) {
        return Err(Error::Argument(format!(
            "synthetic classes must be 2..={SYNTHETIC_MAX_CLASSES}, got {num_classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::Argument("per_class must be positive".into()));
    }
    if side < 4 || !side.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "synthetic side must be even and >= 4, got {side}"
        )));
    }
    // Smallest g with 2^(g*g) >= num_classes.
    let grid = (1..=3)
        .find(|&g| num_classes <= 1usize << (g * g).min(63))
        .expect("num_classes <= 512 fits a 3x3 grid");
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let mut rng = stream(derive_seed(seed, "synthetic-ex", i as u64));
        for r in 0..side {
            for c in 0..side {
                let bit = (r * grid / side) * grid + (c * grid / side);
                let base = if (class >> bit) & 1 == 1 { 0.8 } else { 0.2 };
                let v: f32 = base + rng.gen_range(-0.1..0.1);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    let images = Tensor::from_vec(&[n, 1, side, side], data)?;
    Dataset::new(images, labels, num_classes, DatasetId::Synthetic)
}

/// Uniformly samples `n` distinct examples (ids preserved, order shuffled).
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::Argument(format!(
            "subset of {n} from dataset of {}",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut stream(derive_seed(seed, "subset", 0)));
    idx.truncate(n);
    let batch = ds.gather(&idx)?;
    Dataset::with_ids(batch.images, batch.labels, batch.ids, ds.num_classes(), ds.source())
}

/// Splits the dataset into batches of `batch_size` (last one short), in
/// shuffled order when `shuffle` is set, natural order otherwise.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    if ds.is_empty() {
        return Err(Error::Argument("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(&mut stream(derive_seed(seed, "batch-order", 0)));
    }
    let count = ds.len().div_ceil(batch_size);
    Ok((0..count).map(move |b| {
        let lo = b * batch_size;
        let hi = (lo + batch_size).min(order.len());
        ds.gather(&order[lo..hi]).expect("indices in range")
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_idx_pair(dir: &Path, n: usize, rows: usize, cols: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = Vec::new();
        img.extend_from_slice(&2051u32.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&(rows as u32).to_be_bytes());
        img.extend_from_slice(&(cols as u32).to_be_bytes());
        for i in 0..n * rows * cols {
            img.push((i % 256) as u8);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&2049u32.to_be_bytes());
        lab.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            lab.push((i % 10) as u8);
        }
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_loader_scales_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 3, 4, 4);
        let ds = load_mnist(&ip, &lp).unwrap();
        assert_eq!(ds.images().shape(), &[3, 1, 4, 4]);
        assert_eq!(ds.labels(), &[0, 1, 2]);
        assert_eq!(ds.images().data()[1], 1.0 / 255.0);
        assert_eq!(ds.ids(), &[0, 1, 2]);
    }

    #[test]
    fn idx_loader_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), 3, 4, 4);
        // Wrong magic.
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 9;
        let bad = dir.path().join("bad.idx");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_mnist(&bad, &lp).unwrap_err(), Error::Format(_)));
        // Truncated payload.
        let orig = std::fs::read(&ip).unwrap();
        std::fs::write(&bad, &orig[..orig.len() - 1]).unwrap();
        assert!(matches!(load_mnist(&bad, &lp).unwrap_err(), Error::Format(_)));
        // Count mismatch between images and labels.
        let (_, lp2) = {
            let d2 = dir.path().join("two");
            std::fs::create_dir(&d2).unwrap();
            write_idx_pair(&d2, 2, 4, 4)
        };
        assert!(matches!(load_mnist(&ip, &lp2).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn cifar_round_trip_quantizes_within_half_step() {
        let ds = make_synthetic(4, 6, 32, 5).unwrap();
        // Rebuild as 3-channel by stacking the single channel three times.
        let n = ds.len();
        let mut data = Vec::new();
        for i in 0..n {
            let ex = ds.example(i).unwrap();
            for _ in 0..3 {
                data.extend_from_slice(ex.data());
            }
        }
        let images = Tensor::from_vec(&[n, 3, 32, 32], data).unwrap();
        let ds3 = Dataset::new(images, ds.labels().to_vec(), 10, DatasetId::Cifar10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        save_cifar10(&ds3, &p).unwrap();
        let back = load_cifar10(&[&p]).unwrap();
        assert_eq!(back.len(), n);
        assert_eq!(back.labels(), ds3.labels());
        for (a, b) in ds3.images().data().iter().zip(back.images().data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn cifar_loader_rejects_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trunc.bin");
        std::fs::write(&p, vec![0u8; CIFAR_RECORD + 1]).unwrap();
        assert!(matches!(load_cifar10(&[&p]).unwrap_err(), Error::Format(_)));
        let p2 = dir.path().join("label.bin");
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 11;
        std::fs::write(&p2, rec).unwrap();
        assert!(matches!(load_cifar10(&[&p2]).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn synthetic_is_deterministic_balanced_and_in_range() {
        let a = make_synthetic(4, 10, 8, 42).unwrap();
        let b = make_synthetic(4, 10, 8, 42).unwrap();
        let c = make_synthetic(4, 10, 8, 43).unwrap();
        assert_eq!(a.images().data(), b.images().data());
        assert_ne!(a.images().data(), c.images().data());
        assert_eq!(a.len(), 40);
        for k in 0..4 {
            assert_eq!(a.labels().iter().filter(|&&y| y == k).count(), 10);
        }
        assert!(a.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Any prefix is near-balanced thanks to interleaving.
        let prefix = &a.labels()[..8];
        for k in 0..4 {
            assert_eq!(prefix.iter().filter(|&&y| y == k).count(), 2);
        }
    }

    #[test]
    fn synthetic_templates_separate_classes() {
        // Mean image of each class must differ clearly from other classes.
        let ds = make_synthetic(4, 20, 8, 7).unwrap();
        let stride = 64;
        let mut means = vec![vec![0.0f64; stride]; 4];
        let mut counts = [0usize; 4];
        for i in 0..ds.len() {
            let y = ds.labels()[i];
            counts[y] += 1;
            for (j, &v) in ds.images().data()[i * stride..][..stride].iter().enumerate() {
                means[y][j] += v as f64;
            }
        }
        for (m, &cnt) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= cnt as f64;
            }
        }
        for a in 0..4 {
            for b in (a + 1)..4 {
                let gap: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(gap > 0.3, "classes {a} and {b} overlap");
            }
        }
    }

    #[test]
    fn synthetic_validates_arguments() {
        assert!(make_synthetic(1, 5, 8, 0).is_err());
        assert!(make_synthetic(4, 0, 8, 0).is_err());
        assert!(make_synthetic(4, 5, 7, 0).is_err());
        assert!(make_synthetic(4, 5, 2, 0).is_err());
        assert!(make_synthetic(600, 5, 8, 0).is_err());
    }

    #[test]
    fn subset_preserves_ids_and_rejects_oversize() {
        let ds = make_synthetic(4, 10, 8, 1).unwrap();
        let sub = subset(&ds, 10, 99).unwrap();
        assert_eq!(sub.len(), 10);
        // Ids must be a subset of the originals and match their labels.
        for (k, &id) in sub.ids().iter().enumerate() {
            let orig = id as usize;
            assert_eq!(sub.labels()[k], ds.labels()[orig]);
        }
        let again = subset(&ds, 10, 99).unwrap();
        assert_eq!(sub.ids(), again.ids());
        assert!(subset(&ds, 41, 0).is_err());
        assert!(subset(&ds, 0, 0).is_err());
    }

    #[test]
    fn batches_cover_everything_once() {
        let ds = make_synthetic(3, 7, 8, 3).unwrap();
        let got: Vec<Batch> = batches(&ds, 6, 11, true).unwrap().collect();
        assert_eq!(got.len(), 4);
        assert_eq!(got.last().unwrap().len(), 3);
        let mut seen: Vec<u64> = got.iter().flat_map(|b| b.ids.iter().copied()).collect();
        seen.sort_unstable();
        let want: Vec<u64> = (0..21).collect();
        assert_eq!(seen, want);
        // Unshuffled order is the natural one.
        let natural: Vec<Batch> = batches(&ds, 8, 0, false).unwrap().collect();
        assert_eq!(natural[0].ids, (0..8).collect::<Vec<u64>>());
    }

    #[test]
    fn dataset_rejects_out_of_domain_pixels_and_labels() {
        let images = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 0.5, 1.0, 1.5]).unwrap();
        assert!(Dataset::new(images, vec![0], 2, DatasetId::Synthetic).is_err());
        let images = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        assert!(Dataset::new(images, vec![5], 2, DatasetId::Synthetic).is_err());
    }
}
