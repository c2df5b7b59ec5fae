//! Labelled data, MNIST-format IDX files, and user partitions.

use std::fs::File;
use std::io::{self, BufWriter, Cursor, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<u32>,
    n_classes: usize,
}

/// Borrowed block of samples; what models consume.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub features: &'a [f64],
    pub labels: &'a [u32],
    pub dim: usize,
}

impl<'a> Samples<'a> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<u32>, n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return invalid("dataset has no samples");
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return invalid(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= n_classes) {
            return invalid(format!("label {bad} outside [0, {n_classes})"));
        }
        Ok(Self { features, dim, labels, n_classes })
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

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn view(&self) -> Samples<'_> {
        Samples { features: &self.features, labels: &self.labels, dim: self.dim }
    }

    /// Copies the listed rows into a new dataset with the same class count.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return invalid(format!("index {i} outside dataset of {}", self.len()));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, self.dim, labels, self.n_classes)
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Declares a larger label space (e.g. a subset that misses some classes).
    pub fn with_n_classes(mut self, n_classes: usize) -> Result<Self> {
        if n_classes < self.n_classes {
            return invalid(format!("cannot shrink {} classes to {n_classes}", self.n_classes));
        }
        self.n_classes = n_classes;
        Ok(self)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &y in &self.labels {
            h[y as usize] += 1;
        }
        h
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn check_magic(found: u32, expected: u32, path: &Path) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!("{}: magic {found:#010x}, expected {expected:#010x}", path.display())));
    }
    Ok(())
}

/// Loads an IDX image file and its label file (plain or gzip), scaling
/// pixels to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());

    let image_bytes = read_maybe_gz(images_path)?;
    let mut cur = Cursor::new(image_bytes.as_slice());
    check_magic(read_u32(&mut cur)?, IDX_IMAGES_MAGIC, images_path)?;
    let n = read_u32(&mut cur)? as usize;
    let dim = read_u32(&mut cur)? as usize * read_u32(&mut cur)? as usize;
    let mut pixels = vec![0u8; n * dim];
    cur.read_exact(&mut pixels)?;

    let label_bytes = read_maybe_gz(labels_path)?;
    let mut cur = Cursor::new(label_bytes.as_slice());
    check_magic(read_u32(&mut cur)?, IDX_LABELS_MAGIC, labels_path)?;
    let n_labels = read_u32(&mut cur)? as usize;
    if n_labels != n {
        return Err(Error::Integrity(format!(
            "{n} images in {} but {n_labels} labels in {}",
            images_path.display(),
            labels_path.display()
        )));
    }
    let mut raw_labels = vec![0u8; n];
    cur.read_exact(&mut raw_labels)?;

    let labels: Vec<u32> = raw_labels.iter().map(|&y| u32::from(y)).collect();
    let n_classes = labels.iter().max().map_or(0, |&y| y as usize + 1);
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    LabeledDataset::new(features, dim, labels, n_classes)
}

/// Writes `dataset` as uncompressed IDX files. Features are quantized to
/// `round(255 x)`, so values of the form `k / 255` survive a reload exactly.
pub fn write_idx(
    dataset: &LabeledDataset,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if rows * cols != dataset.dim() {
        return invalid(format!("{rows}x{cols} images for dimension {}", dataset.dim()));
    }
    if dataset.n_classes() > 256 {
        return invalid("IDX labels are single bytes");
    }
    let n = u32::try_from(dataset.len()).map_err(|_| Error::InvalidArgument("too many samples".into()))?;

    let mut w = BufWriter::new(File::create(images_path)?);
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&n.to_be_bytes())?;
    w.write_all(&(rows as u32).to_be_bytes())?;
    w.write_all(&(cols as u32).to_be_bytes())?;
    let pixels: Vec<u8> = dataset.features().iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    w.write_all(&pixels)?;
    w.flush()?;

    let mut w = BufWriter::new(File::create(labels_path)?);
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&n.to_be_bytes())?;
    let labels: Vec<u8> = dataset.labels().iter().map(|&y| y as u8).collect();
    w.write_all(&labels)?;
    w.flush()?;
    Ok(())
}

/// `n_classes` isotropic unit-variance Gaussian blobs whose means are
/// pairwise `separation` apart (simplex vertices when `dim >= n_classes`,
/// equally spaced on the first axis otherwise). Labels are balanced and the
/// rows come out shuffled.
pub fn synth_gaussian_classes<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    n_classes: usize,
    separation: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    if n_classes < 2 {
        return invalid("need at least two classes");
    }
    if n < n_classes {
        return invalid(format!("{n} samples cannot cover {n_classes} classes"));
    }
    if dim == 0 {
        return invalid("dimension must be positive");
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return invalid(format!("separation {separation} must be positive"));
    }
    let mut means = vec![0.0; n_classes * dim];
    for c in 0..n_classes {
        if dim >= n_classes {
            means[c * dim + c] = separation / std::f64::consts::SQRT_2;
        } else {
            means[c * dim] = separation * c as f64;
        }
    }
    let mut labels: Vec<u32> = (0..n).map(|i| (i % n_classes) as u32).collect();
    for k in (1..n).rev() {
        let j = rng.random_range(0..=k);
        labels.swap(k, j);
    }
    let mut features = Vec::with_capacity(n * dim);
    for &y in &labels {
        let mean = &means[y as usize * dim..(y as usize + 1) * dim];
        features.extend(mean.iter().map(|&mu| mu + rng.sample::<f64, _>(StandardNormal)));
    }
    LabeledDataset::new(features, dim, labels, n_classes)
}

/// One user's local data: indices into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub owner: usize,
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Distinct labels held by this shard, ascending.
    pub fn label_support(&self, parent: &LabeledDataset) -> Vec<u32> {
        let mut s: Vec<u32> = self.indices.iter().map(|&i| parent.labels()[i]).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// The shard's samples gathered into an owned dataset.
    pub fn materialize(&self, parent: &LabeledDataset) -> Result<LabeledDataset> {
        parent.select(&self.indices)
    }
}

fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for k in (1..n).rev() {
        let j = rng.random_range(0..=k);
        v.swap(k, j);
    }
    v
}

/// Disjoint uniformly random shards of exactly `shard_size` samples.
pub fn partition_iid<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    m: usize,
    shard_size: usize,
    rng: &mut R,
) -> Result<Vec<Shard>> {
    if m * shard_size > dataset.len() {
        return invalid(format!(
            "{m} shards of {shard_size} need {} samples, dataset has {}",
            m * shard_size,
            dataset.len()
        ));
    }
    if shard_size == 0 {
        return Ok((0..m).map(|owner| Shard { owner, indices: Vec::new() }).collect());
    }
    let order = shuffled(dataset.len(), rng);
    Ok(order.chunks(shard_size).take(m).enumerate().map(|(owner, c)| Shard { owner, indices: c.to_vec() }).collect())
}

/// Label-skewed shards: every class is cut into single-class blocks of
/// `shard_size / classes_per_user` samples, and each user receives
/// `classes_per_user` randomly chosen blocks. A user therefore never sees
/// more than `classes_per_user` distinct labels.
pub fn partition_pathological<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    m: usize,
    shard_size: usize,
    classes_per_user: usize,
    rng: &mut R,
) -> Result<Vec<Shard>> {
    if classes_per_user == 0 {
        return invalid("classes_per_user must be at least 1");
    }
    if !shard_size.is_multiple_of(classes_per_user) {
        return invalid(format!("shard_size {shard_size} is not a multiple of classes_per_user {classes_per_user}"));
    }
    if m * shard_size > dataset.len() {
        return invalid(format!(
            "{m} shards of {shard_size} need {} samples, dataset has {}",
            m * shard_size,
            dataset.len()
        ));
    }
    let block = shard_size / classes_per_user;
    if block == 0 {
        return Ok((0..m).map(|owner| Shard { owner, indices: Vec::new() }).collect());
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes()];
    for i in shuffled(dataset.len(), rng) {
        by_class[dataset.labels()[i] as usize].push(i);
    }
    let mut blocks: Vec<&[usize]> = by_class.iter().flat_map(|idx| idx.chunks_exact(block)).collect();
    let needed = m * classes_per_user;
    if blocks.len() < needed {
        return invalid(format!("only {} single-class blocks of {block} available, {needed} needed", blocks.len()));
    }
    let order = shuffled(blocks.len(), rng);
    blocks = order.iter().take(needed).map(|&k| blocks[k]).collect();

    Ok((0..m)
        .map(|owner| Shard {
            owner,
            indices: blocks[owner * classes_per_user..(owner + 1) * classes_per_user]
                .iter()
                .flat_map(|b| b.iter().copied())
                .collect(),
        })
        .collect())
}

/// Owned mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
    pub dim: usize,
}

impl MiniBatch {
    pub fn view(&self) -> Samples<'_> {
        Samples { features: &self.features, labels: &self.labels, dim: self.dim }
    }
}

/// Draws `batch_size` samples from the shard uniformly with replacement.
pub fn sample_minibatch<R: Rng + ?Sized>(
    parent: &LabeledDataset,
    shard: &Shard,
    batch_size: usize,
    rng: &mut R,
) -> Result<MiniBatch> {
    if shard.is_empty() {
        return invalid(format!("shard of user {} is empty", shard.owner));
    }
    if batch_size == 0 {
        return invalid("batch_size must be at least 1");
    }
    let dim = parent.dim();
    let mut features = Vec::with_capacity(batch_size * dim);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = shard.indices[rng.random_range(0..shard.len())];
        features.extend_from_slice(parent.row(i));
        labels.push(parent.labels()[i]);
    }
    Ok(MiniBatch { features, labels, dim })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::rng::{stream, Purpose};

    fn blobs(n: usize, c: usize, seed: u64) -> LabeledDataset {
        synth_gaussian_classes(n, 12, c, 4.0, &mut stream(seed, Purpose::Data)).unwrap()
    }

    fn assert_disjoint(shards: &[Shard]) {
        let mut seen = HashSet::new();
        for s in shards {
            for &i in &s.indices {
                assert!(seen.insert(i), "index {i} appears twice");
            }
        }
    }

    #[test]
    fn synth_is_balanced_and_deterministic() {
        let a = blobs(103, 10, 1);
        let b = blobs(103, 10, 1);
        assert_eq!(a, b);
        assert_eq!(
            a.features().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.features().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let h = a.class_histogram();
        assert!(h.iter().all(|&k| k == 10 || k == 11), "{h:?}");
        assert_ne!(a, blobs(103, 10, 2));
    }

    #[test]
    fn synth_rejects_bad_arguments() {
        let mut rng = stream(0, Purpose::Data);
        assert!(synth_gaussian_classes(10, 4, 1, 1.0, &mut rng).is_err());
        assert!(synth_gaussian_classes(3, 4, 5, 1.0, &mut rng).is_err());
        assert!(synth_gaussian_classes(10, 4, 2, 0.0, &mut rng).is_err());
    }

    #[test]
    fn synth_low_dimension_means_on_a_line() {
        let d = synth_gaussian_classes(40, 1, 4, 3.0, &mut stream(0, Purpose::Data)).unwrap();
        assert_eq!(d.dim(), 1);
        assert_eq!(d.n_classes(), 4);
    }

    #[test]
    fn iid_partition_sizes() {
        let d = blobs(1000, 10, 3);
        let shards = partition_iid(&d, 7, 100, &mut stream(3, Purpose::Partition)).unwrap();
        assert_eq!(shards.len(), 7);
        assert!(shards.iter().all(|s| s.len() == 100));
        assert_disjoint(&shards);

        let whole = partition_iid(&d, 1, 1000, &mut stream(3, Purpose::Partition)).unwrap();
        let set: HashSet<usize> = whole[0].indices.iter().copied().collect();
        assert_eq!(set.len(), 1000);

        assert!(partition_iid(&d, 11, 100, &mut stream(3, Purpose::Partition)).is_err());
    }

    #[test]
    fn pathological_support_and_sizes() {
        let d = blobs(4000, 10, 4);
        let shards = partition_pathological(&d, 20, 100, 2, &mut stream(4, Purpose::Partition)).unwrap();
        assert_eq!(shards.len(), 20);
        assert!(shards.iter().all(|s| s.len() == 100));
        assert!(shards.iter().all(|s| s.label_support(&d).len() <= 2));
        assert_disjoint(&shards);
        assert_eq!(shards.iter().map(Shard::len).sum::<usize>(), 2000);
    }

    #[test]
    fn pathological_errors() {
        let d = blobs(200, 10, 5);
        let mut rng = stream(5, Purpose::Partition);
        assert!(partition_pathological(&d, 2, 100, 0, &mut rng).is_err());
        assert!(partition_pathological(&d, 2, 101, 2, &mut rng).is_err());
        assert!(partition_pathological(&d, 3, 100, 2, &mut rng).is_err());
        // 20 samples per class, blocks of 50: no class can fill a block.
        assert!(partition_pathological(&d, 1, 100, 2, &mut rng).is_err());
    }

    #[test]
    fn pathological_with_all_classes_is_spread() {
        let d = blobs(5000, 10, 6);
        let shards = partition_pathological(&d, 10, 200, 10, &mut stream(6, Purpose::Partition)).unwrap();
        let mean_support: f64 = shards.iter().map(|s| s.label_support(&d).len() as f64).sum::<f64>() / 10.0;
        assert!(mean_support > 5.0, "{mean_support}");
    }

    #[test]
    fn minibatch_draws() {
        let d = blobs(50, 2, 7);
        let shard = Shard { owner: 0, indices: vec![3] };
        let mut rng = stream(7, Purpose::User(0));
        let b = sample_minibatch(&d, &shard, 1, &mut rng).unwrap();
        assert_eq!(b.features, d.row(3));
        let b = sample_minibatch(&d, &Shard { owner: 0, indices: (0..50).collect() }, 10, &mut rng).unwrap();
        assert_eq!(b.labels.len(), 10);
        assert_eq!(b.features.len(), 10 * d.dim());
        assert!(sample_minibatch(&d, &Shard { owner: 1, indices: vec![] }, 10, &mut rng).is_err());
        assert!(sample_minibatch(&d, &shard, 0, &mut rng).is_err());
    }

    #[test]
    fn minibatch_inclusion_is_uniform() {
        let d = blobs(20, 2, 8);
        let shard = Shard { owner: 0, indices: (0..5).collect() };
        let mut rng = stream(8, Purpose::User(0));
        let mut counts = vec![0usize; 5];
        let draws = 100_000;
        for _ in 0..draws / 10 {
            let b = sample_minibatch(&d, &shard, 10, &mut rng).unwrap();
            for r in 0..10 {
                let row = &b.features[r * d.dim()..(r + 1) * d.dim()];
                let k = (0..5).find(|&k| d.row(k) == row).unwrap();
                counts[k] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq / 0.2 - 1.0).abs() <= 0.02, "{freq}");
        }
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = LabeledDataset::new(vec![0.0, 1.0, 0.5, 0.25], 2, vec![0, 1], 2).unwrap();
        let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&d, 1, 2, &img, &lab).unwrap();

        // Labels file where the images file belongs.
        assert!(matches!(load_idx(&lab, &lab), Err(Error::Format(_))));
        assert!(matches!(load_idx(&img, &img), Err(Error::Format(_))));

        let bytes = std::fs::read(&img).unwrap();
        let trunc = dir.path().join("trunc");
        std::fs::write(&trunc, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&trunc, &lab), Err(Error::Io(_))));

        let d3 = LabeledDataset::new(vec![0.0; 6], 2, vec![0, 1, 1], 2).unwrap();
        let (img3, lab3) = (dir.path().join("img3"), dir.path().join("lab3"));
        write_idx(&d3, 1, 2, &img3, &lab3).unwrap();
        assert!(matches!(load_idx(&img, &lab3), Err(Error::Integrity(_))));

        assert!(matches!(load_idx(dir.path().join("missing"), &lab), Err(Error::Io(_))));
    }

    #[test]
    fn idx_gzip_is_transparent() {
        use flate2::{write::GzEncoder, Compression};
        let dir = tempfile::tempdir().unwrap();
        let d = LabeledDataset::new((0..12).map(|k| k as f64 / 255.0).collect(), 4, vec![2, 0, 1], 3).unwrap();
        let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&d, 2, 2, &img, &lab).unwrap();
        let gz = dir.path().join("i.gz");
        let mut enc = GzEncoder::new(File::create(&gz).unwrap(), Compression::default());
        enc.write_all(&std::fs::read(&img).unwrap()).unwrap();
        enc.finish().unwrap();
        assert_eq!(load_idx(&gz, &lab).unwrap(), load_idx(&img, &lab).unwrap());
        assert_eq!(load_idx(&gz, &lab).unwrap(), d);
    }
}
