//! Dataset loaders, per-channel standardization, and the random-patch
//! feature pre-processor.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Source and preprocessing applied, e.g. `cifar10:data_batch_1.bin|std`.
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_count: usize, provenance: impl Into<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images and {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidConfig(format!("label {l} out of range for {class_count} classes")));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|x| x.shape() != first.shape()) {
                return Err(Error::ShapeMismatch("images differ in shape".into()));
            }
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    fn with_provenance(mut self, step: &str) -> Self {
        self.provenance = format!("{}|{step}", self.provenance);
        self
    }

    /// `n` examples chosen by a seeded permutation, kept in permutation order.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Self> {
        if n > self.len() {
            return Err(Error::InvalidConfig(format!(
                "subsample of {n} requested from {} examples",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        let images = idx.iter().map(|&i| self.images[i].clone()).collect();
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok(LabeledDataset {
            images,
            labels,
            class_count: self.class_count,
            provenance: self.provenance.clone(),
        }
        .with_provenance(&format!("sub{n}@{seed}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// One CIFAR-10 binary batch: records of a label byte and 3072 pixel bytes,
/// channel-planar RGB, rows of 32.
pub fn load_cifar10_batch(path: &Path) -> Result<LabeledDataset> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            path,
            format!(
                "size {} is not a positive multiple of the {CIFAR_RECORD}-byte record (a full batch is {} bytes)",
                bytes.len(),
                CIFAR_RECORD * 10_000
            ),
        ));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(path, format!("record {r} has label byte {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        let px = &rec[1..];
        images.push(Image::from_fn(CIFAR_SIDE, CIFAR_SIDE, 3, |i, j, c| {
            px[c * plane + i * CIFAR_SIDE + j] as f64 / 255.0
        }));
    }
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    LabeledDataset::new(images, labels, 10, format!("cifar10:{name}"))
}

fn concat(parts: Vec<LabeledDataset>, provenance: &str) -> Result<LabeledDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let class_count = parts.first().map_or(1, |p| p.class_count);
    for p in parts {
        images.extend(p.images);
        labels.extend(p.labels);
    }
    LabeledDataset::new(images, labels, class_count, provenance)
}

/// `data_batch_1.bin` .. `data_batch_5.bin` and `test_batch.bin` in `dir`.
pub fn load_cifar10(dir: &Path) -> Result<DataSplit> {
    let train = (1..=5)
        .map(|k| load_cifar10_batch(&dir.join(format!("data_batch_{k}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    let test = load_cifar10_batch(&dir.join("test_batch.bin"))?;
    Ok(DataSplit {
        train: concat(train, "cifar10:train")?,
        test: LabeledDataset {
            provenance: "cifar10:test".into(),
            ..test
        },
    })
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// IDX image file (magic `0x00000803`), possibly gzip-compressed.
pub fn load_idx_images(path: &Path) -> Result<Vec<Image>> {
    let b = read_maybe_gz(path)?;
    if b.len() < 16 || be_u32(&b, 0) != 0x803 {
        return Err(Error::format(path, "bad magic, expected 0x00000803 (IDX images)"));
    }
    let (n, rows, cols) = (be_u32(&b, 4) as usize, be_u32(&b, 8) as usize, be_u32(&b, 12) as usize);
    let need = 16 + n * rows * cols;
    if b.len() != need {
        return Err(Error::format(path, format!("{n}x{rows}x{cols} images need {need} bytes, found {}", b.len())));
    }
    Ok(b[16..]
        .chunks_exact(rows * cols)
        .map(|px| Image::from_fn(rows, cols, 1, |i, j, _| px[i * cols + j] as f64 / 255.0))
        .collect())
}

/// IDX label file (magic `0x00000801`), possibly gzip-compressed.
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let b = read_maybe_gz(path)?;
    if b.len() < 8 || be_u32(&b, 0) != 0x801 {
        return Err(Error::format(path, "bad magic, expected 0x00000801 (IDX labels)"));
    }
    let n = be_u32(&b, 4) as usize;
    if b.len() != 8 + n {
        return Err(Error::format(path, format!("{n} labels need {} bytes, found {}", 8 + n, b.len())));
    }
    Ok(b[8..].iter().map(|&l| l as usize).collect())
}

fn find_idx(dir: &Path, stem: &str) -> PathBuf {
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        dir.join(stem)
    }
}

/// `train-*` and `t10k-*` IDX pairs in `dir`, plain or `.gz`.
pub fn load_fashion_mnist(dir: &Path) -> Result<DataSplit> {
    let load = |prefix: &str| -> Result<LabeledDataset> {
        let ipath = find_idx(dir, &format!("{prefix}-images-idx3-ubyte"));
        let lpath = find_idx(dir, &format!("{prefix}-labels-idx1-ubyte"));
        let images = load_idx_images(&ipath)?;
        let labels = load_idx_labels(&lpath)?;
        if images.len() != labels.len() {
            return Err(Error::format(
                &lpath,
                format!("{} labels for {} images", labels.len(), images.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::format(&lpath, format!("label {l} out of range")));
        }
        LabeledDataset::new(images, labels, 10, format!("fashion-mnist:{prefix}"))
    };
    Ok(DataSplit {
        train: load("train")?,
        test: load("t10k")?,
    })
}

const STD_FLOOR: f64 = 1e-8;

/// Per-channel statistics of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &LabeledDataset) -> Result<Self> {
        let (_, _, c) = train
            .shape()
            .ok_or_else(|| Error::InvalidConfig("cannot standardize with an empty training set".into()))?;
        let mut sum = vec![0.0; c];
        let mut lo = vec![f64::INFINITY; c];
        let mut hi = vec![f64::NEG_INFINITY; c];
        let mut count = 0usize;
        for x in &train.images {
            for px in x.values().chunks_exact(c) {
                for (ch, v) in px.iter().enumerate() {
                    sum[ch] += v;
                    lo[ch] = lo[ch].min(*v);
                    hi[ch] = hi[ch].max(*v);
                }
            }
            count += x.height() * x.width();
        }
        // A constant channel's mean is its value exactly, free of summation error.
        let mean: Vec<f64> = (0..c)
            .map(|ch| if lo[ch] == hi[ch] { lo[ch] } else { sum[ch] / count as f64 })
            .collect();
        let mut sq = vec![0.0; c];
        for x in &train.images {
            for px in x.values().chunks_exact(c) {
                for ((s, v), m) in sq.iter_mut().zip(px).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        let c = self.mean.len();
        let images = ds
            .images
            .iter()
            .map(|x| {
                if x.channels() != c {
                    return Err(Error::ShapeMismatch(format!("{} channels, statistics for {c}", x.channels())));
                }
                let mut y = x.clone();
                for px in y.values_mut().chunks_exact_mut(c) {
                    for ((v, m), s) in px.iter_mut().zip(&self.mean).zip(&self.std) {
                        *v = (*v - m) / s;
                    }
                }
                Ok(y)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset {
            images,
            labels: ds.labels.clone(),
            class_count: ds.class_count,
            provenance: ds.provenance.clone(),
        }
        .with_provenance("std"))
    }
}

/// Standardizes both splits with training statistics.
pub fn standardize(split: &DataSplit) -> Result<DataSplit> {
    let s = Standardizer::fit(&split.train)?;
    Ok(DataSplit {
        train: s.apply(&split.train)?,
        test: s.apply(&split.test)?,
    })
}

/// Averages non-overlapping 2x2 blocks; odd trailing rows and columns are dropped.
pub fn downsample2(x: &Image) -> Image {
    let (p, q, c) = x.shape();
    Image::from_fn(p / 2, q / 2, c, |i, j, ch| {
        0.25 * (x.get(2 * i, 2 * j, ch) + x.get(2 * i + 1, 2 * j, ch) + x.get(2 * i, 2 * j + 1, ch) + x.get(2 * i + 1, 2 * j + 1, ch))
    })
}

pub fn downsample_dataset(ds: &LabeledDataset) -> LabeledDataset {
    LabeledDataset {
        images: ds.images.iter().map(downsample2).collect(),
        labels: ds.labels.clone(),
        class_count: ds.class_count,
        provenance: ds.provenance.clone(),
    }
    .with_provenance("down2")
}

pub const DEFAULT_ZCA_EPSILON: f64 = 1e-5;
pub const GAMMA_FEATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchBankOptions {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub flip_closed: bool,
}

impl Default for PatchBankOptions {
    fn default() -> Self {
        PatchBankOptions {
            count: 2048,
            size: 5,
            seed: 0,
            epsilon: DEFAULT_ZCA_EPSILON,
            flip_closed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchBank {
    pub size: usize,
    pub channels: usize,
    /// Each `size x size x channels`, channel fastest. With flip closure the
    /// second half holds the flips of the first half, in the same order.
    pub filters: Vec<Vec<f64>>,
    /// Row-major `d x d` whitening matrix, `d = size^2 channels`.
    pub zca: Vec<f64>,
    pub epsilon: f64,
    pub gamma_feature: f64,
    pub flip_closed: bool,
}

impl PatchBank {
    pub fn dim(&self) -> usize {
        self.size * self.size * self.channels
    }

    /// Index of the flipped partner of filter `m`, when the bank is flip-closed.
    pub fn flip_partner(&self, m: usize) -> Option<usize> {
        let half = self.filters.len() / 2;
        self.flip_closed.then(|| if m < half { m + half } else { m - half })
    }
}

/// Reverses the first spatial axis of a `k x k x c` patch.
pub fn flip_patch(z: &[f64], k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for a in 0..k {
        for b in 0..k {
            let (dst, src) = ((a * k + b) * c, ((k - 1 - a) * k + b) * c);
            out[dst..dst + c].copy_from_slice(&z[src..src + c]);
        }
    }
    out
}

/// Samples `count` patches, subtracts each patch's mean, scales each to unit
/// norm, whitens with `U diag(1/sqrt(l + eps)) U^T` from the patches' second
/// moment matrix, and optionally appends the flip of every filter.
pub fn build_patch_bank(train: &LabeledDataset, opts: &PatchBankOptions) -> Result<PatchBank> {
    let (p, q, c) = train
        .shape()
        .ok_or_else(|| Error::InvalidConfig("patch bank needs a non-empty training set".into()))?;
    let k = opts.size;
    if opts.count < 1 {
        return Err(Error::InvalidConfig("patch count must be at least 1".into()));
    }
    if k == 0 || k > p || k > q {
        return Err(Error::InvalidConfig(format!("patch size {k} does not fit {p}x{q} images")));
    }
    if !(opts.epsilon > 0.0) {
        return Err(Error::InvalidConfig("ZCA regularizer must be positive".into()));
    }
    let d = k * k * c;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut patches = Vec::with_capacity(opts.count);
    for _ in 0..opts.count {
        let n = rng.random_range(0..train.len());
        let (i0, j0) = (rng.random_range(0..=p - k), rng.random_range(0..=q - k));
        let x = &train.images[n];
        let mut z = Vec::with_capacity(d);
        for a in 0..k {
            for b in 0..k {
                for ch in 0..c {
                    z.push(x.get(i0 + a, j0 + b, ch));
                }
            }
        }
        let mean = z.iter().sum::<f64>() / d as f64;
        z.iter_mut().for_each(|v| *v -= mean);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            z.iter_mut().for_each(|v| *v /= norm);
        }
        patches.push(z);
    }
    let zmat = DMatrix::from_fn(opts.count, d, |r, s| patches[r][s]);
    let second_moment = zmat.transpose() * &zmat / opts.count as f64;
    let eig = SymmetricEigen::new(second_moment);
    let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + opts.epsilon).sqrt()));
    let w = &eig.eigenvectors * scale * eig.eigenvectors.transpose();
    let whitened = &zmat * &w;
    let mut filters: Vec<Vec<f64>> = (0..opts.count)
        .map(|r| whitened.row(r).iter().copied().collect())
        .collect();
    if opts.flip_closed {
        let flipped: Vec<Vec<f64>> = filters.iter().map(|f| flip_patch(f, k, c)).collect();
        filters.extend(flipped);
    }
    Ok(PatchBank {
        size: k,
        channels: c,
        filters,
        zca: w.transpose().iter().copied().collect(),
        epsilon: opts.epsilon,
        gamma_feature: GAMMA_FEATURE,
        flip_closed: opts.flip_closed,
    })
}

/// Valid stride-1 correlation with every filter, then
/// `[relu(conv - g) for each filter] ++ [relu(-conv - g) for each filter]`.
pub fn patch_featurize(x: &Image, bank: &PatchBank) -> Result<Image> {
    let (p, q, c) = x.shape();
    let k = bank.size;
    if c != bank.channels || p < k || q < k {
        return Err(Error::ShapeMismatch(format!(
            "{p}x{q}x{c} image for {k}x{k}x{} filters",
            bank.channels
        )));
    }
    let (op, oq, m) = (p - k + 1, q - k + 1, bank.filters.len());
    let g = bank.gamma_feature;
    let mut out = Image::zeros(op, oq, 2 * m);
    let mut patch = vec![0.0; bank.dim()];
    for i in 0..op {
        for j in 0..oq {
            for a in 0..k {
                for b in 0..k {
                    for ch in 0..c {
                        patch[(a * k + b) * c + ch] = x.get(i + a, j + b, ch);
                    }
                }
            }
            for (f, filter) in bank.filters.iter().enumerate() {
                let v: f64 = filter.iter().zip(&patch).map(|(u, w)| u * w).sum();
                out.set(i, j, f, (v - g).max(0.0));
                out.set(i, j, m + f, (-v - g).max(0.0));
            }
        }
    }
    Ok(out)
}

pub fn featurize_dataset(ds: &LabeledDataset, bank: &PatchBank) -> Result<LabeledDataset> {
    let images = ds
        .images
        .par_iter()
        .map(|x| patch_featurize(x, bank))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset {
        images,
        labels: ds.labels.clone(),
        class_count: ds.class_count,
        provenance: ds.provenance.clone(),
    }
    .with_provenance(&format!("patches{}x{}", bank.filters.len(), bank.size)))
}

const IMAGE_MAGIC: &[u8; 4] = b"CKIM";
const IMAGE_VERSION: u32 = 1;

/// `"CKIM"`, version `u32`, count `u64`, height/width/channels/classes `u32`,
/// provenance length `u32` and UTF-8 bytes, `count` `u16` labels, then the
/// pixels as `f32`; all little-endian.
pub fn write_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let (h, w, c) = ds.shape().unwrap_or((0, 0, 0));
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(IMAGE_MAGIC)?;
    f.write_all(&IMAGE_VERSION.to_le_bytes())?;
    f.write_all(&(ds.len() as u64).to_le_bytes())?;
    for d in [h, w, c, ds.class_count] {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    f.write_all(&(ds.provenance.len() as u32).to_le_bytes())?;
    f.write_all(ds.provenance.as_bytes())?;
    for &l in &ds.labels {
        let l = u16::try_from(l).map_err(|_| Error::format(path, format!("label {l} exceeds u16")))?;
        f.write_all(&l.to_le_bytes())?;
    }
    for x in &ds.images {
        for &v in x.values() {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut take = |n: usize, what: &str| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format(path, format!("truncated while reading {what}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    };
    if take(4, "magic")? != IMAGE_MAGIC {
        return Err(Error::format(path, "bad magic, expected CKIM"));
    }
    let u32_at = |b: &[u8], i: usize| u32::from_le_bytes(b[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
    let version = u32_at(&take(4, "version")?, 0);
    if version != IMAGE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(take(8, "count")?.try_into().expect("8 bytes")) as usize;
    let dims = take(16, "dimensions")?;
    let (h, w, c, classes) = (
        u32_at(&dims, 0) as usize,
        u32_at(&dims, 1) as usize,
        u32_at(&dims, 2) as usize,
        u32_at(&dims, 3) as usize,
    );
    let plen = u32_at(&take(4, "provenance length")?, 0) as usize;
    let provenance = String::from_utf8(take(plen, "provenance")?)
        .map_err(|_| Error::format(path, "provenance is not UTF-8"))?;
    let labels: Vec<usize> = take(2 * n, "labels")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    let size = h * w * c;
    let payload = take(4 * n * size, "pixels")?;
    let images = payload
        .chunks_exact(4 * size.max(1))
        .take(n)
        .map(|b| {
            let vals = b.chunks_exact(4).map(|v| f32::from_le_bytes(v.try_into().expect("4 bytes")) as f64).collect();
            Image::new(h, w, c, vals)
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(images, labels, classes, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::hflip;

    fn random_dataset(n: usize, p: usize, q: usize, c: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|_| Image::from_fn(p, q, c, |_, _, _| rng.random_range(0.0..1.0)))
            .collect();
        let labels = (0..n).map(|i| i % 3).collect();
        LabeledDataset::new(images, labels, 3, "synthetic").unwrap()
    }

    fn cifar_bytes(labels: &[u8], seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for &l in labels {
            out.push(l);
            out.extend((0..3072).map(|_| rng.random::<u8>()));
        }
        out
    }

    #[test]
    fn cifar_batch_parses_against_direct_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let bytes = cifar_bytes(&[3, 9, 0], 1);
        fs::write(&path, &bytes).unwrap();
        let ds = load_cifar10_batch(&path).unwrap();
        assert_eq!(ds.labels, vec![3, 9, 0]);
        // Independent reading of record 1: green channel, row 5, column 7.
        let off = CIFAR_RECORD + 1 + 1024 + 5 * 32 + 7;
        assert_eq!(ds.images[1].get(5, 7, 1), bytes[off] as f64 / 255.0);
        assert_eq!(ds.images[0].shape(), (32, 32, 3));
    }

    #[test]
    fn cifar_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.bin");
        fs::write(&path, &cifar_bytes(&[1], 2)[..3000]).unwrap();
        let msg = load_cifar10_batch(&path).unwrap_err().to_string();
        assert!(msg.contains("short.bin") && msg.contains("3073"), "{msg}");
        fs::write(&path, cifar_bytes(&[10], 3)).unwrap();
        assert!(load_cifar10_batch(&path).unwrap_err().to_string().contains("label byte 10"));
    }

    #[test]
    fn cifar_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        for k in 1..=5 {
            fs::write(dir.path().join(format!("data_batch_{k}.bin")), cifar_bytes(&[k as u8, 0], k)).unwrap();
        }
        fs::write(dir.path().join("test_batch.bin"), cifar_bytes(&[7], 9)).unwrap();
        let split = load_cifar10(dir.path()).unwrap();
        assert_eq!(split.train.len(), 10);
        assert_eq!(split.train.labels[..4], [1, 0, 2, 0]);
        assert_eq!(split.test.labels, vec![7]);
        assert_eq!(split.train.histogram()[0], 5);
    }

    fn idx_images(n: u32, rows: u32, cols: u32, px: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for d in [n, rows, cols] {
            b.extend(d.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    #[test]
    fn idx_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<u8> = (0..2 * 28 * 28).map(|i| (i % 251) as u8).collect();
        fs::write(dir.path().join("train-images-idx3-ubyte"), idx_images(2, 28, 28, &px)).unwrap();
        let mut lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 4, 9];
        fs::write(dir.path().join("train-labels-idx1-ubyte"), &lab).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&idx_images(1, 28, 28, &px[..784])).unwrap();
        fs::write(dir.path().join("t10k-images-idx3-ubyte.gz"), gz.finish().unwrap()).unwrap();
        lab.truncate(9);
        lab[7] = 1;
        fs::write(dir.path().join("t10k-labels-idx1-ubyte"), &lab).unwrap();
        let split = load_fashion_mnist(dir.path()).unwrap();
        assert_eq!(split.train.labels, vec![4, 9]);
        assert_eq!(split.train.images[1].get(0, 3, 0), px[784 + 3] as f64 / 255.0);
        assert_eq!(split.test.images[0], split.train.images[0]);

        let bad = dir.path().join("bad");
        fs::write(&bad, [0, 0, 8, 2, 0, 0, 0, 0]).unwrap();
        assert!(load_idx_images(&bad).unwrap_err().to_string().contains("magic"));
        fs::write(&bad, idx_images(2, 28, 28, &px[..100])).unwrap();
        assert!(load_idx_images(&bad).is_err());
    }

    #[test]
    fn standardization_contract() {
        let train = random_dataset(6, 4, 4, 3, 4);
        let test = random_dataset(3, 4, 4, 3, 5);
        let mut constant = train.clone();
        for x in &mut constant.images {
            for px in x.values_mut().chunks_exact_mut(3) {
                px[2] = 0.7;
            }
        }
        let split = standardize(&DataSplit { train: constant, test }).unwrap();
        let stats = |ds: &LabeledDataset, ch: usize| {
            let v: Vec<f64> = ds.images.iter().flat_map(|x| x.values().chunks_exact(3).map(move |p| p[ch])).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            (m, s)
        };
        for ch in 0..2 {
            let (m, s) = stats(&split.train, ch);
            assert!(m.abs() <= 1e-10 && (s - 1.0).abs() <= 1e-6);
        }
        assert!(split.train.images.iter().all(|x| x.values().chunks_exact(3).all(|p| p[2] == 0.0)));
        assert!(stats(&split.test, 0).0.abs() > 1e-6);
    }

    #[test]
    fn downsample_averages_blocks() {
        let x = Image::from_fn(4, 4, 1, |i, j, _| (i * 4 + j) as f64);
        let y = downsample2(&x);
        assert_eq!(y.shape(), (2, 2, 1));
        assert_eq!(y.get(0, 0, 0), 2.5);
        assert_eq!(y.get(1, 1, 0), 12.5);
    }

    fn small_opts(count: usize) -> PatchBankOptions {
        PatchBankOptions {
            count,
            size: 3,
            seed: 0,
            epsilon: DEFAULT_ZCA_EPSILON,
            flip_closed: true,
        }
    }

    #[test]
    fn patch_bank_is_deterministic_and_flip_closed() {
        let ds = random_dataset(5, 8, 8, 2, 6);
        let a = build_patch_bank(&ds, &small_opts(40)).unwrap();
        let b = build_patch_bank(&ds, &small_opts(40)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.filters.len(), 80);
        for m in 0..40 {
            assert_eq!(a.filters[a.flip_partner(m).unwrap()], flip_patch(&a.filters[m], 3, 2));
        }
    }

    #[test]
    fn single_patch_bank_is_near_unit() {
        let ds = random_dataset(2, 6, 6, 1, 7);
        let bank = build_patch_bank(&ds, &PatchBankOptions { flip_closed: false, ..small_opts(1) }).unwrap();
        assert_eq!(bank.filters.len(), 1);
        let norm = bank.filters[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0 / (1.0 + DEFAULT_ZCA_EPSILON).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn whitened_second_moment_matches_regularized_identity() {
        // Per-patch centering leaves a null direction and eps keeps every
        // eigenvalue below one, so the exact target is U diag(l / (l + eps)) U^T.
        let ds = random_dataset(10, 10, 10, 3, 8);
        let opts = PatchBankOptions {
            count: 2048,
            size: 5,
            seed: 0,
            epsilon: DEFAULT_ZCA_EPSILON,
            flip_closed: false,
        };
        let bank = build_patch_bank(&ds, &opts).unwrap();
        let d = bank.dim();
        let f = DMatrix::from_fn(2048, d, |r, s| bank.filters[r][s]);
        let cov = f.transpose() * &f / 2048.0;
        // Rebuild the raw patches' second moment from the whitening matrix: W^-2 - eps I.
        let w = DMatrix::from_row_slice(d, d, &bank.zca);
        let eig = SymmetricEigen::new(w.clone());
        let target_eigs = eig.eigenvalues.map(|s| {
            let l = 1.0 / (s * s) - opts.epsilon;
            l / (l + opts.epsilon)
        });
        let target = &eig.eigenvectors * DMatrix::from_diagonal(&target_eigs) * eig.eigenvectors.transpose();
        assert!((&cov - &target).amax() <= 1e-6);
        // Off the null direction the whitened covariance is close to identity.
        let near_one = target_eigs.iter().filter(|&&v| v > 0.5).count();
        assert_eq!(near_one, d - 1);
    }

    #[test]
    fn featurize_shapes_and_zero_input() {
        let ds = random_dataset(3, 7, 6, 2, 9);
        let bank = build_patch_bank(&ds, &small_opts(4)).unwrap();
        let out = patch_featurize(&ds.images[0], &bank).unwrap();
        assert_eq!(out.shape(), (5, 4, 16));
        let zero = patch_featurize(&Image::zeros(7, 6, 2), &bank).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        assert!(patch_featurize(&Image::zeros(2, 6, 2), &bank).is_err());
    }

    #[test]
    fn featurize_is_flip_equivariant() {
        let ds = random_dataset(4, 8, 7, 3, 10);
        let bank = build_patch_bank(&ds, &small_opts(6)).unwrap();
        let x = &ds.images[1];
        let a = patch_featurize(&hflip(x), &bank).unwrap();
        let b = patch_featurize(x, &bank).unwrap();
        let m = bank.filters.len();
        let (op, oq, _) = b.shape();
        for i in 0..op {
            for j in 0..oq {
                for f in 0..m {
                    let g = bank.flip_partner(f).unwrap();
                    assert!((a.get(i, j, f) - b.get(op - 1 - i, j, g)).abs() <= 1e-12);
                    assert!((a.get(i, j, m + f) - b.get(op - 1 - i, j, m + g)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn dataset_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckim");
        let ds = random_dataset(3, 4, 5, 2, 11);
        write_dataset(&path, &ds).unwrap();
        assert_eq!(&fs::read(&path).unwrap()[..4], b"CKIM");
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.provenance, ds.provenance);
        for (a, b) in back.images.iter().zip(&ds.images) {
            for (u, v) in a.values().iter().zip(b.values()) {
                assert_eq!(*u, *v as f32 as f64);
            }
        }
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn subsample_is_seeded() {
        let ds = random_dataset(10, 2, 2, 1, 12);
        assert_eq!(ds.subsample(4, 3).unwrap(), ds.subsample(4, 3).unwrap());
        assert_ne!(ds.subsample(4, 3).unwrap().images, ds.subsample(4, 4).unwrap().images);
        assert!(ds.subsample(11, 0).is_err());
    }
}
