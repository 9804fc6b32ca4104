//! Kernel matrices, diagonal normalization, kernel ridge regression and the
//! augmented-kernel / augmented-dataset prediction equivalence check.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::augment::{build_augmented_dataset, check_equivariance, Augmented, Group, PairKernel};
use crate::error::{Error, Result};
use crate::tensor::Image;

/// Ridge used throughout the experiments.
pub const DEFAULT_LAMBDA: f64 = 5e-5;

/// Square, symmetric, diagonal-normalized kernel matrix over a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub n: usize,
    /// Row-major `n x n`.
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Raw self-kernel values `K(x_i, x_i)` used for normalization.
    pub self_values: Vec<f64>,
}

impl KernelMatrix {
    /// Normalizes a raw symmetric matrix: `K(x,y) / sqrt(K(x,x) K(y,y))`.
    pub fn from_raw(n: usize, raw: Vec<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if raw.len() != n * n {
            return Err(Error::ShapeMismatch(format!("{n}x{n} kernel matrix with {} values", raw.len())));
        }
        let self_values: Vec<f64> = (0..n).map(|i| raw[i * n + i]).collect();
        let mut m = Self::from_raw_with_self(n, raw, self_values, labels, class_count)?;
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        Ok(m)
    }

    /// Normalizes by externally supplied self values, e.g. those of the base
    /// kernel when `raw` holds an augmented kernel. The diagonal is kept as
    /// computed.
    pub fn from_raw_with_self(
        n: usize,
        raw: Vec<f64>,
        self_values: Vec<f64>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if raw.len() != n * n || labels.len() != n || self_values.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n}x{n} kernel matrix with {} values, {} self values and {} labels",
                raw.len(),
                self_values.len(),
                labels.len()
            )));
        }
        check_labels(&labels, class_count)?;
        if let Some(i) = self_values.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(format!(
                "self kernel value {} of example {i} cannot be normalized",
                self_values[i]
            )));
        }
        let mut values = raw;
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] /= (self_values[i] * self_values[j]).sqrt();
            }
        }
        Ok(KernelMatrix {
            n,
            values,
            labels,
            class_count,
            self_values,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Largest `|K_ij - K_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst / scale
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let m = DMatrix::from_row_slice(self.n, self.n, &self.values);
        SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Test-by-train kernel block, normalized with the test and training self values.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossKernel {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
}

impl CrossKernel {
    pub fn from_raw(
        raw: Vec<f64>,
        row_self: &[f64],
        col_self: &[f64],
        labels: Vec<usize>,
    ) -> Result<Self> {
        let (rows, cols) = (row_self.len(), col_self.len());
        if raw.len() != rows * cols || labels.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} cross kernel with {} values and {} labels",
                raw.len(),
                labels.len()
            )));
        }
        let mut values = raw;
        for i in 0..rows {
            for j in 0..cols {
                values[i * cols + j] /= (row_self[i] * col_self[j]).sqrt();
            }
        }
        Ok(CrossKernel {
            rows,
            cols,
            values,
            labels,
        })
    }
}

fn check_labels(labels: &[usize], class_count: usize) -> Result<()> {
    if class_count == 0 {
        return Err(Error::InvalidConfig("class count must be positive".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::InvalidConfig(format!(
            "label {l} out of range for {class_count} classes"
        )));
    }
    Ok(())
}

pub fn one_hot(labels: &[usize], class_count: usize) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(labels.len(), class_count);
    for (i, &l) in labels.iter().enumerate() {
        y[(i, l)] = 1.0;
    }
    y
}

/// Raw (unnormalized) Gram matrix of `kernel` over `images`, row-major.
pub fn gram_matrix<K: PairKernel + ?Sized>(kernel: &K, images: &[Image]) -> Result<Vec<f64>> {
    let n = images.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let vals = pairs
        .par_iter()
        .map(|&(i, j)| {
            kernel.eval(&images[i], &images[j]).map_err(|e| Error::Pair {
                row: i,
                col: j,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut out = vec![0.0; n * n];
    for (&(i, j), v) in pairs.iter().zip(vals) {
        out[i * n + j] = v;
        out[j * n + i] = v;
    }
    Ok(out)
}

/// Raw `rows x cols` block `K(rows_i, cols_j)`, row-major.
pub fn cross_matrix<K: PairKernel + ?Sized>(kernel: &K, rows: &[Image], cols: &[Image]) -> Result<Vec<f64>> {
    let m = cols.len();
    (0..rows.len() * m)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / m, k % m);
            kernel.eval(&rows[i], &cols[j]).map_err(|e| Error::Pair {
                row: i,
                col: j,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Fits on `kernel` over `images` with diagonal normalization.
pub fn assemble_kernel_matrix<K: PairKernel + ?Sized>(
    kernel: &K,
    images: &[Image],
    labels: &[usize],
    class_count: usize,
) -> Result<KernelMatrix> {
    if images.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    let raw = gram_matrix(kernel, images)?;
    KernelMatrix::from_raw(images.len(), raw, labels.to_vec(), class_count)
}

#[derive(Debug, Clone)]
pub struct RegressionModel {
    /// `n x class_count` dual coefficients.
    pub alpha: DMatrix<f64>,
    pub lambda: f64,
    /// Training self values, for normalizing test columns.
    pub normalization: Vec<f64>,
    /// `||(K + lambda I) alpha - Y|| / ||Y||`.
    pub relative_residual: f64,
}

/// Solves `(K + lambda I) alpha = Y` for a dense symmetric `K` (row-major `n x n`).
pub fn solve_ridge(values: &[f64], n: usize, targets: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, f64)> {
    if values.len() != n * n || targets.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "ridge system of size {n} with {} matrix entries and {} target rows",
            values.len(),
            targets.nrows()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("ridge must be non-negative, got {lambda}")));
    }
    let a = DMatrix::from_row_slice(n, n, values) + DMatrix::identity(n, n) * lambda;
    let mut alpha = match a.clone().cholesky() {
        Some(ch) => ch.solve(targets),
        None => {
            let lu = a.clone().lu();
            match lu.solve(targets) {
                Some(x) if x.iter().all(|v| v.is_finite()) => x,
                _ => return Err(Error::Singular { condition: condition_estimate(&a) }),
            }
        }
    };
    // Two rounds of iterative refinement.
    let lu = a.clone().lu();
    for _ in 0..2 {
        let r = targets - &a * &alpha;
        if let Some(dx) = lu.solve(&r) {
            alpha += dx;
        }
    }
    let y_norm = targets.norm().max(f64::MIN_POSITIVE);
    let residual = (targets - &a * &alpha).norm() / y_norm;
    if !residual.is_finite() {
        return Err(Error::Singular { condition: condition_estimate(&a) });
    }
    Ok((alpha, residual))
}

fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(a.clone()).eigenvalues;
    let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn krr_fit(k: &KernelMatrix, lambda: f64) -> Result<RegressionModel> {
    let y = one_hot(&k.labels, k.class_count);
    let (alpha, relative_residual) = solve_ridge(&k.values, k.n, &y, lambda)?;
    Ok(RegressionModel {
        alpha,
        lambda,
        normalization: k.self_values.clone(),
        relative_residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Row-major `m x class_count` scores.
    pub scores: Vec<f64>,
    pub class_count: usize,
    pub labels: Vec<usize>,
}

impl Prediction {
    pub fn accuracy(&self, truth: &[usize]) -> f64 {
        if truth.is_empty() {
            return 0.0;
        }
        let hits = self.labels.iter().zip(truth).filter(|(a, b)| a == b).count();
        hits as f64 / truth.len() as f64
    }
}

/// Argmax with ties going to the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

fn predict_scores(alpha: &DMatrix<f64>, cross: &[f64], m: usize) -> Result<Prediction> {
    let n = alpha.nrows();
    if cross.len() != m * n {
        return Err(Error::ShapeMismatch(format!(
            "cross kernel has {} values, expected {m}x{n}",
            cross.len()
        )));
    }
    let k = DMatrix::from_row_slice(m, n, cross);
    let s = k * alpha;
    let classes = alpha.ncols();
    let mut scores = Vec::with_capacity(m * classes);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let row: Vec<f64> = (0..classes).map(|c| s[(i, c)]).collect();
        labels.push(argmax(&row));
        scores.extend(row);
    }
    Ok(Prediction {
        scores,
        class_count: classes,
        labels,
    })
}

/// Scores `k_cross * alpha` for a normalized test-by-train block.
pub fn krr_predict(model: &RegressionModel, cross: &CrossKernel) -> Result<Prediction> {
    if cross.cols != model.alpha.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "model trained on {} points, cross kernel has {} columns",
            model.alpha.nrows(),
            cross.cols
        )));
    }
    predict_scores(&model.alpha, &cross.values, cross.rows)
}

/// Ridge-regression scores of `kernel` trained on `(train, labels)` and
/// evaluated on `test`, with no normalization.
pub fn krr_scores<K: PairKernel + ?Sized>(
    kernel: &K,
    train: &[Image],
    labels: &[usize],
    class_count: usize,
    test: &[Image],
    lambda: f64,
) -> Result<Prediction> {
    check_labels(labels, class_count)?;
    let gram = gram_matrix(kernel, train)?;
    let (alpha, _) = solve_ridge(&gram, train.len(), &one_hot(labels, class_count), lambda)?;
    let cross = cross_matrix(kernel, test, train)?;
    predict_scores(&alpha, &cross, test.len())
}

pub fn max_score_difference(a: &Prediction, b: &Prediction) -> f64 {
    a.scores
        .iter()
        .zip(&b.scores)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub group_size: usize,
    pub lambda: f64,
    /// Ridge used on the augmented dataset.
    pub augmented_lambda: f64,
    pub equivariance_violation: f64,
    pub max_score_difference: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Ridge on the augmented dataset that reproduces ridge `lambda` on the
/// augmented kernel: the solution `alpha_{i,g} = alpha_i / |G|` solves the
/// augmented system exactly when the ridge is scaled by `|G|`.
pub fn augmented_ridge(lambda: f64, group_size: usize) -> f64 {
    lambda * group_size as f64
}

/// Compares the predictions of the augmented kernel `K^G` on `(train, labels)`
/// against those of `K` on the augmented dataset.
#[allow(clippy::too_many_arguments)]
pub fn verify_augmentation_equivalence<K: PairKernel + ?Sized>(
    kernel: &K,
    group: &Group,
    train: &[Image],
    labels: &[usize],
    class_count: usize,
    test: &[Image],
    lambda: f64,
    tol: f64,
) -> Result<EquivalenceReport> {
    group.require_group()?;
    let channels = train
        .first()
        .map(|x| x.channels())
        .ok_or_else(|| Error::InvalidConfig("training set is empty".into()))?;
    let eq = check_equivariance(kernel, group, channels, 2, 0.0, 0x5eed)?;
    if eq.max_relative_violation > 1e-8 {
        return Err(Error::NotEquivariant {
            violation: eq.max_relative_violation,
            tol: 1e-8,
        });
    }
    let augmented = Augmented { base: kernel, group };
    let path_a = krr_scores(&augmented, train, labels, class_count, test, lambda)?;
    let data = build_augmented_dataset(train, labels, group)?;
    let augmented_lambda = augmented_ridge(lambda, group.len());
    let path_b = krr_scores(kernel, &data.images(), &data.labels(), class_count, test, augmented_lambda)?;
    let diff = max_score_difference(&path_a, &path_b);
    Ok(EquivalenceReport {
        group_size: group.len(),
        lambda,
        augmented_lambda,
        equivariance_violation: eq.max_relative_violation,
        max_score_difference: diff,
        tolerance: tol,
        passed: diff <= tol,
    })
}

const MATRIX_MAGIC: &[u8; 4] = b"CK4M";
const CROSS_MAGIC: &[u8; 4] = b"CK4R";
const FORMAT_VERSION: u32 = 1;

fn write_labels(w: &mut impl Write, labels: &[usize], path: &Path) -> Result<()> {
    for &l in labels {
        let l = u16::try_from(l).map_err(|_| Error::format(path, format!("label {l} exceeds u16")))?;
        w.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(path, format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, path, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, path, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, count: usize, path: &Path) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    read_exact_or(r, &mut buf, path, "kernel values")?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_labels(r: &mut impl Read, count: usize, path: &Path) -> Result<Vec<usize>> {
    let mut buf = vec![0u8; count * 2];
    read_exact_or(r, &mut buf, path, "labels")?;
    Ok(buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as usize).collect())
}

fn read_header(r: &mut impl Read, magic: &[u8; 4], path: &Path) -> Result<()> {
    let mut m = [0u8; 4];
    read_exact_or(r, &mut m, path, "magic")?;
    if &m != magic {
        return Err(Error::format(path, format!("bad magic {m:?}, expected {magic:?}")));
    }
    let version = read_u32(r, path, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    Ok(())
}

/// `"CK4M"`, version `u32`, `n` `u64`, `n^2` `f64` row-major, `n` `u16` labels;
/// all little-endian.
pub fn write_kernel_matrix(path: &Path, k: &KernelMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(k.n as u64).to_le_bytes())?;
    for v in &k.values {
        w.write_all(&v.to_le_bytes())?;
    }
    write_labels(&mut w, &k.labels, path)?;
    w.flush()?;
    Ok(())
}

/// Reads a `CK4M` file. The class count is taken as `max(label) + 1`; self
/// values are not stored and come back as ones.
pub fn read_kernel_matrix(path: &Path) -> Result<KernelMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, MATRIX_MAGIC, path)?;
    let n = read_u64(&mut r, path, "n")? as usize;
    let values = read_f64s(&mut r, n * n, path)?;
    let labels = read_labels(&mut r, n, path)?;
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    Ok(KernelMatrix {
        n,
        values,
        labels,
        class_count,
        self_values: vec![1.0; n],
    })
}

/// `"CK4R"`, version `u32`, rows `u64`, cols `u64`, `rows * cols` `f64`
/// row-major, `rows` `u16` labels; all little-endian.
pub fn write_cross_kernel(path: &Path, k: &CrossKernel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CROSS_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(k.rows as u64).to_le_bytes())?;
    w.write_all(&(k.cols as u64).to_le_bytes())?;
    for v in &k.values {
        w.write_all(&v.to_le_bytes())?;
    }
    write_labels(&mut w, &k.labels, path)?;
    w.flush()?;
    Ok(())
}

pub fn read_cross_kernel(path: &Path) -> Result<CrossKernel> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r, CROSS_MAGIC, path)?;
    let rows = read_u64(&mut r, path, "rows")? as usize;
    let cols = read_u64(&mut r, path, "cols")? as usize;
    let values = read_f64s(&mut r, rows * cols, path)?;
    let labels = read_labels(&mut r, rows, path)?;
    Ok(CrossKernel {
        rows,
        cols,
        values,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::ConvKernel;
    use crate::dp::{Family, KernelConfig};
    use crate::readout::Readout;
    use crate::tensor::PaddingScheme;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_images(n: usize, p: usize, q: usize, c: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Image::from_fn(p, q, c, |_, _, _| rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn identity(n: usize) -> Vec<f64> {
        (0..n * n).map(|k| (k / n == k % n) as u8 as f64).collect()
    }

    #[test]
    fn single_point_matrix_is_one() {
        let imgs = random_images(1, 3, 3, 1, 1);
        let k = ConvKernel::new(KernelConfig::new(2, Family::Cntk), Readout::Fc);
        let m = assemble_kernel_matrix(&k, &imgs, &[0], 1).unwrap();
        assert_eq!(m.values, vec![1.0]);
    }

    #[test]
    fn duplicated_image_has_unit_similarity() {
        let mut imgs = random_images(2, 3, 3, 1, 2);
        imgs[1] = imgs[0].clone();
        let k = ConvKernel::new(KernelConfig::new(2, Family::CnnGp), Readout::Gap);
        let m = assemble_kernel_matrix(&k, &imgs, &[0, 1], 2).unwrap();
        assert!((m.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_matrix_is_symmetric_psd() {
        let imgs = random_images(5, 4, 4, 2, 3);
        for readout in [Readout::Fc, Readout::Gap, Readout::lap(1, PaddingScheme::Zero)] {
            let k = ConvKernel::new(KernelConfig::new(3, Family::Cntk), readout);
            let m = assemble_kernel_matrix(&k, &imgs, &[0, 1, 0, 1, 0], 2).unwrap();
            assert!(m.asymmetry() <= 1e-12);
            assert!(m.min_eigenvalue() >= -1e-8);
            assert!(m.self_values.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn psd_on_larger_sample() {
        let imgs = random_images(20, 3, 3, 1, 4);
        let k = ConvKernel::new(KernelConfig::new(2, Family::CnnGp), Readout::Fc);
        let raw = gram_matrix(&k, &imgs).unwrap();
        let max_diag = (0..20).map(|i| raw[i * 20 + i]).fold(0.0, f64::max);
        let m = DMatrix::from_row_slice(20, 20, &raw);
        let min = SymmetricEigen::new(m).eigenvalues.min();
        assert!(min >= -1e-8 * max_diag);
    }

    #[test]
    fn pair_failures_name_the_pair() {
        let imgs = random_images(3, 3, 3, 1, 5);
        let failing = |x: &Image, y: &Image| -> Result<f64> {
            if x == y {
                Ok(1.0)
            } else {
                Err(Error::InvalidConfig("boom".into()))
            }
        };
        let err = gram_matrix(&failing, &imgs).unwrap_err();
        assert!(matches!(err, Error::Pair { row: 0, col: 1, .. }), "{err}");
    }

    #[test]
    fn identity_kernel_fits() {
        let k = KernelMatrix::from_raw(2, identity(2), vec![0, 1], 2).unwrap();
        let m = krr_fit(&k, 0.0).unwrap();
        assert_eq!(m.alpha, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = krr_fit(&k, 0.5).unwrap();
        assert!((m.alpha[(0, 0)] - 1.0 / 1.5).abs() < 1e-15);
        assert!(m.alpha[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn random_psd_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 30;
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let k = &g * g.transpose();
        let raw: Vec<f64> = k.transpose().iter().copied().collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let km = KernelMatrix::from_raw(n, raw, labels, 3).unwrap();
        let m = krr_fit(&km, DEFAULT_LAMBDA).unwrap();
        let a = DMatrix::from_row_slice(n, n, &km.values) + DMatrix::identity(n, n) * DEFAULT_LAMBDA;
        let y = one_hot(&km.labels, 3);
        assert!((&a * &m.alpha - &y).norm() <= 1e-8 * y.norm());
        assert!(m.relative_residual <= 1e-8);
    }

    #[test]
    fn singular_without_ridge_is_reported() {
        let k = KernelMatrix::from_raw(2, vec![1.0; 4], vec![0, 1], 2).unwrap();
        assert!(matches!(krr_fit(&k, 0.0), Err(Error::Singular { .. })));
        assert!(krr_fit(&k, 1e-3).is_ok());
    }

    #[test]
    fn prediction_examples() {
        let k = KernelMatrix::from_raw(3, identity(3), vec![2, 0, 1], 3).unwrap();
        let m = krr_fit(&k, 0.0).unwrap();
        let cross = CrossKernel::from_raw(vec![0.0, 0.0, 1.0], &[1.0], &[1.0; 3], vec![1]).unwrap();
        assert_eq!(krr_predict(&m, &cross).unwrap().labels, vec![1]);

        let zero = RegressionModel {
            alpha: DMatrix::zeros(3, 3),
            lambda: 0.0,
            normalization: vec![1.0; 3],
            relative_residual: 0.0,
        };
        let p = krr_predict(&zero, &cross).unwrap();
        assert_eq!(p.scores, vec![0.0; 3]);
        assert_eq!(p.labels, vec![0]);
    }

    #[test]
    fn prediction_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let alpha = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let cross: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = RegressionModel {
            alpha: alpha.clone(),
            lambda: 0.0,
            normalization: vec![1.0; 4],
            relative_residual: 0.0,
        };
        let ck = CrossKernel {
            rows: 2,
            cols: 4,
            values: cross.clone(),
            labels: vec![0, 0],
        };
        let p = krr_predict(&model, &ck).unwrap();
        for t in 0..2 {
            for c in 0..3 {
                let naive: f64 = (0..4).map(|i| cross[t * 4 + i] * alpha[(i, c)]).sum();
                assert!((p.scores[t * 3 + c] - naive).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn interpolation_on_training_set() {
        let imgs = random_images(6, 4, 4, 1, 8);
        let labels = vec![0, 1, 2, 0, 1, 2];
        let k = ConvKernel::new(KernelConfig::new(2, Family::Cntk), Readout::Fc);
        let pred = krr_scores(&k, &imgs, &labels, 3, &imgs, 0.0).unwrap();
        assert_eq!(pred.labels, labels);
        assert_eq!(pred.accuracy(&labels), 1.0);
    }

    #[test]
    fn labels_invariant_to_kernel_scaling() {
        let imgs = random_images(8, 3, 3, 1, 9);
        let test = random_images(5, 3, 3, 1, 10);
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let k = ConvKernel::new(KernelConfig::new(2, Family::CnnGp), Readout::Gap);
        let scaled = |x: &Image, y: &Image| k.eval(x, y).map(|v| 7.5 * v);
        let a = krr_scores(&k, &imgs, &labels, 3, &test, 1e-3).unwrap();
        let b = krr_scores(&scaled, &imgs, &labels, 3, &test, 7.5e-3).unwrap();
        assert_eq!(a.labels, b.labels);
        let a0 = krr_scores(&k, &imgs, &labels, 3, &test, 0.0).unwrap();
        let b0 = krr_scores(&scaled, &imgs, &labels, 3, &test, 0.0).unwrap();
        assert_eq!(a0.labels, b0.labels);
    }

    #[test]
    fn ridge_path_converges_to_interpolant() {
        let imgs = random_images(6, 3, 3, 1, 11);
        let test = random_images(3, 3, 3, 1, 12);
        let labels = vec![0, 1, 0, 1, 0, 1];
        let k = ConvKernel::new(KernelConfig::new(1, Family::CnnGp), Readout::Fc);
        let exact = krr_scores(&k, &imgs, &labels, 2, &test, 0.0).unwrap();
        let diffs: Vec<f64> = [1e-2, 1e-4, 1e-6]
            .iter()
            .map(|&l| max_score_difference(&krr_scores(&k, &imgs, &labels, 2, &test, l).unwrap(), &exact))
            .collect();
        assert!(diffs[0] > diffs[1] && diffs[1] > diffs[2], "{diffs:?}");
    }

    #[test]
    fn equivalence_with_trivial_group() {
        let imgs = random_images(4, 3, 3, 1, 13);
        let test = random_images(2, 3, 3, 1, 14);
        let k = ConvKernel::new(KernelConfig::new(1, Family::Cntk), Readout::Fc);
        let rep = verify_augmentation_equivalence(&k, &Group::trivial(3, 3), &imgs, &[0, 1, 0, 1], 2, &test, 0.0, 1e-6).unwrap();
        assert_eq!(rep.max_score_difference, 0.0);
    }

    #[test]
    fn equivalence_rejects_non_equivariant_kernel() {
        let imgs = random_images(3, 3, 3, 1, 15);
        // Reads a single corner pixel, which a flip moves.
        let picky = |x: &Image, y: &Image| -> Result<f64> { Ok(1.0 + x.get(0, 0, 0) * y.get(0, 0, 0)) };
        let err = verify_augmentation_equivalence(&picky, &Group::flips(3, 3, PaddingScheme::Zero), &imgs, &[0, 1, 0], 2, &imgs, 0.0, 1e-6)
            .unwrap_err();
        assert!(matches!(err, Error::NotEquivariant { .. }));
    }

    #[test]
    fn kernel_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.ck4m");
        let k = KernelMatrix::from_raw(3, vec![4.0, 1.0, 0.5, 1.0, 1.0, 0.2, 0.5, 0.2, 9.0], vec![0, 2, 1], 3).unwrap();
        write_kernel_matrix(&path, &k).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CK4M");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 16 + 9 * 8 + 3 * 2);
        let back = read_kernel_matrix(&path).unwrap();
        assert_eq!(back.values, k.values);
        assert_eq!(back.labels, k.labels);

        std::fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(read_kernel_matrix(&path), Err(Error::Format { .. })));

        let cpath = dir.path().join("x.ck4r");
        let c = CrossKernel::from_raw(vec![1.0, 2.0], &[1.0], &[1.0, 4.0], vec![1]).unwrap();
        write_cross_kernel(&cpath, &c).unwrap();
        assert_eq!(read_cross_kernel(&cpath).unwrap(), c);
    }
}
