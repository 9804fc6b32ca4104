//! Storage for images and order-4 kernel tensors, plus the padding-aware
//! reductions every layer of the dynamic program is built from.
//!
//! Math-facing functions ([`resolve_index`], [`patch_trace`]) take 1-based
//! indices. Storage accessors ([`Image::get`], [`KernelTensor4::get`]) are
//! 0-based.

use std::fmt::Debug;
use std::iter::Sum;

use crate::error::{Error, Result};

/// Floating point type the kernel recursion runs in.
pub trait Real: num_traits::Float + Send + Sync + Debug + Sum + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PaddingScheme {
    Circular,
    Zero,
}

impl std::str::FromStr for PaddingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "circular" => Ok(PaddingScheme::Circular),
            "zero" => Ok(PaddingScheme::Zero),
            other => Err(Error::InvalidConfig(format!("unknown padding scheme {other:?}"))),
        }
    }
}

impl std::fmt::Display for PaddingScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PaddingScheme::Circular => f.write_str("circular"),
            PaddingScheme::Zero => f.write_str("zero"),
        }
    }
}

/// Resolves a 1-based index against `extent`. Returns the 1-based index it
/// refers to, or `None` when zero padding places it outside the image.
pub fn resolve_index(i: i64, extent: usize, scheme: PaddingScheme) -> Option<usize> {
    debug_assert!(extent >= 1);
    resolve0(i - 1, extent, scheme).map(|r| r + 1)
}

/// 0-based counterpart of [`resolve_index`].
#[inline]
pub(crate) fn resolve0(i: i64, extent: usize, scheme: PaddingScheme) -> Option<usize> {
    let n = extent as i64;
    match scheme {
        PaddingScheme::Circular => Some(i.rem_euclid(n) as usize),
        PaddingScheme::Zero => (0..n).contains(&i).then_some(i as usize),
    }
}

/// Dense `P x Q x C` image, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Image {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        Image {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Image::zeros(height, width, channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    img.values[(i * width + j) * channels + c] = f(i, j, c);
                }
            }
        }
        img
    }

    /// First spatial extent (`P`, the axis reflected by a flip).
    pub fn height(&self) -> usize {
        self.height
    }

    /// Second spatial extent (`Q`).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[(i * self.width + j) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        self.values[(i * self.width + j) * self.channels + c] = v;
    }

    /// Pixel at a possibly out-of-range 0-based position, resolved by `scheme`.
    #[inline]
    pub fn padded(&self, i: i64, j: i64, c: usize, scheme: PaddingScheme) -> f64 {
        match (
            resolve0(i, self.height, scheme),
            resolve0(j, self.width, scheme),
        ) {
            (Some(r), Some(s)) => self.get(r, s, c),
            _ => 0.0,
        }
    }

    /// Spatial plane of one channel, row-major `P x Q`.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.height * self.width)
            .map(|p| self.values[p * self.channels + c])
            .collect()
    }
}

/// Dense order-4 tensor indexed `(i, j, i', j')` over `[P] x [Q] x [P] x [Q]`,
/// row-major with `j'` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTensor4<T: Real = f64> {
    p: usize,
    q: usize,
    values: Vec<T>,
}

impl<T: Real> KernelTensor4<T> {
    pub fn zeros(p: usize, q: usize) -> Self {
        assert!(p > 0 && q > 0, "kernel tensor extents must be positive");
        KernelTensor4 {
            p,
            q,
            values: vec![T::zero(); p * q * p * q],
        }
    }

    pub fn from_values(p: usize, q: usize, values: Vec<T>) -> Result<Self> {
        if p == 0 || q == 0 || values.len() != p * q * p * q {
            return Err(Error::ShapeMismatch(format!(
                "{p}x{q}x{p}x{q} tensor needs {} values, got {}",
                p * q * p * q,
                values.len()
            )));
        }
        Ok(KernelTensor4 { p, q, values })
    }

    pub fn from_fn(p: usize, q: usize, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut t = Self::zeros(p, q);
        let mut k = 0;
        for i in 0..p {
            for j in 0..q {
                for i2 in 0..p {
                    for j2 in 0..q {
                        t.values[k] = f(i, j, i2, j2);
                        k += 1;
                    }
                }
            }
        }
        t
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, i2: usize, j2: usize) -> usize {
        ((i * self.q + j) * self.p + i2) * self.q + j2
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, i2: usize, j2: usize) -> T {
        self.values[self.offset(i, j, i2, j2)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, i2: usize, j2: usize, v: T) {
        let k = self.offset(i, j, i2, j2);
        self.values[k] = v;
    }

    /// Entries `T[i,j,i,j]` in row-major `(i, j)` order.
    pub fn diagonal(&self) -> Vec<T> {
        let pq = self.p * self.q;
        (0..pq).map(|a| self.values[a * pq + a]).collect()
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> KernelTensor4<U> {
        KernelTensor4 {
            p: self.p,
            q: self.q,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Swaps the roles of the two index pairs: `out[i,j,i',j'] = T[i',j',i,j]`.
    pub fn transposed(&self) -> Self {
        let pq = self.p * self.q;
        let mut out = Self::zeros(self.p, self.q);
        for a in 0..pq {
            for b in 0..pq {
                out.values[b * pq + a] = self.values[a * pq + b];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.p, self.q), (other.p, other.q));
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// `sum_{i,j} T[i,j,i,j]`.
pub fn trace4<T: Real>(t: &KernelTensor4<T>) -> f64 {
    let pq = t.p * t.q;
    (0..pq).map(|a| t.values[a * pq + a].as_f64()).sum()
}

fn check_filter(q: usize) -> Result<usize> {
    if q == 0 || q % 2 == 0 {
        return Err(Error::EvenFilter(q));
    }
    Ok((q - 1) / 2)
}

/// For every pair `(i, i')` along one axis, the resolved 0-based index pairs
/// `(i + a, i' + a)` for `a` in `[-(q-1)/2, (q-1)/2]` that survive padding.
///
/// The patch trace of a tensor at `(i, j, i', j')` is then the sum over the
/// product of the row list for `(i, i')` and the column list for `(j, j')`.
#[derive(Debug, Clone)]
pub struct AxisPairTable {
    extent: usize,
    starts: Vec<u32>,
    pairs: Vec<(u32, u32)>,
}

impl AxisPairTable {
    pub fn new(extent: usize, q: usize, scheme: PaddingScheme) -> Result<Self> {
        let half = check_filter(q)? as i64;
        Ok(Self::window(extent, -half, half, scheme))
    }

    /// Pairs `(i + a, i' + a)` for `a` in `[lo, hi]`.
    pub(crate) fn window(extent: usize, lo: i64, hi: i64, scheme: PaddingScheme) -> Self {
        let mut starts = Vec::with_capacity(extent * extent + 1);
        let mut pairs = Vec::new();
        for i in 0..extent as i64 {
            for i2 in 0..extent as i64 {
                starts.push(pairs.len() as u32);
                for a in lo..=hi {
                    if let (Some(r), Some(r2)) = (
                        resolve0(i + a, extent, scheme),
                        resolve0(i2 + a, extent, scheme),
                    ) {
                        pairs.push((r as u32, r2 as u32));
                    }
                }
            }
        }
        starts.push(pairs.len() as u32);
        AxisPairTable {
            extent,
            starts,
            pairs,
        }
    }

    #[inline]
    pub fn pairs(&self, i: usize, i2: usize) -> &[(u32, u32)] {
        let k = i * self.extent + i2;
        &self.pairs[self.starts[k] as usize..self.starts[k + 1] as usize]
    }
}

/// Patch-trace reduction of a whole tensor:
/// `out[i,j,i',j'] = sum_{a,b} T[i+a, j+b, i'+a, j'+b]` over the filter window.
///
/// Offsets are summed row offset outer, column offset inner, so the result is
/// bit-reproducible.
pub fn patch_trace_all<T: Real>(
    t: &KernelTensor4<T>,
    rows: &AxisPairTable,
    cols: &AxisPairTable,
) -> KernelTensor4<T> {
    let (p, q) = (t.p, t.q);
    let pq = p * q;
    let mut out = KernelTensor4::zeros(p, q);
    let mut row_offsets = Vec::new();
    let mut col_offsets = Vec::new();
    let mut k = 0;
    for i in 0..p {
        for j in 0..q {
            for i2 in 0..p {
                row_offsets.clear();
                row_offsets.extend(
                    rows.pairs(i, i2)
                        .iter()
                        .map(|&(r, r2)| r as usize * q * pq + r2 as usize * q),
                );
                for j2 in 0..q {
                    col_offsets.clear();
                    col_offsets.extend(
                        cols.pairs(j, j2)
                            .iter()
                            .map(|&(s, s2)| s as usize * pq + s2 as usize),
                    );
                    let mut acc = T::zero();
                    for &ro in &row_offsets {
                        for &co in &col_offsets {
                            acc = acc + t.values[ro + co];
                        }
                    }
                    out.values[k] = acc;
                    k += 1;
                }
            }
        }
    }
    out
}

/// Sum of `T` over the convolution-window diagonal at the 1-based position
/// `(i, j, i', j')`: all offsets `(a, b)` in `[-(q-1)/2, (q-1)/2]^2`, applied to
/// both index pairs. Under zero padding, offsets that leave the image on
/// either side contribute nothing.
pub fn patch_trace<T: Real>(
    t: &KernelTensor4<T>,
    idx: [usize; 4],
    q: usize,
    scheme: PaddingScheme,
) -> Result<f64> {
    let half = check_filter(q)? as i64;
    let [i, j, i2, j2] = idx;
    if !(1..=t.p).contains(&i) || !(1..=t.p).contains(&i2) || !(1..=t.q).contains(&j) || !(1..=t.q).contains(&j2) {
        return Err(Error::ShapeMismatch(format!(
            "index {idx:?} outside a {}x{} tensor",
            t.p, t.q
        )));
    }
    let mut acc = 0.0;
    for a in -half..=half {
        let (Some(r), Some(r2)) = (
            resolve0(i as i64 - 1 + a, t.p, scheme),
            resolve0(i2 as i64 - 1 + a, t.p, scheme),
        ) else {
            continue;
        };
        for b in -half..=half {
            if let (Some(s), Some(s2)) = (
                resolve0(j as i64 - 1 + b, t.q, scheme),
                resolve0(j2 as i64 - 1 + b, t.q, scheme),
            ) {
                acc += t.get(r, s, r2, s2).as_f64();
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(p: usize, q: usize, rng: &mut ChaCha8Rng) -> KernelTensor4 {
        KernelTensor4::from_fn(p, q, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn resolve_index_examples() {
        assert_eq!(resolve_index(0, 4, PaddingScheme::Circular), Some(4));
        assert_eq!(resolve_index(0, 4, PaddingScheme::Zero), None);
        assert_eq!(resolve_index(5, 4, PaddingScheme::Circular), Some(1));
        assert_eq!(resolve_index(-9, 4, PaddingScheme::Circular), Some(3));
        assert_eq!(resolve_index(4, 4, PaddingScheme::Zero), Some(4));
        assert_eq!(resolve_index(5, 4, PaddingScheme::Zero), None);
    }

    #[test]
    fn trace4_examples() {
        let diag = KernelTensor4::<f64>::from_fn(2, 2, |i, j, a, b| {
            if (i, j) == (a, b) {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(trace4(&diag), 4.0);
        assert_eq!(trace4(&KernelTensor4::<f64>::zeros(3, 2)), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(3, 3, &mut rng);
        let mut naive = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                naive += t.get(i, j, i, j);
            }
        }
        assert_eq!(trace4(&t), naive);
    }

    #[test]
    fn patch_trace_q1_is_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(3, 4, &mut rng);
        for scheme in [PaddingScheme::Circular, PaddingScheme::Zero] {
            assert_eq!(patch_trace(&t, [2, 3, 1, 4], 1, scheme).unwrap(), t.get(1, 2, 0, 3));
        }
    }

    #[test]
    fn patch_trace_counts_window_diagonal() {
        let ones = KernelTensor4::<f64>::from_fn(5, 5, |_, _, _, _| 1.0);
        // q^2 offsets (a, b) shared by both index pairs.
        for idx in [[1, 1, 1, 1], [3, 2, 5, 4], [5, 5, 1, 1]] {
            assert_eq!(patch_trace(&ones, idx, 3, PaddingScheme::Circular).unwrap(), 9.0);
        }
        // Corner: a, b in {0, 1} only.
        assert_eq!(patch_trace(&ones, [1, 1, 1, 1], 3, PaddingScheme::Zero).unwrap(), 4.0);
        // Opposite corners clip different offsets: rows keep a = 0 only.
        assert_eq!(patch_trace(&ones, [1, 3, 5, 3], 3, PaddingScheme::Zero).unwrap(), 3.0);
    }

    #[test]
    fn patch_trace_rejects_even_filter() {
        let t = KernelTensor4::<f64>::zeros(2, 2);
        assert!(matches!(
            patch_trace(&t, [1, 1, 1, 1], 2, PaddingScheme::Zero),
            Err(Error::EvenFilter(2))
        ));
        assert!(AxisPairTable::new(4, 0, PaddingScheme::Zero).is_err());
    }

    #[test]
    fn table_reduction_matches_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_tensor(4, 3, &mut rng);
        for scheme in [PaddingScheme::Circular, PaddingScheme::Zero] {
            for q in [1, 3, 5] {
                let rows = AxisPairTable::new(4, q, scheme).unwrap();
                let cols = AxisPairTable::new(3, q, scheme).unwrap();
                let all = patch_trace_all(&t, &rows, &cols);
                for i in 0..4 {
                    for j in 0..3 {
                        for i2 in 0..4 {
                            for j2 in 0..3 {
                                let direct =
                                    patch_trace(&t, [i + 1, j + 1, i2 + 1, j2 + 1], q, scheme)
                                        .unwrap();
                                assert!((all.get(i, j, i2, j2) - direct).abs() < 1e-12);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_padding_bounded_by_circular_on_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = KernelTensor4::<f64>::from_fn(4, 4, |_, _, _, _| rng.random_range(0.0..1.0));
        for i in 1..=4 {
            for i2 in 1..=4 {
                let idx = [i, 2, i2, 3];
                let z = patch_trace(&t, idx, 3, PaddingScheme::Zero).unwrap();
                let c = patch_trace(&t, idx, 3, PaddingScheme::Circular).unwrap();
                assert!(z <= c + 1e-15);
            }
        }
    }

    #[test]
    fn image_rejects_bad_input() {
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(0, 2, 1, vec![]).is_err());
        assert!(matches!(
            Image::new(1, 1, 1, vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }
}
