//! Translations, flips, the groups they generate, augmented datasets and
//! augmented kernels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dp::{compute_pair_cached, KernelConfig, SelfState};
use crate::error::{Error, Result};
use crate::readout::Readout;
use crate::tensor::{resolve0, Image, PaddingScheme};

/// `[T_{di,dj}(x)]_{i,j,c} = x[i + di, j + dj, c]`, out-of-range sources
/// resolved by `scheme`.
pub fn translate(x: &Image, di: i64, dj: i64, scheme: PaddingScheme) -> Image {
    let (p, q, c) = x.shape();
    let mut out = Image::zeros(p, q, c);
    for i in 0..p {
        let Some(si) = resolve0(i as i64 + di, p, scheme) else {
            continue;
        };
        for j in 0..q {
            let Some(sj) = resolve0(j as i64 + dj, q, scheme) else {
                continue;
            };
            for ch in 0..c {
                out.set(i, j, ch, x.get(si, sj, ch));
            }
        }
    }
    out
}

/// `[F(x)]_{i,j,c} = x[P + 1 - i, j, c]`: reverses the first spatial axis.
pub fn hflip(x: &Image) -> Image {
    let (p, q, c) = x.shape();
    Image::from_fn(p, q, c, |i, j, ch| x.get(p - 1 - i, j, ch))
}

/// `T_{shift} ∘ F^{flipped}`: every composition of translations and flips
/// reduces to this form through `F ∘ T_{a,b} = T_{-a,b} ∘ F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupElement {
    pub shift: (i64, i64),
    pub flipped: bool,
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement {
        shift: (0, 0),
        flipped: false,
    };

    pub const FLIP: GroupElement = GroupElement {
        shift: (0, 0),
        flipped: true,
    };

    pub fn translation(di: i64, dj: i64) -> Self {
        GroupElement {
            shift: (di, dj),
            flipped: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn apply(&self, x: &Image, scheme: PaddingScheme) -> Image {
        let base = if self.flipped { hflip(x) } else { x.clone() };
        if self.shift == (0, 0) {
            base
        } else {
            translate(&base, self.shift.0, self.shift.1, scheme)
        }
    }

    /// Shifts reduced modulo `(P, Q)`.
    pub fn canonical(&self, p: usize, q: usize) -> Self {
        GroupElement {
            shift: (self.shift.0.rem_euclid(p as i64), self.shift.1.rem_euclid(q as i64)),
            flipped: self.flipped,
        }
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &GroupElement, p: usize, q: usize) -> Self {
        let sign = if self.flipped { -1 } else { 1 };
        GroupElement {
            shift: (self.shift.0 + sign * other.shift.0, self.shift.1 + other.shift.1),
            flipped: self.flipped ^ other.flipped,
        }
        .canonical(p, q)
    }

    pub fn inverse(&self, p: usize, q: usize) -> Self {
        let (a, b) = self.shift;
        let inv = if self.flipped {
            // (T_{a,b} F)^{-1} = F T_{-a,-b} = T_{a,-b} F
            GroupElement {
                shift: (a, -b),
                flipped: true,
            }
        } else {
            GroupElement::translation(-a, -b)
        };
        inv.canonical(p, q)
    }

    /// Source position of output position `(i, j)` under circular padding.
    pub(crate) fn source_of(&self, i: usize, j: usize, p: usize, q: usize) -> (usize, usize) {
        let si = (i as i64 + self.shift.0).rem_euclid(p as i64) as usize;
        let sj = (j as i64 + self.shift.1).rem_euclid(q as i64) as usize;
        if self.flipped {
            (p - 1 - si, sj)
        } else {
            (si, sj)
        }
    }
}

/// A finite set of operators acting on `P x Q` images, together with the
/// padding used by its translations.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    p: usize,
    q: usize,
    padding: PaddingScheme,
    elements: Vec<GroupElement>,
}

impl Group {
    pub fn new(p: usize, q: usize, padding: PaddingScheme, elements: Vec<GroupElement>) -> Self {
        Group {
            p,
            q,
            padding,
            elements,
        }
    }

    pub fn trivial(p: usize, q: usize) -> Self {
        Self::new(p, q, PaddingScheme::Circular, vec![GroupElement::IDENTITY])
    }

    /// `{F, I}`, identity first.
    pub fn flips(p: usize, q: usize, padding: PaddingScheme) -> Self {
        Self::new(p, q, padding, vec![GroupElement::IDENTITY, GroupElement::FLIP])
    }

    /// All `P * Q` translations, row-major in the shift, identity first.
    pub fn translations(p: usize, q: usize, padding: PaddingScheme) -> Self {
        let elements = (0..p as i64)
            .flat_map(|a| (0..q as i64).map(move |b| GroupElement::translation(a, b)))
            .collect();
        Self::new(p, q, padding, elements)
    }

    /// Translations followed by translations composed with the flip.
    pub fn flip_translations(p: usize, q: usize) -> Self {
        let mut elements: Vec<_> = Self::translations(p, q, PaddingScheme::Circular).elements;
        let flipped: Vec<_> = elements
            .iter()
            .map(|g| GroupElement {
                shift: g.shift,
                flipped: true,
            })
            .collect();
        elements.extend(flipped);
        Self::new(p, q, PaddingScheme::Circular, elements)
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn padding(&self) -> PaddingScheme {
        self.padding
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.p, self.q)
    }

    pub fn apply(&self, g: &GroupElement, x: &Image) -> Image {
        g.apply(x, self.padding)
    }

    /// Rejects empty groups and zero-padded translations, which are not
    /// invertible.
    pub fn require_group(&self) -> Result<()> {
        if self.elements.is_empty() {
            return Err(Error::EmptyGroup);
        }
        if self.padding == PaddingScheme::Zero
            && self
                .elements
                .iter()
                .any(|g| g.canonical(self.p, self.q).shift != (0, 0))
        {
            return Err(Error::ZeroPaddedTranslations);
        }
        Ok(())
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        if (x.height(), x.width()) != (self.p, self.q) {
            return Err(Error::ShapeMismatch(format!(
                "group acts on {}x{} images, got {}x{}",
                self.p,
                self.q,
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }
}

/// A symmetric kernel on images.
pub trait PairKernel: Sync {
    fn eval(&self, x: &Image, y: &Image) -> Result<f64>;
}

impl<F> PairKernel for F
where
    F: Fn(&Image, &Image) -> Result<f64> + Sync,
{
    fn eval(&self, x: &Image, y: &Image) -> Result<f64> {
        self(x, y)
    }
}

/// Readout of the final-layer tensor of the dynamic program.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvKernel {
    pub config: KernelConfig,
    pub readout: Readout,
}

impl ConvKernel {
    pub fn new(config: KernelConfig, readout: Readout) -> Self {
        ConvKernel { config, readout }
    }
}

impl PairKernel for ConvKernel {
    fn eval(&self, x: &Image, y: &Image) -> Result<f64> {
        let t = crate::dp::compute_pair(x, y, &self.config)?;
        Ok(self.readout.apply(&t))
    }
}

/// `K^G(x, y) = mean_{g in G} K(g(x), y)`.
pub fn augmented_kernel<K: PairKernel + ?Sized>(k: &K, group: &Group, x: &Image, y: &Image) -> Result<f64> {
    group.require_group()?;
    group.check_image(x)?;
    let mut acc = 0.0;
    for g in group.elements() {
        acc += k.eval(&group.apply(g, x), y)?;
    }
    Ok(acc / group.len() as f64)
}

/// [`augmented_kernel`] as a kernel in its own right.
pub struct Augmented<'a, K: PairKernel + ?Sized> {
    pub base: &'a K,
    pub group: &'a Group,
}

impl<K: PairKernel + ?Sized> PairKernel for Augmented<'_, K> {
    fn eval(&self, x: &Image, y: &Image) -> Result<f64> {
        augmented_kernel(self.base, self.group, x, y)
    }
}

/// Augmented convolutional kernel that derives the self states of `g(x)` from
/// those of `x` by re-indexing instead of re-running the self recursion.
pub fn augmented_conv_kernel(
    k: &ConvKernel,
    group: &Group,
    x: &Image,
    sx: &SelfState,
    y: &Image,
    sy: &SelfState,
) -> Result<f64> {
    group.require_group()?;
    group.check_image(x)?;
    let (p, q) = group.shape();
    let mut acc = 0.0;
    for g in group.elements() {
        let gx = group.apply(g, x);
        let sgx = sx.reindexed(|i, j| g.source_of(i, j, p, q));
        let t = compute_pair_cached(&gx, y, &sgx, sy, &k.config)?;
        acc += k.readout.apply(&t);
    }
    Ok(acc / group.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivarianceReport {
    pub trials: usize,
    pub group_size: usize,
    /// Largest `|K(g(x), g(y)) - K(x, y)|`.
    pub max_violation: f64,
    /// Largest violation divided by `max(1, |K(x, y)|)`.
    pub max_relative_violation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks `K(g(x), g(y)) = K(x, y)` on `trials` random image pairs of the
/// given shape, for every element of the group.
pub fn check_equivariance<K: PairKernel + ?Sized>(
    k: &K,
    group: &Group,
    channels: usize,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<EquivarianceReport> {
    let (p, q) = group.shape();
    let pairs: Vec<(Image, Image)> = (0..trials.max(1))
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let mut img = || Image::from_fn(p, q, channels, |_, _, _| rng.random_range(-1.0..1.0));
            (img(), img())
        })
        .collect();
    let violations: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(x, y)| -> Result<Vec<(f64, f64)>> {
            let base = k.eval(x, y)?;
            group
                .elements()
                .iter()
                .map(|g| {
                    let v = (k.eval(&group.apply(g, x), &group.apply(g, y))? - base).abs();
                    Ok((v, v / base.abs().max(1.0)))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let max_violation = violations.iter().map(|v| v.0).fold(0.0, f64::max);
    let max_relative_violation = violations.iter().map(|v| v.1).fold(0.0, f64::max);
    Ok(EquivarianceReport {
        trials: pairs.len(),
        group_size: group.len(),
        max_violation,
        max_relative_violation,
        tolerance: tol,
        passed: max_violation <= tol,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    pub base_len: usize,
    pub group_size: usize,
    /// `(g(x_i), y_i)`; group-element-major, so the first `base_len` entries
    /// are the images under the group's first element.
    pub examples: Vec<(Image, usize)>,
}

impl AugmentedDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn images(&self) -> Vec<Image> {
        self.examples.iter().map(|e| e.0.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.1).collect()
    }
}

pub fn build_augmented_dataset(images: &[Image], labels: &[usize], group: &Group) -> Result<AugmentedDataset> {
    group.require_group()?;
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut examples = Vec::with_capacity(images.len() * group.len());
    for g in group.elements() {
        for (x, &y) in images.iter().zip(labels) {
            group.check_image(x)?;
            examples.push((group.apply(g, x), y));
        }
    }
    Ok(AugmentedDataset {
        base_len: images.len(),
        group_size: group.len(),
        examples,
    })
}
