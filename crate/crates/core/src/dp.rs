//! Layerwise dynamic program for the CNN-GP covariance tensors `Sigma^(h)` and
//! the CNTK tensors `Theta^(h)` of an image pair.
//!
//! Layer 0 is the windowed channel inner product of the two images. Every
//! later layer maps the previous covariance through the ReLU expectations and
//! sums the result over the convolution window. The final layer skips the
//! window sum and the bias term, so the readouts act on the covariance of the
//! last post-activation feature map.

use crate::arccos::{relu_pair, relu_prod, C_SIGMA};
use crate::error::{Error, Result};
use crate::tensor::{patch_trace_all, AxisPairTable, Image, KernelTensor4, PaddingScheme, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Gaussian-process kernel (only the last layer trained).
    CnnGp,
    /// Neural tangent kernel (all layers trained).
    Cntk,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cnngp" | "gp" => Ok(Family::CnnGp),
            "cntk" | "ntk" => Ok(Family::Cntk),
            other => Err(Error::InvalidConfig(format!("unknown kernel family {other:?}"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::CnnGp => f.write_str("cnngp"),
            Family::Cntk => f.write_str("cntk"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    /// Number of convolution + ReLU layers (applications of [`dp_layer`]).
    pub depth: usize,
    pub filter_size: usize,
    /// `gamma`; enters every non-final layer as `+ gamma^2`.
    pub bias_scale: f64,
    pub padding: PaddingScheme,
    pub family: Family,
}

impl KernelConfig {
    pub fn new(depth: usize, family: Family) -> Self {
        KernelConfig {
            depth,
            filter_size: 3,
            bias_scale: 0.0,
            padding: PaddingScheme::Zero,
            family,
        }
    }

    pub fn with_padding(mut self, padding: PaddingScheme) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_filter_size(mut self, q: usize) -> Self {
        self.filter_size = q;
        self
    }

    pub fn with_bias_scale(mut self, gamma: f64) -> Self {
        self.bias_scale = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.filter_size == 0 || self.filter_size % 2 == 0 {
            return Err(Error::EvenFilter(self.filter_size));
        }
        if self.depth == 0 {
            return Err(Error::InvalidConfig("depth must be at least 1".into()));
        }
        if !(self.bias_scale >= 0.0 && self.bias_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bias scale must be finite and non-negative, got {}",
                self.bias_scale
            )));
        }
        Ok(())
    }
}

/// Padding-aware window tables for one image shape.
#[derive(Debug, Clone)]
pub struct Windows {
    rows: AxisPairTable,
    cols: AxisPairTable,
}

impl Windows {
    pub fn new(p: usize, q: usize, cfg: &KernelConfig) -> Result<Self> {
        Ok(Windows {
            rows: AxisPairTable::new(p, cfg.filter_size, cfg.padding)?,
            cols: AxisPairTable::new(q, cfg.filter_size, cfg.padding)?,
        })
    }
}

/// Current-layer tensors for a pair `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairState<T: Real = f64> {
    pub sigma_xy: KernelTensor4<T>,
    pub sigma_xx: KernelTensor4<T>,
    pub sigma_yy: KernelTensor4<T>,
    /// Present for [`Family::Cntk`] only.
    pub theta_xy: Option<KernelTensor4<T>>,
}

impl<T: Real> PairState<T> {
    /// Layer-0 state (`Theta^(0) = Sigma^(0)`).
    pub fn initial(x: &Image, y: &Image, cfg: &KernelConfig) -> Result<Self> {
        cfg.validate()?;
        let sigma_xy = sigma0::<T>(x, y, cfg)?;
        let theta_xy = (cfg.family == Family::Cntk).then(|| sigma_xy.clone());
        Ok(PairState {
            sigma_xx: sigma0(x, x, cfg)?,
            sigma_yy: sigma0(y, y, cfg)?,
            sigma_xy,
            theta_xy,
        })
    }
}

fn check_pair(x: &Image, y: &Image) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image shapes differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// `Sigma^(0)(x, y)[i,j,i',j'] = sum_c sum_{a,b} x[i+a, j+b, c] * y[i'+a, j'+b, c] + gamma^2`.
pub fn sigma0<T: Real>(x: &Image, y: &Image, cfg: &KernelConfig) -> Result<KernelTensor4<T>> {
    check_pair(x, y)?;
    let windows = Windows::new(x.height(), x.width(), cfg)?;
    Ok(sigma0_with(x, y, cfg, &windows))
}

fn sigma0_with<T: Real>(x: &Image, y: &Image, cfg: &KernelConfig, w: &Windows) -> KernelTensor4<T> {
    let (p, q, c) = x.shape();
    let pq = p * q;
    let (xv, yv) = (x.values(), y.values());
    let mut gram = KernelTensor4::<T>::zeros(p, q);
    let g = gram.values_mut();
    for a in 0..pq {
        let xa = &xv[a * c..(a + 1) * c];
        for b in 0..pq {
            let yb = &yv[b * c..(b + 1) * c];
            let dot: f64 = xa.iter().zip(yb).map(|(u, v)| u * v).sum();
            g[a * pq + b] = T::from_f64(dot);
        }
    }
    let mut out = patch_trace_all(&gram, &w.rows, &w.cols);
    add_bias(&mut out, cfg);
    out
}

fn add_bias<T: Real>(t: &mut KernelTensor4<T>, cfg: &KernelConfig) {
    if cfg.bias_scale != 0.0 {
        let g2 = T::from_f64(cfg.bias_scale * cfg.bias_scale);
        for v in t.values_mut() {
            *v = *v + g2;
        }
    }
}

fn check_cov<T: Real>(a: T, d: T, b: T) -> Result<()> {
    let rel = T::from_f64(1e-9).max(T::epsilon() * T::from_f64(64.0));
    let abs = T::from_f64(1e-12);
    let ok = a.is_finite()
        && d.is_finite()
        && b.is_finite()
        && a >= -abs
        && d >= -abs
        && b * b <= a * d * (T::one() + rel) + abs;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidCovariance {
            a: a.as_f64(),
            d: d.as_f64(),
            b: b.as_f64(),
        })
    }
}

/// Post-activation tensors of one layer: `K` and, for the CNTK, the
/// propagated tangent term `K_dot * Theta_prev + K`.
struct Activated<T: Real> {
    k: KernelTensor4<T>,
    tangent: Option<KernelTensor4<T>>,
}

fn activate<T: Real>(
    sigma: &KernelTensor4<T>,
    diag_x: &[T],
    diag_y: &[T],
    theta: Option<&KernelTensor4<T>>,
    cfg: &KernelConfig,
) -> Result<Activated<T>> {
    let (p, q) = (sigma.p(), sigma.q());
    let pq = p * q;
    let scale = T::from_f64(C_SIGMA / (cfg.filter_size * cfg.filter_size) as f64);
    let sv = sigma.values();
    let mut k = KernelTensor4::<T>::zeros(p, q);
    match theta {
        None => {
            let kv = k.values_mut();
            for a in 0..pq {
                let da = diag_x[a];
                for b in 0..pq {
                    let (db, s) = (diag_y[b], sv[a * pq + b]);
                    check_cov(da, db, s)?;
                    kv[a * pq + b] = scale * relu_prod(da, db, s);
                }
            }
            Ok(Activated { k, tangent: None })
        }
        Some(theta) => {
            let tv = theta.values();
            let mut tangent = KernelTensor4::<T>::zeros(p, q);
            let (kv, nv) = (k.values_mut(), tangent.values_mut());
            for a in 0..pq {
                let da = diag_x[a];
                for b in 0..pq {
                    let idx = a * pq + b;
                    let (db, s) = (diag_y[b], sv[idx]);
                    check_cov(da, db, s)?;
                    let (e, ed) = relu_pair(da, db, s);
                    let kk = scale * e;
                    kv[idx] = kk;
                    nv[idx] = scale * ed * tv[idx] + kk;
                }
            }
            Ok(Activated {
                k,
                tangent: Some(tangent),
            })
        }
    }
}

fn layer_step<T: Real>(
    sigma: &KernelTensor4<T>,
    diag_x: &[T],
    diag_y: &[T],
    theta: Option<&KernelTensor4<T>>,
    cfg: &KernelConfig,
    windows: &Windows,
    is_last: bool,
) -> Result<(KernelTensor4<T>, Option<KernelTensor4<T>>)> {
    let act = activate(sigma, diag_x, diag_y, theta, cfg)?;
    if is_last {
        return Ok((act.k, act.tangent));
    }
    let mut s = patch_trace_all(&act.k, &windows.rows, &windows.cols);
    add_bias(&mut s, cfg);
    let t = act.tangent.map(|t| {
        let mut t = patch_trace_all(&t, &windows.rows, &windows.cols);
        add_bias(&mut t, cfg);
        t
    });
    Ok((s, t))
}

/// One application of the recursion to a pair state. On the last layer the
/// outputs are the post-activation tensors without the window sum or bias.
pub fn dp_layer<T: Real>(state: &PairState<T>, cfg: &KernelConfig, is_last: bool) -> Result<PairState<T>> {
    cfg.validate()?;
    let (p, q) = (state.sigma_xy.p(), state.sigma_xy.q());
    let windows = Windows::new(p, q, cfg)?;
    let dx = state.sigma_xx.diagonal();
    let dy = state.sigma_yy.diagonal();
    let theta = match cfg.family {
        Family::CnnGp => None,
        Family::Cntk => Some(state.theta_xy.as_ref().ok_or_else(|| {
            Error::InvalidConfig("CNTK layer needs a theta tensor in the pair state".into())
        })?),
    };
    let (sigma_xy, theta_xy) = layer_step(&state.sigma_xy, &dx, &dy, theta, cfg, &windows, is_last)?;
    let (sigma_xx, _) = layer_step(&state.sigma_xx, &dx, &dx, None, cfg, &windows, is_last)?;
    let (sigma_yy, _) = layer_step(&state.sigma_yy, &dy, &dy, None, cfg, &windows, is_last)?;
    Ok(PairState {
        sigma_xy,
        sigma_xx,
        sigma_yy,
        theta_xy,
    })
}

/// Diagonals `Sigma^(h)(x, x)[i,j,i,j]` for `h = 0..depth-1`; all the pair
/// recursion needs from the self pairs. Computed once per image and shared
/// by every pair the image takes part in.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfState<T: Real = f64> {
    p: usize,
    q: usize,
    diagonals: Vec<Vec<T>>,
}

impl<T: Real> SelfState<T> {
    pub fn compute(x: &Image, cfg: &KernelConfig) -> Result<Self> {
        cfg.validate()?;
        let windows = Windows::new(x.height(), x.width(), cfg)?;
        Self::compute_with(x, cfg, &windows)
    }

    fn compute_with(x: &Image, cfg: &KernelConfig, windows: &Windows) -> Result<Self> {
        let mut sigma = sigma0_with::<T>(x, x, cfg, windows);
        let mut diagonals = Vec::with_capacity(cfg.depth);
        diagonals.push(sigma.diagonal());
        for _ in 1..cfg.depth {
            let d = diagonals.last().expect("non-empty");
            let (next, _) = layer_step(&sigma, d, d, None, cfg, windows, false)?;
            sigma = next;
            diagonals.push(sigma.diagonal());
        }
        Ok(SelfState {
            p: x.height(),
            q: x.width(),
            diagonals,
        })
    }

    pub fn depth(&self) -> usize {
        self.diagonals.len()
    }

    pub fn diagonal(&self, layer: usize) -> &[T] {
        &self.diagonals[layer]
    }

    /// Self state of a transformed image, derived by re-indexing. `map(i, j)`
    /// gives the source position of output position `(i, j)`; this is exact
    /// whenever the transform commutes with the recursion (circular
    /// translations, flips).
    pub fn reindexed(&self, map: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let diagonals = self
            .diagonals
            .iter()
            .map(|d| {
                let mut out = vec![T::zero(); d.len()];
                for i in 0..self.p {
                    for j in 0..self.q {
                        let (si, sj) = map(i, j);
                        out[i * self.q + j] = d[si * self.q + sj];
                    }
                }
                out
            })
            .collect();
        SelfState {
            p: self.p,
            q: self.q,
            diagonals,
        }
    }
}

/// Runs the pair recursion up to the deepest requested depth and hands the
/// final-layer tensor for every depth in `depths` to `sink`. One pass serves
/// every depth because a depth-`h` network shares all earlier layers with
/// deeper ones.
pub fn compute_pair_depths<T: Real>(
    x: &Image,
    y: &Image,
    sx: &SelfState<T>,
    sy: &SelfState<T>,
    cfg: &KernelConfig,
    depths: &[usize],
    mut sink: impl FnMut(usize, KernelTensor4<T>) -> Result<()>,
) -> Result<()> {
    check_pair(x, y)?;
    cfg.validate()?;
    let max_depth = depths.iter().copied().max().unwrap_or(0);
    if depths.contains(&0) {
        return Err(Error::InvalidConfig("depth must be at least 1".into()));
    }
    if sx.depth() < max_depth || sy.depth() < max_depth {
        return Err(Error::InvalidConfig(format!(
            "self states cover {} layers, need {max_depth}",
            sx.depth().min(sy.depth())
        )));
    }
    let windows = Windows::new(x.height(), x.width(), cfg)?;
    let mut sigma = sigma0_with::<T>(x, y, cfg, &windows);
    let mut theta = (cfg.family == Family::Cntk).then(|| sigma.clone());
    for h in 1..=max_depth {
        let (dx, dy) = (sx.diagonal(h - 1), sy.diagonal(h - 1));
        let act = activate(&sigma, dx, dy, theta.as_ref(), cfg)?;
        if h == max_depth {
            let out = act.tangent.unwrap_or(act.k);
            return sink(h, out);
        }
        if depths.contains(&h) {
            let out = match &act.tangent {
                Some(t) => t.clone(),
                None => act.k.clone(),
            };
            sink(h, out)?;
        }
        sigma = patch_trace_all(&act.k, &windows.rows, &windows.cols);
        add_bias(&mut sigma, cfg);
        theta = act.tangent.map(|t| {
            let mut t = patch_trace_all(&t, &windows.rows, &windows.cols);
            add_bias(&mut t, cfg);
            t
        });
    }
    Ok(())
}

/// Final-layer tensor (`Sigma^(L)` or `Theta^(L)`) for a pair, in precision `T`.
pub fn compute_pair_in<T: Real>(x: &Image, y: &Image, cfg: &KernelConfig) -> Result<KernelTensor4<T>> {
    check_pair(x, y)?;
    let sx = SelfState::<T>::compute(x, cfg)?;
    let sy = if x == y { sx.clone() } else { SelfState::compute(y, cfg)? };
    compute_pair_cached(x, y, &sx, &sy, cfg)
}

/// Final-layer tensor for a pair whose self states are already known.
pub fn compute_pair_cached<T: Real>(
    x: &Image,
    y: &Image,
    sx: &SelfState<T>,
    sy: &SelfState<T>,
    cfg: &KernelConfig,
) -> Result<KernelTensor4<T>> {
    let mut out = None;
    compute_pair_depths(x, y, sx, sy, cfg, &[cfg.depth], |_, t| {
        out = Some(t);
        Ok(())
    })?;
    Ok(out.expect("sink called for the final depth"))
}

/// Final-layer tensor (`Sigma^(L)` for the CNN-GP, `Theta^(L)` for the CNTK)
/// in 64-bit precision, ready for a readout.
pub fn compute_pair(x: &Image, y: &Image, cfg: &KernelConfig) -> Result<KernelTensor4> {
    compute_pair_in::<f64>(x, y, cfg)
}
