//! Finite-width random CNNs with the activation scaling written into the
//! forward pass. Their output covariance over random parameters, and the mean
//! inner product of their parameter gradients, converge to the analytic
//! CNN-GP and CNTK kernels as the width grows.
//!
//! Architecture, for `depth` convolutional layers of `width` channels:
//! `pre_h = W_h * act_{h-1} + gamma b_h`,
//! `act_h = sqrt(c_sigma / (width q^2)) relu(pre_h)`,
//! `f = <w_out, R(act_L)>` with `R` the identity (FC), the per-channel spatial
//! mean (GAP) or a `(2c+1)^2` box blur (BBlur). All parameters are standard
//! Gaussian.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::arccos::C_SIGMA;
use crate::dp::{compute_pair, Family, KernelConfig};
use crate::error::{Error, Result};
use crate::readout::{lap_weights, readout_lap, Readout};
use crate::tensor::{resolve0, trace4, Image, KernelTensor4, PaddingScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NetReadout {
    Fc,
    Gap,
    /// Box blur of half-width `c`, then a fully-connected contraction.
    BBlur(usize),
}

impl NetReadout {
    /// The kernel readout this network readout converges to.
    pub fn kernel_readout(&self, padding: PaddingScheme) -> Readout {
        match *self {
            NetReadout::Fc => Readout::Fc,
            NetReadout::Gap => Readout::Gap,
            NetReadout::BBlur(c) => Readout::Lap { c, padding },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnnArch {
    /// Depth, filter size, bias scale and padding.
    pub config: KernelConfig,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Channels of every hidden layer.
    pub channels: usize,
    pub readout: NetReadout,
}

impl CnnArch {
    pub fn new(config: KernelConfig, shape: (usize, usize, usize), channels: usize, readout: NetReadout) -> Self {
        CnnArch {
            config,
            height: shape.0,
            width: shape.1,
            in_channels: shape.2,
            channels,
            readout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.channels == 0 || self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("network widths and image extent must be positive".into()));
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// `(patch length, output channels)` of every convolution.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let f2 = self.config.filter_size * self.config.filter_size;
        (0..self.config.depth)
            .map(|h| {
                let cin = if h == 0 { self.in_channels } else { self.channels };
                (f2 * cin, self.channels)
            })
            .collect()
    }

    fn readout_len(&self) -> usize {
        match self.readout {
            NetReadout::Gap => self.channels,
            NetReadout::Fc | NetReadout::BBlur(_) => self.pixels() * self.channels,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(k, c)| k * c + c).sum::<usize>() + self.readout_len()
    }

    fn scale(&self) -> f64 {
        let f = self.config.filter_size as f64;
        (C_SIGMA / (self.channels as f64 * f * f)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// Row-major `(q q C_in) x C_out`, patch index `(a q + b) C_in + c`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    pub arch: CnnArch,
    pub layers: Vec<ConvLayer>,
    /// Pixel-major, channel fastest for FC and BBlur; one per channel for GAP.
    pub readout_weights: Vec<f64>,
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl CnnParams {
    pub fn sample(arch: CnnArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(k, c)| ConvLayer {
                weights: normals(rng, k * c),
                bias: normals(rng, c),
            })
            .collect();
        let readout_weights = normals(rng, arch.readout_len());
        Ok(CnnParams {
            arch,
            layers,
            readout_weights,
        })
    }

    /// Parameters in a fixed order: each layer's weights then bias, then the
    /// readout weights.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.readout_weights);
        out
    }

    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.weights.len() {
                return &mut l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        &mut self.readout_weights[idx]
    }
}

/// `C = A B` with strides; `A` is `m x k`, `B` is `k x n`, `C` row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize)) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: every index reached through the strides lies inside the slices,
    // whose lengths are checked here.
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Patch matrix, `(P Q) x (q q C)`.
fn im2col(act: &[f64], p: usize, q: usize, ch: usize, f: usize, padding: PaddingScheme) -> Vec<f64> {
    let r = (f / 2) as i64;
    let k = f * f * ch;
    let mut out = vec![0.0; p * q * k];
    for i in 0..p {
        for j in 0..q {
            let row = &mut out[(i * q + j) * k..(i * q + j + 1) * k];
            for a in 0..f {
                let Some(si) = resolve0(i as i64 + a as i64 - r, p, padding) else { continue };
                for b in 0..f {
                    let Some(sj) = resolve0(j as i64 + b as i64 - r, q, padding) else { continue };
                    let src = &act[(si * q + sj) * ch..(si * q + sj + 1) * ch];
                    row[(a * f + b) * ch..(a * f + b + 1) * ch].copy_from_slice(src);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], p: usize, q: usize, ch: usize, f: usize, padding: PaddingScheme) -> Vec<f64> {
    let r = (f / 2) as i64;
    let k = f * f * ch;
    let mut out = vec![0.0; p * q * ch];
    for i in 0..p {
        for j in 0..q {
            let row = &cols[(i * q + j) * k..(i * q + j + 1) * k];
            for a in 0..f {
                let Some(si) = resolve0(i as i64 + a as i64 - r, p, padding) else { continue };
                for b in 0..f {
                    let Some(sj) = resolve0(j as i64 + b as i64 - r, q, padding) else { continue };
                    let dst = &mut out[(si * q + sj) * ch..(si * q + sj + 1) * ch];
                    for (d, s) in dst.iter_mut().zip(&row[(a * f + b) * ch..(a * f + b + 1) * ch]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

/// Box blur of half-width `c` over a `P x Q x C` activation. The blur matrix
/// is symmetric, so this is also its own adjoint.
fn box_blur(act: &[f64], p: usize, q: usize, ch: usize, c: usize, padding: PaddingScheme) -> Vec<f64> {
    let c = c as i64;
    let norm = 1.0 / (2 * c + 1) as f64;
    let mut rows = vec![0.0; act.len()];
    for i in 0..p {
        for j in 0..q {
            for d in -c..=c {
                let Some(si) = resolve0(i as i64 + d, p, padding) else { continue };
                for k in 0..ch {
                    rows[(i * q + j) * ch + k] += norm * act[(si * q + j) * ch + k];
                }
            }
        }
    }
    let mut out = vec![0.0; act.len()];
    for i in 0..p {
        for j in 0..q {
            for d in -c..=c {
                let Some(sj) = resolve0(j as i64 + d, q, padding) else { continue };
                for k in 0..ch {
                    out[(i * q + j) * ch + k] += norm * rows[(i * q + sj) * ch + k];
                }
            }
        }
    }
    out
}

/// Readout features `R(act_L)` that the readout weights contract against.
fn features(arch: &CnnArch, act: &[f64]) -> Vec<f64> {
    let (p, q, ch) = (arch.height, arch.width, arch.channels);
    match arch.readout {
        NetReadout::Fc => act.to_vec(),
        NetReadout::Gap => {
            let mut m = vec![0.0; ch];
            for px in act.chunks_exact(ch) {
                for (a, v) in m.iter_mut().zip(px) {
                    *a += v;
                }
            }
            m.iter().map(|v| v / (p * q) as f64).collect()
        }
        NetReadout::BBlur(c) => box_blur(act, p, q, ch, c, arch.config.padding),
    }
}

/// Gradient of `<w, R(act)>` with respect to `act`.
fn features_adjoint(arch: &CnnArch, w: &[f64]) -> Vec<f64> {
    let (p, q, ch) = (arch.height, arch.width, arch.channels);
    match arch.readout {
        NetReadout::Fc => w.to_vec(),
        NetReadout::Gap => {
            let s = 1.0 / (p * q) as f64;
            (0..p * q).flat_map(|_| w.iter().map(move |v| v * s)).collect()
        }
        NetReadout::BBlur(c) => box_blur(w, p, q, ch, c, arch.config.padding),
    }
}

struct Forward {
    /// Per layer: patch matrix and pre-activations.
    patches: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    act: Vec<f64>,
}

fn check_input(params: &CnnParams, x: &Image) -> Result<()> {
    let a = &params.arch;
    if x.shape() != (a.height, a.width, a.in_channels) {
        return Err(Error::ShapeMismatch(format!(
            "network expects {}x{}x{} input, got {:?}",
            a.height,
            a.width,
            a.in_channels,
            x.shape()
        )));
    }
    Ok(())
}

fn forward_trace(params: &CnnParams, x: &Image) -> Forward {
    let arch = &params.arch;
    let (p, q, f) = (arch.height, arch.width, arch.config.filter_size);
    let gamma = arch.config.bias_scale;
    let scale = arch.scale();
    let mut act = x.values().to_vec();
    let mut cin = arch.in_channels;
    let mut patches = Vec::with_capacity(params.layers.len());
    let mut pres = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let cout = layer.bias.len();
        let k = f * f * cin;
        let cols = im2col(&act, p, q, cin, f, arch.config.padding);
        let mut pre = gemm(p * q, k, cout, &cols, (k, 1), &layer.weights, (cout, 1));
        for px in pre.chunks_exact_mut(cout) {
            for (v, b) in px.iter_mut().zip(&layer.bias) {
                *v += gamma * b;
            }
        }
        act = pre.iter().map(|&v| scale * v.max(0.0)).collect();
        patches.push(cols);
        pres.push(pre);
        cin = cout;
    }
    Forward {
        patches,
        pre: pres,
        act,
    }
}

/// Network output `f(x)`.
pub fn cnn_forward(params: &CnnParams, x: &Image) -> Result<f64> {
    check_input(params, x)?;
    let fw = forward_trace(params, x);
    let feats = features(&params.arch, &fw.act);
    Ok(feats.iter().zip(&params.readout_weights).map(|(a, b)| a * b).sum())
}

/// `f(x)` and its gradient with respect to every parameter, in
/// [`CnnParams::flatten`] order, by reverse-mode accumulation.
pub fn cnn_gradient(params: &CnnParams, x: &Image) -> Result<(f64, Vec<f64>)> {
    check_input(params, x)?;
    let arch = &params.arch;
    let (p, q, f) = (arch.height, arch.width, arch.config.filter_size);
    let gamma = arch.config.bias_scale;
    let scale = arch.scale();
    let fw = forward_trace(params, x);
    let feats = features(arch, &fw.act);
    let out: f64 = feats.iter().zip(&params.readout_weights).map(|(a, b)| a * b).sum();

    let mut layer_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(params.layers.len());
    let mut d_act = features_adjoint(arch, &params.readout_weights);
    for h in (0..params.layers.len()).rev() {
        let layer = &params.layers[h];
        let cout = layer.bias.len();
        let cin = if h == 0 { arch.in_channels } else { arch.channels };
        let k = f * f * cin;
        let d_pre: Vec<f64> = d_act
            .iter()
            .zip(&fw.pre[h])
            .map(|(&g, &z)| if z > 0.0 { g * scale } else { 0.0 })
            .collect();
        // dW = patches^T d_pre.
        let d_w = gemm(k, p * q, cout, &fw.patches[h], (1, k), &d_pre, (cout, 1));
        let mut d_b = vec![0.0; cout];
        for px in d_pre.chunks_exact(cout) {
            for (a, v) in d_b.iter_mut().zip(px) {
                *a += gamma * v;
            }
        }
        if h > 0 {
            // d patches = d_pre W^T.
            let d_cols = gemm(p * q, cout, k, &d_pre, (cout, 1), &layer.weights, (1, cout));
            d_act = col2im(&d_cols, p, q, cin, f, arch.config.padding);
        }
        layer_grads.push((d_w, d_b));
    }
    layer_grads.reverse();
    let mut grad = Vec::with_capacity(arch.param_count());
    for (w, b) in layer_grads {
        grad.extend(w);
        grad.extend(b);
    }
    grad.extend(feats);
    Ok((out, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub params: usize,
    /// Largest `|g - fd| / max(|g|, |fd|, floor)`, with `floor` a `1e-8`
    /// fraction of the largest gradient entry.
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares [`cnn_gradient`] against central differences for every parameter.
pub fn gradient_check(params: &CnnParams, x: &Image, step: f64, tol: f64) -> Result<GradientCheck> {
    let (_, g) = cnn_gradient(params, x)?;
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-8 * gmax).max(f64::MIN_POSITIVE);
    let mut p = params.clone();
    let mut worst = 0.0f64;
    for (idx, &gi) in g.iter().enumerate() {
        let orig = *p.param_mut(idx);
        *p.param_mut(idx) = orig + step;
        let up = cnn_forward(&p, x)?;
        *p.param_mut(idx) = orig - step;
        let down = cnn_forward(&p, x)?;
        *p.param_mut(idx) = orig;
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((gi - fd).abs() / gi.abs().max(fd.abs()).max(floor));
    }
    Ok(GradientCheck {
        params: g.len(),
        max_relative_error: worst,
        tolerance: tol,
        passed: worst <= tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McEstimator {
    /// Empirical covariance of `(f(x), f(y))` over full parameter draws.
    Covariance,
    /// Expectation over the readout weights taken in closed form:
    /// `<R(act_L(x)), R(act_L(y))>` per draw. Same limit, lower variance.
    Marginal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub width: usize,
    pub samples: usize,
    pub seed: u64,
    pub estimator: McEstimator,
}

impl McConfig {
    pub fn new(width: usize, samples: usize, seed: u64) -> Self {
        McConfig {
            width,
            samples,
            seed,
            estimator: McEstimator::Covariance,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.samples < 2 {
            return Err(Error::InvalidConfig("Monte Carlo needs width >= 1 and at least 2 samples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub standard_error: f64,
}

impl McEstimate {
    /// `|estimate - target|` in standard errors.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.estimate - target).abs() / self.standard_error
    }
}

fn draw_rng(seed: u64, draw: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64);
    rng
}

fn mean_and_se(values: &[f64]) -> McEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    McEstimate {
        estimate: mean,
        standard_error: (var / n).sqrt(),
    }
}

/// Centered covariance of paired samples with its jackknife standard error.
fn covariance_jackknife(fx: &[f64], fy: &[f64]) -> McEstimate {
    let n = fx.len();
    let nf = n as f64;
    let (sx, sy) = (fx.iter().sum::<f64>(), fy.iter().sum::<f64>());
    let sxy: f64 = fx.iter().zip(fy).map(|(a, b)| a * b).sum();
    let cov = |sx: f64, sy: f64, sxy: f64, m: f64| (sxy - sx * sy / m) / (m - 1.0);
    let full = cov(sx, sy, sxy, nf);
    let loo: Vec<f64> = (0..n)
        .map(|k| cov(sx - fx[k], sy - fy[k], sxy - fx[k] * fy[k], nf - 1.0))
        .collect();
    let mean_loo = loo.iter().sum::<f64>() / nf;
    let var = (nf - 1.0) / nf * loo.iter().map(|v| (v - mean_loo).powi(2)).sum::<f64>();
    McEstimate {
        estimate: full,
        standard_error: var.sqrt(),
    }
}

fn arch_for(x: &Image, cfg: &KernelConfig, width: usize, readout: NetReadout) -> CnnArch {
    CnnArch::new(*cfg, x.shape(), width, readout)
}

fn check_pair(x: &Image, y: &Image) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!("images {:?} and {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// Monte-Carlo CNN-GP estimate for each readout. Every draw shares the
/// convolutional parameters across readouts and draws its own readout
/// weights per readout.
pub fn mc_cnngp(x: &Image, y: &Image, cfg: &KernelConfig, readouts: &[NetReadout], mc: &McConfig) -> Result<Vec<McEstimate>> {
    check_pair(x, y)?;
    mc.validate()?;
    let base = arch_for(x, cfg, mc.width, NetReadout::Fc);
    base.validate()?;
    let draws: Vec<Vec<(f64, f64)>> = (0..mc.samples)
        .into_par_iter()
        .map(|s| -> Result<Vec<(f64, f64)>> {
            let mut rng = draw_rng(mc.seed, s);
            let mut params = CnnParams::sample(base, &mut rng)?;
            let ax = forward_trace(&params, x).act;
            let ay = forward_trace(&params, y).act;
            let mut out = Vec::with_capacity(readouts.len());
            for &r in readouts {
                params.arch.readout = r;
                let (fx, fy) = (features(&params.arch, &ax), features(&params.arch, &ay));
                match mc.estimator {
                    McEstimator::Covariance => {
                        let w = normals(&mut rng, fx.len());
                        let dot = |f: &[f64]| f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                        out.push((dot(&fx), dot(&fy)));
                    }
                    McEstimator::Marginal => {
                        out.push((fx.iter().zip(&fy).map(|(a, b)| a * b).sum(), 0.0));
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((0..readouts.len())
        .map(|r| match mc.estimator {
            McEstimator::Covariance => {
                let fx: Vec<f64> = draws.iter().map(|d| d[r].0).collect();
                let fy: Vec<f64> = draws.iter().map(|d| d[r].1).collect();
                covariance_jackknife(&fx, &fy)
            }
            McEstimator::Marginal => mean_and_se(&draws.iter().map(|d| d[r].0).collect::<Vec<_>>()),
        })
        .collect())
}

/// Monte-Carlo CNTK estimate for each readout: the mean over parameter draws
/// of `<grad f(x), grad f(y)>`.
pub fn mc_cntk(x: &Image, y: &Image, cfg: &KernelConfig, readouts: &[NetReadout], mc: &McConfig) -> Result<Vec<McEstimate>> {
    check_pair(x, y)?;
    mc.validate()?;
    let base = arch_for(x, cfg, mc.width, NetReadout::Fc);
    base.validate()?;
    let draws: Vec<Vec<f64>> = (0..mc.samples)
        .into_par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let mut rng = draw_rng(mc.seed, s);
            let mut params = CnnParams::sample(base, &mut rng)?;
            let mut out = Vec::with_capacity(readouts.len());
            for &r in readouts {
                params.arch.readout = r;
                params.readout_weights = normals(&mut rng, params.arch.readout_len());
                let (_, gx) = cnn_gradient(&params, x)?;
                let (_, gy) = cnn_gradient(&params, y)?;
                out.push(gx.iter().zip(&gy).map(|(a, b)| a * b).sum());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((0..readouts.len())
        .map(|r| mean_and_se(&draws.iter().map(|d| d[r]).collect::<Vec<_>>()))
        .collect())
}

/// Analytic kernel value matching a network readout.
pub fn analytic_kernel(x: &Image, y: &Image, cfg: &KernelConfig, family: Family, readout: NetReadout) -> Result<f64> {
    let cfg = KernelConfig { family, ..*cfg };
    let t = compute_pair(x, y, &cfg)?;
    Ok(readout.kernel_readout(cfg.padding).apply(&t))
}

/// Applies the box blur along one index of a 4-tensor (`axis` 0..4).
fn blur_axis(t: &KernelTensor4, axis: usize, c: usize, padding: PaddingScheme) -> KernelTensor4 {
    let (p, q) = (t.p(), t.q());
    let extent = if axis % 2 == 0 { p } else { q };
    let c = c as i64;
    let norm = 1.0 / (2 * c + 1) as f64;
    KernelTensor4::from_fn(p, q, |i, j, i2, j2| {
        let mut idx = [i, j, i2, j2];
        let centre = idx[axis] as i64;
        let mut acc = 0.0;
        for d in -c..=c {
            if let Some(s) = resolve0(centre + d, extent, padding) {
                idx[axis] = s;
                acc += t.get(idx[0], idx[1], idx[2], idx[3]);
            }
        }
        norm * acc
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BBlurReport {
    pub c: usize,
    pub blurred_trace: f64,
    pub lap_readout: f64,
    /// `|difference| / max(1, |lap_readout|)`.
    pub discrepancy: f64,
    pub passed: bool,
}

/// Blurs both index pairs of the final-layer tensor of `cfg`, takes the
/// trace, and compares it with the LAP readout of the unblurred tensor.
pub fn verify_bblur_lap(x: &Image, y: &Image, cfg: &KernelConfig, c: usize) -> Result<BBlurReport> {
    let t = compute_pair(x, y, cfg)?;
    let mut b = t.clone();
    for axis in 0..4 {
        b = blur_axis(&b, axis, c, cfg.padding);
    }
    let blurred_trace = trace4(&b);
    let lap_readout = readout_lap(&t, &lap_weights(t.p(), t.q(), c, cfg.padding))?;
    let discrepancy = (blurred_trace - lap_readout).abs() / lap_readout.abs().max(1.0);
    Ok(BBlurReport {
        c,
        blurred_trace,
        lap_readout,
        discrepancy,
        passed: discrepancy <= 1e-12,
    })
}
