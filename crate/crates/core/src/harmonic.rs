//! The harmonic block in its two formulations.
//!
//! A harmonic block replaces a learned `K x K` convolution by
//!
//! 1. fixed DCT-II filter responses of every input channel (the
//!    transform stage, producing `N * P` feature maps for `N` input
//!    channels and `P` selected frequencies), optionally batch-normalized
//!    per response channel (spectrum normalization), and
//! 2. a learned `1 x 1` combination of those responses into `M` outputs.
//!
//! Because both stages are linear, when no normalization sits between
//! them the block collapses into a single convolution whose filters are
//! synthesized from the combination weights; [`forward_merged`] evaluates
//! that form directly and must agree with [`forward_twostage`] to
//! rounding error. With spectrum normalization the collapse is invalid
//! and the merged formulation refuses to run.
//!
//! Combination weights are laid out `[M, N * P]` with the response index
//! `j = n * P + p` running over input channels (major) and the selection's
//! canonical frequency order (minor).

use crate::bn::{bn_backward, bn_forward, BnCache, BnState, Phase};
use crate::conv::{
    conv2d_grad_input, conv2d_grad_weights, correlate_padded, expect4, pad_nchw, ConvGeometry,
};
use crate::dct::{make_basis, BasisNorm, SpectrumSelection};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Scalar, Tensor};

/// Static description of one harmonic block.
#[derive(Debug, Clone)]
pub struct HarmonicConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeometry,
    pub selection: SpectrumSelection,
    pub norm: BasisNorm,
    pub bias: bool,
    pub spectrum_bn: bool,
}

impl HarmonicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("harmonic block needs nonzero channels"));
        }
        if self.selection.k() != self.geom.kernel {
            return Err(Error::invalid(format!(
                "selection K={} does not match kernel {}",
                self.selection.k(),
                self.geom.kernel
            )));
        }
        Ok(())
    }

    /// Number of selected frequency pairs.
    pub fn p(&self) -> usize {
        self.selection.len()
    }

    /// Channel count of the transform stage output.
    pub fn stage1_channels(&self) -> usize {
        self.in_channels * self.p()
    }
}

/// Learnable state of one harmonic block.
#[derive(Debug, Clone)]
pub struct HarmonicParams<T> {
    /// Combination weights `[M, N * P]`.
    pub weight: Tensor<T>,
    /// Output bias `[M]`.
    pub bias: Option<Vec<T>>,
    /// Spectrum normalization over the `N * P` response channels.
    pub bn: Option<BnState<T>>,
}

impl<T: Scalar> HarmonicParams<T> {
    /// He-style initialization: Gaussian weights with variance
    /// `2 / (N * P)`, zero biases, fresh normalization state.
    pub fn init(cfg: &HarmonicConfig, rng: &mut SeedRng) -> Result<HarmonicParams<T>> {
        cfg.validate()?;
        let fan_in = cfg.stage1_channels();
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = Tensor::from_fn(&[cfg.out_channels, fan_in], |_| {
            T::from_f64(rng.gaussian() * std)
        });
        Ok(HarmonicParams {
            weight,
            bias: cfg.bias.then(|| vec![T::ZERO; cfg.out_channels]),
            bn: cfg.spectrum_bn.then(|| BnState::new(fan_in)),
        })
    }

    fn check(&self, cfg: &HarmonicConfig) -> Result<()> {
        cfg.validate()?;
        let want = [cfg.out_channels, cfg.stage1_channels()];
        if self.weight.shape() != want {
            return Err(Error::shape(format!(
                "combination weights {:?}, expected {want:?}",
                self.weight.shape()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != cfg.out_channels {
                return Err(Error::shape(format!(
                    "bias length {} vs {} outputs",
                    b.len(),
                    cfg.out_channels
                )));
            }
        }
        if cfg.spectrum_bn != self.bn.is_some() {
            return Err(Error::invalid(
                "spectrum_bn flag does not match presence of normalization state",
            ));
        }
        if let Some(bn) = &self.bn {
            if bn.channels() != cfg.stage1_channels() {
                return Err(Error::shape(format!(
                    "normalization has {} channels, transform produces {}",
                    bn.channels(),
                    cfg.stage1_channels()
                )));
            }
        }
        Ok(())
    }
}

/// Transform-stage responses `[n, N * P, A, B]`.
///
/// Stride-1 blocks run a separable row/column pass per frequency pair;
/// strided blocks correlate with the full 2-D filters. Both paths agree
/// to rounding error (checked in tests); the separable one shares row
/// transforms across all pairs with the same second frequency.
pub fn stage1_responses<T: Scalar>(cfg: &HarmonicConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
    if cfg.geom.stride == 1 {
        stage1_separable(cfg, x)
    } else {
        stage1_responses_direct(cfg, x)
    }
}

/// Transform stage via direct 2-D correlation, any stride.
pub fn stage1_responses_direct<T: Scalar>(
    cfg: &HarmonicConfig,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (n, c, h, w) = expect4(x, "harmonic input")?;
    if c != cfg.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, block wants {}",
            cfg.in_channels
        )));
    }
    let k = cfg.geom.kernel;
    let p = cfg.p();
    let oh = cfg.geom.out_dim(h)?;
    let ow = cfg.geom.out_dim(w)?;
    let basis = make_basis(k, cfg.norm)?;
    let filters: Tensor<T> = basis.filters_for(&cfg.selection)?;
    let padded = pad_nchw(x.data(), n, c, h, w, cfg.geom.pad);
    let (hp, wp) = (h + 2 * cfg.geom.pad, w + 2 * cfg.geom.pad);
    let mut out = Tensor::zeros(&[n, c * p, oh, ow]);
    let od = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let ib = (ni * c + ci) * hp * wp;
            let ob = ((ni * c + ci) * p) * oh * ow;
            correlate_padded(
                &padded[ib..ib + hp * wp],
                1,
                1,
                hp,
                wp,
                filters.data(),
                p,
                k,
                cfg.geom.stride,
                &mut od[ob..ob + p * oh * ow],
            );
        }
    }
    Ok(out)
}

fn stage1_separable<T: Scalar>(cfg: &HarmonicConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (n, c, h, w) = expect4(x, "harmonic input")?;
    if c != cfg.in_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, block wants {}",
            cfg.in_channels
        )));
    }
    let k = cfg.geom.kernel;
    let p = cfg.p();
    let oh = cfg.geom.out_dim(h)?;
    let ow = cfg.geom.out_dim(w)?;
    let basis = make_basis(k, BasisNorm::Orthonormal)?;
    let rows: Vec<Vec<T>> = (0..k)
        .map(|u| basis.row(u).iter().map(|&x| T::from_f64(x)).collect())
        .collect();
    // l1 mode folds the filter rescale into a final per-pair factor
    let scales: Vec<T> = cfg
        .selection
        .pairs()
        .iter()
        .map(|&(u, v)| match cfg.norm {
            BasisNorm::Orthonormal => T::ONE,
            BasisNorm::L1 => T::from_f64(1.0 / basis.l1_norm(u, v)),
        })
        .collect();
    let used_v: Vec<usize> = {
        let mut vs: Vec<usize> = cfg.selection.pairs().iter().map(|&(_, v)| v).collect();
        vs.sort_unstable();
        vs.dedup();
        vs
    };
    let padded = pad_nchw(x.data(), n, c, h, w, cfg.geom.pad);
    let (hp, wp) = (h + 2 * cfg.geom.pad, w + 2 * cfg.geom.pad);
    let mut out = Tensor::zeros(&[n, c * p, oh, ow]);
    let od = out.data_mut();
    // per-plane row transforms, indexed by the position of v in used_v
    let mut tmp = vec![T::ZERO; used_v.len() * hp * ow];
    for ni in 0..n {
        for ci in 0..c {
            let plane = &padded[(ni * c + ci) * hp * wp..(ni * c + ci + 1) * hp * wp];
            for (vi, &v) in used_v.iter().enumerate() {
                let bv = &rows[v];
                let t = &mut tmp[vi * hp * ow..(vi + 1) * hp * ow];
                for y in 0..hp {
                    let r = y * wp;
                    for ox in 0..ow {
                        let mut acc = T::ZERO;
                        for kx in 0..k {
                            acc += bv[kx] * plane[r + ox + kx];
                        }
                        t[y * ow + ox] = acc;
                    }
                }
            }
            for (pi, &(u, v)) in cfg.selection.pairs().iter().enumerate() {
                let bu = &rows[u];
                let vi = used_v.binary_search(&v).expect("v present");
                let t = &tmp[vi * hp * ow..(vi + 1) * hp * ow];
                let ob = (((ni * c + ci) * p) + pi) * oh * ow;
                let sc = scales[pi];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = T::ZERO;
                        for ky in 0..k {
                            acc += bu[ky] * t[(oy + ky) * ow + ox];
                        }
                        od[ob + oy * ow + ox] = sc * acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Learned `1 x 1` combination of response maps.
fn combine<T: Scalar>(
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    z: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, cp, a, b) = expect4(z, "combination input")?;
    let m = weight.dim(0);
    let mut out = Tensor::zeros(&[n, m, a, b]);
    correlate_padded(z.data(), n, cp, a, b, weight.data(), m, 1, 1, out.data_mut());
    if let Some(bs) = bias {
        let od = out.data_mut();
        for ni in 0..n {
            for mi in 0..m {
                let base = (ni * m + mi) * a * b;
                let bv = bs[mi];
                for v in &mut od[base..base + a * b] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Evaluation-phase two-stage forward pass. Spectrum normalization, when
/// present, uses the stored running statistics and nothing is mutated.
pub fn forward_twostage<T: Scalar>(
    cfg: &HarmonicConfig,
    params: &HarmonicParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    params.check(cfg)?;
    let z = stage1_responses(cfg, x)?;
    let z = match &params.bn {
        Some(bn) => bn_forward(&z, &mut bn.clone(), Phase::Eval)?.0,
        None => z,
    };
    combine(&params.weight, params.bias.as_deref(), &z)
}

/// Intermediates saved by [`forward_twostage_train`].
pub struct TwoStageCache<T> {
    /// Input of the combination stage (post-normalization responses).
    pub combined_input: Tensor<T>,
    pub bn: Option<BnCache<T>>,
    pub input_hw: (usize, usize),
}

/// Training-phase two-stage forward pass; updates running statistics and
/// returns what the backward pass needs.
pub fn forward_twostage_train<T: Scalar>(
    cfg: &HarmonicConfig,
    params: &mut HarmonicParams<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, TwoStageCache<T>)> {
    params.check(cfg)?;
    let input_hw = (x.dim(2), x.dim(3));
    let z = stage1_responses(cfg, x)?;
    let (z, bn_cache) = match params.bn.as_mut() {
        Some(bn) => {
            let (zn, cache) = bn_forward(&z, bn, Phase::Train)?;
            (zn, cache)
        }
        None => (z, None),
    };
    let out = combine(&params.weight, params.bias.as_deref(), &z)?;
    Ok((
        out,
        TwoStageCache {
            combined_input: z,
            bn: bn_cache,
            input_hw,
        },
    ))
}

/// Gradients of one harmonic block.
pub struct HarmonicGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub bn_gamma: Option<Vec<T>>,
    pub bn_beta: Option<Vec<T>>,
}

/// Backward pass matching [`forward_twostage_train`].
pub fn twostage_backward<T: Scalar>(
    cfg: &HarmonicConfig,
    params: &HarmonicParams<T>,
    cache: &TwoStageCache<T>,
    grad_out: &Tensor<T>,
) -> Result<HarmonicGrads<T>> {
    params.check(cfg)?;
    let (n, m, a, b) = expect4(grad_out, "harmonic grad_out")?;
    if m != cfg.out_channels {
        return Err(Error::shape(format!(
            "grad_out has {m} channels, block produces {}",
            cfg.out_channels
        )));
    }
    let cp = cfg.stage1_channels();
    let k1 = ConvGeometry::new(1, 1, 0)?;
    // combination stage: weights act as a 1x1 convolution
    let w4 = params.weight.clone().reshape(&[m, cp, 1, 1])?;
    let grad_w = conv2d_grad_weights(&cache.combined_input, grad_out, k1)?
        .reshape(&[m, cp])?;
    let grad_combined = conv2d_grad_input(&w4, grad_out, k1, (a, b))?;
    let grad_bias = params.bias.as_ref().map(|_| {
        let go = grad_out.data();
        let mut gb = vec![T::ZERO; m];
        for ni in 0..n {
            for mi in 0..m {
                let base = (ni * m + mi) * a * b;
                for &g in &go[base..base + a * b] {
                    gb[mi] += g;
                }
            }
        }
        gb
    });
    // normalization stage
    let (grad_z, bn_gamma, bn_beta) = match (&params.bn, &cache.bn) {
        (Some(bn), Some(bnc)) => {
            let g = bn_backward(&grad_combined, bn, bnc)?;
            (g.input, Some(g.gamma), Some(g.beta))
        }
        (None, None) => (grad_combined, None, None),
        _ => {
            return Err(Error::invalid(
                "normalization cache does not match block configuration",
            ))
        }
    };
    // transform stage: scatter responses back through the fixed filters
    let grad_input = stage1_backward(cfg, &grad_z, cache.input_hw)?;
    Ok(HarmonicGrads {
        input: grad_input,
        weight: grad_w,
        bias: grad_bias,
        bn_gamma,
        bn_beta,
    })
}

fn stage1_backward<T: Scalar>(
    cfg: &HarmonicConfig,
    grad_z: &Tensor<T>,
    input_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let (n, cpp, a, b) = expect4(grad_z, "stage1 grad")?;
    let c = cfg.in_channels;
    let p = cfg.p();
    if cpp != c * p {
        return Err(Error::shape(format!(
            "stage1 grad has {cpp} channels, expected {}",
            c * p
        )));
    }
    let (h, w) = input_hw;
    let (k, s, pad) = (cfg.geom.kernel, cfg.geom.stride, cfg.geom.pad);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let basis = make_basis(k, cfg.norm)?;
    let filters: Tensor<T> = basis.filters_for(&cfg.selection)?;
    let fd = filters.data();
    let gz = grad_z.data();
    let mut padgrad = vec![T::ZERO; n * c * hp * wp];
    for ni in 0..n {
        for ci in 0..c {
            let pb = (ni * c + ci) * hp * wp;
            for pi in 0..p {
                let zb = (((ni * c + ci) * p) + pi) * a * b;
                let fb = pi * k * k;
                for oy in 0..a {
                    for ox in 0..b {
                        let g = gz[zb + oy * b + ox];
                        let rb = pb + (oy * s) * wp + ox * s;
                        for ky in 0..k {
                            let row = rb + ky * wp;
                            for kx in 0..k {
                                padgrad[row + kx] += g * fd[fb + ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    let mut gin = Tensor::zeros(&[n, c, h, w]);
    let gd = gin.data_mut();
    for plane in 0..n * c {
        for y in 0..h {
            let src = (plane * hp + y + pad) * wp + pad;
            let dst = (plane * h + y) * w;
            gd[dst..dst + w].copy_from_slice(&padgrad[src..src + w]);
        }
    }
    Ok(gin)
}

/// Collapse the block into per-output convolution filters `[M, N, K, K]`:
/// each filter is the selection-ordered combination of basis filters
/// weighted by the block's learned coefficients.
pub fn synthesize_filters<T: Scalar>(
    cfg: &HarmonicConfig,
    params: &HarmonicParams<T>,
) -> Result<Tensor<T>> {
    params.check(cfg)?;
    let (m, n, k, p) = (
        cfg.out_channels,
        cfg.in_channels,
        cfg.geom.kernel,
        cfg.p(),
    );
    let basis = make_basis(k, cfg.norm)?;
    let filters: Tensor<T> = basis.filters_for(&cfg.selection)?;
    let fd = filters.data();
    let wd = params.weight.data();
    let mut g = Tensor::zeros(&[m, n, k, k]);
    let gd = g.data_mut();
    for mi in 0..m {
        for ci in 0..n {
            let gb = (mi * n + ci) * k * k;
            let wb = mi * n * p + ci * p;
            for pi in 0..p {
                let wv = wd[wb + pi];
                let fb = pi * k * k;
                for t in 0..k * k {
                    gd[gb + t] += wv * fd[fb + t];
                }
            }
        }
    }
    Ok(g)
}

/// Single-convolution forward pass over synthesized filters.
///
/// Only valid when nothing nonlinear separates the stages: a block with
/// spectrum normalization cannot be merged and is rejected.
pub fn forward_merged<T: Scalar>(
    cfg: &HarmonicConfig,
    params: &HarmonicParams<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    if cfg.spectrum_bn {
        return Err(Error::invalid(
            "merged formulation is undefined across spectrum normalization",
        ));
    }
    let g = synthesize_filters(cfg, params)?;
    crate::conv::conv2d(x, &g, params.bias.as_deref(), cfg.geom)
}

/// Backward pass matching [`forward_merged`].
pub fn merged_backward<T: Scalar>(
    cfg: &HarmonicConfig,
    params: &HarmonicParams<T>,
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<HarmonicGrads<T>> {
    if cfg.spectrum_bn {
        return Err(Error::invalid(
            "merged formulation is undefined across spectrum normalization",
        ));
    }
    params.check(cfg)?;
    let (_, m, a, b) = expect4(grad_out, "harmonic grad_out")?;
    let n = grad_out.dim(0);
    let (cin, k, p) = (cfg.in_channels, cfg.geom.kernel, cfg.p());
    // gradient w.r.t. the synthesized filters, then projected onto the bank
    let grad_g = conv2d_grad_weights(x, grad_out, cfg.geom)?;
    let basis = make_basis(k, cfg.norm)?;
    let filters: Tensor<T> = basis.filters_for(&cfg.selection)?;
    let fdat = filters.data();
    let ggd = grad_g.data();
    let mut grad_w = Tensor::zeros(&[m, cin * p]);
    let gwd = grad_w.data_mut();
    for mi in 0..m {
        for ci in 0..cin {
            let gb = (mi * cin + ci) * k * k;
            for pi in 0..p {
                let fb = pi * k * k;
                let mut acc = T::ZERO;
                for t in 0..k * k {
                    acc += ggd[gb + t] * fdat[fb + t];
                }
                gwd[mi * cin * p + ci * p + pi] = acc;
            }
        }
    }
    let g = synthesize_filters(cfg, params)?;
    let grad_input = conv2d_grad_input(&g, grad_out, cfg.geom, (x.dim(2), x.dim(3)))?;
    let grad_bias = params.bias.as_ref().map(|_| {
        let go = grad_out.data();
        let mut gb = vec![T::ZERO; m];
        for ni in 0..n {
            for mi in 0..m {
                let base = (ni * m + mi) * a * b;
                for &gv in &go[base..base + a * b] {
                    gb[mi] += gv;
                }
            }
        }
        gb
    });
    Ok(HarmonicGrads {
        input: grad_input,
        weight: grad_w,
        bias: grad_bias,
        bn_gamma: None,
        bn_beta: None,
    })
}
