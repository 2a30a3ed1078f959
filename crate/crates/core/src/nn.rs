//! Runtime models and a small deterministic trainer.
//!
//! A [`Model`] pairs a [`ModelSpec`] with per-layer parameter state and
//! provides forward evaluation, a caching training-phase forward, exact
//! backpropagation, and plain SGD with momentum, weight decay and a step
//! learning-rate schedule. Everything is single-threaded and seeded:
//! the same spec, data and [`TrainConfig`] reproduce the same history
//! bit for bit.
//!
//! Residual groups evaluate but do not train — the deep residual
//! presets exist for accounting, conversion and benchmarking, not for
//! desk-scale optimization.

use std::collections::BTreeMap;

use crate::bn::{bn_backward, bn_forward, BnCache, BnState, Phase};
use crate::compress::{
    apply_plan_to_spec, truncate_bn, truncate_weight, CompressionPlan, WeightMap,
};
use crate::conv::{conv2d, conv2d_grad_input, conv2d_grad_weights, ConvGeometry};
use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::harmonic::{
    forward_twostage, forward_twostage_train, twostage_backward, HarmonicConfig, HarmonicParams,
    TwoStageCache,
};
use crate::model::{LayerKind, ModelSpec, Unit, UnitInfo};
use crate::rng::SeedRng;
use crate::tensor::{Scalar, Tensor};

// ---------------------------------------------------------------------------
// Parameter state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvState<T> {
    /// `[M, N, K, K]`.
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub geom: ConvGeometry,
}

#[derive(Debug, Clone)]
pub struct FcState<T> {
    /// `[out, in]`.
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct HarmState<T> {
    pub cfg: HarmonicConfig,
    pub params: HarmonicParams<T>,
}

#[derive(Debug, Clone)]
pub enum SlotState<T> {
    Conv(ConvState<T>),
    Harm(HarmState<T>),
}

#[derive(Debug, Clone)]
pub struct ResBlockState<T> {
    pub bn1: BnState<T>,
    pub slot1: SlotState<T>,
    pub bn2: BnState<T>,
    pub slot2: SlotState<T>,
    pub proj: Option<ConvState<T>>,
}

#[derive(Debug, Clone)]
pub enum LayerState<T> {
    Conv(ConvState<T>),
    Harm(HarmState<T>),
    Bn(BnState<T>),
    Fc(FcState<T>),
    Res(Vec<ResBlockState<T>>),
    /// ReLU, pooling, dropout: nothing to store.
    Stateless,
}

/// A spec plus its parameters, layer for layer.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub states: Vec<LayerState<T>>,
}

fn unit_map(units: &[UnitInfo]) -> BTreeMap<&str, &UnitInfo> {
    units.iter().map(|u| (u.name.as_str(), u)).collect()
}

fn conv_init<T: Scalar>(
    n: usize,
    m: usize,
    k: usize,
    stride: usize,
    pad: usize,
    bias: bool,
    rng: &mut SeedRng,
) -> Result<ConvState<T>> {
    let std = (2.0 / (n * k * k) as f64).sqrt();
    let weight = Tensor::from_fn(&[m, n, k, k], |_| T::from_f64(rng.gaussian() * std));
    Ok(ConvState {
        weight,
        bias: bias.then(|| vec![T::ZERO; m]),
        geom: ConvGeometry::new(k, stride, pad)?,
    })
}

fn harm_cfg(unit: &Unit) -> Result<HarmonicConfig> {
    match unit {
        Unit::Harmonic {
            n,
            m,
            k,
            stride,
            pad,
            bias,
            selection,
            spectrum_bn,
            norm,
        } => Ok(HarmonicConfig {
            in_channels: *n,
            out_channels: *m,
            geom: ConvGeometry::new(*k, *stride, *pad)?,
            selection: selection.clone(),
            norm: *norm,
            bias: *bias,
            spectrum_bn: *spectrum_bn,
        }),
        _ => Err(Error::invalid("unit is not harmonic")),
    }
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters: He-style Gaussian weights (`std^2 = 2 / fan-in`),
    /// zero biases, identity normalizations. Deterministic per seed.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
        let units = spec.validate()?;
        let map = unit_map(&units);
        let mut rng = SeedRng::new(seed);
        let mut states = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let state = match &layer.kind {
                LayerKind::Conv { .. } => {
                    let u = map[layer.name.as_str()];
                    match &u.unit {
                        Unit::Conv {
                            n,
                            m,
                            k,
                            stride,
                            pad,
                            bias,
                        } => LayerState::Conv(conv_init(*n, *m, *k, *stride, *pad, *bias, &mut rng)?),
                        _ => unreachable!(),
                    }
                }
                LayerKind::Harmonic { .. } => {
                    let cfg = harm_cfg(&map[layer.name.as_str()].unit)?;
                    let params = HarmonicParams::init(&cfg, &mut rng)?;
                    LayerState::Harm(HarmState { cfg, params })
                }
                LayerKind::BatchNorm => {
                    let u = map[layer.name.as_str()];
                    match u.unit {
                        Unit::Bn { channels } => LayerState::Bn(BnState::new(channels)),
                        _ => unreachable!(),
                    }
                }
                LayerKind::Fc { .. } => {
                    let u = map[layer.name.as_str()];
                    match u.unit {
                        Unit::Fc {
                            input,
                            output,
                            bias,
                        } => {
                            let std = (2.0 / input as f64).sqrt();
                            LayerState::Fc(FcState {
                                weight: Tensor::from_fn(&[output, input], |_| {
                                    T::from_f64(rng.gaussian() * std)
                                }),
                                bias: bias.then(|| vec![T::ZERO; output]),
                            })
                        }
                        _ => unreachable!(),
                    }
                }
                LayerKind::Residual { blocks } => {
                    let mut bs = Vec::with_capacity(blocks.len());
                    for (j, _) in blocks.iter().enumerate() {
                        let at = |suffix: &str| {
                            map[format!("{}.b{}.{}", layer.name, j, suffix).as_str()]
                        };
                        let bn_of = |u: &UnitInfo| match u.unit {
                            Unit::Bn { channels } => BnState::new(channels),
                            _ => unreachable!(),
                        };
                        let slot_of = |u: &UnitInfo, rng: &mut SeedRng| -> Result<SlotState<T>> {
                            Ok(match &u.unit {
                                Unit::Conv {
                                    n,
                                    m,
                                    k,
                                    stride,
                                    pad,
                                    bias,
                                } => SlotState::Conv(conv_init(
                                    *n, *m, *k, *stride, *pad, *bias, rng,
                                )?),
                                Unit::Harmonic { .. } => {
                                    let cfg = harm_cfg(&u.unit)?;
                                    let params = HarmonicParams::init(&cfg, rng)?;
                                    SlotState::Harm(HarmState { cfg, params })
                                }
                                _ => unreachable!(),
                            })
                        };
                        let bn1 = bn_of(at("bn1"));
                        let slot1 = slot_of(at("conv1"), &mut rng)?;
                        let bn2 = bn_of(at("bn2"));
                        let slot2 = slot_of(at("conv2"), &mut rng)?;
                        let proj = match map.get(format!("{}.b{}.proj", layer.name, j).as_str()) {
                            Some(u) => match &u.unit {
                                Unit::Conv {
                                    n,
                                    m,
                                    k,
                                    stride,
                                    pad,
                                    bias,
                                } => Some(conv_init(*n, *m, *k, *stride, *pad, *bias, &mut rng)?),
                                _ => unreachable!(),
                            },
                            None => None,
                        };
                        bs.push(ResBlockState {
                            bn1,
                            slot1,
                            bn2,
                            slot2,
                            proj,
                        });
                    }
                    LayerState::Res(bs)
                }
                _ => LayerState::Stateless,
            };
            states.push(state);
        }
        Ok(Model {
            spec: spec.clone(),
            states,
        })
    }

    /// Harmonic combination weights by unit name (for adaptive planning).
    pub fn combination_weights(&self) -> WeightMap {
        let mut map = WeightMap::new();
        for (layer, state) in self.spec.layers.iter().zip(&self.states) {
            match state {
                LayerState::Harm(h) => {
                    map.insert(layer.name.clone(), h.params.weight.cast::<f64>());
                }
                LayerState::Res(blocks) => {
                    for (j, b) in blocks.iter().enumerate() {
                        for (which, slot) in [&b.slot1, &b.slot2].into_iter().enumerate() {
                            if let SlotState::Harm(h) = slot {
                                map.insert(
                                    format!("{}.b{}.conv{}", layer.name, j, which + 1),
                                    h.params.weight.cast::<f64>(),
                                );
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        map
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

pub enum Cache<T> {
    Conv { input: Tensor<T> },
    Harm(TwoStageCache<T>),
    Bn(BnCache<T>),
    Relu { mask: Vec<bool> },
    MaxPool { in_shape: [usize; 4], argmax: Vec<usize> },
    AvgPool { in_shape: [usize; 4], geom: ConvGeometry },
    GlobalAvg { in_shape: [usize; 4] },
    Dropout { mask: Option<Vec<T>> },
    Fc { input: Tensor<T>, in_shape: Vec<usize> },
    Identity,
}

fn relu_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|v| v.to_f64() > 0.0).collect();
    let y = x.map(|v| v.maximum(T::ZERO));
    (y, mask)
}

fn pool_geometry(kind: &LayerKind) -> Result<ConvGeometry> {
    match kind {
        LayerKind::MaxPool {
            kernel,
            stride,
            pad,
        }
        | LayerKind::AvgPool {
            kernel,
            stride,
            pad,
        } => ConvGeometry::new(*kernel, *stride, *pad),
        _ => Err(Error::invalid("not a pooling layer")),
    }
}

fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let oh = geom.out_dim(h)?;
    let ow = geom.out_dim(w)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    let mut oi = 0;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    // Padding taps are skipped: the maximum runs over the
                    // window's valid pixels only (every window contains at
                    // least one because pad < kernel).
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..geom.kernel {
                        let y = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..geom.kernel {
                            let xx = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let idx = base + y as usize * w + xx as usize;
                            let v = xd[idx].to_f64();
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    od[oi] = xd[best_idx];
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

fn avgpool_forward<T: Scalar>(x: &Tensor<T>, geom: ConvGeometry) -> Result<Tensor<T>> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let oh = geom.out_dim(h)?;
    let ow = geom.out_dim(w)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    let k2 = (geom.kernel * geom.kernel) as f64;
    let mut oi = 0;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    // Zero padding is counted in the divisor, matching the
                    // usual include-padding average.
                    let mut acc = 0.0f64;
                    for ky in 0..geom.kernel {
                        let y = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..geom.kernel {
                            let xx = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += xd[base + y as usize * w + xx as usize].to_f64();
                        }
                    }
                    od[oi] = T::from_f64(acc / k2);
                    oi += 1;
                }
            }
        }
    }
    Ok(out)
}

fn global_avg_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let xd = x.data();
    Tensor::from_fn(&[n, c, 1, 1], |i| {
        let base = i * h * w;
        let sum: f64 = xd[base..base + h * w].iter().map(|v| v.to_f64()).sum();
        T::from_f64(sum / (h * w) as f64)
    })
}

fn fc_forward<T: Scalar>(state: &FcState<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = x.dim(0);
    let features = x.numel() / n;
    let (out_f, in_f) = (state.weight.dim(0), state.weight.dim(1));
    if features != in_f {
        return Err(Error::shape(format!(
            "fc expects {in_f} features, input flattens to {features}"
        )));
    }
    let flat = x.clone().reshape(&[n, features])?;
    let xd = flat.data();
    let wd = state.weight.data();
    let mut out = Tensor::zeros(&[n, out_f, 1, 1]);
    let od = out.data_mut();
    for i in 0..n {
        for o in 0..out_f {
            let mut acc = T::ZERO;
            let wb = o * in_f;
            let xb = i * in_f;
            for f in 0..in_f {
                acc = acc + wd[wb + f] * xd[xb + f];
            }
            if let Some(b) = &state.bias {
                acc = acc + b[o];
            }
            od[i * out_f + o] = acc;
        }
    }
    Ok((out, flat))
}

fn slot_forward_eval<T: Scalar>(slot: &SlotState<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    match slot {
        SlotState::Conv(c) => conv2d(x, &c.weight, c.bias.as_deref(), c.geom),
        SlotState::Harm(h) => forward_twostage(&h.cfg, &h.params, x),
    }
}

fn add_tensors<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "cannot add {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o + *v;
    }
    Ok(out)
}

fn res_block_eval<T: Scalar>(block: &ResBlockState<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let a = bn_forward(x, &mut block.bn1.clone(), Phase::Eval)?.0;
    let (a, _) = relu_forward(&a);
    let mut path = slot_forward_eval(&block.slot1, &a)?;
    path = bn_forward(&path, &mut block.bn2.clone(), Phase::Eval)?.0;
    let (path, _) = relu_forward(&path);
    let path = slot_forward_eval(&block.slot2, &path)?;
    // With a projection the shortcut taps the activated input, otherwise
    // the raw input passes straight through.
    let shortcut = match &block.proj {
        Some(p) => conv2d(&a, &p.weight, p.bias.as_deref(), p.geom)?,
        None => x.clone(),
    };
    add_tensors(&path, &shortcut)
}

impl<T: Scalar> Model<T> {
    /// Inference-phase forward pass; no state changes.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for (layer, state) in self.spec.layers.iter().zip(&self.states) {
            cur = match (&layer.kind, state) {
                (LayerKind::Conv { .. }, LayerState::Conv(c)) => {
                    conv2d(&cur, &c.weight, c.bias.as_deref(), c.geom)?
                }
                (LayerKind::Harmonic { .. }, LayerState::Harm(h)) => {
                    forward_twostage(&h.cfg, &h.params, &cur)?
                }
                (LayerKind::BatchNorm, LayerState::Bn(bn)) => {
                    bn_forward(&cur, &mut bn.clone(), Phase::Eval)?.0
                }
                (LayerKind::Relu, _) => relu_forward(&cur).0,
                (LayerKind::MaxPool { .. }, _) => {
                    maxpool_forward(&cur, pool_geometry(&layer.kind)?)?.0
                }
                (LayerKind::AvgPool { .. }, _) => {
                    avgpool_forward(&cur, pool_geometry(&layer.kind)?)?
                }
                (LayerKind::GlobalAvgPool, _) => global_avg_forward(&cur),
                (LayerKind::Dropout { .. }, _) => cur,
                (LayerKind::Fc { .. }, LayerState::Fc(fc)) => fc_forward(fc, &cur)?.0,
                (LayerKind::Residual { .. }, LayerState::Res(blocks)) => {
                    let mut y = cur;
                    for b in blocks {
                        y = res_block_eval(b, &y)?;
                    }
                    y
                }
                _ => return Err(Error::invalid("layer state does not match spec")),
            };
        }
        Ok(cur)
    }

    /// Training-phase forward pass: batch statistics drive the
    /// normalizations (updating their running estimates), dropout draws
    /// from `rng`, and per-layer caches for [`Model::backward`] are
    /// returned. Residual groups are evaluation-only and rejected here.
    pub fn forward_train(
        &mut self,
        x: &Tensor<T>,
        rng: &mut SeedRng,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        for (layer, state) in self.spec.layers.iter().zip(self.states.iter_mut()) {
            let (next, cache) = match (&layer.kind, state) {
                (LayerKind::Conv { .. }, LayerState::Conv(c)) => {
                    let y = conv2d(&cur, &c.weight, c.bias.as_deref(), c.geom)?;
                    (y, Cache::Conv { input: cur })
                }
                (LayerKind::Harmonic { .. }, LayerState::Harm(h)) => {
                    let (y, cache) = forward_twostage_train(&h.cfg, &mut h.params, &cur)?;
                    (y, Cache::Harm(cache))
                }
                (LayerKind::BatchNorm, LayerState::Bn(bn)) => {
                    let (y, cache) = bn_forward(&cur, bn, Phase::Train)?;
                    (
                        y,
                        Cache::Bn(cache.ok_or_else(|| {
                            Error::invalid("training forward produced no normalization cache")
                        })?),
                    )
                }
                (LayerKind::Relu, _) => {
                    let (y, mask) = relu_forward(&cur);
                    (y, Cache::Relu { mask })
                }
                (LayerKind::MaxPool { .. }, _) => {
                    let in_shape = [cur.dim(0), cur.dim(1), cur.dim(2), cur.dim(3)];
                    let (y, argmax) = maxpool_forward(&cur, pool_geometry(&layer.kind)?)?;
                    (y, Cache::MaxPool { in_shape, argmax })
                }
                (LayerKind::AvgPool { .. }, _) => {
                    let in_shape = [cur.dim(0), cur.dim(1), cur.dim(2), cur.dim(3)];
                    let geom = pool_geometry(&layer.kind)?;
                    (avgpool_forward(&cur, geom)?, Cache::AvgPool { in_shape, geom })
                }
                (LayerKind::GlobalAvgPool, _) => {
                    let in_shape = [cur.dim(0), cur.dim(1), cur.dim(2), cur.dim(3)];
                    (global_avg_forward(&cur), Cache::GlobalAvg { in_shape })
                }
                (LayerKind::Dropout { p }, _) => {
                    if *p == 0.0 {
                        (cur, Cache::Dropout { mask: None })
                    } else {
                        let keep = 1.0 - *p;
                        let mask: Vec<T> = (0..cur.numel())
                            .map(|_| {
                                if rng.uniform() < *p {
                                    T::ZERO
                                } else {
                                    T::from_f64(1.0 / keep)
                                }
                            })
                            .collect();
                        let mut y = cur;
                        for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                            *v = *v * *m;
                        }
                        (y, Cache::Dropout { mask: Some(mask) })
                    }
                }
                (LayerKind::Fc { .. }, LayerState::Fc(fc)) => {
                    let in_shape = cur.shape().to_vec();
                    let (y, flat) = fc_forward(fc, &cur)?;
                    (y, Cache::Fc { input: flat, in_shape })
                }
                (LayerKind::Residual { .. }, _) => {
                    return Err(Error::invalid(
                        "residual groups are evaluation-only; training them is unsupported",
                    ))
                }
                _ => return Err(Error::invalid("layer state does not match spec")),
            };
            cur = next;
            caches.push(cache);
        }
        Ok((cur, caches))
    }

    /// Backpropagate `grad_out` through every layer. Returns per-layer
    /// parameter gradients and the gradient with respect to the input.
    pub fn backward(
        &self,
        caches: Vec<Cache<T>>,
        grad_out: &Tensor<T>,
    ) -> Result<(Gradients<T>, Tensor<T>)> {
        if caches.len() != self.spec.layers.len() {
            return Err(Error::invalid("cache list does not match the model"));
        }
        let mut grad = grad_out.clone();
        let mut layer_grads: Vec<LayerGrads<T>> = Vec::with_capacity(caches.len());
        for ((layer, state), cache) in self
            .spec
            .layers
            .iter()
            .zip(&self.states)
            .rev()
            .zip(caches.into_iter().rev())
        {
            let (g, lg) = backward_layer(&layer.kind, state, cache, grad)?;
            grad = g;
            layer_grads.push(lg);
        }
        layer_grads.reverse();
        Ok((
            Gradients {
                layers: layer_grads,
            },
            grad,
        ))
    }
}

pub enum LayerGrads<T> {
    Conv {
        weight: Tensor<T>,
        bias: Option<Vec<T>>,
    },
    Harm {
        weight: Tensor<T>,
        bias: Option<Vec<T>>,
        bn_gamma: Option<Vec<T>>,
        bn_beta: Option<Vec<T>>,
    },
    Bn {
        gamma: Vec<T>,
        beta: Vec<T>,
    },
    Fc {
        weight: Tensor<T>,
        bias: Option<Vec<T>>,
    },
    None,
}

pub struct Gradients<T> {
    pub layers: Vec<LayerGrads<T>>,
}

fn backward_layer<T: Scalar>(
    kind: &LayerKind,
    state: &LayerState<T>,
    cache: Cache<T>,
    grad: Tensor<T>,
) -> Result<(Tensor<T>, LayerGrads<T>)> {
    Ok(match (kind, state, cache) {
        (LayerKind::Conv { .. }, LayerState::Conv(c), Cache::Conv { input }) => {
            let gw = conv2d_grad_weights(&input, &grad, c.geom)?;
            let gb = c.bias.as_ref().map(|_| bias_grad(&grad));
            let gx = conv2d_grad_input(&c.weight, &grad, c.geom, (input.dim(2), input.dim(3)))?;
            (gx, LayerGrads::Conv { weight: gw, bias: gb })
        }
        (LayerKind::Harmonic { .. }, LayerState::Harm(h), Cache::Harm(hc)) => {
            let grads = twostage_backward(&h.cfg, &h.params, &hc, &grad)?;
            (
                grads.input,
                LayerGrads::Harm {
                    weight: grads.weight,
                    bias: grads.bias,
                    bn_gamma: grads.bn_gamma,
                    bn_beta: grads.bn_beta,
                },
            )
        }
        (LayerKind::BatchNorm, LayerState::Bn(bn), Cache::Bn(bc)) => {
            let grads = bn_backward(&grad, bn, &bc)?;
            (
                grads.input,
                LayerGrads::Bn {
                    gamma: grads.gamma,
                    beta: grads.beta,
                },
            )
        }
        (LayerKind::Relu, _, Cache::Relu { mask }) => {
            let mut g = grad;
            for (v, &m) in g.data_mut().iter_mut().zip(&mask) {
                if !m {
                    *v = T::ZERO;
                }
            }
            (g, LayerGrads::None)
        }
        (LayerKind::MaxPool { .. }, _, Cache::MaxPool { in_shape, argmax }) => {
            let mut gx = Tensor::zeros(&in_shape);
            let gd = gx.data_mut();
            for (gi, &src) in grad.data().iter().zip(&argmax) {
                gd[src] = gd[src] + *gi;
            }
            (gx, LayerGrads::None)
        }
        (LayerKind::AvgPool { .. }, _, Cache::AvgPool { in_shape, geom }) => {
            let [n, c, h, w] = in_shape;
            let mut gx = Tensor::zeros(&in_shape);
            let gd = gx.data_mut();
            let od = grad.data();
            let oh = grad.dim(2);
            let ow = grad.dim(3);
            let k2 = T::from_f64(1.0 / (geom.kernel * geom.kernel) as f64);
            let mut oi = 0;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = od[oi] * k2;
                            oi += 1;
                            for ky in 0..geom.kernel {
                                let y = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for kx in 0..geom.kernel {
                                    let xx =
                                        (ox * geom.stride + kx) as isize - geom.pad as isize;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    let idx = base + y as usize * w + xx as usize;
                                    gd[idx] = gd[idx] + g;
                                }
                            }
                        }
                    }
                }
            }
            (gx, LayerGrads::None)
        }
        (LayerKind::GlobalAvgPool, _, Cache::GlobalAvg { in_shape }) => {
            let [_, _, h, w] = in_shape;
            let inv = T::from_f64(1.0 / (h * w) as f64);
            let od = grad.data();
            let gx = Tensor::from_fn(&in_shape, |i| od[i / (h * w)] * inv);
            (gx, LayerGrads::None)
        }
        (LayerKind::Dropout { .. }, _, Cache::Dropout { mask }) => {
            let mut g = grad;
            if let Some(mask) = mask {
                for (v, m) in g.data_mut().iter_mut().zip(&mask) {
                    *v = *v * *m;
                }
            }
            (g, LayerGrads::None)
        }
        (LayerKind::Fc { .. }, LayerState::Fc(fc), Cache::Fc { input, in_shape }) => {
            let n = input.dim(0);
            let in_f = input.dim(1);
            let out_f = fc.weight.dim(0);
            let gd = grad.data();
            let xd = input.data();
            let wd = fc.weight.data();
            let mut gw = Tensor::zeros(&[out_f, in_f]);
            let gwd = gw.data_mut();
            let mut gx = Tensor::zeros(&[n, in_f]);
            let gxd = gx.data_mut();
            for i in 0..n {
                for o in 0..out_f {
                    let g = gd[i * out_f + o];
                    let wb = o * in_f;
                    let xb = i * in_f;
                    for f in 0..in_f {
                        gwd[wb + f] = gwd[wb + f] + g * xd[xb + f];
                        gxd[xb + f] = gxd[xb + f] + g * wd[wb + f];
                    }
                }
            }
            let gb = fc.bias.as_ref().map(|_| {
                let mut b = vec![T::ZERO; out_f];
                for i in 0..n {
                    for o in 0..out_f {
                        b[o] = b[o] + gd[i * out_f + o];
                    }
                }
                b
            });
            // Undo the flatten so the upstream layer sees its own shape.
            let gx = gx.reshape(&in_shape)?;
            (gx, LayerGrads::Fc { weight: gw, bias: gb })
        }
        _ => return Err(Error::invalid("cache does not match layer")),
    })
}

/// Sum the output gradient per channel (the bias gradient of a conv).
fn bias_grad<T: Scalar>(grad: &Tensor<T>) -> Vec<T> {
    let (n, m, h, w) = (grad.dim(0), grad.dim(1), grad.dim(2), grad.dim(3));
    let gd = grad.data();
    let mut b = vec![T::ZERO; m];
    for ni in 0..n {
        for mi in 0..m {
            let base = (ni * m + mi) * h * w;
            for v in &gd[base..base + h * w] {
                b[mi] = b[mi] + *v;
            }
        }
    }
    b
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean cross-entropy over the batch from raw logits `[n, classes, 1, 1]`,
/// with the matching logit gradient. Stable via the shifted
/// log-sum-exp form.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let n = logits.dim(0);
    let classes = logits.numel() / n;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let ld = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    let mut loss = 0.0f64;
    for i in 0..n {
        let label = labels[i];
        if label >= classes {
            return Err(Error::invalid(format!(
                "label {label} outside {classes} classes"
            )));
        }
        let row = &ld[i * classes..(i + 1) * classes];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        for v in row {
            sum += (v.to_f64() - max).exp();
        }
        let lse = max + sum.ln();
        loss += lse - row[label].to_f64();
        for c in 0..classes {
            let p = (row[c].to_f64() - lse).exp();
            let delta = if c == label { 1.0 } else { 0.0 };
            gd[i * classes + c] = T::from_f64((p - delta) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

/// Plain SGD with momentum and decoupled-from-nothing weight decay (decay
/// is added to the gradient before the momentum update, the classic
/// formulation).
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Gradients<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Sgd<T> {
        Sgd {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if self.velocity.is_none() {
            self.velocity = Some(zeros_like(grads));
        }
        let vel = self.velocity.as_mut().unwrap();
        if vel.layers.len() != grads.layers.len() {
            return Err(Error::invalid("optimizer state does not match gradients"));
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((state, g), v) in model
            .states
            .iter_mut()
            .zip(&grads.layers)
            .zip(vel.layers.iter_mut())
        {
            match (state, g, v) {
                (
                    LayerState::Conv(c),
                    LayerGrads::Conv { weight, bias },
                    LayerGrads::Conv {
                        weight: vw,
                        bias: vb,
                    },
                ) => {
                    sgd_update(c.weight.data_mut(), weight.data(), vw.data_mut(), lr, mu, wd);
                    if let (Some(b), Some(gb), Some(vb)) = (c.bias.as_mut(), bias, vb.as_mut()) {
                        sgd_update(b, gb, vb, lr, mu, wd);
                    }
                }
                (
                    LayerState::Harm(h),
                    LayerGrads::Harm {
                        weight,
                        bias,
                        bn_gamma,
                        bn_beta,
                    },
                    LayerGrads::Harm {
                        weight: vw,
                        bias: vb,
                        bn_gamma: vg,
                        bn_beta: vbt,
                    },
                ) => {
                    sgd_update(
                        h.params.weight.data_mut(),
                        weight.data(),
                        vw.data_mut(),
                        lr,
                        mu,
                        wd,
                    );
                    if let (Some(b), Some(gb), Some(vb)) =
                        (h.params.bias.as_mut(), bias, vb.as_mut())
                    {
                        sgd_update(b, gb, vb, lr, mu, wd);
                    }
                    if let (Some(bn), Some(gg), Some(gb), Some(vg), Some(vbt)) = (
                        h.params.bn.as_mut(),
                        bn_gamma,
                        bn_beta,
                        vg.as_mut(),
                        vbt.as_mut(),
                    ) {
                        sgd_update(&mut bn.gamma, gg, vg, lr, mu, wd);
                        sgd_update(&mut bn.beta, gb, vbt, lr, mu, wd);
                    }
                }
                (
                    LayerState::Bn(bn),
                    LayerGrads::Bn { gamma, beta },
                    LayerGrads::Bn {
                        gamma: vg,
                        beta: vb,
                    },
                ) => {
                    sgd_update(&mut bn.gamma, gamma, vg, lr, mu, wd);
                    sgd_update(&mut bn.beta, beta, vb, lr, mu, wd);
                }
                (
                    LayerState::Fc(fc),
                    LayerGrads::Fc { weight, bias },
                    LayerGrads::Fc {
                        weight: vw,
                        bias: vb,
                    },
                ) => {
                    sgd_update(fc.weight.data_mut(), weight.data(), vw.data_mut(), lr, mu, wd);
                    if let (Some(b), Some(gb), Some(vb)) = (fc.bias.as_mut(), bias, vb.as_mut()) {
                        sgd_update(b, gb, vb, lr, mu, wd);
                    }
                }
                (_, LayerGrads::None, LayerGrads::None) => {}
                _ => return Err(Error::invalid("gradient does not match layer state")),
            }
        }
        Ok(())
    }
}

fn zeros_like<T: Scalar>(grads: &Gradients<T>) -> Gradients<T> {
    let layers = grads
        .layers
        .iter()
        .map(|g| match g {
            LayerGrads::Conv { weight, bias } => LayerGrads::Conv {
                weight: Tensor::zeros(weight.shape()),
                bias: bias.as_ref().map(|b| vec![T::ZERO; b.len()]),
            },
            LayerGrads::Harm {
                weight,
                bias,
                bn_gamma,
                bn_beta,
            } => LayerGrads::Harm {
                weight: Tensor::zeros(weight.shape()),
                bias: bias.as_ref().map(|b| vec![T::ZERO; b.len()]),
                bn_gamma: bn_gamma.as_ref().map(|b| vec![T::ZERO; b.len()]),
                bn_beta: bn_beta.as_ref().map(|b| vec![T::ZERO; b.len()]),
            },
            LayerGrads::Bn { gamma, beta } => LayerGrads::Bn {
                gamma: vec![T::ZERO; gamma.len()],
                beta: vec![T::ZERO; beta.len()],
            },
            LayerGrads::Fc { weight, bias } => LayerGrads::Fc {
                weight: Tensor::zeros(weight.shape()),
                bias: bias.as_ref().map(|b| vec![T::ZERO; b.len()]),
            },
            LayerGrads::None => LayerGrads::None,
        })
        .collect();
    Gradients { layers }
}

fn sgd_update<T: Scalar>(w: &mut [T], g: &[T], v: &mut [T], lr: f64, mu: f64, wd: f64) {
    for i in 0..w.len() {
        let grad = g[i].to_f64() + wd * w[i].to_f64();
        let vel = mu * v[i].to_f64() + grad;
        v[i] = T::from_f64(vel);
        w[i] = T::from_f64(w[i].to_f64() - lr * vel);
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning-rate multiplier applied at the start of each epoch listed
    /// in `lr_steps` (1-based).
    pub lr_decay: f64,
    pub lr_steps: Vec<usize>,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    /// Stop after the first epoch whose test accuracy reaches this.
    pub early_stop_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 10,
            lr_decay: 0.1,
            lr_steps: Vec::new(),
            seed: 1,
            augment: None,
            early_stop_acc: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::invalid("learning rate and decay must be positive"));
        }
        if self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("momentum and weight decay must be >= 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let n = logits.dim(0);
    let classes = logits.numel() / n;
    let ld = logits.data();
    let mut correct = 0;
    for i in 0..n {
        let row = &ld[i * classes..(i + 1) * classes];
        let mut best = 0;
        for c in 1..classes {
            if row[c].to_f64() > row[best].to_f64() {
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    correct
}

/// Run SGD over `train_set`, scoring `test_set` after every epoch.
/// Deterministic for a fixed config and datasets. Divergence (non-finite
/// loss) aborts with the failing epoch in the error.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    train_set.validate()?;
    test_set.validate()?;
    if train_set.classes != model.spec.classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model expects {}",
            train_set.classes, model.spec.classes
        )));
    }
    let mut root = SeedRng::new(cfg.seed);
    let mut shuffle_rng = root.split(1);
    let mut dropout_rng = root.split(2);
    let mut augment_rng = root.split(3);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut lr = cfg.lr;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        if cfg.lr_steps.contains(&epoch) {
            lr *= cfg.lr_decay;
        }
        shuffle_rng.shuffle(&mut order);
        let mut seen = 0usize;
        let mut correct = 0usize;
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut images, labels) = train_set.batch(chunk)?;
            if let Some(aug) = &cfg.augment {
                images = augment(&images, aug, &mut augment_rng)?;
            }
            let (logits, caches) = model.forward_train(&images, &mut dropout_rng)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "loss diverged at epoch {epoch} (after {seen} samples)"
                )));
            }
            correct += count_correct(&logits, &labels);
            loss_sum += loss * labels.len() as f64;
            seen += labels.len();
            let (grads, _) = model.backward(caches, &grad)?;
            sgd.step(model, &grads, lr)?;
        }
        let eval = evaluate(model, test_set, cfg.batch_size)?;
        history.push(EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_loss: eval.mean_loss,
            test_acc: eval.accuracy,
        });
        if let Some(stop) = cfg.early_stop_acc {
            if eval.accuracy >= stop {
                break;
            }
        }
    }
    Ok(history)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true_label][predicted]` sample counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Score a model without mutating anything.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset<T>,
    batch_size: usize,
) -> Result<EvalReport> {
    ds.validate()?;
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let classes = ds.classes;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size) {
        let (images, labels) = ds.batch(chunk)?;
        let logits = model.forward_eval(&images)?;
        let (loss, _) = cross_entropy(&logits, &labels)?;
        loss_sum += loss * labels.len() as f64;
        let n = labels.len();
        let c = logits.numel() / n;
        let ld = logits.data();
        for i in 0..n {
            let row = &ld[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j].to_f64() > row[best].to_f64() {
                    best = j;
                }
            }
            confusion[labels[i]][best] += 1;
            if best == labels[i] {
                correct += 1;
            }
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / ds.len() as f64,
        mean_loss: loss_sum / ds.len() as f64,
        confusion,
    })
}

// ---------------------------------------------------------------------------
// Illumination protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IlluminationRow {
    pub variant: String,
    pub train_acc_seen: f64,
    pub test_acc_unseen: f64,
    pub test_err_unseen: f64,
}

/// Train each variant on the samples at or below the brightness boundary
/// and score it on the brighter remainder. One seed; callers aggregate
/// across seeds.
pub fn illumination_protocol<T: Scalar>(
    variants: &[ModelSpec],
    ds: &Dataset<T>,
    boundary: f64,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<Vec<IlluminationRow>> {
    if variants.is_empty() {
        return Err(Error::invalid("no model variants given"));
    }
    let (lo, hi) = crate::data::brightness_split(ds, boundary)?;
    let train_set = ds.subset(&lo)?;
    let test_set = ds.subset(&hi)?;
    let mut rows = Vec::with_capacity(variants.len());
    for spec in variants {
        let mut model: Model<T> = Model::init(spec, init_seed)?;
        train(&mut model, &train_set, &test_set, cfg)?;
        let seen = evaluate(&model, &train_set, cfg.batch_size)?;
        let unseen = evaluate(&model, &test_set, cfg.batch_size)?;
        rows.push(IlluminationRow {
            variant: spec.name.clone(),
            train_acc_seen: seen.accuracy,
            test_acc_unseen: unseen.accuracy,
            test_err_unseen: 1.0 - unseen.accuracy,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Plan application
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerTruncation {
    pub layer: String,
    pub kept: usize,
    pub dropped_rss: f64,
}

#[derive(Debug, Clone)]
pub struct TruncationReport {
    pub layers: Vec<LayerTruncation>,
    /// Root-sum-square over all layers.
    pub total_rss: f64,
}

/// Drop the planned frequencies from a trained model's harmonic layers,
/// rewriting spec, combination weights and spectrum-normalization state
/// together. The report carries the root-sum-square of the discarded
/// coefficients per layer (for orthonormal bases this equals the L2
/// reconstruction error of the implied filters).
pub fn apply_plan<T: Scalar>(
    model: &Model<T>,
    plan: &CompressionPlan,
) -> Result<(Model<T>, TruncationReport)> {
    let new_spec = apply_plan_to_spec(&model.spec, plan)?;
    let mut out: Model<T> = Model::init(&new_spec, 0)?;
    let mut report = TruncationReport {
        layers: Vec::new(),
        total_rss: 0.0,
    };
    let mut sq_sum = 0.0f64;
    for (li, (layer, state)) in model.spec.layers.iter().zip(&model.states).enumerate() {
        match (state, &mut out.states[li]) {
            (LayerState::Harm(src), LayerState::Harm(dst)) => {
                let rss = truncate_harm(&layer.name, src, dst, plan, &mut report)?;
                sq_sum += rss * rss;
            }
            (LayerState::Res(src_blocks), LayerState::Res(dst_blocks)) => {
                for (j, (sb, db)) in src_blocks.iter().zip(dst_blocks.iter_mut()).enumerate() {
                    db.bn1 = sb.bn1.clone();
                    db.bn2 = sb.bn2.clone();
                    db.proj = sb.proj.clone();
                    for (which, (ss, ds)) in [(&sb.slot1, &mut db.slot1), (&sb.slot2, &mut db.slot2)]
                        .into_iter()
                        .enumerate()
                    {
                        match (ss, ds) {
                            (SlotState::Harm(src), SlotState::Harm(dst)) => {
                                let name = format!("{}.b{}.conv{}", layer.name, j, which + 1);
                                let rss = truncate_harm(&name, src, dst, plan, &mut report)?;
                                sq_sum += rss * rss;
                            }
                            (SlotState::Conv(src), SlotState::Conv(dst)) => *dst = src.clone(),
                            _ => return Err(Error::invalid("slot kinds diverged")),
                        }
                    }
                }
            }
            (src, dst) => *dst = src.clone(),
        }
    }
    report.total_rss = sq_sum.sqrt();
    Ok((out, report))
}

fn truncate_harm<T: Scalar>(
    name: &str,
    src: &HarmState<T>,
    dst: &mut HarmState<T>,
    plan: &CompressionPlan,
    report: &mut TruncationReport,
) -> Result<f64> {
    let old = &src.cfg.selection;
    let new = dst.cfg.selection.clone();
    let rss = match plan.selection_for(name) {
        Some(_) => {
            let (w, rss) =
                truncate_weight(&src.params.weight, src.cfg.in_channels, old, &new)?;
            dst.params.weight = w;
            dst.params.bias = src.params.bias.clone();
            dst.params.bn = match &src.params.bn {
                Some(bn) => Some(truncate_bn(bn, src.cfg.in_channels, old, &new)?),
                None => None,
            };
            rss
        }
        None => {
            // Not planned: carry everything over unchanged.
            dst.params = src.params.clone();
            0.0
        }
    };
    report.layers.push(LayerTruncation {
        layer: name.to_string(),
        kept: new.len(),
        dropped_rss: rss,
    });
    Ok(rss)
}

// ---------------------------------------------------------------------------
// Named-tensor export / import (the container file's view of a model)
// ---------------------------------------------------------------------------

fn vec_tensor<T: Scalar>(v: &[T]) -> Tensor<T> {
    Tensor::new(&[v.len()], v.to_vec()).expect("vectors are nonempty")
}

fn push_bn<T: Scalar>(out: &mut Vec<(String, Tensor<T>)>, prefix: &str, bn: &BnState<T>) {
    out.push((format!("{prefix}.gamma"), vec_tensor(&bn.gamma)));
    out.push((format!("{prefix}.beta"), vec_tensor(&bn.beta)));
    out.push((format!("{prefix}.running_mean"), vec_tensor(&bn.running_mean)));
    out.push((format!("{prefix}.running_var"), vec_tensor(&bn.running_var)));
}

fn push_conv<T: Scalar>(out: &mut Vec<(String, Tensor<T>)>, prefix: &str, c: &ConvState<T>) {
    out.push((format!("{prefix}.weight"), c.weight.clone()));
    if let Some(b) = &c.bias {
        out.push((format!("{prefix}.bias"), vec_tensor(b)));
    }
}

fn push_harm<T: Scalar>(out: &mut Vec<(String, Tensor<T>)>, prefix: &str, h: &HarmState<T>) {
    out.push((format!("{prefix}.weight"), h.params.weight.clone()));
    if let Some(b) = &h.params.bias {
        out.push((format!("{prefix}.bias"), vec_tensor(b)));
    }
    if let Some(bn) = &h.params.bn {
        push_bn(out, &format!("{prefix}.sbn"), bn);
    }
}

impl<T: Scalar> Model<T> {
    /// Every parameter and running statistic as `(name, tensor)` pairs in
    /// a stable order. Names are hierarchical (`layer`, `layer.bias`,
    /// `group.b0.conv1.weight`, ...).
    pub fn export_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (layer, state) in self.spec.layers.iter().zip(&self.states) {
            let name = layer.name.as_str();
            match state {
                LayerState::Conv(c) => push_conv(&mut out, name, c),
                LayerState::Harm(h) => push_harm(&mut out, name, h),
                LayerState::Bn(bn) => push_bn(&mut out, name, bn),
                LayerState::Fc(fc) => {
                    out.push((format!("{name}.weight"), fc.weight.clone()));
                    if let Some(b) = &fc.bias {
                        out.push((format!("{name}.bias"), vec_tensor(b)));
                    }
                }
                LayerState::Res(blocks) => {
                    for (j, b) in blocks.iter().enumerate() {
                        let p = format!("{name}.b{j}");
                        push_bn(&mut out, &format!("{p}.bn1"), &b.bn1);
                        match &b.slot1 {
                            SlotState::Conv(c) => push_conv(&mut out, &format!("{p}.conv1"), c),
                            SlotState::Harm(h) => push_harm(&mut out, &format!("{p}.conv1"), h),
                        }
                        push_bn(&mut out, &format!("{p}.bn2"), &b.bn2);
                        match &b.slot2 {
                            SlotState::Conv(c) => push_conv(&mut out, &format!("{p}.conv2"), c),
                            SlotState::Harm(h) => push_harm(&mut out, &format!("{p}.conv2"), h),
                        }
                        if let Some(proj) = &b.proj {
                            push_conv(&mut out, &format!("{p}.proj"), proj);
                        }
                    }
                }
                LayerState::Stateless => {}
            }
        }
        out
    }

    /// Rebuild a model from a spec and the tensors [`Model::export_tensors`]
    /// would produce for it. Every expected tensor must be present with
    /// the right shape, and nothing extra may remain.
    pub fn import_tensors(
        spec: &ModelSpec,
        tensors: &BTreeMap<String, Tensor<T>>,
    ) -> Result<Model<T>> {
        let mut model: Model<T> = Model::init(spec, 0)?;
        let expected = model.export_tensors();
        let mut used = 0usize;
        // First verify the inventory matches exactly.
        for (name, proto) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == proto.shape() => used += 1,
                Some(t) => {
                    return Err(Error::format(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        proto.shape()
                    )))
                }
                None => return Err(Error::format(format!("missing tensor {name}"))),
            }
        }
        if used != tensors.len() {
            let known: std::collections::HashSet<&str> =
                expected.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = tensors
                .keys()
                .map(String::as_str)
                .filter(|k| !known.contains(k))
                .collect();
            return Err(Error::format(format!(
                "unexpected tensors: {}",
                extra.join(", ")
            )));
        }
        let fetch = |name: String| tensors[&name].clone();
        let fetch_vec = |name: String| tensors[&name].data().to_vec();
        let load_bn = |prefix: &str, bn: &mut BnState<T>| {
            bn.gamma = fetch_vec(format!("{prefix}.gamma"));
            bn.beta = fetch_vec(format!("{prefix}.beta"));
            bn.running_mean = fetch_vec(format!("{prefix}.running_mean"));
            bn.running_var = fetch_vec(format!("{prefix}.running_var"));
        };
        let load_conv = |prefix: &str, c: &mut ConvState<T>| {
            c.weight = fetch(format!("{prefix}.weight"));
            if let Some(b) = c.bias.as_mut() {
                *b = fetch_vec(format!("{prefix}.bias"));
            }
        };
        let load_harm = |prefix: &str, h: &mut HarmState<T>| {
            h.params.weight = fetch(format!("{prefix}.weight"));
            if let Some(b) = h.params.bias.as_mut() {
                *b = fetch_vec(format!("{prefix}.bias"));
            }
            if let Some(bn) = h.params.bn.as_mut() {
                load_bn(&format!("{prefix}.sbn"), bn);
            }
        };
        let layer_names: Vec<String> = model.spec.layers.iter().map(|l| l.name.clone()).collect();
        for (state, name) in model.states.iter_mut().zip(&layer_names) {
            match state {
                LayerState::Conv(c) => load_conv(name, c),
                LayerState::Harm(h) => load_harm(name, h),
                LayerState::Bn(bn) => load_bn(name, bn),
                LayerState::Fc(fc) => {
                    fc.weight = fetch(format!("{name}.weight"));
                    if let Some(b) = fc.bias.as_mut() {
                        *b = fetch_vec(format!("{name}.bias"));
                    }
                }
                LayerState::Res(blocks) => {
                    for (j, b) in blocks.iter_mut().enumerate() {
                        let p = format!("{name}.b{j}");
                        load_bn(&format!("{p}.bn1"), &mut b.bn1);
                        match &mut b.slot1 {
                            SlotState::Conv(c) => load_conv(&format!("{p}.conv1"), c),
                            SlotState::Harm(h) => load_harm(&format!("{p}.conv1"), h),
                        }
                        load_bn(&format!("{p}.bn2"), &mut b.bn2);
                        match &mut b.slot2 {
                            SlotState::Conv(c) => load_conv(&format!("{p}.conv2"), c),
                            SlotState::Harm(h) => load_harm(&format!("{p}.conv2"), h),
                        }
                        if let Some(proj) = b.proj.as_mut() {
                            load_conv(&format!("{p}.proj"), proj);
                        }
                    }
                }
                LayerState::Stateless => {}
            }
        }
        Ok(model)
    }
}
