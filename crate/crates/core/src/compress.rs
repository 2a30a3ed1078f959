//! Frequency truncation: planning which DCT coefficients each layer
//! keeps, applying a plan to stored parameters, and pricing models in
//! parameters and multiply-accumulates.
//!
//! Planning walks the eligible layers of a [`ModelSpec`] — every conv or
//! harmonic unit with a spatial kernel (`K >= 2`); 1x1 projections are
//! never touched — in execution order. Three strategies are available:
//!
//! * `Uniform`: one compression level `lambda` everywhere, clamped to
//!   each layer's `2K - 1` ceiling.
//! * `Progressive`: `lambda = max(alpha, min(2K - 1, floor(t / depth)))`
//!   where `depth` numbers the eligible layers from 1 at the input, with
//!   optional per-feature-resolution overrides.
//! * `Adaptive`: drop a frequency when its share of the layer's total
//!   absolute combination weight falls below a threshold; requires the
//!   trained weights.
//!
//! The first eligible layer is exempt by default since it sees the raw
//! image spectrum; [`FirstLayerRule`] can instead grant it one extra
//! level (the usual choice when its kernel is larger than the rest) or
//! treat it like every other layer.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::bn::BnState;
use crate::dct::SpectrumSelection;
use crate::error::{Error, Result};
use crate::model::{LayerKind, ModelSpec, SpectrumSpec, Unit, UnitInfo};
use crate::tensor::{Scalar, Tensor};

/// Coefficient-selection strategy.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Uniform {
        lambda: usize,
    },
    Progressive {
        alpha: usize,
        t: f64,
        /// `(feature resolution, lambda)` pairs; a layer whose output
        /// height matches a listed resolution uses that level instead of
        /// the depth formula.
        overrides: Vec<(usize, usize)>,
    },
    Adaptive {
        threshold: f64,
    },
}

/// Treatment of the first eligible layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FirstLayerRule {
    /// Keep its own (usually full) spectrum. The default.
    #[default]
    Exempt,
    /// Give it `lambda + d` where `lambda` is what the strategy assigns.
    LambdaPlus(usize),
    /// No special treatment.
    Same,
}

/// One planned layer: the frequencies it keeps, in canonical order.
#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub layer: String,
    pub selection: SpectrumSelection,
}

/// A per-layer keep-set over a model's eligible layers.
#[derive(Debug, Clone, Default)]
pub struct CompressionPlan {
    pub entries: Vec<PlanEntry>,
}

impl CompressionPlan {
    pub fn selection_for(&self, layer: &str) -> Option<&SpectrumSelection> {
        self.entries
            .iter()
            .find(|e| e.layer == layer)
            .map(|e| &e.selection)
    }
}

/// Trained combination weights keyed by unit name, used by `Adaptive`.
pub type WeightMap = BTreeMap<String, Tensor<f64>>;

fn own_selection(unit: &Unit) -> Result<SpectrumSelection> {
    match unit {
        Unit::Conv { k, .. } => SpectrumSelection::full(*k),
        Unit::Harmonic { selection, .. } => Ok(selection.clone()),
        _ => Err(Error::invalid("not a spatial unit")),
    }
}

fn eligible(unit: &Unit) -> bool {
    matches!(unit, Unit::Conv { k, .. } | Unit::Harmonic { k, .. } if *k >= 2)
}

/// `lambda`-set intersected with what the layer already has; a plain conv
/// keeps the whole triangle.
fn lambda_selection(own: &SpectrumSelection, lambda: usize) -> Result<SpectrumSelection> {
    let k = own.k();
    let lam = lambda.min(2 * k - 1).max(1);
    let tri = SpectrumSelection::from_lambda(k, lam)?;
    if own.is_full() {
        return Ok(tri);
    }
    let pairs: Vec<(usize, usize)> = own
        .pairs()
        .iter()
        .copied()
        .filter(|&(u, v)| tri.contains(u, v))
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid(format!(
            "lambda {lambda} leaves no frequencies in a layer restricted to {:?}",
            own.pairs()
        )));
    }
    SpectrumSelection::from_pairs(k, &pairs)
}

fn adaptive_selection(
    own: &SpectrumSelection,
    weights: &Tensor<f64>,
    n: usize,
    threshold: f64,
    layer: &str,
) -> Result<SpectrumSelection> {
    let p = own.len();
    if weights.rank() != 2 || weights.dim(1) != n * p {
        return Err(Error::shape(format!(
            "layer {layer}: combination weights {:?} do not match {} channels x {} frequencies",
            weights.shape(),
            n,
            p
        )));
    }
    let m = weights.dim(0);
    let mut share = vec![0.0f64; p];
    let data = weights.data();
    for mi in 0..m {
        for ni in 0..n {
            for pi in 0..p {
                share[pi] += data[mi * n * p + ni * p + pi].abs();
            }
        }
    }
    let total: f64 = share.iter().sum();
    if total <= 0.0 {
        return Err(Error::numeric(format!(
            "layer {layer}: all-zero weights leave the adaptive rule undefined"
        )));
    }
    let pairs: Vec<(usize, usize)> = own
        .pairs()
        .iter()
        .enumerate()
        .filter(|(i, _)| share[*i] / total >= threshold)
        .map(|(_, &uv)| uv)
        .collect();
    if pairs.is_empty() {
        return Err(Error::invalid(format!(
            "layer {layer}: threshold {threshold} drops every frequency"
        )));
    }
    SpectrumSelection::from_pairs(own.k(), &pairs)
}

/// Build a per-layer keep-set for `spec` under `strategy`.
pub fn plan(
    spec: &ModelSpec,
    strategy: &Strategy,
    first: FirstLayerRule,
    weights: Option<&WeightMap>,
) -> Result<CompressionPlan> {
    match strategy {
        Strategy::Uniform { lambda } => {
            if *lambda == 0 {
                return Err(Error::invalid("lambda must be at least 1"));
            }
        }
        Strategy::Progressive { alpha, t, .. } => {
            if !(*alpha == 1 || *alpha == 2) {
                return Err(Error::invalid("progressive alpha must be 1 or 2"));
            }
            if !(*t > 0.0) {
                return Err(Error::invalid("progressive t must be positive"));
            }
        }
        Strategy::Adaptive { threshold } => {
            if !(0.0 < *threshold && *threshold < 1.0) {
                return Err(Error::invalid("adaptive threshold must lie in (0, 1)"));
            }
            if weights.is_none() {
                return Err(Error::invalid("adaptive planning needs trained weights"));
            }
            if matches!(first, FirstLayerRule::LambdaPlus(_)) {
                return Err(Error::invalid(
                    "the lambda+d first-layer rule needs a lambda-based strategy",
                ));
            }
        }
    }
    let units = spec.validate()?;
    let mut entries = Vec::new();
    let mut depth = 0usize;
    let mut used_overrides = vec![false; overrides_of(strategy).len()];
    for info in units.iter().filter(|u| eligible(&u.unit)) {
        depth += 1;
        let own = own_selection(&info.unit)?;
        let is_first = depth == 1;
        let mut strategy_lambda = |extra: usize| -> Option<usize> {
            match strategy {
                Strategy::Uniform { lambda } => Some(lambda + extra),
                Strategy::Progressive { alpha, t, overrides } => {
                    let mut lam = ((*t / depth as f64).floor() as i64).max(*alpha as i64) as usize;
                    for (i, (res, l)) in overrides.iter().enumerate() {
                        if info.out_shape[1] == *res {
                            lam = (*l).max(*alpha);
                            used_overrides[i] = true;
                        }
                    }
                    Some(lam + extra)
                }
                Strategy::Adaptive { .. } => None,
            }
        };
        let selection = match (is_first, first) {
            (true, FirstLayerRule::Exempt) => own.clone(),
            (true, FirstLayerRule::LambdaPlus(d)) => {
                // Unreachable for Adaptive (rejected above).
                lambda_selection(&own, strategy_lambda(d).unwrap())?
            }
            _ => match strategy {
                Strategy::Adaptive { threshold } => {
                    if !matches!(info.unit, Unit::Harmonic { .. }) {
                        return Err(Error::invalid(format!(
                            "layer {:?}: adaptive planning works on harmonic layers; convert first",
                            info.name
                        )));
                    }
                    let w = weights
                        .unwrap()
                        .get(&info.name)
                        .ok_or_else(|| {
                            Error::invalid(format!("no weights supplied for layer {:?}", info.name))
                        })?;
                    let n = match info.unit {
                        Unit::Harmonic { n, .. } => n,
                        _ => unreachable!(),
                    };
                    adaptive_selection(&own, w, n, *threshold, &info.name)?
                }
                _ => lambda_selection(&own, strategy_lambda(0).unwrap())?,
            },
        };
        entries.push(PlanEntry {
            layer: info.name.clone(),
            selection,
        });
    }
    if depth == 0 {
        return Err(Error::invalid("model has no compressible layers"));
    }
    for (i, (res, _)) in overrides_of(strategy).iter().enumerate() {
        if !used_overrides[i] {
            return Err(Error::invalid(format!(
                "override for {res}x{res} features matches no layer"
            )));
        }
    }
    Ok(CompressionPlan { entries })
}

fn overrides_of(strategy: &Strategy) -> &[(usize, usize)] {
    match strategy {
        Strategy::Progressive { overrides, .. } => overrides,
        _ => &[],
    }
}

// ---------------------------------------------------------------------------
// Applying a plan to stored parameters
// ---------------------------------------------------------------------------

/// Keep only the columns of a combination weight `[M, N * P_old]` whose
/// frequency survives in `new`. Returns the `[M, N * P_new]` weight and
/// the root-sum-square of everything dropped (for an orthonormal basis
/// this is exactly the L2 reconstruction error of the implied filters).
pub fn truncate_weight<T: Scalar>(
    weight: &Tensor<T>,
    n: usize,
    old: &SpectrumSelection,
    new: &SpectrumSelection,
) -> Result<(Tensor<T>, f64)> {
    let (p_old, p_new) = (old.len(), new.len());
    if weight.rank() != 2 || weight.dim(1) != n * p_old {
        return Err(Error::shape(format!(
            "weight {:?} does not match {} channels x {} frequencies",
            weight.shape(),
            n,
            p_old
        )));
    }
    let keep = column_map(old, new)?;
    let m = weight.dim(0);
    let data = weight.data();
    let mut out = Vec::with_capacity(m * n * p_new);
    let mut dropped = 0.0f64;
    for mi in 0..m {
        for ni in 0..n {
            let row = &data[mi * n * p_old + ni * p_old..mi * n * p_old + (ni + 1) * p_old];
            let mut kept = vec![false; p_old];
            for &idx in &keep {
                kept[idx] = true;
                out.push(row[idx]);
            }
            for (pi, v) in row.iter().enumerate() {
                if !kept[pi] {
                    let x = v.to_f64();
                    dropped += x * x;
                }
            }
        }
    }
    Ok((Tensor::new(&[m, n * p_new], out)?, dropped.sqrt()))
}

/// Indices into `old`'s canonical order for each retained pair of `new`.
fn column_map(old: &SpectrumSelection, new: &SpectrumSelection) -> Result<Vec<usize>> {
    new.pairs()
        .iter()
        .map(|&(u, v)| {
            old.pairs()
                .iter()
                .position(|&uv| uv == (u, v))
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "plan keeps ({u},{v}) which the layer does not have"
                    ))
                })
        })
        .collect()
}

/// Subset spectrum-normalization state the same way.
pub fn truncate_bn<T: Scalar>(
    bn: &BnState<T>,
    n: usize,
    old: &SpectrumSelection,
    new: &SpectrumSelection,
) -> Result<BnState<T>> {
    let p_old = old.len();
    if bn.channels() != n * p_old {
        return Err(Error::shape(format!(
            "normalization over {} channels does not match {} x {}",
            bn.channels(),
            n,
            p_old
        )));
    }
    let keep = column_map(old, new)?;
    let mut out = BnState::new(n * new.len());
    out.momentum = bn.momentum;
    out.eps = bn.eps;
    let mut j = 0;
    for ni in 0..n {
        for &idx in &keep {
            let src = ni * p_old + idx;
            out.gamma[j] = bn.gamma[src];
            out.beta[j] = bn.beta[src];
            out.running_mean[j] = bn.running_mean[src];
            out.running_var[j] = bn.running_var[src];
            j += 1;
        }
    }
    Ok(out)
}

/// The most compact spec form that resolves back to `sel`.
pub fn selection_to_spec(sel: &SpectrumSelection) -> SpectrumSpec {
    if sel.is_full() {
        SpectrumSpec::Full
    } else if let Some(l) = sel.lambda() {
        SpectrumSpec::Lambda(l)
    } else {
        SpectrumSpec::Pairs(sel.pairs().to_vec())
    }
}

/// Rewrite the harmonic layers of `spec` to the plan's keep-sets. Conv
/// layers are left alone (their plan entries take effect through
/// conversion, not here).
pub fn apply_plan_to_spec(spec: &ModelSpec, plan: &CompressionPlan) -> Result<ModelSpec> {
    let mut out = spec.clone();
    for layer in &mut out.layers {
        match &mut layer.kind {
            LayerKind::Harmonic { spectrum, .. } => {
                if let Some(sel) = plan.selection_for(&layer.name) {
                    *spectrum = selection_to_spec(sel);
                }
            }
            LayerKind::Residual { blocks } => {
                for (j, block) in blocks.iter_mut().enumerate() {
                    if let Some(slots) = &mut block.harmonic {
                        for (which, slot) in slots.iter_mut().enumerate() {
                            let name = format!("{}.b{}.conv{}", layer.name, j, which + 1);
                            if let Some(sel) = plan.selection_for(&name) {
                                slot.spectrum = selection_to_spec(sel);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

/// Cost of one parameterised unit. `params_conv`/`macs_conv` price the
/// conventional convolution of the same shape; the `harm` and staged
/// columns price the harmonic formulations with `p` retained
/// frequencies. Non-spatial rows (fc, bn, 1x1) carry their own cost in
/// every column so the totals stay comparable.
#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub a: usize,
    pub b: usize,
    pub params_conv: u64,
    pub params_harm: u64,
    pub macs_conv: u64,
    pub macs_twostage: u64,
    pub macs_merged: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub model: String,
    pub layers: Vec<LayerCost>,
    pub params_conv: u64,
    pub params_harm: u64,
    pub macs_conv: u64,
    pub macs_twostage: u64,
    pub macs_merged: u64,
}

impl CostReport {
    /// Fixed-width table for terminal output.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<16} {:>5} {:>6} {:>6} {:>2} {:>3} {:>4} {:>12} {:>12} {:>14} {:>14} {:>14}\n",
            "layer", "kind", "n", "m", "k", "p", "a", "params(conv)", "params(harm)", "macs(conv)",
            "macs(2stage)", "macs(merged)"
        ));
        for l in &self.layers {
            s.push_str(&format!(
                "{:<16} {:>5} {:>6} {:>6} {:>2} {:>3} {:>4} {:>12} {:>12} {:>14} {:>14} {:>14}\n",
                l.name,
                l.kind,
                l.n,
                l.m,
                l.k,
                l.p,
                l.a,
                l.params_conv,
                l.params_harm,
                l.macs_conv,
                l.macs_twostage,
                l.macs_merged
            ));
        }
        s.push_str(&format!(
            "{:<16} {:>5} {:>6} {:>6} {:>2} {:>3} {:>4} {:>12} {:>12} {:>14} {:>14} {:>14}\n",
            "total", "", "", "", "", "", "", self.params_conv, self.params_harm, self.macs_conv,
            self.macs_twostage, self.macs_merged
        ));
        s
    }
}

/// Price every unit of `spec`, optionally under a truncation plan.
///
/// Conventions: a multiply-add is one MAC; biases and normalization do
/// not contribute MACs but their parameters are counted; the merged
/// column includes the per-batch filter-synthesis cost `N*M*P*K^2`.
pub fn account(spec: &ModelSpec, plan: Option<&CompressionPlan>) -> Result<CostReport> {
    let units = spec.validate()?;
    let mut layers = Vec::new();
    for info in &units {
        layers.push(cost_of(info, plan)?);
    }
    let sum = |f: fn(&LayerCost) -> u64| layers.iter().map(f).sum::<u64>();
    Ok(CostReport {
        model: spec.name.clone(),
        params_conv: sum(|l| l.params_conv),
        params_harm: sum(|l| l.params_harm),
        macs_conv: sum(|l| l.macs_conv),
        macs_twostage: sum(|l| l.macs_twostage),
        macs_merged: sum(|l| l.macs_merged),
        layers,
    })
}

fn cost_of(info: &UnitInfo, plan: Option<&CompressionPlan>) -> Result<LayerCost> {
    let planned = plan.and_then(|p| p.selection_for(&info.name));
    let (a, b) = (info.out_shape[1], info.out_shape[2]);
    let ab = (a * b) as u64;
    Ok(match &info.unit {
        Unit::Conv { n, m, k, bias, .. } | Unit::Harmonic { n, m, k, bias, .. } => {
            let (nn, mm, kk) = (*n as u64, *m as u64, *k as u64);
            let (is_harm, sbn, own_p) = match &info.unit {
                Unit::Harmonic {
                    selection,
                    spectrum_bn,
                    ..
                } => (true, *spectrum_bn, selection.len()),
                _ => (false, false, k * k),
            };
            let p = planned.map(|s| s.len()).unwrap_or(own_p) as u64;
            let bias_p = if *bias { mm } else { 0 };
            let conv_params = nn * mm * kk * kk + bias_p;
            let conv_macs = nn * mm * kk * kk * ab;
            if *k == 1 {
                // 1x1 layers have no spectrum; same cost in every column.
                LayerCost {
                    name: info.name.clone(),
                    kind: "conv".into(),
                    n: *n,
                    m: *m,
                    k: *k,
                    p: 1,
                    a,
                    b,
                    params_conv: conv_params,
                    params_harm: conv_params,
                    macs_conv: conv_macs,
                    macs_twostage: conv_macs,
                    macs_merged: conv_macs,
                }
            } else {
                let harm_params = nn * p * mm + bias_p + if sbn { 2 * nn * p } else { 0 };
                LayerCost {
                    name: info.name.clone(),
                    kind: if is_harm { "harm".into() } else { "conv".into() },
                    n: *n,
                    m: *m,
                    k: *k,
                    p: p as usize,
                    a,
                    b,
                    params_conv: conv_params,
                    params_harm: harm_params,
                    macs_conv: conv_macs,
                    macs_twostage: nn * p * kk * kk * ab + nn * p * mm * ab,
                    macs_merged: conv_macs + nn * mm * p * kk * kk,
                }
            }
        }
        Unit::Bn { channels } => {
            let p = 2 * *channels as u64;
            LayerCost {
                name: info.name.clone(),
                kind: "bn".into(),
                n: *channels,
                m: *channels,
                k: 0,
                p: 0,
                a,
                b,
                params_conv: p,
                params_harm: p,
                macs_conv: 0,
                macs_twostage: 0,
                macs_merged: 0,
            }
        }
        Unit::Fc {
            input,
            output,
            bias,
        } => {
            let params = (*input * *output + if *bias { *output } else { 0 }) as u64;
            let macs = (*input * *output) as u64;
            LayerCost {
                name: info.name.clone(),
                kind: "fc".into(),
                n: *input,
                m: *output,
                k: 0,
                p: 0,
                a,
                b,
                params_conv: params,
                params_harm: params,
                macs_conv: macs,
                macs_twostage: macs,
                macs_merged: macs,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, preset_with, PresetOptions};
    use crate::rng::SeedRng;

    fn uniform(lambda: usize) -> Strategy {
        Strategy::Uniform { lambda }
    }

    #[test]
    fn wrn_28_10_totals_match_published_counts() {
        let spec = preset("wrn-28-10").unwrap();
        let full = account(&spec, None).unwrap();
        assert_eq!(full.params_conv, 36_479_194);
        assert_eq!(full.params_harm, 36_479_194);

        let p3 = plan(&spec, &uniform(3), FirstLayerRule::Exempt, None).unwrap();
        let r3 = account(&spec, Some(&p3)).unwrap();
        assert_eq!(r3.params_harm, 24_413_914);

        let p2 = plan(&spec, &uniform(2), FirstLayerRule::Exempt, None).unwrap();
        let r2 = account(&spec, Some(&p2)).unwrap();
        assert_eq!(r2.params_harm, 12_348_634);

        // The harmonic twin prices identically at full spectrum.
        let twin = preset("wrn-28-10-harm").unwrap();
        let tr = account(&twin, None).unwrap();
        assert_eq!(tr.params_harm, full.params_conv);
        for (a, b) in tr.layers.iter().zip(full.layers.iter()) {
            assert_eq!(a.params_harm, b.params_conv, "{}", a.name);
        }
    }

    #[test]
    fn harmnet4_totals_match_published_counts() {
        let fc32 = PresetOptions {
            fc_width: Some(32),
            ..Default::default()
        };
        let spec = preset_with("harmnet4", &fc32).unwrap();
        assert_eq!(account(&spec, None).unwrap().params_harm, 130_789);

        let p3 = plan(&spec, &uniform(3), FirstLayerRule::LambdaPlus(1), None).unwrap();
        assert_eq!(account(&spec, Some(&p3)).unwrap().params_harm, 87_373);
        let p2 = plan(&spec, &uniform(2), FirstLayerRule::LambdaPlus(1), None).unwrap();
        assert_eq!(account(&spec, Some(&p2)).unwrap().params_harm, 44_093);

        let wide = preset("harmnet4").unwrap();
        assert_eq!(account(&wide, None).unwrap().params_harm, 1_280_517);
    }

    #[test]
    fn two_stage_macs_follow_the_proportion_rule() {
        // For a single layer the staged/conv MAC ratio is P/K^2 + P/M and
        // the full-spectrum merged overhead is K^2/(A*B).
        let spec = preset("toy-cnn").unwrap();
        let report = account(&spec, None).unwrap();
        let block2 = report
            .layers
            .iter()
            .find(|l| l.name == "block2")
            .unwrap();
        let (p, k2, m) = (block2.p as f64, (block2.k * block2.k) as f64, block2.m as f64);
        let ratio = block2.macs_twostage as f64 / block2.macs_conv as f64;
        assert!((ratio - (p / k2 + p / m)).abs() < 1e-12);
        let overhead = (block2.macs_merged - block2.macs_conv) as f64 / block2.macs_conv as f64;
        assert!((overhead - k2 / (block2.a * block2.b) as f64).abs() < 1e-12);
    }

    #[test]
    fn uniform_plan_keeps_three_frequencies_at_lambda_2() {
        let spec = preset("wrn-16-8-harm").unwrap();
        let p = plan(&spec, &uniform(2), FirstLayerRule::Exempt, None).unwrap();
        assert_eq!(p.entries[0].selection.len(), 9); // exempt stem
        for e in &p.entries[1..] {
            assert_eq!(e.selection.len(), 3, "{}", e.layer);
        }
    }

    #[test]
    fn progressive_formula_and_monotonicity() {
        // depth 10, K = 3, alpha 2, t 30 -> lambda = max(2, min(5, 3)) = 3.
        let spec = preset("wrn-28-10").unwrap();
        let strat = Strategy::Progressive {
            alpha: 2,
            t: 30.0,
            overrides: vec![],
        };
        let p = plan(&spec, &strat, FirstLayerRule::Same, None).unwrap();
        assert_eq!(p.entries[9].selection.lambda(), Some(3));
        let mut last = usize::MAX;
        for e in &p.entries {
            let lam = e.selection.lambda().unwrap();
            assert!(lam <= last, "{}: {} after {}", e.layer, lam, last);
            last = lam;
        }
        // Shallow layers cap at 2K-1, deep ones floor at alpha.
        assert_eq!(p.entries[0].selection.lambda(), Some(5));
        assert_eq!(p.entries.last().unwrap().selection.lambda(), Some(2));
    }

    #[test]
    fn progressive_overrides_by_resolution() {
        let spec = preset("harmnet4").unwrap();
        let strat = Strategy::Progressive {
            alpha: 1,
            t: 100.0, // full everywhere without the overrides
            overrides: vec![(12, 3), (1, 2)],
        };
        let p = plan(&spec, &strat, FirstLayerRule::Exempt, None).unwrap();
        assert_eq!(p.selection_for("harm2").unwrap().lambda(), Some(3));
        assert_eq!(p.selection_for("harm4").unwrap().lambda(), Some(2));
        assert!(p.selection_for("harm3").unwrap().is_full());

        let bad = Strategy::Progressive {
            alpha: 1,
            t: 100.0,
            overrides: vec![(14, 3)],
        };
        assert!(plan(&spec, &bad, FirstLayerRule::Exempt, None).is_err());
    }

    #[test]
    fn adaptive_thresholds_l1_shares() {
        // One harmonic layer, lambda = 2 (3 frequencies), shares .5/.3/.2.
        let spec = ModelSpec {
            name: "tiny".into(),
            input: [1, 8, 8],
            classes: 2,
            layers: vec![
                crate::model::Layer::new(
                    "h",
                    LayerKind::Harmonic {
                        out: 1,
                        kernel: 3,
                        stride: 1,
                        pad: 1,
                        bias: false,
                        spectrum: SpectrumSpec::Lambda(2),
                        spectrum_bn: false,
                        norm: crate::dct::BasisNorm::Orthonormal,
                    },
                ),
                crate::model::Layer::new("fc", LayerKind::Fc { out: 2, bias: true }),
            ],
        };
        let mut weights = WeightMap::new();
        weights.insert(
            "h".into(),
            Tensor::new(&[1, 3], vec![0.5, -0.3, 0.2]).unwrap(),
        );
        let p = plan(
            &spec,
            &Strategy::Adaptive { threshold: 0.25 },
            FirstLayerRule::Same,
            Some(&weights),
        )
        .unwrap();
        assert_eq!(p.entries[0].selection.pairs(), &[(0, 0), (0, 1)]);

        // Threshold above every share is rejected rather than emptying the layer.
        assert!(plan(
            &spec,
            &Strategy::Adaptive { threshold: 0.9 },
            FirstLayerRule::Same,
            Some(&weights),
        )
        .is_err());
        // ... and weights are mandatory.
        assert!(plan(
            &spec,
            &Strategy::Adaptive { threshold: 0.25 },
            FirstLayerRule::Same,
            None,
        )
        .is_err());
    }

    #[test]
    fn truncation_reports_dropped_energy() {
        let mut rng = SeedRng::new(7);
        let old = SpectrumSelection::full(3).unwrap();
        let new = SpectrumSelection::from_lambda(3, 2).unwrap();
        let n = 2;
        let w = Tensor::from_fn(&[4, n * 9], |_| rng.range(-1.0, 1.0));
        let (tw, rss) = truncate_weight(&w, n, &old, &new).unwrap();
        assert_eq!(tw.shape(), &[4, n * 3]);
        // Independent recount of the dropped energy.
        let mut expect = 0.0f64;
        for mi in 0..4 {
            for ni in 0..n {
                for pi in 0..9 {
                    let keep = old.pairs()[pi].0 + old.pairs()[pi].1 <= 1;
                    if !keep {
                        let v = w.data()[mi * n * 9 + ni * 9 + pi];
                        expect += v * v;
                    }
                }
            }
        }
        assert!((rss - expect.sqrt()).abs() < 1e-12);

        let (same, zero) = truncate_weight(&w, n, &old, &old).unwrap();
        assert_eq!(same.data(), w.data());
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn bn_truncation_keeps_matching_channels() {
        let old = SpectrumSelection::full(3).unwrap();
        let new = SpectrumSelection::from_lambda(3, 2).unwrap();
        let n = 2;
        let mut bn = BnState::<f64>::new(n * 9);
        for i in 0..bn.channels() {
            bn.gamma[i] = i as f64;
            bn.running_mean[i] = 100.0 + i as f64;
        }
        let tb = truncate_bn(&bn, n, &old, &new).unwrap();
        assert_eq!(tb.channels(), n * 3);
        // Kept columns are (0,0),(0,1),(1,0) = indices 0,1,2 of the full order.
        assert_eq!(tb.gamma, vec![0.0, 1.0, 2.0, 9.0, 10.0, 11.0]);
        assert_eq!(tb.running_mean[3], 109.0);
    }

    #[test]
    fn plan_rewrites_spec_consistently() {
        let spec = preset("wrn-16-8-harm").unwrap();
        let strat = Strategy::Progressive {
            alpha: 1,
            t: 10.0,
            overrides: vec![],
        };
        let p = plan(&spec, &strat, FirstLayerRule::Exempt, None).unwrap();
        let rewritten = apply_plan_to_spec(&spec, &p).unwrap();
        let direct = account(&spec, Some(&p)).unwrap();
        let via_spec = account(&rewritten, None).unwrap();
        assert_eq!(direct.params_harm, via_spec.params_harm);
        assert_eq!(direct.macs_twostage, via_spec.macs_twostage);
    }
}
