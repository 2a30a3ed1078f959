//! Converting trained convolution weights into harmonic form.
//!
//! Because the filter bank spans the full `K x K` filter space, any
//! spatial convolution can be rewritten exactly as a harmonic block:
//! each filter's combination weights are its inner products with the
//! basis filters. A truncation plan drops frequencies during the same
//! pass; for the orthonormal basis the resulting L2 filter error equals
//! the root-sum-square of the discarded coefficients, which the report
//! carries per layer.

use crate::compress::{selection_to_spec, truncate_bn, truncate_weight, CompressionPlan};
use crate::dct::{make_basis, BasisNorm, DctBasis, SpectrumSelection};
use crate::error::{Error, Result};
use crate::model::{HarmonicSlot, LayerKind, ModelSpec, SpectrumSpec};
use crate::nn::{ConvState, HarmState, LayerState, Model, SlotState};
use crate::tensor::Scalar;

/// Synthesis coefficients of one flattened `K x K` filter over the
/// selected frequencies (in the selection's canonical order), expressed
/// for the bank's own normalization, plus the energy — the sum of
/// squared orthonormal coefficients — of the frequencies left out.
pub fn project_filter<T: Scalar>(
    filter: &[T],
    basis: &DctBasis,
    selection: &SpectrumSelection,
) -> Result<(Vec<f64>, f64)> {
    let k = basis.k();
    if filter.len() != k * k {
        return Err(Error::shape(format!(
            "filter has {} taps, basis expects {}",
            filter.len(),
            k * k
        )));
    }
    let full = SpectrumSelection::full(k)?;
    let mut kept = vec![0.0f64; selection.len()];
    let mut dropped_sq = 0.0f64;
    for &(u, v) in full.pairs() {
        let psi = basis.filter(u, v);
        let mut dot = 0.0f64;
        for (a, b) in filter.iter().zip(psi) {
            dot += a.to_f64() * b;
        }
        // The bank's filters may be rescaled; recover the orthonormal
        // coefficient first, since energy accounting lives there.
        let c_on = match basis.norm() {
            BasisNorm::Orthonormal => dot,
            BasisNorm::L1 => dot * basis.l1_norm(u, v),
        };
        match selection.pairs().iter().position(|&p| p == (u, v)) {
            Some(i) => {
                kept[i] = match basis.norm() {
                    BasisNorm::Orthonormal => c_on,
                    // f = sum c_on * psi_on = sum (c_on * l1) * (psi_on / l1)
                    BasisNorm::L1 => c_on * basis.l1_norm(u, v),
                };
            }
            None => dropped_sq += c_on * c_on,
        }
    }
    Ok((kept, dropped_sq))
}

/// Rewrite a spec so every spatial convolution (`K >= 2`) becomes a
/// harmonic block — full-spectrum by default, or truncated to the plan's
/// keep-sets. Harmonic layers already present only pick up their planned
/// selections. 1x1 convolutions (projections included) stay ordinary.
pub fn convert_spec(spec: &ModelSpec, plan: Option<&CompressionPlan>) -> Result<ModelSpec> {
    let mut out = spec.clone();
    let mut matched: Vec<String> = Vec::new();
    let mut select = |name: &str| -> Option<SpectrumSpec> {
        let sel = plan.and_then(|p| p.selection_for(name))?;
        matched.push(name.to_string());
        Some(selection_to_spec(sel))
    };
    for layer in &mut out.layers {
        match &mut layer.kind {
            LayerKind::Conv {
                out,
                kernel,
                stride,
                pad,
                bias,
            } if *kernel >= 2 => {
                let spectrum = select(&layer.name).unwrap_or(SpectrumSpec::Full);
                layer.kind = LayerKind::Harmonic {
                    out: *out,
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                    bias: *bias,
                    spectrum,
                    spectrum_bn: false,
                    norm: BasisNorm::Orthonormal,
                };
            }
            LayerKind::Harmonic { spectrum, .. } => {
                if let Some(s) = select(&layer.name) {
                    *spectrum = s;
                }
            }
            LayerKind::Residual { blocks } => {
                for (j, block) in blocks.iter_mut().enumerate() {
                    let mut slots = block
                        .harmonic
                        .clone()
                        .unwrap_or([HarmonicSlot::full(), HarmonicSlot::full()]);
                    for (which, slot) in slots.iter_mut().enumerate() {
                        let name = format!("{}.b{}.conv{}", layer.name, j, which + 1);
                        if let Some(s) = select(&name) {
                            slot.spectrum = s;
                        }
                    }
                    block.harmonic = Some(slots);
                }
            }
            _ => {}
        }
    }
    if let Some(p) = plan {
        let unmatched: Vec<&str> = p
            .entries
            .iter()
            .map(|e| e.layer.as_str())
            .filter(|l| !matched.iter().any(|m| m == l))
            .collect();
        if !unmatched.is_empty() {
            return Err(Error::invalid(format!(
                "plan names layers missing from the model: {}",
                unmatched.join(", ")
            )));
        }
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LayerConversion {
    pub layer: String,
    /// Frequencies kept out of `K * K`.
    pub kept: usize,
    /// L2 norm of the filter error introduced by truncation,
    /// accumulated over the layer's filters.
    pub dropped_rss: f64,
}

#[derive(Debug, Clone)]
pub struct ConversionReport {
    pub layers: Vec<LayerConversion>,
    pub total_rss: f64,
}

/// Convert a trained model to harmonic form, carrying all weights over.
/// With no plan the conversion is exact (up to roundoff); with a plan
/// the planned frequencies are dropped on the way and the report states
/// the resulting filter-space error per layer.
pub fn convert_model<T: Scalar>(
    source: &Model<T>,
    plan: Option<&CompressionPlan>,
) -> Result<(Model<T>, ConversionReport)> {
    let new_spec = convert_spec(&source.spec, plan)?;
    let mut out: Model<T> = Model::init(&new_spec, 0)?;
    let mut report = ConversionReport {
        layers: Vec::new(),
        total_rss: 0.0,
    };
    let mut sq_sum = 0.0f64;
    for (li, (layer, state)) in source.spec.layers.iter().zip(&source.states).enumerate() {
        match (state, &mut out.states[li]) {
            (LayerState::Conv(c), LayerState::Harm(h)) => {
                sq_sum += project_conv(&layer.name, c, h, &mut report.layers)?;
            }
            (LayerState::Conv(c), LayerState::Conv(dst)) => *dst = c.clone(),
            (LayerState::Harm(src), LayerState::Harm(dst)) => {
                sq_sum += carry_harm(&layer.name, src, dst, plan, &mut report.layers)?;
            }
            (LayerState::Res(src_blocks), LayerState::Res(dst_blocks)) => {
                for (j, (sb, db)) in src_blocks.iter().zip(dst_blocks.iter_mut()).enumerate() {
                    db.bn1 = sb.bn1.clone();
                    db.bn2 = sb.bn2.clone();
                    db.proj = sb.proj.clone();
                    let pairs = [(&sb.slot1, &mut db.slot1), (&sb.slot2, &mut db.slot2)];
                    for (which, (ss, ds)) in pairs.into_iter().enumerate() {
                        let name = format!("{}.b{}.conv{}", layer.name, j, which + 1);
                        match (ss, ds) {
                            (SlotState::Conv(c), SlotState::Harm(h)) => {
                                sq_sum += project_conv(&name, c, h, &mut report.layers)?;
                            }
                            (SlotState::Harm(src), SlotState::Harm(dst)) => {
                                sq_sum += carry_harm(&name, src, dst, plan, &mut report.layers)?;
                            }
                            _ => return Err(Error::invalid("conversion changed a slot backwards")),
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

/// Project one convolution's filters onto the target selection. Returns
/// the dropped energy (squared) and appends a report row.
fn project_conv<T: Scalar>(
    name: &str,
    src: &ConvState<T>,
    dst: &mut HarmState<T>,
    report: &mut Vec<LayerConversion>,
) -> Result<f64> {
    let (m, n, k) = (src.weight.dim(0), src.weight.dim(1), src.weight.dim(2));
    let selection = dst.cfg.selection.clone();
    let p = selection.len();
    let basis = make_basis(k, dst.cfg.norm)?;
    let wd = src.weight.data();
    let out = dst.params.weight.data_mut();
    let mut dropped_sq = 0.0f64;
    for mi in 0..m {
        for ni in 0..n {
            let filter = &wd[(mi * n + ni) * k * k..(mi * n + ni + 1) * k * k];
            let (coeffs, dsq) = project_filter(filter, &basis, &selection)?;
            dropped_sq += dsq;
            for (pi, c) in coeffs.into_iter().enumerate() {
                out[mi * n * p + ni * p + pi] = T::from_f64(c);
            }
        }
    }
    dst.params.bias = src.bias.clone();
    report.push(LayerConversion {
        layer: name.to_string(),
        kept: p,
        dropped_rss: dropped_sq.sqrt(),
    });
    Ok(dropped_sq)
}

// Type alias keeps project_conv's signature readable.
type LayerConversions = Vec<LayerConversion>;

/// Carry an already-harmonic layer across, truncating it when planned.
fn carry_harm<T: Scalar>(
    name: &str,
    src: &HarmState<T>,
    dst: &mut HarmState<T>,
    plan: Option<&CompressionPlan>,
    report: &mut LayerConversions,
) -> Result<f64> {
    let planned = plan.and_then(|p| p.selection_for(name)).is_some();
    let dropped_sq = if planned {
        let old = &src.cfg.selection;
        let new = dst.cfg.selection.clone();
        let (w, rss) = truncate_weight(&src.params.weight, src.cfg.in_channels, old, &new)?;
        dst.params.weight = w;
        dst.params.bias = src.params.bias.clone();
        dst.params.bn = match &src.params.bn {
            Some(bn) => Some(truncate_bn(bn, src.cfg.in_channels, old, &new)?),
            None => None,
        };
        report.push(LayerConversion {
            layer: name.to_string(),
            kept: new.len(),
            dropped_rss: rss,
        });
        rss * rss
    } else {
        dst.params = src.params.clone();
        0.0
    };
    Ok(dropped_sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{account, apply_plan_to_spec, plan, FirstLayerRule, Strategy};
    use crate::model::{preset, preset_with, PresetOptions};
    use crate::rng::SeedRng;
    use crate::tensor::Tensor;

    #[test]
    fn basis_filter_projects_to_a_unit_impulse() {
        let basis = make_basis(3, BasisNorm::Orthonormal).unwrap();
        let full = SpectrumSelection::full(3).unwrap();
        let filter: Vec<f64> = basis.filter(1, 2).to_vec();
        let (coeffs, dropped) = project_filter(&filter, &basis, &full).unwrap();
        for (i, &(u, v)) in full.pairs().iter().enumerate() {
            let want = if (u, v) == (1, 2) { 1.0 } else { 0.0 };
            assert!((coeffs[i] - want).abs() < 1e-12, "({u},{v}) -> {}", coeffs[i]);
        }
        assert!(dropped.abs() < 1e-24);
    }

    #[test]
    fn zero_filter_projects_to_zero() {
        let basis = make_basis(4, BasisNorm::Orthonormal).unwrap();
        let sel = SpectrumSelection::from_lambda(4, 3).unwrap();
        let (coeffs, dropped) = project_filter(&[0.0f64; 16], &basis, &sel).unwrap();
        assert!(coeffs.iter().all(|&c| c == 0.0));
        assert_eq!(dropped, 0.0);
    }

    #[test]
    fn projection_reconstructs_the_filter_in_both_normalizations() {
        let mut rng = SeedRng::new(4);
        let filter: Vec<f64> = (0..9).map(|_| rng.range(-1.0, 1.0)).collect();
        let full = SpectrumSelection::full(3).unwrap();
        for norm in [BasisNorm::Orthonormal, BasisNorm::L1] {
            let basis = make_basis(3, norm).unwrap();
            let (coeffs, dropped) = project_filter(&filter, &basis, &full).unwrap();
            assert!(dropped.abs() < 1e-24);
            let mut recon = vec![0.0f64; 9];
            for (i, &(u, v)) in full.pairs().iter().enumerate() {
                for (r, psi) in recon.iter_mut().zip(basis.filter(u, v)) {
                    *r += coeffs[i] * psi;
                }
            }
            for (a, b) in filter.iter().zip(&recon) {
                assert!((a - b).abs() < 1e-12, "{norm:?}");
            }
        }
    }

    #[test]
    fn dropped_energy_equals_truncation_error() {
        let mut rng = SeedRng::new(9);
        let filter: Vec<f64> = (0..9).map(|_| rng.range(-1.0, 1.0)).collect();
        let basis = make_basis(3, BasisNorm::Orthonormal).unwrap();
        let sel = SpectrumSelection::from_lambda(3, 2).unwrap();
        let (coeffs, dropped_sq) = project_filter(&filter, &basis, &sel).unwrap();
        let mut recon = vec![0.0f64; 9];
        for (i, &(u, v)) in sel.pairs().iter().enumerate() {
            for (r, psi) in recon.iter_mut().zip(basis.filter(u, v)) {
                *r += coeffs[i] * psi;
            }
        }
        let err_sq: f64 = filter
            .iter()
            .zip(&recon)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!((err_sq - dropped_sq).abs() < 1e-12);
    }

    #[test]
    fn full_conversion_preserves_the_forward_pass() {
        // f64 network covering conv + pooling + fc.
        let spec = preset_with(
            "cnn3",
            &PresetOptions {
                input_hw: Some(32),
                ..Default::default()
            },
        )
        .unwrap();
        let source: Model<f64> = Model::init(&spec, 31).unwrap();
        let (converted, report) = convert_model(&source, None).unwrap();
        assert_eq!(report.total_rss, 0.0);
        assert!(report.layers.iter().all(|l| l.dropped_rss == 0.0));
        let mut rng = SeedRng::new(8);
        let x = Tensor::<f64>::from_fn(&[3, 2, 32, 32], |_| rng.range(0.0, 1.0));
        let a = source.forward_eval(&x).unwrap();
        let b = converted.forward_eval(&x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn residual_conversion_preserves_the_forward_pass() {
        let spec = crate::model::wrn(
            "wrn-10-1",
            10,
            1,
            false,
            &PresetOptions {
                input_hw: Some(8),
                ..Default::default()
            },
        )
        .unwrap();
        let source: Model<f32> = Model::init(&spec, 5).unwrap();
        let (converted, report) = convert_model(&source, None).unwrap();
        assert_eq!(report.total_rss, 0.0);
        // Stem + 2 slots per block, 3 blocks; projections stay conv.
        assert_eq!(report.layers.len(), 7);
        let mut rng = SeedRng::new(2);
        let x = Tensor::<f32>::from_fn(&[2, 3, 8, 8], |_| rng.range(0.0, 1.0) as f32);
        let a = source.forward_eval(&x).unwrap();
        let b = converted.forward_eval(&x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-4);
    }

    #[test]
    fn plan_during_conversion_matches_plan_after_conversion() {
        let spec = preset("cnn3").unwrap();
        let p = plan(
            &spec,
            &Strategy::Uniform { lambda: 2 },
            FirstLayerRule::Exempt,
            None,
        )
        .unwrap();
        let direct = convert_spec(&spec, Some(&p)).unwrap();
        let full = convert_spec(&spec, None).unwrap();
        let two_step = apply_plan_to_spec(&full, &p).unwrap();
        assert_eq!(direct.layers, two_step.layers);
        // Accounting agrees too: planning the full conversion equals
        // accounting the truncated conversion directly.
        let a = account(&direct, None).unwrap();
        let b = account(&full, Some(&p)).unwrap();
        assert_eq!(a.params_harm, b.params_harm);
        assert_eq!(a.macs_twostage, b.macs_twostage);
    }

    #[test]
    fn harmonic_layers_pass_through_and_truncate_like_apply_plan() {
        let spec = preset("toy-harm").unwrap();
        let model: Model<f64> = Model::init(&spec, 13).unwrap();
        let p = plan(
            &spec,
            &Strategy::Uniform { lambda: 2 },
            FirstLayerRule::Exempt,
            None,
        )
        .unwrap();
        let (via_convert, _) = convert_model(&model, Some(&p)).unwrap();
        let (via_apply, _) = crate::nn::apply_plan(&model, &p).unwrap();
        for ((n1, t1), (_, t2)) in via_convert
            .export_tensors()
            .iter()
            .zip(via_apply.export_tensors().iter())
        {
            assert_eq!(t1.data(), t2.data(), "{n1}");
        }
    }

    #[test]
    fn plans_for_other_models_are_rejected() {
        // A cnn3 plan names conv3, which cnn2 does not have.
        let p = plan(
            &preset("cnn3").unwrap(),
            &Strategy::Uniform { lambda: 2 },
            FirstLayerRule::Same,
            None,
        )
        .unwrap();
        assert!(p.entries.iter().any(|e| e.layer == "conv3"));
        let err = convert_spec(&preset("cnn2").unwrap(), Some(&p)).unwrap_err();
        assert!(err.to_string().contains("conv3"));
    }
}
