//! Wall-clock comparison of the two block formulations.
//!
//! Each case times the two-stage forward pass against a single
//! convolution with the synthesized filters (the merged form, with
//! synthesis done once up front, as a deployed model would). Before any
//! timing the two outputs are checked against each other, so a case
//! that would benchmark two different functions fails instead.
//!
//! The memory column is the analytic working set — bytes of input,
//! parameters, intermediates and output touched per forward pass — not
//! an allocator measurement.

use std::time::Instant;

use crate::conv::{conv2d, ConvGeometry};
use crate::dct::{BasisNorm, SpectrumSelection};
use crate::error::{Error, Result};
use crate::harmonic::{forward_twostage, synthesize_filters, HarmonicConfig, HarmonicParams};
use crate::rng::SeedRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BenchCase {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub input_hw: usize,
    pub batch: usize,
    /// Truncation level; `None` keeps the full spectrum.
    pub lambda: Option<usize>,
    /// How many layers of this shape the aggregated model contains.
    pub mult: usize,
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub mult: usize,
    /// Median seconds per forward pass.
    pub twostage_s: f64,
    pub merged_s: f64,
    /// Analytic multiply-accumulate counts per forward pass (batch included).
    pub macs_twostage: u64,
    pub macs_merged: u64,
    /// Analytic working-set bytes per forward pass.
    pub bytes_twostage: u64,
    pub bytes_merged: u64,
    /// Largest elementwise gap between the two formulations' outputs.
    pub max_diff: f64,
}

impl BenchCase {
    fn config(&self) -> Result<HarmonicConfig> {
        let selection = match self.lambda {
            Some(l) => SpectrumSelection::from_lambda(self.kernel, l)?,
            None => SpectrumSelection::full(self.kernel)?,
        };
        Ok(HarmonicConfig {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            geom: ConvGeometry::new(self.kernel, self.stride, self.pad)?,
            selection,
            norm: BasisNorm::Orthonormal,
            bias: false,
            spectrum_bn: false,
        })
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Time one case. `reps` timed repetitions per formulation (median
/// reported) after `warmup` untimed ones.
pub fn run_case(case: &BenchCase, reps: usize, warmup: usize, seed: u64) -> Result<CaseResult> {
    if reps == 0 {
        return Err(Error::invalid("need at least one timed repetition"));
    }
    let cfg = case.config()?;
    let mut rng = SeedRng::new(seed);
    let params: HarmonicParams<f32> = HarmonicParams::init(&cfg, &mut rng)?;
    let x = Tensor::<f32>::from_fn(
        &[case.batch, case.in_channels, case.input_hw, case.input_hw],
        |_| rng.range(-1.0, 1.0) as f32,
    );
    let merged_weights = synthesize_filters(&cfg, &params)?;

    // The formulations must agree before their timings mean anything.
    let a = forward_twostage(&cfg, &params, &x)?;
    let b = conv2d(&x, &merged_weights, None, cfg.geom)?;
    let max_diff = a.max_abs_diff(&b)? as f64;
    if max_diff > 1e-4 {
        return Err(Error::numeric(format!(
            "{}: formulations disagree by {max_diff:e} before timing",
            case.name
        )));
    }

    let time = |merged: bool| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(reps);
        for i in 0..warmup + reps {
            let start = Instant::now();
            let y = if merged {
                conv2d(&x, &merged_weights, None, cfg.geom)?
            } else {
                forward_twostage(&cfg, &params, &x)?
            };
            let dt = start.elapsed().as_secs_f64();
            // Keep the result alive past the clock read.
            std::hint::black_box(y.data().len());
            if i >= warmup {
                out.push(dt);
            }
        }
        Ok(out)
    };
    let two = time(false)?;
    let mer = time(true)?;

    let p = cfg.selection.len() as u64;
    let (n, m, k) = (
        case.in_channels as u64,
        case.out_channels as u64,
        case.kernel as u64,
    );
    let out_hw = cfg.geom.out_dim(case.input_hw)? as u64;
    let ab = out_hw * out_hw;
    let batch = case.batch as u64;
    let hw = (case.input_hw * case.input_hw) as u64;
    let f = 4u64; // f32 bytes
    Ok(CaseResult {
        name: case.name.clone(),
        mult: case.mult,
        twostage_s: median(two),
        merged_s: median(mer),
        macs_twostage: batch * n * p * ab * (k * k + m),
        macs_merged: batch * n * m * k * k * ab,
        bytes_twostage: f * (batch * n * hw + p * k * k + batch * n * p * ab + m * n * p
            + batch * m * ab),
        bytes_merged: f * (batch * n * hw + m * n * k * k + batch * m * ab),
        max_diff,
    })
}

pub fn run_bench(
    cases: &[BenchCase],
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<CaseResult>> {
    cases
        .iter()
        .map(|c| run_case(c, reps, warmup, seed))
        .collect()
}

/// Multiplicity-weighted total merged time over total two-stage time.
pub fn aggregate_ratio(results: &[CaseResult]) -> f64 {
    let two: f64 = results.iter().map(|r| r.mult as f64 * r.twostage_s).sum();
    let mer: f64 = results.iter().map(|r| r.mult as f64 * r.merged_s).sum();
    mer / two
}

/// The distinct 3x3 layer shapes of a 16-deep, 8-wide residual network
/// on 32 x 32 inputs, with how often each occurs.
pub fn wrn_16_8_catalog(batch: usize) -> Vec<BenchCase> {
    let case = |name: &str, n: usize, m: usize, stride: usize, hw: usize, mult: usize| BenchCase {
        name: name.to_string(),
        in_channels: n,
        out_channels: m,
        kernel: 3,
        stride,
        pad: 1,
        input_hw: hw,
        batch,
        lambda: None,
        mult,
    };
    vec![
        case("stem 3>16 @32", 3, 16, 1, 32, 1),
        case("g1 16>128 @32", 16, 128, 1, 32, 1),
        case("g1 128>128 @32", 128, 128, 1, 32, 3),
        case("g2 128>256 /2", 128, 256, 2, 32, 1),
        case("g2 256>256 @16", 256, 256, 1, 16, 3),
        case("g3 256>512 /2", 256, 512, 2, 16, 1),
        case("g3 512>512 @8", 512, 512, 1, 8, 3),
    ]
}
