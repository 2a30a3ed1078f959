//! Reference implementations used to check the production kernels.
//!
//! Everything in this module is written for clarity, not speed: textbook
//! loops over explicit indices, operating on plain slices with explicit
//! dimensions so that none of the production code paths (tensor layout
//! helpers, padded buffers, separable passes) are involved. Tests compare
//! the optimized kernels against these.
//!
//! The convolution oracles also count every multiply-accumulate as it is
//! executed. This gives an instruction-level ground truth for the cost
//! model: the analytic operation counts must match these counters exactly.

/// Counter for multiply-accumulate operations, incremented once per tap.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MacCount(pub u64);

impl MacCount {
    #[inline]
    fn tick(&mut self) {
        self.0 += 1;
    }
}

/// Fetch from a conceptually zero-padded `[c][h][w]` image.
#[inline]
fn fetch(x: &[f64], _c: usize, h: usize, w: usize, ci: usize, iy: isize, ix: isize) -> f64 {
    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
        return 0.0;
    }
    x[(ci * h + iy as usize) * w + ix as usize]
}

/// Textbook cross-correlation on a zero-padded input.
///
/// `x` is `[n][cin][h][w]`, `wgt` is `[m][cin][k][k]`, the result is
/// `[n][m][oh][ow]` with `oh = (h + 2 pad - k) / stride + 1`.
///
/// Accumulation order per output element is channel-major, then kernel
/// rows (each row summed left to right into a row partial, which is then
/// added to the accumulator). Padding taps are multiplied like any other
/// tap, so the counter advances by exactly `cin * k * k` per output
/// element.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    m: usize,
    k: usize,
    stride: usize,
    pad: usize,
    macs: &mut MacCount,
) -> Vec<f64> {
    assert_eq!(x.len(), n * cin * h * w);
    assert_eq!(wgt.len(), m * cin * k * k);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * m * oh * ow];
    for ni in 0..n {
        let xn = &x[ni * cin * h * w..(ni + 1) * cin * h * w];
        for mi in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let mut row = 0.0;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                row += wgt[((mi * cin + ci) * k + ky) * k + kx]
                                    * fetch(xn, cin, h, w, ci, iy, ix);
                                macs.tick();
                            }
                            acc += row;
                        }
                    }
                    out[((ni * m + mi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Literal two-stage block: per-channel filter responses, then a learned
/// per-pixel combination across channels and filters.
///
/// `filters` is `[p][k][k]` (applied to every input channel), `comb` is
/// `[m][cin * p]`. Returns `(responses, output)` where responses are
/// `[n][cin * p][oh][ow]`. The counter covers both stages.
#[allow(clippy::too_many_arguments)]
pub fn two_stage_naive(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    filters: &[f64],
    p: usize,
    k: usize,
    comb: &[f64],
    m: usize,
    stride: usize,
    pad: usize,
    macs: &mut MacCount,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(filters.len(), p * k * k);
    assert_eq!(comb.len(), m * cin * p);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut resp = vec![0.0; n * cin * p * oh * ow];
    for ni in 0..n {
        let xn = &x[ni * cin * h * w..(ni + 1) * cin * h * w];
        for ci in 0..cin {
            for pi in 0..p {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let mut row = 0.0;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                row += filters[(pi * k + ky) * k + kx]
                                    * fetch(xn, cin, h, w, ci, iy, ix);
                                macs.tick();
                            }
                            acc += row;
                        }
                        resp[(((ni * cin + ci) * p + pi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
    }
    let cp = cin * p;
    let mut out = vec![0.0; n * m * oh * ow];
    for ni in 0..n {
        for mi in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for j in 0..cp {
                        acc += comb[mi * cp + j] * resp[((ni * cp + j) * oh + oy) * ow + ox];
                        macs.tick();
                    }
                    out[((ni * m + mi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (resp, out)
}

/// Two-pass per-channel mean and population variance over `(n, h, w)`.
///
/// `x` is `[n][c][h][w]`; returns `(mean, var)` of length `c`.
pub fn moments_two_pass(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(x.len(), n * c * h * w);
    let l = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            for i in 0..h * w {
                s += x[(ni * c + ci) * h * w + i];
            }
        }
        mean[ci] = s / l;
        let mut s2 = 0.0;
        for ni in 0..n {
            for i in 0..h * w {
                let d = x[(ni * c + ci) * h * w + i] - mean[ci];
                s2 += d * d;
            }
        }
        var[ci] = s2 / l;
    }
    (mean, var)
}

/// Symmetric relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-12, a.abs().max(b.abs()))
}

/// Whole-vector gradient agreement: max-norm of the difference over
/// max-norm of the reference (floored at 1).
pub fn grad_rel_err(approx: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(approx.len(), reference.len());
    let scale = reference
        .iter()
        .map(|&x| x.abs())
        .fold(1e-12_f64, f64::max)
        .max(1.0);
    approx
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    // 1x1x3x3 input, single 2x2 filter, stride 1, no padding, worked by hand.
    #[test]
    fn conv_naive_hand_case() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let w = [1.0, 0.0, 0.0, -1.0];
        let mut macs = MacCount::default();
        let out = conv2d_naive(&x, 1, 1, 3, 3, &w, 1, 2, 1, 0, &mut macs);
        // out[y][x] = x[y][x] - x[y+1][x+1]
        assert_eq!(out, vec![1.0 - 5.0, 2.0 - 6.0, 4.0 - 8.0, 5.0 - 9.0]);
        assert_eq!(macs.0, 4 * 4); // 4 outputs, 4 taps each
    }

    #[test]
    fn conv_naive_padding_counts_all_taps() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0; 9];
        let mut macs = MacCount::default();
        let out = conv2d_naive(&x, 1, 1, 2, 2, &w, 1, 3, 1, 1, &mut macs);
        // 3x3 all-ones kernel over a zero-padded 2x2: each output is the
        // sum of the in-bounds neighbourhood.
        assert_eq!(out, vec![10.0; 4]);
        assert_eq!(macs.0, 4 * 9);
    }

    #[test]
    fn conv_naive_stride_two() {
        let x: Vec<f64> = (1..=16).map(|i| i as f64).collect();
        let w = [1.0];
        let mut macs = MacCount::default();
        let out = conv2d_naive(&x, 1, 1, 4, 4, &w, 1, 1, 2, 0, &mut macs);
        assert_eq!(out, vec![1.0, 3.0, 9.0, 11.0]);
        assert_eq!(macs.0, 4);
    }

    #[test]
    fn two_stage_mac_split() {
        // N=2 channels, P=3 filters, M=4 outputs, 4x4 input, K=2, no pad.
        let x: Vec<f64> = (0..2 * 16).map(|i| (i as f64) * 0.1).collect();
        let filters: Vec<f64> = (0..3 * 4).map(|i| i as f64 - 5.0).collect();
        let comb: Vec<f64> = (0..4 * 6).map(|i| (i as f64) * 0.01).collect();
        let mut macs = MacCount::default();
        let (resp, out) =
            two_stage_naive(&x, 1, 2, 4, 4, &filters, 3, 2, &comb, 4, 1, 0, &mut macs);
        assert_eq!(resp.len(), 2 * 3 * 9);
        assert_eq!(out.len(), 4 * 9);
        // transform: N*P*K^2 per output position; combine: N*P*M per position
        assert_eq!(macs.0, (2 * 3 * 4 * 9 + 2 * 3 * 4 * 9) as u64);
    }

    #[test]
    fn moments_hand_case() {
        // channel 0: [1,2,3,4] -> mean 2.5, var 1.25
        // channel 1: [0,0,10,10] -> mean 5, var 25
        let x = [1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 10.0, 10.0];
        let (m, v) = moments_two_pass(&x, 1, 2, 2, 2);
        assert_eq!(m, vec![2.5, 5.0]);
        assert_eq!(v, vec![1.25, 25.0]);
    }

    #[test]
    fn moments_across_batch() {
        // two batch items, one channel: values 0..6 -> mean 2.5, var 35/12
        let x = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let (m, v) = moments_two_pass(&x, 2, 1, 1, 3);
        assert!((m[0] - 2.5).abs() < 1e-15);
        assert!((v[0] - 35.0 / 12.0).abs() < 1e-15);
    }
}
