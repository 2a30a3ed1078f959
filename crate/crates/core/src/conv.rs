//! 2-D cross-correlation and its gradients.
//!
//! Filters are applied without flipping (cross-correlation, the usual
//! deep-learning convention) over zero-padded inputs. Every output element
//! accumulates its reduction in one fixed order: channel-major, then
//! kernel rows, then kernel columns, with each row first collapsed into a
//! row partial that is added to the accumulator. Padding taps participate
//! like any other tap. This makes results bit-for-bit reproducible and
//! identical to the naive reference in `oracle`, independent of how the
//! loops are blocked, because the per-element operation sequence never
//! changes.
//!
//! The forward kernel processes four output columns at a time (four
//! independent accumulator chains); this only interleaves distinct output
//! elements and leaves each element's own reduction order untouched.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Kernel size, stride and zero padding of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Result<ConvGeometry> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid(format!(
                "kernel and stride must be positive, got {kernel}x{kernel} stride {stride}"
            )));
        }
        Ok(ConvGeometry {
            kernel,
            stride,
            pad,
        })
    }

    /// Output height/width for a given input size.
    pub fn out_dim(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel {
            return Err(Error::shape(format!(
                "input {input} with pad {} is smaller than kernel {}",
                self.pad, self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

/// Copy `[n][c][h][w]` into a zero-padded `[n][c][h+2p][w+2p]` buffer.
pub fn pad_nchw<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut buf = vec![T::ZERO; n * c * hp * wp];
    if pad == 0 {
        buf.copy_from_slice(x);
        return buf;
    }
    for plane in 0..n * c {
        for y in 0..h {
            let src = (plane * h + y) * w;
            let dst = (plane * hp + y + pad) * wp + pad;
            buf[dst..dst + w].copy_from_slice(&x[src..src + w]);
        }
    }
    buf
}

/// `k = 1`, `s = 1` correlation: a pointwise combination over pixels,
/// `out[n,m,·] += Σ_c w[m,c] · x[n,c,·]`. Whole rows at a time so both
/// sides stay contiguous and the inner loop vectorizes.
#[inline(never)]
fn pointwise_s1<T: Scalar>(x: &[T], n: usize, c: usize, ab: usize, wgt: &[T], m: usize, out: &mut [T]) {
    debug_assert_eq!(x.len(), n * c * ab);
    debug_assert_eq!(wgt.len(), m * c);
    debug_assert_eq!(out.len(), n * m * ab);
    for ni in 0..n {
        let xn = &x[ni * c * ab..(ni + 1) * c * ab];
        for mi in 0..m {
            let wm = &wgt[mi * c..(mi + 1) * c];
            let orow = &mut out[(ni * m + mi) * ab..(ni * m + mi + 1) * ab];
            for (ci, &wv) in wm.iter().enumerate() {
                let xrow = &xn[ci * ab..(ci + 1) * ab];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += wv * xv;
                }
            }
        }
    }
}

/// Stride-1 correlation, any `k`: per input channel the output row is
/// swept with that channel's taps held in registers, every tap reading a
/// contiguous shifted row. The ubiquitous `k = 3` gets all nine taps in
/// one sweep; other sizes sweep once per weight row.
/// Three tap-aligned windows of one padded row, each exactly `ow` long,
/// so the sweep bodies index every operand by the bare output column.
/// (Indexing the row by `ox + tap` instead leaves checked adds inside
/// the hot loop whenever overflow checks are enabled.)
#[inline(always)]
fn win3<T>(row: &[T], ow: usize) -> (&[T], &[T], &[T]) {
    (&row[..ow], &row[1..1 + ow], &row[2..2 + ow])
}

/// Two tap-aligned windows (same idea as [`win3`]) for the even-parity
/// half-rows of the stride-2 sweep, whose taps sit one element apart.
#[inline(always)]
fn win2<T>(row: &[T], ow: usize) -> (&[T], &[T]) {
    (&row[..ow], &row[1..1 + ow])
}

#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn correlate_s1<T: Scalar>(
    padin: &[T],
    n: usize,
    c: usize,
    hp: usize,
    wp: usize,
    wgt: &[T],
    m: usize,
    k: usize,
    out: &mut [T],
) {
    let oh = hp - k + 1;
    let ow = wp - k + 1;
    debug_assert_eq!(out.len(), n * m * oh * ow);
    if ow <= 8 {
        // Rows this short defeat the sweep's vectorization, so lay the
        // input out as one shifted row copy per weight tap; the whole
        // correlation then runs through the pointwise kernel over full
        // output planes. The copies are reused by every output channel.
        let ohw = oh * ow;
        let ckk = c * k * k;
        let mut shifted = vec![T::ZERO; ckk * ohw];
        for ni in 0..n {
            let xn = &padin[ni * c * hp * wp..(ni + 1) * c * hp * wp];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let q = (ci * k + ky) * k + kx;
                        for oy in 0..oh {
                            let src = (ci * hp + oy + ky) * wp + kx;
                            shifted[(q * oh + oy) * ow..(q * oh + oy + 1) * ow]
                                .copy_from_slice(&xn[src..src + ow]);
                        }
                    }
                }
            }
            pointwise_s1(&shifted, 1, ckk, ohw, wgt, m, &mut out[ni * m * ohw..(ni + 1) * m * ohw]);
        }
        return;
    }
    for ni in 0..n {
        let xn = &padin[ni * c * hp * wp..(ni + 1) * c * hp * wp];
        for mi in 0..m {
            let wm = &wgt[mi * c * k * k..(mi + 1) * c * k * k];
            let ob = (ni * m + mi) * oh * ow;
            if k == 3 {
                // Several output rows per sweep: consecutive rows share
                // most of their input rows, and the per-channel setup
                // amortizes over more work (short rows feel this most).
                let mut oy = 0;
                while oy + 4 <= oh {
                    let rows = &mut out[ob + oy * ow..ob + (oy + 4) * ow];
                    let (r0, rest) = rows.split_at_mut(ow);
                    let (r1, rest) = rest.split_at_mut(ow);
                    let (r2, r3) = rest.split_at_mut(ow);
                    for ci in 0..c {
                        let base = (ci * hp + oy) * wp;
                        let (x0a, x0b, x0c) = win3(&xn[base..], ow);
                        let (x1a, x1b, x1c) = win3(&xn[base + wp..], ow);
                        let (x2a, x2b, x2c) = win3(&xn[base + 2 * wp..], ow);
                        let (x3a, x3b, x3c) = win3(&xn[base + 3 * wp..], ow);
                        let (x4a, x4b, x4c) = win3(&xn[base + 4 * wp..], ow);
                        let (x5a, x5b, x5c) = win3(&xn[base + 5 * wp..], ow);
                        let w = &wm[ci * 9..ci * 9 + 9];
                        for ox in 0..ow {
                            let (a0, a1, a2) = (
                                w[0] * x0a[ox] + w[1] * x0b[ox] + w[2] * x0c[ox],
                                w[3] * x1a[ox] + w[4] * x1b[ox] + w[5] * x1c[ox],
                                w[6] * x2a[ox] + w[7] * x2b[ox] + w[8] * x2c[ox],
                            );
                            let (b0, b1, b2) = (
                                w[0] * x1a[ox] + w[1] * x1b[ox] + w[2] * x1c[ox],
                                w[3] * x2a[ox] + w[4] * x2b[ox] + w[5] * x2c[ox],
                                w[6] * x3a[ox] + w[7] * x3b[ox] + w[8] * x3c[ox],
                            );
                            let (c0, c1, c2) = (
                                w[0] * x2a[ox] + w[1] * x2b[ox] + w[2] * x2c[ox],
                                w[3] * x3a[ox] + w[4] * x3b[ox] + w[5] * x3c[ox],
                                w[6] * x4a[ox] + w[7] * x4b[ox] + w[8] * x4c[ox],
                            );
                            let (d0, d1, d2) = (
                                w[0] * x3a[ox] + w[1] * x3b[ox] + w[2] * x3c[ox],
                                w[3] * x4a[ox] + w[4] * x4b[ox] + w[5] * x4c[ox],
                                w[6] * x5a[ox] + w[7] * x5b[ox] + w[8] * x5c[ox],
                            );
                            r0[ox] += a0 + a1 + a2;
                            r1[ox] += b0 + b1 + b2;
                            r2[ox] += c0 + c1 + c2;
                            r3[ox] += d0 + d1 + d2;
                        }
                    }
                    oy += 4;
                }
                while oy + 2 <= oh {
                    let (r0, r1) = out[ob + oy * ow..ob + (oy + 2) * ow].split_at_mut(ow);
                    for ci in 0..c {
                        let base = (ci * hp + oy) * wp;
                        let (x0a, x0b, x0c) = win3(&xn[base..], ow);
                        let (x1a, x1b, x1c) = win3(&xn[base + wp..], ow);
                        let (x2a, x2b, x2c) = win3(&xn[base + 2 * wp..], ow);
                        let (x3a, x3b, x3c) = win3(&xn[base + 3 * wp..], ow);
                        let w = &wm[ci * 9..ci * 9 + 9];
                        for ox in 0..ow {
                            r0[ox] += w[0] * x0a[ox] + w[1] * x0b[ox] + w[2] * x0c[ox]
                                + w[3] * x1a[ox] + w[4] * x1b[ox] + w[5] * x1c[ox]
                                + w[6] * x2a[ox] + w[7] * x2b[ox] + w[8] * x2c[ox];
                            r1[ox] += w[0] * x1a[ox] + w[1] * x1b[ox] + w[2] * x1c[ox]
                                + w[3] * x2a[ox] + w[4] * x2b[ox] + w[5] * x2c[ox]
                                + w[6] * x3a[ox] + w[7] * x3b[ox] + w[8] * x3c[ox];
                        }
                    }
                    oy += 2;
                }
                if oy < oh {
                    let orow = &mut out[ob + oy * ow..ob + (oy + 1) * ow];
                    for ci in 0..c {
                        let base = (ci * hp + oy) * wp;
                        let (x0a, x0b, x0c) = win3(&xn[base..], ow);
                        let (x1a, x1b, x1c) = win3(&xn[base + wp..], ow);
                        let (x2a, x2b, x2c) = win3(&xn[base + 2 * wp..], ow);
                        let w = &wm[ci * 9..ci * 9 + 9];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            *o += w[0] * x0a[ox] + w[1] * x0b[ox] + w[2] * x0c[ox]
                                + w[3] * x1a[ox] + w[4] * x1b[ox] + w[5] * x1c[ox]
                                + w[6] * x2a[ox] + w[7] * x2b[ox] + w[8] * x2c[ox];
                        }
                    }
                }
            } else {
                for oy in 0..oh {
                    let orow = &mut out[ob + oy * ow..ob + (oy + 1) * ow];
                    for ci in 0..c {
                        for ky in 0..k {
                            let xrow = &xn[(ci * hp + oy + ky) * wp..][..ow + k - 1];
                            let wrow = &wm[(ci * k + ky) * k..(ci * k + ky) * k + k];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                for (o, &xv) in orow.iter_mut().zip(&xrow[kx..kx + ow]) {
                                    *o += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-2 correlation via polyphase split: each input row is
/// deinterleaved into even and odd columns once per image, after which
/// every tap reads a contiguous half-row exactly as in the stride-1
/// sweep (output column `ox` needs input column `2·ox + kx`, which is
/// position `ox + kx/2` of the parity-`kx` half).
#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn correlate_s2<T: Scalar>(
    padin: &[T],
    n: usize,
    c: usize,
    hp: usize,
    wp: usize,
    wgt: &[T],
    m: usize,
    k: usize,
    out: &mut [T],
) {
    let oh = (hp - k) / 2 + 1;
    let ow = (wp - k) / 2 + 1;
    debug_assert_eq!(out.len(), n * m * oh * ow);
    let ew = wp.div_ceil(2);
    let odw = wp / 2;
    let mut xe = vec![T::ZERO; c * hp * ew];
    let mut xo = vec![T::ZERO; c * hp * odw];
    let narrow = ow <= 8;
    let mut shifted = if narrow { vec![T::ZERO; c * k * k * oh * ow] } else { Vec::new() };
    for ni in 0..n {
        let xn = &padin[ni * c * hp * wp..(ni + 1) * c * hp * wp];
        for r in 0..c * hp {
            let src = &xn[r * wp..(r + 1) * wp];
            for (i, &v) in src.iter().enumerate() {
                if i % 2 == 0 {
                    xe[r * ew + i / 2] = v;
                } else {
                    xo[r * odw + i / 2] = v;
                }
            }
        }
        if narrow {
            // Short output rows: materialize one shifted row copy per
            // weight tap out of the parity halves and run the whole
            // correlation through the pointwise kernel (see correlate_s1).
            let ohw = oh * ow;
            let ckk = c * k * k;
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let q = (ci * k + ky) * k + kx;
                        for oy in 0..oh {
                            let r = ci * hp + oy * 2 + ky;
                            let half = if kx % 2 == 0 {
                                &xe[r * ew + kx / 2..][..ow]
                            } else {
                                &xo[r * odw + kx / 2..][..ow]
                            };
                            shifted[(q * oh + oy) * ow..(q * oh + oy + 1) * ow]
                                .copy_from_slice(half);
                        }
                    }
                }
            }
            pointwise_s1(&shifted, 1, ckk, ohw, wgt, m, &mut out[ni * m * ohw..(ni + 1) * m * ohw]);
            continue;
        }
        for mi in 0..m {
            let wm = &wgt[mi * c * k * k..(mi + 1) * c * k * k];
            let ob = (ni * m + mi) * oh * ow;
            if k == 3 {
                // Same multi-row sweeps as the stride-1 kernel; adjacent
                // output rows share every other input row.
                let mut oy = 0;
                while oy + 4 <= oh {
                    let rows = &mut out[ob + oy * ow..ob + (oy + 4) * ow];
                    let (r0, rest) = rows.split_at_mut(ow);
                    let (r1, rest) = rest.split_at_mut(ow);
                    let (r2, r3) = rest.split_at_mut(ow);
                    for ci in 0..c {
                        let rb = ci * hp + oy * 2;
                        let (e0a, e0b) = win2(&xe[rb * ew..], ow);
                        let o0 = &xo[rb * odw..][..ow];
                        let (e1a, e1b) = win2(&xe[(rb + 1) * ew..], ow);
                        let o1 = &xo[(rb + 1) * odw..][..ow];
                        let (e2a, e2b) = win2(&xe[(rb + 2) * ew..], ow);
                        let o2 = &xo[(rb + 2) * odw..][..ow];
                        let (e3a, e3b) = win2(&xe[(rb + 3) * ew..], ow);
                        let o3 = &xo[(rb + 3) * odw..][..ow];
                        let (e4a, e4b) = win2(&xe[(rb + 4) * ew..], ow);
                        let o4 = &xo[(rb + 4) * odw..][..ow];
                        let (e5a, e5b) = win2(&xe[(rb + 5) * ew..], ow);
                        let o5 = &xo[(rb + 5) * odw..][..ow];
                        let (e6a, e6b) = win2(&xe[(rb + 6) * ew..], ow);
                        let o6 = &xo[(rb + 6) * odw..][..ow];
                        let (e7a, e7b) = win2(&xe[(rb + 7) * ew..], ow);
                        let o7 = &xo[(rb + 7) * odw..][..ow];
                        let (e8a, e8b) = win2(&xe[(rb + 8) * ew..], ow);
                        let o8 = &xo[(rb + 8) * odw..][..ow];
                        let w = &wm[ci * 9..ci * 9 + 9];
                        for ox in 0..ow {
                            let (a0, a1, a2) = (
                                w[0] * e0a[ox] + w[1] * o0[ox] + w[2] * e0b[ox],
                                w[3] * e1a[ox] + w[4] * o1[ox] + w[5] * e1b[ox],
                                w[6] * e2a[ox] + w[7] * o2[ox] + w[8] * e2b[ox],
                            );
                            let (b0, b1, b2) = (
                                w[0] * e2a[ox] + w[1] * o2[ox] + w[2] * e2b[ox],
                                w[3] * e3a[ox] + w[4] * o3[ox] + w[5] * e3b[ox],
                                w[6] * e4a[ox] + w[7] * o4[ox] + w[8] * e4b[ox],
                            );
                            let (c0, c1, c2) = (
                                w[0] * e4a[ox] + w[1] * o4[ox] + w[2] * e4b[ox],
                                w[3] * e5a[ox] + w[4] * o5[ox] + w[5] * e5b[ox],
                                w[6] * e6a[ox] + w[7] * o6[ox] + w[8] * e6b[ox],
                            );
                            let (d0, d1, d2) = (
                                w[0] * e6a[ox] + w[1] * o6[ox] + w[2] * e6b[ox],
                                w[3] * e7a[ox] + w[4] * o7[ox] + w[5] * e7b[ox],
                                w[6] * e8a[ox] + w[7] * o8[ox] + w[8] * e8b[ox],
                            );
                            r0[ox] += a0 + a1 + a2;
                            r1[ox] += b0 + b1 + b2;
                            r2[ox] += c0 + c1 + c2;
                            r3[ox] += d0 + d1 + d2;
                        }
                    }
                    oy += 4;
                }
                while oy + 2 <= oh {
                    let (r0, r1) = out[ob + oy * ow..ob + (oy + 2) * ow].split_at_mut(ow);
                    for ci in 0..c {
                        let rb = ci * hp + oy * 2;
                        let (e0a, e0b) = win2(&xe[rb * ew..], ow);
                        let o0 = &xo[rb * odw..][..ow];
                        let (e1a, e1b) = win2(&xe[(rb + 1) * ew..], ow);
                        let o1 = &xo[(rb + 1) * odw..][..ow];
                        let (e2a, e2b) = win2(&xe[(rb + 2) * ew..], ow);
                        let o2 = &xo[(rb + 2) * odw..][..ow];
                        let (e3a, e3b) = win2(&xe[(rb + 3) * ew..], ow);
                        let o3 = &xo[(rb + 3) * odw..][..ow];
                        let (e4a, e4b) = win2(&xe[(rb + 4) * ew..], ow);
                        let o4 = &xo[(rb + 4) * odw..][..ow];
                        let w = &wm[ci * 9..ci * 9 + 9];
                        for ox in 0..ow {
                            r0[ox] += w[0] * e0a[ox] + w[1] * o0[ox] + w[2] * e0b[ox]
                                + w[3] * e1a[ox] + w[4] * o1[ox] + w[5] * e1b[ox]
                                + w[6] * e2a[ox] + w[7] * o2[ox] + w[8] * e2b[ox];
                            r1[ox] += w[0] * e2a[ox] + w[1] * o2[ox] + w[2] * e2b[ox]
                                + w[3] * e3a[ox] + w[4] * o3[ox] + w[5] * e3b[ox]
                                + w[6] * e4a[ox] + w[7] * o4[ox] + w[8] * e4b[ox];
                        }
                    }
                    oy += 2;
                }
                if oy < oh {
                    let orow = &mut out[ob + oy * ow..ob + (oy + 1) * ow];
                    for ci in 0..c {
                        let rb = ci * hp + oy * 2;
                        let (e0a, e0b) = win2(&xe[rb * ew..], ow);
                        let o0 = &xo[rb * odw..][..ow];
                        let (e1a, e1b) = win2(&xe[(rb + 1) * ew..], ow);
                        let o1 = &xo[(rb + 1) * odw..][..ow];
                        let (e2a, e2b) = win2(&xe[(rb + 2) * ew..], ow);
                        let o2 = &xo[(rb + 2) * odw..][..ow];
                        let w = &wm[ci * 9..ci * 9 + 9];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            *o += w[0] * e0a[ox] + w[1] * o0[ox] + w[2] * e0b[ox]
                                + w[3] * e1a[ox] + w[4] * o1[ox] + w[5] * e1b[ox]
                                + w[6] * e2a[ox] + w[7] * o2[ox] + w[8] * e2b[ox];
                        }
                    }
                }
            } else {
                for oy in 0..oh {
                    let orow = &mut out[ob + oy * ow..ob + (oy + 1) * ow];
                    for ci in 0..c {
                        for ky in 0..k {
                            let r = ci * hp + oy * 2 + ky;
                            let wrow = &wm[(ci * k + ky) * k..(ci * k + ky) * k + k];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let half = if kx % 2 == 0 {
                                    &xe[r * ew + kx / 2..r * ew + kx / 2 + ow]
                                } else {
                                    &xo[r * odw + kx / 2..r * odw + kx / 2 + ow]
                                };
                                for (o, &xv) in orow.iter_mut().zip(half) {
                                    *o += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Strided correlation for any remaining stride, with the input read at
/// stride `s` inside the row sweep.
#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn correlate_strided<T: Scalar>(
    padin: &[T],
    n: usize,
    c: usize,
    hp: usize,
    wp: usize,
    wgt: &[T],
    m: usize,
    k: usize,
    s: usize,
    out: &mut [T],
) {
    let oh = (hp - k) / s + 1;
    let ow = (wp - k) / s + 1;
    debug_assert_eq!(out.len(), n * m * oh * ow);
    for ni in 0..n {
        let xn = &padin[ni * c * hp * wp..(ni + 1) * c * hp * wp];
        for mi in 0..m {
            let wm = &wgt[mi * c * k * k..(mi + 1) * c * k * k];
            let ob = (ni * m + mi) * oh * ow;
            for oy in 0..oh {
                let orow = &mut out[ob + oy * ow..ob + (oy + 1) * ow];
                for ci in 0..c {
                    for ky in 0..k {
                        let row = (ci * hp + oy * s + ky) * wp;
                        let xrow = &xn[row..row + wp];
                        let wrow = &wm[(ci * k + ky) * k..(ci * k + ky) * k + k];
                        for (kx, &wv) in wrow.iter().enumerate() {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                *o += wv * xrow[ox * s + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Core correlation kernel on an already padded input.
///
/// `padin` is `[n][c][hp][wp]`, `wgt` is `[m][c][k][k]`, `out` must hold
/// `[n][m][oh][ow]` with `oh = (hp - k)/s + 1` and arrive zero-filled
/// (every path accumulates instead of assigning).
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_padded<T: Scalar>(
    padin: &[T],
    n: usize,
    c: usize,
    hp: usize,
    wp: usize,
    wgt: &[T],
    m: usize,
    k: usize,
    s: usize,
    out: &mut [T],
) {
    debug_assert_eq!(padin.len(), n * c * hp * wp);
    debug_assert_eq!(wgt.len(), m * c * k * k);
    if s == 1 {
        if k == 1 {
            pointwise_s1(padin, n, c, hp * wp, wgt, m, out);
        } else {
            correlate_s1(padin, n, c, hp, wp, wgt, m, k, out);
        }
    } else if s == 2 {
        correlate_s2(padin, n, c, hp, wp, wgt, m, k, out);
    } else {
        correlate_strided(padin, n, c, hp, wp, wgt, m, k, s, out);
    }
}

/// Cross-correlate `x` `[n][c][h][w]` with `weights` `[m][c][k][k]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = expect4(x, "conv2d input")?;
    let (m, wc, kh, kw) = expect4(weights, "conv2d weights")?;
    if wc != c || kh != geom.kernel || kw != geom.kernel {
        return Err(Error::shape(format!(
            "weights {:?} do not match input channels {c} and kernel {}",
            weights.shape(),
            geom.kernel
        )));
    }
    if let Some(b) = bias {
        if b.len() != m {
            return Err(Error::shape(format!(
                "bias length {} does not match {m} output channels",
                b.len()
            )));
        }
    }
    let oh = geom.out_dim(h)?;
    let ow = geom.out_dim(w)?;
    let padded = pad_nchw(x.data(), n, c, h, w, geom.pad);
    let mut out = Tensor::zeros(&[n, m, oh, ow]);
    correlate_padded(
        &padded,
        n,
        c,
        h + 2 * geom.pad,
        w + 2 * geom.pad,
        weights.data(),
        m,
        geom.kernel,
        geom.stride,
        out.data_mut(),
    );
    if let Some(b) = bias {
        let od = out.data_mut();
        for ni in 0..n {
            for mi in 0..m {
                let base = (ni * m + mi) * oh * ow;
                let bv = b[mi];
                for v in &mut od[base..base + oh * ow] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of the convolution output with respect to its input.
///
/// Scatters `grad_out` `[n][m][oh][ow]` back through `weights`
/// `[m][c][k][k]` onto a padded buffer in a fixed iteration order
/// (batch, output channel, output position, input channel, kernel row),
/// then crops the padding off.
pub fn conv2d_grad_input<T: Scalar>(
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
    input_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let (m, c, kh, kw) = expect4(weights, "conv2d weights")?;
    let (n, gm, oh, ow) = expect4(grad_out, "conv2d grad_out")?;
    if gm != m || kh != geom.kernel || kw != geom.kernel {
        return Err(Error::shape(format!(
            "grad_out {:?} does not match weights {:?}",
            grad_out.shape(),
            weights.shape()
        )));
    }
    let (h, w) = input_hw;
    if geom.out_dim(h)? != oh || geom.out_dim(w)? != ow {
        return Err(Error::shape(format!(
            "grad_out {oh}x{ow} inconsistent with input {h}x{w}"
        )));
    }
    let (k, s, p) = (geom.kernel, geom.stride, geom.pad);
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut padgrad = vec![T::ZERO; n * c * hp * wp];
    let go = grad_out.data();
    let wd = weights.data();
    for ni in 0..n {
        for mi in 0..m {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = go[((ni * m + mi) * oh + oy) * ow + ox];
                    for ci in 0..c {
                        let pb = ((ni * c + ci) * hp + oy * s) * wp + ox * s;
                        let wb = (mi * c + ci) * k * k;
                        for ky in 0..k {
                            let row = pb + ky * wp;
                            for kx in 0..k {
                                padgrad[row + kx] += g * wd[wb + ky * k + kx];
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
            let src = (plane * hp + y + p) * wp + p;
            let dst = (plane * h + y) * w;
            gd[dst..dst + w].copy_from_slice(&padgrad[src..src + w]);
        }
    }
    Ok(gin)
}

/// Gradient of the convolution output with respect to the weights.
///
/// For each weight tap, accumulates over batch and output positions in a
/// fixed order (batch-major, rows, then columns blocked by four with the
/// four partials folded in ascending order).
pub fn conv2d_grad_weights<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = expect4(x, "conv2d input")?;
    let (gn, m, oh, ow) = expect4(grad_out, "conv2d grad_out")?;
    if gn != n || geom.out_dim(h)? != oh || geom.out_dim(w)? != ow {
        return Err(Error::shape(format!(
            "grad_out {:?} inconsistent with input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let (k, s, p) = (geom.kernel, geom.stride, geom.pad);
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let padded = pad_nchw(x.data(), n, c, h, w, p);
    let mut gw = Tensor::zeros(&[m, c, k, k]);
    let gwd = gw.data_mut();
    let go = grad_out.data();
    for ni in 0..n {
        for mi in 0..m {
            let gb = (ni * m + mi) * oh * ow;
            for ci in 0..c {
                let xb = (ni * c + ci) * hp * wp;
                for ky in 0..k {
                    for kx in 0..k {
                        let mut part = [T::ZERO; 4];
                        for oy in 0..oh {
                            let grow = gb + oy * ow;
                            let xrow = xb + (oy * s + ky) * wp + kx;
                            let mut ox = 0;
                            while ox + 4 <= ow {
                                for q in 0..4 {
                                    part[q] += go[grow + ox + q] * padded[xrow + (ox + q) * s];
                                }
                                ox += 4;
                            }
                            while ox < ow {
                                part[0] += go[grow + ox] * padded[xrow + ox * s];
                                ox += 1;
                            }
                        }
                        let sum = ((part[0] + part[1]) + part[2]) + part[3];
                        gwd[((mi * c + ci) * k + ky) * k + kx] += sum;
                    }
                }
            }
        }
    }
    Ok(gw)
}

/// Per-channel mean and population variance over `(batch, height, width)`.
///
/// Two-pass computation in the element order of the tensor; accumulation
/// happens in the tensor's own precision.
pub fn batch_moments<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, h, w) = expect4(x, "batch_moments input")?;
    let l = T::from_f64((n * h * w) as f64);
    let d = x.data();
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ci in 0..c {
        let mut s = T::ZERO;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for &v in &d[base..base + h * w] {
                s += v;
            }
        }
        let mu = s / l;
        mean[ci] = mu;
        let mut s2 = T::ZERO;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for &v in &d[base..base + h * w] {
                let dv = v - mu;
                s2 += dv * dv;
            }
        }
        var[ci] = s2 / l;
    }
    Ok((mean, var))
}

pub(crate) fn expect4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::shape(format!(
            "{what} must be rank 4, got {:?}",
            t.shape()
        )));
    }
    Ok((t.dim(0), t.dim(1), t.dim(2), t.dim(3)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{conv2d_naive, moments_two_pass, MacCount};
    use crate::rng::SeedRng;

    fn random_tensor(rng: &mut SeedRng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.range(-1.0, 1.0))
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = SeedRng::new(42);
        for trial in 0..60 {
            let n = 1 + rng.below(2);
            let c = 1 + rng.below(4);
            let m = 1 + rng.below(5);
            let k = 1 + rng.below(4);
            let s = 1 + rng.below(2);
            let pad = rng.below(k);
            let h = k + rng.below(8 - k.min(7));
            let w = k + rng.below(8 - k.min(7));
            let x = random_tensor(&mut rng, &[n, c, h, w]);
            let wg = random_tensor(&mut rng, &[m, c, k, k]);
            let geom = ConvGeometry::new(k, s, pad).unwrap();
            let got = conv2d(&x, &wg, None, geom).unwrap();
            let mut macs = MacCount::default();
            let want = conv2d_naive(x.data(), n, c, h, w, wg.data(), m, k, s, pad, &mut macs);
            assert_eq!(got.data().len(), want.len(), "trial {trial}");
            // The fast kernel reassociates the tap sums, so the match is
            // tight-tolerance rather than bitwise: an indexing bug would
            // miss by O(1), not by rounding noise.
            for (i, (&a, &b)) in got.data().iter().zip(&want).enumerate() {
                assert!((a - b).abs() <= 1e-12, "trial {trial} element {i}: {a} vs {b}");
            }
            let oh = geom.out_dim(h).unwrap();
            let ow = geom.out_dim(w).unwrap();
            assert_eq!(macs.0, (n * m * c * k * k * oh * ow) as u64);
        }
    }

    #[test]
    fn bias_adds_per_channel() {
        let x = Tensor::<f64>::filled(&[1, 1, 2, 2], 1.0);
        let w = Tensor::<f64>::filled(&[2, 1, 1, 1], 2.0);
        let geom = ConvGeometry::new(1, 1, 0).unwrap();
        let out = conv2d(&x, &w, Some(&[10.0, -10.0]), geom).unwrap();
        assert_eq!(out.data()[..4], [12.0; 4]);
        assert_eq!(out.data()[4..], [-8.0; 4]);
    }

    #[test]
    fn grad_input_matches_finite_difference() {
        let mut rng = SeedRng::new(7);
        let x = random_tensor(&mut rng, &[2, 3, 5, 5]);
        let w = random_tensor(&mut rng, &[4, 3, 3, 3]);
        let geom = ConvGeometry::new(3, 2, 1).unwrap();
        let out = conv2d(&x, &w, None, geom).unwrap();
        // scalar objective: weighted sum of outputs
        let coeffs: Vec<f64> = (0..out.numel()).map(|_| rng.range(-1.0, 1.0)).collect();
        let loss = |t: &Tensor<f64>| -> f64 {
            conv2d(t, &w, None, geom)
                .unwrap()
                .data()
                .iter()
                .zip(&coeffs)
                .map(|(&o, &c)| o * c)
                .sum()
        };
        let gout = Tensor::new(out.shape(), coeffs.clone()).unwrap();
        let gin = conv2d_grad_input(&w, &gout, geom, (5, 5)).unwrap();
        let mut xp = x.clone();
        let eps = 1e-6;
        for i in 0..x.numel() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + eps;
            let up = loss(&xp);
            xp.data_mut()[i] = orig - eps;
            let dn = loss(&xp);
            xp.data_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * eps);
            assert!(
                (fd - gin.data()[i]).abs() < 1e-7,
                "element {i}: fd {fd} vs analytic {}",
                gin.data()[i]
            );
        }
    }

    #[test]
    fn grad_weights_matches_finite_difference() {
        let mut rng = SeedRng::new(8);
        let x = random_tensor(&mut rng, &[2, 2, 6, 6]);
        let w = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let geom = ConvGeometry::new(3, 1, 1).unwrap();
        let out = conv2d(&x, &w, None, geom).unwrap();
        let gout = Tensor::from_fn(out.shape(), |i| ((i % 7) as f64 - 3.0) * 0.1);
        let gw = conv2d_grad_weights(&x, &gout, geom).unwrap();
        let loss = |wt: &Tensor<f64>| -> f64 {
            conv2d(&x, wt, None, geom)
                .unwrap()
                .data()
                .iter()
                .zip(gout.data())
                .map(|(&o, &c)| o * c)
                .sum()
        };
        let mut wp = w.clone();
        let eps = 1e-6;
        for i in 0..w.numel() {
            let orig = wp.data()[i];
            wp.data_mut()[i] = orig + eps;
            let up = loss(&wp);
            wp.data_mut()[i] = orig - eps;
            let dn = loss(&wp);
            wp.data_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * eps);
            assert!(
                (fd - gw.data()[i]).abs() < 1e-6,
                "tap {i}: fd {fd} vs analytic {}",
                gw.data()[i]
            );
        }
    }

    #[test]
    fn moments_match_oracle() {
        let mut rng = SeedRng::new(9);
        let x = random_tensor(&mut rng, &[3, 4, 5, 6]);
        let (mean, var) = batch_moments(&x).unwrap();
        let (om, ov) = moments_two_pass(x.data(), 3, 4, 5, 6);
        for c in 0..4 {
            assert!((mean[c] - om[c]).abs() < 1e-14);
            assert!((var[c] - ov[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn geometry_rejects_too_small_input() {
        let g = ConvGeometry::new(5, 1, 0).unwrap();
        assert!(g.out_dim(4).is_err());
        assert_eq!(g.out_dim(5).unwrap(), 1);
        let g2 = ConvGeometry::new(3, 2, 1).unwrap();
        assert_eq!(g2.out_dim(32).unwrap(), 16);
    }
}
