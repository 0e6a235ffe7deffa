//! Forward and backward computational kernels.
//!
//! Every kernel iterates groups independently with a fixed inner-loop order,
//! so evaluating a group in isolation (`G = 1`) is bit-identical to
//! evaluating it inside a larger packed call. The sequential, packed, and
//! incremental evaluation paths all reduce to these functions, which is what
//! makes their outputs agree exactly.
//!
//! Backward kernels accumulate (`+=`) into their gradient outputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Elem;

/// Dot product with four fixed-order accumulators. The order is deterministic
/// and identical wherever the kernel is invoked; it is not plain
/// left-to-right.
#[inline]
pub(crate) fn dot<E: Elem>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let quads = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (E::ZERO, E::ZERO, E::ZERO, E::ZERO);
    for i in 0..quads {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for j in quads * 4..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub(crate) fn axpy<E: Elem>(alpha: E, x: &[E], y: &mut [E]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

// ---------------------------------------------------------------------------
// Grouped linear: x [batch, G*cin], w [G, cout, cin], bias [G*cout]
// ---------------------------------------------------------------------------

pub(crate) fn grouped_linear_fwd<E: Elem>(
    batch: usize,
    groups: usize,
    cin: usize,
    cout: usize,
    x: &[E],
    w: &[E],
    bias: Option<&[E]>,
    y: &mut [E],
) {
    for b in 0..batch {
        let x_row = &x[b * groups * cin..(b + 1) * groups * cin];
        let y_row = &mut y[b * groups * cout..(b + 1) * groups * cout];
        for g in 0..groups {
            let xg = &x_row[g * cin..(g + 1) * cin];
            for o in 0..cout {
                let w_row = &w[(g * cout + o) * cin..(g * cout + o + 1) * cin];
                let mut v = dot(w_row, xg);
                if let Some(bias) = bias {
                    v += bias[g * cout + o];
                }
                y_row[g * cout + o] = v;
            }
        }
    }
}

pub(crate) fn grouped_linear_bwd_input<E: Elem>(
    batch: usize,
    groups: usize,
    cin: usize,
    cout: usize,
    gy: &[E],
    w: &[E],
    gx: &mut [E],
) {
    for b in 0..batch {
        let gy_row = &gy[b * groups * cout..(b + 1) * groups * cout];
        let gx_row = &mut gx[b * groups * cin..(b + 1) * groups * cin];
        for g in 0..groups {
            let gxg = &mut gx_row[g * cin..(g + 1) * cin];
            for o in 0..cout {
                let w_row = &w[(g * cout + o) * cin..(g * cout + o + 1) * cin];
                axpy(gy_row[g * cout + o], w_row, gxg);
            }
        }
    }
}

pub(crate) fn grouped_linear_bwd_weight<E: Elem>(
    batch: usize,
    groups: usize,
    cin: usize,
    cout: usize,
    x: &[E],
    gy: &[E],
    gw: &mut [E],
) {
    for b in 0..batch {
        let x_row = &x[b * groups * cin..(b + 1) * groups * cin];
        let gy_row = &gy[b * groups * cout..(b + 1) * groups * cout];
        for g in 0..groups {
            let xg = &x_row[g * cin..(g + 1) * cin];
            for o in 0..cout {
                let gw_row = &mut gw[(g * cout + o) * cin..(g * cout + o + 1) * cin];
                axpy(gy_row[g * cout + o], xg, gw_row);
            }
        }
    }
}

pub(crate) fn grouped_linear_bwd_bias<E: Elem>(
    batch: usize,
    groups: usize,
    cout: usize,
    gy: &[E],
    gb: &mut [E],
) {
    for b in 0..batch {
        let gy_row = &gy[b * groups * cout..(b + 1) * groups * cout];
        for (gbi, &gyi) in gb.iter_mut().zip(gy_row.iter()) {
            *gbi += gyi;
        }
    }
}

// ---------------------------------------------------------------------------
// Grouped 2-d convolution: x [batch, G*cin, H, W], k [G, cout, cin, kh, kw]
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Conv2dDims {
    pub batch: usize,
    pub groups: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dDims {
    pub(crate) fn out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
        (extent + 2 * pad - k) / stride + 1
    }
}

#[inline]
fn conv_in_idx(dims: &Conv2dDims, b: usize, c_abs: usize, iy: usize, ix: usize) -> usize {
    ((b * dims.groups * dims.cin + c_abs) * dims.h + iy) * dims.w + ix
}

#[inline]
fn conv_out_idx(dims: &Conv2dDims, b: usize, c_abs: usize, oy: usize, ox: usize) -> usize {
    ((b * dims.groups * dims.cout + c_abs) * dims.ho + oy) * dims.wo + ox
}

#[inline]
fn kernel_idx(dims: &Conv2dDims, g: usize, o: usize, ci: usize, ky: usize, kx: usize) -> usize {
    ((((g * dims.cout + o) * dims.cin) + ci) * dims.kh + ky) * dims.kw + kx
}

pub(crate) fn conv2d_fwd<E: Elem>(
    dims: &Conv2dDims,
    x: &[E],
    k: &[E],
    bias: Option<&[E]>,
    y: &mut [E],
) {
    let d = dims;
    for b in 0..d.batch {
        for g in 0..d.groups {
            for o in 0..d.cout {
                let c_out_abs = g * d.cout + o;
                for oy in 0..d.ho {
                    for ox in 0..d.wo {
                        let mut acc = match bias {
                            Some(bias) => bias[c_out_abs],
                            None => E::ZERO,
                        };
                        for ci in 0..d.cin {
                            let c_in_abs = g * d.cin + ci;
                            for ky in 0..d.kh {
                                let iy = oy * d.stride + ky;
                                if iy < d.pad || iy - d.pad >= d.h {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let ix = ox * d.stride + kx;
                                    if ix < d.pad || ix - d.pad >= d.w {
                                        continue;
                                    }
                                    acc += k[kernel_idx(d, g, o, ci, ky, kx)]
                                        * x[conv_in_idx(d, b, c_in_abs, iy - d.pad, ix - d.pad)];
                                }
                            }
                        }
                        y[conv_out_idx(d, b, c_out_abs, oy, ox)] = acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_bwd_input<E: Elem>(dims: &Conv2dDims, gy: &[E], k: &[E], gx: &mut [E]) {
    let d = dims;
    for b in 0..d.batch {
        for g in 0..d.groups {
            for o in 0..d.cout {
                let c_out_abs = g * d.cout + o;
                for oy in 0..d.ho {
                    for ox in 0..d.wo {
                        let gv = gy[conv_out_idx(d, b, c_out_abs, oy, ox)];
                        for ci in 0..d.cin {
                            let c_in_abs = g * d.cin + ci;
                            for ky in 0..d.kh {
                                let iy = oy * d.stride + ky;
                                if iy < d.pad || iy - d.pad >= d.h {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let ix = ox * d.stride + kx;
                                    if ix < d.pad || ix - d.pad >= d.w {
                                        continue;
                                    }
                                    gx[conv_in_idx(d, b, c_in_abs, iy - d.pad, ix - d.pad)] +=
                                        gv * k[kernel_idx(d, g, o, ci, ky, kx)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_bwd_kernel<E: Elem>(dims: &Conv2dDims, x: &[E], gy: &[E], gk: &mut [E]) {
    let d = dims;
    for b in 0..d.batch {
        for g in 0..d.groups {
            for o in 0..d.cout {
                let c_out_abs = g * d.cout + o;
                for oy in 0..d.ho {
                    for ox in 0..d.wo {
                        let gv = gy[conv_out_idx(d, b, c_out_abs, oy, ox)];
                        for ci in 0..d.cin {
                            let c_in_abs = g * d.cin + ci;
                            for ky in 0..d.kh {
                                let iy = oy * d.stride + ky;
                                if iy < d.pad || iy - d.pad >= d.h {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let ix = ox * d.stride + kx;
                                    if ix < d.pad || ix - d.pad >= d.w {
                                        continue;
                                    }
                                    gk[kernel_idx(d, g, o, ci, ky, kx)] +=
                                        gv * x[conv_in_idx(d, b, c_in_abs, iy - d.pad, ix - d.pad)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_bwd_bias<E: Elem>(dims: &Conv2dDims, gy: &[E], gb: &mut [E]) {
    let d = dims;
    for b in 0..d.batch {
        for c in 0..d.groups * d.cout {
            let mut s = E::ZERO;
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    s += gy[conv_out_idx(d, b, c, oy, ox)];
                }
            }
            gb[c] += s;
        }
    }
}

// ---------------------------------------------------------------------------
// Group replication: each group's channel block repeated `factor` times, so
// the children of branch g land at positions g*factor .. g*factor+factor-1.
// `block` is the per-group element count (channels times spatial extent).
// ---------------------------------------------------------------------------

pub(crate) fn replicate_groups_fwd<E: Elem>(
    batch: usize,
    groups: usize,
    block: usize,
    factor: usize,
    x: &[E],
    y: &mut [E],
) {
    for b in 0..batch {
        let x_row = &x[b * groups * block..(b + 1) * groups * block];
        let y_row = &mut y[b * groups * factor * block..(b + 1) * groups * factor * block];
        for g in 0..groups {
            let src = &x_row[g * block..(g + 1) * block];
            for f in 0..factor {
                let dst_off = (g * factor + f) * block;
                y_row[dst_off..dst_off + block].copy_from_slice(src);
            }
        }
    }
}

pub(crate) fn replicate_groups_bwd<E: Elem>(
    batch: usize,
    groups: usize,
    block: usize,
    factor: usize,
    gy: &[E],
    gx: &mut [E],
) {
    for b in 0..batch {
        let gy_row = &gy[b * groups * factor * block..(b + 1) * groups * factor * block];
        let gx_row = &mut gx[b * groups * block..(b + 1) * groups * block];
        for g in 0..groups {
            let dst = &mut gx_row[g * block..(g + 1) * block];
            for f in 0..factor {
                let src_off = (g * factor + f) * block;
                for (d, &s) in dst.iter_mut().zip(&gy_row[src_off..src_off + block]) {
                    *d += s;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization over [batch, C, S] with population statistics.
// S is the spatial extent (1 for vector activations).
// ---------------------------------------------------------------------------

#[inline]
fn bn_idx(channels: usize, spatial: usize, b: usize, c: usize, s: usize) -> usize {
    (b * channels + c) * spatial + s
}

/// Per-channel mean and population variance over batch and spatial axes.
pub(crate) fn bn_stats<E: Elem>(
    x: &[E],
    batch: usize,
    channels: usize,
    spatial: usize,
) -> (Vec<E>, Vec<E>) {
    let count = E::from_f64((batch * spatial) as f64);
    let mut mean = vec![E::ZERO; channels];
    let mut var = vec![E::ZERO; channels];
    for c in 0..channels {
        let mut sum = E::ZERO;
        for b in 0..batch {
            for s in 0..spatial {
                sum += x[bn_idx(channels, spatial, b, c, s)];
            }
        }
        mean[c] = sum / count;
    }
    for c in 0..channels {
        let m = mean[c];
        let mut sum = E::ZERO;
        for b in 0..batch {
            for s in 0..spatial {
                let d = x[bn_idx(channels, spatial, b, c, s)] - m;
                sum += d * d;
            }
        }
        var[c] = sum / count;
    }
    (mean, var)
}

pub(crate) fn bn_invstd<E: Elem>(var: &[E], eps: E) -> Vec<E> {
    var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect()
}

/// y = gamma * (x - mean) * invstd + beta, per channel.
pub(crate) fn bn_apply<E: Elem>(
    x: &[E],
    batch: usize,
    channels: usize,
    spatial: usize,
    mean: &[E],
    invstd: &[E],
    gamma: &[E],
    beta: &[E],
    y: &mut [E],
) {
    for b in 0..batch {
        for c in 0..channels {
            let (m, is, ga, be) = (mean[c], invstd[c], gamma[c], beta[c]);
            for s in 0..spatial {
                let i = bn_idx(channels, spatial, b, c, s);
                y[i] = ga * (x[i] - m) * is + be;
            }
        }
    }
}

/// Backward through training-mode normalization (statistics were computed
/// from this same batch, so they carry gradient).
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_bwd_train<E: Elem>(
    x: &[E],
    gy: &[E],
    batch: usize,
    channels: usize,
    spatial: usize,
    mean: &[E],
    invstd: &[E],
    gamma: &[E],
    gx: &mut [E],
    ggamma: &mut [E],
    gbeta: &mut [E],
) {
    let n = E::from_f64((batch * spatial) as f64);
    for c in 0..channels {
        let (m, is) = (mean[c], invstd[c]);
        let mut sum_gy = E::ZERO;
        let mut sum_gy_xhat = E::ZERO;
        for b in 0..batch {
            for s in 0..spatial {
                let i = bn_idx(channels, spatial, b, c, s);
                let xhat = (x[i] - m) * is;
                sum_gy += gy[i];
                sum_gy_xhat += gy[i] * xhat;
            }
        }
        ggamma[c] += sum_gy_xhat;
        gbeta[c] += sum_gy;
        let scale = gamma[c] * is / n;
        for b in 0..batch {
            for s in 0..spatial {
                let i = bn_idx(channels, spatial, b, c, s);
                let xhat = (x[i] - m) * is;
                gx[i] += scale * (n * gy[i] - sum_gy - xhat * sum_gy_xhat);
            }
        }
    }
}

/// Backward through inference-mode normalization (running statistics are
/// constants).
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_bwd_infer<E: Elem>(
    x: &[E],
    gy: &[E],
    batch: usize,
    channels: usize,
    spatial: usize,
    mean: &[E],
    invstd: &[E],
    gamma: &[E],
    gx: &mut [E],
    ggamma: &mut [E],
    gbeta: &mut [E],
) {
    for c in 0..channels {
        let (m, is, ga) = (mean[c], invstd[c], gamma[c]);
        for b in 0..batch {
            for s in 0..spatial {
                let i = bn_idx(channels, spatial, b, c, s);
                let xhat = (x[i] - m) * is;
                ggamma[c] += gy[i] * xhat;
                gbeta[c] += gy[i];
                gx[i] += gy[i] * ga * is;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Activation, pooling
// ---------------------------------------------------------------------------

pub(crate) fn relu_fwd<E: Elem>(x: &[E], y: &mut [E]) {
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi = if xi > E::ZERO { xi } else { E::ZERO };
    }
}

pub(crate) fn relu_bwd<E: Elem>(x: &[E], gy: &[E], gx: &mut [E]) {
    for i in 0..x.len() {
        if x[i] > E::ZERO {
            gx[i] += gy[i];
        }
    }
}

/// Global average pool: [batch, C, H*W] -> [batch, C].
pub(crate) fn global_avg_pool_fwd<E: Elem>(
    x: &[E],
    batch: usize,
    channels: usize,
    spatial: usize,
    y: &mut [E],
) {
    let inv = E::ONE / E::from_f64(spatial as f64);
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * spatial;
            let mut s = E::ZERO;
            for i in 0..spatial {
                s += x[off + i];
            }
            y[b * channels + c] = s * inv;
        }
    }
}

pub(crate) fn global_avg_pool_bwd<E: Elem>(
    gy: &[E],
    batch: usize,
    channels: usize,
    spatial: usize,
    gx: &mut [E],
) {
    let inv = E::ONE / E::from_f64(spatial as f64);
    for b in 0..batch {
        for c in 0..channels {
            let g = gy[b * channels + c] * inv;
            let off = (b * channels + c) * spatial;
            for i in 0..spatial {
                gx[off + i] += g;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy (rows of [batch, classes])
// ---------------------------------------------------------------------------

/// Row-wise softmax of `x / temperature`, max-subtracted for stability.
pub(crate) fn softmax_rows<E: Elem>(x: &[E], batch: usize, classes: usize, temp: E, y: &mut [E]) {
    for b in 0..batch {
        let row = &x[b * classes..(b + 1) * classes];
        let out = &mut y[b * classes..(b + 1) * classes];
        let mut m = row[0] / temp;
        for &v in row.iter() {
            m = m.max_of(v / temp);
        }
        let mut sum = E::ZERO;
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            let e = (v / temp - m).exp();
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// Row-wise log-sum-exp of `x / temperature`.
pub(crate) fn logsumexp_rows<E: Elem>(x: &[E], batch: usize, classes: usize, temp: E) -> Vec<E> {
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = &x[b * classes..(b + 1) * classes];
        let mut m = row[0] / temp;
        for &v in row.iter() {
            m = m.max_of(v / temp);
        }
        let mut sum = E::ZERO;
        for &v in row.iter() {
            sum += (v / temp - m).exp();
        }
        out.push(m + sum.ln());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_passes_input_through() {
        // G=1, identity weights, no bias
        let x = [1.0f64, 2.0];
        let w = [1.0, 0.0, 0.0, 1.0];
        let mut y = [0.0; 2];
        grouped_linear_fwd(1, 1, 2, 2, &x, &w, None, &mut y);
        assert_eq!(y, x);
    }

    #[test]
    fn linear_two_groups_scale_independently() {
        // G=2, per-group 1x1 weights [[2]] and [[3]]
        let x = [1.0f64, 1.0];
        let w = [2.0, 3.0];
        let mut y = [0.0; 2];
        grouped_linear_fwd(1, 2, 1, 1, &x, &w, None, &mut y);
        assert_eq!(y, [2.0, 3.0]);
    }

    #[test]
    fn conv_all_ones_center_sums_nine() {
        // 3x3 ones kernel on 3x3 ones input, padding 1
        let dims = Conv2dDims {
            batch: 1,
            groups: 1,
            cin: 1,
            cout: 1,
            h: 3,
            w: 3,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            ho: 3,
            wo: 3,
        };
        let x = [1.0f64; 9];
        let k = [1.0f64; 9];
        let mut y = [0.0f64; 9];
        conv2d_fwd(&dims, &x, &k, None, &mut y);
        assert_eq!(y[4], 9.0);
        assert_eq!(y[0], 4.0);
        assert_eq!(y[1], 6.0);
    }

    #[test]
    fn conv_1x1_identity_kernel_keeps_input() {
        let dims = Conv2dDims {
            batch: 1,
            groups: 1,
            cin: 1,
            cout: 1,
            h: 2,
            w: 2,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
            ho: 2,
            wo: 2,
        };
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let k = [1.0f64];
        let mut y = [0.0f64; 4];
        conv2d_fwd(&dims, &x, &k, None, &mut y);
        assert_eq!(y, x);
    }

    #[test]
    fn replicate_single_group_duplicates_block() {
        let x = [1.0f64, 2.0];
        let mut y = [0.0f64; 4];
        replicate_groups_fwd(1, 1, 2, 2, &x, &mut y);
        assert_eq!(y, [1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn replicate_two_groups_keeps_children_contiguous() {
        let x = [1.0f64, 2.0];
        let mut y = [0.0f64; 4];
        replicate_groups_fwd(1, 2, 1, 2, &x, &mut y);
        assert_eq!(y, [1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn bn_stats_normalize_plus_minus_one() {
        let x = [-1.0f64, 1.0];
        let (mean, var) = bn_stats(&x, 2, 1, 1);
        assert_eq!(mean[0], 0.0);
        assert_eq!(var[0], 1.0);
        let invstd = bn_invstd(&var, 1e-5);
        let mut y = [0.0f64; 2];
        bn_apply(&x, 2, 1, 1, &mean, &invstd, &[1.0], &[0.0], &mut y);
        assert!((y[0] + 1.0).abs() < 1e-5);
        assert!((y[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn softmax_matches_closed_form() {
        let x = [0.0f64, 3.0f64.ln()];
        let mut y = [0.0f64; 2];
        softmax_rows(&x, 1, 2, 1.0, &mut y);
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = [1.0e4f64, -1.0e4, 0.0];
        let mut y = [0.0f64; 3];
        softmax_rows(&x, 1, 3, 1.0, &mut y);
        let sum: f64 = y.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(y.iter().all(|v| v.is_finite()));
    }
}
