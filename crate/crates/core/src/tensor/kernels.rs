//! Raw numeric kernels shared by the forward and backward passes.
//!
//! All kernels are plain functions over slices so the tape can reuse them in
//! both directions (a transposed convolution forward is a convolution
//! backward-input with the weight axes read as (Cin, Cout, kh, kw)).

use super::Scalar;

/// Geometry of one 2-D convolution: batch, channels, spatial dims, kernel,
/// stride and symmetric zero padding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }
}

fn ceil_div(a: i64, b: i64) -> i64 {
    (a + b - 1).div_euclid(b)
}

/// Valid output range `[lo, hi)` such that `o*stride + k - pad` stays inside
/// `[0, size)`.
fn valid_out_range(size: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = ceil_div(pad as i64 - k as i64, s).max(0);
    let hi = ((size as i64 - 1 + pad as i64 - k as i64).div_euclid(s) + 1).min(out as i64);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// y[n,k,oy,ox] = b[k] + sum_{c,ky,kx} x[n,c,oy*s+ky-p,ox*s+kx-p] * w[k,c,ky,kx]
pub(crate) fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], b: Option<&[S]>, g: &ConvGeom) -> Vec<S> {
    let mut y = vec![S::zero(); g.n * g.cout * g.ho * g.wo];
    if let Some(b) = b {
        for n in 0..g.n {
            for k in 0..g.cout {
                let base = (n * g.cout + k) * g.ho * g.wo;
                let bk = b[k];
                for v in &mut y[base..base + g.ho * g.wo] {
                    *v = bk;
                }
            }
        }
    }
    for n in 0..g.n {
        for k in 0..g.cout {
            let ybase = (n * g.cout + k) * g.ho * g.wo;
            for c in 0..g.cin {
                let xbase = (n * g.cin + c) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((k * g.cin + c) * g.kh + ky) * g.kw + kx];
                        let (ox_lo, ox_hi) = valid_out_range(g.w, g.wo, kx, g.stride, g.pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo * g.stride + kx - g.pad;
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
                            if iy < 0 || iy >= g.h as i64 {
                                continue;
                            }
                            let xrow = &x[xbase + iy as usize * g.w..xbase + (iy as usize + 1) * g.w];
                            let yrow = &mut y[ybase + oy * g.wo + ox_lo..ybase + oy * g.wo + ox_hi];
                            if g.stride == 1 {
                                for (yv, xv) in yrow.iter_mut().zip(&xrow[ix_lo..ix_lo + ox_hi - ox_lo]) {
                                    *yv = *yv + wv * *xv;
                                }
                            } else {
                                for (yv, xv) in yrow.iter_mut().zip(xrow[ix_lo..].iter().step_by(g.stride)) {
                                    *yv = *yv + wv * *xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// gx[n,c,iy,ix] += sum_{k,ky,kx} gy[n,k,oy,ox] * w[k,c,ky,kx]
pub(crate) fn conv2d_bwd_input<S: Scalar>(gy: &[S], w: &[S], g: &ConvGeom) -> Vec<S> {
    let mut gx = vec![S::zero(); g.n * g.cin * g.h * g.w];
    for n in 0..g.n {
        for k in 0..g.cout {
            let ybase = (n * g.cout + k) * g.ho * g.wo;
            for c in 0..g.cin {
                let xbase = (n * g.cin + c) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((k * g.cin + c) * g.kh + ky) * g.kw + kx];
                        let (ox_lo, ox_hi) = valid_out_range(g.w, g.wo, kx, g.stride, g.pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo * g.stride + kx - g.pad;
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
                            if iy < 0 || iy >= g.h as i64 {
                                continue;
                            }
                            let grow = &gy[ybase + oy * g.wo + ox_lo..ybase + oy * g.wo + ox_hi];
                            let xrow =
                                &mut gx[xbase + iy as usize * g.w..xbase + (iy as usize + 1) * g.w];
                            if g.stride == 1 {
                                for (gv, xv) in grow.iter().zip(&mut xrow[ix_lo..ix_lo + ox_hi - ox_lo]) {
                                    *xv = *xv + wv * *gv;
                                }
                            } else {
                                for (gv, xv) in
                                    grow.iter().zip(xrow[ix_lo..].iter_mut().step_by(g.stride))
                                {
                                    *xv = *xv + wv * *gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// gw[k,c,ky,kx] = sum_{n,oy,ox} gy[n,k,oy,ox] * x[n,c,oy*s+ky-p,ox*s+kx-p]
pub(crate) fn conv2d_bwd_weight<S: Scalar>(gy: &[S], x: &[S], g: &ConvGeom) -> Vec<S> {
    let mut gw = vec![S::zero(); g.cout * g.cin * g.kh * g.kw];
    for n in 0..g.n {
        for k in 0..g.cout {
            let ybase = (n * g.cout + k) * g.ho * g.wo;
            for c in 0..g.cin {
                let xbase = (n * g.cin + c) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let (ox_lo, ox_hi) = valid_out_range(g.w, g.wo, kx, g.stride, g.pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo * g.stride + kx - g.pad;
                        let mut acc = S::zero();
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
                            if iy < 0 || iy >= g.h as i64 {
                                continue;
                            }
                            let grow = &gy[ybase + oy * g.wo + ox_lo..ybase + oy * g.wo + ox_hi];
                            let xrow = &x[xbase + iy as usize * g.w..xbase + (iy as usize + 1) * g.w];
                            if g.stride == 1 {
                                for (gv, xv) in grow.iter().zip(&xrow[ix_lo..ix_lo + ox_hi - ox_lo]) {
                                    acc = acc + *gv * *xv;
                                }
                            } else {
                                for (gv, xv) in grow.iter().zip(xrow[ix_lo..].iter().step_by(g.stride)) {
                                    acc = acc + *gv * *xv;
                                }
                            }
                        }
                        let wi = ((k * g.cin + c) * g.kh + ky) * g.kw + kx;
                        gw[wi] = gw[wi] + acc;
                    }
                }
            }
        }
    }
    gw
}

/// gb[k] = sum_{n,oy,ox} gy[n,k,oy,ox]
pub(crate) fn conv2d_bwd_bias<S: Scalar>(gy: &[S], g: &ConvGeom) -> Vec<S> {
    let mut gb = vec![S::zero(); g.cout];
    for n in 0..g.n {
        for k in 0..g.cout {
            let base = (n * g.cout + k) * g.ho * g.wo;
            let mut acc = S::zero();
            for v in &gy[base..base + g.ho * g.wo] {
                acc = acc + *v;
            }
            gb[k] = gb[k] + acc;
        }
    }
    gb
}

/// y[n,o] = b[o] + sum_f x[n,f] * w[o,f]
pub(crate) fn linear_forward<S: Scalar>(
    x: &[S],
    w: &[S],
    b: &[S],
    n: usize,
    f: usize,
    o: usize,
) -> Vec<S> {
    let mut y = vec![S::zero(); n * o];
    for i in 0..n {
        let xrow = &x[i * f..(i + 1) * f];
        for j in 0..o {
            let wrow = &w[j * f..(j + 1) * f];
            let mut acc = b[j];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc = acc + *xv * *wv;
            }
            y[i * o + j] = acc;
        }
    }
    y
}

pub(crate) fn linear_bwd<S: Scalar>(
    gy: &[S],
    x: &[S],
    w: &[S],
    n: usize,
    f: usize,
    o: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut gx = vec![S::zero(); n * f];
    let mut gw = vec![S::zero(); o * f];
    let mut gb = vec![S::zero(); o];
    for i in 0..n {
        let xrow = &x[i * f..(i + 1) * f];
        let gxrow = &mut gx[i * f..(i + 1) * f];
        for j in 0..o {
            let gyv = gy[i * o + j];
            gb[j] = gb[j] + gyv;
            let wrow = &w[j * f..(j + 1) * f];
            let gwrow = &mut gw[j * f..(j + 1) * f];
            for k in 0..f {
                gxrow[k] = gxrow[k] + gyv * wrow[k];
                gwrow[k] = gwrow[k] + gyv * xrow[k];
            }
        }
    }
    (gx, gw, gb)
}

/// 2x2 non-overlapping max pool; returns pooled values and the flat index of
/// each window's argmax (first occurrence in row-major order on ties).
pub(crate) fn maxpool2_forward<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<S>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![S::zero(); n * c * ho * wo];
    let mut arg = vec![0u32; n * c * ho * wo];
    for img in 0..n * c {
        let base = img * h * w;
        let obase = img * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let i00 = base + (2 * oy) * w + 2 * ox;
                let idxs = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = idxs[0];
                let mut bv = x[idxs[0]];
                for &i in &idxs[1..] {
                    if x[i] > bv {
                        bv = x[i];
                        best = i;
                    }
                }
                y[obase + oy * wo + ox] = bv;
                arg[obase + oy * wo + ox] = best as u32;
            }
        }
    }
    (y, arg)
}
