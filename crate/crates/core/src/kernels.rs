//! Raw forward/backward kernels on channels-last buffers.
//!
//! These are the loops behind the tape operations in [`crate::autograd`].
//! Shapes are validated by the caller.

use crate::tensor::Scalar;

/// Spatial padding convention of [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Pad by `k / 2`; stride 1 preserves size, stride 2 gives `ceil(n / 2)`.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_y: usize,
    pub pad_x: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn conv(
        (h, w, cin): (usize, usize, usize),
        (kh, kw, cout): (usize, usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Option<Self> {
        let (pad_y, pad_x) = match padding {
            Padding::Same => (kh / 2, kw / 2),
            Padding::Valid => (0, 0),
        };
        if h + 2 * pad_y < kh || w + 2 * pad_x < kw || stride == 0 {
            return None;
        }
        let oh = (h + 2 * pad_y - kh) / stride + 1;
        let ow = (w + 2 * pad_x - kw) / stride + 1;
        Some(Self {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_y,
            pad_x,
            oh,
            ow,
        })
    }

    /// Transposed convolution producing `stride * h` by `stride * w`.
    pub fn deconv(
        (h, w, cin): (usize, usize, usize),
        (kh, kw, cout): (usize, usize, usize),
        stride: usize,
    ) -> Self {
        Self {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad_y: (kh - 1) / 2,
            pad_x: (kw - 1) / 2,
            oh: stride * h,
            ow: stride * w,
        }
    }

    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + k).checked_sub(pad)?;
        (i < n).then_some(i)
    }

    /// Multiply-accumulates of one forward evaluation.
    pub fn macs(&self) -> u64 {
        (self.oh * self.ow * self.kh * self.kw * self.cin * self.cout) as u64
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |s, (&a, &b)| s + a * b)
}

/// Kernel layout is `kh x kw x cin x cout`.
pub fn conv2d<T: Scalar>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let ConvGeom {
        w,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
        ..
    } = *g;
    let mut out = vec![T::zero(); oh * ow * cout];
    for oy in 0..oh {
        for ky in 0..kh {
            let Some(iy) = g.src(oy, ky, g.pad_y, g.h) else {
                continue;
            };
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * cout..][..cout];
                for kx in 0..kw {
                    let Some(ix) = g.src(ox, kx, g.pad_x, w) else {
                        continue;
                    };
                    let xin = &x[(iy * w + ix) * cin..][..cin];
                    let wk = &k[(ky * kw + kx) * cin * cout..][..cin * cout];
                    if cout == 1 {
                        o[0] = o[0] + dot(xin, wk);
                    } else {
                        for (ci, &xv) in xin.iter().enumerate() {
                            axpy(xv, &wk[ci * cout..][..cout], o);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to the input and the kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    gout: &[T],
    g: &ConvGeom,
    gx: Option<&mut [T]>,
    gk: Option<&mut [T]>,
) {
    let ConvGeom {
        w,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
        ..
    } = *g;
    if let Some(gx) = gx {
        for oy in 0..oh {
            for ky in 0..kh {
                let Some(iy) = g.src(oy, ky, g.pad_y, g.h) else {
                    continue;
                };
                for ox in 0..ow {
                    let go = &gout[(oy * ow + ox) * cout..][..cout];
                    for kx in 0..kw {
                        let Some(ix) = g.src(ox, kx, g.pad_x, w) else {
                            continue;
                        };
                        let gxi = &mut gx[(iy * w + ix) * cin..][..cin];
                        let wk = &k[(ky * kw + kx) * cin * cout..][..cin * cout];
                        for (ci, gv) in gxi.iter_mut().enumerate() {
                            *gv = *gv + dot(go, &wk[ci * cout..][..cout]);
                        }
                    }
                }
            }
        }
    }
    if let Some(gk) = gk {
        for oy in 0..oh {
            for ky in 0..kh {
                let Some(iy) = g.src(oy, ky, g.pad_y, g.h) else {
                    continue;
                };
                for ox in 0..ow {
                    let go = &gout[(oy * ow + ox) * cout..][..cout];
                    for kx in 0..kw {
                        let Some(ix) = g.src(ox, kx, g.pad_x, w) else {
                            continue;
                        };
                        let xin = &x[(iy * w + ix) * cin..][..cin];
                        let gw = &mut gk[(ky * kw + kx) * cin * cout..][..cin * cout];
                        for (ci, &xv) in xin.iter().enumerate() {
                            axpy(xv, go, &mut gw[ci * cout..][..cout]);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn deconv_dst(i: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
    let o = (i * stride + k).checked_sub(pad)?;
    (o < n).then_some(o)
}

/// Transposed convolution: input pixel `(i, j)` scatters its kernel
/// footprint onto output `(stride*i + ky - pad, stride*j + kx - pad)`.
pub fn deconv2d<T: Scalar>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let ConvGeom {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        stride,
        oh,
        ow,
        ..
    } = *g;
    let mut out = vec![T::zero(); oh * ow * cout];
    for i in 0..h {
        for j in 0..w {
            let xin = &x[(i * w + j) * cin..][..cin];
            for ky in 0..kh {
                let Some(oy) = deconv_dst(i, ky, stride, g.pad_y, oh) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ox) = deconv_dst(j, kx, stride, g.pad_x, ow) else {
                        continue;
                    };
                    let o = &mut out[(oy * ow + ox) * cout..][..cout];
                    let wk = &k[(ky * kw + kx) * cin * cout..][..cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        axpy(xv, &wk[ci * cout..][..cout], o);
                    }
                }
            }
        }
    }
    out
}

pub fn deconv2d_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    gout: &[T],
    g: &ConvGeom,
    mut gx: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
) {
    let ConvGeom {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        stride,
        oh,
        ow,
        ..
    } = *g;
    for i in 0..h {
        for j in 0..w {
            let xin = &x[(i * w + j) * cin..][..cin];
            for ky in 0..kh {
                let Some(oy) = deconv_dst(i, ky, stride, g.pad_y, oh) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ox) = deconv_dst(j, kx, stride, g.pad_x, ow) else {
                        continue;
                    };
                    let go = &gout[(oy * ow + ox) * cout..][..cout];
                    let off = (ky * kw + kx) * cin * cout;
                    if let Some(gx) = gx.as_deref_mut() {
                        let wk = &k[off..][..cin * cout];
                        let gxi = &mut gx[(i * w + j) * cin..][..cin];
                        for (ci, gv) in gxi.iter_mut().enumerate() {
                            *gv = *gv + dot(go, &wk[ci * cout..][..cout]);
                        }
                    }
                    if let Some(gk) = gk.as_deref_mut() {
                        let gw = &mut gk[off..][..cin * cout];
                        for (ci, &xv) in xin.iter().enumerate() {
                            axpy(xv, go, &mut gw[ci * cout..][..cout]);
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise `kh x kw` same-padded convolution; kernel layout `kh x kw x c`.
pub fn depthwise<T: Scalar>(
    x: &[T],
    k: &[T],
    (h, w, c): (usize, usize, usize),
    (kh, kw): (usize, usize),
) -> Vec<T> {
    let (py, px) = (kh / 2, kw / 2);
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        for ky in 0..kh {
            let Some(iy) = (y + ky).checked_sub(py).filter(|&v| v < h) else {
                continue;
            };
            for xx in 0..w {
                let o = &mut out[(y * w + xx) * c..][..c];
                for kx in 0..kw {
                    let Some(ix) = (xx + kx).checked_sub(px).filter(|&v| v < w) else {
                        continue;
                    };
                    let xin = &x[(iy * w + ix) * c..][..c];
                    let wk = &k[(ky * kw + kx) * c..][..c];
                    for ((ov, &xv), &wv) in o.iter_mut().zip(xin).zip(wk) {
                        *ov = *ov + xv * wv;
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    gout: &[T],
    (h, w, c): (usize, usize, usize),
    (kh, kw): (usize, usize),
    mut gx: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
) {
    let (py, px) = (kh / 2, kw / 2);
    for y in 0..h {
        for ky in 0..kh {
            let Some(iy) = (y + ky).checked_sub(py).filter(|&v| v < h) else {
                continue;
            };
            for xx in 0..w {
                let go = &gout[(y * w + xx) * c..][..c];
                for kx in 0..kw {
                    let Some(ix) = (xx + kx).checked_sub(px).filter(|&v| v < w) else {
                        continue;
                    };
                    let off = (ky * kw + kx) * c;
                    if let Some(gx) = gx.as_deref_mut() {
                        let gxi = &mut gx[(iy * w + ix) * c..][..c];
                        for ((gv, &g), &wv) in gxi.iter_mut().zip(go).zip(&k[off..][..c]) {
                            *gv = *gv + g * wv;
                        }
                    }
                    if let Some(gk) = gk.as_deref_mut() {
                        let xin = &x[(iy * w + ix) * c..][..c];
                        for ((gv, &g), &xv) in gk[off..][..c].iter_mut().zip(go).zip(xin) {
                            *gv = *gv + g * xv;
                        }
                    }
                }
            }
        }
    }
}

/// `C = A B` for row-major `A: m x k`, `B: k x n`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..][..n];
        for (p, &av) in a[i * k..][..k].iter().enumerate() {
            axpy(av, &b[p * n..][..n], row);
        }
    }
    c
}

/// `C += A^T B` for `A: k x m`, `B: k x n`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..][..n];
        for (i, &av) in a[p * m..][..m].iter().enumerate() {
            axpy(av, brow, &mut c[i * n..][..n]);
        }
    }
}

/// `C += A B^T` for `A: m x k`, `B: n x k`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        for j in 0..n {
            c[i * n + j] = c[i * n + j] + dot(arow, &b[j * k..][..k]);
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

/// Scaled dot-product attention for one head.
///
/// Returns the output (`n x dv`) and, when `keep_probs` is set, the
/// row-stochastic attention matrix (`n x n`). Without it only one row of
/// scores is alive at a time.
pub fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    dv: usize,
    scale: T,
    keep_probs: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let mut out = vec![T::zero(); n * dv];
    let mut probs = keep_probs.then(|| vec![T::zero(); n * n]);
    let mut scratch = vec![T::zero(); n];
    for i in 0..n {
        let qi = &q[i * d..][..d];
        let row: &mut [T] = match probs.as_mut() {
            Some(p) => &mut p[i * n..][..n],
            None => &mut scratch,
        };
        for (j, s) in row.iter_mut().enumerate() {
            *s = dot(qi, &k[j * d..][..d]) * scale;
        }
        softmax_in_place(row);
        let o = &mut out[i * dv..][..dv];
        for (j, &p) in row.iter().enumerate() {
            axpy(p, &v[j * dv..][..dv], o);
        }
    }
    (out, probs)
}

/// Backward of [`attention`] given the stored probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gout: &[T],
    n: usize,
    d: usize,
    dv: usize,
    scale: T,
    gq: Option<&mut [T]>,
    gk: Option<&mut [T]>,
    gv: Option<&mut [T]>,
) {
    if let Some(gv) = gv {
        // dV = P^T dO
        matmul_tn_acc(probs, gout, n, n, dv, gv);
    }
    if gq.is_none() && gk.is_none() {
        return;
    }
    // dP = dO V^T, dS = P * (dP - rowsum(dP * P)) * scale
    let mut ds = vec![T::zero(); n * n];
    matmul_nt_acc(gout, v, n, dv, n, &mut ds);
    for i in 0..n {
        let p = &probs[i * n..][..n];
        let r = &mut ds[i * n..][..n];
        let c = dot(p, r);
        for (rv, &pv) in r.iter_mut().zip(p) {
            *rv = pv * (*rv - c) * scale;
        }
    }
    if let Some(gq) = gq {
        // dQ = dS K
        for i in 0..n {
            let row = &mut gq[i * d..][..d];
            for (j, &s) in ds[i * n..][..n].iter().enumerate() {
                axpy(s, &k[j * d..][..d], row);
            }
        }
    }
    if let Some(gk) = gk {
        // dK = dS^T Q
        matmul_tn_acc(&ds, q, n, n, d, gk);
    }
}

/// Layer normalization over the last dimension. Returns output, normalized
/// values and per-row reciprocal standard deviations.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    c: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let inv_c = T::one() / T::of(c as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * c..][..c];
        let mean = xr.iter().copied().sum::<T>() * inv_c;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..c {
            let n = (xr[i] - mean) * rs;
            xhat[r * c + i] = n;
            out[r * c + i] = n * gain[i] + bias[i];
        }
    }
    (out, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    gout: &[T],
    c: usize,
    gx: Option<&mut [T]>,
    gg: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let rows = xhat.len() / c;
    if let Some(gg) = gg {
        for r in 0..rows {
            for i in 0..c {
                gg[i] = gg[i] + gout[r * c + i] * xhat[r * c + i];
            }
        }
    }
    if let Some(gb) = gb {
        for r in 0..rows {
            for i in 0..c {
                gb[i] = gb[i] + gout[r * c + i];
            }
        }
    }
    if let Some(gx) = gx {
        let inv_c = T::one() / T::of(c as f64);
        for r in 0..rows {
            let xh = &xhat[r * c..][..c];
            let go = &gout[r * c..][..c];
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for i in 0..c {
                let gxh = go[i] * gain[i];
                m1 = m1 + gxh;
                m2 = m2 + gxh * xh[i];
            }
            m1 = m1 * inv_c;
            m2 = m2 * inv_c;
            for i in 0..c {
                let gxh = go[i] * gain[i];
                gx[r * c + i] = gx[r * c + i] + rstd[r] * (gxh - m1 - xh[i] * m2);
            }
        }
    }
}
