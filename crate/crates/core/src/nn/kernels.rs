//! Forward kernels behind the graph operations. All convolutions are
//! stride 1 with "same" zero padding of `k / 2`.

use super::tensor::Tensor;

/// Row-major matrix view: `rows x cols` with optional transposition.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    trans: bool,
}

impl Mat<'_> {
    /// Shape after the optional transpose.
    fn dims(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// (row stride, column stride) of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a @ b + beta * c` for a row-major `c`.
fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    let (m, k) = a.dims();
    let (kb, n) = b.dims();
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!(c.len(), m * n);
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every index reachable through the
    // given dimensions and strides lies inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one `[C, H, W]` image into `[C * k * k, H * W]` patches.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    col.fill(0.0);
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            let dy = ki as isize - pad;
            let (i_lo, i_hi) = valid_range(h, dy);
            for kj in 0..k {
                let dx = kj as isize - pad;
                let (j_lo, j_hi) = valid_range(w, dx);
                let row = ((ci * k + ki) * k + kj) * hw;
                for i in i_lo..i_hi {
                    let s0 = ((i as isize + dy) * w as isize + j_lo as isize + dx) as usize;
                    col[row + i * w + j_lo..row + i * w + j_hi].copy_from_slice(&src[s0..s0 + (j_hi - j_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patches back into `[C, H, W]`.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            let dy = ki as isize - pad;
            let (i_lo, i_hi) = valid_range(h, dy);
            for kj in 0..k {
                let dx = kj as isize - pad;
                let (j_lo, j_hi) = valid_range(w, dx);
                let row = ((ci * k + ki) * k + kj) * hw;
                for i in i_lo..i_hi {
                    let d0 = ((i as isize + dy) * w as isize + j_lo as isize + dx) as usize;
                    let src = &col[row + i * w + j_lo..row + i * w + j_hi];
                    for (d, s) in dst[d0..d0 + src.len()].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `y[n,o] = sum_c w[o,c] * x[n,c]` as a 2-D cross-correlation.
pub fn conv2d(x: &Tensor, w: &Tensor) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, k, k2) = w.dims4();
    assert_eq!(c, wc, "conv2d channel mismatch");
    assert_eq!(k, k2);
    let hw = h * wd;
    let ckk = c * k * k;
    let mut out = vec![0.0; n * o * hw];
    let mut col = vec![0.0; if k == 1 { 0 } else { ckk * hw }];
    let wm = Mat { data: w.data(), rows: o, cols: ckk, trans: false };
    for ni in 0..n {
        let xs = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        let patches = if k == 1 {
            xs
        } else {
            im2col(xs, c, h, wd, k, &mut col);
            &col
        };
        let pm = Mat { data: patches, rows: ckk, cols: hw, trans: false };
        gemm(wm, pm, 0.0, &mut out[ni * o * hw..(ni + 1) * o * hw]);
    }
    Tensor::new(&[n, o, h, wd], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_dx(gy: &Tensor, w: &Tensor, x_shape: &[usize]) -> Tensor {
    let (n, o, h, wd) = gy.dims4();
    let (wo, c, k, _) = w.dims4();
    assert_eq!(o, wo);
    assert_eq!(x_shape, [n, c, h, wd]);
    let hw = h * wd;
    let ckk = c * k * k;
    let mut out = vec![0.0; n * c * hw];
    let mut col = vec![0.0; ckk * hw];
    let wm = Mat { data: w.data(), rows: o, cols: ckk, trans: true };
    for ni in 0..n {
        let gm = Mat { data: &gy.data()[ni * o * hw..(ni + 1) * o * hw], rows: o, cols: hw, trans: false };
        let dst = &mut out[ni * c * hw..(ni + 1) * c * hw];
        if k == 1 {
            gemm(wm, gm, 0.0, dst);
        } else {
            gemm(wm, gm, 0.0, &mut col);
            col2im(&col, c, h, wd, k, dst);
        }
    }
    Tensor::new(x_shape, out)
}

/// Adjoint of [`conv2d`] with respect to its weights.
pub fn conv2d_dw(x: &Tensor, gy: &Tensor, w_shape: &[usize]) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (gn, o, gh, gw) = gy.dims4();
    assert_eq!((n, h, wd), (gn, gh, gw));
    let k = w_shape[2];
    assert_eq!(w_shape, [o, c, k, k]);
    let hw = h * wd;
    let ckk = c * k * k;
    let mut out = vec![0.0; o * ckk];
    let mut col = vec![0.0; if k == 1 { 0 } else { ckk * hw }];
    for ni in 0..n {
        let xs = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        let patches = if k == 1 {
            xs
        } else {
            im2col(xs, c, h, wd, k, &mut col);
            &col
        };
        let gm = Mat { data: &gy.data()[ni * o * hw..(ni + 1) * o * hw], rows: o, cols: hw, trans: false };
        let pm = Mat { data: patches, rows: ckk, cols: hw, trans: true };
        gemm(gm, pm, 1.0, &mut out);
    }
    Tensor::new(w_shape, out)
}

/// Output indices `i` in `0..len` for which `i + offset` is also in range.
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// `op(a) @ op(b)` where `op` optionally transposes a 2-D operand.
pub fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Tensor {
    assert_eq!(a.shape().len(), 2);
    assert_eq!(b.shape().len(), 2);
    let am = Mat { data: a.data(), rows: a.shape()[0], cols: a.shape()[1], trans: trans_a };
    let bm = Mat { data: b.data(), rows: b.shape()[0], cols: b.shape()[1], trans: trans_b };
    let (m, _) = am.dims();
    let (_, n) = bm.dims();
    let mut out = vec![0.0; m * n];
    gemm(am, bm, 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c2 = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = 0.25 * (a + b + c2 + d);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h * 2, w * 2);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Walk every output element of `out_shape`, yielding (output index, source
/// index) pairs where source dims of size 1 are broadcast.
fn broadcast_walk(src_shape: &[usize], out_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    assert_eq!(src_shape.len(), out_shape.len(), "broadcast needs equal rank");
    for (s, o) in src_shape.iter().zip(out_shape) {
        assert!(*s == *o || *s == 1, "cannot broadcast {src_shape:?} to {out_shape:?}");
    }
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let src_strides: Vec<usize> = strides(src_shape)
        .into_iter()
        .zip(src_shape)
        .map(|(st, &d)| if d == 1 { 0 } else { st })
        .collect();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for out in 0..total {
        f(out, src);
        // odometer increment
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub fn expand(x: &Tensor, shape: &[usize]) -> Tensor {
    if x.shape() == shape {
        return x.clone();
    }
    let xd = x.data();
    let mut out = vec![0.0; shape.iter().product()];
    broadcast_walk(x.shape(), shape, |o, s| out[o] = xd[s]);
    Tensor::new(shape, out)
}

/// Sum over broadcast dimensions so the result has `shape`.
pub fn sum_to(x: &Tensor, shape: &[usize]) -> Tensor {
    if x.shape() == shape {
        return x.clone();
    }
    let xd = x.data();
    let mut out = vec![0.0; shape.iter().product()];
    broadcast_walk(shape, x.shape(), |o, s| out[s] += xd[o]);
    Tensor::new(shape, out)
}

pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let (n, _, h, w) = parts[0].dims4();
    let hw = h * w;
    let total_c: usize = parts.iter().map(|p| p.dims4().1).sum();
    let mut out = Vec::with_capacity(n * total_c * hw);
    for ni in 0..n {
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat shape mismatch");
            out.extend_from_slice(&p.data()[ni * pc * hw..(ni + 1) * pc * hw]);
        }
    }
    Tensor::new(&[n, total_c, h, w], out)
}

pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(start + len <= c);
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for ni in 0..n {
        out.extend_from_slice(&x.data()[(ni * c + start) * hw..(ni * c + start + len) * hw]);
    }
    Tensor::new(&[n, len, h, w], out)
}

/// Embed `x` at channel offset `start` of a zero tensor with `total` channels.
pub fn pad_channels(x: &Tensor, start: usize, total: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(start + c <= total);
    let hw = h * w;
    let mut out = vec![0.0; n * total * hw];
    for ni in 0..n {
        out[(ni * total + start) * hw..(ni * total + start + c) * hw]
            .copy_from_slice(&x.data()[ni * c * hw..(ni + 1) * c * hw]);
    }
    Tensor::new(&[n, total, h, w], out)
}
