//! Raw-slice kernels for same-padded stride-1 convolution (im2col + GEMM),
//! 2x2 pooling and nearest-neighbour upsampling.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};

use super::Tensor;

/// Upper bound on im2col buffer elements per GEMM call.
const CHUNK_ELEMS: usize = 1 << 21;

fn rows_per_chunk(ckk: usize, height: usize, width: usize) -> usize {
    (CHUNK_ELEMS / (ckk * width).max(1)).clamp(1, height)
}

/// Fills `cols` (shape `C*k*k x (r1-r0)*W`, row-major) from one sample.
fn im2col(x: &[f64], c_in: usize, h: usize, w: usize, k: usize, r0: usize, r1: usize, cols: &mut [f64]) {
    let pad = k / 2;
    let span = (r1 - r0) * w;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * span..(row + 1) * span];
                let w_lo = pad.saturating_sub(kx);
                let w_hi = (w + pad).saturating_sub(kx).min(w);
                for (ri, oh) in (r0..r1).enumerate() {
                    let seg = &mut dst[ri * w..(ri + 1) * w];
                    let sh = oh as isize + ky as isize - pad as isize;
                    if sh < 0 || sh >= h as isize || w_lo >= w_hi {
                        seg.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[sh as usize * w..(sh as usize + 1) * w];
                    seg[..w_lo].fill(0.0);
                    seg[w_hi..].fill(0.0);
                    let s0 = w_lo + kx - pad;
                    seg[w_lo..w_hi].copy_from_slice(&src_row[s0..s0 + (w_hi - w_lo)]);
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into one sample gradient.
fn col2im_add(cols: &[f64], c_in: usize, h: usize, w: usize, k: usize, r0: usize, r1: usize, dx: &mut [f64]) {
    let pad = k / 2;
    let span = (r1 - r0) * w;
    for c in 0..c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * span..(row + 1) * span];
                let w_lo = pad.saturating_sub(kx);
                let w_hi = (w + pad).saturating_sub(kx).min(w);
                if w_lo >= w_hi {
                    continue;
                }
                for (ri, oh) in (r0..r1).enumerate() {
                    let sh = oh as isize + ky as isize - pad as isize;
                    if sh < 0 || sh >= h as isize {
                        continue;
                    }
                    let seg = &src[ri * w + w_lo..ri * w + w_hi];
                    let s0 = w_lo + kx - pad;
                    let dst = &mut plane[sh as usize * w + s0..sh as usize * w + s0 + (w_hi - w_lo)];
                    for (d, s) in dst.iter_mut().zip(seg) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `weight` has shape `(out, in*k*k)`.
pub fn conv_forward(x: &Tensor, weight: &Array2<f64>, bias: &Array1<f64>, k: usize) -> Tensor {
    let (n, c_in, h, w) = x.dim();
    let c_out = weight.nrows();
    debug_assert_eq!(weight.ncols(), c_in * k * k);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Tensor::zeros((n, c_out, h, w));
    let ckk = c_in * k * k;
    let chunk = rows_per_chunk(ckk, h, w);
    let mut buf = vec![0.0; ckk * chunk * w];
    for s in 0..n {
        let xs = &xs[s * c_in * h * w..(s + 1) * c_in * h * w];
        let mut out_s = out.index_axis_mut(Axis(0), s);
        let mut out_s = out_s
            .view_mut()
            .into_shape_with_order((c_out, h * w))
            .expect("contiguous output");
        let mut r0 = 0;
        while r0 < h {
            let r1 = (r0 + chunk).min(h);
            let span = (r1 - r0) * w;
            let cols = &mut buf[..ckk * span];
            im2col(xs, c_in, h, w, k, r0, r1, cols);
            let cols = ArrayView2::from_shape((ckk, span), cols).expect("cols shape");
            let mut dst = out_s.slice_mut(ndarray::s![.., r0 * w..r1 * w]);
            general_mat_mul(1.0, weight, &cols, 0.0, &mut dst);
            r0 = r1;
        }
        for (mut row, &b) in out_s.outer_iter_mut().zip(bias.iter()) {
            row += b;
        }
    }
    out
}

/// Backward pass given the gradient w.r.t. the pre-activation output.
/// Accumulates into `dw`/`db` when given and returns the input gradient when
/// `need_dx` is set.
pub fn conv_backward(
    x: &Tensor,
    grad: &Tensor,
    weight: &Array2<f64>,
    k: usize,
    mut dw: Option<&mut Array2<f64>>,
    mut db: Option<&mut Array1<f64>>,
    need_dx: bool,
) -> Option<Tensor> {
    let (n, c_in, h, w) = x.dim();
    let c_out = weight.nrows();
    let ckk = c_in * k * k;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let grad = grad.as_standard_layout();
    let mut dx = need_dx.then(|| Tensor::zeros((n, c_in, h, w)));
    let chunk = rows_per_chunk(ckk, h, w);
    let mut buf = vec![0.0; ckk * chunk * w];
    let mut dcols_buf = vec![0.0; if need_dx { ckk * chunk * w } else { 0 }];
    let wt = weight.t();
    for s in 0..n {
        let g_s = grad.index_axis(Axis(0), s);
        let g_s = g_s.into_shape_with_order((c_out, h * w)).expect("contiguous grad");
        if let Some(db) = db.as_deref_mut() {
            *db += &g_s.sum_axis(Axis(1));
        }
        let xs = &xs[s * c_in * h * w..(s + 1) * c_in * h * w];
        let mut r0 = 0;
        while r0 < h {
            let r1 = (r0 + chunk).min(h);
            let span = (r1 - r0) * w;
            let g_chunk = g_s.slice(ndarray::s![.., r0 * w..r1 * w]);
            if let Some(dw) = dw.as_deref_mut() {
                let cols = &mut buf[..ckk * span];
                im2col(xs, c_in, h, w, k, r0, r1, cols);
                let cols = ArrayView2::from_shape((ckk, span), &*cols).expect("cols shape");
                general_mat_mul(1.0, &g_chunk, &cols.t(), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dcols = &mut dcols_buf[..ckk * span];
                {
                    let mut dview = ArrayViewMut2::from_shape((ckk, span), &mut *dcols).expect("dcols shape");
                    general_mat_mul(1.0, &wt, &g_chunk, 0.0, &mut dview);
                }
                let dx_s = dx.as_slice_mut().expect("fresh tensor");
                let dx_s = &mut dx_s[s * c_in * h * w..(s + 1) * c_in * h * w];
                col2im_add(dcols, c_in, h, w, k, r0, r1, dx_s);
            }
            r0 = r1;
        }
    }
    dx
}

pub fn max_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dim();
    Tensor::from_shape_fn((n, c, h / 2, w / 2), |(a, b, i, j)| {
        let (y, xx) = (2 * i, 2 * j);
        x[[a, b, y, xx]]
            .max(x[[a, b, y, xx + 1]])
            .max(x[[a, b, y + 1, xx]])
            .max(x[[a, b, y + 1, xx + 1]])
    })
}

/// Routes each window's gradient to its first maximal element.
pub fn max_pool2_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dim();
    let mut dx = Tensor::zeros((n, c, h, w));
    for a in 0..n {
        for b in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let mut best = (2 * i, 2 * j);
                    for (dy, dxx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = (2 * i + dy, 2 * j + dxx);
                        if x[[a, b, cand.0, cand.1]] > x[[a, b, best.0, best.1]] {
                            best = cand;
                        }
                    }
                    dx[[a, b, best.0, best.1]] += grad[[a, b, i, j]];
                }
            }
        }
    }
    dx
}

pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dim();
    Tensor::from_shape_fn((n, c, h / 2, w / 2), |(a, b, i, j)| {
        let (y, xx) = (2 * i, 2 * j);
        0.25 * (x[[a, b, y, xx]] + x[[a, b, y, xx + 1]] + x[[a, b, y + 1, xx]] + x[[a, b, y + 1, xx + 1]])
    })
}

pub fn avg_pool2_backward(grad: &Tensor) -> Tensor {
    let (n, c, h, w) = grad.dim();
    Tensor::from_shape_fn((n, c, h * 2, w * 2), |(a, b, i, j)| 0.25 * grad[[a, b, i / 2, j / 2]])
}

pub fn upsample2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dim();
    Tensor::from_shape_fn((n, c, h * 2, w * 2), |(a, b, i, j)| x[[a, b, i / 2, j / 2]])
}

pub fn upsample2_backward(grad: &Tensor) -> Tensor {
    let (n, c, h, w) = grad.dim();
    Tensor::from_shape_fn((n, c, h / 2, w / 2), |(a, b, i, j)| {
        let (y, xx) = (2 * i, 2 * j);
        grad[[a, b, y, xx]] + grad[[a, b, y, xx + 1]] + grad[[a, b, y + 1, xx]] + grad[[a, b, y + 1, xx + 1]]
    })
}
