//! Direct 2-D convolution kernels built on im2col and GEMM.
//!
//! All convolutions here are "valid" (no implicit padding); callers pad
//! explicitly. Transposed convolution supports the usual `padding` /
//! `output_padding` cropping semantics.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, ArrayViewMut3, Axis};

use crate::scalar::Scalar;

/// Unfold `x` ([C, H, W]) into a `[C*K*K, OH*OW]` patch matrix.
pub fn im2col<S: Scalar>(x: &ArrayView3<S>, k: usize, stride: usize) -> Array2<S> {
    let (c, h, w) = x.dim();
    assert!(h >= k && w >= k, "input {h}x{w} smaller than kernel {k}");
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let mut row = cols.row_mut(r);
                let row_s = row.as_slice_mut().expect("row is contiguous");
                for oi in 0..oh {
                    let si = oi * stride + ki;
                    let base = oi * ow;
                    if stride == 1 {
                        let src = x.slice(s![ci, si, kj..kj + ow]);
                        row_s[base..base + ow]
                            .copy_from_slice(src.as_slice().expect("lane is contiguous"));
                    } else {
                        for oj in 0..ow {
                            row_s[base + oj] = x[[ci, si, oj * stride + kj]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto `out` ([C, H, W]).
pub fn col2im_accumulate<S: Scalar>(
    cols: &Array2<S>,
    k: usize,
    stride: usize,
    out: &mut ArrayViewMut3<S>,
) {
    let (c, h, w) = out.dim();
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    assert_eq!(cols.dim(), (c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let row = cols.row(r);
                let row_s = row.as_slice().expect("row is contiguous");
                for oi in 0..oh {
                    let si = oi * stride + ki;
                    let base = oi * ow;
                    if stride == 1 {
                        let mut dst = out.slice_mut(s![ci, si, kj..kj + ow]);
                        let dst_s = dst.as_slice_mut().expect("lane is contiguous");
                        for (d, v) in dst_s.iter_mut().zip(&row_s[base..base + ow]) {
                            *d += *v;
                        }
                    } else {
                        for oj in 0..ow {
                            out[[ci, si, oj * stride + kj]] += row_s[base + oj];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<S: Scalar>(y: &mut Array4<S>, b: &Array1<S>) {
    for (ci, &bi) in b.iter().enumerate() {
        let mut lane = y.index_axis_mut(Axis(1), ci);
        lane += bi;
    }
}

/// Valid convolution: `x` [N, C, H, W] * `w` [OC, C, K, K] -> [N, OC, OH, OW].
pub fn conv2d_forward<S: Scalar>(
    x: &ArrayView4<S>,
    w: &ArrayView4<S>,
    b: Option<&Array1<S>>,
    stride: usize,
) -> Array4<S> {
    let (n, c, h, wd) = x.dim();
    let (oc, wc, k, k2) = w.dim();
    assert_eq!(c, wc, "channel mismatch: input {c}, kernel {wc}");
    assert_eq!(k, k2, "kernels are square");
    let oh = (h - k) / stride + 1;
    let ow = (wd - k) / stride + 1;
    let w_mat = w.to_shape((oc, wc * k * k)).expect("weights are contiguous");
    let mut y = Array4::zeros((n, oc, oh, ow));
    for ni in 0..n {
        let cols = im2col(&x.index_axis(Axis(0), ni), k, stride);
        let mut y_mat = y
            .index_axis_mut(Axis(0), ni)
            .into_shape_with_order((oc, oh * ow))
            .expect("output is contiguous");
        general_mat_mul(S::one(), &w_mat, &cols, S::zero(), &mut y_mat);
    }
    if let Some(b) = b {
        add_channel_bias(&mut y, b);
    }
    y
}

/// Gradients of [`conv2d_forward`]. Each output is computed only when its
/// flag is set, so frozen-parameter passes skip the corresponding GEMM.
pub fn conv2d_backward_masked<S: Scalar>(
    x: &ArrayView4<S>,
    w: &ArrayView4<S>,
    dy: &ArrayView4<S>,
    stride: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Array4<S>>, Option<Array4<S>>, Option<Array1<S>>) {
    let (n, c, h, wd) = x.dim();
    let (oc, _, k, _) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let w_mat = w.to_shape((oc, c * k * k)).expect("weights are contiguous");
    let mut dw_mat = need_dw.then(|| Array2::zeros((oc, c * k * k)));
    let mut dx = need_dx.then(|| Array4::zeros((n, c, h, wd)));
    for ni in 0..n {
        let dy_n = dy.index_axis(Axis(0), ni);
        let dy_mat = dy_n.to_shape((oc, oh * ow)).expect("gradient is contiguous");
        if let Some(dw_mat) = dw_mat.as_mut() {
            let cols = im2col(&x.index_axis(Axis(0), ni), k, stride);
            general_mat_mul(S::one(), &dy_mat, &cols.t(), S::one(), dw_mat);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols = Array2::zeros((c * k * k, oh * ow));
            general_mat_mul(S::one(), &w_mat.t(), &dy_mat, S::zero(), &mut dcols);
            col2im_accumulate(&dcols, k, stride, &mut dx.index_axis_mut(Axis(0), ni));
        }
    }
    let db = need_db.then(|| dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)));
    let dw = dw_mat.map(|m| {
        m.into_shape_with_order((oc, c, k, k))
            .expect("shape preserved")
    });
    (dx, dw, db)
}

/// Transposed convolution: `x` [N, IC, H, W] * `w` [IC, OC, K, K] ->
/// [N, OC, (H-1)*stride - 2*pad + K + out_pad, ...].
pub fn conv_transpose2d_forward<S: Scalar>(
    x: &ArrayView4<S>,
    w: &ArrayView4<S>,
    b: Option<&Array1<S>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Array4<S> {
    let (n, ic, h, wd) = x.dim();
    let (wic, oc, k, k2) = w.dim();
    assert_eq!(ic, wic, "channel mismatch: input {ic}, kernel {wic}");
    assert_eq!(k, k2, "kernels are square");
    assert!(out_pad < stride || out_pad == 0, "output padding exceeds stride");
    let full_h = (h - 1) * stride + k + out_pad;
    let full_w = (wd - 1) * stride + k + out_pad;
    let oh = full_h - 2 * pad;
    let ow = full_w - 2 * pad;
    let w_mat = w.to_shape((ic, oc * k * k)).expect("weights are contiguous");
    let mut y = Array4::zeros((n, oc, oh, ow));
    for ni in 0..n {
        let x_n = x.index_axis(Axis(0), ni);
        let x_mat = x_n.to_shape((ic, h * wd)).expect("input is contiguous");
        let mut cols = Array2::zeros((oc * k * k, h * wd));
        general_mat_mul(S::one(), &w_mat.t(), &x_mat, S::zero(), &mut cols);
        let mut full = Array3::zeros((oc, full_h, full_w));
        col2im_accumulate(&cols, k, stride, &mut full.view_mut());
        y.index_axis_mut(Axis(0), ni)
            .assign(&full.slice(s![.., pad..pad + oh, pad..pad + ow]));
    }
    if let Some(b) = b {
        add_channel_bias(&mut y, b);
    }
    y
}

/// Gradients of [`conv_transpose2d_forward`], gated per output like
/// [`conv2d_backward_masked`].
pub fn conv_transpose2d_backward_masked<S: Scalar>(
    x: &ArrayView4<S>,
    w: &ArrayView4<S>,
    dy: &ArrayView4<S>,
    stride: usize,
    pad: usize,
    out_pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Array4<S>>, Option<Array4<S>>, Option<Array1<S>>) {
    let (n, ic, h, wd) = x.dim();
    let (_, oc, k, _) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let full_h = (h - 1) * stride + k + out_pad;
    let full_w = (wd - 1) * stride + k + out_pad;
    let w_mat = w.to_shape((ic, oc * k * k)).expect("weights are contiguous");
    let mut dx = need_dx.then(|| Array4::zeros((n, ic, h, wd)));
    let mut dw_mat = need_dw.then(|| Array2::zeros((ic, oc * k * k)));
    for ni in 0..n {
        if dx.is_none() && dw_mat.is_none() {
            break;
        }
        let mut dfull = Array3::<S>::zeros((oc, full_h, full_w));
        dfull
            .slice_mut(s![.., pad..pad + oh, pad..pad + ow])
            .assign(&dy.index_axis(Axis(0), ni));
        let dcols = im2col(&dfull.view(), k, stride);
        if let Some(dx) = dx.as_mut() {
            let mut dx_mat = dx
                .index_axis_mut(Axis(0), ni)
                .into_shape_with_order((ic, h * wd))
                .expect("gradient is contiguous");
            general_mat_mul(S::one(), &w_mat, &dcols, S::zero(), &mut dx_mat);
        }
        if let Some(dw_mat) = dw_mat.as_mut() {
            let x_n = x.index_axis(Axis(0), ni);
            let x_mat = x_n.to_shape((ic, h * wd)).expect("input is contiguous");
            general_mat_mul(S::one(), &x_mat, &dcols.t(), S::one(), dw_mat);
        }
    }
    let db = need_db.then(|| dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)));
    let dw = dw_mat.map(|m| {
        m.into_shape_with_order((ic, oc, k, k))
            .expect("shape preserved")
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_array4(rng: &mut ChaCha20Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Reference convolution written as the direct quadruple loop.
    fn conv2d_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: Option<&Array1<f64>>,
        stride: usize,
    ) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (oc, _, k, _) = w.dim();
        let oh = (h - k) / stride + 1;
        let ow = (wd - k) / stride + 1;
        let mut y = Array4::zeros((n, oc, oh, ow));
        for ni in 0..n {
            for o in 0..oc {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[o]);
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    acc += x[[ni, ci, oi * stride + ki, oj * stride + kj]]
                                        * w[[o, ci, ki, kj]];
                                }
                            }
                        }
                        y[[ni, o, oi, oj]] = acc;
                    }
                }
            }
        }
        y
    }

    /// Reference transposed convolution via explicit scatter.
    fn conv_t2d_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Array4<f64> {
        let (n, ic, h, wd) = x.dim();
        let (_, oc, k, _) = w.dim();
        let oh = (h - 1) * stride + k + out_pad - 2 * pad;
        let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
        let mut y = Array4::zeros((n, oc, oh, ow));
        for ni in 0..n {
            for ci in 0..ic {
                for i in 0..h {
                    for j in 0..wd {
                        for o in 0..oc {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ti = (i * stride + ki) as isize - pad as isize;
                                    let tj = (j * stride + kj) as isize - pad as isize;
                                    if ti >= 0
                                        && tj >= 0
                                        && (ti as usize) < oh
                                        && (tj as usize) < ow
                                    {
                                        y[[ni, o, ti as usize, tj as usize]] +=
                                            x[[ni, ci, i, j]] * w[[ci, o, ki, kj]];
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

    #[test]
    fn conv2d_matches_naive_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for &(shape, k, stride) in &[
            ((2, 3, 8, 8), 3, 1),
            ((1, 4, 9, 9), 3, 2),
            ((2, 2, 10, 10), 4, 2),
            ((1, 3, 7, 7), 7, 1),
            ((1, 2, 8, 6), 4, 1),
        ] {
            let x = rand_array4(&mut rng, shape);
            let w = rand_array4(&mut rng, (5, shape.1, k, k));
            let b = Array1::from_shape_fn(5, |_| rng.gen_range(-1.0..1.0));
            let got = conv2d_forward(&x.view(), &w.view(), Some(&b), stride);
            let want = conv2d_naive(&x, &w, Some(&b), stride);
            let diff = (&got - &want).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            assert!(diff < 1e-12, "max deviation {diff}");
        }
    }

    #[test]
    fn conv_transpose2d_matches_naive_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        for &(shape, k, stride, pad, out_pad) in &[
            ((1, 3, 5, 5), 3, 2, 1, 1),
            ((2, 2, 6, 6), 3, 2, 1, 1),
            ((1, 4, 7, 7), 3, 1, 1, 0),
            ((1, 2, 4, 4), 4, 2, 1, 1),
        ] {
            let x = rand_array4(&mut rng, shape);
            let w = rand_array4(&mut rng, (shape.1, 4, k, k));
            let got = conv_transpose2d_forward(&x.view(), &w.view(), None, stride, pad, out_pad);
            let want = conv_t2d_naive(&x, &w, stride, pad, out_pad);
            let diff = (&got - &want).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            assert!(diff < 1e-12, "max deviation {diff}");
        }
    }

    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let x = rand_array4(&mut rng, (2, 3, 6, 6));
        let w = rand_array4(&mut rng, (4, 3, 3, 3));
        let b = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let stride = 1;
        // Loss: sum of outputs weighted by a fixed random cotangent.
        let y = conv2d_forward(&x.view(), &w.view(), Some(&b), stride);
        let g = rand_array4(&mut rng, y.dim());
        let (dx, dw, db) =
            conv2d_backward_masked(&x.view(), &w.view(), &g.view(), stride, true, true, true);
        let (dx, dw, db) = (dx.unwrap(), dw.unwrap(), db.unwrap());
        let loss = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| -> f64 {
            (&conv2d_forward(&x.view(), &w.view(), Some(b), stride) * &g).sum()
        };
        let h = 1e-6;
        for &(i, j, p, q) in &[(0, 0, 0, 0), (1, 2, 3, 4), (0, 1, 5, 2)] {
            let mut xp = x.clone();
            xp[[i, j, p, q]] += h;
            let mut xm = x.clone();
            xm[[i, j, p, q]] -= h;
            let num = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((num - dx[[i, j, p, q]]).abs() < 1e-6, "dx mismatch");
        }
        for &(o, c, p, q) in &[(0, 0, 0, 0), (3, 2, 1, 2)] {
            let mut wp = w.clone();
            wp[[o, c, p, q]] += h;
            let mut wm = w.clone();
            wm[[o, c, p, q]] -= h;
            let num = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((num - dw[[o, c, p, q]]).abs() < 1e-5, "dw mismatch");
        }
        for o in 0..4 {
            let mut bp = b.clone();
            bp[o] += h;
            let mut bm = b.clone();
            bm[o] -= h;
            let num = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((num - db[o]).abs() < 1e-5, "db mismatch");
        }
    }

    #[test]
    fn conv_transpose2d_backward_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let x = rand_array4(&mut rng, (1, 3, 5, 5));
        let w = rand_array4(&mut rng, (3, 2, 3, 3));
        let (stride, pad, out_pad) = (2, 1, 1);
        let y = conv_transpose2d_forward(&x.view(), &w.view(), None, stride, pad, out_pad);
        let g = rand_array4(&mut rng, y.dim());
        let (dx, dw, _db) = conv_transpose2d_backward_masked(
            &x.view(),
            &w.view(),
            &g.view(),
            stride,
            pad,
            out_pad,
            true,
            true,
            false,
        );
        let (dx, dw) = (dx.unwrap(), dw.unwrap());
        let loss = |x: &Array4<f64>, w: &Array4<f64>| -> f64 {
            (&conv_transpose2d_forward(&x.view(), &w.view(), None, stride, pad, out_pad) * &g)
                .sum()
        };
        let h = 1e-6;
        for &(i, j, p, q) in &[(0, 0, 0, 0), (0, 2, 4, 4), (0, 1, 2, 3)] {
            let mut xp = x.clone();
            xp[[i, j, p, q]] += h;
            let mut xm = x.clone();
            xm[[i, j, p, q]] -= h;
            let num = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((num - dx[[i, j, p, q]]).abs() < 1e-6, "dx mismatch");
        }
        for &(c, o, p, q) in &[(0, 0, 0, 0), (2, 1, 2, 2), (1, 0, 1, 2)] {
            let mut wp = w.clone();
            wp[[c, o, p, q]] += h;
            let mut wm = w.clone();
            wm[[c, o, p, q]] -= h;
            let num = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((num - dw[[c, o, p, q]]).abs() < 1e-5, "dw mismatch");
        }
    }
}
