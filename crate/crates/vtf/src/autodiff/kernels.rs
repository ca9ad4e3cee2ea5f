//! Dense numeric kernels behind the tape ops: im2col/col2im based
//! convolutions, transposed convolutions, fixed-kernel anti-alias blur with
//! reflect padding, and instance-norm statistics.
//!
//! Convolution and its transpose share one im2col/col2im pair: the "grid" is
//! the set of kernel placements (the conv output plane; the conv-transpose
//! *input* plane) and the "image" is the plane the kernel reads from or
//! scatters into. All loops run over standard-layout slices.

use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView4};

/// Zero padding applied to an image plane, possibly asymmetric.
///
/// Stride-1 4×4 convolutions use `(top, bottom, left, right) = (1, 2, 1, 2)`
/// so output dims equal input dims exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad {
    pub const fn symmetric(p: usize) -> Self {
        Pad {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Same-padding for a `k×k` stride-1 kernel: `(k-1)/2` before, `k/2`
    /// after, so output size equals input size for any `k`.
    pub const fn same(k: usize) -> Self {
        Pad {
            top: (k - 1) / 2,
            bottom: k / 2,
            left: (k - 1) / 2,
            right: k / 2,
        }
    }
}

/// Conv output size along one axis.
pub fn conv_out(len: usize, k: usize, stride: usize, before: usize, after: usize) -> usize {
    (len + before + after - k) / stride + 1
}

/// Transposed-conv output size along one axis (symmetric padding `p`).
pub fn convt_out(len: usize, k: usize, stride: usize, p: usize) -> usize {
    (len - 1) * stride + k - 2 * p
}

/// Gathers kernel windows of `img` into a column matrix.
///
/// `img` is `[N, C, H, W]`; the grid is `grid_h × grid_w` kernel placements
/// (placement `(gy, gx)` reads `img[.., gy*stride + i - pad.top, gx*stride +
/// j - pad.left]`, zeros outside). Output is
/// `[C*KH*KW, N*grid_h*grid_w]` with columns ordered `n`-major.
pub fn im2col<S: Scalar>(
    img: &ArrayView4<'_, S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad,
    grid_h: usize,
    grid_w: usize,
) -> Array2<S> {
    let (n, c, h, w) = img.dim();
    let owned;
    let xs: &[S] = match img.as_slice() {
        Some(s) => s,
        None => {
            // `to_owned` preserves the source layout; force row-major so the
            // linear indexing below stays valid (e.g. channel-concat outputs).
            owned = img.as_standard_layout().into_owned();
            owned.as_slice().unwrap()
        }
    };
    let cols = n * grid_h * grid_w;
    let mut col = Array2::<S>::zeros((c * kh * kw, cols));
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row_base = ((ci * kh + i) * kw + j) * cols;
                for ni in 0..n {
                    for gy in 0..grid_h {
                        let y = (gy * stride + i) as isize - pad.top as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let img_row = (((ni * c + ci) * h) + y as usize) * w;
                        let out_base = row_base + (ni * grid_h + gy) * grid_w;
                        for gx in 0..grid_w {
                            let x = (gx * stride + j) as isize - pad.left as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            cs[out_base + gx] = xs[img_row + x as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back into an image of
/// shape `[N, C, img_h, img_w]`.
pub fn col2im<S: Scalar>(
    col: &Array2<S>,
    n: usize,
    c: usize,
    img_h: usize,
    img_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad,
    grid_h: usize,
    grid_w: usize,
) -> Array4<S> {
    let mut img = Array4::<S>::zeros((n, c, img_h, img_w));
    let xs = img.as_slice_mut().unwrap();
    let cols = n * grid_h * grid_w;
    debug_assert_eq!(col.dim(), (c * kh * kw, cols));
    let cslice = col.as_slice().expect("col must be standard layout");
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row_base = ((ci * kh + i) * kw + j) * cols;
                for ni in 0..n {
                    for gy in 0..grid_h {
                        let y = (gy * stride + i) as isize - pad.top as isize;
                        if y < 0 || y >= img_h as isize {
                            continue;
                        }
                        let img_row = (((ni * c + ci) * img_h) + y as usize) * img_w;
                        let in_base = row_base + (ni * grid_h + gy) * grid_w;
                        for gx in 0..grid_w {
                            let x = (gx * stride + j) as isize - pad.left as isize;
                            if x < 0 || x >= img_w as isize {
                                continue;
                            }
                            xs[img_row + x as usize] += cslice[in_base + gx];
                        }
                    }
                }
            }
        }
    }
    img
}

/// `[N, C, H, W] → [C, N*H*W]` gather (used to batch GEMMs over samples).
pub fn to_channel_major<S: Scalar>(x: &ArrayView4<'_, S>) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let mut out = Array2::<S>::zeros((c, n * hw));
    {
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let plane = x.index_axis(ndarray::Axis(0), ni);
                let plane = plane.index_axis(ndarray::Axis(0), ci);
                let dst = &mut os[ci * (n * hw) + ni * hw..][..hw];
                for (d, sv) in dst.iter_mut().zip(plane.iter()) {
                    *d = *sv;
                }
            }
        }
    }
    out
}

/// Inverse of [`to_channel_major`].
pub fn from_channel_major<S: Scalar>(x: &Array2<S>, n: usize, h: usize, w: usize) -> Array4<S> {
    let (c, cols) = x.dim();
    let hw = h * w;
    debug_assert_eq!(cols, n * hw);
    let xs = x.as_slice().unwrap();
    let mut out = Array4::<S>::zeros((n, c, h, w));
    {
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let src = &xs[ci * cols + ni * hw..][..hw];
                let dst = &mut os[(ni * c + ci) * hw..][..hw];
                dst.copy_from_slice(src);
            }
        }
    }
    out
}

/// Forward convolution. `x: [N, Cin, H, W]`, `w: [Cout, Cin, KH, KW]`,
/// `b: [Cout]` → `[N, Cout, OH, OW]`.
pub fn conv2d_forward<S: Scalar>(
    x: &ArrayView4<'_, S>,
    w: &ArrayView4<'_, S>,
    b: &ArrayView1<'_, S>,
    stride: usize,
    pad: Pad,
) -> Array4<S> {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    debug_assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let oh = conv_out(h, kh, stride, pad.top, pad.bottom);
    let ow = conv_out(wd, kw, stride, pad.left, pad.right);
    let col = im2col(x, kh, kw, stride, pad, oh, ow);
    let w2 = w
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("weights are standard layout");
    let mut y2 = Array2::<S>::zeros((cout, n * oh * ow));
    general_mat_mul(S::one(), &w2, &col.view(), S::zero(), &mut y2);
    let mut y = from_channel_major(&y2, n, oh, ow);
    for ni in 0..n {
        for co in 0..cout {
            let bias = b[co];
            y.index_axis_mut(ndarray::Axis(0), ni)
                .index_axis_mut(ndarray::Axis(0), co)
                .mapv_inplace(|v| v + bias);
        }
    }
    y
}

/// Backward convolution: gradients w.r.t. input, weights, bias.
/// Recomputes im2col rather than caching it (memory over speed).
pub fn conv2d_backward<S: Scalar>(
    gy: &ArrayView4<'_, S>,
    x: &ArrayView4<'_, S>,
    w: &ArrayView4<'_, S>,
    stride: usize,
    pad: Pad,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<S>>, Option<Array4<S>>, Array1<S>) {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = gy.dim();
    let gy2 = to_channel_major(gy);
    let w2 = w
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("weights are standard layout");

    let mut db = Array1::<S>::zeros(cout);
    for co in 0..cout {
        db[co] = gy2.row(co).sum();
    }

    let dw = if need_dw {
        let col = im2col(x, kh, kw, stride, pad, oh, ow);
        let mut dw2 = Array2::<S>::zeros((cout, cin * kh * kw));
        general_mat_mul(S::one(), &gy2.view(), &col.t(), S::zero(), &mut dw2);
        Some(
            dw2.into_shape_with_order((cout, cin, kh, kw))
                .expect("dw shape"),
        )
    } else {
        None
    };

    let dx = if need_dx {
        let mut dcol = Array2::<S>::zeros((cin * kh * kw, n * oh * ow));
        general_mat_mul(S::one(), &w2.t(), &gy2.view(), S::zero(), &mut dcol);
        Some(col2im(&dcol, n, cin, h, wd, kh, kw, stride, pad, oh, ow))
    } else {
        None
    };

    (dx, dw, db)
}

/// Forward transposed convolution. `x: [N, Cin, H, W]`,
/// `w: [Cin, Cout, KH, KW]`, symmetric padding `p` →
/// `[N, Cout, (H-1)s - 2p + KH, ...]`.
pub fn convt2d_forward<S: Scalar>(
    x: &ArrayView4<'_, S>,
    w: &ArrayView4<'_, S>,
    b: &ArrayView1<'_, S>,
    stride: usize,
    p: usize,
) -> Array4<S> {
    let (n, cin, h, wd) = x.dim();
    let (cin_w, cout, kh, kw) = w.dim();
    debug_assert_eq!(cin, cin_w, "convt2d channel mismatch");
    let oh = convt_out(h, kh, stride, p);
    let ow = convt_out(wd, kw, stride, p);
    let x2 = to_channel_major(x);
    let w2 = w
        .view()
        .into_shape_with_order((cin, cout * kh * kw))
        .expect("weights are standard layout");
    let mut cols = Array2::<S>::zeros((cout * kh * kw, n * h * wd));
    general_mat_mul(S::one(), &w2.t(), &x2.view(), S::zero(), &mut cols);
    let mut y = col2im(
        &cols,
        n,
        cout,
        oh,
        ow,
        kh,
        kw,
        stride,
        Pad::symmetric(p),
        h,
        wd,
    );
    for ni in 0..n {
        for co in 0..cout {
            let bias = b[co];
            y.index_axis_mut(ndarray::Axis(0), ni)
                .index_axis_mut(ndarray::Axis(0), co)
                .mapv_inplace(|v| v + bias);
        }
    }
    y
}

/// Backward transposed convolution.
pub fn convt2d_backward<S: Scalar>(
    gy: &ArrayView4<'_, S>,
    x: &ArrayView4<'_, S>,
    w: &ArrayView4<'_, S>,
    stride: usize,
    p: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<S>>, Option<Array4<S>>, Array1<S>) {
    let (n, cin, h, wd) = x.dim();
    let (_, cout, kh, kw) = w.dim();
    let w2 = w
        .view()
        .into_shape_with_order((cin, cout * kh * kw))
        .expect("weights are standard layout");

    let mut db = Array1::<S>::zeros(cout);
    for ni in 0..n {
        for co in 0..cout {
            db[co] += gy
                .index_axis(ndarray::Axis(0), ni)
                .index_axis(ndarray::Axis(0), co)
                .sum();
        }
    }

    // Kernel placements of the forward pass read gradient windows from gy.
    let dcols = im2col(gy, kh, kw, stride, Pad::symmetric(p), h, wd);

    let dw = if need_dw {
        let x2 = to_channel_major(x);
        let mut dw2 = Array2::<S>::zeros((cin, cout * kh * kw));
        general_mat_mul(S::one(), &x2.view(), &dcols.t(), S::zero(), &mut dw2);
        Some(
            dw2.into_shape_with_order((cin, cout, kh, kw))
                .expect("dw shape"),
        )
    } else {
        None
    };

    let dx = if need_dx {
        let mut dx2 = Array2::<S>::zeros((cin, n * h * wd));
        general_mat_mul(S::one(), &w2.view(), &dcols.view(), S::zero(), &mut dx2);
        Some(from_channel_major(&dx2, n, h, wd))
    } else {
        None
    };

    (dx, dw, db)
}

/// Normalized binomial (Pascal-row) blur taps of length `k`, e.g. `[1,2,1]/4`.
pub fn binomial_taps<S: Scalar>(k: usize) -> Vec<S> {
    let mut row = vec![1u64];
    for _ in 1..k {
        let mut next = vec![1u64; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let total: u64 = row.iter().sum();
    row.iter()
        .map(|&v| S::from_f64(v as f64 / total as f64))
        .collect()
}

/// Reflect-pad index map for one axis: padded index → source index.
/// Requires `len > pad` (mirroring never reaches past the opposite edge).
pub fn reflect_index_map(len: usize, before: usize, after: usize) -> Vec<usize> {
    debug_assert!(len > before && len > after);
    let mut map = Vec::with_capacity(len + before + after);
    for q in 0..len + before + after {
        let idx = q as isize - before as isize;
        let idx = if idx < 0 {
            -idx
        } else if idx >= len as isize {
            2 * (len as isize - 1) - idx
        } else {
            idx
        };
        map.push(idx as usize);
    }
    map
}

/// Anti-alias blur: reflect padding, separable binomial taps, stride `s`.
/// Output spatial dims are `⌈H/s⌉ × ⌈W/s⌉` for any tap count.
pub fn blur_forward<S: Scalar>(x: &ArrayView4<'_, S>, taps: &[S], stride: usize) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let k = taps.len();
    let (before, after) = ((k - 1) / 2, k / 2);
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    let rmap = reflect_index_map(h, before, after);
    let cmap = reflect_index_map(w, before, after);
    let mut y = Array4::<S>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.index_axis(ndarray::Axis(0), ni);
            let plane = plane.index_axis(ndarray::Axis(0), ci);
            let mut out = y.index_axis_mut(ndarray::Axis(0), ni);
            let mut out = out.index_axis_mut(ndarray::Axis(0), ci);
            for gy in 0..oh {
                for gx in 0..ow {
                    let mut acc = S::zero();
                    for (i, &ti) in taps.iter().enumerate() {
                        let sy = rmap[gy * stride + i];
                        for (j, &tj) in taps.iter().enumerate() {
                            let sx = cmap[gx * stride + j];
                            acc += ti * tj * plane[[sy, sx]];
                        }
                    }
                    out[[gy, gx]] = acc;
                }
            }
        }
    }
    y
}

/// Adjoint of [`blur_forward`].
pub fn blur_backward<S: Scalar>(
    gy: &ArrayView4<'_, S>,
    in_h: usize,
    in_w: usize,
    taps: &[S],
    stride: usize,
) -> Array4<S> {
    let (n, c, oh, ow) = gy.dim();
    let k = taps.len();
    let (before, after) = ((k - 1) / 2, k / 2);
    let rmap = reflect_index_map(in_h, before, after);
    let cmap = reflect_index_map(in_w, before, after);
    let mut dx = Array4::<S>::zeros((n, c, in_h, in_w));
    for ni in 0..n {
        for ci in 0..c {
            let g = gy.index_axis(ndarray::Axis(0), ni);
            let g = g.index_axis(ndarray::Axis(0), ci);
            let mut d = dx.index_axis_mut(ndarray::Axis(0), ni);
            let mut d = d.index_axis_mut(ndarray::Axis(0), ci);
            for gy_ in 0..oh {
                for gx in 0..ow {
                    let gv = g[[gy_, gx]];
                    for (i, &ti) in taps.iter().enumerate() {
                        let sy = rmap[gy_ * stride + i];
                        for (j, &tj) in taps.iter().enumerate() {
                            let sx = cmap[gx * stride + j];
                            d[[sy, sx]] += ti * tj * gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array4};
    use rand::{Rng, SeedableRng};

    fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Reference conv by direct summation.
    fn conv_ref(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: &Array1<f64>,
        stride: usize,
        pad: Pad,
    ) -> Array4<f64> {
        let (n, cin, h, wd) = x.dim();
        let (cout, _, kh, kw) = w.dim();
        let oh = conv_out(h, kh, stride, pad.top, pad.bottom);
        let ow = conv_out(wd, kw, stride, pad.left, pad.right);
        let mut y = Array4::zeros((n, cout, oh, ow));
        for ni in 0..n {
            for co in 0..cout {
                for gy in 0..oh {
                    for gx in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let yy = (gy * stride + i) as isize - pad.top as isize;
                                    let xx = (gx * stride + j) as isize - pad.left as isize;
                                    if yy < 0
                                        || yy >= h as isize
                                        || xx < 0
                                        || xx >= wd as isize
                                    {
                                        continue;
                                    }
                                    acc += x[[ni, ci, yy as usize, xx as usize]]
                                        * w[[co, ci, i, j]];
                                }
                            }
                        }
                        y[[ni, co, gy, gx]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn gemm_conv_matches_direct_sum() {
        let x = randn4((2, 3, 6, 5), 1);
        let w = randn4((4, 3, 4, 4), 2);
        let b = Array1::from_shape_fn(4, |i| i as f64 * 0.1);
        for &(stride, pad) in &[(1usize, Pad::same(4)), (2, Pad::symmetric(1))] {
            let fast = conv2d_forward(&x.view(), &w.view(), &b.view(), stride, pad);
            let slow = conv_ref(&x, &w, &b, stride, pad);
            assert_eq!(fast.dim(), slow.dim());
            for (a, bb) in fast.iter().zip(slow.iter()) {
                assert!((a - bb).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn same_padding_preserves_dims_for_4x4() {
        let x = randn4((1, 2, 7, 9), 3);
        let w = randn4((2, 2, 4, 4), 4);
        let b = Array1::zeros(2);
        let y = conv2d_forward(&x.view(), &w.view(), &b.view(), 1, Pad::same(4));
        assert_eq!(y.dim(), (1, 2, 7, 9));
    }

    #[test]
    fn convt_doubles_spatial_dims() {
        let x = randn4((2, 3, 5, 4), 5);
        let w = randn4((3, 2, 4, 4), 6);
        let b = Array1::zeros(2);
        let y = convt2d_forward(&x.view(), &w.view(), &b.view(), 2, 1);
        assert_eq!(y.dim(), (2, 2, 10, 8));
    }

    #[test]
    fn convt_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> for matching geometry and shared
        // weights (bias zero). This pins the scatter indexing.
        let x = randn4((1, 2, 8, 8), 7);
        let w = randn4((3, 2, 4, 4), 8); // conv layout [Cout, Cin, KH, KW]
        let b3 = Array1::zeros(3);
        let b2 = Array1::zeros(2);
        let cx = conv2d_forward(&x.view(), &w.view(), &b3.view(), 2, Pad::symmetric(1));
        let y = randn4(cx.dim(), 9);
        // convT wants [Cin, Cout, KH, KW] relative to its own input = y.
        let mut wt = Array4::zeros((3, 2, 4, 4));
        for co in 0..3 {
            for ci in 0..2 {
                for i in 0..4 {
                    for j in 0..4 {
                        wt[[co, ci, i, j]] = w[[co, ci, i, j]];
                    }
                }
            }
        }
        let ty = convt2d_forward(&y.view(), &wt.view(), &b2.view(), 2, 1);
        assert_eq!(ty.dim(), x.dim());
        let lhs: f64 = cx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(ty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        let x = randn4((1, 2, 5, 5), 10);
        let w = randn4((2, 2, 4, 4), 11);
        let b = Array1::from_shape_fn(2, |i| 0.05 * i as f64);
        let pad = Pad::same(4);
        let loss = |xx: &Array4<f64>, ww: &Array4<f64>, bb: &Array1<f64>| -> f64 {
            conv2d_forward(&xx.view(), &ww.view(), &bb.view(), 1, pad)
                .iter()
                .enumerate()
                .map(|(i, v)| v * ((i % 7) as f64 - 3.0))
                .sum()
        };
        // Output grad matching the synthetic loss above.
        let y = conv2d_forward(&x.view(), &w.view(), &b.view(), 1, pad);
        let gy = Array4::from_shape_fn(y.dim(), |idx| {
            let flat = idx.3
                + y.dim().3 * (idx.2 + y.dim().2 * (idx.1 + y.dim().1 * idx.0));
            ((flat % 7) as f64) - 3.0
        });
        let (dx, dw, db) = conv2d_backward(&gy.view(), &x.view(), &w.view(), 1, pad, true, true);
        let (dx, dw) = (dx.unwrap(), dw.unwrap());

        let h = 1e-5;
        let mut xp = x.clone();
        for ix in [0usize, 7, 23] {
            let orig = xp.as_slice_mut().unwrap()[ix];
            xp.as_slice_mut().unwrap()[ix] = orig + h;
            let fp = loss(&xp, &w, &b);
            xp.as_slice_mut().unwrap()[ix] = orig - h;
            let fm = loss(&xp, &w, &b);
            xp.as_slice_mut().unwrap()[ix] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = dx.as_slice().unwrap()[ix];
            assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "dx[{ix}]: {an} vs {fd}");
        }
        let mut wp = w.clone();
        for ix in [0usize, 13, 40] {
            let orig = wp.as_slice_mut().unwrap()[ix];
            wp.as_slice_mut().unwrap()[ix] = orig + h;
            let fp = loss(&x, &wp, &b);
            wp.as_slice_mut().unwrap()[ix] = orig - h;
            let fm = loss(&x, &wp, &b);
            wp.as_slice_mut().unwrap()[ix] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = dw.as_slice().unwrap()[ix];
            assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "dw[{ix}]: {an} vs {fd}");
        }
        let mut bp = b.clone();
        let orig = bp[1];
        bp[1] = orig + h;
        let fp = loss(&x, &w, &bp);
        bp[1] = orig - h;
        let fm = loss(&x, &w, &bp);
        let fd = (fp - fm) / (2.0 * h);
        assert!((fd - db[1]).abs() < 1e-6 * fd.abs().max(1.0));
    }

    #[test]
    fn blur_taps_are_binomial() {
        assert_eq!(binomial_taps::<f64>(3), vec![0.25, 0.5, 0.25]);
        assert_eq!(binomial_taps::<f64>(2), vec![0.5, 0.5]);
        assert_eq!(
            binomial_taps::<f64>(5),
            vec![1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0]
        );
    }

    #[test]
    fn blur_preserves_constants_and_halves_dims() {
        let x = Array4::from_elem((1, 2, 7, 6), 3.25f64);
        let taps = binomial_taps::<f64>(3);
        let y = blur_forward(&x.view(), &taps, 2);
        assert_eq!(y.dim(), (1, 2, 4, 3)); // ceil(7/2), ceil(6/2)
        for &v in y.iter() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_kills_nyquist() {
        // The highest-frequency checkerboard must map to exactly zero
        // (plus-minus float dust), including at reflect-padded borders.
        let x = Array4::from_shape_fn((1, 1, 8, 8), |(_, _, y, xx)| {
            if (y + xx) % 2 == 0 {
                1.0f64
            } else {
                -1.0
            }
        });
        let taps = binomial_taps::<f64>(3);
        let y = blur_forward(&x.view(), &taps, 1);
        for &v in y.iter() {
            assert!(v.abs() < 1e-12, "Nyquist leak: {v}");
        }
    }

    #[test]
    fn blur_backward_is_adjoint() {
        let x = randn4((1, 1, 6, 5), 20);
        let taps = binomial_taps::<f64>(3);
        let y = blur_forward(&x.view(), &taps, 2);
        let g = randn4(y.dim(), 21);
        let dx = blur_backward(&g.view(), 6, 5, &taps, 2);
        let lhs: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn reflect_map_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index_map(4, 1, 1), vec![1, 0, 1, 2, 3, 2]);
        assert_eq!(reflect_index_map(2, 1, 1), vec![1, 0, 1, 0]);
    }
}
