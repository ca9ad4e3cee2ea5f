//! Discrete Fourier transform utilities built on dense twiddle matrices.
//!
//! The 2-D DFT of `x` (`H×W`) factors into matrix products
//! `X = F_H · x · F_Wᵀ` with `F_n[k, j] = exp(-2πi k j / n)`. Splitting into
//! real and imaginary parts with `C[k,j] = cos(2π k j / n)` and
//! `S[k,j] = sin(2π k j / n)` gives
//!
//! ```text
//! Re(X) =   C_H · x · C_Wᵀ − S_H · x · S_Wᵀ
//! Im(X) = −(C_H · x · S_Wᵀ + S_H · x · C_Wᵀ)
//! ```
//!
//! Expressing the transform as constant matmuls keeps it differentiable inside
//! the autodiff tape with no special casing: the spectral losses reuse exactly
//! these twiddles. Real input makes the spectrum Hermitian, so the loss path
//! keeps only the non-redundant half plane (all `H` rows, first `⌊W/2⌋+1`
//! columns).

use crate::scalar::Scalar;
use ndarray::Array2;

/// `(cos, sin)` twiddle matrices of shape `[n, n]`.
pub fn full_twiddles<S: Scalar>(n: usize) -> (Array2<S>, Array2<S>) {
    twiddle_rows(n, n)
}

/// `(cos, sin)` twiddle matrices of shape `[n/2 + 1, n]` — the rows that
/// survive Hermitian symmetry for real input along this axis.
pub fn half_twiddles<S: Scalar>(n: usize) -> (Array2<S>, Array2<S>) {
    twiddle_rows(n / 2 + 1, n)
}

fn twiddle_rows<S: Scalar>(rows: usize, n: usize) -> (Array2<S>, Array2<S>) {
    let mut c = Array2::zeros((rows, n));
    let mut s = Array2::zeros((rows, n));
    for k in 0..rows {
        for j in 0..n {
            // Reduce k*j mod n first so the angle stays small and cos/sin stay
            // accurate even in f32.
            let kj = (k * j) % n;
            let theta = 2.0 * std::f64::consts::PI * kj as f64 / n as f64;
            c[[k, j]] = S::from_f64(theta.cos());
            s[[k, j]] = S::from_f64(theta.sin());
        }
    }
    (c, s)
}

/// Full-plane 2-D DFT of a real `H×W` array. Returns `(re, im)` of shape
/// `[H, W]`.
pub fn dft2<S: Scalar>(x: &Array2<S>) -> (Array2<S>, Array2<S>) {
    let (h, w) = x.dim();
    let (ch, sh) = full_twiddles::<S>(h);
    let (cw, sw) = full_twiddles::<S>(w);
    dft2_with(x, &ch, &sh, &cw, &sw)
}

/// Half-plane 2-D DFT of a real `H×W` array: all row frequencies, column
/// frequencies `0 ..= W/2`. Returns `(re, im)` of shape `[H, W/2 + 1]`.
pub fn rdft2<S: Scalar>(x: &Array2<S>) -> (Array2<S>, Array2<S>) {
    let (h, w) = x.dim();
    let (ch, sh) = full_twiddles::<S>(h);
    let (cw, sw) = half_twiddles::<S>(w);
    dft2_with(x, &ch, &sh, &cw, &sw)
}

/// 2-D DFT with caller-provided twiddles (`row` matrices act on the left,
/// `col` matrices on the right, transposed).
pub fn dft2_with<S: Scalar>(
    x: &Array2<S>,
    c_rows: &Array2<S>,
    s_rows: &Array2<S>,
    c_cols: &Array2<S>,
    s_cols: &Array2<S>,
) -> (Array2<S>, Array2<S>) {
    let xc = x.dot(&c_cols.t());
    let xs = x.dot(&s_cols.t());
    let re = c_rows.dot(&xc) - s_rows.dot(&xs);
    let im = -(c_rows.dot(&xs) + s_rows.dot(&xc));
    (re, im)
}

/// `sqrt(re² + im²)` elementwise.
pub fn magnitude<S: Scalar>(re: &Array2<S>, im: &Array2<S>) -> Array2<S> {
    let mut out = Array2::zeros(re.raw_dim());
    for ((o, &r), &i) in out.iter_mut().zip(re.iter()).zip(im.iter()) {
        *o = (r * r + i * i).sqrt();
    }
    out
}

/// Moves the zero-frequency bin to the center (rolls by `H/2`, `W/2`).
pub fn fftshift2<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    let (h, w) = x.dim();
    let (sh, sw) = (h / 2, w / 2);
    Array2::from_shape_fn((h, w), |(y, xx)| x[[(y + h - sh) % h, (xx + w - sw) % w]])
}
