//! Evaluation metrics: Fréchet distance between feature Gaussians and a
//! log-magnitude spectrum distance, plus the JSON report they land in.
//!
//! Features come from a pluggable extractor; the built-in one is a seeded
//! random linear projection of pixels, which keeps the whole evaluation
//! self-contained and deterministic. The Fréchet distance uses a
//! Denman–Beavers iteration for the matrix square root with an explicit
//! convergence check.

use crate::error::{Error, Result};
use crate::fourier::{dft2, fftshift2, magnitude};
use crate::rng::RunSeed;
use ndarray::{Array1, Array2, Array4, Axis};
use rand::prelude::Distribution;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Feature dimensionality of the built-in extractor.
pub const FEATURE_DIM: usize = 64;

/// Maps image batches to feature rows for distribution-level comparison.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    /// `[N, C, H, W]` unit-signed images → `[N, dim]` features.
    fn features(&self, images: &Array4<f64>) -> Result<Array2<f64>>;
}

/// A seeded random linear projection of flattened pixels. Gaussian entries
/// scaled by `1/√in_dim` keep feature magnitudes independent of resolution.
pub struct RandomProjection {
    w: Array2<f64>,
}

impl RandomProjection {
    pub fn new(in_dim: usize, dim: usize, seed: RunSeed) -> Self {
        let mut rng = seed.stream("feature-projection");
        let normal = rand_distr::Normal::new(0.0, (1.0 / in_dim as f64).sqrt())
            .expect("valid std");
        let w = Array2::from_shape_simple_fn((dim, in_dim), || normal.sample(&mut rng));
        RandomProjection { w }
    }

    /// The projection matching a `[C, H, W]` image shape at the default
    /// feature width.
    pub fn for_images(channels: usize, h: usize, w: usize, seed: RunSeed) -> Self {
        Self::new(channels * h * w, FEATURE_DIM, seed)
    }
}

impl FeatureExtractor for RandomProjection {
    fn dim(&self) -> usize {
        self.w.shape()[0]
    }

    fn features(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        let n = images.shape()[0];
        let in_dim: usize = images.shape()[1..].iter().product();
        if in_dim != self.w.shape()[1] {
            return Err(Error::ShapeMismatch {
                context: "RandomProjection::features",
                expected: format!("{} pixels per image", self.w.shape()[1]),
                got: format!("{in_dim}"),
            });
        }
        let flat = images
            .to_shape((n, in_dim))
            .expect("contiguous reshape")
            .to_owned();
        Ok(flat.dot(&self.w.t()))
    }
}

/// First and second moments of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl GaussianStats {
    /// Unbiased sample statistics of `[n, d]` feature rows (`n ≥ 2`).
    pub fn from_features(feats: &Array2<f64>) -> Result<Self> {
        let n = feats.shape()[0];
        if n < 2 {
            return Err(Error::InvalidArgument {
                context: "GaussianStats::from_features",
                message: format!("need at least 2 samples for a covariance, got {n}"),
            });
        }
        let mean = feats.mean_axis(Axis(0)).expect("n >= 2");
        let centered = feats - &mean;
        let cov = centered.t().dot(&centered) / (n - 1) as f64;
        Ok(GaussianStats { mean, cov })
    }
}

// ---------------------------------------------------------------------------
// Dense linear algebra (f64, small matrices)

/// Gauss–Jordan inverse with partial pivoting.
pub fn invert(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.shape()[0];
    if a.shape()[1] != n {
        return Err(Error::ShapeMismatch {
            context: "invert",
            expected: "square matrix".into(),
            got: format!("{:?}", a.shape()),
        });
    }
    let mut m = a.clone();
    let mut inv = Array2::eye(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
            .expect("non-empty range");
        if m[[pivot, col]].abs() < 1e-12 {
            return Err(Error::InvalidArgument {
                context: "invert",
                message: format!("matrix is singular at column {col}"),
            });
        }
        if pivot != col {
            for k in 0..n {
                m.swap([pivot, k], [col, k]);
                inv.swap([pivot, k], [col, k]);
            }
        }
        let p = m[[col, col]];
        for k in 0..n {
            m[[col, k]] /= p;
            inv[[col, k]] /= p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = m[[row, col]];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                m[[row, k]] -= f * m[[col, k]];
                inv[[row, k]] -= f * inv[[col, k]];
            }
        }
    }
    Ok(inv)
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Matrix square root by the Denman–Beavers iteration
/// (`Y ← (Y + Z⁻¹)/2`, `Z ← (Z + Y⁻¹)/2`), with both an iterate-change and a
/// final `‖YY − A‖` convergence check.
pub fn sqrtm(a: &Array2<f64>) -> Result<Array2<f64>> {
    const MAX_ITER: usize = 100;
    const STEP_TOL: f64 = 1e-12;
    let n = a.shape()[0];
    let norm_a = frobenius(a).max(1e-300);
    let mut y = a.clone();
    let mut z: Array2<f64> = Array2::eye(n);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let y_next = (&y + &invert(&z)?) * 0.5;
        let z_next = (&z + &invert(&y)?) * 0.5;
        residual = frobenius(&(&y_next - &y)) / frobenius(&y_next).max(1e-300);
        y = y_next;
        z = z_next;
        if residual < STEP_TOL {
            break;
        }
    }
    let check = frobenius(&(y.dot(&y) - a)) / norm_a;
    if check > 1e-6 {
        return Err(Error::NoConvergence {
            context: "matrix square root",
            iterations: MAX_ITER,
            residual: residual.max(check),
        });
    }
    Ok(y)
}

fn trace(a: &Array2<f64>) -> f64 {
    (0..a.shape()[0]).map(|i| a[[i, i]]).sum()
}

/// Smoothing added to covariance diagonals before the Fréchet computation.
/// Sample covariances here are usually rank-deficient (feature dim exceeds
/// the sample count), and the square-root iteration's attainable accuracy
/// degrades with the condition number of the covariance product — 1e-3
/// keeps that product comfortably within f64 range while perturbing the
/// distance by at most `O(dim · ε)`.
pub const FID_EPS: f64 = 1e-3;

/// Fréchet distance between two Gaussians:
/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½)`, computed on the ε-smoothed
/// covariances `Σ + εI` (consistently in every term, so identical inputs give
/// exactly zero).
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::ShapeMismatch {
            context: "frechet_distance",
            expected: format!("{} dims", a.mean.len()),
            got: format!("{} dims", b.mean.len()),
        });
    }
    let d = a.mean.len();
    let smooth = Array2::<f64>::eye(d) * FID_EPS;
    let ca = &a.cov + &smooth;
    let cb = &b.cov + &smooth;
    let diff = &a.mean - &b.mean;
    let mean_term = diff.dot(&diff);
    let covmean = sqrtm(&ca.dot(&cb))?;
    let fid = mean_term + trace(&ca) + trace(&cb) - 2.0 * trace(&covmean);
    // The exact value is non-negative; trim the last few bits of numeric dust.
    Ok(if fid < 0.0 && fid > -1e-9 { 0.0 } else { fid })
}

/// FID between two image batches under one extractor.
pub fn fid_between<E: FeatureExtractor>(
    extractor: &E,
    real: &Array4<f64>,
    generated: &Array4<f64>,
) -> Result<f64> {
    let fr = GaussianStats::from_features(&extractor.features(real)?)?;
    let fg = GaussianStats::from_features(&extractor.features(generated)?)?;
    frechet_distance(&fr, &fg)
}

// ---------------------------------------------------------------------------
// Spectrum distance

/// Z-score floor: spectra flatter than this are treated as constant.
const SPECTRUM_STD_GUARD: f64 = 1e-12;

/// The fftshifted, per-image z-scored `log(1 + |F|)` spectrum of a 2-D plane.
pub fn log_spectrum(img: &Array2<f64>) -> Array2<f64> {
    let (re, im) = dft2(img);
    let logmag = magnitude(&re, &im).mapv(f64::ln_1p);
    let shifted = fftshift2(&logmag);
    let mean = shifted.mean().expect("non-empty image");
    let std = shifted.std(0.0).max(SPECTRUM_STD_GUARD);
    shifted.mapv(|v| (v - mean) / std)
}

/// Mean squared difference between paired normalized log spectra.
pub fn spectrum_mse(a: &[Array2<f64>], b: &[Array2<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument {
            context: "spectrum_mse",
            message: format!("need equal non-empty sets, got {} vs {}", a.len(), b.len()),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b.iter()) {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                context: "spectrum_mse",
                expected: format!("{:?}", x.shape()),
                got: format!("{:?}", y.shape()),
            });
        }
        let sx = log_spectrum(x);
        let sy = log_spectrum(y);
        total += (&sx - &sy).mapv(|v| v * v).sum();
        count += sx.len();
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Report

/// Evaluation results as written to disk. `dbcnn` stays `null` — no
/// pretrained perceptual-quality network ships with this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub mse_spec: f64,
    pub dbcnn: Option<f64>,
    pub config_hash: String,
    pub n_images: usize,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
