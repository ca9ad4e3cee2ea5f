//! The generator/discriminator loss stack.
//!
//! All losses are scalar tape nodes built from differentiable ops:
//!
//! - relativistic adversarial losses on patch-logit differences with a
//!   smoothed real label,
//! - a 16-patch triplet loss pulling predicted patches toward the matching
//!   target patch and away from a randomly drawn other patch,
//! - a temperature-consistency triplet on per-pixel Celsius maps decoded from
//!   the red channel, with a color-jittered target as the negative,
//! - a perceptual loss over a fixed (non-trained) convolutional feature
//!   stack,
//! - Fourier amplitude + phase losses over the half-plane spectrum, either on
//!   the whole image or per patch.

use crate::autodiff::{DftPlan, Tape, Var};
use crate::image::{PATCH_COUNT, PATCH_GRID_SIDE, TEMP_MAX_C, TEMP_MIN_C};
use crate::scalar::Scalar;
use crate::blocks::{bind, Conv2d, ParamStore};
use crate::autodiff::Pad;
use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Labels of the adversarial objective: smoothed real label, hard fake label.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdversarialTargets {
    pub real_label: f64,
    pub fake_label: f64,
}

impl Default for AdversarialTargets {
    fn default() -> Self {
        AdversarialTargets {
            real_label: 0.9,
            fake_label: 0.0,
        }
    }
}

/// Triplet hinge configuration (L2 distances).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TripletSpec {
    pub margin: f64,
}

impl Default for TripletSpec {
    fn default() -> Self {
        TripletSpec { margin: 1.0 }
    }
}

/// Per-term weights of the total generator objective. Defaults are all 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub gan: f64,
    pub perceptual: f64,
    pub temperature: f64,
    pub patch: f64,
    pub fft: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gan: 1.0,
            perceptual: 1.0,
            temperature: 1.0,
            patch: 1.0,
            fft: 1.0,
        }
    }
}

/// Counts patch-grid splits performed by patch-level losses. Ablation tests
/// use it to prove a disabled term is truly absent from the graph.
pub static PATCH_SPLIT_CALLS: AtomicUsize = AtomicUsize::new(0);

pub fn reset_patch_split_calls() {
    PATCH_SPLIT_CALLS.store(0, Ordering::SeqCst);
}

pub fn patch_split_calls() -> usize {
    PATCH_SPLIT_CALLS.load(Ordering::SeqCst)
}

// ---------------------------------------------------------------------------
// Adversarial losses

/// Mean binary cross-entropy with logits against a constant target:
/// `mean(softplus(x) - t·x)`, the stable form of
/// `-t·log σ(x) - (1-t)·log(1-σ(x))`.
pub fn bce_with_logits_mean<S: Scalar>(tape: &Tape<S>, logits: Var, target: f64) -> Var {
    let sp = tape.softplus(logits);
    let tx = tape.affine(logits, target, 0.0);
    tape.mean_all(tape.sub(sp, tx))
}

/// Generator-side relativistic loss: pushes fake patch logits above real ones
/// toward the smoothed real label. `BCE(ŷ_fake - ŷ_real, real_label)`.
pub fn relativistic_g_loss<S: Scalar>(
    tape: &Tape<S>,
    y_fake: Var,
    y_real: Var,
    targets: &AdversarialTargets,
) -> Var {
    let delta = tape.sub(y_fake, y_real);
    bce_with_logits_mean(tape, delta, targets.real_label)
}

/// Discriminator-side relativistic loss:
/// `½[BCE(ŷ_real - ŷ_fake, real_label) + BCE(ŷ_fake - ŷ_real, fake_label)]`.
pub fn relativistic_d_loss<S: Scalar>(
    tape: &Tape<S>,
    y_real: Var,
    y_fake: Var,
    targets: &AdversarialTargets,
) -> Var {
    let d_rf = tape.sub(y_real, y_fake);
    let d_fr = tape.sub(y_fake, y_real);
    let l_real = bce_with_logits_mean(tape, d_rf, targets.real_label);
    let l_fake = bce_with_logits_mean(tape, d_fr, targets.fake_label);
    tape.affine(tape.add(l_real, l_fake), 0.5, 0.0)
}

// ---------------------------------------------------------------------------
// Patch helpers

/// Tape nodes for the 16 patches of a `[N, C, H, W]` tensor (4×4 grid,
/// row-major). H and W must be divisible by 4.
pub fn split_patches_var<S: Scalar>(tape: &Tape<S>, x: Var) -> Vec<Var> {
    PATCH_SPLIT_CALLS.fetch_add(1, Ordering::SeqCst);
    let shape = tape.shape(x);
    assert_eq!(shape.len(), 4, "patch split expects [N, C, H, W]");
    let (h, w) = (shape[2], shape[3]);
    assert!(
        h % PATCH_GRID_SIDE == 0 && w % PATCH_GRID_SIDE == 0,
        "patch split needs dims divisible by {PATCH_GRID_SIDE}, got {h}x{w}"
    );
    let (ph, pw) = (h / PATCH_GRID_SIDE, w / PATCH_GRID_SIDE);
    let mut out = Vec::with_capacity(PATCH_COUNT);
    for r in 0..PATCH_GRID_SIDE {
        for c in 0..PATCH_GRID_SIDE {
            out.push(tape.slice_hw(x, r * ph, (r + 1) * ph, c * pw, (c + 1) * pw));
        }
    }
    out
}

/// Per-sample L2 distance between two equally shaped tensors: `[N]`.
fn l2_distance_rows<S: Scalar>(tape: &Tape<S>, a: Var, b: Var) -> Var {
    tape.l2_norm_rows(tape.sub(a, b))
}

/// Mean hinge `max(d_pos - d_neg + margin, 0)` over per-sample distances.
fn triplet_hinge<S: Scalar>(tape: &Tape<S>, d_pos: Var, d_neg: Var, margin: f64) -> Var {
    let diff = tape.sub(d_pos, d_neg);
    let shifted = tape.affine(diff, 1.0, margin);
    tape.mean_all(tape.relu(shifted))
}

/// Patch triplet loss: for every grid cell `k`, anchor = predicted patch `k`,
/// positive = target patch `k`, negative = a target patch drawn uniformly
/// from the other 15 cells (one draw per cell per call, shared across the
/// batch). Distances are per-sample L2 over flattened patches.
pub fn patch_triplet_loss<S: Scalar>(
    tape: &Tape<S>,
    predicted: Var,
    target: Var,
    spec: &TripletSpec,
    rng: &mut ChaCha8Rng,
) -> Var {
    let pred_patches = split_patches_var(tape, predicted);
    let tgt_patches = split_patches_var(tape, target);
    let mut total: Option<Var> = None;
    for k in 0..PATCH_COUNT {
        let mut neg = rng.random_range(0..PATCH_COUNT - 1);
        if neg >= k {
            neg += 1;
        }
        let d_pos = l2_distance_rows(tape, pred_patches[k], tgt_patches[k]);
        let d_neg = l2_distance_rows(tape, pred_patches[k], tgt_patches[neg]);
        let hinge = triplet_hinge(tape, d_pos, d_neg, spec.margin);
        total = Some(match total {
            Some(t) => tape.add(t, hinge),
            None => hinge,
        });
    }
    tape.affine(total.expect("at least one patch"), 1.0 / PATCH_COUNT as f64, 0.0)
}

// ---------------------------------------------------------------------------
// Temperature loss

/// Per-pixel Celsius map of a unit-signed thermal image: red channel mapped
/// through `T = 31 + 7·v` (the `[0,255] → [24,38] °C` line composed with the
/// unit-signed normalization). Output `[N, 1, H, W]`.
pub fn temperature_map_var<S: Scalar>(tape: &Tape<S>, img_unit: Var) -> Var {
    let red = tape.slice_channels(img_unit, 0, 1);
    let mid = (TEMP_MIN_C + TEMP_MAX_C) / 2.0;
    let half_span = (TEMP_MAX_C - TEMP_MIN_C) / 2.0;
    tape.affine(red, half_span, mid)
}

/// Temperature-consistency triplet: anchor = T(predicted), positive =
/// T(target), negative = T(color-jittered target). Per-sample L2 distances
/// over the Celsius maps, hinge with the configured margin.
pub fn temperature_triplet_loss<S: Scalar>(
    tape: &Tape<S>,
    predicted: Var,
    target: Var,
    jittered_target: Var,
    spec: &TripletSpec,
) -> Var {
    let t_pred = temperature_map_var(tape, predicted);
    let t_tgt = temperature_map_var(tape, target);
    let t_jit = temperature_map_var(tape, jittered_target);
    let d_pos = l2_distance_rows(tape, t_pred, t_tgt);
    let d_neg = l2_distance_rows(tape, t_pred, t_jit);
    triplet_hinge(tape, d_pos, d_neg, spec.margin)
}

// ---------------------------------------------------------------------------
// Perceptual loss

/// Fixed-seed convolutional feature stack used when no pretrained perceptual
/// network is available. Weights are constants — gradients flow only through
/// the images. Three stride-2 tanh stages keep the map smooth everywhere, so
/// gradient audits are clean.
pub struct PerceptualExtractor<S: Scalar> {
    params: ParamStore<S>,
    convs: Vec<Conv2d>,
}

/// Channel plan of the fallback extractor.
const PERC_CHANNELS: [usize; 3] = [8, 16, 32];

impl<S: Scalar> PerceptualExtractor<S> {
    pub fn new(in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = in_channels;
        for (i, &cout) in PERC_CHANNELS.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut params,
                rng,
                &format!("feat{i}"),
                cin,
                cout,
                3,
                2,
                Pad::symmetric(1),
            ));
            cin = cout;
        }
        PerceptualExtractor { params, convs }
    }

    /// Feature maps at each stage.
    pub fn features(&self, tape: &Tape<S>, x: Var) -> Vec<Var> {
        let frozen = bind(tape, &self.params, false);
        let mut h = x;
        let mut feats = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = tape.tanh(conv.forward(tape, &frozen, h));
            feats.push(h);
        }
        feats
    }
}

/// Mean over layers of the mean squared feature difference (unit per-layer
/// weights).
pub fn perceptual_loss<S: Scalar>(
    tape: &Tape<S>,
    extractor: &PerceptualExtractor<S>,
    predicted: Var,
    target: Var,
) -> Var {
    let fp = extractor.features(tape, predicted);
    let ft = extractor.features(tape, target);
    let mut total: Option<Var> = None;
    let n_layers = fp.len();
    for (a, b) in fp.into_iter().zip(ft.into_iter()) {
        let term = tape.mean_all(tape.square(tape.sub(a, b)));
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    tape.affine(total.expect("extractor has layers"), 1.0 / n_layers as f64, 0.0)
}

// ---------------------------------------------------------------------------
// Fourier losses

/// Options for the spectral losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FourierLossOpts {
    /// Wrap phase differences to `(-π, π]` before the L1. Off by default:
    /// raw angle differences.
    pub wrap_phase: bool,
}

impl Default for FourierLossOpts {
    fn default() -> Self {
        FourierLossOpts { wrap_phase: false }
    }
}

/// Amplitude and phase tape nodes of the half-plane spectrum of `x`.
fn spectrum_amp_phase<S: Scalar>(tape: &Tape<S>, x: Var, plan: &DftPlan<S>) -> (Var, Var) {
    let re = tape.dft_re(x, plan);
    let im = tape.dft_im(x, plan);
    let amp = tape.sqrt_guard(tape.add(tape.square(re), tape.square(im)));
    let pha = tape.atan2(im, re);
    (amp, pha)
}

/// `½(L_amp + L_phase)` between two `[N, C, H, W]` tensors over the retained
/// half-plane coefficients; both terms are mean-reduced L1.
pub fn fft_global_loss<S: Scalar>(
    tape: &Tape<S>,
    predicted: Var,
    target: Var,
    plan: &DftPlan<S>,
    opts: &FourierLossOpts,
) -> Var {
    let (amp_p, pha_p) = spectrum_amp_phase(tape, predicted, plan);
    let (amp_t, pha_t) = spectrum_amp_phase(tape, target, plan);
    let l_amp = tape.mean_all(tape.abs(tape.sub(amp_p, amp_t)));
    let mut pha_diff = tape.sub(pha_p, pha_t);
    if opts.wrap_phase {
        pha_diff = tape.wrap_angle(pha_diff);
    }
    let l_pha = tape.mean_all(tape.abs(pha_diff));
    tape.affine(tape.add(l_amp, l_pha), 0.5, 0.0)
}

/// Patch-level Fourier loss: the global loss applied to each of the 16
/// patches, averaged. `plan` must match the patch dims (`H/4 × W/4`).
pub fn fft_patch_loss<S: Scalar>(
    tape: &Tape<S>,
    predicted: Var,
    target: Var,
    plan: &DftPlan<S>,
    opts: &FourierLossOpts,
) -> Var {
    let shape = tape.shape(predicted);
    debug_assert_eq!(shape[2] / PATCH_GRID_SIDE, plan.h, "plan dims");
    let pred_patches = split_patches_var(tape, predicted);
    let tgt_patches = split_patches_var(tape, target);
    let mut total: Option<Var> = None;
    for k in 0..PATCH_COUNT {
        let term = fft_global_loss(tape, pred_patches[k], tgt_patches[k], plan, opts);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    tape.affine(total.expect("patches"), 1.0 / PATCH_COUNT as f64, 0.0)
}

// ---------------------------------------------------------------------------
// Logged-only metric

/// Smooth L1 (Huber, β = 1) between two arrays, mean-reduced. Logged during
/// training; never differentiated.
pub fn smooth_l1<S: Scalar>(a: &ArrayD<S>, b: &ArrayD<S>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64().abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, grads_close, Tape};
    use crate::image::PatchGrid;
    use crate::rng::RunSeed;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    const LN_2: f64 = std::f64::consts::LN_2;

    fn scalar_tape() -> Tape<f64> {
        Tape::new()
    }

    fn const_arr(tape: &Tape<f64>, vals: &[f64]) -> Var {
        tape.constant(ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap())
    }

    #[test]
    fn bce_closed_forms() {
        let tape = scalar_tape();
        // bce(0, t) = ln 2 for every target.
        for t in [0.0, 0.5, 0.9, 1.0] {
            let x = const_arr(&tape, &[0.0]);
            let l = bce_with_logits_mean(&tape, x, t);
            assert!((tape.scalar_value(l) - LN_2).abs() < 1e-15);
        }
        // bce(20, 1) = ln(1 + e^-20), computed as (20 + log1p(e^-20)) - 20,
        // which cancels a few trailing bits.
        let x = const_arr(&tape, &[20.0]);
        let l = bce_with_logits_mean(&tape, x, 1.0);
        assert!((tape.scalar_value(l) - 2.061_153_026_033_935e-9).abs() < 1e-16);
        // bce(-20, 0) is the same quantity evaluated directly (no subtraction).
        let x = const_arr(&tape, &[-20.0]);
        let l = bce_with_logits_mean(&tape, x, 0.0);
        assert!((tape.scalar_value(l) - 2.061_153_620_314_381e-9).abs() < 1e-16);
    }

    #[test]
    fn relativistic_losses_at_confident_separation() {
        let targets = AdversarialTargets::default();
        let tape = scalar_tape();
        let y_real = const_arr(&tape, &[10.0]);
        let y_fake = const_arr(&tape, &[30.0]);
        // Generator: δ = 20, target 0.9 → softplus(20) − 18 ≈ 2 + 2.06e-9.
        let lg = relativistic_g_loss(&tape, y_fake, y_real, &targets);
        assert!((tape.scalar_value(lg) - 2.000_000_002_061_153_6).abs() < 1e-12);
        // Discriminator with real 20 above fake:
        // ½[softplus(20) − 18 + softplus(20)] ≈ 1 + 2.06e-9... with real-fake
        // = +20: ½[(2 + 2.06e-9) + 2.06e-9·... ] — compute the frozen value.
        let y_real2 = const_arr(&tape, &[30.0]);
        let y_fake2 = const_arr(&tape, &[10.0]);
        let ld = relativistic_d_loss(&tape, y_real2, y_fake2, &targets);
        // ½[bce(20, 0.9) + bce(-20, 0)]
        //   = ½[(softplus(20) − 18) + softplus(-20)] = 1.000000002061154.
        assert!((tape.scalar_value(ld) - 1.000_000_002_061_154).abs() < 1e-12);
    }

    #[test]
    fn relativistic_losses_are_shift_invariant() {
        let targets = AdversarialTargets::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let yr: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let yf: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c: f64 = rng.random_range(-50.0..50.0);
            let yrc: Vec<f64> = yr.iter().map(|v| v + c).collect();
            let yfc: Vec<f64> = yf.iter().map(|v| v + c).collect();
            let tape = scalar_tape();
            let (r0, f0) = (const_arr(&tape, &yr), const_arr(&tape, &yf));
            let (r1, f1) = (const_arr(&tape, &yrc), const_arr(&tape, &yfc));
            let g0 = tape.scalar_value(relativistic_g_loss(&tape, f0, r0, &targets));
            let g1 = tape.scalar_value(relativistic_g_loss(&tape, f1, r1, &targets));
            let d0 = tape.scalar_value(relativistic_d_loss(&tape, r0, f0, &targets));
            let d1 = tape.scalar_value(relativistic_d_loss(&tape, r1, f1, &targets));
            assert!((g0 - g1).abs() < 1e-9, "generator loss shifted: {g0} vs {g1}");
            assert!((d0 - d1).abs() < 1e-9, "discriminator loss shifted: {d0} vs {d1}");
        }
    }

    #[test]
    fn patch_triplet_matches_plain_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let pred = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 8, 8]), || {
            rng.random_range(-1.0..1.0)
        });
        let tgt = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 8, 8]), || {
            rng.random_range(-1.0..1.0)
        });
        let spec = TripletSpec::default();

        // Replay the negative draws the loss will make.
        let mut draw_rng = RunSeed(5).stream("patch-neg");
        let mut negs = Vec::new();
        for k in 0..PATCH_COUNT {
            let mut neg = draw_rng.random_range(0..PATCH_COUNT - 1);
            if neg >= k {
                neg += 1;
            }
            negs.push(neg);
        }

        // Plain-array oracle.
        let mut expected = 0.0;
        for n in 0..2 {
            let p3 = pred
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap()
                .index_axis(ndarray::Axis(0), n)
                .to_owned();
            let t3 = tgt
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap()
                .index_axis(ndarray::Axis(0), n)
                .to_owned();
            let pg = PatchGrid::split(&p3).unwrap();
            let tg = PatchGrid::split(&t3).unwrap();
            for k in 0..PATCH_COUNT {
                let d = |a: &ndarray::Array3<f64>, b: &ndarray::Array3<f64>| -> f64 {
                    a.iter()
                        .zip(b.iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                };
                let dp = d(pg.patch(k), tg.patch(k));
                let dn = d(pg.patch(k), tg.patch(negs[k]));
                expected += (dp - dn + spec.margin).max(0.0);
            }
        }
        expected /= (2 * PATCH_COUNT) as f64;

        let tape = scalar_tape();
        let p = tape.constant(pred);
        let t = tape.constant(tgt);
        let mut loss_rng = RunSeed(5).stream("patch-neg");
        let loss = patch_triplet_loss(&tape, p, t, &spec, &mut loss_rng);
        let got = tape.scalar_value(loss);
        assert!(
            (got - expected).abs() < 1e-9 * expected.max(1.0),
            "{got} vs {expected}"
        );
    }

    #[test]
    fn patch_triplet_counts_splits() {
        reset_patch_split_calls();
        let tape = scalar_tape();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 1, 4, 4])));
        let y = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 0.5));
        let mut rng = RunSeed(0).stream("neg");
        let _ = patch_triplet_loss(&tape, x, y, &TripletSpec::default(), &mut rng);
        assert_eq!(patch_split_calls(), 2); // predicted + target
    }

    #[test]
    fn temperature_map_hits_celsius_anchors() {
        let tape = scalar_tape();
        let img = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 3, 1, 2]), vec![-1.0, 1.0, 0.3, 0.3, 0.3, 0.3])
                .unwrap(),
        );
        let t = temperature_map_var(&tape, img);
        assert_eq!(tape.shape(t), vec![1, 1, 1, 2]);
        tape.with_value(t, |v| {
            assert!((v[[0, 0, 0, 0]] - 24.0).abs() < 1e-12);
            assert!((v[[0, 0, 0, 1]] - 38.0).abs() < 1e-12);
        });
    }

    #[test]
    fn temperature_triplet_frozen_cases() {
        let spec = TripletSpec::default();
        // Case 1: prediction == target and the jittered negative is far
        // (distance > margin) → loss exactly 0.
        let tape = scalar_tape();
        let img = ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), 0.2f64);
        let far = ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), -0.8f64);
        let (p, t, j) = (
            tape.constant(img.clone()),
            tape.constant(img.clone()),
            tape.constant(far),
        );
        let l = temperature_triplet_loss(&tape, p, t, j, &spec);
        assert_eq!(tape.scalar_value(l), 0.0);
        // Case 2: negative == positive → hinge saturates at exactly margin.
        let tape = scalar_tape();
        let pred = ArrayD::from_elem(IxDyn(&[1, 3, 4, 4]), 0.9f64);
        let (p, t, j) = (
            tape.constant(pred),
            tape.constant(img.clone()),
            tape.constant(img),
        );
        let l = temperature_triplet_loss(&tape, p, t, j, &spec);
        assert!((tape.scalar_value(l) - spec.margin).abs() < 1e-12);
    }

    #[test]
    fn perceptual_loss_zero_on_identical_inputs_and_seeded() {
        let mut rng = RunSeed(9).stream("perc");
        let ex = PerceptualExtractor::<f64>::new(3, &mut rng);
        let tape = scalar_tape();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let img = ArrayD::from_shape_simple_fn(IxDyn(&[1, 3, 16, 16]), || {
            r.random_range(-1.0..1.0)
        });
        let a = tape.constant(img.clone());
        let b = tape.constant(img.clone());
        let l = perceptual_loss(&tape, &ex, a, b);
        assert_eq!(tape.scalar_value(l), 0.0);
        // Same seed → same extractor → same loss on differing inputs.
        let ex2 = PerceptualExtractor::<f64>::new(3, &mut RunSeed(9).stream("perc"));
        let shifted = img.mapv(|v| (v + 0.3).clamp(-1.0, 1.0));
        let t1 = scalar_tape();
        let l1 = perceptual_loss(
            &t1,
            &ex,
            t1.constant(img.clone()),
            t1.constant(shifted.clone()),
        );
        let t2 = scalar_tape();
        let l2 = perceptual_loss(&t2, &ex2, t2.constant(img), t2.constant(shifted));
        assert_eq!(t1.scalar_value(l1), t2.scalar_value(l2));
    }

    #[test]
    fn fft_global_dc_offset_frozen_value() {
        // target = pred + 0.1 with positive DC on both: amplitudes differ only
        // in the DC bin (by 0.1·H·W per plane), phases are identical.
        // L = ½ · (0.1·H·W)/(H·(W/2+1)) = ½ · 0.1·64/40 = 0.08.
        let (h, w) = (8usize, 8usize);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let base = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, h, w]), || {
            rng.random_range(0.2..0.4)
        });
        let shifted = base.mapv(|v| v + 0.1);
        let tape = scalar_tape();
        let plan = DftPlan::<f64>::new(h, w);
        let a = tape.constant(base);
        let b = tape.constant(shifted);
        let l = fft_global_loss(&tape, a, b, &plan, &FourierLossOpts::default());
        assert!((tape.scalar_value(l) - 0.08).abs() < 1e-9);
    }

    #[test]
    fn fft_loss_zero_iff_identical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let img = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 8, 8]), || {
            rng.random_range(-1.0..1.0)
        });
        let tape = scalar_tape();
        let plan = DftPlan::<f64>::new(8, 8);
        let a = tape.constant(img.clone());
        let b = tape.constant(img);
        let l = fft_global_loss(&tape, a, b, &plan, &FourierLossOpts::default());
        assert_eq!(tape.scalar_value(l), 0.0);
    }

    #[test]
    fn fft_patch_loss_averages_over_cells_and_counts() {
        reset_patch_split_calls();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let a0 = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 8, 8]), || {
            rng.random_range(-1.0..1.0)
        });
        let b0 = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 8, 8]), || {
            rng.random_range(-1.0..1.0)
        });
        let tape = scalar_tape();
        let plan = DftPlan::<f64>::new(2, 2);
        let a = tape.constant(a0.clone());
        let b = tape.constant(b0.clone());
        let l = fft_patch_loss(&tape, a, b, &plan, &FourierLossOpts::default());
        assert_eq!(patch_split_calls(), 2);
        // Oracle: mean of per-patch global losses.
        let mut expected = 0.0;
        let t2 = scalar_tape();
        let av = t2.constant(a0);
        let bv = t2.constant(b0);
        let ap = split_patches_var(&t2, av);
        let bp = split_patches_var(&t2, bv);
        for k in 0..PATCH_COUNT {
            expected += t2.scalar_value(fft_global_loss(
                &t2,
                ap[k],
                bp[k],
                &plan,
                &FourierLossOpts::default(),
            ));
        }
        expected /= PATCH_COUNT as f64;
        assert!((tape.scalar_value(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn wrap_phase_flag_changes_only_wrapped_bins() {
        // Two pure phasors at the same frequency with angles +3.0 and -3.0:
        // raw difference 6.0, wrapped difference 2π - 6.0 ≈ 0.283.
        let (h, w) = (4usize, 4usize);
        let mk = |angle: f64| {
            ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |ix| {
                let x = ix[3] as f64;
                (2.0 * std::f64::consts::PI * x / w as f64 + angle).cos()
            })
        };
        let tape = scalar_tape();
        let plan = DftPlan::<f64>::new(h, w);
        let a = tape.constant(mk(3.0));
        let b = tape.constant(mk(-3.0));
        let raw = fft_global_loss(&tape, a, b, &plan, &FourierLossOpts { wrap_phase: false });
        let wrapped =
            fft_global_loss(&tape, a, b, &plan, &FourierLossOpts { wrap_phase: true });
        let (raw_v, wrap_v) = (tape.scalar_value(raw), tape.scalar_value(wrapped));
        assert!(raw_v > wrap_v, "wrapping must shrink the phase term: {raw_v} vs {wrap_v}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pred0 = ArrayD::from_shape_simple_fn(IxDyn(&[1, 3, 8, 8]), || {
            rng.random_range(-0.9..0.9)
        });
        let tgt = ArrayD::from_shape_simple_fn(IxDyn(&[1, 3, 8, 8]), || {
            rng.random_range(-0.9..0.9)
        });
        let jit = tgt.mapv(|v: f64| (v * 0.8).clamp(-1.0, 1.0));
        let spec = TripletSpec::default();
        let opts = FourierLossOpts::default();
        let plan = DftPlan::<f64>::new(8, 8);
        let perc = PerceptualExtractor::<f64>::new(3, &mut RunSeed(1).stream("perc"));

        type LossFn<'a> = Box<dyn Fn(&Tape<f64>, Var) -> Var + 'a>;
        let losses: Vec<(&str, LossFn, f64)> = vec![
            (
                "temperature",
                Box::new(|t: &Tape<f64>, p: Var| {
                    let tv = t.constant(tgt.clone());
                    let jv = t.constant(jit.clone());
                    temperature_triplet_loss(t, p, tv, jv, &spec)
                }),
                1e-4,
            ),
            (
                "patch",
                Box::new(|t: &Tape<f64>, p: Var| {
                    let tv = t.constant(tgt.clone());
                    let mut r = RunSeed(2).stream("neg");
                    patch_triplet_loss(t, p, tv, &spec, &mut r)
                }),
                1e-4,
            ),
            (
                "perceptual",
                Box::new(|t: &Tape<f64>, p: Var| {
                    let tv = t.constant(tgt.clone());
                    perceptual_loss(t, &perc, p, tv)
                }),
                1e-4,
            ),
            (
                "fft-global",
                Box::new(|t: &Tape<f64>, p: Var| {
                    let tv = t.constant(tgt.clone());
                    fft_global_loss(t, p, tv, &plan, &opts)
                }),
                1e-3,
            ),
        ];

        for (name, build, rtol) in losses {
            let tape = Tape::<f64>::new();
            let p = tape.leaf(pred0.clone());
            let l = build(&tape, p);
            let mut grads = tape.backward(l);
            let analytic = grads.take(p).expect("grad exists");
            let numeric = finite_diff(
                |x| {
                    let t = Tape::<f64>::new();
                    let p = t.leaf(x.clone());
                    let l = build(&t, p);
                    t.scalar_value(l)
                },
                &pred0,
                1e-5,
            );
            assert!(
                grads_close(&analytic, &numeric, rtol, 1e-7),
                "{name} gradient mismatch"
            );
        }
    }

    #[test]
    fn smooth_l1_frozen_values() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5f64, 2.0]).unwrap();
        let b = ArrayD::zeros(IxDyn(&[2]));
        // per-element: 0.5·0.25 = 0.125 and 2 − 0.5 = 1.5 → mean 0.8125.
        assert!((smooth_l1(&a, &b) - 0.8125).abs() < 1e-15);
        assert_eq!(smooth_l1(&b, &b), 0.0);
    }

    #[test]
    fn defaults_match_contract() {
        let t = AdversarialTargets::default();
        assert_eq!((t.real_label, t.fake_label), (0.9, 0.0));
        assert_eq!(TripletSpec::default().margin, 1.0);
        let w = LossWeights::default();
        assert_eq!(
            (w.gan, w.perceptual, w.temperature, w.patch, w.fft),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
    }
}
