//! Conditional denoising-diffusion baseline: a squared-cosine noise
//! schedule, the closed-form forward process, a small two-scale UNet that
//! predicts the injected noise from `(x_t, condition, t)`, and the ancestral
//! sampler.
//!
//! The denoiser works on single-channel images (thermal luma) conditioned on
//! a single-channel rendering of the visible image, concatenated on the
//! channel axis. Timesteps enter through a sinusoidal embedding and a shared
//! MLP, injected per block as learned per-channel shifts.

use crate::autodiff::{Tape, Var};
use crate::blocks::{
    bind, Bound, Conv2d, ConvT2d, InstanceNorm2d, Linear, ParamStore, SelfAttention2d,
};
use crate::autodiff::Pad;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4, Axis};
use rand::prelude::Distribution;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Default diffusion horizon.
pub const DEFAULT_TIMESTEPS: usize = 500;
/// Squared-cosine schedule offset.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip for per-step noise rates.
pub const MAX_BETA: f64 = 0.999;

/// Per-step noise rates `β_t` and cumulative signal rates `ᾱ_t` for
/// `t = 1..=T` (`ᾱ_0 = 1`). After clipping `β`, the cumulative products are
/// recomputed from the clipped rates so the two views always agree.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// The squared-cosine schedule: `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`
    /// with `s = 0.008`, `ᾱ_t = f(t)/f(0)`, `β_t = 1 − ᾱ_t/ᾱ_{t−1}` clipped
    /// to `MAX_BETA`.
    pub fn squared_cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument {
                context: "NoiseSchedule::squared_cosine",
                message: "need at least one step".into(),
            });
        }
        let f = |t: f64| {
            let x = ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET))
                * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for t in 1..=steps {
            let ab = f(t as f64) / f0;
            betas.push((1.0 - ab / prev).min(MAX_BETA));
            prev = ab;
        }
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for &b in &betas {
            alpha_bars.push(alpha_bars.last().unwrap() * (1.0 - b));
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.len(), "timestep {t} outside 1..={}", self.len());
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `t ∈ 0..=T` (`ᾱ_0 = 1`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.len(), "timestep {t} outside 0..={}", self.len());
        self.alpha_bars[t]
    }
}

/// Uniform timesteps in `1..=T`, one per batch row.
pub fn sample_timesteps(schedule: &NoiseSchedule, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    (0..n).map(|_| rng.random_range(1..=schedule.len())).collect()
}

/// Standard-normal noise shaped like a batch.
pub fn gaussian_like<S: Scalar>(
    shape: (usize, usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Array4<S> {
    let normal = rand_distr::Normal::new(0.0f64, 1.0).expect("valid std");
    Array4::from_shape_simple_fn(shape, || S::from_f64(normal.sample(rng)))
}

/// Closed-form forward process: `x_t = √ᾱ_t · x₀ + √(1−ᾱ_t) · ε`, with a
/// per-sample timestep.
pub fn q_sample<S: Scalar>(
    x0: &Array4<S>,
    eps: &Array4<S>,
    t: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Array4<S>> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            context: "q_sample",
            expected: format!("{:?}", x0.shape()),
            got: format!("{:?}", eps.shape()),
        });
    }
    if t.len() != x0.shape()[0] {
        return Err(Error::ShapeMismatch {
            context: "q_sample",
            expected: format!("{} timesteps", x0.shape()[0]),
            got: format!("{}", t.len()),
        });
    }
    let mut out = Array4::zeros(x0.raw_dim());
    for (n, &tn) in t.iter().enumerate() {
        let ab = schedule.alpha_bar(tn);
        let (cs, cn) = (S::from_f64(ab.sqrt()), S::from_f64((1.0 - ab).sqrt()));
        let x = x0.index_axis(Axis(0), n);
        let e = eps.index_axis(Axis(0), n);
        let mut o = out.index_axis_mut(Axis(0), n);
        o.assign(&(&x * cs + &e * cn));
    }
    Ok(out)
}

/// Sinusoidal timestep embedding: `dim/2` log-spaced frequencies, sin block
/// then cos block. `dim` must be even.
pub fn sinusoidal_embedding<S: Scalar>(t: &[usize], dim: usize) -> Array2<S> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut out = Array2::zeros((t.len(), dim));
    for (n, &tn) in t.iter().enumerate() {
        for i in 0..half {
            let freq = 10_000f64.powf(-(i as f64) / half as f64);
            let angle = tn as f64 * freq;
            out[[n, i]] = S::from_f64(angle.sin());
            out[[n, half + i]] = S::from_f64(angle.cos());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Denoiser network

/// Channel plan of the noise-prediction UNet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserSpec {
    /// Channels of the image being denoised.
    pub image_channels: usize,
    /// Channels of the conditioning image (channel-concatenated).
    pub cond_channels: usize,
    /// Width at full resolution; the downsampled scale doubles it.
    pub base_width: usize,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec {
            image_channels: 1,
            cond_channels: 1,
            base_width: 32,
        }
    }
}

/// Residual block with a per-channel timestep shift between its two convs.
struct ResBlock {
    norm1: InstanceNorm2d,
    conv1: Conv2d,
    temb: Linear,
    norm2: InstanceNorm2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: usize,
    ) -> Self {
        ResBlock {
            norm1: InstanceNorm2d::new(store, &format!("{name}.norm1"), cin),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, 1, Pad::symmetric(1)),
            temb: Linear::new(store, rng, &format!("{name}.temb"), temb_dim, cout),
            norm2: InstanceNorm2d::new(store, &format!("{name}.norm2"), cout),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, Pad::symmetric(1)),
            skip: (cin != cout).then(|| {
                Conv2d::new(store, rng, &format!("{name}.skip"), cin, cout, 1, 1, Pad::symmetric(0))
            }),
        }
    }

    fn forward<S: Scalar>(&self, tape: &Tape<S>, bound: &Bound, x: Var, temb: Var) -> Var {
        let mut h = self.conv1.forward(tape, bound, tape.silu(self.norm1.forward(tape, bound, x)));
        let shift = self.temb.forward(tape, bound, temb);
        h = tape.add_chan_vec(h, shift);
        h = self.conv2.forward(tape, bound, tape.silu(self.norm2.forward(tape, bound, h)));
        let sk = match &self.skip {
            Some(c) => c.forward(tape, bound, x),
            None => x,
        };
        tape.add(h, sk)
    }
}

/// Two-scale conditional noise predictor: full resolution at `base_width`,
/// half resolution at `2·base_width` with self-attention, one skip
/// connection across the downsample.
pub struct Denoiser<S: Scalar> {
    pub spec: DenoiserSpec,
    pub params: ParamStore<S>,
    stem: Conv2d,
    rb_in: ResBlock,
    down: Conv2d,
    rb_mid1: ResBlock,
    attn: SelfAttention2d,
    rb_mid2: ResBlock,
    up: ConvT2d,
    rb_out: ResBlock,
    head: Conv2d,
    t_mlp1: Linear,
    t_mlp2: Linear,
}

impl<S: Scalar> Denoiser<S> {
    pub fn new(spec: DenoiserSpec, rng: &mut ChaCha8Rng) -> Self {
        assert!(spec.base_width >= 2 && spec.base_width % 2 == 0);
        let mut p = ParamStore::new();
        let w = spec.base_width;
        let temb_dim = 4 * w;
        let stem = Conv2d::new(
            &mut p,
            rng,
            "stem",
            spec.image_channels + spec.cond_channels,
            w,
            3,
            1,
            Pad::symmetric(1),
        );
        let rb_in = ResBlock::new(&mut p, rng, "in", w, w, temb_dim);
        let down = Conv2d::new(&mut p, rng, "down", w, 2 * w, 3, 2, Pad::symmetric(1));
        let rb_mid1 = ResBlock::new(&mut p, rng, "mid1", 2 * w, 2 * w, temb_dim);
        let attn = SelfAttention2d::new(&mut p, rng, "attn", 2 * w);
        let rb_mid2 = ResBlock::new(&mut p, rng, "mid2", 2 * w, 2 * w, temb_dim);
        let up = ConvT2d::new(&mut p, rng, "up", 2 * w, w, 4, 2, 1);
        let rb_out = ResBlock::new(&mut p, rng, "out", 2 * w, w, temb_dim);
        let head = Conv2d::new(&mut p, rng, "head", w, spec.image_channels, 3, 1, Pad::symmetric(1));
        let t_mlp1 = Linear::new(&mut p, rng, "temb.fc1", w, temb_dim);
        let t_mlp2 = Linear::new(&mut p, rng, "temb.fc2", temb_dim, temb_dim);
        Denoiser {
            spec,
            params: p,
            stem,
            rb_in,
            down,
            rb_mid1,
            attn,
            rb_mid2,
            up,
            rb_out,
            head,
            t_mlp1,
            t_mlp2,
        }
    }

    pub fn bind(&self, tape: &Tape<S>, trainable: bool) -> Bound {
        bind(tape, &self.params, trainable)
    }

    /// Validates the `(x_t, condition)` shapes: matching batch and spatial
    /// dims, channels as configured, spatial dims even and at least 8.
    pub fn validate_input(&self, x_shape: &[usize], cond_shape: &[usize]) -> Result<()> {
        if x_shape.len() != 4 || x_shape[1] != self.spec.image_channels {
            return Err(Error::ShapeMismatch {
                context: "Denoiser::forward",
                expected: format!("[N, {}, H, W] image", self.spec.image_channels),
                got: format!("{x_shape:?}"),
            });
        }
        if cond_shape.len() != 4 || cond_shape[1] != self.spec.cond_channels {
            return Err(Error::ShapeMismatch {
                context: "Denoiser::forward",
                expected: format!("[N, {}, H, W] condition", self.spec.cond_channels),
                got: format!("{cond_shape:?}"),
            });
        }
        if x_shape[0] != cond_shape[0]
            || x_shape[2] != cond_shape[2]
            || x_shape[3] != cond_shape[3]
        {
            return Err(Error::ShapeMismatch {
                context: "Denoiser::forward",
                expected: format!("condition matching {x_shape:?}"),
                got: format!("{cond_shape:?}"),
            });
        }
        let (h, w) = (x_shape[2], x_shape[3]);
        if h < 8 || w < 8 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument {
                context: "Denoiser::forward",
                message: format!("spatial dims must be even and at least 8, got {h}x{w}"),
            });
        }
        Ok(())
    }

    /// Predicted noise for `x_t` at per-sample timesteps `t`, conditioned on
    /// `cond`. Inputs must satisfy [`Denoiser::validate_input`].
    pub fn forward(&self, tape: &Tape<S>, bound: &Bound, x_t: Var, cond: Var, t: &[usize]) -> Var {
        debug_assert_eq!(tape.shape(x_t)[0], t.len());
        let emb0 = tape.constant(
            sinusoidal_embedding::<S>(t, self.spec.base_width).into_dyn(),
        );
        let temb = self.t_mlp2.forward(
            tape,
            bound,
            tape.silu(self.t_mlp1.forward(tape, bound, emb0)),
        );

        let h0 = self.stem.forward(tape, bound, tape.concat_channels(&[x_t, cond]));
        let h1 = self.rb_in.forward(tape, bound, h0, temb);
        let h2 = self.down.forward(tape, bound, h1);
        let h3 = self.rb_mid1.forward(tape, bound, h2, temb);
        let h4 = self.attn.forward(tape, bound, h3);
        let h5 = self.rb_mid2.forward(tape, bound, h4, temb);
        let h6 = self.up.forward(tape, bound, h5);
        let h7 = self
            .rb_out
            .forward(tape, bound, tape.concat_channels(&[h6, h1]), temb);
        self.head.forward(tape, bound, h7)
    }

    /// One no-grad evaluation of the noise prediction on plain arrays.
    pub fn predict_eps(&self, x_t: &Array4<S>, cond: &Array4<S>, t: usize) -> Result<Array4<S>> {
        self.validate_input(x_t.shape(), cond.shape())?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let xv = tape.constant(x_t.clone().into_dyn());
        let cv = tape.constant(cond.clone().into_dyn());
        let ts = vec![t; x_t.shape()[0]];
        let out = self.forward(&tape, &bound, xv, cv, &ts);
        Ok(tape
            .value(out)
            .into_dimensionality()
            .expect("conv output is 4-D"))
    }

    /// Draws thermal samples for a batch of conditions by ancestral sampling.
    pub fn sample(
        &self,
        schedule: &NoiseSchedule,
        cond: &Array4<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array4<S>> {
        let shape = (
            cond.shape()[0],
            self.spec.image_channels,
            cond.shape()[2],
            cond.shape()[3],
        );
        ancestral_sample(|x, t| self.predict_eps(x, cond, t), schedule, shape, rng)
    }
}

/// Mean-squared noise-prediction loss: draws nothing itself — the caller
/// supplies per-sample timesteps and the noise realization, so training
/// steps stay replayable.
pub fn denoising_loss<S: Scalar>(
    tape: &Tape<S>,
    model: &Denoiser<S>,
    bound: &Bound,
    x0: &Array4<S>,
    cond: &Array4<S>,
    t: &[usize],
    eps: &Array4<S>,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    model.validate_input(x0.shape(), cond.shape())?;
    let xt = q_sample(x0, eps, t, schedule)?;
    let xv = tape.constant(xt.into_dyn());
    let cv = tape.constant(cond.clone().into_dyn());
    let pred = model.forward(tape, bound, xv, cv, t);
    let target = tape.constant(eps.clone().into_dyn());
    Ok(tape.mean_all(tape.square(tape.sub(pred, target))))
}

/// Ancestral sampler: starts from pure noise and walks `t = T..1` with
/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t) · ε̂)/√α_t + √β_t · z`, `z = 0` on the
/// final step. The result is clamped to `[-1, 1]`.
pub fn ancestral_sample<S: Scalar, F>(
    mut predict: F,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Array4<S>>
where
    F: FnMut(&Array4<S>, usize) -> Result<Array4<S>>,
{
    let mut x = gaussian_like::<S>(shape, rng);
    for t in (1..=schedule.len()).rev() {
        let eps_hat = predict(&x, t)?;
        if eps_hat.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                context: "ancestral_sample",
                expected: format!("{:?}", x.shape()),
                got: format!("{:?}", eps_hat.shape()),
            });
        }
        let beta = schedule.beta(t);
        let ab = schedule.alpha_bar(t);
        let coef = S::from_f64(beta / (1.0 - ab).sqrt());
        let inv_sqrt_alpha = S::from_f64(1.0 / (1.0 - beta).sqrt());
        x = (&x - &(eps_hat * coef)) * inv_sqrt_alpha;
        if t > 1 {
            let sigma = S::from_f64(beta.sqrt());
            let z = gaussian_like::<S>(shape, rng);
            x = &x + &(z * sigma);
        }
    }
    let one = S::one();
    Ok(x.mapv(|v| v.max(-one).min(one)))
}
