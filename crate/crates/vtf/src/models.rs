//! The translation GAN: anti-aliased U-Net generator and spectrally
//! normalized patch discriminator.
//!
//! Every downsampling step is stride-1 convolution followed by an anti-alias
//! blur (reflect-padded binomial taps, stride 2) instead of strided
//! convolution, which removes the aliasing a strided conv introduces. All
//! stride-1 4×4 convolutions use asymmetric same padding so spatial dims are
//! preserved exactly; transposed 4×4 stride-2 convolutions double them
//! exactly. That makes the shape contracts precise at every scale.

use crate::autodiff::{Pad, Tape, Var};
use crate::blocks::{
    bind, Bound, Conv2d, ConvT2d, InstanceNorm2d, Mode, ParamStore, SpectralConv2d,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Leaky-ReLU slope used throughout the GAN.
pub const LEAKY_SLOPE: f64 = 0.2;

// ---------------------------------------------------------------------------
// Generator

/// Architecture hyperparameters of the U-Net generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel width of the first encoder module; deeper modules scale up to
    /// 8× this. 64 reproduces the full-scale network.
    pub base_width: usize,
    /// Anti-alias blur taps (3 → `[1, 2, 1] / 4`).
    pub blur_kernel: usize,
    /// Dropout rate on encoder modules 3–4 and decoder modules 2–3.
    pub dropout: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            in_channels: 3,
            out_channels: 3,
            base_width: 64,
            blur_kernel: 3,
            dropout: 0.5,
        }
    }
}

/// Number of encoder modules (each halves the spatial dims).
pub const ENC_MODULES: usize = 6;
/// Number of decoder modules before the output head.
pub const DEC_MODULES: usize = 5;

impl GeneratorSpec {
    /// Output channels of encoder modules 1..=6: `min(base·2^(i-1), 8·base)`.
    pub fn encoder_channels(&self) -> [usize; ENC_MODULES] {
        let mut ch = [0usize; ENC_MODULES];
        for (i, c) in ch.iter_mut().enumerate() {
            *c = (self.base_width << i).min(8 * self.base_width);
        }
        ch
    }

    /// Output channels of decoder modules 1..=5 (mirror of the encoder).
    pub fn decoder_channels(&self) -> [usize; DEC_MODULES] {
        let enc = self.encoder_channels();
        let mut ch = [0usize; DEC_MODULES];
        for (j, c) in ch.iter_mut().enumerate() {
            *c = enc[ENC_MODULES - 2 - j];
        }
        ch
    }

    /// Inputs must be divisible by this for exact encode/decode symmetry.
    pub const SPATIAL_DIVISOR: usize = 1 << ENC_MODULES;
}

struct EncBlock {
    conv: Conv2d,
    norm: Option<InstanceNorm2d>,
    dropout: bool,
}

struct DecBlock {
    deconv: ConvT2d,
    norm: InstanceNorm2d,
    dropout: bool,
}

/// U-Net generator: 6 anti-aliased encoder modules, 5 decoder modules with
/// skip concatenation, and a transposed-conv + tanh output head.
pub struct Generator<S: Scalar> {
    pub spec: GeneratorSpec,
    pub params: ParamStore<S>,
    enc: Vec<EncBlock>,
    dec: Vec<DecBlock>,
    head: ConvT2d,
}

impl<S: Scalar> Generator<S> {
    pub fn new(spec: GeneratorSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let enc_ch = spec.encoder_channels();
        let dec_ch = spec.decoder_channels();
        let mut enc = Vec::with_capacity(ENC_MODULES);
        for i in 0..ENC_MODULES {
            let cin = if i == 0 { spec.in_channels } else { enc_ch[i - 1] };
            let conv = Conv2d::new(
                &mut params,
                rng,
                &format!("enc{}", i + 1),
                cin,
                enc_ch[i],
                4,
                1,
                Pad::same(4),
            );
            let norm = if i == 0 {
                None
            } else {
                Some(InstanceNorm2d::new(
                    &mut params,
                    &format!("enc{}.norm", i + 1),
                    enc_ch[i],
                ))
            };
            enc.push(EncBlock {
                conv,
                norm,
                dropout: i == 2 || i == 3,
            });
        }
        let mut dec = Vec::with_capacity(DEC_MODULES);
        for j in 0..DEC_MODULES {
            let cin = if j == 0 {
                enc_ch[ENC_MODULES - 1]
            } else {
                dec_ch[j - 1] + enc_ch[ENC_MODULES - 1 - j]
            };
            let deconv = ConvT2d::new(
                &mut params,
                rng,
                &format!("dec{}", j + 1),
                cin,
                dec_ch[j],
                4,
                2,
                1,
            );
            let norm =
                InstanceNorm2d::new(&mut params, &format!("dec{}.norm", j + 1), dec_ch[j]);
            dec.push(DecBlock {
                deconv,
                norm,
                dropout: j == 1 || j == 2,
            });
        }
        let head = ConvT2d::new(
            &mut params,
            rng,
            "head",
            dec_ch[DEC_MODULES - 1] + enc_ch[0],
            spec.out_channels,
            4,
            2,
            1,
        );
        Generator {
            spec,
            params,
            enc,
            dec,
            head,
        }
    }

    pub fn bind(&self, tape: &Tape<S>, trainable: bool) -> Bound {
        bind(tape, &self.params, trainable)
    }

    /// Validates a `[N, in_channels, H, W]` input (dims divisible by 64).
    pub fn validate_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                context: "Generator::forward",
                expected: format!("[N, {}, H, W]", self.spec.in_channels),
                got: format!("{shape:?}"),
            });
        }
        let d = GeneratorSpec::SPATIAL_DIVISOR;
        if shape[2] == 0 || shape[2] % d != 0 || shape[3] % d != 0 {
            return Err(Error::InvalidArgument {
                context: "Generator::forward",
                message: format!(
                    "spatial dims must be positive multiples of {d}, got {}x{}",
                    shape[2], shape[3]
                ),
            });
        }
        Ok(())
    }

    /// Forward pass returning the output and every encoder feature map
    /// (for shape audits). `rng` seeds dropout masks in train mode.
    pub fn forward_features(
        &self,
        tape: &Tape<S>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        self.validate_input(&tape.shape(x))?;
        let mut skips = Vec::with_capacity(ENC_MODULES);
        let mut h = x;
        for blk in &self.enc {
            h = blk.conv.forward(tape, bound, h);
            if let Some(norm) = &blk.norm {
                h = norm.forward(tape, bound, h);
            }
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = tape.blurpool(h, self.spec.blur_kernel, 2);
            if blk.dropout && mode == Mode::Train {
                h = tape.dropout(h, self.spec.dropout, rng);
            }
            skips.push(h);
        }
        let mut d = h;
        for (j, blk) in self.dec.iter().enumerate() {
            let input = if j == 0 {
                d
            } else {
                tape.concat_channels(&[d, skips[ENC_MODULES - 1 - j]])
            };
            d = blk.deconv.forward(tape, bound, input);
            d = blk.norm.forward(tape, bound, d);
            d = tape.relu(d);
            if blk.dropout && mode == Mode::Train {
                d = tape.dropout(d, self.spec.dropout, rng);
            }
        }
        let head_in = tape.concat_channels(&[d, skips[0]]);
        let y = self.head.forward(tape, bound, head_in);
        Ok((tape.tanh(y), skips))
    }

    /// Translate `x` (visible, `[-1,1]`) to a thermal prediction in `(-1,1)`.
    pub fn forward(
        &self,
        tape: &Tape<S>,
        bound: &Bound,
        x: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        Ok(self.forward_features(tape, bound, x, mode, rng)?.0)
    }
}

// ---------------------------------------------------------------------------
// Discriminator

/// Architecture hyperparameters of the patch discriminator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiscriminatorSpec {
    /// Visible ⊕ thermal concatenation: 6.
    pub in_channels: usize,
    pub base_width: usize,
    pub blur_kernel: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            in_channels: 6,
            base_width: 64,
            blur_kernel: 3,
        }
    }
}

/// Anti-aliased downsampling blocks before the logit head.
pub const DISC_BLOCKS: usize = 4;

impl DiscriminatorSpec {
    /// Channels of the four blocks: `[b, 2b, 4b, 8b]`.
    pub fn block_channels(&self) -> [usize; DISC_BLOCKS] {
        [
            self.base_width,
            2 * self.base_width,
            4 * self.base_width,
            8 * self.base_width,
        ]
    }
}

struct DiscBlock {
    conv: SpectralConv2d,
    norm: Option<InstanceNorm2d>,
}

/// Patch discriminator over visible ⊕ thermal pairs. All convolutions are
/// spectrally normalized; four anti-aliased halvings produce a
/// `⌈H/16⌉ × ⌈W/16⌉` map of patch logits (16×16 at 256² input).
pub struct Discriminator<S: Scalar> {
    pub spec: DiscriminatorSpec,
    pub params: ParamStore<S>,
    /// Persistent spectral-norm `u` vectors (saved with checkpoints).
    pub buffers: ParamStore<S>,
    blocks: Vec<DiscBlock>,
    head: SpectralConv2d,
}

/// Spectrally normalized weights prepared once per phase, shared by every
/// forward inside that phase.
pub struct PreparedDisc {
    weights: Vec<Var>,
}

impl<S: Scalar> Discriminator<S> {
    pub fn new(spec: DiscriminatorSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let ch = spec.block_channels();
        let mut blocks = Vec::with_capacity(DISC_BLOCKS);
        for (i, &cout) in ch.iter().enumerate() {
            let cin = if i == 0 { spec.in_channels } else { ch[i - 1] };
            let conv = SpectralConv2d::new(
                &mut params,
                &mut buffers,
                rng,
                &format!("block{}", i + 1),
                cin,
                cout,
                4,
                1,
                Pad::same(4),
            );
            let norm = if i == 0 {
                None
            } else {
                Some(InstanceNorm2d::new(
                    &mut params,
                    &format!("block{}.norm", i + 1),
                    cout,
                ))
            };
            blocks.push(DiscBlock { conv, norm });
        }
        let head = SpectralConv2d::new(
            &mut params,
            &mut buffers,
            rng,
            "head",
            ch[DISC_BLOCKS - 1],
            1,
            4,
            1,
            Pad::same(4),
        );
        Discriminator {
            spec,
            params,
            buffers,
            blocks,
            head,
        }
    }

    pub fn bind(&self, tape: &Tape<S>, trainable: bool) -> Bound {
        bind(tape, &self.params, trainable)
    }

    pub fn validate_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                context: "Discriminator::forward",
                expected: format!("[N, {}, H, W]", self.spec.in_channels),
                got: format!("{shape:?}"),
            });
        }
        if shape[2] < 16 || shape[3] < 16 {
            return Err(Error::InvalidArgument {
                context: "Discriminator::forward",
                message: format!(
                    "spatial dims must be at least 16, got {}x{}",
                    shape[2], shape[3]
                ),
            });
        }
        Ok(())
    }

    /// Normalizes every weight once (one power iteration per weight; `u`
    /// buffers advance only in train mode). The result is shared by all
    /// forwards within the phase, so real and fake passes see identical
    /// normalized weights.
    pub fn prepare(&mut self, tape: &Tape<S>, bound: &Bound, mode: Mode) -> PreparedDisc {
        let update = mode == Mode::Train;
        let mut weights = Vec::with_capacity(self.blocks.len() + 1);
        for blk in &self.blocks {
            weights.push(blk.conv.normalized_weight(tape, bound, &mut self.buffers, update));
        }
        weights.push(
            self.head
                .normalized_weight(tape, bound, &mut self.buffers, update),
        );
        PreparedDisc { weights }
    }

    /// Patch logits for `x = visible ⊕ thermal`: `[N, 1, ⌈H/16⌉, ⌈W/16⌉]`.
    pub fn forward_prepared(
        &self,
        tape: &Tape<S>,
        bound: &Bound,
        prep: &PreparedDisc,
        x: Var,
    ) -> Result<Var> {
        self.validate_input(&tape.shape(x))?;
        let mut h = x;
        for (i, blk) in self.blocks.iter().enumerate() {
            h = blk.conv.forward(tape, bound, prep.weights[i], h);
            if let Some(norm) = &blk.norm {
                h = norm.forward(tape, bound, h);
            }
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = tape.blurpool(h, self.spec.blur_kernel, 2);
        }
        Ok(self
            .head
            .forward(tape, bound, prep.weights[DISC_BLOCKS], h))
    }

    /// Real and fake passes sharing one weight normalization.
    pub fn forward_pair(
        &mut self,
        tape: &Tape<S>,
        bound: &Bound,
        mode: Mode,
        x_a: Var,
        x_b: Var,
    ) -> Result<(Var, Var)> {
        let prep = self.prepare(tape, bound, mode);
        let ya = self.forward_prepared(tape, bound, &prep, x_a)?;
        let yb = self.forward_prepared(tape, bound, &prep, x_b)?;
        Ok((ya, yb))
    }

    pub fn forward_single(
        &mut self,
        tape: &Tape<S>,
        bound: &Bound,
        mode: Mode,
        x: Var,
    ) -> Result<Var> {
        let prep = self.prepare(tape, bound, mode);
        self.forward_prepared(tape, bound, &prep, x)
    }
}
