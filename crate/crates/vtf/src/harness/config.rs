//! Training configuration: one TOML file drives every trainer.
//!
//! Unknown keys are rejected, missing keys fall back to defaults, and the
//! canonical serialization is hashed so evaluation reports can name the exact
//! configuration that produced a checkpoint.

use crate::dataio::JitterParams;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

/// Which model the run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// GAN with the adversarial/perceptual/temperature/patch losses.
    VtfGan,
    /// `vtf_gan` plus the patch-level Fourier loss.
    VtfGanFftP,
    /// `vtf_gan` plus the global Fourier loss.
    VtfGanFftG,
    /// Conditional denoising-diffusion baseline on grayscale pairs.
    VtfDiff,
}

impl Variant {
    pub fn is_gan(self) -> bool {
        !matches!(self, Variant::VtfDiff)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::VtfGan => "vtf_gan",
            Variant::VtfGanFftP => "vtf_gan_fft_p",
            Variant::VtfGanFftG => "vtf_gan_fft_g",
            Variant::VtfDiff => "vtf_diff",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss terms that can be removed for ablation runs (GAN variants only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Drop the temperature-consistency triplet.
    Temp,
    /// Drop the patch triplet.
    Patch,
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Temp => "temp",
            Ablation::Patch => "patch",
        })
    }
}

/// Everything a training run needs. Loaded from TOML; unknown keys error.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Manifest of the paired dataset (see `dataio::Manifest`).
    pub data_manifest: PathBuf,
    /// Run directory: trace, checkpoints, and reports land here.
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Side length of the square training images.
    pub resolution: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional hard cap on total optimization steps across all epochs.
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Width of the narrowest layer; deeper layers scale from it.
    pub base_width: usize,
    /// Enables dynamic loss scaling (for reduced-precision training).
    pub mixed_precision: bool,
    /// Loss terms removed from the GAN objective.
    pub ablate: Vec<Ablation>,
    pub weights: LossWeights,
    /// Augmentation for the temperature triplet's negative.
    pub jitter: JitterParams,
    /// Diffusion chain length (`vtf_diff` only).
    pub diffusion_steps: usize,
    /// Also checkpoint every N steps (a final checkpoint is always written).
    pub checkpoint_every: Option<usize>,
    /// Wrap Fourier phase differences into `(-π, π]`.
    pub wrap_phase: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::VtfGan,
            data_manifest: PathBuf::new(),
            out_dir: PathBuf::new(),
            seed: 0,
            resolution: 256,
            batch_size: 8,
            epochs: 1,
            max_steps: None,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.99,
            base_width: 64,
            mixed_precision: false,
            ablate: Vec::new(),
            weights: LossWeights::default(),
            jitter: JitterParams::default(),
            diffusion_steps: 500,
            checkpoint_every: None,
            wrap_phase: false,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.data_manifest.as_os_str().is_empty() {
            return fail("data_manifest must be set".into());
        }
        if self.out_dir.as_os_str().is_empty() {
            return fail("out_dir must be set".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be at least 1".into());
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be at least 1 when given".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive and finite, got {}", self.lr));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.base_width == 0 {
            return fail("base_width must be at least 1".into());
        }
        if self.variant.is_gan() {
            if self.resolution == 0 || self.resolution % 64 != 0 {
                return fail(format!(
                    "GAN variants need resolution divisible by 64, got {}",
                    self.resolution
                ));
            }
        } else {
            if self.resolution < 8 || self.resolution % 2 != 0 {
                return fail(format!(
                    "diffusion needs an even resolution of at least 8, got {}",
                    self.resolution
                ));
            }
            if !self.ablate.is_empty() {
                return fail("ablate applies only to the GAN variants".into());
            }
        }
        for term in [Ablation::Temp, Ablation::Patch] {
            if self.ablate.iter().filter(|a| **a == term).count() > 1 {
                return fail(format!("ablate lists {term} twice"));
            }
        }
        if self.diffusion_steps == 0 {
            return fail("diffusion_steps must be at least 1".into());
        }
        if self.checkpoint_every == Some(0) {
            return fail("checkpoint_every must be at least 1 when given".into());
        }
        for (name, w) in [
            ("gan", self.weights.gan),
            ("perceptual", self.weights.perceptual),
            ("temperature", self.weights.temperature),
            ("patch", self.weights.patch),
            ("fft", self.weights.fft),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return fail(format!("weights.{name} must be finite and >= 0, got {w}"));
            }
        }
        Ok(())
    }

    /// Hash of the canonical serialization; identifies the full configuration
    /// in reports.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex_digest(text.as_bytes())
    }

    /// Hash of only the state-bearing fields: two configs with the same
    /// signature produce interchangeable checkpoints (resuming under a longer
    /// `max_steps` or a different `out_dir` is fine; changing the model,
    /// data order, or optimizer is not).
    pub fn state_signature(&self) -> String {
        let key = format!(
            "{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{:?}|{:?}|{:?}|{}|{}",
            self.variant,
            self.data_manifest.display(),
            self.seed,
            self.resolution,
            self.batch_size,
            self.lr,
            self.adam_beta1,
            self.adam_beta2,
            self.base_width,
            self.mixed_precision,
            self.ablate,
            self.weights,
            self.jitter,
            self.diffusion_steps,
            self.wrap_phase,
        );
        hex_digest(key.as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> TrainConfig {
        TrainConfig {
            data_manifest: PathBuf::from("data/manifest.json"),
            out_dir: PathBuf::from("runs/demo"),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn toml_roundtrip_preserves_config() {
        let mut cfg = valid();
        cfg.variant = Variant::VtfGanFftP;
        cfg.max_steps = Some(300);
        cfg.ablate = vec![Ablation::Temp];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        cfg.save(&path).unwrap();
        let loaded = TrainConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let cfg: TrainConfig = toml::from_str(
            "data_manifest = \"d/m.json\"\nout_dir = \"runs/x\"\n",
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::VtfGan);
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!(cfg.adam_beta1, 0.5);
        assert_eq!(cfg.adam_beta2, 0.99);
        assert_eq!(cfg.resolution, 256);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<TrainConfig>("learning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn variant_names_roundtrip() {
        for (v, name) in [
            (Variant::VtfGan, "vtf_gan"),
            (Variant::VtfGanFftP, "vtf_gan_fft_p"),
            (Variant::VtfGanFftG, "vtf_gan_fft_g"),
            (Variant::VtfDiff, "vtf_diff"),
        ] {
            assert_eq!(v.name(), name);
            let toml_text = format!("variant = \"{name}\"\ndata_manifest = \"m\"\nout_dir = \"o\"");
            let cfg: TrainConfig = toml::from_str(&toml_text).unwrap();
            assert_eq!(cfg.variant, v);
        }
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut cfg = valid();
        cfg.resolution = 100;
        assert!(cfg.validate().is_err(), "GAN resolution must divide by 64");

        let mut cfg = valid();
        cfg.variant = Variant::VtfDiff;
        cfg.resolution = 15;
        assert!(cfg.validate().is_err(), "odd diffusion resolution");
        cfg.resolution = 32;
        assert!(cfg.validate().is_ok());
        cfg.ablate = vec![Ablation::Patch];
        assert!(cfg.validate().is_err(), "ablation is GAN-only");

        let mut cfg = valid();
        cfg.ablate = vec![Ablation::Temp, Ablation::Temp];
        assert!(cfg.validate().is_err(), "duplicate ablation");

        let mut cfg = valid();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err(), "zero lr");

        let mut cfg = valid();
        cfg.adam_beta2 = 1.0;
        assert!(cfg.validate().is_err(), "beta2 = 1");

        let mut cfg = valid();
        cfg.weights.patch = -1.0;
        assert!(cfg.validate().is_err(), "negative weight");
    }

    #[test]
    fn hash_tracks_every_field_signature_only_state() {
        let a = valid();
        let mut b = valid();
        b.max_steps = Some(500);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(
            a.state_signature(),
            b.state_signature(),
            "max_steps does not change training state"
        );
        let mut c = valid();
        c.seed = 7;
        assert_ne!(a.state_signature(), c.state_signature());
        let mut d = valid();
        d.out_dir = PathBuf::from("runs/elsewhere");
        assert_eq!(a.state_signature(), d.state_signature());
        assert_ne!(a.hash(), d.hash());
    }
}
