//! Training loop for the conditional diffusion baseline.
//!
//! Pairs are converted to grayscale: the visible image becomes the
//! conditioning plane, the thermal image the diffusion target. Timesteps and
//! noise realizations are drawn from streams keyed by the absolute step, so
//! runs replay bit-identically across checkpoint/resume boundaries.

use super::checkpoint::{
    ensure_dir, restore_params, step_dir, CheckpointMeta, CONFIG_FILE, DENOISER_ADAM_FILE,
    DENOISER_FILE,
};
use super::config::{TrainConfig, Variant};
use super::optim::{unscale_grads, Adam, AdamState, LossScaler};
use crate::autodiff::Tape;
use crate::blocks::collect_grads;
use crate::dataio::{stack_images, to_grayscale, Manifest, PairedDataset, Split};
use crate::diffusion::{
    denoising_loss, gaussian_like, sample_timesteps, Denoiser, DenoiserSpec, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::rng::RunSeed;
use crate::scalar::Scalar;
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Per-step noise-prediction loss log.
pub const DIFF_TRACE_FILE: &str = "trace.csv";
pub const DIFF_TRACE_HEADER: &str = "step,loss";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffStepRecord {
    pub step: u64,
    pub loss: f64,
    /// True when dynamic loss scaling skipped the update after an overflow.
    pub skipped: bool,
}

/// Trainer for the `vtf_diff` variant.
pub struct DiffusionTrainer<S: Scalar> {
    config: TrainConfig,
    config_hash: String,
    pub denoiser: Denoiser<S>,
    pub schedule: NoiseSchedule,
    opt: Adam,
    state: AdamState<S>,
    scaler: LossScaler,
    dataset: PairedDataset,
    seed: RunSeed,
    steps_done: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
    records: Vec<DiffStepRecord>,
}

impl<S: Scalar> DiffusionTrainer<S> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::build(config, None)
    }

    pub fn resume(config: TrainConfig, checkpoint: &Path) -> Result<Self> {
        Self::build(config, Some(checkpoint))
    }

    fn build(config: TrainConfig, checkpoint: Option<&Path>) -> Result<Self> {
        config.validate()?;
        if config.variant != Variant::VtfDiff {
            return Err(Error::Config(format!(
                "DiffusionTrainer covers vtf_diff; {} trains with GanTrainer",
                config.variant
            )));
        }
        let manifest = Manifest::load(&config.data_manifest)?;
        let dataset = PairedDataset::from_manifest(&manifest, Split::Train)?;
        if dataset.len() < config.batch_size {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} training pairs",
                config.batch_size,
                dataset.len()
            )));
        }
        let seed = RunSeed(config.seed);
        let denoiser = Denoiser::new(
            DenoiserSpec {
                base_width: config.base_width,
                ..DenoiserSpec::default()
            },
            &mut seed.stream("denoiser-init"),
        );
        let schedule = NoiseSchedule::squared_cosine(config.diffusion_steps)?;
        ensure_dir(&config.out_dir)?;
        let state = AdamState::new(&denoiser.params);
        let mut trainer = DiffusionTrainer {
            config_hash: config.hash(),
            opt: Adam::new(config.lr, config.adam_beta1, config.adam_beta2),
            scaler: LossScaler::new(config.mixed_precision),
            config,
            denoiser,
            schedule,
            state,
            dataset,
            seed,
            steps_done: 0,
            epoch: 0,
            pos: 0,
            order: Vec::new(),
            records: Vec::new(),
        };
        match checkpoint {
            None => trainer.reset_history()?,
            Some(dir) => {
                let meta = CheckpointMeta::load(dir)?;
                meta.check_resumable(&trainer.config)?;
                restore_params(&mut trainer.denoiser.params, &dir.join(DENOISER_FILE))?;
                trainer.state =
                    AdamState::load(&dir.join(DENOISER_ADAM_FILE), &trainer.denoiser.params)?;
                if meta.scalers.len() != 1 {
                    return Err(Error::Checkpoint(format!(
                        "expected one scaler state, got {}",
                        meta.scalers.len()
                    )));
                }
                trainer.scaler.restore(meta.scalers[0]);
                trainer.steps_done = meta.step;
                trainer.epoch = meta.epoch;
                trainer.pos = meta.pos_in_epoch;
                trainer.records = trainer.truncate_history(meta.step)?;
            }
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn completed_steps(&self) -> u64 {
        self.steps_done
    }

    pub fn records(&self) -> &[DiffStepRecord] {
        &self.records
    }

    pub fn planned_steps(&self) -> u64 {
        let per_epoch = (self.dataset.len() / self.config.batch_size) as u64;
        let by_epochs = per_epoch * self.config.epochs as u64;
        match self.config.max_steps {
            Some(m) => by_epochs.min(m as u64),
            None => by_epochs,
        }
    }

    pub fn into_denoiser(self) -> (Denoiser<S>, NoiseSchedule) {
        (self.denoiser, self.schedule)
    }

    pub fn train(&mut self) -> Result<()> {
        self.train_with(|_| {})
    }

    /// Like [`train`](Self::train), invoking `on_step` after every step.
    pub fn train_with(&mut self, mut on_step: impl FnMut(&DiffStepRecord)) -> Result<()> {
        let target = self.planned_steps();
        while self.steps_done < target {
            let record = self.step()?;
            on_step(&record);
            if let Some(every) = self.config.checkpoint_every {
                if self.steps_done % every as u64 == 0 && self.steps_done < target {
                    self.save_checkpoint(&step_dir(&self.config.out_dir, self.steps_done))?;
                }
            }
        }
        self.save_checkpoint(&step_dir(&self.config.out_dir, self.steps_done))?;
        Ok(())
    }

    pub fn step(&mut self) -> Result<DiffStepRecord> {
        let step_index = self.steps_done + 1;
        let indices = self.next_batch_indices();
        let (cond, x0) = self.load_training_batch(&indices)?;
        let t = sample_timesteps(
            &self.schedule,
            indices.len(),
            &mut self.seed.stream_indexed("timestep", &[step_index]),
        );
        let eps = gaussian_like::<S>(
            x0.dim(),
            &mut self.seed.stream_indexed("train-noise", &[step_index]),
        );

        let tape = Tape::new();
        let bound = self.denoiser.bind(&tape, true);
        let loss = denoising_loss(
            &tape,
            &self.denoiser,
            &bound,
            &x0,
            &cond,
            &t,
            &eps,
            &self.schedule,
        )?;
        let loss_value = tape.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                context: "training step",
                message: format!("denoising loss at step {step_index}"),
            });
        }

        let scaled = tape.affine(loss, self.scaler.scale(), 0.0);
        let mut grads = tape.backward(scaled);
        let mut grad_list = collect_grads(&mut grads, &bound, &self.denoiser.params);
        let grads_finite = unscale_grads(&mut grad_list, self.scaler.scale());
        let skipped = if grads_finite {
            self.scaler.observe(true);
            self.opt
                .step(&mut self.denoiser.params, &mut self.state, &grad_list)?;
            false
        } else if self.scaler.enabled() {
            self.scaler.observe(false);
            true
        } else {
            return Err(Error::NonFinite {
                context: "training step",
                message: format!("denoiser gradients at step {step_index}"),
            });
        };

        let record = DiffStepRecord {
            step: step_index,
            loss: loss_value,
            skipped,
        };
        self.steps_done = step_index;
        self.records.push(record);
        self.append_history(&record)?;
        Ok(record)
    }

    /// Draws thermal samples conditioned on the given visible grayscale batch
    /// (unit-signed `[N, 1, H, W]`). `draw` tags the sampling noise stream.
    pub fn sample(&self, cond: &Array4<S>, draw: u64) -> Result<Array4<S>> {
        self.denoiser.sample(
            &self.schedule,
            cond,
            &mut self.seed.stream_indexed("sample", &[draw]),
        )
    }

    fn next_batch_indices(&mut self) -> Vec<usize> {
        let bs = self.config.batch_size;
        if self.order.is_empty() {
            self.order = self.dataset.epoch_order(self.seed, self.epoch);
        }
        if self.pos + bs > self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.order = self.dataset.epoch_order(self.seed, self.epoch);
        }
        let indices = self.order[self.pos..self.pos + bs].to_vec();
        self.pos += bs;
        indices
    }

    /// Loads pairs as grayscale unit-signed `[N, 1, H, W]`: (visible
    /// condition, thermal target).
    fn load_training_batch(&self, indices: &[usize]) -> Result<(Array4<S>, Array4<S>)> {
        let res = self.config.resolution;
        let mut cond = Vec::with_capacity(indices.len());
        let mut x0 = Vec::with_capacity(indices.len());
        for &i in indices {
            let pair = self.dataset.load_pair::<S>(i)?;
            if pair.visible.height() != res || pair.visible.width() != res {
                return Err(Error::ShapeMismatch {
                    context: "DiffusionTrainer::step",
                    expected: format!("{res}x{res} images (config resolution)"),
                    got: format!(
                        "{}x{} for {}",
                        pair.visible.height(),
                        pair.visible.width(),
                        pair.id
                    ),
                });
            }
            cond.push(to_grayscale(&pair.visible)?.normalize()?);
            x0.push(to_grayscale(&pair.thermal)?.normalize()?);
        }
        Ok((stack_images(&cond)?, stack_images(&x0)?))
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        self.denoiser.params.save(&dir.join(DENOISER_FILE))?;
        self.state
            .save(&dir.join(DENOISER_ADAM_FILE), &self.denoiser.params)?;
        self.config.save(&dir.join(CONFIG_FILE))?;
        CheckpointMeta {
            variant: self.config.variant,
            step: self.steps_done,
            epoch: self.epoch,
            pos_in_epoch: self.pos,
            seed: self.config.seed,
            config_hash: self.config_hash.clone(),
            state_signature: self.config.state_signature(),
            scalers: vec![self.scaler.state()],
        }
        .save(dir)
    }

    fn trace_path(&self) -> PathBuf {
        self.config.out_dir.join(DIFF_TRACE_FILE)
    }

    fn reset_history(&self) -> Result<()> {
        fs::write(self.trace_path(), format!("{DIFF_TRACE_HEADER}\n"))
            .map_err(|e| Error::io(self.trace_path().display().to_string(), e))
    }

    fn append_history(&self, record: &DiffStepRecord) -> Result<()> {
        let path = self.trace_path();
        let mut f = fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        writeln!(f, "{},{}", record.step, record.loss)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn truncate_history(&self, up_to: u64) -> Result<Vec<DiffStepRecord>> {
        let path = self.trace_path();
        let mut kept = Vec::new();
        if path.exists() {
            let text =
                fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
            for line in text.lines().skip(1) {
                let mut fields = line.split(',');
                let (Some(step), Some(loss)) = (fields.next(), fields.next()) else {
                    return Err(Error::Checkpoint(format!("malformed trace row: {line}")));
                };
                let step: u64 = step
                    .parse()
                    .map_err(|e| Error::Checkpoint(format!("bad trace step {step}: {e}")))?;
                let loss: f64 = loss
                    .parse()
                    .map_err(|e| Error::Checkpoint(format!("bad trace loss {loss}: {e}")))?;
                if step <= up_to {
                    kept.push(DiffStepRecord {
                        step,
                        loss,
                        skipped: false,
                    });
                }
            }
        }
        let mut text = String::from(DIFF_TRACE_HEADER);
        text.push('\n');
        for r in &kept {
            text.push_str(&format!("{},{}\n", r.step, r.loss));
        }
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(kept)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_dataset, SynthesisSpec};
    use tempfile::TempDir;

    fn fixture(out: &Path, data: &Path) -> TrainConfig {
        let manifest_path = data.join("manifest.json");
        if !manifest_path.exists() {
            let spec = SynthesisSpec {
                count: 16,
                size: 16,
                seed: 3,
            };
            generate_dataset(&spec, data).unwrap();
        }
        TrainConfig {
            variant: Variant::VtfDiff,
            data_manifest: manifest_path,
            out_dir: out.to_path_buf(),
            seed: 21,
            resolution: 16,
            batch_size: 3,
            epochs: 10,
            max_steps: Some(2),
            base_width: 8,
            diffusion_steps: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn trains_samples_and_resumes_bitwise() {
        let tmp = TempDir::new().unwrap();
        let data = tmp.path().join("data");

        let mut cfg_a = fixture(&tmp.path().join("a"), &data);
        cfg_a.max_steps = Some(3);
        let mut full = DiffusionTrainer::<f32>::new(cfg_a.clone()).unwrap();
        full.train().unwrap();
        assert_eq!(full.records().len(), 3);
        assert!(full.records().iter().all(|r| r.loss.is_finite()));

        // Sampling yields clamped unit-signed images of the right shape.
        let (cond, _) = full.load_training_batch(&[0, 1]).unwrap();
        let sample = full.sample(&cond, 0).unwrap();
        assert_eq!(sample.shape(), &[2, 1, 16, 16]);
        assert!(sample.iter().all(|&v| (-1.0..=1.0).contains(&v)));

        let mut cfg_b = fixture(&tmp.path().join("b"), &data);
        cfg_b.max_steps = Some(1);
        let mut head = DiffusionTrainer::<f32>::new(cfg_b.clone()).unwrap();
        head.train().unwrap();
        let mut cfg_resume = cfg_b.clone();
        cfg_resume.max_steps = Some(3);
        let mut tail =
            DiffusionTrainer::<f32>::resume(cfg_resume, &step_dir(&cfg_b.out_dir, 1)).unwrap();
        tail.train().unwrap();

        for i in 0..full.denoiser.params.len() {
            assert_eq!(
                full.denoiser.params.array(i),
                tail.denoiser.params.array(i),
                "denoiser tensor {} diverged after resume",
                full.denoiser.params.name(i)
            );
        }
        let t_full = fs::read_to_string(cfg_a.out_dir.join(DIFF_TRACE_FILE)).unwrap();
        let t_tail = fs::read_to_string(tail.config().out_dir.join(DIFF_TRACE_FILE)).unwrap();
        assert_eq!(t_full, t_tail);
    }

    #[test]
    fn rejects_gan_variants() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = fixture(&tmp.path().join("run"), &tmp.path().join("data"));
        cfg.variant = Variant::VtfGan;
        cfg.resolution = 64;
        let err = DiffusionTrainer::<f32>::new(cfg).err().expect("must reject");
        assert!(matches!(err, Error::Config(_)));
    }
}
