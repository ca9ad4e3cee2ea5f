//! The GAN training loop: alternating generator/discriminator phases with a
//! per-step loss trace, periodic checkpoints, and exact resume.
//!
//! Every random draw (epoch order, dropout masks, jitter, patch negatives)
//! comes from a stream keyed by the run seed and the absolute step or epoch
//! index, so a run replays bit-identically from any checkpoint — nothing but
//! the saved tensors carries state across steps.

use super::checkpoint::{
    ensure_dir, restore_params, step_dir, CheckpointMeta, CONFIG_FILE, DISCRIMINATOR_ADAM_FILE,
    DISCRIMINATOR_FILE, DISC_BUFFERS_FILE, GENERATOR_ADAM_FILE, GENERATOR_FILE,
};
use super::config::{Ablation, TrainConfig, Variant};
use super::optim::{unscale_grads, Adam, AdamState, LossScaler};
use crate::autodiff::{DftPlan, Tape};
use crate::blocks::{collect_grads, Mode};
use crate::dataio::{apply_jitter, stack_images, Manifest, PairedDataset, Split};
use crate::error::{Error, Result};
use crate::image::PATCH_GRID_SIDE;
use crate::losses::{
    bce_with_logits_mean, fft_global_loss, fft_patch_loss, patch_triplet_loss, perceptual_loss,
    relativistic_g_loss, smooth_l1, temperature_triplet_loss, AdversarialTargets,
    FourierLossOpts, PerceptualExtractor, TripletSpec,
};
use crate::models::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use crate::rng::RunSeed;
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayD};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Per-step loss log, one CSV row per optimization step.
pub const TRACE_FILE: &str = "trace.csv";
/// Full step records (JSON lines), superset of the CSV columns.
pub const RECORDS_FILE: &str = "records.jsonl";
pub const TRACE_HEADER: &str = "step,L_GAN,L_perc,L_temp,L_patch,L_FFT,L_D_real,L_D_fake";

/// Losses of one optimization step. Ablated or variant-absent terms log 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_gan: f64,
    pub l_perc: f64,
    pub l_temp: f64,
    pub l_patch: f64,
    pub l_fft: f64,
    pub l_d_real: f64,
    pub l_d_fake: f64,
    /// Pixel-space Huber distance between prediction and target (logged only,
    /// never part of the objective).
    pub smooth_l1: f64,
    /// True when dynamic loss scaling skipped the update after an overflow.
    pub gen_skipped: bool,
    pub disc_skipped: bool,
}

impl StepRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.l_gan,
            self.l_perc,
            self.l_temp,
            self.l_patch,
            self.l_fft,
            self.l_d_real,
            self.l_d_fake
        )
    }
}

fn finite(component: &str, value: f64, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            context: "training step",
            message: format!("{component} at step {step}"),
        })
    }
}

/// Alternating two-phase trainer for the three GAN variants.
pub struct GanTrainer<S: Scalar> {
    config: TrainConfig,
    config_hash: String,
    pub generator: Generator<S>,
    pub discriminator: Discriminator<S>,
    perceptual: PerceptualExtractor<S>,
    targets: AdversarialTargets,
    triplet: TripletSpec,
    fourier: FourierLossOpts,
    plan: Option<DftPlan<S>>,
    opt: Adam,
    gen_state: AdamState<S>,
    disc_state: AdamState<S>,
    gen_scaler: LossScaler,
    disc_scaler: LossScaler,
    dataset: PairedDataset,
    seed: RunSeed,
    steps_done: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
    records: Vec<StepRecord>,
}

struct GenPhase<S: Scalar> {
    l_gan: f64,
    l_perc: f64,
    l_temp: f64,
    l_patch: f64,
    l_fft: f64,
    fake: ArrayD<S>,
    skipped: bool,
}

struct DiscPhase {
    l_d_real: f64,
    l_d_fake: f64,
    skipped: bool,
}

impl<S: Scalar> GanTrainer<S> {
    /// Builds a fresh trainer and truncates any previous trace in `out_dir`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::build(config, None)
    }

    /// Restores a trainer from a checkpoint directory; training continues at
    /// the next step exactly as if the original run had never stopped.
    pub fn resume(config: TrainConfig, checkpoint: &Path) -> Result<Self> {
        Self::build(config, Some(checkpoint))
    }

    fn build(config: TrainConfig, checkpoint: Option<&Path>) -> Result<Self> {
        config.validate()?;
        if !config.variant.is_gan() {
            return Err(Error::Config(format!(
                "GanTrainer covers the GAN variants; {} trains with DiffusionTrainer",
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
        let generator = Generator::new(
            GeneratorSpec {
                base_width: config.base_width,
                ..GeneratorSpec::default()
            },
            &mut seed.stream("generator-init"),
        );
        let discriminator = Discriminator::new(
            DiscriminatorSpec {
                base_width: config.base_width,
                ..DiscriminatorSpec::default()
            },
            &mut seed.stream("discriminator-init"),
        );
        let perceptual = PerceptualExtractor::new(3, &mut seed.stream("perceptual-init"));
        let side = config.resolution;
        let plan = match config.variant {
            Variant::VtfGan => None,
            Variant::VtfGanFftP => Some(DftPlan::new(
                side / PATCH_GRID_SIDE,
                side / PATCH_GRID_SIDE,
            )),
            Variant::VtfGanFftG => Some(DftPlan::new(side, side)),
            Variant::VtfDiff => unreachable!("rejected above"),
        };
        ensure_dir(&config.out_dir)?;
        let gen_state = AdamState::new(&generator.params);
        let disc_state = AdamState::new(&discriminator.params);
        let mut trainer = GanTrainer {
            config_hash: config.hash(),
            opt: Adam::new(config.lr, config.adam_beta1, config.adam_beta2),
            gen_scaler: LossScaler::new(config.mixed_precision),
            disc_scaler: LossScaler::new(config.mixed_precision),
            targets: AdversarialTargets::default(),
            triplet: TripletSpec::default(),
            fourier: FourierLossOpts {
                wrap_phase: config.wrap_phase,
            },
            config,
            generator,
            discriminator,
            perceptual,
            plan,
            gen_state,
            disc_state,
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
                restore_params(&mut trainer.generator.params, &dir.join(GENERATOR_FILE))?;
                restore_params(
                    &mut trainer.discriminator.params,
                    &dir.join(DISCRIMINATOR_FILE),
                )?;
                restore_params(
                    &mut trainer.discriminator.buffers,
                    &dir.join(DISC_BUFFERS_FILE),
                )?;
                trainer.gen_state =
                    AdamState::load(&dir.join(GENERATOR_ADAM_FILE), &trainer.generator.params)?;
                trainer.disc_state = AdamState::load(
                    &dir.join(DISCRIMINATOR_ADAM_FILE),
                    &trainer.discriminator.params,
                )?;
                if meta.scalers.len() != 2 {
                    return Err(Error::Checkpoint(format!(
                        "expected generator + discriminator scaler states, got {}",
                        meta.scalers.len()
                    )));
                }
                trainer.gen_scaler.restore(meta.scalers[0]);
                trainer.disc_scaler.restore(meta.scalers[1]);
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

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// The visit order the trainer will use for `epoch` (pure function of the
    /// run seed, exposed so ablation arms can assert they share it).
    pub fn data_order(&self, epoch: u64) -> Vec<usize> {
        self.dataset.epoch_order(self.seed, epoch)
    }

    /// Total steps `train` will run: whole batches per epoch times epochs,
    /// capped by `max_steps`.
    pub fn planned_steps(&self) -> u64 {
        let per_epoch = (self.dataset.len() / self.config.batch_size) as u64;
        let by_epochs = per_epoch * self.config.epochs as u64;
        match self.config.max_steps {
            Some(m) => by_epochs.min(m as u64),
            None => by_epochs,
        }
    }

    /// Consumes the trainer, handing the generator to evaluation.
    pub fn into_generator(self) -> Generator<S> {
        self.generator
    }

    /// Runs until the step budget is exhausted, checkpointing on the
    /// configured cadence and always after the final step.
    pub fn train(&mut self) -> Result<()> {
        self.train_with(|_| {})
    }

    /// Like [`train`](Self::train), invoking `on_step` after every step.
    pub fn train_with(&mut self, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
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

    /// One optimization step: generator phase, then discriminator phase on
    /// the detached prediction.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step_index = self.steps_done + 1;
        let indices = self.next_batch_indices();
        let (visible, thermal, jittered) = self.load_training_batch(&indices, step_index)?;
        let gen = self.generator_phase(step_index, &visible, &thermal, &jittered)?;
        let disc = self.discriminator_phase(step_index, &visible, &thermal, &gen.fake)?;
        let record = StepRecord {
            step: step_index,
            l_gan: gen.l_gan,
            l_perc: gen.l_perc,
            l_temp: gen.l_temp,
            l_patch: gen.l_patch,
            l_fft: gen.l_fft,
            l_d_real: disc.l_d_real,
            l_d_fake: disc.l_d_fake,
            smooth_l1: smooth_l1(&gen.fake, &thermal.into_dyn()),
            gen_skipped: gen.skipped,
            disc_skipped: disc.skipped,
        };
        self.steps_done = step_index;
        self.records.push(record);
        self.append_history(&record)?;
        Ok(record)
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

    /// Loads and normalizes a batch plus the color-jittered thermal negatives.
    #[allow(clippy::type_complexity)]
    fn load_training_batch(
        &self,
        indices: &[usize],
        step_index: u64,
    ) -> Result<(Array4<S>, Array4<S>, Array4<S>)> {
        let res = self.config.resolution;
        let mut jitter_rng = self.seed.stream_indexed("thermal-jitter", &[step_index]);
        let mut vis = Vec::with_capacity(indices.len());
        let mut th = Vec::with_capacity(indices.len());
        let mut jit = Vec::with_capacity(indices.len());
        for &i in indices {
            let pair = self.dataset.load_pair::<S>(i)?;
            if pair.visible.height() != res || pair.visible.width() != res {
                return Err(Error::ShapeMismatch {
                    context: "GanTrainer::step",
                    expected: format!("{res}x{res} images (config resolution)"),
                    got: format!(
                        "{}x{} for {}",
                        pair.visible.height(),
                        pair.visible.width(),
                        pair.id
                    ),
                });
            }
            let draw = self.config.jitter.draw(&mut jitter_rng);
            let negative = apply_jitter(&pair.thermal, &draw)?;
            vis.push(pair.visible.normalize()?);
            th.push(pair.thermal.normalize()?);
            jit.push(negative.normalize()?);
        }
        Ok((
            stack_images(&vis)?,
            stack_images(&th)?,
            stack_images(&jit)?,
        ))
    }

    fn generator_phase(
        &mut self,
        step_index: u64,
        visible: &Array4<S>,
        thermal: &Array4<S>,
        jittered: &Array4<S>,
    ) -> Result<GenPhase<S>> {
        let tape = Tape::new();
        let g_bound = self.generator.bind(&tape, true);
        let d_bound = self.discriminator.bind(&tape, false);
        let xv = tape.constant(visible.clone().into_dyn());
        let tv = tape.constant(thermal.clone().into_dyn());
        let mut dropout_rng = self.seed.stream_indexed("generator-dropout", &[step_index]);
        let fake = self
            .generator
            .forward(&tape, &g_bound, xv, Mode::Train, &mut dropout_rng)?;
        let fake_arr = tape.value(fake);
        let real_pair = tape.concat_channels(&[xv, tv]);
        let fake_pair = tape.concat_channels(&[xv, fake]);
        let (y_real, y_fake) =
            self.discriminator
                .forward_pair(&tape, &d_bound, Mode::Train, real_pair, fake_pair)?;

        let l_gan = relativistic_g_loss(&tape, y_fake, y_real, &self.targets);
        let l_perc = perceptual_loss(&tape, &self.perceptual, fake, tv);
        let l_temp = if self.config.ablate.contains(&Ablation::Temp) {
            None
        } else {
            let tjv = tape.constant(jittered.clone().into_dyn());
            Some(temperature_triplet_loss(&tape, fake, tv, tjv, &self.triplet))
        };
        let l_patch = if self.config.ablate.contains(&Ablation::Patch) {
            None
        } else {
            let mut patch_rng = self.seed.stream_indexed("patch-negative", &[step_index]);
            Some(patch_triplet_loss(&tape, fake, tv, &self.triplet, &mut patch_rng))
        };
        let l_fft = self.plan.as_ref().map(|plan| match self.config.variant {
            Variant::VtfGanFftP => fft_patch_loss(&tape, fake, tv, plan, &self.fourier),
            _ => fft_global_loss(&tape, fake, tv, plan, &self.fourier),
        });

        let w = self.config.weights;
        let mut total = tape.affine(l_gan, w.gan, 0.0);
        total = tape.add(total, tape.affine(l_perc, w.perceptual, 0.0));
        if let Some(l) = l_temp {
            total = tape.add(total, tape.affine(l, w.temperature, 0.0));
        }
        if let Some(l) = l_patch {
            total = tape.add(total, tape.affine(l, w.patch, 0.0));
        }
        if let Some(l) = l_fft {
            total = tape.add(total, tape.affine(l, w.fft, 0.0));
        }

        let values = GenPhase {
            l_gan: finite("L_GAN", tape.scalar_value(l_gan), step_index)?,
            l_perc: finite("L_perc", tape.scalar_value(l_perc), step_index)?,
            l_temp: match l_temp {
                Some(l) => finite("L_temp", tape.scalar_value(l), step_index)?,
                None => 0.0,
            },
            l_patch: match l_patch {
                Some(l) => finite("L_patch", tape.scalar_value(l), step_index)?,
                None => 0.0,
            },
            l_fft: match l_fft {
                Some(l) => finite("L_FFT", tape.scalar_value(l), step_index)?,
                None => 0.0,
            },
            fake: fake_arr,
            skipped: false,
        };

        let scaled = tape.affine(total, self.gen_scaler.scale(), 0.0);
        let mut grads = tape.backward(scaled);
        let mut grad_list = collect_grads(&mut grads, &g_bound, &self.generator.params);
        let grads_finite = unscale_grads(&mut grad_list, self.gen_scaler.scale());
        let skipped = if grads_finite {
            self.gen_scaler.observe(true);
            self.opt
                .step(&mut self.generator.params, &mut self.gen_state, &grad_list)?;
            false
        } else if self.gen_scaler.enabled() {
            self.gen_scaler.observe(false);
            true
        } else {
            return Err(Error::NonFinite {
                context: "training step",
                message: format!("generator gradients at step {step_index}"),
            });
        };
        Ok(GenPhase { skipped, ..values })
    }

    fn discriminator_phase(
        &mut self,
        step_index: u64,
        visible: &Array4<S>,
        thermal: &Array4<S>,
        fake: &ArrayD<S>,
    ) -> Result<DiscPhase> {
        let tape = Tape::new();
        let d_bound = self.discriminator.bind(&tape, true);
        let xv = tape.constant(visible.clone().into_dyn());
        let tv = tape.constant(thermal.clone().into_dyn());
        let fv = tape.constant(fake.clone());
        let real_pair = tape.concat_channels(&[xv, tv]);
        let fake_pair = tape.concat_channels(&[xv, fv]);
        let (y_real, y_fake) =
            self.discriminator
                .forward_pair(&tape, &d_bound, Mode::Train, real_pair, fake_pair)?;
        let l_real = bce_with_logits_mean(&tape, tape.sub(y_real, y_fake), self.targets.real_label);
        let l_fake = bce_with_logits_mean(&tape, tape.sub(y_fake, y_real), self.targets.fake_label);
        let l_disc = tape.affine(tape.add(l_real, l_fake), 0.5, 0.0);

        let l_d_real = finite("L_D_real", tape.scalar_value(l_real), step_index)?;
        let l_d_fake = finite("L_D_fake", tape.scalar_value(l_fake), step_index)?;

        let scaled = tape.affine(l_disc, self.disc_scaler.scale(), 0.0);
        let mut grads = tape.backward(scaled);
        let mut grad_list = collect_grads(&mut grads, &d_bound, &self.discriminator.params);
        let grads_finite = unscale_grads(&mut grad_list, self.disc_scaler.scale());
        let skipped = if grads_finite {
            self.disc_scaler.observe(true);
            self.opt.step(
                &mut self.discriminator.params,
                &mut self.disc_state,
                &grad_list,
            )?;
            false
        } else if self.disc_scaler.enabled() {
            self.disc_scaler.observe(false);
            true
        } else {
            return Err(Error::NonFinite {
                context: "training step",
                message: format!("discriminator gradients at step {step_index}"),
            });
        };
        Ok(DiscPhase {
            l_d_real,
            l_d_fake,
            skipped,
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        self.generator.params.save(&dir.join(GENERATOR_FILE))?;
        self.gen_state
            .save(&dir.join(GENERATOR_ADAM_FILE), &self.generator.params)?;
        self.discriminator
            .params
            .save(&dir.join(DISCRIMINATOR_FILE))?;
        self.disc_state.save(
            &dir.join(DISCRIMINATOR_ADAM_FILE),
            &self.discriminator.params,
        )?;
        self.discriminator
            .buffers
            .save(&dir.join(DISC_BUFFERS_FILE))?;
        self.config.save(&dir.join(CONFIG_FILE))?;
        CheckpointMeta {
            variant: self.config.variant,
            step: self.steps_done,
            epoch: self.epoch,
            pos_in_epoch: self.pos,
            seed: self.config.seed,
            config_hash: self.config_hash.clone(),
            state_signature: self.config.state_signature(),
            scalers: vec![self.gen_scaler.state(), self.disc_scaler.state()],
        }
        .save(dir)
    }

    fn trace_path(&self) -> PathBuf {
        self.config.out_dir.join(TRACE_FILE)
    }

    fn records_path(&self) -> PathBuf {
        self.config.out_dir.join(RECORDS_FILE)
    }

    fn reset_history(&self) -> Result<()> {
        write_file(&self.trace_path(), &format!("{TRACE_HEADER}\n"))?;
        write_file(&self.records_path(), "")
    }

    fn append_history(&self, record: &StepRecord) -> Result<()> {
        append_line(&self.trace_path(), &record.csv_row())?;
        append_line(&self.records_path(), &serde_json::to_string(record)?)
    }

    /// Drops trace rows past the checkpoint and returns the kept records, so
    /// a resumed run's files continue seamlessly.
    fn truncate_history(&self, up_to: u64) -> Result<Vec<StepRecord>> {
        let kept = read_records(&self.records_path(), up_to)?;
        let mut trace = String::from(TRACE_HEADER);
        trace.push('\n');
        let mut records = String::new();
        for r in &kept {
            trace.push_str(&r.csv_row());
            trace.push('\n');
            records.push_str(&serde_json::to_string(r)?);
            records.push('\n');
        }
        write_file(&self.trace_path(), &trace)?;
        write_file(&self.records_path(), &records)?;
        Ok(kept)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Records with `step <= up_to` from a JSONL history (empty if absent).
pub fn read_records(path: &Path, up_to: u64) -> Result<Vec<StepRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepRecord = serde_json::from_str(line)?;
        if rec.step <= up_to {
            out.push(rec);
        }
    }
    Ok(out)
}
