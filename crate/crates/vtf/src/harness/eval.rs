//! Evaluation: run a translator over a dataset split, score it (FID +
//! spectrum MSE), and write sample grids.
//!
//! Translators wrap anything that maps visible batches to thermal
//! predictions — the trained GAN generator, the diffusion sampler, and two
//! reference baselines (copy the ground truth / emit noise) that bracket the
//! metric scale.

use super::checkpoint::{
    ensure_dir, restore_params, CheckpointMeta, CONFIG_FILE, DENOISER_FILE, GENERATOR_FILE,
};
use super::config::{TrainConfig, Variant};
use crate::autodiff::Tape;
use crate::blocks::Mode;
use crate::dataio::{save_png, Manifest, PairedDataset, Split};
use crate::diffusion::{Denoiser, DenoiserSpec, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::{denormalize_array, luminance, ImageTensor, RangeTag};
use crate::metrics::{fid_between, spectrum_mse, MetricsReport, RandomProjection};
use crate::models::{Generator, GeneratorSpec};
use crate::rng::RunSeed;
use crate::scalar::Scalar;
use ndarray::{concatenate, s, Array2, Array3, Array4, Axis};
use rand::Rng;
use std::path::Path;

pub const METRICS_FILE: &str = "metrics.json";
pub const GRID_FILE: &str = "samples.png";
pub const GENERATED_DIR: &str = "generated";
/// Batch size used when walking the evaluation split.
pub const EVAL_BATCH: usize = 4;
/// Rows of the visible | target | prediction sample grid.
pub const GRID_ROWS: usize = 8;
/// Fixed seed of the FID feature projection, so scores are comparable across
/// runs and checkpoints.
pub const PROJECTION_SEED: u64 = 0x46454154;

/// Maps visible batches to thermal predictions. Inputs are unit-signed
/// `[N, 3, H, W]`; the ground-truth thermal batch rides along so reference
/// baselines can use it.
pub trait Translator<S: Scalar> {
    fn name(&self) -> &str;
    /// 3 for RGB-palette predictions, 1 for grayscale.
    fn out_channels(&self) -> usize;
    fn translate(&mut self, visible: &Array4<S>, thermal: &Array4<S>) -> Result<Array4<S>>;
}

/// The trained U-Net generator in eval mode (dropout inactive).
pub struct GanTranslator<S: Scalar> {
    pub generator: Generator<S>,
}

impl<S: Scalar> GanTranslator<S> {
    pub fn new(generator: Generator<S>) -> Self {
        GanTranslator { generator }
    }
}

impl<S: Scalar> Translator<S> for GanTranslator<S> {
    fn name(&self) -> &str {
        "gan"
    }

    fn out_channels(&self) -> usize {
        self.generator.spec.out_channels
    }

    fn translate(&mut self, visible: &Array4<S>, _thermal: &Array4<S>) -> Result<Array4<S>> {
        let tape = Tape::new();
        let bound = self.generator.bind(&tape, false);
        let xv = tape.constant(visible.clone().into_dyn());
        // Dropout never fires in eval mode; the stream exists only to satisfy
        // the signature.
        let mut rng = RunSeed(0).stream("eval-dropout");
        let y = self
            .generator
            .forward(&tape, &bound, xv, Mode::Eval, &mut rng)?;
        Ok(tape
            .value(y)
            .into_dimensionality()
            .expect("generator output is 4-D"))
    }
}

/// The diffusion sampler conditioned on the visible grayscale.
pub struct DiffusionTranslator<S: Scalar> {
    pub denoiser: Denoiser<S>,
    pub schedule: NoiseSchedule,
    seed: RunSeed,
    draws: u64,
}

impl<S: Scalar> DiffusionTranslator<S> {
    pub fn new(denoiser: Denoiser<S>, schedule: NoiseSchedule, seed: RunSeed) -> Self {
        DiffusionTranslator {
            denoiser,
            schedule,
            seed,
            draws: 0,
        }
    }
}

impl<S: Scalar> Translator<S> for DiffusionTranslator<S> {
    fn name(&self) -> &str {
        "diffusion"
    }

    fn out_channels(&self) -> usize {
        self.denoiser.spec.image_channels
    }

    fn translate(&mut self, visible: &Array4<S>, _thermal: &Array4<S>) -> Result<Array4<S>> {
        let cond = luminance_batch(visible);
        let mut rng = self.seed.stream_indexed("eval-sample", &[self.draws]);
        self.draws += 1;
        self.denoiser.sample(&self.schedule, &cond, &mut rng)
    }
}

/// Upper reference: echoes the ground truth (zero distance to it).
pub struct IdentityTranslator;

impl<S: Scalar> Translator<S> for IdentityTranslator {
    fn name(&self) -> &str {
        "identity"
    }

    fn out_channels(&self) -> usize {
        3
    }

    fn translate(&mut self, _visible: &Array4<S>, thermal: &Array4<S>) -> Result<Array4<S>> {
        Ok(thermal.clone())
    }
}

/// Lower reference: uniform noise in `[-1, 1]`.
pub struct NoiseTranslator {
    seed: RunSeed,
    draws: u64,
}

impl NoiseTranslator {
    pub fn new(seed: RunSeed) -> Self {
        NoiseTranslator { seed, draws: 0 }
    }
}

impl<S: Scalar> Translator<S> for NoiseTranslator {
    fn name(&self) -> &str {
        "noise"
    }

    fn out_channels(&self) -> usize {
        3
    }

    fn translate(&mut self, _visible: &Array4<S>, thermal: &Array4<S>) -> Result<Array4<S>> {
        let mut rng = self.seed.stream_indexed("noise-baseline", &[self.draws]);
        self.draws += 1;
        Ok(Array4::from_shape_simple_fn(thermal.dim(), || {
            S::from_f64(rng.random::<f64>() * 2.0 - 1.0)
        }))
    }
}

/// Per-sample luminance: `[N, C, H, W]` → `[N, 1, H, W]` (identity copy for
/// single-channel input).
pub fn luminance_batch<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    if c == 1 {
        return x.clone();
    }
    let mut out = Array4::zeros((n, 1, h, w));
    for i in 0..n {
        let plane = luminance(&x.index_axis(Axis(0), i).to_owned());
        out.slice_mut(s![i, 0, .., ..]).assign(&plane);
    }
    out
}

/// Runs the translator across a split and writes `metrics.json`, a sample
/// grid, and per-image predictions under `out_dir`.
pub fn evaluate<S: Scalar, T: Translator<S> + ?Sized>(
    translator: &mut T,
    manifest: &Manifest,
    split: Split,
    out_dir: &Path,
    config_hash: &str,
) -> Result<MetricsReport> {
    let dataset = PairedDataset::from_manifest(manifest, split)?;
    ensure_dir(out_dir)?;
    let generated_dir = out_dir.join(GENERATED_DIR);
    ensure_dir(&generated_dir)?;

    let mut ids = Vec::with_capacity(dataset.len());
    let mut vis_batches = Vec::new();
    let mut real_batches = Vec::new();
    let mut gen_batches = Vec::new();
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + EVAL_BATCH).min(dataset.len());
        let indices: Vec<usize> = (start..end).collect();
        let batch = dataset.load_batch::<S>(&indices)?;
        let generated = translator.translate(&batch.visible, &batch.thermal)?;
        if generated.shape()[0] != batch.visible.shape()[0]
            || generated.shape()[1] != translator.out_channels()
            || generated.shape()[2..] != batch.visible.shape()[2..]
        {
            return Err(Error::ShapeMismatch {
                context: "evaluate",
                expected: format!(
                    "[{}, {}, {}, {}] prediction",
                    batch.visible.shape()[0],
                    translator.out_channels(),
                    batch.visible.shape()[2],
                    batch.visible.shape()[3]
                ),
                got: format!("{:?}", generated.shape()),
            });
        }
        ids.extend(batch.ids.iter().cloned());
        vis_batches.push(batch.visible);
        real_batches.push(batch.thermal);
        gen_batches.push(generated);
        start = end;
    }
    let visible = concat_batches(&vis_batches);
    let real = concat_batches(&real_batches);
    let generated = concat_batches(&gen_batches);
    let n_images = real.shape()[0];

    // FID over matching channel counts: grayscale predictions are compared
    // against the luminance of the real thermal images.
    let out_c = translator.out_channels();
    let real_matched = if out_c == 1 {
        luminance_batch(&real)
    } else {
        real.clone()
    };
    let real_f64 = to_f64(&real_matched);
    let gen_f64 = to_f64(&generated);
    let (h, w) = (real.shape()[2], real.shape()[3]);
    let projection = RandomProjection::for_images(out_c, h, w, RunSeed(PROJECTION_SEED));
    let fid = fid_between(&projection, &real_f64, &gen_f64)?;

    // Spectrum distance on luminance planes.
    let real_planes = planes(&to_f64(&luminance_batch(&real)));
    let gen_planes = planes(&to_f64(&luminance_batch(&generated)));
    let mse_spec = spectrum_mse(&real_planes, &gen_planes)?;

    write_grid(
        &out_dir.join(GRID_FILE),
        &visible,
        &real,
        &generated,
        GRID_ROWS.min(n_images),
    )?;
    for (i, id) in ids.iter().enumerate() {
        let img = sample_to_rgb(&generated, i);
        let tensor = ImageTensor::new(img, RangeTag::Byte)?;
        save_png(&generated_dir.join(format!("{id}.png")), &tensor)?;
    }

    let report = MetricsReport {
        fid,
        mse_spec,
        dbcnn: None,
        config_hash: config_hash.to_string(),
        n_images,
    };
    report.save(&out_dir.join(METRICS_FILE))?;
    Ok(report)
}

/// Builds a translator from a checkpoint directory (the saved config decides
/// which model to restore).
pub fn translator_from_checkpoint(
    dir: &Path,
) -> Result<(Box<dyn Translator<f32>>, TrainConfig, CheckpointMeta)> {
    let config = TrainConfig::load(&dir.join(CONFIG_FILE))?;
    let meta = CheckpointMeta::load(dir)?;
    let seed = RunSeed(config.seed);
    let translator: Box<dyn Translator<f32>> = match config.variant {
        Variant::VtfGan | Variant::VtfGanFftP | Variant::VtfGanFftG => {
            let mut generator = Generator::new(
                GeneratorSpec {
                    base_width: config.base_width,
                    ..GeneratorSpec::default()
                },
                &mut seed.stream("generator-init"),
            );
            restore_params(&mut generator.params, &dir.join(GENERATOR_FILE))?;
            Box::new(GanTranslator::new(generator))
        }
        Variant::VtfDiff => {
            let mut denoiser = Denoiser::new(
                DenoiserSpec {
                    base_width: config.base_width,
                    ..DenoiserSpec::default()
                },
                &mut seed.stream("denoiser-init"),
            );
            restore_params(&mut denoiser.params, &dir.join(DENOISER_FILE))?;
            let schedule = NoiseSchedule::squared_cosine(config.diffusion_steps)?;
            Box::new(DiffusionTranslator::new(denoiser, schedule, seed))
        }
    };
    Ok((translator, config, meta))
}

fn concat_batches<S: Scalar>(batches: &[Array4<S>]) -> Array4<S> {
    let views: Vec<_> = batches.iter().map(|b| b.view()).collect();
    concatenate(Axis(0), &views).expect("batches share trailing dims")
}

fn to_f64<S: Scalar>(x: &Array4<S>) -> Array4<f64> {
    x.mapv(|v| v.to_f64())
}

fn planes(x: &Array4<f64>) -> Vec<Array2<f64>> {
    (0..x.shape()[0])
        .map(|i| x.slice(s![i, 0, .., ..]).to_owned())
        .collect()
}

/// Sample `i` as a byte-scale RGB `[3, H, W]` array (grayscale replicated).
fn sample_to_rgb<S: Scalar>(batch: &Array4<S>, i: usize) -> Array3<S> {
    let sample = batch.index_axis(Axis(0), i);
    let (c, h, w) = (sample.shape()[0], sample.shape()[1], sample.shape()[2]);
    let mut rgb = Array3::zeros((3, h, w));
    for ch in 0..3 {
        rgb.index_axis_mut(Axis(0), ch)
            .assign(&sample.index_axis(Axis(0), if c == 3 { ch } else { 0 }));
    }
    denormalize_array(&rgb)
}

/// `rows` samples, one per row: visible | target | prediction.
fn write_grid<S: Scalar>(
    path: &Path,
    visible: &Array4<S>,
    real: &Array4<S>,
    generated: &Array4<S>,
    rows: usize,
) -> Result<()> {
    let (h, w) = (visible.shape()[2], visible.shape()[3]);
    let mut grid = Array3::<S>::zeros((3, rows * h, 3 * w));
    for r in 0..rows {
        for (slot, src) in [visible, real, generated].into_iter().enumerate() {
            let img = sample_to_rgb(src, r);
            grid.slice_mut(s![.., r * h..(r + 1) * h, slot * w..(slot + 1) * w])
                .assign(&img);
        }
    }
    let tensor = ImageTensor::new(grid, RangeTag::Byte)?;
    save_png(path, &tensor)
}
