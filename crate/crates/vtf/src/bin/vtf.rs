//! Command-line entry points mirroring the library's end-to-end flows:
//! dataset synthesis, GAN/diffusion training, checkpoint evaluation,
//! spectrum inspection, and the loss-term ablation study.

use clap::{Parser, Subcommand};
use ndarray::{Array2, Array3};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use vtf::dataio::{generate_dataset, load_png, save_png, Manifest, Split, SynthesisSpec};
use vtf::error::Error;
use vtf::harness::{
    evaluate, run_ablation, translator_from_checkpoint, DiffusionTrainer, GanTrainer, TrainConfig,
};
use vtf::image::{ImageTensor, RangeTag};
use vtf::metrics::log_spectrum;
use vtf::Result;

#[derive(Parser)]
#[command(
    name = "vtf",
    version,
    about = "Visible-to-thermal facial image translation lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired face dataset and its manifest.
    SynthData {
        /// Number of visible/thermal pairs.
        #[arg(long)]
        n: usize,
        /// Square image side length (at least 16).
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (receives visible/, thermal/, manifest.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one of the GAN variants from a TOML config.
    TrainGan {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the conditional diffusion baseline from a TOML config.
    TrainDiff {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest's test split.
    Eval {
        /// Checkpoint directory (as written under <out_dir>/checkpoints/).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for metrics.json, samples.png, generated/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write normalized log-magnitude spectra for a directory of PNGs.
    Spectra {
        /// Directory scanned (non-recursively) for .png files.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare the full / no-temperature / no-patch arms.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData { n, size, seed, out } => {
            let spec = SynthesisSpec {
                count: n,
                size,
                seed,
            };
            let manifest = generate_dataset(&spec, &out)?;
            let train = manifest.entries_for(Split::Train).len();
            let test = manifest.entries_for(Split::Test).len();
            println!(
                "wrote {n} pairs at {size}x{size} under {} ({train} train / {test} test)",
                out.display()
            );
            Ok(())
        }
        Command::TrainGan { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            let mut trainer = match &resume {
                None => GanTrainer::<f32>::new(cfg)?,
                Some(dir) => GanTrainer::<f32>::resume(cfg, dir)?,
            };
            let target = trainer.planned_steps();
            println!(
                "training {} to step {target} (out_dir {})",
                trainer.config().variant,
                trainer.config().out_dir.display()
            );
            trainer.train_with(|r| {
                if r.step % 25 == 0 || r.step == target {
                    println!(
                        "step {:>6}  L_GAN {:.4}  L_perc {:.4}  L_temp {:.4}  \
                         L_patch {:.4}  L_FFT {:.4}  L_D {:.4}/{:.4}",
                        r.step, r.l_gan, r.l_perc, r.l_temp, r.l_patch, r.l_fft, r.l_d_real,
                        r.l_d_fake
                    );
                }
            })?;
            println!("finished at step {}", trainer.completed_steps());
            Ok(())
        }
        Command::TrainDiff { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            let mut trainer = match &resume {
                None => DiffusionTrainer::<f32>::new(cfg)?,
                Some(dir) => DiffusionTrainer::<f32>::resume(cfg, dir)?,
            };
            let target = trainer.planned_steps();
            println!(
                "training {} to step {target} (out_dir {})",
                trainer.config().variant,
                trainer.config().out_dir.display()
            );
            trainer.train_with(|r| {
                if r.step % 25 == 0 || r.step == target {
                    println!("step {:>6}  loss {:.6}", r.step, r.loss);
                }
            })?;
            println!("finished at step {}", trainer.completed_steps());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            let (mut translator, _config, meta) = translator_from_checkpoint(&checkpoint)?;
            let manifest = Manifest::load(&manifest)?;
            let report = evaluate(
                translator.as_mut(),
                &manifest,
                Split::Test,
                &out,
                &meta.config_hash,
            )?;
            println!(
                "evaluated {} test images: FID {:.6}, spectrum MSE {:.6} (reports in {})",
                report.n_images,
                report.fid,
                report.mse_spec,
                out.display()
            );
            Ok(())
        }
        Command::Spectra { images, out } => spectra(&images, &out),
        Command::Ablate { config } => {
            let cfg = TrainConfig::load(&config)?;
            let report = run_ablation::<f32>(&cfg)?;
            println!("{}", report.to_markdown());
            println!("reports written under {}", cfg.out_dir.display());
            Ok(())
        }
    }
}

/// Writes one normalized log-spectrum heatmap per input image, plus the mean
/// spectrum over the whole directory.
fn spectra(images: &Path, out: &Path) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(images)
        .map_err(|e| Error::io(images.display().to_string(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no .png images found in {}",
            images.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let mut mean: Option<Array2<f64>> = None;
    for path in &paths {
        let img = load_png::<f64>(path)?.normalize()?;
        let spectrum = log_spectrum(&img.luminance());
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        write_heatmap(&out.join(format!("{stem}_spectrum.png")), &spectrum)?;
        mean = Some(match mean {
            None => spectrum,
            Some(acc) => {
                if acc.dim() != spectrum.dim() {
                    return Err(Error::ShapeMismatch {
                        context: "spectra",
                        expected: format!("{:?} (all images equally sized)", acc.dim()),
                        got: format!("{:?} for {}", spectrum.dim(), path.display()),
                    });
                }
                acc + spectrum
            }
        });
    }
    let mean = mean.expect("non-empty set") / paths.len() as f64;
    write_heatmap(&out.join("mean_spectrum.png"), &mean)?;
    println!(
        "wrote {} spectra (plus the mean) to {}",
        paths.len(),
        out.display()
    );
    Ok(())
}

/// Min–max scales a plane to bytes and saves it as a grayscale PNG.
fn write_heatmap(path: &Path, plane: &Array2<f64>) -> Result<()> {
    let (lo, hi) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = (hi - lo).max(1e-12);
    let (h, w) = plane.dim();
    let mut bytes = Array3::<f64>::zeros((1, h, w));
    for i in 0..h {
        for j in 0..w {
            bytes[[0, i, j]] = (plane[[i, j]] - lo) / span * 255.0;
        }
    }
    save_png(path, &ImageTensor::new(bytes, RangeTag::Byte)?)
}
