//! Trains the conditional diffusion baseline briefly at low resolution, then
//! draws a thermal sample for a held-out visible image and saves it.
//!
//! ```sh
//! cargo run --example train_diffusion_small
//! ```

use ndarray::Array3;
use vtf::dataio::{
    generate_dataset, save_png, stack_images, to_grayscale, Manifest, PairedDataset, Split,
    SynthesisSpec,
};
use vtf::harness::{DiffusionTrainer, TrainConfig, Variant};
use vtf::image::{denormalize_array, ImageTensor, RangeTag};
use vtf::Result;

fn main() -> Result<()> {
    let root = std::env::temp_dir().join("vtf-examples/train-diffusion");
    let _ = std::fs::remove_dir_all(&root);
    generate_dataset(
        &SynthesisSpec {
            count: 16,
            size: 16,
            seed: 2,
        },
        &root.join("data"),
    )?;

    let config = TrainConfig {
        variant: Variant::VtfDiff,
        data_manifest: root.join("data/manifest.json"),
        out_dir: root.join("run"),
        seed: 8,
        resolution: 16,
        batch_size: 4,
        epochs: 2,
        base_width: 8,
        diffusion_steps: 8,
        ..TrainConfig::default()
    };
    let mut trainer = DiffusionTrainer::<f32>::new(config.clone())?;
    println!(
        "training {} for {} steps (chain length {})",
        config.variant,
        trainer.planned_steps(),
        config.diffusion_steps
    );
    trainer.train_with(|r| println!("step {}  noise-prediction loss {:.6}", r.step, r.loss))?;

    // Condition on the first held-out visible image (as the grayscale
    // tensor the denoiser was trained on) and draw one sample. At this
    // scale the output is noise-like; the point is the flow.
    let dataset =
        PairedDataset::from_manifest(&Manifest::load(&config.data_manifest)?, Split::Test)?;
    let pair = dataset.load_pair::<f32>(0)?;
    println!("sampling a thermal image conditioned on {}", pair.id);
    let cond = stack_images(&[to_grayscale(&pair.visible)?.normalize()?])?;
    let sample = trainer.sample(&cond, 0)?;

    let (h, w) = (sample.shape()[2], sample.shape()[3]);
    let gray = Array3::from_shape_fn((1, h, w), |(_, i, j)| {
        f64::from(sample[[0, 0, i, j]]).clamp(-1.0, 1.0)
    });
    let png = root.join(format!("{}_sampled.png", pair.id));
    save_png(
        &png,
        &ImageTensor::new(denormalize_array(&gray), RangeTag::Byte)?,
    )?;
    println!("wrote {}", png.display());
    Ok(())
}
