//! Scores translators on the held-out split: a briefly trained GAN next to
//! the two scale anchors — copying the target (perfect) and emitting noise
//! (worst case).
//!
//! ```sh
//! cargo run --example evaluate_translator
//! ```

use vtf::dataio::{generate_dataset, Manifest, Split, SynthesisSpec};
use vtf::harness::{
    evaluate, GanTrainer, GanTranslator, IdentityTranslator, NoiseTranslator, TrainConfig, Variant,
};
use vtf::{Result, RunSeed};

fn main() -> Result<()> {
    let root = std::env::temp_dir().join("vtf-examples/evaluate");
    let _ = std::fs::remove_dir_all(&root);
    generate_dataset(
        &SynthesisSpec {
            count: 16,
            size: 64,
            seed: 4,
        },
        &root.join("data"),
    )?;
    let manifest = Manifest::load(&root.join("data/manifest.json"))?;

    let config = TrainConfig {
        variant: Variant::VtfGan,
        data_manifest: root.join("data/manifest.json"),
        out_dir: root.join("run"),
        seed: 6,
        resolution: 64,
        batch_size: 2,
        epochs: 1,
        max_steps: Some(4),
        base_width: 4,
        ..TrainConfig::default()
    };
    let hash = config.hash();
    let mut trainer = GanTrainer::<f32>::new(config)?;
    trainer.train()?;
    println!("trained {} steps; scoring the test split\n", trainer.completed_steps());

    let mut gan = GanTranslator::new(trainer.into_generator());
    let mut identity = IdentityTranslator;
    let mut noise = NoiseTranslator::new(RunSeed(99));
    let runs: [(&str, &mut dyn vtf::harness::Translator<f32>); 3] = [
        ("gan (4 steps)", &mut gan),
        ("copy target", &mut identity),
        ("pure noise", &mut noise),
    ];
    println!("{:<14} {:>12} {:>14}", "translator", "FID", "spectrum MSE");
    for (name, translator) in runs {
        let out = root.join("eval").join(name.split_whitespace().next().unwrap());
        let report = evaluate(translator, &manifest, Split::Test, &out, &hash)?;
        println!("{name:<14} {:>12.6} {:>14.6}", report.fid, report.mse_spec);
    }
    println!("\nper-translator metrics.json / samples.png / generated/ under");
    println!("{}", root.join("eval").display());
    Ok(())
}
