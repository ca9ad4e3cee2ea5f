//! Runs the three-arm loss ablation (full objective, without the temperature
//! triplet, without the patch triplet) at desk scale and prints the
//! comparison table.
//!
//! ```sh
//! cargo run --example ablation_small
//! ```

use vtf::dataio::{generate_dataset, SynthesisSpec};
use vtf::harness::{run_ablation, TrainConfig, Variant};
use vtf::Result;

fn main() -> Result<()> {
    let root = std::env::temp_dir().join("vtf-examples/ablation");
    let _ = std::fs::remove_dir_all(&root);
    generate_dataset(
        &SynthesisSpec {
            count: 16,
            size: 64,
            seed: 9,
        },
        &root.join("data"),
    )?;

    let base = TrainConfig {
        variant: Variant::VtfGan,
        data_manifest: root.join("data/manifest.json"),
        out_dir: root.join("runs"),
        seed: 21,
        resolution: 64,
        batch_size: 2,
        epochs: 1,
        max_steps: Some(4),
        base_width: 4,
        ..TrainConfig::default()
    };
    // Each arm trains from the same seed on the same batch order, so the
    // only difference is which loss terms participate.
    let report = run_ablation::<f32>(&base)?;
    println!("{}", report.to_markdown());
    println!("full reports: {}", base.out_dir.join("ablation.json").display());
    Ok(())
}
