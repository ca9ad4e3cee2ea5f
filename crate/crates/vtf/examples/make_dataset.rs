//! Renders a synthetic paired face dataset and walks its manifest.
//!
//! ```sh
//! cargo run --example make_dataset
//! ```

use vtf::dataio::{generate_dataset, load_png, Split, SynthesisSpec};
use vtf::Result;

fn main() -> Result<()> {
    let out = std::env::temp_dir().join("vtf-examples/dataset");
    let spec = SynthesisSpec {
        count: 16,
        size: 128,
        seed: 7,
    };
    let manifest = generate_dataset(&spec, &out)?;

    println!("dataset root: {}", manifest.root().display());
    for split in [Split::Train, Split::Test] {
        let entries = manifest.entries_for(split);
        let subjects: std::collections::BTreeSet<&str> =
            entries.iter().map(|e| e.subject.as_str()).collect();
        println!(
            "{split:?}: {} pairs across subjects {:?}",
            entries.len(),
            subjects
        );
    }

    // Every pair is two registered RGB PNGs of the same synthetic face:
    // a visible rendering and a thermal-style palette rendering.
    let first = &manifest.entries_for(Split::Train)[0];
    let visible = load_png::<f64>(&manifest.visible_path(first))?;
    let thermal = load_png::<f64>(&manifest.thermal_path(first))?;
    for (name, img) in [("visible", &visible), ("thermal", &thermal)] {
        let data = img.data();
        let (lo, hi) = data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        println!(
            "{}/{name}: shape {:?}, byte range [{lo:.0}, {hi:.0}]",
            first.id,
            data.shape()
        );
    }

    // Training consumes images in [-1, 1]; the round trip recovers every
    // byte value after rounding.
    let unit = visible.normalize()?;
    let back = unit.denormalize()?;
    let max_err = back
        .data()
        .iter()
        .zip(visible.data().iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(max_err < 0.5, "round trip must stay within rounding distance");
    println!("normalize → denormalize round trip: max error {max_err:.2e} (< half a byte)");
    Ok(())
}
