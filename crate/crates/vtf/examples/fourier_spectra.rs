//! Inspects image spectra: log-magnitude heatmap statistics, the spectrum-MSE
//! metric, and the differentiable Fourier losses in their global and
//! per-patch forms.
//!
//! ```sh
//! cargo run --example fourier_spectra
//! ```

use ndarray::{Array2, ArrayD, IxDyn};
use vtf::autodiff::{DftPlan, Tape};
use vtf::dataio::synthesize_pair;
use vtf::losses::{fft_global_loss, fft_patch_loss, FourierLossOpts};
use vtf::metrics::{log_spectrum, spectrum_mse};
use vtf::{Result, RunSeed};

/// 3x3 box blur with clamped borders — a crude low-pass to contrast against.
fn box_blur(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                acc += img[[ii, jj]];
            }
        }
        acc / 9.0
    })
}

fn main() -> Result<()> {
    // A rendered thermal face, reduced to its luminance plane in [-1, 1].
    let (_, thermal) = synthesize_pair::<f64>(RunSeed(3), 0, 64)?;
    let sharp = thermal.normalize()?.luminance();
    let blurred = box_blur(&sharp);

    for (name, plane) in [("sharp", &sharp), ("blurred", &blurred)] {
        let spec = log_spectrum(plane);
        let mean = spec.iter().sum::<f64>() / spec.len() as f64;
        let max = spec.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        println!(
            "{name:<8} log-spectrum: {:?}, mean {mean:.4}, peak {max:.4}",
            spec.dim()
        );
    }
    println!(
        "spectrum MSE sharp vs blurred: {:.6}",
        spectrum_mse(&[sharp.clone()], &[blurred.clone()])?
    );
    println!(
        "spectrum MSE sharp vs itself:  {:.6}",
        spectrum_mse(&[sharp.clone()], &[sharp.clone()])?
    );

    // The differentiable losses see [N, C, H, W] tensors. Blurring removes
    // high-frequency amplitude, and both loss forms pick that up.
    let (h, w) = sharp.dim();
    let as_batch = |plane: &Array2<f64>| {
        ArrayD::from_shape_fn(IxDyn(&[1, 1, h, w]), |ix| plane[[ix[2], ix[3]]])
    };
    let tape = Tape::<f64>::new();
    let p_sharp = tape.leaf(as_batch(&sharp));
    let p_blur = tape.constant(as_batch(&blurred));
    let global_plan = DftPlan::new(h, w);
    let patch_plan = DftPlan::new(h / 4, w / 4);

    for wrap_phase in [false, true] {
        let opts = FourierLossOpts { wrap_phase };
        let lg = fft_global_loss(&tape, p_sharp, p_blur, &global_plan, &opts);
        let lp = fft_patch_loss(&tape, p_sharp, p_blur, &patch_plan, &opts);
        println!(
            "wrap_phase={wrap_phase}: global {:.6}, per-patch {:.6}",
            tape.value(lg)[[]],
            tape.value(lp)[[]]
        );
    }

    // And the loss is differentiable: gradients flow back to the image.
    let opts = FourierLossOpts::default();
    let loss = fft_global_loss(&tape, p_sharp, p_blur, &global_plan, &opts);
    let grads = tape.backward(loss);
    let g = grads.get(p_sharp).expect("image receives gradient");
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("|∂(global loss)/∂image| = {norm:.6}");
    Ok(())
}
