//! Evaluates every term of the translation objective on toy tensors and
//! differentiates the weighted sum back to the prediction.
//!
//! ```sh
//! cargo run --example loss_stack
//! ```

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use vtf::autodiff::{DftPlan, Tape};
use vtf::losses::{
    fft_global_loss, fft_patch_loss, patch_triplet_loss, perceptual_loss, relativistic_d_loss,
    relativistic_g_loss, smooth_l1, temperature_triplet_loss, AdversarialTargets,
    FourierLossOpts, LossWeights, PerceptualExtractor, TripletSpec,
};
use vtf::{Result, RunSeed};

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

fn main() -> Result<()> {
    let seed = RunSeed(42);
    let mut rng = seed.stream("example-losses");

    // A batch of two 16x16 RGB "predictions" and their targets in [-1, 1].
    let shape = [2usize, 3, 16, 16];
    let pred_arr = uniform(&mut rng, &shape);
    let tgt_arr = uniform(&mut rng, &shape);
    // Stand-in for a color-jittered target: a brightness-style rescale.
    let jit_arr = tgt_arr.mapv(|v| (v * 0.8).clamp(-1.0, 1.0));
    // Stand-in discriminator outputs: per-patch logit maps.
    let fake_logits = uniform(&mut rng, &[2, 1, 4, 4]);
    let real_logits = uniform(&mut rng, &[2, 1, 4, 4]);

    let tape = Tape::<f64>::new();
    let pred = tape.leaf(pred_arr.clone());
    let tgt = tape.constant(tgt_arr.clone());
    let jit = tape.constant(jit_arr);
    let y_fake = tape.constant(fake_logits);
    let y_real = tape.constant(real_logits);

    let targets = AdversarialTargets::default();
    let triplet = TripletSpec::default();
    let extractor = PerceptualExtractor::<f64>::new(3, &mut seed.stream("perceptual-init"));
    let global_plan = DftPlan::new(16, 16);
    let patch_plan = DftPlan::new(4, 4);
    let opts = FourierLossOpts { wrap_phase: false };

    let l_gan = relativistic_g_loss(&tape, y_fake, y_real, &targets);
    let l_perc = perceptual_loss(&tape, &extractor, pred, tgt);
    let l_temp = temperature_triplet_loss(&tape, pred, tgt, jit, &triplet);
    let l_patch = patch_triplet_loss(&tape, pred, tgt, &triplet, &mut seed.stream("patch-negative"));
    let l_fft_g = fft_global_loss(&tape, pred, tgt, &global_plan, &opts);
    let l_fft_p = fft_patch_loss(&tape, pred, tgt, &patch_plan, &opts);
    let l_d = relativistic_d_loss(&tape, y_real, y_fake, &targets);

    println!("generator terms on random tensors:");
    for (name, var) in [
        ("adversarial (relativistic)", l_gan),
        ("perceptual", l_perc),
        ("temperature triplet", l_temp),
        ("patch triplet", l_patch),
        ("Fourier, global", l_fft_g),
        ("Fourier, per-patch", l_fft_p),
    ] {
        println!("  {name:<28} {:.6}", tape.value(var)[[]]);
    }
    println!("discriminator (relativistic)   {:.6}", tape.value(l_d)[[]]);
    println!(
        "pixel Huber (logged metric)    {:.6}",
        smooth_l1(&pred_arr, &tgt_arr)
    );

    // The trainer optimizes a weighted sum; one backward pass reaches every
    // term that touches the prediction.
    let w = LossWeights::default();
    let mut total = tape.affine(l_gan, w.gan, 0.0);
    for (weight, var) in [
        (w.perceptual, l_perc),
        (w.temperature, l_temp),
        (w.patch, l_patch),
        (w.fft, l_fft_p),
    ] {
        total = tape.add(total, tape.affine(var, weight, 0.0));
    }
    let value = tape.value(total)[[]];
    let grads = tape.backward(total);
    let g = grads.get(pred).expect("prediction receives gradient");
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("weighted total {value:.6}; |∂total/∂prediction| = {norm:.6}");
    Ok(())
}
