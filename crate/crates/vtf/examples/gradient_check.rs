//! Differentiates a small anti-aliased conv block on the tape and audits the
//! input gradient against central finite differences in f64.
//!
//! ```sh
//! cargo run --example gradient_check
//! ```

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use vtf::autodiff::{finite_diff, grads_close, Pad, Tape};
use vtf::blocks::{bind, Conv2d, ParamStore};
use vtf::{Result, RunSeed};

fn main() -> Result<()> {
    let seed = RunSeed(17);
    let mut rng = seed.stream("example-gradcheck");

    // conv 3x3 → tanh → anti-aliased downsample, mean-square readout.
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut store, &mut rng, "conv", 2, 3, 3, 1, Pad::symmetric(1));
    let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 2, 8, 8]), |_| rng.random_range(-1.0..1.0));

    let loss_of = |x: &ArrayD<f64>| -> f64 {
        let tape = Tape::<f64>::new();
        let bound = bind(&tape, &store, false);
        let v = tape.leaf(x.clone());
        let y = tape.blurpool(tape.tanh(conv.forward(&tape, &bound, v)), 3, 2);
        tape.value(tape.mean_all(tape.square(y)))[[]]
    };

    // Analytic gradient from one reverse pass.
    let tape = Tape::<f64>::new();
    let bound = bind(&tape, &store, false);
    let v = tape.leaf(x0.clone());
    let y = tape.blurpool(tape.tanh(conv.forward(&tape, &bound, v)), 3, 2);
    let loss = tape.mean_all(tape.square(y));
    println!("loss at x0: {:.8}", tape.value(loss)[[]]);
    let analytic = tape
        .backward(loss)
        .take(v)
        .expect("input receives gradient");

    // Numeric gradient, one central difference per input element.
    let numeric = finite_diff(loss_of, &x0, 1e-5);

    let dot = |a: &ArrayD<f64>, b: &ArrayD<f64>| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
    let cos = dot(&analytic, &numeric) / (dot(&analytic, &analytic).sqrt() * dot(&numeric, &numeric).sqrt());
    println!("cosine(analytic, numeric) = {cos:.12}");
    assert!(
        grads_close(&analytic, &numeric, 1e-6, 1e-9),
        "gradient audit failed"
    );
    println!("all {} input partials agree to rtol 1e-6", analytic.len());
    Ok(())
}
