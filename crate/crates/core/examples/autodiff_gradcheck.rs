//! Build a small LSTM regressor on the tape, check its gradients against
//! central differences, then fit it with Adam.
//!
//! ```text
//! cargo run --release --example autodiff_gradcheck
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stepcast::autodiff::{
    grad_check, Activation, Adam, AdamConfig, Dense, Lstm, ParameterSet, Tape, Tensor,
};

fn main() -> stepcast::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (steps, batch, d, h) = (5, 8, 3, 6);
    let lstm = Lstm::new("lstm", d, h);
    let head = Dense::new("head", h, 1, Activation::Identity);
    let mut params = ParameterSet::new();
    lstm.init(&mut params, &mut rng);
    head.init(&mut params, &mut rng);

    // Target: the mean of the first feature over the sequence.
    // Rows are time-major: step t occupies rows t*batch .. (t+1)*batch.
    let x: Vec<f64> = (0..steps * batch * d)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let y: Vec<f64> = (0..batch)
        .map(|b| (0..steps).map(|t| x[(t * batch + b) * d]).sum::<f64>() / steps as f64)
        .collect();
    let x = Tensor::matrix(steps * batch, d, x)?;
    let y = Tensor::matrix(batch, 1, y)?;

    let objective = |ps: &mut ParameterSet| -> stepcast::Result<f64> {
        ps.zero_grad();
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let trace = lstm.unroll(&mut tape, ps, xv, steps, batch, None)?;
        let out = head.forward(&mut tape, ps, trace.h)?;
        let loss = tape.mse(out, y.clone())?;
        tape.backward(loss, ps)?;
        Ok(tape.value(loss).values()[0])
    };

    let report = grad_check(&params, objective, 1e-5, 64, 7)?;
    for (name, t) in &report.per_tensor {
        println!(
            "{name:<14} {:>3} entries, max rel err {:.2e}",
            t.entries_checked, t.max_relative_error
        );
    }
    println!("passes at 1e-4: {}", report.passes(1e-4));

    let mut adam = Adam::new(AdamConfig {
        lr: 0.02,
        ..AdamConfig::default()
    });
    for epoch in 0..=200 {
        let loss = objective(&mut params)?;
        if epoch % 50 == 0 {
            println!("epoch {epoch:>3}: mse {loss:.5}");
        }
        adam.step(&mut params)?;
    }
    Ok(())
}
