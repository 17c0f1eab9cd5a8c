//! Analytic gradients against central finite differences for every
//! trainable parameter of a small relu net, reported per parameter block.
//!
//! The probe loss is the same mse the trainer uses. Differences are
//! relative with denominator max(|analytic|, 1e-8) and step 1e-6.

use srlora::{
    loss_and_grad, Activation, ArchitectureConfig, DatasetConfig, LossKind, Mode, Rng, RunConfig,
    SrloraNet, TrainRun,
};

fn config() -> RunConfig {
    RunConfig {
        seed: 102,
        n_all: 100,
        batch_size: 8,
        learning_rate: 0.01,
        momentum: 0.9,
        rank: 4,
        alpha: 4.0,
        gamma: 0.5,
        r_target: None,
        beta1: 0.85,
        beta2: 0.85,
        reset_scope: Default::default(),
        mode: Mode::Srlora,
        architecture: ArchitectureConfig {
            dims: vec![16, 16, 16],
            activations: vec![Activation::Relu, Activation::Identity],
            adapted: None,
        },
        dataset: DatasetConfig::SyntheticRegression {
            n_samples: 48,
            noise_std: 0.0,
            teacher_scale: 1.0,
            seed: None,
        },
        eval_every: 50,
        output_dir: None,
    }
}

fn main() -> srlora::Result<()> {
    let run = TrainRun::new(config())?;
    let net = run.net().clone();
    let x = Rng::new(103).gaussian(net.input_dim(), 4, 0.0, 1.0);
    let target = Rng::new(104).gaussian(net.output_dim(), 4, 0.0, 1.0);

    let (y_hat, cache) = net.forward(&x)?;
    let (loss, d_out) = loss_and_grad(LossKind::Mse, &y_hat, &target)?;
    let grads = net.backward(&cache, &d_out)?;
    println!("probe loss {loss:.6}, checking every trainable parameter\n");

    let loss_of = |net: &SrloraNet| -> f64 {
        let (y, _) = net.forward(&x).expect("forward");
        loss_and_grad(LossKind::Mse, &y, &target).expect("loss").0
    };
    let h = 1e-6;
    let rel = |analytic: f64, numeric: f64| (analytic - numeric).abs() / analytic.abs().max(1e-8);

    println!("{:>8} {:>8} {:>8} {:>14}", "layer", "block", "params", "max rel err");
    let mut overall = 0.0f64;
    for l in 0..net.n_layers() {
        let entry = &grads.layers[l];

        let mut worst = 0.0f64;
        for i in 0..net.layer(l).out_dim() {
            let base = net.layer(l).bias().get(i, 0);
            let mut probe = net.clone();
            probe.layer_mut(l).bias_mut().set(i, 0, base + h);
            let up = loss_of(&probe);
            probe.layer_mut(l).bias_mut().set(i, 0, base - h);
            let down = loss_of(&probe);
            worst = worst.max(rel(entry.bias.get(i, 0), (up - down) / (2.0 * h)));
        }
        println!("{l:>8} {:>8} {:>8} {worst:>14.2e}", "bias", net.layer(l).out_dim());
        overall = overall.max(worst);

        let Some(ag) = entry.adapter.as_ref() else {
            continue;
        };
        for (name, d, pick) in [
            ("b", &ag.d_b, true),
            ("a", &ag.d_a, false),
        ] {
            let (rows, cols) = d.shape();
            let mut worst = 0.0f64;
            for i in 0..rows {
                for j in 0..cols {
                    let adapter = net.layer(l).adapter().expect("adapted");
                    let base = if pick { adapter.b().get(i, j) } else { adapter.a().get(i, j) };
                    let set = |probe: &mut SrloraNet, v: f64| {
                        let (factors, _) = probe.layer_mut(l).adapted_parts_mut().expect("adapted");
                        if pick {
                            factors.b_mut().set(i, j, v);
                        } else {
                            factors.a_mut().set(i, j, v);
                        }
                    };
                    let mut probe = net.clone();
                    set(&mut probe, base + h);
                    let up = loss_of(&probe);
                    set(&mut probe, base - h);
                    let down = loss_of(&probe);
                    worst = worst.max(rel(d.get(i, j), (up - down) / (2.0 * h)));
                }
            }
            println!("{l:>8} {name:>8} {:>8} {worst:>14.2e}", rows * cols);
            overall = overall.max(worst);
        }
    }
    println!("\noverall max relative error {overall:.2e}");
    Ok(())
}
