//! Paired-seed comparison of two configurations that differ only in mode
//! and rank target, the same protocol as `srlora compare`.

use srlora::{
    train, Activation, ArchitectureConfig, DatasetConfig, DeltaKind, Mode, RunConfig,
};

fn base() -> RunConfig {
    RunConfig {
        seed: 0,
        n_all: 1500,
        batch_size: 16,
        learning_rate: 0.01,
        momentum: 0.9,
        rank: 4,
        alpha: 4.0,
        gamma: 0.5,
        r_target: Some(4),
        beta1: 0.85,
        beta2: 0.85,
        reset_scope: Default::default(),
        mode: Mode::LoraStatic,
        architecture: ArchitectureConfig {
            dims: vec![24, 24],
            activations: vec![Activation::Identity],
            adapted: None,
        },
        dataset: DatasetConfig::TeacherStudent {
            n_samples: 192,
            k_star: 12,
            delta_scale: 0.2,
            delta_kind: DeltaKind::Spectral,
            noise_std: 0.0,
            seed: None,
        },
        eval_every: 50,
        output_dir: None,
    }
}

fn main() -> srlora::Result<()> {
    let config_a = base();
    let mut config_b = base();
    config_b.mode = Mode::Srlora;
    config_b.r_target = Some(16);

    println!("a: static rank 4; b: rank 4 recomposing to 16\n");
    println!("{:>6} {:>14} {:>14} {:>8}", "seed", "final loss a", "final loss b", "winner");

    let (mut wins_a, mut wins_b) = (0, 0);
    for seed in [1u64, 2, 3, 4, 5] {
        let run_with = |config: &RunConfig| -> srlora::Result<f64> {
            let mut config = config.clone();
            config.seed = seed;
            train(config)?.eval_loss()
        };
        let loss_a = run_with(&config_a)?;
        let loss_b = run_with(&config_b)?;
        let winner = if loss_a < loss_b {
            wins_a += 1;
            "a"
        } else {
            wins_b += 1;
            "b"
        };
        println!("{seed:>6} {loss_a:>14.6e} {loss_b:>14.6e} {winner:>8}");
    }
    println!("\nsummary: a wins {wins_a}, b wins {wins_b}");
    Ok(())
}
