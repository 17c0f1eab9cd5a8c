//! A complete training run with scheduled recomposition, writing the
//! standard artifacts (metrics.csv, ledger.csv, checkpoint.srlc,
//! resolved-config.json) into a scratch directory.

use srlora::{
    train, write_artifacts, Activation, ArchitectureConfig, DatasetConfig, DeltaKind, Mode,
    RunConfig,
};

fn main() -> srlora::Result<()> {
    let out_dir = std::env::temp_dir().join("srlora-train-example");
    let config = RunConfig {
        seed: 11,
        n_all: 1200,
        batch_size: 16,
        learning_rate: 0.01,
        momentum: 0.9,
        rank: 8,
        alpha: 8.0,
        gamma: 0.5,
        r_target: Some(16),
        beta1: 0.85,
        beta2: 0.85,
        reset_scope: Default::default(),
        mode: Mode::Srlora,
        architecture: ArchitectureConfig {
            dims: vec![32, 32],
            activations: vec![Activation::Identity],
            adapted: None,
        },
        dataset: DatasetConfig::TeacherStudent {
            n_samples: 256,
            k_star: 16,
            delta_scale: 0.1767766952966369,
            delta_kind: DeltaKind::Spectral,
            noise_std: 0.0,
            seed: None,
        },
        eval_every: 100,
        output_dir: None,
    };

    let run = train(config)?;

    println!("{:>6} {:>14} {:>14} {:>7}", "step", "train", "eval", "switch");
    for row in run.metrics().rows() {
        let train = row.train_loss.map(|x| format!("{x:.6}")).unwrap_or_default();
        println!(
            "{:>6} {:>14} {:>14.6} {:>7}",
            row.step,
            train,
            row.eval_loss,
            if row.switch_flag { "*" } else { "" }
        );
    }
    println!("\nfinal eval loss {}", run.eval_loss()?);

    let paths = write_artifacts(&run, &out_dir)?;
    for p in [&paths.metrics, &paths.ledger, &paths.checkpoint, &paths.resolved_config] {
        println!("wrote {}", p.display());
    }
    Ok(())
}
