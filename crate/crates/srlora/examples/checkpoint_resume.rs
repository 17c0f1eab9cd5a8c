//! Interrupt a run halfway, resume it from the checkpoint, and reproduce
//! the uninterrupted run byte for byte. The checkpoint carries the
//! optimizer, importance filters, ledger, and the positions of every
//! random stream, so the resumed run consumes exactly the batches the
//! uninterrupted one would have.

use srlora::{
    Activation, ArchitectureConfig, DatasetConfig, Mode, RunConfig, TrainRun,
};

fn config() -> RunConfig {
    RunConfig {
        seed: 5,
        n_all: 240,
        batch_size: 8,
        learning_rate: 0.01,
        momentum: 0.9,
        rank: 4,
        alpha: 4.0,
        gamma: 0.5,
        r_target: Some(8),
        beta1: 0.85,
        beta2: 0.85,
        reset_scope: Default::default(),
        mode: Mode::Srlora,
        architecture: ArchitectureConfig {
            dims: vec![16, 12, 16],
            activations: vec![Activation::Relu, Activation::Identity],
            adapted: None,
        },
        dataset: DatasetConfig::SyntheticRegression {
            n_samples: 96,
            noise_std: 0.01,
            teacher_scale: 1.0,
            seed: None,
        },
        eval_every: 20,
        output_dir: None,
    }
}

fn main() -> srlora::Result<()> {
    let path = std::env::temp_dir().join("srlora-resume-example.srlc");

    let mut uninterrupted = TrainRun::new(config())?;
    uninterrupted.run_to_completion()?;

    let mut first_half = TrainRun::new(config())?;
    first_half.run_until(120)?;
    first_half.save_checkpoint(&path)?;
    println!(
        "saved checkpoint at step 120 ({} bytes)",
        std::fs::metadata(&path)?.len()
    );

    let mut resumed = TrainRun::resume(config(), &path)?;
    resumed.run_to_completion()?;

    let a = uninterrupted.metrics().to_csv();
    let b = resumed.metrics().to_csv();
    println!(
        "uninterrupted vs interrupted+resumed metrics: {}",
        if a == b { "byte-identical" } else { "DIFFER" }
    );
    println!("final eval loss {}", resumed.eval_loss()?);

    // A structural mismatch is rejected instead of silently producing a
    // different run.
    let mut other = config();
    other.rank = 8;
    other.alpha = 8.0;
    other.r_target = Some(8);
    match TrainRun::resume(other, &path) {
        Err(e) => println!("resume with a different structure: {e}"),
        Ok(_) => println!("resume with a different structure unexpectedly succeeded"),
    }
    std::fs::remove_file(&path).ok();
    Ok(())
}
