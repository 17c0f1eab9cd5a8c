//! Watch the smoothed per-slot importance scores evolve during a short
//! run. The scores are what the switching rule ranks when it picks
//! victims, so slots the task never uses should sink toward the bottom.

use srlora::{
    Activation, ArchitectureConfig, DatasetConfig, DeltaKind, Mode, RunConfig, TrainRun,
};

fn main() -> srlora::Result<()> {
    let config = RunConfig {
        seed: 9,
        n_all: 400,
        batch_size: 16,
        learning_rate: 0.01,
        momentum: 0.9,
        rank: 6,
        alpha: 6.0,
        gamma: 0.5,
        r_target: None,
        beta1: 0.85,
        beta2: 0.85,
        reset_scope: Default::default(),
        mode: Mode::PissaStatic,
        architecture: ArchitectureConfig {
            dims: vec![24, 24],
            activations: vec![Activation::Identity],
            adapted: None,
        },
        // A rank-2 hidden update: most of the 6 slots have nothing to learn.
        dataset: DatasetConfig::TeacherStudent {
            n_samples: 128,
            k_star: 2,
            delta_scale: 0.2,
            delta_kind: DeltaKind::Spectral,
            noise_std: 0.0,
            seed: None,
        },
        eval_every: 50,
        output_dir: None,
    };
    let mut run = TrainRun::new(config)?;

    println!("slot scores of the adapted layer (rank 6, rank-2 task):\n");
    print!("{:>6}", "step");
    for slot in 0..6 {
        print!(" {:>10}", format!("slot {slot}"));
    }
    println!();

    for checkpoint in [25, 50, 100, 200, 400] {
        run.run_until(checkpoint)?;
        let state = run.net().layer(0).importance().expect("adapted layer");
        let scores = state.slot_scores();
        print!("{checkpoint:>6}");
        for s in &scores.scores {
            print!(" {s:>10.3e}");
        }
        println!();
    }

    let state = run.net().layer(0).importance().expect("adapted layer");
    let scores = state.slot_scores();
    let mut order: Vec<usize> = (0..scores.scores.len()).collect();
    order.sort_by(|&i, &j| scores.scores[j].total_cmp(&scores.scores[i]));
    println!("\nslots by final importance, highest first: {order:?}");
    Ok(())
}
