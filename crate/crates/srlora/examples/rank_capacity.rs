//! Static rank-8 adapters against a recomposing one on a task whose
//! hidden update has rank 16: the statics are pinned above the
//! Eckart-Young floor of their rank budget, while slot recycling walks
//! through enough directions to go below it.
//!
//! Verdicts use the exact error under the input distribution,
//! E[mse] = (|W_eff - W_teacher|_F^2 + |bias|^2) / 2, so there is no
//! sampling noise in the comparison.

use srlora::{
    best_rank_k_error, Activation, ArchitectureConfig, DatasetConfig, DeltaKind, Matrix, Mode,
    RunConfig, TrainRun,
};

fn config(mode: Mode) -> RunConfig {
    RunConfig {
        seed: 11,
        n_all: 3000,
        batch_size: 16,
        learning_rate: 0.01,
        momentum: 0.9,
        rank: 8,
        alpha: 8.0,
        gamma: 0.5,
        r_target: Some(if mode == Mode::Srlora { 32 } else { 8 }),
        beta1: 0.85,
        beta2: 0.85,
        reset_scope: Default::default(),
        mode,
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
        eval_every: 50,
        output_dir: None,
    }
}

fn exact_mse(run: &TrainRun, target: &Matrix) -> f64 {
    let layer = run.net().layer(0);
    let w = layer.adapter().expect("adapted").effective_weight();
    let weight = w.sub(target).expect("same shape").frobenius_norm();
    0.5 * (weight.powi(2) + layer.bias().frobenius_norm().powi(2))
}

fn main() -> srlora::Result<()> {
    println!("{:>14} {:>12} {:>12} {:>12}", "mode", "min/bound", "final/bound", "steps");
    for mode in [Mode::LoraStatic, Mode::PissaStatic, Mode::Srlora] {
        let mut run = TrainRun::new(config(mode))?;
        let teacher = run.teacher().expect("teacher task").clone();
        let target = teacher.target_weight();
        // Any rank-8 update leaves at least the tail of the best rank-8
        // approximation of the hidden delta.
        let bound = 0.5 * best_rank_k_error(teacher.delta_star(), 8)?.powi(2);

        let n_all = run.config().n_all;
        let mut min_ratio = f64::MAX;
        for t in 1..=n_all {
            run.run_until(t)?;
            min_ratio = min_ratio.min(exact_mse(&run, &target) / bound);
        }
        let final_ratio = exact_mse(&run, &target) / bound;
        println!("{:>14} {min_ratio:>12.4} {final_ratio:>12.4} {n_all:>12}", format!("{mode:?}"));
    }
    println!("\nratios below 1.0 are impossible for a static rank-8 adapter");
    Ok(())
}
