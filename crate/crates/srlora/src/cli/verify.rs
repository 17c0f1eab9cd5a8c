//! Seeded property suites behind `srlora verify`.
//!
//! Each check is a pure function of hard-coded seeds: it either passes with
//! a one-line detail (worst error observed, cases covered) or fails with
//! the offending value. The suites re-derive expected values from
//! independent identities rather than from the code under test.

use clap::ValueEnum;

use crate::adapter::LoraLinear;
use crate::error::{Error, Result};
use crate::importance::ImportanceState;
use crate::linalg::{best_rank_k_error, relative_frobenius_distance, svd, Matrix, Rng};
use crate::model::{loss_and_grad, Activation, LossKind};
use crate::recompose::{
    build_schedule, open_initial_episodes, recompose_step, ResetScope, SlotLedger,
};
use crate::trainer::{ArchitectureConfig, DatasetConfig, Mode, RunConfig, TrainRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Svd,
    Gradients,
    Preservation,
    Schedule,
    All,
}

struct Check {
    name: &'static str,
    run: fn() -> Result<String>,
}

fn suite_checks(suite: Suite) -> Vec<Check> {
    let svd_checks = || {
        vec![
            Check {
                name: "svd/reconstruction",
                run: svd_reconstruction,
            },
            Check {
                name: "svd/orthonormality",
                run: svd_orthonormality,
            },
            Check {
                name: "svd/ordering_and_signs",
                run: svd_ordering_and_signs,
            },
            Check {
                name: "svd/low_rank_recovery",
                run: svd_low_rank_recovery,
            },
            Check {
                name: "svd/truncation_tail",
                run: svd_truncation_tail,
            },
            Check {
                name: "svd/determinism",
                run: svd_determinism,
            },
        ]
    };
    let gradient_checks = || {
        vec![
            Check {
                name: "gradients/adapter_factors",
                run: gradients_adapter_factors,
            },
            Check {
                name: "gradients/network_end_to_end",
                run: gradients_network,
            },
            Check {
                name: "gradients/input_path",
                run: gradients_input_path,
            },
        ]
    };
    let preservation_checks = || {
        vec![
            Check {
                name: "preservation/single_recompose",
                run: preservation_single_recompose,
            },
            Check {
                name: "preservation/training_probe",
                run: preservation_training_probe,
            },
            Check {
                name: "preservation/exhaustion_skip",
                run: preservation_exhaustion_skip,
            },
        ]
    };
    let schedule_checks = || {
        vec![
            Check {
                name: "schedule/canonical_cases",
                run: schedule_canonical_cases,
            },
            Check {
                name: "schedule/rejections",
                run: schedule_rejections,
            },
            Check {
                name: "schedule/cadence",
                run: schedule_cadence,
            },
        ]
    };
    match suite {
        Suite::Svd => svd_checks(),
        Suite::Gradients => gradient_checks(),
        Suite::Preservation => preservation_checks(),
        Suite::Schedule => schedule_checks(),
        Suite::All => {
            let mut all = svd_checks();
            all.extend(gradient_checks());
            all.extend(preservation_checks());
            all.extend(schedule_checks());
            all
        }
    }
}

pub(super) fn cmd_verify(suite: Suite) -> i32 {
    let checks = suite_checks(suite);
    let total = checks.len();
    let mut failed = 0usize;
    for check in checks {
        match (check.run)() {
            Ok(detail) => println!("PASS {} ({detail})", check.name),
            Err(e) => {
                failed += 1;
                println!("FAIL {} ({e})", check.name);
            }
        }
    }
    if failed == 0 {
        println!("{total} checks passed");
        0
    } else {
        println!("{failed} of {total} checks failed");
        2
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}

fn test_shapes() -> Vec<(usize, usize)> {
    vec![
        (1, 1),
        (3, 7),
        (7, 3),
        (8, 8),
        (12, 5),
        (5, 12),
        (16, 16),
        (24, 32),
    ]
}

fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
    Rng::new(seed).gaussian(rows, cols, 0.0, 1.0)
}

fn svd_reconstruction() -> Result<String> {
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for (m, n) in test_shapes() {
        for seed in [11, 12, 13] {
            let w = seeded(m, n, seed);
            let f = svd(&w)?;
            let err = relative_frobenius_distance(&f.reconstruct(), &w)?;
            worst = worst.max(err);
            cases += 1;
        }
    }
    ensure(worst <= 1e-12, || format!("reconstruction error {worst:.2e}"))?;
    Ok(format!("max rel err {worst:.1e} over {cases} matrices"))
}

fn svd_orthonormality() -> Result<String> {
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for (m, n) in test_shapes() {
        let w = seeded(m, n, 21);
        let f = svd(&w)?;
        for factor in [f.u(), f.v()] {
            let gram = factor.matmul_tn(factor)?;
            let eye = Matrix::identity(gram.rows());
            worst = worst.max(gram.sub(&eye)?.max_abs());
        }
        cases += 1;
    }
    ensure(worst <= 1e-12, || format!("gram deviation {worst:.2e}"))?;
    Ok(format!("max gram deviation {worst:.1e} over {cases} matrices"))
}

fn svd_ordering_and_signs() -> Result<String> {
    let mut cases = 0usize;
    for (m, n) in test_shapes() {
        let w = seeded(m, n, 31);
        let f = svd(&w)?;
        for pair in f.s().windows(2) {
            ensure(pair[0] >= pair[1], || {
                format!("singular values out of order: {} < {}", pair[0], pair[1])
            })?;
        }
        for k in 0..f.d() {
            let col = f.u().column(k);
            let lead = col
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .expect("column is non-empty");
            ensure(lead >= 0.0, || {
                format!("column {k} leading entry {lead} is negative")
            })?;
        }
        cases += 1;
    }
    Ok(format!("descending order and sign fix over {cases} matrices"))
}

fn svd_low_rank_recovery() -> Result<String> {
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    for (m, n, k) in [(9, 7, 2), (12, 12, 4), (6, 10, 1), (20, 15, 6)] {
        let mut rng = Rng::new(41 + k as u64);
        let p = rng.gaussian(m, k, 0.0, 1.0);
        let q = rng.gaussian(k, n, 0.0, 1.0);
        let w = p.matmul(&q)?;
        let f = svd(&w)?;
        let top = f.s()[0];
        for &sigma in &f.s()[k..] {
            worst = worst.max(sigma / top);
        }
        worst = worst.max(best_rank_k_error(&w, k)? / top);
        cases += 1;
    }
    ensure(worst <= 1e-10, || format!("rank leakage {worst:.2e}"))?;
    Ok(format!("max tail leakage {worst:.1e} over {cases} products"))
}

fn svd_truncation_tail() -> Result<String> {
    // best_rank_k_error must equal the residual of the explicit truncated
    // reconstruction.
    let mut worst = 0.0f64;
    let w = seeded(10, 8, 51);
    let f = svd(&w)?;
    for k in 0..=f.d() {
        let mut truncated = Matrix::zeros(10, 8);
        for i in 0..k {
            let u_col = f.u().column(i);
            let v_col = f.v().column(i);
            truncated.add_outer(f.s()[i], &u_col, &v_col)?;
        }
        let residual = w.sub(&truncated)?.frobenius_norm();
        let err = (best_rank_k_error(&w, k)? - residual).abs() / w.frobenius_norm();
        worst = worst.max(err);
    }
    ensure(worst <= 1e-10, || format!("tail mismatch {worst:.2e}"))?;
    Ok(format!("max tail mismatch {worst:.1e} over every k"))
}

fn svd_determinism() -> Result<String> {
    let mut cases = 0usize;
    for (m, n) in test_shapes() {
        let w = seeded(m, n, 61);
        let f1 = svd(&w)?;
        let f2 = svd(&w)?;
        ensure(
            f1.u().data() == f2.u().data()
                && f1.s() == f2.s()
                && f1.v().data() == f2.v().data(),
            || format!("{m}x{n} factorization is not reproducible"),
        )?;
        cases += 1;
    }
    Ok(format!("bitwise identical factors over {cases} matrices"))
}

/// Central-difference gradient of `loss(f(x))` with respect to one entry.
fn central_diff(mut eval: impl FnMut(f64) -> Result<f64>, at: f64, h: f64) -> Result<f64> {
    Ok((eval(at + h)? - eval(at - h)?) / (2.0 * h))
}

fn max_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1e-8)
}

fn gradients_adapter_factors() -> Result<String> {
    let mut worst = 0.0f64;
    let mut params = 0usize;
    for (m, n, r, batch) in [(5, 4, 2, 3), (3, 8, 3, 1), (9, 9, 4, 6), (1, 6, 1, 2), (7, 2, 2, 5)] {
        let mut rng = Rng::new(1000 + (m * 31 + n * 7 + r) as u64);
        let w0 = rng.gaussian(m, n, 0.0, 1.0);
        let layer = LoraLinear::pissa_init(&w0, r, r as f64)?;
        let x = rng.gaussian(n, batch, 0.0, 1.0);
        let d_y = rng.gaussian(m, batch, 0.0, 1.0);
        let grads = layer.backward(&x, &d_y)?;
        // Pseudo-loss sum(d_y * forward(x)) has exactly d_y as its output
        // gradient.
        let loss_of = |layer: &LoraLinear| -> Result<f64> {
            let y = layer.forward(&x)?;
            let mut total = 0.0;
            for i in 0..m {
                for j in 0..batch {
                    total += d_y.get(i, j) * y.get(i, j);
                }
            }
            Ok(total)
        };
        for i in 0..m {
            for k in 0..r {
                let base = layer.b().get(i, k);
                let numeric = central_diff(
                    |v| {
                        let mut probe = layer.clone();
                        probe.b_mut().set(i, k, v);
                        loss_of(&probe)
                    },
                    base,
                    1e-6,
                )?;
                worst = worst.max(max_rel_err(grads.d_b.get(i, k), numeric));
                params += 1;
            }
        }
        for k in 0..r {
            for j in 0..n {
                let base = layer.a().get(k, j);
                let numeric = central_diff(
                    |v| {
                        let mut probe = layer.clone();
                        probe.a_mut().set(k, j, v);
                        loss_of(&probe)
                    },
                    base,
                    1e-6,
                )?;
                worst = worst.max(max_rel_err(grads.d_a.get(k, j), numeric));
                params += 1;
            }
        }
    }
    ensure(worst <= 1e-5, || format!("factor gradient off by {worst:.2e}"))?;
    Ok(format!("max rel err {worst:.1e} over {params} parameters"))
}

fn gradients_network() -> Result<String> {
    // The oracle itself is noisy: at step 1e-6 a central difference carries
    // roundoff of order eps * |loss| / (2h) in absolute terms, about 1e-9
    // here, so parameters whose true gradient is ~1e-4 see relative noise
    // near the 1e-5 tolerance. The seed is pinned to a net whose smallest
    // gradient magnitudes leave the oracle a 20x margin; an actual
    // gradient bug shows errors of order 1 at any seed.
    let config = relu_net_config(102, 120);
    let run = TrainRun::new(config)?;
    let net = run.net().clone();
    let x = Rng::new(103).gaussian(net.input_dim(), 4, 0.0, 1.0);
    let target = Rng::new(104).gaussian(net.output_dim(), 4, 0.0, 1.0);

    let (y_hat, cache) = net.forward(&x)?;
    let (_, d_out) = loss_and_grad(LossKind::Mse, &y_hat, &target)?;
    let grads = net.backward(&cache, &d_out)?;

    let loss_of = |net: &crate::model::SrloraNet| -> Result<f64> {
        let (y, _) = net.forward(&x)?;
        Ok(loss_and_grad(LossKind::Mse, &y, &target)?.0)
    };

    let mut worst = 0.0f64;
    let mut params = 0usize;
    for l in 0..net.n_layers() {
        let entry = &grads.layers[l];
        for i in 0..net.layer(l).out_dim() {
            let base = net.layer(l).bias().get(i, 0);
            let numeric = central_diff(
                |v| {
                    let mut probe = net.clone();
                    probe.layer_mut(l).bias_mut().set(i, 0, v);
                    loss_of(&probe)
                },
                base,
                1e-6,
            )?;
            worst = worst.max(max_rel_err(entry.bias.get(i, 0), numeric));
            params += 1;
        }
        let Some(adapter_grads) = entry.adapter.as_ref() else {
            continue;
        };
        let (rows_b, cols_b) = adapter_grads.d_b.shape();
        for i in 0..rows_b {
            for k in 0..cols_b {
                let base = net.layer(l).adapter().expect("adapted").b().get(i, k);
                let numeric = central_diff(
                    |v| {
                        let mut probe = net.clone();
                        let (adapter, _) = probe.layer_mut(l).adapted_parts_mut().expect("adapted");
                        adapter.b_mut().set(i, k, v);
                        loss_of(&probe)
                    },
                    base,
                    1e-6,
                )?;
                worst = worst.max(max_rel_err(adapter_grads.d_b.get(i, k), numeric));
                params += 1;
            }
        }
        let (rows_a, cols_a) = adapter_grads.d_a.shape();
        for k in 0..rows_a {
            for j in 0..cols_a {
                let base = net.layer(l).adapter().expect("adapted").a().get(k, j);
                let numeric = central_diff(
                    |v| {
                        let mut probe = net.clone();
                        let (adapter, _) = probe.layer_mut(l).adapted_parts_mut().expect("adapted");
                        adapter.a_mut().set(k, j, v);
                        loss_of(&probe)
                    },
                    base,
                    1e-6,
                )?;
                worst = worst.max(max_rel_err(adapter_grads.d_a.get(k, j), numeric));
                params += 1;
            }
        }
    }
    ensure(worst <= 1e-5, || format!("network gradient off by {worst:.2e}"))?;
    Ok(format!("max rel err {worst:.1e} over {params} parameters"))
}

fn gradients_input_path() -> Result<String> {
    // d_x from one layer feeds the chain rule of deeper stacks, so it gets
    // its own finite-difference pass.
    let mut rng = Rng::new(90);
    let w0 = rng.gaussian(6, 5, 0.0, 1.0);
    let layer = LoraLinear::pissa_init(&w0, 3, 3.0)?;
    let x = rng.gaussian(5, 4, 0.0, 1.0);
    let d_y = rng.gaussian(6, 4, 0.0, 1.0);
    let grads = layer.backward(&x, &d_y)?;
    let mut worst = 0.0f64;
    for j in 0..5 {
        for c in 0..4 {
            let base = x.get(j, c);
            let numeric = central_diff(
                |v| {
                    let mut probe = x.clone();
                    probe.set(j, c, v);
                    let y = layer.forward(&probe)?;
                    let mut total = 0.0;
                    for i in 0..6 {
                        for b in 0..4 {
                            total += d_y.get(i, b) * y.get(i, b);
                        }
                    }
                    Ok(total)
                },
                base,
                1e-6,
            )?;
            worst = worst.max(max_rel_err(grads.d_x.get(j, c), numeric));
        }
    }
    ensure(worst <= 1e-5, || format!("input gradient off by {worst:.2e}"))?;
    Ok(format!("max rel err {worst:.1e} over 20 inputs"))
}

fn relu_net_config(seed: u64, n_all: usize) -> RunConfig {
    RunConfig {
        seed,
        n_all,
        batch_size: 8,
        learning_rate: 0.01,
        momentum: 0.9,
        rank: 4,
        alpha: 4.0,
        gamma: 0.5,
        r_target: None,
        beta1: 0.85,
        beta2: 0.85,
        reset_scope: ResetScope::Recycled,
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

fn preservation_single_recompose() -> Result<String> {
    let mut worst = 0.0f64;
    let mut switches = 0usize;
    for seed in [7, 8, 9, 10] {
        let mut rng = Rng::new(seed);
        let w0 = rng.gaussian(12, 12, 0.0, 1.0);
        let mut layer = LoraLinear::pissa_init(&w0, 4, 4.0)?;
        let mut importance = ImportanceState::for_layer(&layer, 0.85, 0.85)?;
        for _ in 0..5 {
            let x = rng.gaussian(12, 6, 0.0, 1.0);
            let d_y = rng.gaussian(12, 6, 0.0, 1.0);
            let grads = layer.backward(&x, &d_y)?;
            importance.ema_update(&layer, &grads)?;
        }
        let schedule = build_schedule(4, 0.5, 8, 100)?;
        let mut ledger = SlotLedger::new(1);
        open_initial_episodes(&mut ledger, 0, &layer)?;
        let before = layer.effective_weight();
        recompose_step(
            &mut layer,
            &mut importance,
            &schedule,
            &mut ledger,
            0,
            50,
            ResetScope::Recycled,
        )?;
        let after = layer.effective_weight();
        worst = worst.max(relative_frobenius_distance(&after, &before)?);
        switches += 1;
    }
    ensure(worst <= 1e-8, || format!("effective weight moved {worst:.2e}"))?;
    Ok(format!("max effective-weight drift {worst:.1e} over {switches} switches"))
}

fn preservation_training_probe() -> Result<String> {
    let mut config = relu_net_config(123, 120);
    config.r_target = Some(8);
    let mut run = TrainRun::new(config)?;
    let probe = run.eval_set().inputs().clone();
    let switch_steps = run
        .schedule()
        .expect("srlora run has a schedule")
        .switch_steps
        .clone();
    let mut worst = 0.0f64;
    for &t in &switch_steps {
        run.run_until(t - 1)?;
        let (before, _) = run.net().forward(&probe)?;
        run.run_until(t)?;
        let (after, _) = run.net().forward(&probe)?;
        worst = worst.max(relative_frobenius_distance(&after, &before)?);
    }
    run.run_to_completion()?;
    ensure(worst <= 1e-6, || format!("probe output moved {worst:.2e}"))?;
    Ok(format!(
        "max probe divergence {worst:.1e} over {} switches",
        switch_steps.len()
    ))
}

fn preservation_exhaustion_skip() -> Result<String> {
    // A 3x3 layer at rank 2 has only one unused direction, fewer than
    // gamma * r = 1... one is enough for r_prime = 1; use rank 2 with
    // r_prime 1 after consuming the bank: p_r reaches 3, then the next
    // switch must skip and leave the layer untouched.
    let mut rng = Rng::new(14);
    let w0 = rng.gaussian(3, 3, 0.0, 1.0);
    let mut layer = LoraLinear::pissa_init(&w0, 2, 2.0)?;
    let mut importance = ImportanceState::for_layer(&layer, 0.85, 0.85)?;
    let schedule = build_schedule(2, 0.5, 4, 100)?;
    let mut ledger = SlotLedger::new(1);
    open_initial_episodes(&mut ledger, 0, &layer)?;
    for step in [50, 100] {
        let x = rng.gaussian(3, 4, 0.0, 1.0);
        let d_y = rng.gaussian(3, 4, 0.0, 1.0);
        let grads = layer.backward(&x, &d_y)?;
        importance.ema_update(&layer, &grads)?;
        let recycled = recompose_step(
            &mut layer,
            &mut importance,
            &schedule,
            &mut ledger,
            0,
            step,
            ResetScope::Recycled,
        )?;
        match step {
            50 => ensure(recycled.len() == 1, || {
                format!("first switch recycled {} slots, expected 1", recycled.len())
            })?,
            _ => {
                let before = layer.clone();
                ensure(recycled.is_empty(), || {
                    format!("exhausted switch recycled {} slots", recycled.len())
                })?;
                ensure(layer.w().data() == before.w().data(), || {
                    "exhausted switch modified the base weight".to_string()
                })?;
            }
        }
    }
    ensure(layer.p_r() == 3, || format!("p_r is {}, expected 3", layer.p_r()))?;
    Ok("bank exhaustion skips the switch and preserves state".to_string())
}

fn schedule_canonical_cases() -> Result<String> {
    let wide = build_schedule(8, 0.5, 512, 63000)?;
    ensure(wide.n_switch == 126, || {
        format!("n_switch {} for the 512-target case, expected 126", wide.n_switch)
    })?;
    ensure(wide.t_interval == 500, || {
        format!("t_interval {} for the 512-target case, expected 500", wide.t_interval)
    })?;
    let narrow = build_schedule(8, 0.5, 16, 1000)?;
    ensure(narrow.switch_steps == vec![500, 1000], || {
        format!("switch steps {:?}, expected [500, 1000]", narrow.switch_steps)
    })?;
    Ok("both canonical schedules verified".to_string())
}

fn schedule_rejections() -> Result<String> {
    ensure(build_schedule(5, 0.5, 10, 100).is_err(), || {
        "fractional gamma * r was accepted".to_string()
    })?;
    ensure(build_schedule(8, 0.5, 14, 100).is_err(), || {
        "indivisible rank gap was accepted".to_string()
    })?;
    ensure(build_schedule(8, 0.5, 512, 50).is_err(), || {
        "more switches than steps was accepted".to_string()
    })?;
    ensure(build_schedule(8, 0.5, 4, 100).is_err(), || {
        "target below rank was accepted".to_string()
    })?;
    Ok("4 malformed schedules rejected".to_string())
}

fn schedule_cadence() -> Result<String> {
    let mut cases = 0usize;
    for (r, gamma, r_target, n_all) in [(8, 0.5, 16, 1000), (4, 0.5, 12, 120), (6, 1.0, 30, 400), (16, 0.25, 32, 963)] {
        let s = build_schedule(r, gamma, r_target, n_all)?;
        ensure(s.switch_steps.len() == s.n_switch, || {
            format!("{} steps for n_switch {}", s.switch_steps.len(), s.n_switch)
        })?;
        ensure(s.switch_steps.windows(2).all(|w| w[0] < w[1]), || {
            "switch steps are not strictly ascending".to_string()
        })?;
        ensure(s.switch_steps.iter().all(|&t| t >= 1 && t <= n_all), || {
            "switch steps leave the step range".to_string()
        })?;
        for t in 0..=n_all {
            let member = s.switch_steps.contains(&t);
            ensure(s.is_switch_step(t) == member, || {
                format!("membership disagrees at step {t}")
            })?;
        }
        cases += 1;
    }
    Ok(format!("cadence invariants over {cases} schedules"))
}
