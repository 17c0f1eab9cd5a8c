//! Checkpoint serialization for [`TrainRun`].
//!
//! Layout: the magic `b"SRLC"`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the manifest as JSON, a
//! little-endian `u32` matrix count, then that many `SRLM` matrix records
//! in a fixed order. Per frozen layer: base weight, bias, bias velocity.
//! Per adapted layer: residual weight, bias, bias velocity, `b`, `a`, the
//! frozen factorization (`u0`, singular values as a row, `v0`), the four
//! importance averages (`i_bar` and `u_bar` for `b` then `a`), and the two
//! factor velocities.
//!
//! The manifest carries everything that is not a matrix: step counter, the
//! root generator state, per-layer adapter metadata, the slot ledger, and
//! the metric rows. Datasets, schedules, and hyperparameters are not
//! stored; they are rebuilt from the config, which therefore must be the
//! config the checkpoint was written under. Structural disagreement
//! between the two is rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::LoraLinear;
use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::importance::ImportanceState;
use crate::linalg::{Matrix, Rng, SvdFactors};
use crate::model::{Activation, LossKind, NetLayer, SrloraNet};
use crate::recompose::{build_schedule, Episode, SlotLedger};

use super::{
    build_base_weights, build_data, MetricLog, MetricRow, Mode, Optimizer, RunConfig, TrainRun,
};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SRLC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    step: usize,
    rng: RngState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    last_train_loss: Option<f64>,
    layers: Vec<LayerMeta>,
    ledger: Vec<LedgerRow>,
    metrics: Vec<MetricRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    stream: u64,
    word_pos: u128,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerMeta {
    activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adapter: Option<AdapterMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterMeta {
    rank: usize,
    alpha: f64,
    p_r: usize,
    slot_meta: Vec<usize>,
    importance_step: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LedgerRow {
    layer: usize,
    slot: usize,
    singular_index: usize,
    activated_step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    retired_step: Option<usize>,
}

pub(super) fn save(run: &TrainRun, path: &Path) -> Result<()> {
    let manifest = Manifest {
        step: run.step,
        rng: RngState {
            seed: run.rng.seed(),
            stream: run.rng.stream(),
            word_pos: run.rng.word_pos(),
        },
        last_train_loss: run.last_train_loss,
        layers: run
            .net
            .layers()
            .iter()
            .map(|layer| LayerMeta {
                activation: layer.activation(),
                adapter: layer.adapter().map(|a| AdapterMeta {
                    rank: a.rank(),
                    alpha: a.alpha(),
                    p_r: a.p_r(),
                    slot_meta: a.slot_meta().to_vec(),
                    importance_step: layer
                        .importance()
                        .expect("adapted layer tracks importance")
                        .step(),
                }),
            })
            .collect(),
        ledger: run
            .ledger
            .iter_all()
            .map(|(layer, e)| LedgerRow {
                layer,
                slot: e.slot,
                singular_index: e.singular_index,
                activated_step: e.activated_step,
                retired_step: e.retired_step,
            })
            .collect(),
        metrics: run.metrics.rows().to_vec(),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;

    let mut matrices: Vec<Matrix> = Vec::new();
    for (i, layer) in run.net.layers().iter().enumerate() {
        let (vel_bias, vel_factors) = run.optimizer.velocity(i);
        matrices.push(layer.base_weight().clone());
        matrices.push(layer.bias().clone());
        matrices.push(vel_bias.clone());
        if let Some(adapter) = layer.adapter() {
            let importance = layer.importance().expect("adapted layer tracks importance");
            let svd0 = adapter.svd0();
            let singular_row = Matrix::from_vec(1, svd0.d(), svd0.s().to_vec())?;
            let (vel_b, vel_a) = vel_factors.expect("adapted layer has factor velocities");
            matrices.push(adapter.b().clone());
            matrices.push(adapter.a().clone());
            matrices.push(svd0.u().clone());
            matrices.push(singular_row);
            matrices.push(svd0.v().clone());
            matrices.push(importance.i_bar_b().clone());
            matrices.push(importance.u_bar_b().clone());
            matrices.push(importance.i_bar_a().clone());
            matrices.push(importance.u_bar_a().clone());
            matrices.push(vel_b.clone());
            matrices.push(vel_a.clone());
        }
    }

    let mut bytes: Vec<u8> = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    bytes.extend_from_slice(&(matrices.len() as u32).to_le_bytes());
    for m in &matrices {
        m.write_srlm(&mut bytes)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub(super) fn load(config: RunConfig, path: &Path) -> Result<TrainRun> {
    let config = config.resolved()?;
    let bytes = std::fs::read(path)?;
    let corrupt = |msg: String| Error::CorruptCheckpoint(format!("{}: {msg}", path.display()));

    let mut cursor: &[u8] = &bytes;
    let magic = take(&mut cursor, 4).map_err(&corrupt)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(corrupt(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = u32::from_le_bytes(
        take(&mut cursor, 4)
            .map_err(&corrupt)?
            .try_into()
            .expect("4 bytes"),
    );
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let manifest_len = u64::from_le_bytes(
        take(&mut cursor, 8)
            .map_err(&corrupt)?
            .try_into()
            .expect("8 bytes"),
    ) as usize;
    let manifest_bytes = take(&mut cursor, manifest_len).map_err(&corrupt)?;
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let n_matrices = u32::from_le_bytes(
        take(&mut cursor, 4)
            .map_err(&corrupt)?
            .try_into()
            .expect("4 bytes"),
    ) as usize;
    let mut matrices = Vec::with_capacity(n_matrices);
    for i in 0..n_matrices {
        let m = Matrix::read_srlm(&mut cursor)
            .map_err(|e| corrupt(format!("matrix record {i}: {e}")))?;
        matrices.push(m);
    }
    if !cursor.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", cursor.len())));
    }

    rebuild(config, manifest, matrices).map_err(|e| match e {
        // A structural mismatch against the config is a usage error, not a
        // damaged file; everything else at this stage means the file and
        // manifest disagree.
        Error::InvalidConfig(_) => e,
        Error::Io(_) => e,
        other => corrupt(other.to_string()),
    })
}

fn take<'a>(cursor: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if cursor.len() < n {
        return Err(format!(
            "truncated: wanted {n} bytes, {} remain",
            cursor.len()
        ));
    }
    let (head, tail) = cursor.split_at(n);
    *cursor = tail;
    Ok(head)
}

fn rebuild(config: RunConfig, manifest: Manifest, matrices: Vec<Matrix>) -> Result<TrainRun> {
    let arch = &config.architecture;
    let n_layers = arch.n_layers();
    if manifest.layers.len() != n_layers {
        return Err(Error::InvalidConfig(format!(
            "checkpoint has {} layers but the config defines {n_layers}",
            manifest.layers.len()
        )));
    }
    if manifest.step > config.n_all {
        return Err(Error::InvalidConfig(format!(
            "checkpoint step {} exceeds n_all {}",
            manifest.step, config.n_all
        )));
    }

    let mut it = matrices.into_iter();
    let mut next = |what: &str| {
        it.next()
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing matrix record: {what}")))
    };

    let mut layers = Vec::with_capacity(n_layers);
    let mut velocity_entries = Vec::with_capacity(n_layers);
    for (l, meta) in manifest.layers.iter().enumerate() {
        let (m, n) = (arch.dims[l + 1], arch.dims[l]);
        if meta.activation != arch.activations[l] {
            return Err(Error::InvalidConfig(format!(
                "layer {l} activation differs between checkpoint and config"
            )));
        }
        if arch.is_adapted(l) != meta.adapter.is_some() {
            return Err(Error::InvalidConfig(format!(
                "layer {l} adapter presence differs between checkpoint and config"
            )));
        }
        let w = next("base weight")?;
        let bias = next("bias")?;
        let vel_bias = next("bias velocity")?;
        if w.shape() != (m, n) || bias.shape() != (m, 1) || vel_bias.shape() != (m, 1) {
            return Err(Error::InvalidConfig(format!(
                "layer {l} tensor shapes do not match a {m}x{n} layer"
            )));
        }
        match &meta.adapter {
            None => {
                layers.push(NetLayer::from_parts(
                    None,
                    Some(w),
                    bias,
                    meta.activation,
                )?);
                velocity_entries.push((vel_bias, None));
            }
            Some(am) => {
                if am.rank != config.rank || am.alpha != config.alpha {
                    return Err(Error::InvalidConfig(format!(
                        "layer {l} adapter rank/alpha differ between checkpoint and config"
                    )));
                }
                let b = next("b factor")?;
                let a = next("a factor")?;
                let u0 = next("left singular vectors")?;
                let s_row = next("singular values")?;
                let v0 = next("right singular vectors")?;
                let i_bar_b = next("importance mean of b")?;
                let u_bar_b = next("importance spread of b")?;
                let i_bar_a = next("importance mean of a")?;
                let u_bar_a = next("importance spread of a")?;
                let vel_b = next("b velocity")?;
                let vel_a = next("a velocity")?;
                let svd0 = SvdFactors::from_parts(u0, s_row.data().to_vec(), v0)?;
                let adapter = LoraLinear::from_parts(
                    w,
                    svd0,
                    b,
                    a,
                    am.rank,
                    am.alpha,
                    am.p_r,
                    am.slot_meta.clone(),
                )?;
                let importance = ImportanceState::from_parts(
                    i_bar_b,
                    u_bar_b,
                    i_bar_a,
                    u_bar_a,
                    config.beta1,
                    config.beta2,
                    am.importance_step,
                )?;
                if importance.i_bar_b().shape() != (m, am.rank)
                    || importance.i_bar_a().shape() != (am.rank, n)
                    || vel_b.shape() != (m, am.rank)
                    || vel_a.shape() != (am.rank, n)
                {
                    return Err(Error::InvalidConfig(format!(
                        "layer {l} adapter state does not match a {m}x{n} rank-{} layer",
                        am.rank
                    )));
                }
                layers.push(NetLayer::from_parts(
                    Some((adapter, importance)),
                    None,
                    bias,
                    meta.activation,
                )?);
                velocity_entries.push((vel_bias, Some((vel_b, vel_a))));
            }
        }
    }
    if it.next().is_some() {
        return Err(Error::CorruptCheckpoint(
            "more matrix records than the manifest describes".to_string(),
        ));
    }

    let net = SrloraNet::new(layers)?;
    let optimizer = Optimizer::from_parts(config.learning_rate, config.momentum, velocity_entries);
    let ledger = SlotLedger::from_episodes(
        n_layers,
        manifest
            .ledger
            .into_iter()
            .map(|r| {
                (
                    r.layer,
                    Episode {
                        slot: r.slot,
                        singular_index: r.singular_index,
                        activated_step: r.activated_step,
                        retired_step: r.retired_step,
                    },
                )
            })
            .collect(),
    )?;
    let schedule = match config.mode {
        Mode::Srlora => Some(build_schedule(
            config.rank,
            config.gamma,
            config.r_target(),
            config.n_all,
        )?),
        _ => None,
    };

    let rng = Rng::restore(
        manifest.rng.seed,
        manifest.rng.stream,
        manifest.rng.word_pos,
    );
    let base_weights = build_base_weights(&config, &Rng::new(config.seed));
    let (dataset, eval_set, teacher) = build_data(&config, &base_weights)?;
    let loss_kind = match dataset.kind() {
        DatasetKind::Regression => LossKind::Mse,
        DatasetKind::Classification { .. } => LossKind::SoftmaxCrossEntropy,
    };
    if dataset.input_dim() != net.input_dim() || dataset.target_dim() != net.output_dim() {
        return Err(Error::InvalidConfig(
            "dataset shape does not match the checkpointed network".to_string(),
        ));
    }

    Ok(TrainRun {
        config,
        net,
        optimizer,
        rng,
        step: manifest.step,
        schedule,
        ledger,
        metrics: MetricLog::from_rows(manifest.metrics),
        dataset,
        eval_set,
        teacher,
        loss_kind,
        last_train_loss: manifest.last_train_loss,
        epoch_batches: None,
        started: std::time::Instant::now(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests_support::srlora_config;
    use super::*;

    fn finished_run(n_all: usize) -> TrainRun {
        let mut run = TrainRun::new(srlora_config(n_all)).unwrap();
        run.run_to_completion().unwrap();
        run
    }

    #[test]
    fn roundtrip_preserves_every_tensor_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.srlc");
        let run = finished_run(130);
        run.save_checkpoint(&path).unwrap();
        let restored = TrainRun::resume(run.config().clone(), &path).unwrap();

        assert_eq!(restored.step(), run.step());
        assert_eq!(restored.last_train_loss(), run.last_train_loss());
        assert_eq!(restored.metrics().to_csv(), run.metrics().to_csv());
        for l in 0..run.net().n_layers() {
            let (a, b) = (run.net().layer(l), restored.net().layer(l));
            assert_eq!(a.bias().data(), b.bias().data());
            assert_eq!(a.base_weight().data(), b.base_weight().data());
            if let (Some(x), Some(y)) = (a.adapter(), b.adapter()) {
                assert_eq!(x.b().data(), y.b().data());
                assert_eq!(x.a().data(), y.a().data());
                assert_eq!(x.p_r(), y.p_r());
                assert_eq!(x.slot_meta(), y.slot_meta());
                assert_eq!(x.svd0().s(), y.svd0().s());
            }
            if let (Some(x), Some(y)) = (a.importance(), b.importance()) {
                assert_eq!(x.i_bar_b().data(), y.i_bar_b().data());
                assert_eq!(x.u_bar_a().data(), y.u_bar_a().data());
                assert_eq!(x.step(), y.step());
            }
        }
        let episodes_a: Vec<_> = run.ledger().iter_all().collect();
        let episodes_b: Vec<_> = restored.ledger().iter_all().collect();
        assert_eq!(episodes_a, episodes_b);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.srlc");
        let full_path = dir.path().join("full.srlc");
        let resumed_path = dir.path().join("resumed.srlc");

        let mut straight = TrainRun::new(srlora_config(200)).unwrap();
        straight.run_to_completion().unwrap();
        straight.save_checkpoint(&full_path).unwrap();

        let mut first_half = TrainRun::new(srlora_config(200)).unwrap();
        first_half.run_until(100).unwrap();
        first_half.save_checkpoint(&path).unwrap();
        let mut second_half = TrainRun::resume(srlora_config(200), &path).unwrap();
        second_half.run_to_completion().unwrap();
        second_half.save_checkpoint(&resumed_path).unwrap();

        assert_eq!(straight.metrics().to_csv(), second_half.metrics().to_csv());
        let full_bytes = std::fs::read(&full_path).unwrap();
        let resumed_bytes = std::fs::read(&resumed_path).unwrap();
        assert_eq!(full_bytes, resumed_bytes);
    }

    #[test]
    fn resume_immediately_before_a_switch_reports_the_same_train_loss() {
        // Switches at 65 and 130. Saving at 64 exercises the stored batch
        // loss: the row at 65 must repeat the loss from step 64.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre-switch.srlc");
        let mut straight = TrainRun::new(srlora_config(130)).unwrap();
        straight.run_to_completion().unwrap();

        let mut head = TrainRun::new(srlora_config(130)).unwrap();
        head.run_until(64).unwrap();
        head.save_checkpoint(&path).unwrap();
        let mut tail = TrainRun::resume(srlora_config(130), &path).unwrap();
        tail.run_to_completion().unwrap();
        assert_eq!(straight.metrics().to_csv(), tail.metrics().to_csv());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("good.srlc");
        let run = finished_run(65);
        run.save_checkpoint(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic_path = dir.path().join("bad-magic.srlc");
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&bad_magic_path, &bad).unwrap();
        let err = TrainRun::resume(run.config().clone(), &bad_magic_path).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)), "{err}");

        let truncated_path = dir.path().join("truncated.srlc");
        std::fs::write(&truncated_path, &good[..good.len() - 9]).unwrap();
        let err = TrainRun::resume(run.config().clone(), &truncated_path).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)), "{err}");

        let trailing_path = dir.path().join("trailing.srlc");
        let mut extended = good.clone();
        extended.extend_from_slice(b"junk");
        std::fs::write(&trailing_path, &extended).unwrap();
        let err = TrainRun::resume(run.config().clone(), &trailing_path).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)), "{err}");

        let version_path = dir.path().join("version.srlc");
        let mut versioned = good.clone();
        versioned[4] = 9;
        std::fs::write(&version_path, &versioned).unwrap();
        let err = TrainRun::resume(run.config().clone(), &version_path).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)), "{err}");
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.srlc");
        let run = finished_run(65);
        run.save_checkpoint(&path).unwrap();

        let mut wrong_rank = run.config().clone();
        wrong_rank.rank = 2;
        wrong_rank.r_target = Some(4);
        let err = TrainRun::resume(wrong_rank, &path).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{err}");

        let mut wrong_dims = run.config().clone();
        wrong_dims.architecture.dims = vec![12, 12];
        let err = TrainRun::resume(wrong_dims, &path).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{err}");

        let mut wrong_steps = run.config().clone();
        wrong_steps.n_all = 30;
        let err = TrainRun::resume(wrong_steps, &path).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
    }
}
