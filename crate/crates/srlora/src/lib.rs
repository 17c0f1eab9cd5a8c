//! Low-rank adapters with scheduled subspace recomposition.
//!
//! The crate trains linear layers through a frozen base weight plus a
//! trainable rank-r factor pair, tracks per-slot importance during
//! training, and periodically fuses the least useful slots into the base
//! while reinitializing them from unused singular directions. The
//! effective weight is preserved across every such switch.
//!
//! The examples directory is the front door; each one is runnable with
//! `cargo run --release -p srlora --example <name>`:
//!
//! - `svd_factorization`: factor a matrix, inspect reconstruction and
//!   truncation error.
//! - `pissa_identity`: adapter initialization leaves the effective weight
//!   exactly at the base weight.
//! - `gradient_check`: analytic factor gradients against central
//!   differences.
//! - `importance_tracking`: smoothed per-slot scores during a short run.
//! - `single_switch`: one recomposition in slow motion, with the ledger
//!   rows it produces.
//! - `train_srlora`: a full training run writing the standard artifacts.
//! - `rank_capacity`: static adapters against a growing one on a task
//!   that exceeds the initial rank.
//! - `compare_modes`: paired-seed comparison of two configurations.
//! - `checkpoint_resume`: interrupt a run, resume it, and reproduce the
//!   uninterrupted metrics byte for byte.
//!
//! A thin `srlora` binary wraps the same entry points as `train`,
//! `verify`, `report`, and `compare` subcommands.

pub mod adapter;
pub mod cli;
pub mod data;
pub mod error;
pub mod importance;
pub mod linalg;
pub mod model;
pub mod recompose;
pub mod trainer;

pub use adapter::{LayerGrads, LoraLinear};
pub use data::{gen_teacher_student, load_csv, CsvSchema, Dataset, DatasetKind, TeacherSpec};
pub use error::{Error, Result};
pub use importance::{sensitivity, ImportanceState, SlotScores};
pub use linalg::{best_rank_k_error, relative_frobenius_distance, svd, Matrix, Rng, SvdFactors};
pub use model::{
    loss_and_grad, Activation, LayerGradEntry, LossKind, NetCache, NetGrads, NetLayer, SrloraNet,
};
pub use recompose::{
    build_schedule, fuse_slots, open_initial_episodes, recompose_step, reinit_slots,
    select_low_importance, Episode, LayerIntervalStats, ResetScope, SlotLedger, SwitchSchedule,
};
pub use trainer::{
    ledger_csv, parse_ledger_csv, train, write_artifacts, ArchitectureConfig, ArtifactPaths,
    DatasetConfig, DeltaKind, MetricLog, MetricRow, Mode, Optimizer, RunConfig, TrainRun,
};
