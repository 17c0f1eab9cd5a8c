//! Subspace recomposition: the switch schedule, the fuse/reinitialize pair,
//! and the slot ledger that records which direction lived in which slot.
//!
//! A run with adapter rank `r`, growth factor `gamma`, and target rank
//! `r_target` recycles `r' = gamma * r` slots at each switch. Reaching the
//! target takes `n_switch = (r_target - r) / r'` switches, spaced
//! `t_interval = floor(n_all / n_switch)` steps apart, at steps
//! `{ i * t_interval : i = 1..n_switch }`. Switch steps perform no gradient
//! or optimizer work.
//!
//! At a switch the `r'` slots with the lowest importance scores are fused
//! into the frozen weight (`w += scale * b_k a_k` per slot, then the slot is
//! zeroed) and refilled from the next unused singular triples of the
//! original decomposition, with the same `sqrt(rank / alpha)` folding used
//! at initialization. The freshly materialized update is subtracted from
//! `w` immediately, so the layer's effective weight is unchanged by the
//! whole operation up to floating-point roundoff. The direction pointer
//! `p_r` then advances; directions are never reused.
//!
//! When fewer than `r'` unused directions remain the switch is skipped
//! whole (logged at warn level); a partial fuse with no matching refill
//! would change the effective weight's trainable capacity mid-run.

use serde::{Deserialize, Serialize};

use crate::adapter::LoraLinear;
use crate::error::{Error, Result};
use crate::importance::{ImportanceState, SlotScores};

/// Which importance averages to clear after a switch. `Recycled` clears only
/// the slots that were fused and refilled; `All` clears every slot of the
/// layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetScope {
    #[default]
    Recycled,
    All,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchSchedule {
    pub r: usize,
    pub r_prime: usize,
    pub r_target: usize,
    pub n_all: usize,
    pub n_switch: usize,
    pub t_interval: usize,
    /// Ascending switch steps; empty when `r_target == r`.
    pub switch_steps: Vec<usize>,
}

impl SwitchSchedule {
    pub fn is_switch_step(&self, step: usize) -> bool {
        self.switch_steps.binary_search(&step).is_ok()
    }
}

/// Derives the switch schedule. `gamma * r` and
/// `(r_target - r) / (gamma * r)` must both be integers, and the switch
/// count must fit inside `n_all` steps.
pub fn build_schedule(
    r: usize,
    gamma: f64,
    r_target: usize,
    n_all: usize,
) -> Result<SwitchSchedule> {
    if r == 0 {
        return Err(Error::InvalidConfig("rank must be positive".to_string()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    if r_target < r {
        return Err(Error::InvalidConfig(format!(
            "target rank {r_target} is below the adapter rank {r}"
        )));
    }
    let r_prime_f = gamma * r as f64;
    let r_prime = r_prime_f.round() as usize;
    if (r_prime_f - r_prime as f64).abs() > 1e-9 || r_prime == 0 {
        return Err(Error::InvalidConfig(format!(
            "gamma * r = {r_prime_f} is not a positive integer"
        )));
    }
    if r_target == r {
        return Ok(SwitchSchedule {
            r,
            r_prime,
            r_target,
            n_all,
            n_switch: 0,
            t_interval: 0,
            switch_steps: Vec::new(),
        });
    }
    let gap = r_target - r;
    if !gap.is_multiple_of(r_prime) {
        return Err(Error::InvalidConfig(format!(
            "(r_target - r) = {gap} is not divisible by gamma * r = {r_prime}"
        )));
    }
    let n_switch = gap / r_prime;
    if n_switch > n_all {
        return Err(Error::InvalidConfig(format!(
            "{n_switch} switches do not fit in {n_all} steps"
        )));
    }
    let t_interval = n_all / n_switch;
    let switch_steps = (1..=n_switch).map(|i| i * t_interval).collect();
    Ok(SwitchSchedule {
        r,
        r_prime,
        r_target,
        n_all,
        n_switch,
        t_interval,
        switch_steps,
    })
}

/// Indices of the `count` lowest-scoring slots, ascending. Ties prefer the
/// smaller slot index.
pub fn select_low_importance(scores: &SlotScores, count: usize) -> Result<Vec<usize>> {
    if count > scores.scores.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {count} slots from {}",
            scores.scores.len()
        )));
    }
    if scores.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(
            "slot scores contain non-finite values".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.scores.len()).collect();
    order.sort_by(|&x, &y| {
        scores.scores[x]
            .total_cmp(&scores.scores[y])
            .then(x.cmp(&y))
    });
    let mut chosen: Vec<usize> = order.into_iter().take(count).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// One tenure of a direction inside a slot. `retired_step` is `None` while
/// the direction is still active.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub slot: usize,
    pub singular_index: usize,
    pub activated_step: usize,
    pub retired_step: Option<usize>,
}

/// Per-layer interval statistics from [`SlotLedger::interval_variance`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerIntervalStats {
    pub layer_id: usize,
    pub variance: f64,
    pub episode_count: usize,
}

/// Append-only record of slot occupancy per layer. Layers without adapters
/// simply never receive episodes.
#[derive(Debug, Clone, Default)]
pub struct SlotLedger {
    layers: Vec<Vec<Episode>>,
}

impl SlotLedger {
    pub fn new(n_layers: usize) -> SlotLedger {
        SlotLedger {
            layers: vec![Vec::new(); n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn episodes(&self, layer: usize) -> &[Episode] {
        &self.layers[layer]
    }

    pub fn iter_all(&self) -> impl Iterator<Item = (usize, &Episode)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(id, eps)| eps.iter().map(move |e| (id, e)))
    }

    /// Opens an episode. Rejects a slot that already has an open episode or
    /// a direction index that has appeared before in this layer.
    pub fn open(
        &mut self,
        layer: usize,
        slot: usize,
        singular_index: usize,
        step: usize,
    ) -> Result<()> {
        let episodes = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("ledger has no layer {layer}")))?;
        if episodes
            .iter()
            .any(|e| e.slot == slot && e.retired_step.is_none())
        {
            return Err(Error::InvalidArgument(format!(
                "slot {slot} of layer {layer} already has an open episode"
            )));
        }
        if episodes.iter().any(|e| e.singular_index == singular_index) {
            return Err(Error::InvalidArgument(format!(
                "direction {singular_index} was already used in layer {layer}"
            )));
        }
        episodes.push(Episode {
            slot,
            singular_index,
            activated_step: step,
            retired_step: None,
        });
        Ok(())
    }

    /// Closes the open episode of a slot.
    pub fn retire(&mut self, layer: usize, slot: usize, step: usize) -> Result<()> {
        let episodes = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("ledger has no layer {layer}")))?;
        let open = episodes
            .iter_mut()
            .find(|e| e.slot == slot && e.retired_step.is_none())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "slot {slot} of layer {layer} has no open episode to retire"
                ))
            })?;
        if step < open.activated_step {
            return Err(Error::InvalidArgument(format!(
                "retire step {step} precedes activation {}",
                open.activated_step
            )));
        }
        open.retired_step = Some(step);
        Ok(())
    }

    /// Structural invariants: per slot, episodes are non-overlapping and
    /// ordered with at most one open; per layer, no direction index repeats.
    pub fn validate(&self) -> Result<()> {
        for (layer, episodes) in self.layers.iter().enumerate() {
            let mut seen_directions = std::collections::HashSet::new();
            for e in episodes {
                if !seen_directions.insert(e.singular_index) {
                    return Err(Error::InvalidArgument(format!(
                        "layer {layer}: direction {} appears twice",
                        e.singular_index
                    )));
                }
                if let Some(retired) = e.retired_step {
                    if retired < e.activated_step {
                        return Err(Error::InvalidArgument(format!(
                            "layer {layer}: episode retires before activating"
                        )));
                    }
                }
            }
            let slots: std::collections::HashSet<usize> =
                episodes.iter().map(|e| e.slot).collect();
            for slot in slots {
                let mut tenures: Vec<&Episode> =
                    episodes.iter().filter(|e| e.slot == slot).collect();
                tenures.sort_by_key(|e| e.activated_step);
                for pair in tenures.windows(2) {
                    let first_end = pair[0].retired_step.ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "layer {layer} slot {slot}: open episode is not the last"
                        ))
                    })?;
                    if pair[1].activated_step < first_end {
                        return Err(Error::InvalidArgument(format!(
                            "layer {layer} slot {slot}: overlapping episodes"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Population variance of episode durations per layer. Open episodes
    /// are closed at `n_all` for the computation. Layers without episodes
    /// are omitted.
    pub fn interval_variance(&self, n_all: usize) -> Vec<LayerIntervalStats> {
        let mut out = Vec::new();
        for (layer_id, episodes) in self.layers.iter().enumerate() {
            if episodes.is_empty() {
                continue;
            }
            let durations: Vec<f64> = episodes
                .iter()
                .map(|e| (e.retired_step.unwrap_or(n_all) - e.activated_step) as f64)
                .collect();
            let n = durations.len() as f64;
            let mean = durations.iter().sum::<f64>() / n;
            let variance = durations.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
            out.push(LayerIntervalStats {
                layer_id,
                variance,
                episode_count: episodes.len(),
            });
        }
        out
    }

    pub(crate) fn from_episodes(n_layers: usize, rows: Vec<(usize, Episode)>) -> Result<SlotLedger> {
        let mut ledger = SlotLedger::new(n_layers);
        for (layer, episode) in rows {
            if layer >= n_layers {
                return Err(Error::InvalidArgument(format!(
                    "episode references layer {layer} of {n_layers}"
                )));
            }
            ledger.layers[layer].push(episode);
        }
        ledger.validate()?;
        Ok(ledger)
    }
}

/// Opens the initial episodes of a freshly initialized layer: slot `k`
/// holds direction `k` from step 0.
pub fn open_initial_episodes(
    ledger: &mut SlotLedger,
    layer_id: usize,
    layer: &LoraLinear,
) -> Result<()> {
    for (slot, &direction) in layer.slot_meta().iter().enumerate() {
        ledger.open(layer_id, slot, direction, 0)?;
    }
    Ok(())
}

/// Folds the given slots into the frozen weight and zeroes them. The
/// effective weight is unchanged; the slots are left empty for refill.
pub fn fuse_slots(
    layer: &mut LoraLinear,
    slots: &[usize],
    ledger: &mut SlotLedger,
    layer_id: usize,
    step: usize,
) -> Result<()> {
    validate_slots(layer, slots)?;
    let scale = layer.scale();
    for &k in slots {
        let b_col = layer.b().column(k);
        let a_row = layer.a().row(k).to_vec();
        layer.w_mut().add_outer(scale, &b_col, &a_row)?;
        let zero_col = vec![0.0; layer.out_dim()];
        layer.b_mut().set_column(k, &zero_col);
        for j in 0..layer.in_dim() {
            layer.a_mut().set(k, j, 0.0);
        }
        ledger.retire(layer_id, k, step)?;
    }
    Ok(())
}

/// Refills the given slots from the next unused directions of the original
/// decomposition and subtracts the materialized update from the frozen
/// weight so the effective weight is unchanged. Advances `p_r`. A no-op
/// (with a warning) when the direction bank has fewer than `slots.len()`
/// unused directions.
pub fn reinit_slots(
    layer: &mut LoraLinear,
    slots: &[usize],
    ledger: &mut SlotLedger,
    layer_id: usize,
    step: usize,
) -> Result<()> {
    validate_slots(layer, slots)?;
    let d = layer.out_dim().min(layer.in_dim());
    if layer.p_r() + slots.len() > d {
        log::warn!(
            "layer {layer_id}: direction bank exhausted ({} used of {d}), skipping reinit",
            layer.p_r()
        );
        return Ok(());
    }
    let scale = layer.scale();
    let fold = (layer.rank() as f64 / layer.alpha()).sqrt();
    let base = layer.p_r();
    for (offset, &k) in slots.iter().enumerate() {
        let direction = base + offset;
        let sigma_root = layer.svd0().s()[direction].sqrt() * fold;
        let b_col: Vec<f64> = layer
            .svd0()
            .u()
            .column(direction)
            .iter()
            .map(|u| u * sigma_root)
            .collect();
        let a_row: Vec<f64> = layer
            .svd0()
            .v()
            .column(direction)
            .iter()
            .map(|v| v * sigma_root)
            .collect();
        layer.b_mut().set_column(k, &b_col);
        for (j, &v) in a_row.iter().enumerate() {
            layer.a_mut().set(k, j, v);
        }
        layer.w_mut().add_outer(-scale, &b_col, &a_row)?;
        layer.set_slot_meta(k, direction);
        ledger.open(layer_id, k, direction, step)?;
    }
    layer.advance_p_r(slots.len());
    Ok(())
}

/// One full switch on one layer: select the `r'` least important slots,
/// fuse them, refill them from fresh directions, and reset the importance
/// averages per `reset_scope`. Returns the recycled slots so the caller can
/// clear any attached optimizer state. Skips everything (returning an empty
/// list) when the direction bank cannot supply `r'` fresh directions.
#[allow(clippy::too_many_arguments)]
pub fn recompose_step(
    layer: &mut LoraLinear,
    state: &mut ImportanceState,
    schedule: &SwitchSchedule,
    ledger: &mut SlotLedger,
    layer_id: usize,
    step: usize,
    reset_scope: ResetScope,
) -> Result<Vec<usize>> {
    if !schedule.is_switch_step(step) {
        return Err(Error::InvalidArgument(format!(
            "step {step} is not on the switch schedule"
        )));
    }
    let d = layer.out_dim().min(layer.in_dim());
    if layer.p_r() + schedule.r_prime > d {
        log::warn!(
            "layer {layer_id} step {step}: direction bank exhausted ({} used of {d}), skipping switch",
            layer.p_r()
        );
        return Ok(Vec::new());
    }
    let scores = state.slot_scores();
    let slots = select_low_importance(&scores, schedule.r_prime)?;
    fuse_slots(layer, &slots, ledger, layer_id, step)?;
    reinit_slots(layer, &slots, ledger, layer_id, step)?;
    match reset_scope {
        ResetScope::Recycled => state.reset_slots(&slots)?,
        ResetScope::All => state.reset_all(),
    }
    Ok(slots)
}

fn validate_slots(layer: &LoraLinear, slots: &[usize]) -> Result<()> {
    for &k in slots {
        if k >= layer.rank() {
            return Err(Error::InvalidArgument(format!(
                "slot {k} out of range for rank {}",
                layer.rank()
            )));
        }
    }
    for w in slots.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidArgument(
                "slots must be strictly ascending".to_string(),
            ));
        }
    }
    Ok(())
}
