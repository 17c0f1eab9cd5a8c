//! Sensitivity-based importance tracking for adapter factors.
//!
//! The raw signal for a parameter is `I = |w * dL/dw|`, the first-order
//! change in loss from zeroing that parameter. Because single-batch
//! gradients are noisy, two exponential moving averages run per parameter:
//!
//! `I_bar <- beta1 * I_bar + (1 - beta1) * I`
//! `U_bar <- beta2 * U_bar + (1 - beta2) * |I - I_bar|`
//!
//! where the uncertainty update uses the freshly updated `I_bar` of the same
//! step. A parameter's score is the product `I_bar * U_bar`, and a slot's
//! score aggregates the column of `b` and row of `a` it owns:
//!
//! `S_k = mean(score(b[:, k])) + mean(score(a[k, :]))`
//!
//! Scores are non-negative by construction. Recomposition resets the
//! averages of recycled slots to zero so fresh directions are judged on
//! their own evidence.

use crate::adapter::{LayerGrads, LoraLinear};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Per-slot aggregate scores, indexed by slot.
#[derive(Debug, Clone)]
pub struct SlotScores {
    pub scores: Vec<f64>,
}

/// `|w * g|` elementwise.
pub fn sensitivity(w: &Matrix, g: &Matrix) -> Result<Matrix> {
    w.zip_map(g, "sensitivity", |wv, gv| (wv * gv).abs())
}

#[derive(Debug, Clone)]
pub struct ImportanceState {
    i_bar_b: Matrix,
    u_bar_b: Matrix,
    i_bar_a: Matrix,
    u_bar_a: Matrix,
    beta1: f64,
    beta2: f64,
    step: usize,
}

impl ImportanceState {
    pub fn new(
        out_dim: usize,
        rank: usize,
        in_dim: usize,
        beta1: f64,
        beta2: f64,
    ) -> Result<ImportanceState> {
        for (name, beta) in [("beta1", beta1), ("beta2", beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in (0, 1), got {beta}"
                )));
            }
        }
        Ok(ImportanceState {
            i_bar_b: Matrix::zeros(out_dim, rank),
            u_bar_b: Matrix::zeros(out_dim, rank),
            i_bar_a: Matrix::zeros(rank, in_dim),
            u_bar_a: Matrix::zeros(rank, in_dim),
            beta1,
            beta2,
            step: 0,
        })
    }

    pub fn for_layer(layer: &LoraLinear, beta1: f64, beta2: f64) -> Result<ImportanceState> {
        ImportanceState::new(layer.out_dim(), layer.rank(), layer.in_dim(), beta1, beta2)
    }

    /// Folds one step of gradient evidence into the averages. Must be called
    /// with the gradients of the current parameters, before the optimizer
    /// moves them.
    pub fn ema_update(&mut self, layer: &LoraLinear, grads: &LayerGrads) -> Result<()> {
        if layer.b().shape() != self.i_bar_b.shape() || layer.a().shape() != self.i_bar_a.shape() {
            return Err(Error::InvalidArgument(
                "importance state does not match layer shape".to_string(),
            ));
        }
        let sens_b = sensitivity(layer.b(), &grads.d_b)?;
        let sens_a = sensitivity(layer.a(), &grads.d_a)?;
        update_pair(
            &mut self.i_bar_b,
            &mut self.u_bar_b,
            &sens_b,
            self.beta1,
            self.beta2,
        )?;
        update_pair(
            &mut self.i_bar_a,
            &mut self.u_bar_a,
            &sens_a,
            self.beta1,
            self.beta2,
        )?;
        self.step += 1;
        Ok(())
    }

    /// Elementwise `I_bar * U_bar` for the `b` and `a` factors.
    pub fn param_score(&self) -> (Matrix, Matrix) {
        let sb = self
            .i_bar_b
            .zip_map(&self.u_bar_b, "param_score", |i, u| i * u)
            .expect("shapes agree");
        let sa = self
            .i_bar_a
            .zip_map(&self.u_bar_a, "param_score", |i, u| i * u)
            .expect("shapes agree");
        (sb, sa)
    }

    /// Aggregates parameter scores into one score per slot.
    pub fn slot_scores(&self) -> SlotScores {
        let (sb, sa) = self.param_score();
        let m = sb.rows() as f64;
        let n = sa.cols() as f64;
        let scores = (0..self.rank())
            .map(|k| {
                let col: f64 = (0..sb.rows()).map(|i| sb.get(i, k)).sum();
                let row: f64 = sa.row(k).iter().sum();
                col / m + row / n
            })
            .collect();
        SlotScores { scores }
    }

    /// Zeroes the averages of the given slots (column of `b`, row of `a`).
    /// The step counter is unchanged.
    pub fn reset_slots(&mut self, slots: &[usize]) -> Result<()> {
        for &k in slots {
            if k >= self.rank() {
                return Err(Error::InvalidArgument(format!(
                    "slot {k} out of range for rank {}",
                    self.rank()
                )));
            }
        }
        let zeros_col = vec![0.0; self.i_bar_b.rows()];
        for &k in slots {
            self.i_bar_b.set_column(k, &zeros_col);
            self.u_bar_b.set_column(k, &zeros_col);
            for j in 0..self.i_bar_a.cols() {
                self.i_bar_a.set(k, j, 0.0);
                self.u_bar_a.set(k, j, 0.0);
            }
        }
        Ok(())
    }

    /// Zeroes every average. The step counter is unchanged.
    pub fn reset_all(&mut self) {
        let slots: Vec<usize> = (0..self.rank()).collect();
        self.reset_slots(&slots).expect("slots in range");
    }

    pub fn rank(&self) -> usize {
        self.i_bar_b.cols()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }

    pub fn i_bar_b(&self) -> &Matrix {
        &self.i_bar_b
    }

    pub fn u_bar_b(&self) -> &Matrix {
        &self.u_bar_b
    }

    pub fn i_bar_a(&self) -> &Matrix {
        &self.i_bar_a
    }

    pub fn u_bar_a(&self) -> &Matrix {
        &self.u_bar_a
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        i_bar_b: Matrix,
        u_bar_b: Matrix,
        i_bar_a: Matrix,
        u_bar_a: Matrix,
        beta1: f64,
        beta2: f64,
        step: usize,
    ) -> Result<ImportanceState> {
        if i_bar_b.shape() != u_bar_b.shape()
            || i_bar_a.shape() != u_bar_a.shape()
            || i_bar_b.cols() != i_bar_a.rows()
        {
            return Err(Error::InvalidArgument(
                "importance factor shapes disagree".to_string(),
            ));
        }
        let mut state = ImportanceState::new(
            i_bar_b.rows(),
            i_bar_b.cols(),
            i_bar_a.cols(),
            beta1,
            beta2,
        )?;
        state.i_bar_b = i_bar_b;
        state.u_bar_b = u_bar_b;
        state.i_bar_a = i_bar_a;
        state.u_bar_a = u_bar_a;
        state.step = step;
        Ok(state)
    }
}

/// One EMA step for an (average, uncertainty) pair. The uncertainty sees the
/// already-updated average.
fn update_pair(
    i_bar: &mut Matrix,
    u_bar: &mut Matrix,
    sens: &Matrix,
    beta1: f64,
    beta2: f64,
) -> Result<()> {
    i_bar.zip_apply(sens, "ema_update", |old, s| {
        beta1 * old + (1.0 - beta1) * s
    })?;
    let spread = sens.zip_map(i_bar, "ema_update", |s, avg| (s - avg).abs())?;
    u_bar.zip_apply(&spread, "ema_update", |old, sp| {
        beta2 * old + (1.0 - beta2) * sp
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::LoraLinear;
    use crate::linalg::Rng;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        Rng::new(seed).gaussian(rows, cols, 0.0, 1.0)
    }

    fn layer_and_grads(m: usize, n: usize, r: usize, seed: u64) -> (LoraLinear, LayerGrads) {
        let w0 = seeded(m, n, seed);
        let layer = LoraLinear::pissa_init(&w0, r, r as f64).unwrap();
        let grads = LayerGrads {
            d_b: seeded(m, r, seed + 1),
            d_a: seeded(r, n, seed + 2),
            d_x: Matrix::zeros(n, 1),
        };
        (layer, grads)
    }

    #[test]
    fn sensitivity_hand_case() {
        let w = Matrix::from_vec(1, 2, vec![2.0, -1.0]).unwrap();
        let g = Matrix::from_vec(1, 2, vec![-3.0, 0.0]).unwrap();
        let s = sensitivity(&w, &g).unwrap();
        assert_eq!(s.data(), &[6.0, 0.0]);
    }

    #[test]
    fn sensitivity_scales_linearly_in_either_argument() {
        let w = seeded(4, 5, 3);
        let g = seeded(4, 5, 4);
        let base = sensitivity(&w, &g).unwrap();
        let scaled = sensitivity(&w.scale(-2.5), &g).unwrap();
        for (a, b) in scaled.data().iter().zip(base.data()) {
            assert!((a - 2.5 * b).abs() < 1e-12);
        }
        let scaled_g = sensitivity(&w, &g.scale(4.0)).unwrap();
        for (a, b) in scaled_g.data().iter().zip(base.data()) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_update_from_zero_state() {
        // From zero, I_bar = (1 - beta1) * I and the spread is
        // |I - I_bar| = beta1 * I, so U_bar = (1 - beta2) * beta1 * I.
        let (layer, grads) = layer_and_grads(3, 4, 2, 10);
        let mut state = ImportanceState::for_layer(&layer, 0.85, 0.85).unwrap();
        state.ema_update(&layer, &grads).unwrap();
        let sens = sensitivity(layer.b(), &grads.d_b).unwrap();
        for i in 0..3 {
            for k in 0..2 {
                let s = sens.get(i, k);
                assert!((state.i_bar_b().get(i, k) - 0.15 * s).abs() < 1e-14);
                assert!((state.u_bar_b().get(i, k) - 0.15 * 0.85 * s).abs() < 1e-14);
            }
        }
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn constant_signal_converges_geometrically() {
        // With constant sensitivity c, the gap |I_bar_t - c| is beta1^t * c.
        let (layer, grads) = layer_and_grads(2, 2, 1, 20);
        let mut state = ImportanceState::for_layer(&layer, 0.6, 0.6).unwrap();
        let sens = sensitivity(layer.b(), &grads.d_b).unwrap();
        let c = sens.get(0, 0);
        for t in 1..=12 {
            state.ema_update(&layer, &grads).unwrap();
            let gap = (state.i_bar_b().get(0, 0) - c).abs();
            let expect = 0.6f64.powi(t) * c.abs();
            assert!(
                (gap - expect).abs() <= 1e-12 * expect.max(1e-12),
                "step {t}: gap {gap} vs {expect}"
            );
        }
    }

    #[test]
    fn updates_match_scalar_recurrence_oracle() {
        let m = 3;
        let n = 4;
        let r = 2;
        let w0 = seeded(m, n, 30);
        let layer = LoraLinear::pissa_init(&w0, r, 2.0).unwrap();
        let mut state = ImportanceState::for_layer(&layer, 0.85, 0.7).unwrap();

        // Independent elementwise trace of one b entry over random grads.
        let (pi, pk) = (1, 0);
        let mut i_ref = 0.0;
        let mut u_ref = 0.0;
        for step in 0..10 {
            let grads = LayerGrads {
                d_b: seeded(m, r, 300 + step),
                d_a: seeded(r, n, 400 + step),
                d_x: Matrix::zeros(n, 1),
            };
            let s = (layer.b().get(pi, pk) * grads.d_b.get(pi, pk)).abs();
            i_ref = 0.85 * i_ref + 0.15 * s;
            u_ref = 0.7 * u_ref + 0.3 * (s - i_ref).abs();
            state.ema_update(&layer, &grads).unwrap();
            assert!((state.i_bar_b().get(pi, pk) - i_ref).abs() < 1e-13);
            assert!((state.u_bar_b().get(pi, pk) - u_ref).abs() < 1e-13);
        }
    }

    #[test]
    fn averages_stay_non_negative_under_random_updates() {
        let (layer, _) = layer_and_grads(4, 5, 3, 40);
        let mut state = ImportanceState::for_layer(&layer, 0.85, 0.85).unwrap();
        for step in 0..50 {
            let grads = LayerGrads {
                d_b: seeded(4, 3, 4000 + step),
                d_a: seeded(3, 5, 5000 + step),
                d_x: Matrix::zeros(5, 1),
            };
            state.ema_update(&layer, &grads).unwrap();
            if step % 7 == 0 {
                state.reset_slots(&[(step % 3) as usize]).unwrap();
            }
            for v in state
                .i_bar_b()
                .data()
                .iter()
                .chain(state.u_bar_b().data())
                .chain(state.i_bar_a().data())
                .chain(state.u_bar_a().data())
            {
                assert!(*v >= 0.0);
            }
            let scores = state.slot_scores();
            assert!(scores.scores.iter().all(|&s| s >= 0.0));
        }
    }

    #[test]
    fn param_score_is_elementwise_product() {
        let (layer, grads) = layer_and_grads(3, 3, 2, 50);
        let mut state = ImportanceState::for_layer(&layer, 0.85, 0.85).unwrap();
        for _ in 0..3 {
            state.ema_update(&layer, &grads).unwrap();
        }
        let (sb, sa) = state.param_score();
        for i in 0..3 {
            for k in 0..2 {
                let expect = state.i_bar_b().get(i, k) * state.u_bar_b().get(i, k);
                assert_eq!(sb.get(i, k), expect);
            }
        }
        for k in 0..2 {
            for j in 0..3 {
                let expect = state.i_bar_a().get(k, j) * state.u_bar_a().get(k, j);
                assert_eq!(sa.get(k, j), expect);
            }
        }
    }

    #[test]
    fn slot_scores_match_loop_oracle() {
        let (layer, grads) = layer_and_grads(5, 7, 4, 60);
        let mut state = ImportanceState::for_layer(&layer, 0.85, 0.85).unwrap();
        for _ in 0..4 {
            state.ema_update(&layer, &grads).unwrap();
        }
        let (sb, sa) = state.param_score();
        let scores = state.slot_scores();
        for k in 0..4 {
            let mut col = 0.0;
            for i in 0..5 {
                col += sb.get(i, k);
            }
            let mut row = 0.0;
            for j in 0..7 {
                row += sa.get(k, j);
            }
            let expect = col / 5.0 + row / 7.0;
            assert!((scores.scores[k] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn degenerate_one_by_one_layer_score() {
        // rank 1 on a 1x1 layer: score is exactly s(b) + s(a).
        let w0 = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let layer = LoraLinear::pissa_init(&w0, 1, 1.0).unwrap();
        let mut state = ImportanceState::for_layer(&layer, 0.5, 0.5).unwrap();
        let grads = LayerGrads {
            d_b: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            d_a: Matrix::from_vec(1, 1, vec![-1.0]).unwrap(),
            d_x: Matrix::zeros(1, 1),
        };
        state.ema_update(&layer, &grads).unwrap();
        let (sb, sa) = state.param_score();
        let scores = state.slot_scores();
        assert!((scores.scores[0] - (sb.get(0, 0) + sa.get(0, 0))).abs() < 1e-15);
    }

    #[test]
    fn slot_scores_are_permutation_equivariant() {
        // Permuting slot contents (b columns, a rows) permutes the scores.
        let m = 4;
        let n = 5;
        let r = 3;
        let w0 = seeded(m, n, 70);
        let layer = LoraLinear::pissa_init(&w0, r, 3.0).unwrap();
        let grads = LayerGrads {
            d_b: seeded(m, r, 71),
            d_a: seeded(r, n, 72),
            d_x: Matrix::zeros(n, 1),
        };
        let mut state = ImportanceState::for_layer(&layer, 0.85, 0.85).unwrap();
        state.ema_update(&layer, &grads).unwrap();
        let base = state.slot_scores();

        let perm = [2usize, 0, 1];
        let mut permuted_layer = layer.clone();
        let mut permuted_grads = grads.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted_layer.b_mut().set_column(dst, &layer.b().column(src));
            permuted_grads.d_b.set_column(dst, &grads.d_b.column(src));
            for j in 0..n {
                permuted_layer.a_mut().set(dst, j, layer.a().get(src, j));
                permuted_grads.d_a.set(dst, j, grads.d_a.get(src, j));
            }
        }
        let mut state2 = ImportanceState::for_layer(&permuted_layer, 0.85, 0.85).unwrap();
        state2.ema_update(&permuted_layer, &permuted_grads).unwrap();
        let permuted = state2.slot_scores();
        for (dst, &src) in perm.iter().enumerate() {
            assert!((permuted.scores[dst] - base.scores[src]).abs() < 1e-14);
        }
    }

    #[test]
    fn reset_zeroes_exactly_the_named_slots() {
        let (layer, grads) = layer_and_grads(4, 4, 3, 80);
        let mut state = ImportanceState::for_layer(&layer, 0.85, 0.85).unwrap();
        for _ in 0..5 {
            state.ema_update(&layer, &grads).unwrap();
        }
        let before = state.clone();
        state.reset_slots(&[1]).unwrap();
        assert_eq!(state.step(), before.step());
        for i in 0..4 {
            assert_eq!(state.i_bar_b().get(i, 1), 0.0);
            assert_eq!(state.u_bar_b().get(i, 1), 0.0);
            for k in [0usize, 2] {
                assert_eq!(state.i_bar_b().get(i, k), before.i_bar_b().get(i, k));
                assert_eq!(state.u_bar_b().get(i, k), before.u_bar_b().get(i, k));
            }
        }
        for j in 0..4 {
            assert_eq!(state.i_bar_a().get(1, j), 0.0);
            assert_eq!(state.u_bar_a().get(1, j), 0.0);
        }
        // Empty reset is the identity.
        let snapshot = state.clone();
        state.reset_slots(&[]).unwrap();
        assert_eq!(state.i_bar_b(), snapshot.i_bar_b());

        // Full reset matches a fresh state except for the step counter.
        state.reset_all();
        assert_eq!(state.i_bar_b().frobenius_norm(), 0.0);
        assert_eq!(state.u_bar_a().frobenius_norm(), 0.0);
        assert_eq!(state.step(), before.step());

        assert!(state.reset_slots(&[3]).is_err());
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(ImportanceState::new(2, 1, 2, 0.0, 0.5).is_err());
        assert!(ImportanceState::new(2, 1, 2, 0.5, 1.0).is_err());
        assert!(ImportanceState::new(2, 1, 2, -0.1, 0.5).is_err());
    }
}
