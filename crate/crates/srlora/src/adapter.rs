//! Low-rank adapted linear layer.
//!
//! The layer computes `y = w x + scale * b (a x)` where `w` (`m x n`) is the
//! frozen base weight, `b` (`m x r`) and `a` (`r x n`) are the trainable
//! low-rank factors, and `scale = alpha / rank`. The product `b a` is never
//! materialized on the forward or backward path; per batch of width `k` the
//! cost stays `O(m n k + (m + n) r k)`.
//!
//! Two initializations are provided. [`LoraLinear::pissa_init`] seeds the
//! factors from the top-`rank` singular triples of the base weight, folding
//! `sqrt(rank / alpha)` into each factor so `scale * b * a` equals the
//! truncated SVD for any `alpha`, and stores the residual in `w`; the
//! layer's effective weight therefore starts exactly at the base weight.
//! [`LoraLinear::lora_init`] is the classic variant: `b = 0`, gaussian `a`,
//! base weight untouched.
//!
//! The full decomposition of the base weight is retained in `svd0` as a bank
//! of directions. `p_r` marks how many leading directions have been consumed
//! (initialization takes the first `rank`); `slot_meta[k]` records which
//! direction currently occupies factor column/row `k`. Recomposition (see
//! `crate::recompose`) advances `p_r` and rewrites slots; nothing else may.

use crate::error::{shape_mismatch, Error, Result};
use crate::linalg::{svd, Matrix, Rng, SvdFactors};

#[derive(Debug, Clone)]
pub struct LoraLinear {
    w: Matrix,
    svd0: SvdFactors,
    b: Matrix,
    a: Matrix,
    rank: usize,
    alpha: f64,
    scale: f64,
    p_r: usize,
    slot_meta: Vec<usize>,
}

/// Gradients produced by [`LoraLinear::backward`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_b: Matrix,
    pub d_a: Matrix,
    pub d_x: Matrix,
}

impl LoraLinear {
    /// Initializes the factors from the top-`rank` singular triples of `w0`
    /// and keeps the residual in the frozen weight, so the effective weight
    /// equals `w0` exactly at start.
    pub fn pissa_init(w0: &Matrix, rank: usize, alpha: f64) -> Result<LoraLinear> {
        let (m, n) = w0.shape();
        let d = m.min(n);
        validate_rank_alpha(rank, d, alpha)?;
        let svd0 = svd(w0)?;
        let scale = alpha / rank as f64;
        let fold = (rank as f64 / alpha).sqrt();

        let mut b = Matrix::zeros(m, rank);
        let mut a = Matrix::zeros(rank, n);
        for k in 0..rank {
            let root = svd0.s()[k].sqrt() * fold;
            for i in 0..m {
                b.set(i, k, svd0.u().get(i, k) * root);
            }
            for j in 0..n {
                a.set(k, j, svd0.v().get(j, k) * root);
            }
        }

        let update = b.matmul(&a)?.scale(scale);
        let w = w0.sub(&update)?;
        Ok(LoraLinear {
            w,
            svd0,
            b,
            a,
            rank,
            alpha,
            scale,
            p_r: rank,
            slot_meta: (0..rank).collect(),
        })
    }

    /// Classic initialization: `b = 0` and gaussian `a` with standard
    /// deviation `1 / sqrt(n)`, leaving the base weight untouched. The
    /// update starts at zero, so the effective weight again equals `w0`.
    pub fn lora_init(w0: &Matrix, rank: usize, alpha: f64, rng: &mut Rng) -> Result<LoraLinear> {
        let (m, n) = w0.shape();
        let d = m.min(n);
        validate_rank_alpha(rank, d, alpha)?;
        let svd0 = svd(w0)?;
        let b = Matrix::zeros(m, rank);
        let a = rng.gaussian(rank, n, 0.0, 1.0 / (n as f64).sqrt());
        Ok(LoraLinear {
            w: w0.clone(),
            svd0,
            b,
            a,
            rank,
            alpha,
            scale: alpha / rank as f64,
            p_r: rank,
            slot_meta: (0..rank).collect(),
        })
    }

    /// `w x + scale * b (a x)` for a batch of column vectors.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.in_dim() {
            return Err(shape_mismatch("forward", self.w.shape(), x.shape()));
        }
        let wx = self.w.matmul(x)?;
        let ax = self.a.matmul(x)?;
        let bax = self.b.matmul(&ax)?;
        wx.zip_map(&bax, "forward", |base, update| base + self.scale * update)
    }

    /// Analytic gradients given the input batch and the loss gradient with
    /// respect to the layer output:
    ///
    /// `d_b = scale * d_y (a x)^T`
    /// `d_a = scale * (b^T d_y) x^T`
    /// `d_x = w^T d_y + scale * a^T (b^T d_y)`
    ///
    /// The frozen weight receives no gradient.
    pub fn backward(&self, x: &Matrix, d_y: &Matrix) -> Result<LayerGrads> {
        if x.rows() != self.in_dim() {
            return Err(shape_mismatch("backward", self.w.shape(), x.shape()));
        }
        if d_y.shape() != (self.out_dim(), x.cols()) {
            return Err(shape_mismatch(
                "backward",
                (self.out_dim(), x.cols()),
                d_y.shape(),
            ));
        }
        let ax = self.a.matmul(x)?;
        let d_b = d_y.matmul_nt(&ax)?.scale(self.scale);
        let bt_dy = self.b.matmul_tn(d_y)?;
        let d_a = bt_dy.matmul_nt(x)?.scale(self.scale);
        let through_adapter = self.a.matmul_tn(&bt_dy)?;
        let d_x = self
            .w
            .matmul_tn(d_y)?
            .zip_map(&through_adapter, "backward", |base, update| {
                base + self.scale * update
            })?;
        Ok(LayerGrads { d_b, d_a, d_x })
    }

    /// Materialized `w + scale * b a`. Reporting and verification only; the
    /// training path never forms this product.
    pub fn effective_weight(&self) -> Matrix {
        let update = self.b.matmul(&self.a).expect("factor shapes agree");
        self.w
            .zip_map(&update, "effective_weight", |base, upd| {
                base + self.scale * upd
            })
            .expect("shapes agree")
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn svd0(&self) -> &SvdFactors {
        &self.svd0
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Number of leading directions of `svd0` consumed so far.
    pub fn p_r(&self) -> usize {
        self.p_r
    }

    /// Which direction index currently occupies each slot.
    pub fn slot_meta(&self) -> &[usize] {
        &self.slot_meta
    }

    pub fn num_trainable(&self) -> usize {
        self.rank * (self.out_dim() + self.in_dim())
    }

    /// Mutable access to the trainable factors for optimizer updates and
    /// probing. Shapes are fixed by the borrow; entries must stay finite.
    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub(crate) fn w_mut(&mut self) -> &mut Matrix {
        &mut self.w
    }

    pub(crate) fn advance_p_r(&mut self, by: usize) {
        self.p_r += by;
    }

    pub(crate) fn set_slot_meta(&mut self, slot: usize, direction: usize) {
        self.slot_meta[slot] = direction;
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        w: Matrix,
        svd0: SvdFactors,
        b: Matrix,
        a: Matrix,
        rank: usize,
        alpha: f64,
        p_r: usize,
        slot_meta: Vec<usize>,
    ) -> Result<LoraLinear> {
        let (m, n) = w.shape();
        validate_rank_alpha(rank, m.min(n), alpha)?;
        if b.shape() != (m, rank) || a.shape() != (rank, n) {
            return Err(Error::InvalidArgument(format!(
                "factor shapes {}x{} / {}x{} do not match a {m}x{n} rank-{rank} layer",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        if slot_meta.len() != rank || p_r > m.min(n) {
            return Err(Error::InvalidArgument(
                "slot metadata inconsistent with rank".to_string(),
            ));
        }
        Ok(LoraLinear {
            w,
            svd0,
            b,
            a,
            rank,
            alpha,
            scale: alpha / rank as f64,
            p_r,
            slot_meta,
        })
    }
}

fn validate_rank_alpha(rank: usize, d: usize, alpha: f64) -> Result<()> {
    if rank == 0 || rank > d {
        return Err(Error::InvalidArgument(format!(
            "rank {rank} out of range 1..={d}"
        )));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::relative_frobenius_distance;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        Rng::new(seed).gaussian(rows, cols, 0.0, 1.0)
    }

    #[test]
    fn pissa_hand_case_diag() {
        // diag(4, 1) at rank 1, alpha 1: factors are 2 * (e1, e1), residual
        // keeps only the second direction.
        let w0 = Matrix::diagonal(&[4.0, 1.0]);
        let layer = LoraLinear::pissa_init(&w0, 1, 1.0).unwrap();
        assert!((layer.b().get(0, 0) - 2.0).abs() < 1e-12);
        assert!(layer.b().get(1, 0).abs() < 1e-12);
        assert!((layer.a().get(0, 0) - 2.0).abs() < 1e-12);
        assert!(layer.a().get(0, 1).abs() < 1e-12);
        assert!(layer.w().get(0, 0).abs() < 1e-12);
        assert!((layer.w().get(1, 1) - 1.0).abs() < 1e-12);
        assert_eq!(layer.p_r(), 1);
        assert_eq!(layer.slot_meta(), &[0]);
    }

    #[test]
    fn pissa_effective_weight_recovers_base() {
        for seed in 0..8u64 {
            let w0 = seeded(9, 6, 100 + seed);
            let layer = LoraLinear::pissa_init(&w0, 3, 3.0).unwrap();
            let err = relative_frobenius_distance(&layer.effective_weight(), &w0).unwrap();
            assert!(err < 1e-8, "seed {seed} err {err}");
        }
    }

    #[test]
    fn pissa_alpha_scaling_cancels() {
        // scale * b * a must equal the truncated SVD regardless of alpha.
        let w0 = seeded(8, 5, 9);
        let a1 = LoraLinear::pissa_init(&w0, 2, 1.0).unwrap();
        let a7 = LoraLinear::pissa_init(&w0, 2, 7.0).unwrap();
        let upd1 = a1.b().matmul(a1.a()).unwrap().scale(a1.scale());
        let upd7 = a7.b().matmul(a7.a()).unwrap().scale(a7.scale());
        assert!(relative_frobenius_distance(&upd1, &upd7).unwrap() < 1e-12);
        assert!(relative_frobenius_distance(a1.w(), a7.w()).unwrap() < 1e-12);
    }

    #[test]
    fn pissa_full_rank_moves_everything_into_factors() {
        let w0 = seeded(5, 5, 13);
        let layer = LoraLinear::pissa_init(&w0, 5, 5.0).unwrap();
        assert!(layer.w().frobenius_norm() < 1e-8 * w0.frobenius_norm());
    }

    #[test]
    fn init_rejects_bad_rank_and_alpha() {
        let w0 = seeded(4, 6, 1);
        assert!(LoraLinear::pissa_init(&w0, 0, 1.0).is_err());
        assert!(LoraLinear::pissa_init(&w0, 5, 1.0).is_err());
        assert!(LoraLinear::pissa_init(&w0, 2, 0.0).is_err());
        assert!(LoraLinear::pissa_init(&w0, 2, f64::NAN).is_err());
    }

    #[test]
    fn lora_init_starts_at_base_weight() {
        let w0 = seeded(6, 4, 17);
        let mut rng = Rng::new(3);
        let layer = LoraLinear::lora_init(&w0, 2, 16.0, &mut rng).unwrap();
        assert_eq!(layer.w(), &w0);
        assert!(layer.b().frobenius_norm() == 0.0);
        assert!(layer.a().frobenius_norm() > 0.0);
        let err = relative_frobenius_distance(&layer.effective_weight(), &w0).unwrap();
        assert!(err < 1e-15);
        // Zero b means forward is exactly w x.
        let x = seeded(4, 3, 18);
        let y = layer.forward(&x).unwrap();
        assert!(relative_frobenius_distance(&y, &w0.matmul(&x).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let w0 = seeded(7, 5, 21);
        let layer = LoraLinear::pissa_init(&w0, 3, 6.0).unwrap();
        let x = seeded(5, 4, 22);
        let fast = layer.forward(&x).unwrap();
        let dense = layer.effective_weight().matmul(&x).unwrap();
        assert!(relative_frobenius_distance(&fast, &dense).unwrap() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_input_height() {
        let w0 = seeded(4, 3, 23);
        let layer = LoraLinear::pissa_init(&w0, 2, 2.0).unwrap();
        assert!(layer.forward(&Matrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let w0 = seeded(4, 3, 29);
        let layer = LoraLinear::pissa_init(&w0, 2, 2.0).unwrap();
        let x = seeded(3, 5, 30);
        let g = layer.backward(&x, &Matrix::zeros(4, 5)).unwrap();
        assert_eq!(g.d_b.frobenius_norm(), 0.0);
        assert_eq!(g.d_a.frobenius_norm(), 0.0);
        assert_eq!(g.d_x.frobenius_norm(), 0.0);
    }

    #[test]
    fn backward_scalar_case_by_hand() {
        // 1x1 layer: y = w x + s b a x, so dL/db = s dy a x, dL/da = s dy b x,
        // dL/dx = w dy + s a b dy.
        let layer = LoraLinear::from_parts(
            Matrix::from_vec(1, 1, vec![0.7]).unwrap(),
            svd(&Matrix::from_vec(1, 1, vec![0.7]).unwrap()).unwrap(),
            Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            Matrix::from_vec(1, 1, vec![-3.0]).unwrap(),
            1,
            2.0,
            1,
            vec![0],
        )
        .unwrap();
        let x = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let dy = Matrix::from_vec(1, 1, vec![1.5]).unwrap();
        let g = layer.backward(&x, &dy).unwrap();
        let s = 2.0;
        assert!((g.d_b.get(0, 0) - s * 1.5 * (-3.0) * 0.5).abs() < 1e-14);
        assert!((g.d_a.get(0, 0) - s * 2.0 * 1.5 * 0.5).abs() < 1e-14);
        assert!((g.d_x.get(0, 0) - (0.7 * 1.5 + s * (-3.0) * 2.0 * 1.5)).abs() < 1e-14);
    }

    /// Finite-difference oracle for the factor gradients: perturbs every
    /// entry of `b` and `a` with a central difference on the squared-error
    /// loss `L = 0.5 * ||y - target||^2` and compares to the analytic path.
    #[test]
    fn backward_matches_central_differences_across_configs() {
        let configs: Vec<(usize, usize, usize)> = vec![
            (3, 3, 1),
            (4, 3, 2),
            (3, 4, 2),
            (5, 5, 1),
            (6, 4, 3),
            (4, 6, 3),
            (7, 7, 2),
            (8, 5, 4),
            (5, 8, 4),
            (9, 9, 1),
            (10, 7, 2),
            (7, 10, 3),
            (11, 6, 4),
            (6, 11, 4),
            (12, 12, 2),
            (13, 9, 3),
            (9, 13, 1),
            (14, 8, 4),
            (15, 15, 3),
            (16, 12, 4),
        ];
        assert!(configs.len() >= 20);
        let h = 1e-6;
        let tol = 1e-5;
        for (case, &(m, n, r)) in configs.iter().enumerate() {
            let seed = 7000 + case as u64;
            let w0 = seeded(m, n, seed);
            let alpha = 1.0 + (case % 3) as f64;
            let mut layer = LoraLinear::pissa_init(&w0, r, alpha).unwrap();
            let x = seeded(n, 2, seed + 1);
            let target = seeded(m, 2, seed + 2);

            let loss = |l: &LoraLinear| -> f64 {
                let y = l.forward(&x).unwrap();
                let diff = y.sub(&target).unwrap();
                0.5 * diff.frobenius_norm().powi(2)
            };

            let y = layer.forward(&x).unwrap();
            let d_y = y.sub(&target).unwrap();
            let analytic = layer.backward(&x, &d_y).unwrap();

            for i in 0..m {
                for k in 0..r {
                    let orig = layer.b().get(i, k);
                    layer.b_mut().set(i, k, orig + h);
                    let up = loss(&layer);
                    layer.b_mut().set(i, k, orig - h);
                    let down = loss(&layer);
                    layer.b_mut().set(i, k, orig);
                    let fd = (up - down) / (2.0 * h);
                    let an = analytic.d_b.get(i, k);
                    let rel = (fd - an).abs() / an.abs().max(1e-8);
                    assert!(rel <= tol, "case {case} b[{i}][{k}]: fd {fd} vs {an}");
                }
            }
            for k in 0..r {
                for j in 0..n {
                    let orig = layer.a().get(k, j);
                    layer.a_mut().set(k, j, orig + h);
                    let up = loss(&layer);
                    layer.a_mut().set(k, j, orig - h);
                    let down = loss(&layer);
                    layer.a_mut().set(k, j, orig);
                    let fd = (up - down) / (2.0 * h);
                    let an = analytic.d_a.get(k, j);
                    let rel = (fd - an).abs() / an.abs().max(1e-8);
                    assert!(rel <= tol, "case {case} a[{k}][{j}]: fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let w0 = seeded(6, 5, 900);
        let layer = LoraLinear::pissa_init(&w0, 2, 4.0).unwrap();
        let x = seeded(5, 3, 901);
        let target = seeded(6, 3, 902);
        let h = 1e-6;

        let loss = |input: &Matrix| -> f64 {
            let y = layer.forward(input).unwrap();
            let diff = y.sub(&target).unwrap();
            0.5 * diff.frobenius_norm().powi(2)
        };

        let y = layer.forward(&x).unwrap();
        let d_y = y.sub(&target).unwrap();
        let analytic = layer.backward(&x, &d_y).unwrap();

        let mut probe = x.clone();
        for i in 0..5 {
            for j in 0..3 {
                let orig = probe.get(i, j);
                probe.set(i, j, orig + h);
                let up = loss(&probe);
                probe.set(i, j, orig - h);
                let down = loss(&probe);
                probe.set(i, j, orig);
                let fd = (up - down) / (2.0 * h);
                let an = analytic.d_x.get(i, j);
                assert!((fd - an).abs() / an.abs().max(1e-8) <= 1e-5);
            }
        }
    }

    #[test]
    fn trainable_count_is_factor_entries() {
        let w0 = seeded(10, 6, 40);
        let layer = LoraLinear::pissa_init(&w0, 4, 4.0).unwrap();
        assert_eq!(layer.num_trainable(), 4 * (10 + 6));
    }
}
