//! Factor a seeded matrix, then check the two facts everything else in
//! this crate leans on: the factors reproduce the input, and truncating
//! to the top k triples is the best rank-k approximation.

use srlora::{best_rank_k_error, relative_frobenius_distance, svd, Matrix, Rng};

fn main() -> srlora::Result<()> {
    let w = Rng::new(42).gaussian(8, 6, 0.0, 1.0);
    let f = svd(&w)?;

    println!("singular values of a seeded 8x6 gaussian matrix:");
    for (i, s) in f.s().iter().enumerate() {
        println!("  sigma_{i} = {s:.6}");
    }

    let err = relative_frobenius_distance(&f.reconstruct(), &w)?;
    println!("reconstruction |U S V^T - W| / |W| = {err:.2e}");

    println!("{:>4} {:>14} {:>14}", "k", "tail formula", "explicit");
    for k in 1..=4 {
        // The tail formula sqrt(sum of squared discarded singular values)
        // must match an explicitly built truncation.
        let formula = best_rank_k_error(&w, k)?;

        let mut w_k = Matrix::zeros(w.rows(), w.cols());
        for i in 0..k {
            w_k.add_outer(f.s()[i], &f.u().column(i), &f.v().column(i))?;
        }
        let explicit = w_k.sub(&w)?.frobenius_norm();
        println!("{k:>4} {formula:>14.8} {explicit:>14.8}");
    }
    Ok(())
}
