//! Adapter initialization from the top singular triples leaves the
//! effective weight exactly at the base weight: the residual keeps what
//! the factors took out, so w_res + scale * B A == w0 to roundoff.

use srlora::{relative_frobenius_distance, LoraLinear, Rng};

fn main() -> srlora::Result<()> {
    println!(
        "{:>10} {:>6} {:>8} {:>12}",
        "shape", "rank", "alpha", "rel err"
    );
    for (seed, m, n, r, alpha) in [
        (1u64, 12, 10, 4, 4.0),
        (2, 10, 12, 4, 8.0),
        (3, 16, 16, 8, 4.0),
        (4, 7, 5, 2, 2.0),
    ] {
        let w0 = Rng::new(seed).gaussian(m, n, 0.0, 1.0 / (n as f64).sqrt());
        let layer = LoraLinear::pissa_init(&w0, r, alpha)?;
        let err = relative_frobenius_distance(&layer.effective_weight(), &w0)?;
        println!("{:>10} {r:>6} {alpha:>8.1} {err:>12.2e}", format!("{m}x{n}"));
    }

    // The identity is a property of the initialization, not of the layer:
    // any later factor movement shows up in the effective weight.
    let w0 = Rng::new(5).gaussian(6, 6, 0.0, 0.5);
    let mut layer = LoraLinear::pissa_init(&w0, 2, 2.0)?;
    let before = relative_frobenius_distance(&layer.effective_weight(), &w0)?;
    let old = layer.b().get(0, 0);
    layer.b_mut().set(0, 0, old + 0.1);
    let after = relative_frobenius_distance(&layer.effective_weight(), &w0)?;
    println!("\nafter nudging one factor entry: {before:.2e} -> {after:.2e}");
    Ok(())
}
