//! Leave-one-out mutual-information estimate and the input-compression bound.

use condense::analysis::{generalization_bound_icb, mutual_info_upper_bound, nats_to_bits};

fn main() -> condense::Result<()> {
    // p(z_i | x_j) for three inputs; rows are the representation densities of each input.
    let cond = vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]];
    let nats = mutual_info_upper_bound(&cond)?;
    let bits = nats_to_bits(nats);
    println!("I(X;Z) <= {nats:.4} nats = {bits:.4} bits");

    for n in [50, 500, 5_000, 50_000] {
        println!("N = {n:>6}: generalisation gap < {:.4} (delta 0.05)", generalization_bound_icb(bits, 0.05, n)?);
    }
    // A compressed representation tightens the bound at fixed N.
    for mi in [0.0, 2.0, 8.0] {
        println!("I = {mi:>3} bits: {:.4}", generalization_bound_icb(mi, 0.05, 500)?);
    }
    Ok(())
}
