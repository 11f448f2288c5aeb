//! Sweeps each activation's slope on a dense grid and prints the maximum.
//! The rounded-up results are the constants in `tensor.rs`.
//!
//! Run with: cargo run --example lipschitz_sweep

use bip_core::tensor::ActivationKind;

fn main() {
    let h = 1e-6f64;
    for kind in ActivationKind::ALL {
        let (mut best, mut at) = (0.0f64, 0.0f64);
        let mut i = -20_000_000i64;
        while i <= 20_000_000 {
            let x = i as f64 * 1e-6;
            let slope = ((kind.apply(x + h) - kind.apply(x - h)) / (2.0 * h)).abs();
            if slope > best {
                best = slope;
                at = x;
            }
            i += 1;
        }
        // 1e-8 absorbs finite-difference rounding on the linear pieces
        let rounded = ((best - 1e-8) * 1e4).ceil() / 1e4;
        println!(
            "{:<5} max |slope| = {best:.9} at x = {at:.6}; declared {:.4}; rounded-up sweep {rounded:.4}",
            kind.name(),
            kind.lipschitz_constant()
        );
    }
}
