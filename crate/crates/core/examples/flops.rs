//! Per-iteration cost of the method relative to plain backprop for an
//! AlexNet-sized model with the first and last layers left unconstrained.

use constrained_backprop::kinetics::{backprop_flops, flop_estimate};
use constrained_backprop::Result;

fn main() -> Result<()> {
    let n_w = 61_090_496.0 - 11.0 * 11.0 * 3.0 * 64.0 - 4096.0 * 1000.0;
    let forward = 1.45e9 / 2.0;
    for p in [0.0, 0.2, 0.5, 1.0] {
        let ratio = flop_estimate(n_w, forward, p)? / backprop_flops(forward);
        println!("p {p:>4} ratio {ratio:.4}");
    }
    Ok(())
}
