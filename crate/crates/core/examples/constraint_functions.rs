//! Tabulates the sawtooth constraint, its window, and the gated constraint
//! for a ternary grid as the window shrinks.

use constrained_backprop::constraint::{constraint_cs, partial_sum_y, window_ucs};
use constrained_backprop::{make_grid, ConstraintKind, Result};

fn main() -> Result<()> {
    for g in [1.0, 4.0, f64::INFINITY] {
        let grid = make_grid(&ConstraintKind::Ternary, 1.0)?.with_window(g)?;
        println!("g = {g}");
        println!("{:>6} {:>8} {:>5} {:>8}", "w", "Y", "ucs", "cs");
        for k in -12..=12 {
            let w = k as f64 / 10.0;
            println!(
                "{w:>6.2} {:>8.3} {:>5} {:>8.3}",
                partial_sum_y(w, &grid),
                window_ucs(w, &grid),
                constraint_cs(w, &grid)
            );
        }
    }
    Ok(())
}
