//! Quantizes a weight matrix onto each grid family at its layer scale.

use constrained_backprop::quantizer::{quantize_matrix, scale_factor};
use constrained_backprop::{make_grid, ConstraintKind, Matrix, Result};

fn main() -> Result<()> {
    let w = Matrix::from_rows(&[vec![0.42, -0.05, 0.18, -0.61], vec![0.09, 0.33, -0.27, 0.74]])?;
    let scale = scale_factor(&w)?;
    println!("scale {scale:.4}");
    println!("weights   {:?}", w.as_slice());
    for kind in [
        ConstraintKind::Binary,
        ConstraintKind::Ternary,
        ConstraintKind::OneBitShift,
        ConstraintKind::TwoBitShift,
    ] {
        let grid = make_grid(&kind, scale)?;
        let q = quantize_matrix(&w, &grid);
        let pretty: Vec<String> = q.as_slice().iter().map(|v| format!("{v:.3}")).collect();
        println!("{:<13} {}", kind.name(), pretty.join(" "));
    }
    Ok(())
}
