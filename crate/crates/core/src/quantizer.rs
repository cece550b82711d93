//! Layer scale factors, the straight-through quantizer, and clipping.

use serde::{Deserialize, Serialize};

use crate::constraint::{ConstraintKind, QuantGrid};
use crate::error::{Error, Result};
use crate::ndcore::{l1_norm, Matrix};

/// When the layer scale `a` (and so the grid) is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalePolicy {
    /// Once, from the weights CBP starts from.
    #[default]
    FrozenAtStart,
    /// At the start of every CBP epoch.
    RecomputeEachEpoch,
}

impl std::str::FromStr for ScalePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" | "frozen-at-start" => Ok(ScalePolicy::FrozenAtStart),
            "recompute" | "recompute-each-epoch" => Ok(ScalePolicy::RecomputeEachEpoch),
            other => Err(Error::Domain(format!("unknown scale policy {other:?}"))),
        }
    }
}

/// Per-layer quantization settings. Exempt layers carry no grid and no
/// multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerQuantConfig {
    pub exempt: bool,
    pub kind: ConstraintKind,
    pub scale_policy: ScalePolicy,
}

impl LayerQuantConfig {
    pub fn exempt() -> Self {
        Self {
            exempt: true,
            kind: ConstraintKind::Ternary,
            scale_policy: ScalePolicy::FrozenAtStart,
        }
    }

    pub fn constrained(kind: ConstraintKind) -> Self {
        Self {
            exempt: false,
            kind,
            scale_policy: ScalePolicy::FrozenAtStart,
        }
    }
}

/// Layer scale `a = ||W||_1 / n`.
pub fn scale_factor(w: &Matrix) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::Domain("scale factor of an empty matrix".into()));
    }
    let a = l1_norm(w) / w.len() as f64;
    if !(a > 0.0) {
        return Err(Error::Domain("scale factor of an all-zero matrix".into()));
    }
    Ok(a)
}

/// Forward quantization map: `q_1 + sum_i (q_{i+1} - q_i) * step(w - m_i)`
/// with `step(0) = 1`, i.e. ties at a median round up.
pub fn ste_quantize(w: f64, grid: &QuantGrid) -> f64 {
    let q = grid.levels();
    let mut out = q[0];
    for (i, &m) in grid.medians().iter().enumerate() {
        if w >= m {
            out = q[i + 1];
        } else {
            break;
        }
    }
    out
}

/// Straight-through backward: the gradient passes to the real weight unchanged.
#[inline]
pub fn ste_backward(upstream_grad: f64) -> f64 {
    upstream_grad
}

/// Elementwise projection of a whole matrix onto the grid.
pub fn quantize_matrix(w: &Matrix, grid: &QuantGrid) -> Matrix {
    w.map(|x| ste_quantize(x, grid))
}

/// Clamps every entry into `[q_1, q_n]`.
pub fn clip_weights(w: &Matrix, grid: &QuantGrid) -> Matrix {
    let (lo, hi) = (grid.min(), grid.max());
    w.map(|x| x.clamp(lo, hi))
}

pub fn clip_in_place(w: &mut Matrix, grid: &QuantGrid) {
    let (lo, hi) = (grid.min(), grid.max());
    for x in w.as_mut_slice() {
        *x = x.clamp(lo, hi);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::{make_grid, partial_sum_y};
    use proptest::prelude::*;

    fn ternary() -> QuantGrid {
        make_grid(&ConstraintKind::Ternary, 1.0).unwrap()
    }

    /// Nearest grid value with ties resolved upward.
    fn nearest(w: f64, grid: &QuantGrid) -> f64 {
        let mut best = grid.levels()[0];
        for &q in grid.levels() {
            let (d, db) = ((w - q).abs(), (w - best).abs());
            if d < db || (d == db && q > best) {
                best = q;
            }
        }
        best
    }

    #[test]
    fn scale_factor_examples() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, -4.0]]).unwrap();
        assert_eq!(scale_factor(&w).unwrap(), 2.5);
        assert!((scale_factor(&Matrix::filled(3, 4, 0.7)).unwrap() - 0.7).abs() < 1e-15);
        assert!(matches!(scale_factor(&Matrix::zeros(2, 2)), Err(Error::Domain(_))));
    }

    #[test]
    fn scale_factor_matches_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..100).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut s = 0.0;
        for v in &vals {
            s += v.abs();
        }
        let w = Matrix::from_vec(10, 10, vals).unwrap();
        assert!((scale_factor(&w).unwrap() - s / 100.0).abs() < 1e-14);
    }

    #[test]
    fn quantize_examples() {
        let g = ternary();
        assert_eq!(ste_quantize(0.7, &g), 1.0);
        assert_eq!(ste_quantize(-0.2, &g), 0.0);
        assert_eq!(ste_quantize(0.5, &g), 1.0);
        assert_eq!(ste_quantize(-0.5, &g), 0.0);
        assert_eq!(ste_quantize(-7.0, &g), -1.0);
        for &q in g.levels() {
            assert_eq!(ste_quantize(q, &g), q);
        }
    }

    #[test]
    fn backward_is_identity() {
        for x in [0.35, 0.0, -1.7] {
            assert_eq!(ste_backward(x), x);
        }
    }

    #[test]
    fn clip_examples() {
        let t = ternary();
        let b = make_grid(&ConstraintKind::Binary, 1.0).unwrap();
        let w = Matrix::from_rows(&[vec![1.3, -0.4]]).unwrap();
        assert_eq!(clip_weights(&w, &t).as_slice(), &[1.0, -0.4]);
        assert_eq!(clip_weights(&Matrix::filled(1, 1, -5.0), &b).as_slice(), &[-1.0]);
    }

    proptest! {
        #[test]
        fn quantize_lands_on_grid_and_is_idempotent(w in -3.0f64..3.0, a in 0.1f64..2.0, k in 0usize..4) {
            let kind = [ConstraintKind::Binary, ConstraintKind::Ternary, ConstraintKind::OneBitShift, ConstraintKind::TwoBitShift][k].clone();
            let g = make_grid(&kind, a).unwrap();
            let wq = ste_quantize(w, &g);
            prop_assert!(g.levels().contains(&wq));
            prop_assert_eq!(ste_quantize(wq, &g), wq);
            prop_assert_eq!(wq, nearest(w, &g));
        }

        #[test]
        fn clipped_weights_have_bounded_sawtooth(w in -10.0f64..10.0, a in 0.1f64..2.0) {
            let g = make_grid(&ConstraintKind::TwoBitShift, a).unwrap();
            let c = clip_weights(&Matrix::filled(1, 1, w), &g).as_slice()[0];
            prop_assert!(partial_sum_y(c, &g) <= g.max_gap() + 1e-12);
        }
    }
}
