//! Quantization grids and the sawtooth constraint.
//!
//! For a sorted grid `q_1 < ... < q_n` with medians `m_i = (q_i + q_{i+1}) / 2`
//! the partial-constraint sum `Y(w)` is a sawtooth that is zero exactly on the
//! grid and has slope +-2 everywhere else. The window function `ucs(w)` gates
//! it off inside half-open intervals `[m_i - h_i, m_i + h_i)` with
//! `h_i = (q_{i+1} - q_i) / (2g)`. At `g = 1` the windows tile `[q_1, q_n)`;
//! as `g` grows they shrink toward the medians and vanish at `g = inf`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which family of quantized values a layer is constrained to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConstraintKind {
    /// `{-a, a}`
    Binary,
    /// `{-a, 0, a}`
    Ternary,
    /// `{0, +-a, +-a/2}`
    OneBitShift,
    /// `{0, +-a, +-a/2, +-a/4}`
    TwoBitShift,
    /// Arbitrary levels, expressed in units of the layer scale.
    Custom(Vec<f64>),
}

impl ConstraintKind {
    /// Shift depth `D` for the `{0, +-2^-d a}` families.
    pub fn shift_depth(&self) -> Option<u32> {
        match self {
            ConstraintKind::Ternary => Some(0),
            ConstraintKind::OneBitShift => Some(1),
            ConstraintKind::TwoBitShift => Some(2),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConstraintKind::Binary => "binary",
            ConstraintKind::Ternary => "ternary",
            ConstraintKind::OneBitShift => "one-bit-shift",
            ConstraintKind::TwoBitShift => "two-bit-shift",
            ConstraintKind::Custom(_) => "custom",
        }
    }

    /// Grid levels for unit scale, unsorted.
    fn unit_levels(&self) -> Vec<f64> {
        match self {
            ConstraintKind::Binary => vec![-1.0, 1.0],
            ConstraintKind::Custom(levels) => levels.clone(),
            shift => {
                let depth = shift.shift_depth().unwrap_or(0);
                let mut v = vec![0.0];
                for d in 0..=depth {
                    let x = 2f64.powi(-(d as i32));
                    v.push(x);
                    v.push(-x);
                }
                v
            }
        }
    }
}

impl std::str::FromStr for ConstraintKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(ConstraintKind::Binary),
            "ternary" => Ok(ConstraintKind::Ternary),
            "one-bit-shift" => Ok(ConstraintKind::OneBitShift),
            "two-bit-shift" => Ok(ConstraintKind::TwoBitShift),
            other => {
                if let Some(list) = other.strip_prefix("custom:") {
                    let levels = list
                        .split(',')
                        .map(|t| {
                            t.trim()
                                .parse::<f64>()
                                .map_err(|e| Error::Domain(format!("custom level {t:?}: {e}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(ConstraintKind::Custom(levels))
                } else {
                    Err(Error::Domain(format!("unknown constraint kind {other:?}")))
                }
            }
        }
    }
}

/// Sorted quantized values, their medians, and the window variable `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    q: Vec<f64>,
    m: Vec<f64>,
    g: f64,
}

impl QuantGrid {
    /// Builds a grid from strictly increasing levels with `g = 1`.
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::Domain(format!(
                "a grid needs at least two levels, got {}",
                levels.len()
            )));
        }
        if levels.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("grid levels must be finite".into()));
        }
        if levels.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Domain(format!(
                "grid levels must be strictly increasing: {levels:?}"
            )));
        }
        let m = levels.windows(2).map(|p| (p[0] + p[1]) / 2.0).collect();
        Ok(Self {
            q: levels,
            m,
            g: 1.0,
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.q
    }

    pub fn medians(&self) -> &[f64] {
        &self.m
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn n_levels(&self) -> usize {
        self.q.len()
    }

    pub fn min(&self) -> f64 {
        self.q[0]
    }

    pub fn max(&self) -> f64 {
        self.q[self.q.len() - 1]
    }

    pub fn span(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn max_gap(&self) -> f64 {
        self.q.windows(2).map(|p| p[1] - p[0]).fold(0.0, f64::max)
    }

    pub fn min_gap(&self) -> f64 {
        self.q
            .windows(2)
            .map(|p| p[1] - p[0])
            .fold(f64::INFINITY, f64::min)
    }

    /// Sets the window variable. `f64::INFINITY` removes every window.
    pub fn set_window(&mut self, g: f64) -> Result<()> {
        if !(g >= 1.0) {
            return Err(Error::Domain(format!("window variable must be >= 1, got {g}")));
        }
        self.g = g;
        Ok(())
    }

    pub fn with_window(mut self, g: f64) -> Result<Self> {
        self.set_window(g)?;
        Ok(self)
    }

    /// Index `i` with `q_i <= w < q_{i+1}`, or `None` outside `[q_1, q_n)`.
    #[inline]
    fn interval(&self, w: f64) -> Option<usize> {
        if !(w >= self.q[0]) || w >= self.max() {
            return None;
        }
        // first index with q > w, minus one
        Some(self.q.partition_point(|&x| x <= w) - 1)
    }

    /// Half-open window `[lo, hi)` around median `i` at the current `g`.
    pub fn window_bounds(&self, i: usize) -> (f64, f64) {
        let gap = self.q[i + 1] - self.q[i];
        if self.g == 1.0 {
            return (self.q[i], self.q[i + 1]);
        }
        let h = gap / (2.0 * self.g);
        (self.m[i] - h, self.m[i] + h)
    }
}

/// Grid for `kind` scaled by the layer scale factor `a`, with `g = 1`.
pub fn make_grid(kind: &ConstraintKind, scale: f64) -> Result<QuantGrid> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Domain(format!("grid scale must be positive, got {scale}")));
    }
    let mut levels: Vec<f64> = kind.unit_levels().into_iter().map(|x| x * scale).collect();
    levels.sort_by(f64::total_cmp);
    QuantGrid::new(levels)
}

/// Ungated sawtooth `Y(w)`.
pub fn partial_sum_y(w: f64, grid: &QuantGrid) -> f64 {
    let q = &grid.q;
    if w < q[0] {
        return -2.0 * (w - q[0]);
    }
    match grid.interval(w) {
        // equals -2|w - m_i| + (q_{i+1} - q_i), written so it is exactly 0 at q_i
        Some(i) => 2.0 * (w - q[i]).min(q[i + 1] - w),
        None => 2.0 * (w - grid.max()),
    }
}

/// Unconstrained-weight window indicator: 0 inside a window, 1 elsewhere.
pub fn window_ucs(w: f64, grid: &QuantGrid) -> f64 {
    match grid.interval(w) {
        Some(i) => {
            let (lo, hi) = grid.window_bounds(i);
            if w >= lo && w < hi {
                0.0
            } else {
                1.0
            }
        }
        None => 1.0,
    }
}

/// Gated constraint `cs(w) = ucs(w) * Y(w)`.
pub fn constraint_cs(w: f64, grid: &QuantGrid) -> f64 {
    window_ucs(w, grid) * partial_sum_y(w, grid)
}

/// Derivative of the ungated sawtooth with the crate's tie-breaking:
/// 0 exactly on a grid value, -2 exactly on a median.
pub fn partial_sum_y_grad(w: f64, grid: &QuantGrid) -> f64 {
    let q = &grid.q;
    if w < q[0] {
        return -2.0;
    }
    if w == grid.max() {
        return 0.0;
    }
    match grid.interval(w) {
        Some(i) => {
            if w == q[i] {
                0.0
            } else if w < grid.m[i] {
                2.0
            } else {
                -2.0
            }
        }
        None => 2.0,
    }
}

/// Subgradient of `cs` with respect to `w`; the window is locally constant so
/// it contributes no derivative of its own.
pub fn constraint_grad(w: f64, grid: &QuantGrid) -> f64 {
    window_ucs(w, grid) * partial_sum_y_grad(w, grid)
}

/// Constraint-failure score over one or more layers: the mean of the
/// ungated `Y` over every constrained weight.
pub fn cfs<'a, I>(layers: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [f64], &'a QuantGrid)>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for (weights, grid) in layers {
        for &w in weights {
            total += partial_sum_y(w, grid);
        }
        count += weights.len();
    }
    if count == 0 {
        return Err(Error::Domain("constraint-failure score of an empty weight set".into()));
    }
    Ok(total / count as f64)
}
