//! Spiral scan orders over a 2-D grid, the topology-preservation
//! diagnostic, and the channel-partitioned Q-Shift.
//!
//! A spiral starts at one of the four corners and peels the grid ring by
//! ring, either clockwise or counter-clockwise. Consecutive cells in every
//! path are 4-adjacent.

use std::fmt;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rotation {
    Clockwise,
    CounterClockwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanKind {
    Spiral { corner: Corner, rotation: Rotation },
    Raster,
}

impl fmt::Display for ScanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScanKind::Raster => f.write_str("raster"),
            ScanKind::Spiral { corner, rotation } => {
                let c = match corner {
                    Corner::TopLeft => "tl",
                    Corner::TopRight => "tr",
                    Corner::BottomLeft => "bl",
                    Corner::BottomRight => "br",
                };
                let r = match rotation {
                    Rotation::Clockwise => "cw",
                    Rotation::CounterClockwise => "ccw",
                };
                write!(f, "{c}-{r}")
            }
        }
    }
}

/// Fixed enumeration order of the eight spiral directions.
pub const SPIRAL_DIRECTIONS: [(Corner, Rotation); 8] = [
    (Corner::TopLeft, Rotation::Clockwise),
    (Corner::TopLeft, Rotation::CounterClockwise),
    (Corner::TopRight, Rotation::Clockwise),
    (Corner::TopRight, Rotation::CounterClockwise),
    (Corner::BottomLeft, Rotation::Clockwise),
    (Corner::BottomLeft, Rotation::CounterClockwise),
    (Corner::BottomRight, Rotation::Clockwise),
    (Corner::BottomRight, Rotation::CounterClockwise),
];

/// A bijective visiting order over an `height x width` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanPath {
    height: usize,
    width: usize,
    kind: ScanKind,
    order: Vec<usize>,
    inverse: Vec<usize>,
}

impl ScanPath {
    /// Builds a path from flat indices, checking that it is a permutation.
    pub fn from_order(height: usize, width: usize, kind: ScanKind, order: Vec<usize>) -> Result<Self> {
        let n = height * width;
        if order.len() != n {
            return Err(Error::invalid(
                "scan path",
                format!("order has {} entries for a {height}x{width} grid", order.len()),
            ));
        }
        let mut inverse = vec![usize::MAX; n];
        for (t, &cell) in order.iter().enumerate() {
            if cell >= n || inverse[cell] != usize::MAX {
                return Err(Error::invalid("scan path", format!("cell {cell} out of range or repeated")));
            }
            inverse[cell] = t;
        }
        Ok(Self {
            height,
            width,
            kind,
            order,
            inverse,
        })
    }

    /// Row-major order.
    pub fn raster(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            kind: ScanKind::Raster,
            order: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> ScanKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Flat cell index visited at step `t`.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Visit time of each flat cell index.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    /// `(row, col)` visited at step `t`.
    pub fn coord(&self, t: usize) -> (usize, usize) {
        let cell = self.order[t];
        (cell / self.width, cell % self.width)
    }

    /// Reorders one `height*width` plane into visiting order.
    pub fn gather<T: Copy>(&self, plane: &[T]) -> Vec<T> {
        self.order.iter().map(|&i| plane[i]).collect()
    }

    /// Inverse of [`ScanPath::gather`].
    pub fn scatter<T: Copy + Default>(&self, seq: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); seq.len()];
        for (&cell, &v) in self.order.iter().zip(seq) {
            out[cell] = v;
        }
        out
    }
}

/// Top-left clockwise ring peeling as `(row, col)` pairs.
fn ring_walk(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(h * w);
    if h == 0 || w == 0 {
        return out;
    }
    let (mut top, mut left) = (0usize, 0usize);
    let (mut bottom, mut right) = (h as isize - 1, w as isize - 1);
    while top as isize <= bottom && left as isize <= right {
        let (b, r) = (bottom as usize, right as usize);
        out.extend((left..=r).map(|c| (top, c)));
        out.extend((top + 1..=b).map(|row| (row, r)));
        if top < b {
            out.extend((left..r).rev().map(|c| (b, c)));
        }
        if left < r {
            out.extend((top + 1..b).rev().map(|row| (row, left)));
        }
        top += 1;
        left += 1;
        bottom -= 1;
        right -= 1;
    }
    out
}

/// Rectangular inward spiral starting at `corner`.
///
/// Every corner/rotation pair is a reflection or transpose of the
/// top-left clockwise ring walk.
pub fn spiral_path(height: usize, width: usize, corner: Corner, rotation: Rotation) -> Result<ScanPath> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("spiral_path", "grid extents must be positive"));
    }
    // Clockwise from TL/BR and counter-clockwise from TR/BL walk the first
    // leg horizontally; the others start vertically and need a transpose.
    let horizontal_first = matches!(
        (corner, rotation),
        (Corner::TopLeft, Rotation::Clockwise)
            | (Corner::BottomRight, Rotation::Clockwise)
            | (Corner::TopRight, Rotation::CounterClockwise)
            | (Corner::BottomLeft, Rotation::CounterClockwise)
    );
    let base: Vec<(usize, usize)> = if horizontal_first {
        ring_walk(height, width)
    } else {
        ring_walk(width, height).into_iter().map(|(r, c)| (c, r)).collect()
    };
    let (flip_rows, flip_cols) = match corner {
        Corner::TopLeft => (false, false),
        Corner::TopRight => (false, true),
        Corner::BottomLeft => (true, false),
        Corner::BottomRight => (true, true),
    };
    let order = base
        .into_iter()
        .map(|(r, c)| {
            let r = if flip_rows { height - 1 - r } else { r };
            let c = if flip_cols { width - 1 - c } else { c };
            r * width + c
        })
        .collect();
    ScanPath::from_order(height, width, ScanKind::Spiral { corner, rotation }, order)
}

/// The eight spiral paths in [`SPIRAL_DIRECTIONS`] order.
pub fn all_spiral_paths(height: usize, width: usize) -> Result<Vec<ScanPath>> {
    SPIRAL_DIRECTIONS
        .iter()
        .map(|&(c, r)| spiral_path(height, width, c, r))
        .collect()
}

/// Parameters of the continuous Archimedean spiral `r(θ) = a + bθ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpiralParams {
    pub a: f64,
    pub b: f64,
    pub theta_max: f64,
    pub samples: usize,
}

/// Samples `((a+bθ)cosθ, (a+bθ)sinθ)` at `θ_k = k·θ_max/samples`, `k < samples`.
///
/// Used only for visualization and validation; the discrete paths above do
/// not depend on `a` or `b`.
pub fn continuous_spiral(p: &SpiralParams) -> Result<Vec<(f64, f64)>> {
    if p.samples == 0 || p.b < 0.0 || !p.b.is_finite() || !p.a.is_finite() || !p.theta_max.is_finite() {
        return Err(Error::invalid(
            "continuous_spiral",
            format!("need samples >= 1 and finite b >= 0, got {p:?}"),
        ));
    }
    Ok((0..p.samples)
        .map(|k| {
            let theta = p.theta_max * k as f64 / p.samples as f64;
            let r = p.a + p.b * theta;
            (r * theta.cos(), r * theta.sin())
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopologyThresholds {
    /// Geometric proximity threshold in grid units.
    pub delta: f64,
    /// Temporal proximity threshold in sequence positions.
    pub tau: usize,
}

impl Default for TopologyThresholds {
    fn default() -> Self {
        Self { delta: 1.5, tau: 3 }
    }
}

/// Fraction of unordered cell pairs closer than `delta` (Euclidean) whose
/// visit times differ by at least `tau`. Zero when no pair qualifies.
pub fn topology_violation_rate(path: &ScanPath, t: TopologyThresholds) -> f64 {
    let (h, w) = (path.height, path.width);
    let reach = t.delta.ceil().max(0.0) as usize;
    let mut qualifying = 0u64;
    let mut violating = 0u64;
    for r in 0..h {
        for c in 0..w {
            let ti = path.inverse[r * w + c];
            // pairs with (r2, c2) after (r, c) in row-major order
            for r2 in r..(r + reach + 1).min(h) {
                let c_lo = if r2 == r { c + 1 } else { c.saturating_sub(reach) };
                for c2 in c_lo..(c + reach + 1).min(w) {
                    let (dr, dc) = ((r2 - r) as f64, c2 as f64 - c as f64);
                    if (dr * dr + dc * dc).sqrt() >= t.delta {
                        continue;
                    }
                    qualifying += 1;
                    if path.inverse[r2 * w + c2].abs_diff(ti) >= t.tau {
                        violating += 1;
                    }
                }
            }
        }
    }
    if qualifying == 0 {
        0.0
    } else {
        violating as f64 / qualifying as f64
    }
}

/// Per-quarter source offsets `(dh, dw)`: quarter `q` at `(h, w)` reads
/// `x[h + dh, w + dw]`.
const SHIFT_SOURCES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn shift_kernel<T: Real>(x: &Tensor<T>, adjoint: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("qshift")?;
    if c % 4 != 0 {
        return Err(Error::shape("qshift", "channel count divisible by 4", x.shape()));
    }
    let quarter = c / 4;
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let (dh, dw) = SHIFT_SOURCES[ch / quarter];
            let (dh, dw) = if adjoint { (-dh, -dw) } else { (dh, dw) };
            let base = (b * c + ch) * h * w;
            // Source columns lo..hi land in output columns lo - dw..hi - dw.
            let (lo, hi) = (dw.max(0) as usize, (w as isize + dw.min(0)).max(0) as usize);
            let (olo, ohi) = ((lo as isize - dw) as usize, (hi as isize - dw) as usize);
            if lo >= hi {
                continue;
            }
            for r in 0..h {
                let sr = r as isize + dh;
                if sr < 0 || sr >= h as isize {
                    continue;
                }
                let s_row = base + sr as usize * w;
                let d_row = base + r * w;
                dst[d_row + olo..d_row + ohi].copy_from_slice(&src[s_row + lo..s_row + hi]);
            }
        }
    }
    Ok(out)
}

/// The shifted feature `X†`: channel quarters read from the pixel above,
/// below, left and right respectively, zero outside the grid.
pub fn spatial_shift<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    shift_kernel(x, false)
}

/// `X + (1 - μ) ⊙ X†` with `μ` broadcast per channel.
pub fn qshift<T: Real>(x: &Tensor<T>, mu: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4("qshift")?;
    if mu.shape() != [c] {
        return Err(Error::shape("qshift mu", format!("[{c}]"), mu.shape()));
    }
    let shifted = spatial_shift(x)?;
    let plane = h * w;
    let mut out = x.clone();
    for (i, (o, &s)) in out.data_mut().iter_mut().zip(shifted.data()).enumerate() {
        let ch = (i / plane) % c;
        *o += (T::one() - mu.data()[ch]) * s;
    }
    Ok(out)
}

/// Which projection a Q-Shift feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftRole {
    R,
    K,
    V,
}

impl ShiftRole {
    pub fn suffix(self) -> &'static str {
        match self {
            ShiftRole::R => "r",
            ShiftRole::K => "k",
            ShiftRole::V => "v",
        }
    }
}

/// Differentiable `X†`.
pub fn spatial_shift_var<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let value = spatial_shift(g.value(x))?;
    g.record(
        "qshift",
        value,
        &[x],
        Box::new(|a| Ok(vec![Some(shift_kernel(a.grad, true)?)])),
    )
}

/// Differentiable Q-Shift with a learnable per-channel `mu` of shape `[C]`.
pub fn qshift_var<T: Real>(g: &mut Graph<T>, x: Var, mu: Var) -> Result<Var> {
    let c = g.shape(x)[1];
    let shifted = spatial_shift_var(g, x)?;
    let neg = g.scale(mu, -1.0)?;
    let blend = g.add_scalar(neg, 1.0)?;
    let blend = g.reshape(blend, &[1, c, 1, 1])?;
    let mixed = g.mul(shifted, blend)?;
    g.add(x, mixed)
}
