//! Geometric pair pruning.
//!
//! Every object gets a proxy 3D center: its 2D box center plus the median
//! of the normalized depth map inside the box. A pair `(i, j)` is kept when
//!
//! ```text
//! lambda1 * (x / y) + lambda2 * |d_i - d_j| < tau
//! ```
//!
//! where `x` is the distance between the 2D centers, `y` the image diagonal
//! and `d_i`, `d_j` the median depths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BBox, DetectedObject, ImageRecord, NodeId};

/// Row-major normalized depth map, possibly coarser than the image it covers.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthGrid {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    image_width: u32,
    image_height: u32,
}

impl DepthGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        image_width: u32,
        image_height: u32,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid(format!("depth grid {rows}x{cols} is empty")));
        }
        if image_width == 0 || image_height == 0 {
            return Err(Error::Invalid("depth grid covers an empty image".into()));
        }
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(Error::Invalid(format!(
                "depth grid {rows}x{cols} carries {} values",
                values.len()
            )));
        }
        if let Some((k, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Invalid(format!("depth value {v} at index {k} outside [0,1]")));
        }
        Ok(DepthGrid {
            rows,
            cols,
            values,
            image_width,
            image_height,
        })
    }

    /// Constant-valued grid, mostly for tests and fixtures.
    pub fn constant(rows: usize, cols: usize, value: f64, image_width: u32, image_height: u32) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols], image_width, image_height)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Image pixels per grid cell along x.
    pub fn scale_x(&self) -> f64 {
        self.image_width as f64 / self.cols as f64
    }

    /// Image pixels per grid cell along y.
    pub fn scale_y(&self) -> f64 {
        self.image_height as f64 / self.rows as f64
    }

    /// Center of cell `(row, col)` in image pixel coordinates.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.scale_x(),
            (row as f64 + 0.5) * self.scale_y(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub enabled: bool,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            lambda1: 0.5,
            lambda2: 1.0,
            tau: 0.45,
            enabled: true,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return Err(Error::Config(format!("filter.lambda1 = {} must be >= 0", self.lambda1)));
        }
        if !(self.lambda2.is_finite() && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!("filter.lambda2 = {} must be >= 0", self.lambda2)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("filter.tau = {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairCandidate {
    pub i: NodeId,
    pub j: NodeId,
    pub center_dist_2d: f64,
    pub diag: f64,
    pub depth_i: f64,
    pub depth_j: f64,
    pub score: f64,
    pub retained: bool,
}

pub fn center_2d(b: &BBox) -> Result<(f64, f64)> {
    b.check()?;
    Ok(((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0))
}

/// Median depth over the grid cells whose centers lie in `[x1, x2) x [y1, y2)`.
///
/// A box too small to contain any cell center falls back to the cell under
/// the box center.
pub fn median_depth(depth: &DepthGrid, b: &BBox) -> Result<f64> {
    b.check()?;
    let (w, h) = (depth.image_width as f64, depth.image_height as f64);
    if b.x2 <= 0.0 || b.y2 <= 0.0 || b.x1 >= w || b.y1 >= h {
        return Err(Error::InvalidBox(format!("{b:?} lies outside the {w}x{h} image")));
    }
    let (sx, sy) = (depth.scale_x(), depth.scale_y());

    // candidate index ranges, widened by one; the exact test is on the center
    let col_range = index_range(b.x1 / sx, b.x2 / sx, depth.cols);
    let row_range = index_range(b.y1 / sy, b.y2 / sy, depth.rows);

    let mut cells = Vec::new();
    for r in row_range {
        for c in col_range.clone() {
            let (cx, cy) = depth.cell_center(r, c);
            if cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2 {
                cells.push(depth.get(r, c));
            }
        }
    }
    if cells.is_empty() {
        let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
        let c = ((cx / sx).floor().max(0.0) as usize).min(depth.cols - 1);
        let r = ((cy / sy).floor().max(0.0) as usize).min(depth.rows - 1);
        return Ok(depth.get(r, c));
    }
    Ok(median(&mut cells))
}

fn index_range(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let start = (lo - 1.0).floor().max(0.0) as usize;
    let end = ((hi + 1.0).ceil().max(0.0) as usize).min(n);
    start.min(end)..end
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn pair_score(x: f64, y: f64, d_i: f64, d_j: f64, p: &FilterParams) -> f64 {
    debug_assert!(y > 0.0);
    p.lambda1 * (x / y) + p.lambda2 * (d_i - d_j).abs()
}

/// Scores every unordered pair `i < j` and flags the ones the filter keeps.
///
/// With the filter disabled every pair is retained, but scores are still
/// reported.
pub fn filter_pairs(
    objects: &[DetectedObject],
    depth: &DepthGrid,
    image: &ImageRecord,
    p: &FilterParams,
) -> Result<Vec<PairCandidate>> {
    p.validate()?;
    if objects.len() < 2 {
        return Ok(Vec::new());
    }
    let mut sorted: Vec<&DetectedObject> = objects.iter().collect();
    sorted.sort_by_key(|o| o.node_id);
    if sorted.windows(2).any(|w| w[0].node_id == w[1].node_id) {
        return Err(Error::Invalid("object node ids must be distinct".into()));
    }

    let diag = image.diagonal();
    let centers = sorted
        .iter()
        .map(|o| center_2d(&o.bbox))
        .collect::<Result<Vec<_>>>()?;
    let depths = sorted
        .iter()
        .map(|o| median_depth(depth, &o.bbox))
        .collect::<Result<Vec<_>>>()?;

    let n = sorted.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            let x = (centers[a].0 - centers[b].0).hypot(centers[a].1 - centers[b].1);
            let score = pair_score(x, diag, depths[a], depths[b], p);
            out.push(PairCandidate {
                i: sorted[a].node_id,
                j: sorted[b].node_id,
                center_dist_2d: x,
                diag,
                depth_i: depths[a],
                depth_j: depths[b],
                score,
                retained: !p.enabled || score < p.tau,
            });
        }
    }
    Ok(out)
}
