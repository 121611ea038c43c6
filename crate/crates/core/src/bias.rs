//! Scale-aware linear attention biases over patch grids.
//!
//! Every token sits at the physical center of its patch, so a grid's GSD is
//! already folded into the coordinates. A bias entry is the negated Euclidean
//! distance between two centers times the head slope. Cross-grid biases work
//! the same way as long as both grids cover the same ground footprint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FOOTPRINT_TOL: f64 = 1e-9;

/// Geometry of a tokenized image. Tokens are ordered row-major, `r * cols + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_px: usize,
    /// Ground distance per pixel.
    pub gsd: f64,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch_px: usize, gsd: f64) -> Result<Self> {
        if rows == 0 || cols == 0 || patch_px == 0 {
            return Err(Error::contract(format!(
                "patch grid extents must be positive: {rows}x{cols}, patch {patch_px}"
            )));
        }
        if !(gsd > 0.0 && gsd.is_finite()) {
            return Err(Error::contract(format!("gsd must be positive, got {gsd}")));
        }
        Ok(Self {
            rows,
            cols,
            patch_px,
            gsd,
        })
    }

    /// Grid for a square image of `image_px` pixels per side.
    pub fn square(image_px: usize, patch_px: usize, gsd: f64) -> Result<Self> {
        if patch_px == 0 || !image_px.is_multiple_of(patch_px) {
            return Err(Error::Shape(format!(
                "image size {image_px} is not divisible by patch size {patch_px}"
            )));
        }
        Self::new(image_px / patch_px, image_px / patch_px, patch_px, gsd)
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    /// Physical (width, height) covered by the grid.
    pub fn footprint(&self) -> (f64, f64) {
        let span = self.patch_px as f64 * self.gsd;
        (self.cols as f64 * span, self.rows as f64 * span)
    }

    /// Physical side length of one patch.
    pub fn patch_span(&self) -> f64 {
        self.patch_px as f64 * self.gsd
    }
}

/// Per-head ALiBi slopes, `2^(-8(h+1)/H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeSchedule {
    slopes: Vec<f64>,
}

impl SlopeSchedule {
    pub fn new(heads: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::contract("slope schedule needs at least one head"));
        }
        let h = heads as f64;
        let slopes = (0..heads)
            .map(|i| (-8.0 * (i as f64 + 1.0) / h).exp2())
            .collect();
        Ok(Self { slopes })
    }

    /// Explicit slopes, one per head; each must be positive and finite.
    pub fn from_slopes(slopes: Vec<f64>) -> Result<Self> {
        if slopes.is_empty() {
            return Err(Error::contract("slope schedule needs at least one head"));
        }
        if let Some(bad) = slopes.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(Error::contract(format!(
                "slopes must be positive, got {bad}"
            )));
        }
        Ok(Self { slopes })
    }

    pub fn heads(&self) -> usize {
        self.slopes.len()
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }
}

/// Dense `heads × q_len × k_len` additive bias, entries `<= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasTensor {
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    data: Vec<f64>,
}

impl BiasTensor {
    /// All-zero bias (plain attention).
    pub fn zeros(heads: usize, q_len: usize, k_len: usize) -> Self {
        Self {
            heads,
            q_len,
            k_len,
            data: vec![0.0; heads * q_len * k_len],
        }
    }

    pub fn from_data(heads: usize, q_len: usize, k_len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != heads * q_len * k_len {
            return Err(Error::Dimension {
                op: "bias",
                lhs: vec![heads, q_len, k_len],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            heads,
            q_len,
            k_len,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.heads, self.q_len, self.k_len]
    }

    pub fn get(&self, h: usize, i: usize, j: usize) -> f64 {
        self.data[(h * self.q_len + i) * self.k_len + j]
    }

    /// Row-major `q_len × k_len` matrix for one head.
    pub fn head(&self, h: usize) -> &[f64] {
        let n = self.q_len * self.k_len;
        &self.data[h * n..(h + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Physical center of every patch in row-major token order.
pub fn patch_centers(grid: &PatchGrid) -> Vec<(f64, f64)> {
    let span = grid.patch_span();
    let mut out = Vec::with_capacity(grid.tokens());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            out.push(((c as f64 + 0.5) * span, (r as f64 + 0.5) * span));
        }
    }
    out
}

/// Centers in units of `unit_gsd`-sized pixels.
fn centers_in(grid: &PatchGrid, unit_gsd: f64) -> Vec<(f64, f64)> {
    let ratio = grid.gsd / unit_gsd;
    let span = grid.patch_px as f64;
    let mut out = Vec::with_capacity(grid.tokens());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            out.push((
                (c as f64 + 0.5) * span * ratio,
                (r as f64 + 0.5) * span * ratio,
            ));
        }
    }
    out
}

/// Entry `(h, i, j) = -((slope_h * pixel_distance(i, j)) * gsd)`.
///
/// Distances are taken in the query grid's pixel units and multiplied by its
/// GSD last, so rescaling the GSD rescales every entry through one product.
fn build(query_grid: &PatchGrid, key_grid: &PatchGrid, slopes: &SlopeSchedule) -> BiasTensor {
    let gsd = query_grid.gsd;
    let queries = centers_in(query_grid, gsd);
    let keys = centers_in(key_grid, gsd);
    let mut dist = Vec::with_capacity(queries.len() * keys.len());
    for &(qx, qy) in &queries {
        for &(kx, ky) in &keys {
            dist.push((qx - kx).hypot(qy - ky));
        }
    }
    let mut data = Vec::with_capacity(slopes.heads() * dist.len());
    for &m in slopes.slopes() {
        data.extend(dist.iter().map(|d| 0.0 - (m * d) * gsd));
    }
    BiasTensor {
        heads: slopes.heads(),
        q_len: queries.len(),
        k_len: keys.len(),
        data,
    }
}

/// Bias for self-attention within one grid.
pub fn self_bias(grid: &PatchGrid, slopes: &SlopeSchedule) -> BiasTensor {
    build(grid, grid, slopes)
}

/// Bias for queries on `query_grid` attending to keys on `key_grid`.
///
/// Both grids must cover the same physical footprint.
pub fn cross_bias(
    query_grid: &PatchGrid,
    key_grid: &PatchGrid,
    slopes: &SlopeSchedule,
) -> Result<BiasTensor> {
    check_footprint(query_grid, key_grid)?;
    Ok(build(query_grid, key_grid, slopes))
}

pub fn check_footprint(a: &PatchGrid, b: &PatchGrid) -> Result<()> {
    let (aw, ah) = a.footprint();
    let (bw, bh) = b.footprint();
    if (aw - bw).abs() > FOOTPRINT_TOL || (ah - bh).abs() > FOOTPRINT_TOL {
        return Err(Error::Geometry {
            query_w: aw,
            query_h: ah,
            key_w: bw,
            key_h: bh,
        });
    }
    Ok(())
}

/// Writes one matrix per head as CSV, each preceded by `# head=h slope=s`.
pub fn write_csv(
    bias: &BiasTensor,
    slopes: &SlopeSchedule,
    out: &mut impl std::io::Write,
) -> std::io::Result<()> {
    for h in 0..bias.heads {
        writeln!(out, "# head={h} slope={}", slopes.slopes()[h])?;
        for row in bias.head(h).chunks(bias.k_len) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
    }
    Ok(())
}
