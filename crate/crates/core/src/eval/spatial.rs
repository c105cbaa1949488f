//! Gaussian-kernel rasterization of per-sample errors onto a grid.

use serde::{Deserialize, Serialize};

use crate::data::Point;
use crate::error::{Error, Result};

/// Regular grid description. Cells are addressed row-major with x fastest:
/// `values[iy * nx + ix]`, cell centers at the usual half-offsets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    /// `[xmin, xmax, ymin, ymax]` in meters.
    pub extent: [f64; 4],
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    /// Bounding box of the anchors padded by `pad`, square cells not
    /// required.
    pub fn covering(anchors: &[Point], pad: f64, nx: usize, ny: usize) -> Self {
        let mut xmin = f64::INFINITY;
        let mut xmax = f64::NEG_INFINITY;
        let mut ymin = f64::INFINITY;
        let mut ymax = f64::NEG_INFINITY;
        for a in anchors {
            xmin = xmin.min(a[0]);
            xmax = xmax.max(a[0]);
            ymin = ymin.min(a[1]);
            ymax = ymax.max(a[1]);
        }
        if anchors.is_empty() {
            (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
        }
        GridSpec {
            extent: [xmin - pad, xmax + pad, ymin - pad, ymax + pad],
            nx,
            ny,
        }
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Point {
        let [xmin, xmax, ymin, ymax] = self.extent;
        [
            xmin + (ix as f64 + 0.5) * (xmax - xmin) / self.nx as f64,
            ymin + (iy as f64 + 0.5) * (ymax - ymin) / self.ny as f64,
        ]
    }
}

/// Rasterized field with extent metadata; `values` are row-major with
/// nulls where no sample has any kernel support.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialField {
    pub extent: [f64; 4],
    pub shape: [usize; 2],
    pub sigma: f64,
    pub values: Vec<Option<f64>>,
}

/// Kernel-weighted mean of `deltas` at each cell: the value is
/// `sum(delta_s k_s) / sum(k_s)` with `k_s = exp(-|cell - anchor_s|^2 / (2 sigma^2))`.
/// Cells whose kernel mass underflows to zero are emitted as null.
pub fn spatial_error_field(
    deltas: &[f64],
    anchors: &[Point],
    grid: &GridSpec,
    sigma: f64,
) -> Result<SpatialField> {
    if deltas.len() != anchors.len() {
        return Err(Error::Shape(format!(
            "{} deltas vs {} anchors",
            deltas.len(),
            anchors.len()
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::Config(format!("bandwidth {sigma} must be positive")));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut values = Vec::with_capacity(grid.nx * grid.ny);
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let c = grid.cell_center(ix, iy);
            let mut num = 0.0;
            let mut den = 0.0;
            for (&d, a) in deltas.iter().zip(anchors) {
                let r2 = (c[0] - a[0]).powi(2) + (c[1] - a[1]).powi(2);
                let k = (-r2 * inv).exp();
                num += d * k;
                den += k;
            }
            values.push(if den > 0.0 { Some(num / den) } else { None });
        }
    }
    Ok(SpatialField {
        extent: grid.extent,
        shape: [grid.nx, grid.ny],
        sigma,
        values,
    })
}
