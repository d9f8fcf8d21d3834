//! Joint (image-guided) bilateral filtering of displacement fields.
//!
//! Each component is replaced by a weighted average over a cubic
//! neighbourhood. Weights combine spatial proximity with similarity of the
//! guide image, so smoothing does not cross intensity edges of the guide:
//!
//! ```text
//! w(x, y) = exp(-|x - y|^2 / 2 s_s^2) * exp(-(g(x) - g(y))^2 / 2 s_r^2)
//! ```
//!
//! Neighbour indices are clamped at the volume faces.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::DispField;
use crate::volume::Volume3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BFParams {
    /// Spatial standard deviation, voxels.
    pub sigma_spatial: f64,
    /// Range standard deviation, guide intensity units.
    pub sigma_range: f64,
    /// Half-width of the cubic window, voxels.
    pub radius: usize,
}

impl BFParams {
    /// Radius defaults to `ceil(3 * sigma_spatial)`.
    pub fn new(sigma_spatial: f64, sigma_range: f64) -> Result<Self> {
        let p = Self {
            sigma_spatial,
            sigma_range,
            radius: (3.0 * sigma_spatial).ceil().max(1.0) as usize,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_radius(mut self, radius: usize) -> Result<Self> {
        self.radius = radius;
        self.validate()?;
        Ok(self)
    }

    /// Range sigma set to `rel` times the guide's intensity range.
    pub fn relative_to_guide(sigma_spatial: f64, rel: f64, guide: &Volume3) -> Result<Self> {
        let (lo, hi) = guide.range();
        let span = (hi - lo) as f64;
        let sigma_range = if span > 0.0 { rel * span } else { 1.0 };
        Self::new(sigma_spatial, sigma_range)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| s.is_finite() && s > 0.0;
        if !ok(self.sigma_spatial) || !ok(self.sigma_range) {
            return Err(Error::InvalidParameter(format!(
                "bilateral sigmas must be positive, got spatial {} and range {}",
                self.sigma_spatial, self.sigma_range
            )));
        }
        if self.radius == 0 {
            return Err(Error::InvalidParameter("bilateral radius must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn bilateral_filter(u: &DispField, guide: &Volume3, p: &BFParams) -> Result<DispField> {
    p.validate()?;
    u.grid().check_same(guide.grid(), "bilateral: field vs guide")?;
    let g = *u.grid();
    let [nx, ny, nz] = g.dims;
    let r = p.radius as i64;
    let side = 2 * p.radius + 1;

    let inv_s = 1.0 / (2.0 * p.sigma_spatial * p.sigma_spatial);
    let inv_r = 1.0 / (2.0 * p.sigma_range * p.sigma_range);
    let mut spatial = Vec::with_capacity(side * side * side);
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                spatial.push((-((dx * dx + dy * dy + dz * dz) as f64) * inv_s).exp());
            }
        }
    }

    let clamp = |c: usize, d: i64, n: usize| (c as i64 + d).clamp(0, n as i64 - 1) as usize;
    let gd = guide.data();
    let comps = u.components();

    let vals: Vec<[f32; 3]> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = g.coords(i);
            let center = gd[i] as f64;
            let mut wsum = 0.0f64;
            let mut acc = [0.0f64; 3];
            let mut t = 0;
            for dz in -r..=r {
                let zz = clamp(z, dz, nz);
                for dy in -r..=r {
                    let row = nx * (clamp(y, dy, ny) + ny * zz);
                    for dx in -r..=r {
                        let j = row + clamp(x, dx, nx);
                        let diff = gd[j] as f64 - center;
                        let w = spatial[t] * (-diff * diff * inv_r).exp();
                        t += 1;
                        wsum += w;
                        for k in 0..3 {
                            acc[k] += w * comps[k][j] as f64;
                        }
                    }
                }
            }
            // The centre tap has weight 1, so wsum >= 1.
            acc.map(|a| (a / wsum) as f32)
        })
        .collect();
    let out = [0, 1, 2].map(|k| vals.iter().map(|v| v[k]).collect());
    DispField::from_components(g, out)
}
