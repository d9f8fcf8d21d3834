//! Spatial transformation of images, label maps and landmarks through a
//! displacement field.
//!
//! A field `u` on the fixed grid maps voxel `p` to `p + u(p)` in the moving
//! image, so `warp(moving, u)(p) = moving(p + u(p))`. Reads outside the
//! volume clamp to the nearest face.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::DispField;
use crate::volume::{Grid, LabelMap, LandmarkSet, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InterpMode {
    #[default]
    Linear,
    Nearest,
}

/// Lower cell index, fractional offset and whether the coordinate was clamped.
#[inline]
fn axis_cell(c: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, true);
    }
    let hi = (n - 1) as f64;
    let clamped = !(0.0..=hi).contains(&c);
    let c = c.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, clamped)
}

/// Trilinear interpolation of `data` at continuous voxel coordinate `p`,
/// clamped to the volume.
#[inline]
pub fn trilinear(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let [nx, ny, _] = dims;
    let (x0, x1, tx, _) = axis_cell(p[0], dims[0]);
    let (y0, y1, ty, _) = axis_cell(p[1], dims[1]);
    let (z0, z1, tz, _) = axis_cell(p[2], dims[2]);
    let v = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)] as f64;
    let (sx, sy, sz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
    sz * (sy * (sx * v(x0, y0, z0) + tx * v(x1, y0, z0))
        + ty * (sx * v(x0, y1, z0) + tx * v(x1, y1, z0)))
        + tz * (sy * (sx * v(x0, y0, z1) + tx * v(x1, y0, z1))
            + ty * (sx * v(x0, y1, z1) + tx * v(x1, y1, z1)))
}

/// Trilinear value and its exact spatial derivative. Axes on which the
/// coordinate was clamped have zero derivative.
#[inline]
pub fn trilinear_with_gradient(data: &[f32], dims: [usize; 3], p: [f64; 3]) -> (f64, [f64; 3]) {
    let [nx, ny, _] = dims;
    let (x0, x1, tx, cx) = axis_cell(p[0], dims[0]);
    let (y0, y1, ty, cy) = axis_cell(p[1], dims[1]);
    let (z0, z1, tz, cz) = axis_cell(p[2], dims[2]);
    let v = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)] as f64;
    let c000 = v(x0, y0, z0);
    let c100 = v(x1, y0, z0);
    let c010 = v(x0, y1, z0);
    let c110 = v(x1, y1, z0);
    let c001 = v(x0, y0, z1);
    let c101 = v(x1, y0, z1);
    let c011 = v(x0, y1, z1);
    let c111 = v(x1, y1, z1);
    let (sx, sy, sz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);

    let value = sz * (sy * (sx * c000 + tx * c100) + ty * (sx * c010 + tx * c110))
        + tz * (sy * (sx * c001 + tx * c101) + ty * (sx * c011 + tx * c111));
    let dx = if cx {
        0.0
    } else {
        sz * (sy * (c100 - c000) + ty * (c110 - c010)) + tz * (sy * (c101 - c001) + ty * (c111 - c011))
    };
    let dy = if cy {
        0.0
    } else {
        sz * (sx * (c010 - c000) + tx * (c110 - c100)) + tz * (sx * (c011 - c001) + tx * (c111 - c101))
    };
    let dz = if cz {
        0.0
    } else {
        sy * (sx * (c001 - c000) + tx * (c101 - c100)) + ty * (sx * (c011 - c010) + tx * (c111 - c110))
    };
    (value, [dx, dy, dz])
}

/// Index of the nearest voxel to `p`, clamped.
#[inline]
pub fn nearest_index(dims: [usize; 3], p: [f64; 3]) -> usize {
    let r = |c: f64, n: usize| c.round().clamp(0.0, (n - 1) as f64) as usize;
    r(p[0], dims[0]) + dims[0] * (r(p[1], dims[1]) + dims[1] * r(p[2], dims[2]))
}

/// Moving-image voxel coordinate that fixed voxel `idx` maps to.
#[inline]
pub(crate) fn mapped_position(grid: &Grid, u: &DispField, idx: usize) -> [f64; 3] {
    let c = grid.coords(idx);
    let d = u.at(idx);
    [
        c[0] as f64 + d[0] as f64,
        c[1] as f64 + d[1] as f64,
        c[2] as f64 + d[2] as f64,
    ]
}

/// Resamples `vol` through `u`: `out(p) = vol(p + u(p))`.
pub fn warp(vol: &Volume3, u: &DispField, mode: InterpMode) -> Result<Volume3> {
    vol.grid().check_same(u.grid(), "warp: image vs field")?;
    let grid = *u.grid();
    let dims = grid.dims;
    let src = vol.data();
    let mut out = vec![0.0f32; grid.len()];
    out.par_chunks_mut(grid.plane())
        .enumerate()
        .for_each(|(z, plane)| {
            let base = z * grid.plane();
            for (k, o) in plane.iter_mut().enumerate() {
                let p = mapped_position(&grid, u, base + k);
                *o = match mode {
                    InterpMode::Linear => trilinear(src, dims, p) as f32,
                    InterpMode::Nearest => src[nearest_index(dims, p)],
                };
            }
        });
    Volume3::new(grid, out)
}

/// Nearest-neighbour resampling of a label map; never introduces new labels.
pub fn warp_labels(labels: &LabelMap, u: &DispField) -> Result<LabelMap> {
    labels.grid().check_same(u.grid(), "warp_labels: labels vs field")?;
    let grid = *u.grid();
    let src = labels.data();
    let mut out = vec![0u32; grid.len()];
    out.par_chunks_mut(grid.plane())
        .enumerate()
        .for_each(|(z, plane)| {
            let base = z * grid.plane();
            for (k, o) in plane.iter_mut().enumerate() {
                *o = src[nearest_index(grid.dims, mapped_position(&grid, u, base + k))];
            }
        });
    LabelMap::new(grid, out)
}

/// Landmarks after mapping through a field; `None` marks points that were
/// outside the field's grid and could not be transformed.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedPoints {
    pub points: Vec<Option<[f64; 3]>>,
}

impl MappedPoints {
    pub fn outside_count(&self) -> usize {
        self.points.iter().filter(|p| p.is_none()).count()
    }
}

/// Maps world-space points on the fixed grid into the moving image:
/// `p' = p + spacing * u(voxel(p))`, with `u` trilinearly interpolated.
pub fn transform_points(points: &LandmarkSet, u: &DispField) -> MappedPoints {
    let grid = u.grid();
    let mapped = points
        .points
        .iter()
        .map(|&p| {
            let v = grid.world_to_voxel(p);
            if !grid.contains_voxel(v) {
                return None;
            }
            let mut out = p;
            for (k, o) in out.iter_mut().enumerate() {
                *o += grid.spacing[k] * trilinear(u.component(k), grid.dims, v);
            }
            Some(out)
        })
        .collect::<Vec<_>>();
    let outside = mapped.iter().filter(|p| p.is_none()).count();
    if outside > 0 {
        log::warn!("{outside} landmark(s) outside the field grid were not transformed");
    }
    MappedPoints { points: mapped }
}

/// Fails unless every point lies inside the grid.
pub fn transform_points_strict(points: &LandmarkSet, u: &DispField) -> Result<LandmarkSet> {
    points.validate_against(u.grid())?;
    let mapped = transform_points(points, u);
    mapped
        .points
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .map(LandmarkSet::new)
        .ok_or_else(|| Error::InvalidParameter("landmark outside grid".into()))
}
