//! Scalar volumes, label maps and landmark sets on a regular 3D grid.
//!
//! Voxel data is stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Only spacing and origin are kept from the world
//! transform; the grid axes are assumed aligned with the world axes.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Relative tolerance used when comparing voxel spacings of two grids.
const SPACING_RTOL: f64 = 1e-6;

/// Grid geometry shared by images, label maps and displacement fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    /// Millimetres per voxel along x, y, z.
    pub spacing: [f64; 3],
    /// World position (mm) of voxel (0, 0, 0).
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidDims(format!(
                "all dimensions must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "voxel spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of voxels in one z-plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Same voxel lattice: equal dims and spacing (origin is not compared).
    pub fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        let spacing_ok = self
            .spacing
            .iter()
            .zip(other.spacing.iter())
            .all(|(a, b)| (a - b).abs() <= SPACING_RTOL * a.abs().max(b.abs()));
        if self.dims != other.dims || !spacing_ok {
            return Err(Error::GridMismatch(format!(
                "{what}: {:?} @ {:?} mm vs {:?} @ {:?} mm",
                self.dims, self.spacing, other.dims, other.spacing
            )));
        }
        Ok(())
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + v[0] * self.spacing[0],
            self.origin[1] + v[1] * self.spacing[1],
            self.origin[2] + v[2] * self.spacing[2],
        ]
    }

    /// True when a continuous voxel coordinate lies within `[0, n-1]` on every axis.
    pub fn contains_voxel(&self, v: [f64; 3]) -> bool {
        (0..3).all(|a| v[a] >= 0.0 && v[a] <= (self.dims[a] - 1) as f64)
    }

    /// Grid of the next coarser pyramid level: dims halved (rounding up),
    /// spacing doubled, origin kept so that coarse voxel `k` sits at fine
    /// coordinate `2k`.
    pub fn halved(&self) -> Grid {
        Grid {
            dims: self.dims.map(|n| n.div_ceil(2)),
            spacing: self.spacing.map(|s| s * 2.0),
            origin: self.origin,
        }
    }
}

/// Scalar image on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    grid: Grid,
    data: Vec<f32>,
}

impl Volume3 {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidDims(format!(
                "volume data has {} values, grid {:?} needs {}",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "volume value at voxel {:?} is {}",
                grid.coords(i),
                data[i]
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: f32) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> f32 + Sync) -> Result<Self> {
        let data = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        Self::new(grid, data)
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Replaces the grid metadata, keeping the values.
    pub fn with_grid(mut self, grid: Grid) -> Result<Self> {
        if grid.dims != self.grid.dims {
            return Err(Error::InvalidDims(format!(
                "cannot relabel {:?} volume as {:?}",
                self.grid.dims, grid.dims
            )));
        }
        self.grid = grid;
        Ok(self)
    }

    /// `(min, max)` of the voxel values.
    pub fn range(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        ordered_sum_f32(&self.data, self.grid.plane()) / self.data.len() as f64
    }
}

/// Sums per z-plane in parallel and combines the partial sums in plane order,
/// so the result does not depend on the number of worker threads.
pub(crate) fn ordered_sum_f32(data: &[f32], chunk: usize) -> f64 {
    let partial: Vec<f64> = data
        .par_chunks(chunk.max(1))
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>())
        .collect();
    partial.iter().sum()
}

pub(crate) fn ordered_sum_f64(data: &[f64], chunk: usize) -> f64 {
    let partial: Vec<f64> = data
        .par_chunks(chunk.max(1))
        .map(|c| c.iter().sum::<f64>())
        .collect();
    partial.iter().sum()
}

/// Integer label per voxel; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: Grid,
    data: Vec<u32>,
    label_set: Vec<u32>,
}

impl LabelMap {
    pub fn new(grid: Grid, data: Vec<u32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidDims(format!(
                "label data has {} values, grid {:?} needs {}",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        let mut label_set = data.clone();
        label_set.sort_unstable();
        label_set.dedup();
        Ok(Self {
            grid,
            data,
            label_set,
        })
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn data(&self) -> &[u32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Sorted distinct labels present, including 0 when background exists.
    pub fn label_set(&self) -> &[u32] {
        &self.label_set
    }

    /// Non-zero labels present.
    pub fn foreground_labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.label_set.iter().copied().filter(|&l| l != 0)
    }

    /// Voxel-coordinate centroid of each non-zero label, in `label_set` order.
    pub fn centroids(&self) -> Vec<(u32, [f64; 3])> {
        let labels: Vec<u32> = self.foreground_labels().collect();
        let mut sums = vec![[0.0f64; 4]; labels.len()];
        for (i, &l) in self.data.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let k = labels.binary_search(&l).expect("label set is complete");
            let c = self.grid.coords(i);
            sums[k][0] += c[0] as f64;
            sums[k][1] += c[1] as f64;
            sums[k][2] += c[2] as f64;
            sums[k][3] += 1.0;
        }
        labels
            .into_iter()
            .zip(sums)
            .map(|(l, s)| (l, [s[0] / s[3], s[1] / s[3], s[2] / s[3]]))
            .collect()
    }
}

/// Ordered 3D points in world millimetres.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 3]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Fails if any point falls outside the grid's world bounding box.
    pub fn validate_against(&self, grid: &Grid) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !grid.contains_voxel(grid.world_to_voxel(*p)) {
                return Err(Error::InvalidParameter(format!(
                    "landmark {i} at {p:?} mm lies outside the volume"
                )));
            }
        }
        Ok(())
    }

    /// World-space centroids of every foreground label.
    pub fn from_label_centroids(labels: &LabelMap) -> Self {
        let g = labels.grid();
        Self::new(
            labels
                .centroids()
                .into_iter()
                .map(|(_, c)| g.voxel_to_world(c))
                .collect(),
        )
    }
}

/// Halves the resolution by averaging 2x2x2 blocks.
///
/// Odd dimensions round up; the missing last plane is replicated from the
/// edge. Spacing doubles and the origin stays at voxel (0, 0, 0).
pub fn downsample2(vol: &Volume3) -> Result<Volume3> {
    let g = vol.grid();
    if g.dims.iter().any(|&n| n < 2) {
        return Err(Error::InvalidDims(format!(
            "downsampling needs every dimension >= 2, got {:?}",
            g.dims
        )));
    }
    let coarse = g.halved();
    let [cx, cy, _] = coarse.dims;
    let [nx, ny, nz] = g.dims;
    let src = vol.data();
    let mut out = vec![0.0f32; coarse.len()];
    out.par_chunks_mut(cx * cy).enumerate().for_each(|(z, plane)| {
        let zs = [2 * z, (2 * z + 1).min(nz - 1)];
        for y in 0..cy {
            let ys = [2 * y, (2 * y + 1).min(ny - 1)];
            for x in 0..cx {
                let xs = [2 * x, (2 * x + 1).min(nx - 1)];
                let mut acc = 0.0f64;
                for &zz in &zs {
                    for &yy in &ys {
                        let row = nx * (yy + ny * zz);
                        acc += src[row + xs[0]] as f64 + src[row + xs[1]] as f64;
                    }
                }
                plane[x + cx * y] = (acc / 8.0) as f32;
            }
        }
    });
    Volume3::new(coarse, out)
}
