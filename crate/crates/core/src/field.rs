//! Dense displacement fields and their algebra.
//!
//! Components are stored planar (`ux`, `uy`, `uz`), each x-fastest like
//! [`Volume3`], in voxel units of the grid the field lives on.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sampler::trilinear;
use crate::volume::{ordered_sum_f64, Grid, Volume3};

#[derive(Debug, Clone, PartialEq)]
pub struct DispField {
    grid: Grid,
    comps: [Vec<f32>; 3],
}

impl DispField {
    pub fn from_components(grid: Grid, comps: [Vec<f32>; 3]) -> Result<Self> {
        for (k, c) in comps.iter().enumerate() {
            if c.len() != grid.len() {
                return Err(Error::InvalidDims(format!(
                    "field component {k} has {} values, grid {:?} needs {}",
                    c.len(),
                    grid.dims,
                    grid.len()
                )));
            }
            if let Some(i) = c.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "field component {k} at voxel {:?} is {}",
                    grid.coords(i),
                    c[i]
                )));
            }
        }
        Ok(Self { grid, comps })
    }

    /// The zero field.
    pub fn identity(grid: Grid) -> Self {
        Self::constant(grid, [0.0; 3])
    }

    pub fn constant(grid: Grid, value: [f32; 3]) -> Self {
        let n = grid.len();
        Self {
            grid,
            comps: value.map(|v| vec![v; n]),
        }
    }

    /// Builds a field by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> [f32; 3] + Sync) -> Result<Self> {
        let vals: Vec<[f32; 3]> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        let comps = [0, 1, 2].map(|k| vals.iter().map(|v| v[k]).collect());
        Self::from_components(grid, comps)
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
    pub fn components(&self) -> &[Vec<f32>; 3] {
        &self.comps
    }

    #[inline]
    pub fn component(&self, k: usize) -> &[f32] {
        &self.comps[k]
    }

    pub(crate) fn components_mut(&mut self) -> &mut [Vec<f32>; 3] {
        &mut self.comps
    }

    pub fn into_components(self) -> [Vec<f32>; 3] {
        self.comps
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [f32; 3] {
        [self.comps[0][idx], self.comps[1][idx], self.comps[2][idx]]
    }

    /// Replaces the grid metadata (dims must agree).
    pub fn with_grid(mut self, grid: Grid) -> Result<Self> {
        if grid.dims != self.grid.dims {
            return Err(Error::InvalidDims(format!(
                "cannot relabel {:?} field as {:?}",
                self.grid.dims, grid.dims
            )));
        }
        self.grid = grid;
        Ok(self)
    }

    /// Adds a constant displacement to every voxel.
    pub fn translated(&self, t: [f32; 3]) -> Self {
        let mut out = self.clone();
        for (c, &d) in out.comps.iter_mut().zip(t.iter()) {
            c.iter_mut().for_each(|v| *v += d);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    /// Euclidean displacement magnitude per voxel, in voxels.
    pub fn magnitudes(&self) -> Vec<f64> {
        (0..self.grid.len())
            .into_par_iter()
            .map(|i| {
                let d = self.at(i);
                (d[0] as f64).hypot(d[1] as f64).hypot(d[2] as f64)
            })
            .collect()
    }

    /// Mean displacement magnitude in voxels.
    pub fn mean_magnitude(&self) -> f64 {
        ordered_sum_f64(&self.magnitudes(), self.grid.plane()) / self.grid.len() as f64
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitudes().into_iter().fold(0.0, f64::max)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        crate::nifti::load_field(path)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::nifti::save_field(self, path)
    }
}

/// Field whose warp equals warping by `u` first and then by `v`:
/// `w(p) = v(p) + u(p + v(p))`, sampling `u` trilinearly with edge clamping.
///
/// In point terms a fixed voxel first moves by `v`, then by `u`.
pub fn compose(u: &DispField, v: &DispField) -> Result<DispField> {
    u.grid().check_same(v.grid(), "compose")?;
    let grid = *v.grid();
    let dims = grid.dims;
    let n = grid.len();
    let vals: Vec<[f32; 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let c = grid.coords(i);
            let d = v.at(i);
            let q = [
                c[0] as f64 + d[0] as f64,
                c[1] as f64 + d[1] as f64,
                c[2] as f64 + d[2] as f64,
            ];
            [0, 1, 2].map(|k| (d[k] as f64 + trilinear(u.component(k), dims, q)) as f32)
        })
        .collect();
    let comps = [0, 1, 2].map(|k| vals.iter().map(|w| w[k]).collect());
    DispField::from_components(grid, comps)
}

/// Doubles the resolution of a field onto `target_dims`.
///
/// Fine voxel `i` samples the coarse field at coordinate `i / 2` (clamped),
/// and displacements are scaled by 2 to stay in voxel units. Each target
/// dimension must be `2n` or `2n - 1`.
pub fn upsample2(u: &DispField, target_dims: [usize; 3]) -> Result<DispField> {
    let src = u.grid();
    for a in 0..3 {
        let n = src.dims[a];
        let t = target_dims[a];
        if t != 2 * n && t + 1 != 2 * n {
            return Err(Error::InvalidDims(format!(
                "cannot upsample {:?} to {:?}: each target dim must be 2n or 2n-1",
                src.dims, target_dims
            )));
        }
    }
    let grid = Grid::new(target_dims, src.spacing.map(|s| s / 2.0), src.origin)?;
    let vals: Vec<[f32; 3]> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let c = grid.coords(i);
            let q = c.map(|x| x as f64 / 2.0);
            [0, 1, 2].map(|k| (2.0 * trilinear(u.component(k), src.dims, q)) as f32)
        })
        .collect();
    let comps = [0, 1, 2].map(|k| vals.iter().map(|w| w[k]).collect());
    DispField::from_components(grid, comps)
}

/// Derivative of component `k` along `axis` at voxel `c`: central difference
/// in the interior, one-sided at the faces.
#[inline]
fn diff_along(comp: &[f32], grid: &Grid, c: [usize; 3], axis: usize) -> f64 {
    let n = grid.dims[axis];
    let mut lo = c;
    let mut hi = c;
    let span = if c[axis] == 0 {
        hi[axis] = 1;
        1.0
    } else if c[axis] == n - 1 {
        lo[axis] = n - 2;
        1.0
    } else {
        lo[axis] -= 1;
        hi[axis] += 1;
        2.0
    };
    let f = |p: [usize; 3]| comp[grid.index(p[0], p[1], p[2])] as f64;
    (f(hi) - f(lo)) / span
}

#[inline]
pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Per-voxel `det(I + grad u)` in double precision.
pub fn jacobian_determinants(u: &DispField) -> Result<Vec<f64>> {
    let g = *u.grid();
    if g.dims.iter().any(|&n| n < 3) {
        return Err(Error::InvalidDims(format!(
            "Jacobian needs every dimension >= 3, got {:?}",
            g.dims
        )));
    }
    Ok((0..g.len())
        .into_par_iter()
        .map(|i| {
            let c = g.coords(i);
            let mut m = [[0.0f64; 3]; 3];
            for (k, row) in m.iter_mut().enumerate() {
                for (a, e) in row.iter_mut().enumerate() {
                    *e = f64::from(u8::from(k == a)) + diff_along(u.component(k), &g, c, a);
                }
            }
            det3(&m)
        })
        .collect())
}

/// Per-voxel Jacobian determinant as a volume on the field's grid.
pub fn jacobian_det(u: &DispField) -> Result<Volume3> {
    let dets = jacobian_determinants(u)?;
    Volume3::new(*u.grid(), dets.into_iter().map(|d| d as f32).collect())
}

/// Non-diffeomorphic volume, in percent of the grid's cells.
///
/// Every unit cell gets eight Jacobian estimates, one per corner, built
/// from the three cell edges that meet at that corner. The cell's folded
/// volume is the mean of the negative parts of those eight determinants,
/// each capped at one so that no cell counts as more than fully folded.
pub fn ndv(u: &DispField) -> Result<f64> {
    let g = *u.grid();
    if g.dims.iter().any(|&n| n < 2) {
        return Err(Error::InvalidDims(format!(
            "NDV needs every dimension >= 2, got {:?}",
            g.dims
        )));
    }
    let [nx, ny, nz] = g.dims;
    let cells = ((nx - 1) * (ny - 1) * (nz - 1)) as f64;
    let per_slab: Vec<f64> = (0..nz - 1)
        .into_par_iter()
        .map(|z| {
            let mut acc = 0.0;
            for y in 0..ny - 1 {
                for x in 0..nx - 1 {
                    acc += cell_folded_volume(u, &g, [x, y, z]);
                }
            }
            acc
        })
        .collect();
    let total: f64 = per_slab.iter().sum();
    Ok(100.0 * total / cells)
}

/// Corner-wise forward-difference determinants of one cell.
pub(crate) fn cell_corner_determinants(u: &DispField, g: &Grid, base: [usize; 3]) -> [f64; 8] {
    let disp = |o: [usize; 3]| -> [f64; 3] {
        let d = u.at(g.index(base[0] + o[0], base[1] + o[1], base[2] + o[2]));
        [d[0] as f64, d[1] as f64, d[2] as f64]
    };
    let mut out = [0.0f64; 8];
    for (corner, det) in out.iter_mut().enumerate() {
        let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut m = [[0.0f64; 3]; 3];
        for a in 0..3 {
            let mut hi = bits;
            let mut lo = bits;
            hi[a] = 1;
            lo[a] = 0;
            let (dh, dl) = (disp(hi), disp(lo));
            for k in 0..3 {
                m[k][a] = f64::from(u8::from(k == a)) + dh[k] - dl[k];
            }
        }
        *det = det3(&m);
    }
    out
}

fn cell_folded_volume(u: &DispField, g: &Grid, base: [usize; 3]) -> f64 {
    cell_corner_determinants(u, g, base)
        .iter()
        .map(|&d| (-d).clamp(0.0, 1.0))
        .sum::<f64>()
        / 8.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{warp, InterpMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_random(grid: Grid, amp: f64, seed: u64) -> DispField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coef: Vec<[f64; 4]> = (0..3)
            .map(|_| [rng.gen(), rng.gen(), rng.gen(), rng.gen::<f64>() * 6.0])
            .collect();
        DispField::from_fn(grid, |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            [0, 1, 2].map(|k| {
                let c = coef[k];
                (amp * (0.4 * c[0] * p[0] + 0.3 * c[1] * p[1] + 0.5 * c[2] * p[2] + c[3]).sin()) as f32
            })
        })
        .unwrap()
    }

    #[test]
    fn compose_with_identity_is_exact() {
        let g = Grid::unit([7, 6, 5]).unwrap();
        let u = smooth_random(g, 1.3, 1);
        let id = DispField::identity(g);
        assert_eq!(compose(&u, &id).unwrap(), u);
        assert_eq!(compose(&id, &u).unwrap(), u);
    }

    #[test]
    fn translations_add() {
        let g = Grid::unit([8, 8, 8]).unwrap();
        let a = DispField::constant(g, [1.0, -2.0, 0.5]);
        let b = DispField::constant(g, [0.25, 1.0, 2.0]);
        let w = compose(&a, &b).unwrap();
        assert_eq!(w, DispField::constant(g, [1.25, -1.0, 2.5]));
    }

    #[test]
    fn compose_matches_double_warp_on_linear_image() {
        let g = Grid::unit([8, 8, 8]).unwrap();
        let img = Volume3::from_fn(g, |x, _, _| x as f32).unwrap();
        for seed in 0..5 {
            let u = smooth_random(g, 0.5, 10 + seed);
            let v = smooth_random(g, 0.5, 20 + seed);
            let twice = warp(&warp(&img, &u, InterpMode::Linear).unwrap(), &v, InterpMode::Linear).unwrap();
            let once = warp(&img, &compose(&u, &v).unwrap(), InterpMode::Linear).unwrap();
            // Interior voxels whose lookups never touch the faces.
            for z in 2..6 {
                for y in 2..6 {
                    for x in 2..6 {
                        let d = (twice.at(x, y, z) - once.at(x, y, z)).abs();
                        assert!(d <= 1e-5, "seed {seed} ({x},{y},{z}): {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn compose_grid_mismatch() {
        let a = DispField::identity(Grid::unit([4, 4, 4]).unwrap());
        let b = DispField::identity(Grid::unit([4, 4, 5]).unwrap());
        assert!(matches!(compose(&a, &b), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn upsample_constant_and_identity() {
        let g = Grid::new([3, 4, 5], [2.0; 3], [0.0; 3]).unwrap();
        let c = DispField::constant(g, [0.5, -1.0, 0.25]);
        let up = upsample2(&c, [6, 7, 10]).unwrap();
        assert_eq!(up.dims(), [6, 7, 10]);
        assert_eq!(up.grid().spacing, [1.0; 3]);
        assert!(up.component(0).iter().all(|&v| v == 1.0));
        assert!(up.component(1).iter().all(|&v| v == -2.0));
        assert!(up.component(2).iter().all(|&v| v == 0.5));
        let id = upsample2(&DispField::identity(g), [6, 8, 9]).unwrap();
        assert_eq!(id, DispField::identity(*id.grid()));
    }

    #[test]
    fn upsample_linear_field() {
        let g = Grid::unit([4, 4, 4]).unwrap();
        let u = DispField::from_fn(g, |x, _, _| [0.25 * x as f32, 0.0, 0.0]).unwrap();
        let up = upsample2(&u, [8, 8, 8]).unwrap();
        let fg = *up.grid();
        // Interior: coarse coordinate x/2 stays within [0, 3].
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..7 {
                    let v = up.component(0)[fg.index(x, y, z)];
                    assert!((v as f64 - 0.25 * x as f64).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn upsample_rejects_incompatible_target() {
        let u = DispField::identity(Grid::unit([4, 4, 4]).unwrap());
        assert!(upsample2(&u, [8, 8, 9]).is_err());
        assert!(upsample2(&u, [6, 8, 8]).is_err());
    }

    #[test]
    fn jacobian_identity_and_dilation() {
        let g = Grid::unit([5, 5, 5]).unwrap();
        let id = jacobian_det(&DispField::identity(g)).unwrap();
        assert!(id.data().iter().all(|&d| d == 1.0));
        let dil = DispField::from_fn(g, |x, y, z| [0.1 * x as f32, 0.1 * y as f32, 0.1 * z as f32]).unwrap();
        let d = jacobian_determinants(&dil).unwrap();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    assert!((d[g.index(x, y, z)] - 1.331).abs() < 1e-6);
                }
            }
        }
        assert!(jacobian_det(&DispField::identity(Grid::unit([2, 5, 5]).unwrap())).is_err());
    }

    #[test]
    fn jacobian_matches_leibniz_oracle() {
        let g = Grid::unit([6, 6, 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let comps = [0, 1, 2].map(|_| (0..g.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect());
        let u = DispField::from_components(g, comps).unwrap();
        let got = jacobian_determinants(&u).unwrap();
        let val = |k: usize, p: [i64; 3]| u.component(k)[g.index(p[0] as usize, p[1] as usize, p[2] as usize)] as f64;
        for i in 0..g.len() {
            let c = g.coords(i).map(|v| v as i64);
            let mut m = [[0.0f64; 3]; 3];
            for k in 0..3 {
                for a in 0..3 {
                    let (mut lo, mut hi) = (c, c);
                    let mut span = 2.0;
                    if c[a] == 0 {
                        hi[a] += 1;
                        span = 1.0;
                    } else if c[a] == 5 {
                        lo[a] -= 1;
                        span = 1.0;
                    } else {
                        lo[a] -= 1;
                        hi[a] += 1;
                    }
                    m[k][a] = if k == a { 1.0 } else { 0.0 } + (val(k, hi) - val(k, lo)) / span;
                }
            }
            // Leibniz expansion over the six permutations.
            let perms = [([0, 1, 2], 1.0), ([1, 2, 0], 1.0), ([2, 0, 1], 1.0), ([0, 2, 1], -1.0), ([2, 1, 0], -1.0), ([1, 0, 2], -1.0)];
            let det: f64 = perms
                .iter()
                .map(|(p, s)| s * m[0][p[0]] * m[1][p[1]] * m[2][p[2]])
                .sum();
            assert!((got[i] - det).abs() <= 1e-10, "voxel {i}: {} vs {det}", got[i]);
        }
    }

    #[test]
    fn affine_jacobian_interior() {
        let g = Grid::unit([6, 6, 6]).unwrap();
        let a = [[0.1, -0.2, 0.05], [0.0, 0.3, 0.1], [-0.15, 0.02, -0.1]];
        let u = DispField::from_fn(g, |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            [0, 1, 2].map(|k| (a[k][0] * p[0] + a[k][1] * p[1] + a[k][2] * p[2]) as f32)
        })
        .unwrap();
        let mut m = a;
        for (k, row) in m.iter_mut().enumerate() {
            row[k] += 1.0;
        }
        let expect = det3(&m);
        let d = jacobian_determinants(&u).unwrap();
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    assert!((d[g.index(x, y, z)] - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn ndv_identity_is_zero() {
        let g = Grid::unit([6, 5, 4]).unwrap();
        let v = ndv(&DispField::identity(g)).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(format!("{v:.4}"), "0.0000");
    }

    #[test]
    fn plane_swap_fold_is_detected() {
        let g = Grid::unit([8, 8, 8]).unwrap();
        let u = DispField::from_fn(g, |x, _, _| match x {
            3 => [1.0, 0.0, 0.0],
            4 => [-1.0, 0.0, 0.0],
            _ => [0.0; 3],
        })
        .unwrap();
        // Oracle: cells spanning planes 3..4 have x-edge phi(4) - phi(3) = -1,
        // so each of their 8 corners with that edge has det -1.
        let mut negative = 0usize;
        for z in 0..7 {
            for y in 0..7 {
                for x in 0..7 {
                    negative += cell_corner_determinants(&u, &g, [x, y, z]).iter().filter(|&&d| d < 0.0).count();
                }
            }
        }
        assert!(negative > 0);
        let v = ndv(&u).unwrap();
        assert!(v > 0.0);
        // 49 folded cells, each with all eight corners at det = -1.
        assert!((v - 100.0 * 49.0 / 343.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_small_field_has_no_folds() {
        let g = Grid::unit([10, 9, 8]).unwrap();
        let u = smooth_random(g, 0.2, 5);
        for z in 0..7 {
            for y in 0..8 {
                for x in 0..9 {
                    assert!(cell_corner_determinants(&u, &g, [x, y, z]).iter().all(|&d| d > 0.0));
                }
            }
        }
        assert_eq!(ndv(&u).unwrap(), 0.0);
    }

    #[test]
    fn ndv_rejects_thin_grid() {
        assert!(ndv(&DispField::identity(Grid::unit([1, 4, 4]).unwrap())).is_err());
    }

    proptest::proptest! {
        #[test]
        fn ndv_nonnegative_and_translation_invariant(seed in 0u64..500, t in proptest::array::uniform3(-3i32..3)) {
            // Dyadic values keep u + t exact in f32.
            let g = Grid::unit([5, 4, 6]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let comps = [0, 1, 2].map(|_| (0..g.len()).map(|_| rng.gen_range(-96i32..96) as f32 / 64.0).collect());
            let u = DispField::from_components(g, comps).unwrap();
            let a = ndv(&u).unwrap();
            let b = ndv(&u.translated(t.map(|v| v as f32))).unwrap();
            proptest::prop_assert!(a >= 0.0);
            proptest::prop_assert_eq!(a, b);
        }
    }
}
