//! Registration objective: negative windowed normalized cross-correlation
//! plus a squared-gradient smoothness penalty on the displacement field,
//!
//! ```text
//! total = lambda_ncc * (-ncc) + lambda_reg * reg
//! ```
//!
//! with analytic gradients with respect to every displacement component.
//!
//! The local NCC is the mean, over all voxels, of the correlation
//! coefficient computed in a cubic window centred on the voxel. Window
//! indices that leave the volume are clamped to the nearest face, so each
//! window always holds `w^3` samples (edge samples repeated). A window whose
//! intensity variance in either image is below [`NCC_EPS`] contributes 0.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::DispField;
use crate::sampler::{trilinear, trilinear_with_gradient};
use crate::volume::{ordered_sum_f64, Grid, Volume3};

/// Variance floor below which a window is treated as flat.
pub const NCC_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NccMode {
    /// Mean of per-window correlation coefficients.
    #[default]
    Local,
    /// One correlation coefficient over the whole volume.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub lambda_ncc: f64,
    pub lambda_reg: f64,
    /// Odd window edge length for [`NccMode::Local`].
    pub window: usize,
    pub mode: NccMode,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            lambda_ncc: 1.0,
            lambda_reg: 6.0,
            window: 9,
            mode: NccMode::Local,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ncc.is_finite() && self.lambda_ncc >= 0.0)
            || !(self.lambda_reg.is_finite() && self.lambda_reg >= 0.0)
        {
            return Err(Error::InvalidParameter(format!(
                "loss weights must be finite and non-negative, got {} and {}",
                self.lambda_ncc, self.lambda_reg
            )));
        }
        if self.mode == NccMode::Local {
            check_window(self.window)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub ncc: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda_ncc: f64,
    pub lambda_reg: f64,
}

impl LossReport {
    fn new(ncc: f64, reg: f64, p: &LossParams) -> Self {
        Self {
            ncc,
            reg,
            total: p.lambda_ncc * -ncc + p.lambda_reg * reg,
            lambda_ncc: p.lambda_ncc,
            lambda_reg: p.lambda_reg,
        }
    }
}

/// Gradient of the total loss with respect to each displacement component.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub grid: Grid,
    pub comps: [Vec<f64>; 3],
}

fn check_window(window: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "NCC window must be odd and >= 3, got {window}"
        )));
    }
    Ok(())
}

/// One clamped box-sum pass along `axis`, or its adjoint.
///
/// Forward: `out[j] = sum_{d=-r..r} src[clamp(j + d)]`.
/// Adjoint: `out[j] = sum_x #{d : clamp(x + d) = j} * src[x]`.
fn axis_pass(src: &[f64], out: &mut [f64], dims: [usize; 3], axis: usize, r: usize, adjoint: bool) {
    let [nx, ny, _] = dims;
    let plane = nx * ny;
    let stride = [1, nx, plane][axis];
    let n = dims[axis];
    out.par_chunks_mut(plane).enumerate().for_each(|(z, pl)| {
        for (k, o) in pl.iter_mut().enumerate() {
            let idx = z * plane + k;
            let c = match axis {
                0 => k % nx,
                1 => k / nx,
                _ => z,
            };
            let base = idx - c * stride;
            let at = |x: usize| src[base + x * stride];
            let mut s = 0.0;
            if !adjoint {
                for d in 0..=2 * r {
                    let x = (c + d).saturating_sub(r).min(n - 1);
                    s += at(x);
                }
            } else {
                for x in c.saturating_sub(r)..=(c + r).min(n - 1) {
                    s += at(x);
                }
                if c == 0 {
                    for x in 0..=r.min(n - 1) {
                        s += (r - x) as f64 * at(x);
                    }
                }
                if c == n - 1 {
                    for x in (n - 1).saturating_sub(r)..n {
                        s += (r - (n - 1 - x)) as f64 * at(x);
                    }
                }
            }
            *o = s;
        }
    });
}

/// Separable clamped box sum over a `(2r+1)^3` window, or its adjoint.
fn box3(mut src: Vec<f64>, dims: [usize; 3], r: usize, adjoint: bool) -> Vec<f64> {
    let mut tmp = vec![0.0; src.len()];
    axis_pass(&src, &mut tmp, dims, 0, r, adjoint);
    axis_pass(&tmp, &mut src, dims, 1, r, adjoint);
    axis_pass(&src, &mut tmp, dims, 2, r, adjoint);
    tmp
}

fn product(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.par_iter().zip(b.par_iter()).map(|(x, y)| x * y).collect()
}

/// Correlation of a window from its sums; `None` for flat windows.
#[inline]
fn window_ncc(n: f64, sa: f64, sb: f64, saa: f64, sbb: f64, sab: f64) -> Option<(f64, f64, f64, f64)> {
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va / n < NCC_EPS || vb / n < NCC_EPS {
        return None;
    }
    let cross = sab - sa * sb / n;
    Some((cross / (va * vb).sqrt(), cross, va, vb))
}

/// NCC between `a` and `b` and, if requested, its derivative with respect
/// to every value of `b`.
fn ncc_and_db(
    a: &[f64],
    b: &[f64],
    dims: [usize; 3],
    window: usize,
    mode: NccMode,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let len = a.len();
    let plane = dims[0] * dims[1];
    match mode {
        NccMode::Global => {
            let n = len as f64;
            let sa = ordered_sum_f64(a, plane);
            let sb = ordered_sum_f64(b, plane);
            let saa = ordered_sum_f64(&product(a, a), plane);
            let sbb = ordered_sum_f64(&product(b, b), plane);
            let sab = ordered_sum_f64(&product(a, b), plane);
            let Some((ncc, _, va, vb)) = window_ncc(n, sa, sb, saa, sbb, sab) else {
                return (0.0, want_grad.then(|| vec![0.0; len]));
            };
            let grad = want_grad.then(|| {
                let alpha = 1.0 / (va * vb).sqrt();
                let beta = -ncc / vb;
                let gamma = -alpha * sa / n - beta * sb / n;
                a.par_iter()
                    .zip(b.par_iter())
                    .map(|(&x, &y)| alpha * x + beta * y + gamma)
                    .collect()
            });
            (ncc.clamp(-1.0, 1.0), grad)
        }
        NccMode::Local => {
            let r = window / 2;
            let n = (window * window * window) as f64;
            let sa = box3(a.to_vec(), dims, r, false);
            let sb = box3(b.to_vec(), dims, r, false);
            let saa = box3(product(a, a), dims, r, false);
            let sbb = box3(product(b, b), dims, r, false);
            let sab = box3(product(a, b), dims, r, false);

            // Per window: correlation and the coefficients of
            // d ncc / d b_j = alpha * a_j + beta * b_j + gamma.
            let per: Vec<[f64; 4]> = (0..len)
                .into_par_iter()
                .map(|i| match window_ncc(n, sa[i], sb[i], saa[i], sbb[i], sab[i]) {
                    None => [0.0; 4],
                    Some((ncc, _, va, vb)) => {
                        let alpha = 1.0 / (va * vb).sqrt();
                        let beta = -ncc / vb;
                        let gamma = -alpha * sa[i] / n - beta * sb[i] / n;
                        [ncc, alpha, beta, gamma]
                    }
                })
                .collect();
            drop((sa, sb, saa, sbb, sab));
            let nccs: Vec<f64> = per.par_iter().map(|p| p[0]).collect();
            let ncc = (ordered_sum_f64(&nccs, plane) / len as f64).clamp(-1.0, 1.0);
            drop(nccs);
            if !want_grad {
                return (ncc, None);
            }
            let coef = |k: usize| box3(per.par_iter().map(|p| p[k]).collect(), dims, r, true);
            let ga = coef(1);
            let gb = coef(2);
            let gg = coef(3);
            let inv = 1.0 / len as f64;
            let grad = (0..len)
                .into_par_iter()
                .map(|j| (a[j] * ga[j] + b[j] * gb[j] + gg[j]) * inv)
                .collect();
            (ncc, Some(grad))
        }
    }
}

fn to_f64(v: &Volume3) -> Vec<f64> {
    v.data().par_iter().map(|&x| x as f64).collect()
}

/// Mean windowed NCC between two images on the same grid, in `[-1, 1]`.
pub fn local_ncc(a: &Volume3, b: &Volume3, window: usize) -> Result<f64> {
    a.grid().check_same(b.grid(), "local_ncc")?;
    check_window(window)?;
    Ok(ncc_and_db(&to_f64(a), &to_f64(b), a.dims(), window, NccMode::Local, false).0)
}

/// Single correlation coefficient over the whole volume.
pub fn global_ncc(a: &Volume3, b: &Volume3) -> Result<f64> {
    a.grid().check_same(b.grid(), "global_ncc")?;
    Ok(ncc_and_db(&to_f64(a), &to_f64(b), a.dims(), 3, NccMode::Global, false).0)
}

fn check_reg_dims(g: &Grid) -> Result<()> {
    if g.dims.iter().any(|&n| n < 2) {
        return Err(Error::InvalidDims(format!(
            "smoothness term needs every dimension >= 2, got {:?}",
            g.dims
        )));
    }
    Ok(())
}

/// Mean over voxels, components and axes of the squared forward
/// differences of `u`; the last plane along each axis contributes zero.
pub fn grad_l2(u: &DispField) -> Result<f64> {
    let g = *u.grid();
    check_reg_dims(&g)?;
    let [nx, ny, nz] = g.dims;
    let strides = [1, nx, nx * ny];
    let per_plane: Vec<f64> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let mut acc = 0.0;
            for comp in u.components() {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = g.index(x, y, z);
                        let c = [x, y, z];
                        let v = comp[i] as f64;
                        for a in 0..3 {
                            if c[a] + 1 < g.dims[a] {
                                let d = comp[i + strides[a]] as f64 - v;
                                acc += d * d;
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect();
    Ok(per_plane.iter().sum::<f64>() / (9 * g.len()) as f64)
}

/// Gradient of [`grad_l2`] with respect to component values.
fn grad_l2_gradient(u: &DispField) -> [Vec<f64>; 3] {
    let g = *u.grid();
    let [nx, ny, _] = g.dims;
    let strides = [1, nx, nx * ny];
    let scale = 2.0 / (9 * g.len()) as f64;
    [0, 1, 2].map(|k| {
        let comp = u.component(k);
        (0..g.len())
            .into_par_iter()
            .map(|i| {
                let c = g.coords(i);
                let v = comp[i] as f64;
                let mut s = 0.0;
                for a in 0..3 {
                    if c[a] > 0 {
                        s += v - comp[i - strides[a]] as f64;
                    }
                    if c[a] + 1 < g.dims[a] {
                        s -= comp[i + strides[a]] as f64 - v;
                    }
                }
                scale * s
            })
            .collect()
    })
}

/// Warped moving image (double precision) and, optionally, its spatial
/// derivative at each warped position.
fn warp_f64(moving: &Volume3, u: &DispField, with_grad: bool) -> (Vec<f64>, Option<[Vec<f64>; 3]>) {
    let g = *u.grid();
    let dims = g.dims;
    let src = moving.data();
    let pos = |i: usize| {
        let c = g.coords(i);
        let d = u.at(i);
        [0, 1, 2].map(|k| c[k] as f64 + d[k] as f64)
    };
    if !with_grad {
        let b = (0..g.len()).into_par_iter().map(|i| trilinear(src, dims, pos(i))).collect();
        return (b, None);
    }
    let vals: Vec<(f64, [f64; 3])> = (0..g.len())
        .into_par_iter()
        .map(|i| trilinear_with_gradient(src, dims, pos(i)))
        .collect();
    let b = vals.iter().map(|v| v.0).collect();
    let grads = [0, 1, 2].map(|k| vals.iter().map(|v| v.1[k]).collect());
    (b, Some(grads))
}

fn check_inputs(moving: &Volume3, fixed: &Volume3, u: &DispField, p: &LossParams) -> Result<()> {
    moving.grid().check_same(fixed.grid(), "moving vs fixed")?;
    fixed.grid().check_same(u.grid(), "fixed vs field")?;
    check_reg_dims(u.grid())?;
    p.validate()
}

/// Objective value for warping `moving` onto `fixed` with `u`.
pub fn total_loss(moving: &Volume3, fixed: &Volume3, u: &DispField, p: &LossParams) -> Result<LossReport> {
    check_inputs(moving, fixed, u, p)?;
    let (b, _) = warp_f64(moving, u, false);
    let (ncc, _) = ncc_and_db(&to_f64(fixed), &b, u.dims(), p.window, p.mode, false);
    Ok(LossReport::new(ncc, grad_l2(u)?, p))
}

/// Objective value and its gradient with respect to `u`.
///
/// The similarity part is chained through the trilinear sampler: the
/// derivative of NCC with respect to each warped intensity times the
/// moving image's interpolated spatial derivative at the warped position.
pub fn loss_gradient(
    moving: &Volume3,
    fixed: &Volume3,
    u: &DispField,
    p: &LossParams,
) -> Result<(LossReport, LossGrad)> {
    check_inputs(moving, fixed, u, p)?;
    let (b, db_dx) = warp_f64(moving, u, true);
    let db_dx = db_dx.expect("requested");
    let (ncc, dncc) = ncc_and_db(&to_f64(fixed), &b, u.dims(), p.window, p.mode, true);
    drop(b);
    let dncc = dncc.expect("requested");
    let reg = grad_l2(u)?;
    let dreg = grad_l2_gradient(u);
    let comps = [0, 1, 2].map(|k| {
        dncc.par_iter()
            .zip(db_dx[k].par_iter())
            .zip(dreg[k].par_iter())
            .map(|((&dn, &db), &dr)| -p.lambda_ncc * dn * db + p.lambda_reg * dr)
            .collect()
    });
    Ok((
        LossReport::new(ncc, reg, p),
        LossGrad {
            grid: *u.grid(),
            comps,
        },
    ))
}
