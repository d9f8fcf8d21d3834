//! Adam optimization of displacement fields and the coarse-to-fine driver.

use std::path::Path;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilateral::{bilateral_filter, BFParams};
use crate::error::{Error, Result};
use crate::field::{compose, upsample2, DispField};
use crate::loss::{loss_gradient, total_loss, LossGrad, LossParams, LossReport, NccMode};
use crate::sampler::trilinear_with_gradient;
use crate::volume::{downsample2, Volume3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = self.learning_rate.is_finite() && self.learning_rate > 0.0;
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !lr_ok || !beta_ok(self.beta1) || !beta_ok(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidParameter(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_update(params: &mut [f32], grad: &[f64], state: &mut AdamState, hp: &AdamParams) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::InvalidDims(format!(
            "Adam shape mismatch: {} params, {} gradients, {} moments",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    let (b1, b2, lr, eps) = (hp.beta1, hp.beta2, hp.learning_rate, hp.eps);
    params
        .par_iter_mut()
        .zip(grad.par_iter())
        .zip(state.m.par_iter_mut().zip(state.v.par_iter_mut()))
        .for_each(|((p, &g), (m, v))| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let step = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            *p = (*p as f64 - step) as f32;
        });
    Ok(())
}

/// Adam state for all three components of a field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldAdam {
    pub state: [AdamState; 3],
}

impl FieldAdam {
    pub fn new(len: usize) -> Self {
        Self {
            state: [0, 1, 2].map(|_| AdamState::new(len)),
        }
    }
}

pub fn adam_step(u: &mut DispField, grad: &LossGrad, state: &mut FieldAdam, hp: &AdamParams) -> Result<()> {
    u.grid().check_same(&grad.grid, "field vs gradient")?;
    let comps = u.components_mut();
    for k in 0..3 {
        adam_update(&mut comps[k], &grad.comps[k], &mut state.state[k], hp)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry {
    pub level: usize,
    pub iter: usize,
    pub ncc: f64,
    pub reg: f64,
    pub total: f64,
}

/// Loss decomposition recorded once per executed iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    pub fn push(&mut self, level: usize, iter: usize, r: &LossReport) {
        self.entries.push(TraceEntry {
            level,
            iter,
            ncc: r.ncc,
            reg: r.reg,
            total: r.total,
        });
    }

    pub fn extend(&mut self, other: LossTrace) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["level", "iter", "ncc", "reg", "total"])
            .map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            w.write_record([
                e.level.to_string(),
                e.iter.to_string(),
                format!("{:.4}", e.ncc),
                format!("{:.4}", e.reg),
                format!("{:.4}", e.total),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    }
}

/// Step-size schedule within one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// The same step size for every iteration.
    #[default]
    Constant,
    /// Half-cosine decay from the base rate towards zero.
    Cosine,
}

impl LrSchedule {
    /// Multiplier of the base rate at iteration `it` of `n`.
    pub fn factor(self, it: usize, n: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / n as f64).cos()),
        }
    }
}

/// Settings for a single optimization stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelParams {
    /// Index recorded in the trace.
    pub level: usize,
    pub iterations: usize,
    pub loss: LossParams,
    pub adam: AdamParams,
    pub schedule: LrSchedule,
}

/// Optimizes `u_init` on one grid. The returned field is the iterate with
/// the lowest objective seen, so its loss never exceeds the initial one.
pub fn register_level(
    moving: &Volume3,
    fixed: &Volume3,
    u_init: &DispField,
    lp: &LevelParams,
) -> Result<(DispField, LossTrace)> {
    optimize(moving, fixed, u_init, None, lp)
}

fn check_report(r: &LossReport, level: usize, iteration: usize) -> Result<()> {
    let term = if !r.ncc.is_finite() {
        "ncc"
    } else if !r.reg.is_finite() {
        "reg"
    } else if !r.total.is_finite() {
        "total"
    } else {
        return Ok(());
    };
    Err(Error::Diverged { level, iteration, term })
}

/// Gradient with respect to `r` of a loss whose gradient with respect to
/// `w = compose(carry, r)` is `gw`. Since `w(p) = r(p) + carry(p + r(p))`,
/// `dw/dr = I + J_carry(p + r(p))`.
fn chain_through_carry(gw: &LossGrad, carry: &DispField, r: &DispField) -> LossGrad {
    let g = *r.grid();
    let dims = g.dims;
    let rows: Vec<[f64; 3]> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let c = g.coords(i);
            let d = r.at(i);
            let q = [0, 1, 2].map(|k| c[k] as f64 + d[k] as f64);
            let mut out = [gw.comps[0][i], gw.comps[1][i], gw.comps[2][i]];
            for ci in 0..3 {
                let (_, jac_row) = trilinear_with_gradient(carry.component(ci), dims, q);
                for j in 0..3 {
                    out[j] += gw.comps[ci][i] * jac_row[j];
                }
            }
            out
        })
        .collect();
    LossGrad {
        grid: g,
        comps: [0, 1, 2].map(|k| rows.iter().map(|v| v[k]).collect()),
    }
}

/// Field actually evaluated for residual `r`.
fn effective(carry: Option<&DispField>, r: &DispField) -> Result<DispField> {
    match carry {
        Some(c) => compose(c, r),
        None => Ok(r.clone()),
    }
}

/// Minimizes the objective of `compose(carry, r)` over `r`, starting from
/// `r_init`. Returns the best effective field seen.
fn optimize(
    moving: &Volume3,
    fixed: &Volume3,
    r_init: &DispField,
    carry: Option<&DispField>,
    lp: &LevelParams,
) -> Result<(DispField, LossTrace)> {
    lp.adam.validate()?;
    if lp.iterations == 0 {
        return Err(Error::InvalidParameter("iterations must be > 0".into()));
    }
    let mut r = r_init.clone();
    let mut adam = FieldAdam::new(r.grid().len());
    let mut trace = LossTrace::default();
    let mut best: Option<(f64, DispField)> = None;

    for it in 0..lp.iterations {
        let w = effective(carry, &r)?;
        let (report, gw) = loss_gradient(moving, fixed, &w, &lp.loss)?;
        check_report(&report, lp.level, it)?;
        let grad = match carry {
            Some(c) => chain_through_carry(&gw, c, &r),
            None => gw,
        };
        if grad.comps.iter().any(|c| c.iter().any(|g| !g.is_finite())) {
            return Err(Error::Diverged {
                level: lp.level,
                iteration: it,
                term: "gradient",
            });
        }
        trace.push(lp.level, it, &report);
        if best.as_ref().map_or(true, |(b, _)| report.total < *b) {
            best = Some((report.total, w));
        }
        let hp = AdamParams {
            learning_rate: lp.adam.learning_rate * lp.schedule.factor(it, lp.iterations),
            ..lp.adam
        };
        adam_step(&mut r, &grad, &mut adam, &hp)?;
    }

    let w = effective(carry, &r)?;
    let last = total_loss(moving, fixed, &w, &lp.loss)?;
    check_report(&last, lp.level, lp.iterations)?;
    let (best_total, best_w) = best.expect("at least one iteration");
    debug!(
        "level {}: initial {:.6}, best {:.6}, last {:.6}",
        lp.level,
        trace.entries[0].total,
        best_total.min(last.total),
        last.total
    );
    Ok((if last.total < best_total { w } else { best_w }, trace))
}

/// All registration hyperparameters. Every key is optional in the config
/// file; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    /// Similarity weight.
    pub lambda0: f64,
    /// Smoothness weight.
    pub lambda1: f64,
    /// Learning rate quoted for network training. Kept for reference; the
    /// field optimizer uses `field_learning_rate`.
    pub learning_rate: f64,
    /// Adam step size in voxels of the current level.
    pub field_learning_rate: f64,
    /// Step-size decay applied within each level.
    pub lr_schedule: LrSchedule,
    /// `(downsample factor, iterations)` from coarse to fine.
    pub levels: Vec<(usize, usize)>,
    pub ncc_window: usize,
    pub ncc_mode: NccMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bf_enabled: bool,
    pub bf_sigma_spatial: f64,
    /// Range sigma as a fraction of the fixed image's intensity range.
    pub bf_sigma_range_rel: f64,
    /// Absolute range sigma; overrides `bf_sigma_range_rel` when set.
    pub bf_sigma_range: Option<f64>,
    pub bf_radius: Option<usize>,
    /// Filter after every level instead of only the final field.
    pub bf_per_level: bool,
    pub seed: u64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            lambda1: 6.0,
            learning_rate: 4e-4,
            field_learning_rate: 0.1,
            lr_schedule: LrSchedule::Constant,
            levels: vec![(4, 100), (2, 60), (1, 30)],
            ncc_window: 9,
            ncc_mode: NccMode::Local,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            bf_enabled: true,
            bf_sigma_spatial: 1.5,
            bf_sigma_range_rel: 0.1,
            bf_sigma_range: None,
            bf_radius: None,
            bf_per_level: false,
            seed: 0,
        }
    }
}

impl RegConfig {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        let cfg: RegConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|reason| Error::Parse {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lambda0.is_finite() && self.lambda0 > 0.0) {
            return bad(format!("lambda0 must be > 0, got {}", self.lambda0));
        }
        // Zero smoothness weight is allowed for pure-similarity runs.
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return bad(format!("lambda1 must be >= 0, got {}", self.lambda1));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.levels.is_empty() {
            return bad("levels must not be empty".into());
        }
        for w in self.levels.windows(2) {
            if w[1].0 >= w[0].0 {
                return bad(format!("level factors must be strictly descending: {:?}", self.levels));
            }
        }
        if self.levels.last().map(|l| l.0) != Some(1) {
            return bad(format!("last level factor must be 1: {:?}", self.levels));
        }
        for &(f, it) in &self.levels {
            if !f.is_power_of_two() {
                return bad(format!("level factor {f} is not a power of two"));
            }
            if it == 0 {
                return bad(format!("level with factor {f} has zero iterations"));
            }
        }
        self.adam_params().validate()?;
        self.loss_params().validate()?;
        if self.bf_enabled || self.bf_per_level {
            if !(self.bf_sigma_spatial > 0.0) || !(self.bf_sigma_range_rel > 0.0) {
                return bad("bilateral sigmas must be > 0".into());
            }
            if let Some(s) = self.bf_sigma_range {
                if !(s > 0.0) {
                    return bad(format!("bf_sigma_range must be > 0, got {s}"));
                }
            }
        }
        Ok(())
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams {
            lambda_ncc: self.lambda0,
            lambda_reg: self.lambda1,
            window: self.ncc_window,
            mode: self.ncc_mode,
        }
    }

    pub fn adam_params(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.field_learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn bf_params(&self, guide: &Volume3) -> Result<BFParams> {
        let p = match self.bf_sigma_range {
            Some(s) => BFParams::new(self.bf_sigma_spatial, s)?,
            None => BFParams::relative_to_guide(self.bf_sigma_spatial, self.bf_sigma_range_rel, guide)?,
        };
        match self.bf_radius {
            Some(r) => p.with_radius(r),
            None => Ok(p),
        }
    }
}

/// Coarse-to-fine registration of `moving` onto `fixed`.
///
/// Each level upsamples the field carried over from the previous level and
/// optimizes a fresh residual `r` from zero. The level's field is
/// `compose(carry, r)`: `r` is applied first and the carried field after it.
/// The objective (similarity and smoothness) is evaluated on that composed
/// field, with the gradient chained through the composition.
pub fn register(moving: &Volume3, fixed: &Volume3, cfg: &RegConfig) -> Result<(DispField, LossTrace)> {
    cfg.validate()?;
    moving.grid().check_same(fixed.grid(), "moving vs fixed")?;
    let depth = cfg.levels[0].0.trailing_zeros() as usize;

    let mut fixed_pyr = vec![fixed.clone()];
    let mut moving_pyr = vec![moving.clone()];
    for k in 0..depth {
        fixed_pyr.push(downsample2(&fixed_pyr[k])?);
        moving_pyr.push(downsample2(&moving_pyr[k])?);
    }

    let mut trace = LossTrace::default();
    let mut carry: Option<(usize, DispField)> = None;
    for (level, &(factor, iterations)) in cfg.levels.iter().enumerate() {
        let k = factor.trailing_zeros() as usize;
        let (fx, mv) = (&fixed_pyr[k], &moving_pyr[k]);
        let carry_field = match carry.take() {
            None => None,
            Some((mut kc, mut c)) => {
                while kc > k {
                    kc -= 1;
                    c = upsample2(&c, fixed_pyr[kc].dims())?;
                }
                Some(c)
            }
        };
        let lp = LevelParams {
            level,
            iterations,
            loss: cfg.loss_params(),
            adam: cfg.adam_params(),
            schedule: cfg.lr_schedule,
        };
        info!("level {level}: factor {factor}, grid {:?}, {iterations} iterations", fx.dims());
        let zero = DispField::identity(*fx.grid());
        let (mut field, t) = optimize(mv, fx, &zero, carry_field.as_ref(), &lp)?;
        trace.extend(t);
        if cfg.bf_per_level {
            field = bilateral_filter(&field, fx, &cfg.bf_params(fx)?)?;
        }
        if !field.is_finite() {
            return Err(Error::Diverged {
                level,
                iteration: iterations,
                term: "field",
            });
        }
        carry = Some((k, field));
    }

    let (_, mut field) = carry.expect("at least one level");
    if cfg.bf_enabled && !cfg.bf_per_level {
        field = bilateral_filter(&field, fixed, &cfg.bf_params(fixed)?)?;
    }
    Ok((field, trace))
}
