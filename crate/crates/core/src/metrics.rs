//! Registration quality metrics: Dice overlap, 95th percentile Hausdorff
//! distance, landmark error and folding percentage.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{ndv, DispField};
use crate::sampler::{transform_points, warp_labels};
use crate::volume::{Grid, LabelMap, LandmarkSet};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiceResult {
    pub per_label: BTreeMap<u32, f64>,
    pub mean: f64,
    /// Population standard deviation across labels.
    pub sd: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Per-label Dice over the union of non-zero labels of both maps. A label
/// missing from one map scores 0. With no foreground at all the mean is NaN.
pub fn dice(a: &LabelMap, b: &LabelMap) -> Result<DiceResult> {
    a.grid().check_same(b.grid(), "dice")?;
    let mut counts: BTreeMap<u32, [usize; 3]> = BTreeMap::new();
    for (&la, &lb) in a.data().iter().zip(b.data()) {
        if la != 0 {
            counts.entry(la).or_default()[0] += 1;
        }
        if lb != 0 {
            counts.entry(lb).or_default()[1] += 1;
        }
        if la != 0 && la == lb {
            counts.entry(la).or_default()[2] += 1;
        }
    }
    let per_label: BTreeMap<u32, f64> = counts
        .into_iter()
        .map(|(l, [ca, cb, cab])| (l, 2.0 * cab as f64 / (ca + cb) as f64))
        .collect();
    let vals: Vec<f64> = per_label.values().copied().collect();
    let (mean, sd) = mean_sd(&vals);
    Ok(DiceResult { per_label, mean, sd })
}

/// Foreground voxels with a background face neighbour or on the volume face.
pub fn boundary_mask(mask: &[bool], g: &Grid) -> Vec<bool> {
    let [nx, ny, nz] = g.dims;
    let strides = [1, nx, nx * ny];
    (0..g.len())
        .into_par_iter()
        .map(|i| {
            if !mask[i] {
                return false;
            }
            let c = g.coords(i);
            (0..3).any(|a| {
                c[a] == 0 || c[a] + 1 == [nx, ny, nz][a] || !mask[i - strides[a]] || !mask[i + strides[a]]
            })
        })
        .collect()
}

/// Squared distance transform along one line (lower envelope of parabolas).
/// `f` holds squared distances so far, `INFINITY` where unknown.
fn dt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |i: usize| i as f64 * s;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let x = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if x <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = pos(i);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// voxel with `seed == true`. Infinite everywhere when there is no seed.
pub fn squared_edt(seed: &[bool], g: &Grid) -> Vec<f64> {
    let [nx, ny, nz] = g.dims;
    let mut d: Vec<f64> = seed.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = g.dims[axis];
        let stride = strides[axis];
        let (o1, o2) = match axis {
            0 => ((ny, nx), (nz, nx * ny)),
            1 => ((nx, 1), (nz, nx * ny)),
            _ => ((nx, 1), (ny, nx)),
        };
        let starts: Vec<usize> = (0..o2.0).flat_map(|b| (0..o1.0).map(move |a| a * o1.1 + b * o2.1)).collect();
        let s = g.spacing[axis];
        let lines: Vec<(usize, Vec<f64>)> = starts
            .par_iter()
            .map_init(
                || (vec![0.0; n], Vec::new(), Vec::new()),
                |(buf, v, z), &start| {
                    let f: Vec<f64> = (0..n).map(|i| d[start + i * stride]).collect();
                    dt_line(&f, s, buf, v, z);
                    (start, buf.clone())
                },
            )
            .collect();
        for (start, line) in lines {
            for (i, val) in line.into_iter().enumerate() {
                d[start + i * stride] = val;
            }
        }
    }
    d
}

/// Nearest-rank 95th percentile of an unsorted list.
pub fn percentile95(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let rank = (0.95 * v.len() as f64).ceil() as usize;
    v[rank.max(1) - 1]
}

/// Symmetric HD95 between two boolean masks, or `None` when either is empty.
pub fn hd95_masks(a: &[bool], b: &[bool], g: &Grid) -> Option<f64> {
    let ba = boundary_mask(a, g);
    let bb = boundary_mask(b, g);
    if !ba.iter().any(|&x| x) || !bb.iter().any(|&x| x) {
        return None;
    }
    let da = squared_edt(&ba, g);
    let db = squared_edt(&bb, g);
    let mut pooled = Vec::new();
    pooled.extend(ba.iter().zip(&db).filter(|(&m, _)| m).map(|(_, d)| d.sqrt()));
    pooled.extend(bb.iter().zip(&da).filter(|(&m, _)| m).map(|(_, d)| d.sqrt()));
    Some(percentile95(pooled))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hd95Result {
    /// Labels present in both maps.
    pub per_label: BTreeMap<u32, f64>,
    /// Labels skipped because one side had no voxels.
    pub skipped: Vec<u32>,
    pub mean: Option<f64>,
}

/// Per-label HD95 in millimetres (grid spacing), then the unweighted mean.
pub fn hd95(a: &LabelMap, b: &LabelMap) -> Result<Hd95Result> {
    a.grid().check_same(b.grid(), "hd95")?;
    let g = *a.grid();
    let mut labels: Vec<u32> = a.foreground_labels().chain(b.foreground_labels()).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut per_label = BTreeMap::new();
    let mut skipped = Vec::new();
    for l in labels {
        let ma: Vec<bool> = a.data().iter().map(|&x| x == l).collect();
        let mb: Vec<bool> = b.data().iter().map(|&x| x == l).collect();
        match hd95_masks(&ma, &mb, &g) {
            Some(d) => {
                per_label.insert(l, d);
            }
            None => {
                warn!("hd95: label {l} is empty in one map; skipped");
                skipped.push(l);
            }
        }
    }
    let mean = (!per_label.is_empty()).then(|| per_label.values().sum::<f64>() / per_label.len() as f64);
    Ok(Hd95Result {
        per_label,
        skipped,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreResult {
    /// Per landmark distance in mm; `None` where the fixed point is outside.
    pub per_point: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub excluded: usize,
}

/// Distance between fixed landmarks mapped through `u` and their moving
/// counterparts, in millimetres.
pub fn tre(fixed_pts: &LandmarkSet, moving_pts: &LandmarkSet, u: &DispField) -> Result<TreResult> {
    if fixed_pts.len() != moving_pts.len() {
        return Err(Error::InvalidParameter(format!(
            "landmark count mismatch: {} fixed vs {} moving",
            fixed_pts.len(),
            moving_pts.len()
        )));
    }
    let mapped = transform_points(fixed_pts, u);
    let per_point: Vec<Option<f64>> = mapped
        .points
        .iter()
        .zip(&moving_pts.points)
        .map(|(p, q)| p.map(|p| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt()))
        .collect();
    let valid: Vec<f64> = per_point.iter().flatten().copied().collect();
    let excluded = per_point.len() - valid.len();
    if excluded > 0 {
        warn!("tre: {excluded} landmark(s) outside the field grid excluded");
    }
    let (mean, sd) = if valid.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_sd(&valid);
        (Some(m), Some(s))
    };
    Ok(TreResult {
        per_point,
        mean,
        sd,
        excluded,
    })
}

/// Evaluation of one registered pair. Metrics whose inputs were not given
/// are `None` (serialized as `null`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub pair_id: String,
    pub dice_mean: Option<f64>,
    pub dice_sd: Option<f64>,
    pub dice_per_label: BTreeMap<u32, f64>,
    pub tre_mm: Option<f64>,
    pub tre_sd: Option<f64>,
    pub tre_excluded: usize,
    pub ndv_percent: f64,
    pub hd95_mm: Option<f64>,
    pub hd95_per_label: BTreeMap<u32, f64>,
}

pub fn evaluate_pair(
    pair_id: &str,
    labels: Option<(&LabelMap, &LabelMap)>,
    landmarks: Option<(&LandmarkSet, &LandmarkSet)>,
    u: &DispField,
) -> Result<MetricReport> {
    let mut r = MetricReport {
        pair_id: pair_id.to_string(),
        dice_mean: None,
        dice_sd: None,
        dice_per_label: BTreeMap::new(),
        tre_mm: None,
        tre_sd: None,
        tre_excluded: 0,
        ndv_percent: ndv(u)?,
        hd95_mm: None,
        hd95_per_label: BTreeMap::new(),
    };
    if let Some((fixed, moving)) = labels {
        fixed.grid().check_same(u.grid(), "fixed labels vs field")?;
        let warped = warp_labels(moving, u)?;
        let d = dice(fixed, &warped)?;
        r.dice_mean = d.mean.is_finite().then_some(d.mean);
        r.dice_sd = d.sd.is_finite().then_some(d.sd);
        r.dice_per_label = d.per_label;
        let h = hd95(fixed, &warped)?;
        r.hd95_mm = h.mean;
        r.hd95_per_label = h.per_label;
    }
    if let Some((fixed, moving)) = landmarks {
        let t = tre(fixed, moving, u)?;
        r.tre_mm = t.mean;
        r.tre_sd = t.sd;
        r.tre_excluded = t.excluded;
    }
    Ok(r)
}

/// JSON formatter that prints every float with four decimals.
struct Fixed4;

impl serde_json::ser::Formatter for Fixed4 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        write!(w, "{value:.4}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> std::io::Result<()> {
        write!(w, "{value:.4}")
    }
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, Fixed4);
        self.serialize(&mut ser).expect("report serializes");
        buf.push(b'\n');
        String::from_utf8(buf).expect("utf-8 json")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

fn fmt4(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// One row per pair, then `mean` and `sd` rows taken across pairs.
pub fn summary_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("pair,Dice,TRE(mm),NDV(%),HD95(mm)\n");
    let cols = |r: &MetricReport| [r.dice_mean, r.tre_mm, Some(r.ndv_percent), r.hd95_mm];
    for r in reports {
        let c = cols(r).map(fmt4);
        out.push_str(&format!("{},{}\n", r.pair_id, c.join(",")));
    }
    if !reports.is_empty() {
        let mut means = Vec::new();
        let mut sds = Vec::new();
        for k in 0..4 {
            let vals: Vec<f64> = reports.iter().filter_map(|r| cols(r)[k]).collect();
            let (m, s) = mean_sd(&vals);
            means.push(fmt4(m.is_finite().then_some(m)));
            sds.push(fmt4(s.is_finite().then_some(s)));
        }
        out.push_str(&format!("mean,{}\nsd,{}\n", means.join(","), sds.join(",")));
    }
    out
}

pub fn write_summary_csv(reports: &[MetricReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, summary_csv(reports)).map_err(|e| Error::io(path, e))
}
