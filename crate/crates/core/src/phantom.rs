//! Synthetic labelled volumes and smooth deformations for testing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DispField;
use crate::sampler::{transform_points, warp, warp_labels, InterpMode};
use crate::volume::{Grid, LabelMap, LandmarkSet, Volume3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    /// Non-overlapping-ish spheres of varying radius.
    #[default]
    Spheres,
    /// Randomly oriented ellipsoids.
    Blobs,
}

impl std::str::FromStr for PhantomKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "spheres" => Ok(Self::Spheres),
            "blobs" => Ok(Self::Blobs),
            other => Err(format!("unknown phantom kind '{other}' (expected spheres or blobs)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume3,
    pub labels: LabelMap,
    /// Centroid of each foreground label, in ascending label order.
    pub landmarks: LandmarkSet,
}

const MIN_DIM: usize = 8;
const N_SHAPES: usize = 12;

struct Shape {
    center: [f64; 3],
    /// Rows are the shape's principal axes scaled by inverse semi-axis.
    axes: [[f64; 3]; 3],
}

impl Shape {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [0, 1, 2].map(|k| p[k] - self.center[k]);
        self.axes
            .iter()
            .map(|a| {
                let t = a[0] * d[0] + a[1] * d[1] + a[2] * d[2];
                t * t
            })
            .sum::<f64>()
            <= 1.0
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let (a, b, c) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(-1.0f64..1.0).acos(),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let rz = |t: f64| [[t.cos(), -t.sin(), 0.0], [t.sin(), t.cos(), 0.0], [0.0, 0.0, 1.0]];
    let ry = |t: f64| [[t.cos(), 0.0, t.sin()], [0.0, 1.0, 0.0], [-t.sin(), 0.0, t.cos()]];
    let mul = |m: [[f64; 3]; 3], n: [[f64; 3]; 3]| {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| m[i][k] * n[k][j]).sum();
            }
        }
        r
    };
    mul(mul(rz(a), ry(b)), rz(c))
}

/// Deterministic labelled phantom: labels `1..=12` on a zero background,
/// each with its own intensity plus a smooth texture so that local
/// correlation has structure to lock onto everywhere.
pub fn make_phantom(kind: PhantomKind, dims: [usize; 3], seed: u64) -> Result<Phantom> {
    if dims.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::InvalidDims(format!(
            "phantom needs every dimension >= {MIN_DIM}, got {dims:?}"
        )));
    }
    let grid = Grid::unit(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dim = *dims.iter().min().unwrap() as f64;
    let (r_lo, r_hi) = (0.06 * min_dim, 0.11 * min_dim);

    let mut shapes = Vec::with_capacity(N_SHAPES);
    for _ in 0..N_SHAPES {
        let radius = [0, 1, 2].map(|_| rng.gen_range(r_lo..r_hi));
        let semi = match kind {
            PhantomKind::Spheres => [radius[0]; 3],
            PhantomKind::Blobs => radius.map(|r| r * rng.gen_range(0.7..1.4)),
        };
        let margin = semi.iter().cloned().fold(0.0, f64::max) + 1.0;
        let center = [0, 1, 2].map(|k| rng.gen_range(margin..(dims[k] as f64 - 1.0 - margin).max(margin + 1e-9)));
        let rot = match kind {
            PhantomKind::Spheres => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            PhantomKind::Blobs => random_rotation(&mut rng),
        };
        let axes = [0, 1, 2].map(|i| rot[i].map(|v| v / semi[i]));
        shapes.push(Shape { center, axes });
    }
    let base: Vec<f32> = (0..N_SHAPES).map(|i| 0.3 + 0.7 * (i + 1) as f32 / N_SHAPES as f32).collect();
    let freq = [0, 1, 2].map(|_| rng.gen_range(0.15..0.35));
    let phase = [0, 1, 2].map(|_| rng.gen_range(0.0..std::f64::consts::TAU));

    let label_of = |x: usize, y: usize, z: usize| -> u32 {
        let p = [x as f64, y as f64, z as f64];
        // Later shapes are painted over earlier ones.
        (0..N_SHAPES).rev().find(|&i| shapes[i].contains(p)).map_or(0, |i| i as u32 + 1)
    };
    let labels_data: Vec<u32> = (0..grid.len())
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            label_of(x, y, z)
        })
        .collect();
    let image = Volume3::from_fn(grid, |x, y, z| {
        let l = labels_data[grid.index(x, y, z)];
        let p = [x as f64, y as f64, z as f64];
        let texture: f64 = (0..3).map(|k| (freq[k] * p[k] + phase[k]).sin()).sum::<f64>() / 3.0;
        let b = if l == 0 { 0.0 } else { base[l as usize - 1] };
        b + 0.15 * texture as f32 + 0.15
    })?;
    let labels = LabelMap::new(grid, labels_data)?;
    let landmarks = LandmarkSet::from_label_centroids(&labels);
    Ok(Phantom {
        image,
        labels,
        landmarks,
    })
}

/// Smooth displacement built from a few low-frequency sine modes per
/// component, scaled so the largest vector has length `max_disp` voxels.
/// Wavelengths are on the order of the smallest grid dimension, so the
/// displacement is substantial nearly everywhere.
pub fn smooth_random_field(grid: Grid, max_disp: f64, seed: u64) -> Result<DispField> {
    if !(max_disp.is_finite() && max_disp >= 0.0) {
        return Err(Error::InvalidParameter(format!("max_disp must be >= 0, got {max_disp}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1e1d);
    let min_dim = *grid.dims.iter().min().unwrap() as f64;
    let modes: Vec<Vec<(f64, [f64; 3], f64)>> = (0..3)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let amp = rng.gen_range(0.5..1.0);
                    let wave = loop {
                        let f = [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0));
                        let n = f.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
                        if (0.5..=1.0).contains(&n) {
                            break f.map(|v| v * std::f64::consts::TAU / min_dim);
                        }
                    };
                    (amp, wave, rng.gen_range(0.0..std::f64::consts::TAU))
                })
                .collect()
        })
        .collect();
    let raw = |x: usize, y: usize, z: usize| -> [f64; 3] {
        let p = [x as f64, y as f64, z as f64];
        [0, 1, 2].map(|k| {
            modes[k]
                .iter()
                .map(|(a, w, ph)| a * (w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + ph).sin())
                .sum()
        })
    };
    let peak = (0..grid.len())
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            raw(x, y, z).iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { max_disp / peak } else { 0.0 };
    DispField::from_fn(grid, |x, y, z| raw(x, y, z).map(|v| (v * scale) as f32))
}

/// A registration problem with known answer: `fixed` is `moving` warped by
/// `truth`, so registering `moving` onto `fixed` should recover `truth`.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub moving: Volume3,
    pub fixed: Volume3,
    pub moving_labels: LabelMap,
    pub fixed_labels: LabelMap,
    pub fixed_landmarks: LandmarkSet,
    pub moving_landmarks: LandmarkSet,
    pub truth: DispField,
}

pub fn synthetic_pair(kind: PhantomKind, dims: [usize; 3], max_disp: f64, seed: u64) -> Result<SyntheticPair> {
    let ph = make_phantom(kind, dims, seed)?;
    let truth = smooth_random_field(*ph.image.grid(), max_disp, seed)?;
    let fixed = warp(&ph.image, &truth, InterpMode::Linear)?;
    let fixed_labels = warp_labels(&ph.labels, &truth)?;
    let fixed_landmarks = LandmarkSet::from_label_centroids(&fixed_labels);
    let moving_landmarks = LandmarkSet::new(
        transform_points(&fixed_landmarks, &truth)
            .points
            .into_iter()
            .map(|p| p.expect("centroids lie inside the grid"))
            .collect(),
    );
    Ok(SyntheticPair {
        moving: ph.image,
        fixed,
        moving_labels: ph.labels,
        fixed_labels,
        fixed_landmarks,
        moving_landmarks,
        truth,
    })
}
