//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stderr (bypassing output capture) and then asserts.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use deformreg::field::{jacobian_determinants, upsample2};
use deformreg::metrics::{dice, hd95, tre};
use deformreg::sampler::trilinear;
use deformreg::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "acceptance | {status} | {name} | {detail}");
}

fn check(name: &str, ok: bool, detail: String) {
    report(name, ok, &detail);
    assert!(ok, "{name}: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_volume(g: Grid, r: &mut ChaCha8Rng) -> Volume3 {
    Volume3::new(g, (0..g.len()).map(|_| r.gen_range(0.0f32..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- oracles

/// Window NCC computed sample by sample with clamped indices.
fn brute_local_ncc(a: &Volume3, b: &Volume3, w: usize) -> f64 {
    let g = *a.grid();
    let [nx, ny, nz] = g.dims;
    let r = (w / 2) as i64;
    let cl = |c: usize, d: i64, n: usize| (c as i64 + d).clamp(0, n as i64 - 1) as usize;
    let mut total = 0.0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut sa = Vec::new();
                let mut sb = Vec::new();
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let i = g.index(cl(x, dx, nx), cl(y, dy, ny), cl(z, dz, nz));
                            sa.push(a.data()[i] as f64);
                            sb.push(b.data()[i] as f64);
                        }
                    }
                }
                let n = sa.len() as f64;
                let ma = sa.iter().sum::<f64>() / n;
                let mb = sb.iter().sum::<f64>() / n;
                let cov: f64 = sa.iter().zip(&sb).map(|(p, q)| (p - ma) * (q - mb)).sum();
                let va: f64 = sa.iter().map(|p| (p - ma) * (p - ma)).sum();
                let vb: f64 = sb.iter().map(|q| (q - mb) * (q - mb)).sum();
                if va / n >= loss::NCC_EPS && vb / n >= loss::NCC_EPS {
                    total += cov / (va * vb).sqrt();
                }
            }
        }
    }
    total / g.len() as f64
}

fn brute_grad_l2(u: &DispField) -> f64 {
    let g = *u.grid();
    let [nx, ny, nz] = g.dims;
    let mut s = 0.0;
    for k in 0..3 {
        let c = u.component(k);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = c[g.index(x, y, z)] as f64;
                    if x + 1 < nx {
                        s += (c[g.index(x + 1, y, z)] as f64 - v).powi(2);
                    }
                    if y + 1 < ny {
                        s += (c[g.index(x, y + 1, z)] as f64 - v).powi(2);
                    }
                    if z + 1 < nz {
                        s += (c[g.index(x, y, z + 1)] as f64 - v).powi(2);
                    }
                }
            }
        }
    }
    s / (9 * g.len()) as f64
}

fn brute_dice(a: &LabelMap, b: &LabelMap, label: u32) -> f64 {
    let ca = a.data().iter().filter(|&&l| l == label).count();
    let cb = b.data().iter().filter(|&&l| l == label).count();
    let both = a.data().iter().zip(b.data()).filter(|(&p, &q)| p == label && q == label).count();
    2.0 * both as f64 / (ca + cb) as f64
}

fn brute_boundary(mask: &[bool], g: &Grid) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = g.dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[g.index(x, y, z)] {
                    continue;
                }
                let on_face = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                let bg_nb = !on_face
                    && [
                        g.index(x - 1, y, z),
                        g.index(x + 1, y, z),
                        g.index(x, y - 1, z),
                        g.index(x, y + 1, z),
                        g.index(x, y, z - 1),
                        g.index(x, y, z + 1),
                    ]
                    .iter()
                    .any(|&j| !mask[j]);
                if on_face || bg_nb {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn brute_hd95(a: &[bool], b: &[bool], g: &Grid) -> f64 {
    let ba = brute_boundary(a, g);
    let bb = brute_boundary(b, g);
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * g.spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut d = Vec::new();
    for (from, to) in [(&ba, &bb), (&bb, &ba)] {
        for p in from {
            d.push(to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min));
        }
    }
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    d[(0.95 * d.len() as f64).ceil() as usize - 1]
}

/// Clamped-index Gaussian convolution of one component.
fn gaussian_smooth(c: &[f32], g: &Grid, sigma: f64, radius: usize) -> Vec<f64> {
    let [nx, ny, nz] = g.dims;
    let r = radius as i64;
    let cl = |c: usize, d: i64, n: usize| (c as i64 + d).clamp(0, n as i64 - 1) as usize;
    (0..g.len())
        .map(|i| {
            let [x, y, z] = g.coords(i);
            let (mut num, mut den) = (0.0, 0.0);
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let w = (-((dx * dx + dy * dy + dz * dz) as f64) / (2.0 * sigma * sigma)).exp();
                        num += w * c[g.index(cl(x, dx, nx), cl(y, dy, ny), cl(z, dz, nz))] as f64;
                        den += w;
                    }
                }
            }
            num / den
        })
        .collect()
}

// ---------------------------------------------------------------- criteria

#[test]
fn loss_correctness() {
    let t0 = Instant::now();
    let g = Grid::unit([8, 8, 8]).unwrap();
    let mut r = rng(11);
    let mut worst_ncc: f64 = 0.0;
    let mut worst_reg: f64 = 0.0;
    for case in 0..20 {
        let a = random_volume(g, &mut r);
        let b = random_volume(g, &mut r);
        let w = [3, 5, 7, 9][case % 4];
        let fast = local_ncc(&a, &b, w).unwrap();
        worst_ncc = worst_ncc.max((fast - brute_local_ncc(&a, &b, w)).abs());
        let comps = [0, 1, 2].map(|_| (0..g.len()).map(|_| r.gen_range(-2.0f32..2.0)).collect());
        let u = DispField::from_components(g, comps).unwrap();
        worst_reg = worst_reg.max((grad_l2(&u).unwrap() - brute_grad_l2(&u)).abs());
    }
    let el = t0.elapsed();
    check(
        "loss correctness",
        worst_ncc <= 1e-6 && worst_reg <= 1e-10 && el < Duration::from_secs(5),
        format!("max |ncc err| {worst_ncc:.2e} (tol 1e-6), max |reg err| {worst_reg:.2e} (tol 1e-10), {el:.2?} (< 5 s)"),
    );
}

#[test]
fn gradient_check() {
    let t0 = Instant::now();
    let g = Grid::unit([6, 6, 6]).unwrap();
    let mut r = rng(12);
    let h = 1e-3f32;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for case in 0..20 {
        let moving = random_volume(g, &mut r);
        let fixed = random_volume(g, &mut r);
        let p = LossParams {
            window: [3, 5][case % 2],
            ..Default::default()
        };
        // Mapped positions stay inside the volume and away from cell faces,
        // where the trilinear sampler is not differentiable.
        let u = DispField::from_fn(g, |x, y, z| {
            let c = [x, y, z];
            let mut d = [0.0f32; 3];
            for k in 0..3 {
                let target_cell = (c[k] as i64 + r_cell(case, c, k)).clamp(0, 4) as f32;
                let frac = 0.1 + 0.8 * frac_hash(case, c, k);
                d[k] = target_cell + frac - c[k] as f32;
            }
            d
        })
        .unwrap();
        let (_, grad) = loss_gradient(&moving, &fixed, &u, &p).unwrap();
        for k in 0..3 {
            for i in 0..g.len() {
                let mut comps = u.clone().into_components();
                let base = comps[k][i];
                comps[k][i] = base + h;
                let hp = comps[k][i];
                let up = DispField::from_components(g, comps.clone()).unwrap();
                comps[k][i] = base - h;
                let hm = comps[k][i];
                let um = DispField::from_components(g, comps).unwrap();
                let lp = total_loss(&moving, &fixed, &up, &p).unwrap().total;
                let lm = total_loss(&moving, &fixed, &um, &p).unwrap().total;
                let numeric = (lp - lm) / (hp as f64 - hm as f64);
                let analytic = grad.comps[k][i];
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic - numeric).abs() / scale);
                checked += 1;
            }
        }
    }
    let el = t0.elapsed();
    check(
        "gradient check",
        worst <= 1e-3 && el < Duration::from_secs(30),
        format!("{checked} components, max relative error {worst:.2e} (tol 1e-3), {el:.2?} (< 30 s)"),
    );
}

fn mix(case: usize, c: [usize; 3], k: usize) -> u64 {
    let mut x = (case as u64) << 48 ^ (c[0] as u64) << 32 ^ (c[1] as u64) << 16 ^ (c[2] as u64) << 4 ^ k as u64;
    x = x.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 29;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 32)
}

fn frac_hash(case: usize, c: [usize; 3], k: usize) -> f32 {
    (mix(case, c, k) % 10_000) as f32 / 10_000.0
}

fn r_cell(case: usize, c: [usize; 3], k: usize) -> i64 {
    (mix(case + 1000, c, k) % 3) as i64 - 1
}

#[test]
fn field_algebra() {
    let mut failures = Vec::new();
    let mut r = rng(13);
    let g = Grid::unit([8, 7, 6]).unwrap();
    let id = DispField::identity(g);
    let comps = [0, 1, 2].map(|_| (0..g.len()).map(|_| r.gen_range(-1.5f32..1.5)).collect());
    let u = DispField::from_components(g, comps).unwrap();

    if compose(&u, &id).unwrap() != u || compose(&id, &u).unwrap() != u {
        failures.push("compose with identity");
    }
    let t1 = DispField::constant(g, [0.5, -1.0, 0.25]);
    let t2 = DispField::constant(g, [1.0, 0.5, -0.75]);
    if compose(&t1, &t2).unwrap() != DispField::constant(g, [1.5, -0.5, -0.5]) {
        failures.push("translations add");
    }

    // Sequential warping equals warping with the composition on a linear image.
    let img = Volume3::from_fn(g, |x, y, z| (0.5 * x as f64 + 0.25 * y as f64 - 0.75 * z as f64) as f32).unwrap();
    let small = |s: f32| {
        DispField::from_fn(g, move |x, y, z| {
            let t = (x + 2 * y + 3 * z) as f32;
            [s * (0.3 * t).sin(), s * (0.2 * t).cos(), s * (0.1 * t).sin()]
        })
        .unwrap()
    };
    let (a, b) = (small(0.5), small(-0.4));
    let seq = warp(&warp(&img, &a, InterpMode::Linear).unwrap(), &b, InterpMode::Linear).unwrap();
    let once = warp(&img, &compose(&a, &b).unwrap(), InterpMode::Linear).unwrap();
    let mut worst_comp: f64 = 0.0;
    for z in 2..4 {
        for y in 2..5 {
            for x in 2..6 {
                worst_comp = worst_comp.max((seq.at(x, y, z) - once.at(x, y, z)).abs() as f64);
            }
        }
    }
    if worst_comp > 1e-5 {
        failures.push("double-warp oracle");
    }

    let cg = Grid::unit([4, 4, 4]).unwrap();
    let c = DispField::constant(cg, [0.5, 1.0, -2.0]);
    let fine = Grid::new([8; 3], [0.5; 3], [0.0; 3]).unwrap();
    if upsample2(&c, [8, 8, 8]).unwrap() != DispField::constant(fine, [1.0, 2.0, -4.0]) {
        failures.push("upsample constant");
    }
    if upsample2(&DispField::identity(cg), [7, 8, 8]).unwrap().max_magnitude() != 0.0 {
        failures.push("upsample identity");
    }
    let lin = DispField::from_fn(cg, |x, y, z| [x as f32, 0.5 * y as f32, 0.25 * z as f32]).unwrap();
    let up = upsample2(&lin, [8, 8, 8]).unwrap();
    let mut worst_up: f64 = 0.0;
    for i in 0..up.grid().len() {
        let [x, y, z] = up.grid().coords(i);
        if x <= 6 && y <= 6 && z <= 6 {
            let e = [x as f64, 0.5 * y as f64, 0.25 * z as f64];
            let v = up.at(i);
            for k in 0..3 {
                worst_up = worst_up.max((v[k] as f64 - e[k]).abs());
            }
        }
    }
    if worst_up > 1e-6 {
        failures.push("upsample linear oracle");
    }

    if jacobian_determinants(&id).unwrap().iter().any(|&d| d != 1.0) {
        failures.push("jacobian identity");
    }
    let dil = DispField::from_fn(g, |x, y, z| [0.1 * x as f32, 0.1 * y as f32, 0.1 * z as f32]).unwrap();
    let jd = jacobian_determinants(&dil).unwrap();
    if jd.iter().any(|d| (d - 1.331).abs() > 1e-5) {
        failures.push("jacobian dilation");
    }

    let ndv_id = format!("{:.4}", ndv(&id).unwrap());
    if ndv_id != "0.0000" {
        failures.push("ndv identity formatting");
    }
    let sg = Grid::unit([8, 8, 8]).unwrap();
    let swap = DispField::from_fn(sg, |x, _, _| match x {
        3 => [1.0, 0.0, 0.0],
        4 => [-1.0, 0.0, 0.0],
        _ => [0.0; 3],
    })
    .unwrap();
    let ndv_swap = ndv(&swap).unwrap();
    if !(ndv_swap > 0.0) {
        failures.push("plane swap folds");
    }
    check(
        "field algebra",
        failures.is_empty(),
        format!(
            "failed: {failures:?}; double-warp err {worst_comp:.2e}, upsample err {worst_up:.2e}, ndv(identity) {ndv_id}, ndv(swap) {ndv_swap:.4}"
        ),
    );
}

#[test]
fn metric_oracles() {
    let t0 = Instant::now();
    let mut r = rng(14);
    let mut mismatches = Vec::new();
    let mut worst_hd: f64 = 0.0;
    for case in 0..50 {
        let dims = [0, 1, 2].map(|_| r.gen_range(6..=16));
        let spacing = [0, 1, 2].map(|_| [0.5, 1.0, 1.5, 2.0][r.gen_range(0..4)]);
        let g = Grid::new(dims, spacing, [0.0; 3]).unwrap();
        // Random blobs: a few balls per label, painted in order.
        let paint = |r: &mut ChaCha8Rng| {
            let mut data = vec![0u32; g.len()];
            for label in 1..=3u32 {
                for _ in 0..2 {
                    let c = [0, 1, 2].map(|k| r.gen_range(0.0..dims[k] as f64));
                    let rad = r.gen_range(1.0..4.0);
                    for (i, d) in data.iter_mut().enumerate() {
                        let p = g.coords(i);
                        if (0..3).map(|k| (p[k] as f64 - c[k]).powi(2)).sum::<f64>() <= rad * rad {
                            *d = label;
                        }
                    }
                }
            }
            LabelMap::new(g, data).unwrap()
        };
        let a = paint(&mut r);
        let b = paint(&mut r);

        let d = dice(&a, &b).unwrap();
        for (&l, &v) in &d.per_label {
            if v != brute_dice(&a, &b, l) {
                mismatches.push(format!("dice case {case} label {l}"));
            }
        }
        let h = hd95(&a, &b).unwrap();
        for (&l, &v) in &h.per_label {
            let ma: Vec<bool> = a.data().iter().map(|&x| x == l).collect();
            let mb: Vec<bool> = b.data().iter().map(|&x| x == l).collect();
            worst_hd = worst_hd.max((v - brute_hd95(&ma, &mb, &g)).abs());
        }

        // Integer-valued field and half-voxel landmarks keep every
        // intermediate exactly representable.
        let comps = [0, 1, 2].map(|_| (0..g.len()).map(|_| r.gen_range(-2i32..=2) as f32).collect());
        let u = DispField::from_components(g, comps).unwrap();
        let n = r.gen_range(1..8);
        let vox: Vec<[f64; 3]> = (0..n)
            .map(|_| [0, 1, 2].map(|k| r.gen_range(0..(2 * dims[k] - 2)) as f64 / 2.0))
            .collect();
        let fixed = LandmarkSet::new(vox.iter().map(|v| g.voxel_to_world(*v)).collect());
        let moving = LandmarkSet::new(
            (0..n)
                .map(|_| [0, 1, 2].map(|k| r.gen_range(0..(4 * dims[k])) as f64 * spacing[k] / 4.0))
                .collect(),
        );
        let t = tre(&fixed, &moving, &u).unwrap();
        let expect: Vec<f64> = vox
            .iter()
            .zip(&moving.points)
            .map(|(v, m)| {
                let mapped: Vec<f64> = (0..3)
                    .map(|k| (v[k] + trilinear(u.component(k), dims, *v)) * spacing[k])
                    .collect();
                (0..3).map(|k| (mapped[k] - m[k]).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        let mean = expect.iter().sum::<f64>() / n as f64;
        if t.per_point.iter().map(|p| p.unwrap()).collect::<Vec<_>>() != expect || t.mean != Some(mean) {
            mismatches.push(format!("tre case {case}"));
        }
    }
    let el = t0.elapsed();
    check(
        "metric oracles",
        mismatches.is_empty() && worst_hd <= 1e-9 && el < Duration::from_secs(60),
        format!("50 cases, mismatches {mismatches:?}, max hd95 err {worst_hd:.2e} (tol 1e-9), {el:.2?} (< 60 s)"),
    );
}

#[test]
fn synthetic_recovery() {
    let t0 = Instant::now();
    let pair = synthetic_pair(PhantomKind::Spheres, [64, 64, 64], 4.0, 2024).unwrap();
    let cfg = RegConfig::default();
    let zero = DispField::identity(*pair.fixed.grid());
    let labels = Some((&pair.fixed_labels, &pair.moving_labels));
    let lms = Some((&pair.fixed_landmarks, &pair.moving_landmarks));
    let pre = evaluate_pair("pre", labels, lms, &zero).unwrap();
    let (u, _) = register(&pair.moving, &pair.fixed, &cfg).unwrap();
    let el = t0.elapsed();
    let post = evaluate_pair("post", labels, lms, &u).unwrap();
    let lp = cfg.loss_params();
    let l0 = total_loss(&pair.moving, &pair.fixed, &zero, &lp).unwrap().total;
    let l1 = total_loss(&pair.moving, &pair.fixed, &u, &lp).unwrap().total;
    let (d0, d1) = (pre.dice_mean.unwrap(), post.dice_mean.unwrap());
    let (t_0, t_1) = (pre.tre_mm.unwrap(), post.tre_mm.unwrap());
    let ok = d1 >= d0 + 0.15 && t_1 <= 0.5 * t_0 && post.ndv_percent <= 0.1 && l1 < l0 && el < Duration::from_secs(300);
    check(
        "synthetic recovery",
        ok,
        format!(
            "dice {d0:.4} -> {d1:.4} (need +0.15), tre {t_0:.4} -> {t_1:.4} mm (need <= 0.5x), ndv {:.4}% (<= 0.1), loss {l0:.4} -> {l1:.4}, hd95 {:.4} -> {:.4} mm, {el:.2?} (< 300 s)",
            post.ndv_percent,
            pre.hd95_mm.unwrap(),
            post.hd95_mm.unwrap()
        ),
    );
}

#[test]
fn cascade_benefit() {
    // Three levels with the default 190-iteration total. The coarse level
    // plateaus after about 60 iterations, so the budget is split to leave the
    // full-resolution level enough iterations to converge.
    let cascade = RegConfig {
        bf_enabled: false,
        levels: vec![(4, 60), (2, 60), (1, 70)],
        ..Default::default()
    };
    let budget: usize = cascade.levels.iter().map(|l| l.1).sum();
    let single = RegConfig {
        levels: vec![(1, budget)],
        ..cascade.clone()
    };
    let lp = cascade.loss_params();
    let mut rows = Vec::new();
    let mut all = true;
    for seed in 0..5u64 {
        let kind = if seed % 2 == 0 { PhantomKind::Spheres } else { PhantomKind::Blobs };
        let pair = synthetic_pair(kind, [48, 48, 48], 4.0, 100 + seed).unwrap();
        let (uc, _) = register(&pair.moving, &pair.fixed, &cascade).unwrap();
        let (us, _) = register(&pair.moving, &pair.fixed, &single).unwrap();
        let lc = total_loss(&pair.moving, &pair.fixed, &uc, &lp).unwrap().total;
        let ls = total_loss(&pair.moving, &pair.fixed, &us, &lp).unwrap().total;
        all &= lc <= ls;
        rows.push(format!("{lc:.4}<={ls:.4}"));
    }
    check(
        "cascade benefit",
        all,
        format!("cascade vs single-level total loss at {budget} iterations: {}", rows.join(", ")),
    );
}

#[test]
fn bilateral_filter_properties() {
    let mut r = rng(15);
    let mut notes = Vec::new();

    // Gaussian limit.
    let g = Grid::unit([9, 8, 7]).unwrap();
    let comps = [0, 1, 2].map(|_| (0..g.len()).map(|_| r.gen_range(-3.0f32..3.0)).collect());
    let u = DispField::from_components(g, comps).unwrap();
    let guide = random_volume(g, &mut r);
    let p = BFParams::new(1.2, 1e9).unwrap();
    let out = bilateral_filter(&u, &guide, &p).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let oracle = gaussian_smooth(u.component(k), &g, p.sigma_spatial, p.radius);
        for (a, b) in out.component(k).iter().zip(&oracle) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    let gauss_ok = worst <= 1e-6;
    notes.push(format!("gaussian limit err {worst:.2e} (tol 1e-6)"));

    // Edge preservation on a step guide.
    let g8 = Grid::unit([8, 8, 8]).unwrap();
    let step = Volume3::from_fn(g8, |x, _, _| if x < 4 { 0.0 } else { 100.0 }).unwrap();
    let pc = DispField::from_fn(g8, |x, _, _| if x < 4 { [2.0, -1.0, 0.5] } else { [-3.0, 1.5, 0.0] }).unwrap();
    let bf = bilateral_filter(&pc, &step, &BFParams::new(1.5, 1.0).unwrap()).unwrap();
    let mut edge_err: f64 = 0.0;
    for k in 0..3 {
        for (a, b) in bf.component(k).iter().zip(pc.component(k)) {
            edge_err = edge_err.max((a - b).abs() as f64);
        }
    }
    let edge_ok = edge_err <= 1e-3;
    notes.push(format!("edge err {edge_err:.2e} (tol 1e-3)"));

    // Convex-combination bound over every voxel of a 22^3 field.
    let gb = Grid::unit([22, 22, 22]).unwrap();
    let comps = [0, 1, 2].map(|_| (0..gb.len()).map(|_| r.gen_range(-5.0f32..5.0)).collect());
    let ub = DispField::from_components(gb, comps).unwrap();
    let guide_b = random_volume(gb, &mut r);
    let pb = BFParams::new(1.0, 0.2).unwrap();
    let ob = bilateral_filter(&ub, &guide_b, &pb).unwrap();
    let rr = pb.radius as i64;
    let cl = |c: usize, d: i64| (c as i64 + d).clamp(0, 21) as usize;
    let mut violations = 0usize;
    for i in 0..gb.len() {
        let [x, y, z] = gb.coords(i);
        for k in 0..3 {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for dz in -rr..=rr {
                for dy in -rr..=rr {
                    for dx in -rr..=rr {
                        let v = ub.component(k)[gb.index(cl(x, dx), cl(y, dy), cl(z, dz))];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            let o = ob.component(k)[i];
            if o < lo || o > hi {
                violations += 1;
            }
        }
    }
    notes.push(format!("{} voxels, {violations} bound violations", gb.len()));
    check(
        "bilateral filter",
        gauss_ok && edge_ok && violations == 0,
        notes.join(", "),
    );
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_deformreg")).args(args).output().expect("spawn cli")
}

#[test]
fn determinism_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let out = run_cli(&["phantom", "--dims", "32,32,32", "--seed", "7", "--out-dir", &s(d)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut fields = Vec::new();
    for jobs in ["1", "8"] {
        let f = d.join(format!("field_{jobs}.nii.gz"));
        let out = run_cli(&[
            "--jobs",
            jobs,
            "register",
            "--moving",
            &s(&d.join("moving.nii.gz")),
            "--fixed",
            &s(&d.join("fixed.nii.gz")),
            "--out-field",
            &s(&f),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fields.push(std::fs::read(&f).unwrap());
    }
    check(
        "determinism",
        fields[0] == fields[1],
        format!("field files for --jobs 1 and --jobs 8: {} and {} bytes, identical = {}", fields[0].len(), fields[1].len(), fields[0] == fields[1]),
    );
}
