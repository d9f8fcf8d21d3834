use deformreg::{
    dice, load_labels, load_volume, make_phantom, save_labels, save_volume, Grid, LabelMap, LandmarkSet, PhantomKind,
    Volume3,
};

#[test]
fn volume_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    // Header geometry is single precision, so pick f32-exact metadata.
    let g = Grid::new([7, 5, 6], [0.75, 1.25, 2.5], [-10.0, 3.5, 42.0]).unwrap();
    let v = Volume3::from_fn(g, |x, y, z| ((x * 31 + y * 17 + z * 7) as f32).sin() * 1e3 + 1e-7).unwrap();
    for name in ["v.nii", "v.nii.gz"] {
        let path = dir.path().join(name);
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.grid(), v.grid());
        let same = back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{name}");
    }
}

#[test]
fn ramp_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ramp.nii.gz");
    let g = Grid::unit([8, 8, 8]).unwrap();
    save_volume(&Volume3::from_fn(g, |x, _, _| x as f32).unwrap(), &path).unwrap();
    let back = load_volume(&path).unwrap();
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(back.at(x, y, z), x as f32);
            }
        }
    }
}

#[test]
fn full_size_scan_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scan.nii.gz");
    let g = Grid::unit([160, 224, 192]).unwrap();
    save_volume(&Volume3::filled(g, 0.5).unwrap(), &path).unwrap();
    let back = load_volume(&path).unwrap();
    assert_eq!(back.dims(), [160, 224, 192]);
    assert_eq!(back.grid().spacing, [1.0, 1.0, 1.0]);
}

#[test]
fn label_values_preserved() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lab.nii.gz");
    let g = Grid::unit([6, 6, 6]).unwrap();
    let data = (0..g.len()).map(|i| [0, 1, 5][i % 3]).collect();
    let l = LabelMap::new(g, data).unwrap();
    save_labels(&l, &path).unwrap();
    let back = load_labels(&path).unwrap();
    assert_eq!(back.label_set(), &[0, 1, 5]);
    assert_eq!(back, l);
}

#[test]
fn phantom_self_dice_is_one() {
    let p = make_phantom(PhantomKind::Spheres, [32, 32, 32], 11).unwrap();
    let d = dice(&p.labels, &p.labels).unwrap();
    assert!(d.per_label.values().all(|&v| v == 1.0));
    assert_eq!(d.mean, 1.0);
}

#[test]
fn phantom_is_deterministic_including_landmarks() {
    let a = make_phantom(PhantomKind::Blobs, [24, 20, 28], 5).unwrap();
    let b = make_phantom(PhantomKind::Blobs, [24, 20, 28], 5).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.landmarks, b.landmarks);
    assert_eq!(a.landmarks.len(), a.labels.foreground_labels().count());
}

#[test]
fn sphere_centroid_landmark() {
    let g = Grid::unit([48, 56, 64]).unwrap();
    let c = [20.0, 30.0, 40.0];
    let data = (0..g.len())
        .map(|i| {
            let p = g.coords(i);
            let r2: f64 = (0..3).map(|k| (p[k] as f64 - c[k]).powi(2)).sum();
            u32::from(r2 <= 36.0)
        })
        .collect();
    let l = LabelMap::new(g, data).unwrap();
    let lm = LandmarkSet::from_label_centroids(&l);
    assert_eq!(lm.len(), 1);
    for k in 0..3 {
        assert!((lm.points[0][k] - c[k]).abs() < 1e-12);
    }
}
