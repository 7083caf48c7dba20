mod common;

use diffcom::geom::io::{encode_point_cloud, load_any, parse_npy, write_point_cloud, PointFormat};
use diffcom::geom::{
    bd_metrics, chamfer_distance, d1_psnr, farthest_point_sampling_from, fps_canonical, knn, RdPoint,
};
use diffcom::{PointCloud, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn curve(c: &[(f64, f64)]) -> Vec<RdPoint> {
    c.iter().map(|&(bpp, psnr)| RdPoint { bpp, psnr }).collect()
}

#[test]
fn fps_knn_and_chamfer_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for inst in 0..40 {
        let n = rng.gen_range(2..300);
        let pts = common::random_points(n, inst);
        let m = rng.gen_range(1..=n);
        let first = rng.gen_range(0..n);
        assert_eq!(farthest_point_sampling_from(&pts, m, first).unwrap(), common::fps(&pts, m, first));

        let q = common::random_points(rng.gen_range(1..50), 1000 + inst);
        let k = rng.gen_range(1..=n.min(16));
        assert_eq!(knn(&q, &pts, k).unwrap(), common::knn(&q, &pts, k));

        let a = PointCloud::new(pts.clone()).unwrap();
        let b = PointCloud::new(q.clone()).unwrap();
        let cd = chamfer_distance(&a, &b).unwrap();
        assert!((cd - common::chamfer(&pts, &q)).abs() < 1e-9);
        let psnr = d1_psnr(&a, &b, Some(2.0)).unwrap();
        assert!((psnr - common::d1_psnr(&pts, &q, 2.0)).abs() < 1e-9);
    }
}

#[test]
fn canonical_fps_ignores_point_order() {
    let pts = common::random_points(200, 9);
    let perm: Vec<usize> = (0..200).rev().collect();
    let shuffled = pts.gather_rows(&perm);
    let a = fps_canonical(&pts, 20, 3).unwrap();
    let b: Vec<usize> = fps_canonical(&shuffled, 20, 3).unwrap().into_iter().map(|i| perm[i]).collect();
    assert_eq!(a, b);
}

#[test]
fn sampling_rejects_bad_counts() {
    let pts = common::random_points(5, 1);
    assert!(farthest_point_sampling_from(&pts, 6, 0).is_err());
    assert!(farthest_point_sampling_from(&pts, 2, 5).is_err());
    assert!(knn(&pts, &pts, 6).is_err());
}

#[test]
fn bd_matches_numeric_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let n = rng.gen_range(4..8);
        let a = common::random_curve(&mut rng, n);
        let b: Vec<(f64, f64)> =
            a.iter().map(|&(r, p)| (r * rng.gen_range(0.8..1.2), p + rng.gen_range(-1.0..1.5))).collect();
        let b = {
            let mut b = b;
            b.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
            b
        };
        if b.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            continue;
        }
        let got = bd_metrics(&curve(&a), &curve(&b));
        let Ok(got) = got else { continue };
        let (psnr, rate) = common::bd(&a, &b, 10_000);
        assert!((got.bd_psnr - psnr).abs() < 1e-6, "{} vs {psnr}", got.bd_psnr);
        assert!((got.bd_rate - rate).abs() < 1e-6 * (1.0 + rate.abs()), "{} vs {rate}", got.bd_rate);
    }
}

#[test]
fn bd_shift_gives_one_db() {
    let a = [(0.1, 30.0), (0.2, 33.0), (0.45, 35.5), (0.9, 37.0), (1.6, 38.2)];
    let b: Vec<(f64, f64)> = a.iter().map(|&(r, p)| (r, p + 1.0)).collect();
    let r = bd_metrics(&curve(&a), &curve(&b)).unwrap();
    assert!((r.bd_psnr - 1.0).abs() < 1e-9);
    let same = bd_metrics(&curve(&a), &curve(&a)).unwrap();
    assert!(same.bd_psnr.abs() < 1e-9 && same.bd_rate.abs() < 1e-9);
}

#[test]
fn point_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let pts = Tensor::from_vec(3, 3, vec![0.0, 0.5, -1.0, 1.25, 2.0, 3.5, -0.75, 0.125, 8.0]);
    let pc = PointCloud::new(pts.clone()).unwrap();
    for (name, fmt) in [("a.ply", PointFormat::PlyBinaryLe), ("b.ply", PointFormat::PlyAscii), ("c.xyz", PointFormat::XyzText)] {
        let p = dir.path().join(name);
        write_point_cloud(&p, &pc, fmt).unwrap();
        assert_eq!(load_any(&p).unwrap().points(), &pts, "{name}");
    }
    let garbage = dir.path().join("bad.ply");
    std::fs::write(&garbage, b"not a ply").unwrap();
    assert!(load_any(&garbage).is_err());
    assert!(!encode_point_cloud(&pc, PointFormat::PlyAscii).is_empty());
}

#[test]
fn npy_little_endian_float64() {
    let header = "{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }";
    let mut h = header.to_string();
    while !(10 + h.len() + 1).is_multiple_of(64) {
        h.push(' ');
    }
    h.push('\n');
    let mut bytes = b"\x93NUMPY\x01\x00".to_vec();
    bytes.extend_from_slice(&(h.len() as u16).to_le_bytes());
    bytes.extend_from_slice(h.as_bytes());
    for v in [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let t = parse_npy(&bytes).unwrap();
    assert_eq!(t.shape(), (2, 3));
    assert_eq!(t.get(1, 2), 6.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chamfer_is_symmetric_and_zero_on_self(seed in any::<u64>(), n in 1usize..120, m in 1usize..120) {
        let a = PointCloud::new(common::random_points(n, seed)).unwrap();
        let b = PointCloud::new(common::random_points(m, seed ^ 1)).unwrap();
        let ab = chamfer_distance(&a, &b).unwrap();
        prop_assert!((ab - chamfer_distance(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn fps_prefix_is_stable(seed in any::<u64>(), n in 2usize..200) {
        let pts = common::random_points(n, seed);
        let full = farthest_point_sampling_from(&pts, n, 0).unwrap();
        let mut sorted = full.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let half = farthest_point_sampling_from(&pts, n / 2 + 1, 0).unwrap();
        prop_assert_eq!(&full[..half.len()], &half[..]);
    }

    #[test]
    fn unit_cube_normalization_inverts(seed in any::<u64>(), n in 1usize..100, s in 0.01f64..100.0) {
        let raw = common::random_points(n, seed).map(|v| v * s + 3.0);
        let pc = PointCloud::new(raw.clone()).unwrap();
        let norm = pc.normalize_unit_cube().unwrap();
        let (lo, hi) = norm.bounds();
        prop_assert!(lo.iter().all(|&v| v >= -0.5) && hi.iter().all(|&v| v <= 0.5));
        let back = norm.denormalize();
        let err = back.points().zip_map(&raw, |a, b| (a - b).abs()).max_abs();
        prop_assert!(err < 1e-9 * s.max(1.0));
    }
}
