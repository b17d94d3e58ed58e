use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;

use spdist_core::depthio::{load_depth_frame, write_depth_png, DepthFrame, Intrinsics, DEFAULT_UNIT_SCALE};
use spdist_core::geometry::{backproject, cluster_record, project, sample_pairs, solidity, BBoxNorm, ClusterRecord, Point3};
use spdist_core::superpix::{is_four_connected, segment_frame, SlicParams};

fn intrinsics() -> impl Strategy<Value = Intrinsics> {
    (20.0f64..600.0, 20.0f64..600.0, 0.0f64..63.0, 0.0f64..47.0).prop_map(|(fx, fy, cx, cy)| Intrinsics {
        fx,
        fy,
        cx,
        cy,
        width: 64,
        height: 48,
    })
}

fn record(id: u32, p: (f64, f64, f64)) -> ClusterRecord {
    ClusterRecord {
        id,
        pixel_count: 1,
        centroid: Point3::new(p.0, p.1, p.2),
        depth_std: 0.0,
        solidity: 1.0,
        missing_frac: 0.0,
        bbox_norm: BBoxNorm {
            u0: 0.0,
            v0: 0.0,
            u1: 0.5,
            v1: 0.5,
        },
    }
}

proptest! {
    #[test]
    fn projection_inverts_backprojection(intr in intrinsics(), u in 0.0f64..64.0, v in 0.0f64..48.0, z in 0.05f64..30.0) {
        let p = backproject(u, v, z, &intr).unwrap();
        prop_assert!((p.z - z).abs() < 1e-12);
        let (pu, pv) = project(&p, &intr);
        prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
    }

    #[test]
    fn sampled_pairs_are_distinct_and_metric(
        pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.5f64..8.0), 0..15),
        max_pairs in 1usize..120,
        seed in any::<u64>(),
    ) {
        let recs: Vec<ClusterRecord> = pts.iter().enumerate().map(|(i, &p)| record(i as u32, p)).collect();
        let pairs = sample_pairs("f", &recs, max_pairs, seed);
        let n = recs.len();
        prop_assert_eq!(pairs.len(), max_pairs.min(n * n.saturating_sub(1) / 2));
        let keys: BTreeSet<(u32, u32)> = pairs.iter().map(|p| (p.id_a, p.id_b)).collect();
        prop_assert_eq!(keys.len(), pairs.len());
        prop_assert_eq!(&pairs, &sample_pairs("f", &recs, max_pairs, seed));
        for p in &pairs {
            prop_assert!(p.id_a < p.id_b);
            let (a, b) = (recs[p.id_a as usize].centroid, recs[p.id_b as usize].centroid);
            prop_assert!((p.distance - b.distance(&a)).abs() < 1e-12);
            for c in &recs {
                prop_assert!(p.distance <= a.distance(&c.centroid) + c.centroid.distance(&b) + 1e-9);
            }
        }
    }

    #[test]
    fn solidity_is_a_fraction(cells in prop::collection::btree_set((0usize..12, 0usize..12), 1..60)) {
        let mask: Vec<(usize, usize)> = cells.into_iter().collect();
        let s = solidity(&mask).unwrap();
        prop_assert!(s > 0.0 && s <= 1.0);
    }

    #[test]
    fn rectangles_are_fully_solid(r0 in 0usize..10, c0 in 0usize..10, h in 1usize..8, w in 1usize..8) {
        let mask: Vec<(usize, usize)> = (r0..r0 + h).flat_map(|r| (c0..c0 + w).map(move |c| (r, c))).collect();
        prop_assert_eq!(solidity(&mask).unwrap(), 1.0);
    }

    #[test]
    fn bbox_flip_is_an_involution(u0 in 0.0f64..0.5, v0 in 0.0f64..0.5, du in 0.01f64..0.5, dv in 0.01f64..0.5) {
        let b = BBoxNorm { u0, v0, u1: u0 + du, v1: v0 + dv };
        let f = b.flip_horizontal();
        prop_assert!(f.is_valid());
        let back = f.flip_horizontal();
        prop_assert!((back.u0 - b.u0).abs() < 1e-12 && (back.u1 - b.u1).abs() < 1e-12 && back.v0 == b.v0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn slic_labels_every_pixel_with_connected_segments(
        w in 16usize..48,
        h in 16usize..48,
        k in 4usize..60,
        holes in 0.0f64..0.3,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let depth = Array2::from_shape_fn((h, w), |(r, c)| {
            if rng.random_bool(holes) { 0.0 } else { 1.0 + 0.05 * r as f64 + if c > w / 2 { 1.0 } else { 0.0 } }
        });
        let frame = DepthFrame::from_depth(depth, Intrinsics::centered(w, h, 40.0), "p", 0).unwrap();
        let params = SlicParams { n_segments: k, ..SlicParams::default() };
        let sp = segment_frame(&frame, &params).unwrap();
        prop_assert!(sp.labels.iter().all(|&l| (l as usize) < sp.n));
        prop_assert!(sp.members().iter().all(|m| !m.is_empty()));
        prop_assert!(is_four_connected(&sp));
        prop_assert_eq!(&sp, &segment_frame(&frame, &params).unwrap());
        for (i, m) in sp.members().iter().enumerate() {
            let rec = cluster_record(&frame, i as u32, m).unwrap();
            prop_assert!(rec.bbox_norm.is_valid());
            prop_assert!((0.0..=1.0).contains(&rec.missing_frac));
        }
    }

    #[test]
    fn depth_png_round_trips_to_the_unit(vals in prop::collection::vec(prop_oneof![Just(0.0f64), 0.001f64..60.0], 12 * 10)) {
        let dir = tempfile::tempdir().unwrap();
        let intr = Intrinsics::centered(12, 10, 10.0);
        let frame = DepthFrame::from_depth(Array2::from_shape_vec((10, 12), vals).unwrap(), intr, "d", 0).unwrap();
        let path = dir.path().join("d.png");
        write_depth_png(&frame, &path, DEFAULT_UNIT_SCALE).unwrap();
        let back = load_depth_frame(&path, &intr, DEFAULT_UNIT_SCALE).unwrap();
        for (a, b) in frame.depth.iter().zip(back.depth.iter()) {
            if *a >= DEFAULT_UNIT_SCALE / 2.0 {
                prop_assert!((a - b).abs() <= DEFAULT_UNIT_SCALE / 2.0 + 1e-12);
            }
        }
    }
}
