use proptest::prelude::*;

use ssc_core::geometry::{back_project, project, CameraIntrinsics, CameraPose, DepthRaster, Resolution, VolumeSpec};
use ssc_core::io::{decode_depth, decode_labels, decode_occupancy, encode_depth, encode_labels, encode_occupancy, Checkpoint};
use ssc_core::metrics::evaluate;
use ssc_core::numerics::{softmax_normalize, ParamSet, Rng};
use ssc_core::stage1::proposal_mask;
use ssc_core::stage1::QueryMode;
use ssc_core::voxel::{downsample_occupancy, LabelGrid, OccupancyGrid, IGNORE};

fn dims() -> impl Strategy<Value = [usize; 3]> {
    (1usize..7, 1usize..7, 1usize..5).prop_map(|(h, w, z)| [h, w, z])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn label_files_round_trip(d in dims(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let n = d.iter().product();
        let labels = (0..n).map(|_| if rng.bernoulli(0.1) { IGNORE } else { rng.below(6) as u8 }).collect();
        let g = LabelGrid::new(d, [rng.normal(), rng.normal(), rng.normal()], 0.25, labels).unwrap();
        prop_assert_eq!(decode_labels(&encode_labels(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn occupancy_files_round_trip(d in dims(), bits in proptest::collection::vec(any::<bool>(), 150)) {
        let n = d.iter().product();
        let g = OccupancyGrid::new(d, [0.0, -1.0, 0.5], 0.5, bits[..n].to_vec()).unwrap();
        prop_assert_eq!(decode_occupancy(&encode_occupancy(&g).unwrap()).unwrap(), g);
    }

    #[test]
    fn depth_files_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let z = (0..w * h).map(|_| if rng.bernoulli(0.2) { -1.0 } else { rng.uniform(0.1, 80.0) }).collect();
        let d = DepthRaster::new(w, h, z).unwrap();
        prop_assert_eq!(decode_depth::<f64>(&encode_depth(&d)).unwrap(), d);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
        let mut rng = Rng::new(seed);
        let mut p = ParamSet::<f64>::new();
        p.insert_normal("b.w", vec![rows, cols], 1.0, &mut rng);
        p.insert_normal("a.v", vec![cols], 1.0, &mut rng);
        let mut ck = Checkpoint::from_params(&p);
        ck.meta.insert("seed".into(), seed.to_string());
        prop_assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
    }

    #[test]
    fn projection_inverts_back_projection(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let intr = CameraIntrinsics::new(rng.uniform(10.0, 90.0), rng.uniform(10.0, 90.0), 4.0, 3.0, 8, 6).unwrap();
        let eye = [rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(0.0, 3.0)];
        let target = [eye[0] + rng.uniform(0.5, 3.0), eye[1] + rng.uniform(-1.0, 1.0), eye[2] + rng.uniform(-1.0, 1.0)];
        let pose = CameraPose::look_at(eye, target).unwrap();
        let z: Vec<f64> = (0..48).map(|_| rng.uniform(0.2, 50.0)).collect();
        let pts = back_project(&DepthRaster::new(8, 6, z).unwrap(), &intr, &pose).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let (uv, inside) = project(*p, &intr, &pose);
            prop_assert!(inside);
            prop_assert!((uv[0] - (i % 8) as f64).abs() < 1e-9 && (uv[1] - (i / 8) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_a_distribution(xs in proptest::collection::vec(-700.0f64..700.0, 1..9)) {
        let p = softmax_normalize(&xs).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn occupancy_iou_is_symmetric(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let draw = |rng: &mut Rng| (0..64).map(|_| rng.below(3) as u8).collect::<Vec<_>>();
        let a = LabelGrid::new([4, 4, 4], [0.0, -2.0, 0.0], 1.0, draw(&mut rng)).unwrap();
        let b = LabelGrid::new([4, 4, 4], [0.0, -2.0, 0.0], 1.0, draw(&mut rng)).unwrap();
        let ab = evaluate(&a, &b, 3, &[2.0, 4.0]).unwrap();
        let ba = evaluate(&b, &a, 3, &[2.0, 4.0]).unwrap();
        for (x, y) in ab.ranges.iter().zip(&ba.ranges) {
            prop_assert_eq!(x.iou, y.iou);
            prop_assert_eq!(x.precision, y.recall);
            prop_assert_eq!(&x.class_iou, &y.class_iou);
        }
    }

    #[test]
    fn pooling_keeps_every_occupied_cell(seed in any::<u64>()) {
        let spec = VolumeSpec::new([0.0; 3], 0.5, [8, 8, 4], [4, 4, 2]).unwrap();
        let mut rng = Rng::new(seed);
        let mut g = OccupancyGrid::filled(&spec, Resolution::Output, false);
        g.labels_mut().iter_mut().for_each(|b| *b = rng.bernoulli(0.05));
        let pooled = downsample_occupancy(&g, &spec).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..4 {
                    if g.get([i, j, k]) {
                        prop_assert!(pooled.get([i / 2, j / 2, k / 2]));
                    }
                }
            }
        }
        prop_assert!(pooled.popcount() <= g.popcount());
    }

    #[test]
    fn dense_and_occupancy_proposals(seed in any::<u64>()) {
        let spec = VolumeSpec::new([0.0; 3], 0.5, [8, 8, 4], [4, 4, 2]).unwrap();
        let mut rng = Rng::new(seed);
        let mut m = OccupancyGrid::filled(&spec, Resolution::Query, false);
        m.labels_mut().iter_mut().for_each(|b| *b = rng.bernoulli(0.3));
        prop_assert_eq!(&proposal_mask(QueryMode::Occupancy, &m, &spec, &mut rng), &m);
        prop_assert_eq!(proposal_mask(QueryMode::Dense, &m, &spec, &mut rng).popcount(), 32);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn nested_ranges_dominate_counts(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let draw = |rng: &mut Rng| (0..256).map(|_| rng.below(4) as u8).collect::<Vec<_>>();
        let a = LabelGrid::new([8, 8, 4], [0.0, -2.0, 0.0], 0.5, draw(&mut rng)).unwrap();
        let b = LabelGrid::new([8, 8, 4], [0.0, -2.0, 0.0], 0.5, draw(&mut rng)).unwrap();
        let c = ssc_core::metrics::confusion_by_range(&a, &b, 4, &[1.0, 2.5, 4.0]).unwrap();
        for w in c.windows(2) {
            for g in 0..4 {
                for p in 0..4 {
                    prop_assert!(w[0].1.get(g, p) <= w[1].1.get(g, p));
                }
            }
        }
    }
}
