mod common;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use sercloud::serialize::{
    argsort_codes, compute_codes, serialize_all, PointCloud, SerializationConfig, SerializedCode,
};
use sercloud::sfc::{encode, BitsPerAxis, CurvePattern, GridCoord};
use sercloud::tensor::FeatureMatrix;
use sercloud::Error;

fn config(g: f64, b: u32, patterns: &[CurvePattern]) -> SerializationConfig {
    SerializationConfig::new(g, BitsPerAxis::new(b).unwrap(), patterns.to_vec()).unwrap()
}

fn cloud_with_batches(positions: Vec<[f64; 3]>, batch: Vec<u16>) -> PointCloud {
    let n = positions.len();
    PointCloud::new(positions, FeatureMatrix::from_vec(n, 1, vec![0.0; n]).unwrap(), batch).unwrap()
}

#[test]
fn code_formula_recomputed_independently() {
    let mut r = common::rng(10);
    let g = 0.01;
    let n = 1000;
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| [r.gen_range(-3.0..2.0), r.gen_range(0.5..1.0), r.gen_range(-0.1..0.1)])
        .collect();
    let batch: Vec<u16> = (0..n).map(|_| r.gen_range(0..500)).collect();
    let cloud = cloud_with_batches(positions.clone(), batch.clone());
    let min = [0, 1, 2].map(|a| positions.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min));
    for pattern in CurvePattern::ALL {
        let codes = compute_codes(&cloud, pattern, &config(g, 16, &[pattern])).unwrap();
        for i in 0..n {
            let cell = [0, 1, 2].map(|a| ((positions[i][a] - min[a]) / g).floor() as u32);
            let key = encode(pattern, GridCoord::new(cell[0], cell[1], cell[2]), BitsPerAxis::new(16).unwrap()).unwrap();
            assert_eq!(codes[i].0, ((batch[i] as u64) << 48) | key.0);
            assert_eq!(codes[i].batch(), batch[i]);
        }
    }
}

#[test]
fn hand_examples() {
    let line = PointCloud::from_positions((0..4).map(|x| [x as f64, 0.0, 0.0]).collect()).unwrap();
    let codes = compute_codes(&line, CurvePattern::Z, &config(1.0, 4, &[CurvePattern::Z])).unwrap();
    assert_eq!(codes.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 1, 8, 9]);

    let twins = cloud_with_batches(vec![[0.3, 0.2, 0.1]; 2], vec![0, 1]);
    let codes = compute_codes(&twins, CurvePattern::Hilbert, &config(0.1, 8, &[CurvePattern::Hilbert])).unwrap();
    assert_eq!(codes[1].0 - codes[0].0, 1 << 48);
    assert_eq!(codes[0].0 >> 48, 0);

    let (order, inverse) = argsort_codes(&[5, 1, 1, 0].map(SerializedCode));
    assert_eq!(order, vec![3, 1, 2, 0]);
    assert_eq!(inverse, vec![3, 1, 2, 0]);
    let (order, _) = argsort_codes(&[SerializedCode(7); 5]);
    assert_eq!(order, vec![0, 1, 2, 3, 4]);

    let single = PointCloud::from_positions(vec![[1.0, 2.0, 3.0]]).unwrap();
    let orders = serialize_all(&single, &config(1.0, 4, &[CurvePattern::Z])).unwrap();
    assert_eq!(orders[0].order, vec![0]);
}

#[test]
fn orders_are_valid_for_random_clouds() {
    for seed in 0..100 {
        let cloud = common::uniform_cloud(200 + seed as usize, 1, 1 + seed as usize % 4, seed);
        let orders = serialize_all(&cloud, &config(0.05, 8, &CurvePattern::ALL)).unwrap();
        assert_eq!(orders.len(), 4);
        for o in &orders {
            o.validate().unwrap();
            let batches: Vec<u16> = o.order.iter().map(|&i| cloud.batch()[i]).collect();
            assert!(batches.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

#[test]
fn serialization_ignores_input_order() {
    let mut r = common::rng(11);
    for seed in 0..10 {
        // A fine grid keeps codes distinct.
        let cloud = common::uniform_cloud(500, 2, 1, seed);
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        perm.shuffle(&mut r);
        let shuffled = cloud.permuted(&perm).unwrap();
        let cfg = config(1e-4, 14, &CurvePattern::ALL);
        let a = serialize_all(&cloud, &cfg).unwrap();
        let b = serialize_all(&shuffled, &cfg).unwrap();
        for (oa, ob) in a.iter().zip(&b) {
            let distinct: HashSet<u64> = oa.codes.iter().map(|c| c.0).collect();
            assert_eq!(distinct.len(), cloud.len());
            let pa: Vec<[f64; 3]> = oa.order.iter().map(|&i| cloud.positions()[i]).collect();
            let pb: Vec<[f64; 3]> = ob.order.iter().map(|&i| shuffled.positions()[i]).collect();
            assert_eq!(pa, pb);
        }
    }
}

#[test]
fn coarser_grid_never_adds_codes() {
    let cloud = common::uniform_cloud(3000, 1, 2, 12);
    for pattern in CurvePattern::ALL {
        let mut g = 1.0 / 512.0;
        let mut prev = usize::MAX;
        while g <= 1.0 {
            let codes = compute_codes(&cloud, pattern, &config(g, 16, &[pattern])).unwrap();
            let distinct: HashSet<u64> = codes.iter().map(|c| c.0).collect();
            assert!(distinct.len() <= prev, "{pattern} g={g}");
            prev = distinct.len();
            g *= 2.0;
        }
        assert_eq!(prev, 2, "one cell per batch at g = 1");
    }
}

#[test]
fn symmetric_cloud_gives_same_key_multiset_under_trans_z() {
    let mut r = common::rng(13);
    let mut positions = Vec::new();
    for _ in 0..100 {
        let (x, y, z) = (r.gen_range(0..32) as f64, r.gen_range(0..32) as f64, r.gen_range(0..32) as f64);
        positions.push([x, y, z]);
        positions.push([y, x, z]);
    }
    positions.push([0.0, 0.0, 0.0]);
    let cloud = PointCloud::from_positions(positions).unwrap();
    let orders = serialize_all(&cloud, &config(1.0, 5, &[CurvePattern::Z, CurvePattern::TransZ])).unwrap();
    let sorted = |i: usize| orders[i].order.iter().map(|&j| orders[i].codes[j].0).collect::<Vec<_>>();
    assert_eq!(sorted(0), sorted(1));
}

#[test]
fn extent_overflow_names_axis_and_bits() {
    let cloud = PointCloud::from_positions(vec![[0.0, 0.0, 0.0], [0.5, 3.0, 0.0]]).unwrap();
    let err = compute_codes(&cloud, CurvePattern::Z, &config(0.01, 6, &[CurvePattern::Z])).unwrap_err();
    match &err {
        Error::ExtentOverflow { axis, required, .. } => {
            assert_eq!(*axis, 'y');
            // Cell 300 needs 9 bits.
            assert_eq!(*required, 9);
        }
        other => panic!("unexpected error {other:?}"),
    }
    let msg = err.to_string();
    assert!(msg.contains('y') && msg.contains("--bits 9"), "{msg}");
    assert!(compute_codes(&cloud, CurvePattern::Z, &config(0.01, 9, &[CurvePattern::Z])).is_ok());
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(SerializationConfig::new(0.0, BitsPerAxis::new(4).unwrap(), vec![CurvePattern::Z]).is_err());
    assert!(SerializationConfig::new(1.0, BitsPerAxis::new(4).unwrap(), vec![]).is_err());
    assert!(SerializationConfig::new(1.0, BitsPerAxis::new(4).unwrap(), vec![CurvePattern::Hilbert, CurvePattern::Hilbert]).is_err());
    assert!(PointCloud::from_positions(vec![]).is_err());
    assert!(PointCloud::from_positions(vec![[f64::NAN, 0.0, 0.0]]).is_err());
}
