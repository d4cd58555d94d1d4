mod common;

use std::collections::HashMap;

use sercloud::attn::Linear;
use sercloud::network::{grid_pool, grid_unpool, unet_forward, BatchNorm, NetworkConfig, NetworkParams, PoolMap, PoolParams};
use sercloud::rng::seeded;
use sercloud::serialize::PointCloud;
use sercloud::tensor::Matrix;
use sercloud::Error;

fn identity_pool(c: usize) -> PoolParams {
    PoolParams {
        proj: Linear {
            weight: Matrix::identity(c),
            bias: vec![0.0; c],
        },
        norm: BatchNorm::identity(c),
    }
}

fn small_config() -> NetworkConfig {
    NetworkConfig {
        enc_depths: vec![1, 1, 2, 1],
        dec_depths: vec![1, 1, 1, 1],
        enc_channels: vec![8, 16, 16, 32],
        dec_channels: vec![32, 16, 16, 8],
        enc_heads: vec![2, 2, 4, 4],
        dec_heads: vec![4, 4, 2, 2],
        patch_size: 16,
        grid_size: 0.05,
        ..NetworkConfig::default()
    }
}

/// Groups of fine indices that share a parent, as a canonical sorted list.
fn partition(parent: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &p) in parent.iter().enumerate() {
        groups.entry(p).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}

#[test]
fn pooled_positions_are_member_centroids() {
    let cloud = common::uniform_cloud(500, 3, 2, 40);
    let g = 0.25;
    let pooled = grid_pool(&cloud, cloud.features(), [0.0; 3], g, &identity_pool(3)).unwrap();
    pooled.map.validate().unwrap();
    let m = pooled.map.coarse_len();
    let mut sum = vec![[0.0; 3]; m];
    for (i, &p) in pooled.map.parent.iter().enumerate() {
        for a in 0..3 {
            sum[p][a] += cloud.positions()[i][a];
        }
        assert_eq!(pooled.batch[p], cloud.batch()[i]);
    }
    for p in 0..m {
        let cell = pooled.cells[p];
        let lo = [cell.x, cell.y, cell.z].map(|c| c as f64 * g);
        for a in 0..3 {
            let c = sum[p][a] / pooled.map.counts[p] as f64;
            assert!((pooled.positions[p][a] - c).abs() < 1e-12);
            assert!(pooled.positions[p][a] >= lo[a] - 1e-12 && pooled.positions[p][a] < lo[a] + g + 1e-12);
        }
    }
    // 4^3 cells per batch at most.
    assert!(m <= 2 * 64);
}

#[test]
fn single_cell_and_identity_cases() {
    let cloud = PointCloud::from_positions(vec![[0.0, 0.0, 0.0], [0.4, 0.0, 0.2], [0.2, 0.6, 0.1]]).unwrap();
    let one = grid_pool(&cloud, cloud.features(), [0.0; 3], 1.0, &identity_pool(1)).unwrap();
    assert_eq!(one.map.counts, vec![3]);
    for (a, b) in one.positions[0].iter().zip([0.2, 0.2, 0.1]) {
        assert!((a - b).abs() < 1e-12);
    }
    let fine = grid_pool(&cloud, cloud.features(), [0.0; 3], 0.1, &identity_pool(1)).unwrap();
    assert_eq!(fine.map, PoolMap::identity(3));
    assert_eq!(fine.positions, cloud.positions());
}

#[test]
fn pooling_mean_before_normalization() {
    let cloud = PointCloud::from_positions(vec![[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.1, 0.1, 0.1], [1.9, 0.9, 0.9]]).unwrap();
    let feats = Matrix::from_rows(&[vec![1.0], vec![3.0], vec![10.0], vec![20.0]]).unwrap();
    let pooled = grid_pool(&cloud, &feats, [0.0; 3], 1.0, &identity_pool(1)).unwrap();
    assert_eq!(pooled.map.parent, vec![0, 0, 1, 1]);
    // Means 2 and 15; batch norm over two rows maps them to -1 and +1.
    let eps = 1e-5;
    let expected = 6.5 / (6.5f64 * 6.5 + eps).sqrt();
    assert!((pooled.feats.get(0, 0) + expected).abs() < 1e-12);
    assert!((pooled.feats.get(1, 0) - expected).abs() < 1e-12);
}

#[test]
fn coarse_cells_nest_fine_cells() {
    for seed in 0..5 {
        let cloud = common::uniform_cloud(2000, 2, 1, 50 + seed);
        let origin = cloud.min_corner();
        let g = 0.04;
        let fine = grid_pool(&cloud, cloud.features(), origin, g, &identity_pool(2)).unwrap();
        let fine_cloud = fine.cloud().unwrap();
        let nested = grid_pool(&fine_cloud, &fine.feats, origin, 2.0 * g, &identity_pool(2)).unwrap();
        let direct = grid_pool(&cloud, cloud.features(), origin, 2.0 * g, &identity_pool(2)).unwrap();
        let composed: Vec<usize> = fine.map.parent.iter().map(|&p| nested.map.parent[p]).collect();
        assert_eq!(partition(&composed), partition(&direct.map.parent), "seed {seed}");
        for (p, c) in fine.cells.iter().enumerate() {
            let parent = nested.cells[nested.map.parent[p]];
            assert_eq!((c.x / 2, c.y / 2, c.z / 2), (parent.x, parent.y, parent.z));
        }
    }
}

#[test]
fn unpool_concatenates_skip_and_parent() {
    let map = PoolMap {
        parent: vec![1, 0, 1],
        counts: vec![1, 2],
    };
    let coarse = Matrix::from_rows(&[vec![10.0], vec![20.0]]).unwrap();
    let skip = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
    let proj = Linear {
        weight: Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
        bias: vec![0.5],
    };
    let out = grid_unpool(&map, &coarse, &skip, &proj).unwrap();
    assert_eq!(out.as_slice(), &[21.5, 12.5, 23.5]);
    let bad = Linear::zeros(3, 1);
    assert!(matches!(grid_unpool(&map, &coarse, &skip, &bad), Err(Error::Structure(_))));
}

#[test]
fn single_point_forward() {
    let cfg = small_config();
    let cloud = PointCloud::from_positions(vec![[0.3, 0.3, 0.3]]).unwrap();
    let params = NetworkParams::random(&cfg, 1, 1).unwrap();
    let out = unet_forward(&cloud, &cfg, &params).unwrap();
    assert_eq!(out.level_counts, vec![1; 5]);
    assert_eq!((out.features.rows(), out.features.cols()), (1, 8));
    assert!(out.features.is_finite());
}

#[test]
fn level_counts_shrink_and_output_is_finite() {
    let cfg = small_config();
    let cloud = common::uniform_cloud(1000, 3, 1, 60);
    let params = NetworkParams::random(&cfg, 3, 2).unwrap();
    let out = unet_forward(&cloud, &cfg, &params).unwrap();
    assert_eq!(out.level_counts.len(), cfg.stages() + 1);
    assert_eq!(out.level_counts[0], 1000);
    assert!(out.level_counts.windows(2).all(|w| w[1] <= w[0]), "{:?}", out.level_counts);
    assert!(out.level_counts[4] < out.level_counts[0]);
    assert_eq!((out.features.rows(), out.features.cols()), (1000, 8));
    assert!(out.features.is_finite());
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_config();
    let cloud = common::uniform_cloud(600, 3, 2, 61);
    let params = NetworkParams::random(&cfg, 3, 3).unwrap();
    let a = unet_forward(&cloud, &cfg, &params).unwrap();
    let b = unet_forward(&cloud, &cfg, &params).unwrap();
    assert_eq!(a.features, b.features);
    assert_eq!(a.level_counts, b.level_counts);

    let other = NetworkParams::random(&cfg, 3, 4).unwrap();
    assert_ne!(unet_forward(&cloud, &cfg, &other).unwrap().features, a.features);
}

#[test]
fn batches_do_not_interact() {
    // Pooling never merges across batches, so two copies double every level.
    let cfg = small_config();
    let single = common::uniform_cloud(300, 3, 1, 62);
    let mut positions = single.positions().to_vec();
    positions.extend_from_slice(single.positions());
    let mut feats = single.features().as_slice().to_vec();
    feats.extend_from_slice(single.features().as_slice());
    let batch: Vec<u16> = (0..600).map(|i| (i / 300) as u16).collect();
    let double = PointCloud::new(positions, Matrix::from_vec(600, 3, feats).unwrap(), batch).unwrap();
    let params = NetworkParams::random(&cfg, 3, 5).unwrap();
    let a = unet_forward(&single, &cfg, &params).unwrap();
    let b = unet_forward(&double, &cfg, &params).unwrap();
    let doubled: Vec<usize> = a.level_counts.iter().map(|c| 2 * c).collect();
    assert_eq!(b.level_counts, doubled);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let cfg = small_config();
    let cloud = common::uniform_cloud(50, 3, 1, 63);
    let params = NetworkParams::random(&cfg, 4, 6).unwrap();
    assert!(matches!(unet_forward(&cloud, &cfg, &params), Err(Error::Structure(_))));

    let bad = NetworkConfig {
        enc_depths: vec![1, 1],
        ..small_config()
    };
    assert!(bad.validate().is_err());
    let mut r = seeded(0);
    let pool = PoolParams::random(5, 4, &mut r);
    assert!(grid_pool(&cloud, cloud.features(), [0.0; 3], 0.1, &pool).is_err());
    assert!(grid_pool(&cloud, cloud.features(), [0.0; 3], 0.0, &identity_pool(3)).is_err());
}
