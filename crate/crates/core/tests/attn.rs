mod common;

use rand::seq::SliceRandom;
use rand::Rng;

use sercloud::attn::{
    attention_weights, block_forward, cpe_slot, patch_attention, xcpe, BlockContext, BlockParams, CPE_TAPS,
};
use sercloud::patch::{group_sequence, InteractionKind, PaddingRule, PatchPlan};
use sercloud::rng::seeded;
use sercloud::serialize::{grid_cells, PointCloud, SerializationConfig};
use sercloud::sfc::{BitsPerAxis, CurvePattern};
use sercloud::tensor::Matrix;
use sercloud::Error;

fn plan(seq: &[usize], s: usize) -> PatchPlan {
    group_sequence(seq, s, PaddingRule::BorrowBackward).unwrap()
}

fn random_params(c: usize, heads: usize, seed: u64) -> BlockParams {
    BlockParams::random(c, heads, &mut seeded(seed))
}

/// Scalar reference: per patch, per head, softmax(scale · q·k) · v, then Wo.
fn naive_attention(x: &Matrix, plan: &PatchPlan, p: &BlockParams) -> Matrix {
    let (n, c) = (x.rows(), x.cols());
    let hd = c / p.heads;
    let project = |w: &Matrix| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..c).map(|o| (0..c).map(|a| x.get(i, a) * w.get(a, o)).sum()).collect())
            .collect()
    };
    let (q, k, v) = (project(&p.wq), project(&p.wk), project(&p.wv));
    let mut heads = vec![vec![0.0; c]; n];
    for pi in 0..plan.num_patches() {
        let idx = plan.patch(pi);
        for (&i, &borrowed) in idx.iter().zip(plan.patch_borrowed(pi)) {
            if borrowed {
                continue;
            }
            for h in 0..p.heads {
                let r = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = idx
                    .iter()
                    .map(|&j| p.attn_scale * r.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in r {
                    heads[i][d] = idx.iter().zip(&e).map(|(&j, w)| w / z * v[j][d]).sum();
                }
            }
        }
    }
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        for o in 0..c {
            out.set(i, o, (0..c).map(|a| heads[i][a] * p.wo.get(a, o)).sum());
        }
    }
    out
}

#[test]
fn two_point_hand_example() {
    let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let mut p = BlockParams::zeros(2, 1);
    p.wq = Matrix::identity(2);
    p.wk = Matrix::identity(2);
    p.wv = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    p.wo = Matrix::identity(2);
    let out = patch_attention(&x, &plan(&[0, 1], 2), &p, true).unwrap();
    // softmax([1/sqrt 2, 0]) = [0.66976..., 0.33023...], values [1,2] and [3,4].
    let expected = [[1.6604769013466862, 2.6604769013466862], [2.3395230986533138, 3.3395230986533138]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((out.get(i, j) - expected[i][j]).abs() < 1e-6, "({i},{j}) = {}", out.get(i, j));
        }
    }
}

#[test]
fn matches_scalar_reference() {
    let mut r = common::rng(30);
    for (n, c, h, s) in [(10, 8, 2, 4), (33, 12, 3, 8), (5, 4, 4, 16), (64, 16, 4, 16)] {
        let x = common::random_matrix(n, c, 1.0, &mut r);
        let mut seq: Vec<usize> = (0..n).collect();
        seq.shuffle(&mut r);
        let p = random_params(c, h, n as u64);
        let pl = plan(&seq, s);
        let got = patch_attention(&x, &pl, &p, true).unwrap();
        let want = naive_attention(&x, &pl, &p);
        assert!(common::max_rel_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = common::rng(31);
    let x = common::random_matrix(40, 16, 3.0, &mut r);
    let p = random_params(16, 4, 1);
    let pl = plan(&(0..40).collect::<Vec<_>>(), 16);
    for pi in 0..pl.num_patches() {
        for w in attention_weights(&x, &pl, &p, pi).unwrap() {
            for i in 0..w.rows() {
                let sum: f64 = w.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(w.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}

fn value_path(x: &Matrix, p: &BlockParams) -> Matrix {
    x.matmul(&p.wv).matmul(&p.wo)
}

#[test]
fn single_point_patches_return_projected_values() {
    let mut r = common::rng(32);
    let x = common::random_matrix(7, 8, 1.0, &mut r);
    let p = random_params(8, 2, 2);
    let out = patch_attention(&x, &plan(&[3, 1, 4, 0, 5, 2, 6], 1), &p, true).unwrap();
    assert!(common::max_rel_diff(&out, &value_path(&x, &p)) < 1e-6);
}

#[test]
fn identical_points_share_one_output() {
    let mut r = common::rng(33);
    let row: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let x = Matrix::from_rows(&vec![row; 6]).unwrap();
    let p = random_params(8, 4, 3);
    let out = patch_attention(&x, &plan(&(0..6).collect::<Vec<_>>(), 4), &p, true).unwrap();
    let expected = value_path(&x, &p);
    assert!(common::max_rel_diff(&out, &expected) < 1e-6);
    for i in 1..6 {
        assert_eq!(out.row(i), out.row(0));
    }
}

#[test]
fn scaling_q_and_k_is_absorbed_by_the_scale() {
    let mut r = common::rng(34);
    let x = common::random_matrix(30, 8, 1.0, &mut r);
    let pl = plan(&(0..30).collect::<Vec<_>>(), 8);
    let p = random_params(8, 2, 4);
    let base = patch_attention(&x, &pl, &p, true).unwrap();
    for lambda in [0.5, 3.0, 10.0] {
        let mut q = p.clone();
        q.wq.scale(lambda);
        q.wk.scale(lambda);
        q.attn_scale /= lambda * lambda;
        let out = patch_attention(&x, &pl, &q, true).unwrap();
        assert!(common::max_rel_diff(&out, &base) < 1e-6, "lambda {lambda}");
    }
}

#[test]
fn padding_rule_only_touches_patches_with_borrowed_slots() {
    let mut r = common::rng(35);
    for n in [10, 21, 50] {
        let x = common::random_matrix(n, 8, 1.0, &mut r);
        let p = random_params(8, 2, n as u64);
        let seq: Vec<usize> = (0..n).collect();
        let back = group_sequence(&seq, 8, PaddingRule::BorrowBackward).unwrap();
        let last = group_sequence(&seq, 8, PaddingRule::RepeatLast).unwrap();
        let a = patch_attention(&x, &back, &p, true).unwrap();
        let b = patch_attention(&x, &last, &p, true).unwrap();
        let clean = |pl: &PatchPlan, i: usize| {
            let slot = pl.home_slots()[i] / pl.patch_size();
            !pl.patch_borrowed(slot).iter().any(|&m| m)
        };
        let mut checked = 0;
        for i in 0..n {
            if clean(&back, i) && clean(&last, i) {
                assert_eq!(a.row(i), b.row(i), "n={n} point {i}");
                checked += 1;
            }
        }
        assert!(checked >= n / 8 * 8 - 8);
    }
}

#[test]
fn checked_mode_reports_non_finite_input() {
    let mut x = Matrix::zeros(4, 4);
    x.set(2, 1, f64::NAN);
    let p = random_params(4, 2, 5);
    let err = patch_attention(&x, &plan(&[0, 1, 2, 3], 2), &p, true).unwrap_err();
    assert!(matches!(err, Error::NumericHealth { .. }));
    assert!(patch_attention(&x, &plan(&[0, 1, 2, 3], 2), &p, false).is_ok());
}

/// Reference xCPE: for every pair, add `kernel[offset] · feats[j]` when the
/// cell offset is within one step on every axis.
fn naive_xcpe(cloud: &PointCloud, feats: &Matrix, g: f64, kernel: &[Matrix]) -> Matrix {
    let cells = grid_cells(cloud.positions(), cloud.min_corner(), g, BitsPerAxis::new(16).unwrap()).unwrap();
    let mut out = feats.clone();
    for i in 0..cloud.len() {
        for j in 0..cloud.len() {
            if cloud.batch()[i] != cloud.batch()[j] {
                continue;
            }
            let d = [
                cells[j].x as i64 - cells[i].x as i64,
                cells[j].y as i64 - cells[i].y as i64,
                cells[j].z as i64 - cells[i].z as i64,
            ];
            if d.iter().any(|v| v.abs() > 1) {
                continue;
            }
            let k = &kernel[cpe_slot(d[0] as i32, d[1] as i32, d[2] as i32)];
            for o in 0..feats.cols() {
                let add: f64 = (0..feats.cols()).map(|a| feats.get(j, a) * k.get(a, o)).sum();
                out.set(i, o, out.get(i, o) + add);
            }
        }
    }
    out
}

#[test]
fn xcpe_matches_pairwise_reference() {
    let mut r = common::rng(36);
    let cloud = common::uniform_cloud(300, 6, 2, 36);
    let kernel: Vec<Matrix> = (0..CPE_TAPS).map(|_| common::random_matrix(6, 6, 0.3, &mut r)).collect();
    let got = xcpe(&cloud, cloud.features(), 0.1, &kernel).unwrap();
    let want = naive_xcpe(&cloud, cloud.features(), 0.1, &kernel);
    assert!(common::max_rel_diff(&got, &want) < 1e-12);
}

#[test]
fn xcpe_hand_examples() {
    let one = PointCloud::from_positions(vec![[0.4, 0.4, 0.4]]).unwrap();
    let feats = Matrix::from_rows(&[vec![1.5, -2.0]]).unwrap();
    let mut kernel = vec![Matrix::zeros(2, 2); CPE_TAPS];
    assert_eq!(xcpe(&one, &feats, 1.0, &kernel).unwrap(), feats);
    kernel[cpe_slot(0, 0, 0)] = Matrix::identity(2);
    assert_eq!(xcpe(&one, &feats, 1.0, &kernel).unwrap().row(0), &[3.0, -4.0]);

    let pair = PointCloud::from_positions(vec![[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]]).unwrap();
    let feats = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let mut kernel = vec![Matrix::zeros(2, 2); CPE_TAPS];
    kernel[cpe_slot(1, 0, 0)] = Matrix::from_rows(&[vec![2.0, 3.0], vec![5.0, 7.0]]).unwrap();
    let out = xcpe(&pair, &feats, 1.0, &kernel).unwrap();
    assert_eq!(out.row(0), &[1.0 + 5.0, 7.0]);
    assert_eq!(out.row(1), &[0.0, 1.0]);
}

fn context(cloud: &PointCloud, patterns: Vec<CurvePattern>, kind: InteractionKind, s: usize) -> BlockContext {
    let cfg = SerializationConfig::new(0.05, BitsPerAxis::new(10).unwrap(), patterns).unwrap();
    BlockContext::new(cloud, &cfg, kind, s).unwrap()
}

#[test]
fn zero_block_passes_input_through() {
    let cloud = common::uniform_cloud(100, 8, 1, 37);
    let ctx = context(&cloud, CurvePattern::ALL.to_vec(), InteractionKind::ShiftOrder, 16);
    let out = block_forward(&ctx, cloud.features(), 0, &BlockParams::zeros(8, 2)).unwrap();
    assert_eq!(&out, cloud.features());
}

#[test]
fn shift_order_alternates_patterns() {
    let cloud = common::uniform_cloud(100, 4, 1, 38);
    let ctx = context(&cloud, vec![CurvePattern::Z, CurvePattern::Hilbert], InteractionKind::ShiftOrder, 16);
    assert_eq!(ctx.plan(0).unwrap().0, CurvePattern::Z);
    assert_eq!(ctx.plan(1).unwrap().0, CurvePattern::Hilbert);
    assert_eq!(ctx.plan(2).unwrap().0, CurvePattern::Z);
}

#[test]
fn output_depends_only_on_patch_mates() {
    for seed in 0..10 {
        let cloud = common::uniform_cloud(200, 8, 1, 300 + seed);
        let ctx = context(&cloud, CurvePattern::ALL.to_vec(), InteractionKind::ShiftOrder, 16);
        let mut p = random_params(8, 2, seed);
        p.cpe = vec![Matrix::zeros(8, 8); CPE_TAPS];
        let (_, pl) = ctx.plan(0).unwrap();
        let base = block_forward(&ctx, cloud.features(), 0, &p).unwrap();
        let outsider = pl.patch(5)[0];
        let mut feats = cloud.features().clone();
        feats.row_mut(outsider).iter_mut().for_each(|v| *v += 10.0);
        let out = block_forward(&ctx, &feats, 0, &p).unwrap();
        for &i in pl.patch(0) {
            assert_eq!(out.row(i), base.row(i));
        }
        assert_ne!(out.row(outsider), base.row(outsider));
    }
}

#[test]
fn reordering_points_commutes_with_the_block() {
    let mut r = common::rng(39);
    for seed in 0..10 {
        let cloud = common::uniform_cloud(300, 8, 2, 400 + seed);
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        perm.shuffle(&mut r);
        let moved = cloud.permuted(&perm).unwrap();
        let p = random_params(8, 2, seed);
        let kind = InteractionKind::ShuffleOrder { seed };
        // A fine grid keeps the codes distinct.
        let cfg = SerializationConfig::new(1e-4, BitsPerAxis::new(14).unwrap(), CurvePattern::ALL.to_vec()).unwrap();
        let a_ctx = BlockContext::new(&cloud, &cfg, kind, 16).unwrap();
        let b_ctx = BlockContext::new(&moved, &cfg, kind, 16).unwrap();
        for block in 0..2 {
            let a = block_forward(&a_ctx, cloud.features(), block, &p).unwrap();
            let b = block_forward(&b_ctx, moved.features(), block, &p).unwrap();
            assert!(common::max_rel_diff(&b, &a.select_rows(&perm)) < 1e-5);
        }
    }
}
