//! Locality metrics and a small timing harness.
//!
//! Serialization trades exact neighborhoods for speed. These metrics put a
//! number on that trade: how far apart consecutive points in a serialized
//! order are, and how many of a point's true k nearest neighbors land in
//! its attention patch.

use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::patch::{pad_and_group, PatchPlan};
use crate::serialize::{serialize_all, PointCloud, SerializationConfig, SerializedOrder};
use crate::sfc::{encode, BitsPerAxis, CurvePattern, GridCoord};

const KNN_BLOCK: usize = 512;
const KNN_QUERY_TILE: usize = 64;
/// Points `c, c + KNN_STRIPES, c + 2 KNN_STRIPES, ...` of a block form stripe
/// `c`; the fill keeps one running minimum per stripe.
const KNN_STRIPES: usize = 32;

/// Running k smallest (distance, index) pairs, sorted ascending.
struct Candidates {
    k: usize,
    best: Vec<(f64, usize)>,
    worst: f64,
}

impl Candidates {
    fn new(k: usize) -> Self {
        Candidates {
            k,
            best: Vec::with_capacity(k + 1),
            worst: f64::INFINITY,
        }
    }

    /// Keeps the list ordered by (distance, index), so ties go to the
    /// smaller index whatever order candidates arrive in.
    fn insert(&mut self, d: f64, j: usize) {
        let at = self.best.partition_point(|&(bd, bj)| bd < d || (bd == d && bj < j));
        self.best.insert(at, (d, j));
        if self.best.len() > self.k {
            self.best.pop();
        }
        if self.best.len() == self.k {
            self.worst = self.best[self.k - 1].0;
        }
    }

    /// Offers every distance of a block whose points have original indices
    /// `ids`, skipping stripes whose minimum cannot improve the list.
    fn scan(&mut self, dist: &[f64], stripe_min: &[f64; KNN_STRIPES], ids: &[usize]) {
        for (c, &m) in stripe_min.iter().enumerate() {
            if m > self.worst {
                continue;
            }
            for i in (c..dist.len()).step_by(KNN_STRIPES) {
                if dist[i] <= self.worst {
                    self.insert(dist[i], ids[i]);
                }
            }
        }
    }
}

/// Writes squared distances from `q` to every point of a block into `out`
/// and the minimum of every stripe into `stripe_min`.
fn fill_distances(xs: &[f64], ys: &[f64], zs: &[f64], q: [f64; 3], out: &mut [f64], stripe_min: &mut [f64; KNN_STRIPES]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { fill_distances_avx(xs, ys, zs, q, out, stripe_min) };
    }
    fill_distances_stripes(xs, ys, zs, q, out, stripe_min)
}

/// Same arithmetic as [`fill_distances_stripes`] (no fused multiply-add), so
/// the result is bit-identical; only the vector width changes.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn fill_distances_avx(
    xs: &[f64],
    ys: &[f64],
    zs: &[f64],
    q: [f64; 3],
    out: &mut [f64],
    stripe_min: &mut [f64; KNN_STRIPES],
) {
    fill_distances_stripes(xs, ys, zs, q, out, stripe_min)
}

#[inline(always)]
fn fill_distances_stripes(
    xs: &[f64],
    ys: &[f64],
    zs: &[f64],
    q: [f64; 3],
    out: &mut [f64],
    stripe_min: &mut [f64; KNN_STRIPES],
) {
    let m = stripe_min;
    *m = [f64::INFINITY; KNN_STRIPES];
    let rows = out
        .chunks_mut(KNN_STRIPES)
        .zip(xs.chunks(KNN_STRIPES))
        .zip(ys.chunks(KNN_STRIPES))
        .zip(zs.chunks(KNN_STRIPES));
    for (((d, x), y), z) in rows {
        if let (Ok(d), Ok(x), Ok(y), Ok(z)) = (
            <&mut [f64; KNN_STRIPES]>::try_from(&mut *d),
            <&[f64; KNN_STRIPES]>::try_from(x),
            <&[f64; KNN_STRIPES]>::try_from(y),
            <&[f64; KNN_STRIPES]>::try_from(z),
        ) {
            for c in 0..KNN_STRIPES {
                let dx = x[c] - q[0];
                let dy = y[c] - q[1];
                let dz = z[c] - q[2];
                let v = dx * dx + dy * dy + dz * dz;
                d[c] = v;
                m[c] = if v < m[c] { v } else { m[c] };
            }
        } else {
            for (c, (((d, &x), &y), &z)) in d.iter_mut().zip(x).zip(y).zip(z).enumerate() {
                *d = dist2(&[x, y, z], &q);
                m[c] = m[c].min(*d);
            }
        }
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Original indices of every batch, ascending.
fn batch_members(cloud: &PointCloud) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); cloud.num_batches()];
    for (i, &b) in cloud.batch().iter().enumerate() {
        members[b as usize].push(i);
    }
    members
}

/// Exact k nearest neighbors by exhaustive scan, restricted to the same
/// batch, self excluded. Ties go to the smaller original index.
pub fn knn_oracle(cloud: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    let members = batch_members(cloud);
    if let Some((b, m)) = members.iter().enumerate().find(|(_, m)| !m.is_empty() && m.len() <= k) {
        return Err(Error::param(format!(
            "k = {k} needs more than {k} points per batch, batch {b} has {}",
            m.len()
        )));
    }
    let pos = cloud.positions();
    let mut out = vec![Vec::new(); cloud.len()];
    for members in members.iter().filter(|m| !m.is_empty()) {
        // Every distance is still computed; visiting points in curve order
        // only makes the k-th distance tight after the first block, so later
        // blocks are rejected on their stripe minima.
        let idx = curve_sorted(pos, members)?;
        // Structure of arrays so the distance loops vectorize.
        let xs: Vec<f64> = idx.iter().map(|&i| pos[i][0]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| pos[i][1]).collect();
        let zs: Vec<f64> = idx.iter().map(|&i| pos[i][2]).collect();
        let blocks = idx.len().div_ceil(KNN_BLOCK);
        // Queries are processed in tiles so each candidate block is reused
        // from cache by every query of the tile.
        for tile in (0..idx.len()).step_by(KNN_QUERY_TILE) {
            let queries = tile..(tile + KNN_QUERY_TILE).min(idx.len());
            let mut buf = [0.0f64; KNN_BLOCK];
            let mut stripe_min = [0.0f64; KNN_STRIPES];
            let mut state: Vec<Candidates> = queries.clone().map(|_| Candidates::new(k)).collect();
            let home = tile / KNN_BLOCK;
            for b in (home..blocks).chain(0..home) {
                let (start, end) = (b * KNN_BLOCK, ((b + 1) * KNN_BLOCK).min(idx.len()));
                let (bx, by, bz) = (&xs[start..end], &ys[start..end], &zs[start..end]);
                for (qi, cand) in queries.clone().zip(state.iter_mut()) {
                    let q = [xs[qi], ys[qi], zs[qi]];
                    let dist = &mut buf[..bx.len()];
                    fill_distances(bx, by, bz, q, dist, &mut stripe_min);
                    if (start..end).contains(&qi) {
                        let own = qi - start;
                        dist[own] = f64::INFINITY;
                        let c = own % KNN_STRIPES;
                        stripe_min[c] = dist[c..].iter().step_by(KNN_STRIPES).fold(f64::INFINITY, |m, &v| m.min(v));
                    }
                    if stripe_min.iter().fold(false, |any, &m| any | (m <= cand.worst)) {
                        cand.scan(dist, &stripe_min, &idx[start..end]);
                    }
                }
            }
            for (qi, cand) in queries.zip(state) {
                out[idx[qi]] = cand.best.into_iter().map(|(_, j)| j).collect();
            }
        }
    }
    Ok(out)
}

/// `members` reordered along a Z-order curve over their bounding box.
fn curve_sorted(pos: &[[f64; 3]], members: &[usize]) -> Result<Vec<usize>> {
    const BITS: u32 = 10;
    let bits = BitsPerAxis::new(BITS)?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in members {
        for a in 0..3 {
            lo[a] = lo[a].min(pos[i][a]);
            hi[a] = hi[a].max(pos[i][a]);
        }
    }
    let top = (bits.side() - 1) as f64;
    let cell = |i: usize, a: usize| {
        let t = if hi[a] > lo[a] { (pos[i][a] - lo[a]) / (hi[a] - lo[a]) } else { 0.0 };
        (t * top).round() as u32
    };
    let mut keyed = members
        .iter()
        .map(|&i| Ok((encode(CurvePattern::Z, GridCoord::new(cell(i, 0), cell(i, 1), cell(i, 2)), bits)?.0, i)))
        .collect::<Result<Vec<_>>>()?;
    keyed.sort_unstable();
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Mean and 95th percentile (nearest rank) of the Euclidean distance
/// between consecutive points of a serialized order. Pairs that cross a
/// batch boundary are skipped.
pub fn serial_locality(cloud: &PointCloud, order: &SerializedOrder) -> Result<(f64, f64)> {
    if cloud.len() < 2 {
        return Err(Error::param("serial locality needs at least two points"));
    }
    if order.len() != cloud.len() {
        return Err(Error::Structure("order does not match the cloud".into()));
    }
    let pos = cloud.positions();
    let batch = cloud.batch();
    let mut d: Vec<f64> = order
        .order
        .windows(2)
        .filter(|w| batch[w[0]] == batch[w[1]])
        .map(|w| dist2(&pos[w[0]], &pos[w[1]]).sqrt())
        .collect();
    if d.is_empty() {
        return Err(Error::param("no consecutive pair lies within one batch"));
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(f64::total_cmp);
    let rank = ((0.95 * d.len() as f64).ceil() as usize).clamp(1, d.len());
    Ok((mean, d[rank - 1]))
}

/// Mean over points of `|patch-mates ∩ kNN| / k`.
///
/// A point's patch-mates are the other distinct indices of the patch that
/// holds its non-borrowed occurrence.
pub fn patch_knn_overlap(plan: &PatchPlan, knn: &[Vec<usize>]) -> Result<f64> {
    let n = knn.len();
    if n == 0 || plan.point_count() != n {
        return Err(Error::Structure("plan and neighbor lists disagree on the point count".into()));
    }
    let k = knn[0].len();
    if k == 0 || knn.iter().any(|l| l.len() != k) {
        return Err(Error::param("neighbor lists must all have the same nonzero length"));
    }
    if k >= plan.patch_size() {
        return Err(Error::param(format!(
            "k = {k} must be smaller than the patch size {}",
            plan.patch_size()
        )));
    }
    let mut stamp = vec![usize::MAX; n];
    let mut total = 0.0;
    for p in 0..plan.num_patches() {
        let idx = plan.patch(p);
        for &i in idx {
            stamp[i] = p;
        }
        for (&i, &b) in idx.iter().zip(plan.patch_borrowed(p)) {
            if b {
                continue;
            }
            let hits = knn[i].iter().filter(|&&j| j != i && stamp[j] == p).count();
            total += hits as f64 / k as f64;
        }
    }
    Ok(total / n as f64)
}

/// Wall-clock statistics of one benchmarked routine.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRecord {
    pub label: String,
    /// Total iterations run, including the discarded warm-up.
    pub iterations: usize,
    pub mean_secs: f64,
    pub std_secs: f64,
}

/// Runs `routine` on the input produced once by `setup`, `iterations`
/// times. The first iteration is a warm-up and is excluded from the
/// statistics.
pub fn bench<I, O>(
    label: &str,
    setup: impl FnOnce() -> I,
    mut routine: impl FnMut(&I) -> O,
    iterations: usize,
) -> Result<TimingRecord> {
    if iterations < 2 {
        return Err(Error::param("bench needs at least two iterations"));
    }
    let input = setup();
    let mut samples = Vec::with_capacity(iterations - 1);
    for it in 0..iterations {
        let start = Instant::now();
        black_box(routine(black_box(&input)));
        let elapsed = start.elapsed().as_secs_f64();
        if it > 0 {
            samples.push(elapsed);
        }
    }
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let var = if samples.len() > 1 {
        samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok(TimingRecord {
        label: label.to_string(),
        iterations,
        mean_secs: mean,
        std_secs: var.sqrt(),
    })
}

/// Locality and timing figures for one pattern.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "pattern_name")]
    pub pattern: CurvePattern,
    pub mean_consecutive_distance: f64,
    pub p95_consecutive_distance: f64,
    pub patch_knn_overlap: f64,
    pub timings: Vec<TimingRecord>,
}

fn pattern_name<S: serde::Serializer>(p: &CurvePattern, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(p.short_name())
}

/// Stable text form: pretty JSON with keys sorted at every level.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's Map is a BTreeMap, so converting through Value sorts keys.
    let v = serde_json::to_value(value).map_err(|e| Error::format(e.to_string()))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// One [`MetricsReport`] per configured pattern, with plain patch grouping
/// at `patch_size` and `k` nearest neighbors.
pub fn locality_reports(
    cloud: &PointCloud,
    cfg: &SerializationConfig,
    patch_size: usize,
    k: usize,
) -> Result<Vec<MetricsReport>> {
    let knn = knn_oracle(cloud, k)?;
    serialize_all(cloud, cfg)?
        .iter()
        .map(|order| {
            let (mean, p95) = serial_locality(cloud, order)?;
            let plan = pad_and_group(order, patch_size)?;
            Ok(MetricsReport {
                pattern: order.pattern,
                mean_consecutive_distance: mean,
                p95_consecutive_distance: p95,
                patch_knn_overlap: patch_knn_overlap(&plan, &knn)?,
                timings: Vec::new(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{group_sequence, PaddingRule};
    use crate::sfc::BitsPerAxis;

    #[test]
    fn knn_collinear() {
        let cloud = PointCloud::from_positions(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        assert_eq!(knn_oracle(&cloud, 1).unwrap(), vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn knn_duplicates_are_mutual() {
        let cloud = PointCloud::from_positions(vec![[0.0; 3], [5.0, 0.0, 0.0], [0.0; 3]]).unwrap();
        let knn = knn_oracle(&cloud, 1).unwrap();
        assert_eq!(knn[0], vec![2]);
        assert_eq!(knn[2], vec![0]);
    }

    #[test]
    fn knn_all_others() {
        let cloud = PointCloud::from_positions((0..6).map(|i| [i as f64 * 0.7, (i * i) as f64, 0.0]).collect()).unwrap();
        let knn = knn_oracle(&cloud, 5).unwrap();
        for (i, l) in knn.iter().enumerate() {
            let mut l = l.clone();
            l.sort_unstable();
            assert_eq!(l, (0..6).filter(|&j| j != i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn knn_k_too_large() {
        let cloud = PointCloud::from_positions(vec![[0.0; 3], [1.0; 3]]).unwrap();
        assert!(knn_oracle(&cloud, 2).is_err());
        assert!(knn_oracle(&cloud, 0).is_err());
    }

    #[test]
    fn knn_respects_batches() {
        let pos = vec![[0.0; 3], [0.1, 0.0, 0.0], [0.05, 0.0, 0.0], [9.0, 0.0, 0.0]];
        let feats = crate::tensor::Matrix::zeros(4, 1);
        let cloud = PointCloud::new(pos, feats, vec![0, 1, 1, 0]).unwrap();
        let knn = knn_oracle(&cloud, 1).unwrap();
        assert_eq!(knn, vec![vec![3], vec![2], vec![1], vec![0]]);
    }

    #[test]
    fn locality_of_a_line() {
        let a = 0.25;
        let cloud = PointCloud::from_positions((0..16).map(|i| [i as f64 * a, 0.0, 0.0]).collect()).unwrap();
        let cfg = SerializationConfig::new(a, BitsPerAxis::new(8).unwrap(), vec![CurvePattern::Z]).unwrap();
        let order = &serialize_all(&cloud, &cfg).unwrap()[0];
        let (mean, p95) = serial_locality(&cloud, order).unwrap();
        assert!((mean - a).abs() < 1e-12);
        assert!((p95 - a).abs() < 1e-12);
    }

    #[test]
    fn locality_needs_two_points() {
        let cloud = PointCloud::from_positions(vec![[0.0; 3]]).unwrap();
        let cfg = SerializationConfig::new(1.0, BitsPerAxis::new(4).unwrap(), vec![CurvePattern::Z]).unwrap();
        let order = &serialize_all(&cloud, &cfg).unwrap()[0];
        assert!(serial_locality(&cloud, order).is_err());
    }

    #[test]
    fn overlap_single_patch_is_one() {
        let cloud = PointCloud::from_positions((0..5).map(|i| [i as f64, (i % 2) as f64, 0.0]).collect()).unwrap();
        let knn = knn_oracle(&cloud, 3).unwrap();
        let plan = group_sequence(&[4, 2, 0, 1, 3], 8, PaddingRule::BorrowBackward).unwrap();
        assert_eq!(patch_knn_overlap(&plan, &knn).unwrap(), 1.0);
    }

    #[test]
    fn overlap_k_must_be_below_patch_size() {
        let cloud = PointCloud::from_positions((0..5).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap();
        let knn = knn_oracle(&cloud, 2).unwrap();
        let plan = group_sequence(&[0, 1, 2, 3, 4], 2, PaddingRule::BorrowBackward).unwrap();
        assert!(patch_knn_overlap(&plan, &knn).is_err());
    }

    #[test]
    fn bench_discards_warmup() {
        let rec = bench("noop", || 3u64, |x| x + 1, 4).unwrap();
        assert_eq!(rec.iterations, 4);
        assert!(rec.mean_secs >= 0.0 && rec.std_secs >= 0.0);
        assert!(bench("noop", || (), |_| (), 1).is_err());
    }

    #[test]
    fn report_keys_are_sorted() {
        let r = MetricsReport {
            pattern: CurvePattern::Hilbert,
            mean_consecutive_distance: 1.0,
            p95_consecutive_distance: 2.0,
            patch_knn_overlap: 0.5,
            timings: vec![],
        };
        let s = to_sorted_json(&r).unwrap();
        let keys: Vec<usize> = ["mean_consecutive", "p95", "patch_knn", "pattern", "timings"]
            .iter()
            .map(|k| s.find(k).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert!(s.contains("\"H\""));
    }
}
