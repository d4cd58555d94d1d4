//! Batch-aware serialization of point clouds.
//!
//! Every point gets a 64-bit code `(batch << 48) | key`, where `key` is the
//! curve key of the point's grid cell. Cells are found by translating the
//! cloud to its minimum corner, dividing by the grid size and flooring.
//! Sorting the codes yields the serialized order; the point data itself is
//! never moved, only the forward and inverse permutations are recorded.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sfc::{self, BitsPerAxis, CurveKey, CurvePattern, GridCoord};
use crate::tensor::FeatureMatrix;

/// Bit offset of the batch field inside a [`SerializedCode`].
pub const BATCH_SHIFT: u32 = 48;
const KEY_MASK: u64 = (1u64 << BATCH_SHIFT) - 1;

/// Positions, features and batch indices of a (possibly batched) cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    features: FeatureMatrix,
    batch: Vec<u16>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, features: FeatureMatrix, batch: Vec<u16>) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::param("point cloud is empty"));
        }
        if features.rows() != n || batch.len() != n {
            return Err(Error::Structure(format!(
                "{n} positions but {} feature rows and {} batch indices",
                features.rows(),
                batch.len()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::param("point features need at least one channel"));
        }
        if let Some(i) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::param(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud {
            positions,
            features,
            batch,
        })
    }

    /// Single-batch cloud with a one-channel constant feature.
    pub fn from_positions(positions: Vec<[f64; 3]>) -> Result<Self> {
        let n = positions.len();
        let features = FeatureMatrix::from_vec(n, 1, vec![1.0; n])?;
        PointCloud::new(positions, features, vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn batch(&self) -> &[u16] {
        &self.batch
    }

    /// Number of batches, taken as one past the largest batch index.
    pub fn num_batches(&self) -> usize {
        self.batch.iter().copied().max().map_or(0, |b| b as usize + 1)
    }

    /// Same geometry with a different feature matrix.
    pub fn with_features(&self, features: FeatureMatrix) -> Result<Self> {
        PointCloud::new(self.positions.clone(), features, self.batch.clone())
    }

    /// Returns a copy with points rearranged so that new point `i` is old
    /// point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        PointCloud::new(
            perm.iter().map(|&i| self.positions[i]).collect(),
            self.features.select_rows(perm),
            perm.iter().map(|&i| self.batch[i]).collect(),
        )
    }

    /// Componentwise minimum over all points.
    pub fn min_corner(&self) -> [f64; 3] {
        self.positions.iter().fold([f64::INFINITY; 3], |acc, p| {
            [acc[0].min(p[0]), acc[1].min(p[1]), acc[2].min(p[2])]
        })
    }
}

/// Grid size, resolution and the ordered list of patterns to serialize with.
#[derive(Debug, Clone, PartialEq)]
pub struct SerializationConfig {
    pub grid_size: f64,
    pub bits: BitsPerAxis,
    pub patterns: Vec<CurvePattern>,
}

impl SerializationConfig {
    pub fn new(grid_size: f64, bits: BitsPerAxis, patterns: Vec<CurvePattern>) -> Result<Self> {
        let cfg = SerializationConfig {
            grid_size,
            bits,
            patterns,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grid_size.is_finite() && self.grid_size > 0.0) {
            return Err(Error::param(format!(
                "grid size must be positive, got {}",
                self.grid_size
            )));
        }
        sfc::validate_patterns(&self.patterns)
    }
}

/// `(batch << 48) | curve_key`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SerializedCode(pub u64);

impl SerializedCode {
    pub fn pack(batch: u16, key: CurveKey) -> Self {
        debug_assert!(key.0 <= KEY_MASK);
        SerializedCode(((batch as u64) << BATCH_SHIFT) | key.0)
    }

    pub fn batch(self) -> u16 {
        (self.0 >> BATCH_SHIFT) as u16
    }

    pub fn key(self) -> CurveKey {
        CurveKey(self.0 & KEY_MASK)
    }
}

/// One pattern's codes plus the recorded permutations.
///
/// `order[i]` is the original index of the point at serialized position
/// `i`; `inverse` maps original indices back to serialized positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SerializedOrder {
    pub pattern: CurvePattern,
    pub codes: Vec<SerializedCode>,
    pub order: Vec<usize>,
    pub inverse: Vec<usize>,
}

impl SerializedOrder {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Checks the permutation, sortedness and tie-break invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.codes.len();
        if self.order.len() != n || self.inverse.len() != n {
            return Err(Error::Structure("order length mismatch".into()));
        }
        for (pos, &orig) in self.order.iter().enumerate() {
            if orig >= n || self.inverse[orig] != pos {
                return Err(Error::Structure(format!(
                    "order and inverse disagree at position {pos}"
                )));
            }
        }
        for w in self.order.windows(2) {
            let (a, b) = (self.codes[w[0]], self.codes[w[1]]);
            if a > b || (a == b && w[0] > w[1]) {
                return Err(Error::Structure(format!(
                    "codes out of order between points {} and {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }
}

/// Discretizes positions: `floor((p - origin) / grid_size)` per axis.
///
/// Fails with [`Error::ExtentOverflow`] if any cell index does not fit in
/// `bits` bits.
pub fn grid_cells(
    positions: &[[f64; 3]],
    origin: [f64; 3],
    grid_size: f64,
    bits: BitsPerAxis,
) -> Result<Vec<GridCoord>> {
    let limit = bits.side();
    let mut max_cell = [0f64; 3];
    let raw: Vec<[f64; 3]> = positions
        .iter()
        .map(|p| {
            let mut c = [0f64; 3];
            for a in 0..3 {
                // Points below the origin clamp to cell 0; only possible when a
                // caller reuses an origin from a different cloud.
                c[a] = ((p[a] - origin[a]) / grid_size).floor().max(0.0);
                max_cell[a] = max_cell[a].max(c[a]);
            }
            c
        })
        .collect();
    for (a, axis) in ['x', 'y', 'z'].into_iter().enumerate() {
        if max_cell[a] >= limit as f64 {
            let cell = if max_cell[a] >= u64::MAX as f64 {
                u64::MAX
            } else {
                max_cell[a] as u64
            };
            return Err(Error::ExtentOverflow {
                axis,
                cell,
                bits: bits.get(),
                limit,
                required: 64 - cell.leading_zeros(),
            });
        }
    }
    Ok(raw
        .into_iter()
        .map(|c| GridCoord::new(c[0] as u32, c[1] as u32, c[2] as u32))
        .collect())
}

/// Serialized codes for one pattern, with the cloud's own minimum corner as
/// the grid origin.
pub fn compute_codes(
    cloud: &PointCloud,
    pattern: CurvePattern,
    cfg: &SerializationConfig,
) -> Result<Vec<SerializedCode>> {
    compute_codes_with_origin(cloud, pattern, cfg, cloud.min_corner())
}

/// Like [`compute_codes`] but with an explicit grid origin, so nested grids
/// at several resolutions can share one corner.
pub fn compute_codes_with_origin(
    cloud: &PointCloud,
    pattern: CurvePattern,
    cfg: &SerializationConfig,
    origin: [f64; 3],
) -> Result<Vec<SerializedCode>> {
    cfg.validate()?;
    let cells = grid_cells(cloud.positions(), origin, cfg.grid_size, cfg.bits)?;
    Ok(codes_from_cells(&cells, cloud.batch(), pattern, cfg.bits))
}

fn codes_from_cells(
    cells: &[GridCoord],
    batch: &[u16],
    pattern: CurvePattern,
    bits: BitsPerAxis,
) -> Vec<SerializedCode> {
    cells
        .iter()
        .zip(batch)
        .map(|(&c, &b)| SerializedCode::pack(b, sfc::encode_unchecked(pattern, c, bits)))
        .collect()
}

/// Stable argsort of the codes: returns `(order, inverse)`.
pub fn argsort_codes(codes: &[SerializedCode]) -> (Vec<usize>, Vec<usize>) {
    let mut keyed: Vec<(u64, usize)> = codes.iter().enumerate().map(|(i, c)| (c.0, i)).collect();
    // (code, index) pairs are unique, so an unstable sort yields the stable order.
    keyed.sort_unstable();
    let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    let mut inverse = vec![0usize; order.len()];
    for (pos, &orig) in order.iter().enumerate() {
        inverse[orig] = pos;
    }
    (order, inverse)
}

/// One [`SerializedOrder`] per configured pattern.
pub fn serialize_all(cloud: &PointCloud, cfg: &SerializationConfig) -> Result<Vec<SerializedOrder>> {
    serialize_all_with_origin(cloud, cfg, cloud.min_corner())
}

pub fn serialize_all_with_origin(
    cloud: &PointCloud,
    cfg: &SerializationConfig,
    origin: [f64; 3],
) -> Result<Vec<SerializedOrder>> {
    cfg.validate()?;
    let cells = grid_cells(cloud.positions(), origin, cfg.grid_size, cfg.bits)?;
    Ok(cfg
        .patterns
        .par_iter()
        .map(|&pattern| {
            let codes = codes_from_cells(&cells, cloud.batch(), pattern, cfg.bits);
            let (order, inverse) = argsort_codes(&codes);
            SerializedOrder {
                pattern,
                codes,
                order,
                inverse,
            }
        })
        .collect())
}
