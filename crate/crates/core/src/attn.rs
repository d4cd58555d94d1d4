//! Reference forward pass of one serialized-attention block.
//!
//! ```text
//! x <- xcpe(x)                        sparse 3x3x3 conv + skip
//! x <- x + attention(LN1(x), plan)    dot-product attention inside patches
//! x <- x + MLP(LN2(x))                C -> 4C -> C with GELU
//! ```

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::patch::{build_plan, select_pattern, shuffle_stream, InteractionKind, PatchPlan, PatternSchedule};
use crate::rng::SeededRng;
use crate::serialize::{grid_cells, serialize_all, PointCloud, SerializationConfig, SerializedOrder};
use crate::sfc::{BitsPerAxis, CurvePattern, GridCoord, MAX_BITS};
use crate::tensor::{vec_mat_acc, FeatureMatrix, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Hidden width of the feed-forward sublayer relative to the channel count.
pub const MLP_RATIO: usize = 4;
/// Offsets of the 3x3x3 positional-encoding kernel.
pub const CPE_TAPS: usize = 27;

/// Kernel slot of offset `(dx, dy, dz)`, each in `-1..=1`.
pub fn cpe_slot(dx: i32, dy: i32, dz: i32) -> usize {
    debug_assert!((-1..=1).contains(&dx) && (-1..=1).contains(&dy) && (-1..=1).contains(&dz));
    ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize
}

fn slot_offset(slot: usize) -> [i64; 3] {
    let s = slot as i64;
    [s / 9 - 1, (s / 3) % 3 - 1, s % 3 - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(c: usize) -> Self {
        LayerNorm {
            scale: vec![1.0; c],
            bias: vec![0.0; c],
        }
    }

    pub fn forward(&self, x: &FeatureMatrix) -> FeatureMatrix {
        let mut out = x.clone();
        let c = x.cols() as f64;
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((v, g), b) in row.iter_mut().zip(&self.scale).zip(&self.bias) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }
}

/// Affine map `x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            weight: Matrix::zeros(inp, out),
            bias: vec![0.0; out],
        }
    }

    pub fn random(inp: usize, out: usize, rng: &mut SeededRng) -> Self {
        Linear {
            weight: gaussian(inp, out, inp, rng),
            bias: vec![0.0; out],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &FeatureMatrix) -> FeatureMatrix {
        let mut out = x.matmul(&self.weight);
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        out
    }
}

/// Gaussian `rows × cols` matrix with standard deviation `1/sqrt(fan_in)`.
/// Values are rounded through `f32` so parameter files reload bit-exactly.
pub(crate) fn gaussian(rows: usize, cols: usize, fan_in: usize, rng: &mut SeededRng) -> Matrix {
    let normal = Normal::new(0.0f32, 1.0 / (fan_in.max(1) as f32).sqrt()).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng) as f64).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Parameters of one block with `C` channels and `heads` heads.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub heads: usize,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    /// 27 `C × C` slots indexed by [`cpe_slot`].
    pub cpe: Vec<Matrix>,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    /// Softmax temperature, `1/sqrt(C/heads)` unless overridden.
    pub attn_scale: f64,
}

impl BlockParams {
    /// All weights zero, layer norms identity.
    pub fn zeros(c: usize, heads: usize) -> Self {
        BlockParams {
            heads,
            wq: Matrix::zeros(c, c),
            wk: Matrix::zeros(c, c),
            wv: Matrix::zeros(c, c),
            wo: Matrix::zeros(c, c),
            ln1: LayerNorm::identity(c),
            ln2: LayerNorm::identity(c),
            cpe: vec![Matrix::zeros(c, c); CPE_TAPS],
            mlp_in: Linear::zeros(c, MLP_RATIO * c),
            mlp_out: Linear::zeros(MLP_RATIO * c, c),
            attn_scale: default_scale(c, heads),
        }
    }

    pub fn random(c: usize, heads: usize, rng: &mut SeededRng) -> Self {
        BlockParams {
            heads,
            wq: gaussian(c, c, c, rng),
            wk: gaussian(c, c, c, rng),
            wv: gaussian(c, c, c, rng),
            wo: gaussian(c, c, c, rng),
            ln1: LayerNorm::identity(c),
            ln2: LayerNorm::identity(c),
            cpe: (0..CPE_TAPS).map(|_| gaussian(c, c, CPE_TAPS * c, rng)).collect(),
            mlp_in: Linear::random(c, MLP_RATIO * c, rng),
            mlp_out: Linear::random(MLP_RATIO * c, c, rng),
            attn_scale: default_scale(c, heads),
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(Error::param(format!("{} heads do not divide {c} channels", self.heads)));
        }
        let square = |m: &Matrix| m.rows() == c && m.cols() == c;
        if ![&self.wq, &self.wk, &self.wv, &self.wo].into_iter().all(square)
            || self.cpe.len() != CPE_TAPS
            || !self.cpe.iter().all(square)
            || self.ln1.scale.len() != c
            || self.ln1.bias.len() != c
            || self.ln2.scale.len() != c
            || self.ln2.bias.len() != c
            || self.mlp_in.in_dim() != c
            || self.mlp_out.out_dim() != c
            || self.mlp_in.out_dim() != self.mlp_out.in_dim()
            || self.mlp_in.bias.len() != self.mlp_in.out_dim()
            || self.mlp_out.bias.len() != c
        {
            return Err(Error::Structure(format!("block parameters are not consistent with {c} channels")));
        }
        Ok(())
    }
}

pub fn default_scale(c: usize, heads: usize) -> f64 {
    1.0 / ((c / heads.max(1)).max(1) as f64).sqrt()
}

/// Occupied cells of a sparse grid and their 27-neighborhoods.
#[derive(Debug, Clone)]
pub struct SparseGrid {
    point_cell: Vec<usize>,
    neighbors: Vec<[Option<usize>; CPE_TAPS]>,
}

impl SparseGrid {
    pub fn from_cells(cells: &[GridCoord], batch: &[u16]) -> Self {
        assert_eq!(cells.len(), batch.len());
        let key = |b: u16, c: [i64; 3]| -> u64 {
            ((b as u64) << 48) | ((c[0] as u64) << 32) | ((c[1] as u64) << 16) | c[2] as u64
        };
        let mut ids: HashMap<u64, usize> = HashMap::with_capacity(cells.len());
        let mut coords: Vec<(u16, [i64; 3])> = Vec::new();
        let point_cell = cells
            .iter()
            .zip(batch)
            .map(|(c, &b)| {
                let xyz = [c.x as i64, c.y as i64, c.z as i64];
                *ids.entry(key(b, xyz)).or_insert_with(|| {
                    coords.push((b, xyz));
                    coords.len() - 1
                })
            })
            .collect();
        let side = 1i64 << MAX_BITS;
        let neighbors = coords
            .iter()
            .map(|&(b, xyz)| {
                let mut nb = [None; CPE_TAPS];
                for (slot, entry) in nb.iter_mut().enumerate() {
                    let off = slot_offset(slot);
                    let q = [xyz[0] + off[0], xyz[1] + off[1], xyz[2] + off[2]];
                    if q.iter().all(|&v| (0..side).contains(&v)) {
                        *entry = ids.get(&key(b, q)).copied();
                    }
                }
                nb
            })
            .collect();
        SparseGrid {
            point_cell,
            neighbors,
        }
    }

    /// Grid of a cloud at grid size `g`, with the cloud's minimum corner as
    /// origin.
    pub fn from_cloud(cloud: &PointCloud, g: f64) -> Result<Self> {
        let bits = BitsPerAxis::new(MAX_BITS)?;
        let cells = grid_cells(cloud.positions(), cloud.min_corner(), g, bits)?;
        Ok(SparseGrid::from_cells(&cells, cloud.batch()))
    }

    pub fn num_points(&self) -> usize {
        self.point_cell.len()
    }

    pub fn num_cells(&self) -> usize {
        self.neighbors.len()
    }
}

/// Conditional positional encoding: a 3x3x3 sparse convolution over the
/// grid at size `g`, plus the input (skip connection).
///
/// `out[i] = feats[i] + Σ_offset Σ_{j in cell(i)+offset} feats[j] · kernel[offset]`
pub fn xcpe(cloud: &PointCloud, feats: &FeatureMatrix, g: f64, kernel: &[Matrix]) -> Result<FeatureMatrix> {
    if !(g.is_finite() && g > 0.0) {
        return Err(Error::param(format!("grid size must be positive, got {g}")));
    }
    let grid = SparseGrid::from_cloud(cloud, g)?;
    xcpe_on_grid(&grid, feats, kernel)
}

pub fn xcpe_on_grid(grid: &SparseGrid, feats: &FeatureMatrix, kernel: &[Matrix]) -> Result<FeatureMatrix> {
    let c = feats.cols();
    if feats.rows() != grid.num_points() {
        return Err(Error::Structure("feature rows do not match the grid".into()));
    }
    if kernel.len() != CPE_TAPS || kernel.iter().any(|k| k.rows() != c || k.cols() != c) {
        return Err(Error::Structure(format!("xCPE kernel must hold {CPE_TAPS} {c}x{c} slots")));
    }
    // The convolution is linear, so summing members per cell first is exact
    // up to floating-point reassociation.
    let mut cell_sum = Matrix::zeros(grid.num_cells(), c);
    for (i, &cell) in grid.point_cell.iter().enumerate() {
        for (acc, v) in cell_sum.row_mut(cell).iter_mut().zip(feats.row(i)) {
            *acc += v;
        }
    }
    let conv_rows: Vec<f64> = grid
        .neighbors
        .par_iter()
        .flat_map_iter(|nb| {
            let mut row = vec![0.0; c];
            for (slot, cell) in nb.iter().enumerate() {
                if let Some(cell) = cell {
                    vec_mat_acc(cell_sum.row(*cell), &kernel[slot], &mut row);
                }
            }
            row
        })
        .collect();
    let conv = Matrix::from_vec(grid.num_cells(), c, conv_rows)?;
    let mut out = feats.clone();
    for (i, &cell) in grid.point_cell.iter().enumerate() {
        for (o, v) in out.row_mut(i).iter_mut().zip(conv.row(cell)) {
            *o += v;
        }
    }
    Ok(out)
}

/// In-place numerically stable softmax.
fn softmax(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let inv = 1.0 / sum;
    for s in scores.iter_mut() {
        *s *= inv;
    }
}

/// Per-patch gathered keys and values, contiguous by slot.
struct PatchKv {
    k: Vec<f64>,
    v: Vec<f64>,
}

impl PatchKv {
    fn gather(idx: &[usize], k: &Matrix, v: &Matrix) -> Self {
        let c = k.cols();
        let mut kb = Vec::with_capacity(idx.len() * c);
        let mut vb = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            kb.extend_from_slice(k.row(i));
            vb.extend_from_slice(v.row(i));
        }
        PatchKv { k: kb, v: vb }
    }
}

/// Attention weights of one query over the patch keys for one head.
#[inline]
fn head_weights(q: &[f64], kv: &PatchKv, c: usize, h0: usize, hd: usize, scale: f64, out: &mut [f64]) {
    let qh = &q[h0..h0 + hd];
    for (j, w) in out.iter_mut().enumerate() {
        let kh = &kv.k[j * c + h0..j * c + h0 + hd];
        let mut dot = 0.0;
        for (a, b) in qh.iter().zip(kh) {
            dot += a * b;
        }
        *w = dot * scale;
    }
    softmax(out);
}

fn project_qkv(feats: &FeatureMatrix, params: &BlockParams) -> (Matrix, Matrix, Matrix) {
    (
        feats.matmul(&params.wq),
        feats.matmul(&params.wk),
        feats.matmul(&params.wv),
    )
}

fn check_attention_inputs(feats: &FeatureMatrix, plan: &PatchPlan, params: &BlockParams) -> Result<()> {
    params.validate()?;
    if feats.cols() != params.channels() {
        return Err(Error::Structure(format!(
            "features have {} channels, block expects {}",
            feats.cols(),
            params.channels()
        )));
    }
    if plan.point_count() != feats.rows() {
        return Err(Error::Structure(format!(
            "plan covers {} points, features have {} rows",
            plan.point_count(),
            feats.rows()
        )));
    }
    Ok(())
}

/// Multi-head dot-product attention inside every patch of `plan`.
///
/// Borrowed slots act as keys and values but their outputs are dropped;
/// each point's output comes from its non-borrowed slot. Patches run in
/// parallel; each output row is produced by a fixed sequential reduction,
/// so results do not depend on scheduling.
pub fn patch_attention(
    feats: &FeatureMatrix,
    plan: &PatchPlan,
    params: &BlockParams,
    checked: bool,
) -> Result<FeatureMatrix> {
    check_attention_inputs(feats, plan, params)?;
    if checked && !feats.is_finite() {
        return Err(Error::NumericHealth {
            stage: "attention input".into(),
        });
    }
    let c = params.channels();
    let hd = params.head_dim();
    let s = plan.patch_size();
    let (q, k, v) = project_qkv(feats, params);

    let per_patch: Vec<Vec<(usize, Vec<f64>)>> = (0..plan.num_patches())
        .into_par_iter()
        .map(|p| {
            let idx = plan.patch(p);
            let kv = PatchKv::gather(idx, &k, &v);
            let mut w = vec![0.0; s];
            let mut rows = Vec::new();
            for (&i, &b) in idx.iter().zip(plan.patch_borrowed(p)) {
                if b {
                    continue;
                }
                let mut out = vec![0.0; c];
                for h in 0..params.heads {
                    let h0 = h * hd;
                    head_weights(q.row(i), &kv, c, h0, hd, params.attn_scale, &mut w);
                    let oh = &mut out[h0..h0 + hd];
                    for (j, &wj) in w.iter().enumerate() {
                        let vh = &kv.v[j * c + h0..j * c + h0 + hd];
                        for (o, x) in oh.iter_mut().zip(vh) {
                            *o += wj * x;
                        }
                    }
                }
                rows.push((i, out));
            }
            rows
        })
        .collect();

    let mut heads = Matrix::zeros(feats.rows(), c);
    for (i, row) in per_patch.into_iter().flatten() {
        heads.row_mut(i).copy_from_slice(&row);
    }
    Ok(heads.matmul(&params.wo))
}

/// Softmax weights of patch `p`, one `s × s` matrix per head, rows for
/// every slot including borrowed ones.
pub fn attention_weights(
    feats: &FeatureMatrix,
    plan: &PatchPlan,
    params: &BlockParams,
    p: usize,
) -> Result<Vec<Matrix>> {
    check_attention_inputs(feats, plan, params)?;
    if p >= plan.num_patches() {
        return Err(Error::param(format!("patch {p} out of range")));
    }
    let c = params.channels();
    let hd = params.head_dim();
    let s = plan.patch_size();
    let (q, k, v) = project_qkv(feats, params);
    let idx = plan.patch(p);
    let kv = PatchKv::gather(idx, &k, &v);
    let mut out = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let mut m = Matrix::zeros(s, s);
        for (slot, &i) in idx.iter().enumerate() {
            head_weights(q.row(i), &kv, c, h * hd, hd, params.attn_scale, m.row_mut(slot));
        }
        out.push(m);
    }
    Ok(out)
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

fn mlp(x: &FeatureMatrix, params: &BlockParams) -> FeatureMatrix {
    let mut hidden = params.mlp_in.forward(x);
    hidden.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    params.mlp_out.forward(&hidden)
}

/// Everything a block needs besides its weights: the sparse grid for
/// xCPE, the serialization orders (one per pattern, in pattern order), the
/// pattern schedule of the current pass and the interaction strategy.
#[derive(Debug, Clone)]
pub struct BlockContext {
    pub grid: SparseGrid,
    pub patterns: Vec<CurvePattern>,
    pub orders: Vec<SerializedOrder>,
    pub schedule: PatternSchedule,
    pub kind: InteractionKind,
    pub patch_size: usize,
    pub checked: bool,
}

impl BlockContext {
    /// Serializes `cloud` with `cfg` and prepares the xCPE grid at the same
    /// grid size. Shuffle order draws the first permutation of its seed.
    pub fn new(
        cloud: &PointCloud,
        cfg: &SerializationConfig,
        kind: InteractionKind,
        patch_size: usize,
    ) -> Result<Self> {
        kind.validate()?;
        if patch_size == 0 {
            return Err(Error::param("patch size must be at least 1"));
        }
        let orders = serialize_all(cloud, cfg)?;
        let cells = grid_cells(cloud.positions(), cloud.min_corner(), cfg.grid_size, cfg.bits)?;
        Ok(BlockContext {
            grid: SparseGrid::from_cells(&cells, cloud.batch()),
            patterns: cfg.patterns.clone(),
            schedule: PatternSchedule::draw(&kind, cfg.patterns.len(), &mut shuffle_stream(&kind)),
            orders,
            kind,
            patch_size,
            checked: false,
        })
    }

    /// Pattern and patch plan used by block `block_index`.
    pub fn plan(&self, block_index: usize) -> Result<(CurvePattern, PatchPlan)> {
        let pattern = select_pattern(block_index, &self.patterns, &self.schedule)?;
        let order = &self.orders[self.schedule.pattern_index(block_index)];
        Ok((pattern, build_plan(order, &self.kind, block_index, self.patch_size)?))
    }
}

fn health(checked: bool, m: &FeatureMatrix, stage: &str) -> Result<()> {
    if checked && !m.is_finite() {
        return Err(Error::NumericHealth {
            stage: stage.to_string(),
        });
    }
    Ok(())
}

/// One pre-norm block: xCPE, attention sublayer, MLP sublayer.
pub fn block_forward(
    ctx: &BlockContext,
    feats: &FeatureMatrix,
    block_index: usize,
    params: &BlockParams,
) -> Result<FeatureMatrix> {
    let (_, plan) = ctx.plan(block_index)?;
    block_forward_planned(ctx, feats, &plan, params)
}

/// [`block_forward`] with the patch plan supplied by the caller.
pub fn block_forward_planned(
    ctx: &BlockContext,
    feats: &FeatureMatrix,
    plan: &PatchPlan,
    params: &BlockParams,
) -> Result<FeatureMatrix> {
    params.validate()?;
    health(ctx.checked, feats, "block input")?;
    let mut x = xcpe_on_grid(&ctx.grid, feats, &params.cpe)?;
    health(ctx.checked, &x, "xCPE")?;
    let attn = patch_attention(&params.ln1.forward(&x), plan, params, ctx.checked)?;
    x.add_assign(&attn);
    health(ctx.checked, &x, "attention")?;
    let ff = mlp(&params.ln2.forward(&x), params);
    x.add_assign(&ff);
    health(ctx.checked, &x, "MLP")?;
    Ok(x)
}
