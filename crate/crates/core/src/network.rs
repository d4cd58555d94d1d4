//! Grid pooling, unpooling and the encoder/decoder forward pass.
//!
//! Layout with the default configuration:
//!
//! ```text
//! embed (linear + xCPE) @ g0                       level 0, n points
//!   pool x2 -> encoder stage 0 (2 blocks)  @ 2 g0  level 1
//!   pool x2 -> encoder stage 1 (2 blocks)  @ 4 g0  level 2
//!   pool x2 -> encoder stage 2 (6 blocks)  @ 8 g0  level 3
//!   pool x2 -> encoder stage 3 (2 blocks)  @ 16 g0 level 4
//!   unpool -> decoder stage 0 (1 block)    @ level 3
//!   ...
//!   unpool -> decoder stage 3 (1 block)    @ level 0, n points
//! ```
//!
//! Grid cells are computed once at level 0 and coarsened by integer
//! division, so every fine cell nests inside exactly one coarse cell.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use crate::attn::{block_forward_planned, xcpe_on_grid, BlockContext, BlockParams, Linear, SparseGrid, CPE_TAPS};
use crate::error::{Error, Result};
use crate::patch::{shuffle_stream, InteractionKind, PatternSchedule};
use crate::rng::{seeded, SeededRng};
use crate::serialize::{argsort_codes, grid_cells, PointCloud, SerializedCode, SerializedOrder};
use crate::sfc::{self, BitsPerAxis, CurvePattern, GridCoord, MAX_BITS};
use crate::tensor::{FeatureMatrix, Matrix};

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Fine-to-coarse assignment produced by grid pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolMap {
    /// Coarse index of every fine point.
    pub parent: Vec<usize>,
    /// Number of fine points merged into every coarse point.
    pub counts: Vec<usize>,
}

impl PoolMap {
    pub fn identity(n: usize) -> Self {
        PoolMap {
            parent: (0..n).collect(),
            counts: vec![1; n],
        }
    }

    pub fn coarse_len(&self) -> usize {
        self.counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() {
            return Err(Error::Structure("pool map has no coarse points".into()));
        }
        let mut seen = vec![0usize; self.counts.len()];
        for (i, &p) in self.parent.iter().enumerate() {
            if p >= self.counts.len() {
                return Err(Error::Structure(format!(
                    "fine point {i} has parent {p} but only {} coarse points exist",
                    self.counts.len()
                )));
            }
            seen[p] += 1;
        }
        if seen != self.counts {
            return Err(Error::Structure("pool map counts do not match parents".into()));
        }
        Ok(())
    }
}

/// Forward-only batch normalization: statistics come from the current
/// input, there are no running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(c: usize) -> Self {
        BatchNorm {
            scale: vec![1.0; c],
            bias: vec![0.0; c],
        }
    }

    pub fn forward(&self, x: &FeatureMatrix) -> FeatureMatrix {
        let (n, c) = (x.rows(), x.cols());
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / n as f64 + BATCH_NORM_EPS).sqrt())
            .collect();
        let mut out = x.clone();
        for i in 0..n {
            for (ch, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[ch]) * inv[ch] * self.scale[ch] + self.bias[ch];
            }
        }
        out
    }
}

/// Stage transition applied to pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolParams {
    pub proj: Linear,
    pub norm: BatchNorm,
}

impl PoolParams {
    pub fn random(c_in: usize, c_out: usize, rng: &mut SeededRng) -> Self {
        PoolParams {
            proj: Linear::random(c_in, c_out, rng),
            norm: BatchNorm::identity(c_out),
        }
    }
}

/// Result of one pooling step.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub positions: Vec<[f64; 3]>,
    pub batch: Vec<u16>,
    pub cells: Vec<GridCoord>,
    pub feats: FeatureMatrix,
    pub map: PoolMap,
}

impl Pooled {
    pub fn cloud(&self) -> Result<PointCloud> {
        PointCloud::new(self.positions.clone(), self.feats.clone(), self.batch.clone())
    }
}

/// Merges points that share `(batch, coarse cell)`. Coarse points are
/// numbered in order of first appearance.
fn pool_by_cells(
    positions: &[[f64; 3]],
    batch: &[u16],
    coarse_cells: &[GridCoord],
    feats: &FeatureMatrix,
    params: &PoolParams,
) -> Result<Pooled> {
    let n = positions.len();
    if feats.rows() != n || batch.len() != n || coarse_cells.len() != n {
        return Err(Error::Structure("pooling inputs disagree on the point count".into()));
    }
    if params.proj.in_dim() != feats.cols() {
        return Err(Error::Structure(format!(
            "pool projection expects {} channels, features have {}",
            params.proj.in_dim(),
            feats.cols()
        )));
    }
    let mut ids: HashMap<(u16, GridCoord), usize> = HashMap::new();
    let mut parent = Vec::with_capacity(n);
    let mut counts: Vec<usize> = Vec::new();
    let mut out_batch = Vec::new();
    let mut out_cells = Vec::new();
    for i in 0..n {
        let key = (batch[i], coarse_cells[i]);
        let id = *ids.entry(key).or_insert_with(|| {
            counts.push(0);
            out_batch.push(batch[i]);
            out_cells.push(coarse_cells[i]);
            counts.len() - 1
        });
        counts[id] += 1;
        parent.push(id);
    }
    let m = counts.len();
    let mut pos_sum = vec![[0.0f64; 3]; m];
    let mut feat_mean = Matrix::zeros(m, feats.cols());
    for i in 0..n {
        let p = parent[i];
        for a in 0..3 {
            pos_sum[p][a] += positions[i][a];
        }
        for (acc, v) in feat_mean.row_mut(p).iter_mut().zip(feats.row(i)) {
            *acc += v;
        }
    }
    for (p, &cnt) in counts.iter().enumerate() {
        let inv = 1.0 / cnt as f64;
        pos_sum[p].iter_mut().for_each(|v| *v *= inv);
        feat_mean.row_mut(p).iter_mut().for_each(|v| *v *= inv);
    }
    let feats = params.norm.forward(&params.proj.forward(&feat_mean));
    Ok(Pooled {
        positions: pos_sum,
        batch: out_batch,
        cells: out_cells,
        feats,
        map: PoolMap { parent, counts },
    })
}

/// Grid pooling at grid size `g_new` with cells measured from `origin`.
///
/// Pooled positions are member centroids; pooled features are the member
/// mean, projected and batch-normalized.
pub fn grid_pool(
    cloud: &PointCloud,
    feats: &FeatureMatrix,
    origin: [f64; 3],
    g_new: f64,
    params: &PoolParams,
) -> Result<Pooled> {
    if !(g_new.is_finite() && g_new > 0.0) {
        return Err(Error::param(format!("grid size must be positive, got {g_new}")));
    }
    let cells = grid_cells(cloud.positions(), origin, g_new, BitsPerAxis::new(MAX_BITS)?)?;
    pool_by_cells(cloud.positions(), cloud.batch(), &cells, feats, params)
}

/// Broadcasts coarse features back to fine points and mixes them with the
/// skip features: `proj([skip_i, coarse_parent(i)])`.
pub fn grid_unpool(
    map: &PoolMap,
    coarse: &FeatureMatrix,
    skip: &FeatureMatrix,
    proj: &Linear,
) -> Result<FeatureMatrix> {
    if map.parent.len() != skip.rows() {
        return Err(Error::Structure(format!(
            "pool map has {} fine points, skip features have {} rows",
            map.parent.len(),
            skip.rows()
        )));
    }
    if let Some(&p) = map.parent.iter().find(|&&p| p >= coarse.rows()) {
        return Err(Error::Structure(format!(
            "parent index {p} out of range for {} coarse points",
            coarse.rows()
        )));
    }
    if proj.in_dim() != skip.cols() + coarse.cols() {
        return Err(Error::Structure("unpool projection width mismatch".into()));
    }
    let broadcast = coarse.select_rows(&map.parent);
    Ok(proj.forward(&skip.hcat(&broadcast)))
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub enc_depths: Vec<usize>,
    pub dec_depths: Vec<usize>,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub enc_heads: Vec<usize>,
    pub dec_heads: Vec<usize>,
    /// Grid size at full resolution (the embedding level).
    pub grid_size: f64,
    /// Grid expansion of every pooling step relative to the previous level.
    pub grid_multipliers: Vec<u32>,
    pub bits: BitsPerAxis,
    pub patch_size: usize,
    pub patterns: Vec<CurvePattern>,
    pub kind: InteractionKind,
    /// Seed for generated weights.
    pub seed: u64,
    pub checked: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            enc_depths: vec![2, 2, 6, 2],
            dec_depths: vec![1, 1, 1, 1],
            enc_channels: vec![32, 64, 128, 256],
            dec_channels: vec![256, 128, 64, 32],
            enc_heads: vec![2, 4, 8, 16],
            dec_heads: vec![16, 8, 4, 2],
            grid_size: 0.02,
            grid_multipliers: vec![2, 2, 2, 2],
            bits: BitsPerAxis::new(MAX_BITS).expect("valid"),
            patch_size: 64,
            patterns: CurvePattern::ALL.to_vec(),
            kind: InteractionKind::ShuffleOrder { seed: 0 },
            seed: 0,
            checked: false,
        }
    }
}

impl NetworkConfig {
    pub fn stages(&self) -> usize {
        self.enc_depths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        let mut problems = Vec::new();
        if s == 0 {
            problems.push("at least one encoder stage is required".to_string());
        }
        for (name, len) in [
            ("dec_depths", self.dec_depths.len()),
            ("enc_channels", self.enc_channels.len()),
            ("dec_channels", self.dec_channels.len()),
            ("enc_heads", self.enc_heads.len()),
            ("dec_heads", self.dec_heads.len()),
            ("grid_multipliers", self.grid_multipliers.len()),
        ] {
            if len != s {
                problems.push(format!("{name} has {len} entries for {s} stages"));
            }
        }
        if problems.is_empty() {
            for (i, (&c, &h)) in self.enc_channels.iter().zip(&self.enc_heads).enumerate() {
                if c == 0 || h == 0 || c % h != 0 {
                    problems.push(format!("encoder stage {i}: {h} heads do not divide {c} channels"));
                }
            }
            for (i, (&c, &h)) in self.dec_channels.iter().zip(&self.dec_heads).enumerate() {
                if c == 0 || h == 0 || c % h != 0 {
                    problems.push(format!("decoder stage {i}: {h} heads do not divide {c} channels"));
                }
            }
        }
        if self.grid_multipliers.iter().any(|&m| m < 2) {
            problems.push("grid multipliers must be integers of at least 2".into());
        }
        if !(self.grid_size.is_finite() && self.grid_size > 0.0) {
            problems.push(format!("grid size must be positive, got {}", self.grid_size));
        }
        if self.patch_size == 0 {
            problems.push("patch size must be at least 1".into());
        }
        if let Err(e) = sfc::validate_patterns(&self.patterns) {
            problems.push(e.to_string());
        }
        if let Err(e) = self.kind.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::param(problems.join("; ")))
        }
    }

    /// Channels of the feature map at resolution level `level` on the
    /// encoder side (level 0 is the embedding).
    fn enc_width(&self, level: usize) -> usize {
        if level == 0 {
            self.enc_channels[0]
        } else {
            self.enc_channels[level - 1]
        }
    }
}

/// All weights of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub embed: Linear,
    pub embed_cpe: Vec<Matrix>,
    pub enc_pool: Vec<PoolParams>,
    pub enc_blocks: Vec<Vec<BlockParams>>,
    pub dec_unpool: Vec<Linear>,
    pub dec_blocks: Vec<Vec<BlockParams>>,
}

impl NetworkParams {
    /// Deterministic Gaussian weights for `in_channels` input features.
    pub fn random(cfg: &NetworkConfig, in_channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let c0 = cfg.enc_channels[0];
        let embed = Linear::random(in_channels, c0, &mut rng);
        let embed_cpe = (0..CPE_TAPS)
            .map(|_| crate::attn::gaussian(c0, c0, CPE_TAPS * c0, &mut rng))
            .collect();
        let mut enc_pool = Vec::new();
        let mut enc_blocks = Vec::new();
        for i in 0..cfg.stages() {
            let c_in = cfg.enc_width(i);
            let c = cfg.enc_channels[i];
            enc_pool.push(PoolParams::random(c_in, c, &mut rng));
            enc_blocks.push(
                (0..cfg.enc_depths[i])
                    .map(|_| BlockParams::random(c, cfg.enc_heads[i], &mut rng))
                    .collect(),
            );
        }
        let mut dec_unpool = Vec::new();
        let mut dec_blocks = Vec::new();
        let mut coarse = cfg.enc_channels[cfg.stages() - 1];
        for j in 0..cfg.stages() {
            let level = cfg.stages() - 1 - j;
            let skip = cfg.enc_width(level);
            let c = cfg.dec_channels[j];
            dec_unpool.push(Linear::random(skip + coarse, c, &mut rng));
            dec_blocks.push(
                (0..cfg.dec_depths[j])
                    .map(|_| BlockParams::random(c, cfg.dec_heads[j], &mut rng))
                    .collect(),
            );
            coarse = c;
        }
        Ok(NetworkParams {
            embed,
            embed_cpe,
            enc_pool,
            enc_blocks,
            dec_unpool,
            dec_blocks,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.embed.in_dim()
    }

    /// Checks that the weights fit `cfg`.
    pub fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        cfg.validate()?;
        let s = cfg.stages();
        let c0 = cfg.enc_channels[0];
        let err = |m: String| Err(Error::Structure(m));
        if self.embed.out_dim() != c0 || self.embed_cpe.len() != CPE_TAPS {
            return err("embedding does not match the configuration".into());
        }
        if self.enc_pool.len() != s || self.enc_blocks.len() != s || self.dec_unpool.len() != s || self.dec_blocks.len() != s {
            return err("stage count does not match the configuration".into());
        }
        for i in 0..s {
            if self.enc_blocks[i].len() != cfg.enc_depths[i] || self.dec_blocks[i].len() != cfg.dec_depths[i] {
                return err(format!("stage {i} depth does not match the configuration"));
            }
            if self.enc_pool[i].proj.out_dim() != cfg.enc_channels[i]
                || self.enc_pool[i].proj.in_dim() != cfg.enc_width(i)
            {
                return err(format!("encoder stage {i} pooling width mismatch"));
            }
            if self.dec_unpool[i].out_dim() != cfg.dec_channels[i] {
                return err(format!("decoder stage {i} unpooling width mismatch"));
            }
            for b in self.enc_blocks[i].iter().chain(&self.dec_blocks[i]) {
                b.validate()?;
            }
        }
        Ok(())
    }
}

/// Geometry, serialization orders and attention context at one level.
struct Level {
    positions: Vec<[f64; 3]>,
    batch: Vec<u16>,
    cells: Vec<GridCoord>,
    ctx: BlockContext,
}

impl Level {
    fn new(
        positions: Vec<[f64; 3]>,
        batch: Vec<u16>,
        cells: Vec<GridCoord>,
        cfg: &NetworkConfig,
        stream: &mut SeededRng,
        spent: &mut Duration,
    ) -> Self {
        let start = Instant::now();
        let orders = cfg
            .patterns
            .iter()
            .map(|&pattern| {
                let codes: Vec<SerializedCode> = cells
                    .iter()
                    .zip(&batch)
                    .map(|(&c, &b)| SerializedCode::pack(b, sfc::encode_unchecked(pattern, c, cfg.bits)))
                    .collect();
                let (order, inverse) = argsort_codes(&codes);
                SerializedOrder {
                    pattern,
                    codes,
                    order,
                    inverse,
                }
            })
            .collect();
        *spent += start.elapsed();
        let ctx = BlockContext {
            grid: SparseGrid::from_cells(&cells, &batch),
            patterns: cfg.patterns.clone(),
            orders,
            schedule: PatternSchedule::draw(&cfg.kind, cfg.patterns.len(), stream),
            kind: cfg.kind,
            patch_size: cfg.patch_size,
            checked: cfg.checked,
        };
        Level {
            positions,
            batch,
            cells,
            ctx,
        }
    }

    fn len(&self) -> usize {
        self.positions.len()
    }
}

/// Output of [`unet_forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: FeatureMatrix,
    /// Point count at every resolution level, finest first.
    pub level_counts: Vec<usize>,
    /// Wall time spent computing serialized orders and patch plans.
    pub serialization_secs: f64,
    /// Wall time of the whole pass.
    pub total_secs: f64,
}

impl ForwardOutput {
    /// Fraction of the forward time spent on serialization and grouping.
    pub fn serialization_share(&self) -> f64 {
        if self.total_secs > 0.0 {
            self.serialization_secs / self.total_secs
        } else {
            0.0
        }
    }
}

fn run_blocks(
    ctx: &BlockContext,
    mut x: FeatureMatrix,
    blocks: &[BlockParams],
    spent: &mut Duration,
) -> Result<FeatureMatrix> {
    for (i, params) in blocks.iter().enumerate() {
        let start = Instant::now();
        let (_, plan) = ctx.plan(i)?;
        *spent += start.elapsed();
        x = block_forward_planned(ctx, &x, &plan, params)?;
    }
    Ok(x)
}

/// Full encoder/decoder forward pass. Deterministic in `(cloud, cfg, params)`.
pub fn unet_forward(cloud: &PointCloud, cfg: &NetworkConfig, params: &NetworkParams) -> Result<ForwardOutput> {
    let started = Instant::now();
    let mut spent = Duration::ZERO;
    params.validate(cfg)?;
    if params.input_channels() != cloud.channels() {
        return Err(Error::Structure(format!(
            "weights expect {} input channels, cloud has {}",
            params.input_channels(),
            cloud.channels()
        )));
    }
    let mut stream = shuffle_stream(&cfg.kind);
    let cells = grid_cells(cloud.positions(), cloud.min_corner(), cfg.grid_size, cfg.bits)?;
    let mut levels = vec![Level::new(
        cloud.positions().to_vec(),
        cloud.batch().to_vec(),
        cells,
        cfg,
        &mut stream,
        &mut spent,
    )];

    let mut x = params.embed.forward(cloud.features());
    x = xcpe_on_grid(&levels[0].ctx.grid, &x, &params.embed_cpe)?;
    if cfg.checked && !x.is_finite() {
        return Err(Error::NumericHealth {
            stage: "embedding".into(),
        });
    }

    let mut skips = Vec::with_capacity(cfg.stages());
    let mut maps = Vec::with_capacity(cfg.stages());
    for i in 0..cfg.stages() {
        let fine = &levels[i];
        let m = cfg.grid_multipliers[i];
        let coarse_cells: Vec<GridCoord> = fine
            .cells
            .iter()
            .map(|c| GridCoord::new(c.x / m, c.y / m, c.z / m))
            .collect();
        let pooled = pool_by_cells(&fine.positions, &fine.batch, &coarse_cells, &x, &params.enc_pool[i])?;
        skips.push(std::mem::replace(&mut x, pooled.feats));
        maps.push(pooled.map);
        let level = Level::new(pooled.positions, pooled.batch, pooled.cells, cfg, &mut stream, &mut spent);
        x = run_blocks(&level.ctx, x, &params.enc_blocks[i], &mut spent)?;
        levels.push(level);
    }

    for j in 0..cfg.stages() {
        let target = cfg.stages() - 1 - j;
        let skip = skips.pop().expect("one skip per stage");
        x = grid_unpool(&maps[target], &x, &skip, &params.dec_unpool[j])?;
        x = run_blocks(&levels[target].ctx, x, &params.dec_blocks[j], &mut spent)?;
    }

    Ok(ForwardOutput {
        features: x,
        level_counts: levels.iter().map(Level::len).collect(),
        serialization_secs: spent.as_secs_f64(),
        total_secs: started.elapsed().as_secs_f64(),
    })
}
