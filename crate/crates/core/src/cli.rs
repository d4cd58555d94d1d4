//! Command-line front end. [`run_command`] never panics on bad input and
//! returns the process exit code: 0 on success, 1 for runtime or data
//! errors, 2 for usage errors.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::attn::{block_forward, BlockContext, BlockParams};
use crate::error::{Error, Result};
use crate::formats::{
    decode_tensors, encode_features, encode_order, encode_tensors, network_from_tensors, network_to_tensors,
    read_cloud, read_file, write_atomic, write_cloud, OrderDump,
};
use crate::gen::{generate, CloudKind, GenOptions};
use crate::metrics::{bench, knn_oracle, locality_reports, to_sorted_json, TimingRecord};
use crate::network::{unet_forward, NetworkConfig, NetworkParams};
use crate::rng::seeded;
use crate::serialize::{serialize_all, PointCloud, SerializationConfig};
use crate::sfc::{parse_patterns, validate_patterns, BitsPerAxis, CurvePattern, MAX_BITS};
use crate::tensor::FeatureMatrix;

#[derive(Debug, Parser)]
#[command(name = "sercloud", version, about = "Space-filling-curve serialization and patch attention for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cloud.
    Gen(GenArgs),
    /// Serialize a cloud along one curve and dump the permutation (SER1).
    Serialize(SerializeArgs),
    /// Print the patch plan one block would use.
    Group(GroupArgs),
    /// Locality report for each pattern.
    Stats(StatsArgs),
    /// Time serialization, the KNN oracle and a block forward pass.
    Bench(BenchArgs),
    /// Run the encoder/decoder and write per-point features (FTR1).
    Forward(ForwardArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GenKind {
    Uniform,
    Clusters,
    Surface,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    ShiftOrder,
    ShuffleOrder,
    ShiftDilation,
    ShiftPatch,
}

/// Settings shared by every command that serializes.
#[derive(Debug, Args)]
struct RunArgs {
    /// Grid cell size.
    #[arg(long, default_value_t = 0.02)]
    grid: f64,
    /// Bits per axis (1..=16).
    #[arg(long, default_value_t = MAX_BITS)]
    bits: u32,
    /// Comma-separated curve patterns: Z, TZ, H, TH.
    #[arg(long, default_value = "Z,TZ,H,TH")]
    patterns: String,
    /// Patch size.
    #[arg(long, default_value_t = 64)]
    patch_size: usize,
    /// Patch interaction strategy.
    #[arg(long, value_enum, default_value_t = KindArg::ShuffleOrder)]
    kind: KindArg,
    /// Dilation for shift-dilation.
    #[arg(long, default_value_t = 4)]
    dilation: usize,
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check activations for non-finite values after every sublayer.
    #[arg(long)]
    checked: bool,
}

/// [`RunArgs`] after validation.
#[derive(Debug, Clone)]
struct RunConfig {
    serial: SerializationConfig,
    patch_size: usize,
    kind: crate::patch::InteractionKind,
    seed: u64,
    checked: bool,
}

impl RunArgs {
    /// Validates everything at once so the user sees every problem in one
    /// diagnostic.
    fn resolve(&self) -> Result<RunConfig> {
        use crate::patch::InteractionKind;
        let mut problems = Vec::new();
        if !(self.grid.is_finite() && self.grid > 0.0) {
            problems.push(format!("--grid must be finite and positive, got {}", self.grid));
        }
        let bits = BitsPerAxis::new(self.bits)
            .map_err(|_| problems.push(format!("--bits must be in 1..={MAX_BITS}, got {}", self.bits)))
            .ok();
        let patterns = parse_patterns(&self.patterns)
            .and_then(|p| validate_patterns(&p).map(|_| p))
            .map_err(|e| problems.push(format!("--patterns: {e}")))
            .ok();
        if self.patch_size == 0 {
            problems.push("--patch-size must be at least 1".into());
        }
        if self.kind == KindArg::ShiftDilation && self.dilation == 0 {
            problems.push("--dilation must be at least 1".into());
        }
        if !problems.is_empty() {
            return Err(Error::Usage(problems.join("; ")));
        }
        let kind = match self.kind {
            KindArg::ShiftOrder => InteractionKind::ShiftOrder,
            KindArg::ShuffleOrder => InteractionKind::ShuffleOrder { seed: self.seed },
            KindArg::ShiftDilation => InteractionKind::ShiftDilation {
                dilation: self.dilation,
            },
            KindArg::ShiftPatch => InteractionKind::ShiftPatch,
        };
        let serial = SerializationConfig::new(self.grid, bits.expect("checked"), patterns.expect("checked"))
            .map_err(usage)?;
        Ok(RunConfig {
            serial,
            patch_size: self.patch_size,
            kind,
            seed: self.seed,
            checked: self.checked,
        })
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(value_enum)]
    kind: GenKind,
    /// Number of points.
    #[arg(short = 'n', long, default_value_t = 4096)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of blobs (clusters).
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    /// Blob standard deviation (clusters).
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Height noise standard deviation (surface).
    #[arg(long, default_value_t = 0.005)]
    noise: f64,
    /// Feature channels.
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Number of batches the points are split into.
    #[arg(long, default_value_t = 1)]
    batches: usize,
    /// Output file; `.xyz` selects the text format.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct SerializeArgs {
    input: PathBuf,
    /// Curve pattern.
    #[arg(long, default_value = "H")]
    pattern: CurvePattern,
    #[arg(long, default_value_t = 0.02)]
    grid: f64,
    #[arg(long, default_value_t = MAX_BITS)]
    bits: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct GroupArgs {
    input: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Block index whose plan is printed.
    #[arg(long, default_value_t = 0)]
    block: usize,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    input: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// Neighbors per point for the patch overlap.
    #[arg(short, long, default_value_t = 16)]
    k: usize,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated cloud sizes.
    #[arg(long, default_value = "10000,20000", value_delimiter = ',')]
    points: Vec<usize>,
    /// Iterations per measurement; the first is discarded.
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    /// Comma-separated operations: serialize, knn, block.
    #[arg(long, default_value = "serialize,knn,block", value_delimiter = ',')]
    ops: Vec<String>,
    /// Neighbors for the KNN oracle.
    #[arg(short, long, default_value_t = 16)]
    k: usize,
    /// Channels and heads of the benchmarked block.
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ForwardArgs {
    input: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    /// JSON architecture file (depths, channels, heads, multipliers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// PTW1 weights; generated from --seed when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Also write the weights that were used.
    #[arg(long)]
    save_weights: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

/// Architecture overrides read by `forward --config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ArchitectureFile {
    enc_depths: Option<Vec<usize>>,
    dec_depths: Option<Vec<usize>>,
    enc_channels: Option<Vec<usize>>,
    dec_channels: Option<Vec<usize>>,
    enc_heads: Option<Vec<usize>>,
    dec_heads: Option<Vec<usize>>,
    grid_multipliers: Option<Vec<u32>>,
}

fn usage(e: Error) -> Error {
    match e {
        Error::Usage(_) => e,
        other => Error::Usage(other.to_string()),
    }
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Diagnostics go to stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Serialize(a) => cmd_serialize(a),
        Command::Group(a) => cmd_group(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Forward(a) => cmd_forward(a),
    }
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(out.flush()?)
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let kind = match a.kind {
        GenKind::Uniform => CloudKind::Uniform,
        GenKind::Clusters => CloudKind::Clusters {
            clusters: a.clusters,
            sigma: a.sigma,
        },
        GenKind::Surface => CloudKind::Surface { noise: a.noise },
    };
    let opts = GenOptions {
        kind,
        points: a.points,
        seed: a.seed,
        channels: a.channels,
        batches: a.batches,
    };
    let cloud = generate(&opts).map_err(usage)?;
    write_cloud(&a.output, &cloud)
}

fn cmd_serialize(a: SerializeArgs) -> Result<()> {
    let mut problems = Vec::new();
    if !(a.grid.is_finite() && a.grid > 0.0) {
        problems.push(format!("--grid must be finite and positive, got {}", a.grid));
    }
    if BitsPerAxis::new(a.bits).is_err() {
        problems.push(format!("--bits must be in 1..={MAX_BITS}, got {}", a.bits));
    }
    if !problems.is_empty() {
        return Err(Error::Usage(problems.join("; ")));
    }
    let cfg = SerializationConfig::new(a.grid, BitsPerAxis::new(a.bits)?, vec![a.pattern]).map_err(usage)?;
    let cloud = read_cloud(&a.input)?;
    let order = serialize_all(&cloud, &cfg)?.remove(0);
    let dump = OrderDump {
        order,
        bits: cfg.bits,
        grid_size: cfg.grid_size,
    };
    write_atomic(&a.output, &encode_order(&dump)?)
}

fn cmd_group(a: GroupArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let cloud = read_cloud(&a.input)?;
    let ctx = BlockContext::new(&cloud, &cfg.serial, cfg.kind, cfg.patch_size)?;
    let (_, plan) = ctx.plan(a.block)?;
    emit(a.output.as_deref(), &plan.to_text())
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    if a.k == 0 {
        return Err(Error::Usage("-k must be at least 1".into()));
    }
    let cloud = read_cloud(&a.input)?;
    let reports = locality_reports(&cloud, &cfg.serial, cfg.patch_size, a.k)?;
    emit(a.output.as_deref(), &to_sorted_json(&reports)?)
}

fn bench_cloud(n: usize, channels: usize, seed: u64) -> Result<PointCloud> {
    let mut opts = GenOptions::new(CloudKind::Uniform, n, seed);
    opts.channels = channels;
    generate(&opts)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let mut problems = Vec::new();
    if a.points.is_empty() || a.points.contains(&0) {
        problems.push("--points needs positive sizes".to_string());
    }
    if a.iterations < 2 {
        problems.push("--iterations must be at least 2".into());
    }
    for op in &a.ops {
        if !matches!(op.as_str(), "serialize" | "knn" | "block") {
            problems.push(format!("unknown op `{op}` (expected serialize, knn or block)"));
        }
    }
    if a.k == 0 {
        problems.push("-k must be at least 1".into());
    }
    if a.heads == 0 || !a.channels.is_multiple_of(a.heads) {
        problems.push(format!("--channels {} must be a positive multiple of --heads {}", a.channels, a.heads));
    }
    if !problems.is_empty() {
        return Err(Error::Usage(problems.join("; ")));
    }
    let mut records: Vec<TimingRecord> = Vec::new();
    for &n in &a.points {
        let cloud = bench_cloud(n, a.channels, cfg.seed)?;
        for op in &a.ops {
            let label = format!("{op}/n={n}");
            let record = match op.as_str() {
                "serialize" => bench(&label, || (), |_| serialize_all(&cloud, &cfg.serial), a.iterations)?,
                "knn" => bench(&label, || (), |_| knn_oracle(&cloud, a.k), a.iterations)?,
                _ => {
                    let mut ctx = BlockContext::new(&cloud, &cfg.serial, cfg.kind, cfg.patch_size)?;
                    ctx.checked = cfg.checked;
                    let params = BlockParams::random(a.channels, a.heads, &mut seeded(cfg.seed));
                    let feats = cloud.features().clone();
                    bench(&label, || (), |_| block_forward(&ctx, &feats, 0, &params), a.iterations)?
                }
            };
            records.push(record);
        }
    }
    emit(a.output.as_deref(), &to_sorted_json(&records)?)
}

fn network_config(run: &RunConfig, arch: Option<&Path>) -> Result<NetworkConfig> {
    let mut cfg = NetworkConfig {
        grid_size: run.serial.grid_size,
        bits: run.serial.bits,
        patch_size: run.patch_size,
        patterns: run.serial.patterns.clone(),
        kind: run.kind,
        seed: run.seed,
        checked: run.checked,
        ..NetworkConfig::default()
    };
    if let Some(path) = arch {
        let text = std::fs::read_to_string(path)?;
        let file: ArchitectureFile = serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        macro_rules! apply {
            ($($field:ident),*) => { $(if let Some(v) = file.$field { cfg.$field = v; })* };
        }
        apply!(enc_depths, dec_depths, enc_channels, dec_channels, enc_heads, dec_heads, grid_multipliers);
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn cmd_forward(a: ForwardArgs) -> Result<()> {
    let run = a.run.resolve()?;
    let cfg = network_config(&run, a.config.as_deref())?;
    let cloud = read_cloud(&a.input)?;
    let params = match &a.weights {
        Some(path) => network_from_tensors(&cfg, &decode_tensors(&read_file(path)?)?)?,
        None => NetworkParams::random(&cfg, cloud.channels(), cfg.seed)?,
    };
    if let Some(path) = &a.save_weights {
        write_atomic(path, &encode_tensors(&network_to_tensors(&params))?)?;
    }
    let out = unet_forward(&cloud, &cfg, &params)?;
    eprintln!(
        "serialization and grouping: {:.1}% of {:.3} s forward time",
        100.0 * out.serialization_share(),
        out.total_secs
    );
    let feats: &FeatureMatrix = &out.features;
    write_atomic(&a.output, &encode_features(feats))
}
