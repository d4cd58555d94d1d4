//! On-disk formats. All binary formats are little-endian.
//!
//! | magic  | content                                                         |
//! |--------|-----------------------------------------------------------------|
//! | `PCB1` | u64 n, u32 C, u8 position width (8), n×3 f64, n×C f32, n u16    |
//! | `SER1` | u64 n, u8 pattern, u8 bits, f64 grid, n u64 codes, n u32 order, n u32 inverse |
//! | `PTW1` | repeated (u16 name len, name, u8 rank, u32 dims…, f32 data)     |
//! | `FTR1` | u64 n, u32 C, n×C f32                                           |
//!
//! Text clouds (`.xyz`) hold one point per line: `x y z [f1 … fC] [#batch]`.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::attn::{BlockParams, LayerNorm, Linear, CPE_TAPS};
use crate::error::{Error, Result};
use crate::network::{BatchNorm, NetworkConfig, NetworkParams, PoolParams};
use crate::serialize::{PointCloud, SerializedCode, SerializedOrder};
use crate::sfc::{BitsPerAxis, CurvePattern};
use crate::tensor::{FeatureMatrix, Matrix};

pub const CLOUD_MAGIC: &[u8; 4] = b"PCB1";
pub const ORDER_MAGIC: &[u8; 4] = b"SER1";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"PTW1";
pub const FEATURES_MAGIC: &[u8; 4] = b"FTR1";

/// Little-endian cursor over a byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(format!("{} file is truncated", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(format!(
                "not a {} file (expected magic {})",
                self.what,
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Element count read from the file, bounded by the remaining bytes so
    /// a corrupt header cannot trigger a huge allocation.
    fn count(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(elem_bytes as u64) > remaining {
            return Err(Error::format(format!("{} file is truncated", self.what)));
        }
        Ok(n as usize)
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn finish(&self) -> Result<()> {
        if !self.at_end() {
            return Err(Error::format(format!("trailing bytes in {} file", self.what)));
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

// ---------------------------------------------------------------- clouds

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let c = cloud.channels();
    let mut out = Vec::with_capacity(17 + n * (24 + 4 * c + 2));
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.push(8);
    for p in cloud.positions() {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in cloud.features().as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for b in cloud.batch() {
        out.extend_from_slice(&b.to_le_bytes());
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new(bytes, "PCB1 cloud");
    r.magic(CLOUD_MAGIC)?;
    let n = r.count(24)?;
    let c = r.u32()? as usize;
    let width = r.u8()?;
    if width != 8 {
        return Err(Error::format(format!("unsupported position width {width}")));
    }
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push([r.f64()?, r.f64()?, r.f64()?]);
    }
    let mut feats = Vec::with_capacity(n * c);
    for _ in 0..n * c {
        feats.push(r.f32()? as f64);
    }
    let mut batch = Vec::with_capacity(n);
    for _ in 0..n {
        batch.push(r.u16()?);
    }
    r.finish()?;
    PointCloud::new(positions, FeatureMatrix::from_vec(n, c, feats)?, batch)
}

pub fn cloud_to_xyz(cloud: &PointCloud) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    for i in 0..cloud.len() {
        let p = cloud.positions()[i];
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        for v in cloud.features().row(i) {
            let _ = write!(s, " {}", *v as f32);
        }
        let _ = writeln!(s, " #{}", cloud.batch()[i]);
    }
    s
}

pub fn cloud_from_xyz(text: &str) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut feats = Vec::new();
    let mut batch = Vec::new();
    let mut channels: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(format!("line {}: {what}", lineno + 1));
        let mut tokens: Vec<&str> = line.split_whitespace().collect();
        let b = match tokens.last() {
            Some(t) if t.starts_with('#') => {
                let b = t[1..].parse::<u16>().map_err(|_| bad("bad batch index"))?;
                tokens.pop();
                b
            }
            _ => 0,
        };
        if tokens.len() < 3 {
            return Err(bad("expected at least x y z"));
        }
        let vals = tokens
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| bad(&format!("bad number `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        let c = vals.len() - 3;
        match channels {
            None => channels = Some(c),
            Some(prev) if prev != c => return Err(bad(&format!("{c} features, earlier lines had {prev}"))),
            _ => {}
        }
        positions.push([vals[0], vals[1], vals[2]]);
        feats.extend_from_slice(&vals[3..]);
        batch.push(b);
    }
    let n = positions.len();
    let c = channels.unwrap_or(0);
    // Clouds without feature columns get a constant feature.
    let features = if c == 0 {
        FeatureMatrix::from_vec(n, 1, vec![1.0; n])?
    } else {
        FeatureMatrix::from_vec(n, c, feats)?
    };
    PointCloud::new(positions, features, batch)
}

/// Reads a cloud, choosing the text reader for `.xyz` files.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    if is_xyz(path) {
        cloud_from_xyz(&fs::read_to_string(path)?)
    } else {
        decode_cloud(&fs::read(path)?)
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    if is_xyz(path) {
        write_atomic(path, cloud_to_xyz(cloud).as_bytes())
    } else {
        write_atomic(path, &encode_cloud(cloud))
    }
}

fn is_xyz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("xyz"))
}

// ---------------------------------------------------------------- orders

/// Contents of a `SER1` permutation dump.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderDump {
    pub order: SerializedOrder,
    pub bits: BitsPerAxis,
    pub grid_size: f64,
}

pub fn encode_order(dump: &OrderDump) -> Result<Vec<u8>> {
    let o = &dump.order;
    let n = o.len();
    if n > u32::MAX as usize {
        return Err(Error::format("SER1 stores indices as u32"));
    }
    let mut out = Vec::with_capacity(22 + n * 16);
    out.extend_from_slice(ORDER_MAGIC);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.push(o.pattern.id());
    out.push(dump.bits.get() as u8);
    out.extend_from_slice(&dump.grid_size.to_le_bytes());
    for c in &o.codes {
        out.extend_from_slice(&c.0.to_le_bytes());
    }
    for &i in &o.order {
        out.extend_from_slice(&(i as u32).to_le_bytes());
    }
    for &i in &o.inverse {
        out.extend_from_slice(&(i as u32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_order(bytes: &[u8]) -> Result<OrderDump> {
    let mut r = Reader::new(bytes, "SER1 order");
    r.magic(ORDER_MAGIC)?;
    let n = r.count(16)?;
    let pattern = CurvePattern::from_id(r.u8()?)?;
    let bits = BitsPerAxis::new(r.u8()? as u32).map_err(|e| Error::format(e.to_string()))?;
    let grid_size = r.f64()?;
    let codes = (0..n).map(|_| r.u64().map(SerializedCode)).collect::<Result<Vec<_>>>()?;
    let order = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let inverse = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let order = SerializedOrder {
        pattern,
        codes,
        order,
        inverse,
    };
    order.validate().map_err(|e| Error::format(e.to_string()))?;
    Ok(OrderDump {
        order,
        bits,
        grid_size,
    })
}

// ---------------------------------------------------------------- tensors

/// One named tensor of a `PTW1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    fn from_matrix(name: String, m: &Matrix) -> Self {
        NamedTensor {
            name,
            dims: vec![m.rows() as u32, m.cols() as u32],
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
        }
    }

    fn from_vector(name: String, v: &[f64]) -> Self {
        NamedTensor {
            name,
            dims: vec![v.len() as u32],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    fn from_stack(name: String, ms: &[Matrix]) -> Self {
        let (r, c) = (ms[0].rows(), ms[0].cols());
        NamedTensor {
            name,
            dims: vec![ms.len() as u32, r as u32, c as u32],
            data: ms.iter().flat_map(|m| m.as_slice().iter().map(|&v| v as f32)).collect(),
        }
    }
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    for t in tensors {
        let numel: u64 = t.dims.iter().map(|&d| d as u64).product();
        if numel != t.data.len() as u64 || t.name.len() > u16::MAX as usize || t.dims.len() > u8::MAX as usize {
            return Err(Error::format(format!("tensor `{}` is malformed", t.name)));
        }
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader::new(bytes, "PTW1 weights");
    r.magic(WEIGHTS_MAGIC)?;
    let mut out = Vec::new();
    while !r.at_end() {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: u64 = dims.iter().map(|&d| d as u64).product();
        if numel.saturating_mul(4) > (bytes.len() - r.pos) as u64 {
            return Err(Error::format(format!("tensor `{name}` is truncated")));
        }
        let data = (0..numel).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        out.push(NamedTensor { name, dims, data });
    }
    Ok(out)
}

fn push_linear(out: &mut Vec<NamedTensor>, prefix: &str, l: &Linear) {
    out.push(NamedTensor::from_matrix(format!("{prefix}.weight"), &l.weight));
    out.push(NamedTensor::from_vector(format!("{prefix}.bias"), &l.bias));
}

fn push_block(out: &mut Vec<NamedTensor>, prefix: &str, b: &BlockParams) {
    for (name, m) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
        out.push(NamedTensor::from_matrix(format!("{prefix}.{name}"), m));
    }
    for (name, ln) in [("ln1", &b.ln1), ("ln2", &b.ln2)] {
        out.push(NamedTensor::from_vector(format!("{prefix}.{name}.scale"), &ln.scale));
        out.push(NamedTensor::from_vector(format!("{prefix}.{name}.bias"), &ln.bias));
    }
    out.push(NamedTensor::from_stack(format!("{prefix}.cpe"), &b.cpe));
    push_linear(out, &format!("{prefix}.mlp_in"), &b.mlp_in);
    push_linear(out, &format!("{prefix}.mlp_out"), &b.mlp_out);
}

/// Flattens network weights into named tensors, in a fixed order.
pub fn network_to_tensors(p: &NetworkParams) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    push_linear(&mut out, "embed", &p.embed);
    out.push(NamedTensor::from_stack("embed.cpe".into(), &p.embed_cpe));
    for (i, (pool, blocks)) in p.enc_pool.iter().zip(&p.enc_blocks).enumerate() {
        push_linear(&mut out, &format!("enc{i}.pool"), &pool.proj);
        out.push(NamedTensor::from_vector(format!("enc{i}.pool.bn.scale"), &pool.norm.scale));
        out.push(NamedTensor::from_vector(format!("enc{i}.pool.bn.bias"), &pool.norm.bias));
        for (j, b) in blocks.iter().enumerate() {
            push_block(&mut out, &format!("enc{i}.block{j}"), b);
        }
    }
    for (i, (unpool, blocks)) in p.dec_unpool.iter().zip(&p.dec_blocks).enumerate() {
        push_linear(&mut out, &format!("dec{i}.unpool"), unpool);
        for (j, b) in blocks.iter().enumerate() {
            push_block(&mut out, &format!("dec{i}.block{j}"), b);
        }
    }
    out
}

struct TensorLookup<'a>(HashMap<&'a str, &'a NamedTensor>);

impl<'a> TensorLookup<'a> {
    fn get(&self, name: &str, rank: usize) -> Result<&'a NamedTensor> {
        let t = self
            .0
            .get(name)
            .ok_or_else(|| Error::format(format!("missing tensor `{name}`")))?;
        if t.dims.len() != rank {
            return Err(Error::format(format!("tensor `{name}` has rank {}, expected {rank}", t.dims.len())));
        }
        Ok(t)
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name, 2)?;
        Matrix::from_vec(t.dims[0] as usize, t.dims[1] as usize, widen(&t.data))
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(widen(&self.get(name, 1)?.data))
    }

    fn stack(&self, name: &str) -> Result<Vec<Matrix>> {
        let t = self.get(name, 3)?;
        let (k, r, c) = (t.dims[0] as usize, t.dims[1] as usize, t.dims[2] as usize);
        if k != CPE_TAPS {
            return Err(Error::format(format!("tensor `{name}` must have {CPE_TAPS} slots")));
        }
        t.data
            .chunks(r * c)
            .map(|chunk| Matrix::from_vec(r, c, widen(chunk)))
            .collect()
    }

    fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.matrix(&format!("{prefix}.weight"))?,
            bias: self.vector(&format!("{prefix}.bias"))?,
        })
    }

    fn block(&self, prefix: &str, heads: usize) -> Result<BlockParams> {
        let wq = self.matrix(&format!("{prefix}.wq"))?;
        let c = wq.rows();
        let ln = |name: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                scale: self.vector(&format!("{prefix}.{name}.scale"))?,
                bias: self.vector(&format!("{prefix}.{name}.bias"))?,
            })
        };
        let b = BlockParams {
            heads,
            wk: self.matrix(&format!("{prefix}.wk"))?,
            wv: self.matrix(&format!("{prefix}.wv"))?,
            wo: self.matrix(&format!("{prefix}.wo"))?,
            wq,
            ln1: ln("ln1")?,
            ln2: ln("ln2")?,
            cpe: self.stack(&format!("{prefix}.cpe"))?,
            mlp_in: self.linear(&format!("{prefix}.mlp_in"))?,
            mlp_out: self.linear(&format!("{prefix}.mlp_out"))?,
            attn_scale: crate::attn::default_scale(c, heads),
        };
        b.validate().map_err(|e| Error::format(format!("{prefix}: {e}")))?;
        Ok(b)
    }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Rebuilds network weights for `cfg` from named tensors.
pub fn network_from_tensors(cfg: &NetworkConfig, tensors: &[NamedTensor]) -> Result<NetworkParams> {
    let lookup = TensorLookup(tensors.iter().map(|t| (t.name.as_str(), t)).collect());
    let mut enc_pool = Vec::new();
    let mut enc_blocks = Vec::new();
    for i in 0..cfg.stages() {
        enc_pool.push(PoolParams {
            proj: lookup.linear(&format!("enc{i}.pool"))?,
            norm: BatchNorm {
                scale: lookup.vector(&format!("enc{i}.pool.bn.scale"))?,
                bias: lookup.vector(&format!("enc{i}.pool.bn.bias"))?,
            },
        });
        enc_blocks.push(
            (0..cfg.enc_depths[i])
                .map(|j| lookup.block(&format!("enc{i}.block{j}"), cfg.enc_heads[i]))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let mut dec_unpool = Vec::new();
    let mut dec_blocks = Vec::new();
    for i in 0..cfg.stages() {
        dec_unpool.push(lookup.linear(&format!("dec{i}.unpool"))?);
        dec_blocks.push(
            (0..cfg.dec_depths[i])
                .map(|j| lookup.block(&format!("dec{i}.block{j}"), cfg.dec_heads[i]))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let params = NetworkParams {
        embed: lookup.linear("embed")?,
        embed_cpe: lookup.stack("embed.cpe")?,
        enc_pool,
        enc_blocks,
        dec_unpool,
        dec_blocks,
    };
    params.validate(cfg).map_err(|e| Error::format(e.to_string()))?;
    Ok(params)
}

// ---------------------------------------------------------------- features

pub fn encode_features(f: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + f.as_slice().len() * 4);
    out.extend_from_slice(FEATURES_MAGIC);
    out.extend_from_slice(&(f.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(f.cols() as u32).to_le_bytes());
    for v in f.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = Reader::new(bytes, "FTR1 features");
    r.magic(FEATURES_MAGIC)?;
    let n = r.count(0)?;
    let c = r.u32()? as usize;
    let total = n
        .checked_mul(c)
        .filter(|t| t.saturating_mul(4) == bytes.len() - r.pos)
        .ok_or_else(|| Error::format("FTR1 size does not match its header"))?;
    let data = (0..total).map(|_| r.f32().map(|v| v as f64)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    FeatureMatrix::from_vec(n, c, data)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(buf)
}
