//! On-disk formats: KVCF compressed caches, KVCT named-tensor bundles and
//! JSON/CSV evaluation reports. All binary data is little-endian and ends
//! with a CRC-32 of every preceding byte.
//!
//! KVCF layout:
//!
//! ```text
//! "KVCF" | version u16 | L u32 | H_kv u32 | d_h u32 | context_len u32 | N_ℓ u32 × L
//! per layer: K f32 [H_kv × N_ℓ × d_h], then V f32 [H_kv × N_ℓ × d_h]
//! per layer, head, slot: original token index u32
//! CRC-32 u32
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::composer::CompressedCache;
use crate::error::{Error, Result};
use crate::evaluator::EvalReport;
use crate::model::{KVCache, LayerCache, LayerWeights, Model, ModelConfig};
use crate::numerics::Matrix;

pub const KVCF_MAGIC: [u8; 4] = *b"KVCF";
pub const KVCF_VERSION: u16 = 1;
pub const KVCT_MAGIC: [u8; 4] = *b"KVCT";
pub const KVCT_VERSION: u16 = 1;
pub const CSV_HEADER: &str = "r_target,r_achieved,reward_mean,reward_std,epsilon,kl_mean";

/// Parse failures; every variant names the byte offset where reading failed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic at offset 0: found {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { version: u16, offset: usize },
    #[error("truncated at offset {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("checksum mismatch at offset {offset}: stored {stored:08x}, computed {computed:08x}")]
    Checksum {
        offset: usize,
        stored: u32,
        computed: u32,
    },
    #[error("invalid header at offset {offset}: {reason}")]
    InvalidHeader { offset: usize, reason: String },
    #[error("{extra} trailing bytes after offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Bytes available before the checksum trailer.
    end: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.end - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                expected: self.pos.saturating_add(n).saturating_add(4),
                actual: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(checked_bytes(n, 4, self.pos)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, FormatError> {
        let bytes = self.take(checked_bytes(n, 4, self.pos)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(checked_bytes(n, 8, self.pos)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn checked_bytes(n: usize, width: usize, offset: usize) -> Result<usize, FormatError> {
    n.checked_mul(width).ok_or_else(|| FormatError::InvalidHeader {
        offset,
        reason: "section size overflows".into(),
    })
}

/// Checks magic, minimum length and the CRC trailer; returns a reader over
/// the body positioned after the magic.
fn open<'a>(buf: &'a [u8], magic: &[u8; 4]) -> Result<Reader<'a>, FormatError> {
    if buf.len() < 4 || &buf[..4] != magic {
        return Err(FormatError::BadMagic {
            found: buf[..buf.len().min(4)].to_vec(),
        });
    }
    if buf.len() < 10 {
        return Err(FormatError::Truncated {
            offset: buf.len(),
            expected: 10,
            actual: buf.len(),
        });
    }
    Ok(Reader {
        buf,
        pos: 4,
        end: buf.len() - 4,
    })
}

fn verify_crc(buf: &[u8]) -> Result<(), FormatError> {
    let offset = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[offset..].try_into().unwrap());
    let computed = crc32fast::hash(&buf[..offset]);
    if stored != computed {
        return Err(FormatError::Checksum {
            offset,
            stored,
            computed,
        });
    }
    Ok(())
}

fn finish(r: &Reader<'_>) -> Result<(), FormatError> {
    if r.pos != r.end {
        return Err(FormatError::TrailingBytes {
            offset: r.pos,
            extra: r.end - r.pos,
        });
    }
    Ok(())
}

fn seal(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::shape(format!("{what} = {x} does not fit in u32")))
}

fn header_field(x: u32, offset: usize, what: &str) -> Result<usize, FormatError> {
    if x == 0 {
        return Err(FormatError::InvalidHeader {
            offset,
            reason: format!("{what} must be positive"),
        });
    }
    Ok(x as usize)
}

/// Serializes a compressed cache to KVCF bytes.
pub fn encode_cache(c: &CompressedCache) -> Result<Vec<u8>> {
    let cache = &c.cache;
    let layers = cache.num_layers();
    if layers == 0 {
        return Err(Error::shape("cache has no layers"));
    }
    let kv_heads = cache.layer(0).kv_heads();
    let head_dim = cache.layer(0).head_dim();
    if cache
        .layers()
        .iter()
        .any(|l| l.kv_heads() != kv_heads || l.head_dim() != head_dim)
    {
        return Err(Error::shape("layers disagree on kv-head count or head width"));
    }
    if c.provenance.len() != layers {
        return Err(Error::shape("provenance must cover every layer"));
    }
    for (layer, prov) in cache.layers().iter().zip(&c.provenance) {
        if prov.len() != kv_heads || prov.iter().any(|p| p.len() != layer.len()) {
            return Err(Error::shape("provenance must name one index per cached row"));
        }
        if prov.iter().flatten().any(|&i| i >= c.context_len) {
            return Err(Error::invariant("provenance index beyond the context"));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(&KVCF_MAGIC);
    out.extend_from_slice(&KVCF_VERSION.to_le_bytes());
    for x in [layers, kv_heads, head_dim, c.context_len] {
        out.extend_from_slice(&to_u32(x, "header field")?.to_le_bytes());
    }
    for layer in cache.layers() {
        out.extend_from_slice(&to_u32(layer.len(), "N_l")?.to_le_bytes());
    }
    for layer in cache.layers() {
        for h in 0..kv_heads {
            for &x in layer.head_keys(h) {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        for h in 0..kv_heads {
            for &x in layer.head_values(h) {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    for &i in c.provenance.iter().flatten().flatten() {
        out.extend_from_slice(&to_u32(i, "provenance index")?.to_le_bytes());
    }
    Ok(seal(out))
}

/// Parses KVCF bytes. Structure is checked before the checksum so that
/// truncation and header damage are reported as such.
pub fn decode_cache(buf: &[u8]) -> Result<CompressedCache, FormatError> {
    let mut r = open(buf, &KVCF_MAGIC)?;
    let version = r.u16()?;
    if version != KVCF_VERSION {
        return Err(FormatError::UnsupportedVersion { version, offset: 4 });
    }
    let layers = header_field(r.u32()?, 6, "L")?;
    let kv_heads = header_field(r.u32()?, 10, "H_kv")?;
    let head_dim = header_field(r.u32()?, 14, "d_h")?;
    let context_len = r.u32()? as usize;
    let lens_offset = r.pos;
    let lens = r.u32s(layers)?;
    let mut payload = 0usize;
    for (l, &n) in lens.iter().enumerate() {
        let n = n as usize;
        if n > context_len {
            return Err(FormatError::InvalidHeader {
                offset: lens_offset + 4 * l,
                reason: format!("layer {l} holds {n} rows from a context of {context_len}"),
            });
        }
        // K, V floats plus provenance indices.
        let entries = kv_heads
            .checked_mul(n)
            .and_then(|x| x.checked_mul(2 * head_dim + 1))
            .and_then(|x| x.checked_mul(4));
        payload = entries
            .and_then(|x| payload.checked_add(x))
            .ok_or_else(|| FormatError::InvalidHeader {
                offset: lens_offset + 4 * l,
                reason: "payload size overflows".into(),
            })?;
    }
    let expected = r.pos + payload + 4;
    if buf.len() < expected {
        return Err(FormatError::Truncated {
            offset: buf.len(),
            expected,
            actual: buf.len(),
        });
    }
    if buf.len() > expected {
        return Err(FormatError::TrailingBytes {
            offset: expected,
            extra: buf.len() - expected,
        });
    }
    verify_crc(buf)?;

    let mut layer_caches = Vec::with_capacity(layers);
    for &n in &lens {
        let per_head = n as usize * head_dim;
        let widen = |v: Vec<f32>| -> Vec<Vec<f64>> {
            v.chunks(per_head.max(1))
                .map(|c| c.iter().map(|&x| x as f64).collect())
                .collect()
        };
        let mut keys = widen(r.f32s(kv_heads * per_head)?);
        let mut values = widen(r.f32s(kv_heads * per_head)?);
        if per_head == 0 {
            keys = vec![Vec::new(); kv_heads];
            values = vec![Vec::new(); kv_heads];
        }
        let layer = LayerCache::from_heads(head_dim, keys, values, context_len).map_err(|e| {
            FormatError::InvalidHeader {
                offset: r.pos,
                reason: e.to_string(),
            }
        })?;
        layer_caches.push(layer);
    }
    let mut provenance = Vec::with_capacity(layers);
    for &n in &lens {
        let mut heads = Vec::with_capacity(kv_heads);
        for _ in 0..kv_heads {
            let offset = r.pos;
            let idx: Vec<usize> = r.u32s(n as usize)?.into_iter().map(|x| x as usize).collect();
            if idx.iter().any(|&i| i >= context_len) {
                return Err(FormatError::InvalidHeader {
                    offset,
                    reason: "provenance index beyond the context".into(),
                });
            }
            heads.push(idx);
        }
        provenance.push(heads);
    }
    finish(&r)?;
    Ok(CompressedCache {
        cache: KVCache::from_layers(layer_caches),
        provenance,
        context_len,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<u64> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes a KVCF file and returns its size in bytes.
pub fn write_cache(cache: &CompressedCache, path: impl AsRef<Path>) -> Result<u64> {
    write_bytes(path.as_ref(), &encode_cache(cache)?)
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<CompressedCache> {
    let path = path.as_ref();
    decode_cache(&read_bytes(path)?).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Closed-form KVCF size for the given shape.
pub fn kvcf_size(kv_heads: usize, head_dim: usize, lens: &[usize]) -> usize {
    let header = 4 + 2 + 4 * 4 + 4 * lens.len();
    let rows: usize = lens.iter().sum();
    header + rows * kv_heads * (2 * head_dim * 4 + 4) + 4
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U32(Vec<u32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::U32(_) => 1,
            TensorData::F64(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let name = name.into();
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "tensor {name}: dims {dims:?} do not match {} elements",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }
}

/// A set of named tensors plus free-form metadata text.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    pub meta: String,
    pub tensors: Vec<NamedTensor>,
}

impl TensorBundle {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// KVCT layout: magic, version u16, meta (u32 length + UTF-8), tensor
/// count u32, then per tensor: name (u16 length + UTF-8), dtype u8
/// (0 = f32, 1 = u32, 2 = f64), rank u8, dims u32 × rank, data; CRC-32.
pub fn encode_tensors(bundle: &TensorBundle) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&KVCT_MAGIC);
    out.extend_from_slice(&KVCT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(bundle.meta.len(), "meta length")?.to_le_bytes());
    out.extend_from_slice(bundle.meta.as_bytes());
    out.extend_from_slice(&to_u32(bundle.tensors.len(), "tensor count")?.to_le_bytes());
    for t in &bundle.tensors {
        let name_len = u16::try_from(t.name.len()).map_err(|_| Error::shape("tensor name too long"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.data.tag());
        out.push(u8::try_from(t.dims.len()).map_err(|_| Error::shape("tensor rank too large"))?);
        for &d in &t.dims {
            out.extend_from_slice(&to_u32(d, "tensor dim")?.to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(seal(out))
}

pub fn decode_tensors(buf: &[u8]) -> Result<TensorBundle, FormatError> {
    let mut r = open(buf, &KVCT_MAGIC)?;
    let version = r.u16()?;
    if version != KVCT_VERSION {
        return Err(FormatError::UnsupportedVersion { version, offset: 4 });
    }
    let bad_utf8 = |offset| FormatError::InvalidHeader {
        offset,
        reason: "text is not UTF-8".into(),
    };
    let meta_len = r.u32()? as usize;
    let offset = r.pos;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| bad_utf8(offset))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let offset = r.pos;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| bad_utf8(offset))?;
        let tag_offset = r.pos;
        let tag = r.u8()?;
        let rank = r.u8()? as usize;
        let dims: Vec<usize> = r.u32s(rank)?.into_iter().map(|d| d as usize).collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::InvalidHeader {
                offset: tag_offset,
                reason: "tensor size overflows".into(),
            })?;
        let data = match tag {
            0 => TensorData::F32(r.f32s(n)?),
            1 => TensorData::U32(r.u32s(n)?),
            2 => TensorData::F64(r.f64s(n)?),
            other => {
                return Err(FormatError::InvalidHeader {
                    offset: tag_offset,
                    reason: format!("unknown dtype {other}"),
                })
            }
        };
        tensors.push(NamedTensor { name, dims, data });
    }
    finish(&r)?;
    verify_crc(buf)?;
    Ok(TensorBundle { meta, tensors })
}

pub fn write_tensors(bundle: &TensorBundle, path: impl AsRef<Path>) -> Result<u64> {
    write_bytes(path.as_ref(), &encode_tensors(bundle)?)
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<TensorBundle> {
    let path = path.as_ref();
    decode_tensors(&read_bytes(path)?).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

fn matrix_tensor(name: String, m: &Matrix) -> NamedTensor {
    NamedTensor {
        name,
        dims: vec![m.rows(), m.cols()],
        data: TensorData::F64(m.data().to_vec()),
    }
}

/// Model weights at full precision with the config as JSON metadata.
pub fn model_bundle(model: &Model) -> Result<TensorBundle> {
    let meta = serde_json::to_string(model.config()).map_err(|e| Error::config(e.to_string()))?;
    let mut tensors = vec![matrix_tensor("embed".into(), model.embedding())];
    for (l, w) in model.layer_weights().iter().enumerate() {
        for (tag, m) in [("wq", &w.wq), ("wk", &w.wk), ("wv", &w.wv), ("wo", &w.wo)] {
            tensors.push(matrix_tensor(format!("layer{l}.{tag}"), m));
        }
    }
    tensors.push(matrix_tensor("unembed".into(), model.unembedding()));
    Ok(TensorBundle { meta, tensors })
}

pub fn model_from_bundle(bundle: &TensorBundle) -> Result<Model> {
    let config: ModelConfig =
        serde_json::from_str(&bundle.meta).map_err(|e| Error::config(format!("model metadata: {e}")))?;
    let matrix = |name: &str| -> Result<Matrix> {
        let t = bundle
            .get(name)
            .ok_or_else(|| Error::shape(format!("missing tensor {name}")))?;
        match (&t.data, t.dims.as_slice()) {
            (TensorData::F64(v), &[r, c]) => Matrix::from_vec(r, c, v.clone()),
            _ => Err(Error::shape(format!("tensor {name} must be a 2-d f64 matrix"))),
        }
    };
    let layers = (0..config.layers)
        .map(|l| {
            Ok(LayerWeights {
                wq: matrix(&format!("layer{l}.wq"))?,
                wk: matrix(&format!("layer{l}.wk"))?,
                wv: matrix(&format!("layer{l}.wv"))?,
                wo: matrix(&format!("layer{l}.wo"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Model::from_weights(config, matrix("embed")?, layers, matrix("unembed")?)
}

/// Shortest round-trip decimal; non-finite values spelled as in JSON-less CSV.
fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else {
        format!("{x}")
    }
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in &report.grid {
        let cells = [p.r_target, p.r_achieved, p.reward_mean, p.reward_std, p.epsilon, p.kl_mean];
        let line: Vec<String> = cells.iter().map(|&x| fmt_float(x)).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn report_json(report: &EvalReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::invariant(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Writes `report.json` and `curve.csv` into `dir` (created if missing).
pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<[PathBuf; 2]> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    let csv = dir.join("curve.csv");
    write_bytes(&json, report_json(report)?.as_bytes())?;
    write_bytes(&csv, report_csv(report).as_bytes())?;
    Ok([json, csv])
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::uncompressed;
    use crate::evaluator::CurvePoint;
    use crate::model::ModelConfig;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn random_cache(rng: &mut SeededRng) -> CompressedCache {
        let layers = 1 + rng.below(4);
        let heads = 1 + rng.below(3);
        let dh = 1 + rng.below(6);
        let context = 1 + rng.below(12);
        let mut prov = Vec::new();
        let layer_caches = (0..layers)
            .map(|_| {
                let n = rng.below(context + 1);
                let rows: Vec<Vec<usize>> = (0..heads).map(|_| {
                    let mut s = rng.sample_distinct(context, n);
                    s.sort_unstable();
                    s
                }).collect();
                prov.push(rows);
                let buf = |rng: &mut SeededRng| -> Vec<Vec<f64>> {
                    (0..heads).map(|_| (0..n * dh).map(|_| rng.normal()).collect()).collect()
                };
                let k = buf(rng);
                let v = buf(rng);
                LayerCache::from_heads(dh, k, v, context).unwrap()
            })
            .collect();
        CompressedCache {
            cache: KVCache::from_layers(layer_caches),
            provenance: prov,
            context_len: context,
        }
    }

    fn rounded(c: &CompressedCache) -> CompressedCache {
        let layers = c
            .cache
            .layers()
            .iter()
            .map(|l| {
                let r = |h: &[f64]| h.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
                LayerCache::from_heads(
                    l.head_dim(),
                    (0..l.kv_heads()).map(|h| r(l.head_keys(h))).collect(),
                    (0..l.kv_heads()).map(|h| r(l.head_values(h))).collect(),
                    l.next_position(),
                )
                .unwrap()
            })
            .collect();
        CompressedCache {
            cache: KVCache::from_layers(layers),
            ..c.clone()
        }
    }

    #[test]
    fn payload_size_example() {
        let layer = LayerCache::from_heads(4, vec![vec![0.5; 8]], vec![vec![1.5; 8]], 2).unwrap();
        let c = CompressedCache {
            cache: KVCache::from_layers(vec![layer]),
            provenance: vec![vec![vec![0, 1]]],
            context_len: 2,
        };
        let bytes = encode_cache(&c).unwrap();
        let header = 4 + 2 + 16 + 4;
        let payload = 2 * (2 * 4) * 4;
        assert_eq!(payload, 64);
        assert_eq!(bytes.len(), header + payload + 2 * 4 + 4);
        assert_eq!(bytes.len(), kvcf_size(1, 4, &[2]));
    }

    #[test]
    fn empty_layer_is_header_only() {
        let full = LayerCache::from_heads(2, vec![vec![1.0, 2.0]], vec![vec![3.0, 4.0]], 3).unwrap();
        let c = CompressedCache {
            cache: KVCache::from_layers(vec![LayerCache::from_heads(2, vec![vec![]], vec![vec![]], 3).unwrap(), full]),
            provenance: vec![vec![vec![]], vec![vec![2]]],
            context_len: 3,
        };
        let bytes = encode_cache(&c).unwrap();
        assert_eq!(bytes.len(), kvcf_size(1, 2, &[0, 1]));
        assert_eq!(decode_cache(&bytes).unwrap(), c);
    }

    #[test]
    fn round_trip_and_determinism() {
        let mut rng = SeededRng::new(77);
        for _ in 0..50 {
            let c = random_cache(&mut rng);
            let a = encode_cache(&c).unwrap();
            assert_eq!(a, encode_cache(&c).unwrap());
            assert_eq!(a.len(), kvcf_size(c.cache.layer(0).kv_heads(), c.cache.layer(0).head_dim(), &c.cache.lens()));
            let back = decode_cache(&a).unwrap();
            assert_eq!(back, rounded(&c));
            assert_eq!(encode_cache(&back).unwrap(), a);
        }
    }

    fn fixed_cache() -> CompressedCache {
        let layer = |n: usize| {
            let buf = |off: f64| vec![(0..n * 3).map(|i| off + i as f64).collect::<Vec<f64>>(); 2];
            LayerCache::from_heads(3, buf(0.5), buf(-0.25), 6).unwrap()
        };
        CompressedCache {
            cache: KVCache::from_layers(vec![layer(4), layer(2)]),
            provenance: vec![vec![vec![0, 2, 3, 5]; 2], vec![vec![1, 4]; 2]],
            context_len: 6,
        }
    }

    #[test]
    fn golden_values() {
        let bytes = encode_cache(&fixed_cache()).unwrap();
        assert_eq!(&bytes[..6], b"KVCF\x01\x00");
        assert_eq!(&bytes[6..30], &[2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 6, 0, 0, 0, 4, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[30..34], &0.5f32.to_le_bytes());
        let back = decode_cache(&bytes).unwrap();
        assert_eq!(back, fixed_cache());
        assert_eq!(back.cache.layer(1).value_row(1, 1), &[2.75, 3.75, 4.75]);
    }

    #[test]
    fn typed_errors() {
        let bytes = encode_cache(&fixed_cache()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cache(&bad), Err(FormatError::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_cache(&bad), Err(FormatError::UnsupportedVersion { version: 9, .. })));

        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0xff;
        assert!(matches!(decode_cache(&bad), Err(FormatError::Checksum { .. })));

        let cut = &bytes[..bytes.len() - 9];
        match decode_cache(cut) {
            Err(FormatError::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, cut.len());
            }
            other => panic!("expected truncation, got {other:?}"),
        }

        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_cache(&long), Err(FormatError::TrailingBytes { .. })));
        assert!(decode_cache(&[]).is_err());
    }

    #[test]
    fn every_header_byte_flip_is_rejected() {
        let mut rng = SeededRng::new(5);
        let c = random_cache(&mut rng);
        let bytes = encode_cache(&c).unwrap();
        let header = 22 + 4 * c.cache.num_layers();
        for i in 0..header {
            for flip in [0x01u8, 0x80, 0xff] {
                let mut bad = bytes.clone();
                bad[i] ^= flip;
                assert!(decode_cache(&bad).is_err(), "byte {i} flip {flip:#x}");
            }
        }
    }

    #[test]
    fn tensor_bundle_round_trip() {
        let b = TensorBundle {
            meta: "{\"a\":1}".into(),
            tensors: vec![
                NamedTensor::new("s", vec![2, 3], TensorData::F32(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap(),
                NamedTensor::new("idx", vec![3], TensorData::U32(vec![2, 0, 1])).unwrap(),
                NamedTensor::new("w", vec![1, 1], TensorData::F64(vec![0.1])).unwrap(),
            ],
        };
        let bytes = encode_tensors(&b).unwrap();
        assert_eq!(decode_tensors(&bytes).unwrap(), b);
        let mut bad = bytes.clone();
        bad[12] ^= 1;
        assert!(decode_tensors(&bad).is_err());
        assert!(NamedTensor::new("x", vec![2], TensorData::U32(vec![1])).is_err());
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = Model::init(ModelConfig::new(2, 4, 2, 8, 16, 9)).unwrap();
        let b = model_bundle(&m).unwrap();
        let back = model_from_bundle(&decode_tensors(&encode_tensors(&b).unwrap()).unwrap()).unwrap();
        let tokens = [1, 5, 9, 2];
        assert_eq!(m.prefill(&tokens).unwrap().logits, back.prefill(&tokens).unwrap().logits);
    }

    fn sample_report(points: usize) -> EvalReport {
        EvalReport {
            policy: "kvcompose".into(),
            aggregation: "Agg(max,avg,avg), mean=on, norm=none".into(),
            grid: (0..points)
                .map(|i| CurvePoint {
                    r_target: i as f64 * 0.1,
                    r_achieved: i as f64 * 0.1 + 1e-3,
                    reward_mean: 1.0 / (i + 3) as f64,
                    reward_std: 0.0,
                    epsilon: 0.1 * i as f64,
                    kl_mean: 2.0f64.sqrt(),
                })
                .collect(),
            auc: None,
            max_ratio: Vec::new(),
            seeds: vec![0, 1],
            tasks_per_seed: 4,
            config: serde_json::json!({"b": 1, "a": [1.5]}),
        }
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report(1);
        let [json, csv] = write_report(&r, dir.path()).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(read_report(&json).unwrap(), r);

        let r9 = sample_report(9);
        let [j1, c1] = write_report(&r9, dir.path().join("a")).unwrap();
        let [j2, c2] = write_report(&r9, dir.path().join("b")).unwrap();
        assert_eq!(fs::read(&j1).unwrap(), fs::read(&j2).unwrap());
        assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
        assert_eq!(read_report(&j1).unwrap(), r9);
    }

    #[test]
    fn csv_floats_round_trip() {
        let r = sample_report(5);
        let csv = report_csv(&r);
        for (line, p) in csv.lines().skip(1).zip(&r.grid) {
            let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cells, vec![p.r_target, p.r_achieved, p.reward_mean, p.reward_std, p.epsilon, p.kl_mean]);
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_cache("/nonexistent/cache.kvcf").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn uncompressed_cache_writes() {
        let m = Model::init(ModelConfig::new(2, 2, 1, 4, 8, 0)).unwrap();
        let full = m.prefill(&[1, 2, 3]).unwrap().cache;
        let c = uncompressed(full);
        let back = decode_cache(&encode_cache(&c).unwrap()).unwrap();
        assert_eq!(back.provenance, c.provenance);
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode_cache(&bytes);
            let _ = decode_tensors(&bytes);
        }

        #[test]
        fn kvcf_magic_prefix_never_panics(tail in proptest::collection::vec(any::<u8>(), 0..120)) {
            let mut bytes = KVCF_MAGIC.to_vec();
            bytes.extend(tail);
            let _ = decode_cache(&bytes);
        }
    }
}
