//! Checkpoint files: a text header followed by named binary tensors.
//!
//! Layout:
//! - header: `TUNELAB-CKPT v1`, then `key = value` lines, then `END-HEADER\n`
//! - per tensor: u32 LE name length, name bytes, u32 LE rank, u32 LE dims,
//!   then the values as little-endian f32 in row-major order
//!
//! Tensors are stored in f32 regardless of the in-memory precision; round
//! trips of f32 data are bit-exact.

use crate::error::{Error, Result};
use crate::model::{LoraAdapter, LoraLayer, LoraMatrix, ModelConfig, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &str = "TUNELAB-CKPT v1";

pub type Meta = BTreeMap<String, String>;

fn write_header(w: &mut impl Write, kind: &str, meta: &Meta) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "kind = {kind}")?;
    for (k, v) in meta {
        writeln!(w, "{k} = {v}")?;
    }
    writeln!(w, "END-HEADER")?;
    Ok(())
}

fn read_line(r: &mut impl Read) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    String::from_utf8(line)
        .map_err(|e| Error::Checkpoint(format!("non-UTF8 header line: {e}")))
}

fn read_header(r: &mut impl Read) -> Result<(String, Meta)> {
    let magic = read_line(r)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut kind = String::new();
    let mut meta = Meta::new();
    loop {
        let line = read_line(r)?;
        if line == "END-HEADER" {
            break;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
        if k == "kind" {
            kind = v.to_string();
        } else {
            meta.insert(k.to_string(), v.to_string());
        }
    }
    if kind.is_empty() {
        return Err(Error::Checkpoint("missing kind".into()));
    }
    Ok((kind, meta))
}

fn write_tensor<E: Scalar>(w: &mut impl Write, name: &str, t: &Tensor<E>) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor<f32>)> {
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let name_len = u32::from_le_bytes(u32buf) as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|e| Error::Checkpoint(format!("non-UTF8 tensor name: {e}")))?;
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u32buf)?;
        data.push(f32::from_le_bytes(u32buf));
    }
    Ok((name, Tensor::new(shape, data)?))
}

fn config_meta(config: &ModelConfig, meta: &mut Meta) {
    meta.insert("vocab".into(), config.vocab.to_string());
    meta.insert("d_model".into(), config.d_model.to_string());
    meta.insert("layers".into(), config.layers.to_string());
    meta.insert("heads".into(), config.heads.to_string());
    meta.insert("d_ff".into(), config.d_ff.to_string());
    meta.insert("window".into(), config.window.to_string());
}

fn meta_usize(meta: &Meta, key: &str) -> Result<usize> {
    meta.get(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing header field {key}")))?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad header field {key}: {e}")))
}

fn meta_f64(meta: &Meta, key: &str) -> Result<f64> {
    meta.get(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing header field {key}")))?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad header field {key}: {e}")))
}

fn config_from_meta(meta: &Meta) -> Result<ModelConfig> {
    Ok(ModelConfig {
        vocab: meta_usize(meta, "vocab")?,
        d_model: meta_usize(meta, "d_model")?,
        layers: meta_usize(meta, "layers")?,
        heads: meta_usize(meta, "heads")?,
        d_ff: meta_usize(meta, "d_ff")?,
        window: meta_usize(meta, "window")?,
    })
}

/// Save base weights. `extra` carries run metadata (seed, holdout ppl, ...).
pub fn save_base<E: Scalar>(
    path: &Path,
    params: &Params<E>,
    seed: u64,
    extra: &Meta,
) -> Result<()> {
    let mut meta = extra.clone();
    config_meta(&params.config, &mut meta);
    meta.insert("seed".into(), seed.to_string());
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut w, "base", &meta)?;
    for (name, t) in params.named_tensors() {
        write_tensor(&mut w, &name, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_base(path: &Path) -> Result<(Params<f32>, Meta)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let (kind, meta) = read_header(&mut r)?;
    if kind != "base" {
        return Err(Error::Checkpoint(format!(
            "expected base checkpoint, got kind {kind}"
        )));
    }
    let config = config_from_meta(&meta)?;
    let mut tensors = BTreeMap::new();
    loop {
        match read_tensor(&mut r) {
            Ok((name, t)) => {
                tensors.insert(name, t);
            }
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        }
    }
    let mut take = |name: String| -> Result<Tensor<f32>> {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let mut layers = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        layers.push(crate::model::LayerParams {
            wq: take(format!("layer.{i}.wq"))?,
            wk: take(format!("layer.{i}.wk"))?,
            wv: take(format!("layer.{i}.wv"))?,
            wo: take(format!("layer.{i}.wo"))?,
            w_up: take(format!("layer.{i}.w_up"))?,
            w_down: take(format!("layer.{i}.w_down"))?,
            g_attn: take(format!("layer.{i}.g_attn"))?,
            g_mlp: take(format!("layer.{i}.g_mlp"))?,
        });
    }
    let params = Params {
        tok_embed: take("tok_embed".into())?,
        pos_embed: take("pos_embed".into())?,
        layers,
        g_final: take("g_final".into())?,
        w_out: take("w_out".into())?,
        config,
    };
    if !tensors.is_empty() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensors in checkpoint: {:?}",
            tensors.keys().collect::<Vec<_>>()
        )));
    }
    Ok((params, meta))
}

/// Save adapter weights, bound to a base checkpoint by its content hash.
pub fn save_adapter<E: Scalar>(
    path: &Path,
    adapter: &LoraAdapter<E>,
    config: &ModelConfig,
    seed: u64,
    base_hash: u64,
    extra: &Meta,
) -> Result<()> {
    let mut meta = extra.clone();
    config_meta(config, &mut meta);
    meta.insert("seed".into(), seed.to_string());
    meta.insert("rank".into(), adapter.rank.to_string());
    meta.insert("alpha".into(), adapter.alpha.to_string());
    meta.insert("lora_dropout".into(), adapter.dropout.to_string());
    meta.insert("base_hash".into(), format!("{base_hash:016x}"));
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut w, "adapter", &meta)?;
    for (name, t) in adapter.named_tensors() {
        write_tensor(&mut w, &name, t)?;
    }
    w.flush()?;
    Ok(())
}

pub struct AdapterCheckpoint {
    pub adapter: LoraAdapter<f32>,
    pub config: ModelConfig,
    pub base_hash: u64,
    pub meta: Meta,
}

pub fn load_adapter(path: &Path) -> Result<AdapterCheckpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let (kind, meta) = read_header(&mut r)?;
    if kind != "adapter" {
        return Err(Error::Checkpoint(format!(
            "expected adapter checkpoint, got kind {kind}"
        )));
    }
    let config = config_from_meta(&meta)?;
    let rank = meta_usize(&meta, "rank")?;
    let alpha = meta_f64(&meta, "alpha")?;
    let dropout = meta_f64(&meta, "lora_dropout")?;
    let base_hash = u64::from_str_radix(
        meta.get("base_hash")
            .ok_or_else(|| Error::Checkpoint("missing base_hash".into()))?,
        16,
    )
    .map_err(|e| Error::Checkpoint(format!("bad base_hash: {e}")))?;
    let mut tensors = BTreeMap::new();
    loop {
        match read_tensor(&mut r) {
            Ok((name, t)) => {
                tensors.insert(name, t);
            }
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        }
    }
    let mut take = |name: String| -> Result<Tensor<f32>> {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let mut layers = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let mut mk = |tag: &str| -> Result<LoraMatrix<f32>> {
            Ok(LoraMatrix {
                a: take(format!("lora.{i}.{tag}.a"))?,
                b: take(format!("lora.{i}.{tag}.b"))?,
            })
        };
        layers.push(LoraLayer {
            key: mk("key")?,
            value: mk("value")?,
            output: mk("output")?,
        });
    }
    let adapter = LoraAdapter {
        rank,
        alpha,
        dropout,
        layers,
    };
    adapter.check_shapes(&config)?;
    Ok(AdapterCheckpoint {
        adapter,
        config,
        base_hash,
        meta,
    })
}

/// FNV-1a over the file contents; guards adapter/base pairings.
pub fn file_hash(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(h)
}
