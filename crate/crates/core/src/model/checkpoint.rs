//! `GRN1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GRN1"
//! u32 header entries, each: u32 key len, key, u32 value len, value (UTF-8)
//! u32 tensor count, each:   u32 name len, name, u8 dtype, u32 rank,
//!                           u64 dims[rank], row-major data
//! ```
//!
//! dtype 1 is f32, 2 is f64, 3 is a 0/1 byte vector (unit masks, stored
//! under the reserved `mask.` prefix).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{GrainError, Result};
use crate::model::{AttentionHead, Embedding, EncoderBlock, EncoderModel, ModelConfig};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"GRN1";
const DTYPE_MASK: u8 = 3;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn header<S: Scalar>(model: &EncoderModel<S>) -> Vec<(String, String)> {
    let c = &model.config;
    let embedding = match &model.embedding {
        Embedding::Full { .. } => "full".to_string(),
        Embedding::Factorized { rank, .. } => format!("factorized:{rank}"),
    };
    let heads: Vec<String> = model
        .blocks
        .iter()
        .map(|b| b.heads.len().to_string())
        .collect();
    [
        ("hidden", c.hidden.to_string()),
        ("head_size", c.head_size.to_string()),
        ("heads", c.heads.to_string()),
        ("ffn_size", c.ffn_size.to_string()),
        ("layers", c.layers.to_string()),
        ("vocab", c.vocab.to_string()),
        ("max_len", c.max_len.to_string()),
        ("classes", c.classes.to_string()),
        ("embedding", embedding),
        ("heads_per_layer", heads.join(",")),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn mask_entries<S: Scalar>(model: &EncoderModel<S>) -> Vec<(String, &[bool])> {
    let mut out = Vec::new();
    for (l, b) in model.blocks.iter().enumerate() {
        for (h, head) in b.heads.iter().enumerate() {
            out.push((
                format!("mask.layer.{l}.head.{h}.query"),
                head.query_mask.as_slice(),
            ));
            out.push((
                format!("mask.layer.{l}.head.{h}.value"),
                head.value_mask.as_slice(),
            ));
        }
        out.push((format!("mask.layer.{l}.ffn"), b.ffn_mask.as_slice()));
    }
    out
}

/// Serialises a model, masks included.
pub fn write_checkpoint<S: Scalar>(model: &EncoderModel<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let hdr = header(model);
    put_u32(&mut out, hdr.len());
    for (k, v) in &hdr {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    let masks = mask_entries(model);
    put_u32(&mut out, model.params.len() + masks.len());
    for (_, p) in model.params.iter() {
        put_str(&mut out, &p.name);
        out.push(S::DTYPE);
        put_u32(&mut out, p.value.shape().len());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            match S::DTYPE {
                1 => out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
                _ => out.extend_from_slice(&x.as_f64().to_le_bytes()),
            }
        }
    }
    for (name, mask) in masks {
        put_str(&mut out, &name);
        out.push(DTYPE_MASK);
        put_u32(&mut out, 1);
        out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
        out.extend(mask.iter().map(|&m| m as u8));
    }
    out
}

/// Writes via a temporary sibling file and a rename.
pub fn save_checkpoint<S: Scalar>(path: &Path, model: &EncoderModel<S>) -> Result<()> {
    write_atomic(path, &write_checkpoint(model))
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| GrainError::Input(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(GrainError::Format {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.err(format!("unexpected end of data, wanted {n} bytes"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let at = self.pos;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| GrainError::Format {
            offset: at,
            msg: "invalid UTF-8".into(),
        })
    }
}

enum Stored {
    Real(Vec<usize>, Vec<f64>),
    Mask(Vec<bool>),
}

/// Parses a checkpoint into a model with element type `S`.
pub fn read_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<EncoderModel<S>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(GrainError::Format {
            offset: 0,
            msg: "bad magic, expected GRN1".into(),
        });
    }
    let mut hdr = HashMap::new();
    for _ in 0..r.u32()? {
        let k = r.string()?;
        let v = r.string()?;
        hdr.insert(k, v);
    }
    let header_end = r.pos;
    let field = |k: &str| -> Result<String> {
        hdr.get(k).cloned().ok_or_else(|| GrainError::Format {
            offset: header_end,
            msg: format!("missing header key {k}"),
        })
    };
    let num = |k: &str| -> Result<usize> {
        field(k)?.parse().map_err(|_| GrainError::Format {
            offset: header_end,
            msg: format!("header key {k} is not an integer"),
        })
    };
    let config = ModelConfig {
        hidden: num("hidden")?,
        head_size: num("head_size")?,
        heads: num("heads")?,
        ffn_size: num("ffn_size")?,
        layers: num("layers")?,
        vocab: num("vocab")?,
        max_len: num("max_len")?,
        classes: num("classes")?,
    };
    config.validate().map_err(|e| GrainError::Format {
        offset: header_end,
        msg: e.to_string(),
    })?;
    let heads_per_layer: Vec<usize> = field("heads_per_layer")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| GrainError::Format {
            offset: header_end,
            msg: "bad heads_per_layer".into(),
        })?;
    if heads_per_layer.len() != config.layers {
        return r.err("heads_per_layer does not match layer count");
    }

    let mut names = Vec::new();
    let mut stored = HashMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let dtype = r.take(1)?[0];
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let entry = match dtype {
            1 => {
                let raw = r.take(len * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                Stored::Real(dims, data)
            }
            2 => {
                let raw = r.take(len * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Stored::Real(dims, data)
            }
            DTYPE_MASK => Stored::Mask(r.take(len)?.iter().map(|&b| b != 0).collect()),
            other => return r.err(format!("unknown dtype code {other} for {name}")),
        };
        if stored.insert(name.clone(), entry).is_some() {
            return r.err(format!("duplicate tensor {name}"));
        }
        names.push(name);
    }
    if r.pos != bytes.len() {
        return r.err("trailing bytes after last tensor");
    }

    let end = r.pos;
    let missing = |name: &str| GrainError::Format {
        offset: end,
        msg: format!("missing tensor {name}"),
    };
    let mut params = ParamStore::new();
    let mut ids = HashMap::new();
    for name in &names {
        if let Some(Stored::Real(dims, data)) = stored.get(name) {
            let t = Tensor::new(dims.clone(), data.iter().map(|&x| S::of(x)).collect())?;
            ids.insert(name.clone(), params.add(name.clone(), t));
        }
    }
    let id =
        |name: &str| -> Result<ParamId> { ids.get(name).copied().ok_or_else(|| missing(name)) };
    let mask = |name: &str, len: usize| -> Result<Vec<bool>> {
        match stored.get(name) {
            Some(Stored::Mask(m)) if m.len() == len => Ok(m.clone()),
            Some(Stored::Mask(_)) => Err(GrainError::Format {
                offset: end,
                msg: format!("mask {name} has the wrong length"),
            }),
            _ => Err(missing(name)),
        }
    };

    let embedding_kind = field("embedding")?;
    let embedding = if embedding_kind == "full" {
        Embedding::Full {
            table: id("embedding.table")?,
        }
    } else if let Some(rank) = embedding_kind.strip_prefix("factorized:") {
        Embedding::Factorized {
            w: id("embedding.w")?,
            v: id("embedding.v")?,
            rank: rank.parse().map_err(|_| missing("embedding rank"))?,
        }
    } else {
        return Err(GrainError::Format {
            offset: header_end,
            msg: format!("unknown embedding kind {embedding_kind}"),
        });
    };

    let mut blocks = Vec::with_capacity(config.layers);
    for (l, &n_heads) in heads_per_layer.iter().enumerate() {
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let p = |n: &str| id(&format!("layer.{l}.head.{h}.{n}"));
            let (wq, wk, wv, wo) = (p("wq")?, p("wk")?, p("wv")?, p("wo")?);
            heads.push(AttentionHead {
                wq,
                wk,
                wv,
                wo,
                query_mask: mask(
                    &format!("mask.layer.{l}.head.{h}.query"),
                    params.value(wq).rows(),
                )?,
                value_mask: mask(
                    &format!("mask.layer.{l}.head.{h}.value"),
                    params.value(wv).rows(),
                )?,
            });
        }
        let w1 = id(&format!("layer.{l}.ffn.w1"))?;
        blocks.push(EncoderBlock {
            heads,
            ln1_gain: id(&format!("layer.{l}.ln1.gain"))?,
            ln1_bias: id(&format!("layer.{l}.ln1.bias"))?,
            w1,
            w2: id(&format!("layer.{l}.ffn.w2"))?,
            ffn_mask: mask(&format!("mask.layer.{l}.ffn"), params.value(w1).cols())?,
            ln2_gain: id(&format!("layer.{l}.ln2.gain"))?,
            ln2_bias: id(&format!("layer.{l}.ln2.bias"))?,
        });
    }
    Ok(EncoderModel {
        config,
        embedding,
        position: id("position")?,
        emb_ln_gain: id("embedding.ln.gain")?,
        emb_ln_bias: id("embedding.ln.bias")?,
        blocks,
        cls_w: id("classifier.w")?,
        cls_b: id("classifier.b")?,
        params,
    })
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<EncoderModel<S>> {
    read_checkpoint(&fs::read(path)?)
}
