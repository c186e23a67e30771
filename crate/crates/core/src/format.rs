//! Binary model file: `ODLM` magic, version, header, tensor records, CRC32.
//!
//! ```text
//! magic    4 bytes  "ODLM"
//! version  u16
//! header   5 × u32  num_items, embed_dim, num_layers, num_heads, max_len
//! count    u32      number of records
//! records  tag u8 (0 dense, 1 factored), M u32, N u32, [r u32 if factored],
//!          then f32 data row-major (factored: a then b)
//! crc      u32      CRC32 of every preceding byte
//! ```
//!
//! Records follow a fixed order: item embedding, positional embedding, per
//! block `ln1.γ, ln1.β, q, k, v, o, ln2.γ, ln2.β, up, down`, then `ln_f.γ,
//! ln_f.β` and the output head. Vectors are stored as 1×N dense records.
//! Everything is little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::linalg::Mat;
use crate::recmodel::{
    Block, FactorPair, LayerNorm, Linear, LinearSlot, ModelConfig, RecError, RecModel,
};

pub const MAGIC: &[u8; 4] = b"ODLM";
pub const VERSION: u16 = 1;
const TAG_DENSE: u8 = 0;
const TAG_FACTORED: u8 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("record {index}: {msg}")]
    BadRecord { index: usize, msg: String },
    #[error("record {index}: rank {r} does not save parameters for a {m}x{n} layer")]
    RankBudget {
        index: usize,
        m: usize,
        n: usize,
        r: usize,
    },
    #[error("{0} unexpected bytes after the last record")]
    TrailingBytes(usize),
    #[error(transparent)]
    Model(#[from] RecError),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, data: &[f64]) {
        for &v in data {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn dense(&mut self, rows: usize, cols: usize, data: &[f64]) {
        self.0.push(TAG_DENSE);
        self.u32(rows);
        self.u32(cols);
        self.f32s(data);
    }

    fn linear(&mut self, lin: &Linear) {
        match lin {
            Linear::Dense(w) => self.dense(w.rows(), w.cols(), w.data()),
            Linear::Factored(f) => {
                self.0.push(TAG_FACTORED);
                self.u32(f.a.rows());
                self.u32(f.b.cols());
                self.u32(f.rank());
                self.f32s(f.a.data());
                self.f32s(f.b.data());
            }
        }
    }

    fn norm(&mut self, ln: &LayerNorm) {
        self.dense(1, ln.gamma.len(), &ln.gamma);
        self.dense(1, ln.beta.len(), &ln.beta);
    }
}

/// Serializes `model`; parameters are rounded to 32-bit floats.
pub fn encode_model(model: &RecModel) -> Vec<u8> {
    let c = &model.config;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        c.num_items,
        c.embed_dim,
        c.num_layers,
        c.num_heads,
        c.max_len,
    ] {
        w.u32(v);
    }
    w.u32(4 + 10 * model.blocks.len());
    w.dense(
        model.item_emb.rows(),
        model.item_emb.cols(),
        model.item_emb.data(),
    );
    w.dense(
        model.pos_emb.rows(),
        model.pos_emb.cols(),
        model.pos_emb.data(),
    );
    for b in &model.blocks {
        w.norm(&b.ln1);
        for slot in LinearSlot::ALL {
            if slot == LinearSlot::Up {
                w.norm(&b.ln2);
            }
            w.linear(b.linear(slot));
        }
    }
    w.norm(&model.ln_f);
    w.dense(model.head.rows(), model.head.cols(), model.head.data());
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    index: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(FormatError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat, FormatError> {
        let len = rows.checked_mul(cols).and_then(|n| n.checked_mul(4));
        let len = len.ok_or(FormatError::Truncated(self.pos))?;
        let bytes = self.take(len)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let index = self.index;
        Mat::new(rows, cols, data).map_err(|e| FormatError::BadRecord {
            index,
            msg: e.to_string(),
        })
    }

    fn bad(&self, msg: String) -> FormatError {
        FormatError::BadRecord {
            index: self.index,
            msg,
        }
    }

    fn record(&mut self) -> Result<Linear, FormatError> {
        let tag = self.take(1)?[0];
        let m = self.u32()?;
        let n = self.u32()?;
        let out = match tag {
            TAG_DENSE => Linear::Dense(self.mat(m, n)?),
            TAG_FACTORED => {
                let r = self.u32()?;
                if r == 0 || r * (m + n) >= m * n {
                    return Err(FormatError::RankBudget {
                        index: self.index,
                        m,
                        n,
                        r,
                    });
                }
                let a = self.mat(m, r)?;
                let b = self.mat(r, n)?;
                Linear::Factored(FactorPair { a, b })
            }
            t => return Err(self.bad(format!("unknown tag {t}"))),
        };
        self.index += 1;
        Ok(out)
    }

    fn dense(&mut self, shape: (usize, usize), what: &str) -> Result<Mat, FormatError> {
        match self.record()? {
            Linear::Dense(w) if w.shape() == shape => Ok(w),
            Linear::Dense(w) => {
                self.index -= 1;
                Err(self.bad(format!("{what}: expected {shape:?}, found {:?}", w.shape())))
            }
            Linear::Factored(_) => {
                self.index -= 1;
                Err(self.bad(format!("{what}: must be dense")))
            }
        }
    }

    fn norm(&mut self, d: usize, what: &str) -> Result<LayerNorm, FormatError> {
        let gamma = self.dense((1, d), what)?.into_data();
        let beta = self.dense((1, d), what)?.into_data();
        Ok(LayerNorm { gamma, beta })
    }

    fn linear(&mut self, shape: (usize, usize), what: &str) -> Result<Linear, FormatError> {
        let lin = self.record()?;
        if (lin.out_dim(), lin.in_dim()) != shape {
            self.index -= 1;
            return Err(self.bad(format!(
                "{what}: expected {shape:?}, found {:?}",
                (lin.out_dim(), lin.in_dim())
            )));
        }
        Ok(lin)
    }
}

/// Parses and validates a model file image.
pub fn decode_model(bytes: &[u8]) -> Result<RecModel, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < 4 + 2 + 24 + 4 {
        return Err(FormatError::Truncated(bytes.len()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed });
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let mut r = Reader {
        buf: body,
        pos: 6,
        index: 0,
    };
    let num_items = r.u32()?;
    let d = r.u32()?;
    let num_layers = r.u32()?;
    let num_heads = r.u32()?;
    let max_len = r.u32()?;
    let count = r.u32()?;
    if count != 4 + 10 * num_layers {
        return Err(r.bad(format!(
            "header declares {num_layers} blocks but {count} records"
        )));
    }

    let item_emb = r.dense((num_items, d), "item embedding")?;
    let pos_emb = r.dense((max_len, d), "positional embedding")?;
    let mut blocks = Vec::with_capacity(num_layers);
    let mut ffn_dim = None;
    for _ in 0..num_layers {
        let ln1 = r.norm(d, "ln1")?;
        let query = r.linear((d, d), "q")?;
        let key = r.linear((d, d), "k")?;
        let value = r.linear((d, d), "v")?;
        let output = r.linear((d, d), "o")?;
        let ln2 = r.norm(d, "ln2")?;
        let up = r.record()?;
        let f = *ffn_dim.get_or_insert(up.out_dim());
        if (up.out_dim(), up.in_dim()) != (f, d) {
            r.index -= 1;
            return Err(r.bad(format!(
                "up: expected ({f}, {d}), found ({}, {})",
                up.out_dim(),
                up.in_dim()
            )));
        }
        let down = r.linear((d, f), "down")?;
        blocks.push(Block {
            ln1,
            query,
            key,
            value,
            output,
            ln2,
            up,
            down,
        });
    }
    let ln_f = r.norm(d, "ln_f")?;
    let head = r.dense((num_items, d), "head")?;
    if r.pos != body.len() {
        return Err(FormatError::TrailingBytes(body.len() - r.pos));
    }
    let config = ModelConfig {
        num_items,
        embed_dim: d,
        num_layers,
        num_heads,
        max_len,
        ffn_dim: ffn_dim.unwrap_or(4 * d),
    };
    config.validate()?;
    Ok(RecModel {
        config,
        item_emb,
        pos_emb,
        blocks,
        ln_f,
        head,
    })
}

pub fn save_model(model: &RecModel, path: &Path) -> Result<(), FormatError> {
    fs::write(path, encode_model(model)).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<RecModel, FormatError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes)
}
