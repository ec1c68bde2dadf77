//! Binary checkpoint and best-point files.
//!
//! All integers are little-endian `u32`. A tensor is encoded as its rank,
//! its extents and then its `f32` values.
//!
//! Checkpoint: `"GOODCKPT"`, version, network text (length + UTF-8),
//! metadata text (length + UTF-8, `key=value` lines), tensor count, then
//! weight and bias of each layer in order.
//!
//! Point dump: `"GOODPNTS"`, version, entry count, then per entry the
//! sample index followed by one tensor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, ParseError, Result};
use crate::network::{LayerParams, NetworkSpec, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GOODCKPT";
pub const POINTS_MAGIC: &[u8; 8] = b"GOODPNTS";
pub const FORMAT_VERSION: u32 = 1;

/// Training state stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    /// Number of completed epochs.
    pub epoch: usize,
    pub epsilon: f32,
    pub kappa: f32,
    pub q: f64,
    pub seed: u64,
}

impl CheckpointMeta {
    fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epoch={}", self.epoch);
        let _ = writeln!(s, "epsilon={}", self.epsilon);
        let _ = writeln!(s, "kappa={}", self.kappa);
        let _ = writeln!(s, "q={}", self.q);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    fn from_text(text: &str) -> Result<Self, ParseError> {
        let bad = |detail: String| ParseError::Malformed {
            what: "checkpoint metadata",
            detail,
        };
        let mut meta = CheckpointMeta::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {line:?}")))?;
            let value = value.trim();
            let parse_err = |_| bad(format!("bad value for {key}: {value:?}"));
            match key.trim() {
                "epoch" => {
                    meta.epoch = value
                        .parse()
                        .map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?
                }
                "epsilon" => {
                    meta.epsilon = value
                        .parse()
                        .map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?
                }
                "kappa" => {
                    meta.kappa = value
                        .parse()
                        .map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?
                }
                "q" => {
                    meta.q = value
                        .parse()
                        .map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?
                }
                "seed" => {
                    meta.seed = value
                        .parse()
                        .map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        Ok(meta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub meta: CheckpointMeta,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("value fits in u32");
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_text(buf: &mut Vec<u8>, text: &str) {
    put_u32(buf, text.len());
    buf.extend_from_slice(text.as_bytes());
}

pub fn encode_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    put_u32(buf, t.rank());
    for &d in t.shape() {
        put_u32(buf, d);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte buffer that reports truncation precisely.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        let end = self.pos.checked_add(n).unwrap_or(usize::MAX);
        if end > self.bytes.len() {
            return Err(ParseError::Truncated {
                what: self.what,
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ParseError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn magic(&mut self, magic: &[u8; 8]) -> Result<(), ParseError> {
        let found = self.take(8)?;
        if found != magic {
            return Err(ParseError::BadMagic {
                what: self.what,
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), ParseError> {
        let found = self.u32()?;
        if found != FORMAT_VERSION {
            return Err(ParseError::Version {
                what: self.what,
                expected: FORMAT_VERSION,
                found,
            });
        }
        Ok(())
    }

    fn text(&mut self) -> Result<&'a str, ParseError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| ParseError::Malformed {
            what: self.what,
            detail: format!("invalid UTF-8: {e}"),
        })
    }

    fn tensor(&mut self) -> Result<Tensor, ParseError> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ParseError::Malformed {
                what: self.what,
                detail: format!("tensor shape {shape:?} overflows"),
            })?;
        let raw = self.take(count.saturating_mul(4))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| ParseError::Malformed {
            what: self.what,
            detail: e.to_string(),
        })
    }

    fn finish(&self) -> Result<(), ParseError> {
        if self.pos != self.bytes.len() {
            return Err(ParseError::Malformed {
                what: self.what,
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION as usize);
    put_text(&mut buf, &ckpt.spec.to_string());
    put_text(&mut buf, &ckpt.meta.to_text());
    put_u32(&mut buf, ckpt.params.layers.len() * 2);
    for t in ckpt.params.tensors() {
        encode_tensor(&mut buf, t);
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "checkpoint",
    };
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let spec: NetworkSpec = r.text()?.parse()?;
    let meta = CheckpointMeta::from_text(r.text()?)?;
    let count = r.u32()? as usize;
    if count % 2 != 0 {
        return Err(ParseError::Malformed {
            what: "checkpoint",
            detail: format!("odd tensor count {count}"),
        }
        .into());
    }
    let mut layers = Vec::with_capacity(count / 2);
    for _ in 0..count / 2 {
        let weight = r.tensor()?;
        let bias = r.tensor()?;
        layers.push(LayerParams { weight, bias });
    }
    r.finish()?;
    let params = ParamStore { layers };
    params.check(&spec)?;
    Ok(Checkpoint { spec, params, meta })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Best attack points keyed by sample index.
pub fn encode_points(points: &[(usize, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(POINTS_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION as usize);
    put_u32(&mut buf, points.len());
    for (index, t) in points {
        put_u32(&mut buf, *index);
        encode_tensor(&mut buf, t);
    }
    buf
}

pub fn decode_points(bytes: &[u8]) -> Result<Vec<(usize, Tensor)>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        what: "point dump",
    };
    r.magic(POINTS_MAGIC)?;
    r.version()?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let index = r.u32()? as usize;
        out.push((index, r.tensor()?));
    }
    r.finish()?;
    Ok(out)
}

pub fn save_points(path: &Path, points: &[(usize, Tensor)]) -> Result<()> {
    fs::write(path, encode_points(points)).map_err(|e| Error::io(path, e))
}

pub fn load_points(path: &Path) -> Result<Vec<(usize, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_points(&bytes)
}
