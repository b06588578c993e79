//! Binary checkpoint container. Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "AELSTMCK"
//! version    u32      = 1
//! kind       str      model kind, e.g. "autoencoder_whole", "policy"
//! config     str      config hash of the producing run
//! meta       str      JSON model configuration
//! n_groups   u32
//! group*     str name, u64 rows, u64 cols, rows*cols f64
//! has_opt    u8       0 or 1
//! [opt]      str kind, f64 lr, f64 beta1, f64 beta2, f64 eps, u64 step,
//!            then per group: rows*cols f64 first moments, rows*cols f64 second moments
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::{Matrix, OptimizerConfig, OptimizerKind, OptimizerState, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AELSTMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub meta_json: String,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config_hash);
        put_str(&mut out, &self.meta_json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for g in self.params.groups() {
            put_str(&mut out, &g.name);
            put_matrix(&mut out, &g.value);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                put_str(&mut out, match opt.config.kind {
                    OptimizerKind::Adam => "adam",
                    OptimizerKind::Sgd => "sgd",
                });
                for v in [opt.config.learning_rate, opt.config.beta1, opt.config.beta2, opt.config.epsilon] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&opt.step_count.to_le_bytes());
                for (m, s) in opt.first_moments.iter().zip(&opt.second_moments) {
                    put_payload(&mut out, m);
                    put_payload(&mut out, s);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let config_hash = r.string()?;
        let meta_json = r.string()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let m = r.matrix(rows, cols)?;
            params.add(name, m);
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let kind = match r.string()?.as_str() {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    other => return Err(Error::format("checkpoint", format!("unknown optimizer {other}"))),
                };
                let config = OptimizerConfig {
                    kind,
                    learning_rate: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    epsilon: r.f64()?,
                };
                let step_count = r.u64()?;
                let mut first_moments = Vec::with_capacity(n);
                let mut second_moments = Vec::with_capacity(n);
                for g in params.groups() {
                    first_moments.push(r.matrix(g.value.rows(), g.value.cols())?);
                    second_moments.push(r.matrix(g.value.rows(), g.value.cols())?);
                }
                Some(OptimizerState { config, first_moments, second_moments, step_count })
            }
            b => return Err(Error::format("checkpoint", format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { kind, config_hash, meta_json, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path.display().to_string(), detail),
            other => other,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    put_payload(out, m);
}

fn put_payload(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint", "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "invalid utf-8"))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows.checked_mul(cols).ok_or_else(|| Error::format("checkpoint", "shape overflow"))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(Error::format("checkpoint", "payload shorter than declared shape"));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.add("enc.w0", Matrix::from_fn(2, 3, |r, c| r as f64 - c as f64 * 0.25));
        params.add("enc.b0", Matrix::row_vector(&[f64::MIN_POSITIVE, -0.0, 1e300]));
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &params).unwrap();
        opt.step_count = 7;
        opt.first_moments[0].set(1, 2, 0.5);
        Checkpoint {
            kind: "ae-whole".into(),
            config_hash: "abc123".into(),
            meta_json: "{\"latent_dim\":10}".into(),
            params,
            optimizer: Some(opt),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, ck);
    }

    #[test]
    fn truncated_and_corrupt_inputs_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
