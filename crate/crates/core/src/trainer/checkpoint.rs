//! Binary checkpoints, little-endian throughout:
//!
//! ```text
//! "TAPK" | version u16 | dtype u8 (4 or 8) | config digest [32]
//! config text: len u32 + UTF-8 | kind: len u8 + UTF-8
//! epoch u64 | step u64 | optimizer step u64
//! rng: seed [32] | stream u64 | word position u128
//! tensor count u32, then per tensor in name order:
//!   name: len u16 + UTF-8 | ndim u8 | dims u32 × ndim
//!   values | first moments | second moments   (numel × dtype each)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::ndcompute::{ParamSet, Real, Tensor};

const MAGIC: &[u8; 4] = b"TAPK";
const VERSION: u16 = 1;

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

fn moment<'a, T>(m: &'a BTreeMap<String, Vec<T>>, name: &str, n: usize) -> Result<&'a [T]> {
    m.get(name)
        .filter(|v| v.len() == n)
        .map(|v| v.as_slice())
        .ok_or_else(|| Error::contract(format!("optimizer state missing for `{name}`")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub config_text: String,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamSet<T>,
    pub adam: AdamState<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.config_text.as_bytes()).into()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        out.extend_from_slice(&self.digest());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        let kind_len = u8::try_from(self.kind.len()).map_err(|_| Error::config("checkpoint kind too long"))?;
        out.push(kind_len);
        out.extend_from_slice(self.kind.as_bytes());
        for v in [self.epoch, self.step, self.adam.step] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::config("parameter name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for block in [t.data(), moment(&self.adam.m, name, t.numel())?, moment(&self.adam.v, name, t.numel())?] {
                for v in block {
                    v.write_le(&mut out);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        let dtype = r.u8()? as usize;
        if dtype != T::BYTES {
            return Err(Error::format(
                6,
                format!("checkpoint holds {}-bit values, expected {}-bit", dtype * 8, T::BYTES * 8),
            ));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let text_len = r.u32()? as usize;
        let at = r.pos;
        let config_text = String::from_utf8(r.take(text_len)?.to_vec())
            .map_err(|_| Error::format(at, "config text is not UTF-8"))?;
        if <[u8; 32]>::from(Sha256::digest(config_text.as_bytes())) != digest {
            return Err(Error::format(7, "config digest does not match the stored config"));
        }
        let kind_len = r.u8()? as usize;
        let at = r.pos;
        let kind = String::from_utf8(r.take(kind_len)?.to_vec()).map_err(|_| Error::format(at, "kind is not UTF-8"))?;
        let (epoch, step, adam_step) = (r.u64()?, r.u64()?, r.u64()?);
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));

        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        let mut adam = AdamState {
            step: adam_step,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        };
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?;
            let ndim = r.u8()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let at = r.pos;
            let mut block = || -> Result<Vec<T>> {
                let raw = r.take(numel * T::BYTES)?;
                Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
            };
            let (values, m, v) = (block()?, block()?, block()?);
            let tensor = Tensor::new(shape, values).map_err(|e| Error::format(at, e.to_string()))?;
            params.insert(name.clone(), tensor).map_err(|e| Error::format(at, e.to_string()))?;
            adam.m.insert(name.clone(), m);
            adam.v.insert(name, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after the last tensor"));
        }
        Ok(Self {
            kind,
            config_text,
            epoch,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            params,
            adam,
        })
    }

    /// Writes through a temporary file and a rename, so a crash never
    /// leaves a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Reads just the value width of a checkpoint file (4 or 8 bytes).
pub fn peek_dtype(path: &Path) -> Result<usize> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    Ok(bytes[6] as usize)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.pos, format!("truncated: needed {n} more bytes")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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
}
