//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "PTRRANK1"
//! 8       4     u32 format version (1)
//! 12      4     u32 d
//! 16      4     u32 feature_dim
//! 20      4     u32 n_max
//! 24      4     u32 n_text (text block size, UNK included)
//! 28      4     u32 flags: bit 0 = text head, bit 1 = Adam state present
//! 32      8     u64 vocabulary hash
//! 40      8     u64 init seed
//! 48      8     u64 optimizer steps taken
//! 56      8     u64 parameter count P
//! 64      8P    f64 parameters
//! then, if bit 1 is set:
//!         8     u64 Adam step counter
//!         8P    f64 first moments
//!         8P    f64 second moments
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelDims, PointerModel};
use crate::optim::AdamState;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"PTRRANK1";
pub const VERSION: u32 = 1;

const FLAG_TEXT_HEAD: u32 = 1;
const FLAG_ADAM: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PointerModel,
    pub step_count: u64,
    pub optimizer: Option<AdamState>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.model;
        let dims = model.dims();
        let layout = model.vocab().layout();
        let params = model.params();
        let mut flags = 0;
        if dims.aux_text {
            flags |= FLAG_TEXT_HEAD;
        }
        if self.optimizer.is_some() {
            flags |= FLAG_ADAM;
        }
        let mut out = Vec::with_capacity(64 + 24 * params.len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            dims.d as u32,
            dims.feature_dim as u32,
            layout.n_max as u32,
            layout.n_text as u32,
            flags,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [
            model.vocab().hash(),
            model.seed(),
            self.step_count,
            params.len() as u64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut put = |xs: &[f64]| {
            xs.iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
        };
        put(params);
        if let Some(s) = &self.optimizer {
            out.extend_from_slice(&s.t.to_le_bytes());
            for x in s.m.iter().chain(&s.v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a checkpoint; `vocab` must be the vocabulary it was trained with.
    pub fn from_bytes(bytes: &[u8], vocab: Vocabulary) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let d = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let n_max = r.u32()? as usize;
        let n_text = r.u32()? as usize;
        let flags = r.u32()?;
        let hash = r.u64()?;
        let seed = r.u64()?;
        let step_count = r.u64()?;
        let n_params = r.u64()? as usize;
        if hash != vocab.hash() {
            return Err(Error::VocabMismatch {
                expected: hash,
                actual: vocab.hash(),
            });
        }
        let layout = vocab.layout();
        if layout.n_max != n_max || layout.n_text != n_text {
            return Err(Error::Checkpoint(
                "vocabulary layout differs from header".into(),
            ));
        }
        let dims = ModelDims {
            d,
            feature_dim,
            aux_text: flags & FLAG_TEXT_HEAD != 0,
        };
        let params = r.f64s(n_params)?;
        let optimizer = if flags & FLAG_ADAM != 0 {
            let t = r.u64()?;
            let m = r.f64s(n_params)?;
            let v = r.f64s(n_params)?;
            Some(AdamState { t, m, v })
        } else {
            None
        };
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let model = PointerModel::from_params(dims, vocab, params, seed)?;
        Ok(Checkpoint {
            model,
            step_count,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path, vocab: Vocabulary) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes, vocab)
    }
}
