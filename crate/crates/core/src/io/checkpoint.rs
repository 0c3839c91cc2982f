//! Binary checkpoints: `REIDCKPT`, u32 version, u64 config hash, the model
//! config as TOML, then named tensors. Integers are little-endian; strings
//! are a u32 byte length followed by UTF-8.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_file, write_file};
use crate::model::{ModelConfig, ReidModel};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"REIDCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub hash: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(config: &ModelConfig, store: &ParamStore) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config.hash().to_le_bytes());
    put_str(&mut out, &config.to_toml());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        put_str(&mut out, store.name(id));
        store.get(id).write_to(&mut out).expect("writing to a Vec cannot fail");
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = r.u64()?;
    let text = r.string()?;
    let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    if config.hash() != hash {
        return Err(Error::Checkpoint("embedded config does not match its hash".into()));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let t = Tensor::read_from(&mut r.buf).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len())));
    }
    Ok(Checkpoint { config, hash, tensors })
}

pub fn save(path: &Path, model: &ReidModel) -> Result<()> {
    write_file(path, &encode(model.config(), &model.store))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&read_file(path)?).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl Checkpoint {
    /// Compares against the architecture a run expects. A mismatch is an
    /// error unless `allow_mismatch`, in which case it is returned as a
    /// warning message.
    pub fn check_hash(&self, expected: &ModelConfig, allow_mismatch: bool) -> Result<Option<String>> {
        let want = expected.hash();
        if want == self.hash {
            return Ok(None);
        }
        if allow_mismatch {
            return Ok(Some(format!(
                "checkpoint config hash {:016x} differs from run config {want:016x}; using the checkpoint's architecture",
                self.hash
            )));
        }
        Err(Error::ConfigHashMismatch {
            expected: want,
            found: self.hash,
        })
    }

    /// Rebuilds the model described by the embedded config and loads every
    /// tensor into it.
    pub fn into_model(self) -> Result<ReidModel> {
        let mut model = ReidModel::new(&self.config, &mut crate::Rng::new(0))?;
        if self.tensors.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for a model with {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for (name, t) in self.tensors {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            model.store.set(id, t)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn model() -> ReidModel {
        ReidModel::new(&ModelConfig::mini(3), &mut Rng::new(7)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let bytes = encode(m.config(), &m.store);
        let back = decode(&bytes).unwrap().into_model().unwrap();
        for id in m.store.ids() {
            let (a, b) = (m.store.get(id), back.store.get(id));
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corruption_is_rejected() {
        let m = model();
        let bytes = encode(m.config(), &m.store);
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode(&bad).unwrap_err().to_string().contains("version"));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn hash_mismatch_needs_override() {
        let m = model();
        let ck = decode(&encode(m.config(), &m.store)).unwrap();
        let mut other = m.config().clone();
        other.mgo.k = 3;
        assert!(matches!(
            ck.check_hash(&other, false),
            Err(Error::ConfigHashMismatch { .. })
        ));
        assert!(ck.check_hash(&other, true).unwrap().is_some());
        assert!(ck.check_hash(m.config(), false).unwrap().is_none());
    }
}
