//! Binary checkpoints.
//!
//! Layout: the line `MUISC1`, a `kind=<muisc|primary|noncompliant>` line,
//! the model config as `key=value` lines, one empty line, then a
//! little-endian `u32` entry count followed by entries of
//! `u32 name length, name bytes, u32 rank, u32 dims..., f32 values...`.
//! Nothing may follow the last entry.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ImageClassifier, Muisc};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &str = "MUISC1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Muisc,
    Primary,
    Noncompliant,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Muisc => "muisc",
            ModelKind::Primary => "primary",
            ModelKind::Noncompliant => "noncompliant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "muisc" => Some(ModelKind::Muisc),
            "primary" => Some(ModelKind::Primary),
            "noncompliant" => Some(ModelKind::Noncompliant),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// A decoded checkpoint whose parameters have not been bound to a model yet.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_store(kind: ModelKind, config: String, store: &ParamStore) -> Self {
        let entries = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                Entry {
                    name: store.name(id).to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|&v| v as f32).collect(),
                }
            })
            .collect();
        Self { kind, config, entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(format!("kind={}\n", self.kind.name()).as_bytes());
        for line in self.config.lines().filter(|l| !l.trim().is_empty()) {
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
        out.push(b'\n');
        put_u32(&mut out, self.entries.len());
        for e in &self.entries {
            put_u32(&mut out, e.name.len());
            out.extend_from_slice(e.name.as_bytes());
            put_u32(&mut out, e.shape.len());
            for &d in &e.shape {
                put_u32(&mut out, d);
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.line()? != MAGIC {
            return Err(Error::Format(format!("not a checkpoint (expected magic {MAGIC})")));
        }
        let kind_line = r.line()?;
        let kind = kind_line
            .strip_prefix("kind=")
            .and_then(ModelKind::parse)
            .ok_or_else(|| Error::Format(format!("bad kind line {kind_line:?}")))?;
        let mut config = String::new();
        loop {
            let line = r.line()?;
            if line.is_empty() {
                break;
            }
            config.push_str(line);
            config.push('\n');
        }
        let count = r.u32()?;
        let mut entries = Vec::new();
        for i in 0..count {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len, "entry name")?)
                .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| Error::Format(format!("entry {name}: shape overflows")))?;
            let raw = r.take(n.saturating_mul(4), &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { kind, config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kinds: &[ModelKind]) -> Result<()> {
        if kinds.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::Format(format!("checkpoint holds a {} model", self.kind.name())))
        }
    }

    /// Copies every entry into `store`. The names and shapes must match the
    /// store exactly; on error the store is left untouched.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                self.entries.len(),
                store.len()
            )));
        }
        let mut staged = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = store
                .find(&e.name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {}", e.name)))?;
            if store.get(id).shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    e.name,
                    e.shape,
                    store.get(id).shape()
                )));
            }
            let t = Tensor::new(e.shape.clone(), e.data.iter().map(|&v| v as f64).collect())?;
            staged.push((id, t));
        }
        for (id, t) in staged {
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn into_muisc(self) -> Result<Muisc> {
        self.expect_kind(&[ModelKind::Muisc])?;
        let mut m = Muisc::from_kv_config(&self.config)?;
        self.restore(m.store_mut())?;
        Ok(m)
    }

    pub fn into_classifier(self, kind: ModelKind) -> Result<ImageClassifier> {
        self.expect_kind(&[kind])?;
        let mut m = ImageClassifier::from_kv_config(&self.config)?;
        self.restore(m.store_mut())?;
        Ok(m)
    }
}

pub fn save_muisc(model: &Muisc, path: &Path) -> Result<()> {
    Checkpoint::from_store(ModelKind::Muisc, model.kv_config()?, model.store()).save(path)
}

pub fn load_muisc(path: &Path) -> Result<Muisc> {
    Checkpoint::load(path)?.into_muisc()
}

pub fn save_classifier(model: &ImageClassifier, kind: ModelKind, path: &Path) -> Result<()> {
    if kind == ModelKind::Muisc {
        return Err(Error::Contract("an image classifier is not a muisc model".into()));
    }
    Checkpoint::from_store(kind, model.kv_config()?, model.store()).save(path)
}

pub fn load_classifier(path: &Path, kind: ModelKind) -> Result<ImageClassifier> {
    Checkpoint::load(path)?.into_classifier(kind)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4, "a length field")?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierConfig, MuiscConfig};

    fn tiny() -> Muisc {
        let mut cfg = MuiscConfig::desk();
        cfg.embed_dim = 16;
        cfg.num_heads = 2;
        cfg.init_std = 0.3;
        Muisc::new(cfg).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let m = tiny();
        let ck = Checkpoint::from_store(ModelKind::Muisc, m.kv_config().unwrap(), m.store());
        let bytes = ck.to_bytes();
        assert!(bytes.starts_with(b"MUISC1\nkind=muisc\n"));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn restored_weights_are_f32_rounded() {
        let m = tiny();
        let ck = Checkpoint::from_bytes(
            &Checkpoint::from_store(ModelKind::Muisc, m.kv_config().unwrap(), m.store()).to_bytes(),
        )
        .unwrap();
        let r = ck.into_muisc().unwrap();
        for id in m.store().ids() {
            for (a, b) in m.store().get(id).data().iter().zip(r.store().get(id).data()) {
                assert_eq!(*b, *a as f32 as f64);
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-30));
            }
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let m = ImageClassifier::new(ClassifierConfig {
            embed_dim: 8,
            ..Default::default()
        })
        .unwrap();
        let bytes = Checkpoint::from_store(ModelKind::Primary, m.kv_config().unwrap(), m.store()).to_bytes();
        for cut in (0..bytes.len()).step_by(7) {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn wrong_magic_kind_and_shapes_are_rejected() {
        let m = tiny();
        let ck = Checkpoint::from_store(ModelKind::Muisc, m.kv_config().unwrap(), m.store());
        let mut bytes = ck.to_bytes();
        bytes[5] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));

        assert!(ck.clone().into_classifier(ModelKind::Primary).is_err());

        let mut other = ck.clone();
        other.config = other.config.replace("embed_dim=16", "embed_dim=32");
        let err = other.into_muisc().unwrap_err().to_string();
        assert!(err.contains("enc.patch_w"), "{err}");

        let mut missing = ck.clone();
        missing.entries.pop();
        assert!(missing.into_muisc().is_err());

        let mut renamed = ck;
        renamed.entries[0].name = "bogus".into();
        assert!(renamed.into_muisc().unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn failed_restore_leaves_store_untouched() {
        let m = tiny();
        let mut ck = Checkpoint::from_store(ModelKind::Muisc, m.kv_config().unwrap(), m.store());
        for e in &mut ck.entries {
            e.data.iter_mut().for_each(|v| *v = 7.0);
        }
        let last = ck.entries.len() - 1;
        ck.entries[last].shape.push(1);
        let mut target = tiny();
        assert!(ck.restore(target.store_mut()).is_err());
        assert!(target
            .store()
            .ids()
            .all(|id| target.store().get(id).data().iter().all(|&v| v != 7.0)));
    }
}
