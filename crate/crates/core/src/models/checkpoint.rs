//! Checkpoint layout: `WABT`, u32 version, u32 header length, JSON header,
//! u32 block count, then per block a u32-length-prefixed UTF-8 name and a
//! tensor in the `TNSR` format. All integers little-endian.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierHead, GraftedModel, ModelConfig};
use crate::cif::CifConfig;
use crate::diffcore::nn::ParamStore;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WABT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub graft_depth: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub cif: CifConfig,
    pub classifier: bool,
}

impl GraftedModel {
    fn stores(&self) -> Vec<&ParamStore> {
        let mut s = vec![&self.trainable, &self.linguistic.store];
        if let Some(c) = &self.classifier {
            s.push(&c.store);
        }
        s
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            graft_depth: self.config.graft_depth,
            d_model: self.config.d_model,
            vocab: self.config.vocab,
            seed: self.config.seed,
            model: self.config,
            cif: self.cif,
            classifier: self.classifier.is_some(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let stores = self.stores();
        let count: usize = stores.iter().map(|s| s.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for store in stores {
            for (name, t) in store.iter() {
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                t.write_to(&mut out).expect("writing to a Vec cannot fail");
            }
        }
        out
    }

    /// Rebuilds the architecture from the header, then fills in every
    /// parameter by name. `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |index: usize, reason: String| Error::CorruptFile {
            path: path.to_path_buf(),
            index,
            reason,
        };
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| corrupt(0, e.to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt(0, format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r).map_err(|e| corrupt(0, e))?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(0, format!("unsupported version {version}")));
        }
        let hlen = read_u32(&mut r).map_err(|e| corrupt(0, e))? as usize;
        let mut hbytes = vec![0u8; hlen];
        r.read_exact(&mut hbytes).map_err(|e| corrupt(0, e.to_string()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&hbytes).map_err(|e| corrupt(0, format!("header: {e}")))?;

        let mut model = GraftedModel::new(header.model, header.cif)?;
        if header.classifier {
            model.attach_classifier();
        }
        let count = read_u32(&mut r).map_err(|e| corrupt(0, e))? as usize;
        let expected: usize = model.stores().iter().map(|s| s.len()).sum();
        if count != expected {
            return Err(corrupt(0, format!("{count} parameter blocks, architecture has {expected}")));
        }

        let mut index = 0;
        let mut fill = |store: &mut ParamStore, r: &mut Cursor<&[u8]>| -> Result<()> {
            let mut loaded = ParamStore::new();
            for (name, shape) in store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>() {
                index += 1;
                let len = read_u32(r).map_err(|e| corrupt(index, e))? as usize;
                let mut nb = vec![0u8; len];
                r.read_exact(&mut nb).map_err(|e| corrupt(index, e.to_string()))?;
                let got = String::from_utf8(nb).map_err(|e| corrupt(index, e.to_string()))?;
                if got != name {
                    return Err(corrupt(index, format!("expected parameter {name}, found {got}")));
                }
                let t = Tensor::read_from(r).map_err(|e| corrupt(index, e))?;
                if t.shape() != shape.as_slice() {
                    return Err(corrupt(index, format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
                }
                loaded.add(name, t);
            }
            store.load_from(&loaded)
        };
        fill(&mut model.trainable, &mut r)?;
        fill(&mut model.linguistic.store, &mut r)?;
        if let Some(c) = model.classifier.as_mut() {
            fill(&mut c.store, &mut r)?;
        }
        if (r.position() as usize) != bytes.len() {
            return Err(corrupt(index, "trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Replaces the classifier with one holding `store`'s values.
    pub fn set_classifier(&mut self, head: ClassifierHead) {
        self.classifier = Some(head);
    }
}

fn read_u32(r: &mut impl Read) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(u32::from_le_bytes(b))
}
