//! Single-file checkpoint: 8-byte magic, `u32` version, `u64` header length,
//! a JSON header, then every parameter as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::datamodel::{Catalog, ItemId, Schema};
use crate::embedder::FeatureSpec;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AFRACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    features: FeatureSpec,
    vocab: Schema,
    target_ids: Vec<ItemId>,
    tensors: Vec<TensorEntry>,
}

/// Writes `model` to `path` via a temporary file and rename.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let store = &model.store;
    let header = Header {
        config: model.config.clone(),
        features: model.embedder.spec.clone(),
        vocab: model.schema().clone(),
        target_ids: model.targets.ids().to_vec(),
        tensors: store
            .ids()
            .map(|id| TensorEntry {
                name: store.name(id).to_string(),
                shape: store.get(id).shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + 4 * store.num_scalars());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for id in store.ids() {
        for &x in store.get(id).data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", *at)))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Restores a model saved by [`save_checkpoint`] against the same catalog.
pub fn load_checkpoint(path: &Path, catalog: &Catalog) -> Result<Model> {
    let bytes = fs::read(path)?;
    let mut at = 0;
    if take(&bytes, &mut at, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut at, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(take(&bytes, &mut at, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&bytes, &mut at, len)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let mut model = Model::new(header.config, &header.vocab, catalog, 0)?;
    if model.embedder.spec != header.features {
        return Err(Error::Checkpoint("feature layout differs from the catalog's".into()));
    }
    if model.targets.ids() != header.target_ids.as_slice() {
        return Err(Error::Checkpoint("target items differ from the catalog's".into()));
    }
    let ids: Vec<_> = model.store.ids().collect();
    if ids.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            ids.len()
        )));
    }
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let t = model.store.get_mut(id);
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!("tensor `{}` has shape {:?}", entry.name, entry.shape)));
        }
        let raw = take(&bytes, &mut at, 4 * t.len())?;
        for (x, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
    }
    if at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok(model)
}
