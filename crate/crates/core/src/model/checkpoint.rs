//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian u64, floats little-endian f64):
//!
//! ```text
//! magic            8 bytes  "SYNGENC1"
//! model kind       u64      0 = expander, 1 = generator
//! config           19 u64   d_m d_k d_v h_enc h1 h2 n1 n2 d_ff max_len
//!                           template_depth max_tree_depth node_vocab
//!                           level_vocab text_vocab positional_encoding
//!                           path_mask_mode path_average use_path_attention
//! dropout          f64
//! param count      u64
//! per parameter:   name_len u64, name bytes (UTF-8),
//!                  ndim u64, dims u64 × ndim, data f64 × numel
//! ```
//!
//! Parameters are written in store order, which is fixed by
//! construction, so identical parameters produce identical bytes.
//! Loading rebuilds the model from the stored config and then checks
//! every parameter name and shape against the freshly built structure.

use super::{ExpanderModel, GeneratorModel, ModelConfig, ModelError, ModelKind, Result};
use crate::attention::{PathAverage, PathMaskMode};
use crate::tensor::{ParamStore, Tensor};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SYNGENC1";

/// Everything a checkpoint holds.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
}

/// Serialize a parameter store to the checkpoint byte format.
pub fn checkpoint_bytes(kind: ModelKind, config: &ModelConfig, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let kind_tag = match kind {
        ModelKind::Expander => 0u64,
        ModelKind::Generator => 1u64,
    };
    let mask_tag = match config.path_mask_mode {
        PathMaskMode::KeysAndQueries => 0u64,
        PathMaskMode::KeysOnly => 1u64,
    };
    let avg_tag = match config.path_average {
        PathAverage::Uniform => 0u64,
        PathAverage::PerNode => 1u64,
    };
    let fields = [
        kind_tag,
        config.d_m as u64,
        config.d_k as u64,
        config.d_v as u64,
        config.h_enc as u64,
        config.h1 as u64,
        config.h2 as u64,
        config.n1 as u64,
        config.n2 as u64,
        config.d_ff as u64,
        config.max_len as u64,
        config.template_depth as u64,
        config.max_tree_depth as u64,
        config.node_vocab_size as u64,
        config.level_vocab_size as u64,
        config.text_vocab_size as u64,
        config.positional_encoding as u64,
        mask_tag,
        avg_tag,
        config.use_path_attention as u64,
    ];
    for f in fields {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&config.dropout.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, name, tensor) in store.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    kind: ModelKind,
    config: &ModelConfig,
    store: &ParamStore,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(kind, config, store))
        .map_err(|e| ModelError::Checkpoint(format!("write failed: {e}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<CheckpointData> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic (not a checkpoint)".into()));
    }
    let kind = match r.u64()? {
        0 => ModelKind::Expander,
        1 => ModelKind::Generator,
        k => return Err(ModelError::Checkpoint(format!("unknown model kind {k}"))),
    };
    let d_m = r.usize()?;
    let d_k = r.usize()?;
    let d_v = r.usize()?;
    let h_enc = r.usize()?;
    let h1 = r.usize()?;
    let h2 = r.usize()?;
    let n1 = r.usize()?;
    let n2 = r.usize()?;
    let d_ff = r.usize()?;
    let max_len = r.usize()?;
    let template_depth = r.u64()? as u32;
    let max_tree_depth = r.u64()? as u32;
    let node_vocab_size = r.usize()?;
    let level_vocab_size = r.usize()?;
    let text_vocab_size = r.usize()?;
    let positional_encoding = r.u64()? != 0;
    let path_mask_mode = match r.u64()? {
        0 => PathMaskMode::KeysAndQueries,
        1 => PathMaskMode::KeysOnly,
        k => return Err(ModelError::Checkpoint(format!("unknown mask mode {k}"))),
    };
    let path_average = match r.u64()? {
        0 => PathAverage::Uniform,
        1 => PathAverage::PerNode,
        k => return Err(ModelError::Checkpoint(format!("unknown average mode {k}"))),
    };
    let use_path_attention = r.u64()? != 0;
    let dropout = r.f64()?;
    let config = ModelConfig {
        d_m,
        d_k,
        d_v,
        h_enc,
        h1,
        h2,
        n1,
        n2,
        d_ff,
        max_len,
        template_depth,
        max_tree_depth,
        node_vocab_size,
        level_vocab_size,
        text_vocab_size,
        positional_encoding,
        path_mask_mode,
        path_average,
        use_path_attention,
        dropout,
    };

    let count = r.usize()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.usize()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.usize()?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.usize()?);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| ModelError::Checkpoint(format!("parameter `{name}`: {e}")))?;
        params.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(CheckpointData { kind, config, params })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointData> {
    let bytes = std::fs::read(path)
        .map_err(|e| ModelError::Checkpoint(format!("read failed: {e}")))?;
    checkpoint_from_bytes(&bytes)
}

/// Overwrite a freshly built store with checkpoint values, insisting on
/// an exact match of parameter names and shapes.
fn apply_params(store: &mut ParamStore, params: &[(String, Tensor)]) -> Result<()> {
    if store.len() != params.len() {
        return Err(ModelError::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            store.len(),
            params.len()
        )));
    }
    for (name, tensor) in params {
        let id = store.find(name).ok_or_else(|| {
            ModelError::Checkpoint(format!("model has no parameter named `{name}`"))
        })?;
        let slot = store.get_mut(id);
        if slot.shape() != tensor.shape() {
            return Err(ModelError::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                tensor.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(tensor.data());
        slot.zero_grad();
    }
    Ok(())
}

impl ExpanderModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, ModelKind::Expander, &self.config, self.store())
    }

    pub fn from_checkpoint(data: &CheckpointData) -> Result<Self> {
        if data.kind != ModelKind::Expander {
            return Err(ModelError::Checkpoint(
                "checkpoint holds a generator, not an expander".into(),
            ));
        }
        let mut model = ExpanderModel::new(data.config.clone(), 0)?;
        apply_params(model.store_mut(), &data.params)?;
        Ok(model)
    }
}

impl GeneratorModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, ModelKind::Generator, &self.config, self.store())
    }

    pub fn from_checkpoint(data: &CheckpointData) -> Result<Self> {
        if data.kind != ModelKind::Generator {
            return Err(ModelError::Checkpoint(
                "checkpoint holds an expander, not a generator".into(),
            ));
        }
        let mut model = GeneratorModel::new(data.config.clone(), 0)?;
        apply_params(model.store_mut(), &data.params)?;
        Ok(model)
    }
}
