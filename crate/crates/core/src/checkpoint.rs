//! Versioned model checkpoints in the safetensors container.
//!
//! Tensors are stored under their canonical layer path; optimizer velocity
//! under `optim/<path>`. The JSON header entry `siriib` holds
//! [`CheckpointMeta`], including the architecture descriptor and the input
//! normalization.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchitectureDescriptor, Classifier};
use crate::optim::{Sgd, SgdConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "siriib";
const OPTIM_PREFIX: &str = "optim/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: SgdConfig,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub descriptor: ArchitectureDescriptor,
    /// `"f32"` or `"f64"`.
    pub dtype: String,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub optimizer: Option<OptimizerMeta>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
    pub optimizer_state: BTreeMap<String, Tensor>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<usize>, Vec<u8>)> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (
            Dtype::F32,
            shape,
            flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            Dtype::F64,
            shape,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn from_view(view: &TensorView<'_>, device: &Device) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    Ok(match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, shape, device)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported stored dtype {other:?}"))),
    })
}

/// Write parameters, buffers and (optionally) optimizer state.
pub fn save_checkpoint(path: &Path, model: &Classifier, epoch: usize, seed: u64, optimizer: Option<&Sgd>) -> Result<()> {
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        descriptor: model.descriptor().clone(),
        dtype: dtype_name(model.dtype())?.to_string(),
        epoch,
        seed,
        optimizer: optimizer.map(|o| OptimizerMeta {
            config: o.config,
            steps: o.steps(),
        }),
    };
    let mut entries: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
    for (k, t) in model.store().snapshot()? {
        let (d, s, b) = to_bytes(&t)?;
        entries.push((k, d, s, b));
    }
    if let Some(o) = optimizer {
        for (k, t) in o.state() {
            let (d, s, b) = to_bytes(t)?;
            entries.push((format!("{OPTIM_PREFIX}{k}"), d, s, b));
        }
    }
    let views = entries
        .iter()
        .map(|(k, d, s, b)| Ok((k.clone(), TensorView::new(*d, s.clone(), b)?)))
        .collect::<Result<Vec<_>>>()?;
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    safetensors::serialize_to_file(views, Some(info), path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no checkpoint header", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(raw)?;
    let found = value.get("format_version").and_then(serde_json::Value::as_u64);
    if found != Some(u64::from(CHECKPOINT_VERSION)) {
        return Err(Error::Version {
            found: found.map_or_else(|| "missing".to_string(), |v| v.to_string()),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint(format!("missing or malformed checkpoint fields: {e}")))?;
    let st = SafeTensors::deserialize(&bytes)?;
    let mut tensors = BTreeMap::new();
    let mut optimizer_state = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = from_view(&view, &Device::Cpu)?;
        match name.strip_prefix(OPTIM_PREFIX) {
            Some(k) => optimizer_state.insert(k.to_string(), t),
            None => tensors.insert(name, t),
        };
    }
    Ok(Checkpoint {
        meta,
        tensors,
        optimizer_state,
    })
}

impl Checkpoint {
    pub fn dtype(&self) -> Result<DType> {
        parse_dtype(&self.meta.dtype)
    }

    /// Rebuild the stored architecture and load its tensors.
    pub fn build(&self, device: &Device) -> Result<Classifier> {
        let model = Classifier::new(self.meta.descriptor.clone(), self.dtype()?, device, self.meta.seed)?;
        self.restore(&model)?;
        Ok(model)
    }

    /// Load tensors into an existing model whose descriptor must match.
    pub fn restore(&self, model: &Classifier) -> Result<()> {
        if model.descriptor() != &self.meta.descriptor {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint holds {}, model is {}",
                self.meta.descriptor.name(),
                model.descriptor().name()
            )));
        }
        model.store().load(&self.tensors)
    }

    /// Optimizer with the stored configuration and velocity, if any.
    pub fn optimizer(&self, device: &Device) -> Result<Option<Sgd>> {
        let Some(o) = &self.meta.optimizer else {
            return Ok(None);
        };
        let mut sgd = Sgd::new(o.config);
        let state = self
            .optimizer_state
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.to_device(device)?)))
            .collect::<Result<_>>()?;
        sgd.load_state(state, o.steps);
        Ok(Some(sgd))
    }
}
