//! Checkpoints as a single safetensors archive.
//!
//! Parameters are stored under their model names, Adam moments under
//! `adam.m/<name>` and `adam.v/<name>`. The header metadata carries the model config
//! (JSON), the training step and the optimizer step.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamState, SavosModel};

pub const FORMAT: &str = "savos-lab-checkpoint-1";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamState,
    pub v: ParamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub step: u64,
    pub params: ParamState,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: &SavosModel, step: u64, adam: Option<AdamState>) -> Result<Self> {
        Ok(Self {
            model_config: model.config().clone(),
            step,
            params: model.state()?,
            adam,
        })
    }

    pub fn build_model(&self, device: &Device, dtype: DType) -> Result<SavosModel> {
        let model = SavosModel::new(self.model_config.clone(), device, dtype)?;
        model.load_state(&self.params)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut bytes: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut push = |prefix: &str, state: &ParamState| {
            for (name, (dims, data)) in state {
                let raw = data.iter().flat_map(|v| v.to_le_bytes()).collect();
                bytes.push((format!("{prefix}{name}"), dims.clone(), raw));
            }
        };
        push("", &self.params);
        if let Some(adam) = &self.adam {
            push(ADAM_M, &adam.m);
            push(ADAM_V, &adam.v);
        }
        let views = bytes
            .iter()
            .map(|(n, d, raw)| Ok((n.clone(), TensorView::new(Dtype::F32, d.clone(), raw)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| Error::Contract(format!("cannot build tensor view: {e}")))?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert(
            "model_config".to_string(),
            serde_json::to_string(&self.model_config)?,
        );
        meta.insert("step".to_string(), self.step.to_string());
        if let Some(adam) = &self.adam {
            meta.insert("adam_step".to_string(), adam.step.to_string());
        }
        safetensors::serialize(views, Some(meta))
            .map_err(|e| Error::Contract(format!("cannot serialize checkpoint: {e}")))
    }

    /// `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        let (_, header) = SafeTensors::read_metadata(bytes)
            .map_err(|e| bad(format!("not a safetensors file: {e}")))?;
        let meta = header.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad("missing or unknown checkpoint format tag".into()));
        }
        let model_config: ModelConfig = serde_json::from_str(
            meta.get("model_config")
                .ok_or_else(|| bad("checkpoint lacks model_config".into()))?,
        )
        .map_err(|e| bad(format!("corrupt model_config: {e}")))?;
        let number = |key: &str| -> Result<Option<u64>> {
            meta.get(key)
                .map(|s| s.parse::<u64>().map_err(|e| bad(format!("bad {key}: {e}"))))
                .transpose()
        };
        let step = number("step")?.ok_or_else(|| bad("checkpoint lacks step".into()))?;
        let adam_step = number("adam_step")?;

        let tensors =
            SafeTensors::deserialize(bytes).map_err(|e| bad(format!("corrupt tensors: {e}")))?;
        let mut params = ParamState::new();
        let mut m = ParamState::new();
        let mut v = ParamState::new();
        for name in tensors.names() {
            let view = tensors
                .tensor(name)
                .map_err(|e| bad(format!("{name}: {e}")))?;
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("{name} is {:?}, expected F32", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let entry = (view.shape().to_vec(), data);
            if let Some(rest) = name.strip_prefix(ADAM_M) {
                m.insert(rest.to_string(), entry);
            } else if let Some(rest) = name.strip_prefix(ADAM_V) {
                v.insert(rest.to_string(), entry);
            } else {
                params.insert(name.to_string(), entry);
            }
        }
        let adam = match adam_step {
            Some(step) => Some(AdamState { step, m, v }),
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(bad("optimizer moments without adam_step".into())),
        };
        Ok(Self {
            model_config,
            step,
            params,
            adam,
        })
    }

    /// Writes through a temporary file so an interrupted save keeps the old checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
