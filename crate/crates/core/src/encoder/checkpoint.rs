use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, ModelState};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, ParamStore};
use crate::scalar::Scalar;
use crate::textio::Vocab;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Serialized model: configuration, vocabulary and named tensors in
/// registration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub vocab: Vec<String>,
    pub params: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", ckpt.format_version)));
        }
        Ok(ckpt)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

impl<T: Scalar> ModelState<T> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .params
            .entries()
            .iter()
            .map(|e| {
                let rec = TensorRecord {
                    shape: [e.value.rows(), e.value.cols()],
                    data: e.value.data().iter().map(|v| v.as_f64()).collect(),
                };
                let value = serde_json::to_value(rec).expect("plain numeric record");
                (e.name.clone(), value)
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            params,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let vocab = Vocab::from_tokens(ckpt.vocab.clone())?;
        let mut store = ParamStore::new();
        for (name, value) in &ckpt.params {
            let rec: TensorRecord = serde_json::from_value(value.clone())
                .map_err(|e| Error::Data(format!("parameter {name}: {e}")))?;
            let data = rec.data.into_iter().map(T::lit).collect();
            let m = Matrix::from_vec_checked(rec.shape[0], rec.shape[1], data)
                .map_err(|e| Error::Data(format!("parameter {name}: {e}")))?;
            store.add(name.clone(), m)?;
        }
        ModelState::from_params(ckpt.config.clone(), vocab, store)
    }
}
