use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterConfig, EncoderConfig, Model, ModelParams};
use crate::error::{Error, Result};
use crate::prototypes::EmotionSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "sccl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model: configs, label set and every named parameter tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub emotions: EmotionSet,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, emotions: &EmotionSet) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            encoder: model.encoder.clone(),
            adapter: model.adapter.clone(),
            emotions: emotions.clone(),
            params: model
                .params
                .named()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model, checking every tensor against the shapes the
    /// configs imply.
    pub fn into_model(mut self) -> Result<(Model, EmotionSet)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        self.encoder.validate()?;
        self.adapter.validate(self.encoder.n_layers)?;
        let n_emotions = self.emotions.len();
        let shapes = ModelParams::shapes(&self.encoder, &self.adapter, n_emotions);
        let mut failure = None;
        let params = shapes.map(&mut |name, shape| {
            match self.params.remove(name) {
                Some(t) if t.shape() == shape.as_slice() => t,
                Some(t) => {
                    failure.get_or_insert(Error::ParamShape {
                        name: name.to_string(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    });
                    t
                }
                None => {
                    failure.get_or_insert(Error::MissingParam(name.to_string()));
                    Tensor::zeros(shape)
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = self.params.keys().next() {
            return Err(Error::Data(format!("unexpected parameter {extra}")));
        }
        if params.named().iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok((
            Model {
                encoder: self.encoder,
                adapter: self.adapter,
                n_emotions,
                params,
            },
            self.emotions,
        ))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, emotions: &EmotionSet) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from_model(model, emotions))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, EmotionSet)> {
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.into_model()
}
