//! Self-describing JSON checkpoints: the model configuration plus every
//! parameter by name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamGroup;
use crate::error::{Error, Result};
use crate::model::{DmmvModel, ModelConfig};
use crate::tensor::Tensor;

pub const FORMAT: &str = "dmmv-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_model(model: &DmmvModel) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model: model.config().clone(),
            params: model
                .store
                .iter()
                .map(|(_, p)| StoredParam {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model and installs the stored values. Every parameter of
    /// the assembled model must be present with a matching shape and group.
    pub fn into_model(self) -> Result<DmmvModel> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::ConfigMismatch(format!(
                "unsupported checkpoint format {} v{}",
                self.format, self.version
            )));
        }
        let mut model = DmmvModel::new(self.model, 0)?;
        if self.params.len() != model.store.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for sp in self.params {
            let id = model.store.id(&sp.name).ok_or_else(|| Error::UnknownParameter(sp.name.clone()))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != sp.value.shape() || p.group != sp.group {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {} is {:?}/{} in the checkpoint but {:?}/{} in the model",
                    sp.name,
                    sp.value.shape(),
                    sp.group.as_str(),
                    p.value.shape(),
                    p.group.as_str()
                )));
            }
            p.value = sp.value;
        }
        Ok(model)
    }
}

pub fn save(model: &DmmvModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&Checkpoint::from_model(model))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<DmmvModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.into_model()
}

/// Loads and checks that the stored assembly equals `expected`.
pub fn load_matching(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<DmmvModel> {
    let model = load(path)?;
    if model.config() != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint was built for {:?}, configuration asks for {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::visual::MaeConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            period: 8,
            lookback: 48,
            horizon: 12,
            mae: MaeConfig {
                image_size: 16,
                patch_size: 4,
                channels: 1,
                enc_dim: 8,
                enc_depth: 1,
                enc_heads: 2,
                dec_dim: 8,
                dec_depth: 1,
                dec_heads: 2,
                mlp_ratio: 2,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut m = DmmvModel::new(cfg(), 7).unwrap();
        m.store.get_mut(m.gate).value = Tensor::scalar(0.1234567890123);
        save(&m, &path).unwrap();
        let back = load_matching(&path, &cfg()).unwrap();
        assert_eq!(back.store.values(), m.store.values());
        let x: Vec<f64> = (0..48).map(|t| (t as f64 * 0.3).sin()).collect();
        assert_eq!(back.forecast(&x).unwrap(), m.forecast(&x).unwrap());
    }

    #[test]
    fn mismatches_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save(&DmmvModel::new(cfg(), 1).unwrap(), &path).unwrap();
        let other = ModelConfig { horizon: 16, ..cfg() };
        assert!(matches!(load_matching(&path, &other), Err(Error::ConfigMismatch(_))));

        let mut ck = Checkpoint::from_model(&DmmvModel::new(cfg(), 1).unwrap());
        ck.params[0].name = "bogus".into();
        assert!(matches!(ck.into_model(), Err(Error::UnknownParameter(_))));
    }
}
