//! Versioned JSON checkpoints of a trained model.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsl::{AblationVariant, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const FORMAT: &str = "insta-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub variant: AblationVariant,
    pub image_size: [usize; 3],
    pub model: ModelConfig,
    /// Hash of the run configuration that produced the weights.
    pub config_hash: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(
        params: &ModelParams,
        model: &ModelConfig,
        image_size: [usize; 3],
        variant: AblationVariant,
        config_hash: &str,
    ) -> Self {
        let tensors = params
            .state()
            .into_iter()
            .map(|(name, t)| NamedTensor { name, shape: t.shape().to_vec(), data: t.into_data() })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            variant,
            image_size,
            model: model.clone(),
            config_hash: config_hash.into(),
            tensors,
        }
    }

    /// Rebuilds the model; every stored tensor must match a model tensor by
    /// name and shape, and none may be missing.
    pub fn restore(&self) -> Result<ModelParams> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
                self.format, self.version
            )));
        }
        let mut params = ModelParams::init(&self.model, self.image_size, self.variant, 0)?;
        let mut stored: BTreeMap<&str, &NamedTensor> = BTreeMap::new();
        for t in &self.tensors {
            if stored.insert(&t.name, t).is_some() {
                return Err(Error::Config(format!("checkpoint repeats tensor `{}`", t.name)));
            }
        }
        let mut state = params.state_mut();
        if state.len() != stored.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                stored.len(),
                state.len()
            )));
        }
        for (name, slot) in state.iter_mut() {
            let src = stored
                .get(name.as_str())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{name}`")))?;
            let t = Tensor::new(src.shape.clone(), src.data.clone())?;
            if t.shape() != slot.shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig { widths: vec![4, 8], pools: vec![true, false], ..Default::default() };
        let p = ModelParams::init(&cfg, [3, 8, 8], AblationVariant::Viii, 5).unwrap();
        (cfg, p)
    }

    #[test]
    fn round_trip_is_exact() {
        let (cfg, p) = small();
        let ck = Checkpoint::capture(&p, &cfg, [3, 8, 8], AblationVariant::Viii, "abc");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.restore().unwrap(), p);
    }

    #[test]
    fn mismatches_are_rejected() {
        let (cfg, p) = small();
        let ck = Checkpoint::capture(&p, &cfg, [3, 8, 8], AblationVariant::Viii, "");
        let mut missing = ck.clone();
        missing.tensors.pop();
        assert!(missing.restore().is_err());
        let mut reshaped = ck.clone();
        reshaped.tensors[0].shape = vec![reshaped.tensors[0].data.len()];
        assert!(reshaped.restore().is_err());
        let mut version = ck;
        version.version = 99;
        assert!(version.restore().is_err());
    }
}
