//! Versioned checkpoint container: model config, named weight arrays,
//! freeze flags, the vocabulary, and (optionally) optimizer state so a run
//! resumes exactly. Serialized as a single JSON document; serialization is
//! byte-deterministic for fixed contents, which the warm-up freeze checks
//! rely on.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{EncoderError, FreezeFlags, ModelConfig, ModelParams, ParamGroup, Vocab};
use crate::optim::OptimizerSnapshot;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format version {found} (this build reads {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error(transparent)]
    Model(#[from] EncoderError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub freeze: FreezeFlags,
    pub vocab: Vec<String>,
    pub weights: Vec<WeightEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn from_model(
        params: &ModelParams,
        vocab: &Vocab,
        optimizer: Option<OptimizerSnapshot>,
    ) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: params.config.clone(),
            freeze: params.freeze,
            vocab: vocab.tokens().to_vec(),
            weights: params
                .arrays()
                .iter()
                .map(|a| WeightEntry {
                    name: a.name.to_string(),
                    group: a.group,
                    shape: a.tensor.shape().to_vec(),
                    data: a.tensor.data().to_vec(),
                })
                .collect(),
            optimizer,
        }
    }

    pub fn to_model(&self) -> Result<(ModelParams, Vocab), CheckpointError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: self.format_version,
            });
        }
        let entries = self
            .weights
            .iter()
            .map(|w| (w.name.clone(), w.group, w.shape.clone(), w.data.clone()))
            .collect();
        let params = ModelParams::from_weight_data(self.config.clone(), entries, self.freeze)?;
        let vocab = Vocab::from_tokens(self.vocab.clone())?;
        Ok((params, vocab))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: ckpt.format_version,
            });
        }
        Ok(ckpt)
    }

    /// Deterministic byte serialization of one weight group, for freeze
    /// verification by byte comparison.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        let entries: Vec<&WeightEntry> = self.weights.iter().filter(|w| w.group == group).collect();
        serde_json::to_vec(&entries).expect("weight entries always serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::UNK_TOKEN;

    fn tiny() -> (ModelParams, Vocab) {
        let cfg = ModelConfig {
            embed_dim: 4,
            patch_size: 2,
            image_size: 4,
            vocab_size: 3,
            max_tokens: 8,
            hidden_dim: 5,
            seed: 7,
        };
        let params = ModelParams::init(&cfg).unwrap();
        let vocab = Vocab::from_tokens(vec![
            UNK_TOKEN.to_string(),
            "una".to_string(),
            "foto".to_string(),
        ])
        .unwrap();
        (params, vocab)
    }

    #[test]
    fn round_trip_preserves_weights_bitwise() {
        let (params, vocab) = tiny();
        let ckpt = Checkpoint::from_model(&params, &vocab, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let (params2, vocab2) = loaded.to_model().unwrap();
        for (a, b) in params.arrays().iter().zip(params2.arrays()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
            assert_eq!(a.name, b.name);
        }
        assert_eq!(vocab.tokens(), vocab2.tokens());
    }

    #[test]
    fn serialization_is_byte_deterministic() {
        let (params, vocab) = tiny();
        let a = serde_json::to_vec(&Checkpoint::from_model(&params, &vocab, None)).unwrap();
        let b = serde_json::to_vec(&Checkpoint::from_model(&params, &vocab, None)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn version_mismatch_rejected() {
        let (params, vocab) = tiny();
        let mut ckpt = Checkpoint::from_model(&params, &vocab, None);
        ckpt.format_version = 99;
        assert!(matches!(
            ckpt.to_model(),
            Err(CheckpointError::Version { found: 99 })
        ));
    }

    #[test]
    fn group_bytes_isolate_towers_from_projections() {
        let (mut params, vocab) = tiny();
        let before = Checkpoint::from_model(&params, &vocab, None);
        // mutate only the image projection
        let proj_index = params
            .arrays()
            .iter()
            .position(|a| a.name == "proj.image")
            .unwrap();
        let mut data = params.arrays()[proj_index].tensor.data().to_vec();
        data[0] += 1.0;
        params.set_array_data(proj_index, data).unwrap();
        let after = Checkpoint::from_model(&params, &vocab, None);
        use crate::encoders::ParamGroup::*;
        assert_eq!(before.group_bytes(ImageTower), after.group_bytes(ImageTower));
        assert_eq!(before.group_bytes(TextTower), after.group_bytes(TextTower));
        assert_ne!(before.group_bytes(ImageProj), after.group_bytes(ImageProj));
    }
}
