use std::path::Path;

use super::{EncoderConfig, EncoderError, EncoderWeights, Model, Result};
use crate::tensorfile::{FormatError, TensorFile};

pub const MODEL_MAGIC: &str = "ZPMODEL";

fn parse<T: std::str::FromStr>(f: &TensorFile, key: &str) -> Result<T> {
    let raw = f.require_meta(key)?;
    raw.parse()
        .map_err(|_| FormatError::Header(format!("meta {key}: cannot parse {raw:?}")).into())
}

impl Model {
    pub fn to_tensor_file(&self) -> TensorFile {
        let c = &self.config;
        let mut f = TensorFile::new(MODEL_MAGIC, 1);
        f.push_meta("num_layers", c.num_layers);
        f.push_meta("d_model", c.d_model);
        f.push_meta("n_heads", c.n_heads);
        f.push_meta("ffn_dim", c.ffn_dim);
        f.push_meta("vocab_size", c.vocab_size);
        f.push_meta("feat_dim", c.feat_dim);
        f.push_meta("frame_ms", c.frame_ms);
        f.push_meta("subsample", c.subsample);
        f.push_meta("chunk_frames", c.chunk_frames);
        f.push_meta(
            "left_chunks",
            c.left_chunks.map_or("unlimited".to_string(), |l| l.to_string()),
        );
        for (name, m) in self.weights.tensors() {
            f.tensors.push((name, m.clone()));
        }
        f
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        let left_chunks = match f.require_meta("left_chunks")? {
            "unlimited" => None,
            _ => Some(parse(f, "left_chunks")?),
        };
        let config = EncoderConfig {
            num_layers: parse(f, "num_layers")?,
            d_model: parse(f, "d_model")?,
            n_heads: parse(f, "n_heads")?,
            ffn_dim: parse(f, "ffn_dim")?,
            vocab_size: parse(f, "vocab_size")?,
            feat_dim: parse(f, "feat_dim")?,
            frame_ms: parse(f, "frame_ms")?,
            subsample: parse(f, "subsample")?,
            chunk_frames: parse(f, "chunk_frames")?,
            left_chunks,
        };
        config.validate()?;
        let mut weights = EncoderWeights::init(&config, 0);
        let expected = weights.tensors().len();
        if f.tensors.len() != expected {
            return Err(EncoderError::Weights(format!(
                "file has {} tensors, config implies {expected}",
                f.tensors.len()
            )));
        }
        for ((name, slot), (file_name, m)) in weights.tensors_mut().into_iter().zip(&f.tensors) {
            if &name != file_name || slot.shape() != m.shape() {
                return Err(EncoderError::Weights(format!(
                    "expected {name} {:?}, found {file_name} {:?}",
                    slot.shape(),
                    m.shape()
                )));
            }
            *slot = m.clone();
        }
        if !weights.is_finite() {
            return Err(EncoderError::Weights("non-finite entries".into()));
        }
        Model::new(config, weights)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_tensor_file().to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::from_bytes(bytes, MODEL_MAGIC)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(FormatError::from)?;
        Self::from_bytes(&bytes)
    }
}
