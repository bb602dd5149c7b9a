//! Model checkpoints: a directory holding `manifest.json` and `params.bin`.
//!
//! `params.bin` is every parameter's values as little-endian f64, tensors
//! concatenated in the order listed in the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: EncoderConfig,
    pub vocab_hash: String,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    model: &EncoderModel,
    dir: impl AsRef<Path>,
    vocab_hash: &str,
    step: u64,
    seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let named = model.weights.named();
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        step,
        seed,
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape(),
            })
            .collect(),
    };
    let mut blob = Vec::with_capacity(model.n_parameters() * 8);
    for (_, t) in &named {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, blob).map_err(|e| Error::io(&params_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} (this build reads {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Load a checkpoint. A vocabulary hash differing from `expected_vocab_hash`
/// is logged as a warning; the load still succeeds.
pub fn load_checkpoint(
    dir: impl AsRef<Path>,
    expected_vocab_hash: Option<&str>,
) -> Result<(EncoderModel, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if let Some(expected) = expected_vocab_hash {
        if expected != manifest.vocab_hash {
            log::warn!(
                "checkpoint {} was trained with vocabulary {} but {} is in use",
                dir.display(),
                manifest.vocab_hash,
                expected
            );
        }
    }
    let params_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    let expected: usize = manifest.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
    if blob.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, manifest declares {}",
            params_path.display(),
            blob.len(),
            expected * 8
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let [r, c] = entry.shape;
        let data: Vec<f64> = values.by_ref().take(r * c).collect();
        tensors.push(Tensor::new(r, c, data)?);
    }
    let model = EncoderModel::from_tensors(manifest.config.clone(), tensors)?;
    let names: Vec<String> = model.weights.named().into_iter().map(|(n, _)| n).collect();
    if names.iter().ne(manifest.tensors.iter().map(|t| &t.name)) {
        return Err(Error::Checkpoint("tensor names do not match the declared order".into()));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> EncoderModel {
        let cfg = EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            hidden_size: 4,
            ffn_size: 8,
            max_positions: 8,
            ..EncoderConfig::desk(6)
        };
        EncoderModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_checkpoint(&m, dir.path(), "abc", 17, 42).unwrap();
        let (back, manifest) = load_checkpoint(dir.path(), Some("abc")).unwrap();
        assert_eq!(manifest.step, 17);
        assert_eq!(manifest.seed, 42);
        for ((_, a), (_, b)) in m.weights.named().iter().zip(back.weights.named()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn vocab_mismatch_still_loads() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path(), "abc", 0, 0).unwrap();
        assert!(load_checkpoint(dir.path(), Some("different")).is_ok());
    }

    #[test]
    fn truncated_blob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path(), "abc", 0, 0).unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), None), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path(), "abc", 0, 0).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 99");
        fs::write(&p, text).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), None), Err(Error::Checkpoint(_))));
    }
}
