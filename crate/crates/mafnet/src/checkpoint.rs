//! Checkpoint directories.
//!
//! ```text
//! dir/manifest.json        run config echo, resolved model config, seed,
//!                          iteration, and one {name, shape, file} per parameter
//! dir/params/<name>.maft   one f32 tensor per parameter
//! ```
//!
//! Loading rebuilds the layout from the manifest's model config and checks
//! every name and shape before any tensor is accepted.

use std::path::Path;

use mafnet_core::model::{MafNet, ModelConfig};
use mafnet_core::params::ParamStore;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::maft;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS_DIR: &str = "params";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Relative to the checkpoint directory.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub config: RunConfig,
    pub model: ModelConfig,
    pub seed: u64,
    /// Optimizer updates applied to the stored parameters.
    pub iteration: u64,
    pub params: Vec<ParamEntry>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: MafNet,
    pub store: ParamStore<f32>,
}

fn file_name(name: &str) -> CliResult<String> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) {
        return Err(CliError::data(format!("parameter name {name:?} is not file-safe")));
    }
    Ok(format!("{PARAMS_DIR}/{name}.maft"))
}

pub fn save(dir: &Path, config: &RunConfig, model: &MafNet, store: &ParamStore<f32>, iteration: u64) -> CliResult<()> {
    let params_dir = dir.join(PARAMS_DIR);
    std::fs::create_dir_all(&params_dir).map_err(|e| CliError::io(&params_dir, e))?;
    let mut params = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        let file = file_name(name)?;
        maft::write(&dir.join(&file), t)?;
        params.push(ParamEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        config: config.clone(),
        model: model.config.clone(),
        seed: config.seed,
        iteration,
        params,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> CliResult<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT_VERSION {
        return Err(CliError::data(format!(
            "{}: unsupported checkpoint format {}",
            path.display(),
            m.format
        )));
    }
    Ok(m)
}

pub fn load(dir: &Path) -> CliResult<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let bad = |msg: String| CliError::data(format!("checkpoint {}: {msg}", dir.display()));
    manifest.model.validate().map_err(|e| bad(e.to_string()))?;
    let (model, mut store) = MafNet::init::<f32>(&manifest.model, manifest.seed)?;
    if manifest.params.len() != store.len() {
        return Err(bad(format!(
            "manifest lists {} parameters, the model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (entry, &id) in manifest.params.iter().zip(&ids) {
        let (name, expected) = (store.name(id), store.get(id).shape());
        if entry.name != name {
            return Err(bad(format!("expected parameter {name}, manifest has {}", entry.name)));
        }
        if entry.shape != expected {
            return Err(bad(format!(
                "{name}: manifest shape {:?}, model expects {:?}",
                entry.shape, expected
            )));
        }
    }
    for (entry, &id) in manifest.params.iter().zip(&ids) {
        let t = maft::read::<f32>(&dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "{}: file holds shape {:?}, manifest says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        store.set(id, t)?;
    }
    Ok(Checkpoint { manifest, model, store })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mafnet_core::Tensor;

    fn toy() -> (RunConfig, MafNet, ParamStore<f32>) {
        let cfg = RunConfig::default();
        let (model, store) = MafNet::init::<f32>(&cfg.model_config().unwrap(), 3).unwrap();
        (cfg, model, store)
    }

    #[test]
    fn save_load_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, model, store) = toy();
        save(dir.path(), &cfg, &model, &store, 17).unwrap();
        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.manifest.iteration, 17);
        assert_eq!(ck.model, model);
        for ((_, a, x), (_, b, y)) in store.iter().zip(ck.store.iter()) {
            assert_eq!(a, b);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, model, store) = toy();
        save(dir.path(), &cfg, &model, &store, 0).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.params[0].shape[0] += 1;
        std::fs::write(dir.path().join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        let err = load(dir.path()).err().unwrap();
        assert!(err.message.contains("manifest shape"), "{}", err.message);
    }

    #[test]
    fn tensor_file_must_match_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, model, store) = toy();
        save(dir.path(), &cfg, &model, &store, 0).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        maft::write(&dir.path().join(&m.params[1].file), &Tensor::<f32>::zeros([2, 2])).unwrap();
        let err = load(dir.path()).err().unwrap();
        assert!(err.message.contains("file holds shape"), "{}", err.message);
    }

    #[test]
    fn model_config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, model, store) = toy();
        save(dir.path(), &cfg, &model, &store, 0).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.model.mma.width = 16;
        std::fs::write(dir.path().join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
