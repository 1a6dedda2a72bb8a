//! Checkpoint directories: `checkpoint.json` plus one raw little-endian
//! `f32` parameter file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_f32le, write_f32le};
use crate::params::Init;

use super::config::TrainConfig;
use super::model::{ModelBundle, ModelConfig, Role};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.f32";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
    init: Init,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    role: Role,
    model: ModelConfig,
    widths: [usize; 3],
    t_common: usize,
    seed: u64,
    #[serde(default)]
    train: Option<TrainConfig>,
    params_file: String,
    value_count: usize,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub train: Option<TrainConfig>,
}

pub fn save_checkpoint(bundle: &ModelBundle, train: Option<&TrainConfig>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut values = Vec::with_capacity(bundle.params.num_values());
    let mut entries = Vec::with_capacity(bundle.params.len());
    for (name, p) in bundle.params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            offset: values.len(),
            trainable: p.trainable,
            init: p.init,
        });
        values.extend_from_slice(p.value.data());
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        role: bundle.role,
        model: bundle.config,
        widths: bundle.widths,
        t_common: bundle.t_common,
        seed: bundle.seed,
        train: train.cloned(),
        params_file: PARAMS_FILE.to_string(),
        value_count: values.len(),
        params: entries,
    };
    write_f32le(&dir.join(PARAMS_FILE), &values)?;
    let path = dir.join(CHECKPOINT_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(CHECKPOINT_FILE, e.to_string()))?;
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::format(
                "version",
                format!("unsupported checkpoint version {v}, expected {CHECKPOINT_VERSION}"),
            ))
        }
        None => return Err(Error::format("version", "missing or not an integer")),
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::format(CHECKPOINT_FILE, e.to_string()))?;
    let values = read_f32le(&dir.join(&m.params_file))?;
    if values.len() != m.value_count {
        return Err(Error::format(
            "params_file",
            format!("holds {} values, manifest declares {}", values.len(), m.value_count),
        ));
    }
    let mut bundle = ModelBundle::new(m.role, m.model, m.widths, m.t_common, m.seed)
        .map_err(|e| Error::format("model", e.to_string()))?;
    if bundle.params.len() != m.params.len() {
        return Err(Error::format(
            "params",
            format!("{} entries, architecture has {}", m.params.len(), bundle.params.len()),
        ));
    }
    for (k, (e, (name, p))) in m.params.iter().zip(bundle.params.iter_mut()).enumerate() {
        if e.name != name {
            return Err(Error::format(format!("params[{k}].name"), format!("expected {name}, got {}", e.name)));
        }
        if e.shape != p.value.shape() {
            return Err(Error::format(
                format!("params[{k}].shape"),
                format!("expected {:?}, got {:?}", p.value.shape(), e.shape),
            ));
        }
        let end = e.offset + p.value.len();
        if end > values.len() {
            return Err(Error::format(format!("params[{k}].offset"), "runs past the parameter file"));
        }
        p.value.data_mut().copy_from_slice(&values[e.offset..end]);
        p.trainable = e.trainable;
        p.init = e.init;
    }
    Ok(Checkpoint { bundle, train: m.train })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> ModelBundle {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            n_blocks: 2,
            ..Default::default()
        };
        let mut b = ModelBundle::new(Role::Teacher, cfg, [2, 3, 4], 5, 11).unwrap();
        for (i, (_, p)) in b.params.iter_mut().enumerate() {
            p.value.data_mut().iter_mut().for_each(|v| *v += i as f32 * 0.01);
        }
        b.freeze();
        b
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        save_checkpoint(&b, Some(&TrainConfig::default()), dir.path()).unwrap();
        let c = load_checkpoint(dir.path()).unwrap();
        assert!(c.bundle.params.bit_eq(&b.params));
        assert!(c.bundle.is_frozen());
        assert_eq!(c.bundle.role, Role::Teacher);
        assert_eq!(c.train, Some(TrainConfig::default()));
    }

    #[test]
    fn version_mismatch_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&bundle(), None, dir.path()).unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
        fs::write(&p, &bytes).unwrap();
        let mp = dir.path().join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&mp).unwrap().replace("\"version\": 1", "\"version\": 7");
        fs::write(&mp, text).unwrap();
        match load_checkpoint(dir.path()) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "version"),
            other => panic!("{other:?}"),
        }
    }
}
