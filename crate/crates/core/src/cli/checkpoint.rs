//! Training checkpoints: a directory holding the run config, a key=value
//! manifest, and `SCNT` streams of the parameters and Adam moments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tensor::io::{decode_scnt_stream, write_scnt};
use crate::tensor::{Precision, Tensor};

use super::config::RunConfig;

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.scnt";
pub const ADAM_M_FILE: &str = "adam_m.scnt";
pub const ADAM_V_FILE: &str = "adam_v.scnt";
const FORMAT_VERSION: u32 = 1;

/// Where training stands: `step` optimizer steps taken in total, `epoch`
/// is the current epoch and `position` the number of its samples consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub position: usize,
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
    pub bundle: ModelBundle,
    pub adam: Adam,
}

fn tensor_stream(tensors: impl Iterator<Item = Tensor>) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    for t in tensors {
        write_scnt(&mut bytes, &t)?;
    }
    Ok(bytes)
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Writes (or overwrites) the checkpoint files in `dir`.
pub fn save_checkpoint(dir: &Path, config: &RunConfig, state: TrainState, bundle: &ModelBundle, adam: &Adam) -> Result<()> {
    fs::create_dir_all(dir)?;
    let store = &bundle.store;
    let mut manifest = String::new();
    writeln!(manifest, "format = {FORMAT_VERSION}").unwrap();
    writeln!(manifest, "step = {}\nepoch = {}\nposition = {}", state.step, state.epoch, state.position).unwrap();
    writeln!(manifest, "adam_step = {}", adam.step).unwrap();
    writeln!(manifest, "params = {}", store.len()).unwrap();
    for (id, p) in store.iter() {
        writeln!(manifest, "param.{} = {} {} {}", id.0, p.name, p.group.name(), shape_text(p.value.shape())).unwrap();
    }
    fs::write(dir.join(CONFIG_FILE), config.to_text())?;
    fs::write(dir.join(PARAMS_FILE), tensor_stream(store.iter().map(|(_, p)| p.value.clone()))?)?;
    fs::write(dir.join(ADAM_M_FILE), tensor_stream(adam.m.iter().cloned())?)?;
    fs::write(dir.join(ADAM_V_FILE), tensor_stream(adam.v.iter().cloned())?)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

fn read_stream(dir: &Path, file: &str, store: &ParamStore) -> Result<Vec<Tensor>> {
    let tensors = decode_scnt_stream(&fs::read(dir.join(file))?)?;
    if tensors.len() != store.len() {
        return Err(Error::format("checkpoint", format!("{file} holds {} tensors, model has {}", tensors.len(), store.len())));
    }
    for ((_, p), t) in store.iter().zip(&tensors) {
        if t.shape() != p.value.shape() {
            return Err(Error::format(
                "checkpoint",
                format!("{file}: {} has shape {:?}, model expects {:?}", p.name, t.shape(), p.value.shape()),
            ));
        }
    }
    Ok(tensors)
}

/// Rebuilds the model from the stored config and restores parameters and
/// optimizer state.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut meta = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("checkpoint", format!("manifest line without '=': {line:?}")))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    let num = |k: &str| -> Result<u64> {
        meta.get(k)
            .ok_or_else(|| Error::format("checkpoint", format!("manifest lacks {k}")))?
            .parse()
            .map_err(|_| Error::format("checkpoint", format!("manifest {k} is not an integer")))
    };
    if num("format")? != FORMAT_VERSION as u64 {
        return Err(Error::format("checkpoint", format!("unsupported format {}", num("format")?)));
    }
    let state = TrainState { step: num("step")?, epoch: num("epoch")? as usize, position: num("position")? as usize };

    let mut bundle = ModelBundle::new(config.model())?;
    for (id, p) in bundle.store.iter() {
        let entry = meta.get(&format!("param.{}", id.0)).map(String::as_str).unwrap_or("");
        if entry.split_whitespace().next() != Some(p.name.as_str()) {
            return Err(Error::format("checkpoint", format!("parameter {} is {entry:?}, model expects {}", id.0, p.name)));
        }
    }
    let params = read_stream(dir, PARAMS_FILE, &bundle.store)?;
    let m = read_stream(dir, ADAM_M_FILE, &bundle.store)?;
    let v = read_stream(dir, ADAM_V_FILE, &bundle.store)?;
    let ids: Vec<_> = bundle.store.iter().map(|(id, _)| id).collect();
    for (id, t) in ids.into_iter().zip(params) {
        bundle.store.set(id, t)?;
    }
    let adam = Adam { config: config.adam, precision: Precision::Single, step: num("adam_step")?, m, v };
    Ok(Checkpoint { config, state, bundle, adam })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ToyNetConfig;
    use crate::optim::AdamConfig;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.width = 16;
        cfg.height = 8;
        cfg.base_channels = 4;
        cfg
    }

    #[test]
    fn round_trip_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let bundle = ModelBundle::new(cfg.model()).unwrap();
        let mut adam = Adam::new(&bundle.store, AdamConfig::default(), Precision::Single);
        adam.step = 7;
        adam.m[0].data_mut()[0] = 0.25;
        let state = TrainState { step: 7, epoch: 1, position: 3 };
        save_checkpoint(dir.path(), &cfg, state, &bundle, &adam).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.state, state);
        assert_eq!(ck.adam.step, 7);
        assert_eq!(ck.adam.m[0].data()[0], 0.25);
        for ((_, a), (_, b)) in ck.bundle.store.iter().zip(bundle.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let bundle = ModelBundle::new(cfg.model()).unwrap();
        let adam = Adam::new(&bundle.store, AdamConfig::default(), Precision::Single);
        save_checkpoint(dir.path(), &cfg, TrainState::default(), &bundle, &adam).unwrap();
        let other = ModelBundle::new(ToyNetConfig { base_channels: 8, ..cfg.model() }).unwrap();
        fs::write(dir.path().join(PARAMS_FILE), tensor_stream(other.store.iter().map(|(_, p)| p.value.clone())).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
    }
}
