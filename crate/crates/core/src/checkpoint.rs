//! Parameter checkpoints: a `manifest.json` plus one little-endian float32
//! binary per named tensor, with the full configuration embedded.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use swm_autograd::{Float, ParamStore, Tensor};

use crate::config::Config;
use crate::data::write_atomically;
use crate::error::{Error, Result};
use crate::model::WorldModel;
use crate::tokenizer::{Tokenizer, TokenizerSpec};

const FORMAT: &str = "swm-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Tokenizer,
    WorldModel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    kind: CheckpointKind,
    step: u64,
    config: Config,
    params: Vec<Entry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub step: u64,
    pub config: Config,
    pub params: ParamStore<f32>,
}

pub fn save_params<F: Float>(path: &Path, kind: CheckpointKind, step: u64, config: &Config, params: &ParamStore<F>) -> Result<()> {
    let store: ParamStore<f32> = params.cast();
    let params: Vec<Entry> =
        store.iter().map(|(n, t)| Entry { name: n.to_string(), file: format!("{n}.bin"), shape: t.shape().to_vec() }).collect();
    let manifest = Manifest { format: FORMAT.into(), version: VERSION, kind, step, config: config.clone(), params };
    write_atomically(path, |dir| {
        let mp = dir.join("manifest.json");
        fs::write(&mp, serde_json::to_string_pretty(&manifest).expect("serializable")).map_err(|e| Error::io(&mp, e))?;
        for (e, (_, t)) in manifest.params.iter().zip(store.iter()) {
            let p = dir.join(&e.file);
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(&p, bytes).map_err(|err| Error::io(&p, err))?;
        }
        Ok(())
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mp = path.join("manifest.json");
    let text = fs::read_to_string(&mp).map_err(|e| Error::format(&mp, format!("missing or unreadable manifest: {e}")))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mp, format!("corrupt manifest: {e}")))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::format(&mp, format!("unsupported checkpoint `{}` version {}", m.format, m.version)));
    }
    let mut params = ParamStore::new();
    for e in &m.params {
        if e.file.contains('/') || e.file.contains('\\') {
            return Err(Error::format(&mp, format!("parameter `{}` points outside the checkpoint", e.name)));
        }
        if params.contains(&e.name) {
            return Err(Error::format(&mp, format!("parameter `{}` listed twice", e.name)));
        }
        let p = path.join(&e.file);
        let bytes = fs::read(&p).map_err(|err| Error::format(&p, format!("missing parameter `{}`: {err}", e.name)))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::format(&p, format!("parameter `{}` holds {} bytes, expected {}", e.name, bytes.len(), n * 4)));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.insert(e.name.clone(), Tensor::new(&e.shape, data));
    }
    m.config.validate().map_err(|e| Error::format(&mp, format!("embedded config is invalid: {e}")))?;
    Ok(Checkpoint { kind: m.kind, step: m.step, config: m.config, params })
}

impl Checkpoint {
    fn expect(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!("checkpoint holds a {:?}, expected a {kind:?}", self.kind)));
        }
        Ok(())
    }

    pub fn tokenizer<F: Float>(&self) -> Result<Tokenizer<F>> {
        self.expect(CheckpointKind::Tokenizer)?;
        Tokenizer::from_params(TokenizerSpec::from_config(&self.config), self.params.cast())
    }

    pub fn world_model<F: Float>(&self) -> Result<WorldModel<F>> {
        self.expect(CheckpointKind::WorldModel)?;
        WorldModel::from_params(self.config.model.clone(), self.config.schedule.clone(), self.params.cast())
    }
}

pub fn save_tokenizer<F: Float>(path: &Path, tok: &Tokenizer<F>, config: &Config) -> Result<()> {
    save_params(path, CheckpointKind::Tokenizer, tok.steps, config, &tok.params)
}

pub fn save_world_model<F: Float>(path: &Path, model: &WorldModel<F>, step: u64, config: &Config) -> Result<()> {
    save_params(path, CheckpointKind::WorldModel, step, config, &model.params)
}
