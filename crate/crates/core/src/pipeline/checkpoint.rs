//! On-disk checkpoints: one directory per component holding `params.bin`,
//! optionally `optim.bin`, and `meta.json`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use lrtts_nn::ParamStore;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{IoContext, Result, TtsError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub component: String,
    pub stage: u8,
    /// Optimizer updates applied over the component's lifetime.
    pub step: u64,
    /// Updates applied within `stage`.
    pub stage_step: u64,
    pub config_hash: String,
    pub vae_frozen: bool,
    pub clip_norm: f64,
    /// Architecture config needed to rebuild the model.
    pub model: Value,
    /// Adam time step; meaningless without `optim.bin`.
    pub adam_t: u64,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub optim: Option<ParamStore>,
}

fn write_store(path: &Path, store: &ParamStore) -> Result<()> {
    let f = File::create(path).at(path)?;
    let mut w = BufWriter::new(f);
    store.write_to(&mut w)?;
    w.flush().at(path)
}

fn read_store(path: &Path) -> Result<ParamStore> {
    let f = File::open(path).at(path)?;
    Ok(ParamStore::read_from(&mut BufReader::new(f))?)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        write_store(&dir.join("params.bin"), &self.params)?;
        let optim = dir.join("optim.bin");
        match &self.optim {
            Some(o) => write_store(&optim, o)?,
            None if optim.exists() => fs::remove_file(&optim).at(&optim)?,
            None => {}
        }
        let meta = dir.join("meta.json");
        fs::write(&meta, serde_json::to_string_pretty(&self.meta)?).at(&meta)
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join("meta.json").is_file()
    }

    /// Loads `dir`; a differing config hash is an error unless `force`.
    pub fn load(dir: &Path, expected_hash: &str, force: bool) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.is_file() {
            return Err(TtsError::Checkpoint(format!("no checkpoint at {}", dir.display())));
        }
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&meta_path).at(&meta_path)?)?;
        if meta.config_hash != expected_hash && !force {
            return Err(TtsError::Checkpoint(format!(
                "{} was written under config {} but the current config hashes to {}; rerun with --force to reuse it",
                dir.display(),
                short(&meta.config_hash),
                short(expected_hash)
            )));
        }
        let params = read_store(&dir.join("params.bin"))?;
        let optim_path = dir.join("optim.bin");
        let optim = if optim_path.is_file() { Some(read_store(&optim_path)?) } else { None };
        Ok(Self { meta, params, optim })
    }

    pub fn model<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.meta.model.clone())
            .map_err(|e| TtsError::Checkpoint(format!("{} model config: {e}", self.meta.component)))
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
