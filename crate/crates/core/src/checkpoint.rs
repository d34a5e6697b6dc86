//! Bit-exact checkpoints: `step-<n>/{model.json, optimizer.json, config.toml, metrics.json}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::Moments;
use crate::params::{ParamStore, TensorRecord};
use crate::training::{Stage, TrainState};

pub const MODEL_FILE: &str = "model.json";
pub const OPTIMIZER_FILE: &str = "optimizer.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    config: ModelConfig,
    params: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentRecord {
    name: String,
    t: u64,
    m: TensorRecord,
    v: TensorRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerFile {
    stage: Stage,
    step: u64,
    epoch: u64,
    freeze_set: BTreeSet<String>,
    rng: ChaCha8Rng,
    best_validation: Option<f64>,
    moments: Vec<MomentRecord>,
}

pub fn step_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step-{step}"))
}

pub fn model_to_json(model: &Model) -> Result<String> {
    let file = ModelFile {
        config: model.config.clone(),
        params: model.params.to_records(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

pub fn model_from_json(text: &str) -> Result<Model> {
    let file: ModelFile = serde_json::from_str(text)?;
    Model::from_parts(file.config, ParamStore::from_records(file.params)?)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_model(dir: &Path) -> Result<Model> {
    model_from_json(&read(&dir.join(MODEL_FILE))?)
}

/// Writes a full training snapshot under `root/step-<state.step>/`, replacing
/// any previous snapshot of the same step. `extra` holds additional
/// `(file name, bytes)` entries. Files are staged in a sibling directory and
/// moved into place at the end.
pub fn save_checkpoint(
    root: &Path,
    state: &TrainState,
    config_text: &str,
    metrics: &serde_json::Value,
    extra: &[(&str, &[u8])],
) -> Result<PathBuf> {
    let final_dir = step_dir(root, state.step);
    let staging = root.join(format!(".step-{}.partial", state.step));
    let io = |ctx: &Path| {
        let ctx = ctx.display().to_string();
        move |e| Error::io(ctx, e)
    };
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(io(&staging))?;

    write_atomic(&staging.join(MODEL_FILE), model_to_json(&state.model)?.as_bytes())?;
    let moments = state
        .moments
        .iter()
        .map(|(name, mo)| MomentRecord {
            name: name.clone(),
            t: mo.t,
            m: TensorRecord::new(name, &[mo.m.len()], &mo.m),
            v: TensorRecord::new(name, &[mo.v.len()], &mo.v),
        })
        .collect();
    let opt = OptimizerFile {
        stage: state.stage,
        step: state.step,
        epoch: state.epoch,
        freeze_set: state.freeze_set.clone(),
        rng: state.rng.clone(),
        best_validation: state.best_validation,
        moments,
    };
    write_atomic(&staging.join(OPTIMIZER_FILE), (serde_json::to_string_pretty(&opt)? + "\n").as_bytes())?;
    write_atomic(&staging.join(CONFIG_FILE), config_text.as_bytes())?;
    write_atomic(&staging.join(METRICS_FILE), (serde_json::to_string_pretty(metrics)? + "\n").as_bytes())?;
    for (name, bytes) in extra {
        write_atomic(&staging.join(name), bytes)?;
    }

    if final_dir.exists() {
        fs::remove_dir_all(&final_dir).map_err(io(&final_dir))?;
    }
    fs::rename(&staging, &final_dir).map_err(io(&final_dir))?;
    Ok(final_dir)
}

pub struct Checkpoint {
    pub state: TrainState,
    pub config_text: String,
    pub metrics: serde_json::Value,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let model = load_model(dir)?;
    let opt: OptimizerFile = serde_json::from_str(&read(&dir.join(OPTIMIZER_FILE))?)?;
    let mut moments = BTreeMap::new();
    for r in opt.moments {
        let m = r.m.decode_data()?;
        let v = r.v.decode_data()?;
        let expect = model
            .params
            .get(&r.name)
            .ok_or_else(|| Error::Data(format!("moments for unknown parameter {}", r.name)))?
            .numel();
        if m.len() != expect || v.len() != expect {
            return Err(Error::Data(format!("moment size mismatch for {}", r.name)));
        }
        moments.insert(r.name, Moments { m, v, t: r.t });
    }
    let metrics_path = dir.join(METRICS_FILE);
    let metrics = if metrics_path.exists() {
        serde_json::from_str(&read(&metrics_path)?)?
    } else {
        serde_json::Value::Null
    };
    Ok(Checkpoint {
        state: TrainState {
            model,
            moments,
            stage: opt.stage,
            freeze_set: opt.freeze_set,
            step: opt.step,
            epoch: opt.epoch,
            rng: opt.rng,
            best_validation: opt.best_validation,
        },
        config_text: read(&dir.join(CONFIG_FILE))?,
        metrics,
    })
}

/// Highest-numbered `step-<n>` directory under `root`.
pub fn latest_checkpoint(root: &Path) -> Result<Option<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root.display().to_string(), e))?;
        let name = entry.file_name();
        let Some(n) = name.to_str().and_then(|s| s.strip_prefix("step-")).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}
