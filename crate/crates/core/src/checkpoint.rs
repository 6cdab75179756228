//! Checkpoint directories: a JSON manifest plus one tensor dump per
//! parameter and optimizer moment, and codebook dumps for the two
//! codebooks.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/global_cb.dvqc, <dir>/local_cb.dvqc
//! <dir>/params/<name>.dvqt
//! <dir>/adam/{generator,discriminator}/<name>.{m,v}.dvqt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, UsageCounter};
use crate::data::Batcher;
use crate::dual::CodebookSlot;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::model::{Model, TrainState};
use crate::params::{Adam, ParamId};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// Loop state that is not part of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub batcher: Batcher,
    /// Lowest validation reconstruction loss seen so far and its step.
    pub best_val: Option<(f64, u64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct UsageState {
    epoch: Vec<u64>,
    cumulative: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MomentFiles {
    m: String,
    v: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerState {
    steps: u64,
    moments: BTreeMap<String, MomentFiles>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config_hash: String,
    config: ExperimentConfig,
    step: u64,
    progress: Progress,
    /// Parameter name to file, in registration order of the store.
    tensors: Vec<(String, String)>,
    usage: BTreeMap<String, UsageState>,
    generator: OptimizerState,
    discriminator: OptimizerState,
}

/// Everything needed to continue or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub state: TrainState,
    pub progress: Progress,
}

fn codebook_file(name: &str) -> String {
    format!("{name}.dvqc")
}

fn slots(model: &Model) -> Vec<(&'static str, &CodebookSlot)> {
    let q = &model.quantizer;
    let mut v = vec![("global_cb", &q.global)];
    if let Some(l) = &q.local {
        v.push(("local_cb", l));
    }
    v
}

/// Codebook dump (entries plus cumulative usage) for `global_cb` or
/// `local_cb`.
pub fn codebook_of(model: &Model, key: &str) -> Result<Codebook> {
    let (_, slot) = slots(model)
        .into_iter()
        .find(|(k, _)| *k == key)
        .ok_or_else(|| Error::invalid("codebook", format!("model has no codebook {key:?}")))?;
    Codebook::with_usage(model.store.value(slot.param).clone(), slot.cumulative.clone())
}

fn save_optimizer(dir: &Path, label: &str, opt: &Adam, model: &Model) -> Result<OptimizerState> {
    let mut moments = BTreeMap::new();
    for (id, p) in model.store.iter() {
        if let Some((m, v)) = opt.moments(id) {
            let shape = p.value.shape();
            let files = MomentFiles {
                m: format!("adam/{label}/{}.m.dvqt", p.name),
                v: format!("adam/{label}/{}.v.dvqt", p.name),
            };
            Tensor::new(shape, m.to_vec())?.save(&dir.join(&files.m))?;
            Tensor::new(shape, v.to_vec())?.save(&dir.join(&files.v))?;
            moments.insert(p.name.clone(), files);
        }
    }
    Ok(OptimizerState {
        steps: opt.steps(),
        moments,
    })
}

fn tmp_sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut s = dir.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes a checkpoint into `dir`, replacing any previous one only after the
/// new directory is complete.
pub fn save(dir: &Path, config: &ExperimentConfig, config_hash: &str, state: &TrainState, progress: &Progress) -> Result<()> {
    let tmp = tmp_sibling(dir, ".tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let model = &state.model;
    let codebook_params: BTreeMap<ParamId, &str> = slots(model).into_iter().map(|(k, s)| (s.param, k)).collect();
    let mut tensors = Vec::new();
    for (id, p) in model.store.iter() {
        let file = match codebook_params.get(&id) {
            Some(key) => {
                let file = codebook_file(key);
                codebook_of(model, key)?.save(&tmp.join(&file))?;
                file
            }
            None => {
                let file = format!("params/{}.dvqt", p.name);
                p.value.save(&tmp.join(&file))?;
                file
            }
        };
        tensors.push((p.name.clone(), file));
    }
    let usage = slots(model)
        .into_iter()
        .map(|(k, s)| {
            (
                k.to_string(),
                UsageState {
                    epoch: s.epoch.counts().to_vec(),
                    cumulative: s.cumulative.counts().to_vec(),
                },
            )
        })
        .collect();
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        config: config.clone(),
        step: state.step,
        progress: progress.clone(),
        tensors,
        usage,
        generator: save_optimizer(&tmp, "generator", &state.gen_opt, model)?,
        discriminator: save_optimizer(&tmp, "discriminator", &state.disc_opt, model)?,
    };
    crate::io::write_atomic(&tmp.join(MANIFEST), |w| Ok(serde_json::to_writer_pretty(w, &manifest)?))?;

    let old = tmp_sibling(dir, ".old");
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    if dir.exists() {
        fs::rename(dir, &old)?;
    }
    fs::rename(&tmp, dir)?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    Ok(())
}

fn restore_optimizer(dir: &Path, saved: &OptimizerState, opt: &mut Adam, model: &Model) -> Result<()> {
    let mut moments = vec![None; model.store.len()];
    for (name, files) in &saved.moments {
        let id = model
            .store
            .find(name)
            .ok_or_else(|| Error::format(dir, format!("optimizer moment for unknown parameter {name}")))?;
        let m = Tensor::load(&dir.join(&files.m))?;
        let v = Tensor::load(&dir.join(&files.v))?;
        let shape = model.store.value(id).shape();
        if m.shape() != shape || v.shape() != shape {
            return Err(Error::format(dir, format!("moment shape mismatch for {name}")));
        }
        moments[id.index()] = Some((m.into_data(), v.into_data()));
    }
    opt.restore(saved.steps, moments)
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let file = fs::File::open(&path).map_err(|e| Error::format(&path, format!("cannot open manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_reader(std::io::BufReader::new(file))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported checkpoint version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// Rebuilds the model from the saved configuration, then overwrites every
/// parameter, counter and optimizer moment.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let config = manifest.config.clone();
    let mut state = config.build_state()?;
    let model = &mut state.model;
    if manifest.tensors.len() != model.store.len() {
        return Err(Error::format(
            dir,
            format!(
                "checkpoint has {} tensors, configuration builds {}",
                manifest.tensors.len(),
                model.store.len()
            ),
        ));
    }
    for (name, file) in &manifest.tensors {
        let id = model
            .store
            .find(name)
            .ok_or_else(|| Error::format(dir, format!("unknown parameter {name}")))?;
        let value = if file.ends_with(".dvqc") {
            Codebook::load(&dir.join(file))?.entries().clone()
        } else {
            Tensor::load(&dir.join(file))?
        };
        model.store.set(id, value)?;
    }
    let q = &mut model.quantizer;
    let mut slots: Vec<(&str, &mut CodebookSlot)> = vec![("global_cb", &mut q.global)];
    if let Some(l) = &mut q.local {
        slots.push(("local_cb", l));
    }
    for (key, slot) in slots {
        let saved = manifest
            .usage
            .get(key)
            .ok_or_else(|| Error::format(dir, format!("missing usage for {key}")))?;
        if saved.epoch.len() != slot.epoch.counts().len() || saved.cumulative.len() != slot.epoch.counts().len() {
            return Err(Error::format(dir, format!("usage length mismatch for {key}")));
        }
        slot.epoch = UsageCounter::from_counts(saved.epoch.clone());
        slot.cumulative = UsageCounter::from_counts(saved.cumulative.clone());
    }
    let model = &state.model;
    let mut gen_opt = state.gen_opt.clone();
    let mut disc_opt = state.disc_opt.clone();
    restore_optimizer(dir, &manifest.generator, &mut gen_opt, model)?;
    restore_optimizer(dir, &manifest.discriminator, &mut disc_opt, model)?;
    state.gen_opt = gen_opt;
    state.disc_opt = disc_opt;
    state.step = manifest.step;
    Ok(Checkpoint {
        config,
        config_hash: manifest.config_hash,
        state,
        progress: manifest.progress,
    })
}
