//! Experiment configuration and the train / eval / ablate / export
//! drivers behind the command-line tool.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Progress};
use crate::codebook::{usage_stats, Codebook, UsageCounter};
use crate::data::{Batcher, DataConfig, ImageSet};
use crate::dual::QuantizerConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{self, CodebookUsage, UtilizationReport};
use crate::model::{Model, ModelConfig, StepReport, TrainConfig, TrainState};
use crate::tensor::Tensor;

pub const THREADS_ENV: &str = "DUALVQ_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidFeatures {
    /// Images average-pooled to `pool`×`pool`, flattened.
    Pixels,
    /// Flattened quantized latents of the input and of its reconstruction.
    Latents,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub features: FidFeatures,
    pub pool: usize,
    /// Images per forward pass. Results do not depend on it.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            features: FidFeatures::Pixels,
            pool: 8,
            batch: 8,
        }
    }
}

/// One row of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub name: String,
    pub split_global: usize,
    pub split_local: usize,
    pub transformer_on: bool,
    pub codebook_total: usize,
    /// Marks the configuration adopted for regular runs.
    #[serde(default)]
    pub default: bool,
}

impl GridEntry {
    pub fn global_label(&self) -> String {
        let kind = if self.transformer_on { "T" } else { "S" };
        format!("{kind}-{}", self.split_global)
    }

    pub fn local_label(&self) -> String {
        format!("S-{}", self.split_local)
    }

    /// `base` with this entry's quantizer settings, writing under
    /// `base.out_dir/<name>`.
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        cfg.grid.clear();
        cfg.out_dir = base.out_dir.join(&self.name);
        let q = &mut cfg.quantizer;
        q.split_global = self.split_global;
        q.split_local = self.split_local;
        q.transformer_on = self.transformer_on;
        q.codebook_total = self.codebook_total;
        q.global_size = None;
        q.local_size = None;
        q.transformer.embed_dim = None;
        cfg.validate()
            .map_err(|e| Error::Config(format!("grid entry {:?}: {e}", self.name)))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub quantizer: QuantizerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub grid: Vec<GridEntry>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            eval_every: 100,
            checkpoint_every: 500,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            quantizer: QuantizerConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            grid: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every section and fills derived fields.
    pub fn validate(&mut self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.quantizer.validate(self.model.latent_channels)?;
        self.data.validate()?;
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("eval_every and checkpoint_every must be positive".into()));
        }
        if self.eval.batch == 0 || self.eval.pool == 0 || self.model.image_size % self.eval.pool != 0 {
            return Err(Error::Config(format!(
                "eval.pool {} must divide image_size {} and eval.batch must be positive",
                self.eval.pool, self.model.image_size
            )));
        }
        let mut names = std::collections::BTreeSet::new();
        for entry in &self.grid {
            if !names.insert(entry.name.as_str()) {
                return Err(Error::Config(format!("duplicate grid entry name {:?}", entry.name)));
            }
            entry.apply(self)?;
        }
        if self.grid.iter().filter(|e| e.default).count() > 1 {
            return Err(Error::Config("more than one grid entry is marked default".into()));
        }
        Ok(())
    }

    /// Grid entry marked `default`.
    pub fn default_entry(&self) -> Option<&GridEntry> {
        self.grid.iter().find(|e| e.default)
    }

    /// SHA-256 of the configuration, ignoring the step budget, the output
    /// directory and the grid, so a run may be extended or moved and still
    /// resume.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.train.steps = 0;
        c.out_dir = PathBuf::new();
        c.grid.clear();
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn build_state(&self) -> Result<TrainState> {
        let model = Model::new(&self.model, &self.quantizer, self.seed)?;
        TrainState::new(&self.train, model)
    }

    pub fn dataset(&self) -> Result<ImageSet> {
        self.data.load(self.seed, self.model.image_size)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Validation or test metrics for one model snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub images: usize,
    /// Mean absolute error; the validation reconstruction loss.
    pub l1: f64,
    pub l2: f64,
    /// Over the whole set's mean squared error, peak 1.
    #[serde(with = "metrics::serde_inf")]
    pub psnr: f64,
    /// Gaussian Fréchet distance on [`EvalConfig::features`]; not
    /// Inception-FID.
    pub fid_star: f64,
    pub perplexity_g: f64,
    pub active_g: f64,
    pub perplexity_l: Option<f64>,
    pub active_l: Option<f64>,
    /// Active entries over all codebooks divided by total entries.
    pub active_total: f64,
}

fn pooled(images: &Tensor, pool: usize) -> Vec<f64> {
    let s = images.shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    let (ph, pw) = (h / pool, w / pool);
    let norm = (ph * pw) as f64;
    let d = images.data();
    let mut out = Vec::with_capacity(b * 3 * pool * pool);
    for n in 0..b {
        for c in 0..3 {
            for i in 0..pool {
                for j in 0..pool {
                    let mut acc = 0.0;
                    for y in i * ph..(i + 1) * ph {
                        let row = ((n * 3 + c) * h + y) * w;
                        acc += d[row + j * pw..row + (j + 1) * pw].iter().sum::<f64>();
                    }
                    out.push(acc / norm);
                }
            }
        }
    }
    out
}

/// Evaluates `set` image by image in order; every per-image output is the
/// same for any `eval.batch`, so the metrics are too.
pub fn evaluate(model: &Model, set: &ImageSet, eval: &EvalConfig, step: u64) -> Result<EvalReport> {
    if set.len() < 2 {
        return Err(Error::invalid("evaluate", "need at least two images"));
    }
    let (kg, kl) = model.quantizer.sizes();
    let mut usage_g = UsageCounter::new(kg);
    let mut usage_l = UsageCounter::new(kl);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let (mut fx, mut fy) = (Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(eval.batch) {
        let x = set.stack(chunk)?;
        let r = model.reconstruct(&x)?;
        usage_g.record(&r.global_indices);
        if let Some(l) = &r.local_indices {
            usage_l.record(l);
        }
        match eval.features {
            FidFeatures::Pixels => {
                fx.extend(pooled(&x, eval.pool));
                fy.extend(pooled(&r.x_hat, eval.pool));
            }
            FidFeatures::Latents => {
                fx.extend_from_slice(r.z_q.data());
                fy.extend_from_slice(model.reconstruct(&r.x_hat)?.z_q.data());
            }
        }
        xs.extend_from_slice(x.data());
        ys.extend_from_slice(r.x_hat.data());
    }
    let dim = fx.len() / set.len();
    let l2 = metrics::l2_metric(&xs, &ys)?;
    let sg = usage_stats(usage_g.counts());
    let sl = (kl > 0).then(|| usage_stats(usage_l.counts()));
    let active: usize = [usage_g.counts(), usage_l.counts()]
        .iter()
        .map(|c| c.iter().filter(|&&n| n > 0).count())
        .sum();
    Ok(EvalReport {
        step,
        images: set.len(),
        l1: metrics::l1_metric(&xs, &ys)?,
        l2,
        psnr: metrics::psnr_from_mse(l2, 1.0),
        fid_star: metrics::frechet_features(&fx, &fy, dim)?,
        perplexity_g: sg.perplexity,
        active_g: sg.active_fraction,
        perplexity_l: sl.map(|s| s.perplexity),
        active_l: sl.map(|s| s.active_fraction),
        active_total: active as f64 / (kg + kl) as f64,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    write_atomic(path, |w| {
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        csv.write_record(header)?;
        for r in rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    })
}

pub const TRAIN_COLUMNS: [&str; 10] = [
    "step",
    "l_rec",
    "l_quant_g",
    "l_quant_l",
    "lambda",
    "d_loss",
    "perplexity_g",
    "perplexity_l",
    "active_g",
    "active_l",
];

pub const EVAL_COLUMNS: [&str; 11] = [
    "step",
    "images",
    "l1",
    "l2",
    "psnr",
    "fid_star",
    "perplexity_g",
    "active_g",
    "perplexity_l",
    "active_l",
    "active_total",
];

/// Data rows of a previously written log whose step passes `keep`.
fn kept_rows(path: &Path, keep: &dyn Fn(u64) -> bool) -> Result<Vec<csv::StringRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let step: u64 = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "row without a step"))?;
        if keep(step) {
            rows.push(rec);
        }
    }
    Ok(rows)
}

struct Log<T> {
    path: PathBuf,
    header: &'static [&'static str],
    kept: Vec<csv::StringRecord>,
    rows: Vec<T>,
}

impl<T: Serialize> Log<T> {
    /// Starts a log; when resuming, earlier rows passing `keep` are retained.
    fn new(path: PathBuf, header: &'static [&'static str], keep: Option<&dyn Fn(u64) -> bool>) -> Result<Self> {
        let kept = match keep {
            Some(k) => kept_rows(&path, k)?,
            None => Vec::new(),
        };
        Ok(Self {
            path,
            header,
            kept,
            rows: Vec::new(),
        })
    }

    fn flush(&self) -> Result<()> {
        write_atomic(&self.path, |w| {
            let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
            csv.write_record(self.header)?;
            for r in &self.kept {
                csv.write_record(r)?;
            }
            for r in &self.rows {
                csv.serialize(r)?;
            }
            csv.flush()?;
            Ok(())
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoint directory to continue from.
    pub resume: Option<PathBuf>,
    /// Resume even when the configuration hash differs.
    pub force: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub step: u64,
    pub last_eval: Option<EvalReport>,
    pub utilization: UtilizationReport,
}

pub fn utilization_report(model: &Model, config_hash: &str, step: u64) -> UtilizationReport {
    let q = &model.quantizer;
    let mut books = vec![CodebookUsage::from_counts("global", q.global.cumulative.counts().to_vec())];
    if let Some(l) = &q.local {
        books.push(CodebookUsage::from_counts("local", l.cumulative.counts().to_vec()));
    }
    UtilizationReport::new(config_hash, step, books)
}

pub fn checkpoints_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints")
}

/// Trains for `config.train.steps` total steps, logging to
/// `train.csv`/`eval.csv` and checkpointing under `checkpoints/`.
pub fn run_train(config: &ExperimentConfig, opts: &TrainOptions) -> Result<RunSummary> {
    let mut config = config.clone();
    config.validate()?;
    let hash = config.hash();
    let out = config.out_dir.clone();
    let (train_set, val_set, _) = config.dataset()?.split();

    let (mut state, mut progress) = match &opts.resume {
        Some(dir) => {
            let ckpt = checkpoint::load(dir)?;
            if ckpt.config_hash != hash && !opts.force {
                return Err(Error::ResumeMismatch {
                    checkpoint: ckpt.config_hash,
                    current: hash,
                });
            }
            let mut state = ckpt.state;
            state.config = config.train.clone();
            state.gen_opt.config = config.train.adam();
            state.disc_opt.config = config.train.adam();
            (state, ckpt.progress)
        }
        None => (
            config.build_state()?,
            Progress {
                batcher: Batcher::new(config.seed, train_set.len(), config.train.batch)?,
                best_val: None,
            },
        ),
    };
    let resume_step = opts.resume.as_ref().map(|_| state.step);
    std::fs::create_dir_all(&out)?;
    let echo = config.to_toml()?;
    write_atomic(&out.join("config.toml"), |w| Ok(std::io::Write::write_all(w, echo.as_bytes())?))?;

    // An interrupted run also evaluated at its last step; that row is off
    // the cadence and an uninterrupted run would not have it.
    let every = config.eval_every;
    let keep_train = resume_step.map(|r| move |s: u64| s <= r);
    let keep_eval = resume_step.map(|r| move |s: u64| s <= r && s % every == 0);
    let mut train_log: Log<StepReport> = Log::new(
        out.join("train.csv"),
        &TRAIN_COLUMNS,
        keep_train.as_ref().map(|k| k as &dyn Fn(u64) -> bool),
    )?;
    let mut eval_log: Log<EvalReport> = Log::new(
        out.join("eval.csv"),
        &EVAL_COLUMNS,
        keep_eval.as_ref().map(|k| k as &dyn Fn(u64) -> bool),
    )?;
    let ckpts = checkpoints_dir(&out);
    let mut last_eval = None;
    let total = config.train.steps;
    log::info!("training {} from step {} to {total}", out.display(), state.step);

    while state.step < total {
        let (idx, fresh) = progress.batcher.next_indices();
        if fresh {
            state.model.quantizer.reset_epoch_usage();
        }
        let batch = train_set.stack(&idx)?;
        let report = match state.training_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                train_log.flush()?;
                eval_log.flush()?;
                return Err(e);
            }
        };
        train_log.rows.push(report);
        let step = state.step;
        let at_end = step == total;
        let on_cadence = step % every == 0;
        if on_cadence || at_end {
            let ev = evaluate(&state.model, &val_set, &config.eval, step)?;
            log::info!("step {step}: val l1 {:.5} psnr {:.3} fid* {:.4}", ev.l1, ev.psnr, ev.fid_star);
            // best is tracked on the cadence so resumed runs pick the same one;
            // a run too short for any cadence eval still gets one
            let candidate = on_cadence || progress.best_val.is_none();
            if candidate && progress.best_val.is_none_or(|(best, _)| ev.l1 < best) {
                progress.best_val = Some((ev.l1, step));
                checkpoint::save(&ckpts.join("best"), &config, &hash, &state, &progress)?;
            }
            eval_log.rows.push(ev.clone());
            last_eval = Some(ev);
            train_log.flush()?;
            eval_log.flush()?;
        }
        if step % config.checkpoint_every == 0 || at_end {
            train_log.flush()?;
            eval_log.flush()?;
            checkpoint::save(&ckpts.join("latest"), &config, &hash, &state, &progress)?;
        }
    }
    checkpoint::save(&ckpts.join("final"), &config, &hash, &state, &progress)?;
    train_log.flush()?;
    eval_log.flush()?;
    let utilization = utilization_report(&state.model, &hash, state.step);
    metrics::emit_utilization(&utilization, &out.join("utilization.json"), &out.join("utilization.csv"))?;
    Ok(RunSummary {
        out_dir: out,
        step: state.step,
        last_eval,
        utilization,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Val,
    Test,
}

/// Metrics file written by [`run_eval`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub schema_version: u32,
    pub config_hash: String,
    pub split: Split,
    pub fid_features: FidFeatures,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Evaluates a checkpoint on a split of its own dataset and, when `out` is
/// given, writes the metrics JSON there.
pub fn run_eval(checkpoint_dir: &Path, split: Split, out: Option<&Path>) -> Result<EvalFile> {
    let ckpt = checkpoint::load(checkpoint_dir)?;
    let (_, val, test) = ckpt.config.dataset()?.split();
    let set = match split {
        Split::Val => val,
        Split::Test => test,
    };
    let report = evaluate(&ckpt.state.model, &set, &ckpt.config.eval, ckpt.state.step)?;
    let file = EvalFile {
        schema_version: metrics::REPORT_SCHEMA_VERSION,
        config_hash: ckpt.config_hash,
        split,
        fid_features: ckpt.config.eval.features,
        report,
    };
    if let Some(path) = out {
        write_atomic(path, |w| Ok(serde_json::to_writer_pretty(w, &file)?))?;
    }
    Ok(file)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub global: String,
    pub local: String,
    pub codebook_total: usize,
    pub fid_star: f64,
    #[serde(with = "metrics::serde_inf")]
    pub psnr: f64,
    pub l1: f64,
    pub l2: f64,
}

pub const ABLATION_COLUMNS: [&str; 8] = ["name", "global", "local", "codebook_total", "fid_star", "psnr", "l1", "l2"];

/// Parallel width for grid runs: `DUALVQ_THREADS` when set, otherwise the
/// available cores.
pub fn grid_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn ablation_row(entry: &GridEntry, base: &ExperimentConfig) -> Result<AblationRow> {
    let cfg = entry.apply(base)?;
    let summary = run_train(&cfg, &TrainOptions::default())?;
    let ev = run_eval(
        &checkpoints_dir(&summary.out_dir).join("final"),
        Split::Test,
        Some(&summary.out_dir.join("test_metrics.json")),
    )?;
    Ok(AblationRow {
        name: entry.name.clone(),
        global: entry.global_label(),
        local: entry.local_label(),
        codebook_total: entry.codebook_total,
        fid_star: ev.report.fid_star,
        psnr: ev.report.psnr,
        l1: ev.report.l1,
        l2: ev.report.l2,
    })
}

/// Trains every grid entry (up to `threads` at once), evaluates each final
/// checkpoint on the test split and writes `ablation.csv` in grid order.
pub fn run_ablation(config: &ExperimentConfig, threads: usize) -> Result<Vec<AblationRow>> {
    let mut config = config.clone();
    config.validate()?;
    if config.grid.is_empty() {
        return Err(Error::Config("no grid entries".into()));
    }
    let n = config.grid.len();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRow>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let row = ablation_row(&config.grid[i], &config);
                results.lock().expect("no panics while holding the lock")[i] = Some(row);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every entry ran"))
        .collect::<Result<Vec<_>>>()?;
    write_csv(&config.out_dir.join("ablation.csv"), &rows, &ABLATION_COLUMNS)?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Global,
    Local,
}

/// Writes one codebook of a checkpoint (entries plus cumulative usage).
pub fn export_codebook(checkpoint_dir: &Path, which: Which, path: &Path) -> Result<Codebook> {
    let ckpt = checkpoint::load(checkpoint_dir)?;
    let key = match which {
        Which::Global => "global_cb",
        Which::Local => "local_cb",
    };
    let cb = checkpoint::codebook_of(&ckpt.state.model, key)?;
    cb.save(path)?;
    Ok(cb)
}
