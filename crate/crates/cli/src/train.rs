//! Toy training runs driven by a JSON configuration file.
//!
//! Language model:
//! `{"text": "...", "model": {LmConfig}, "train": {"lr", "steps"}, "target_loss": 0.1}`
//! (`model.vocab` and `model.max_len` may be omitted and are then derived
//! from the text).
//!
//! Similarity: `{"model": {SimilarityConfig}, "train": {...},
//! "data": {"count", "noise", "seed"} | "dataset": "dir", "target_accuracy": 1.0}`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use msac::apps::lm::{train_lm, CharVocab, LmConfig, ToyLm};
use msac::apps::similarity::{accuracy, train_similarity, SimilarityConfig, SimilarityDataset, SimilarityModel};
use msac::apps::train::{Flow, TrainConfig};
use msac::io::save_params;
use msac::{Error, Tensor};

use crate::{failed, usage, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Lm,
    Similarity,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmRun {
    pub text: String,
    pub model: LmModel,
    pub train: TrainConfig,
    /// Stop once the mean cross-entropy falls below this value.
    pub target_loss: Option<f64>,
}

/// [`LmConfig`] with the text-derived sizes optional.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmModel {
    #[serde(default)]
    pub vocab: Option<usize>,
    pub d: usize,
    pub d_a: usize,
    pub d_o: usize,
    pub heads: usize,
    pub scales: Vec<[usize; 2]>,
    #[serde(default)]
    pub layers: Option<usize>,
    pub parallel_conv: bool,
    pub bias: bool,
    #[serde(default)]
    pub max_len: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub count: usize,
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityRun {
    pub model: SimilarityConfig,
    pub train: TrainConfig,
    pub data: Option<SyntheticData>,
    /// Directory written by `SimilarityDataset::save`.
    pub dataset: Option<PathBuf>,
    /// Stop once training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub task: &'static str,
    pub steps_run: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_met: Option<bool>,
    pub out: PathBuf,
}

fn read_config<C: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<C> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

impl LmModel {
    fn resolve(&self, vocab: usize, len: usize, seed: Option<u64>) -> CliResult<LmConfig> {
        if let Some(v) = self.vocab.filter(|&v| v != vocab) {
            return Err(usage(format!(
                "model.vocab is {v} but the text has {vocab} distinct characters"
            )));
        }
        Ok(LmConfig {
            vocab,
            d: self.d,
            d_a: self.d_a,
            d_o: self.d_o,
            heads: self.heads,
            scales: self.scales.clone(),
            layers: self.layers.unwrap_or(1),
            parallel_conv: self.parallel_conv,
            bias: self.bias,
            max_len: self.max_len.unwrap_or(len),
            seed: seed.unwrap_or(self.seed),
        })
    }
}

/// `step,loss` lines flushed as training proceeds, so a run that aborts
/// leaves the curve up to the failure on disk.
struct LossLog {
    w: csv::Writer<BufWriter<File>>,
    error: Option<csv::Error>,
}

impl LossLog {
    fn create(path: &Path) -> CliResult<Self> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path).map_err(failed)?));
        w.write_record(["step", "loss"]).map_err(failed)?;
        w.flush().map_err(failed)?;
        Ok(Self { w, error: None })
    }

    fn push(&mut self, step: usize, loss: f64) {
        if self.error.is_some() {
            return;
        }
        let res = self
            .w
            .write_record([step.to_string(), format!("{loss:?}")])
            .and_then(|_| self.w.flush().map_err(csv::Error::from));
        if let Err(e) = res {
            self.error = Some(e);
        }
    }

    fn finish(mut self) -> CliResult<()> {
        if let Some(e) = self.error.take() {
            return Err(failed(e));
        }
        self.w.flush().map_err(failed)
    }
}

fn train_error(e: Error) -> CliError {
    match e {
        Error::Diverged { step, .. } => failed(format!("training diverged at step {step}; partial loss.csv kept")),
        Error::Invalid { .. } | Error::Shape { .. } => usage(e),
        e => failed(e),
    }
}

fn write_summary(out: &Path, s: &Summary) -> CliResult<()> {
    let mut f = File::create(out.join("summary.json")).map_err(failed)?;
    writeln!(f, "{}", serde_json::to_string_pretty(s).map_err(failed)?).map_err(failed)
}

/// Reads the config, trains, and writes `loss.csv`, `params/` and
/// `summary.json` under `out`. `seed`, when given, replaces the model seed.
pub fn run(task: Task, config: &Path, out: &Path, seed: Option<u64>) -> CliResult<Summary> {
    match task {
        Task::Lm => run_lm(&read_config(config)?, out, seed),
        Task::Similarity => run_similarity(&read_config(config)?, config, out, seed),
    }
}

pub fn run_lm(run: &LmRun, out: &Path, seed: Option<u64>) -> CliResult<Summary> {
    let vocab = CharVocab::from_text(&run.text);
    let ids = vocab.encode(&run.text).map_err(usage)?;
    if ids.len() < 2 {
        return Err(usage("text must have at least two characters"));
    }
    let cfg = run.model.resolve(vocab.len(), ids.len() - 1, seed)?;
    let mut model = ToyLm::<Tensor<f64>>::init(&cfg).map_err(usage)?;
    fs::create_dir_all(out).map_err(failed)?;
    let mut log = LossLog::create(&out.join("loss.csv"))?;
    let target = run.target_loss;
    let result = train_lm(&mut model, &ids, &run.train, |s, loss, _| {
        log.push(s, loss);
        match target {
            Some(t) if loss < t => Flow::Stop,
            _ => Flow::Continue,
        }
    });
    log.finish()?;
    let losses = result.map_err(train_error)?;
    save_params(out.join("params"), &model).map_err(failed)?;
    let last = *losses.last().expect("at least one step");
    let summary = Summary {
        task: "lm",
        steps_run: losses.len(),
        first_loss: losses[0],
        final_loss: last,
        final_accuracy: None,
        target_met: target.map(|t| last < t),
        out: out.to_path_buf(),
    };
    write_summary(out, &summary)?;
    Ok(summary)
}

pub fn run_similarity(run: &SimilarityRun, config: &Path, out: &Path, seed: Option<u64>) -> CliResult<Summary> {
    let m = &run.model;
    let data = match (&run.data, &run.dataset) {
        (Some(s), None) => {
            SimilarityDataset::<f64>::synthetic(s.count, m.rows, m.cols, m.d, s.noise, s.seed).map_err(usage)?
        }
        (None, Some(dir)) => {
            let dir = config.parent().unwrap_or(Path::new(".")).join(dir);
            SimilarityDataset::load(&dir).map_err(|e| usage(format!("cannot load dataset {}: {e}", dir.display())))?
        }
        _ => return Err(usage("exactly one of `data` or `dataset` is required")),
    };
    if data.is_empty() {
        return Err(usage("dataset is empty"));
    }
    let mut cfg = m.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut model = SimilarityModel::<Tensor<f64>>::init(&cfg).map_err(usage)?;
    fs::create_dir_all(out).map_err(failed)?;
    let mut log = LossLog::create(&out.join("loss.csv"))?;
    let target = run.target_accuracy;
    let mut eval_error = None;
    let result = train_similarity(&mut model, &data, &run.train, |s, loss, model| {
        log.push(s, loss);
        let Some(t) = target else {
            return Flow::Continue;
        };
        match accuracy(&data, model) {
            Ok(a) if a >= t => Flow::Stop,
            Ok(_) => Flow::Continue,
            Err(e) => {
                eval_error = Some(e);
                Flow::Stop
            }
        }
    });
    log.finish()?;
    let losses = result.map_err(train_error)?;
    if let Some(e) = eval_error {
        return Err(failed(e));
    }
    save_params(out.join("params"), &model).map_err(failed)?;
    let acc = accuracy(&data, &model).map_err(failed)?;
    let summary = Summary {
        task: "similarity",
        steps_run: losses.len(),
        first_loss: losses[0],
        final_loss: *losses.last().expect("at least one step"),
        final_accuracy: Some(acc),
        target_met: target.map(|t| acc >= t),
        out: out.to_path_buf(),
    };
    write_summary(out, &summary)?;
    Ok(summary)
}
