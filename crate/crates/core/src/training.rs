//! Training loop and experiment campaigns: Adam at 1e-4, cross-entropy,
//! batch size 8, 100 epochs, reduce-on-plateau on validation accuracy
//! (factor 0.5, patience 5, min lr 1e-6), checkpoint on best validation
//! accuracy, five-seed runs per architecture with incremental, resumable
//! result persistence.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use tch::nn::{self, OptimizerConfig};
use tch::{Device, Kind, Tensor};

use crate::datamodule::{load_batch, make_batches};
use crate::error::{Error, Result};
use crate::evaluation::{
    confusion, labels_from_scores, macro_metrics, roc_auc, ConfusionMatrix, MetricReport,
};
use crate::manifest::{Manifest, Split};
use crate::models::{build_model, load_checkpoint, Arch, Model, ModelConfig};
use crate::stats::RunMatrix;

/// Reduce-on-plateau settings; monitor is validation accuracy, mode max.
#[derive(Debug, Clone, Copy)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.5, patience: 5, min_lr: 1e-6 }
    }
}

/// Training hyperparameters. Defaults are the tuned values: Adam 1e-4,
/// batch 8, 100 epochs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub plateau: PlateauConfig,
    /// Global gradient-norm clip; `None` disables (fidelity runs).
    pub grad_clip: Option<f64>,
    /// Stop once training accuracy reaches this level (after the epoch's
    /// validation pass). A desk-scale convenience, off by default.
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            batch_size: 8,
            epochs: 100,
            seed: 0,
            plateau: PlateauConfig::default(),
            grad_clip: Some(5.0),
            stop_at_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.initial_lr <= 0.0 {
            return Err(Error::Config("initial_lr must be positive".into()));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.plateau.patience < 1 {
            return Err(Error::Config("plateau patience must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.plateau.factor) {
            return Err(Error::Config("plateau factor must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Reduce-on-plateau state machine (mode max, strict improvement).
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    lr: f64,
    best: f64,
    epochs_since_improve: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig, initial_lr: f64) -> PlateauScheduler {
        PlateauScheduler { cfg, lr: initial_lr, best: f64::NEG_INFINITY, epochs_since_improve: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one epoch's monitored value; returns the new learning rate if a
    /// reduction fired. The stall counter resets after each reduction.
    pub fn observe(&mut self, metric: f64) -> Option<f64> {
        if metric > self.best {
            self.best = metric;
            self.epochs_since_improve = 0;
            return None;
        }
        self.epochs_since_improve += 1;
        if self.epochs_since_improve > self.cfg.patience {
            self.epochs_since_improve = 0;
            let reduced = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
            if reduced < self.lr {
                self.lr = reduced;
                return Some(reduced);
            }
        }
        None
    }
}

/// One epoch's bookkeeping row.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

/// Per-epoch curves plus the best-epoch summary (earliest epoch attaining
/// the maximum validation accuracy; epochs are 1-indexed).
#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn best_epoch(&self) -> Option<usize> {
        let best = self.best_val_accuracy()?;
        self.epochs.iter().find(|e| e.val_accuracy == best).map(|e| e.epoch)
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_accuracy).fold(None, |acc, v| {
            Some(acc.map_or(v, |a: f64| a.max(v)))
        })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "# format_version=1").map_err(|e| Error::io(path, e))?;
        writeln!(f, "epoch,train_loss,train_accuracy,val_loss,val_accuracy,lr")
            .map_err(|e| Error::io(path, e))?;
        for e in &self.epochs {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy, e.lr
            )
            .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn batch_to_tensors(volumes: &[ndarray::Array3<f32>], labels: &[u8]) -> Result<(Tensor, Tensor)> {
    let mut tensors = Vec::with_capacity(volumes.len());
    for v in volumes {
        let (h, w, d) = v.dim();
        let flat: Vec<f32> = v.iter().copied().collect();
        tensors.push(Tensor::from_slice(&flat).view([1, 1, h as i64, w as i64, d as i64]));
    }
    let xs = Tensor::cat(&tensors, 0);
    let ys = Tensor::from_slice(&labels.iter().map(|&l| l as i64).collect::<Vec<_>>());
    Ok((xs, ys))
}

/// Class-1 scores and true labels for one split under eval-mode inference.
fn score_split(model: &Model, manifest: &Manifest, split: Split, batch_size: usize) -> Result<(Vec<u8>, Vec<f64>, f64)> {
    let batches = make_batches(manifest, split, batch_size, false, 0, 0)?;
    let mut y_true = Vec::new();
    let mut scores = Vec::new();
    let mut loss_sum = 0.0;
    let mut n = 0usize;
    for batch in &batches {
        let (volumes, labels) = load_batch(batch)?;
        let (xs, ys) = batch_to_tensors(&volumes, &labels)?;
        let logits = tch::no_grad(|| model.forward_t(&xs, false));
        let loss = logits.cross_entropy_for_logits(&ys);
        loss_sum += f64::try_from(loss).unwrap_or(f64::NAN) * labels.len() as f64;
        let probs = logits.softmax(1, Kind::Float);
        let p1 = probs.select(1, 1);
        for (i, &label) in labels.iter().enumerate() {
            y_true.push(label);
            scores.push(p1.double_value(&[i as i64]));
        }
        n += labels.len();
    }
    if n == 0 {
        return Err(Error::Data(format!("split {split} has no records to evaluate")));
    }
    Ok((y_true, scores, loss_sum / n as f64))
}

fn accuracy_from(y_true: &[u8], scores: &[f64]) -> f64 {
    let pred = labels_from_scores(scores);
    let correct = y_true.iter().zip(&pred).filter(|(a, b)| a == b).count();
    correct as f64 / y_true.len() as f64
}

/// Train a model on the manifest's train split, validating each epoch and
/// checkpointing to `out_dir/best.ckpt` whenever validation accuracy
/// strictly improves. Also writes `out_dir/log.csv`.
pub fn train(
    model: &mut Model,
    manifest: &Manifest,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<(TrainingLog, PathBuf)> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join("best.ckpt");

    if manifest.split_records(Split::Train).is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if manifest.split_records(Split::Val).is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }

    tch::manual_seed(cfg.seed as i64);
    let mut opt = nn::Adam::default().build(&model.vs, cfg.initial_lr)?;
    let mut scheduler = PlateauScheduler::new(cfg.plateau, cfg.initial_lr);
    let mut log = TrainingLog::default();
    let mut best_val = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(manifest, Split::Train, cfg.batch_size, true, cfg.seed, epoch)?;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in &batches {
            let (volumes, labels) = load_batch(batch)?;
            let (xs, ys) = batch_to_tensors(&volumes, &labels)?;
            let logits = model.forward_t(&xs, true);
            let loss = logits.cross_entropy_for_logits(&ys);
            let loss_val = f64::try_from(&loss).unwrap_or(f64::NAN);
            if !loss_val.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss: loss_val });
            }
            opt.zero_grad();
            loss.backward();
            if let Some(max_norm) = cfg.grad_clip {
                opt.clip_grad_norm(max_norm);
            }
            opt.step();

            loss_sum += loss_val * labels.len() as f64;
            let p1 = tch::no_grad(|| logits.softmax(1, Kind::Float).select(1, 1));
            for (i, &label) in labels.iter().enumerate() {
                let pred = u8::from(p1.double_value(&[i as i64]) > 0.5);
                correct += usize::from(pred == label);
            }
            seen += labels.len();
        }
        let train_loss = loss_sum / seen as f64;
        let train_accuracy = correct as f64 / seen as f64;

        let (val_true, val_scores, val_loss) =
            score_split(model, manifest, Split::Val, cfg.batch_size)?;
        let val_accuracy = accuracy_from(&val_true, &val_scores);

        if val_accuracy > best_val {
            best_val = val_accuracy;
            model.save_checkpoint(&ckpt_path)?;
        }
        if let Some(new_lr) = scheduler.observe(val_accuracy) {
            opt.set_lr(new_lr);
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
            lr: scheduler.lr(),
        });
        if cfg.stop_at_train_accuracy.is_some_and(|t| train_accuracy >= t) {
            break;
        }
    }

    log.save_csv(out_dir.join("log.csv"))?;
    Ok((log, ckpt_path))
}

/// Everything evaluation needs downstream: the metric suite plus the raw
/// labels/scores for ROC plotting.
pub struct EvalOutput {
    pub report: MetricReport,
    pub cm: ConfusionMatrix,
    pub y_true: Vec<u8>,
    pub scores: Vec<f64>,
}

/// Eval-mode metrics for a model on one split. AUC is omitted when the
/// split holds a single class.
pub fn evaluate_model(
    model: &Model,
    manifest: &Manifest,
    split: Split,
    batch_size: usize,
) -> Result<EvalOutput> {
    let (y_true, scores, _) = score_split(model, manifest, split, batch_size)?;
    let pred = labels_from_scores(&scores);
    let cm = confusion(&y_true, &pred)?;
    let mut report = macro_metrics(&cm);
    report.auc = roc_auc(&y_true, &scores).ok().map(|(_, auc)| auc);
    Ok(EvalOutput { report, cm, y_true, scores })
}

/// Reload a checkpoint and evaluate it on one split.
pub fn evaluate_checkpoint(
    ckpt: impl AsRef<Path>,
    manifest: &Manifest,
    split: Split,
    batch_size: usize,
) -> Result<EvalOutput> {
    let model = load_checkpoint(ckpt, Device::Cpu)?;
    evaluate_model(&model, manifest, split, batch_size)
}

/// One (architecture, seed) campaign cell.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: String,
    pub seed: u64,
    /// `None` when the run failed (for example, diverged).
    pub metrics: Option<MetricReport>,
    pub checkpoint: Option<PathBuf>,
    pub error: Option<String>,
}

/// Campaign settings: which architectures, which seeds, and the shared
/// model/training parameters.
#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub archs: Vec<Arch>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub input_shape: (i64, i64, i64),
    pub width_multiplier: f64,
}

impl CampaignConfig {
    pub fn new(archs: Vec<Arch>) -> CampaignConfig {
        CampaignConfig {
            archs,
            seeds: vec![0, 1, 2, 3, 4],
            train: TrainConfig::default(),
            input_shape: (128, 128, 64),
            width_multiplier: 1.0,
        }
    }

    fn model_config(&self, arch: Arch) -> ModelConfig {
        ModelConfig::new(arch)
            .with_input_shape(self.input_shape)
            .with_width_multiplier(self.width_multiplier)
    }
}

const RESULTS_HEADER: &str =
    "model,seed,status,accuracy,auc,precision_macro,recall_macro,f1_macro,checkpoint";

fn result_csv_row(r: &RunResult) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    match &r.metrics {
        Some(m) => format!(
            "{},{},ok,{},{},{},{},{},{}",
            r.model,
            r.seed,
            m.accuracy,
            fmt(m.auc),
            m.precision_macro,
            m.recall_macro,
            m.f1_macro,
            r.checkpoint.as_ref().map_or(String::new(), |p| p.display().to_string()),
        ),
        None => format!("{},{},failed,,,,,,", r.model, r.seed),
    }
}

/// Parse a results CSV written by `run_campaign`.
pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<RunResult>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() || line == RESULTS_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Format(format!("bad results row in {}: {line}", path.display())));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad {what} in results row: {line}")))
        };
        let seed = fields[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad seed in results row: {line}")))?;
        let metrics = if fields[2] == "ok" {
            Some(MetricReport {
                accuracy: parse(fields[3], "accuracy")?,
                auc: if fields[4].is_empty() { None } else { Some(parse(fields[4], "auc")?) },
                precision_macro: parse(fields[5], "precision")?,
                recall_macro: parse(fields[6], "recall")?,
                f1_macro: parse(fields[7], "f1")?,
            })
        } else {
            None
        };
        out.push(RunResult {
            model: fields[0].to_string(),
            seed,
            metrics,
            checkpoint: (!fields[8].is_empty()).then(|| PathBuf::from(fields[8])),
            error: None,
        });
    }
    Ok(out)
}

/// Run every (architecture, seed) cell, appending each finished row to
/// `out_dir/results.csv` so a crashed campaign resumes by skipping rows
/// already present. Diverged runs are recorded as failed cells and the
/// campaign continues. Returns the full result set and how many cells were
/// actually trained in this invocation.
pub fn run_campaign(
    manifest: &Manifest,
    cfg: &CampaignConfig,
    out_dir: impl AsRef<Path>,
    mut progress: impl FnMut(&str, u64, &RunResult),
) -> Result<(Vec<RunResult>, usize)> {
    cfg.train.validate()?;
    if cfg.archs.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("campaign needs at least one arch and one seed".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results_path = out_dir.join("results.csv");

    let mut existing = if results_path.exists() {
        load_results(&results_path)?
    } else {
        let mut f = File::create(&results_path).map_err(|e| Error::io(&results_path, e))?;
        writeln!(f, "# format_version=1").map_err(|e| Error::io(&results_path, e))?;
        writeln!(f, "{RESULTS_HEADER}").map_err(|e| Error::io(&results_path, e))?;
        Vec::new()
    };

    let mut newly_run = 0usize;
    for &arch in &cfg.archs {
        for &seed in &cfg.seeds {
            if existing.iter().any(|r| r.model == arch.name() && r.seed == seed) {
                continue;
            }
            let run_dir = out_dir.join(arch.name()).join(format!("seed{seed}"));
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed;
            let result = match run_cell(manifest, cfg, arch, &train_cfg, &run_dir) {
                Ok((metrics, ckpt)) => RunResult {
                    model: arch.name().to_string(),
                    seed,
                    metrics: Some(metrics),
                    checkpoint: Some(ckpt),
                    error: None,
                },
                Err(err @ Error::TrainingDiverged { .. }) => RunResult {
                    model: arch.name().to_string(),
                    seed,
                    metrics: None,
                    checkpoint: None,
                    error: Some(err.to_string()),
                },
                Err(other) => return Err(other),
            };
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(&results_path)
                .map_err(|e| Error::io(&results_path, e))?;
            writeln!(f, "{}", result_csv_row(&result)).map_err(|e| Error::io(&results_path, e))?;
            progress(arch.name(), seed, &result);
            newly_run += 1;
            existing.push(result);
        }
    }
    Ok((existing, newly_run))
}

fn run_cell(
    manifest: &Manifest,
    cfg: &CampaignConfig,
    arch: Arch,
    train_cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<(MetricReport, PathBuf)> {
    let model_cfg = cfg.model_config(arch);
    let mut model = build_model(&model_cfg, Device::Cpu, train_cfg.seed)?;
    let (_log, ckpt) = train(&mut model, manifest, train_cfg, run_dir)?;
    let eval = evaluate_checkpoint(&ckpt, manifest, Split::Test, train_cfg.batch_size)?;
    Ok((eval.report, ckpt))
}

/// Assemble the per-seed value matrix for one metric from campaign results,
/// for the statistics module. Fails if any model is missing a seed's value
/// (runs must be pairable across models).
pub fn results_to_run_matrix(
    results: &[RunResult],
    metric: &str,
) -> Result<RunMatrix> {
    let pick = |m: &MetricReport| -> Option<f64> {
        match metric {
            "accuracy" => Some(m.accuracy),
            "auc" => m.auc,
            "precision_macro" => Some(m.precision_macro),
            "recall_macro" => Some(m.recall_macro),
            "f1_macro" => Some(m.f1_macro),
            _ => None,
        }
    };
    if !["accuracy", "auc", "precision_macro", "recall_macro", "f1_macro"].contains(&metric) {
        return Err(Error::Config(format!("unknown metric '{metric}'")));
    }

    let mut models: Vec<String> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    for r in results {
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
    }
    seeds.sort_unstable();
    let mut values = Vec::with_capacity(models.len());
    for model in &models {
        let mut row = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            let cell = results
                .iter()
                .find(|r| &r.model == model && r.seed == seed)
                .and_then(|r| r.metrics.as_ref())
                .and_then(pick)
                .ok_or_else(|| {
                    Error::StatDegenerate(format!(
                        "model {model} seed {seed} has no usable {metric} value"
                    ))
                })?;
            row.push(cell);
        }
        values.push(row);
    }
    RunMatrix::new(models, seeds, values)
}

/// Pick the best run for summary reporting: highest test accuracy, ties
/// broken by AUC.
pub fn best_run<'a>(results: &'a [RunResult], model: &str) -> Option<&'a RunResult> {
    results
        .iter()
        .filter(|r| r.model == model && r.metrics.is_some())
        .max_by(|a, b| {
            let (ma, mb) = (a.metrics.as_ref().unwrap(), b.metrics.as_ref().unwrap());
            ma.accuracy
                .total_cmp(&mb.accuracy)
                .then(ma.auc.unwrap_or(0.0).total_cmp(&mb.auc.unwrap_or(0.0)))
        })
}
