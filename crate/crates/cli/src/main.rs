//! `pas3d`: command-line front end for the 3D MRI PAS classification
//! pipeline. Subcommands cover the full workflow: ingest DICOM series,
//! preprocess volumes, split and augment the dataset, generate synthetic
//! phantoms, train single runs or multi-seed campaigns, evaluate
//! checkpoints, and produce comparison statistics and summary reports.
//!
//! Exit codes: 0 success, 1 domain error (the message names the failing
//! case or file), 2 usage error.

mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use pas3d_core::datamodule::{
    materialize_augmented, oversample_minority, save_aug_sidecar, stratified_split,
    AugmentationSpec, SplitSpec,
};
use pas3d_core::dicom::convert_series_to_nifti;
use pas3d_core::error::{Error, Result};
use pas3d_core::evaluation::{aggregate_runs, emit_roc_plot, Aggregate};
use pas3d_core::manifest::{CaseRecord, Manifest, Split as SplitAssignment};
use pas3d_core::models::{build_model, Arch, ModelConfig};
use pas3d_core::nifti::write_nifti;
use pas3d_core::preprocess::preprocess_case;
use pas3d_core::stats::compare_models;
use pas3d_core::synthdata::{generate_dataset, SynthSpec};
use pas3d_core::training::{
    self, evaluate_checkpoint, load_results, results_to_run_matrix, run_campaign, CampaignConfig,
    EvalOutput,
};

use config::{parse_shape, RunSettings};

#[derive(Parser)]
#[command(name = "pas3d", version, about = "3D MRI PAS classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert per-case DICOM series directories to NIfTI and build a manifest
    Ingest(IngestArgs),
    /// Resize to the target shape and normalize intensities to [0, 1]
    Preprocess(PreprocessArgs),
    /// Assign patient-disjoint stratified train/val/test splits
    Split(SplitArgs),
    /// Oversample the minority class with geometric augmentation
    Augment(AugmentArgs),
    /// Generate a synthetic phantom dataset
    Synth(SynthArgs),
    /// Train a single model
    Train(TrainArgs),
    /// Train a grid of architectures and seeds
    Campaign(CampaignArgs),
    /// Evaluate a checkpoint on one split
    Evaluate(EvaluateArgs),
    /// Pairwise statistical comparison of campaign results
    Compare(CompareArgs),
    /// Aggregate campaign results into a best (mean +/- sd) table
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Directory holding one subdirectory of DICOM slices per case
    #[arg(long)]
    input: PathBuf,
    /// CSV with header `case_id,patient_id,label` naming each case directory
    #[arg(long)]
    labels: PathBuf,
    /// Where converted NIfTI volumes are written
    #[arg(long)]
    out_dir: PathBuf,
    /// Output manifest path
    #[arg(long)]
    manifest: PathBuf,
    /// Regenerate outputs that already exist
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Target shape as HxWxD
    #[arg(long, default_value = "128x128x64")]
    target: String,
    /// Updated manifest path (defaults to <out-dir>/manifest.csv)
    #[arg(long)]
    out_manifest: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.70)]
    train: f64,
    #[arg(long, default_value_t = 0.10)]
    val: f64,
    #[arg(long, default_value_t = 0.20)]
    test: f64,
    /// Output manifest path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where augmented volumes are written
    #[arg(long)]
    out_dir: PathBuf,
    /// Output manifest path
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of normal (label 0) cases
    #[arg(long)]
    normal: usize,
    /// Number of PAS (label 1) cases
    #[arg(long)]
    pas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Phantom shape as HxWxD
    #[arg(long, default_value = "64x64x32")]
    size: String,
    #[arg(long, default_value_t = 1)]
    scans_per_patient: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_arch)]
    arch: Arch,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// key = value config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    width_multiplier: Option<f64>,
    /// Model input shape as HxWxD
    #[arg(long)]
    input_shape: Option<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CampaignArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated architecture names
    #[arg(long)]
    archs: String,
    /// Comma-separated seeds, or an inclusive range like 0..4
    #[arg(long, default_value = "0..4")]
    seeds: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    width_multiplier: Option<f64>,
    #[arg(long)]
    input_shape: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report CSV path
    #[arg(long)]
    out: PathBuf,
    /// Also emit an ROC curve as SVG (plus a companion CSV) at this path
    #[arg(long)]
    roc: Option<PathBuf>,
    /// Seed recorded in the report row
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// Campaign results CSV
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, default_value = "accuracy")]
    metric: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Pairwise comparison CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Campaign results CSV
    #[arg(long)]
    runs: PathBuf,
    /// Optional CSV output; the table always prints to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    Arch::parse(s).map_err(|e| e.to_string())
}

/// Timestamped machine-parsable progress line.
fn log_line(msg: &str) {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    println!("ts={ts} msg=\"{msg}\"");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Split(a) => cmd_split(a),
        Command::Augment(a) => cmd_augment(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Campaign(a) => cmd_campaign(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// True when `path` exists and `force` is off; logs the skip.
fn skip_existing(path: &Path, force: bool) -> bool {
    if !force && path.exists() {
        log_line(&format!("{} exists; skipping (use --force to regenerate)", path.display()));
        return true;
    }
    false
}

fn read_labels(path: &Path) -> Result<Vec<(String, String, u8)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if i == 0 && line == "case_id,patient_id,label" {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "{}: expected 'case_id,patient_id,label', got '{line}'",
                path.display()
            )));
        }
        let label: u8 = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("bad label '{}' for case {}", fields[2], fields[0])))?;
        rows.push((fields[0].to_string(), fields[1].to_string(), label));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no label rows", path.display())));
    }
    Ok(rows)
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    if skip_existing(&a.manifest, a.force) {
        return Ok(());
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut records = Vec::new();
    for (case_id, patient_id, label) in read_labels(&a.labels)? {
        let series_dir = a.input.join(&case_id);
        if !series_dir.is_dir() {
            return Err(Error::Data(format!(
                "case {case_id}: series directory {} not found",
                series_dir.display()
            )));
        }
        let out = a.out_dir.join(format!("{case_id}.nii"));
        convert_series_to_nifti(&series_dir, &out)?;
        records.push(CaseRecord::new(case_id, patient_id, out, label)?);
    }
    let n = records.len();
    Manifest::new(records, 0)?.save(&a.manifest)?;
    log_line(&format!("ingested {n} cases into {}", a.out_dir.display()));
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let out_manifest = a.out_manifest.unwrap_or_else(|| a.out_dir.join("manifest.csv"));
    if skip_existing(&out_manifest, a.force) {
        return Ok(());
    }
    let (h, w, d) = parse_shape(&a.target)?;
    let target = (h as usize, w as usize, d as usize);
    let mut manifest = Manifest::load(&a.manifest)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut new_paths = Vec::new();
    for rec in manifest.records() {
        let v = preprocess_case(rec, target)?;
        let out = a.out_dir.join(format!("{}.nii", rec.case_id));
        write_nifti(&v, &out)?;
        new_paths.push(out);
    }
    let mut it = new_paths.into_iter();
    manifest.update(|r| r.path = it.next().expect("one path per record"))?;
    manifest.save(&out_manifest)?;
    log_line(&format!("preprocessed {} cases to {target:?}", manifest.len()));
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let spec = SplitSpec { train: a.train, val: a.val, test: a.test, seed: a.seed };
    let assigned = stratified_split(&manifest, &spec)?;
    for split in [SplitAssignment::Train, SplitAssignment::Val, SplitAssignment::Test] {
        let [n0, n1] = assigned.counts(split);
        log_line(&format!("{split}: {} cases ({n0} normal, {n1} PAS)", n0 + n1));
    }
    assigned.save(&a.out)?;
    Ok(())
}

fn cmd_augment(a: AugmentArgs) -> Result<()> {
    if skip_existing(&a.out, a.force) {
        return Ok(());
    }
    let manifest = Manifest::load(&a.manifest)?;
    let spec = AugmentationSpec::standard(a.seed);
    let plan = oversample_minority(&manifest, &spec, &a.out_dir)?;
    materialize_augmented(&plan)?;
    save_aug_sidecar(&plan.records, a.out_dir.join("augmentations.csv"))?;
    plan.manifest.save(&a.out)?;
    let [n0, n1] = plan.manifest.counts(SplitAssignment::Train);
    log_line(&format!(
        "augmented {} new cases; training set now {n0} normal / {n1} PAS",
        plan.records.len()
    ));
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let manifest_path = a.out_dir.join("manifest.csv");
    if skip_existing(&manifest_path, a.force) {
        return Ok(());
    }
    let (h, w, d) = parse_shape(&a.size)?;
    let spec = SynthSpec {
        n_normal: a.normal,
        n_pas: a.pas,
        size: (h as usize, w as usize, d as usize),
        seed: a.seed,
        scans_per_patient: a.scans_per_patient,
        ..Default::default()
    };
    let manifest = generate_dataset(&spec, &a.out_dir)?;
    manifest.save(&manifest_path)?;
    log_line(&format!(
        "generated {} phantoms ({} normal, {} PAS) in {}",
        manifest.len(),
        a.normal,
        a.pas,
        a.out_dir.display()
    ));
    Ok(())
}

fn settings_from(
    config: Option<&Path>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    width_multiplier: Option<f64>,
    input_shape: Option<&str>,
    seed: Option<u64>,
) -> Result<RunSettings> {
    let mut s = match config {
        Some(path) => RunSettings::from_file(path)?,
        None => RunSettings::default(),
    };
    if let Some(v) = epochs {
        s.train.epochs = v;
    }
    if let Some(v) = batch_size {
        s.train.batch_size = v;
    }
    if let Some(v) = lr {
        s.train.initial_lr = v;
    }
    if let Some(v) = width_multiplier {
        s.width_multiplier = v;
    }
    if let Some(v) = input_shape {
        s.input_shape = parse_shape(v)?;
    }
    if let Some(v) = seed {
        s.train.seed = v;
    }
    Ok(s)
}

const REPORT_HEADER: &str = "model,seed,accuracy,auc,precision_macro,recall_macro,f1_macro";

fn write_report_row(path: &Path, model: &str, seed: u64, eval: &EvalOutput) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "# format_version=1").map_err(|e| Error::io(path, e))?;
    writeln!(f, "{REPORT_HEADER}").map_err(|e| Error::io(path, e))?;
    let m = &eval.report;
    writeln!(
        f,
        "{model},{seed},{},{},{},{},{}",
        m.accuracy,
        m.auc.map_or(String::new(), |v| v.to_string()),
        m.precision_macro,
        m.recall_macro,
        m.f1_macro
    )
    .map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let result_path = a.out_dir.join("result.csv");
    if skip_existing(&result_path, a.force) {
        return Ok(());
    }
    let s = settings_from(
        a.config.as_deref(),
        a.epochs,
        a.batch_size,
        a.lr,
        a.width_multiplier,
        a.input_shape.as_deref(),
        Some(a.seed),
    )?;
    let manifest = Manifest::load(&a.manifest)?;
    let mut model_cfg = ModelConfig::new(a.arch)
        .with_input_shape(s.input_shape)
        .with_width_multiplier(s.width_multiplier);
    if let Some(d) = s.dropout {
        model_cfg = model_cfg.with_dropout(d);
    }
    let mut model = build_model(&model_cfg, pas3d_core::Device::Cpu, a.seed)?;
    log_line(&format!(
        "training {} seed {} ({} trainable parameters)",
        a.arch,
        a.seed,
        model.count_parameters()
    ));
    let (log, ckpt) = training::train(&mut model, &manifest, &s.train, &a.out_dir)?;
    log_line(&format!(
        "finished {} epochs; best val accuracy {:.4} at epoch {}",
        log.epochs.len(),
        log.best_val_accuracy().unwrap_or(f64::NAN),
        log.best_epoch().unwrap_or(0)
    ));
    let eval = evaluate_checkpoint(&ckpt, &manifest, SplitAssignment::Test, s.train.batch_size)?;
    write_report_row(&result_path, a.arch.name(), a.seed, &eval)?;
    log_line(&format!("test accuracy {:.4}", eval.report.accuracy));
    Ok(())
}

/// Parse `0,1,2` or an inclusive `0..4` range.
fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed list '{s}'; use 0,1,2 or 0..4"));
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
        if hi < lo {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

fn cmd_campaign(a: CampaignArgs) -> Result<()> {
    let archs: Vec<Arch> =
        a.archs.split(',').map(|s| Arch::parse(s.trim())).collect::<Result<_>>()?;
    let seeds = parse_seeds(&a.seeds)?;
    let s = settings_from(
        a.config.as_deref(),
        a.epochs,
        a.batch_size,
        a.lr,
        a.width_multiplier,
        a.input_shape.as_deref(),
        None,
    )?;
    let manifest = Manifest::load(&a.manifest)?;
    let mut cfg = CampaignConfig::new(archs);
    cfg.seeds = seeds;
    cfg.train = s.train;
    cfg.input_shape = s.input_shape;
    cfg.width_multiplier = s.width_multiplier;
    let (results, trained) = run_campaign(&manifest, &cfg, &a.out_dir, |arch, seed, r| {
        match &r.metrics {
            Some(m) => log_line(&format!(
                "{arch} seed {seed}: test accuracy {:.4}",
                m.accuracy
            )),
            None => log_line(&format!(
                "{arch} seed {seed}: failed ({})",
                r.error.as_deref().unwrap_or("unknown")
            )),
        }
    })?;
    log_line(&format!(
        "campaign complete: {} cells ({} trained now, {} already present)",
        results.len(),
        trained,
        results.len() - trained
    ));
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let split: SplitAssignment = a.split.parse()?;
    let manifest = Manifest::load(&a.manifest)?;
    let eval = evaluate_checkpoint(&a.checkpoint, &manifest, split, a.batch_size)?;
    let model = pas3d_core::models::load_checkpoint(&a.checkpoint, pas3d_core::Device::Cpu)?
        .config
        .arch
        .name()
        .to_string();
    write_report_row(&a.out, &model, a.seed, &eval)?;
    let m = &eval.report;
    log_line(&format!(
        "{model} on {split}: accuracy {:.4}, auc {}, f1 {:.4} (tn={} fp={} fn={} tp={})",
        m.accuracy,
        m.auc.map_or("n/a".into(), |v| format!("{v:.4}")),
        m.f1_macro,
        eval.cm.tn,
        eval.cm.fp,
        eval.cm.fn_,
        eval.cm.tp
    ));
    if let Some(roc_path) = &a.roc {
        let (curve, auc) = pas3d_core::evaluation::roc_auc(&eval.y_true, &eval.scores)?;
        emit_roc_plot(&[(model, curve, auc)], roc_path)?;
        log_line(&format!("wrote ROC curve to {}", roc_path.display()));
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let results = load_results(&a.runs)?;
    let matrix = results_to_run_matrix(&results, &a.metric)?;
    let report = compare_models(&matrix, a.alpha)?;
    if let Some(anova) = &report.anova {
        log_line(&format!(
            "RM-ANOVA on {}: F({},{}) = {:.4}, p = {:.4e}",
            a.metric, anova.df_treatment, anova.df_error, anova.f, anova.p
        ));
    }
    report.save_csv(&a.out)?;
    let significant = report.cells.iter().filter(|c| c.significant == Some(true)).count();
    log_line(&format!(
        "{} pairwise tests, {significant} significant at alpha {}",
        report.cells.len(),
        a.alpha
    ));
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let results = load_results(&a.runs)?;
    let rows: Vec<(String, pas3d_core::evaluation::MetricReport)> = results
        .iter()
        .filter_map(|r| r.metrics.clone().map(|m| (r.model.clone(), m)))
        .collect();
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: no successful runs to report",
            a.runs.display()
        )));
    }
    let aggregates = aggregate_runs(&rows);

    let fmt_opt = |agg: &Option<Aggregate>| -> String {
        agg.as_ref().map_or("n/a".into(), |a| a.formatted())
    };
    println!(
        "{:<18} {:>4}  {:<24} {:<24} {:<24} {:<24} {:<24}",
        "model", "runs", "accuracy", "auc", "precision", "recall", "f1"
    );
    for agg in &aggregates {
        println!(
            "{:<18} {:>4}  {:<24} {:<24} {:<24} {:<24} {:<24}",
            agg.model,
            agg.runs,
            agg.accuracy.formatted(),
            fmt_opt(&agg.auc),
            agg.precision_macro.formatted(),
            agg.recall_macro.formatted(),
            agg.f1_macro.formatted()
        );
    }

    if let Some(out) = &a.out {
        let mut f = File::create(out).map_err(|e| Error::io(out, e))?;
        writeln!(f, "# format_version=1").map_err(|e| Error::io(out, e))?;
        writeln!(f, "# cell format: best (mean +/- sd)").map_err(|e| Error::io(out, e))?;
        writeln!(f, "model,runs,accuracy,auc,precision_macro,recall_macro,f1_macro")
            .map_err(|e| Error::io(out, e))?;
        for agg in &aggregates {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                agg.model,
                agg.runs,
                agg.accuracy.formatted(),
                fmt_opt(&agg.auc),
                agg.precision_macro.formatted(),
                agg.recall_macro.formatted(),
                agg.f1_macro.formatted()
            )
            .map_err(|e| Error::io(out, e))?;
        }
        log_line(&format!("wrote summary table to {}", out.display()));
    }
    Ok(())
}
