//! Command-line front end.
//!
//! Every subcommand takes `--seed`, `--config <file>` and `--preset <name>`.
//! Config files are JSON objects laid over the preset's values; flags win
//! over both. Each run writes a manifest recording the resolved config, its
//! hash, the seed, input file hashes and the model dimensions.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::cohort::{self, CohortConfig, PatientRecord, SentinelCodes};
use crate::error::{Error, Result};
use crate::interpret::{self, HeadAgg};
use crate::metrics::{Calibrator, Confusion, Summary};
use crate::model::{self, Checkpoint, ModelConfig};
use crate::sequencer::{self, TokenSequence, WindowSpec};
use crate::trainer::{self, FinetuneInit, TrainConfig};
use crate::vocab::{self, Vocabulary};

const PRESET_HELP: &str = "\
Presets:
  gen-data                 planted, precursor
  pretrain, finetune,      desk (hidden 32, 2 layers, 4 heads, intermediate 64)
  evaluate                 paper-all (216, 9, 12, 512)
                           paper-no-topic (240, 9, 12, 512)
                           paper-no-cpt (252, 6, 12, 256)
                           paper-no-topic-cpt (264, 6, 12, 256)
The desk model preset trains with desk settings; paper-* presets use the
published optimiser settings (batch 256 / 64, 100 / 50 epochs).

Prediction windows: 14d, 91d, 182d, 365d.";

#[derive(Debug, Parser)]
#[command(name = "brltm", version, about = "Transformer representation learning over health-record event sequences", after_help = PRESET_HELP)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file overriding preset values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset (see below).
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort as a JSON-lines record file.
    GenData {
        /// Output record file.
        #[arg(long)]
        out: PathBuf,
        /// Cohort size; overrides the preset.
        #[arg(long)]
        n_patients: Option<usize>,
    },
    /// Build the vocabulary of a record file.
    BuildVocab {
        /// Input record file.
        #[arg(long)]
        records: PathBuf,
        /// Output vocabulary file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-code pretraining.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Directory for checkpoints, metrics and the manifest.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fine-tune and test depression prediction over seeded splits.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Pretrained checkpoint; trains from scratch when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prediction window; repeat for several.
        #[arg(long = "window", value_parser = parse_window, default_value = "14d")]
        windows: Vec<WindowSpec>,
        /// Number of seeded 70/10/20 splits.
        #[arg(long)]
        splits: Option<usize>,
        /// Directory for results, metrics, the model and the manifest.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a fine-tuned checkpoint on the seeded splits of one window.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Fine-tuned checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prediction window.
        #[arg(long, value_parser = parse_window, default_value = "14d")]
        window: WindowSpec,
        /// Number of seeded splits whose test parts are scored.
        #[arg(long)]
        splits: Option<usize>,
        /// Also report confusion matrices after isotonic calibration.
        #[arg(long)]
        calibrate: bool,
        /// Output report file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export attention associations for one patient.
    Attend {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint to read attention from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Patient id.
        #[arg(long)]
        patient: String,
        /// Replace every occurrence of this token with MASK before the pass.
        #[arg(long)]
        mask: Option<String>,
        /// Keys kept per query.
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Layer to read; the last by default.
        #[arg(long)]
        layer: Option<usize>,
        /// Head aggregation: mean or max.
        #[arg(long, default_value = "mean", value_parser = parse_agg)]
        agg: HeadAgg,
        /// Output association file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print one patient's token sequence as aligned rows.
    Inspect {
        #[command(flatten)]
        data: DataArgs,
        /// Patient id.
        #[arg(long)]
        patient: String,
        /// Show the fine-tuning view under this window instead of the full history.
        #[arg(long, value_parser = parse_window)]
        window: Option<WindowSpec>,
        /// Sequence length limit.
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Record file (JSON lines).
    #[arg(long)]
    records: PathBuf,
    /// Vocabulary file.
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Sequences per optimiser step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Sequence length limit of a new model.
    #[arg(long)]
    max_len: Option<usize>,
}

fn parse_window(s: &str) -> std::result::Result<WindowSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_agg(s: &str) -> std::result::Result<HeadAgg, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// configuration

/// Resolved configuration of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    sentinel_codes: SentinelCodes,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with the config file, if any, laid over it.
fn layered<T: Serialize + DeserializeOwned>(base: &T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return serde_json::to_value(base)
            .and_then(serde_json::from_value)
            .map_err(|e| Error::Config(e.to_string()));
    };
    let mut value = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
    overlay(&mut value, read_json(path)?);
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn run_config(common: &Common, vocab: &Vocabulary, args: &TrainArgs, finetune: bool) -> Result<RunConfig> {
    let preset = common.preset.as_deref().unwrap_or("desk");
    let max_len = args.max_len.unwrap_or(if preset == "desk" { 64 } else { 512 });
    let train_preset = if preset == "desk" { "desk" } else { "paper" };
    let base = RunConfig {
        model: ModelConfig::preset(preset, vocab.len(), max_len)?,
        train: TrainConfig::preset(train_preset, finetune)?,
        sentinel_codes: SentinelCodes::default(),
    };
    let mut cfg = layered(&base, common.config.as_deref())?;
    cfg.model.vocab_size = vocab.len();
    if let Some(m) = args.max_len {
        cfg.model.max_len = m;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.peak_lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Serialize)]
struct Architecture {
    preset: String,
    vocab_size: usize,
    hidden_size: usize,
    n_layers: usize,
    n_heads: usize,
    intermediate_size: usize,
    max_len: usize,
}

impl From<&ModelConfig> for Architecture {
    fn from(c: &ModelConfig) -> Self {
        Self {
            preset: c.preset.clone(),
            vocab_size: c.vocab_size,
            hidden_size: c.hidden_size,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            intermediate_size: c.intermediate_size,
            max_len: c.max_len,
        }
    }
}

#[derive(Debug, Serialize)]
struct InputFile {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    version: &'static str,
    seed: Option<u64>,
    preset: Option<String>,
    config_hash: String,
    config: Value,
    inputs: Vec<InputFile>,
    outputs: Vec<String>,
    architecture: Option<Architecture>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<InputFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(InputFile {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

struct ManifestBuilder<'a> {
    command: &'a str,
    seed: Option<u64>,
    preset: Option<String>,
    config: Value,
    inputs: Vec<&'a Path>,
    outputs: Vec<&'a Path>,
    architecture: Option<Architecture>,
}

impl ManifestBuilder<'_> {
    fn write(self, path: &Path) -> Result<()> {
        let config_bytes = serde_json::to_vec(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let manifest = Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            preset: self.preset,
            config_hash: sha256_hex(&config_bytes),
            config: self.config,
            inputs: self.inputs.into_iter().map(file_hash).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            architecture: self.architecture,
        };
        write_json(&manifest, path)
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `<path>.manifest.json` next to a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

// ---------------------------------------------------------------------------
// commands

fn execute(cli: Cli) -> Result<()> {
    let common = cli.common;
    match cli.command {
        Command::GenData { out, n_patients } => gen_data(&common, &out, n_patients),
        Command::BuildVocab { records, out } => build_vocab(&common, &records, &out),
        Command::Pretrain { data, train, out_dir } => pretrain(&common, &data, &train, &out_dir),
        Command::Finetune {
            data,
            train,
            checkpoint,
            windows,
            splits,
            out_dir,
        } => finetune(&common, &data, &train, checkpoint.as_deref(), &windows, splits, &out_dir),
        Command::Evaluate {
            data,
            checkpoint,
            window,
            splits,
            calibrate,
            out,
        } => evaluate(&common, &data, &checkpoint, window, splits, calibrate, &out),
        Command::Attend {
            data,
            checkpoint,
            patient,
            mask,
            top_k,
            layer,
            agg,
            out,
        } => attend(&common, &data, &checkpoint, &patient, mask.as_deref(), top_k, layer, agg, &out),
        Command::Inspect {
            data,
            patient,
            window,
            max_len,
        } => inspect(&common, &data, &patient, window, max_len),
    }
}

fn gen_data(common: &Common, out: &Path, n_patients: Option<usize>) -> Result<()> {
    let name = common.preset.as_deref().unwrap_or("planted");
    let base = CohortConfig::preset(name)
        .ok_or_else(|| Error::Config(format!("unknown cohort preset {name:?}; expected planted or precursor")))?;
    let mut config = layered(&base, common.config.as_deref())?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(n) = n_patients {
        config.n_patients = n;
    }
    let records = cohort::generate_cohort(&config)?;
    cohort::write_records(&records, out)?;
    let depressed = records.iter().filter(|r| r.is_depressed()).count();
    println!("{} patients ({depressed} with onset) -> {}", records.len(), out.display());
    let mut inputs = Vec::new();
    if let Some(c) = common.config.as_deref() {
        inputs.push(c);
    }
    ManifestBuilder {
        command: "gen-data",
        seed: Some(config.seed),
        preset: Some(name.to_string()),
        config: to_value(&config)?,
        inputs,
        outputs: vec![out],
        architecture: None,
    }
    .write(&sidecar(out))
}

fn load_records(path: &Path) -> Result<Vec<PatientRecord>> {
    Ok(cohort::preprocess(cohort::load_records(path)?))
}

fn build_vocab(common: &Common, records_path: &Path, out: &Path) -> Result<()> {
    let records = load_records(records_path)?;
    let vocab = Vocabulary::build(&records);
    vocab.save(out)?;
    let report = vocab.report();
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Validation(e.to_string()))?);
    ManifestBuilder {
        command: "build-vocab",
        seed: common.seed,
        preset: common.preset.clone(),
        config: to_value(&report)?,
        inputs: vec![records_path],
        outputs: vec![out],
        architecture: None,
    }
    .write(&sidecar(out))
}

fn load_data(data: &DataArgs) -> Result<(Vec<PatientRecord>, Vocabulary)> {
    Ok((load_records(&data.records)?, Vocabulary::load(&data.vocab)?))
}

fn pretrain(common: &Common, data: &DataArgs, args: &TrainArgs, out_dir: &Path) -> Result<()> {
    let (records, vocab) = load_data(data)?;
    let cfg = run_config(common, &vocab, args, false)?;
    let result = trainer::pretrain(&records, &vocab, &cfg.model, &cfg.train)?;
    create_dir(out_dir)?;
    let best = out_dir.join("best.ckpt");
    let last = out_dir.join("last.ckpt");
    let metrics = out_dir.join("metrics.csv");
    let summary = out_dir.join("summary.json");
    model::save_checkpoint(&Checkpoint::new(&result.best, &vocab), &best)?;
    model::save_checkpoint(&Checkpoint::new(&result.last, &vocab), &last)?;
    result.log.write_csv(&metrics)?;
    #[derive(Serialize)]
    struct PretrainSummary<'a> {
        best_epoch: usize,
        best_step: usize,
        best_heldout_loss: f64,
        epoch_losses: &'a [f64],
        heldout_patients: usize,
    }
    write_json(
        &PretrainSummary {
            best_epoch: result.best_epoch,
            best_step: result.best_step,
            best_heldout_loss: result.best_heldout_loss,
            epoch_losses: &result.epoch_losses,
            heldout_patients: result.heldout.len(),
        },
        &summary,
    )?;
    println!(
        "best held-out loss {:.4} at epoch {} -> {}",
        result.best_heldout_loss,
        result.best_epoch,
        best.display()
    );
    ManifestBuilder {
        command: "pretrain",
        seed: Some(cfg.train.seed),
        preset: Some(cfg.model.preset.clone()),
        config: to_value(&cfg)?,
        inputs: inputs(common, data, None),
        outputs: vec![&best, &last, &metrics, &summary],
        architecture: Some((&cfg.model).into()),
    }
    .write(&out_dir.join("manifest.json"))
}

fn inputs<'a>(common: &'a Common, data: &'a DataArgs, checkpoint: Option<&'a Path>) -> Vec<&'a Path> {
    let mut v: Vec<&Path> = vec![&data.records, &data.vocab];
    v.extend(checkpoint);
    v.extend(common.config.as_deref());
    v
}

#[allow(clippy::too_many_arguments)]
fn finetune(
    common: &Common,
    data: &DataArgs,
    args: &TrainArgs,
    checkpoint: Option<&Path>,
    windows: &[WindowSpec],
    splits: Option<usize>,
    out_dir: &Path,
) -> Result<()> {
    let (records, vocab) = load_data(data)?;
    let mut cfg = run_config(common, &vocab, args, true)?;
    if let Some(n) = splits {
        cfg.train.n_splits = n;
        cfg.train.validate()?;
    }
    let init = match checkpoint {
        Some(path) => {
            let ck = model::load_checkpoint(path, Some(&vocab))?;
            cfg.model = ck.config.clone();
            FinetuneInit::Pretrained(Box::new(ck))
        }
        None => FinetuneInit::Scratch(cfg.model.clone()),
    };
    let result = trainer::finetune(&init, &records, &vocab, windows, &cfg.sentinel_codes, &cfg.train)?;
    create_dir(out_dir)?;
    let results = out_dir.join("results.json");
    let metrics = out_dir.join("metrics.csv");
    let model_path = out_dir.join("model.ckpt");
    write_json(&result.windows, &results)?;
    result.log.write_csv(&metrics)?;
    if let Some(m) = result.windows.first().and_then(|w| w.model.as_ref()) {
        model::save_checkpoint(&Checkpoint::new(m, &vocab), &model_path)?;
    }
    for w in &result.windows {
        println!(
            "{}: {} patients, {} positive; ROC AUC {}  PR AUC {}",
            w.window,
            w.n_patients,
            w.positives,
            w.roc_auc.display(),
            w.pr_auc.display()
        );
    }
    ManifestBuilder {
        command: "finetune",
        seed: Some(cfg.train.seed),
        preset: Some(cfg.model.preset.clone()),
        config: to_value(&serde_json::json!({
            "run": cfg,
            "windows": windows,
        }))?,
        inputs: inputs(common, data, checkpoint),
        outputs: vec![&results, &metrics, &model_path],
        architecture: Some((&cfg.model).into()),
    }
    .write(&out_dir.join("manifest.json"))
}

#[derive(Debug, Serialize)]
struct EvaluatedSplit {
    split: usize,
    roc_auc: f64,
    pr_auc: f64,
    confusion: Confusion,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibrated_confusion: Option<Confusion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibrator: Option<Calibrator>,
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    window: String,
    n_patients: usize,
    positives: usize,
    roc_auc: Summary,
    pr_auc: Summary,
    /// `mean (sd)` across splits.
    roc_auc_text: String,
    pr_auc_text: String,
    splits: Vec<EvaluatedSplit>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    common: &Common,
    data: &DataArgs,
    checkpoint: &Path,
    window: WindowSpec,
    splits: Option<usize>,
    calibrate: bool,
    out: &Path,
) -> Result<()> {
    let (records, vocab) = load_data(data)?;
    let ck = model::load_checkpoint(checkpoint, Some(&vocab))?;
    if !ck.has_classifier() {
        return Err(Error::Incompatible("checkpoint has no classification head; fine-tune it first".into()));
    }
    let base = RunConfig {
        model: ck.config.clone(),
        train: TrainConfig::finetune_default(),
        sentinel_codes: SentinelCodes::default(),
    };
    let mut cfg = layered(&base, common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = splits {
        cfg.train.n_splits = n;
    }
    cfg.train.validate()?;
    let model = ck.into_model();
    let cohort = trainer::finetune_cohort(&records, &[window], &cfg.sentinel_codes);
    let seqs = trainer::window_sequences(&cohort, &vocab, &window, &cfg.sentinel_codes, model.config.max_len)?;
    let mut rows = Vec::with_capacity(cfg.train.n_splits);
    for split in 0..cfg.train.n_splits {
        let parts = trainer::make_split(seqs.len(), split, &cfg.train);
        let s = trainer::score_split(&model, &seqs, split, &parts)?;
        rows.push(EvaluatedSplit {
            split,
            roc_auc: s.test_roc_auc,
            pr_auc: s.test_pr_auc,
            confusion: s.confusion,
            calibrated_confusion: calibrate.then_some(s.calibrated_confusion),
            calibrator: calibrate.then_some(s.calibrator),
        });
    }
    let roc = Summary::of(&rows.iter().map(|r| r.roc_auc).collect::<Vec<_>>());
    let pr = Summary::of(&rows.iter().map(|r| r.pr_auc).collect::<Vec<_>>());
    let report = EvaluationReport {
        window: window.label(),
        n_patients: seqs.len(),
        positives: seqs.iter().filter(|s| s.class_label == Some(1)).count(),
        roc_auc_text: roc.display(),
        pr_auc_text: pr.display(),
        roc_auc: roc,
        pr_auc: pr,
        splits: rows,
    };
    write_json(&report, out)?;
    println!(
        "{} over {} splits: ROC AUC {}  PR AUC {}",
        report.window, cfg.train.n_splits, report.roc_auc_text, report.pr_auc_text
    );
    if let Some(first) = report.splits.first() {
        print_confusion("split 0, raw", &first.confusion);
        if let Some(c) = &first.calibrated_confusion {
            print_confusion("split 0, calibrated", c);
        }
    }
    ManifestBuilder {
        command: "evaluate",
        seed: Some(cfg.train.seed),
        preset: Some(model.config.preset.clone()),
        config: to_value(&serde_json::json!({ "run": cfg, "window": window, "calibrate": calibrate }))?,
        inputs: inputs(common, data, Some(checkpoint)),
        outputs: vec![out],
        architecture: Some((&model.config).into()),
    }
    .write(&sidecar(out))
}

fn print_confusion(title: &str, c: &Confusion) {
    println!("{title}:\n            pred 0  pred 1\n  true 0  {:>7} {:>7}\n  true 1  {:>7} {:>7}", c.tn, c.fp, c.fn_, c.tp);
}

fn find_patient<'a>(records: &'a [PatientRecord], id: &str) -> Result<&'a PatientRecord> {
    records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::Validation(format!("no patient with id {id:?}")))
}

fn history_sequence(record: &PatientRecord, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    sequencer::pretraining_sequence(record, vocab, max_len)
        .ok_or_else(|| Error::Validation(format!("patient {} has no visits before onset", record.id)))
}

#[allow(clippy::too_many_arguments)]
fn attend(
    common: &Common,
    data: &DataArgs,
    checkpoint: &Path,
    patient: &str,
    mask: Option<&str>,
    top_k: usize,
    layer: Option<usize>,
    agg: HeadAgg,
    out: &Path,
) -> Result<()> {
    let (records, vocab) = load_data(data)?;
    let model = model::load_checkpoint(checkpoint, Some(&vocab))?.into_model();
    let mut seq = history_sequence(find_patient(&records, patient)?, &vocab, model.config.max_len)?;
    if let Some(token) = mask {
        let id = vocab.id_of(token);
        if id == vocab::UNK {
            return Err(Error::Validation(format!("token {token:?} is not in the vocabulary")));
        }
        for t in seq.tokens.iter_mut().filter(|t| **t == id) {
            *t = vocab::MASK;
        }
    }
    let map = interpret::extract_attention(&model, &seq, &vocab)?;
    let report = interpret::association_report(&map, top_k, layer, agg)?;
    interpret::write_report(&report, out)?;
    println!("{} queries, layer {} -> {}", report.queries.len(), report.layer, out.display());
    ManifestBuilder {
        command: "attend",
        seed: common.seed,
        preset: Some(model.config.preset.clone()),
        config: to_value(&serde_json::json!({
            "patient": patient,
            "mask": mask,
            "top_k": top_k,
            "layer": report.layer,
            "head_aggregation": agg,
        }))?,
        inputs: inputs(common, data, Some(checkpoint)),
        outputs: vec![out],
        architecture: Some((&model.config).into()),
    }
    .write(&sidecar(out))
}

fn inspect(common: &Common, data: &DataArgs, patient: &str, window: Option<WindowSpec>, max_len: usize) -> Result<()> {
    let (records, vocab) = load_data(data)?;
    let sentinels = match common.config.as_deref() {
        Some(path) => layered(&SentinelCodes::default(), Some(path))?,
        None => SentinelCodes::default(),
    };
    let record = find_patient(&records, patient)?;
    let seq = match window {
        None => history_sequence(record, &vocab, max_len)?,
        Some(spec) => {
            let w = sequencer::select_window(record, &spec, &sentinels, true).ok_or_else(|| {
                Error::Validation(format!("patient {patient} has no data in the {} window", spec.label()))
            })?;
            sequencer::build_sequence(&w, &vocab, max_len)?
        }
    };
    print!("{}", sequencer::render_rows(&seq, &vocab));
    if let Some(y) = seq.class_label {
        println!("label     {y}");
    }
    Ok(())
}
