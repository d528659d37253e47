//! Experiment orchestration: config files, run directories, subcommands,
//! metrics logging, and the pretraining loop. Everything an experiment
//! does is a pure function of its config file, so runs are reproducible
//! and the config hash identifies the experiment.

use crate::corpus::{
    generate_target_mono, generate_task, read_corpus, read_mono, read_vocab, write_corpus,
    write_mono, write_vocab, CorpusError, MonolingualCorpus, ParallelCorpus, SentencePair,
    SyntheticTaskSpec, TokenSeq, Vocabulary,
};
use crate::decoding::{beam_search, DecodeConfig, DecodeError};
use crate::eval::{corpus_bleu, diversity_matrix, EvalError};
use crate::models::{init_model, ArchitectureSpec, BasicModel, Direction, ModelError};
use crate::rng::stream;
use crate::rsl::{back_translation, co_em, self_training, RSLConfig, RoundMetrics, RslError};
use crate::training::{
    average_checkpoints, mle_epoch, Checkpoint, OptimizerState, TrainConfig, TrainError,
};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_DIVERGED: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    /// Wrong invocation: missing files named on the command line, refused
    /// overwrites.
    Usage(String),
    /// The config file parsed but its contents are invalid.
    Config(String),
    /// Data files are malformed or unreadable.
    Data(String),
    /// Training produced a non-finite loss.
    Diverged(String),
    /// Everything else; indicates a bug rather than misuse.
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
            CliError::Diverged(m) => write!(f, "diverged: {m}"),
            CliError::Internal(m) => write!(f, "internal: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::NanGradient(_) => {
                CliError::Diverged(e.to_string())
            }
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Format(m) => CliError::Data(m),
            TrainError::Io(io) => CliError::Data(io.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<RslError> for CliError {
    fn from(e: RslError) -> Self {
        match e {
            RslError::Diverged { .. } => CliError::Diverged(e.to_string()),
            RslError::Config(m) => CliError::Config(m),
            RslError::Train(t) => t.into(),
            RslError::Corpus(c) => c.into(),
            RslError::Io(io) => CliError::Data(io.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

/// One model in the experiment roster.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSlot {
    pub arch: ArchitectureSpec,
    pub direction: Direction,
    /// Initialization seed; training streams derive from the train seed.
    pub seed: u64,
}

/// Whole-experiment description. The canonical TOML serialization of this
/// struct (field order fixed by the type) is hashed to identify runs, so
/// key order in the input file never matters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    pub models: Vec<ModelSlot>,
    #[serde(default)]
    pub rsl: RSLConfig,
    /// Pseudo hypotheses per source for the self-training baseline.
    #[serde(default = "default_top_k")]
    pub st_top_k: usize,
}

fn default_top_k() -> usize {
    1
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.models.is_empty() {
            return Err(CliError::Config("model roster is empty".into()));
        }
        if self.rsl.k != self.models.len() {
            return Err(CliError::Config(format!(
                "rsl.k = {} must equal the roster size {}",
                self.rsl.k,
                self.models.len()
            )));
        }
        if self.st_top_k == 0 {
            return Err(CliError::Config("st_top_k must be at least 1".into()));
        }
        self.task.validate()?;
        for (i, slot) in self.models.iter().enumerate() {
            slot.arch
                .validate()
                .map_err(|e| CliError::Config(format!("model {i}: {e}")))?;
        }
        self.rsl.validate()?;
        Ok(())
    }

    /// Canonical serialization; input key order cannot leak into this.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Stable directory/metric name for roster position `i`.
    pub fn label(&self, i: usize) -> String {
        let slot = &self.models[i];
        format!("m{i}-{}-{}", slot.arch.kind, slot.direction)
    }
}

/// Everything a run records about itself besides metrics. The only
/// timestamps in a run live here, keeping metrics byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub checkpoint_format: String,
    /// Phase name -> checkpoint paths written by that phase.
    pub phases: BTreeMap<String, Vec<String>>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(config_hash: String) -> RunManifest {
        RunManifest {
            config_hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: "RSLCKPT1".to_string(),
            phases: BTreeMap::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    pub fn record(&mut self, phase: &str, path: &Path) {
        self.phases.entry(phase.to_string()).or_default().push(path.display().to_string());
    }

    /// Merges into any manifest already present so multi-phase runs
    /// accumulate their artifact list in one file.
    pub fn write(mut self, out_dir: &Path) -> Result<(), CliError> {
        let path = out_dir.join("manifest.json");
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(prev) = serde_json::from_str::<RunManifest>(&text) {
                if prev.config_hash == self.config_hash {
                    self.started_unix = prev.started_unix;
                    for (phase, mut paths) in prev.phases {
                        let slot = self.phases.entry(phase).or_default();
                        paths.extend(std::mem::take(slot));
                        *slot = paths;
                    }
                }
            }
        }
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::Internal(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

/// Self-describing metric record: one JSON object per line of
/// metrics.jsonl.
#[derive(Debug, Serialize)]
struct MetricRecord<'a> {
    run_id: &'a str,
    model_id: &'a str,
    phase: &'a str,
    epoch: usize,
    step: u64,
    metric: &'a str,
    value: f64,
}

/// Appends metric lines under a run id derived from the config hash, so
/// identical configs log identical ids.
pub struct MetricsLog {
    path: PathBuf,
    run_id: String,
}

impl MetricsLog {
    pub fn new(out_dir: &Path, config_hash: &str, phase: &str) -> MetricsLog {
        MetricsLog {
            path: out_dir.join("metrics.jsonl"),
            run_id: format!("{}-{phase}", &config_hash[..12]),
        }
    }

    pub fn log(
        &self,
        model_id: &str,
        phase: &str,
        epoch: usize,
        step: u64,
        metric: &str,
        value: f64,
    ) -> Result<(), CliError> {
        let record = MetricRecord {
            run_id: &self.run_id,
            model_id,
            phase,
            epoch,
            step,
            metric,
            value,
        };
        let line = serde_json::to_string(&record).map_err(|e| CliError::Internal(e.to_string()))?;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

/// Top hypothesis per source. Decoding is pure, so parallelism cannot
/// change results; the worker count follows RSL_THREADS.
pub fn decode_corpus(
    models: &[&BasicModel],
    sources: &[TokenSeq],
    cfg: &DecodeConfig,
) -> Result<Vec<TokenSeq>, CliError> {
    let hyps: Result<Vec<TokenSeq>, DecodeError> = sources
        .par_iter()
        .map(|x| Ok(beam_search(models, x, cfg)?.swap_remove(0).tokens))
        .collect();
    Ok(hyps?)
}

/// Greedy held-out BLEU, the checkpoint-selection metric.
pub fn greedy_bleu(
    model: &BasicModel,
    held_out: &ParallelCorpus,
    cfg: &DecodeConfig,
) -> Result<f64, CliError> {
    let greedy = DecodeConfig { beam: 1, groups: 1, ..*cfg };
    let sources: Vec<TokenSeq> = held_out.pairs.iter().map(|p| p.source.clone()).collect();
    let refs: Vec<TokenSeq> = held_out.pairs.iter().map(|p| p.target.clone()).collect();
    let hyps = decode_corpus(&[model], &sources, &greedy)?;
    Ok(corpus_bleu(&hyps, &refs)?.bleu)
}

/// Per-epoch observables handed to the pretraining sink.
pub struct EpochEvent<'a> {
    pub model: &'a BasicModel,
    pub epoch: usize,
    pub train_nll: f64,
    /// Present on evaluation epochs (every `eval_every`).
    pub val_bleu: Option<f64>,
    pub opt_steps: u64,
}

pub struct PretrainOutcome {
    pub best_val_bleu: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// MLE pretraining with early stopping: trains up to `max_epochs`,
/// evaluates greedy held-out BLEU every `eval_every` epochs, and stops
/// after `patience` consecutive evaluations without improvement. The
/// model is left at the best-scoring parameters.
pub fn pretrain(
    model: &mut BasicModel,
    train: &ParallelCorpus,
    held_out: &ParallelCorpus,
    tcfg: &TrainConfig,
    decode: &DecodeConfig,
    mut sink: impl FnMut(&EpochEvent) -> Result<(), CliError>,
) -> Result<PretrainOutcome, CliError> {
    let mut rng = stream(tcfg.seed, "pretrain", model.id as u64);
    let mut opt = OptimizerState::from_config(&model.params, tcfg);
    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());
    let mut stale = 0usize;
    let mut epochs_run = 0;
    for epoch in 1..=tcfg.max_epochs {
        model.dropout_mode(true);
        let nll = mle_epoch(model, train, tcfg, &mut opt, &mut rng);
        model.dropout_mode(false);
        let nll = nll?;
        epochs_run = epoch;
        let val_bleu = if epoch % tcfg.eval_every == 0 {
            Some(greedy_bleu(model, held_out, decode)?)
        } else {
            None
        };
        sink(&EpochEvent { model, epoch, train_nll: nll, val_bleu, opt_steps: opt.step_count() })?;
        if let Some(bleu) = val_bleu {
            if bleu > best.0 {
                best = (bleu, epoch, model.params.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= tcfg.patience {
                    break;
                }
            }
        }
    }
    model.params = best.2;
    Ok(PretrainOutcome { best_val_bleu: best.0, best_epoch: best.1, epochs_run })
}

#[derive(Parser)]
#[command(name = "rsl-lab", version, about = "Desk-scale seq2seq training laboratory")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic task corpora described by the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain every roster model with MLE and early stopping.
    TrainBasic {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory; defaults to <out>/data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Cooperatively tune the pretrained roster.
    Rsl {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory; defaults to <out>/ckpt.
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
    },
    /// Self-training baseline for one roster model.
    St {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
        /// Roster index of the model to tune.
        #[arg(long, default_value_t = 0)]
        model_index: usize,
        /// Overrides the config's st_top_k.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Back-translation baseline: trains a reverse model, synthesizes
    /// sources for target-side monolingual text, retrains model 0.
    Bt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
    },
    /// Beam-decode a source file; multiple --ckpt form an ensemble.
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Side file of normalized scores, one per line.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, name = "ref")]
        reference: PathBuf,
        /// Target-side vocabulary file.
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Pairwise BLEU matrix between checkpoints on the test sources.
    Diversity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true, num_args = 2..)]
        ckpt: Vec<PathBuf>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Parameter-wise mean of checkpoints.
    AvgCkpt {
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Entry point for the binary: parses RSL_THREADS and the command line,
/// runs the subcommand, and maps errors onto the exit-code contract.
pub fn run() -> i32 {
    match configure_threads() {
        Ok(()) => {}
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    }
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// RSL_THREADS caps the rayon pool; unset means single-threaded, the
/// bit-reproducible default.
fn configure_threads() -> Result<(), CliError> {
    let threads = match std::env::var("RSL_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Config(format!("RSL_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    // a pool may already exist when called twice from tests; same config,
    // so the outcome is identical
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData { config, out, force } => gen_data(&config, &out, force),
        Cmd::TrainBasic { config, out, data } => train_basic(&config, &out, data.as_deref()),
        Cmd::Rsl { config, out, data, ckpt_in } => {
            run_rsl(&config, &out, data.as_deref(), ckpt_in.as_deref())
        }
        Cmd::St { config, out, data, ckpt_in, model_index, top_k } => {
            run_st(&config, &out, data.as_deref(), ckpt_in.as_deref(), model_index, top_k)
        }
        Cmd::Bt { config, out, data, ckpt_in } => {
            run_bt(&config, &out, data.as_deref(), ckpt_in.as_deref())
        }
        Cmd::Decode { config, data, ckpt, input, output, scores } => {
            run_decode(&config, &data, &ckpt, &input, &output, scores.as_deref())
        }
        Cmd::Eval { hyp, reference, vocab } => run_eval(&hyp, &reference, &vocab),
        Cmd::Diversity { config, data, ckpt, output } => {
            run_diversity(&config, &data, &ckpt, output.as_deref())
        }
        Cmd::AvgCkpt { inputs, output } => run_avg(&inputs, &output),
    }
}

/// Corpus files as laid out by gen-data.
pub struct TaskData {
    pub train: ParallelCorpus,
    pub mono: MonolingualCorpus,
    pub held_out: ParallelCorpus,
    pub target_mono: MonolingualCorpus,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

pub fn load_data(dir: &Path) -> Result<TaskData, CliError> {
    let src_vocab = read_vocab(&dir.join("vocab.src"))?;
    let tgt_vocab = read_vocab(&dir.join("vocab.tgt"))?;
    let train = read_corpus(&dir.join("train.src"), &dir.join("train.tgt"), &src_vocab, &tgt_vocab)?;
    let held_out = read_corpus(&dir.join("test.src"), &dir.join("test.tgt"), &src_vocab, &tgt_vocab)?;
    let mono = read_mono(&dir.join("mono.src"), &src_vocab)?;
    let target_mono = read_mono(&dir.join("mono.tgt"), &tgt_vocab)?;
    Ok(TaskData { train, mono, held_out, target_mono, src_vocab, tgt_vocab })
}

pub fn gen_data(config: &Path, out: &Path, force: bool) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let data_dir = out.join("data");
    if data_dir.exists() && data_dir.read_dir()?.next().is_some() && !force {
        return Err(CliError::Usage(format!(
            "{} is not empty; pass --force to overwrite",
            data_dir.display()
        )));
    }
    fs::create_dir_all(&data_dir)?;
    let (train, mono, held_out) = generate_task(&cfg.task)?;
    let target_mono = generate_target_mono(&cfg.task, cfg.task.mono_count)?;
    write_vocab(&train.source_vocab, &data_dir.join("vocab.src"))?;
    write_vocab(&train.target_vocab, &data_dir.join("vocab.tgt"))?;
    write_corpus(&train, &data_dir.join("train.src"), &data_dir.join("train.tgt"))?;
    write_corpus(&held_out, &data_dir.join("test.src"), &data_dir.join("test.tgt"))?;
    write_mono(&mono, &data_dir.join("mono.src"))?;
    write_mono(&target_mono, &data_dir.join("mono.tgt"))?;
    let mut manifest = RunManifest::new(cfg.hash());
    manifest.record("gen-data", &data_dir);
    manifest.write(out)?;
    println!(
        "wrote {} train pairs, {} mono sources, {} held-out pairs to {}",
        train.len(),
        mono.len(),
        held_out.len(),
        data_dir.display()
    );
    Ok(())
}

fn resolve_data(out: &Path, data: Option<&Path>) -> PathBuf {
    data.map(Path::to_path_buf).unwrap_or_else(|| out.join("data"))
}

fn ckpt_dir(out: &Path, ckpt_in: Option<&Path>) -> PathBuf {
    ckpt_in.map(Path::to_path_buf).unwrap_or_else(|| out.join("ckpt"))
}

fn init_roster(cfg: &ExperimentConfig, data: &TaskData) -> Result<Vec<BasicModel>, CliError> {
    cfg.models
        .iter()
        .enumerate()
        .map(|(i, slot)| {
            Ok(init_model(
                slot.arch,
                slot.direction,
                &data.src_vocab,
                &data.tgt_vocab,
                i,
                slot.seed,
            )?)
        })
        .collect()
}

fn load_roster(
    cfg: &ExperimentConfig,
    data: &TaskData,
    dir: &Path,
    name: &str,
) -> Result<Vec<BasicModel>, CliError> {
    cfg.models
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let path = dir.join(cfg.label(i)).join(name);
            Ok(Checkpoint::load(&path)?.into_model(i, &data.src_vocab, &data.tgt_vocab)?)
        })
        .collect()
}

fn save_model(
    model: &BasicModel,
    opt: Option<&OptimizerState>,
    epoch: usize,
    validation: Option<f64>,
    path: &Path,
) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Checkpoint::from_model(model, opt, epoch, validation).save(path)?;
    Ok(())
}

pub fn train_basic(config: &Path, out: &Path, data: Option<&Path>) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let data = load_data(&resolve_data(out, data))?;
    fs::create_dir_all(out)?;
    let log = MetricsLog::new(out, &cfg.hash(), "train-basic");
    let mut manifest = RunManifest::new(cfg.hash());
    let mut models = init_roster(&cfg, &data)?;
    println!("{:<24} {:>10} {:>10} {:>8}", "model", "best-bleu", "best-epoch", "epochs");
    for (i, model) in models.iter_mut().enumerate() {
        let label = cfg.label(i);
        let dir = out.join("ckpt").join(&label);
        fs::create_dir_all(&dir)?;
        let tcfg = &cfg.rsl.train;
        let outcome = pretrain(model, &data.train, &data.held_out, tcfg, &cfg.rsl.decode, |ev| {
            log.log(&label, "pretrain", ev.epoch, ev.opt_steps, "train_nll", ev.train_nll)?;
            if let Some(bleu) = ev.val_bleu {
                log.log(&label, "pretrain", ev.epoch, ev.opt_steps, "val_bleu", bleu)?;
            }
            if ev.epoch % tcfg.checkpoint_every == 0 {
                let path = dir.join(format!("epoch-{}.ckpt", ev.epoch));
                save_model(ev.model, None, ev.epoch, ev.val_bleu, &path)?;
            }
            Ok(())
        })?;
        let best = dir.join("best.ckpt");
        save_model(model, None, outcome.best_epoch, Some(outcome.best_val_bleu), &best)?;
        manifest.record("train-basic", &best);
        println!(
            "{label:<24} {:>10.2} {:>10} {:>8}",
            outcome.best_val_bleu, outcome.best_epoch, outcome.epochs_run
        );
    }
    manifest.write(out)?;
    Ok(())
}

fn log_round(log: &MetricsLog, cfg: &ExperimentConfig, m: &RoundMetrics) -> Result<(), CliError> {
    log.log("all", "rsl", m.round, 0, "pseudo_pairs", m.pseudo_pairs as f64)?;
    log.log("all", "rsl", m.round, 0, "clipped_weights", m.clipped_weights as f64)?;
    for (i, nll) in m.mean_train_nll.iter().enumerate() {
        log.log(&cfg.label(i), "rsl", m.round, 0, "train_nll", *nll)?;
    }
    if let Some(bleu) = &m.validation_bleu {
        for (i, b) in bleu.iter().enumerate() {
            log.log(&cfg.label(i), "rsl", m.round, 0, "val_bleu", *b)?;
        }
    }
    if let Some(mean) = m.mean_validation_bleu {
        log.log("all", "rsl", m.round, 0, "mean_val_bleu", mean)?;
    }
    if let Some(d) = m.cross_diversity {
        log.log("all", "rsl", m.round, 0, "cross_diversity", d)?;
    }
    Ok(())
}

pub fn run_rsl(
    config: &Path,
    out: &Path,
    data: Option<&Path>,
    ckpt_in: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let data = load_data(&resolve_data(out, data))?;
    fs::create_dir_all(out)?;
    let log = MetricsLog::new(out, &cfg.hash(), "rsl");
    let mut manifest = RunManifest::new(cfg.hash());
    let mut models = load_roster(&cfg, &data, &ckpt_dir(out, ckpt_in), "best.ckpt")?;
    let mut rsl_cfg = cfg.rsl.clone();
    if let Some(dir) = rsl_cfg.dump_dir.take() {
        // relative dump dirs land inside the run directory
        rsl_cfg.dump_dir = Some(if dir.is_absolute() { dir } else { out.join(dir) });
    }
    let rounds = co_em(&mut models, &data.train, &data.mono, &rsl_cfg, Some(&data.held_out))?;
    println!("{:>6} {:>12} {:>14} {:>14}", "round", "pseudo", "mean-bleu", "diversity");
    for m in &rounds {
        log_round(&log, &cfg, m)?;
        println!(
            "{:>6} {:>12} {:>14} {:>14}",
            m.round,
            m.pseudo_pairs,
            m.mean_validation_bleu.map_or("-".into(), |v| format!("{v:.2}")),
            m.cross_diversity.map_or("-".into(), |v| format!("{v:.2}")),
        );
    }
    for (i, model) in models.iter().enumerate() {
        let path = out.join("ckpt").join(cfg.label(i)).join("rsl.ckpt");
        let val = rounds.last().and_then(|m| m.validation_bleu.as_ref().map(|b| b[i]));
        save_model(model, None, rounds.len(), val, &path)?;
        manifest.record("rsl", &path);
    }
    manifest.write(out)?;
    Ok(())
}

pub fn run_st(
    config: &Path,
    out: &Path,
    data: Option<&Path>,
    ckpt_in: Option<&Path>,
    model_index: usize,
    top_k: Option<usize>,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    if model_index >= cfg.models.len() {
        return Err(CliError::Usage(format!(
            "model index {model_index} out of range for a roster of {}",
            cfg.models.len()
        )));
    }
    let top_k = top_k.unwrap_or(cfg.st_top_k);
    let data = load_data(&resolve_data(out, data))?;
    fs::create_dir_all(out)?;
    let log = MetricsLog::new(out, &cfg.hash(), "st");
    let mut manifest = RunManifest::new(cfg.hash());
    let label = cfg.label(model_index);
    let ckpt = ckpt_dir(out, ckpt_in).join(&label).join("best.ckpt");
    let mut model = Checkpoint::load(&ckpt)?.into_model(model_index, &data.src_vocab, &data.tgt_vocab)?;
    let rounds = self_training(&mut model, &data.train, &data.mono, &cfg.rsl, top_k)?;
    for m in &rounds {
        log.log(&label, "st", m.round, 0, "pseudo_pairs", m.pseudo_pairs as f64)?;
        log.log(&label, "st", m.round, 0, "train_nll", m.mean_train_nll[0])?;
    }
    let bleu = greedy_bleu(&model, &data.held_out, &cfg.rsl.decode)?;
    log.log(&label, "st", rounds.len(), 0, "val_bleu", bleu)?;
    let path = out.join("ckpt").join(&label).join(format!("st-top{top_k}.ckpt"));
    save_model(&model, None, rounds.len(), Some(bleu), &path)?;
    manifest.record("st", &path);
    manifest.write(out)?;
    println!("self-training top-{top_k} {label}: greedy BLEU {bleu:.2}");
    Ok(())
}

/// Training pairs with the translation direction swapped, for the
/// reverse model back-translation needs.
fn swap_corpus(c: &ParallelCorpus) -> Result<ParallelCorpus, CliError> {
    let pairs: Result<Vec<SentencePair>, CorpusError> = c
        .pairs
        .iter()
        .map(|p| {
            Ok(SentencePair {
                source: TokenSeq::source(p.target.content().to_vec(), &c.target_vocab)?,
                target: TokenSeq::target_from_content(p.source.ids().to_vec(), &c.source_vocab)?,
            })
        })
        .collect();
    Ok(ParallelCorpus::new(pairs?, c.target_vocab.clone(), c.source_vocab.clone())?)
}

pub fn run_bt(
    config: &Path,
    out: &Path,
    data: Option<&Path>,
    ckpt_in: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let data = load_data(&resolve_data(out, data))?;
    fs::create_dir_all(out)?;
    let log = MetricsLog::new(out, &cfg.hash(), "bt");
    let mut manifest = RunManifest::new(cfg.hash());
    let label = cfg.label(0);
    let ckpt = ckpt_dir(out, ckpt_in).join(&label).join("best.ckpt");
    let mut fwd = Checkpoint::load(&ckpt)?.into_model(0, &data.src_vocab, &data.tgt_vocab)?;

    // the reverse model reuses slot 0's architecture; its id sits past
    // the roster so its rng streams collide with nobody's
    let slot = &cfg.models[0];
    let swapped_train = swap_corpus(&data.train)?;
    let swapped_held = swap_corpus(&data.held_out)?;
    let bwd_id = cfg.models.len();
    let mut bwd = init_model(slot.arch, slot.direction, &data.tgt_vocab, &data.src_vocab, bwd_id, slot.seed)?;
    let outcome = pretrain(&mut bwd, &swapped_train, &swapped_held, &cfg.rsl.train, &cfg.rsl.decode, |ev| {
        log.log("bt-reverse", "bt", ev.epoch, ev.opt_steps, "train_nll", ev.train_nll)?;
        if let Some(b) = ev.val_bleu {
            log.log("bt-reverse", "bt", ev.epoch, ev.opt_steps, "val_bleu", b)?;
        }
        Ok(())
    })?;
    println!("reverse model: greedy BLEU {:.2} at epoch {}", outcome.best_val_bleu, outcome.best_epoch);

    let nll = back_translation(&mut fwd, &bwd, &data.train, &data.target_mono, &cfg.rsl)?;
    let bleu = greedy_bleu(&fwd, &data.held_out, &cfg.rsl.decode)?;
    log.log(&label, "bt", 0, 0, "train_nll", nll)?;
    log.log(&label, "bt", 0, 0, "val_bleu", bleu)?;
    let path = out.join("ckpt").join(&label).join("bt.ckpt");
    save_model(&fwd, None, 0, Some(bleu), &path)?;
    manifest.record("bt", &path);
    manifest.write(out)?;
    println!("back-translation {label}: greedy BLEU {bleu:.2}");
    Ok(())
}

pub fn run_decode(
    config: &Path,
    data: &Path,
    ckpts: &[PathBuf],
    input: &Path,
    output: &Path,
    scores: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let src_vocab = read_vocab(&data.join("vocab.src"))?;
    let tgt_vocab = read_vocab(&data.join("vocab.tgt"))?;
    let sources = read_mono(input, &src_vocab)?;
    let models: Result<Vec<BasicModel>, CliError> = ckpts
        .iter()
        .enumerate()
        .map(|(i, p)| Ok(Checkpoint::load(p)?.into_model(i, &src_vocab, &tgt_vocab)?))
        .collect();
    let models = models?;
    let refs: Vec<&BasicModel> = models.iter().collect();
    let hyps: Result<Vec<(TokenSeq, f64)>, DecodeError> = sources
        .sentences
        .par_iter()
        .map(|x| {
            let h = beam_search(&refs, x, &cfg.rsl.decode)?.swap_remove(0);
            Ok((h.tokens, h.normalized))
        })
        .collect();
    let hyps = hyps?;
    let mut text = String::new();
    for (h, _) in &hyps {
        text.push_str(&h.to_line(&tgt_vocab));
        text.push('\n');
    }
    fs::write(output, text)?;
    if let Some(path) = scores {
        let mut text = String::new();
        for (_, s) in &hyps {
            text.push_str(&format!("{s:.6}\n"));
        }
        fs::write(path, text)?;
    }
    println!("decoded {} sentences to {}", hyps.len(), output.display());
    Ok(())
}

/// Hypothesis lines may be empty (a decoder can emit bare eos); reference
/// lines may not.
fn read_hyp_lines(path: &Path, vocab: &Vocabulary) -> Result<Vec<TokenSeq>, CliError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .map(|line| {
            let ids: Vec<u32> = line.split_whitespace().map(|t| vocab.id(t)).collect();
            if ids.is_empty() {
                Ok(TokenSeq::empty_target())
            } else {
                Ok(TokenSeq::target_from_content(ids, vocab)?)
            }
        })
        .collect()
}

pub fn run_eval(hyp: &Path, reference: &Path, vocab: &Path) -> Result<(), CliError> {
    let vocab = read_vocab(vocab)?;
    let hyps = read_hyp_lines(hyp, &vocab)?;
    let refs = read_hyp_lines(reference, &vocab)?;
    let report = corpus_bleu(&hyps, &refs)?;
    println!("{}", report.to_json());
    println!("BLEU {:.2}", report.bleu);
    Ok(())
}

pub fn run_diversity(
    config: &Path,
    data: &Path,
    ckpts: &[PathBuf],
    output: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let src_vocab = read_vocab(&data.join("vocab.src"))?;
    let tgt_vocab = read_vocab(&data.join("vocab.tgt"))?;
    let test = read_corpus(&data.join("test.src"), &data.join("test.tgt"), &src_vocab, &tgt_vocab)?;
    let mut models = Vec::with_capacity(ckpts.len());
    let mut labels = Vec::with_capacity(ckpts.len());
    for (i, p) in ckpts.iter().enumerate() {
        models.push(Checkpoint::load(p)?.into_model(i, &src_vocab, &tgt_vocab)?);
        // the checkpoint's enclosing directory names the model
        labels.push(
            p.parent()
                .and_then(Path::file_name)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("m{i}")),
        );
    }
    let sources: Vec<TokenSeq> = test.pairs.iter().map(|p| p.source.clone()).collect();
    let refs: Vec<&BasicModel> = models.iter().collect();
    let matrix = diversity_matrix(&refs, &labels, &sources, &cfg.rsl.decode)?;
    let csv = matrix.to_csv();
    match output {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    println!("mean off-diagonal BLEU {:.2}", matrix.off_diagonal_mean());
    Ok(())
}

pub fn run_avg(inputs: &[PathBuf], output: &Path) -> Result<(), CliError> {
    let avg = average_checkpoints(inputs)?;
    if let Some(parent) = output.parent() {
        fs::create_dir_all(parent)?;
    }
    avg.save(output)?;
    println!("averaged {} checkpoints into {}", inputs.len(), output.display());
    Ok(())
}
