//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vega_core::corruption::{corrupt_indexed, CorruptedExample};
use vega_core::finetune::{
    adversarial_finetune, continued_finetune, predict, score_predictions, self_calibrated_finetune,
    transductive_finetune, vanilla_finetune, Label, Split, TaskDataset, TaskModel,
};
use vega_core::heads::LabelKind;
use vega_core::optim::AdamWState;
use vega_core::pretrain::{
    generate_synthetic_corpus, init_checkpoint, load_checkpoint, load_checkpoint_expecting, run_phase1_for,
    run_phase2_for, save_checkpoint, Checkpoint, Corpus, HeadKind, Phase,
};
use vega_core::{count_parameters, EncoderConfig, Error, Result, TokenSequence};

use crate::config::RunConfig;
use crate::dataset::load_dataset;
use crate::vocab::Vocab;

#[derive(Debug, Parser)]
#[command(name = "vega", version, about = "Pretrain and fine-tune a disentangled-attention encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a word-level vocabulary from a text file (one sentence per line).
    BuildVocab(BuildVocabArgs),
    /// Write corrupted copies of each input line as JSONL.
    Corrupt(CorruptArgs),
    /// Denoising pretraining (fresh start or resume).
    PretrainPhase1(Phase1Args),
    /// Denoising plus contrastive pretraining from a phase-1 checkpoint.
    PretrainPhase2(Phase2Args),
    /// Fine-tune a checkpoint on a labeled task.
    Finetune(FinetuneArgs),
    /// Write predictions for a dataset as JSONL.
    Predict(PredictArgs),
    /// Score a fine-tuned checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Print the parameter count of an encoder configuration.
    ParamCount(ParamCountArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides VEGA_SEED and the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Total vocabulary size including the five reserved ids.
    #[arg(long, default_value_t = 30000)]
    pub max_size: usize,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Phase1Args {
    #[command(flatten)]
    pub run: RunArgs,
    /// Text corpus; a synthetic corpus is generated when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Continue from an unfinished phase-1 checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Loss log (JSONL).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Stop after this many steps; the checkpoint can be resumed.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Phase2Args {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Completed phase-1 checkpoint or unfinished phase-2 checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Vanilla,
    Transductive,
    SelfCalibrated,
    Adversarial,
    Continued,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub strategy: Strategy,
    /// Pretrained or fine-tuned checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Labeled training data (the target task for `continued`).
    #[arg(long)]
    pub train: PathBuf,
    /// Test inputs for self-training; labels are ignored.
    #[arg(long, required_if_eq_any([("strategy", "transductive"), ("strategy", "self-calibrated")]))]
    pub test: Option<PathBuf>,
    /// External pool for self-calibration, labeled or not.
    #[arg(long, required_if_eq("strategy", "self-calibrated"))]
    pub external: Option<PathBuf>,
    /// Intermediate task for continued fine-tuning.
    #[arg(long, required_if_eq("strategy", "continued"))]
    pub intermediate: Option<PathBuf>,
    /// Validation data for best-snapshot selection (vanilla only).
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Per-round or per-step audit log (JSONL).
    #[arg(long)]
    pub audit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ParamCountArgs {
    /// Named preset (`toy` or `vega-v1`).
    #[arg(long)]
    pub preset: Option<String>,
    /// Run configuration whose `encoder` section is counted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab(a) => build_vocab(&a),
        Command::Corrupt(a) => corrupt_cmd(&a),
        Command::PretrainPhase1(a) => phase1(&a),
        Command::PretrainPhase2(a) => phase2(&a),
        Command::Finetune(a) => finetune(&a),
        Command::Predict(a) => predict_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::ParamCount(a) => param_count(&a),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_jsonl<S: Serialize>(w: &mut dyn Write, item: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, item)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn vocab_path<'a>(flag: Option<&'a Path>, cfg: &'a RunConfig) -> Result<&'a Path> {
    flag.or(cfg.paths.vocab.as_deref())
        .ok_or_else(|| Error::Config("no vocabulary given (use --vocab or paths.vocab)".into()))
}

fn build_vocab(a: &BuildVocabArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input)?;
    let vocab = Vocab::build(text.lines(), a.max_size)?;
    vocab.save(&a.output)?;
    println!("{}", vocab.len());
    Ok(())
}

#[derive(Serialize)]
struct CorruptRecord<'a> {
    index: usize,
    #[serde(flatten)]
    example: &'a CorruptedExample,
}

fn corrupt_cmd(a: &CorruptArgs) -> Result<()> {
    let cfg = RunConfig::load(a.run.config.as_deref(), a.run.seed)?;
    let vocab = Vocab::load(vocab_path(a.vocab.as_deref(), &cfg)?)?;
    let text = fs::read_to_string(&a.input)?;
    let mut out = output(a.output.as_deref())?;
    for (index, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let seq = vocab.encode(line, None, cfg.pretrain.seq_len);
        let example = corrupt_indexed(&seq, &cfg.corruption, vocab.len(), index as u64)?;
        write_jsonl(&mut out, &CorruptRecord { index, example: &example })?;
    }
    out.flush()?;
    Ok(())
}

fn pretrain_corpus(cfg: &RunConfig, corpus: Option<&Path>, vocab: Option<&Path>) -> Result<Corpus> {
    match corpus.or(cfg.paths.corpus.as_deref()) {
        Some(path) => {
            let vocab = Vocab::load(vocab_path(vocab, cfg)?)?;
            if vocab.len() != cfg.encoder.vocab_size {
                return Err(Error::ConfigMismatch {
                    field: "vocab_size".into(),
                    expected: cfg.encoder.vocab_size.to_string(),
                    found: vocab.len().to_string(),
                });
            }
            let text = fs::read_to_string(path)?;
            let sequences: Vec<TokenSequence> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| vocab.encode(l, None, cfg.pretrain.seq_len))
                .collect();
            Ok(Corpus {
                vocab_size: vocab.len(),
                sequences,
            })
        }
        None => {
            let corpus_cfg = vega_core::pretrain::CorpusConfig {
                vocab_size: cfg.encoder.vocab_size,
                ..cfg.corpus.clone()
            };
            generate_synthetic_corpus(cfg.seed, cfg.corpus_size, &corpus_cfg)
        }
    }
}

fn loss_sink(path: Option<&Path>) -> Result<Option<BufWriter<File>>> {
    path.map(|p| File::create(p).map(BufWriter::new)).transpose().map_err(Error::from)
}

fn phase1(a: &Phase1Args) -> Result<()> {
    let cfg = RunConfig::load(a.run.config.as_deref(), a.run.seed)?;
    let corpus = pretrain_corpus(&cfg, a.corpus.as_deref(), a.vocab.as_deref())?;
    let ck = match &a.resume {
        Some(p) => load_checkpoint_expecting::<f32>(p, &cfg.encoder)?,
        None => init_checkpoint(cfg.encoder.clone(), &cfg.pretrain)?,
    };
    let mut log = loss_sink(a.log.as_deref().or(cfg.paths.log.as_deref()))?;
    let mut sink = |r: &vega_core::objectives::LossReport| -> Result<()> {
        if let Some(w) = log.as_mut() {
            write_jsonl(w, r)?;
        }
        Ok(())
    };
    let ck = run_phase1_for(ck, &corpus, &cfg.pretrain, &cfg.corruption, a.max_steps.unwrap_or(usize::MAX), &mut sink)?;
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    save_checkpoint(&ck, &a.output)?;
    println!("{} step {}", ck.phase.tag(), ck.step);
    Ok(())
}

fn phase2(a: &Phase2Args) -> Result<()> {
    let cfg = RunConfig::load(a.run.config.as_deref(), a.run.seed)?;
    let corpus = pretrain_corpus(&cfg, a.corpus.as_deref(), a.vocab.as_deref())?;
    let ck = load_checkpoint_expecting::<f32>(&a.checkpoint, &cfg.encoder)?;
    let mut log = loss_sink(a.log.as_deref().or(cfg.paths.log.as_deref()))?;
    let mut sink = |r: &vega_core::objectives::LossReport| -> Result<()> {
        if let Some(w) = log.as_mut() {
            write_jsonl(w, r)?;
        }
        Ok(())
    };
    let ck = run_phase2_for(ck, &corpus, &cfg.pretrain, &cfg.corruption, a.max_steps.unwrap_or(usize::MAX), &mut sink)?;
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    save_checkpoint(&ck, &a.output)?;
    println!("{} step {}", ck.phase.tag(), ck.step);
    Ok(())
}

/// Task model from a checkpoint: its own head when it already matches
/// `kind`, otherwise a fresh head.
fn task_model(ck: Checkpoint<f32>, kind: LabelKind, seed: u64) -> (TaskModel<f32>, bool) {
    if ck.head_kind == HeadKind::Task(kind) {
        let m = TaskModel {
            encoder: ck.encoder,
            head: ck.head,
            kind,
            generation: ck.step as usize,
        };
        (m, ck.phase == Phase::Finetuned)
    } else {
        (TaskModel::from_encoder(ck.encoder, kind, seed), false)
    }
}

fn task_checkpoint(m: TaskModel<f32>, cfg: &RunConfig) -> Checkpoint<f32> {
    Checkpoint {
        encoder: m.encoder,
        head: m.head,
        head_kind: HeadKind::Task(m.kind),
        optimizer: AdamWState::new(cfg.finetune.optimizer),
        phase: Phase::Finetuned,
        step: m.generation as u64,
        phase_step: 0,
        seed: cfg.seed,
        rng_position: 0,
    }
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let cfg = RunConfig::load(a.run.config.as_deref(), a.run.seed)?;
    let ck = if a.run.config.is_some() {
        load_checkpoint_expecting::<f32>(&a.checkpoint, &cfg.encoder)?
    } else {
        load_checkpoint::<f32>(&a.checkpoint)?
    };
    let vocab = Vocab::load(vocab_path(a.vocab.as_deref(), &cfg)?)?;
    let max_len = ck.encoder.config.max_seq_len;
    let load = |p: &Path, split| load_dataset(p, &vocab, max_len, split);
    let train = load(&a.train, Split::Train)?;
    let hyper = &cfg.finetune;
    let (model, tuned) = task_model(ck, train.kind, cfg.seed);
    let m0 = |model: &TaskModel<f32>| -> Result<TaskModel<f32>> {
        if tuned {
            Ok(model.clone())
        } else {
            vanilla_finetune(model, &train, None, hyper)
        }
    };
    let mut audit = output_opt(a.audit.as_deref().or(cfg.paths.log.as_deref()))?;
    let result = match a.strategy {
        Strategy::Vanilla => {
            let validation = a.validation.as_deref().map(|p| load(p, Split::Validation)).transpose()?;
            vanilla_finetune(&model, &train, validation.as_ref(), hyper)?
        }
        Strategy::Adversarial => {
            let mut steps = Vec::new();
            let m = adversarial_finetune(&model, &train, &cfg.adversarial, hyper, &mut steps)?;
            write_all(&mut audit, &steps)?;
            m
        }
        Strategy::Transductive => {
            let test = load(a.test.as_deref().unwrap(), Split::Test)?;
            let mut rounds = Vec::new();
            let m = transductive_finetune(&m0(&model)?, &train, &test, hyper, &mut rounds)?;
            write_all(&mut audit, &rounds)?;
            m
        }
        Strategy::SelfCalibrated => {
            let test = load(a.test.as_deref().unwrap(), Split::Test)?;
            let external = load(a.external.as_deref().unwrap(), Split::External)?;
            let start = m0(&model)?;
            let mut rounds = Vec::new();
            let m = match self_calibrated_finetune(&start, &train, &test, &external, hyper, &mut rounds) {
                Err(Error::CalibrationEmpty { selected }) => {
                    log::warn!(
                        "calibration kept none of {selected} selected examples; falling back to transductive fine-tuning"
                    );
                    rounds.clear();
                    transductive_finetune(&start, &train, &test, hyper, &mut rounds)?
                }
                other => other?,
            };
            write_all(&mut audit, &rounds)?;
            m
        }
        Strategy::Continued => {
            let intermediate = load(a.intermediate.as_deref().unwrap(), Split::External)?;
            continued_finetune(&model, &intermediate, &train, hyper)?
        }
    };
    if let Some(w) = audit.as_mut() {
        w.flush()?;
    }
    save_checkpoint(&task_checkpoint(result, &cfg), &a.output)?;
    Ok(())
}

fn output_opt(path: Option<&Path>) -> Result<Option<Box<dyn Write>>> {
    path.map(|p| output(Some(p))).transpose()
}

fn write_all<S: Serialize>(w: &mut Option<Box<dyn Write>>, items: &[S]) -> Result<()> {
    if let Some(w) = w.as_mut() {
        for item in items {
            write_jsonl(w.as_mut(), item)?;
        }
    }
    Ok(())
}

fn load_task(checkpoint: &Path, vocab: &Path, input: &Path) -> Result<(TaskModel<f32>, TaskDataset)> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let kind = match ck.head_kind {
        HeadKind::Task(k) => k,
        HeadKind::Rtd => {
            return Err(Error::PhaseOrder {
                expected: "finetuned".into(),
                found: ck.phase.tag().into(),
            })
        }
    };
    let vocab = Vocab::load(vocab)?;
    let data = load_dataset(input, &vocab, ck.encoder.config.max_seq_len, Split::Test)?;
    if data.kind != kind {
        return Err(Error::Data(format!("checkpoint predicts {kind:?}, dataset declares {:?}", data.kind)));
    }
    let seed = ck.seed;
    Ok((task_model(ck, kind, seed).0, data))
}

#[derive(Serialize)]
struct Prediction {
    index: usize,
    label: Label,
}

fn predict_cmd(a: &PredictArgs) -> Result<()> {
    let (model, data) = load_task(&a.checkpoint, &a.vocab, &a.input)?;
    let labels = predict(&model, &data, 32)?;
    let mut out = output(a.output.as_deref())?;
    for (index, label) in labels.into_iter().enumerate() {
        write_jsonl(&mut out, &Prediction { index, label })?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    metric: &'static str,
    value: f64,
    examples: usize,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (model, data) = load_task(&a.checkpoint, &a.vocab, &a.input)?;
    if !data.is_fully_labeled() || data.is_empty() {
        return Err(Error::Data("evaluation needs a non-empty labeled dataset".into()));
    }
    let value = score_predictions(&data, &predict(&model, &data, 32)?);
    let metric = match data.kind {
        LabelKind::Classification { .. } => "accuracy",
        LabelKind::Regression => "neg_mse",
    };
    let report = EvalReport {
        metric,
        value,
        examples: data.len(),
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn param_count(a: &ParamCountArgs) -> Result<()> {
    let config = match (&a.preset, &a.config) {
        (Some(name), _) => {
            EncoderConfig::preset(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?
        }
        (None, Some(path)) => RunConfig::load(Some(path), None)?.encoder,
        (None, None) => unreachable!("clap requires one of --preset/--config"),
    };
    config.validate()?;
    println!("{}", count_parameters(&config));
    Ok(())
}
