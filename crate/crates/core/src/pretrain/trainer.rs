use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corruption::{corrupt, CorruptionConfig, NUM_NOISE_CLASSES};
use crate::encoder::{cls_representation, encoder_forward, EncoderConfig, EncoderState, ForwardOptions, SequenceBatch};
use crate::error::{Error, Result};
use crate::heads::{init_rtd_head, rtd_logits};
use crate::objectives::{alignment_gap, combined_loss, contrastive_loss, rtd_loss, ContrastiveBatch, LossReport};
use crate::optim::{linear_schedule, AdamWConfig, AdamWState};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;
use crate::tokens::{TokenSequence, SEP};

use super::checkpoint::{Checkpoint, HeadKind, Phase};
use super::corpus::Corpus;

/// Step counts and optimisation settings for both pretraining phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSchedule {
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub batch_size: usize,
    /// Sequences longer than this are truncated (keeping the final `[SEP]`).
    pub seq_len: usize,
    pub warmup_frac: f64,
    /// Weight of the contrastive term in phase 2.
    pub lambda: f64,
    pub temperature: f64,
    pub clip_norm: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        PretrainSchedule {
            phase1_steps: 2000,
            phase2_steps: 500,
            batch_size: 16,
            seq_len: 64,
            warmup_frac: 0.06,
            lambda: 0.1,
            temperature: 0.05,
            clip_norm: 1.0,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainSchedule {
    /// One million phase-1 steps followed by one hundred thousand phase-2 steps.
    pub fn full_scale() -> Self {
        PretrainSchedule {
            phase1_steps: 1_000_000,
            phase2_steps: 100_000,
            seq_len: 512,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.seq_len < 3 {
            return Err(Error::Config("seq_len must leave room for [CLS], a token and [SEP]".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac {} outside [0, 1]", self.warmup_frac)));
        }
        if !(self.lambda >= 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("lambda must be ≥ 0 and temperature > 0".into()));
        }
        Ok(())
    }
}

/// Fresh model, RTD head and optimizer, tagged [`Phase::Init`].
pub fn init_checkpoint<T: Scalar>(config: EncoderConfig, schedule: &PretrainSchedule) -> Result<Checkpoint<T>> {
    let encoder = EncoderState::new(config, schedule.seed)?;
    let mut rng = rng::stream(schedule.seed, Domain::Init, 1);
    let head = init_rtd_head(encoder.config.hidden_size, &mut rng);
    Ok(Checkpoint {
        encoder,
        head,
        head_kind: HeadKind::Rtd,
        optimizer: AdamWState::new(schedule.optimizer),
        phase: Phase::Init,
        step: 0,
        phase_step: 0,
        seed: schedule.seed,
        rng_position: 0,
    })
}

/// Clean and corrupted views of the same sentences.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    pub clean: SequenceBatch,
    pub corrupted: SequenceBatch,
    /// Row-major `n × m` noise labels.
    pub labels: Vec<u8>,
}

fn fit(seq: &TokenSequence, seq_len: usize) -> TokenSequence {
    if seq.len() <= seq_len {
        return seq.clone();
    }
    let mut ids = seq.ids[..seq_len - 1].to_vec();
    ids.push(SEP);
    TokenSequence::new(ids)
}

/// Corrupts `seqs`, drawing example `i`'s corruption from
/// `(seed, Corruption, stream_base + i)`.
pub fn make_noisy_batch(
    seqs: &[TokenSequence],
    corruption: &CorruptionConfig,
    vocab_size: usize,
    seed: u64,
    stream_base: u64,
) -> Result<NoisyBatch> {
    let mut corrupted = Vec::with_capacity(seqs.len());
    let mut examples = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        let mut r = rng::stream(seed, Domain::Corruption, stream_base + i as u64);
        let ex = corrupt(s, corruption, vocab_size, &mut r)?;
        corrupted.push(TokenSequence::new(ex.corrupted_ids.clone()));
        examples.push(ex);
    }
    let clean = SequenceBatch::from_sequences(seqs)?;
    let corrupted = SequenceBatch::padded(&corrupted, clean.m)?;
    let mut labels = vec![0u8; clean.n * clean.m];
    for (i, ex) in examples.iter().enumerate() {
        labels[i * clean.m..i * clean.m + ex.noise_labels.len()].copy_from_slice(&ex.noise_labels);
    }
    Ok(NoisyBatch {
        clean,
        corrupted,
        labels,
    })
}

/// Batch for stream position `position`: sentence indices from
/// `(seed, BatchOrder, position)`, corruption from `(seed, Corruption, position·n + i)`.
pub fn draw_batch(
    corpus: &Corpus,
    schedule: &PretrainSchedule,
    corruption: &CorruptionConfig,
    seed: u64,
    position: u64,
) -> Result<NoisyBatch> {
    let n = schedule.batch_size;
    if corpus.len() < n {
        return Err(Error::Data(format!(
            "corpus has {} sequences, fewer than one batch of {n}",
            corpus.len()
        )));
    }
    let mut r = rng::stream(seed, Domain::BatchOrder, position);
    let idx = rng::sample_without_replacement(&mut r, corpus.len(), n);
    let seqs: Vec<TokenSequence> = idx.iter().map(|&i| fit(&corpus.sequences[i], schedule.seq_len)).collect();
    make_noisy_batch(&seqs, corruption, corpus.vocab_size, seed, position * n as u64)
}

/// One optimisation step at learning rate `lr`. `lambda = None` is the
/// phase-1 step (single corrupted forward); `Some(λ)` adds the clean forward
/// and the contrastive term.
pub fn train_step<T: Scalar>(
    ck: &mut Checkpoint<T>,
    corpus: &Corpus,
    schedule: &PretrainSchedule,
    corruption: &CorruptionConfig,
    lr: f64,
    lambda: Option<f64>,
) -> Result<LossReport> {
    let batch = draw_batch(corpus, schedule, corruption, ck.seed, ck.rng_position)?;
    let config = ck.encoder.config.clone();
    let mut tape = Tape::new();
    let mut b = ck.encoder.params.bind(&mut tape);
    b.extend(ck.head.bind(&mut tape));

    let mut drop = rng::stream(ck.seed, Domain::Dropout, ck.rng_position);
    let out_c = encoder_forward(&mut tape, &b, &config, &batch.corrupted, ForwardOptions::train(&mut drop))?;
    let logits = rtd_logits(&mut tape, &b, out_c.hidden)?;
    let rtd = rtd_loss(&mut tape, logits, &batch.labels, &batch.corrupted.special_mask)?;

    let (loss, con_value, weight) = match lambda {
        None => (rtd, 0.0, 0.0),
        Some(l) => {
            let mut drop2 = rng::stream(ck.seed, Domain::ContrastiveDropout, ck.rng_position);
            let out_x = encoder_forward(&mut tape, &b, &config, &batch.clean, ForwardOptions::train(&mut drop2))?;
            let hc = cls_representation(&mut tape, out_x.hidden)?;
            let hs = cls_representation(&mut tape, out_c.hidden)?;
            let con = contrastive_loss(
                &mut tape,
                &ContrastiveBatch {
                    h_clean: hc,
                    h_corrupt: hs,
                    temperature: schedule.temperature,
                },
            )?;
            let v = tape.value(con).item().to_f64_lossy();
            (combined_loss(&mut tape, rtd, con, l)?, v, l)
        }
    };
    tape.backward(loss)?;
    let mut grads = b.grads(&tape);
    grads.clip_global_norm(schedule.clip_norm);
    ck.optimizer
        .step_with_lr(&mut [&mut ck.encoder.params, &mut ck.head], &grads, lr)?;

    let report = LossReport {
        step: ck.step as usize,
        phase: ck.phase.tag().to_string(),
        denoising_loss: tape.value(rtd).item().to_f64_lossy(),
        contrastive_loss: con_value,
        combined_loss: tape.value(loss).item().to_f64_lossy(),
        combination_weight: weight,
        supervised_fraction: 1.0,
        lr,
    };
    ck.step += 1;
    ck.phase_step += 1;
    ck.rng_position += 1;
    Ok(report)
}

fn run_phase<T: Scalar>(
    mut ck: Checkpoint<T>,
    corpus: &Corpus,
    schedule: &PretrainSchedule,
    corruption: &CorruptionConfig,
    max_steps: usize,
    two: bool,
    sink: &mut dyn FnMut(&LossReport) -> Result<()>,
) -> Result<Checkpoint<T>> {
    schedule.validate()?;
    corruption.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    let (total, done_tag) = if two {
        (schedule.phase2_steps, Phase::Phase2Complete)
    } else {
        (schedule.phase1_steps, Phase::Phase1Complete)
    };
    let lambda = two.then_some(schedule.lambda);
    let mut budget = max_steps;
    while (ck.phase_step as usize) < total && budget > 0 {
        let lr = linear_schedule(schedule.optimizer.lr, ck.phase_step as usize, total, schedule.warmup_frac);
        let report = train_step(&mut ck, corpus, schedule, corruption, lr, lambda)?;
        sink(&report)?;
        budget -= 1;
    }
    if ck.phase_step as usize >= total {
        ck.phase = done_tag;
    }
    Ok(ck)
}

/// Denoising-only pretraining from a fresh ([`Phase::Init`]) or partially
/// trained ([`Phase::Phase1`]) state, for at most `max_steps` further steps.
/// The result is tagged [`Phase::Phase1Complete`] once
/// `schedule.phase1_steps` steps are done.
pub fn run_phase1_for<T: Scalar>(
    mut ck: Checkpoint<T>,
    corpus: &Corpus,
    schedule: &PretrainSchedule,
    corruption: &CorruptionConfig,
    max_steps: usize,
    sink: &mut dyn FnMut(&LossReport) -> Result<()>,
) -> Result<Checkpoint<T>> {
    match ck.phase {
        Phase::Init => {
            ck.phase = Phase::Phase1;
            ck.phase_step = 0;
        }
        Phase::Phase1 => {}
        other => {
            return Err(Error::PhaseOrder {
                expected: "init or phase1".into(),
                found: other.tag().into(),
            })
        }
    }
    run_phase(ck, corpus, schedule, corruption, max_steps, false, sink)
}

pub fn run_phase1<T: Scalar>(
    ck: Checkpoint<T>,
    corpus: &Corpus,
    schedule: &PretrainSchedule,
    corruption: &CorruptionConfig,
    sink: &mut dyn FnMut(&LossReport) -> Result<()>,
) -> Result<Checkpoint<T>> {
    run_phase1_for(ck, corpus, schedule, corruption, usize::MAX, sink)
}

/// Denoising plus contrastive pretraining continued from a completed phase-1
/// checkpoint (or resumed from [`Phase::Phase2`]). Optimizer moments carry
/// over; the learning rate follows a fresh warmup/decay over `phase2_steps`.
pub fn run_phase2_for<T: Scalar>(
    mut ck: Checkpoint<T>,
    corpus: &Corpus,
    schedule: &PretrainSchedule,
    corruption: &CorruptionConfig,
    max_steps: usize,
    sink: &mut dyn FnMut(&LossReport) -> Result<()>,
) -> Result<Checkpoint<T>> {
    match ck.phase {
        Phase::Phase1Complete => {
            ck.phase = Phase::Phase2;
            ck.phase_step = 0;
        }
        Phase::Phase2 => {}
        other => {
            return Err(Error::PhaseOrder {
                expected: "phase1-complete or phase2".into(),
                found: other.tag().into(),
            })
        }
    }
    run_phase(ck, corpus, schedule, corruption, max_steps, true, sink)
}

pub fn run_phase2<T: Scalar>(
    ck: Checkpoint<T>,
    corpus: &Corpus,
    schedule: &PretrainSchedule,
    corruption: &CorruptionConfig,
    sink: &mut dyn FnMut(&LossReport) -> Result<()>,
) -> Result<Checkpoint<T>> {
    run_phase2_for(ck, corpus, schedule, corruption, usize::MAX, sink)
}

/// Token-level ternary noise classification quality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseMetrics {
    /// `confusion[gold][predicted]` over supervised positions.
    pub confusion: [[usize; NUM_NOISE_CLASSES]; NUM_NOISE_CLASSES],
}

impl NoiseMetrics {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hit: usize = (0..NUM_NOISE_CLASSES).map(|c| self.confusion[c][c]).sum();
        hit as f64 / self.total().max(1) as f64
    }

    pub fn recall(&self, class: usize) -> f64 {
        let row: usize = self.confusion[class].iter().sum();
        if row == 0 {
            return f64::NAN;
        }
        self.confusion[class][class] as f64 / row as f64
    }

    /// Mean per-class recall; 1/3 for an uninformative classifier.
    pub fn balanced_accuracy(&self) -> f64 {
        let r: Vec<f64> = (0..NUM_NOISE_CLASSES).map(|c| self.recall(c)).filter(|r| !r.is_nan()).collect();
        r.iter().sum::<f64>() / r.len().max(1) as f64
    }
}

/// Evaluation-mode noise classification over `num_batches` held-out draws
/// (streams keyed by `eval_seed`, disjoint from training positions).
pub fn evaluate_noise_classification<T: Scalar>(
    ck: &Checkpoint<T>,
    corpus: &Corpus,
    schedule: &PretrainSchedule,
    corruption: &CorruptionConfig,
    eval_seed: u64,
    num_batches: usize,
) -> Result<NoiseMetrics> {
    let mut confusion = [[0usize; NUM_NOISE_CLASSES]; NUM_NOISE_CLASSES];
    let held = rng::derive_seed(eval_seed, Domain::Heldout, 0);
    for k in 0..num_batches {
        let batch = draw_batch(corpus, schedule, corruption, held, k as u64)?;
        let mut tape = Tape::new();
        let mut b = ck.encoder.params.bind_frozen(&mut tape);
        b.extend(ck.head.bind_frozen(&mut tape));
        let out = encoder_forward(&mut tape, &b, &ck.encoder.config, &batch.corrupted, ForwardOptions::eval())?;
        let logits = rtd_logits(&mut tape, &b, out.hidden)?;
        for (pos, row) in tape.data(logits).chunks_exact(NUM_NOISE_CLASSES).enumerate() {
            if batch.corrupted.special_mask[pos] {
                continue;
            }
            let pred = (0..NUM_NOISE_CLASSES)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
                .unwrap();
            confusion[batch.labels[pos] as usize][pred] += 1;
        }
    }
    Ok(NoiseMetrics { confusion })
}

/// Alignment gap of `[CLS]` representations for clean vs corrupted copies of
/// `seqs`, in evaluation mode.
pub fn representation_gap<T: Scalar>(
    encoder: &EncoderState<T>,
    seqs: &[TokenSequence],
    corruption: &CorruptionConfig,
    seed: u64,
) -> Result<f64> {
    let batch = make_noisy_batch(seqs, corruption, encoder.config.vocab_size, rng::derive_seed(seed, Domain::Heldout, 1), 0)?;
    let mut tape = Tape::new();
    let b = encoder.params.bind_frozen(&mut tape);
    let x = encoder_forward(&mut tape, &b, &encoder.config, &batch.clean, ForwardOptions::eval())?;
    let c = encoder_forward(&mut tape, &b, &encoder.config, &batch.corrupted, ForwardOptions::eval())?;
    let hx = cls_representation(&mut tape, x.hidden)?;
    let hc = cls_representation(&mut tape, c.hidden)?;
    Ok(alignment_gap(tape.data(hx), tape.data(hc), encoder.config.hidden_size))
}

/// Means of consecutive non-overlapping windows.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window.max(1))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}

/// Longest run of consecutive window means that each exceed their predecessor.
pub fn longest_increase_run(means: &[f64]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for w in means.windows(2) {
        if w[1] > w[0] {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}
