use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{cls_representation, encoder_forward, EncoderState, ForwardOptions, SequenceBatch};
use crate::error::{Error, Result};
use crate::heads::{init_task_head, task_logits, LabelKind};
use crate::objectives::{mse_loss, symmetric_kl};
use crate::optim::{linear_schedule, AdamWConfig, AdamWState};
use crate::params::{Bindings, ParamSet};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokens::TokenSequence;

use super::data::{score_predictions, Label, TaskDataset};

/// Encoder plus task head at one point of a fine-tuning lineage. Tuning never
/// mutates a snapshot; it returns the next generation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel<T> {
    pub encoder: EncoderState<T>,
    pub head: ParamSet<T>,
    pub kind: LabelKind,
    pub generation: usize,
}

impl<T: Scalar> TaskModel<T> {
    /// Wraps an encoder with a freshly initialised head; the head depends on
    /// `seed` and `kind` only.
    pub fn from_encoder(encoder: EncoderState<T>, kind: LabelKind, seed: u64) -> Self {
        let head = fresh_head(encoder.config.hidden_size, kind, seed);
        TaskModel {
            encoder,
            head,
            kind,
            generation: 0,
        }
    }

    /// Same encoder, new head for `kind`.
    pub fn with_new_head(&self, kind: LabelKind, seed: u64) -> Self {
        TaskModel {
            encoder: self.encoder.clone(),
            head: fresh_head(self.encoder.config.hidden_size, kind, seed),
            kind,
            generation: self.generation,
        }
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bindings {
        let mut b = if trainable {
            self.encoder.params.bind(tape)
        } else {
            self.encoder.params.bind_frozen(tape)
        };
        b.extend(if trainable {
            self.head.bind(tape)
        } else {
            self.head.bind_frozen(tape)
        });
        b
    }
}

fn fresh_head<T: Scalar>(d: usize, kind: LabelKind, seed: u64) -> ParamSet<T> {
    let mut r = rng::stream(seed, Domain::Init, 2);
    init_task_head(d, kind, &mut r)
}

/// Fine-tuning hyperparameters shared by every strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneHyper {
    /// Optimisation steps per tuning run (per round for the iterative strategies).
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Validation interval in steps when a validation set is supplied.
    pub eval_every: usize,
    /// Cap on transductive rounds.
    pub max_rounds: usize,
    /// Re-tune from `M0` each round instead of from the latest model.
    pub restart_from_m0: bool,
    /// Largest per-example change still counted as "unchanged" for regression
    /// pseudo-labels.
    pub regression_tolerance: f64,
    /// Prior/pseudo label distance under which regression labels agree.
    pub regression_agreement: f64,
    /// External examples kept by the LM selector; `None` means
    /// `min(|D*|, 10·|D_s|)`.
    pub selection_budget: Option<usize>,
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        FinetuneHyper {
            steps: 200,
            batch_size: 16,
            warmup_frac: 0.1,
            clip_norm: 1.0,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            seed: 0,
            eval_every: 50,
            max_rounds: 5,
            restart_from_m0: false,
            regression_tolerance: 1e-3,
            regression_agreement: 0.5,
            selection_budget: None,
        }
    }
}

/// Adversarial perturbation of the normalised embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvConfig {
    /// Per-token L2 bound on the perturbation.
    pub epsilon: f64,
    pub ascent_steps: usize,
    /// Weight of the clean-vs-perturbed consistency term.
    pub beta: f64,
    /// Scale of the random starting perturbation relative to `epsilon`.
    pub init_scale: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            epsilon: 1e-2,
            ascent_steps: 1,
            beta: 1.0,
            init_scale: 1e-3,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("epsilon and beta must be ≥ 0".into()));
        }
        if self.ascent_steps == 0 {
            return Err(Error::Config("ascent_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-step record of an adversarial run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvStepAudit {
    pub step: usize,
    pub task_loss: f64,
    pub consistency: f64,
    pub max_delta_norm: f64,
}

fn batch_of(examples: &[&TokenSequence]) -> Result<SequenceBatch> {
    let seqs: Vec<TokenSequence> = examples.iter().map(|s| (*s).clone()).collect();
    SequenceBatch::from_sequences(&seqs)
}

fn forward_logits<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bindings,
    model: &TaskModel<T>,
    batch: &SequenceBatch,
    opts: ForwardOptions<'_>,
) -> Result<Var> {
    let out = encoder_forward(tape, b, &model.encoder.config, batch, opts)?;
    let cls = cls_representation(tape, out.hidden)?;
    task_logits(tape, b, cls)
}

fn task_loss<T: Scalar>(tape: &mut Tape<T>, kind: LabelKind, logits: Var, labels: &[Label]) -> Result<Var> {
    match kind {
        LabelKind::Classification { .. } => {
            let y: Vec<usize> = labels.iter().map(|l| l.class().unwrap_or(usize::MAX)).collect();
            tape.cross_entropy(logits, &y, &vec![true; y.len()])
        }
        LabelKind::Regression => {
            let y: Vec<T> = labels.iter().map(|l| T::from_f64_lossy(l.score())).collect();
            mse_loss(tape, logits, &y)
        }
    }
}

/// Symmetric KL of the output distributions (classification) or squared
/// output difference (regression).
fn consistency<T: Scalar>(tape: &mut Tape<T>, kind: LabelKind, a: Var, b: Var) -> Result<Var> {
    match kind {
        LabelKind::Classification { .. } => symmetric_kl(tape, a, b),
        LabelKind::Regression => {
            let d = tape.sub(a, b)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.mean(sq))
        }
    }
}

fn decode<T: Scalar>(kind: LabelKind, row: &[T]) -> Label {
    match kind {
        LabelKind::Classification { .. } => {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            Label::Class(best)
        }
        LabelKind::Regression => Label::Score(row[0].to_f64_lossy()),
    }
}

/// Evaluation-mode predictions for every example, in order.
pub fn predict<T: Scalar>(model: &TaskModel<T>, data: &TaskDataset, batch_size: usize) -> Result<Vec<Label>> {
    let mut out = Vec::with_capacity(data.len());
    let refs: Vec<&TokenSequence> = data.examples.iter().map(|e| &e.tokens).collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = batch_of(chunk)?;
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let logits = forward_logits(&mut tape, &b, model, &batch, ForwardOptions::eval())?;
        let k = model.kind.outputs();
        out.extend(tape.data(logits).chunks_exact(k).map(|r| decode(model.kind, r)));
    }
    Ok(out)
}

/// Labeled copy of `data` carrying the model's predictions.
pub fn predict_labels<T: Scalar>(model: &TaskModel<T>, data: &TaskDataset) -> Result<TaskDataset> {
    let labels = predict(model, data, 32)?;
    data.with_labels(&labels)
}

fn per_token_norms<T: Scalar>(delta: &[T], d: usize) -> Vec<f64> {
    delta
        .chunks_exact(d)
        .map(|r| r.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Ascent on the consistency term w.r.t. the perturbation, then projection
/// onto the per-token ε-ball.
fn adversarial_delta<T: Scalar>(
    model: &TaskModel<T>,
    batch: &SequenceBatch,
    clean_logits: &Tensor<T>,
    adv: &AdvConfig,
    seed: u64,
    step: u64,
) -> Result<Tensor<T>> {
    let d = model.encoder.config.hidden_size;
    let rows = batch.n * batch.m;
    let eps = adv.epsilon;
    let mut noise = rng::stream(seed, Domain::Adversarial, step);
    let mut delta: Vec<T> = (0..rows * d)
        .map(|_| T::from_f64_lossy(rng::normal(&mut noise) * eps * adv.init_scale / (d as f64).sqrt()))
        .collect();
    for _ in 0..adv.ascent_steps {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let dv = tape.param(Tensor::new(&[rows, d], delta.clone())?);
        let mut drop = rng::stream(seed, Domain::Dropout, step);
        let opts = ForwardOptions {
            dropout_rng: Some(&mut drop),
            perturbation: Some(dv),
            ..Default::default()
        };
        let lp = forward_logits(&mut tape, &b, model, batch, opts)?;
        let lc = tape.constant(clean_logits.clone());
        let c = consistency(&mut tape, model.kind, lc, lp)?;
        tape.backward(c)?;
        let g = tape.grad(dv).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); rows * d]);
        for (dr, gr) in delta.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
            let gn = gr.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            if gn > 0.0 {
                let s = T::from_f64_lossy(eps / gn);
                for (x, &gv) in dr.iter_mut().zip(gr) {
                    *x += s * gv;
                }
            }
        }
        project(&mut delta, d, eps);
    }
    Tensor::new(&[rows, d], delta)
}

fn project<T: Scalar>(delta: &mut [T], d: usize, eps: f64) {
    for r in delta.chunks_exact_mut(d) {
        let n = r.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if n > eps {
            // shrink slightly below ε so rounding never leaves the ball
            let s = T::from_f64_lossy(eps / n * (1.0 - 1e-6));
            r.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// AdamW fine-tuning of encoder and head on `train`. With `adv`, each step
/// adds the adversarial consistency term; `epsilon = 0` takes the plain step.
/// With `validation`, the best-scoring snapshot (checked every
/// `hyper.eval_every` steps and at the end) is returned.
pub fn tune<T: Scalar>(
    model: &TaskModel<T>,
    train: &TaskDataset,
    validation: Option<&TaskDataset>,
    hyper: &FinetuneHyper,
    adv: Option<&AdvConfig>,
    audit: &mut Vec<AdvStepAudit>,
) -> Result<TaskModel<T>> {
    if hyper.steps == 0 {
        return Ok(model.clone());
    }
    if train.kind != model.kind {
        return Err(Error::Data(format!(
            "model head is {:?}, dataset is {:?}",
            model.kind, train.kind
        )));
    }
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    train.check_trainable()?;
    if let Some(a) = adv {
        a.validate()?;
    }
    let mut cur = model.clone();
    cur.generation += 1;
    let mut opt = AdamWState::new(hyper.optimizer);
    let mut best: Option<(f64, TaskModel<T>)> = None;
    let n = hyper.batch_size.min(train.len()).max(1);

    for step in 0..hyper.steps {
        let key = step as u64;
        let mut pick = rng::stream(hyper.seed, Domain::Task, key);
        let idx = rng::sample_without_replacement(&mut pick, train.len(), n);
        let seqs: Vec<&TokenSequence> = idx.iter().map(|&i| &train.examples[i].tokens).collect();
        let labels: Vec<Label> = idx.iter().map(|&i| train.examples[i].label.unwrap()).collect();
        let batch = batch_of(&seqs)?;

        let mut tape = Tape::new();
        let b = cur.bind(&mut tape, true);
        let mut drop = rng::stream(hyper.seed, Domain::Dropout, key);
        let logits = forward_logits(&mut tape, &b, &cur, &batch, ForwardOptions::train(&mut drop))?;
        let task = task_loss(&mut tape, cur.kind, logits, &labels)?;
        let loss = match adv {
            Some(a) if a.epsilon > 0.0 => {
                let clean = tape.value(logits).clone();
                let delta = adversarial_delta(&cur, &batch, &clean, a, hyper.seed, key)?;
                let max_norm = per_token_norms(delta.data(), cur.encoder.config.hidden_size)
                    .into_iter()
                    .fold(0.0, f64::max);
                let dv = tape.constant(delta);
                let mut drop = rng::stream(hyper.seed, Domain::Dropout, key);
                let opts = ForwardOptions {
                    dropout_rng: Some(&mut drop),
                    perturbation: Some(dv),
                    ..Default::default()
                };
                let lp = forward_logits(&mut tape, &b, &cur, &batch, opts)?;
                let c = consistency(&mut tape, cur.kind, logits, lp)?;
                audit.push(AdvStepAudit {
                    step,
                    task_loss: tape.value(task).item().to_f64_lossy(),
                    consistency: tape.value(c).item().to_f64_lossy(),
                    max_delta_norm: max_norm,
                });
                let w = tape.scale(c, T::from_f64_lossy(a.beta));
                tape.add(task, w)?
            }
            Some(_) => {
                audit.push(AdvStepAudit {
                    step,
                    task_loss: tape.value(task).item().to_f64_lossy(),
                    consistency: 0.0,
                    max_delta_norm: 0.0,
                });
                task
            }
            None => task,
        };
        tape.backward(loss)?;
        let mut grads = b.grads(&tape);
        grads.clip_global_norm(hyper.clip_norm);
        let lr = linear_schedule(hyper.optimizer.lr, step, hyper.steps, hyper.warmup_frac);
        opt.step_with_lr(&mut [&mut cur.encoder.params, &mut cur.head], &grads, lr)?;

        if let Some(v) = validation {
            let last = step + 1 == hyper.steps;
            if last || (hyper.eval_every > 0 && (step + 1) % hyper.eval_every == 0) {
                let s = score_predictions(v, &predict(&cur, v, 32)?);
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, cur.clone()));
                }
            }
        }
    }
    Ok(match best {
        Some((_, m)) => m,
        None => cur,
    })
}

/// Plain fine-tuning (no adversarial term).
pub fn vanilla_finetune<T: Scalar>(
    model: &TaskModel<T>,
    train: &TaskDataset,
    validation: Option<&TaskDataset>,
    hyper: &FinetuneHyper,
) -> Result<TaskModel<T>> {
    tune(model, train, validation, hyper, None, &mut Vec::new())
}

/// Fine-tuning with the clean-vs-perturbed consistency term on layer-normalised
/// embeddings. Per-step losses and perturbation norms go to `audit`.
pub fn adversarial_finetune<T: Scalar>(
    model: &TaskModel<T>,
    train: &TaskDataset,
    adv: &AdvConfig,
    hyper: &FinetuneHyper,
    audit: &mut Vec<AdvStepAudit>,
) -> Result<TaskModel<T>> {
    tune(model, train, None, hyper, Some(adv), audit)
}
