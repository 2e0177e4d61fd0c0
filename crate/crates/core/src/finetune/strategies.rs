use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::LabelKind;
use crate::rng::{self, Domain};
use crate::scalar::Scalar;

use super::data::{Label, TaskDataset};
use super::model::{predict, vanilla_finetune, FinetuneHyper, TaskModel};
use super::ngram::{select_similar, train_ngram_lm};

/// One line of the per-round audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAudit {
    pub stage: String,
    pub round: usize,
    /// Pseudo-labels that differ from the previous round (all of them in round 0).
    pub churn: usize,
    pub tuned_on: usize,
    pub calibrated_size: Option<usize>,
    /// Fraction of pseudo-labels equal to the reference labels of this stage.
    pub agreement_rate: Option<f64>,
}

fn round_hyper(hyper: &FinetuneHyper, stage: u64, round: usize) -> FinetuneHyper {
    FinetuneHyper {
        seed: rng::derive_seed(hyper.seed, Domain::Task, (stage << 32) | round as u64),
        ..hyper.clone()
    }
}

fn same_labels(kind: LabelKind, a: &[Label], b: &[Label], tol: f64) -> bool {
    match kind {
        LabelKind::Classification { .. } => a == b,
        LabelKind::Regression => a.iter().zip(b).all(|(x, y)| (x.score() - y.score()).abs() < tol),
    }
}

fn churn(kind: LabelKind, a: &[Label], b: &[Label], tol: f64) -> usize {
    a.iter()
        .zip(b)
        .filter(|(x, y)| !same_labels(kind, &[**x], &[**y], tol))
        .count()
}

/// Iterative self-training on the test inputs: label `D_t` with `M_i`, tune
/// on `D_s ∪ D_t^{M_i}` to get `M_{i+1}`. Stops once the pseudo-labels
/// repeat between consecutive rounds or after `hyper.max_rounds` tuning
/// rounds. Labels present on `test` are ignored.
pub fn transductive_finetune<T: Scalar>(
    m0: &TaskModel<T>,
    train: &TaskDataset,
    test: &TaskDataset,
    hyper: &FinetuneHyper,
    audit: &mut Vec<RoundAudit>,
) -> Result<TaskModel<T>> {
    transductive_from(m0, train, test, hyper, audit, 0)
}

fn transductive_from<T: Scalar>(
    m0: &TaskModel<T>,
    train: &TaskDataset,
    test: &TaskDataset,
    hyper: &FinetuneHyper,
    audit: &mut Vec<RoundAudit>,
    stage: u64,
) -> Result<TaskModel<T>> {
    if hyper.max_rounds < 1 {
        return Err(Error::Config("max_rounds must be at least 1".into()));
    }
    let unlabeled = test.without_labels();
    let mut current = m0.clone();
    let mut previous: Option<Vec<Label>> = None;
    for round in 0..hyper.max_rounds {
        let labels = predict(&current, &unlabeled, hyper.batch_size.max(32))?;
        let (changed, agreement) = match &previous {
            Some(p) => {
                let c = churn(test.kind, p, &labels, hyper.regression_tolerance);
                (c, Some(1.0 - c as f64 / labels.len().max(1) as f64))
            }
            None => (labels.len(), None),
        };
        if let Some(p) = &previous {
            if same_labels(test.kind, p, &labels, hyper.regression_tolerance) {
                audit.push(RoundAudit {
                    stage: "transductive".into(),
                    round,
                    churn: 0,
                    tuned_on: 0,
                    calibrated_size: None,
                    agreement_rate: agreement,
                });
                return Ok(current);
            }
        }
        let union = train.union(&unlabeled.with_labels(&labels)?)?;
        let base = if hyper.restart_from_m0 { m0 } else { &current };
        let mut next = vanilla_finetune(base, &union, None, &round_hyper(hyper, stage, round))?;
        next.generation = current.generation + 1;
        audit.push(RoundAudit {
            stage: "transductive".into(),
            round,
            churn: changed,
            tuned_on: union.len(),
            calibrated_size: None,
            agreement_rate: agreement,
        });
        current = next;
        previous = Some(labels);
    }
    Ok(current)
}

/// Outcome of relabeling the selected external data with `M0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Selected examples kept for tuning, carrying their pseudo-labels.
    pub calibrated: TaskDataset,
    /// Indices into the selected set of the kept examples.
    pub kept: Vec<usize>,
    pub pseudo_labels: Vec<Label>,
    /// Agreement with prior labels, when the selection was labeled.
    pub agreement_rate: Option<f64>,
}

/// Relabels `selected` with `m0`. A labeled selection keeps only examples
/// whose pseudo-label agrees with the prior label (regression: within
/// `hyper.regression_agreement`); an unlabeled one keeps every example.
pub fn calibrate<T: Scalar>(m0: &TaskModel<T>, selected: &TaskDataset, hyper: &FinetuneHyper) -> Result<Calibration> {
    let pseudo = predict(m0, selected, hyper.batch_size.max(32))?;
    let labeled = selected.is_fully_labeled() && !selected.is_empty();
    if !labeled && !selected.is_unlabeled() {
        return Err(Error::Data("external pool is partially labeled".into()));
    }
    let kept: Vec<usize> = if labeled {
        selected
            .examples
            .iter()
            .zip(&pseudo)
            .enumerate()
            .filter(|(_, (e, p))| agrees(selected.kind, e.label.unwrap(), **p, hyper.regression_agreement))
            .map(|(i, _)| i)
            .collect()
    } else {
        (0..selected.len()).collect()
    };
    if kept.is_empty() {
        return Err(Error::CalibrationEmpty {
            selected: selected.len(),
        });
    }
    let examples = kept
        .iter()
        .map(|&i| {
            let mut e = selected.examples[i].clone();
            e.label = Some(pseudo[i]);
            e
        })
        .collect();
    Ok(Calibration {
        calibrated: TaskDataset::new(examples, selected.kind, selected.split),
        agreement_rate: labeled.then(|| kept.len() as f64 / selected.len() as f64),
        kept,
        pseudo_labels: pseudo,
    })
}

fn agrees(kind: LabelKind, prior: Label, pseudo: Label, tol: f64) -> bool {
    match kind {
        LabelKind::Classification { .. } => prior == pseudo,
        LabelKind::Regression => (prior.score() - pseudo.score()).abs() <= tol,
    }
}

/// Selection budget: `hyper.selection_budget`, or `min(|D*|, 10·|D_s|)`.
pub fn default_budget(hyper: &FinetuneHyper, train: &TaskDataset, external: &TaskDataset) -> usize {
    hyper
        .selection_budget
        .unwrap_or_else(|| external.len().min(10 * train.len()))
        .max(1)
}

/// LM-based selection of external data similar to `D_s`, calibration with
/// `M0`, tuning on the calibrated data to get `M0'`, then the transductive
/// loop from `M0'`.
pub fn self_calibrated_finetune<T: Scalar>(
    m0: &TaskModel<T>,
    train: &TaskDataset,
    test: &TaskDataset,
    external: &TaskDataset,
    hyper: &FinetuneHyper,
    audit: &mut Vec<RoundAudit>,
) -> Result<TaskModel<T>> {
    if external.is_empty() {
        return Err(Error::Data("external pool is empty".into()));
    }
    if external.kind != train.kind {
        return Err(Error::Data("external pool and training set differ in label kind".into()));
    }
    let lm = train_ngram_lm(train)?;
    let selection = select_similar(external, &lm, default_budget(hyper, train, external))?;
    if selection.clamped {
        log::warn!("selection budget exceeds the external pool; using all {} examples", external.len());
    }
    let cal = calibrate(m0, &selection.selected, hyper)?;
    audit.push(RoundAudit {
        stage: "calibration".into(),
        round: 0,
        churn: 0,
        tuned_on: cal.calibrated.len(),
        calibrated_size: Some(cal.calibrated.len()),
        agreement_rate: cal.agreement_rate,
    });
    let mut m0p = vanilla_finetune(m0, &cal.calibrated, None, &round_hyper(hyper, 1, 0))?;
    m0p.generation = m0.generation + 1;
    transductive_from(&m0p, train, test, hyper, audit, 2)
}

/// Fine-tunes on `intermediate`, then re-initialises the head for `target`
/// and fine-tunes again, carrying the encoder.
pub fn continued_finetune<T: Scalar>(
    model: &TaskModel<T>,
    intermediate: &TaskDataset,
    target: &TaskDataset,
    hyper: &FinetuneHyper,
) -> Result<TaskModel<T>> {
    let start = if model.kind == intermediate.kind {
        model.clone()
    } else {
        model.with_new_head(intermediate.kind, rng::derive_seed(hyper.seed, Domain::Task, 1 << 40))
    };
    let mid = vanilla_finetune(&start, intermediate, None, &round_hyper(hyper, 3, 0))?;
    let fresh = mid.with_new_head(target.kind, rng::derive_seed(hyper.seed, Domain::Task, 1 << 41));
    vanilla_finetune(&fresh, target, None, &round_hyper(hyper, 3, 1))
}
