use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::LabelKind;
use crate::tokens::TokenSequence;

/// Gold or pseudo label of one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Score(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Score(_) => None,
        }
    }

    pub fn score(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Score(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Labeled training data `D_s`.
    Train,
    /// Evaluation data `D_t`; labels, if present, are never trained on.
    Test,
    /// External pool `D*`, labeled or not.
    External,
    Validation,
}

/// One input (single sentence or packed pair) and its optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub tokens: TokenSequence,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub examples: Vec<TaskExample>,
    pub kind: LabelKind,
    pub split: Split,
}

impl TaskDataset {
    pub fn new(examples: Vec<TaskExample>, kind: LabelKind, split: Split) -> Self {
        TaskDataset { examples, kind, split }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.examples.iter().all(|e| e.label.is_some())
    }

    pub fn is_unlabeled(&self) -> bool {
        self.examples.iter().all(|e| e.label.is_none())
    }

    pub fn labels(&self) -> Vec<Option<Label>> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Copy with `labels[i]` attached to example `i`.
    pub fn with_labels(&self, labels: &[Label]) -> Result<TaskDataset> {
        if labels.len() != self.len() {
            return Err(Error::Data(format!(
                "{} labels for {} examples",
                labels.len(),
                self.len()
            )));
        }
        Ok(TaskDataset {
            examples: self
                .examples
                .iter()
                .zip(labels)
                .map(|(e, &l)| TaskExample {
                    tokens: e.tokens.clone(),
                    label: Some(l),
                })
                .collect(),
            kind: self.kind,
            split: self.split,
        })
    }

    /// Copy with every label removed.
    pub fn without_labels(&self) -> TaskDataset {
        TaskDataset {
            examples: self
                .examples
                .iter()
                .map(|e| TaskExample {
                    tokens: e.tokens.clone(),
                    label: None,
                })
                .collect(),
            kind: self.kind,
            split: self.split,
        }
    }

    /// `self ∪ other` in that order; both must share a label kind.
    pub fn union(&self, other: &TaskDataset) -> Result<TaskDataset> {
        if self.kind != other.kind {
            return Err(Error::Data(format!(
                "cannot join {:?} and {:?} datasets",
                self.kind, other.kind
            )));
        }
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Ok(TaskDataset {
            examples,
            kind: self.kind,
            split: self.split,
        })
    }

    /// Every example labeled, classes within range, scores finite.
    pub fn check_trainable(&self) -> Result<()> {
        for (i, e) in self.examples.iter().enumerate() {
            match (self.kind, e.label) {
                (_, None) => return Err(Error::Data(format!("example {i} has no label"))),
                (LabelKind::Classification { num_classes }, Some(Label::Class(c))) if c >= num_classes => {
                    return Err(Error::Data(format!(
                        "example {i}: label {c} outside {num_classes} classes"
                    )))
                }
                (LabelKind::Classification { .. }, Some(Label::Class(_))) => {}
                (LabelKind::Regression, Some(Label::Score(s))) if s.is_finite() => {}
                (kind, Some(l)) => {
                    return Err(Error::Data(format!("example {i}: label {l:?} does not fit {kind:?}")))
                }
            }
        }
        Ok(())
    }
}

/// Accuracy (classification) or negative mean squared error (regression)
/// of `predicted` against the gold labels of `gold`; unlabeled gold
/// examples are skipped.
pub fn score_predictions(gold: &TaskDataset, predicted: &[Label]) -> f64 {
    let pairs: Vec<(Label, Label)> = gold
        .examples
        .iter()
        .zip(predicted)
        .filter_map(|(e, &p)| e.label.map(|g| (g, p)))
        .collect();
    if pairs.is_empty() {
        return f64::NAN;
    }
    match gold.kind {
        LabelKind::Classification { .. } => {
            pairs.iter().filter(|(g, p)| g == p).count() as f64 / pairs.len() as f64
        }
        LabelKind::Regression => {
            -pairs.iter().map(|(g, p)| (g.score() - p.score()).powi(2)).sum::<f64>() / pairs.len() as f64
        }
    }
}
