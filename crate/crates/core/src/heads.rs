//! Output heads attached on top of the encoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corruption::NUM_NOISE_CLASSES;
use crate::encoder::WORD_EMBEDDINGS;
use crate::error::{Error, Result};
use crate::params::{truncated_normal, Bindings, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn flatten<T: Scalar>(tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
    let s = tape.shape(hidden).to_vec();
    match s.len() {
        2 => Ok(hidden),
        3 => tape.reshape(hidden, &[s[0] * s[1], s[2]]),
        _ => Err(Error::Rank(format!("expected [n, m, d] hidden states, got {s:?}"))),
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b.var(&format!("{name}.weight")))?;
    tape.add_bias(y, b.var(&format!("{name}.bias")))
}

/// Dense + GELU + 3-way projection, applied per token.
pub fn init_rtd_head<T: Scalar>(d: usize, rng: &mut Rng) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.insert("rtd_head.dense.weight", truncated_normal(&[d, d], 0.02, rng)).unwrap();
    p.insert("rtd_head.dense.bias", Tensor::zeros(&[d])).unwrap();
    p.insert("rtd_head.out.weight", truncated_normal(&[d, NUM_NOISE_CLASSES], 0.02, rng)).unwrap();
    p.insert("rtd_head.out.bias", Tensor::zeros(&[NUM_NOISE_CLASSES])).unwrap();
    p
}

/// `[n, m, d]` hidden states → `[n*m, 3]` noise-class logits.
pub fn rtd_logits<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, hidden: Var) -> Result<Var> {
    let h = flatten(tape, hidden)?;
    let h = linear(tape, b, "rtd_head.dense", h)?;
    let h = tape.gelu(h);
    linear(tape, b, "rtd_head.out", h)
}

/// Output bias of the MLM baseline head; the projection is tied to the
/// word-embedding table.
pub fn init_mlm_head<T: Scalar>(vocab_size: usize) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.insert("mlm_head.bias", Tensor::zeros(&[vocab_size])).unwrap();
    p
}

/// `[n, m, d]` → `[n*m, V]` token logits.
pub fn mlm_logits<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, hidden: Var) -> Result<Var> {
    let h = flatten(tape, hidden)?;
    let y = tape.matmul_t(h, b.var(WORD_EMBEDDINGS))?;
    tape.add_bias(y, b.var("mlm_head.bias"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "label_kind", rename_all = "lowercase")]
pub enum LabelKind {
    Classification { num_classes: usize },
    Regression,
}

impl LabelKind {
    pub fn outputs(self) -> usize {
        match self {
            LabelKind::Classification { num_classes } => num_classes,
            LabelKind::Regression => 1,
        }
    }
}

/// Linear head over the `[CLS]` representation.
pub fn init_task_head<T: Scalar>(d: usize, kind: LabelKind, rng: &mut Rng) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.insert("task_head.weight", truncated_normal(&[d, kind.outputs()], 0.02, rng)).unwrap();
    p.insert("task_head.bias", Tensor::zeros(&[kind.outputs()])).unwrap();
    p
}

/// `[n, d]` → `[n, outputs]`.
pub fn task_logits<T: Scalar>(tape: &mut Tape<T>, b: &Bindings, cls: Var) -> Result<Var> {
    linear(tape, b, "task_head", cls)
}
