//! Pretraining losses: ternary replaced-token detection, in-batch contrastive
//! loss over clean/corrupted pairs, their phase-2 combination, and the MLM
//! baseline. Also the consistency term used by adversarial fine-tuning.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corruption::{corrupt, mask_for_mlm, CorruptionConfig, NUM_NOISE_CLASSES};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tokens::TokenSequence;

/// Positions the denoising loss supervises: every non-special token.
pub fn rtd_supervision_mask(special_mask: &[bool]) -> Vec<bool> {
    special_mask.iter().map(|&s| !s).collect()
}

/// Mean ternary cross-entropy over all non-special positions.
///
/// `logits` is `[N, 3]` or `[n, m, 3]` with `N = n·m = labels.len()`.
pub fn rtd_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[u8], special_mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if *shape.last().unwrap() != NUM_NOISE_CLASSES {
        return Err(Error::dim("rtd_loss", &shape, &[NUM_NOISE_CLASSES]));
    }
    let logits = if shape.len() == 2 {
        logits
    } else {
        tape.reshape(logits, &[labels.len(), NUM_NOISE_CLASSES])?
    };
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_NOISE_CLASSES) {
        return Err(Error::Data(format!("noise label {bad} outside {{0, 1, 2}}")));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let mask = rtd_supervision_mask(special_mask);
    tape.cross_entropy(logits, &labels, &mask).map_err(|e| match e {
        Error::EmptySupervision(_) => Error::EmptySupervision("rtd_loss (all positions special)"),
        other => other,
    })
}

/// Clean and corrupted sentence representations; row `i` of each side comes
/// from the same sentence.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch {
    pub h_clean: Var,
    pub h_corrupt: Var,
    pub temperature: f64,
}

/// InfoNCE with in-batch negatives and cosine similarity:
/// `ℓ_i = −log softmax_j(cos(h_i, h*_j)/τ)[i]`, averaged over rows.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, batch: &ContrastiveBatch) -> Result<Var> {
    let (sa, sb) = (tape.shape(batch.h_clean).to_vec(), tape.shape(batch.h_corrupt).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::dim("contrastive_loss", &sa, &sb));
    }
    if !(batch.temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", batch.temperature)));
    }
    for (side, v) in [("h_clean", batch.h_clean), ("h_corrupt", batch.h_corrupt)] {
        let d = sa[1];
        if let Some(row) = tape
            .data(v)
            .chunks_exact(d)
            .position(|r| r.iter().all(|&x| x == T::zero()))
        {
            return Err(Error::DegenerateRepresentation { side, row });
        }
    }
    let n = sa[0];
    let a = tape.normalize_rows(batch.h_clean)?;
    let b = tape.normalize_rows(batch.h_corrupt)?;
    let sim = tape.matmul_t(a, b)?;
    let logits = tape.scale(sim, T::from_f64_lossy(1.0 / batch.temperature));
    let labels: Vec<usize> = (0..n).collect();
    tape.cross_entropy(logits, &labels, &vec![true; n])
}

/// `denoising + λ · contrastive`.
pub fn combined_loss<T: Scalar>(tape: &mut Tape<T>, denoising: Var, contrastive: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("combination weight must be ≥ 0, got {lambda}")));
    }
    let weighted = tape.scale(contrastive, T::from_f64_lossy(lambda));
    tape.add(denoising, weighted)
}

/// Mean cross-entropy over supervised positions of `[N, V]` logits.
pub fn mlm_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[u32], supervised_mask: &[bool]) -> Result<Var> {
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    tape.cross_entropy(logits, &targets, supervised_mask).map_err(|e| match e {
        Error::EmptySupervision(_) => Error::EmptySupervision("mlm_loss"),
        other => other,
    })
}

/// Mean squared error against constant targets.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, targets: &[T]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let t = tape.constant(crate::Tensor::new(&shape, targets.to_vec())?);
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Symmetric KL between row-wise softmax distributions of two `[N, c]`
/// logit matrices, `Σ (p − q)(log p − log q)`, averaged over rows.
pub fn symmetric_kl<T: Scalar>(tape: &mut Tape<T>, logits_p: Var, logits_q: Var) -> Result<Var> {
    let s = tape.shape(logits_p).to_vec();
    if s.len() != 2 || tape.shape(logits_q) != s.as_slice() {
        return Err(Error::dim("symmetric_kl", &s, tape.shape(logits_q)));
    }
    let lp = tape.log_softmax(logits_p);
    let lq = tape.log_softmax(logits_q);
    let p = tape.exp(lp);
    let q = tape.exp(lq);
    let dp = tape.sub(p, q)?;
    let dl = tape.sub(lp, lq)?;
    let prod = tape.mul(dp, dl)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, T::one() / T::from_usize(s[0]).unwrap()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Rtd,
    Mlm,
}

/// Supervision mask the given objective's loss consumes for `seq`.
pub fn supervised_positions(kind: ObjectiveKind, seq: &TokenSequence, config: &CorruptionConfig, vocab_size: usize, rng: &mut Rng) -> Result<Vec<bool>> {
    match kind {
        ObjectiveKind::Rtd => {
            let ex = corrupt(seq, config, vocab_size, rng)?;
            Ok(rtd_supervision_mask(&ex.special_mask))
        }
        ObjectiveKind::Mlm => Ok(mask_for_mlm(seq, config, vocab_size, rng)?.supervised_mask),
    }
}

/// Fraction of eligible (non-special) positions that receive supervision;
/// defined as 0 when nothing is eligible.
pub fn supervision_coverage(kind: ObjectiveKind, seq: &TokenSequence, config: &CorruptionConfig, vocab_size: usize, rng: &mut Rng) -> Result<f64> {
    let eligible = seq.eligible_positions();
    if eligible.is_empty() {
        return Ok(0.0);
    }
    let sup = supervised_positions(kind, seq, config, vocab_size, rng)?;
    let hit = eligible.iter().filter(|&&p| sup[p]).count();
    Ok(hit as f64 / eligible.len() as f64)
}

/// Mean cosine of positive pairs minus mean cosine of all off-diagonal pairs.
pub fn alignment_gap<T: Scalar>(h_clean: &[T], h_corrupt: &[T], d: usize) -> f64 {
    let rows = |h: &[T]| -> Vec<Vec<f64>> {
        h.chunks_exact(d)
            .map(|r| {
                let v: Vec<f64> = r.iter().map(|x| x.to_f64_lossy()).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect()
    };
    let (a, b) = (rows(h_clean), rows(h_corrupt));
    let n = a.len();
    let cos = |i: usize, j: usize| a[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum::<f64>();
    let pos = (0..n).map(|i| cos(i, i)).sum::<f64>() / n as f64;
    if n < 2 {
        return pos;
    }
    let mut neg = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                neg += cos(i, j);
            }
        }
    }
    pos - neg / (n * (n - 1)) as f64
}

/// Per-logging-step loss record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub phase: String,
    pub denoising_loss: f64,
    pub contrastive_loss: f64,
    pub combined_loss: f64,
    pub combination_weight: f64,
    pub supervised_fraction: f64,
    pub lr: f64,
}
