//! Token corruption for the denoising objective and the MLM baseline masker.
//!
//! A corrupted example shuffles a fraction of eligible tokens among
//! themselves (label 1) and replaces a disjoint fraction with random
//! vocabulary tokens (label 2); everything else keeps label 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain, Rng};
use crate::tokens::{TokenSequence, MASK, NUM_RESERVED};

pub const LABEL_ORIGINAL: u8 = 0;
pub const LABEL_SHUFFLED: u8 = 1;
pub const LABEL_REPLACED: u8 = 2;
pub const NUM_NOISE_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub shuffle_rate: f64,
    pub replace_rate: f64,
    /// Only used by the MLM baseline.
    pub mlm_rate: f64,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            shuffle_rate: 0.10,
            replace_rate: 0.05,
            mlm_rate: 0.15,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.shuffle_rate, self.replace_rate, self.mlm_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!("corruption rates must lie in [0, 1]: {rates:?}")));
        }
        if self.shuffle_rate + self.replace_rate > 1.0 {
            return Err(Error::Config("shuffle_rate + replace_rate exceeds 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedExample {
    pub original_ids: Vec<u32>,
    pub corrupted_ids: Vec<u32>,
    pub noise_labels: Vec<u8>,
    pub special_mask: Vec<bool>,
}

impl CorruptedExample {
    /// Number of non-special positions.
    pub fn eligible(&self) -> usize {
        self.special_mask.iter().filter(|&&s| !s).count()
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.noise_labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmExample {
    pub masked_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub supervised_mask: Vec<bool>,
}

/// `round(rate · e)` with ties rounded up.
pub fn position_count(rate: f64, eligible: usize) -> usize {
    ((rate * eligible as f64) + 0.5).floor() as usize
}

/// Disjoint shuffle and replace sets, sampled without replacement from the
/// eligible positions.
pub fn select_positions(seq: &TokenSequence, config: &CorruptionConfig, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let eligible = seq.eligible_positions();
    let e = eligible.len();
    let n_shuffle = position_count(config.shuffle_rate, e).min(e);
    let n_replace = position_count(config.replace_rate, e).min(e - n_shuffle);
    let picks = rng::sample_without_replacement(rng, e, n_shuffle + n_replace);
    let mut shuffle: Vec<usize> = picks[..n_shuffle].iter().map(|&i| eligible[i]).collect();
    let mut replace: Vec<usize> = picks[n_shuffle..].iter().map(|&i| eligible[i]).collect();
    shuffle.sort_unstable();
    replace.sort_unstable();
    (shuffle, replace)
}

/// Uniformly permutes the tokens at `positions`. Positions whose token
/// actually changed get label 1; fixed points (or equal tokens swapped) stay 0.
pub fn apply_shuffle(ids: &[u32], positions: &[usize], rng: &mut Rng) -> (Vec<u32>, Vec<u8>) {
    let mut out = ids.to_vec();
    let mut labels = vec![LABEL_ORIGINAL; ids.len()];
    let mut pool: Vec<u32> = positions.iter().map(|&p| ids[p]).collect();
    rng::shuffle(rng, &mut pool);
    for (&p, &t) in positions.iter().zip(&pool) {
        out[p] = t;
        if t != ids[p] {
            labels[p] = LABEL_SHUFFLED;
        }
    }
    (out, labels)
}

/// Replaces each position with a uniform non-reserved token different from
/// the current one; every replaced position gets label 2.
pub fn apply_random_replace(ids: &[u32], positions: &[usize], vocab_size: usize, rng: &mut Rng) -> Result<(Vec<u32>, Vec<u8>)> {
    let pool = (vocab_size as u64).saturating_sub(NUM_RESERVED as u64);
    if pool < 2 {
        return Err(Error::Config(format!(
            "random replacement needs at least 2 non-special tokens, vocabulary has {pool}"
        )));
    }
    let mut out = ids.to_vec();
    let mut labels = vec![LABEL_ORIGINAL; ids.len()];
    for &p in positions {
        let new = loop {
            let t = NUM_RESERVED + rng::below(rng, pool) as u32;
            if t != ids[p] {
                break t;
            }
        };
        out[p] = new;
        labels[p] = LABEL_REPLACED;
    }
    Ok((out, labels))
}

/// Full corruption of one sequence. The input sequence is left untouched.
pub fn corrupt(seq: &TokenSequence, config: &CorruptionConfig, vocab_size: usize, rng: &mut Rng) -> Result<CorruptedExample> {
    config.validate()?;
    let (shuffle_set, replace_set) = select_positions(seq, config, rng);
    let (shuffled, shuffle_labels) = apply_shuffle(&seq.ids, &shuffle_set, rng);
    let (corrupted, replace_labels) = if replace_set.is_empty() {
        (shuffled, vec![LABEL_ORIGINAL; seq.len()])
    } else {
        apply_random_replace(&shuffled, &replace_set, vocab_size, rng)?
    };
    let noise_labels = shuffle_labels
        .iter()
        .zip(&replace_labels)
        .map(|(&s, &r)| s.max(r))
        .collect();
    Ok(CorruptedExample {
        original_ids: seq.ids.clone(),
        corrupted_ids: corrupted,
        noise_labels,
        special_mask: seq.special_mask(),
    })
}

/// [`corrupt`] on the stream derived from `(config.seed, index)`.
pub fn corrupt_indexed(seq: &TokenSequence, config: &CorruptionConfig, vocab_size: usize, index: u64) -> Result<CorruptedExample> {
    let mut rng = rng::stream(config.seed, Domain::Corruption, index);
    corrupt(seq, config, vocab_size, &mut rng)
}

/// Replaces `round(mlm_rate · e)` eligible positions with `[MASK]`.
pub fn mask_for_mlm(seq: &TokenSequence, config: &CorruptionConfig, vocab_size: usize, rng: &mut Rng) -> Result<MlmExample> {
    if vocab_size <= MASK as usize {
        return Err(Error::Config("vocabulary has no [MASK] token".into()));
    }
    let eligible = seq.eligible_positions();
    let k = position_count(config.mlm_rate, eligible.len()).min(eligible.len());
    let picks = rng::sample_without_replacement(rng, eligible.len(), k);
    let mut masked = seq.ids.clone();
    let mut supervised = vec![false; seq.len()];
    for i in picks {
        let p = eligible[i];
        masked[p] = MASK;
        supervised[p] = true;
    }
    Ok(MlmExample {
        masked_ids: masked,
        target_ids: seq.ids.clone(),
        supervised_mask: supervised,
    })
}
