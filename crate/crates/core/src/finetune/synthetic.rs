//! Small generated tasks for exercising the fine-tuning strategies.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::LabelKind;
use crate::pretrain::{generate_synthetic_corpus, CorpusConfig};
use crate::rng::{self, Domain, Rng};
use crate::tokens::{TokenSequence, NUM_RESERVED};

use super::data::{Label, Split, TaskDataset, TaskExample};

/// Token layout shared by the classification generators: `neutral` filler
/// ids, then per class a block of source cue ids followed by a block of
/// target-only cue ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CueTaskConfig {
    pub num_classes: usize,
    pub neutral: usize,
    pub cues_per_class: usize,
    /// Cue tokens per sentence.
    pub cues_per_sentence: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CueTaskConfig {
    fn default() -> Self {
        CueTaskConfig {
            num_classes: 2,
            neutral: 40,
            cues_per_class: 4,
            cues_per_sentence: 2,
            min_len: 8,
            max_len: 14,
        }
    }
}

impl CueTaskConfig {
    /// Smallest vocabulary holding every generated id.
    pub fn vocab_size(&self) -> usize {
        NUM_RESERVED as usize + self.neutral + 2 * self.num_classes * self.cues_per_class
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.neutral == 0 || self.cues_per_class == 0 {
            return Err(Error::Config("cue task needs two classes, filler and cue tokens".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.cues_per_sentence + 1 > self.min_len {
            return Err(Error::Config(format!(
                "invalid length range [{}, {}] for {} cues",
                self.min_len, self.max_len, self.cues_per_sentence
            )));
        }
        Ok(())
    }

    fn source_cue(&self, class: usize, j: usize) -> u32 {
        (NUM_RESERVED as usize + self.neutral + class * self.cues_per_class + j) as u32
    }

    fn target_cue(&self, class: usize, j: usize) -> u32 {
        (NUM_RESERVED as usize + self.neutral + (self.num_classes + class) * self.cues_per_class + j) as u32
    }

    /// A filler sentence with `cues` written over distinct random positions.
    fn sentence(&self, r: &mut Rng, cues: &[u32]) -> TokenSequence {
        let len = self.min_len + rng::below(r, (self.max_len - self.min_len + 1) as u64) as usize;
        let mut ids: Vec<u32> = (0..len)
            .map(|_| NUM_RESERVED + rng::below(r, self.neutral as u64) as u32)
            .collect();
        for (&p, &c) in rng::sample_without_replacement(r, len, cues.len()).iter().zip(cues) {
            ids[p] = c;
        }
        TokenSequence::wrap(&ids)
    }

    fn kind(&self) -> LabelKind {
        LabelKind::Classification {
            num_classes: self.num_classes,
        }
    }
}

/// Labeled source data and a shifted test set.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShiftTask {
    pub train: TaskDataset,
    /// Carries gold labels for scoring; strategies must ignore them.
    pub test: TaskDataset,
    pub vocab_size: usize,
}

/// Training sentences carry source cues of their class. Test sentences carry
/// target-only cues, plus one source cue with probability `overlap`, so a
/// source-trained model labels part of the test set and self-training can
/// propagate to the rest.
pub fn domain_shift_task(
    seed: u64,
    n_train: usize,
    n_test: usize,
    overlap: f64,
    config: &CueTaskConfig,
) -> Result<DomainShiftTask> {
    config.validate()?;
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 1], got {overlap}")));
    }
    let k = config.cues_per_class as u64;
    let train = (0..n_train)
        .map(|i| {
            let mut r = rng::stream(seed, Domain::Task, i as u64);
            let c = rng::below(&mut r, config.num_classes as u64) as usize;
            let cues: Vec<u32> = (0..config.cues_per_sentence)
                .map(|_| config.source_cue(c, rng::below(&mut r, k) as usize))
                .collect();
            TaskExample {
                tokens: config.sentence(&mut r, &cues),
                label: Some(Label::Class(c)),
            }
        })
        .collect();
    let test = (0..n_test)
        .map(|i| {
            let mut r = rng::stream(seed, Domain::Heldout, i as u64);
            let c = rng::below(&mut r, config.num_classes as u64) as usize;
            let mut cues: Vec<u32> = (0..config.cues_per_sentence)
                .map(|_| config.target_cue(c, rng::below(&mut r, k) as usize))
                .collect();
            if r.gen::<f64>() < overlap {
                cues[0] = config.source_cue(c, rng::below(&mut r, k) as usize);
            }
            TaskExample {
                tokens: config.sentence(&mut r, &cues),
                label: Some(Label::Class(c)),
            }
        })
        .collect();
    Ok(DomainShiftTask {
        train: TaskDataset::new(train, config.kind(), Split::Train),
        test: TaskDataset::new(test, config.kind(), Split::Test),
        vocab_size: config.vocab_size(),
    })
}

/// A rich intermediate task and a related low-resource target.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferTask {
    pub intermediate: TaskDataset,
    pub target_train: TaskDataset,
    pub target_test: TaskDataset,
    pub vocab_size: usize,
}

/// The intermediate task predicts the cue class out of `num_classes`; the
/// target predicts whether that class lies in the lower half. Both use the
/// same source cues.
pub fn transfer_task(
    seed: u64,
    n_intermediate: usize,
    n_target: usize,
    n_test: usize,
    config: &CueTaskConfig,
) -> Result<TransferTask> {
    config.validate()?;
    let k = config.cues_per_class as u64;
    let half = config.num_classes / 2;
    let make = |domain: Domain, n: usize, binary: bool| -> Vec<TaskExample> {
        (0..n)
            .map(|i| {
                let mut r = rng::stream(seed, domain, i as u64);
                let c = rng::below(&mut r, config.num_classes as u64) as usize;
                let cues: Vec<u32> = (0..config.cues_per_sentence)
                    .map(|_| config.source_cue(c, rng::below(&mut r, k) as usize))
                    .collect();
                let label = if binary { usize::from(c < half) } else { c };
                TaskExample {
                    tokens: config.sentence(&mut r, &cues),
                    label: Some(Label::Class(label)),
                }
            })
            .collect()
    };
    let binary = LabelKind::Classification { num_classes: 2 };
    Ok(TransferTask {
        intermediate: TaskDataset::new(make(Domain::Corpus, n_intermediate, false), config.kind(), Split::External),
        target_train: TaskDataset::new(make(Domain::Task, n_target, true), binary, Split::Train),
        target_test: TaskDataset::new(make(Domain::Heldout, n_test, true), binary, Split::Test),
        vocab_size: config.vocab_size(),
    })
}

/// In-domain training text and an external pool with planted in-domain
/// sentences among token-shuffled ones.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedPool {
    pub train: TaskDataset,
    pub pool: TaskDataset,
    /// Pool indices of the planted sentences, ascending.
    pub planted: Vec<usize>,
}

/// `n_train` grammar sentences form `D_s`; the pool holds `n_planted` fresh
/// grammar sentences at random positions and `n_decoys` grammar sentences
/// whose tokens were shuffled. Everything is unlabeled except `D_s` (class 0).
pub fn planted_pool(
    seed: u64,
    n_train: usize,
    n_planted: usize,
    n_decoys: usize,
    corpus: &CorpusConfig,
) -> Result<PlantedPool> {
    let text = generate_synthetic_corpus(seed, n_train + n_planted + n_decoys, corpus)?;
    let kind = LabelKind::Classification { num_classes: 2 };
    let mut seqs = text.sequences.into_iter();
    let train: Vec<TaskExample> = seqs
        .by_ref()
        .take(n_train)
        .map(|tokens| TaskExample {
            tokens,
            label: Some(Label::Class(0)),
        })
        .collect();
    let planted_seqs: Vec<TokenSequence> = seqs.by_ref().take(n_planted).collect();
    let mut r = rng::stream(seed, Domain::Task, 0);
    let decoys: Vec<TokenSequence> = seqs
        .map(|s| {
            let mut ids = s.content();
            rng::shuffle(&mut r, &mut ids);
            TokenSequence::wrap(&ids)
        })
        .collect();
    let total = n_planted + n_decoys;
    let mut planted = rng::sample_without_replacement(&mut r, total, n_planted);
    planted.sort_unstable();
    let mut planted_iter = planted_seqs.into_iter();
    let mut decoy_iter = decoys.into_iter();
    let pool = (0..total)
        .map(|i| TaskExample {
            tokens: if planted.binary_search(&i).is_ok() {
                planted_iter.next().unwrap()
            } else {
                decoy_iter.next().unwrap()
            },
            label: None,
        })
        .collect();
    Ok(PlantedPool {
        train: TaskDataset::new(train, kind, Split::Train),
        pool: TaskDataset::new(pool, kind, Split::External),
        planted,
    })
}
