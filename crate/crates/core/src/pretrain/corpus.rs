use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tokens::{TokenSequence, NUM_RESERVED};

/// Shape of the synthetic token grammar.
///
/// The grammar uses `num_topics × num_groups` cells of `tokens_per_cell`
/// consecutive ids starting after the reserved range; the rest of the
/// vocabulary never occurs in clean text. A sentence
/// picks one topic and a phase; its `i`-th content token is drawn (Zipf) from
/// cell `(topic, (i + phase) mod num_groups)`. Shuffled tokens break the
/// group progression and random replacements usually break the topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub num_topics: usize,
    pub num_groups: usize,
    pub tokens_per_cell: usize,
    /// Content length range, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_exponent: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 1000,
            num_topics: 8,
            num_groups: 8,
            tokens_per_cell: 1,
            min_len: 12,
            max_len: 30,
            zipf_exponent: 1.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let cells = self.num_topics * self.num_groups * self.tokens_per_cell;
        if cells == 0 {
            return Err(Error::Config("corpus needs at least one topic and one group".into()));
        }
        if self.vocab_size < NUM_RESERVED as usize + cells {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold {cells} grammar tokens",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab_size: usize,
    pub sequences: Vec<TokenSequence>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Longest sequence including `[CLS]`/`[SEP]`.
    pub fn max_seq_len(&self) -> usize {
        self.sequences.iter().map(TokenSequence::len).max().unwrap_or(0)
    }

    /// Entropy (nats) of the content-token unigram distribution.
    pub fn unigram_entropy(&self) -> f64 {
        let mut counts = vec![0usize; self.vocab_size];
        for s in &self.sequences {
            for t in s.content() {
                counts[t as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    }
}

fn zipf_cdf(n: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(s)).collect();
    let z: f64 = w.iter().sum();
    let mut acc = 0.0;
    w.iter()
        .map(|x| {
            acc += x / z;
            acc
        })
        .collect()
}

fn draw(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// `size` sentences from the grammar; identical for identical seeds.
pub fn generate_synthetic_corpus(grammar_seed: u64, size: usize, config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    if size == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let (topics, groups) = (config.num_topics, config.num_groups);
    let cells = topics * groups;
    let per = config.tokens_per_cell;
    let cell_members: Vec<Vec<u32>> = (0..cells)
        .map(|c| (0..per).map(|j| (c * per + j) as u32 + NUM_RESERVED).collect())
        .collect();
    let cell_cdfs: Vec<Vec<f64>> = cell_members
        .iter()
        .map(|m| zipf_cdf(m.len(), config.zipf_exponent))
        .collect();
    let topic_cdf = zipf_cdf(topics, 0.5);

    let sequences = (0..size)
        .map(|i| {
            let mut r = rng::stream(grammar_seed, Domain::Corpus, i as u64);
            let topic = draw(&topic_cdf, r.gen::<f64>());
            let phase = rng::below(&mut r, groups as u64) as usize;
            let len = config.min_len + rng::below(&mut r, (config.max_len - config.min_len + 1) as u64) as usize;
            let ids: Vec<u32> = (0..len)
                .map(|p| {
                    let cell = topic * groups + (p + phase) % groups;
                    cell_members[cell][draw(&cell_cdfs[cell], r.gen::<f64>())]
                })
                .collect();
            TokenSequence::wrap(&ids)
        })
        .collect();
    Ok(Corpus {
        vocab_size: config.vocab_size,
        sequences,
    })
}
