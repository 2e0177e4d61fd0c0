//! Count-based n-gram language model over token ids, used to rank external
//! data by similarity to the training set.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{TokenSequence, CLS, SEP, UNK};

use super::data::TaskDataset;

/// Sentence-start padding symbol (never predicted).
pub const BOS: u32 = CLS;
/// End-of-sentence symbol (predicted once per sentence).
pub const EOS: u32 = SEP;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Smoothing {
    AddK { k: f64 },
    KneserNey { discount: f64 },
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::KneserNey { discount: 0.75 }
    }
}

type Counts = BTreeMap<Vec<u32>, BTreeMap<u32, f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    pub order: usize,
    pub smoothing: Smoothing,
    /// Predictable symbols: training types, `EOS` and `UNK`.
    pub vocab: BTreeSet<u32>,
    /// `tables[n-1]`: context of length `n-1` → next token → count. The top
    /// order holds raw counts; lower orders hold continuation counts under
    /// Kneser-Ney and raw counts under add-k.
    tables: Vec<Counts>,
}

fn stream(tokens: &[u32], order: usize, vocab: Option<&BTreeSet<u32>>) -> Vec<u32> {
    let mut s = vec![BOS; order - 1];
    s.extend(tokens.iter().map(|&t| match vocab {
        Some(v) if !v.contains(&t) => UNK,
        _ => t,
    }));
    s.push(EOS);
    s
}

impl NGramLM {
    pub fn train(sentences: &[Vec<u32>], order: usize, smoothing: Smoothing) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if sentences.is_empty() {
            return Err(Error::Data("language model needs at least one sentence".into()));
        }
        match smoothing {
            Smoothing::AddK { k } if !(k > 0.0) => return Err(Error::Config(format!("add-k needs k > 0, got {k}"))),
            Smoothing::KneserNey { discount } if !(discount > 0.0 && discount < 1.0) => {
                return Err(Error::Config(format!("discount must lie in (0, 1), got {discount}")))
            }
            _ => {}
        }
        let mut vocab: BTreeSet<u32> = sentences.iter().flatten().copied().collect();
        vocab.insert(EOS);
        vocab.insert(UNK);

        let mut raw: Vec<Counts> = vec![BTreeMap::new(); order];
        let mut left: Vec<BTreeMap<Vec<u32>, BTreeSet<u32>>> = vec![BTreeMap::new(); order];
        for s in sentences {
            let st = stream(s, order, None);
            for i in (order - 1)..st.len() {
                for n in 1..=order {
                    let gram = &st[i + 1 - n..=i];
                    *raw[n - 1]
                        .entry(gram[..n - 1].to_vec())
                        .or_default()
                        .entry(gram[n - 1])
                        .or_default() += 1.0;
                    if n < order {
                        left[n - 1].entry(gram.to_vec()).or_default().insert(st[i - n]);
                    }
                }
            }
        }
        let tables = match smoothing {
            Smoothing::AddK { .. } => raw,
            Smoothing::KneserNey { .. } => {
                let mut t = vec![BTreeMap::new(); order];
                for n in 1..order {
                    let table: &mut Counts = &mut t[n - 1];
                    for (gram, l) in &left[n - 1] {
                        table
                            .entry(gram[..n - 1].to_vec())
                            .or_default()
                            .insert(gram[n - 1], l.len() as f64);
                    }
                }
                t[order - 1] = raw.pop().unwrap();
                t
            }
        };
        Ok(NGramLM {
            order,
            smoothing,
            vocab,
            tables,
        })
    }

    /// Trains on the token ids of every example (structural tokens dropped).
    pub fn train_on(data: &TaskDataset, order: usize, smoothing: Smoothing) -> Result<Self> {
        let sentences: Vec<Vec<u32>> = data.examples.iter().map(|e| e.tokens.content()).collect();
        Self::train(&sentences, order, smoothing)
    }

    /// `P(w | context)`; `context` holds the previous `order - 1` symbols
    /// (shorter contexts are left-padded with `BOS`). Unknown `w` is scored
    /// as `UNK`.
    pub fn prob(&self, context: &[u32], w: u32) -> f64 {
        let w = if self.vocab.contains(&w) { w } else { UNK };
        let mut ctx: Vec<u32> = vec![BOS; (self.order - 1).saturating_sub(context.len())];
        let keep = context.len().saturating_sub(self.order - 1);
        ctx.extend(context[keep..].iter().map(|&t| if t == BOS || self.vocab.contains(&t) { t } else { UNK }));
        match self.smoothing {
            Smoothing::AddK { k } => {
                let row = self.tables[self.order - 1].get(&ctx);
                let c = row.and_then(|r| r.get(&w)).copied().unwrap_or(0.0);
                let total: f64 = row.map(|r| r.values().sum()).unwrap_or(0.0);
                (c + k) / (total + k * self.vocab.len() as f64)
            }
            Smoothing::KneserNey { discount } => self.kn(&ctx, w, discount),
        }
    }

    fn kn(&self, ctx: &[u32], w: u32, d: f64) -> f64 {
        let v = self.vocab.len() as f64;
        let lower = if ctx.is_empty() {
            1.0 / v
        } else {
            self.kn(&ctx[1..], w, d)
        };
        let row = match self.tables[ctx.len()].get(ctx) {
            Some(r) => r,
            None => return lower,
        };
        let total: f64 = row.values().sum();
        let c = row.get(&w).copied().unwrap_or(0.0);
        let types = row.len() as f64;
        (c - d).max(0.0) / total + d * types / total * lower
    }

    /// `exp` of the mean negative log-probability of the tokens and the
    /// closing `EOS`.
    pub fn perplexity(&self, tokens: &[u32]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::UndefinedPerplexity("empty example"));
        }
        let st = stream(tokens, self.order, Some(&self.vocab));
        let mut nll = 0.0;
        for i in (self.order - 1)..st.len() {
            nll -= self.prob(&st[i + 1 - self.order..i], st[i]).ln();
        }
        Ok((nll / (st.len() + 1 - self.order) as f64).exp())
    }

    /// Contexts with at least one observation at the top order.
    pub fn observed_contexts(&self) -> impl Iterator<Item = &[u32]> {
        self.tables[self.order - 1].keys().map(Vec::as_slice)
    }
}

/// Order-3 Kneser-Ney model of `D_s`.
pub fn train_ngram_lm(train: &TaskDataset) -> Result<NGramLM> {
    NGramLM::train_on(train, 3, Smoothing::default())
}

pub fn score_perplexity(lm: &NGramLM, example: &TokenSequence) -> Result<f64> {
    lm.perplexity(&example.content())
}

/// Result of ranking an external pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub selected: TaskDataset,
    /// Pool indices of the selected examples, lowest perplexity first.
    pub indices: Vec<usize>,
    pub perplexities: Vec<f64>,
    /// The requested budget exceeded the pool and was reduced to its size.
    pub clamped: bool,
}

/// The `budget` lowest-perplexity examples of `pool`, ties kept in pool
/// order. Labels are preserved.
pub fn select_similar(pool: &TaskDataset, lm: &NGramLM, budget: usize) -> Result<Selection> {
    if budget == 0 {
        return Err(Error::Config("selection budget must be at least 1".into()));
    }
    let clamped = budget > pool.len();
    let take = budget.min(pool.len());
    let mut scored = Vec::with_capacity(pool.len());
    for (i, e) in pool.examples.iter().enumerate() {
        scored.push((score_perplexity(lm, &e.tokens)?, i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    scored.truncate(take);
    let indices: Vec<usize> = scored.iter().map(|&(_, i)| i).collect();
    Ok(Selection {
        selected: TaskDataset::new(
            indices.iter().map(|&i| pool.examples[i].clone()).collect(),
            pool.kind,
            pool.split,
        ),
        perplexities: scored.iter().map(|&(p, _)| p).collect(),
        indices,
        clamped,
    })
}
