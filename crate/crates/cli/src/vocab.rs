//! Word-level vocabulary and tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use vega_core::tokens::{TokenSequence, CLS, NUM_RESERVED, PAD, RESERVED_NAMES, SEP, UNK};
use vega_core::{Error, Result};

/// Token ↔ id map. Ids `0..5` are the reserved symbols; the file form lists
/// the remaining tokens one per line, line `n` (from 0) holding id `n + 5`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Lowercased whitespace-separated words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    /// Builds from raw text lines: most frequent words first, ties broken
    /// lexicographically, at most `max_size` ids in total (reserved included).
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < NUM_RESERVED as usize {
            return Err(Error::Config(format!(
                "vocabulary cap {max_size} is smaller than the {NUM_RESERVED} reserved ids"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for w in words(line) {
                if !RESERVED_NAMES.contains(&w.as_str()) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_RESERVED as usize);
        Self::from_tokens(ranked.into_iter().map(|(w, _)| w).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One non-reserved token per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[NUM_RESERVED as usize..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected exactly one token".into(),
                });
            }
            tokens.push(t.to_string());
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Word ids with `[UNK]` fallback.
    pub fn ids(&self, text: &str) -> Vec<u32> {
        words(text).map(|w| self.id(&w)).collect()
    }

    /// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, truncated to `max_len`
    /// positions (longest segment first) and not padded.
    pub fn encode(&self, text_a: &str, text_b: Option<&str>, max_len: usize) -> TokenSequence {
        let mut a = self.ids(text_a);
        let mut b = text_b.map(|t| self.ids(t));
        let structural = 2 + usize::from(b.is_some());
        let budget = max_len.saturating_sub(structural);
        loop {
            let lb = b.as_ref().map_or(0, Vec::len);
            if a.len() + lb <= budget {
                break;
            }
            if a.len() >= lb {
                a.pop();
            } else if let Some(b) = b.as_mut() {
                b.pop();
            }
        }
        let mut ids = Vec::with_capacity(a.len() + structural);
        ids.push(CLS);
        ids.extend(a);
        ids.push(SEP);
        if let Some(b) = b {
            ids.extend(b);
            ids.push(SEP);
        }
        TokenSequence::new(ids)
    }

    /// Lowercased, mapped through the vocabulary, wrapped in `[CLS] … [SEP]`,
    /// truncated and padded to exactly `seq_len` positions (`seq_len ≥ 2`).
    pub fn tokenize(&self, text: &str, seq_len: usize) -> TokenSequence {
        let mut s = self.encode(text, None, seq_len);
        s.ids.resize(seq_len.max(2), PAD);
        s
    }

    /// Content tokens joined by single spaces; structural tokens dropped.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.content()
            .iter()
            .map(|&id| self.token(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocab::build(["b a c", "c b", "c d"], 100).unwrap();
        assert_eq!(v.to_text(), "c\nb\na\nd\n");
        assert_eq!(v.id("c"), 5);
        assert_eq!(v.id("a"), 7);
        let capped = Vocab::build(["b a c", "c b", "c d"], 7).unwrap();
        assert_eq!(capped.len(), 7);
        assert_eq!(capped.id("a"), UNK);
    }

    #[test]
    fn text_roundtrip() {
        let v = Vocab::build(["The cat sat on the mat"], 50).unwrap();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        let s = v.tokenize("the CAT sat", 10);
        assert_eq!(s.len(), 10);
        assert_eq!(v.detokenize(&s), "the cat sat");
    }

    #[test]
    fn empty_and_unknown() {
        let v = Vocab::build(["x y"], 50).unwrap();
        assert_eq!(v.tokenize("", 4).ids, vec![CLS, SEP, PAD, PAD]);
        assert_eq!(v.tokenize("zzz", 4).ids[1], UNK);
    }

    #[test]
    fn pair_truncation_keeps_separators() {
        let v = Vocab::build(["a b c d e f"], 50).unwrap();
        let s = v.encode("a b c d", Some("e f"), 7);
        assert_eq!(s.len(), 7);
        assert_eq!(s.ids.iter().filter(|&&t| t == SEP).count(), 2);
        assert_eq!(*s.ids.last().unwrap(), SEP);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(Vocab::from_text("a\nb c\n"), Err(Error::Parse { line: 2, .. })));
        assert!(Vocab::from_text("a\na\n").is_err());
        assert!(Vocab::build(["a"], 3).is_err());
    }
}
