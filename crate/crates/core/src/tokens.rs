//! Reserved token ids and the padded id sequence shared by every stage.

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
/// Ids below this are reserved; ordinary vocabulary starts here.
pub const NUM_RESERVED: u32 = 5;

pub const RESERVED_NAMES: [&str; NUM_RESERVED as usize] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]", "[MASK]"];

/// Structural tokens: never corrupted, never supervised.
pub fn is_special(id: u32) -> bool {
    matches!(id, PAD | CLS | SEP)
}

/// Token ids of one input, normally `[CLS] … [SEP] [PAD]*`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    /// `[CLS] content [SEP]`.
    pub fn wrap(content: &[u32]) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(content);
        ids.push(SEP);
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn special_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| is_special(t)).collect()
    }

    /// Positions of non-special, non-pad tokens.
    pub fn eligible_positions(&self) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| !is_special(t))
            .map(|(i, _)| i)
            .collect()
    }

    /// Content tokens with structural tokens removed.
    pub fn content(&self) -> Vec<u32> {
        self.ids.iter().copied().filter(|&t| !is_special(t)).collect()
    }
}
