//! Transformer encoder with disentangled (content + relative-position) attention.

mod attention;
mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamSet};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokens::{TokenSequence, PAD};

pub use attention::{disentangled_attention, relative_bucket, AttentionOutput};
pub use forward::{cls_representation, encoder_forward, EncoderOutput, ForwardOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    /// Relative-distance window `k`; the position table has `2k` rows.
    pub max_relative_distance: usize,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    /// Desk-scale configuration (2 layers, width 32).
    pub fn toy() -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_size: 32,
            num_heads: 4,
            head_dim: 8,
            ffn_size: 128,
            vocab_size: 100,
            max_relative_distance: 8,
            max_seq_len: 128,
            layer_norm_eps: 1e-7,
            dropout_rate: 0.1,
        }
    }

    /// 48 layers, width 1536, FFN 6144, 24 heads of 64.
    pub fn vega_v1() -> Self {
        EncoderConfig {
            num_layers: 48,
            hidden_size: 1536,
            num_heads: 24,
            head_dim: 64,
            ffn_size: 6144,
            vocab_size: 50265,
            max_relative_distance: 256,
            max_seq_len: 512,
            layer_norm_eps: 1e-7,
            dropout_rate: 0.1,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "vega-v1" => Some(Self::vega_v1()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_relative_distance", self.max_relative_distance),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_size != self.num_heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden_size {} != num_heads {} * head_dim {}",
                self.hidden_size, self.num_heads, self.head_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Name of the first field that differs from `other`, with both values.
    pub fn first_difference(&self, other: &EncoderConfig) -> Option<(String, String, String)> {
        let a = serde_json::to_value(self).ok()?;
        let b = serde_json::to_value(other).ok()?;
        let (a, b) = (a.as_object()?, b.as_object()?);
        a.iter()
            .find(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| (k.clone(), v.to_string(), b.get(k).map(|x| x.to_string()).unwrap_or_default()))
    }

    fn per_layer_parameters(&self) -> usize {
        let d = self.hidden_size;
        let f = self.ffn_size;
        // content q/k/v, relative q/k and output projections, each d×d + d
        6 * (d * d + d)
            // feed-forward
            + (d * f + f) + (f * d + d)
            // two layer norms
            + 4 * d
    }
}

/// Closed-form element count of [`EncoderState::new`] for `config`.
pub fn count_parameters(config: &EncoderConfig) -> usize {
    let d = config.hidden_size;
    config.vocab_size * d + 2 * config.max_relative_distance * d + 2 * d + config.num_layers * config.per_layer_parameters()
}

/// Encoder parameters plus their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState<T> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
}

pub(crate) fn layer_prefix(l: usize) -> String {
    format!("encoder.layers.{l}")
}

pub const WORD_EMBEDDINGS: &str = "encoder.word_embeddings";
pub const REL_EMBEDDINGS: &str = "encoder.rel_embeddings";

impl<T: Scalar> EncoderState<T> {
    /// Truncated-normal(0.02) weights, zero biases, unit layer-norm gains.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Domain::Init, 0);
        let d = config.hidden_size;
        let f = config.ffn_size;
        let std = 0.02;
        let mut p = ParamSet::new();
        p.insert(WORD_EMBEDDINGS, truncated_normal(&[config.vocab_size, d], std, &mut rng))?;
        p.insert(REL_EMBEDDINGS, truncated_normal(&[2 * config.max_relative_distance, d], std, &mut rng))?;
        p.insert("encoder.embed_ln.gain", Tensor::full(&[d], T::one()))?;
        p.insert("encoder.embed_ln.bias", Tensor::zeros(&[d]))?;
        for l in 0..config.num_layers {
            let pre = layer_prefix(l);
            for proj in ["q", "k", "v", "pos_q", "pos_k", "out"] {
                p.insert(format!("{pre}.attn.{proj}.weight"), truncated_normal(&[d, d], std, &mut rng))?;
                p.insert(format!("{pre}.attn.{proj}.bias"), Tensor::zeros(&[d]))?;
            }
            p.insert(format!("{pre}.attn_ln.gain"), Tensor::full(&[d], T::one()))?;
            p.insert(format!("{pre}.attn_ln.bias"), Tensor::zeros(&[d]))?;
            p.insert(format!("{pre}.ffn.in.weight"), truncated_normal(&[d, f], std, &mut rng))?;
            p.insert(format!("{pre}.ffn.in.bias"), Tensor::zeros(&[f]))?;
            p.insert(format!("{pre}.ffn.out.weight"), truncated_normal(&[f, d], std, &mut rng))?;
            p.insert(format!("{pre}.ffn.out.bias"), Tensor::zeros(&[d]))?;
            p.insert(format!("{pre}.ffn_ln.gain"), Tensor::full(&[d], T::one()))?;
            p.insert(format!("{pre}.ffn_ln.bias"), Tensor::zeros(&[d]))?;
        }
        Ok(EncoderState { config, params: p })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderState<U> {
        EncoderState {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// `n` padded sequences of length `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub n: usize,
    pub m: usize,
    /// Row-major `n × m` token ids.
    pub ids: Vec<u32>,
    /// `true` for real tokens, `false` for padding.
    pub attention_mask: Vec<bool>,
    /// `true` for `[CLS]`, `[SEP]` and `[PAD]`.
    pub special_mask: Vec<bool>,
}

impl SequenceBatch {
    /// Pads every sequence with `[PAD]` to the longest one.
    pub fn from_sequences(seqs: &[TokenSequence]) -> Result<Self> {
        let m = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
        if seqs.is_empty() || m == 0 {
            return Err(Error::EmptySequence("batch has no tokens"));
        }
        Self::padded(seqs, m)
    }

    /// Pads (never truncates) every sequence to exactly `m` positions.
    pub fn padded(seqs: &[TokenSequence], m: usize) -> Result<Self> {
        let n = seqs.len();
        let mut ids = Vec::with_capacity(n * m);
        for s in seqs {
            if s.len() > m {
                return Err(Error::Data(format!("sequence of length {} exceeds {m}", s.len())));
            }
            ids.extend_from_slice(&s.ids);
            ids.extend(std::iter::repeat_n(PAD, m - s.len()));
        }
        let attention_mask = ids.iter().map(|&t| t != PAD).collect();
        let special_mask = ids.iter().map(|&t| crate::tokens::is_special(t)).collect();
        Ok(SequenceBatch {
            n,
            m,
            ids,
            attention_mask,
            special_mask,
        })
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        if self.m == 0 {
            return Err(Error::EmptySequence("sequence length is zero"));
        }
        if self.ids.len() != self.n * self.m || self.attention_mask.len() != self.ids.len() {
            return Err(Error::dim("sequence_batch", &[self.n, self.m], &[self.ids.len()]));
        }
        if let Some(&bad) = self.ids.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::Vocabulary {
                id: bad,
                vocab_size: config.vocab_size,
            });
        }
        Ok(())
    }
}
