use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Bindings;
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::attention::disentangled_attention;
use super::{layer_prefix, EncoderConfig, SequenceBatch, REL_EMBEDDINGS, WORD_EMBEDDINGS};

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Dropout stream; `None` runs deterministically (evaluation mode).
    pub dropout_rng: Option<&'a mut Rng>,
    /// Added to every absolute position before bucketing.
    pub position_offset: usize,
    /// `[n*m, d]` perturbation added to the layer-normalised embeddings.
    pub perturbation: Option<Var>,
}

impl<'a> ForwardOptions<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(rng: &'a mut Rng) -> Self {
        ForwardOptions {
            dropout_rng: Some(rng),
            ..Default::default()
        }
    }
}

pub struct EncoderOutput {
    /// Final hidden states `[n, m, d]`.
    pub hidden: Var,
    /// Layer-normalised token embeddings `[n*m, d]` (before any perturbation).
    pub embeddings: Var,
    /// Attention probabilities per layer, each `[n*heads, m, m]`.
    pub attention: Vec<Var>,
}

/// Embedding lookup → layer norm → L post-norm blocks of
/// (disentangled attention + residual + LN, GELU FFN + residual + LN).
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bindings,
    config: &EncoderConfig,
    batch: &SequenceBatch,
    mut opts: ForwardOptions<'_>,
) -> Result<EncoderOutput> {
    batch.validate(config)?;
    let (n, m, d) = (batch.n, batch.m, config.hidden_size);
    let eps = T::from_f64_lossy(config.layer_norm_eps);
    let p_drop = config.dropout_rate;

    let idx: Vec<usize> = batch.ids.iter().map(|&t| t as usize).collect();
    let emb = tape.gather_rows(params.var(WORD_EMBEDDINGS), &idx)?;
    let embeddings = tape.layer_norm(
        emb,
        params.var("encoder.embed_ln.gain"),
        params.var("encoder.embed_ln.bias"),
        eps,
    )?;
    let mut h = match opts.perturbation {
        Some(delta) => tape.add(embeddings, delta)?,
        None => embeddings,
    };
    if let Some(rng) = opts.dropout_rng.as_deref_mut() {
        h = tape.dropout(h, p_drop, rng);
    }
    let rel = params.var(REL_EMBEDDINGS);

    let mut attention = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let pre = layer_prefix(l);
        let att = disentangled_attention(
            tape,
            params,
            &pre,
            config,
            h,
            rel,
            n,
            m,
            &batch.attention_mask,
            opts.position_offset,
            opts.dropout_rng.as_deref_mut().map(|r| (r, p_drop)),
        )?;
        attention.push(att.probs);
        let mut a = att.output;
        if let Some(rng) = opts.dropout_rng.as_deref_mut() {
            a = tape.dropout(a, p_drop, rng);
        }
        let res = tape.add(h, a)?;
        let h1 = tape.layer_norm(
            res,
            params.var(&format!("{pre}.attn_ln.gain")),
            params.var(&format!("{pre}.attn_ln.bias")),
            eps,
        )?;

        let f = tape.matmul(h1, params.var(&format!("{pre}.ffn.in.weight")))?;
        let f = tape.add_bias(f, params.var(&format!("{pre}.ffn.in.bias")))?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, params.var(&format!("{pre}.ffn.out.weight")))?;
        let mut f = tape.add_bias(f, params.var(&format!("{pre}.ffn.out.bias")))?;
        if let Some(rng) = opts.dropout_rng.as_deref_mut() {
            f = tape.dropout(f, p_drop, rng);
        }
        let res = tape.add(h1, f)?;
        h = tape.layer_norm(
            res,
            params.var(&format!("{pre}.ffn_ln.gain")),
            params.var(&format!("{pre}.ffn_ln.bias")),
            eps,
        )?;
    }
    let hidden = tape.reshape(h, &[n, m, d])?;
    Ok(EncoderOutput {
        hidden,
        embeddings,
        attention,
    })
}

/// Hidden state at position 0 (`[CLS]`) of every sequence: `[n, m, d] -> [n, d]`.
pub fn cls_representation<T: Scalar>(tape: &mut Tape<T>, hidden: Var) -> Result<Var> {
    let s = tape.shape(hidden).to_vec();
    if s.len() != 3 {
        return Err(Error::Rank(format!("cls_representation needs [n, m, d], got {s:?}")));
    }
    let (n, m, d) = (s[0], s[1], s[2]);
    if m == 0 {
        return Err(Error::EmptySequence("cls_representation on m = 0"));
    }
    let flat = tape.reshape(hidden, &[n * m, d])?;
    let rows: Vec<usize> = (0..n).map(|i| i * m).collect();
    tape.gather_rows(flat, &rows)
}
