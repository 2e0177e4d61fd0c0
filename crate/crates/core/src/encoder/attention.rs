use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::Bindings;
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::EncoderConfig;

/// Bucket of the signed offset `i − j`, clipped to the window `k`:
/// `0` for `i − j ≤ −k`, `2k − 1` for `i − j ≥ k`, else `i − j + k`.
pub fn relative_bucket(i: usize, j: usize, k: usize) -> usize {
    let d = i as i64 - j as i64;
    let k = k as i64;
    if d <= -k {
        0
    } else if d >= k {
        (2 * k - 1) as usize
    } else {
        (d + k) as usize
    }
}

pub(crate) fn bucket_table(m: usize, k: usize, offset: usize) -> Vec<usize> {
    let mut t = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            t.push(relative_bucket(i + offset, j + offset, k));
        }
    }
    t
}

pub struct AttentionOutput {
    /// `[n*m, d]`, after the output projection.
    pub output: Var,
    /// Attention probabilities `[n*heads, m, m]`.
    pub probs: Var,
}

/// One disentangled self-attention block.
///
/// Per head the raw score is content→content + content→position +
/// position→content, `Qc_i·Kc_j + Qc_i·Kr_δ(i,j) + Kc_j·Qr_δ(j,i)`, scaled by
/// `1/√(3·d_h)`. Padded keys get zero probability.
///
/// `hidden` is `[n*m, d]`, `rel` the `[2k, d]` position table.
#[allow(clippy::too_many_arguments)]
pub fn disentangled_attention<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bindings,
    prefix: &str,
    config: &EncoderConfig,
    hidden: Var,
    rel: Var,
    n: usize,
    m: usize,
    key_mask: &[bool],
    position_offset: usize,
    dropout: Option<(&mut Rng, f64)>,
) -> Result<AttentionOutput> {
    let h = config.num_heads;
    let k = config.max_relative_distance;
    let proj = |tape: &mut Tape<T>, x: Var, name: &str| -> Result<Var> {
        let w = params.var(&format!("{prefix}.attn.{name}.weight"));
        let b = params.var(&format!("{prefix}.attn.{name}.bias"));
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    };

    let qc = proj(tape, hidden, "q")?;
    let kc = proj(tape, hidden, "k")?;
    let vc = proj(tape, hidden, "v")?;
    let qr = proj(tape, rel, "pos_q")?;
    let kr = proj(tape, rel, "pos_k")?;

    let qc = tape.split_heads(qc, n, m, h)?;
    let kc = tape.split_heads(kc, n, m, h)?;
    let vc = tape.split_heads(vc, n, m, h)?;
    let qr = tape.split_heads(qr, 1, 2 * k, h)?;
    let kr = tape.split_heads(kr, 1, 2 * k, h)?;

    let buckets = bucket_table(m, k, position_offset);
    let c2c = tape.bmm_t(qc, kc)?;
    let c2p = tape.rel_scores(qc, kr, buckets.clone(), h)?;
    // rel_scores(Kc, Qr)[b, j, i] = Kc_j · Qr_δ(j,i); transpose to index by (i, j).
    let p2c = tape.rel_scores(kc, qr, buckets, h)?;
    let p2c = tape.transpose_last2(p2c)?;

    let scores = tape.add(c2c, c2p)?;
    let scores = tape.add(scores, p2c)?;
    let scale = T::one() / T::from_usize(3 * config.head_dim).unwrap().sqrt();
    let scores = tape.scale(scores, scale);
    let probs = tape.masked_softmax(scores, key_mask, h * m)?;

    let attn = match dropout {
        Some((rng, p)) => tape.dropout(probs, p, rng),
        None => probs,
    };
    let ctx = tape.bmm(attn, vc)?;
    let ctx = tape.merge_heads(ctx, n, m, h)?;
    let output = proj(tape, ctx, "out")?;
    Ok(AttentionOutput { output, probs })
}
