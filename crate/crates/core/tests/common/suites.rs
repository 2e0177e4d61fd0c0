//! Check suites shared by the per-topic integration tests and the
//! acceptance run. Each returns measurements; callers decide pass/fail.

use vega_core::corruption::{corrupt_indexed, CorruptionConfig};
use vega_core::encoder::{cls_representation, encoder_forward, EncoderOutput, ForwardOptions, REL_EMBEDDINGS, WORD_EMBEDDINGS};
use vega_core::heads::{init_rtd_head, rtd_logits};
use vega_core::objectives::{contrastive_loss, rtd_loss, symmetric_kl, ContrastiveBatch};
use vega_core::rng::{self, Domain};
use vega_core::{EncoderConfig, EncoderState, ParamSet, Scalar, SequenceBatch, Tape, TokenSequence};

use super::{gradcheck, random_tensor, rel_err};

pub const H: f64 = 1e-3;

/// Worst finite-difference error of every differentiable op.
pub fn op_gradchecks() -> Vec<(&'static str, f64, String)> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, (err, at): (f64, String)| out.push((name, err, at));

    let a = random_tensor(&[3, 4], 1, 1.0);
    let b = random_tensor(&[4, 2], 2, 1.0);
    push("matmul", gradcheck(&[a.clone(), b], |t, v| t.matmul(v[0], v[1]).unwrap(), H));
    let bt = random_tensor(&[5, 4], 3, 1.0);
    push("matmul_t", gradcheck(&[a, bt], |t, v| t.matmul_t(v[0], v[1]).unwrap(), H));
    let a = random_tensor(&[2, 3, 4], 4, 1.0);
    let b = random_tensor(&[2, 4, 3], 5, 1.0);
    push("bmm", gradcheck(&[a.clone(), b], |t, v| t.bmm(v[0], v[1]).unwrap(), H));
    let b = random_tensor(&[2, 5, 4], 6, 1.0);
    push("bmm_t", gradcheck(&[a, b], |t, v| t.bmm_t(v[0], v[1]).unwrap(), H));

    let a = random_tensor(&[3, 4], 21, 1.0);
    let b = random_tensor(&[3, 4], 22, 1.0);
    let bias = random_tensor(&[4], 23, 1.0);
    push("add", gradcheck(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap(), H));
    push("sub", gradcheck(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap(), H));
    push("mul", gradcheck(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap(), H));
    push("scale", gradcheck(std::slice::from_ref(&a), |t, v| t.scale(v[0], -2.5), H));
    push("add_bias", gradcheck(&[a.clone(), bias], |t, v| t.add_bias(v[0], v[1]).unwrap(), H));
    push("gelu", gradcheck(&[random_tensor(&[3, 4], 24, 2.0)], |t, v| t.gelu(v[0]), H));
    push("exp", gradcheck(std::slice::from_ref(&a), |t, v| t.exp(v[0]), H));
    push("sum", gradcheck(std::slice::from_ref(&a), |t, v| t.sum(v[0]), H));
    push("mean", gradcheck(std::slice::from_ref(&a), |t, v| t.mean(v[0]), H));
    push("reshape", gradcheck(std::slice::from_ref(&a), |t, v| t.reshape(v[0], &[2, 6]).unwrap(), H));
    push("normalize_rows", gradcheck(std::slice::from_ref(&a), |t, v| t.normalize_rows(v[0]).unwrap(), H));

    let x = random_tensor(&[3, 5], 31, 1.5);
    let g = random_tensor(&[5], 32, 1.0);
    let bb = random_tensor(&[5], 33, 1.0);
    push("layer_norm", gradcheck(&[x.clone(), g, bb], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-7).unwrap(), H));
    push("softmax", gradcheck(std::slice::from_ref(&x), |t, v| t.softmax_lastdim(v[0]), H));
    push("log_softmax", gradcheck(std::slice::from_ref(&x), |t, v| t.log_softmax(v[0]), H));
    let mask = [true, false, true, true, false, true, true, true, true, true];
    push(
        "masked_softmax",
        gradcheck(&[random_tensor(&[2, 3, 5], 34, 1.0)], |t, v| t.masked_softmax(v[0], &mask, 3).unwrap(), H),
    );
    push(
        "cross_entropy",
        gradcheck(&[x], |t, v| t.cross_entropy(v[0], &[1, 4, 0], &[true, false, true]).unwrap(), H),
    );

    push("split_heads", gradcheck(&[random_tensor(&[6, 8], 41, 1.0)], |t, v| t.split_heads(v[0], 2, 3, 2).unwrap(), H));
    push(
        "merge_heads",
        gradcheck(&[random_tensor(&[4, 3, 4], 42, 1.0)], |t, v| t.merge_heads(v[0], 2, 3, 2).unwrap(), H),
    );
    push(
        "transpose_last2",
        gradcheck(&[random_tensor(&[2, 3, 4], 43, 1.0)], |t, v| t.transpose_last2(v[0]).unwrap(), H),
    );
    push(
        "gather_rows",
        gradcheck(&[random_tensor(&[5, 3], 44, 1.0)], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap(), H),
    );
    let q = random_tensor(&[4, 3, 4], 45, 1.0);
    let r = random_tensor(&[2, 6, 4], 46, 1.0);
    let buckets: Vec<usize> = (0..9).map(|k| (k * 5) % 6).collect();
    push(
        "rel_scores",
        gradcheck(&[q, r], move |t, v| t.rel_scores(v[0], v[1], buckets.clone(), 2).unwrap(), H),
    );
    push(
        "dropout",
        gradcheck(
            &[random_tensor(&[4, 4], 51, 1.0)],
            |t, v| {
                let mut r = rng::stream(5, Domain::Dropout, 0);
                t.dropout(v[0], 0.3, &mut r)
            },
            H,
        ),
    );

    let a = random_tensor(&[3, 4], 61, 1.0);
    let b = random_tensor(&[3, 4], 62, 1.0);
    push(
        "contrastive",
        gradcheck(
            &[a.clone(), b.clone()],
            |t, v| {
                contrastive_loss(
                    t,
                    &ContrastiveBatch {
                        h_clean: v[0],
                        h_corrupt: v[1],
                        temperature: 0.5,
                    },
                )
                .unwrap()
            },
            H,
        ),
    );
    push("symmetric_kl", gradcheck(&[a, b], |t, v| symmetric_kl(t, v[0], v[1]).unwrap(), H));
    out
}

pub fn toy_gradcheck_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden_size: 8,
        num_heads: 2,
        head_dim: 4,
        ffn_size: 16,
        vocab_size: 20,
        max_relative_distance: 3,
        max_seq_len: 16,
        layer_norm_eps: 1e-7,
        dropout_rate: 0.0,
    }
}

/// RTD loss on the corrupted pass plus the contrastive loss over both passes
/// of the 2-layer toy encoder, differentiated w.r.t. every encoder and head
/// parameter (up to 24 sampled elements per tensor). Returns the worst
/// relative error and its location.
pub fn encoder_gradcheck() -> (f64, String) {
    let cfg = toy_gradcheck_config();
    let enc = EncoderState::<f64>::new(cfg.clone(), 3).unwrap();
    let mut params = enc.params.clone();
    // larger init so the check is not dominated by near-zero gradients
    for (_, t) in params.iter_mut() {
        if t.rank() == 2 {
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
    }
    let mut hr = rng::stream(3, Domain::Init, 1);
    for (n, t) in init_rtd_head::<f64>(cfg.hidden_size, &mut hr).iter() {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        params.insert(n, t).unwrap();
    }

    let seqs = vec![TokenSequence::wrap(&[5, 6, 7, 8, 9, 10]), TokenSequence::wrap(&[11, 12, 13, 5])];
    let ccfg = CorruptionConfig {
        shuffle_rate: 0.34,
        replace_rate: 0.17,
        ..Default::default()
    };
    let corrupted: Vec<_> = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| corrupt_indexed(s, &ccfg, cfg.vocab_size, i as u64).unwrap())
        .collect();
    let clean = SequenceBatch::from_sequences(&seqs).unwrap();
    let noisy = SequenceBatch::from_sequences(
        &corrupted
            .iter()
            .map(|c| TokenSequence::new(c.corrupted_ids.clone()))
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let mut labels = vec![0u8; clean.n * clean.m];
    for (i, c) in corrupted.iter().enumerate() {
        labels[i * clean.m..i * clean.m + c.noise_labels.len()].copy_from_slice(&c.noise_labels);
    }

    let loss_of = |p: &ParamSet<f64>, tape: &mut Tape<f64>| {
        let b = p.bind(tape);
        let out_c = encoder_forward(tape, &b, &cfg, &noisy, ForwardOptions::eval()).unwrap();
        let logits = rtd_logits(tape, &b, out_c.hidden).unwrap();
        let rtd = rtd_loss(tape, logits, &labels, &noisy.special_mask).unwrap();
        let out_x = encoder_forward(tape, &b, &cfg, &clean, ForwardOptions::eval()).unwrap();
        let hc = cls_representation(tape, out_x.hidden).unwrap();
        let hs = cls_representation(tape, out_c.hidden).unwrap();
        let con = contrastive_loss(
            tape,
            &ContrastiveBatch {
                h_clean: hc,
                h_corrupt: hs,
                temperature: 0.5,
            },
        )
        .unwrap();
        let con = tape.scale(con, 0.3);
        (tape.add(rtd, con).unwrap(), b)
    };

    let mut tape = Tape::new();
    let (loss, b) = loss_of(&params, &mut tape);
    tape.backward(loss).unwrap();
    let grads = b.grads(&tape);

    let value = |p: &ParamSet<f64>| {
        let mut t = Tape::new();
        let (l, _) = loss_of(p, &mut t);
        t.value(l).item()
    };
    let mut pick = rng::stream(1, Domain::Heldout, 5);
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut worst = (0.0f64, String::new());
    for name in &names {
        let len = params.get(name).unwrap().len();
        let elems: Vec<usize> = if len <= 24 {
            (0..len).collect()
        } else {
            rng::sample_without_replacement(&mut pick, len, 24)
        };
        let g = grads.get(name).unwrap();
        for e in elems {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[e] += H;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[e] -= H;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * H);
            let err = rel_err(g[e], numeric);
            if err > worst.0 {
                worst = (err, format!("{name}[{e}]: analytic {} numeric {numeric}", g[e]));
            }
        }
    }
    worst
}

pub fn attention_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden_size: 16,
        num_heads: 4,
        head_dim: 4,
        ffn_size: 32,
        vocab_size: 50,
        max_relative_distance: 4,
        max_seq_len: 64,
        layer_norm_eps: 1e-7,
        dropout_rate: 0.1,
    }
}

fn seqs() -> Vec<TokenSequence> {
    vec![
        TokenSequence::wrap(&[5, 9, 13, 17, 21, 25, 29, 33, 37, 41, 45]),
        TokenSequence::wrap(&[6, 7, 8]),
        TokenSequence::wrap(&[30, 31, 32, 33, 34, 35]),
    ]
}

/// Evaluation-mode forward; returns hidden states and per-layer attention.
pub fn run<T: Scalar>(enc: &EncoderState<T>, batch: &SequenceBatch, offset: usize) -> (Vec<T>, Vec<Vec<T>>) {
    let mut tape = Tape::new();
    let b = enc.params.bind_frozen(&mut tape);
    let opts = ForwardOptions {
        position_offset: offset,
        ..Default::default()
    };
    let EncoderOutput { hidden, attention, .. } = encoder_forward(&mut tape, &b, &enc.config, batch, opts).unwrap();
    (
        tape.data(hidden).to_vec(),
        attention.iter().map(|&a| tape.data(a).to_vec()).collect(),
    )
}

/// Largest deviation from 1 of an attention row sum, over every row of every
/// layer of a padded f32 batch; padded keys must get exactly zero.
pub fn row_normalization_error() -> f64 {
    let enc = EncoderState::<f32>::new(attention_config(), 1).unwrap();
    let batch = SequenceBatch::from_sequences(&seqs()).unwrap();
    let (_, att) = run(&enc, &batch, 0);
    let (n, m, h) = (batch.n, batch.m, enc.config.num_heads);
    let mut worst = 0.0f64;
    for probs in &att {
        for bh in 0..n * h {
            let seq = bh / h;
            for i in 0..m {
                let row = &probs[(bh * m + i) * m..(bh * m + i + 1) * m];
                let s: f64 = row.iter().map(|&p| p as f64).sum();
                worst = worst.max((s - 1.0).abs());
                for (j, &p) in row.iter().enumerate() {
                    if !batch.attention_mask[seq * m + j] && p != 0.0 {
                        return f64::INFINITY;
                    }
                }
            }
        }
    }
    worst
}

/// Whether shifting every absolute position by several offsets leaves the
/// hidden states and attention bit-identical.
pub fn shift_invariant() -> bool {
    let enc = EncoderState::<f32>::new(attention_config(), 2).unwrap();
    let batch = SequenceBatch::from_sequences(&seqs()).unwrap();
    let base = run(&enc, &batch, 0);
    [1, 7, 37, 1000].iter().all(|&o| run(&enc, &batch, o) == base)
}

/// Largest hidden-state difference at real positions between each sequence
/// run alone and run padded inside a batch with longer sequences.
pub fn pad_invariance_error() -> f64 {
    let enc = EncoderState::<f32>::new(attention_config(), 3).unwrap();
    let all = seqs();
    let d = enc.config.hidden_size;
    let batch = SequenceBatch::padded(&all, 20).unwrap();
    let (hb, _) = run(&enc, &batch, 0);
    let mut worst = 0.0f64;
    for (i, s) in all.iter().enumerate() {
        let alone = SequenceBatch::from_sequences(std::slice::from_ref(s)).unwrap();
        let (ha, _) = run(&enc, &alone, 0);
        for p in 0..s.len() * d {
            worst = worst.max((ha[p] as f64 - hb[i * batch.m * d + p] as f64).abs());
        }
    }
    worst
}

fn layer_norm_rows(x: &[f64], d: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let mu = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            r.iter()
                .enumerate()
                .map(move |(k, v)| (v - mu) / (var + eps).sqrt() * gain[k] + bias[k])
                .collect::<Vec<_>>()
        })
        .collect()
}

fn affine(x: &[f64], d_in: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    x.chunks(d_in)
        .flat_map(|r| {
            (0..d_out)
                .map(|o| b[o] + (0..d_in).map(|k| r[k] * w[k * d_out + o]).sum::<f64>())
                .collect::<Vec<_>>()
        })
        .collect()
}

/// With the relative table zeroed, layer-0 attention must equal plain
/// content-to-content attention `softmax(Qc·Kcᵀ/√(3·d_h))` computed here from
/// the raw parameters. Returns the largest probability difference; also
/// checks that positions then have no influence at all.
pub fn zeroed_relative_error() -> f64 {
    let mut enc = EncoderState::<f64>::new(attention_config(), 4).unwrap();
    enc.params
        .get_mut(REL_EMBEDDINGS)
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let cfg = enc.config.clone();
    let (d, h, dh) = (cfg.hidden_size, cfg.num_heads, cfg.head_dim);
    let s = &seqs()[0];
    let batch = SequenceBatch::from_sequences(std::slice::from_ref(s)).unwrap();
    let m = batch.m;
    let (_, att) = run(&enc, &batch, 0);

    let p = |name: &str| enc.params.get(name).unwrap().data().to_vec();
    let emb = p(WORD_EMBEDDINGS);
    let x: Vec<f64> = s.ids.iter().flat_map(|&t| emb[t as usize * d..(t as usize + 1) * d].to_vec()).collect();
    let x = layer_norm_rows(&x, d, &p("encoder.embed_ln.gain"), &p("encoder.embed_ln.bias"), cfg.layer_norm_eps);
    let q = affine(&x, d, &p("encoder.layers.0.attn.q.weight"), &p("encoder.layers.0.attn.q.bias"));
    let k = affine(&x, d, &p("encoder.layers.0.attn.k.weight"), &p("encoder.layers.0.attn.k.bias"));
    let scale = 1.0 / ((3 * dh) as f64).sqrt();
    let mut worst = 0.0f64;
    for head in 0..h {
        for i in 0..m {
            let scores: Vec<f64> = (0..m)
                .map(|j| (0..dh).map(|c| q[i * d + head * dh + c] * k[j * d + head * dh + c]).sum::<f64>() * scale)
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for j in 0..m {
                let want = (scores[j] - mx).exp() / z;
                let got = att[0][(head * m + i) * m + j];
                worst = worst.max((want - got).abs());
            }
        }
    }
    // relative buckets are now irrelevant: reversing the token order only
    // reverses the rows and columns of the attention
    let rev: Vec<u32> = s.ids.iter().rev().copied().collect();
    let rbatch = SequenceBatch::from_sequences(&[TokenSequence::new(rev)]).unwrap();
    let (_, ratt) = run(&enc, &rbatch, 0);
    for head in 0..h {
        for i in 0..m {
            for j in 0..m {
                let a = att[0][(head * m + i) * m + j];
                let b = ratt[0][(head * m + (m - 1 - i)) * m + (m - 1 - j)];
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}
