//! Phase-1 pretraining of a 4-layer, 64-wide encoder on the synthetic corpus,
//! printing smoothed loss and held-out noise-classification accuracy.

use std::time::Instant;

use vega_core::corruption::CorruptionConfig;
use vega_core::pretrain::{
    evaluate_noise_classification, generate_synthetic_corpus, init_checkpoint, run_phase1, CorpusConfig,
    PretrainSchedule,
};
use vega_core::EncoderConfig;

fn main() -> vega_core::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let steps = args.first().copied().unwrap_or(2000);
    let batch = args.get(1).copied().unwrap_or(16);
    let lr = args.get(2).map(|&v| v as f64 * 1e-4).unwrap_or(1e-3);
    let env = |k: &str, d: f64| std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d);
    let config = EncoderConfig {
        num_layers: env("LAYERS", 4.0) as usize,
        hidden_size: 64,
        num_heads: 4,
        head_dim: 16,
        ffn_size: 256,
        vocab_size: 1000,
        max_relative_distance: 16,
        max_seq_len: 64,
        layer_norm_eps: 1e-7,
        dropout_rate: env("DROPOUT", 0.1),
    };
    let corpus = generate_synthetic_corpus(
        1,
        20_000,
        &CorpusConfig {
            num_topics: env("TOPICS", 8.0) as usize,
            num_groups: env("GROUPS", 8.0) as usize,
            tokens_per_cell: env("PER", 1.0) as usize,
            ..Default::default()
        },
    )?;
    let mut schedule = PretrainSchedule {
        phase1_steps: steps,
        batch_size: batch,
        seed: env("SEED", 7.0) as u64,
        ..Default::default()
    };
    schedule.optimizer.lr = lr;
    let cc = CorruptionConfig::default();
    let start = Instant::now();
    let mut window = Vec::new();
    let ck = run_phase1(init_checkpoint::<f32>(config, &schedule)?, &corpus, &schedule, &cc, &mut |r| {
        window.push(r.denoising_loss);
        if window.len() == 100 {
            println!(
                "step {:5} loss {:.4} ({:.1}s)",
                r.step + 1,
                window.iter().sum::<f64>() / 100.0,
                start.elapsed().as_secs_f64()
            );
            window.clear();
        }
        Ok(())
    })?;
    let m = evaluate_noise_classification(&ck, &corpus, &schedule, &cc, 99, 20)?;
    println!("accuracy {:.4} balanced {:.4} {:?}", m.accuracy(), m.balanced_accuracy(), m.confusion);
    Ok(())
}
