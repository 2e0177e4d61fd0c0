//! Phase-1 then phase-2 pretraining of the toy encoder, printing the
//! clean/corrupted alignment gap of held-out `[CLS]` vectors before and after
//! phase 2.

use vega_core::corruption::CorruptionConfig;
use vega_core::pretrain::{
    generate_synthetic_corpus, init_checkpoint, representation_gap, run_phase1, run_phase2, CorpusConfig,
    PretrainSchedule,
};
use vega_core::EncoderConfig;

fn main() -> vega_core::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let p1 = args.first().copied().unwrap_or(300);
    let p2 = args.get(1).copied().unwrap_or(500);
    let config = EncoderConfig {
        vocab_size: 1000,
        ..EncoderConfig::toy()
    };
    let corpus = generate_synthetic_corpus(1, 5000, &CorpusConfig::default())?;
    let held = generate_synthetic_corpus(2, 32, &CorpusConfig::default())?;
    let cc = CorruptionConfig::default();
    let seeds: u64 = std::env::var("SEEDS").ok().and_then(|v| v.parse().ok()).unwrap_or(5);
    for seed in 0..seeds {
        let mut schedule = PretrainSchedule {
            phase1_steps: p1,
            phase2_steps: p2,
            seed,
            lambda: std::env::var("LAMBDA").ok().and_then(|v| v.parse().ok()).unwrap_or(0.1),
            ..Default::default()
        };
        schedule.optimizer.lr = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(5e-4);
        let ck = run_phase1(init_checkpoint::<f32>(config.clone(), &schedule)?, &corpus, &schedule, &cc, &mut |_| Ok(()))?;
        let before = representation_gap(&ck.encoder, &held.sequences, &cc, 5)?;
        let mut last = 0.0;
        let ck = run_phase2(ck, &corpus, &schedule, &cc, &mut |r| {
            last = r.contrastive_loss;
            if std::env::var("TRACE").is_ok() && r.step % 50 == 0 {
                println!("  step {} rtd {:.4} con {:.4}", r.step, r.denoising_loss, r.contrastive_loss);
            }
            Ok(())
        })?;
        let after = representation_gap(&ck.encoder, &held.sequences, &cc, 5)?;
        println!("seed {seed}: gap {before:.4} -> {after:.4} (final contrastive loss {last:.4})");
    }
    Ok(())
}
