use vega_core::encoder::{EncoderConfig, EncoderState};
use vega_core::finetune::*;
use vega_core::pretrain::CorpusConfig;

fn env(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn config(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab,
        max_seq_len: 64,
        ..EncoderConfig::toy()
    }
}

fn main() {
    let steps = env("STEPS", 150.0) as usize;
    let lr = env("LR", 2e-3);
    let overlap = env("OVERLAP", 0.5);
    let hyper = |seed| FinetuneHyper {
        steps,
        batch_size: 16,
        seed,
        optimizer: vega_core::optim::AdamWConfig { lr, ..Default::default() },
        ..Default::default()
    };
    let cue = CueTaskConfig::default();
    let (mut base, mut trans, mut direct, mut cont) = (0.0, 0.0, 0.0, 0.0);
    for seed in 0..5u64 {
        let task = domain_shift_task(seed, 64, env("TEST", 64.0) as usize, overlap, &cue).unwrap();
        let enc = EncoderState::<f32>::new(config(task.vocab_size), seed).unwrap();
        let m = TaskModel::from_encoder(enc, task.train.kind, seed);
        let m0 = vanilla_finetune(&m, &task.train, None, &hyper(seed)).unwrap();
        let a0 = score_predictions(&task.test, &predict(&m0, &task.test, 32).unwrap());
        let mut audit = Vec::new();
        let mt = transductive_finetune(&m0, &task.train, &task.test, &hyper(seed), &mut audit).unwrap();
        let at = score_predictions(&task.test, &predict(&mt, &task.test, 32).unwrap());
        println!("seed {seed}: M0 {a0:.3} transductive {at:.3} rounds {}", audit.len());
        base += a0 / 5.0;
        trans += at / 5.0;

        let tt = transfer_task(seed, 400, 8, 200, &CueTaskConfig { num_classes: 4, ..cue.clone() }).unwrap();
        let enc = EncoderState::<f32>::new(config(tt.vocab_size), seed).unwrap();
        let m = TaskModel::from_encoder(enc, tt.target_train.kind, seed);
        let d = vanilla_finetune(&m, &tt.target_train, None, &hyper(seed)).unwrap();
        let c = continued_finetune(&m, &tt.intermediate, &tt.target_train, &hyper(seed)).unwrap();
        let ad = score_predictions(&tt.target_test, &predict(&d, &tt.target_test, 32).unwrap());
        let ac = score_predictions(&tt.target_test, &predict(&c, &tt.target_test, 32).unwrap());
        println!("        direct {ad:.3} continued {ac:.3}");
        direct += ad / 5.0;
        cont += ac / 5.0;

        let p = planted_pool(seed, 200, 10, 990, &CorpusConfig::default()).unwrap();
        let lm = train_ngram_lm(&p.train).unwrap();
        let s = select_similar(&p.pool, &lm, 10).unwrap();
        let hits = s.indices.iter().filter(|i| p.planted.contains(i)).count();
        println!("        planted {hits}/10");
    }
    println!("mean: M0 {base:.3} transductive {trans:.3} direct {direct:.3} continued {cont:.3}");
}
