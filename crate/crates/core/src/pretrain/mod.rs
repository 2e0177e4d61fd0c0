//! Two-phase pretraining: denoising only, then denoising plus contrastive
//! alignment continued from the phase-1 checkpoint.
//!
//! Every random draw of a step (batch order, corruption, dropout) comes from
//! a stream keyed by the run seed and the step's stream position, so a run
//! resumed from a checkpoint replays exactly the steps it would have taken.

mod checkpoint;
mod corpus;
mod trainer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint,
    HeadKind, Phase, MAGIC, VERSION,
};
pub use corpus::{generate_synthetic_corpus, Corpus, CorpusConfig};
pub use trainer::{
    draw_batch, evaluate_noise_classification, init_checkpoint, longest_increase_run, make_noisy_batch,
    representation_gap, run_phase1, run_phase1_for, run_phase2, run_phase2_for, train_step, window_means, NoiseMetrics,
    NoisyBatch, PretrainSchedule,
};
