//! Task fine-tuning: vanilla, adversarial, transductive self-training,
//! self-calibrated external data, and continued fine-tuning.

mod data;
mod model;
mod ngram;
mod strategies;
mod synthetic;

pub use data::{score_predictions, Label, Split, TaskDataset, TaskExample};
pub use model::{
    adversarial_finetune, predict, predict_labels, tune, vanilla_finetune, AdvConfig, AdvStepAudit, FinetuneHyper,
    TaskModel,
};
pub use ngram::{score_perplexity, select_similar, train_ngram_lm, NGramLM, Selection, Smoothing, BOS, EOS};
pub use strategies::{
    calibrate, continued_finetune, default_budget, self_calibrated_finetune, transductive_finetune, Calibration,
    RoundAudit,
};
pub use synthetic::{
    domain_shift_task, planted_pool, transfer_task, CueTaskConfig, DomainShiftTask, PlantedPool, TransferTask,
};
