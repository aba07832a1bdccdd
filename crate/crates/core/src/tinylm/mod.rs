//! Word-level tokenizer and a tiny causal language model that accepts a
//! soft-prompt prefix.

pub mod generate;
pub mod model;
pub mod tokenizer;
pub mod train;

pub use generate::{fit_prompt, generate_batch, generate_greedy};
pub use model::{argmax, lm_loss, CausalLm, LmConfig, SoftPrompt};
pub use tokenizer::{pad_batch, shift_batch, TokenSeq, Tokenizer, BOS, CLS, EOS, PAD};
pub use train::{
    evaluate_lm, pretrain_lm, pretrain_lm_seqs, teacher_forced_predictions, LmEval, LmTrainReport,
};
