//! The P-Former: a bidirectional sentence encoder trained as an autoencoder
//! through the frozen language model, whose eval-mode outputs serve as
//! reference prompts.

pub mod losses;
pub mod model;
pub mod train;

pub use losses::{contrastive_loss, info_nce, recon_loss, vocab_loss};
pub use model::{encoder_input, PFormer, PFormerConfig};
pub use train::{pformer_objective, recon_eval, train_pformer, PFormerTrainReport, ReconEval};
