//! Feature/caption file ingestion, vocabulary, checkpoints, and the
//! synthetic toy corpus.

pub mod checkpoint;
pub mod files;
pub mod toy;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use files::{load_captions, load_features, save_captions, save_features};
pub use toy::{gen_toy_corpus, ToyCorpus};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};
