//! Decoder-only token model giving `π(y|x)` over speech tokens conditioned on
//! text tokens.

mod decode;
mod io;
mod model;
mod sample;
mod vocab;

pub use io::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use model::{
    build_model, clone_frozen, ArchConfig, BoundParams, FrozenPolicy, NamedParam, PolicyCheckpoint,
    SequenceLogProb,
};
pub use decode::Decoder;
pub use sample::{greedy, sample, sample_many, sample_many_scored, SamplingConfig};
pub use vocab::{Role, TokenId, TokenSequence, Vocabulary, BOS, EOS, PAD, SEP};
