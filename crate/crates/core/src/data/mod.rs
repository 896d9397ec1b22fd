//! Dialogue corpora: vocabulary, sample types, the line-delimited file
//! format, padding/batching and the synthetic task generator.

mod batch;
mod corpus;
mod synthetic;
mod vocab;

pub use batch::{batch_and_pad, clip_sample, unbatch, PaddedBatch, PaddedUtterances};
pub use corpus::{
    load_corpus, read_corpus, save_corpus, write_corpus, CorpusSplits, DialogueSample, Speaker, Split, Utterance,
    UtteranceView, FORMAT_VERSION,
};
pub use synthetic::{min_normalized_distance, split_of, OracleResponder, SyntheticSpec, SyntheticWorld, WORLD_FILE};
pub use vocab::{Vocabulary, BOS, EOS, IMGCTX, PAD, RESERVED, UNK};
