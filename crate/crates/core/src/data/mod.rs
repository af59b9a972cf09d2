//! Corpus ingestion, text normalization, vocabulary, splits, batching and
//! the synthetic corpus generator.

pub mod batch;
pub mod corpus;
pub mod image;
pub mod split;
pub mod synth;
pub mod text;
pub mod vocab;

pub use batch::{batch_iterator, Batch, Example, VisualInput};
pub use corpus::{
    prepare_records, read_corpus, write_corpus, CorpusRecord, LengthLimits, PreparedRecord,
    SkipReport,
};
pub use image::{load_image, rgb_to_tensor, write_ppm};
pub use split::{split_dataset, SplitSpec, Splits};
pub use synth::{generate_synthetic_corpus, write_synthetic_corpus, SyntheticSample};
pub use text::{keywords_to_sequence, normalize_text, SEP_TOKEN};
pub use vocab::{build_vocab, Vocabulary, SPECIAL_TOKENS};
