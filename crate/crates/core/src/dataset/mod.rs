//! Embedding bundles, concept dictionaries, their on-disk format, minibatching
//! and a synthetic concept-mixture generator with planted ground truth.

mod batching;
mod bundle;
mod dictionary;
pub(crate) mod format;
mod synthetic;

pub use batching::{iterate_minibatches, Batch};
pub use bundle::EmbeddingBundle;
pub use dictionary::ConceptDictionary;
pub use format::{
    load_bundle, load_dictionary, save_bundle, save_dictionary, sha256_hex, sidecar, BundleManifest,
    DictionaryManifest, BUNDLE_MAGIC, DICT_MAGIC,
};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData, SyntheticGroundTruth};
