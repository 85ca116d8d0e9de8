//! Interaction ingestion, chronological splits, prompt rendering, tokenization
//! and synthetic data.

mod interactions;
pub mod prompt;
mod splits;
mod synthetic;
pub mod vocab;

pub use interactions::{
    load_interactions, read_titles, write_interactions, write_titles, Catalog, Interaction, DEFAULT_RATING_THRESHOLD,
    INTERACTIONS_HEADER, NEGATIVE_RATING, POSITIVE_RATING, TITLES_HEADER,
};
pub use prompt::{build_prompt, PromptBuilder, PromptSample, TitleMode, DEFAULT_HISTORY_LEN, PLACEHOLDER_TITLE};
pub use splits::{build_splits, mark_warm_cold, DatasetSplits, Partition, SplitsManifest, DEFAULT_WARM_THRESHOLD};
pub use synthetic::{cluster_word, gen_synthetic, SyntheticConfig, SyntheticData};
pub use vocab::{segment, Vocabulary, NO_ID, PAD_ID, UNK_ID, YES_ID};
