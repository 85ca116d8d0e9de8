use std::path::Path;

use crate::cf::{pretrain_cf, CfConfig, CfEmbeddings, CfModel, CfTrainReport};
use crate::cli::config::{DataConfig, RunConfig, INTERACTIONS_FILE, TITLES_FILE};
use crate::data::{
    build_splits, gen_synthetic, load_interactions, mark_warm_cold, Catalog, DatasetSplits, Interaction, PromptBuilder,
    SyntheticConfig, TitleMode, Vocabulary,
};
use crate::error::{CoraError, Result};
use crate::lm::{pretrain_lm, LanguageModel, LmConfig, LmTrainConfig, LmTrainReport};
use crate::numerics::checkpoint::sha256_hex;
use crate::train_eval::Backbone;

/// A dataset with its chronological splits and warm/cold flags.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub interactions: Vec<Interaction>,
    pub catalog: Catalog,
    pub splits: DatasetSplits,
    pub n_users: usize,
    pub n_items: usize,
    /// SHA-256 over the parsed records and titles.
    pub dataset_hash: String,
}

impl Prepared {
    pub fn new(interactions: Vec<Interaction>, catalog: Catalog, data: &DataConfig) -> Result<Self> {
        let splits = mark_warm_cold(
            build_splits(&interactions, data.valid_frac, data.test_frac)?,
            data.warm_threshold,
        );
        let n_users = catalog.n_users().max(splits.user_counts.len());
        let n_items = catalog.n_items();
        let mut bytes = serde_json::to_vec(&interactions)?;
        bytes.extend(serde_json::to_vec(catalog.titles())?);
        Ok(Self {
            dataset_hash: sha256_hex(&bytes),
            interactions,
            catalog,
            splits,
            n_users,
            n_items,
        })
    }

    pub fn synthetic(cfg: &SyntheticConfig, data: &DataConfig) -> Result<Self> {
        let d = gen_synthetic(cfg);
        Self::new(d.interactions, d.catalog, data)
    }

    /// Reads `interactions.tsv` and `titles.tsv` from `dir`.
    pub fn load(dir: &Path, data: &DataConfig) -> Result<Self> {
        let (rows, catalog) = load_interactions(&dir.join(INTERACTIONS_FILE), &dir.join(TITLES_FILE), data.rating_threshold)?;
        Self::new(rows, catalog, data)
    }

    pub fn prompts(&self, history_len: usize, mode: TitleMode) -> PromptBuilder {
        PromptBuilder::new(&self.splits, &self.catalog, history_len, mode)
    }
}

pub fn fit_cf(prep: &Prepared, cfg: &CfConfig) -> Result<(CfModel, CfEmbeddings, CfTrainReport)> {
    let (model, mut emb, report) = pretrain_cf(cfg, &prep.splits, prep.n_users, prep.n_items)?;
    emb.dataset_hash = prep.dataset_hash.clone();
    Ok((model, emb, report))
}

/// Vocabulary of the titled training prompts plus the template words.
pub fn build_vocab(prep: &Prepared, history_len: usize) -> Result<Vocabulary> {
    let b = prep.prompts(history_len, TitleMode::Titles);
    let prompts = prep.splits.train.iter().map(|r| b.prompt(r)).collect::<Result<Vec<_>>>()?;
    Ok(Vocabulary::build(prompts.iter().map(String::as_str)))
}

/// Pretrains a language model on titled training prompts followed by their
/// answers, then freezes it.
pub fn fit_lm(
    prep: &Prepared,
    vocab: &Vocabulary,
    lm: &LmConfig,
    train: &LmTrainConfig,
    history_len: usize,
    seed: u64,
) -> Result<(LanguageModel, LmTrainReport)> {
    let samples = prep.prompts(history_len, TitleMode::Titles).samples(&prep.splits.train, vocab)?;
    let corpus: Vec<Vec<usize>> = samples.iter().map(|s| s.with_answer()).collect();
    let cfg = LmConfig {
        vocab_size: vocab.len(),
        ..lm.clone()
    };
    let mut model = LanguageModel::new(cfg, seed)?;
    let report = pretrain_lm(&mut model, &corpus, train)?;
    Ok((model, report))
}

/// Frozen CF embeddings and language model for one dataset.
pub struct Stack {
    pub prep: Prepared,
    pub vocab: Vocabulary,
    pub cf: CfEmbeddings,
    pub lm: LanguageModel,
    pub history_len: usize,
    pub cf_report: CfTrainReport,
    pub lm_report: LmTrainReport,
}

impl Stack {
    /// Trains CF and the language model for `prep` using `cfg` (resolved).
    pub fn build(prep: Prepared, cfg: &RunConfig) -> Result<Self> {
        let cfg = cfg.clone().resolved()?;
        let (_, cf, cf_report) = fit_cf(&prep, &cfg.cf)?;
        let history_len = cfg.data.history_len;
        let vocab = build_vocab(&prep, history_len)?;
        let (lm, lm_report) = fit_lm(&prep, &vocab, &cfg.lm, &cfg.lm_train, history_len, cfg.seed)?;
        if cf.n_users() < prep.n_users || cf.n_items() < prep.n_items {
            return Err(CoraError::config("CF embeddings do not cover the dataset"));
        }
        Ok(Self {
            prep,
            vocab,
            cf,
            lm,
            history_len,
            cf_report,
            lm_report,
        })
    }

    pub fn backbone(&self) -> Backbone<'_> {
        Backbone {
            splits: &self.prep.splits,
            catalog: &self.prep.catalog,
            vocab: &self.vocab,
            cf: &self.cf,
            lm: &self.lm,
            history_len: self.history_len,
        }
    }
}
