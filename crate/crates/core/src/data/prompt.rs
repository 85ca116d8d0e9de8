use serde::{Deserialize, Serialize};

use crate::data::{Catalog, DatasetSplits, Interaction, Vocabulary, NO_ID, YES_ID};
use crate::error::{CoraError, Result};

/// Default number of most recent history titles kept in a prompt.
pub const DEFAULT_HISTORY_LEN: usize = 10;

/// Word substituted for every title when item text is removed.
pub const PLACEHOLDER_TITLE: &str = "Item";

const PREFIX: &str = "#Question: A user has given high ratings to the following movies: ";
const MIDDLE: &str = ". Leverage the information to predict whether the user would enjoy the movie titled ";
const SUFFIX: &str = "? Answer with \"Yes\" or \"No\". \n#Answer:";

/// Renders the recommendation question for a user history and a target item.
///
/// Only the last `max_history` titles are kept; an empty list renders as `none`.
pub fn build_prompt<S: AsRef<str>>(history: &[S], target: &str, max_history: usize) -> String {
    let keep = &history[history.len().saturating_sub(max_history)..];
    let list = if keep.is_empty() {
        "none".to_string()
    } else {
        keep.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(",")
    };
    format!("{PREFIX}{list}{MIDDLE}{target}{SUFFIX}")
}

/// Which text the prompt shows for items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TitleMode {
    #[default]
    Titles,
    /// Every title replaced by [`PLACEHOLDER_TITLE`].
    Placeholder,
}

/// A rendered prompt for one interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSample {
    pub user: usize,
    pub item: usize,
    pub label: u8,
    pub prompt: String,
    pub tokens: Vec<usize>,
}

impl PromptSample {
    /// Prompt tokens followed by the ground-truth answer token.
    pub fn with_answer(&self) -> Vec<usize> {
        let mut ids = self.tokens.clone();
        ids.push(if self.label == 1 { YES_ID } else { NO_ID });
        ids
    }
}

/// Builds prompts from positively rated training interactions that happened
/// strictly before each target record.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    /// Per user: (timestamp, item) of positive training records, oldest first.
    liked: Vec<Vec<(i64, usize)>>,
    titles: Vec<Option<String>>,
    pub max_history: usize,
    pub mode: TitleMode,
}

impl PromptBuilder {
    pub fn new(splits: &DatasetSplits, catalog: &Catalog, max_history: usize, mode: TitleMode) -> Self {
        let n_users = splits.user_counts.len().max(catalog.n_users());
        let mut liked = vec![Vec::new(); n_users];
        for r in splits.train.iter().filter(|r| r.label == 1) {
            liked[r.user].push((r.timestamp, r.item));
        }
        for h in &mut liked {
            h.sort_unstable();
        }
        Self {
            liked,
            titles: catalog.titles().to_vec(),
            max_history,
            mode,
        }
    }

    fn title(&self, item: usize) -> Result<&str> {
        let t = self
            .titles
            .get(item)
            .and_then(|t| t.as_deref())
            .ok_or_else(|| CoraError::Index(format!("item {item} has no title")))?;
        Ok(match self.mode {
            TitleMode::Titles => t,
            TitleMode::Placeholder => PLACEHOLDER_TITLE,
        })
    }

    /// Titles of the user's liked training items before `timestamp`, oldest first.
    pub fn history(&self, user: usize, timestamp: i64) -> Result<Vec<&str>> {
        let Some(liked) = self.liked.get(user) else {
            return Ok(Vec::new());
        };
        let end = liked.partition_point(|&(t, _)| t < timestamp);
        liked[..end].iter().map(|&(_, item)| self.title(item)).collect()
    }

    pub fn prompt(&self, record: &Interaction) -> Result<String> {
        let history = self.history(record.user, record.timestamp)?;
        Ok(build_prompt(&history, self.title(record.item)?, self.max_history))
    }

    pub fn sample(&self, record: &Interaction, vocab: &Vocabulary) -> Result<PromptSample> {
        let prompt = self.prompt(record)?;
        Ok(PromptSample {
            user: record.user,
            item: record.item,
            label: record.label,
            tokens: vocab.tokenize(&prompt),
            prompt,
        })
    }

    pub fn samples(&self, records: &[Interaction], vocab: &Vocabulary) -> Result<Vec<PromptSample>> {
        records.iter().map(|r| self.sample(r, vocab)).collect()
    }
}
