use std::collections::HashMap;

use crate::data::prompt::{build_prompt, PLACEHOLDER_TITLE};
use crate::error::{CoraError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const YES_ID: usize = 2;
pub const NO_ID: usize = 3;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const YES_TOKEN: &str = "Yes";
pub const NO_TOKEN: &str = "No";

/// Splits text into word pieces whose concatenation is the input.
///
/// A piece is a run of alphanumerics with at most one leading space, or any
/// other single character.
pub fn segment(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((start, c)) = chars.next() {
        let word_start = if c.is_alphanumeric() {
            true
        } else if c == ' ' {
            chars.peek().is_some_and(|&(_, n)| n.is_alphanumeric())
        } else {
            false
        };
        let mut end = start + c.len_utf8();
        if word_start {
            if c == ' ' {
                let (i, n) = chars.next().unwrap();
                end = i + n.len_utf8();
            }
            while let Some(&(i, n)) = chars.peek() {
                if !n.is_alphanumeric() {
                    break;
                }
                end = i + n.len_utf8();
                chars.next();
            }
        }
        out.push(&text[start..end]);
    }
    out
}

/// Word-level vocabulary with reserved padding, unknown and answer tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from the prompt template and the given texts.
    /// Token ids are assigned in order of first appearance.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::from_tokens(
            [PAD_TOKEN, UNK_TOKEN, YES_TOKEN, NO_TOKEN].map(String::from).to_vec(),
        )
        .expect("reserved tokens are distinct");
        let template = build_prompt(&[PLACEHOLDER_TITLE, PLACEHOLDER_TITLE], PLACEHOLDER_TITLE, 2);
        let empty = build_prompt::<&str>(&[], PLACEHOLDER_TITLE, 1);
        v.extend(&template);
        v.extend(&empty);
        for text in corpus {
            v.extend(text);
        }
        v
    }

    fn extend(&mut self, text: &str) {
        for piece in segment(text) {
            if !self.index.contains_key(piece) {
                self.index.insert(piece.to_string(), self.tokens.len());
                self.tokens.push(piece.to_string());
            }
        }
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = [PAD_TOKEN, UNK_TOKEN, YES_TOKEN, NO_TOKEN];
        if tokens.len() < reserved.len() || tokens.iter().zip(reserved).any(|(t, r)| t != r) {
            return Err(CoraError::config("vocabulary lacks the reserved <pad>/<unk>/Yes/No prefix"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CoraError::config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        segment(text).into_iter().map(|p| self.id(p).unwrap_or(UNK_ID)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                self.tokens
                    .get(i)
                    .map(String::as_str)
                    .ok_or_else(|| CoraError::Index(format!("token id {i} outside vocabulary of {}", self.len())))
            })
            .collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.tokens)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoraError::MissingArtifact {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_tokens(serde_json::from_str(&text)?)
    }
}
