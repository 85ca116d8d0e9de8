use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoraError, Result};

/// One observed (user, item, label) record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub label: u8,
    pub timestamp: i64,
}

/// Item titles plus each user's chronological interaction history.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    titles: Vec<Option<String>>,
    histories: Vec<Vec<usize>>,
}

impl Catalog {
    /// Builds a catalog; every interacted item must have a title.
    pub fn new(titles: Vec<Option<String>>, interactions: &[Interaction]) -> Result<Self> {
        let n_users = interactions.iter().map(|r| r.user + 1).max().unwrap_or(0);
        let mut sorted: Vec<&Interaction> = interactions.iter().collect();
        sorted.sort_by_key(|r| (r.timestamp, r.user, r.item));
        let mut histories = vec![Vec::new(); n_users];
        for r in sorted {
            if titles.get(r.item).is_none_or(Option::is_none) {
                return Err(CoraError::Reference(format!(
                    "item {} (user {}) has no title",
                    r.item, r.user
                )));
            }
            histories[r.user].push(r.item);
        }
        Ok(Self { titles, histories })
    }

    pub fn n_items(&self) -> usize {
        self.titles.len()
    }

    pub fn n_users(&self) -> usize {
        self.histories.len()
    }

    pub fn title(&self, item: usize) -> Option<&str> {
        self.titles.get(item).and_then(|t| t.as_deref())
    }

    pub fn titles(&self) -> &[Option<String>] {
        &self.titles
    }

    /// Items the user interacted with, oldest first.
    pub fn history(&self, user: usize) -> &[usize] {
        self.histories.get(user).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Deserialize)]
struct InteractionRow {
    user_id: usize,
    item_id: usize,
    rating: f64,
    timestamp: i64,
}

#[derive(Debug, Deserialize)]
struct TitleRow {
    item_id: usize,
    title: String,
}

pub const INTERACTIONS_HEADER: [&str; 4] = ["user_id", "item_id", "rating", "timestamp"];
pub const TITLES_HEADER: [&str; 2] = ["item_id", "title"];

/// Ratings strictly above this become positive labels.
pub const DEFAULT_RATING_THRESHOLD: f64 = 3.0;

/// Rating written for positive/negative labels so they survive binarization.
pub const POSITIVE_RATING: f64 = 5.0;
pub const NEGATIVE_RATING: f64 = 1.0;

fn tsv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| CoraError::MissingArtifact {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(true)
        .from_reader(file))
}

fn csv_error(e: csv::Error) -> CoraError {
    let line = e.position().map_or(0, |p| p.line());
    CoraError::Parse {
        line,
        msg: e.to_string(),
    }
}

fn check_header(reader: &mut csv::Reader<File>, want: &[&str]) -> Result<bool> {
    let header = reader.headers().map_err(csv_error)?;
    if header.is_empty() {
        return Ok(false);
    }
    if header.iter().ne(want.iter().copied()) {
        return Err(CoraError::Parse {
            line: 1,
            msg: format!("expected header {:?}, found {:?}", want, header.iter().collect::<Vec<_>>()),
        });
    }
    Ok(true)
}

pub fn read_titles(path: &Path) -> Result<Vec<Option<String>>> {
    let mut reader = tsv_reader(path)?;
    if !check_header(&mut reader, &TITLES_HEADER)? {
        return Ok(Vec::new());
    }
    let mut map = BTreeMap::new();
    for row in reader.deserialize::<TitleRow>() {
        let row = row.map_err(csv_error)?;
        map.insert(row.item_id, row.title);
    }
    let n = map.keys().next_back().map_or(0, |&k| k + 1);
    let mut titles = vec![None; n];
    for (k, v) in map {
        titles[k] = Some(v);
    }
    Ok(titles)
}

/// Reads an interactions TSV and its titles TSV.
///
/// Ratings above `rating_threshold` become label 1, everything else label 0.
pub fn load_interactions(
    interactions: &Path,
    titles: &Path,
    rating_threshold: f64,
) -> Result<(Vec<Interaction>, Catalog)> {
    let titles = read_titles(titles)?;
    let mut reader = tsv_reader(interactions)?;
    let mut out = Vec::new();
    if check_header(&mut reader, &INTERACTIONS_HEADER)? {
        for row in reader.deserialize::<InteractionRow>() {
            let row = row.map_err(csv_error)?;
            if !row.rating.is_finite() {
                return Err(CoraError::Parse {
                    line: out.len() as u64 + 2,
                    msg: format!("rating {} is not finite", row.rating),
                });
            }
            out.push(Interaction {
                user: row.user_id,
                item: row.item_id,
                label: u8::from(row.rating > rating_threshold),
                timestamp: row.timestamp,
            });
        }
    }
    let catalog = Catalog::new(titles, &out)?;
    Ok((out, catalog))
}

pub fn write_interactions(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", INTERACTIONS_HEADER.join("\t"))?;
    for r in interactions {
        let rating = if r.label == 1 { POSITIVE_RATING } else { NEGATIVE_RATING };
        writeln!(w, "{}\t{}\t{}\t{}", r.user, r.item, rating, r.timestamp)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_titles(path: &Path, catalog: &Catalog) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", TITLES_HEADER.join("\t"))?;
    for (i, t) in catalog.titles().iter().enumerate() {
        if let Some(t) = t {
            if t.contains(['\t', '\n']) {
                return Err(CoraError::Validation(format!("title of item {i} contains a tab or newline")));
            }
            writeln!(w, "{i}\t{t}")?;
        }
    }
    w.flush()?;
    Ok(())
}
