use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplits, Interaction};
use crate::error::{CoraError, Result};
use crate::train_eval::{auc, uauc, EpochStats};

/// Metrics over one subset of test records; `None` marks a metric that is
/// undefined there (empty subset or a single label class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub records: usize,
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
    pub uauc_users: usize,
    pub uauc_skipped: usize,
}

impl SplitMetrics {
    pub fn compute(records: &[Interaction], scores: &[f64]) -> Result<Self> {
        if records.len() != scores.len() {
            return Err(CoraError::dim(format!("{} records, {} scores", records.len(), scores.len())));
        }
        let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
        let users: Vec<usize> = records.iter().map(|r| r.user).collect();
        let auc = match auc(scores, &labels) {
            Ok(v) => Some(v),
            Err(CoraError::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let mut distinct = users.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let (uauc, uauc_users, uauc_skipped) = match uauc(scores, &labels, &users) {
            Ok(r) => (Some(r.value), r.users, r.skipped),
            Err(CoraError::UndefinedMetric(_)) => (None, 0, distinct.len()),
            Err(e) => return Err(e),
        };
        Ok(Self {
            records: records.len(),
            auc,
            uauc,
            uauc_users,
            uauc_skipped,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub all: SplitMetrics,
    pub warm: SplitMetrics,
    pub cold: SplitMetrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curve: Vec<EpochStats>,
}

impl MetricsReport {
    pub fn split(&self, name: crate::data::Partition) -> &SplitMetrics {
        use crate::data::Partition;
        match name {
            Partition::All => &self.all,
            Partition::Warm => &self.warm,
            Partition::Cold => &self.cold,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// AUC and UAUC on the whole test split and its warm and cold subsets.
///
/// `scores` are aligned with `splits.test`.
pub fn evaluate(splits: &DatasetSplits, scores: &[f64]) -> Result<MetricsReport> {
    let flags = splits
        .test_warm
        .as_ref()
        .ok_or_else(|| CoraError::config("test records have no warm/cold flags"))?;
    if scores.len() != splits.test.len() {
        return Err(CoraError::dim(format!(
            "{} scores for {} test records",
            scores.len(),
            splits.test.len()
        )));
    }
    let subset = |want: bool| -> Result<SplitMetrics> {
        let (recs, sc): (Vec<Interaction>, Vec<f64>) = splits
            .test
            .iter()
            .zip(scores)
            .zip(flags)
            .filter(|(_, &w)| w == want)
            .map(|((r, &s), _)| (*r, s))
            .unzip();
        SplitMetrics::compute(&recs, &sc)
    };
    Ok(MetricsReport {
        all: SplitMetrics::compute(&splits.test, scores)?,
        warm: subset(true)?,
        cold: subset(false)?,
        curve: Vec::new(),
    })
}

pub fn write_curve_csv(path: &Path, curve: &[EpochStats]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,loss,valid_auc")?;
    for e in curve {
        writeln!(w, "{},{},{}", e.epoch, e.loss, e.valid_auc)?;
    }
    w.flush()?;
    Ok(())
}
