use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Interaction;
use crate::error::{CoraError, Result};

/// Default minimum number of training interactions for warm users and items.
pub const DEFAULT_WARM_THRESHOLD: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    All,
    Warm,
    Cold,
}

impl std::str::FromStr for Partition {
    type Err = CoraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "warm" => Ok(Self::Warm),
            "cold" => Ok(Self::Cold),
            other => Err(CoraError::config(format!("unknown split {other:?} (all|warm|cold)"))),
        }
    }
}

/// Chronological train/valid/test split with training-set popularity counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Positions of each split's records in the source interaction list.
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub user_counts: Vec<usize>,
    pub item_counts: Vec<usize>,
    /// One flag per test record once [`mark_warm_cold`] has run.
    pub test_warm: Option<Vec<bool>>,
    pub warm_threshold: Option<usize>,
}

impl DatasetSplits {
    pub fn user_count(&self, user: usize) -> usize {
        self.user_counts.get(user).copied().unwrap_or(0)
    }

    pub fn item_count(&self, item: usize) -> usize {
        self.item_counts.get(item).copied().unwrap_or(0)
    }

    /// Test records in the requested partition.
    pub fn test_partition(&self, part: Partition) -> Result<Vec<Interaction>> {
        if part == Partition::All {
            return Ok(self.test.clone());
        }
        let flags = self
            .test_warm
            .as_ref()
            .ok_or_else(|| CoraError::config("warm/cold flags have not been computed"))?;
        let want = part == Partition::Warm;
        Ok(self
            .test
            .iter()
            .zip(flags)
            .filter(|(_, &w)| w == want)
            .map(|(r, _)| *r)
            .collect())
    }
}

fn sort_key(r: &Interaction) -> (i64, usize, usize, u8) {
    (r.timestamp, r.user, r.item, r.label)
}

/// Global chronological split: the earliest records train, the latest test.
///
/// Ties in time are broken by `(user, item)`. Split sizes are
/// `round(n * test_frac)` and `round(n * valid_frac)`; training gets the rest.
pub fn build_splits(interactions: &[Interaction], valid_frac: f64, test_frac: f64) -> Result<DatasetSplits> {
    let in_unit = |f: f64| f > 0.0 && f < 1.0;
    if !in_unit(valid_frac) || !in_unit(test_frac) || valid_frac + test_frac >= 1.0 {
        return Err(CoraError::config(format!(
            "split fractions valid={valid_frac} test={test_frac} must lie in (0,1) and sum below 1"
        )));
    }
    let n = interactions.len();
    let n_test = (n as f64 * test_frac).round() as usize;
    let n_valid = (n as f64 * valid_frac).round() as usize;
    if n_test == 0 || n_valid == 0 || n_test + n_valid >= n {
        return Err(CoraError::config(format!(
            "{n} interactions cannot populate train/valid/test at {valid_frac}/{test_frac}"
        )));
    }
    let n_train = n - n_test - n_valid;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| sort_key(&interactions[i]));

    let train_idx = order[..n_train].to_vec();
    let valid_idx = order[n_train..n_train + n_valid].to_vec();
    let test_idx = order[n_train + n_valid..].to_vec();
    Ok(from_indices(interactions, train_idx, valid_idx, test_idx))
}

fn from_indices(
    interactions: &[Interaction],
    train_idx: Vec<usize>,
    valid_idx: Vec<usize>,
    test_idx: Vec<usize>,
) -> DatasetSplits {
    let pick = |idx: &[usize]| idx.iter().map(|&i| interactions[i]).collect::<Vec<_>>();
    let train = pick(&train_idx);
    let n_users = interactions.iter().map(|r| r.user + 1).max().unwrap_or(0);
    let n_items = interactions.iter().map(|r| r.item + 1).max().unwrap_or(0);
    let mut user_counts = vec![0; n_users];
    let mut item_counts = vec![0; n_items];
    for r in &train {
        user_counts[r.user] += 1;
        item_counts[r.item] += 1;
    }
    DatasetSplits {
        valid: pick(&valid_idx),
        test: pick(&test_idx),
        train,
        train_idx,
        valid_idx,
        test_idx,
        user_counts,
        item_counts,
        test_warm: None,
        warm_threshold: None,
    }
}

/// Flags a test record warm iff its user and its item both have at least
/// `threshold` training interactions.
pub fn mark_warm_cold(mut splits: DatasetSplits, threshold: usize) -> DatasetSplits {
    let flags = splits
        .test
        .iter()
        .map(|r| splits.user_count(r.user) >= threshold && splits.item_count(r.item) >= threshold)
        .collect();
    splits.test_warm = Some(flags);
    splits.warm_threshold = Some(threshold);
    splits
}

/// JSON form of a split: record indices per split plus warm flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsManifest {
    pub valid_frac: f64,
    pub test_frac: f64,
    pub warm_threshold: usize,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub test_warm: Vec<bool>,
}

impl SplitsManifest {
    pub fn from_splits(splits: &DatasetSplits, valid_frac: f64, test_frac: f64) -> Result<Self> {
        let test_warm = splits
            .test_warm
            .clone()
            .ok_or_else(|| CoraError::config("warm/cold flags have not been computed"))?;
        Ok(Self {
            valid_frac,
            test_frac,
            warm_threshold: splits.warm_threshold.unwrap_or(DEFAULT_WARM_THRESHOLD),
            train: splits.train_idx.clone(),
            valid: splits.valid_idx.clone(),
            test: splits.test_idx.clone(),
            test_warm,
        })
    }

    pub fn to_splits(&self, interactions: &[Interaction]) -> Result<DatasetSplits> {
        let n = interactions.len();
        let all = self.train.iter().chain(&self.valid).chain(&self.test);
        if let Some(bad) = all.clone().find(|&&i| i >= n) {
            return Err(CoraError::Reference(format!("split index {bad} beyond {n} interactions")));
        }
        if self.test_warm.len() != self.test.len() {
            return Err(CoraError::Validation("test_warm length differs from test split".into()));
        }
        let mut seen = vec![false; n];
        for &i in all {
            if std::mem::replace(&mut seen[i], true) {
                return Err(CoraError::Validation(format!("record {i} appears in two splits")));
            }
        }
        let mut splits = from_indices(interactions, self.train.clone(), self.valid.clone(), self.test.clone());
        splits.test_warm = Some(self.test_warm.clone());
        splits.warm_threshold = Some(self.warm_threshold);
        Ok(splits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(user: usize, item: usize, ts: i64) -> Interaction {
        Interaction {
            user,
            item,
            label: ((user + item) % 2) as u8,
            timestamp: ts,
        }
    }

    #[test]
    fn ten_records_split_six_two_two_in_time_order() {
        let rows: Vec<_> = (0..10).rev().map(|t| rec(t as usize % 3, t as usize, t)).collect();
        let s = build_splits(&rows, 0.2, 0.2).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (6, 2, 2));
        assert_eq!(s.train.iter().map(|r| r.timestamp).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(s.valid.iter().map(|r| r.timestamp).collect::<Vec<_>>(), vec![6, 7]);
        assert_eq!(s.test.iter().map(|r| r.timestamp).collect::<Vec<_>>(), vec![8, 9]);
    }

    #[test]
    fn equal_timestamps_break_ties_by_user_then_item() {
        let rows = vec![rec(2, 0, 5), rec(0, 3, 5), rec(1, 1, 5), rec(0, 1, 5), rec(1, 0, 5)];
        let s = build_splits(&rows, 0.2, 0.2).unwrap();
        let order: Vec<_> = s
            .train
            .iter()
            .chain(&s.valid)
            .chain(&s.test)
            .map(|r| (r.user, r.item))
            .collect();
        assert_eq!(order, vec![(0, 1), (0, 3), (1, 0), (1, 1), (2, 0)]);
    }

    #[test]
    fn too_few_records_or_bad_fractions() {
        let rows = vec![rec(0, 0, 1), rec(0, 1, 2)];
        assert!(matches!(build_splits(&rows, 0.2, 0.2), Err(CoraError::Config(_))));
        let rows: Vec<_> = (0..10).map(|t| rec(0, t as usize, t)).collect();
        assert!(build_splits(&rows, 0.0, 0.2).is_err());
        assert!(build_splits(&rows, 0.5, 0.5).is_err());
    }

    #[test]
    fn threshold_zero_marks_everything_warm() {
        let rows: Vec<_> = (0..20).map(|t| rec(t as usize % 4, t as usize % 5, t)).collect();
        let s = mark_warm_cold(build_splits(&rows, 0.2, 0.2).unwrap(), 0);
        assert!(s.test_warm.unwrap().iter().all(|&w| w));
    }

    #[test]
    fn user_without_training_history_is_cold() {
        let mut rows: Vec<_> = (0..18).map(|t| rec(0, t as usize % 2, t)).collect();
        rows.push(rec(9, 0, 100));
        rows.push(rec(9, 1, 101));
        let s = build_splits(&rows, 0.1, 0.1).unwrap();
        for threshold in 1..5 {
            let s = mark_warm_cold(s.clone(), threshold);
            for (r, w) in s.test.iter().zip(s.test_warm.as_ref().unwrap()) {
                if r.user == 9 {
                    assert!(!w);
                }
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let rows: Vec<_> = (0..20).map(|t| rec(t as usize % 4, t as usize % 5, 20 - t)).collect();
        let s = mark_warm_cold(build_splits(&rows, 0.2, 0.2).unwrap(), 2);
        let m = SplitsManifest::from_splits(&s, 0.2, 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("splits.json");
        m.save(&p).unwrap();
        let back = SplitsManifest::load(&p).unwrap().to_splits(&rows).unwrap();
        assert_eq!(back, s);
    }

    fn arb_rows() -> impl Strategy<Value = Vec<Interaction>> {
        prop::collection::vec((0usize..6, 0usize..6, 0u8..2, 0i64..15), 5..60).prop_map(|v| {
            v.into_iter()
                .map(|(user, item, label, timestamp)| Interaction { user, item, label, timestamp })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn test_never_precedes_train(rows in arb_rows()) {
            if let Ok(s) = build_splits(&rows, 0.2, 0.2) {
                let last_train = s.train.iter().map(|r| r.timestamp).max().unwrap();
                let first_valid = s.valid.iter().map(|r| r.timestamp).min().unwrap();
                prop_assert!(s.test.iter().all(|r| r.timestamp >= last_train));
                prop_assert!(s.test.iter().all(|r| r.timestamp >= first_valid));
                prop_assert_eq!(s.train.len() + s.valid.len() + s.test.len(), rows.len());
            }
        }

        #[test]
        fn split_ignores_input_order(rows in arb_rows(), seed in any::<u64>()) {
            let mut shuffled = rows.clone();
            crate::numerics::Rng::new(seed).shuffle(&mut shuffled);
            if let (Ok(a), Ok(b)) = (build_splits(&rows, 0.2, 0.2), build_splits(&shuffled, 0.2, 0.2)) {
                prop_assert_eq!(a.train, b.train);
                prop_assert_eq!(a.valid, b.valid);
                prop_assert_eq!(a.test, b.test);
            }
        }

        #[test]
        fn warm_and_cold_partition_test(rows in arb_rows(), threshold in 0usize..6) {
            if let Ok(s) = build_splits(&rows, 0.2, 0.2) {
                let s = mark_warm_cold(s, threshold);
                let warm = s.test_partition(Partition::Warm).unwrap();
                let cold = s.test_partition(Partition::Cold).unwrap();
                prop_assert_eq!(warm.len() + cold.len(), s.test.len());
                // raising the threshold never turns a cold record warm
                let higher = mark_warm_cold(s.clone(), threshold + 1);
                for (a, b) in s.test_warm.unwrap().iter().zip(higher.test_warm.unwrap()) {
                    prop_assert!(!( !a && b));
                }
            }
        }
    }
}
