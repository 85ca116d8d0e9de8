use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cf::CfEmbeddings;
use crate::data::{Catalog, DatasetSplits, PromptBuilder, PromptSample, TitleMode, Vocabulary};
use crate::error::{CoraError, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::lm::{LanguageModel, TargetSet};
use crate::train_eval::{evaluate, score_samples, train_cora, MetricsReport, SplitMetrics, TrainConfig, TrainReport};

/// Which information channels a variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputVariant {
    /// Frozen model on titled prompts, no deltas.
    TextOnly,
    /// Deltas with every title replaced by a placeholder.
    IdOnly,
    /// Deltas on titled prompts.
    Combined,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub input: InputVariant,
    pub targets: TargetSet,
}

impl Variant {
    pub fn combined(targets: TargetSet) -> Self {
        Self {
            input: InputVariant::Combined,
            targets,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.input {
            InputVariant::TextOnly => f.write_str("text-only"),
            InputVariant::IdOnly => write!(f, "id-only:{}", self.targets),
            InputVariant::Combined => write!(f, "{}", self.targets),
        }
    }
}

/// Parses `text-only`, `id-only[:targets]`, `combined[:targets]` or a bare
/// target set such as `qkvo`. Omitted targets default to `qkvo`.
impl FromStr for Variant {
    type Err = CoraError;

    fn from_str(s: &str) -> Result<Self> {
        let (head, targets) = match s.split_once(':') {
            Some((h, t)) => (h, Some(t.parse::<TargetSet>()?)),
            None => (s, None),
        };
        let default_targets = || "qkvo".parse::<TargetSet>();
        Ok(match head {
            "text-only" if targets.is_none() => Self {
                input: InputVariant::TextOnly,
                targets: default_targets()?,
            },
            "id-only" => Self {
                input: InputVariant::IdOnly,
                targets: targets.map_or_else(default_targets, Ok)?,
            },
            "combined" => Self::combined(targets.map_or_else(default_targets, Ok)?),
            other if targets.is_none() => Self::combined(other.parse()?),
            _ => return Err(CoraError::config(format!("unknown variant {s:?}"))),
        })
    }
}

/// The five target-set rows of the weight-type comparison.
pub const TARGET_ROWS: [&str; 5] = ["qkvof", "qkvo", "qkv", "qko", "qk"];

/// Published full-scale (AUC, UAUC) per target set on a book-rating dataset,
/// shown beside the toy results for orientation only.
pub const REFERENCE_ROWS: [(&str, f64, f64); 5] = [
    ("qkvof", 0.8141, 0.6068),
    ("qkvo", 0.8179, 0.6262),
    ("qkv", 0.7741, 0.5747),
    ("qko", 0.8091, 0.5949),
    ("qk", 0.7685, 0.5644),
];

/// Frozen artifacts shared by every variant of a comparison.
pub struct Backbone<'a> {
    pub splits: &'a DatasetSplits,
    pub catalog: &'a Catalog,
    pub vocab: &'a Vocabulary,
    pub cf: &'a CfEmbeddings,
    pub lm: &'a LanguageModel,
    pub history_len: usize,
}

/// Prompt samples of each split for one title mode.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub train: Vec<PromptSample>,
    pub valid: Vec<PromptSample>,
    pub test: Vec<PromptSample>,
}

impl Backbone<'_> {
    pub fn samples(&self, mode: TitleMode) -> Result<SampleSet> {
        let b = PromptBuilder::new(self.splits, self.catalog, self.history_len, mode);
        Ok(SampleSet {
            train: b.samples(&self.splits.train, self.vocab)?,
            valid: b.samples(&self.splits.valid, self.vocab)?,
            test: b.samples(&self.splits.test, self.vocab)?,
        })
    }
}

/// Outcome of training and scoring one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: String,
    pub seed: u64,
    pub valid: SplitMetrics,
    pub test: MetricsReport,
    pub train: Option<TrainReport>,
}

/// Trains (unless text-only) and scores one variant. `seed` drives generator
/// initialisation and batch order.
pub fn run_variant(
    backbone: &Backbone,
    variant: &Variant,
    generator: &GeneratorConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(VariantRun, Option<Generator>)> {
    let mode = match variant.input {
        InputVariant::IdOnly => TitleMode::Placeholder,
        _ => TitleMode::Titles,
    };
    let samples = backbone.samples(mode)?;
    let (gen, report) = match variant.input {
        InputVariant::TextOnly => (None, None),
        _ => {
            let cfg = GeneratorConfig {
                targets: variant.targets.clone(),
                seed,
                ..generator.clone()
            };
            let mut gen = Generator::new(cfg, backbone.lm.config())?;
            let tc = TrainConfig { seed, ..train.clone() };
            let report = train_cora(&samples.train, &samples.valid, backbone.cf, &mut gen, backbone.lm, &tc)?;
            (Some(gen), Some(report))
        }
    };
    let valid_scores = score_samples(&samples.valid, backbone.cf, gen.as_ref(), backbone.lm)?;
    let valid_records: Vec<_> = backbone.splits.valid.clone();
    let test_scores = score_samples(&samples.test, backbone.cf, gen.as_ref(), backbone.lm)?;
    let mut test = evaluate(backbone.splits, &test_scores)?;
    if let Some(r) = &report {
        test.curve = r.curve.clone();
    }
    let run = VariantRun {
        variant: variant.to_string(),
        seed,
        valid: SplitMetrics::compute(&valid_records, &valid_scores)?,
        test,
        train: report,
    };
    Ok((run, gen))
}

/// One line of the long-format comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub auc: Option<f64>,
    pub uauc: Option<f64>,
    pub seed: u64,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub split: String,
    pub seeds: Vec<u64>,
    pub auc_mean: Option<f64>,
    pub auc_std: Option<f64>,
    pub uauc_mean: Option<f64>,
    pub uauc_std: Option<f64>,
    pub reference: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn push_run(&mut self, run: &VariantRun) {
        let mut add = |split: &str, m: &SplitMetrics| {
            self.rows.push(AblationRow {
                variant: run.variant.clone(),
                auc: m.auc,
                uauc: m.uauc,
                seed: run.seed,
                split: split.into(),
            })
        };
        add("valid", &run.valid);
        add("all", &run.test.all);
        add("warm", &run.test.warm);
        add("cold", &run.test.cold);
    }

    /// Mean and sample standard deviation over seeds, in first-seen variant order.
    /// Seeds with an absent metric are left out of that metric's statistics.
    pub fn summary(&self, split: &str) -> Vec<SummaryRow> {
        let mut order: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.variant.as_str()) {
                order.push(&r.variant);
            }
        }
        order
            .into_iter()
            .map(|v| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.variant == v && r.split == split).collect();
                let stats = |xs: Vec<f64>| (!xs.is_empty()).then(|| mean_std(&xs));
                let a = stats(rows.iter().filter_map(|r| r.auc).collect());
                let u = stats(rows.iter().filter_map(|r| r.uauc).collect());
                SummaryRow {
                    variant: v.to_string(),
                    split: split.to_string(),
                    seeds: rows.iter().map(|r| r.seed).collect(),
                    auc_mean: a.map(|x| x.0),
                    auc_std: a.map(|x| x.1),
                    uauc_mean: u.map(|x| x.0),
                    uauc_std: u.map(|x| x.1),
                    reference: REFERENCE_ROWS.iter().find(|r| r.0 == v).map(|r| (r.1, r.2)),
                }
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CoraError::Io(e.into()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| CoraError::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text table with one line per variant for `split`.
    pub fn render(&self, split: &str) -> String {
        let fmt = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            _ => "absent".to_string(),
        };
        let mut out = format!(
            "{:<14} {:>17} {:>17} {:>6}   {:>7} {:>7}\n",
            "weight type", "AUC", "UAUC", "seeds", "ref AUC", "ref UAUC"
        );
        for r in self.summary(split) {
            let (ra, ru) = r
                .reference
                .map_or(("-".into(), "-".into()), |(a, u)| (format!("{a:.4}"), format!("{u:.4}")));
            out.push_str(&format!(
                "{:<14} {:>17} {:>17} {:>6}   {:>7} {:>7}\n",
                r.variant,
                fmt(r.auc_mean, r.auc_std),
                fmt(r.uauc_mean, r.uauc_std),
                r.seeds.len(),
                ra,
                ru
            ));
        }
        out
    }
}

/// Runs every variant for every seed on shared frozen artifacts.
pub fn ablate(
    backbone: &Backbone,
    variants: &[Variant],
    generator: &GeneratorConfig,
    train: &TrainConfig,
    seeds: &[u64],
) -> Result<(AblationTable, Vec<VariantRun>)> {
    let mut table = AblationTable::default();
    let mut runs = Vec::new();
    for v in variants {
        for &seed in seeds {
            let (run, _) = run_variant(backbone, v, generator, train, seed)?;
            log::info!(
                "{} seed {seed}: valid auc {:?}, test auc {:?}",
                run.variant,
                run.valid.auc,
                run.test.all.auc
            );
            table.push_run(&run);
            runs.push(run);
        }
    }
    Ok((table, runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for s in ["text-only", "id-only:qkvo", "qkvof", "qk", "id-only:qk"] {
            assert_eq!(s.parse::<Variant>().unwrap().to_string(), s);
        }
        assert_eq!("combined".parse::<Variant>().unwrap().to_string(), "qkvo");
        assert_eq!("id-only".parse::<Variant>().unwrap().to_string(), "id-only:qkvo");
        assert!("text-only:qk".parse::<Variant>().is_err());
        assert!("z".parse::<Variant>().is_err());
    }

    #[test]
    fn summary_uses_sample_std_and_skips_absent() {
        let mut t = AblationTable::default();
        for (seed, auc) in [(0, Some(0.7)), (1, Some(0.9)), (2, None)] {
            t.rows.push(AblationRow {
                variant: "qkvo".into(),
                auc,
                uauc: Some(0.5),
                seed,
                split: "all".into(),
            });
        }
        let s = &t.summary("all")[0];
        assert_eq!(s.seeds, vec![0, 1, 2]);
        assert!((s.auc_mean.unwrap() - 0.8).abs() < 1e-12);
        assert!((s.auc_std.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.uauc_std, Some(0.0));
        assert_eq!(s.reference, Some((0.8179, 0.6262)));
        assert!(t.render("all").contains("0.8000 ± 0.1414"));
    }

    #[test]
    fn csv_has_the_long_format_header() {
        let mut t = AblationTable::default();
        t.rows.push(AblationRow {
            variant: "qk".into(),
            auc: Some(0.6),
            uauc: None,
            seed: 3,
            split: "cold".into(),
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "variant,auc,uauc,seed,split\nqk,0.6,,3,cold\n");
    }
}
