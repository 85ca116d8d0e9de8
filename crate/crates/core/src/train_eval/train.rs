use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cf::CfEmbeddings;
use crate::data::PromptSample;
use crate::error::{CoraError, Result};
use crate::generator::Generator;
use crate::lm::{DeltaSet, LanguageModel};
use crate::numerics::{AdamConfig, AdamState, Bound, Graph, Rng, Var};
use crate::train_eval::auc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Rate at the first step of the linear warm-up.
    pub warmup_lr: f64,
    /// Warm-up length; `None` means 5% of all scheduled steps.
    pub warmup_steps: Option<usize>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            warmup_lr: 1e-5,
            warmup_steps: None,
            weight_decay: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CoraError::config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.warmup_lr >= 0.0 && self.warmup_lr.is_finite()) {
            return Err(CoraError::config("warm-up learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(CoraError::config("weight decay must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(CoraError::config("batch_size and patience must be positive"));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` (0-based) out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = self.warmup_steps.unwrap_or(total / 20);
        if self.lr == 0.0 || step >= warm {
            return self.lr;
        }
        self.warmup_lr + (self.lr - self.warmup_lr) * step as f64 / warm as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub valid_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
    /// Validation AUC of the untrained generator.
    pub initial_valid_auc: f64,
    pub steps: usize,
    pub lm_checksum: String,
    pub cf_checksum: String,
}

/// Yes-probability for every sample, evaluated in parallel.
///
/// Without a generator this is the frozen text-only model.
pub fn score_samples(
    samples: &[PromptSample],
    cf: &CfEmbeddings,
    generator: Option<&Generator>,
    lm: &LanguageModel,
) -> Result<Vec<f64>> {
    samples.par_iter().map(|s| predict(s, cf, generator, lm)).collect()
}

pub fn predict(sample: &PromptSample, cf: &CfEmbeddings, generator: Option<&Generator>, lm: &LanguageModel) -> Result<f64> {
    let (e_u, e_i) = cf.pair(sample.user, sample.item)?;
    let mut g = Graph::new();
    let lb = lm.params.bind(&mut g);
    let deltas = match generator {
        Some(gen) => {
            let gb = gen.params.bind(&mut g);
            gen.generate_for(&mut g, &gb, e_u, e_i)?
        }
        None => DeltaSet::none(),
    };
    let p = lm.score_yes(&mut g, &lb, &sample.tokens, &deltas)?;
    Ok(g.scalar(p))
}

/// Mean BCE of one minibatch, built into `g`.
fn batch_loss(
    g: &mut Graph,
    gb: &Bound,
    lb: &Bound,
    batch: &[&PromptSample],
    cf: &CfEmbeddings,
    generator: &Generator,
    lm: &LanguageModel,
) -> Result<Var> {
    let mut probs = Vec::with_capacity(batch.len());
    for s in batch {
        let (e_u, e_i) = cf.pair(s.user, s.item)?;
        let deltas = generator.generate_for(g, gb, e_u, e_i)?;
        probs.push(lm.score_yes(g, lb, &s.tokens, &deltas)?);
    }
    let p = g.concat_rows(&probs)?;
    let labels: Vec<f64> = batch.iter().map(|s| f64::from(s.label)).collect();
    g.bce(p, &labels)
}

fn diverged(step: usize, e: CoraError) -> CoraError {
    match e {
        CoraError::NonFinite(what) => CoraError::Training {
            step,
            msg: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

fn check_frozen(lm: &LanguageModel, cf: &CfEmbeddings, lm_sum: &str, cf_sum: &str) -> Result<()> {
    if lm.params.checksum() != lm_sum {
        return Err(CoraError::Contamination("language-model weights".into()));
    }
    if cf.checksum() != cf_sum {
        return Err(CoraError::Contamination("collaborative embeddings".into()));
    }
    Ok(())
}

/// Trains only the generator with BCE on Yes-probabilities, keeping the
/// parameters of the best validation epoch.
pub fn train_cora(
    train: &[PromptSample],
    valid: &[PromptSample],
    cf: &CfEmbeddings,
    generator: &mut Generator,
    lm: &LanguageModel,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(CoraError::config("no training samples"));
    }
    if lm.params.tensors().iter().any(|t| t.requires_grad) {
        return Err(CoraError::config("language model must be frozen before generator training"));
    }
    let lm_checksum = lm.params.checksum();
    let cf_checksum = cf.checksum();
    let valid_labels: Vec<u8> = valid.iter().map(|s| s.label).collect();
    let valid_auc = |gen: &Generator, step: usize| -> Result<f64> {
        let scores = score_samples(valid, cf, Some(gen), lm).map_err(|e| diverged(step, e))?;
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(CoraError::Training {
                step,
                msg: format!("validation score became {bad}"),
            });
        }
        auc(&scores, &valid_labels)
    };

    generator.params.set_requires_grad(true);
    let mut opt = AdamState::new(AdamConfig::adamw(cfg.lr, cfg.weight_decay), &generator.params);
    let mut rng = Rng::derive(cfg.seed, 0x7A1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total = cfg.max_epochs * train.len().div_ceil(cfg.batch_size);

    let initial_valid_auc = valid_auc(generator, 0)?;
    let mut best = (initial_valid_auc, 0, generator.params.clone());
    let mut curve = Vec::with_capacity(cfg.max_epochs);
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut total_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PromptSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let gb = generator.params.bind(&mut g);
            let lb = lm.params.bind(&mut g);
            let loss = batch_loss(&mut g, &gb, &lb, &batch, cf, generator, lm).map_err(|e| diverged(step, e))?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(CoraError::Training {
                    step,
                    msg: format!("loss became {value}"),
                });
            }
            total_loss += value * batch.len() as f64;
            let grads = g.backward(loss);
            generator.params.zero_grad();
            generator.params.collect_grads(&grads, &gb);
            opt.step_with_lr(&mut generator.params, cfg.lr_at(step, total));
            step += 1;
        }
        let v = valid_auc(generator, step)?;
        let loss = total_loss / train.len() as f64;
        log::debug!("epoch {epoch} loss {loss:.5} valid auc {v:.4}");
        curve.push(EpochStats {
            epoch,
            loss,
            valid_auc: v,
        });
        if v > best.0 {
            best = (v, epoch, generator.params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    generator.params = best.2;
    generator.params.zero_grad();
    generator.params.set_requires_grad(false);
    check_frozen(lm, cf, &lm_checksum, &cf_checksum)?;
    Ok(TrainReport {
        curve,
        best_epoch: best.1,
        best_valid_auc: best.0,
        initial_valid_auc,
        steps: step,
        lm_checksum,
        cf_checksum,
    })
}
