use serde::{Deserialize, Serialize};

use crate::error::{CoraError, Result};
use crate::lm::{DeltaSet, LanguageModel};
use crate::numerics::{AdamConfig, AdamState, Graph, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    /// Mean next-token loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
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

/// Trains every parameter on next-token prediction over `corpus`, then freezes
/// the model. Each sequence is a prompt followed by its answer token.
pub fn pretrain_lm(lm: &mut LanguageModel, corpus: &[Vec<usize>], cfg: &LmTrainConfig) -> Result<LmTrainReport> {
    if cfg.batch_size == 0 {
        return Err(CoraError::config("batch_size must be positive"));
    }
    let usable: Vec<&Vec<usize>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(CoraError::config("language-model corpus has no sequence of two or more tokens"));
    }
    lm.params.set_requires_grad(true);
    let mut opt = AdamState::new(AdamConfig::adamw(cfg.lr, cfg.weight_decay), &lm.params);
    let mut rng = Rng::derive(cfg.seed, 0x9E7);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let b = lm.params.bind(&mut g);
            let mut loss = None;
            for &i in batch {
                let seq = usable[i];
                let logits = lm
                    .logits(&mut g, &b, &seq[..seq.len() - 1], &DeltaSet::none())
                    .map_err(|e| diverged(step, e))?;
                let targets: Vec<Option<usize>> = seq[1..].iter().map(|&t| Some(t)).collect();
                let l = g.cross_entropy(logits, &targets).map_err(|e| diverged(step, e))?;
                loss = Some(match loss {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let loss = g.scale(loss.expect("batches are non-empty"), 1.0 / batch.len() as f64)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(CoraError::Training {
                    step,
                    msg: format!("language-model loss became {value}"),
                });
            }
            total += value * batch.len() as f64;
            let grads = g.backward(loss);
            lm.params.zero_grad();
            lm.params.collect_grads(&grads, &b);
            opt.step(&mut lm.params);
            step += 1;
        }
        epoch_loss.push(total / usable.len() as f64);
        log::debug!("lm epoch {} loss {:.4}", epoch_loss.len(), epoch_loss.last().unwrap());
    }
    lm.params.zero_grad();
    lm.freeze();
    Ok(LmTrainReport { epoch_loss, steps: step })
}
