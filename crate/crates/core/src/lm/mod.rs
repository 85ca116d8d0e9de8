//! Toy decoder-only language model whose linear weights accept per-sample
//! low-rank deltas, plus next-token pretraining.

mod inject;
mod pretrain;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use inject::{injectable_forward, injectable_forward_rows, DeltaSet, LowRank, TargetKind, TargetSet};
pub use pretrain::{pretrain_lm, LmTrainConfig, LmTrainReport};

use crate::data::{NO_ID, YES_ID};
use crate::error::{CoraError, Result};
use crate::numerics::{multi_head_attention, Bound, Graph, ParamId, ParamStore, Rng, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 512,
            max_len: 256,
        }
    }
}

impl LmConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(CoraError::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff < self.d_model {
            return Err(CoraError::config(format!("d_ff {} is below d_model {}", self.d_ff, self.d_model)));
        }
        if self.n_layers == 0 || self.max_len == 0 {
            return Err(CoraError::config("n_layers and max_len must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    attn_norm: ParamId,
    ffn_norm: ParamId,
    /// Indexed by [`TargetKind::index`].
    linears: [ParamId; 6],
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockLayout>,
    final_norm: ParamId,
}

fn layout(cfg: &LmConfig, params: &mut ParamStore, rng: Option<&mut Rng>) -> Layout {
    let mut rng = rng;
    let mut make = |name: String, shape: &[usize], std: f64| {
        let t = match rng.as_deref_mut() {
            Some(r) if std > 0.0 => Tensor::randn(shape, std, r),
            _ if std < 0.0 => Tensor::ones(shape),
            _ => Tensor::zeros(shape),
        };
        params.add(name, t)
    };
    let d = cfg.d_model;
    let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
    let tok_emb = make("tok_emb".into(), &[cfg.vocab_size, d], 0.1);
    let pos_emb = make("pos_emb".into(), &[cfg.max_len, d], 0.1);
    let blocks = (0..cfg.n_layers)
        .map(|l| {
            let attn_norm = make(format!("layer{l}.attn_norm"), &[d], -1.0);
            let linears = TargetKind::ALL.map(|k| {
                let (d_in, d_out) = k.shape(cfg);
                let mut std = 1.0 / (d_in as f64).sqrt();
                if matches!(k, TargetKind::O | TargetKind::Down) {
                    std *= resid;
                }
                make(format!("layer{l}.w{}", k.name()), &[d_in, d_out], std)
            });
            let ffn_norm = make(format!("layer{l}.ffn_norm"), &[d], -1.0);
            BlockLayout {
                attn_norm,
                ffn_norm,
                linears,
            }
        })
        .collect();
    let final_norm = make("final_norm".into(), &[d], -1.0);
    Layout {
        tok_emb,
        pos_emb,
        blocks,
        final_norm,
    }
}

/// Decoder-only transformer with tied input/output embeddings.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    config: LmConfig,
    pub params: ParamStore,
    layout: Layout,
}

/// Attention matrices recorded during a forward pass, per layer then head.
pub type AttentionTrace = Vec<Vec<Var>>;

impl LanguageModel {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::derive(seed, 0x1A46);
        let layout = layout(&config, &mut params, Some(&mut rng));
        Ok(Self { config, params, layout })
    }

    /// Wraps loaded parameters, checking names and shapes against the config.
    pub fn from_params(config: LmConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamStore::new();
        let layout = layout(&config, &mut expected, None);
        expected.check_same_layout(&params)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn param_id(&self, layer: usize, kind: TargetKind) -> ParamId {
        self.layout.blocks[layer].linears[kind.index()]
    }

    pub fn tok_emb(&self) -> ParamId {
        self.layout.tok_emb
    }

    pub fn pos_emb(&self) -> ParamId {
        self.layout.pos_emb
    }

    pub fn freeze(&mut self) {
        self.params.set_requires_grad(false);
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.save(&dir.join("lm.ckpt"))?;
        std::fs::write(dir.join("lm_config.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("lm_config.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| CoraError::MissingArtifact {
            path: cfg_path.clone(),
            msg: e.to_string(),
        })?;
        let config: LmConfig = serde_json::from_str(&text)?;
        let mut lm = Self::from_params(config, ParamStore::load(&dir.join("lm.ckpt"))?)?;
        lm.freeze();
        Ok(lm)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(CoraError::dim("empty token sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(CoraError::Length {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(CoraError::Index(format!(
                "token {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Final normalised hidden states `[L x d_model]`.
    pub fn hidden(
        &self,
        g: &mut Graph,
        b: &Bound,
        ids: &[usize],
        deltas: &DeltaSet,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        self.check_ids(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = g.gather_rows(b[self.layout.tok_emb], ids)?;
        let pos = g.gather_rows(b[self.layout.pos_emb], &positions)?;
        let mut x = g.add(tok, pos)?;
        for (l, block) in self.layout.blocks.iter().enumerate() {
            let lin = |k: TargetKind| b[block.linears[k.index()]];
            let h = g.rms_norm(x, b[block.attn_norm], NORM_EPS)?;
            let q = injectable_forward(g, h, lin(TargetKind::Q), deltas.get(l, TargetKind::Q))?;
            let k = injectable_forward(g, h, lin(TargetKind::K), deltas.get(l, TargetKind::K))?;
            let v = injectable_forward(g, h, lin(TargetKind::V), deltas.get(l, TargetKind::V))?;
            let mut probs = Vec::new();
            let recorder = trace.is_some().then_some(&mut probs);
            let attn = multi_head_attention(g, q, k, v, self.config.n_heads, true, recorder)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(probs);
            }
            let o = injectable_forward(g, attn, lin(TargetKind::O), deltas.get(l, TargetKind::O))?;
            x = g.add(x, o)?;
            let h = g.rms_norm(x, b[block.ffn_norm], NORM_EPS)?;
            let up = injectable_forward(g, h, lin(TargetKind::Up), deltas.get(l, TargetKind::Up))?;
            let act = g.silu(up)?;
            let down = injectable_forward(g, act, lin(TargetKind::Down), deltas.get(l, TargetKind::Down))?;
            x = g.add(x, down)?;
        }
        g.rms_norm(x, b[self.layout.final_norm], NORM_EPS)
    }

    /// Next-token logits `[L x vocab]` through the tied embedding.
    pub fn logits(&self, g: &mut Graph, b: &Bound, ids: &[usize], deltas: &DeltaSet) -> Result<Var> {
        let h = self.hidden(g, b, ids, deltas, None)?;
        let et = g.transpose(b[self.layout.tok_emb])?;
        g.matmul(h, et)
    }

    /// `logit(Yes) - logit(No)` at the final position, shape `[1 x 1]`.
    pub fn answer_margin(&self, g: &mut Graph, b: &Bound, ids: &[usize], deltas: &DeltaSet) -> Result<Var> {
        if self.config.vocab_size <= YES_ID.max(NO_ID) {
            return Err(CoraError::config(format!(
                "vocabulary of {} tokens lacks the Yes/No answer ids",
                self.config.vocab_size
            )));
        }
        let h = self.hidden(g, b, ids, deltas, None)?;
        let last = g.slice_rows(h, ids.len() - 1, 1)?;
        let answers = g.gather_rows(b[self.layout.tok_emb], &[YES_ID, NO_ID])?;
        let diff = g.constant(&Tensor::new(&[2, 1], vec![1.0, -1.0])?);
        let dir = g.transpose(answers)?;
        let dir = g.matmul(dir, diff)?;
        g.matmul(last, dir)
    }

    /// Probability of "Yes" against "No" for the next token.
    pub fn score_yes(&self, g: &mut Graph, b: &Bound, ids: &[usize], deltas: &DeltaSet) -> Result<Var> {
        let m = self.answer_margin(g, b, ids, deltas)?;
        g.sigmoid(m)
    }

    /// Logits without deltas, outside any caller graph.
    pub fn plain_logits(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let v = self.logits(&mut g, &b, ids, &DeltaSet::none())?;
        Ok(g.tensor(v))
    }

    /// Yes-probability without deltas.
    pub fn plain_score(&self, ids: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let v = self.score_yes(&mut g, &b, ids, &DeltaSet::none())?;
        Ok(g.scalar(v))
    }
}

/// `σ(logit_yes - logit_no)`, the two-way softmax evaluated at "Yes".
pub fn yes_probability(logit_yes: f64, logit_no: f64) -> f64 {
    crate::numerics::kernels::sigmoid(logit_yes - logit_no)
}

#[cfg(test)]
mod tests;
