//! Collaborative query generator: learnable queries attend over the user and
//! item embeddings and are pooled into a vector that is mapped to low-rank
//! weight deltas for the language model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoraError, Result};
use crate::lm::{DeltaSet, LmConfig, LowRank, TargetKind, TargetSet};
use crate::numerics::{multi_head_attention, Bound, Graph, ParamId, ParamStore, Rng, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

/// How delta heads are shared across language-model layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sharing {
    /// One head per weight type, reused by every layer.
    #[default]
    PerType,
    /// One head per (layer, weight type).
    PerLayer,
}

impl std::str::FromStr for Sharing {
    type Err = CoraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-type" | "shared" => Ok(Self::PerType),
            "per-layer" => Ok(Self::PerLayer),
            other => Err(CoraError::config(format!("unknown sharing {other:?} (per-type|per-layer)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Number of learnable queries.
    pub k: usize,
    pub n_blocks: usize,
    /// Width of the CF embeddings; the generator works at `2 * d_c`.
    pub d_c: usize,
    pub heads: usize,
    pub rank: usize,
    pub ffn_mult: usize,
    pub targets: TargetSet,
    pub sharing: Sharing,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            k: 4,
            n_blocks: 8,
            d_c: 256,
            heads: 4,
            rank: 16,
            ffn_mult: 4,
            targets: "qkvo".parse().expect("valid targets"),
            sharing: Sharing::PerType,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn d_g(&self) -> usize {
        2 * self.d_c
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d_c == 0 || self.rank == 0 || self.ffn_mult == 0 {
            return Err(CoraError::config("k, d_c, rank and ffn_mult must be positive"));
        }
        if self.heads == 0 || self.d_g() % self.heads != 0 {
            return Err(CoraError::config(format!(
                "generator width {} is not divisible by {} heads",
                self.d_g(),
                self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorBlock {
    pub self_norm: ParamId,
    pub self_attn: [ParamId; 4],
    pub cross_norm: ParamId,
    pub cross_attn: [ParamId; 4],
    pub ffn_norm: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

/// `W_FC [d_g x d_in*r]` and `W_proj [r x d_out]` for one host weight.
#[derive(Debug, Clone, Copy)]
pub struct DeltaHead {
    pub fc: ParamId,
    pub proj: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    lm_layers: usize,
    pub params: ParamStore,
    queries: ParamId,
    lift_user: ParamId,
    lift_item: ParamId,
    blocks: Vec<GeneratorBlock>,
    final_norm: ParamId,
    /// Keyed by (layer or `None` when shared, kind).
    heads: Vec<(Option<usize>, TargetKind, DeltaHead)>,
}

impl Generator {
    /// Fresh generator with zero `W_proj` for every head.
    pub fn new(config: GeneratorConfig, lm: &LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(config.seed, 0x6E4);
        let mut params = ParamStore::new();
        let d_g = config.d_g();
        let d_c = config.d_c;
        let mut randn = |p: &mut ParamStore, name: String, shape: &[usize], std: f64| {
            p.add(name, Tensor::randn(shape, std, &mut rng).with_grad())
        };
        let ones = |p: &mut ParamStore, name: String, n: usize| p.add(name, Tensor::ones(&[n]).with_grad());
        let sq = 1.0 / (d_g as f64).sqrt();
        let queries = randn(&mut params, "queries".into(), &[config.k, d_g], 1.0);
        let lift_user = randn(&mut params, "lift_user".into(), &[d_c, d_g], 1.0 / (d_c as f64).sqrt());
        let lift_item = randn(&mut params, "lift_item".into(), &[d_c, d_g], 1.0 / (d_c as f64).sqrt());
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for l in 0..config.n_blocks {
            let self_norm = ones(&mut params, format!("block{l}.self_norm"), d_g);
            let self_attn = ["q", "k", "v", "o"].map(|n| randn(&mut params, format!("block{l}.self_w{n}"), &[d_g, d_g], sq));
            let cross_norm = ones(&mut params, format!("block{l}.cross_norm"), d_g);
            let cross_attn = ["q", "k", "v", "o"].map(|n| randn(&mut params, format!("block{l}.cross_w{n}"), &[d_g, d_g], sq));
            let ffn_norm = ones(&mut params, format!("block{l}.ffn_norm"), d_g);
            let hidden = config.ffn_mult * d_g;
            let w_up = randn(&mut params, format!("block{l}.w_up"), &[d_g, hidden], sq);
            let w_down = randn(&mut params, format!("block{l}.w_down"), &[hidden, d_g], 1.0 / (hidden as f64).sqrt());
            blocks.push(GeneratorBlock {
                self_norm,
                self_attn,
                cross_norm,
                cross_attn,
                ffn_norm,
                w_up,
                w_down,
            });
        }
        let final_norm = ones(&mut params, "final_norm".into(), d_g);
        let layers: Vec<Option<usize>> = match config.sharing {
            Sharing::PerType => vec![None],
            Sharing::PerLayer => (0..lm.n_layers).map(Some).collect(),
        };
        let mut heads = Vec::new();
        for layer in layers {
            for &kind in config.targets.kinds() {
                let (d_in, d_out) = kind.shape(lm);
                let tag = layer.map_or_else(|| kind.name().to_string(), |l| format!("layer{l}.{}", kind.name()));
                let fc_std = 1.0 / ((d_g * d_in) as f64).sqrt();
                let fc = randn(&mut params, format!("head.{tag}.fc"), &[d_g, d_in * config.rank], fc_std);
                let proj = params.add(format!("head.{tag}.proj"), Tensor::zeros(&[config.rank, d_out]).with_grad());
                heads.push((layer, kind, DeltaHead { fc, proj, d_in, d_out }));
            }
        }
        Ok(Self {
            config,
            lm_layers: lm.n_layers,
            params,
            queries,
            lift_user,
            lift_item,
            blocks,
            final_norm,
            heads,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn queries(&self) -> ParamId {
        self.queries
    }

    pub fn blocks(&self) -> &[GeneratorBlock] {
        &self.blocks
    }

    pub fn heads(&self) -> impl Iterator<Item = (Option<usize>, TargetKind, &DeltaHead)> {
        self.heads.iter().map(|(l, k, h)| (*l, *k, h))
    }

    /// The two memory tokens `[e_u W_user; e_i W_item]`, shape `[2 x d_g]`.
    pub fn memory(&self, g: &mut Graph, b: &Bound, e_u: Var, e_i: Var) -> Result<Var> {
        for (name, v) in [("e_u", e_u), ("e_i", e_i)] {
            if g.shape(v) != [1, self.config.d_c] {
                return Err(CoraError::config(format!(
                    "{name} has shape {:?}, generator expects [1, {}]",
                    g.shape(v),
                    self.config.d_c
                )));
            }
        }
        let u = g.matmul(e_u, b[self.lift_user])?;
        let i = g.matmul(e_i, b[self.lift_item])?;
        g.concat_rows(&[u, i])
    }

    /// Runs the blocks over the queries with the given memory; returns the
    /// pooled query `q_c` of shape `[1 x d_g]`.
    pub fn pool(&self, g: &mut Graph, b: &Bound, memory: Var, mut trace: Option<&mut Vec<Var>>) -> Result<Var> {
        let h = self.config.heads;
        let mut x = b[self.queries];
        for blk in &self.blocks {
            let n = g.rms_norm(x, b[blk.self_norm], NORM_EPS)?;
            let [wq, wk, wv, wo] = blk.self_attn.map(|p| b[p]);
            let q = g.matmul(n, wq)?;
            let k = g.matmul(n, wk)?;
            let v = g.matmul(n, wv)?;
            let a = multi_head_attention(g, q, k, v, h, false, trace.as_deref_mut())?;
            let a = g.matmul(a, wo)?;
            x = g.add(x, a)?;

            let n = g.rms_norm(x, b[blk.cross_norm], NORM_EPS)?;
            let [cq, ck, cv, co] = blk.cross_attn.map(|p| b[p]);
            let q = g.matmul(n, cq)?;
            let k = g.matmul(memory, ck)?;
            let v = g.matmul(memory, cv)?;
            let a = multi_head_attention(g, q, k, v, h, false, None)?;
            let a = g.matmul(a, co)?;
            x = g.add(x, a)?;

            let n = g.rms_norm(x, b[blk.ffn_norm], NORM_EPS)?;
            let up = g.matmul(n, b[blk.w_up])?;
            let act = g.silu(up)?;
            let down = g.matmul(act, b[blk.w_down])?;
            x = g.add(x, down)?;
        }
        let x = g.rms_norm(x, b[self.final_norm], NORM_EPS)?;
        g.mean_rows(x)
    }

    /// `q_c` for one (user, item) embedding pair.
    pub fn forward(&self, g: &mut Graph, b: &Bound, e_u: Var, e_i: Var) -> Result<Var> {
        let memory = self.memory(g, b, e_u, e_i)?;
        self.pool(g, b, memory, None)
    }

    /// `(reshape(q_c W_FC, [d_in, r]), W_proj)` with a row-major reshape.
    pub fn make_delta(&self, g: &mut Graph, b: &Bound, q_c: Var, head: &DeltaHead) -> Result<LowRank> {
        let fc = g.matmul(q_c, b[head.fc])?;
        let a = g.reshape(fc, &[head.d_in, self.config.rank])?;
        Ok(LowRank { a, b: b[head.proj] })
    }

    /// Deltas for every targeted weight of every language-model layer.
    pub fn generate(&self, g: &mut Graph, b: &Bound, e_u: Var, e_i: Var) -> Result<DeltaSet> {
        let q_c = self.forward(g, b, e_u, e_i)?;
        let mut set = DeltaSet::none();
        for (layer, kind, head) in &self.heads {
            let delta = self.make_delta(g, b, q_c, head)?;
            match layer {
                Some(l) => set.set(*l, *kind, delta),
                None => (0..self.lm_layers).for_each(|l| set.set(l, *kind, delta)),
            }
        }
        Ok(set)
    }

    /// Deltas for raw embedding rows, placed on the graph as constants.
    pub fn generate_for(&self, g: &mut Graph, b: &Bound, e_u: &[f64], e_i: &[f64]) -> Result<DeltaSet> {
        let d = self.config.d_c;
        if e_u.len() != d || e_i.len() != d {
            return Err(CoraError::config(format!(
                "embeddings of width {}/{} for a generator with d_c = {d}",
                e_u.len(),
                e_i.len()
            )));
        }
        let u = g.input(&[1, d], e_u.to_vec(), false)?;
        let i = g.input(&[1, d], e_i.to_vec(), false)?;
        self.generate(g, b, u, i)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.save(&dir.join("generator.ckpt"))?;
        let meta = GeneratorMeta {
            config: self.config.clone(),
            lm_layers: self.lm_layers,
        };
        std::fs::write(dir.join("generator.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, lm: &LmConfig) -> Result<Self> {
        let meta_path = dir.join("generator.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| CoraError::MissingArtifact {
            path: meta_path.clone(),
            msg: e.to_string(),
        })?;
        let meta: GeneratorMeta = serde_json::from_str(&text)?;
        if meta.lm_layers != lm.n_layers {
            return Err(CoraError::config(format!(
                "generator was built for {} LM layers, model has {}",
                meta.lm_layers, lm.n_layers
            )));
        }
        let mut gen = Self::new(meta.config, lm)?;
        gen.params.load_into(&dir.join("generator.ckpt"))?;
        Ok(gen)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorMeta {
    config: GeneratorConfig,
    lm_layers: usize,
}
