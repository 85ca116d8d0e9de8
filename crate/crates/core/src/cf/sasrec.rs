use crate::error::Result;
use crate::numerics::{multi_head_attention, Bound, Graph, ParamId, ParamStore, Rng, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

/// Self-attentive sequential encoder: a user is the last hidden state of a
/// causal transformer over their liked items.
#[derive(Debug, Clone)]
pub struct SasRecModel {
    pub params: ParamStore,
    items: ParamId,
    positions: ParamId,
    blocks: Vec<SasBlock>,
    final_norm: ParamId,
    heads: usize,
    max_len: usize,
    dim: usize,
}

#[derive(Debug, Clone)]
pub struct SasBlock {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

impl SasRecModel {
    pub fn new(n_items: usize, dim: usize, blocks: usize, heads: usize, max_len: usize, init_std: f64, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        let mut add = |p: &mut ParamStore, name: String, shape: &[usize], std: f64| {
            p.add(name, Tensor::randn(shape, std, rng).with_grad())
        };
        let items = add(&mut params, "items".into(), &[n_items, dim], init_std);
        let positions = add(&mut params, "positions".into(), &[max_len, dim], init_std);
        let lin_std = 1.0 / (dim as f64).sqrt();
        let blocks = (0..blocks)
            .map(|l| {
                let attn_norm = params.add(format!("block{l}.attn_norm"), Tensor::ones(&[dim]).with_grad());
                let wq = add(&mut params, format!("block{l}.wq"), &[dim, dim], lin_std);
                let wk = add(&mut params, format!("block{l}.wk"), &[dim, dim], lin_std);
                let wv = add(&mut params, format!("block{l}.wv"), &[dim, dim], lin_std);
                let wo = add(&mut params, format!("block{l}.wo"), &[dim, dim], lin_std);
                let ffn_norm = params.add(format!("block{l}.ffn_norm"), Tensor::ones(&[dim]).with_grad());
                let w_up = add(&mut params, format!("block{l}.w_up"), &[dim, dim], lin_std);
                let w_down = add(&mut params, format!("block{l}.w_down"), &[dim, dim], lin_std);
                SasBlock {
                    attn_norm,
                    wq,
                    wk,
                    wv,
                    wo,
                    ffn_norm,
                    w_up,
                    w_down,
                }
            })
            .collect();
        let final_norm = params.add("final_norm", Tensor::ones(&[dim]).with_grad());
        Self {
            params,
            items,
            positions,
            blocks,
            final_norm,
            heads,
            max_len,
            dim,
        }
    }

    pub fn items(&self) -> ParamId {
        self.items
    }

    pub fn positions(&self) -> ParamId {
        self.positions
    }

    pub fn blocks(&self) -> &[SasBlock] {
        &self.blocks
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Hidden states `[L x dim]` over the last `max_len` history items;
    /// `None` for an empty history.
    pub fn hidden(&self, g: &mut Graph, b: &Bound, history: &[usize], mut trace: Option<&mut Vec<Var>>) -> Result<Option<Var>> {
        let seq = &history[history.len().saturating_sub(self.max_len)..];
        if seq.is_empty() {
            return Ok(None);
        }
        let positions: Vec<usize> = (0..seq.len()).collect();
        let e = g.gather_rows(b[self.items], seq)?;
        let p = g.gather_rows(b[self.positions], &positions)?;
        let mut x = g.add(e, p)?;
        for blk in &self.blocks {
            let h = g.rms_norm(x, b[blk.attn_norm], NORM_EPS)?;
            let q = g.matmul(h, b[blk.wq])?;
            let k = g.matmul(h, b[blk.wk])?;
            let v = g.matmul(h, b[blk.wv])?;
            let attn = multi_head_attention(g, q, k, v, self.heads, true, trace.as_deref_mut())?;
            let o = g.matmul(attn, b[blk.wo])?;
            x = g.add(x, o)?;
            let h = g.rms_norm(x, b[blk.ffn_norm], NORM_EPS)?;
            let up = g.matmul(h, b[blk.w_up])?;
            let act = g.silu(up)?;
            let down = g.matmul(act, b[blk.w_down])?;
            x = g.add(x, down)?;
        }
        Ok(Some(g.rms_norm(x, b[self.final_norm], NORM_EPS)?))
    }

    /// Final-position state `[1 x dim]`, or zeros for an empty history.
    pub fn encode_user(&self, g: &mut Graph, b: &Bound, history: &[usize]) -> Result<Var> {
        match self.hidden(g, b, history, None)? {
            Some(h) => {
                let last = g.shape(h)[0] - 1;
                g.slice_rows(h, last, 1)
            }
            None => Ok(g.constant(&Tensor::zeros(&[1, self.dim]))),
        }
    }
}
