use crate::error::Result;
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Matrix factorisation: one free embedding row per user and per item.
#[derive(Debug, Clone)]
pub struct MfModel {
    pub params: ParamStore,
    users: ParamId,
    items: ParamId,
}

impl MfModel {
    pub fn new(n_users: usize, n_items: usize, dim: usize, init_std: f64, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        let users = params.add("users", Tensor::randn(&[n_users, dim], init_std, rng).with_grad());
        let items = params.add("items", Tensor::randn(&[n_items, dim], init_std, rng).with_grad());
        Self { params, users, items }
    }

    pub fn users(&self) -> ParamId {
        self.users
    }

    pub fn items(&self) -> ParamId {
        self.items
    }

    /// Full user and item matrices on the graph.
    pub fn encode(&self, _g: &mut Graph, b: &Bound) -> Result<(Var, Var)> {
        Ok((b[self.users], b[self.items]))
    }
}
