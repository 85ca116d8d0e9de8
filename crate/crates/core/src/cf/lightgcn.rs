use std::sync::Arc;

use crate::data::Interaction;
use crate::error::Result;
use crate::numerics::{Bound, Csr, Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// `D^-1/2 A D^-1/2` of the user-item bipartite graph; users occupy the first
/// `n_users` node ids, items the rest. Repeated edges count once.
pub fn normalized_adjacency(n_users: usize, n_items: usize, edges: &[(usize, usize)]) -> Csr {
    let n = n_users + n_items;
    let mut pairs: Vec<(usize, usize)> = edges.to_vec();
    pairs.sort_unstable();
    pairs.dedup();
    let mut degree = vec![0usize; n];
    for &(u, i) in &pairs {
        degree[u] += 1;
        degree[n_users + i] += 1;
    }
    let mut triplets = Vec::with_capacity(2 * pairs.len());
    for &(u, i) in &pairs {
        let j = n_users + i;
        let w = 1.0 / ((degree[u] * degree[j]) as f64).sqrt();
        triplets.push((u, j, w));
        triplets.push((j, u, w));
    }
    Csr::from_triplets(n, n, triplets)
}

/// Base embeddings propagated over the normalised interaction graph.
#[derive(Debug, Clone)]
pub struct LightGcnModel {
    pub params: ParamStore,
    users: ParamId,
    items: ParamId,
    adjacency: Arc<Csr>,
    layers: usize,
    n_users: usize,
}

impl LightGcnModel {
    /// Edges are the positive training interactions.
    pub fn new(
        n_users: usize,
        n_items: usize,
        dim: usize,
        layers: usize,
        train: &[Interaction],
        init_std: f64,
        rng: &mut Rng,
    ) -> Self {
        let edges: Vec<(usize, usize)> = train.iter().filter(|r| r.label == 1).map(|r| (r.user, r.item)).collect();
        let mut params = ParamStore::new();
        let users = params.add("users", Tensor::randn(&[n_users, dim], init_std, rng).with_grad());
        let items = params.add("items", Tensor::randn(&[n_items, dim], init_std, rng).with_grad());
        Self {
            params,
            users,
            items,
            adjacency: Arc::new(normalized_adjacency(n_users, n_items, &edges)),
            layers,
            n_users,
        }
    }

    pub fn adjacency(&self) -> &Csr {
        &self.adjacency
    }

    pub fn users(&self) -> ParamId {
        self.users
    }

    pub fn items(&self) -> ParamId {
        self.items
    }

    /// `mean_k A^k E` for `k = 0..=layers`, split back into users and items.
    pub fn encode(&self, g: &mut Graph, b: &Bound) -> Result<(Var, Var)> {
        let base = g.concat_rows(&[b[self.users], b[self.items]])?;
        let mut layer = base;
        let mut total = base;
        for _ in 0..self.layers {
            layer = g.spmm(&self.adjacency, layer)?;
            total = g.add(total, layer)?;
        }
        let mean = g.scale(total, 1.0 / (self.layers + 1) as f64)?;
        let n = g.shape(mean)[0];
        let users = g.slice_rows(mean, 0, self.n_users)?;
        let items = g.slice_rows(mean, self.n_users, n - self.n_users)?;
        Ok((users, items))
    }
}
