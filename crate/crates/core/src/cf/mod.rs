//! Collaborative-filtering encoders (MF, LightGCN, SASRec) trained with BCE and
//! exported as frozen user/item embedding matrices.

mod lightgcn;
mod mf;
mod sasrec;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use lightgcn::{normalized_adjacency, LightGcnModel};
pub use mf::MfModel;
pub use sasrec::{SasBlock, SasRecModel};

use crate::data::{DatasetSplits, Interaction};
use crate::error::{CoraError, Result};
use crate::numerics::kernels::sigmoid;
use crate::numerics::{AdamConfig, AdamState, Bound, Graph, ParamStore, Rng, Tensor, Var};
use crate::train_eval::auc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfKind {
    Mf,
    LightGcn,
    SasRec,
}

impl FromStr for CfKind {
    type Err = CoraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf" => Ok(Self::Mf),
            "lightgcn" => Ok(Self::LightGcn),
            "sasrec" => Ok(Self::SasRec),
            other => Err(CoraError::config(format!("unknown CF model {other:?} (mf|lightgcn|sasrec)"))),
        }
    }
}

impl fmt::Display for CfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mf => "mf",
            Self::LightGcn => "lightgcn",
            Self::SasRec => "sasrec",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfConfig {
    pub kind: CfKind,
    pub dim: usize,
    pub gcn_layers: usize,
    pub sasrec_blocks: usize,
    pub sasrec_heads: usize,
    pub sasrec_max_len: usize,
    pub init_std: f64,
    /// Learning rates tried; the one with the best validation AUC is kept.
    pub lr_grid: Vec<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Sampled unobserved items per training record, labelled 0.
    pub neg_ratio: usize,
    pub seed: u64,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            kind: CfKind::Mf,
            dim: 256,
            gcn_layers: 2,
            sasrec_blocks: 1,
            sasrec_heads: 2,
            sasrec_max_len: 20,
            init_std: 0.02,
            lr_grid: vec![1e-1, 3e-2, 1e-2],
            weight_decay: 0.1,
            batch_size: 64,
            max_epochs: 200,
            patience: 20,
            neg_ratio: 1,
            seed: 0,
        }
    }
}

/// A CF model of any supported kind.
#[derive(Debug, Clone)]
pub enum CfModel {
    Mf(MfModel),
    LightGcn(LightGcnModel),
    SasRec {
        model: SasRecModel,
        /// Per user: (timestamp, item) of liked training records, oldest first.
        liked: Vec<Vec<(i64, usize)>>,
    },
}

fn liked_items(train: &[Interaction], n_users: usize) -> Vec<Vec<(i64, usize)>> {
    let mut liked = vec![Vec::new(); n_users];
    for r in train.iter().filter(|r| r.label == 1) {
        liked[r.user].push((r.timestamp, r.item));
    }
    for l in &mut liked {
        l.sort_unstable();
    }
    liked
}

impl CfModel {
    pub fn new(cfg: &CfConfig, n_users: usize, n_items: usize, train: &[Interaction], rng: &mut Rng) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(CoraError::config("CF embedding width must be positive"));
        }
        Ok(match cfg.kind {
            CfKind::Mf => Self::Mf(MfModel::new(n_users, n_items, cfg.dim, cfg.init_std, rng)),
            CfKind::LightGcn => Self::LightGcn(LightGcnModel::new(
                n_users,
                n_items,
                cfg.dim,
                cfg.gcn_layers,
                train,
                cfg.init_std,
                rng,
            )),
            CfKind::SasRec => {
                if cfg.dim % cfg.sasrec_heads.max(1) != 0 || cfg.sasrec_heads == 0 || cfg.sasrec_max_len == 0 {
                    return Err(CoraError::config("SASRec needs dim divisible by heads and a positive max length"));
                }
                Self::SasRec {
                    model: SasRecModel::new(
                        n_items,
                        cfg.dim,
                        cfg.sasrec_blocks,
                        cfg.sasrec_heads,
                        cfg.sasrec_max_len,
                        cfg.init_std,
                        rng,
                    ),
                    liked: liked_items(train, n_users),
                }
            }
        })
    }

    pub fn kind(&self) -> CfKind {
        match self {
            Self::Mf(_) => CfKind::Mf,
            Self::LightGcn(_) => CfKind::LightGcn,
            Self::SasRec { .. } => CfKind::SasRec,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Self::Mf(m) => &m.params,
            Self::LightGcn(m) => &m.params,
            Self::SasRec { model, .. } => &model.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::Mf(m) => &mut m.params,
            Self::LightGcn(m) => &mut m.params,
            Self::SasRec { model, .. } => &mut model.params,
        }
    }

    fn history_before(liked: &[Vec<(i64, usize)>], user: usize, before: Option<i64>) -> Vec<usize> {
        let Some(l) = liked.get(user) else { return Vec::new() };
        let end = before.map_or(l.len(), |t| l.partition_point(|&(ts, _)| ts < t));
        l[..end].iter().map(|&(_, i)| i).collect()
    }

    /// Pre-sigmoid scores `e_u . e_i`, shape `[n]`. A sequential model reads
    /// each user's liked items strictly before the record's timestamp.
    pub fn score_records(&self, g: &mut Graph, b: &Bound, records: &[Interaction]) -> Result<Var> {
        let users: Vec<usize> = records.iter().map(|r| r.user).collect();
        let items: Vec<usize> = records.iter().map(|r| r.item).collect();
        let (eu, ei) = match self {
            Self::Mf(m) => {
                let (u, i) = m.encode(g, b)?;
                (g.gather_rows(u, &users)?, g.gather_rows(i, &items)?)
            }
            Self::LightGcn(m) => {
                let (u, i) = m.encode(g, b)?;
                (g.gather_rows(u, &users)?, g.gather_rows(i, &items)?)
            }
            Self::SasRec { model, liked } => {
                let rows = records
                    .iter()
                    .map(|r| {
                        let h = Self::history_before(liked, r.user, Some(r.timestamp));
                        model.encode_user(g, b, &h)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (g.concat_rows(&rows)?, g.gather_rows(b[model.items()], &items)?)
            }
        };
        let prod = g.mul(eu, ei)?;
        g.sum_cols(prod)
    }

    /// Frozen embeddings for every user and item. Sequential users are encoded
    /// from all their liked training items.
    pub fn export(&self) -> Result<CfEmbeddings> {
        let mut g = Graph::new();
        let b = self.params().bind(&mut g);
        let (users, items) = match self {
            Self::Mf(m) => {
                let (u, i) = m.encode(&mut g, &b)?;
                (g.tensor(u), g.tensor(i))
            }
            Self::LightGcn(m) => {
                let (u, i) = m.encode(&mut g, &b)?;
                (g.tensor(u), g.tensor(i))
            }
            Self::SasRec { model, liked } => {
                let mut data = Vec::new();
                for u in 0..liked.len() {
                    let h = Self::history_before(liked, u, None);
                    let v = model.encode_user(&mut g, &b, &h)?;
                    data.extend_from_slice(g.value(v));
                }
                let dim = g.shape(b[model.items()])[1];
                (Tensor::new(&[liked.len(), dim], data)?, g.tensor(b[model.items()]))
            }
        };
        CfEmbeddings::new(users, items, self.kind())
    }
}

/// Frozen user and item embedding matrices of width `d_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CfEmbeddings {
    users: Tensor,
    items: Tensor,
    pub kind: CfKind,
    pub dataset_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfEmbeddingsMeta {
    pub d_c: usize,
    pub kind: CfKind,
    pub dataset_hash: String,
    pub n_users: usize,
    pub n_items: usize,
    pub checksum: String,
}

pub const EMB_CHECKPOINT: &str = "cf_emb.ckpt";
pub const EMB_SIDECAR: &str = "cf_emb.json";

impl CfEmbeddings {
    pub fn new(users: Tensor, items: Tensor, kind: CfKind) -> Result<Self> {
        if users.rank() != 2 || items.rank() != 2 || users.cols() != items.cols() {
            return Err(CoraError::dim(format!(
                "user {:?} and item {:?} embeddings disagree",
                users.shape(),
                items.shape()
            )));
        }
        let mut users = users;
        let mut items = items;
        users.requires_grad = false;
        items.requires_grad = false;
        Ok(Self {
            users,
            items,
            kind,
            dataset_hash: String::new(),
        })
    }

    pub fn d_c(&self) -> usize {
        self.users.cols()
    }

    pub fn n_users(&self) -> usize {
        self.users.rows()
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    pub fn users(&self) -> &Tensor {
        &self.users
    }

    pub fn items(&self) -> &Tensor {
        &self.items
    }

    /// `(e_u, e_i)` rows.
    pub fn pair(&self, user: usize, item: usize) -> Result<(&[f64], &[f64])> {
        if user >= self.n_users() {
            return Err(CoraError::Index(format!("user {user} of {}", self.n_users())));
        }
        if item >= self.n_items() {
            return Err(CoraError::Index(format!("item {item} of {}", self.n_items())));
        }
        Ok((self.users.row(user), self.items.row(item)))
    }

    /// `σ(e_u . e_i)`.
    pub fn score(&self, user: usize, item: usize) -> Result<f64> {
        let (u, i) = self.pair(user, item)?;
        Ok(sigmoid(u.iter().zip(i).map(|(a, b)| a * b).sum()))
    }

    fn store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("users", self.users.clone());
        s.add("items", self.items.clone());
        s
    }

    pub fn checksum(&self) -> String {
        self.store().checksum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let store = self.store();
        store.save(&dir.join(EMB_CHECKPOINT))?;
        let meta = CfEmbeddingsMeta {
            d_c: self.d_c(),
            kind: self.kind,
            dataset_hash: self.dataset_hash.clone(),
            n_users: self.n_users(),
            n_items: self.n_items(),
            checksum: store.checksum(),
        };
        std::fs::write(dir.join(EMB_SIDECAR), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(EMB_SIDECAR);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| CoraError::MissingArtifact {
            path: meta_path.clone(),
            msg: e.to_string(),
        })?;
        let meta: CfEmbeddingsMeta = serde_json::from_str(&text)?;
        let store = ParamStore::load(&dir.join(EMB_CHECKPOINT))?;
        let get = |name: &str| {
            store
                .id(name)
                .map(|id| store.get(id).clone())
                .ok_or_else(|| CoraError::Checkpoint(format!("embedding checkpoint lacks {name:?}")))
        };
        let mut emb = Self::new(get("users")?, get("items")?, meta.kind)?;
        if emb.d_c() != meta.d_c || emb.n_users() != meta.n_users || emb.n_items() != meta.n_items {
            return Err(CoraError::Checkpoint("embedding sidecar disagrees with checkpoint shapes".into()));
        }
        emb.dataset_hash = meta.dataset_hash;
        Ok(emb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrTrial {
    pub lr: f64,
    pub best_valid_auc: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfTrainReport {
    pub chosen_lr: f64,
    pub trials: Vec<LrTrial>,
    /// (epoch, mean train loss, validation AUC) for the chosen rate.
    pub curve: Vec<(usize, f64, f64)>,
}

fn with_step(step: usize, e: CoraError) -> CoraError {
    match e {
        CoraError::NonFinite(what) => CoraError::Training {
            step,
            msg: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

/// Trains one model per learning rate in the grid with BCE on `σ(e_u . e_i)`,
/// early stopping on validation AUC, and keeps the best.
pub fn pretrain_cf(
    cfg: &CfConfig,
    splits: &DatasetSplits,
    n_users: usize,
    n_items: usize,
) -> Result<(CfModel, CfEmbeddings, CfTrainReport)> {
    if splits.train.is_empty() {
        return Err(CoraError::config("training split is empty"));
    }
    if cfg.lr_grid.is_empty() || cfg.batch_size == 0 || cfg.patience == 0 {
        return Err(CoraError::config("CF training needs a non-empty lr grid, batch size and patience"));
    }
    let mut best: Option<(CfModel, LrTrial, Vec<(usize, f64, f64)>)> = None;
    let mut trials = Vec::new();
    for &lr in &cfg.lr_grid {
        let (model, trial, curve) = train_with_lr(cfg, splits, n_users, n_items, lr)?;
        log::info!("cf lr {lr}: best valid auc {:.4} at epoch {}", trial.best_valid_auc, trial.best_epoch);
        trials.push(trial.clone());
        if best.as_ref().is_none_or(|(_, t, _)| trial.best_valid_auc > t.best_valid_auc) {
            best = Some((model, trial, curve));
        }
    }
    let (model, trial, curve) = best.expect("grid is non-empty");
    let emb = model.export()?;
    Ok((
        model,
        emb,
        CfTrainReport {
            chosen_lr: trial.lr,
            trials,
            curve,
        },
    ))
}

fn valid_auc(model: &CfModel, valid: &[Interaction]) -> Result<f64> {
    let emb = model.export()?;
    let scores = valid
        .iter()
        .map(|r| emb.score(r.user, r.item))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = valid.iter().map(|r| r.label).collect();
    auc(&scores, &labels)
}

fn train_with_lr(
    cfg: &CfConfig,
    splits: &DatasetSplits,
    n_users: usize,
    n_items: usize,
    lr: f64,
) -> Result<(CfModel, LrTrial, Vec<(usize, f64, f64)>)> {
    let mut rng = Rng::derive(cfg.seed, 0xCF);
    let mut model = CfModel::new(cfg, n_users, n_items, &splits.train, &mut rng)?;
    let mut opt = AdamState::new(AdamConfig::adamw(lr, cfg.weight_decay), model.params());
    let mut observed = vec![Vec::new(); n_users];
    for r in &splits.train {
        observed[r.user].push(r.item);
    }
    for o in &mut observed {
        o.sort_unstable();
        o.dedup();
    }

    let mut best_params = model.params().clone();
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut curve = Vec::new();
    let mut step = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut samples = splits.train.clone();
        for r in &splits.train {
            for _ in 0..cfg.neg_ratio {
                if observed[r.user].len() >= n_items {
                    break;
                }
                let item = loop {
                    let c = rng.below(n_items);
                    if observed[r.user].binary_search(&c).is_err() {
                        break c;
                    }
                };
                samples.push(Interaction { item, label: 0, ..*r });
            }
        }
        rng.shuffle(&mut samples);
        let mut total = 0.0;
        for batch in samples.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let b = model.params().bind(&mut g);
            let logits = model.score_records(&mut g, &b, batch).map_err(|e| with_step(step, e))?;
            let p = g.sigmoid(logits).map_err(|e| with_step(step, e))?;
            let labels: Vec<f64> = batch.iter().map(|r| f64::from(r.label)).collect();
            let loss = g.bce(p, &labels).map_err(|e| with_step(step, e))?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(CoraError::Training {
                    step,
                    msg: format!("CF loss became {value}"),
                });
            }
            total += value * batch.len() as f64;
            let grads = g.backward(loss);
            let params = model.params_mut();
            params.zero_grad();
            params.collect_grads(&grads, &b);
            opt.step(params);
            step += 1;
        }
        epochs_run = epoch;
        let auc = valid_auc(&model, &splits.valid)?;
        curve.push((epoch, total / samples.len() as f64, auc));
        if auc > best_auc {
            best_auc = auc;
            best_epoch = epoch;
            best_params = model.params().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.params_mut().copy_values_from(&best_params)?;
    model.params_mut().zero_grad();
    Ok((
        model,
        LrTrial {
            lr,
            best_valid_auc: best_auc,
            best_epoch,
            epochs_run,
        },
        curve,
    ))
}
