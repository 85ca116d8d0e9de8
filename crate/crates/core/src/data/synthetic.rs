use serde::{Deserialize, Serialize};

use crate::data::{Catalog, Interaction};
use crate::numerics::Rng;

const CLUSTER_WORDS: [&str; 16] = [
    "Amber", "Birch", "Cobalt", "Dune", "Ember", "Fjord", "Granite", "Harbor", "Indigo", "Juniper", "Kestrel",
    "Lagoon", "Meadow", "Nimbus", "Onyx", "Prairie",
];

/// Knobs for [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    /// Probability that any given user-item pair is observed.
    pub density: f64,
    /// Standard deviation of the Gaussian jitter around each cluster center.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 64,
            n_items: 64,
            latent_dim: 2,
            density: 0.1,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// A generated dataset together with the latent factors that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub interactions: Vec<Interaction>,
    pub catalog: Catalog,
    pub user_latents: Vec<Vec<f64>>,
    pub item_latents: Vec<Vec<f64>>,
    pub item_clusters: Vec<usize>,
    /// Labels are `dot > threshold`; the threshold is the median over all pairs.
    pub threshold: f64,
}

impl SyntheticData {
    pub fn true_score(&self, user: usize, item: usize) -> f64 {
        dot(&self.user_latents[user], &self.item_latents[item])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cluster_word(cluster: usize) -> String {
    let n = CLUSTER_WORDS.len();
    if cluster < n {
        CLUSTER_WORDS[cluster].to_string()
    } else {
        format!("{}{}", CLUSTER_WORDS[cluster % n], cluster / n)
    }
}

/// Draws a dataset whose labels follow latent user/item affinity.
///
/// Users sit near one of the signed axes `±e_d`; items sit near one of the sign
/// vectors `{±1}^D / sqrt(D)`. Every user/item cluster pair therefore has a
/// nonzero affinity, and a label is 1 iff the noisy dot product exceeds the
/// median over all pairs. Titles name the item's cluster, so text carries part
/// of the signal, followed by the item id so titles stay unique.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> SyntheticData {
    let d = cfg.latent_dim.max(1);
    let mut rng = Rng::derive(cfg.seed, 0x5D47);
    let scale = 1.0 / (d as f64).sqrt();

    let user_latents: Vec<Vec<f64>> = (0..cfg.n_users)
        .map(|_| {
            let c = rng.below(2 * d);
            (0..d)
                .map(|j| {
                    let center = if j == c / 2 { if c % 2 == 0 { 1.0 } else { -1.0 } } else { 0.0 };
                    center + cfg.noise * rng.normal()
                })
                .collect()
        })
        .collect();

    let n_item_clusters = 1usize.checked_shl(d as u32).unwrap_or(usize::MAX);
    let mut item_clusters = Vec::with_capacity(cfg.n_items);
    let item_latents: Vec<Vec<f64>> = (0..cfg.n_items)
        .map(|_| {
            let c = rng.below(n_item_clusters);
            item_clusters.push(c);
            (0..d)
                .map(|j| {
                    let sign = if (c >> j) & 1 == 1 { -1.0 } else { 1.0 };
                    sign * scale + cfg.noise * rng.normal()
                })
                .collect()
        })
        .collect();

    let mut all: Vec<f64> = user_latents
        .iter()
        .flat_map(|u| item_latents.iter().map(move |i| dot(u, i)))
        .collect();
    let threshold = median(&mut all);

    let mut interactions = Vec::new();
    for (user, u) in user_latents.iter().enumerate() {
        for (item, i) in item_latents.iter().enumerate() {
            if rng.uniform() < cfg.density {
                let label = u8::from(dot(u, i) > threshold);
                interactions.push(Interaction { user, item, label, timestamp: 0 });
            }
        }
    }
    let mut stamps: Vec<i64> = (0..interactions.len() as i64).collect();
    rng.shuffle(&mut stamps);
    for (r, t) in interactions.iter_mut().zip(stamps) {
        r.timestamp = t;
    }

    let titles = item_clusters
        .iter()
        .enumerate()
        .map(|(item, &c)| Some(format!("{} {item}", cluster_word(c))))
        .collect();
    let catalog = Catalog::new(titles, &interactions).expect("every item has a title");
    SyntheticData {
        interactions,
        catalog,
        user_latents,
        item_latents,
        item_clusters,
        threshold,
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
