use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoraError, Result};
use crate::lm::LmConfig;
use crate::numerics::{Graph, Var};

/// One of the six linear weights of a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl TargetKind {
    pub const ALL: [TargetKind; 6] = [Self::Q, Self::K, Self::V, Self::O, Self::Up, Self::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    /// `(d_in, d_out)` of this weight in a model with the given config.
    pub fn shape(self, cfg: &LmConfig) -> (usize, usize) {
        match self {
            Self::Q | Self::K | Self::V | Self::O => (cfg.d_model, cfg.d_model),
            Self::Up => (cfg.d_model, cfg.d_ff),
            Self::Down => (cfg.d_ff, cfg.d_model),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::O => "o",
            Self::Up => "up",
            Self::Down => "down",
        }
    }
}

/// Set of targeted weights written as letters, e.g. `qkvo`; `f` stands for
/// both feed-forward weights.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetSet(Vec<TargetKind>);

impl TargetSet {
    pub fn kinds(&self) -> &[TargetKind] {
        &self.0
    }

    pub fn contains(&self, kind: TargetKind) -> bool {
        self.0.contains(&kind)
    }
}

impl FromStr for TargetSet {
    type Err = CoraError;

    fn from_str(s: &str) -> Result<Self> {
        let mut kinds = Vec::new();
        for c in s.chars() {
            let add: &[TargetKind] = match c {
                'q' => &[TargetKind::Q],
                'k' => &[TargetKind::K],
                'v' => &[TargetKind::V],
                'o' => &[TargetKind::O],
                'f' => &[TargetKind::Up, TargetKind::Down],
                other => {
                    return Err(CoraError::config(format!(
                        "invalid target letter {other:?} in {s:?} (expected letters from qkvof)"
                    )))
                }
            };
            for k in add {
                if kinds.contains(k) {
                    return Err(CoraError::config(format!("target {c:?} repeated in {s:?}")));
                }
                kinds.push(*k);
            }
        }
        if kinds.is_empty() {
            return Err(CoraError::config("empty target set"));
        }
        kinds.sort();
        Ok(Self(kinds))
    }
}

impl fmt::Display for TargetSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in &self.0 {
            match k {
                TargetKind::Up => f.write_str("f")?,
                TargetKind::Down if self.contains(TargetKind::Up) => {}
                TargetKind::Down => f.write_str("f")?,
                other => f.write_str(other.name())?,
            }
        }
        Ok(())
    }
}

impl Serialize for TargetSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TargetSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A low-rank pair `(A [d_in x r], B [r x d_out])` living on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LowRank {
    pub a: Var,
    pub b: Var,
}

/// Per-sample deltas indexed by (layer, weight kind). Missing entries mean
/// the base weight is used unchanged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeltaSet {
    layers: Vec<[Option<LowRank>; 6]>,
}

impl DeltaSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn set(&mut self, layer: usize, kind: TargetKind, delta: LowRank) {
        if self.layers.len() <= layer {
            self.layers.resize(layer + 1, [None; 6]);
        }
        self.layers[layer][kind.index()] = Some(delta);
    }

    pub fn get(&self, layer: usize, kind: TargetKind) -> Option<LowRank> {
        self.layers.get(layer).and_then(|l| l[kind.index()])
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(Option::is_none))
    }

    /// Every (layer, kind, delta) entry.
    pub fn entries(&self) -> impl Iterator<Item = (usize, TargetKind, LowRank)> + '_ {
        self.layers.iter().enumerate().flat_map(|(l, row)| {
            TargetKind::ALL
                .iter()
                .filter_map(move |&k| row[k.index()].map(|d| (l, k, d)))
        })
    }
}

/// `xW + (xA)B`, or exactly `xW` without a delta.
pub fn injectable_forward(g: &mut Graph, x: Var, w: Var, delta: Option<LowRank>) -> Result<Var> {
    let base = g.matmul(x, w)?;
    let Some(LowRank { a, b }) = delta else {
        return Ok(base);
    };
    let (ws, as_, bs) = (g.shape(w).to_vec(), g.shape(a).to_vec(), g.shape(b).to_vec());
    if as_.len() != 2 || bs.len() != 2 || as_[0] != ws[0] || bs[1] != ws[1] || as_[1] != bs[0] {
        return Err(CoraError::Injection(format!(
            "delta {as_:?} x {bs:?} cannot attach to a {ws:?} weight"
        )));
    }
    let xa = g.matmul(x, a)?;
    let low = g.matmul(xa, b)?;
    g.add(base, low)
}

/// Row `i` of `x` uses `deltas[i]`.
pub fn injectable_forward_rows(g: &mut Graph, x: Var, w: Var, deltas: &[Option<LowRank>]) -> Result<Var> {
    let rows = g.shape(x)[0];
    if deltas.len() != rows {
        return Err(CoraError::Injection(format!("{} deltas for {rows} rows", deltas.len())));
    }
    let mut outs = Vec::with_capacity(rows);
    for (i, &d) in deltas.iter().enumerate() {
        let xi = g.slice_rows(x, i, 1)?;
        outs.push(injectable_forward(g, xi, w, d)?);
    }
    g.concat_rows(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Rng, Tensor};

    #[test]
    fn parses_target_letters() {
        let t: TargetSet = "qkvof".parse().unwrap();
        assert_eq!(t.kinds(), &TargetKind::ALL);
        assert_eq!(t.to_string(), "qkvof");
        let t: TargetSet = "oq".parse().unwrap();
        assert_eq!(t.kinds(), &[TargetKind::Q, TargetKind::O]);
        assert_eq!(t.to_string(), "qo");
        assert!(matches!("qz".parse::<TargetSet>(), Err(CoraError::Config(_))));
        assert!("".parse::<TargetSet>().is_err());
        assert!("qq".parse::<TargetSet>().is_err());
        let json = serde_json::to_string(&"qk".parse::<TargetSet>().unwrap()).unwrap();
        assert_eq!(json, "\"qk\"");
    }

    #[test]
    fn absent_delta_is_plain_product() {
        let mut rng = Rng::new(1);
        let xt = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let wt = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let (x, w) = (g.constant(&xt), g.constant(&wt));
        let y = injectable_forward(&mut g, x, w, None).unwrap();
        assert_eq!(g.tensor(y), xt.matmul(&wt).unwrap());
    }

    #[test]
    fn bypass_matches_merged_weight() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let dims: Vec<usize> = (0..4).map(|_| 1 + rng.below(6)).collect();
            let (n, d_in, d_out, r) = (dims[0], dims[1], dims[2], dims[3]);
            let xt = Tensor::randn(&[n, d_in], 1.0, &mut rng);
            let wt = Tensor::randn(&[d_in, d_out], 1.0, &mut rng);
            let at = Tensor::randn(&[d_in, r], 1.0, &mut rng);
            let bt = Tensor::randn(&[r, d_out], 1.0, &mut rng);
            let merged = xt.matmul(&wt.add(&at.matmul(&bt).unwrap()).unwrap()).unwrap();
            let mut g = Graph::new();
            let (x, w, a, b) = (g.constant(&xt), g.constant(&wt), g.constant(&at), g.constant(&bt));
            let y = injectable_forward(&mut g, x, w, Some(LowRank { a, b })).unwrap();
            assert!(g.tensor(y).max_abs_diff(&merged) < 1e-10);
        }
    }

    #[test]
    fn mismatched_delta_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[1, 3]));
        let w = g.constant(&Tensor::zeros(&[3, 2]));
        let a = g.constant(&Tensor::zeros(&[2, 1]));
        let b = g.constant(&Tensor::zeros(&[1, 2]));
        let err = injectable_forward(&mut g, x, w, Some(LowRank { a, b })).unwrap_err();
        assert!(matches!(err, CoraError::Injection(_)));
    }

    #[test]
    fn per_row_deltas_match_single_runs() {
        let mut rng = Rng::new(3);
        let xt = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let wt = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let pairs: Vec<(Tensor, Tensor)> = (0..2)
            .map(|_| (Tensor::randn(&[4, 2], 1.0, &mut rng), Tensor::randn(&[2, 3], 1.0, &mut rng)))
            .collect();
        let mut g = Graph::new();
        let (x, w) = (g.constant(&xt), g.constant(&wt));
        let deltas: Vec<_> = pairs
            .iter()
            .map(|(a, b)| Some(LowRank { a: g.constant(a), b: g.constant(b) }))
            .collect();
        let y = injectable_forward_rows(&mut g, x, w, &deltas).unwrap();
        let batched = g.tensor(y);
        for (i, d) in deltas.iter().enumerate() {
            let xi = g.constant(&Tensor::new(&[1, 4], xt.row(i).to_vec()).unwrap());
            let yi = injectable_forward(&mut g, xi, w, *d).unwrap();
            assert_eq!(batched.row(i), g.value(yi));
        }
    }

    #[test]
    fn delta_set_lookup() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[1, 1]));
        let mut d = DeltaSet::none();
        assert!(d.is_empty());
        assert_eq!(d.get(3, TargetKind::Q), None);
        d.set(1, TargetKind::Up, LowRank { a, b: a });
        assert_eq!(d.get(1, TargetKind::Up), Some(LowRank { a, b: a }));
        assert_eq!(d.get(0, TargetKind::Up), None);
        assert_eq!(d.entries().count(), 1);
    }
}
