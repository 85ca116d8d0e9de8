use crate::error::{CoraError, Result};
use crate::numerics::{Graph, Var};

/// Scaled dot-product attention split over `heads` column groups.
///
/// `q` is `[n_q x d]`, `k` and `v` are `[n_kv x d]`. With `causal`, query row
/// `r` only sees key rows `<= r + n_kv - n_q`. When `probs` is given, each
/// head's attention matrix is pushed onto it.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
    mut probs: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d = g.shape(q)[1];
    if heads == 0 || d % heads != 0 {
        return Err(CoraError::config(format!("width {d} is not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let p = if causal { g.causal_softmax(scores)? } else { g.softmax(scores, 1)? };
        if let Some(list) = probs.as_deref_mut() {
            list.push(p);
        }
        outs.push(g.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Rng, Tensor};

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = Rng::new(4);
        let mut g = Graph::new();
        let q = g.constant(&Tensor::randn(&[3, 4], 1.0, &mut rng));
        let k = g.constant(&Tensor::randn(&[1, 4], 1.0, &mut rng));
        let vt = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let v = g.constant(&vt);
        let out = multi_head_attention(&mut g, q, k, v, 2, false, None).unwrap();
        for r in 0..3 {
            assert_eq!(&g.value(out)[r * 4..(r + 1) * 4], vt.data());
        }
    }

    #[test]
    fn causal_weights_are_lower_triangular_and_normalised() {
        let mut rng = Rng::new(5);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::randn(&[5, 4], 1.0, &mut rng));
        let mut probs = Vec::new();
        multi_head_attention(&mut g, x, x, x, 2, true, Some(&mut probs)).unwrap();
        assert_eq!(probs.len(), 2);
        for p in probs {
            let p = g.value(p);
            for r in 0..5 {
                let row = &p[r * 5..(r + 1) * 5];
                assert!(row[r + 1..].iter().all(|&w| w == 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
