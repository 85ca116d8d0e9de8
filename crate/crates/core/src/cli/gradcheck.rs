use crate::error::Result;
use crate::generator::{Generator, GeneratorConfig};
use crate::lm::{LanguageModel, LmConfig};
use crate::numerics::{grad_check, Bound, GradCheckOptions, GradCheckReport, Rng, Tensor};

/// Tolerance on the largest relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Finite-difference check of BCE through the frozen language model, the
/// generated deltas and the generator, with respect to every generator
/// weight and both embeddings.
pub fn pipeline_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let lm_cfg = LmConfig {
        vocab_size: 12,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        max_len: 16,
    };
    let mut lm = LanguageModel::new(lm_cfg.clone(), seed)?;
    lm.freeze();
    let gen_cfg = GeneratorConfig {
        k: 2,
        n_blocks: 1,
        d_c: 4,
        heads: 2,
        rank: 2,
        targets: "qkvof".parse()?,
        seed,
        ..GeneratorConfig::default()
    };
    let gen = Generator::new(gen_cfg, &lm_cfg)?;
    let mut rng = Rng::derive(seed, 0x6C);
    let ids: Vec<usize> = (0..8).map(|_| rng.below(lm_cfg.vocab_size)).collect();
    let mut params = vec![Tensor::randn(&[1, 4], 1.0, &mut rng), Tensor::randn(&[1, 4], 1.0, &mut rng)];
    // perturb every weight so zero-initialised projections still carry gradient downstream
    for t in gen.params.tensors() {
        let noise = Tensor::randn(t.shape(), 0.2, &mut rng);
        params.push(t.add(&noise)?);
    }
    let label = f64::from(u8::from(rng.uniform() < 0.5));
    let lm_ref = &lm;
    grad_check(
        |g, v| {
            let lb = lm_ref.params.bind(g);
            let gb = Bound::from_vars(v[2..].to_vec());
            let deltas = gen.generate(g, &gb, v[0], v[1])?;
            let p = lm_ref.score_yes(g, &lb, &ids, &deltas)?;
            g.bce(p, &[label])
        },
        &mut params,
        &GradCheckOptions {
            seed,
            ..GradCheckOptions::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_gradients_match_finite_differences() {
        let r = pipeline_gradcheck(0).unwrap();
        assert!(r.checked > 1000);
        assert!(r.max_rel_err < GRADCHECK_TOLERANCE, "{r:?}");
    }
}
