use super::*;
use crate::numerics::GradCheckOptions;

fn small(vocab: usize) -> LmConfig {
    LmConfig {
        vocab_size: vocab,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        max_len: 12,
    }
}

fn random_ids(rng: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(vocab)).collect()
}

/// Random deltas for every (layer, kind), as graph constants.
fn random_deltas(g: &mut Graph, cfg: &LmConfig, r: usize, rng: &mut Rng, scale: f64) -> DeltaSet {
    let mut d = DeltaSet::none();
    for l in 0..cfg.n_layers {
        for k in TargetKind::ALL {
            let (d_in, d_out) = k.shape(cfg);
            let a = g.constant(&Tensor::randn(&[d_in, r], scale, rng));
            let b = g.constant(&Tensor::randn(&[r, d_out], scale, rng));
            d.set(l, k, LowRank { a, b });
        }
    }
    d
}

#[test]
fn zero_linears_leave_tied_embedding_projection() {
    let cfg = LmConfig {
        vocab_size: 3,
        d_model: 2,
        n_heads: 1,
        n_layers: 1,
        d_ff: 2,
        max_len: 2,
    };
    let mut lm = LanguageModel::new(cfg, 0).unwrap();
    for k in TargetKind::ALL {
        let id = lm.param_id(0, k);
        lm.params.get_mut(id).data_mut().fill(0.0);
    }
    let emb = [[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]];
    let pos = [[0.0, 0.0], [1.0, -1.0]];
    lm.params.get_mut(lm.tok_emb()).data_mut().copy_from_slice(&emb.concat());
    lm.params.get_mut(lm.pos_emb()).data_mut().copy_from_slice(&pos.concat());
    let logits = lm.plain_logits(&[1, 2]).unwrap();
    // position 0: x = (0,2), rms = sqrt(2) -> (0, sqrt 2)
    // position 1: x = (1,1) + (1,-1) = (2,0), rms = sqrt 2 -> (sqrt 2, 0)
    let s = 2f64.sqrt();
    let h = [[0.0, s], [s, 0.0]];
    for t in 0..2 {
        for v in 0..3 {
            let want = h[t][0] * emb[v][0] + h[t][1] * emb[v][1];
            assert!((logits.row(t)[v] - want).abs() < 1e-5, "t={t} v={v}");
        }
    }
}

#[test]
fn single_token_attention_is_the_value_path() {
    let cfg = small(6);
    let lm = LanguageModel::new(cfg.clone(), 1).unwrap();
    let mut g = Graph::new();
    let b = lm.params.bind(&mut g);
    let mut trace = AttentionTrace::new();
    let h = lm.hidden(&mut g, &b, &[4], &DeltaSet::none(), Some(&mut trace)).unwrap();
    for layer in &trace {
        for &p in layer {
            assert_eq!(g.value(p), &[1.0]);
        }
    }
    // rebuild the same computation with attention replaced by V
    let mut x = g.gather_rows(b[lm.tok_emb()], &[4]).unwrap();
    let p0 = g.gather_rows(b[lm.pos_emb()], &[0]).unwrap();
    x = g.add(x, p0).unwrap();
    for (l, block) in lm.layout.blocks.iter().enumerate() {
        let n = g.rms_norm(x, b[block.attn_norm], NORM_EPS).unwrap();
        let v = g.matmul(n, b[lm.param_id(l, TargetKind::V)]).unwrap();
        let o = g.matmul(v, b[lm.param_id(l, TargetKind::O)]).unwrap();
        x = g.add(x, o).unwrap();
        let n = g.rms_norm(x, b[block.ffn_norm], NORM_EPS).unwrap();
        let up = g.matmul(n, b[lm.param_id(l, TargetKind::Up)]).unwrap();
        let act = g.silu(up).unwrap();
        let down = g.matmul(act, b[lm.param_id(l, TargetKind::Down)]).unwrap();
        x = g.add(x, down).unwrap();
    }
    let want = g.rms_norm(x, b[lm.layout.final_norm], NORM_EPS).unwrap();
    assert_eq!(g.value(h), g.value(want));
}

#[test]
fn later_tokens_do_not_affect_earlier_positions() {
    let cfg = small(10);
    let lm = LanguageModel::new(cfg, 2).unwrap();
    let mut rng = Rng::new(7);
    let ids = random_ids(&mut rng, 8, 10);
    let base = lm.plain_logits(&ids).unwrap();
    for j in 0..7 {
        let mut altered = ids.clone();
        altered[j + 1] = (altered[j + 1] + 1) % 10;
        let other = lm.plain_logits(&altered).unwrap();
        for t in 0..=j {
            assert_eq!(base.row(t), other.row(t), "row {t} changed when token {} moved", j + 1);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = small(10);
    let lm = LanguageModel::new(cfg, 3).unwrap();
    let mut g = Graph::new();
    let b = lm.params.bind(&mut g);
    let mut trace = AttentionTrace::new();
    lm.hidden(&mut g, &b, &[1, 5, 7, 2, 9], &DeltaSet::none(), Some(&mut trace)).unwrap();
    assert_eq!(trace.len(), 2);
    for &p in trace.iter().flatten() {
        let v = g.value(p);
        for r in 0..5 {
            let row = &v[r * 5..(r + 1) * 5];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[r + 1..].iter().all(|&w| w == 0.0));
        }
    }
}

#[test]
fn zero_deltas_are_bit_identical_to_none() {
    let cfg = small(10);
    let lm = LanguageModel::new(cfg.clone(), 4).unwrap();
    let ids = [3, 1, 4, 1, 5, 9];
    let plain = lm.plain_logits(&ids).unwrap();
    let mut g = Graph::new();
    let b = lm.params.bind(&mut g);
    let mut rng = Rng::new(0);
    let mut deltas = DeltaSet::none();
    for l in 0..cfg.n_layers {
        for k in TargetKind::ALL {
            let (d_in, d_out) = k.shape(&cfg);
            let a = g.constant(&Tensor::randn(&[d_in, 3], 1.0, &mut rng));
            let z = g.constant(&Tensor::zeros(&[3, d_out]));
            deltas.set(l, k, LowRank { a, b: z });
        }
    }
    let with = lm.logits(&mut g, &b, &ids, &deltas).unwrap();
    assert_eq!(g.tensor(with), plain);
}

#[test]
fn doubling_deltas_changes_logits() {
    let cfg = small(10);
    let lm = LanguageModel::new(cfg.clone(), 5).unwrap();
    let ids = [3, 1, 4, 1, 5];
    let mut g = Graph::new();
    let b = lm.params.bind(&mut g);
    let mut rng = Rng::new(1);
    let deltas = random_deltas(&mut g, &cfg, 2, &mut rng, 0.3);
    let once = lm.logits(&mut g, &b, &ids, &deltas).unwrap();
    let mut doubled = DeltaSet::none();
    for (l, k, d) in deltas.entries() {
        let a = g.scale(d.a, 2.0).unwrap();
        doubled.set(l, k, LowRank { a, b: d.b });
    }
    let twice = lm.logits(&mut g, &b, &ids, &doubled).unwrap();
    assert!(g.tensor(once).max_abs_diff(&g.tensor(twice)) > 1e-6);
}

#[test]
fn overlong_and_unknown_sequences_are_rejected() {
    let lm = LanguageModel::new(small(10), 6).unwrap();
    assert!(matches!(lm.plain_logits(&[1; 13]), Err(CoraError::Length { len: 13, max: 12 })));
    assert!(matches!(lm.plain_logits(&[10]), Err(CoraError::Index(_))));
    let tiny = LanguageModel::new(LmConfig { vocab_size: 3, ..small(3) }, 0).unwrap();
    assert!(matches!(tiny.plain_score(&[0, 1]), Err(CoraError::Config(_))));
}

#[test]
fn yes_probability_cases() {
    assert_eq!(yes_probability(1.3, 1.3), 0.5);
    assert!((yes_probability(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
    for (a, b) in [(0.2, -1.0), (5.0, 2.0), (-3.0, 4.0)] {
        assert!((yes_probability(a, b) + yes_probability(b, a) - 1.0).abs() < 1e-15);
    }
    let mut prev = 0.0;
    for i in -50..50 {
        let p = yes_probability(i as f64 * 0.3, 0.0);
        assert!(p > prev);
        prev = p;
    }
}

#[test]
fn score_matches_full_logits() {
    let lm = LanguageModel::new(small(10), 8).unwrap();
    let ids = [5, 6, 7, 8];
    let logits = lm.plain_logits(&ids).unwrap();
    let last = logits.row(3);
    let want = yes_probability(last[YES_ID], last[NO_ID]);
    assert!((lm.plain_score(&ids).unwrap() - want).abs() < 1e-12);
}

#[test]
fn delta_gradients_pass_finite_differences() {
    let cfg = small(10);
    let lm = LanguageModel::new(cfg.clone(), 9).unwrap();
    let mut rng = Rng::new(10);
    let (d_in, d_out) = TargetKind::Up.shape(&cfg);
    let mut params = vec![
        Tensor::randn(&[d_in, 2], 0.5, &mut rng).with_grad(),
        Tensor::randn(&[2, d_out], 0.5, &mut rng).with_grad(),
    ];
    let ids = [4, 2, 7, 1];
    let report = crate::numerics::grad_check(
        |g, vars| {
            let b = lm.params.bind(g);
            let mut d = DeltaSet::none();
            d.set(1, TargetKind::Up, LowRank { a: vars[0], b: vars[1] });
            let p = lm.score_yes(g, &b, &ids, &d)?;
            g.bce(p, &[1.0])
        },
        &mut params,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn checkpoint_round_trip() {
    let lm = LanguageModel::new(small(10), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    lm.save(dir.path()).unwrap();
    let back = LanguageModel::load(dir.path()).unwrap();
    assert_eq!(back.params.checksum(), lm.params.checksum());
    assert_eq!(back.config(), lm.config());
    assert!(matches!(
        LanguageModel::load(&dir.path().join("missing")),
        Err(CoraError::MissingArtifact { .. })
    ));
}

#[test]
fn pretraining_lowers_loss_and_is_deterministic() {
    let corpus: Vec<Vec<usize>> = (0..12).map(|i| vec![4 + i % 3, 5, 6, 7, if i % 2 == 0 { 2 } else { 3 }]).collect();
    let cfg = LmTrainConfig {
        epochs: 15,
        batch_size: 4,
        lr: 1e-2,
        weight_decay: 0.0,
        seed: 1,
    };
    let mut a = LanguageModel::new(small(10), 12).unwrap();
    let report = pretrain_lm(&mut a, &corpus, &cfg).unwrap();
    assert!(report.epoch_loss.last().unwrap() < &(report.epoch_loss[0] * 0.7), "{report:?}");
    let mut b = LanguageModel::new(small(10), 12).unwrap();
    let again = pretrain_lm(&mut b, &corpus, &cfg).unwrap();
    assert_eq!(report, again);
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    assert!(a.params.tensors().iter().all(|t| !t.requires_grad));
}
