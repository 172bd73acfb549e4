use super::*;
use crate::rng;

fn tiny(dim: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        dim,
        layers: 1,
        heads,
        max_items: 6,
        max_attributes: 6,
        dropout: 0.0,
    }
}

fn model(seed: u64) -> DualEncoder {
    let mut r = rng::seeded(seed);
    let mut m = DualEncoder::with_vocab(tiny(8, 2), 12, 7, &mut r).unwrap();
    // Larger weights than the default init so perturbations are visible.
    for v in m.store.values_mut() {
        v.scale_in_place(25.0);
    }
    m
}

fn item_states(m: &DualEncoder, seqs: &[Vec<u32>], causal: bool) -> Tensor {
    let mut g = Graph::new();
    let bound = m.store.bind(&mut g, false);
    let batch = SeqBatch::new(seqs, 6).unwrap();
    let h = m
        .items
        .forward(&mut g, &bound, &m.config, &batch, causal, None)
        .unwrap();
    g.value(h).clone()
}

fn attr_last(m: &DualEncoder, seq: &[u32]) -> Vec<f32> {
    let mut g = Graph::new();
    let bound = m.store.bind(&mut g, false);
    let batch = SeqBatch::new(&[seq], 6).unwrap();
    let h = m.encode_attributes(&mut g, &bound, &batch, None).unwrap();
    g.value(h).row(batch.last_rows()[0]).to_vec()
}

#[test]
fn config_rejects_indivisible_heads() {
    assert!(ModelConfig {
        dim: 10,
        heads: 3,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn seq_batch_pads_and_rejects() {
    let b = SeqBatch::new(&[vec![3, 4, 5], vec![6]], 6).unwrap();
    assert_eq!(b.ids, vec![3, 4, 5, 6, 0, 0]);
    assert_eq!(b.last_rows(), vec![2, 3]);
    assert!(matches!(
        SeqBatch::new(&[vec![2; 7]], 6),
        Err(Error::SequenceTooLong { .. })
    ));
    assert_eq!(truncate_recent(&[1, 2, 3, 4], 2), &[3, 4]);
}

#[test]
fn hand_set_preference_score() {
    let mut r = rng::seeded(0);
    let mut m = DualEncoder::with_vocab(tiny(2, 1), 4, 2, &mut r).unwrap();
    *m.store.get_mut(m.w_m) =
        Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    m.store
        .get_mut(m.items.embedding)
        .row_mut(3)
        .copy_from_slice(&[2.0, 3.0]);
    let mut g = Graph::new();
    let bound = m.store.bind(&mut g, false);
    let si = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let sa = g.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
    let u = m.fuse(&mut g, &bound, si, sa).unwrap();
    let s = m.item_logits(&mut g, &bound, u, &[3]).unwrap();
    assert_eq!(g.value(s).data(), &[5.0]);
}

#[test]
fn zero_fusion_gives_zero_scores() {
    let mut m = model(1);
    *m.store.get_mut(m.w_m) = Tensor::zeros(&[16, 8]);
    let u = m.user_vectors(&[vec![2, 3]], &[vec![1]]).unwrap();
    assert!(m
        .scores_for(u.row(0), &[2, 5, 11])
        .unwrap()
        .iter()
        .all(|&s| s == 0.0));
}

#[test]
fn batched_scores_match_single() {
    let m = model(2);
    let hist = vec![vec![2, 3, 4], vec![5], vec![]];
    let attrs = vec![vec![1, 2], vec![3], vec![6, 5, 4]];
    let cands = [2, 7, 9, 11];
    let all = m.user_vectors(&hist, &attrs).unwrap();
    for b in 0..3 {
        let one = m.user_vectors(&hist[b..=b], &attrs[b..=b]).unwrap();
        let s_all = m.scores_for(all.row(b), &cands).unwrap();
        let s_one = m.scores_for(one.row(0), &cands).unwrap();
        for (x, y) in s_all.iter().zip(&s_one) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }
}

#[test]
fn invalid_candidates_rejected() {
    let m = model(3);
    let u = vec![0.0; 8];
    assert!(m.scores_for(&u, &[0]).is_err());
    assert!(m.scores_for(&u, &[1]).is_err());
    assert!(m.scores_for(&u, &[12]).is_err());
}

/// Straight-line `concat(f, s)ᵀ · W_M · e`.
fn bilinear(f: &[f32], s: &[f32], w: &Tensor, e: &[f32]) -> f32 {
    let x: Vec<f32> = f.iter().chain(s).copied().collect();
    let d = e.len();
    (0..d)
        .map(|j| {
            (0..x.len())
                .map(|i| x[i] * w.data()[i * d + j])
                .sum::<f32>()
                * e[j]
        })
        .sum()
}

#[test]
fn masked_item_logit_matches_straight_line() {
    let m = model(4);
    let mut g = Graph::new();
    let bound = m.store.bind(&mut g, false);
    let ib = SeqBatch::new(&[vec![2, 1, 4]], 6).unwrap();
    let fi = m.encode_items(&mut g, &bound, &ib, None).unwrap();
    let ab = SeqBatch::new(&[vec![2, 5]], 6).unwrap();
    let fa = m.encode_attributes(&mut g, &bound, &ab, None).unwrap();
    let fk = g.gather_rows(fi, &[1]).unwrap();
    let sa = g.gather_rows(fa, &ab.last_rows()).unwrap();
    let u = m.fuse(&mut g, &bound, fk, sa).unwrap();
    let z = m.item_logits(&mut g, &bound, u, &[7]).unwrap();
    let expect = bilinear(
        g.value(fk).data(),
        g.value(sa).data(),
        m.store.get(m.w_m),
        m.store.get(m.items.embedding).row(7),
    );
    assert!((g.value(z).data()[0] - expect).abs() < 1e-5);
}

#[test]
fn masked_item_logit_is_linear_in_candidate_embedding() {
    let mut m = model(5);
    let logit = |m: &DualEncoder| {
        let u = m.user_vectors(&[vec![2, 3]], &[vec![1, 2]]).unwrap();
        m.scores_for(u.row(0), &[6]).unwrap()[0]
    };
    let base = logit(&m);
    m.store
        .get_mut(m.items.embedding)
        .row_mut(6)
        .iter_mut()
        .for_each(|v| *v *= 2.0);
    assert!((logit(&m) - 2.0 * base).abs() < 1e-4 * base.abs().max(1.0));
    m.store.get_mut(m.items.embedding).row_mut(6).fill(0.0);
    assert_eq!(logit(&m), 0.0);
}

#[test]
fn sad_logit_identity_and_zero() {
    let mut m = model(6);
    let d = 8;
    let mut eye = Tensor::zeros(&[d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    *m.store.get_mut(m.w_p) = eye;
    let mut unit = vec![0.0; d];
    unit[3] = 1.0;
    let mut g = Graph::new();
    let bound = m.store.bind(&mut g, false);
    let f = g.constant(Tensor::matrix(1, d, unit.clone()).unwrap());
    let z = m.sad_logits(&mut g, &bound, f, f).unwrap();
    assert_eq!(g.value(z).data(), &[1.0]);
    let p = g.sigmoid(z);
    assert!((g.value(p).data()[0] - 0.731_058_6).abs() < 1e-6);

    *m.store.get_mut(m.w_p) = Tensor::zeros(&[d, d]);
    let mut g = Graph::new();
    let bound = m.store.bind(&mut g, false);
    let f = g.constant(Tensor::matrix(1, d, unit).unwrap());
    let z = m.sad_logits(&mut g, &bound, f, f).unwrap();
    let p = g.sigmoid(z);
    assert_eq!(g.value(p).data(), &[0.5]);
}

#[test]
fn sad_logit_matches_straight_line() {
    let m = model(7);
    let mut r = rng::seeded(70);
    let a = crate::params::truncated_normal(&mut r, &[2, 8], 1.0);
    let b = crate::params::truncated_normal(&mut r, &[2, 8], 1.0);
    let mut g = Graph::new();
    let bound = m.store.bind(&mut g, false);
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let z = m.sad_logits(&mut g, &bound, av, bv).unwrap();
    let w = m.store.get(m.w_p);
    for row in 0..2 {
        let mut expect = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                expect += a.row(row)[i] * w.data()[i * 8 + j] * b.row(row)[j];
            }
        }
        assert!((g.value(z).data()[row] - expect).abs() < 1e-5);
    }
}

#[test]
fn causal_encoder_ignores_future_positions() {
    let m = model(8);
    let a = item_states(&m, &[vec![2, 3, 4, 5]], true);
    let b = item_states(&m, &[vec![2, 3, 9, 5]], true);
    assert_eq!(&a.data()[..16], &b.data()[..16]);
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn bidirectional_encoder_sees_future_positions() {
    let m = model(9);
    let a = item_states(&m, &[vec![2, 3, 4, 5]], false);
    let b = item_states(&m, &[vec![2, 3, 9, 5]], false);
    assert!((0..2).any(|t| a.row(t) != b.row(t)));
}

#[test]
fn padding_never_reaches_real_positions() {
    let mut m = model(10);
    let seqs = vec![vec![2, 3, 4, 5, 6], vec![7, 8]];
    let before = item_states(&m, &seqs, false);
    m.store
        .get_mut(m.items.embedding)
        .row_mut(0)
        .iter_mut()
        .for_each(|v| *v += 3.0);
    let after = item_states(&m, &seqs, false);
    for t in 0..2 {
        assert_eq!(before.row(5 + t), after.row(5 + t));
    }
    // a padded sequence encodes like the unpadded one
    let alone = item_states(&m, &[vec![7, 8]], false);
    assert_eq!(alone.row(1), after.row(6));
}

#[test]
fn all_padding_sequence_is_finite() {
    let m = model(11);
    let h = item_states(&m, &[Vec::<u32>::new()], false);
    assert!(h.data().iter().all(|v| v.is_finite()));
}

#[test]
fn attribute_encoder_order_sensitive_and_deterministic() {
    let m = model(12);
    assert_eq!(attr_last(&m, &[3]), attr_last(&m, &[3]));
    assert_ne!(attr_last(&m, &[2, 5]), attr_last(&m, &[5, 2]));
}

#[test]
fn encoders_share_no_parameters() {
    let mut m = model(13);
    let before = item_states(&m, &[vec![2, 3, 4]], false);
    let attr_before = attr_last(&m, &[1, 2]);
    for (k, (name, _)) in m.store.clone().iter().enumerate() {
        if name.starts_with("attr.") {
            m.store.values_mut()[k]
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += 0.5);
        }
    }
    assert_eq!(before, item_states(&m, &[vec![2, 3, 4]], false));
    assert_ne!(attr_before, attr_last(&m, &[1, 2]));
}

#[test]
fn generator_with_zero_weights_scores_uniformly() {
    let mut r = rng::seeded(14);
    let mut gen = Generator::new(tiny(8, 2), 10, &mut r).unwrap();
    for v in gen.store.values_mut() {
        v.data_mut().fill(0.0);
    }
    let s = gen.next_scores(&[2, 3]).unwrap();
    assert!(s[..2].iter().all(|v| *v == f32::NEG_INFINITY));
    assert!(s[2..].iter().all(|&v| v == s[2]));
    assert!(gen.next_scores(&[]).is_err());
}

#[test]
fn generator_prefix_scores_cover_long_sequences() {
    let mut r = rng::seeded(15);
    let gen = Generator::new(tiny(8, 2), 10, &mut r).unwrap();
    let seq: Vec<u32> = (0..9).map(|k| 2 + k % 8).collect();
    let all = gen.prefix_scores(&seq).unwrap();
    assert_eq!(all.shape(), &[9, 10]);
    for p in [0, 3, 5, 8] {
        assert_eq!(all.row(p), gen.next_scores(&seq[..=p]).unwrap().as_slice());
    }
}
