//! Pairwise fine-tuning of the preference score and leave-one-out ranking
//! evaluation.

use rand::seq::{index, SliceRandom};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autodiff::{Graph, Var};
use crate::dataset::{Catalog, ConversationRecord, InteractionLog, FIRST_ITEM};
use crate::error::{Error, Result};
use crate::model::{Dropout, DualEncoder};
use crate::negsampler::NegativeSampler;
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::params::Bound;
use crate::rng::{self, Rng};
use crate::tensor::Real;

/// Negatives paired with each evaluation target.
pub const EVAL_NEGATIVES: usize = 100;
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub clip: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            lr: 1e-4,
            clip: 0.1,
            patience: 5,
        }
    }
}

pub fn ndcg_at_10(rank: usize) -> f64 {
    assert!(rank >= 1, "ranks start at 1");
    if rank <= 10 {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn reciprocal_rank(rank: usize) -> f64 {
    assert!(rank >= 1, "ranks start at 1");
    1.0 / rank as f64
}

/// 1-based rank of `scores[target]`: every other candidate scoring at least
/// as high is placed ahead of it.
pub fn rank_of<T: PartialOrd>(scores: &[T], target: usize) -> usize {
    let t = &scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, s)| i != target && s >= t)
        .count()
}

/// `EVAL_NEGATIVES` distinct items other than `target`, fixed by
/// `(seed, user)`.
pub fn eval_negatives(
    catalog: &Catalog,
    record: &ConversationRecord,
    seed: u64,
) -> Result<Vec<u32>> {
    let n = catalog.item_count();
    if n < EVAL_NEGATIVES + 1 {
        return Err(Error::CatalogTooSmall {
            items: n,
            needed: EVAL_NEGATIVES + 1,
        });
    }
    let mut r = rng::derived(seed, &[record.user as u64]);
    let skip = record.target - FIRST_ITEM;
    Ok(index::sample(&mut r, n - 1, EVAL_NEGATIVES)
        .into_iter()
        .map(|k| {
            let k = k as u32;
            FIRST_ITEM + if k >= skip { k + 1 } else { k }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mrr: f64,
    pub ndcg10: f64,
    /// Target rank per evaluated record, in input order.
    pub ranks: Vec<usize>,
}

impl EvalResult {
    pub fn from_ranks(ranks: Vec<usize>) -> Self {
        let n = ranks.len().max(1) as f64;
        let mrr = ranks.iter().map(|&r| reciprocal_rank(r)).sum::<f64>() / n;
        let ndcg10 = ranks.iter().map(|&r| ndcg_at_10(r)).sum::<f64>() / n;
        Self { mrr, ndcg10, ranks }
    }

    pub fn reciprocal_ranks(&self) -> Vec<f64> {
        self.ranks.iter().map(|&r| reciprocal_rank(r)).collect()
    }
}

/// Ranks each record's target among itself and its evaluation negatives.
/// `score` receives a batch of records with their candidate lists (target
/// first) and returns one score per candidate.
pub fn evaluate_by<F>(
    records: &[ConversationRecord],
    catalog: &Catalog,
    seed: u64,
    mut score: F,
) -> Result<EvalResult>
where
    F: FnMut(&[ConversationRecord], &[Vec<u32>]) -> Result<Vec<Vec<f32>>>,
{
    let mut ranks = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let mut cands = Vec::with_capacity(chunk.len());
        for r in chunk {
            let mut c = vec![r.target];
            c.extend(eval_negatives(catalog, r, seed)?);
            cands.push(c);
        }
        for (c, s) in cands.iter().zip(score(chunk, &cands)?) {
            ranks.push(rank_of(&s, 0));
            debug_assert_eq!(c.len(), s.len());
        }
    }
    Ok(EvalResult::from_ranks(ranks))
}

/// Rank of the record's target among `candidates` (target included).
pub fn rank_candidates(
    model: &DualEncoder,
    log: &InteractionLog,
    record: &ConversationRecord,
    candidates: &[u32],
) -> Result<usize> {
    let mut seen = candidates.to_vec();
    seen.sort_unstable();
    if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateCandidate(w[0]));
    }
    let t = candidates
        .iter()
        .position(|&c| c == record.target)
        .ok_or_else(|| Error::Config("candidate list lacks the target".into()))?;
    let u = model.user_vectors(&[record.history(log)], &[&record.attributes])?;
    Ok(rank_of(&model.scores_for(u.row(0), candidates)?, t))
}

pub fn evaluate(
    model: &DualEncoder,
    log: &InteractionLog,
    catalog: &Catalog,
    records: &[ConversationRecord],
    seed: u64,
) -> Result<EvalResult> {
    evaluate_by(records, catalog, seed, |chunk, cands| {
        let hist: Vec<&[u32]> = chunk.iter().map(|r| r.history(log)).collect();
        let attrs: Vec<&[u32]> = chunk.iter().map(|r| r.attributes.as_slice()).collect();
        let u = model.user_vectors(&hist, &attrs)?;
        cands
            .iter()
            .enumerate()
            .map(|(b, c)| model.scores_for(u.row(b), c))
            .collect()
    })
}

/// Two-sided paired t-test p-value.
pub fn paired_significance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::TooFewPairs(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    Ok((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

/// `−mean log σ(score(target) − score(negative))`.
pub fn finetune_loss<T: Real>(
    model: &DualEncoder<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    log: &InteractionLog,
    records: &[ConversationRecord],
    negatives: &[u32],
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let hist: Vec<&[u32]> = records.iter().map(|r| r.history(log)).collect();
    let attrs: Vec<&[u32]> = records.iter().map(|r| r.attributes.as_slice()).collect();
    let u = model.preference(g, bound, &hist, &attrs, dropout)?;
    let pos: Vec<u32> = records.iter().map(|r| r.target).collect();
    let zp = model.item_logits(g, bound, u, &pos)?;
    let zn = model.item_logits(g, bound, u, negatives)?;
    let diff = g.sub(zp, zn)?;
    let ls = g.log_sigmoid(diff);
    let m = g.mean(ls);
    Ok(g.scale(m, T::of(-1.0)))
}

#[allow(clippy::too_many_arguments)]
fn finetune_pass(
    model: &mut DualEncoder,
    mut adam: Option<&mut AdamState>,
    records: &[ConversationRecord],
    log: &InteractionLog,
    catalog: &Catalog,
    sampler: &NegativeSampler<'_>,
    cfg: &FinetuneConfig,
    rng: &mut Rng,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Config("no fine-tuning records".into()));
    }
    let mut total = 0.0;
    for chunk in records.chunks(cfg.batch_size.max(1)) {
        let negatives = chunk
            .iter()
            .map(|r| sampler.next_negative(catalog, r.history(log), r.target, rng))
            .collect::<Result<Vec<_>>>()?;
        let training = adam.is_some();
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g, training);
        let rate = if training { model.config.dropout } else { 0.0 };
        let mut dr = Dropout {
            rate,
            rng: &mut *rng,
        };
        let loss = finetune_loss(model, &mut g, &bound, log, chunk, &negatives, Some(&mut dr))?;
        total += g.value(loss).data()[0] as f64 * chunk.len() as f64;
        if let Some(state) = adam.as_deref_mut() {
            let mut grads = g.backward(loss)?;
            let mut pg = bound.gradients(&model.store, &mut grads);
            clip_global_norm(&mut pg, cfg.clip);
            state.step(&mut model.store, &pg)?;
        }
    }
    Ok(total / records.len() as f64)
}

/// One shuffled training pass; returns the mean loss seen while training.
#[allow(clippy::too_many_arguments)]
pub fn finetune_epoch(
    model: &mut DualEncoder,
    adam: &mut AdamState,
    records: &[ConversationRecord],
    log: &InteractionLog,
    catalog: &Catalog,
    sampler: &NegativeSampler<'_>,
    cfg: &FinetuneConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let mut order = records.to_vec();
    order.shuffle(rng);
    finetune_pass(model, Some(adam), &order, log, catalog, sampler, cfg, rng)
}

/// Loss without dropout or updates; negatives are fixed by `rng`'s seed.
pub fn finetune_objective(
    model: &DualEncoder,
    records: &[ConversationRecord],
    log: &InteractionLog,
    catalog: &Catalog,
    sampler: &NegativeSampler<'_>,
    cfg: &FinetuneConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let mut copy = model.clone();
    finetune_pass(&mut copy, None, records, log, catalog, sampler, cfg, rng)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneHistory {
    pub train_loss: Vec<f64>,
    pub valid_ndcg: Vec<f64>,
    /// Epoch (0-based) whose parameters were kept.
    pub best_epoch: Option<usize>,
}

/// Trains with early stopping on validation NDCG@10 and leaves `model` at
/// the best validation epoch. Without validation records every epoch runs
/// and the final parameters are kept.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    model: &mut DualEncoder,
    train: &[ConversationRecord],
    valid: &[ConversationRecord],
    log: &InteractionLog,
    catalog: &Catalog,
    sampler: &NegativeSampler<'_>,
    cfg: &FinetuneConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64, Option<f64>),
) -> Result<FinetuneHistory> {
    let mut adam = AdamState::new(&model.store, AdamConfig::with_lr(cfg.lr));
    let mut rng = rng::derived(seed, &[0x66_74]);
    let mut hist = FinetuneHistory::default();
    let mut best: Option<(f64, crate::params::ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let loss = finetune_epoch(
            model, &mut adam, train, log, catalog, sampler, cfg, &mut rng,
        )?;
        hist.train_loss.push(loss);
        let ndcg = if valid.is_empty() {
            None
        } else {
            Some(evaluate(model, log, catalog, valid, seed)?.ndcg10)
        };
        on_epoch(epoch, loss, ndcg);
        if let Some(v) = ndcg {
            hist.valid_ndcg.push(v);
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, model.store.clone()));
                hist.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_closed_forms() {
        assert_eq!(ndcg_at_10(1), 1.0);
        assert_eq!(ndcg_at_10(3), 0.5);
        assert_eq!(ndcg_at_10(11), 0.0);
        assert_eq!(reciprocal_rank(4), 0.25);
        assert_eq!(EvalResult::from_ranks(vec![1, 2]).mrr, 0.75);
    }

    #[test]
    fn metrics_non_increasing_in_rank() {
        for r in 1..101 {
            assert!(ndcg_at_10(r + 1) <= ndcg_at_10(r));
            assert!(reciprocal_rank(r + 1) <= reciprocal_rank(r));
        }
    }

    #[test]
    fn pessimistic_ties() {
        assert_eq!(rank_of(&[3.0, 1.0, 2.0], 0), 1);
        assert_eq!(rank_of(&[2.0, 2.0, 1.0], 0), 2);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 0), 3);
    }

    #[test]
    fn rank_matches_full_sort() {
        let mut r = rng::seeded(0);
        use rand::Rng as _;
        for _ in 0..200 {
            let s: Vec<f32> = (0..101)
                .map(|_| (r.random_range(0..30) as f32) / 3.0)
                .collect();
            let mut order: Vec<usize> = (0..101).collect();
            // target after every equal score
            order.sort_by(|&a, &b| {
                s[b].partial_cmp(&s[a])
                    .unwrap()
                    .then((a == 0).cmp(&(b == 0)))
            });
            let sorted_rank = order.iter().position(|&i| i == 0).unwrap() + 1;
            assert_eq!(rank_of(&s, 0), sorted_rank);
            let shifted: Vec<f32> = s.iter().map(|v| v + 7.0).collect();
            assert_eq!(rank_of(&shifted, 0), sorted_rank);
        }
    }

    #[test]
    fn significance_edge_cases() {
        let a = [0.5, 0.25, 1.0, 0.1];
        assert_eq!(paired_significance(&a, &a).unwrap(), 1.0);
        assert!(paired_significance(&a, &a[..3]).is_err());
        assert!(paired_significance(&a[..1], &a[..1]).is_err());
        let b: Vec<f64> = (0..30).map(|k| 0.5 + 1e-3 * (k % 3) as f64).collect();
        let c: Vec<f64> = b.iter().map(|x| x - 0.1).collect();
        let mut c2 = c.clone();
        c2[0] += 1e-4;
        assert!(paired_significance(&b, &c2).unwrap() < 0.001);
        let x = [0.1, 0.5, 0.3, 0.9, 0.2];
        let y = [0.2, 0.1, 0.4, 0.3, 0.3];
        assert_eq!(
            paired_significance(&x, &y).unwrap(),
            paired_significance(&y, &x).unwrap()
        );
    }

    #[test]
    fn paired_t_matches_hand_computation() {
        // d = [1, 2, 3]: mean 2, sd 1, t = 2·√3, df 2
        let p = paired_significance(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        let t: f64 = 2.0 * 3f64.sqrt();
        // Student t with 2 df: cdf(t) = 1/2 + t / (2·sqrt(2 + t²))
        let expect = 2.0 * (0.5 - t / (2.0 * (2.0 + t * t).sqrt()));
        assert!((p - expect).abs() < 1e-9, "{p} vs {expect}");
    }

    #[test]
    fn eval_negatives_fixed_and_valid() {
        let c = Catalog::new(vec![vec![1]; 150], 1).unwrap();
        let rec = ConversationRecord {
            user: 3,
            attributes: vec![1],
            target: 50,
            history_cutoff: 0,
        };
        let a = eval_negatives(&c, &rec, 1).unwrap();
        assert_eq!(a, eval_negatives(&c, &rec, 1).unwrap());
        assert_eq!(a.len(), 100);
        assert!(!a.contains(&50) && a.iter().all(|&i| c.is_item(i)));
        let mut d = a.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 100);
        let small = Catalog::new(vec![vec![1]; 100], 1).unwrap();
        assert!(matches!(
            eval_negatives(&small, &rec, 1),
            Err(Error::CatalogTooSmall { .. })
        ));
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let c = Catalog::new(vec![vec![1]; 120], 1).unwrap();
        let recs: Vec<_> = (0..5)
            .map(|u| ConversationRecord {
                user: u,
                attributes: vec![1],
                target: 2 + u,
                history_cutoff: 0,
            })
            .collect();
        let res = evaluate_by(&recs, &c, 0, |chunk, cands| {
            Ok(chunk
                .iter()
                .zip(cands)
                .map(|(r, cs)| {
                    cs.iter()
                        .map(|&i| if i == r.target { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect())
        })
        .unwrap();
        assert_eq!((res.mrr, res.ndcg10), (1.0, 1.0));
    }

    #[test]
    fn permuting_candidates_keeps_rank() {
        let c = Catalog::new(vec![vec![1]; 20], 1).unwrap();
        let mut r = rng::seeded(3);
        let m = DualEncoder::new(
            crate::model::ModelConfig {
                dim: 8,
                layers: 1,
                max_items: 4,
                max_attributes: 4,
                ..Default::default()
            },
            &c,
            &mut r,
        )
        .unwrap();
        let log = InteractionLog::default();
        let rec = ConversationRecord {
            user: 0,
            attributes: vec![1],
            target: 5,
            history_cutoff: 0,
        };
        let mut cands: Vec<u32> = (2..22).collect();
        let base = rank_candidates(&m, &log, &rec, &cands).unwrap();
        for _ in 0..5 {
            cands.shuffle(&mut r);
            assert_eq!(rank_candidates(&m, &log, &rec, &cands).unwrap(), base);
        }
        assert!(matches!(
            rank_candidates(&m, &log, &rec, &[5, 6, 6]),
            Err(Error::DuplicateCandidate(6))
        ));
    }
}
