//! Negative items: uniform draws, or draws from the score distribution of a
//! frozen causal next-item model.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::Graph;
use crate::dataset::{Catalog, FIRST_ITEM};
use crate::error::{Error, Result};
use crate::model::{Dropout, Generator, ModelConfig, SeqBatch};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativePolicy {
    Uniform,
    Generator { top_k: usize },
}

impl fmt::Display for NegativePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uniform => write!(f, "uniform"),
            Self::Generator { .. } => write!(f, "generator"),
        }
    }
}

impl FromStr for NegativePolicy {
    type Err = Error;

    /// Parses `uniform` or `generator` (with the default `top_k` of 100).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "generator" => Ok(Self::Generator { top_k: 100 }),
            other => Err(Error::Config(format!("unknown negative policy `{other}`"))),
        }
    }
}

/// Uniform draw over catalog items not in `exclude`.
pub fn uniform_negative(catalog: &Catalog, exclude: &[u32], rng: &mut Rng) -> Result<u32> {
    let n = catalog.item_count() as u32;
    let mut excluded: Vec<u32> = exclude
        .iter()
        .copied()
        .filter(|&i| catalog.is_item(i))
        .collect();
    excluded.sort_unstable();
    excluded.dedup();
    if excluded.len() as u32 >= n {
        return Err(Error::NoNegativeItem);
    }
    // Draw the k-th valid item directly rather than rejecting.
    let mut k = FIRST_ITEM + rng.random_range(0..n - excluded.len() as u32);
    for &e in &excluded {
        if e <= k {
            k += 1;
        } else {
            break;
        }
    }
    Ok(k)
}

/// The `top_k` highest-scoring valid items (score descending, then id
/// ascending). Entries below `FIRST_ITEM`, non-finite scores and `exclude`
/// are skipped.
pub fn top_candidates<T: Real>(scores: &[T], exclude: &[u32], top_k: usize) -> Vec<(u32, T)> {
    let mut cands: Vec<(u32, T)> = scores
        .iter()
        .enumerate()
        .skip(FIRST_ITEM as usize)
        .filter(|(i, s)| s.is_finite() && !exclude.contains(&(*i as u32)))
        .map(|(i, &s)| (i as u32, s))
        .collect();
    cands.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    cands.truncate(top_k);
    cands
}

/// Softmax probabilities of the kept candidates' scores.
pub fn candidate_probabilities<T: Real>(cands: &[(u32, T)]) -> Vec<f64> {
    let max = cands
        .iter()
        .map(|c| c.1.to_f64().unwrap_or(0.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = cands
        .iter()
        .map(|c| (c.1.to_f64().unwrap_or(0.0) - max).exp())
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Draws from the softmax over the `top_k` best-scoring items of `scores`
/// (indexed by item id) after removing `exclude`.
pub fn sample_from_scores<T: Real>(
    scores: &[T],
    exclude: &[u32],
    top_k: usize,
    rng: &mut Rng,
) -> Result<u32> {
    let cands = top_candidates(scores, exclude, top_k.max(1));
    if cands.is_empty() {
        return Err(Error::NoNegativeItem);
    }
    let dist =
        WeightedIndex::new(candidate_probabilities(&cands)).map_err(|_| Error::NoNegativeItem)?;
    Ok(cands[dist.sample(rng)].0)
}

/// Negative for the item following `prefix`, drawn from the generator;
/// uniform when `prefix` is empty.
pub fn generator_sample(
    gen: &Generator,
    catalog: &Catalog,
    prefix: &[u32],
    exclude: &[u32],
    top_k: usize,
    rng: &mut Rng,
) -> Result<u32> {
    if prefix.is_empty() {
        return uniform_negative(catalog, exclude, rng);
    }
    let scores = gen.next_scores(prefix)?;
    sample_from_scores(&scores, exclude, top_k, rng)
}

/// Source of negatives during training.
#[derive(Clone, Copy, Debug)]
pub enum NegativeSampler<'a> {
    Uniform,
    Generator { model: &'a Generator, top_k: usize },
}

impl<'a> NegativeSampler<'a> {
    pub fn new(policy: NegativePolicy, generator: Option<&'a Generator>) -> Result<Self> {
        match (policy, generator) {
            (NegativePolicy::Uniform, _) => Ok(Self::Uniform),
            (NegativePolicy::Generator { top_k }, Some(model)) => {
                if top_k == 0 {
                    return Err(Error::Config("top_k must be at least 1".into()));
                }
                Ok(Self::Generator { model, top_k })
            }
            (NegativePolicy::Generator { .. }, None) => Err(Error::Config(
                "generator policy requires a trained generator".into(),
            )),
        }
    }

    /// One negative per masked position of `original`. Items of `original`
    /// are known positives and are not drawn unless nothing else is left.
    /// The generator sees, for position `k`, the entries before `k` with
    /// masked ones removed.
    pub fn masked_negatives(
        &self,
        catalog: &Catalog,
        original: &[u32],
        masked: &[usize],
        rng: &mut Rng,
    ) -> Result<Vec<u32>> {
        match *self {
            Self::Uniform => masked
                .iter()
                .map(|&k| {
                    with_fallback(original, original[k], |ex| {
                        uniform_negative(catalog, ex, &mut *rng)
                    })
                })
                .collect(),
            Self::Generator { model, top_k } => {
                let mut is_masked = vec![false; original.len()];
                masked.iter().for_each(|&k| is_masked[k] = true);
                let compact: Vec<u32> = original
                    .iter()
                    .zip(&is_masked)
                    .filter(|(_, &m)| !m)
                    .map(|(&i, _)| i)
                    .collect();
                let scores = if compact.is_empty() {
                    None
                } else {
                    Some(model.prefix_scores(&compact)?)
                };
                masked
                    .iter()
                    .map(|&k| {
                        let before = is_masked[..k].iter().filter(|&&m| !m).count();
                        with_fallback(original, original[k], |ex| match (&scores, before) {
                            (Some(s), c) if c > 0 => {
                                sample_from_scores(s.row(c - 1), ex, top_k, &mut *rng)
                            }
                            _ => uniform_negative(catalog, ex, &mut *rng),
                        })
                    })
                    .collect()
            }
        }
    }

    /// Negative for a target following `history` (fine-tuning). History
    /// items are avoided like the target.
    pub fn next_negative(
        &self,
        catalog: &Catalog,
        history: &[u32],
        target: u32,
        rng: &mut Rng,
    ) -> Result<u32> {
        let mut known = history.to_vec();
        known.push(target);
        with_fallback(&known, target, |ex| match *self {
            Self::Uniform => uniform_negative(catalog, ex, &mut *rng),
            Self::Generator { model, top_k } => {
                generator_sample(model, catalog, history, ex, top_k, &mut *rng)
            }
        })
    }
}

/// Draws excluding every `known` item, or only `target` when that leaves
/// no candidate.
fn with_fallback(
    known: &[u32],
    target: u32,
    mut draw: impl FnMut(&[u32]) -> Result<u32>,
) -> Result<u32> {
    match draw(known) {
        Err(Error::NoNegativeItem) => draw(&[target]),
        r => r,
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub clip: f64,
}

impl Default for GeneratorTraining {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            lr: 1e-3,
            clip: 0.1,
        }
    }
}

/// Mean next-item pairwise loss of `gen` over `sequences` (one uniform
/// negative per prediction). Training when `adam` is given.
fn generator_pass(
    gen: &mut Generator,
    sequences: &[Vec<u32>],
    catalog: &Catalog,
    batch_size: usize,
    mut adam: Option<(&mut AdamState, f64)>,
    rng: &mut Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in sequences.chunks(batch_size.max(1)) {
        let chunk: Vec<&Vec<u32>> = chunk.iter().filter(|s| s.len() >= 2).collect();
        if chunk.is_empty() {
            continue;
        }
        let batch = SeqBatch::new(&chunk, gen.config.max_items)?;
        let mut rows = Vec::new();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (b, s) in chunk.iter().enumerate() {
            for p in 0..s.len() - 1 {
                rows.push(batch.row(b, p));
                pos.push(s[p + 1]);
                neg.push(uniform_negative(catalog, &[s[p + 1]], rng)?);
            }
        }
        let mut g = Graph::new();
        let training = adam.is_some();
        let bound = gen.store.bind(&mut g, training);
        let rate = if training { gen.config.dropout } else { 0.0 };
        let mut dr = Dropout {
            rate,
            rng: &mut *rng,
        };
        let h = gen.hidden(&mut g, &bound, &batch, Some(&mut dr))?;
        let h = g.gather_rows(h, &rows)?;
        let zp = gen.item_logits(&mut g, &bound, h, &pos)?;
        let zn = gen.item_logits(&mut g, &bound, h, &neg)?;
        let diff = g.sub(zp, zn)?;
        let ls = g.log_sigmoid(diff);
        let m = g.mean(ls);
        let loss = g.scale(m, -1.0);
        total += g.value(loss).data()[0] as f64 * rows.len() as f64;
        count += rows.len();
        if let Some((state, clip)) = adam.as_mut() {
            let mut grads = g.backward(loss)?;
            let mut pg = bound.gradients(&gen.store, &mut grads);
            clip_global_norm(&mut pg, *clip);
            state.step(&mut gen.store, &pg)?;
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// Trains a causal next-item model with the pairwise loss and uniform
/// negatives. Returns the model and the mean training loss of each epoch.
pub fn train_generator(
    sequences: &[Vec<u32>],
    catalog: &Catalog,
    config: ModelConfig,
    training: &GeneratorTraining,
    rng: &mut Rng,
) -> Result<(Generator, Vec<f64>)> {
    if sequences.iter().all(|s| s.len() < 2) {
        return Err(Error::Config(
            "generator training needs a sequence of length 2 or more".into(),
        ));
    }
    let mut gen = Generator::new(config, catalog.item_vocab_size(), rng)?;
    let mut adam = AdamState::new(&gen.store, AdamConfig::with_lr(training.lr));
    let mut order: Vec<Vec<u32>> = sequences.to_vec();
    let mut losses = Vec::with_capacity(training.epochs);
    for _ in 0..training.epochs {
        order.shuffle(rng);
        let l = generator_pass(
            &mut gen,
            &order,
            catalog,
            training.batch_size,
            Some((&mut adam, training.clip)),
            rng,
        )?;
        losses.push(l);
    }
    Ok((gen, losses))
}

/// Mean pairwise loss of a frozen generator on `sequences`.
pub fn generator_loss(
    gen: &Generator,
    sequences: &[Vec<u32>],
    catalog: &Catalog,
    rng: &mut Rng,
) -> Result<f64> {
    let mut copy = gen.clone();
    generator_pass(&mut copy, sequences, catalog, 256, None, rng)
}
