//! Masked item prediction and substituted attribute discrimination.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::dataset::{Catalog, InteractionLog, ITEM_MASK};
use crate::error::{Error, Result};
use crate::model::{truncate_recent, Dropout, DualEncoder, SeqBatch};
use crate::negsampler::NegativeSampler;
use crate::optim::{clip_global_norm, AdamState};
use crate::params::Bound;
use crate::rng::Rng;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub mask_prob: f64,
    pub substitution_prob: f64,
    pub lambda_mip: f32,
    pub lambda_sad: f32,
    pub batch_size: usize,
    pub clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.2,
            substitution_prob: 0.5,
            lambda_mip: 1.0,
            lambda_sad: 1.0,
            batch_size: 256,
            clip: 0.1,
        }
    }
}

/// Positions selected independently with probability `rho`; one uniformly
/// chosen position when none is selected.
pub fn choose_positions(len: usize, rho: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let mut picked: Vec<usize> = (0..len).filter(|_| rng.random::<f64>() < rho).collect();
    if picked.is_empty() {
        picked.push(rng.random_range(0..len));
    }
    Ok(picked)
}

/// Replaces selected positions of `seq` with the mask token.
pub fn mask_sequence(seq: &[u32], rho: f64, rng: &mut Rng) -> Result<(Vec<u32>, Vec<usize>)> {
    let positions = choose_positions(seq.len(), rho, rng)?;
    let mut masked = seq.to_vec();
    for &k in &positions {
        masked[k] = ITEM_MASK;
    }
    Ok((masked, positions))
}

/// Replaces each attribute with probability `prob` by one drawn uniformly
/// from the attributes outside the set. Labels are `true` for originals.
pub fn corrupt_attributes(
    attrs: &[u32],
    prob: f64,
    catalog: &Catalog,
    rng: &mut Rng,
) -> Result<(Vec<u32>, Vec<bool>)> {
    if attrs.is_empty() {
        return Err(Error::EmptySequence);
    }
    let outside: Vec<u32> = catalog
        .attributes()
        .filter(|a| !attrs.contains(a))
        .collect();
    if outside.is_empty() {
        return Err(Error::NoNegativeAttribute);
    }
    let mut out = Vec::with_capacity(attrs.len());
    let mut labels = Vec::with_capacity(attrs.len());
    for &a in attrs {
        if rng.random::<f64>() < prob {
            out.push(outside[rng.random_range(0..outside.len())]);
            labels.push(false);
        } else {
            out.push(a);
            labels.push(true);
        }
    }
    Ok((out, labels))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MipInstance {
    pub masked: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
    pub negatives: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SadInstance {
    /// Index of the item sequence within the batch.
    pub sequence: usize,
    pub position: usize,
    pub attributes: Vec<u32>,
    pub labels: Vec<bool>,
}

/// Attribute set of `item` as the attribute encoder consumes it.
fn attribute_sequence<T: Real>(model: &DualEncoder<T>, catalog: &Catalog, item: u32) -> Vec<u32> {
    truncate_recent(catalog.item_attributes(item), model.config.max_attributes).to_vec()
}

pub fn build_mip(
    seq: &[u32],
    cfg: &PretrainConfig,
    catalog: &Catalog,
    sampler: &NegativeSampler<'_>,
    rng: &mut Rng,
) -> Result<MipInstance> {
    let (masked, positions) = mask_sequence(seq, cfg.mask_prob, rng)?;
    let targets = positions.iter().map(|&k| seq[k]).collect();
    let negatives = sampler.masked_negatives(catalog, seq, &positions, rng)?;
    Ok(MipInstance {
        masked,
        positions,
        targets,
        negatives,
    })
}

/// Discrimination instances for `seq`; items carrying every attribute are
/// skipped because nothing can substitute for their attributes.
pub fn build_sad(
    index: usize,
    seq: &[u32],
    max_attributes: usize,
    cfg: &PretrainConfig,
    catalog: &Catalog,
    rng: &mut Rng,
) -> Result<Vec<SadInstance>> {
    let mut out = Vec::new();
    for k in choose_positions(seq.len(), cfg.mask_prob, rng)? {
        let attrs = truncate_recent(catalog.item_attributes(seq[k]), max_attributes);
        match corrupt_attributes(attrs, cfg.substitution_prob, catalog, rng) {
            Ok((attributes, labels)) => out.push(SadInstance {
                sequence: index,
                position: k,
                attributes,
                labels,
            }),
            Err(Error::NoNegativeAttribute) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// `−mean log σ(z⁺ − z⁻)` over every masked position of `batch`.
pub fn mip_loss<T: Real>(
    model: &DualEncoder<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    batch: &[MipInstance],
    catalog: &Catalog,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let seqs: Vec<&[u32]> = batch.iter().map(|m| m.masked.as_slice()).collect();
    let ib = SeqBatch::new(&seqs, model.config.max_items)?;
    let mut rows = Vec::new();
    let mut attr_seqs = Vec::new();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (b, m) in batch.iter().enumerate() {
        for (j, &k) in m.positions.iter().enumerate() {
            rows.push(ib.row(b, k));
            attr_seqs.push(attribute_sequence(model, catalog, m.targets[j]));
            pos.push(m.targets[j]);
            neg.push(m.negatives[j]);
        }
    }
    let ab = SeqBatch::new(&attr_seqs, model.config.max_attributes)?;
    let fi = model.encode_items(g, bound, &ib, dropout.as_deref_mut())?;
    let fa = model.encode_attributes(g, bound, &ab, dropout)?;
    let fk = g.gather_rows(fi, &rows)?;
    let sa = g.gather_rows(fa, &ab.last_rows())?;
    let u = model.fuse(g, bound, fk, sa)?;
    let zp = model.item_logits(g, bound, u, &pos)?;
    let zn = model.item_logits(g, bound, u, &neg)?;
    let diff = g.sub(zp, zn)?;
    let ls = g.log_sigmoid(diff);
    let m = g.mean(ls);
    Ok(g.scale(m, T::of(-1.0)))
}

/// Binary cross-entropy over every attribute slot of every instance.
pub fn sad_loss<T: Real, S: AsRef<[u32]>>(
    model: &DualEncoder<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    sequences: &[S],
    batch: &[SadInstance],
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let ib = SeqBatch::new(sequences, model.config.max_items)?;
    let attr_seqs: Vec<&[u32]> = batch.iter().map(|s| s.attributes.as_slice()).collect();
    let ab = SeqBatch::new(&attr_seqs, model.config.max_attributes)?;
    let mut item_rows = Vec::new();
    let mut attr_rows = Vec::new();
    let mut labels = Vec::new();
    for (n, s) in batch.iter().enumerate() {
        for (j, &y) in s.labels.iter().enumerate() {
            item_rows.push(ib.row(s.sequence, s.position));
            attr_rows.push(ab.row(n, j));
            labels.push(if y { T::one() } else { T::zero() });
        }
    }
    let fi = model.encode_items(g, bound, &ib, dropout.as_deref_mut())?;
    let fa = model.encode_attributes(g, bound, &ab, dropout)?;
    let f_item = g.gather_rows(fi, &item_rows)?;
    let f_attr = g.gather_rows(fa, &attr_rows)?;
    let z = model.sad_logits(g, bound, f_item, f_attr)?;
    let weights = vec![T::one(); labels.len()];
    Ok(g.bce_with_logits(z, &labels, &weights)?)
}

/// Pre-training item sequences: each user's log up to `cutoffs[user]`, cut
/// into windows of at most `max_len` with stride `max_len / 2`.
pub fn training_windows(log: &InteractionLog, cutoffs: &[usize], max_len: usize) -> Vec<Vec<u32>> {
    let stride = (max_len / 2).max(1);
    let mut out = Vec::new();
    for (u, h) in log.users.iter().enumerate() {
        let seq = &h.items[..cutoffs.get(u).copied().unwrap_or(h.len()).min(h.len())];
        if seq.is_empty() {
            continue;
        }
        if seq.len() <= max_len {
            out.push(seq.to_vec());
            continue;
        }
        let mut start = 0;
        loop {
            let end = (start + max_len).min(seq.len());
            out.push(seq[start..end].to_vec());
            if end == seq.len() {
                break;
            }
            start = (start + stride).min(seq.len() - max_len);
        }
    }
    out
}

/// Mean task losses over one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub mip: f64,
    pub sad: f64,
}

impl EpochStats {
    pub fn total(&self, cfg: &PretrainConfig) -> f64 {
        cfg.lambda_mip as f64 * self.mip + cfg.lambda_sad as f64 * self.sad
    }
}

fn pretrain_pass(
    model: &mut DualEncoder,
    mut adam: Option<&mut AdamState>,
    sequences: &[Vec<u32>],
    catalog: &Catalog,
    sampler: &NegativeSampler<'_>,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if sequences.is_empty() {
        return Err(Error::Config("no pre-training sequences".into()));
    }
    let mut stats = EpochStats::default();
    let mut batches = 0usize;
    for chunk in sequences.chunks(cfg.batch_size.max(1)) {
        let training = adam.is_some();
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g, training);
        let mut terms: Vec<(Var, f32)> = Vec::new();
        let mut mip_value = 0.0;
        let mut sad_value = 0.0;
        if cfg.lambda_mip != 0.0 || !training {
            let inst = chunk
                .iter()
                .map(|s| build_mip(s, cfg, catalog, sampler, rng))
                .collect::<Result<Vec<_>>>()?;
            let rate = if training { model.config.dropout } else { 0.0 };
            let mut dr = Dropout {
                rate,
                rng: &mut *rng,
            };
            let l = mip_loss(model, &mut g, &bound, &inst, catalog, Some(&mut dr))?;
            mip_value = g.value(l).data()[0] as f64;
            terms.push((l, cfg.lambda_mip));
        }
        if cfg.lambda_sad != 0.0 || !training {
            let mut inst = Vec::new();
            for (i, s) in chunk.iter().enumerate() {
                inst.extend(build_sad(
                    i,
                    s,
                    model.config.max_attributes,
                    cfg,
                    catalog,
                    rng,
                )?);
            }
            if !inst.is_empty() {
                let rate = if training { model.config.dropout } else { 0.0 };
                let mut dr = Dropout {
                    rate,
                    rng: &mut *rng,
                };
                let l = sad_loss(model, &mut g, &bound, chunk, &inst, Some(&mut dr))?;
                sad_value = g.value(l).data()[0] as f64;
                terms.push((l, cfg.lambda_sad));
            }
        }
        stats.mip += mip_value;
        stats.sad += sad_value;
        batches += 1;
        if let Some(state) = adam.as_deref_mut() {
            let mut total: Option<Var> = None;
            for (l, w) in terms.into_iter().filter(|(_, w)| *w != 0.0) {
                let scaled = if w == 1.0 { l } else { g.scale(l, w) };
                total = Some(match total {
                    None => scaled,
                    Some(t) => g.add(t, scaled)?,
                });
            }
            if let Some(loss) = total {
                let mut grads = g.backward(loss)?;
                let mut pg = bound.gradients(&model.store, &mut grads);
                clip_global_norm(&mut pg, cfg.clip);
                state.step(&mut model.store, &pg)?;
            }
        }
    }
    stats.mip /= batches as f64;
    stats.sad /= batches as f64;
    Ok(stats)
}

/// One shuffled pass of joint pre-training. Returns the mean losses seen
/// while training.
pub fn pretrain_epoch(
    model: &mut DualEncoder,
    adam: &mut AdamState,
    sequences: &[Vec<u32>],
    catalog: &Catalog,
    sampler: &NegativeSampler<'_>,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<EpochStats> {
    let mut order = sequences.to_vec();
    order.shuffle(rng);
    pretrain_pass(model, Some(adam), &order, catalog, sampler, cfg, rng)
}

/// Both losses without dropout or updates. With a fixed `rng` seed the
/// masks, substitutions and negatives are fixed, so values are comparable
/// across parameter states.
pub fn pretrain_objective(
    model: &DualEncoder,
    sequences: &[Vec<u32>],
    catalog: &Catalog,
    sampler: &NegativeSampler<'_>,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<EpochStats> {
    let mut copy = model.clone();
    pretrain_pass(&mut copy, None, sequences, catalog, sampler, cfg, rng)
}
