//! Self-attentive sequence encoder: embedding lookup plus learned positions,
//! followed by post-norm Transformer blocks.

use rand::Rng as _;

use crate::autodiff::{Graph, Var, MASK_NEG};
use crate::dataset::PAD;
use crate::error::{Error, Result};
use crate::params::{truncated_normal, Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

use super::ModelConfig;

const INIT_STD: f32 = 0.02;

/// Right-padded id sequences flattened to `[batch × len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
    /// Non-padding entries per sequence.
    pub lengths: Vec<usize>,
}

impl SeqBatch {
    /// Pads `seqs` to the longest one. Sequences must not contain PAD and
    /// must not exceed `max_len`.
    pub fn new<S: AsRef<[u32]>>(seqs: &[S], max_len: usize) -> Result<Self> {
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        if let Some(&len) = lengths.iter().find(|&&l| l > max_len) {
            return Err(Error::SequenceTooLong { len, max: max_len });
        }
        let len = lengths.iter().copied().max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            if s.contains(&PAD) {
                return Err(Error::InvalidId {
                    kind: "sequence entry",
                    id: PAD,
                });
            }
            ids[b * len..b * len + s.len()].copy_from_slice(s);
        }
        Ok(Self {
            ids,
            batch: seqs.len(),
            len,
            lengths,
        })
    }

    /// Flat row of sequence `b`, position `t`.
    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.len + t
    }

    /// Flat row of each sequence's last non-padding entry (position 0 for an
    /// empty sequence).
    pub fn last_rows(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .map(|(b, &l)| self.row(b, l.saturating_sub(1)))
            .collect()
    }

    /// Additive attention mask `[batch·heads × len × len]`.
    fn attention_mask<T: Real>(&self, heads: usize, causal: bool) -> Tensor<T> {
        let t = self.len;
        let neg = T::of(MASK_NEG as f64);
        let mut data = vec![T::zero(); self.batch * heads * t * t];
        for b in 0..self.batch {
            // An empty sequence attends to its first (padding) slot only, so
            // its output does not depend on how far the batch is padded.
            let visible = self.lengths[b].max(1);
            for h in 0..heads {
                let base = (b * heads + h) * t * t;
                for i in 0..t {
                    for j in 0..t {
                        if j >= visible || (causal && j > i) {
                            data[base + i * t + j] = neg;
                        }
                    }
                }
            }
        }
        Tensor::new(vec![self.batch * heads, t, t], data).expect("mask shape")
    }
}

/// Most recent `max_len` entries of `seq`.
pub fn truncate_recent(seq: &[u32], max_len: usize) -> &[u32] {
    &seq[seq.len().saturating_sub(max_len)..]
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Parameter handles of one encoder inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub embedding: ParamId,
    pub position: ParamId,
    blocks: Vec<Block>,
    max_len: usize,
}

/// Training-time dropout source.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

impl Dropout<'_> {
    fn apply<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        let n = g.value(x).len();
        let factor = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        Ok(g.mul_const(x, factor)?)
    }
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        max_len: usize,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Self {
        let d = cfg.dim;
        let mut w = |store: &mut ParamStore, name: &str, shape: &[usize]| {
            store.add(
                format!("{prefix}.{name}"),
                truncated_normal(rng, shape, INIT_STD),
            )
        };
        let embedding = w(store, "embedding", &[vocab, d]);
        let position = w(store, "position", &[max_len, d]);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("block{l}");
            let zeros = |store: &mut ParamStore, name: &str, n: usize| {
                store.add(format!("{prefix}.{p}.{name}"), Tensor::zeros(&[n]))
            };
            let ones = |store: &mut ParamStore, name: &str| {
                store.add(format!("{prefix}.{p}.{name}"), Tensor::filled(&[d], 1.0))
            };
            blocks.push(Block {
                wq: w(store, &format!("{p}.wq"), &[d, d]),
                bq: zeros(store, "bq", d),
                wk: w(store, &format!("{p}.wk"), &[d, d]),
                bk: zeros(store, "bk", d),
                wv: w(store, &format!("{p}.wv"), &[d, d]),
                bv: zeros(store, "bv", d),
                wo: w(store, &format!("{p}.wo"), &[d, d]),
                bo: zeros(store, "bo", d),
                ln1_g: ones(store, "ln1_g"),
                ln1_b: zeros(store, "ln1_b", d),
                w1: w(store, &format!("{p}.w1"), &[d, 4 * d]),
                b1: zeros(store, "b1", 4 * d),
                w2: w(store, &format!("{p}.w2"), &[4 * d, d]),
                b2: zeros(store, "b2", d),
                ln2_g: ones(store, "ln2_g"),
                ln2_b: zeros(store, "ln2_b", d),
            });
        }
        Self {
            embedding,
            position,
            blocks,
            max_len,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Hidden states `[batch·len × d]` for every position of `batch`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        cfg: &ModelConfig,
        batch: &SeqBatch,
        causal: bool,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        if batch.len > self.max_len {
            return Err(Error::SequenceTooLong {
                len: batch.len,
                max: self.max_len,
            });
        }
        let (b, t, h, d) = (batch.batch, batch.len, cfg.heads, cfg.dim);
        let dh = d / h;
        let idx: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let tok = g.gather_rows(bound.var(self.embedding), &idx)?;
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = g.gather_rows(bound.var(self.position), &pos_idx)?;
        let mut x = g.add(tok, pos)?;
        let mask = batch.attention_mask::<T>(h, causal);
        let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
        for blk in &self.blocks {
            let lin = |g: &mut Graph<T>, x: Var, w: ParamId, bias: ParamId| -> Result<Var> {
                let y = g.matmul(x, bound.var(w))?;
                Ok(g.add_bias(y, bound.var(bias))?)
            };
            let q = lin(g, x, blk.wq, blk.bq)?;
            let k = lin(g, x, blk.wk, blk.bk)?;
            let v = lin(g, x, blk.wv, blk.bv)?;
            let qh = g.split_heads(q, b, t, h)?;
            let kh = g.split_heads(k, b, t, h)?;
            let vh = g.split_heads(v, b, t, h)?;
            let s = g.batch_matmul(qh, kh, true)?;
            let s = g.scale(s, inv_sqrt);
            let s = g.add_const(s, &mask)?;
            let mut a = g.softmax_rows(s);
            if let Some(dr) = dropout.as_deref_mut() {
                a = dr.apply(g, a)?;
            }
            let ctx = g.batch_matmul(a, vh, false)?;
            let ctx = g.merge_heads(ctx, b, t, h)?;
            let o = lin(g, ctx, blk.wo, blk.bo)?;
            let r = g.add(x, o)?;
            let x1 = g.layer_norm(r, bound.var(blk.ln1_g), bound.var(blk.ln1_b))?;
            let f = lin(g, x1, blk.w1, blk.b1)?;
            let f = g.gelu(f);
            let mut f = lin(g, f, blk.w2, blk.b2)?;
            if let Some(dr) = dropout.as_deref_mut() {
                f = dr.apply(g, f)?;
            }
            let r = g.add(x1, f)?;
            x = g.layer_norm(r, bound.var(blk.ln2_g), bound.var(blk.ln2_b))?;
        }
        Ok(x)
    }
}
