//! Dual self-attentive encoder with its three scoring heads, and the causal
//! next-item model used as a negative generator.

mod encoder;

pub use encoder::{truncate_recent, Dropout, Encoder, SeqBatch};

use crate::autodiff::{Graph, Var};
use crate::dataset::{Catalog, FIRST_ITEM};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Longest item sequence the encoder accepts.
    pub max_items: usize,
    /// Longest attribute sequence the encoder accepts.
    pub max_attributes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 2,
            max_items: 50,
            max_attributes: 20,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dimension {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.max_items == 0 || self.max_attributes == 0 {
            return Err(Error::Config(
                "layers and maximum lengths must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

fn check_candidates(items: &[u32], vocab: usize) -> Result<Vec<usize>> {
    items
        .iter()
        .map(|&i| {
            if i < FIRST_ITEM || i as usize >= vocab {
                Err(Error::InvalidId {
                    kind: "candidate item",
                    id: i,
                })
            } else {
                Ok(i as usize)
            }
        })
        .collect()
}

/// Item encoder, attribute encoder, fusion matrix `W_M` (`2d × d`) and
/// discrimination matrix `W_P` (`d × d`), all in one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder<T = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub items: Encoder,
    pub attributes: Encoder,
    pub w_m: ParamId,
    pub w_p: ParamId,
}

impl DualEncoder<f32> {
    pub fn new(config: ModelConfig, catalog: &Catalog, rng: &mut Rng) -> Result<Self> {
        Self::with_vocab(
            config,
            catalog.item_vocab_size(),
            catalog.attribute_vocab_size(),
            rng,
        )
    }

    /// `item_vocab` and `attr_vocab` include the reserved rows.
    pub fn with_vocab(
        config: ModelConfig,
        item_vocab: usize,
        attr_vocab: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let items = Encoder::new(
            &mut store,
            "item",
            item_vocab,
            config.max_items,
            &config,
            rng,
        );
        let attributes = Encoder::new(
            &mut store,
            "attr",
            attr_vocab,
            config.max_attributes,
            &config,
            rng,
        );
        let d = config.dim;
        let w_m = store.add(
            "w_m",
            crate::params::truncated_normal(rng, &[2 * d, d], 0.02),
        );
        let w_p = store.add("w_p", crate::params::truncated_normal(rng, &[d, d], 0.02));
        Ok(Self {
            config,
            store,
            items,
            attributes,
            w_m,
            w_p,
        })
    }
}

impl<T: Real> DualEncoder<T> {
    pub fn cast<U: Real>(&self) -> DualEncoder<U> {
        DualEncoder {
            config: self.config.clone(),
            store: self.store.cast(),
            items: self.items.clone(),
            attributes: self.attributes.clone(),
            w_m: self.w_m,
            w_p: self.w_p,
        }
    }

    pub fn item_vocab_size(&self) -> usize {
        self.store.get(self.items.embedding).shape()[0]
    }

    pub fn attribute_vocab_size(&self) -> usize {
        self.store.get(self.attributes.embedding).shape()[0]
    }

    /// Bidirectional hidden states of item sequences, `[batch·len × d]`.
    pub fn encode_items(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &SeqBatch,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        self.items
            .forward(g, bound, &self.config, batch, false, dropout)
    }

    /// Hidden states of attribute sequences, `[batch·len × d]`.
    pub fn encode_attributes(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &SeqBatch,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        self.attributes
            .forward(g, bound, &self.config, batch, false, dropout)
    }

    /// `concat(left, right) · W_M`, one row per instance.
    pub fn fuse(&self, g: &mut Graph<T>, bound: &Bound, left: Var, right: Var) -> Result<Var> {
        let c = g.concat(left, right)?;
        Ok(g.matmul(c, bound.var(self.w_m))?)
    }

    /// Row-wise `fused[r] · M_I[items[r]]`. Used for the preference score,
    /// where `fused` comes from the two last states, and for the masked-item
    /// logit, where it comes from the masked position and the item's
    /// attribute set.
    pub fn item_logits(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        fused: Var,
        items: &[u32],
    ) -> Result<Var> {
        let idx = check_candidates(items, self.item_vocab_size())?;
        let e = g.gather_rows(bound.var(self.items.embedding), &idx)?;
        Ok(g.row_dot(fused, e)?)
    }

    /// Row-wise `f_item[r]ᵀ · W_P · f_attr[r]`.
    pub fn sad_logits(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        f_item: Var,
        f_attr: Var,
    ) -> Result<Var> {
        let p = g.matmul(f_item, bound.var(self.w_p))?;
        Ok(g.row_dot(p, f_attr)?)
    }

    /// Fused user representations `[batch × d]` from item histories and
    /// attribute sequences. Both are truncated to their most recent entries.
    pub fn preference<H: AsRef<[u32]>, A: AsRef<[u32]>>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        histories: &[H],
        attributes: &[A],
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        let hist: Vec<&[u32]> = histories
            .iter()
            .map(|h| truncate_recent(h.as_ref(), self.config.max_items))
            .collect();
        let attrs: Vec<&[u32]> = attributes
            .iter()
            .map(|a| truncate_recent(a.as_ref(), self.config.max_attributes))
            .collect();
        let ib = SeqBatch::new(&hist, self.config.max_items)?;
        let ab = SeqBatch::new(&attrs, self.config.max_attributes)?;
        let fi = self.encode_items(g, bound, &ib, dropout.as_deref_mut())?;
        let fa = self.encode_attributes(g, bound, &ab, dropout)?;
        let si = g.gather_rows(fi, &ib.last_rows())?;
        let sa = g.gather_rows(fa, &ab.last_rows())?;
        self.fuse(g, bound, si, sa)
    }

    /// Inference-mode user vectors, `[batch × d]`.
    pub fn user_vectors<H: AsRef<[u32]>, A: AsRef<[u32]>>(
        &self,
        histories: &[H],
        attributes: &[A],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false);
        let u = self.preference(&mut g, &bound, histories, attributes, None)?;
        Ok(g.value(u).clone())
    }

    /// Preference scores of `items` for one user vector.
    pub fn scores_for(&self, user: &[T], items: &[u32]) -> Result<Vec<T>> {
        let emb = self.store.get(self.items.embedding);
        check_candidates(items, self.item_vocab_size())?;
        Ok(items
            .iter()
            .map(|&i| {
                emb.row(i as usize)
                    .iter()
                    .zip(user)
                    .map(|(&e, &u)| e * u)
                    .sum()
            })
            .collect())
    }
}

/// Causal next-item model with tied input/output item embeddings. Its
/// parameters are separate from any [`DualEncoder`].
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
}

impl Generator<f32> {
    pub fn new(config: ModelConfig, item_vocab: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            &mut store,
            "gen",
            item_vocab,
            config.max_items,
            &config,
            rng,
        );
        Ok(Self {
            config,
            store,
            encoder,
        })
    }
}

impl<T: Real> Generator<T> {
    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
        }
    }

    pub fn item_vocab_size(&self) -> usize {
        self.store.get(self.encoder.embedding).shape()[0]
    }

    /// Causal hidden states `[batch·len × d]`.
    pub fn hidden(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &SeqBatch,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        self.encoder
            .forward(g, bound, &self.config, batch, true, dropout)
    }

    /// Row-wise `h[r] · M[items[r]]`.
    pub fn item_logits(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        h: Var,
        items: &[u32],
    ) -> Result<Var> {
        let idx = check_candidates(items, self.item_vocab_size())?;
        let e = g.gather_rows(bound.var(self.encoder.embedding), &idx)?;
        Ok(g.row_dot(h, e)?)
    }

    /// Scores of every vocabulary entry after each prefix of `seq`: row `p`
    /// scores the item following `seq[..=p]`. Columns for PAD and MASK are
    /// negative infinity. Only the most recent `max_items` entries of each
    /// prefix are visible.
    pub fn prefix_scores(&self, seq: &[u32]) -> Result<Tensor<T>> {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        let max = self.config.max_items;
        let vocab = self.item_vocab_size();
        let emb = self.store.get(self.encoder.embedding);
        let mut out = Vec::with_capacity(seq.len() * vocab);
        let mut push_rows = |hv: &Tensor<T>, rows: std::ops::Range<usize>| {
            for r in rows {
                let h = hv.row(r);
                for j in 0..vocab {
                    out.push(if j < FIRST_ITEM as usize {
                        T::neg_infinity()
                    } else {
                        emb.row(j).iter().zip(h).map(|(&e, &x)| e * x).sum()
                    });
                }
            }
        };
        let first = seq.len().min(max);
        let hv = self.hidden_values(&seq[..first])?;
        push_rows(&hv, 0..first);
        // Prefixes longer than the window are re-encoded from their own tail.
        for p in first..seq.len() {
            let hv = self.hidden_values(&seq[p + 1 - max..=p])?;
            push_rows(&hv, max - 1..max);
        }
        Ok(Tensor::new(vec![seq.len(), vocab], out)?)
    }

    fn hidden_values(&self, seq: &[u32]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false);
        let batch = SeqBatch::new(&[seq], self.config.max_items)?;
        let h = self.hidden(&mut g, &bound, &batch, None)?;
        Ok(g.value(h).clone())
    }

    /// Next-item scores after the whole of `prefix`.
    pub fn next_scores(&self, prefix: &[u32]) -> Result<Vec<T>> {
        let s = self.prefix_scores(truncate_recent(prefix, self.config.max_items))?;
        Ok(s.row(s.rows() - 1).to_vec())
    }
}

#[cfg(test)]
mod tests;
