//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already topologically sorted. [`Graph::backward`] walks it once in
//! reverse, accumulating gradients for every node that (transitively)
//! depends on a leaf created with `requires_grad = true`.
//!
//! Broadcasting is limited to [`Graph::add_bias`], which adds a vector over
//! the last axis. Every other binary operation requires identical shapes.

use crate::error::TensorError;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Additive mask value for disallowed attention logits.
pub const MASK_NEG: f32 = -1e9;

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddConst {
        x: Var,
    },
    MulConst {
        x: Var,
        factor: Vec<T>,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    LogSigmoid {
        x: Var,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    RowDot {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Bce {
        z: Var,
        labels: Vec<T>,
        weights: Vec<T>,
        total: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Confined to one thread for a forward/backward pass.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T> Default for Graph<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`, or `None` when the node
    /// does not require gradients (or the loss does not depend on it).
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub(crate) fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        let g = self.grads.get_mut(var.0)?.take()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g).expect("gradient shape"))
    }
}

fn shape_err<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid<T: Real>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf node. Parameters use `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// `a[m×k] · b[k×n]`, or `a · bᵀ` with `b[n×k]` when `trans_b`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![T::zero(); m * n];
        if trans_b {
            gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        } else {
            gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_ex(a, b, false)
    }

    /// Batched product over the leading axis of two rank-3 tensors.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 3 || bv.shape().len() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(shape_err("batch_matmul", av, bv));
        }
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if k != bk {
            return Err(shape_err("batch_matmul", av, bv));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let a_blk = &av.data()[i * m * k..(i + 1) * m * k];
            let b_blk = &bv.data()[i * k * n..(i + 1) * k * n];
            let c_blk = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(a_blk, b_blk, c_blk, m, k, n);
            } else {
                gemm_nn(a_blk, b_blk, c_blk, m, k, n);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool), TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, rg) = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, rg) = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, rg) = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Adds `bias[d]` to every row of `x[..×d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape().len() != 1 || bv.len() != xv.last_dim() {
            return Err(shape_err("add_bias", xv, bv));
        }
        let d = bv.len();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    /// `x + c` for a constant tensor `c` (e.g. an attention mask).
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.shape() != c.shape() {
            return Err(shape_err("add_const", xv, c));
        }
        let data = xv
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::AddConst { x }, rg))
    }

    /// Elementwise product with constant factors (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.len() != factor.len() {
            return Err(TensorError::DataLength {
                shape: xv.shape().to_vec(),
                len: factor.len(),
            });
        }
        let data = xv
            .data()
            .iter()
            .zip(&factor)
            .map(|(&a, &b)| a * b)
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MulConst { x, factor }, rg))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax { x }, rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row: Vec<f64> = xv
                .row(r)
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .collect();
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = T::of(istd);
            for j in 0..d {
                let h = T::of((row[j] - mean) * istd);
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| {
                let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
            })
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid { x }, rg)
    }

    /// Numerically stable `log σ(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| log_sigmoid(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::LogSigmoid { x }, rg)
    }

    /// Selects rows of `x` viewed as `[rows × last_dim]`; output is 2-D.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.last_dim());
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![index.len(), d], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// `[batch·seq × d]` → `[batch·heads × seq × d/heads]`.
    pub fn split_heads(
        &mut self,
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if xv.shape() != [batch * seq, d] || heads == 0 || d % heads != 0 {
            return Err(TensorError::Argument(format!(
                "split_heads: shape {:?} incompatible with batch {batch}, seq {seq}, heads {heads}",
                xv.shape()
            )));
        }
        let dh = d / heads;
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for t in 0..seq {
                let src = xv.row(b * seq + t);
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let t = Tensor::new(vec![batch * heads, seq, dh], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(
        &mut self,
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let dh = xv.last_dim();
        if xv.shape() != [batch * heads, seq, dh] {
            return Err(TensorError::Argument(format!(
                "merge_heads: shape {:?} incompatible with batch {batch}, seq {seq}, heads {heads}",
                xv.shape()
            )));
        }
        let d = dh * heads;
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let src = ((b * heads + h) * seq + t) * dh;
                    let dst = (b * seq + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let t = Tensor::new(vec![batch * seq, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            rg,
        ))
    }

    /// Concatenates two matrices with equal row counts along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(shape_err("concat", av, bv));
        }
        let (n, da, db) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let t = Tensor::new(vec![n, da + db], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Concat { a, b }, rg))
    }

    /// Row-wise inner products of two `[n × d]` matrices, giving `[n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || av.shape() != bv.shape() {
            return Err(shape_err("row_dot", av, bv));
        }
        let out = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(&x, &y)| x * y).sum())
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::vector(out), Op::RowDot { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / T::of(xv.len().max(1) as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Weighted mean binary cross-entropy of logits `z` against `labels`.
    /// Entries with zero weight are excluded; an all-zero weight vector
    /// yields a zero loss.
    pub fn bce_with_logits(
        &mut self,
        z: Var,
        labels: &[T],
        weights: &[T],
    ) -> Result<Var, TensorError> {
        let zv = self.value(z);
        if zv.len() != labels.len() || zv.len() != weights.len() {
            return Err(TensorError::DataLength {
                shape: zv.shape().to_vec(),
                len: labels.len(),
            });
        }
        let total: T = weights.iter().copied().sum();
        let mut loss = T::zero();
        if total > T::zero() {
            for ((&zi, &y), &w) in zv.data().iter().zip(labels).zip(weights) {
                if w != T::zero() {
                    loss -= w * (y * log_sigmoid(zi) + (T::one() - y) * log_sigmoid(-zi));
                }
            }
            loss /= total;
        }
        let rg = self.rg(&[z]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                z,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                total,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accum<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                if let Some(da) = self.accum(grads, a) {
                    if trans_b {
                        gemm_nn(g, bv.data(), da, m, n, k);
                    } else {
                        gemm_nt(g, bv.data(), da, m, n, k);
                    }
                }
                if let Some(db) = self.accum(grads, b) {
                    if trans_b {
                        gemm_tn(g, av.data(), db, m, n, k);
                    } else {
                        gemm_tn(av.data(), g, db, m, k, n);
                    }
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if let Some(da) = self.accum(grads, a) {
                    for i in 0..batch {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let bb = &bv.data()[i * k * n..(i + 1) * k * n];
                        let out = &mut da[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            gemm_nn(gb, bb, out, m, n, k);
                        } else {
                            gemm_nt(gb, bb, out, m, n, k);
                        }
                    }
                }
                if let Some(db) = self.accum(grads, b) {
                    for i in 0..batch {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let ab = &av.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm_tn(gb, ab, out, m, n, k);
                        } else {
                            gemm_tn(ab, gb, out, m, k, n);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = self.accum(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if let Some(db) = self.accum(grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            &Op::Sub { a, b } => {
                if let Some(da) = self.accum(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if let Some(db) = self.accum(grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.accum(grads, a) {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.accum(grads, b) {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(dx) = self.accum(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                let d = self.value(bias).len();
                if let Some(db) = self.accum(grads, bias) {
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(dx) = self.accum(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * factor);
                }
            }
            &Op::AddConst { x } | &Op::Reshape { x } => {
                if let Some(dx) = self.accum(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::MulConst { x, factor } => {
                if let Some(dx) = self.accum(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * factor[i];
                    }
                }
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                if let Some(dx) = self.accum(grads, x) {
                    for r in 0..y.len() / n {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                let rows = inv_std.len();
                if let Some(dg) = self.accum(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.accum(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(dx) = self.accum(grads, *x) {
                    let mut dxhat = vec![T::zero(); d];
                    let df = T::of(d as f64);
                    for r in 0..rows {
                        let mut sum = T::zero();
                        let mut sum_xh = T::zero();
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gam[j];
                            sum += dxhat[j];
                            sum_xh += dxhat[j] * xhat[r * d + j];
                        }
                        let scale = inv_std[r] / df;
                        for j in 0..d {
                            dx[r * d + j] +=
                                scale * (df * dxhat[j] - sum - xhat[r * d + j] * sum_xh);
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                let xv = self.value(x).data();
                if let Some(dx) = self.accum(grads, x) {
                    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
                    let three = T::of(3.0);
                    for i in 0..g.len() {
                        let v = xv[i];
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        dx[i] += g[i] * (half * (T::one() + t) + half * v * dt);
                    }
                }
            }
            &Op::Sigmoid { x } => {
                let y = node.value.data();
                if let Some(dx) = self.accum(grads, x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            &Op::LogSigmoid { x } => {
                let xv = self.value(x).data();
                if let Some(dx) = self.accum(grads, x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * sigmoid(-xv[i]);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let d = node.value.last_dim();
                if let Some(dx) = self.accum(grads, *x) {
                    for (r, &src) in index.iter().enumerate() {
                        let dst = &mut dx[src * d..(src + 1) * d];
                        dst.iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            &Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = node.value.last_dim();
                let d = dh * heads;
                if let Some(dx) = self.accum(grads, x) {
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..seq {
                                let src = ((b * heads + h) * seq + t) * dh;
                                let dst = (b * seq + t) * d + h * dh;
                                for j in 0..dh {
                                    dx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let d = node.value.last_dim();
                let dh = d / heads;
                if let Some(dx) = self.accum(grads, x) {
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..seq {
                                let dst = ((b * heads + h) * seq + t) * dh;
                                let src = (b * seq + t) * d + h * dh;
                                for j in 0..dh {
                                    dx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::Concat { a, b } => {
                let da_w = self.value(a).last_dim();
                let db_w = self.value(b).last_dim();
                let w = da_w + db_w;
                if let Some(da) = self.accum(grads, a) {
                    for (r, row) in g.chunks(w).enumerate() {
                        da[r * da_w..(r + 1) * da_w]
                            .iter_mut()
                            .zip(&row[..da_w])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
                if let Some(db) = self.accum(grads, b) {
                    for (r, row) in g.chunks(w).enumerate() {
                        db[r * db_w..(r + 1) * db_w]
                            .iter_mut()
                            .zip(&row[da_w..])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::RowDot { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let d = av.last_dim();
                if let Some(da) = self.accum(grads, a) {
                    for (r, &gr) in g.iter().enumerate() {
                        for j in 0..d {
                            da[r * d + j] += gr * bv.data()[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.accum(grads, b) {
                    for (r, &gr) in g.iter().enumerate() {
                        for j in 0..d {
                            db[r * d + j] += gr * av.data()[r * d + j];
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = self.accum(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { x } => {
                if let Some(dx) = self.accum(grads, x) {
                    let s = g[0] / T::of(dx.len().max(1) as f64);
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Bce {
                z,
                labels,
                weights,
                total,
            } => {
                if *total <= T::zero() {
                    return;
                }
                let zv = self.value(*z).data();
                if let Some(dz) = self.accum(grads, *z) {
                    for i in 0..zv.len() {
                        dz[i] += g[0] * weights[i] * (sigmoid(zv[i]) - labels[i]) / *total;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Central finite differences of `f` at every coordinate of `inputs[which]`.
    fn finite_diff(
        inputs: &[Tensor<f64>],
        which: usize,
        f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) -> Vec<f64> {
        const H: f64 = 1e-3;
        let eval = |ins: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).data()[0]
        };
        (0..inputs[which].len())
            .map(|i| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += H;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= H;
                (eval(&plus) - eval(&minus)) / (2.0 * H)
            })
            .collect()
    }

    fn check_grads(inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        for (k, &v) in vars.iter().enumerate() {
            let analytic = grads.get(v).unwrap();
            let numeric = finite_diff(&inputs, k, f);
            let diff: f64 = analytic
                .data()
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let scale = analytic
                .data()
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .max(numeric.iter().map(|a| a * a).sum::<f64>());
            let rel = (diff / scale.max(1e-12)).sqrt();
            assert!(
                rel < 1e-3,
                "input {k}: relative error {rel}\n{analytic:?}\n{numeric:?}"
            );
        }
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut g = Graph::<f32>::new();
        let eye = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn elementwise_ops_refuse_broadcast() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        assert!(g.add_bias(a, b).is_ok());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 2]),
        ];
        check_grads(inputs, &|g, v| {
            let p = g.matmul(v[0], v[1]).unwrap();
            let s = g.sigmoid(p);
            g.sum(s)
        });
    }

    #[test]
    fn matmul_transposed_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[5, 4]),
        ];
        check_grads(inputs, &|g, v| {
            let p = g.matmul_ex(v[0], v[1], true).unwrap();
            let s = g.gelu(p);
            g.sum(s)
        });
    }

    #[test]
    fn batch_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trans_b in [false, true] {
            let b_shape = if trans_b { [2, 5, 4] } else { [2, 4, 5] };
            let inputs = vec![
                rand_tensor(&mut rng, &[2, 3, 4]),
                rand_tensor(&mut rng, &b_shape),
            ];
            check_grads(inputs, &|g, v| {
                let p = g.batch_matmul(v[0], v[1], trans_b).unwrap();
                let s = g.softmax_rows(p);
                let sq = g.mul(s, s).unwrap();
                g.sum(sq)
            });
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax_rows(x);
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0, 0.0]));
        let y = g.softmax_rows(x);
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-7 && d[1] < 1e-30 && d[2] < 1e-30);
    }

    #[test]
    fn softmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 5]),
            rand_tensor(&mut rng, &[3, 5]),
        ];
        check_grads(inputs, &|g, v| {
            let s = g.softmax_rows(v[0]);
            let p = g.mul(s, v[1]).unwrap();
            g.sum(p)
        });
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f32>::new();
        let gamma = g.constant(Tensor::vector(vec![1.0; 4]));
        let beta = g.constant(Tensor::vector(vec![0.0; 4]));
        let x = g.constant(Tensor::vector(vec![0.1; 4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gamma = g.constant(Tensor::vector(vec![1.0; 2]));
        let beta = g.constant(Tensor::vector(vec![0.0; 2]));
        let x = g.constant(Tensor::vector(vec![1.0, 3.0]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[3, 6]),
        ];
        check_grads(inputs, &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            let p = g.mul(y, v[3]).unwrap();
            g.sum(p)
        });
    }

    #[test]
    fn head_split_merge_gather_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let inputs = vec![
            rand_tensor(&mut rng, &[6, 4]),
            rand_tensor(&mut rng, &[6, 4]),
        ];
        check_grads(inputs, &|g, v| {
            let s = g.split_heads(v[0], 2, 3, 2).unwrap();
            let t = g.gelu(s);
            let m = g.merge_heads(t, 2, 3, 2).unwrap();
            let c = g.concat(m, v[1]).unwrap();
            let r = g.gather_rows(c, &[0, 5, 5, 2]).unwrap();
            let w = g.gather_rows(v[1], &[1, 1, 3, 4]).unwrap();
            let ww = g.concat(w, w).unwrap();
            let d = g.row_dot(r, ww).unwrap();
            let l = g.log_sigmoid(d);
            g.mean(l)
        });
    }

    #[test]
    fn split_merge_round_trip() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![6, 4], (0..24).map(|v| v as f32).collect()).unwrap());
        let s = g.split_heads(x, 2, 3, 2).unwrap();
        assert_eq!(g.shape(s), &[4, 3, 2]);
        let m = g.merge_heads(s, 2, 3, 2).unwrap();
        assert_eq!(g.value(m), g.value(x));
    }

    #[test]
    fn bias_and_bce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let inputs = vec![rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[3])];
        check_grads(inputs, &|g, v| {
            let y = g.add_bias(v[0], v[1]).unwrap();
            let y = g.scale(y, 2.5);
            let r = g.reshape(y, &[12]).unwrap();
            let labels: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
            let mut weights = vec![1.0; 12];
            weights[3] = 0.0;
            g.bce_with_logits(r, &labels, &weights).unwrap()
        });
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut g = Graph::<f32>::new();
        let w = g.leaf(Tensor::vector(vec![0.3, -2.0, 5.0]), true);
        let l = g.sum(w);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sigmoid_dot_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let wt = rand_tensor(&mut rng, &[1, 5]).cast::<f32>();
        let xt = rand_tensor(&mut rng, &[1, 5]).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let w = g.leaf(wt.clone(), true);
        let x = g.constant(xt.clone());
        let z = g.row_dot(w, x).unwrap();
        let s = g.sigmoid(z);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        let zv: f32 = wt.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        let sig = 1.0 / (1.0 + (-zv).exp());
        for (gw, xv) in grads.get(w).unwrap().data().iter().zip(xt.data()) {
            assert!((gw - sig * (1.0 - sig) * xv).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn replayed_tapes_give_identical_gradients() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(19);
            let mut g = Graph::<f32>::new();
            let a = g.leaf(rand_tensor(&mut rng, &[4, 8]).cast(), true);
            let b = g.leaf(rand_tensor(&mut rng, &[8, 3]).cast(), true);
            let p = g.matmul(a, b).unwrap();
            let s = g.softmax_rows(p);
            let l = g.log_sigmoid(s);
            let l = g.mean(l);
            let grads = g.backward(l).unwrap();
            (grads.get(a).unwrap(), grads.get(b).unwrap())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }
}
