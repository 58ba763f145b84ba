//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Nodes only reference earlier nodes, so insertion order is a topological
//! order and a single reverse sweep computes all gradients. Gradients flow
//! only into nodes marked as requiring them; constants (e.g. frozen base
//! weights, detached base logits) are skipped, which is also what keeps the
//! measured backward FLOPs of a frozen matmul at one matmul instead of two.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use rand::Rng;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E: Scalar> {
    Leaf,
    Constant,
    /// `[m,k] x [k,n]`
    Matmul,
    /// `[m,k] x [n,k]^T`
    MatmulNt,
    /// `[g,m,k] x [g,k,n]` batched over the leading dim
    BatchMatmul,
    /// `[g,m,k] x [g,n,k]^T` batched over the leading dim
    BatchMatmulNt,
    Add,
    Mul,
    Scale(E),
    Silu,
    /// inputs: `[x [n,d], gain [d]]`
    RmsNorm { eps: f64 },
    /// input: table `[V,d]`; output `[ids.len(), d]`
    Gather { ids: Vec<u32> },
    Reshape,
    /// `[b,d1,d2,d3] -> [b,d2,d1,d3]`
    SwapMiddle { b: usize, d1: usize, d2: usize, d3: usize },
    RowSoftmax,
    /// `[g,w,w]`: softmax over j <= i per row i, zero above the diagonal
    CausalSoftmax,
    /// input logits `[n,V]` -> scalar mean NLL over masked rows
    MaskedCrossEntropy { targets: Vec<u32>, mask: Vec<bool> },
    /// inputs: `[adapter_logits [n,V], base_logits [n,V]]` -> scalar mean KL
    /// over masked rows; gradient flows through adapter logits only when the
    /// base side is a constant
    MaskedKl { mask: Vec<bool> },
    /// pre-scaled keep mask (0 or 1/(1-p))
    Dropout { mask: Vec<E> },
    Sum,
}

struct Node<E: Scalar> {
    op: Op<E>,
    inputs: Vec<Var>,
    value: Tensor<E>,
    needs_grad: bool,
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    macs: Arc<AtomicU64>,
}

/// Gradients for every node that received one during a backward sweep.
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient of the root w.r.t. `v`; zeros if `v` was unreachable.
    pub fn grad(&self, v: Var) -> Tensor<E> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Share a multiply-add counter (FLOPs ledger) with this tape.
    pub fn with_counter(macs: Arc<AtomicU64>) -> Self {
        Self {
            nodes: Vec::new(),
            macs,
        }
    }

    pub fn macs(&self) -> u64 {
        self.macs.load(Ordering::Relaxed)
    }

    #[inline]
    fn count_macs(&self, n: u64) {
        self.macs.fetch_add(n, Ordering::Relaxed);
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<E>, inputs: Vec<Var>, value: Tensor<E>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite("tape op output".into()));
        }
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<E>) -> Result<Var> {
        self.push(Op::Leaf, vec![], value)
    }

    /// Non-trainable input; backward never enters it.
    pub fn constant(&mut self, value: Tensor<E>) -> Result<Var> {
        self.push(Op::Constant, vec![], value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, macs) = self.value(a).matmul(self.value(b))?;
        self.count_macs(macs);
        self.push(Op::Matmul, vec![a, b], out)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, macs) = self.value(a).matmul_nt(self.value(b))?;
        self.count_macs(macs);
        self.push(Op::MatmulNt, vec![a, b], out)
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (g, m, k) = batch_dims(self.value(a).shape(), "batch_matmul lhs")?;
        let (g2, k2, n) = batch_dims(self.value(b).shape(), "batch_matmul rhs")?;
        if g != g2 || k != k2 {
            return Err(Error::ShapeMismatch {
                context: "batch_matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![E::zero(); g * m * n];
        for gi in 0..g {
            matmul_into(
                &self.value(a).data()[gi * m * k..(gi + 1) * m * k],
                &self.value(b).data()[gi * k * n..(gi + 1) * k * n],
                &mut out[gi * m * n..(gi + 1) * m * n],
                m,
                k,
                n,
                false,
            );
        }
        self.count_macs((g * m * k * n) as u64);
        let out = Tensor::new(vec![g, m, n], out)?;
        self.push(Op::BatchMatmul, vec![a, b], out)
    }

    pub fn batch_matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (g, m, k) = batch_dims(self.value(a).shape(), "batch_matmul_nt lhs")?;
        let (g2, n, k2) = batch_dims(self.value(b).shape(), "batch_matmul_nt rhs")?;
        if g != g2 || k != k2 {
            return Err(Error::ShapeMismatch {
                context: "batch_matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![E::zero(); g * m * n];
        for gi in 0..g {
            matmul_nt_into(
                &self.value(a).data()[gi * m * k..(gi + 1) * m * k],
                &self.value(b).data()[gi * n * k..(gi + 1) * n * k],
                &mut out[gi * m * n..(gi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.count_macs((g * m * k * n) as u64);
        let out = Tensor::new(vec![g, m, n], out)?;
        self.push(Op::BatchMatmulNt, vec![a, b], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                context: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        self.push(Op::Add, vec![a, b], out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                context: "mul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        self.push(Op::Mul, vec![a, b], out)
    }

    pub fn scale(&mut self, a: Var, s: E) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push(Op::Scale(s), vec![a], out)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(silu);
        self.push(Op::Silu, vec![a], out)
    }

    /// RMS normalization over the last dim with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::InvalidArgument("rms_norm: 0-d input".into())
        })?;
        if self.value(gain).shape() != [d] {
            return Err(Error::ShapeMismatch {
                context: "rms_norm gain",
                lhs: shape,
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let n = self.value(x).len() / d;
        let mut out = vec![E::zero(); n * d];
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let ms: f64 =
                row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / d as f64;
            let inv = E::of_f64(1.0 / (ms + eps).sqrt());
            for j in 0..d {
                out[i * d + j] = row[j] * inv * gs[j];
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(Op::RmsNorm { eps }, vec![x, gain], out)
    }

    /// Row gather from a `[V,d]` table (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let shape = self.value(table).shape();
        if shape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "gather: expected 2-d table, got {shape:?}"
            )));
        }
        let (v, d) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if (id as usize) >= v {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: v,
                });
            }
            out.extend_from_slice(
                &self.value(table).data()[id as usize * d..(id as usize + 1) * d],
            );
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            Op::Gather { ids: ids.to_vec() },
            vec![table],
            out,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        self.push(Op::Reshape, vec![a], out)
    }

    /// `[b,d1,d2,d3] -> [b,d2,d1,d3]` (attention head split/merge).
    pub fn swap_middle(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "swap_middle: expected 4-d tensor, got {s:?}"
            )));
        }
        let (b, d1, d2, d3) = (s[0], s[1], s[2], s[3]);
        let out = swap_middle_data(self.value(a).data(), b, d1, d2, d3);
        let out = Tensor::new(vec![b, d2, d1, d3], out)?;
        self.push(Op::SwapMiddle { b, d1, d2, d3 }, vec![a], out)
    }

    /// Numerically stable softmax over the last dimension.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let d = *shape.last().ok_or_else(|| {
            Error::InvalidArgument("row_softmax: 0-d input".into())
        })?;
        if d == 0 {
            return Err(Error::InvalidArgument(
                "row_softmax: empty last dimension".into(),
            ));
        }
        let n = self.value(a).len() / d;
        let mut out = vec![E::zero(); n * d];
        for i in 0..n {
            softmax_row(
                &self.value(a).data()[i * d..(i + 1) * d],
                &mut out[i * d..(i + 1) * d],
            );
        }
        let out = Tensor::new(shape, out)?;
        self.push(Op::RowSoftmax, vec![a], out)
    }

    /// Causal attention softmax over `[g,w,w]` score blocks.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::InvalidArgument(format!(
                "causal_softmax: expected [g,w,w], got {s:?}"
            )));
        }
        let (g, w) = (s[0], s[1]);
        let xs = self.value(a).data();
        let mut out = vec![E::zero(); g * w * w];
        for gi in 0..g {
            for i in 0..w {
                let base = gi * w * w + i * w;
                softmax_row(&xs[base..base + i + 1], &mut out[base..base + i + 1]);
            }
        }
        let out = Tensor::new(vec![g, w, w], out)?;
        self.push(Op::CausalSoftmax, vec![a], out)
    }

    /// Mean of `-log softmax(logits)[target]` over masked rows.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "masked_cross_entropy: expected [n,V] logits, got {s:?}"
            )));
        }
        let (n, v) = (s[0], s[1]);
        if targets.len() != n || mask.len() != n {
            return Err(Error::InvalidArgument(format!(
                "masked_cross_entropy: {n} rows but {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::InvalidArgument(
                "masked_cross_entropy: all-zero mask (mean undefined)".into(),
            ));
        }
        let xs = self.value(logits).data();
        let mut total = 0.0f64;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i] as usize;
            if t >= v {
                return Err(Error::TokenOutOfRange {
                    id: targets[i],
                    vocab: v,
                });
            }
            let row = &xs[i * v..(i + 1) * v];
            total -= log_softmax_at(row, t);
        }
        let out = Tensor::scalar(E::of_f64(total / count as f64));
        self.push(
            Op::MaskedCrossEntropy {
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            vec![logits],
            out,
        )
    }

    /// Mean over masked rows of `KL(softmax(adapter) || softmax(base))`,
    /// full-vocabulary sum in log space.
    pub fn masked_kl(&mut self, adapter: Var, base: Var, mask: &[bool]) -> Result<Var> {
        let s = self.value(adapter).shape().to_vec();
        if s != self.value(base).shape() {
            return Err(Error::ShapeMismatch {
                context: "masked_kl",
                lhs: s,
                rhs: self.value(base).shape().to_vec(),
            });
        }
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "masked_kl: expected [n,V] logits, got {s:?}"
            )));
        }
        let (n, v) = (s[0], s[1]);
        if mask.len() != n {
            return Err(Error::InvalidArgument(format!(
                "masked_kl: {n} rows but {} mask entries",
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::InvalidArgument(
                "masked_kl: all-zero mask (mean undefined)".into(),
            ));
        }
        let total = masked_kl_value(
            self.value(adapter).data(),
            self.value(base).data(),
            mask,
            n,
            v,
        );
        let out = Tensor::scalar(E::of_f64(total / count as f64));
        self.push(
            Op::MaskedKl {
                mask: mask.to_vec(),
            },
            vec![adapter, base],
            out,
        )
    }

    /// Inverted dropout on the adapter input path; identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} outside [0,1)"
            )));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = E::of_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..self.value(a).len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    E::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&x, &m)| x * m)
                .collect(),
        )?;
        self.push(Op::Dropout { mask }, vec![a], out)
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        let out = Tensor::scalar(E::of_f64(total));
        self.push(Op::Sum, vec![a], out)
    }

    /// Reverse sweep from a scalar root; fills gradients for every node that
    /// requires them. Deterministic for a fixed graph.
    pub fn backward(&self, root: Var) -> Result<Gradients<E>> {
        if !self.value(root).shape().is_empty() && self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(E::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<E>>],
        v: Var,
        g: Tensor<E>,
    ) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let input = |i: usize| self.value(node.inputs[i]);
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if self.nodes[a.0].needs_grad {
                    let (ga, macs) = g.matmul_nt(input(1))?;
                    self.count_macs(macs);
                    self.accumulate(grads, a, ga)?;
                }
                if self.nodes[b.0].needs_grad {
                    let (gb, macs) = input(0).matmul_tn(g)?;
                    self.count_macs(macs);
                    self.accumulate(grads, b, gb)?;
                }
            }
            Op::MatmulNt => {
                // out = a x b^T
                let (a, b) = (node.inputs[0], node.inputs[1]);
                if self.nodes[a.0].needs_grad {
                    let (ga, macs) = g.matmul(input(1))?;
                    self.count_macs(macs);
                    self.accumulate(grads, a, ga)?;
                }
                if self.nodes[b.0].needs_grad {
                    let (gb, macs) = g.matmul_tn(input(0))?;
                    self.count_macs(macs);
                    self.accumulate(grads, b, gb)?;
                }
            }
            Op::BatchMatmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (gd, m, k) = batch_dims(input(0).shape(), "bmm grad")?;
                let n = input(1).shape()[2];
                if self.nodes[a.0].needs_grad {
                    // grad_a = g x b^T per batch; the nt kernel with b viewed
                    // as [k,n] yields exactly g x b^T
                    let mut ga = vec![E::zero(); gd * m * k];
                    for gi in 0..gd {
                        matmul_nt_into(
                            &g.data()[gi * m * n..(gi + 1) * m * n],
                            &input(1).data()[gi * k * n..(gi + 1) * k * n],
                            &mut ga[gi * m * k..(gi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.count_macs((gd * m * n * k) as u64);
                    self.accumulate(grads, a, Tensor::new(vec![gd, m, k], ga)?)?;
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![E::zero(); gd * k * n];
                    for gi in 0..gd {
                        matmul_tn_into(
                            &input(0).data()[gi * m * k..(gi + 1) * m * k],
                            &g.data()[gi * m * n..(gi + 1) * m * n],
                            &mut gb[gi * k * n..(gi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.count_macs((gd * m * k * n) as u64);
                    self.accumulate(grads, b, Tensor::new(vec![gd, k, n], gb)?)?;
                }
            }
            Op::BatchMatmulNt => {
                // out[gi] = a[gi] x b[gi]^T, a [g,m,k], b [g,n,k]
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (gd, m, k) = batch_dims(input(0).shape(), "bmm_nt grad")?;
                let n = input(1).shape()[1];
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![E::zero(); gd * m * k];
                    for gi in 0..gd {
                        matmul_into(
                            &g.data()[gi * m * n..(gi + 1) * m * n],
                            &input(1).data()[gi * n * k..(gi + 1) * n * k],
                            &mut ga[gi * m * k..(gi + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                        );
                    }
                    self.count_macs((gd * m * n * k) as u64);
                    self.accumulate(grads, a, Tensor::new(vec![gd, m, k], ga)?)?;
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![E::zero(); gd * n * k];
                    for gi in 0..gd {
                        matmul_tn_into(
                            &g.data()[gi * m * n..(gi + 1) * m * n],
                            &input(0).data()[gi * m * k..(gi + 1) * m * k],
                            &mut gb[gi * n * k..(gi + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.count_macs((gd * m * n * k) as u64);
                    self.accumulate(grads, b, Tensor::new(vec![gd, n, k], gb)?)?;
                }
            }
            Op::Add => {
                self.accumulate(grads, node.inputs[0], g.clone())?;
                self.accumulate(grads, node.inputs[1], g.clone())?;
            }
            Op::Mul => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(input(1).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect(),
                )?;
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(input(0).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect(),
                )?;
                self.accumulate(grads, node.inputs[0], ga)?;
                self.accumulate(grads, node.inputs[1], gb)?;
            }
            Op::Scale(s) => {
                let s = *s;
                self.accumulate(grads, node.inputs[0], g.map(|x| x * s))?;
            }
            Op::Silu => {
                let gx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(input(0).data())
                        .map(|(&gv, &x)| gv * silu_grad(x))
                        .collect(),
                )?;
                self.accumulate(grads, node.inputs[0], gx)?;
            }
            Op::RmsNorm { eps } => {
                let d = *input(0).shape().last().unwrap();
                let n = input(0).len() / d;
                let xs = input(0).data();
                let gains = input(1).data();
                let mut gx = vec![E::zero(); n * d];
                let mut gg = vec![E::zero(); d];
                for i in 0..n {
                    let row = &xs[i * d..(i + 1) * d];
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let ms: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()
                        / d as f64;
                    let r = (ms + eps).sqrt();
                    let inv = 1.0 / r;
                    // s = sum_j g_j * gain_j * x_j
                    let s: f64 = (0..d)
                        .map(|j| grow[j].as_f64() * gains[j].as_f64() * row[j].as_f64())
                        .sum();
                    let c = s / (d as f64 * r * r * r);
                    for j in 0..d {
                        gx[i * d + j] = E::of_f64(
                            grow[j].as_f64() * gains[j].as_f64() * inv
                                - row[j].as_f64() * c,
                        );
                        gg[j] = gg[j]
                            + E::of_f64(grow[j].as_f64() * row[j].as_f64() * inv);
                    }
                }
                self.accumulate(grads, node.inputs[0], Tensor::new(
                    input(0).shape().to_vec(),
                    gx,
                )?)?;
                self.accumulate(grads, node.inputs[1], Tensor::new(vec![d], gg)?)?;
            }
            Op::Gather { ids } => {
                let shape = input(0).shape().to_vec();
                let d = shape[1];
                let mut gt = vec![E::zero(); shape[0] * d];
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g.data()[row * d..(row + 1) * d];
                    let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                    for (o, &s) in dst.iter_mut().zip(src.iter()) {
                        *o = *o + s;
                    }
                }
                self.accumulate(grads, node.inputs[0], Tensor::new(shape, gt)?)?;
            }
            Op::Reshape => {
                let back = g.reshaped(input(0).shape().to_vec())?;
                self.accumulate(grads, node.inputs[0], back)?;
            }
            Op::SwapMiddle { b, d1, d2, d3 } => {
                let back = swap_middle_data(g.data(), *b, *d2, *d1, *d3);
                self.accumulate(grads, node.inputs[0], Tensor::new(
                    vec![*b, *d1, *d2, *d3],
                    back,
                )?)?;
            }
            Op::RowSoftmax => {
                let d = *node.value.shape().last().unwrap();
                let n = node.value.len() / d;
                let ps = node.value.data();
                let mut gx = vec![E::zero(); n * d];
                for i in 0..n {
                    softmax_backward_row(
                        &ps[i * d..(i + 1) * d],
                        &g.data()[i * d..(i + 1) * d],
                        &mut gx[i * d..(i + 1) * d],
                    );
                }
                self.accumulate(grads, node.inputs[0], Tensor::new(
                    input(0).shape().to_vec(),
                    gx,
                )?)?;
            }
            Op::CausalSoftmax => {
                let w = node.value.shape()[1];
                let gd = node.value.shape()[0];
                let ps = node.value.data();
                let mut gx = vec![E::zero(); gd * w * w];
                for gi in 0..gd {
                    for i in 0..w {
                        let base = gi * w * w + i * w;
                        softmax_backward_row(
                            &ps[base..base + i + 1],
                            &g.data()[base..base + i + 1],
                            &mut gx[base..base + i + 1],
                        );
                    }
                }
                self.accumulate(grads, node.inputs[0], Tensor::new(
                    vec![gd, w, w],
                    gx,
                )?)?;
            }
            Op::MaskedCrossEntropy { targets, mask } => {
                let v = input(0).shape()[1];
                let n = input(0).shape()[0];
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let scale = g.item().as_f64() / count;
                let xs = input(0).data();
                let mut gx = vec![E::zero(); n * v];
                let mut probs = vec![E::zero(); v];
                for i in 0..n {
                    if !mask[i] {
                        continue;
                    }
                    softmax_row(&xs[i * v..(i + 1) * v], &mut probs);
                    let t = targets[i] as usize;
                    for j in 0..v {
                        let p = probs[j].as_f64();
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gx[i * v + j] = E::of_f64(scale * (p - onehot));
                    }
                }
                self.accumulate(grads, node.inputs[0], Tensor::new(
                    vec![n, v],
                    gx,
                )?)?;
            }
            Op::MaskedKl { mask } => {
                // d/da_u KL(p||q) = p_u (log p_u - log q_u - KL_row)
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let v = input(0).shape()[1];
                let n = input(0).shape()[0];
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let scale = g.item().as_f64() / count;
                if self.nodes[a.0].needs_grad {
                    let xs = input(0).data();
                    let qs = input(1).data();
                    let mut gx = vec![E::zero(); n * v];
                    let mut lp = vec![0.0f64; v];
                    let mut lq = vec![0.0f64; v];
                    for i in 0..n {
                        if !mask[i] {
                            continue;
                        }
                        log_softmax_row(&xs[i * v..(i + 1) * v], &mut lp);
                        log_softmax_row(&qs[i * v..(i + 1) * v], &mut lq);
                        let kl_row: f64 =
                            (0..v).map(|j| lp[j].exp() * (lp[j] - lq[j])).sum();
                        for j in 0..v {
                            let p = lp[j].exp();
                            gx[i * v + j] =
                                E::of_f64(scale * p * (lp[j] - lq[j] - kl_row));
                        }
                    }
                    self.accumulate(grads, a, Tensor::new(vec![n, v], gx)?)?;
                }
                if self.nodes[b.0].needs_grad {
                    // d/db_u KL(p||q) = q_u - p_u (per masked row, / count)
                    let xs = input(0).data();
                    let qs = input(1).data();
                    let mut gx = vec![E::zero(); n * v];
                    let mut p = vec![E::zero(); v];
                    let mut q = vec![E::zero(); v];
                    for i in 0..n {
                        if !mask[i] {
                            continue;
                        }
                        softmax_row(&xs[i * v..(i + 1) * v], &mut p);
                        softmax_row(&qs[i * v..(i + 1) * v], &mut q);
                        for j in 0..v {
                            gx[i * v + j] = E::of_f64(
                                scale * (q[j].as_f64() - p[j].as_f64()),
                            );
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(vec![n, v], gx)?)?;
                }
            }
            Op::Dropout { mask } => {
                let gx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(mask.iter())
                        .map(|(&gv, &m)| gv * m)
                        .collect(),
                )?;
                self.accumulate(grads, node.inputs[0], gx)?;
            }
            Op::Sum => {
                let gv = g.item();
                self.accumulate(
                    grads,
                    node.inputs[0],
                    Tensor::full(input(0).shape(), gv),
                )?;
            }
        }
        Ok(())
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn batch_dims(shape: &[usize], context: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "{context}: expected 3-d tensor, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

fn swap_middle_data<E: Scalar>(
    data: &[E],
    b: usize,
    d1: usize,
    d2: usize,
    d3: usize,
) -> Vec<E> {
    let mut out = vec![E::zero(); b * d1 * d2 * d3];
    for bi in 0..b {
        for i in 0..d1 {
            for j in 0..d2 {
                let src = ((bi * d1 + i) * d2 + j) * d3;
                let dst = ((bi * d2 + j) * d1 + i) * d3;
                out[dst..dst + d3].copy_from_slice(&data[src..src + d3]);
            }
        }
    }
    out
}

#[inline]
fn silu<E: Scalar>(x: E) -> E {
    let xf = x.as_f64();
    E::of_f64(xf / (1.0 + (-xf).exp()))
}

#[inline]
fn silu_grad<E: Scalar>(x: E) -> E {
    let xf = x.as_f64();
    let s = 1.0 / (1.0 + (-xf).exp());
    E::of_f64(s * (1.0 + xf * (1.0 - s)))
}

/// Max-subtracted softmax of `row` into `out`.
pub(crate) fn softmax_row<E: Scalar>(row: &[E], out: &mut [E]) {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        let e = (x.as_f64() - max).exp();
        *o = E::of_f64(e);
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o = E::of_f64(o.as_f64() * inv);
    }
}

pub(crate) fn log_softmax_row<E: Scalar>(row: &[E], out: &mut [f64]) {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|v| (v.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        *o = x.as_f64() - lse;
    }
}

pub(crate) fn log_softmax_at<E: Scalar>(row: &[E], idx: usize) -> f64 {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|v| (v.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row[idx].as_f64() - lse
}

/// Sum over masked rows of `KL(softmax(p_logits) || softmax(q_logits))`.
pub(crate) fn masked_kl_value<E: Scalar>(
    p_logits: &[E],
    q_logits: &[E],
    mask: &[bool],
    n: usize,
    v: usize,
) -> f64 {
    let mut lp = vec![0.0f64; v];
    let mut lq = vec![0.0f64; v];
    let mut total = 0.0f64;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        log_softmax_row(&p_logits[i * v..(i + 1) * v], &mut lp);
        log_softmax_row(&q_logits[i * v..(i + 1) * v], &mut lq);
        total += (0..v).map(|j| lp[j].exp() * (lp[j] - lq[j])).sum::<f64>();
    }
    total
}

fn softmax_backward_row<E: Scalar>(p: &[E], g: &[E], out: &mut [E]) {
    let dot: f64 = p
        .iter()
        .zip(g.iter())
        .map(|(&pv, &gv)| pv.as_f64() * gv.as_f64())
        .sum();
    for ((o, &pv), &gv) in out.iter_mut().zip(p.iter()).zip(g.iter()) {
        *o = E::of_f64(pv.as_f64() * (gv.as_f64() - dot));
    }
}
