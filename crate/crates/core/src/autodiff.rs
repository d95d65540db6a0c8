//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]; nodes only ever reference
//! earlier nodes, so the tape is always in topological order and
//! [`Tape::backward`] is a single reverse sweep. A fresh tape is built for
//! every forward pass.

use crate::error::{Error, Result};
use crate::tensor::{axis_blocks, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Tanh(Var),
    Sigmoid(Var),
    Softmax {
        a: Var,
        axis: usize,
    },
    Reduce {
        a: Var,
        axis: usize,
        mask: Option<Vec<bool>>,
        argmax: Vec<usize>,
        counts: Vec<usize>,
        kind: ReduceOp,
    },
    Sum(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Lookup {
        table: Var,
        indices: Vec<usize>,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph with per-node gradient slots.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `max(p, PROB_FLOOR)`, letting NaN through.
pub fn floor_prob(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.max(PROB_FLOOR)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input: gradients accumulate into it across `backward` calls.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient (masks, fixed data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`; zero when
    /// `v` is not on any path to it.
    pub fn grad(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.grads[v.0] {
            Some(g) => Tensor::new(value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    /// Moves the gradient buffer out, leaving the slot empty.
    pub fn take_grad(&mut self, v: Var) -> Vec<f64> {
        let n = self.nodes[v.0].value.len();
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n])
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ------------------------------------------------------------------
    // Linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    ///
    /// Operands are rank 2 (`[m, k] x [k, n]`) or rank 3 with a shared
    /// leading batch extent.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let dims = matmul_dims(&sa, &sb, ta, tb).ok_or_else(|| Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let MatDims { batch, m, k, n } = dims;
        let mut out = vec![0.0; batch * m * n];
        let (ars, acs) = if ta { (1, m) } else { (k, 1) };
        let (brs, bcs) = if tb { (1, k) } else { (n, 1) };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[bi * m * k..(bi + 1) * m * k],
                (ars, acs),
                &bv[bi * k * n..(bi + 1) * k * n],
                (brs, bcs),
                &mut out[bi * m * n..(bi + 1) * m * n],
                (n, 1),
            );
        }
        let mut shape = if sa.len() == 3 { vec![batch] } else { vec![] };
        shape.extend([m, n]);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let r = t.rank();
        if r < 2 {
            return Err(Error::Contract(format!(
                "transpose needs rank >= 2, got {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[r - 2], t.shape()[r - 1]);
        let batch = t.len() / (rows * cols);
        let mut out = vec![0.0; t.len()];
        for bi in 0..batch {
            let src = &t.data()[bi * rows * cols..];
            let dst = &mut out[bi * rows * cols..];
            for i in 0..rows {
                for j in 0..cols {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // ------------------------------------------------------------------
    // Pointwise

    /// Pointwise binary op. Operands broadcast numpy-style: the lower-rank
    /// shape is left-padded with ones, then any extent-1 axis repeats.
    pub fn elementwise(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::Dimension {
            op: "elementwise",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let out = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(av[ia], bv[ib]));
            out
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(t.shape(), out).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(t, Op::Scale { a, factor }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(t.shape(), out).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(t.shape(), out).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    // ------------------------------------------------------------------
    // Normalization and reductions

    /// Softmax along `axis`. Positions with `mask == false` are left out of
    /// the normalization and get exactly zero.
    pub fn softmax(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        check_axis(t.shape(), axis, "softmax")?;
        check_mask(t, mask)?;
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; t.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * n * inner + k * inner + i;
                let valid = |k: usize| mask.is_none_or(|m| m[idx(k)]);
                let mut max = f64::NEG_INFINITY;
                for k in (0..n).filter(|&k| valid(k)) {
                    max = max.max(x[idx(k)]);
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateMask {
                        op: "softmax",
                        slice: o * inner + i,
                    });
                }
                let mut sum = 0.0;
                for k in (0..n).filter(|&k| valid(k)) {
                    let e = (x[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in (0..n).filter(|&k| valid(k)) {
                    out[idx(k)] /= sum;
                }
            }
        }
        let t = Tensor::new(t.shape(), out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Softmax { a, axis }, rg))
    }

    /// Mean or max over `axis`, restricted to positions where `mask` is true.
    /// The reduced axis is removed from the shape. Max routes its gradient to
    /// the first maximal valid position.
    pub fn reduce(
        &mut self,
        kind: ReduceOp,
        a: Var,
        axis: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let t = self.value(a);
        check_axis(t.shape(), axis, "reduce")?;
        check_mask(t, mask)?;
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        let mut counts = vec![0; outer * inner];
        if kind == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let s = o * inner + i;
                let idx = |k: usize| o * n * inner + k * inner + i;
                let mut acc = match kind {
                    ReduceOp::Mean => 0.0,
                    ReduceOp::Max => f64::NEG_INFINITY,
                };
                let mut count = 0;
                for k in 0..n {
                    if !mask.is_none_or(|m| m[idx(k)]) {
                        continue;
                    }
                    let v = x[idx(k)];
                    match kind {
                        ReduceOp::Mean => acc += v,
                        ReduceOp::Max => {
                            if count == 0 || v > acc {
                                acc = v;
                                argmax[s] = k;
                            }
                        }
                    }
                    count += 1;
                }
                if count == 0 {
                    return Err(Error::DegenerateMask {
                        op: "reduce",
                        slice: s,
                    });
                }
                out[s] = match kind {
                    ReduceOp::Mean => acc / count as f64,
                    ReduceOp::Max => acc,
                };
                counts[s] = count;
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(
            t,
            Op::Reduce {
                a,
                axis,
                mask: mask.map(<[bool]>::to_vec),
                argmax,
                counts,
                kind,
            },
            rg,
        ))
    }

    pub fn mean(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axis, mask)
    }

    pub fn max(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.reduce(ReduceOp::Max, a, axis, mask)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    // ------------------------------------------------------------------
    // Structural

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis, "concat")?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_blocks(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Positions `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis(t.shape(), axis, "slice")?;
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::Index {
                index: start + len,
                extent: n,
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * n * inner + start * inner;
            out.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { a, axis, start }, rg))
    }

    /// Gathers rows of a `[V, d]` table. Output shape is `index_shape ++ [d]`.
    pub fn lookup(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Contract(format!(
                "lookup table must be rank 2, got {:?}",
                t.shape()
            )));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::Dimension {
                op: "lookup",
                lhs: index_shape.to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= v {
                return Err(Error::Index {
                    index: ix,
                    extent: v,
                });
            }
            out.extend_from_slice(&t.data()[ix * d..(ix + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let rg = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Lookup {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-ln(max(p[label], PROB_FLOOR))` for `[B, C]` probabilities.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(probs);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = t.shape()[1];
        let mut total = 0.0;
        for (row, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Index {
                    index: label,
                    extent: c,
                });
            }
            total -= floor_prob(t.data()[row * c + label]).ln();
        }
        let loss = total / labels.len() as f64;
        let rg = self.needs(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // Reverse sweep

    /// Populates gradients of `loss` with respect to every node. Gradients of
    /// parameters accumulate across calls; intermediate gradients are reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        let Tape { nodes, grads } = self;
        accumulate(nodes, grads, loss, |g| g[0] += 1.0);

        for i in (0..=loss.0).rev() {
            if matches!(nodes[i].op, Op::Leaf) || !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (ta, tb) = (*ta, *tb);
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let MatDims { batch, m, k, n } = matmul_dims(sa, sb, ta, tb).expect("checked");
            let (ars, acs) = if ta { (1, m) } else { (k, 1) };
            let (brs, bcs) = if tb { (1, k) } else { (n, 1) };
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            // dA = dC . B^T, written through A's (possibly transposed) layout.
            accumulate(nodes, grads, *a, |ga| {
                for bi in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        (n, 1),
                        &bv[bi * k * n..(bi + 1) * k * n],
                        (bcs, brs),
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        (ars, acs),
                    );
                }
            });
            // dB = A^T . dC
            accumulate(nodes, grads, *b, |gb| {
                for bi in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &av[bi * m * k..(bi + 1) * m * k],
                        (acs, ars),
                        &g[bi * m * n..(bi + 1) * m * n],
                        (n, 1),
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        (brs, bcs),
                    );
                }
            });
        }
        Op::Binary { kind, a, b } => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let out_shape = node.value.shape();
            let same = sa == sb;
            accumulate(nodes, grads, *a, |ga| {
                let mut f = |o: usize, ia: usize, ib: usize| {
                    ga[ia] += match kind {
                        BinaryOp::Add | BinaryOp::Sub => g[o],
                        BinaryOp::Mul => g[o] * bv[ib],
                    }
                };
                if same {
                    (0..g.len()).for_each(|o| f(o, o, o));
                } else {
                    for_each_broadcast(out_shape, sa, sb, f);
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                let mut f = |o: usize, ia: usize, ib: usize| {
                    gb[ib] += match kind {
                        BinaryOp::Add => g[o],
                        BinaryOp::Sub => -g[o],
                        BinaryOp::Mul => g[o] * av[ia],
                    }
                };
                if same {
                    (0..g.len()).for_each(|o| f(o, o, o));
                } else {
                    for_each_broadcast(out_shape, sa, sb, f);
                }
            });
        }
        Op::Scale { a, factor } => {
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * factor)
            });
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, |ga| {
                for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *x += gi * (1.0 - yi * yi);
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            accumulate(nodes, grads, *a, |ga| {
                for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *x += gi * yi * (1.0 - yi);
                }
            });
        }
        Op::Softmax { a, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = axis_blocks(node.value.shape(), *axis);
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| y[idx(k)] * g[idx(k)]).sum();
                        for k in 0..n {
                            ga[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            });
        }
        Op::Reduce {
            a,
            axis,
            mask,
            argmax,
            counts,
            kind,
        } => {
            let (outer, n, inner) = axis_blocks(nodes[a.0].value.shape(), *axis);
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let s = o * inner + i;
                        let idx = |k: usize| o * n * inner + k * inner + i;
                        match kind {
                            ReduceOp::Mean => {
                                let share = g[s] / counts[s] as f64;
                                for k in 0..n {
                                    if mask.as_ref().is_none_or(|m| m[idx(k)]) {
                                        ga[idx(k)] += share;
                                    }
                                }
                            }
                            ReduceOp::Max => ga[idx(argmax[s])] += g[s],
                        }
                    }
                }
            });
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().for_each(|x| *x += g[0])
            });
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_blocks(node.value.shape(), *axis);
            let mut offset = 0;
            for v in inputs {
                let n = nodes[v.0].value.shape()[*axis];
                accumulate(nodes, grads, *v, |gv| {
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        let dst = o * n * inner;
                        for j in 0..n * inner {
                            gv[dst + j] += g[src + j];
                        }
                    }
                });
                offset += n;
            }
        }
        Op::Slice { a, axis, start } => {
            let (outer, n, inner) = axis_blocks(nodes[a.0].value.shape(), *axis);
            let len = node.value.shape()[*axis];
            accumulate(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        ga[dst + j] += g[src + j];
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let s = node.value.shape();
            let r = s.len();
            let (rows, cols) = (s[r - 2], s[r - 1]);
            let batch = g.len() / (rows * cols);
            accumulate(nodes, grads, *a, |ga| {
                for bi in 0..batch {
                    let base = bi * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[base + j * rows + i] += g[base + i * cols + j];
                        }
                    }
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi)
            });
        }
        Op::Lookup { table, indices } => {
            let d = nodes[table.0].value.shape()[1];
            accumulate(nodes, grads, *table, |gt| {
                for (pos, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[ix * d + j] += g[pos * d + j];
                    }
                }
            });
        }
        Op::CrossEntropy { probs, labels } => {
            let p = nodes[probs.0].value.data();
            let c = nodes[probs.0].value.shape()[1];
            let scale = g[0] / labels.len() as f64;
            accumulate(nodes, grads, *probs, |gp| {
                for (row, &label) in labels.iter().enumerate() {
                    let pi = p[row * c + label];
                    if pi > PROB_FLOOR {
                        gp[row * c + label] -= scale / pi;
                    }
                }
            });
        }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.len();
    f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn check_mask(t: &Tensor, mask: Option<&[bool]>) -> Result<()> {
    match mask {
        Some(m) if m.len() != t.len() => Err(Error::Dimension {
            op: "mask",
            lhs: t.shape().to_vec(),
            rhs: vec![m.len()],
        }),
        _ => Ok(()),
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Option<MatDims> {
    if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
        return None;
    }
    let r = sa.len();
    let batch = if r == 3 {
        if sa[0] != sb[0] {
            return None;
        }
        sa[0]
    } else {
        1
    };
    let (m, k) = if ta {
        (sa[r - 1], sa[r - 2])
    } else {
        (sa[r - 2], sa[r - 1])
    };
    let (k2, n) = if tb {
        (sb[r - 1], sb[r - 2])
    } else {
        (sb[r - 2], sb[r - 1])
    };
    (k == k2).then_some(MatDims { batch, m, k, n })
}

/// `c += a . b` for strided `m x k` and `k x n` views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (ars, acs): (usize, usize),
    b: &[f64],
    (brs, bcs): (usize, usize),
    c: &mut [f64],
    (crs, ccs): (usize, usize),
) {
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, ars, acs) < a.len());
    assert!(last(k, n, brs, bcs) < b.len());
    assert!(last(m, n, crs, ccs) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            ars as isize,
            acs as isize,
            b.as_ptr(),
            brs as isize,
            bcs as isize,
            1.0,
            c.as_mut_ptr(),
            crs as isize,
            ccs as isize,
        );
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        std::iter::repeat_n(1, r - s.len())
            .chain(s.iter().copied())
            .collect()
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast result.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let r = out_shape.len();
    let strides = |s: &[usize]| -> Vec<usize> {
        let padded: Vec<usize> = std::iter::repeat_n(1, r - s.len())
            .chain(s.iter().copied())
            .collect();
        let mut st = vec![0; r];
        let mut acc = 1;
        for d in (0..r).rev() {
            st[d] = if padded[d] == 1 && out_shape[d] != 1 {
                0
            } else {
                acc
            };
            acc *= padded[d];
        }
        st
    };
    let (st_a, st_b) = (strides(sa), strides(sb));
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0; r];
    let (mut ia, mut ib) = (0, 0);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..r).rev() {
            idx[d] += 1;
            ia += st_a[d];
            ib += st_b[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= st_a[d] * idx[d];
            ib -= st_b[d] * idx[d];
            idx[d] = 0;
        }
    }
}
