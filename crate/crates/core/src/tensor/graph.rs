//! Append-only computation tape.
//!
//! Every op pushes one node whose inputs were pushed earlier, so the node
//! list is topologically ordered by construction and the backward pass is a
//! single reverse sweep.

use super::kernels::{gelu, gelu_grad, log_sigmoid, sigmoid};
use super::{matmul_raw, transpose_raw, Tensor};
use crate::error::{domain, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    MaskedSoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    LogSigmoid(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Leaves created with [`Graph::param`] receive
/// gradients; everything else is derived.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a `param` leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(domain(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let out = transpose_raw(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(domain(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a[r, c] + bias[c]` for every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if self.value(bias).numel() != c {
            return Err(domain(format!(
                "add_row: bias of {} values for {c} columns",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| gelu(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Rows of `a` selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if idx.is_empty() {
            return Err(domain("gather_rows with no indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(domain(format!("gather_rows index {i} out of {r} rows")));
            }
            data.extend_from_slice(&self.value(a).data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(idx.len(), c, data)?,
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| domain("concat_rows of nothing"))?;
        let (_, c) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(domain(format!("concat_rows: {pc} columns, expected {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(rows, c, data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Row-wise softmax over the entries where `allowed` is true. Disallowed
    /// entries (the `-inf` of an attention mask) come out as exactly 0; a row
    /// with nothing allowed is all zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, allowed: Vec<bool>) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if allowed.len() != r * c {
            return Err(domain("masked_softmax_rows: mask size mismatch"));
        }
        let x = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mask = &allowed[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let out = &mut data[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                if mask[j] {
                    out[j] = (row[j] - max).exp();
                    sum += out[j];
                }
            }
            out.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::MaskedSoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(super::kernels::log_softmax(
                &self.value(a).data()[i * c..(i + 1) * c],
            )?);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::LogSoftmaxRows(a), rg))
    }

    /// Vector of the entries `a[row, col]` for each listed coordinate.
    pub fn pick(&mut self, a: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if coords.is_empty() {
            return Err(domain("pick with no coordinates"));
        }
        let mut data = Vec::with_capacity(coords.len());
        for &(i, j) in coords {
            if i >= r || j >= c {
                return Err(domain(format!("pick ({i},{j}) outside {r}x{c}")));
            }
            data.push(self.value(a).data()[i * c + j]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data)?, Op::Pick(a, coords.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Elementwise `log σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| log_sigmoid(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::LogSigmoid(a), rg)
    }

    /// Sum of several scalars (or same-shape tensors).
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let mut it = parts.iter();
        let mut acc = *it.next().ok_or_else(|| domain("add_all of nothing"))?;
        for &p in it {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Propagates `d root / d leaf` into the gradient buffers of every
    /// `param` leaf. Repeated calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(domain(format!(
                "backward from non-scalar root of shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut tmp: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        tmp[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = tmp[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let slot = &mut self.grads[idx];
                    match slot {
                        Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => {
                            *slot = Some(Tensor {
                                shape: node.value.shape().to_vec(),
                                data: g,
                            })
                        }
                    }
                }
                op => {
                    for (input, contrib) in self.local_grads(op, &node.value, g)? {
                        if !self.nodes[input.0].requires_grad {
                            continue;
                        }
                        match &mut tmp[input.0] {
                            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn local_grads(&self, op: &Op, out: &Tensor, g: Vec<f64>) -> Result<Vec<(Var, Vec<f64>)>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2()?;
                let (_, n) = val(b).dims2()?;
                let mut res = Vec::with_capacity(2);
                if self.rg(*a) {
                    let bt = transpose_raw(val(b).data(), k, n);
                    res.push((*a, matmul_raw(&g, &bt, m, n, k)));
                }
                if self.rg(*b) {
                    let at = transpose_raw(val(a).data(), m, k);
                    res.push((*b, matmul_raw(&at, &g, k, m, n)));
                }
                res
            }
            Op::Transpose(a) => {
                let (r, c) = val(a).dims2()?;
                // out is c x r
                vec![(*a, transpose_raw(&g, c, r))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
            Op::Sub(a, b) => {
                let neg = g.iter().map(|x| -x).collect();
                vec![(*a, g), (*b, neg)]
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRow(a, bias) => {
                let c = val(bias).numel();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                }
                vec![(*a, g), (*bias, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Gelu(a) => {
                let ga = g
                    .iter()
                    .zip(val(a).data())
                    .map(|(gi, &x)| gi * gelu_grad(x))
                    .collect();
                vec![(*a, ga)]
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(a).dims2()?;
                let mut ga = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    let src = &g[k * c..(k + 1) * c];
                    ga[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
                vec![(*a, ga)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let n = val(p).numel();
                    res.push((*p, g[offset..offset + n].to_vec()));
                    offset += n;
                }
                res
            }
            Op::MaskedSoftmaxRows(a) => {
                let (r, c) = out.dims2()?;
                let y = out.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = out.dims2()?;
                let y = out.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        ga[i * c + j] = gr[j] - y[i * c + j].exp() * gsum;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Pick(a, coords) => {
                let (r, c) = val(a).dims2()?;
                let mut ga = vec![0.0; r * c];
                for (k, &(i, j)) in coords.iter().enumerate() {
                    ga[i * c + j] += g[k];
                }
                vec![(*a, ga)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(a).numel()])],
            Op::LogSigmoid(a) => {
                // d/dx log σ(x) = σ(-x)
                let ga = g
                    .iter()
                    .zip(val(a).data())
                    .map(|(gi, &x)| gi * sigmoid(-x))
                    .collect();
                vec![(*a, ga)]
            }
        })
    }
}
