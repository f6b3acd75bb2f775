use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, two_d, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    AddRow(Var, Var),
    NormalizeRows(Var, f64),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    KlRows(Var, Var),
    SelectRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Define-by-run record of tensor operations.
///
/// Nodes are appended in evaluation order, so every node's parents precede
/// it and a single reverse sweep visits each node once. Gradients are kept
/// only for leaves created with [`Tape::param`]; they accumulate across
/// calls to [`Tape::backward`] until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    t.dims2().unwrap_or((1, t.len()))
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

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Result<Var> {
        Ok(self.constant(Tensor::scalar(value)?))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a value into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &'static str) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::KlRows(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::NormalizeRows(a, _)
            | Op::SoftmaxRows(a, _)
            | Op::LogSoftmaxRows(a, _)
            | Op::SelectRows(a, _)
            | Op::SliceCols(a, _, _)
            | Op::Reshape(a) => self.nodes[a.0].requires_grad,
        };
        self.nodes.push(Node {
            value: Tensor::from_parts_unchecked(shape, data),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = two_d(av, "matmul")?;
        let (k2, n) = two_d(bv, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = two_d(av, "transpose")?;
        let d = av.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(a), "transpose")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok((av.shape().to_vec(), out))
        } else if bv.is_scalar() {
            let y = bv.item();
            Ok((av.shape().to_vec(), av.data().iter().map(|&x| f(x, y)).collect()))
        } else if av.is_scalar() {
            let x = av.item();
            Ok((bv.shape().to_vec(), bv.data().iter().map(|&y| f(x, y)).collect()))
        } else {
            Err(Error::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(s, d, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(s, d, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(s, d, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x * factor).collect();
        self.push(av.shape().to_vec(), out, Op::Scale(a, factor), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(av.shape().to_vec(), out, Op::Relu(a), "relu")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = av.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::LogDomain { value: bad });
        }
        let out = av.data().iter().map(|x| x.ln()).collect();
        self.push(av.shape().to_vec(), out, Op::Log(a), "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x.exp()).collect();
        self.push(av.shape().to_vec(), out, Op::Exp(a), "exp")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![], vec![s], Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Adds the vector `b[n]` to every row of `x[m×n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (m, n) = two_d(xv, "add_row")?;
        if bv.len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let bd = bv.data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bd) {
                *o += bb;
            }
        }
        self.push(vec![m, n], out, Op::AddRow(x, b), "add_row")
    }

    /// Divides each row by `max(‖row‖₂, eps)`. A 1-D input is one row.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        let (_, c) = rows_cols(av);
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|x| *x /= n);
        }
        self.push(av.shape().to_vec(), out, Op::NormalizeRows(a, eps), "normalize_rows")
    }

    /// Row-wise `softmax(x / temperature)`, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let av = self.value(a);
        let (_, c) = rows_cols(av);
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row, temperature);
        }
        self.push(av.shape().to_vec(), out, Op::SoftmaxRows(a, temperature), "softmax")
    }

    /// Row-wise `log softmax(x / temperature)`.
    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let av = self.value(a);
        let (_, c) = rows_cols(av);
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)) / temperature;
            let lse = row.iter().map(|&x| (x / temperature - max).exp()).sum::<f64>().ln() + max;
            row.iter_mut().for_each(|x| *x = *x / temperature - lse);
        }
        self.push(av.shape().to_vec(), out, Op::LogSoftmaxRows(a, temperature), "log_softmax")
    }

    /// Row-wise `KL(p ‖ q) = Σ p log(p/q)` with `0 · log(0/q) = 0`.
    ///
    /// 1-D inputs give a scalar; `[r×n]` inputs give one divergence per row.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() {
            return Err(Error::ShapeMismatch {
                op: "kl_divergence",
                lhs: pv.shape().to_vec(),
                rhs: qv.shape().to_vec(),
            });
        }
        let (r, c) = rows_cols(pv);
        let mut out = Vec::with_capacity(r);
        for (i, (pr, qr)) in pv.data().chunks(c).zip(qv.data().chunks(c)).enumerate() {
            let mut acc = 0.0;
            for (j, (&pi, &qi)) in pr.iter().zip(qr).enumerate() {
                if pi > 0.0 {
                    if qi <= 0.0 {
                        return Err(Error::InfiniteDivergence { index: i * c + j, p: pi });
                    }
                    acc += pi * (pi / qi).ln();
                }
            }
            out.push(acc);
        }
        let shape = if pv.shape().len() == 1 { vec![] } else { vec![r] };
        self.push(shape, out, Op::KlRows(p, q), "kl_divergence")
    }

    /// Gathers rows of a matrix by index (repeats allowed).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = two_d(av, "select_rows")?;
        if indices.is_empty() || indices.iter().any(|&i| i >= r) {
            return Err(Error::InvalidArgument(format!("row indices {indices:?} for {r} rows")));
        }
        let d = av.data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        self.push(vec![indices.len(), c], out, Op::SelectRows(a, indices.to_vec()), "select_rows")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = two_d(av, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::InvalidArgument(format!("column range {start}..{end} for {c} columns")));
        }
        let d = av.data();
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + end]);
        }
        self.push(vec![r, end - start], out, Op::SliceCols(a, start, end), "slice_cols")
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: av.shape().to_vec(),
                rhs: shape,
            });
        }
        let data = av.data().to_vec();
        self.push(shape, data, Op::Reshape(a), "reshape")
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'g mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }

        // Adds `g` (possibly reduced to a scalar) into operand `v` of an elementwise op.
        fn acc_elementwise(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
            let scalar = nodes[v.0].value.len() == 1 && g.len() != 1;
            if let Some(s) = slot(grads, nodes, v) {
                if scalar {
                    s[0] += g.iter().enumerate().map(|(i, &gi)| f(i, gi)).sum::<f64>();
                } else {
                    for (i, (si, &gi)) in s.iter_mut().zip(g).enumerate() {
                        *si += f(i, gi);
                    }
                }
            }
        }

        let val = |v: &Var| nodes[v.0].value.data();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let out = node.value.data();
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        leaf_grads.push((i, g));
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = rows_cols(&nodes[a.0].value);
                    let (_, n) = rows_cols(&nodes[b.0].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        matmul_bt_into(&g, val(b), ga, m, n, k);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        matmul_at_into(val(a), &g, gb, m, k, n);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = rows_cols(&nodes[a.0].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for p in 0..r {
                            for q in 0..c {
                                ga[p * c + q] += g[q * r + p];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc_elementwise(&mut grads, nodes, *a, &g, |_, gi| gi);
                    acc_elementwise(&mut grads, nodes, *b, &g, |_, gi| gi);
                }
                Op::Sub(a, b) => {
                    acc_elementwise(&mut grads, nodes, *a, &g, |_, gi| gi);
                    acc_elementwise(&mut grads, nodes, *b, &g, |_, gi| -gi);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (val(a), val(b));
                    let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                    acc_elementwise(&mut grads, nodes, *a, &g, |i, gi| gi * pick(bd, i));
                    acc_elementwise(&mut grads, nodes, *b, &g, |i, gi| gi * pick(ad, i));
                }
                Op::Scale(a, c) => acc_elementwise(&mut grads, nodes, *a, &g, |_, gi| gi * c),
                Op::Relu(a) => {
                    let ad = val(a);
                    acc_elementwise(&mut grads, nodes, *a, &g, |i, gi| if ad[i] > 0.0 { gi } else { 0.0 });
                }
                Op::Log(a) => {
                    let ad = val(a);
                    acc_elementwise(&mut grads, nodes, *a, &g, |i, gi| gi / ad[i]);
                }
                Op::Exp(a) => acc_elementwise(&mut grads, nodes, *a, &g, |i, gi| gi * out[i]),
                Op::Sum(a) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::AddRow(x, b) => {
                    acc_elementwise(&mut grads, nodes, *x, &g, |_, gi| gi);
                    let n = nodes[b.0].value.len();
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for row in g.chunks(n) {
                            for (o, &gi) in gb.iter_mut().zip(row) {
                                *o += gi;
                            }
                        }
                    }
                }
                Op::NormalizeRows(a, eps) => {
                    let (_, c) = rows_cols(&nodes[a.0].value);
                    let ad = val(a);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((gr, yr), (xr, gar)) in g.chunks(c).zip(out.chunks(c)).zip(ad.chunks(c).zip(ga.chunks_mut(c))) {
                            let norm = xr.iter().map(|x| x * x).sum::<f64>().sqrt();
                            if norm > *eps {
                                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                                for ((o, &gi), &yi) in gar.iter_mut().zip(gr).zip(yr) {
                                    *o += (gi - yi * dot) / norm;
                                }
                            } else {
                                for (o, &gi) in gar.iter_mut().zip(gr) {
                                    *o += gi / eps;
                                }
                            }
                        }
                    }
                }
                Op::SoftmaxRows(a, t) => {
                    let (_, c) = rows_cols(&nodes[a.0].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((gr, yr), gar) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((o, &gi), &yi) in gar.iter_mut().zip(gr).zip(yr) {
                                *o += yi * (gi - dot) / t;
                            }
                        }
                    }
                }
                Op::LogSoftmaxRows(a, t) => {
                    let (_, c) = rows_cols(&nodes[a.0].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((gr, yr), gar) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                            let total: f64 = gr.iter().sum();
                            for ((o, &gi), &yi) in gar.iter_mut().zip(gr).zip(yr) {
                                *o += (gi - yi.exp() * total) / t;
                            }
                        }
                    }
                }
                Op::KlRows(p, q) => {
                    let (_, c) = rows_cols(&nodes[p.0].value);
                    let (pd, qd) = (val(p), val(q));
                    if let Some(gp) = slot(&mut grads, nodes, *p) {
                        for (idx, o) in gp.iter_mut().enumerate() {
                            if pd[idx] > 0.0 {
                                *o += g[idx / c] * ((pd[idx] / qd[idx]).ln() + 1.0);
                            }
                        }
                    }
                    if let Some(gq) = slot(&mut grads, nodes, *q) {
                        for (idx, o) in gq.iter_mut().enumerate() {
                            if pd[idx] > 0.0 {
                                *o -= g[idx / c] * pd[idx] / qd[idx];
                            }
                        }
                    }
                }
                Op::SelectRows(a, indices) => {
                    let (_, c) = rows_cols(&nodes[a.0].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (gr, &src) in g.chunks(c).zip(indices) {
                            for (o, &gi) in ga[src * c..(src + 1) * c].iter_mut().zip(gr) {
                                *o += gi;
                            }
                        }
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (_, c) = rows_cols(&nodes[a.0].value);
                    let w = end - start;
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for (r, gr) in g.chunks(w).enumerate() {
                            for (o, &gi) in ga[r * c + start..r * c + end].iter_mut().zip(gr) {
                                *o += gi;
                            }
                        }
                    }
                }
                Op::Reshape(a) => acc_elementwise(&mut grads, nodes, *a, &g, |_, gi| gi),
            }
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(existing) => existing.data_mut().iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                None => node.grad = Some(Tensor::from_parts_unchecked(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// In-place `softmax(row / temperature)` with max subtraction.
pub fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / temperature).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
