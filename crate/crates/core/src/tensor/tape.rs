use std::borrow::Cow;

use super::{kernels, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    AddRowBias { a: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Gelu { a: usize },
    SoftmaxRows { a: usize },
    CausalSoftmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    SliceCols { a: usize, start: usize, width: usize },
    ConcatCols { parts: Vec<usize> },
    GateScale { a: usize, gates: usize, index: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64> },
    Sum { a: usize },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    /// true when some requires_grad leaf is reachable through this node
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Linear record of primitive ops, replayed in reverse by [`Tape::backward`].
///
/// Leaves may borrow their tensors, so model parameters are recorded without
/// copying. A tape is single-threaded; independent tapes over shared
/// parameters can run concurrently.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, needs_grad: requires_grad, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf; `None` for anything else.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        let node = &mut self.nodes[v.0];
        let len = node.value.len();
        node.grad.as_mut().map(|g| std::mem::replace(g, vec![0.0; len]))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad: false, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    /// `[m,k] @ [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] @ [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0]))
    }

    /// `[m,k] @ [n,k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m},{k}] @ [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulNt { a: a.0, b: b.0, m, k, n }, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// `[m,n] + [n]`, the bias added to every row.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(a, "add_row_bias")?;
        if self.value(bias).shape() != [n] {
            return Err(Error::shape("add_row_bias", format!("bias {:?} for rows of {n}", self.value(bias).shape())));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddRowBias { a: a.0, bias: bias.0 }, &[a.0, bias.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(t, Op::Scale { a: a.0, factor }, &[a.0]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(t, Op::Gelu { a: a.0 }, &[a.0]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = super::softmax_rows(self.value(a))?;
        Ok(self.push(t, Op::SoftmaxRows { a: a.0 }, &[a.0]))
    }

    /// Row softmax of a square score matrix restricted to keys `j <= i`.
    /// Entries above the diagonal are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "causal_softmax")?;
        if m != n || n == 0 {
            return Err(Error::shape("causal_softmax", format!("expected square, got [{m},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        let src = self.value(a).data();
        for i in 0..m {
            let row = &mut out[i * n..i * n + i + 1];
            row.copy_from_slice(&src[i * n..i * n + i + 1]);
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::CausalSoftmax { a: a.0 }, &[a.0]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(Error::shape("layer_norm", "gain/bias must match row width"));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, rstd }, &[x.0, gain.0, bias.0]))
    }

    /// Gathers rows of `table` (`[V,d]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(t, Op::Embedding { table: table.0, ids: ids.to_vec() }, &[table.0]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + width > n {
            return Err(Error::shape("slice_cols", format!("{start}+{width} > {n}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let t = Tensor::new(vec![m, width], out)?;
        Ok(self.push(t, Op::SliceCols { a: a.0, start, width }, &[a.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no parts"))?;
        let (m, _) = self.dims2(*first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pw) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            widths.push(pw);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(t, Op::ConcatCols { parts: ids.clone() }, &ids))
    }

    /// Multiplies `a` by the single scalar `gates[index]`.
    pub fn gate_scale(&mut self, a: Var, gates: Var, index: usize) -> Result<Var> {
        let gate = *self
            .value(gates)
            .data()
            .get(index)
            .ok_or_else(|| Error::shape("gate_scale", format!("gate index {index} out of range")))?;
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * gate).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(t, Op::GateScale { a: a.0, gates: gates.0, index }, &[a.0, gates.0]))
    }

    /// Mean negative log-likelihood of `targets` over the unmasked rows of
    /// `logits` (`[T,V]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape("cross_entropy", "targets/mask length must equal rows"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy: every position is masked"));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(Error::TokenOutOfRange { id: targets[i], vocab: v });
            }
            let row = &src[i * v..(i + 1) * v];
            total += kernels::log_sum_exp(row) - row[targets[i]];
            let p = &mut probs[i * v..(i + 1) * v];
            p.copy_from_slice(row);
            kernels::softmax_in_place(p);
        }
        let loss = Tensor::scalar(total / count as f64);
        Ok(self.push(
            loss,
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), mask: mask.to_vec(), probs },
            &[logits.0],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    /// Back-propagates from the scalar `loss`, adding into the gradients of
    /// every `requires_grad` leaf. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if let (true, Some(a), Some(grad)) = (node.requires_grad, a, node.grad.as_mut()) {
                for (acc, v) in grad.iter_mut().zip(&a) {
                    *acc += v;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].needs_grad;
        let val = |j: usize| nodes[j].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    // dA = g @ B^T, via an explicit transpose so the row kernel applies
                    let bt = kernels::transpose(val(b), k, n);
                    kernels::matmul_acc(g, &bt, m, n, k, slot(adj, nodes, a));
                }
                if needs(b) {
                    kernels::matmul_tn_acc(val(a), g, m, k, n, slot(adj, nodes, b));
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if needs(a) {
                    kernels::matmul_acc(g, val(b), m, n, k, slot(adj, nodes, a));
                }
                if needs(b) {
                    kernels::matmul_tn_acc(g, val(a), m, n, k, slot(adj, nodes, b));
                }
            }
            &Op::Add { a, b } => {
                for j in [a, b] {
                    if needs(j) {
                        add_into(slot(adj, nodes, j), g);
                    }
                }
            }
            &Op::AddRowBias { a, bias } => {
                if needs(a) {
                    add_into(slot(adj, nodes, a), g);
                }
                if needs(bias) {
                    let s = slot(adj, nodes, bias);
                    let n = s.len();
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    let other = val(b);
                    for ((s, gv), o) in slot(adj, nodes, a).iter_mut().zip(g).zip(other) {
                        *s += gv * o;
                    }
                }
                if needs(b) {
                    let other = val(a);
                    for ((s, gv), o) in slot(adj, nodes, b).iter_mut().zip(g).zip(other) {
                        *s += gv * o;
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if needs(a) {
                    for (s, gv) in slot(adj, nodes, a).iter_mut().zip(g) {
                        *s += gv * factor;
                    }
                }
            }
            &Op::Gelu { a } => {
                if needs(a) {
                    let x = val(a);
                    for ((s, gv), xv) in slot(adj, nodes, a).iter_mut().zip(g).zip(x) {
                        *s += gv * kernels::gelu_grad(*xv);
                    }
                }
            }
            &Op::SoftmaxRows { a } | &Op::CausalSoftmax { a } => {
                if needs(a) {
                    let y = nodes[i].value.data();
                    let n = nodes[i].value.last_dim();
                    let s = slot(adj, nodes, a);
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dotp: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((sv, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *sv += yv * (gv - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let n = nodes[gain].value.len();
                if needs(gain) {
                    let s = slot(adj, nodes, gain);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((sv, gv), hv) in s.iter_mut().zip(grow).zip(hrow) {
                            *sv += gv * hv;
                        }
                    }
                }
                if needs(bias) {
                    let s = slot(adj, nodes, bias);
                    for grow in g.chunks(n) {
                        add_into(s, grow);
                    }
                }
                if needs(x) {
                    let gamma = val(gain);
                    let s = slot(adj, nodes, x);
                    let mut dxhat = vec![0.0; n];
                    for (r, ((srow, grow), hrow)) in s.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dxhat[j] = grow[j] * gamma[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dxhat.iter().zip(hrow).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                        for j in 0..n {
                            srow[j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if needs(table) {
                    let d = nodes[i].value.last_dim();
                    let s = slot(adj, nodes, table);
                    for (t, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[t * d..(t + 1) * d]);
                    }
                }
            }
            &Op::SliceCols { a, start, width } => {
                if needs(a) {
                    let n = nodes[a].value.last_dim();
                    let s = slot(adj, nodes, a);
                    for (r, grow) in g.chunks(width).enumerate() {
                        add_into(&mut s[r * n + start..r * n + start + width], grow);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = nodes[i].value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.last_dim();
                    if needs(p) {
                        let s = slot(adj, nodes, p);
                        for (r, srow) in s.chunks_mut(w).enumerate() {
                            add_into(srow, &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            &Op::GateScale { a, gates, index } => {
                if needs(a) {
                    let gate = val(gates)[index];
                    for (s, gv) in slot(adj, nodes, a).iter_mut().zip(g) {
                        *s += gv * gate;
                    }
                }
                if needs(gates) {
                    let d: f64 = g.iter().zip(val(a)).map(|(x, y)| x * y).sum();
                    slot(adj, nodes, gates)[index] += d;
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                let logits = *logits;
                if needs(logits) {
                    let v = nodes[logits].value.last_dim();
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let scale = g[0] / count;
                    let s = slot(adj, nodes, logits);
                    for (t, (&keep, &target)) in mask.iter().zip(targets).enumerate() {
                        if !keep {
                            continue;
                        }
                        let srow = &mut s[t * v..(t + 1) * v];
                        for (sv, p) in srow.iter_mut().zip(&probs[t * v..(t + 1) * v]) {
                            *sv += scale * p;
                        }
                        srow[target] -= scale;
                    }
                }
            }
            &Op::Sum { a } => {
                if needs(a) {
                    for s in slot(adj, nodes, a).iter_mut() {
                        *s += g[0];
                    }
                }
            }
        }
    }
}

fn slot<'s>(adj: &'s mut [Option<Vec<f64>>], nodes: &[Node<'_>], j: usize) -> &'s mut Vec<f64> {
    let len = nodes[j].value.len();
    adj[j].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn square_has_derivative_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_two_leaves_has_unit_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5), true);
        let y = tape.leaf(Tensor::scalar(-2.0), true);
        let s = tape.add(x, y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
        assert_eq!(tape.grad(y).unwrap(), &[1.0]);
    }

    #[test]
    fn unused_leaf_keeps_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let unused = tape.leaf(t(vec![3], vec![1.0, 2.0, 3.0]), true);
        let loss = tape.scale(x, 4.0).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(t(vec![2, 2], vec![0.5, -1.0, 0.25, 2.0]), true);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        let once: Vec<f64> = tape.grad(a).unwrap().to_vec();
        tape.backward(loss).unwrap();
        for (x, y) in tape.grad(a).unwrap().iter().zip(&once) {
            assert_eq!(*x, 2.0 * y);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        let b = tape.scale(a, 2.0).unwrap();
        assert!(tape.backward(b).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![3, 4]), false);
        let loss = tape.cross_entropy(logits, &[0, 3, 2], &[true, true, true]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_confident_target_is_near_zero() {
        let mut tape = Tape::new();
        let mut row = vec![0.0; 5];
        row[2] = 1e6;
        let logits = tape.leaf(t(vec![1, 5], row), false);
        let loss = tape.cross_entropy(logits, &[2], &[true]).unwrap();
        assert!(tape.value(loss).data()[0].abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        assert!(tape.cross_entropy(logits, &[0, 1], &[false, false]).is_err());
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 3], &[true, true]),
            Err(Error::TokenOutOfRange { id: 3, vocab: 3 })
        ));
    }

    #[test]
    fn cross_entropy_matches_naive_nll() {
        let (tn, v) = (6, 7);
        let data: Vec<f64> = (0..tn * v).map(|i| ((i * 37 % 23) as f64 - 11.0) * 0.31).collect();
        let targets: Vec<usize> = (0..tn).map(|i| (i * 5 + 1) % v).collect();
        let mask = vec![true, false, true, true, false, true];
        let mut tape = Tape::new();
        let logits = tape.leaf(t(vec![tn, v], data.clone()), false);
        let loss = tape.cross_entropy(logits, &targets, &mask).unwrap();

        // oracle: -log(exp(x_t) / sum exp(x)) per row, no max shift
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..tn {
            if !mask[i] {
                continue;
            }
            let row = &data[i * v..(i + 1) * v];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            total += -(row[targets[i]].exp() / z).ln();
            count += 1.0;
        }
        assert!((tape.value(loss).data()[0] - total / count).abs() < 1e-10);
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut tape = Tape::new();
        let s = tape.leaf(t(vec![3, 3], vec![1.0, 5.0, 9.0, 2.0, 1.0, 7.0, 0.0, 0.0, 0.0]), false);
        let a = tape.causal_softmax(s).unwrap();
        let v = tape.value(a).data();
        assert_eq!(v[0], 1.0);
        assert_eq!((v[1], v[2], v[5]), (0.0, 0.0, 0.0));
        assert!((v[6] - 1.0 / 3.0).abs() < 1e-15);
    }
}
