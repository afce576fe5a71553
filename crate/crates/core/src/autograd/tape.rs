use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar { x: Var, s: Var },
    Transpose(Var),
    Reshape(Var),
    RowSoftmax(Var),
    LogSoftmax(Var),
    MaskedSoftmax { s: Var, m: Var },
    AttnMask(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<f64> },
    AddBias { x: Var, b: Var },
    Gelu(Var),
    Mean(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Exp(Var),
    Log(Var),
    Cosh(Var),
    LogCosh(Var),
    Square(Var),
    MaxScalars(Vec<Var>, usize),
    Ste { hard: Var, soft: Var },
    MergeRows { x: Var, w: Var, dest: Vec<Option<usize>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations, in execution (hence topological) order.
///
/// A tape is single-owner: one forward/backward pass runs on one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shapes(ts: &[&Tensor]) -> String {
    ts.iter()
        .map(|t| format!("{:?}", t.shape()))
        .collect::<Vec<_>>()
        .join(" vs ")
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, shapes(&[ta, tb])));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let t = self.value(a);
        if t.ndim() > 2 {
            return Err(Error::shape(op, format!("expected matrix, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    fn require_scalar(&self, op: &'static str, a: Var) -> Result<()> {
        let t = self.value(a);
        if !t.is_scalar() {
            return Err(Error::shape(op, format!("expected scalar, got {:?}", t.shape())));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                shapes(&[self.value(a), self.value(b)]),
            ));
        }
        let data = kernels::matmul(self.value(a).data(), m, k, self.value(b).data(), n);
        let out = Tensor::new(vec![m, n], data)?;
        self.record("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.record("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.record("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.record("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.record("add_scalar", out, Op::AddScalar(a), &[a])
    }

    /// `x * s` for a scalar-shaped `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.require_scalar("mul_scalar", s)?;
        let sv = self.item(s);
        let out = self.value(x).map(|v| v * sv);
        self.record("mul_scalar", out, Op::MulScalarVar { x, s }, &[x, s])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims("transpose", a)?;
        let out = self.value(a).transpose();
        self.record("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.record("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("row_softmax", a)?;
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), kernels::softmax_rows(t.data(), r, c, None))?;
        self.record("row_softmax", out, Op::RowSoftmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("log_softmax", a)?;
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), kernels::log_softmax_rows(t.data(), r, c))?;
        self.record("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// Softmax of `s` reweighted by the attention mask `m`:
    /// `exp(s_ij) m_ij / sum_k exp(s_ik) m_ik`.
    pub fn masked_softmax(&mut self, s: Var, m: Var) -> Result<Var> {
        self.same_shape("masked_softmax", s, m)?;
        let (r, c) = self.matrix_dims("masked_softmax", s)?;
        for i in 0..r {
            if self.value(m).row(i).iter().all(|&v| v == 0.0) {
                return Err(Error::domain("masked_softmax", format!("row {i} fully masked")));
            }
        }
        let data = kernels::softmax_rows(self.value(s).data(), r, c, Some(self.value(m).data()));
        let out = Tensor::new(self.value(s).shape().to_vec(), data)?;
        self.record("masked_softmax", out, Op::MaskedSoftmax { s, m }, &[s, m])
    }

    /// `M_ij = 1` on the diagonal, `m_j` elsewhere.
    pub fn attention_mask(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        if t.ndim() != 1 {
            return Err(Error::shape("attention_mask", format!("{:?}", t.shape())));
        }
        let n = t.len();
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(if i == j { 1.0 } else { t.data()[j] });
            }
        }
        let out = Tensor::new(vec![n, n], data)?;
        self.record("attention_mask", out, Op::AttnMask(m), &[m])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("layer_norm", x)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "layer_norm",
                shapes(&[self.value(x), self.value(gamma), self.value(beta)]),
            ));
        }
        let (data, _mean, rstd) = kernels::layer_norm_rows(
            self.value(x).data(),
            r,
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.record(
            "layer_norm",
            out,
            Op::LayerNorm { x, gamma, beta, rstd },
            &[x, gamma, beta],
        )
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims("add_bias", x)?;
        if self.value(b).len() != c {
            return Err(Error::shape("add_bias", shapes(&[self.value(x), self.value(b)])));
        }
        let mut out = self.value(x).clone();
        kernels::add_bias_rows(out.data_mut(), c, self.value(b).data());
        self.record("add_bias", out, Op::AddBias { x, b }, &[x, b])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::gelu);
        self.record("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.record("mean", out, Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.record("sum", out, Op::Sum(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.matrix_dims("concat_cols", first)?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    shapes(&parts.iter().map(|&v| self.value(v)).collect::<Vec<_>>()),
                ));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.record("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.matrix_dims("concat_rows", first)?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    shapes(&parts.iter().map(|&v| self.value(v)).collect::<Vec<_>>()),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.record("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {r} rows")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        self.record("gather_rows", out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Selects flat elements by index into a 1-D result.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of {n} elements")));
        }
        let d = self.value(a).data();
        let out = Tensor::vector(idx.iter().map(|&i| d[i]).collect());
        self.record("gather", out, Op::Gather(a, idx.to_vec()), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.record("exp", out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {v}")));
        }
        let out = self.value(a).map(f64::ln);
        self.record("log", out, Op::Log(a), &[a])
    }

    pub fn cosh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::cosh);
        self.record("cosh", out, Op::Cosh(a), &[a])
    }

    /// Overflow-safe `ln(cosh(x))`.
    pub fn log_cosh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::log_cosh);
        self.record("log_cosh", out, Op::LogCosh(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.record("square", out, Op::Square(a), &[a])
    }

    /// Maximum of scalar inputs; the gradient flows to the first maximizer.
    pub fn max_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("max_scalars", "no inputs"));
        }
        let mut best = 0;
        for (i, &x) in xs.iter().enumerate() {
            self.require_scalar("max_scalars", x)?;
            if self.item(x) > self.item(xs[best]) {
                best = i;
            }
        }
        let out = Tensor::scalar(self.item(xs[best]));
        self.record("max_scalars", out, Op::MaxScalars(xs.to_vec(), best), xs)
    }

    /// Straight-through pass: forward value of `hard`, gradient routed
    /// unchanged to `soft`. `hard` receives a zero gradient.
    pub fn ste(&mut self, hard: Var, soft: Var) -> Result<Var> {
        self.same_shape("ste", hard, soft)?;
        let out = self.value(hard).clone();
        self.record("ste", out, Op::Ste { hard, soft }, &[hard, soft])
    }

    /// Averages merge sources into their destinations.
    ///
    /// For each row `d` that is the destination of at least one source,
    /// `out_d = (x_d + sum_s w_s x_s) / (1 + sum_s w_s)` with sources summed in
    /// ascending row order. All other rows pass through unchanged. `w` is a
    /// 1-D weight per row (only entries of rows with a destination are read).
    pub fn merge_rows(&mut self, x: Var, w: Var, dest: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.matrix_dims("merge_rows", x)?;
        if self.value(w).len() != r || dest.len() != r {
            return Err(Error::shape(
                "merge_rows",
                format!("{} rows, {} weights, {} assignments", r, self.value(w).len(), dest.len()),
            ));
        }
        for (s, d) in dest.iter().enumerate() {
            if let Some(d) = *d {
                if d >= r || d == s || dest[d].is_some() {
                    return Err(Error::domain(
                        "merge_rows",
                        format!("invalid assignment {s} -> {d}"),
                    ));
                }
            }
        }
        let out = merge_rows_forward(self.value(x), self.value(w).data(), dest, c);
        self.record(
            "merge_rows",
            out,
            Op::MergeRows {
                x,
                w,
                dest: dest.to_vec(),
            },
            &[x, w],
        )
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::shape("backward", format!("root must be scalar, got {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only keep gradients for nodes that require them.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let ga = kernels::matmul_nt(g.data(), m, n, tb.data(), k);
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga).unwrap());
                }
                if self.requires_grad(*b) {
                    let gb = kernels::matmul_tn(ta.data(), m, k, g.data(), n);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(tb, |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(ta, |x, y| x * y));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalarVar { x, s } => {
                let sv = self.item(*s);
                self.accumulate(grads, *x, g.map(|v| v * sv));
                let gs: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(a, b)| a * b)
                    .sum();
                let shape = self.value(*s).shape().to_vec();
                self.accumulate(grads, *s, Tensor::new(shape, vec![gs]).unwrap());
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(shape).unwrap());
            }
            Op::RowSoftmax(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let (y, gy) = (out.row(i), g.row(i));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                let shape = out.shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, ga).unwrap());
            }
            Op::LogSoftmax(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let (y, gy) = (out.row(i), g.row(i));
                    let gsum: f64 = gy.iter().sum();
                    for j in 0..c {
                        ga[i * c + j] = gy[j] - y[j].exp() * gsum;
                    }
                }
                let shape = out.shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, ga).unwrap());
            }
            Op::MaskedSoftmax { s, m } => {
                let (r, c) = (out.rows(), out.cols());
                let (ts, tm) = (self.value(*s), self.value(*m));
                let mut gs = vec![0.0; r * c];
                let mut gm = vec![0.0; r * c];
                for i in 0..r {
                    let (y, gy) = (out.row(i), g.row(i));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    let (srow, mrow) = (ts.row(i), tm.row(i));
                    let max = srow
                        .iter()
                        .zip(mrow)
                        .filter(|(_, &mv)| mv != 0.0)
                        .map(|(&v, _)| v)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = srow
                        .iter()
                        .zip(mrow)
                        .map(|(&v, &mv)| if mv != 0.0 { (v - max).exp() * mv } else { 0.0 })
                        .sum();
                    for j in 0..c {
                        gs[i * c + j] = y[j] * (gy[j] - dot);
                        let ratio = (srow[j] - max).exp() / z;
                        gm[i * c + j] = ratio * (gy[j] - dot);
                    }
                }
                let shape = out.shape().to_vec();
                self.accumulate(grads, *s, Tensor::new(shape.clone(), gs).unwrap());
                if self.requires_grad(*m) {
                    self.accumulate(grads, *m, Tensor::new(shape, gm).unwrap());
                }
            }
            Op::AttnMask(m) => {
                let n = out.rows();
                let mut gm = vec![0.0; n];
                for i in 0..n {
                    for (j, gmj) in gm.iter_mut().enumerate() {
                        if i != j {
                            *gmj += g.data()[i * n + j];
                        }
                    }
                }
                self.accumulate(grads, *m, Tensor::vector(gm));
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let (r, c) = (tx.rows(), tx.cols());
                let mut gx = vec![0.0; r * c];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let inv_c = 1.0 / c as f64;
                for i in 0..r {
                    let xr = tx.row(i);
                    let mean = xr.iter().sum::<f64>() * inv_c;
                    let gy = g.row(i);
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * rstd[i]).collect();
                    let gxhat: Vec<f64> = gy.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                    let mean_g = gxhat.iter().sum::<f64>() * inv_c;
                    let mean_gx = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() * inv_c;
                    for j in 0..c {
                        gx[i * c + j] = rstd[i] * (gxhat[j] - mean_g - xhat[j] * mean_gx);
                        ggamma[j] += gy[j] * xhat[j];
                        gbeta[j] += gy[j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx).unwrap());
                let gshape = tg.shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gshape, ggamma).unwrap());
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *beta, Tensor::new(bshape, gbeta).unwrap());
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                let shape = self.value(*b).shape().to_vec();
                self.accumulate(grads, *b, Tensor::new(shape, gb).unwrap());
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * kernels::gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.item() / t.len() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape(), v));
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(t.shape(), g.item()));
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let c = tp.cols();
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            gp.extend_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), gp).unwrap());
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.len();
                    if self.requires_grad(p) {
                        let gp = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), gp).unwrap());
                    }
                    offset += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut ga = Tensor::zeros(ta.shape());
                for (k, &i) in idx.iter().enumerate() {
                    for (dst, src) in ga.row_mut(i).iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gather(a, idx) => {
                let mut ga = Tensor::zeros(self.value(*a).shape());
                for (k, &i) in idx.iter().enumerate() {
                    ga.data_mut()[i] += g.data()[k];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |gv, y| gv * y)),
            Op::Log(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv / x);
                self.accumulate(grads, *a, ga);
            }
            Op::Cosh(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * x.sinh());
                self.accumulate(grads, *a, ga);
            }
            Op::LogCosh(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * x.tanh());
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x);
                self.accumulate(grads, *a, ga);
            }
            Op::MaxScalars(xs, best) => {
                let shape = self.value(xs[*best]).shape().to_vec();
                self.accumulate(grads, xs[*best], Tensor::new(shape, vec![g.item()]).unwrap());
            }
            Op::Ste { hard, soft } => {
                self.accumulate(grads, *soft, g.clone());
                self.accumulate(grads, *hard, Tensor::zeros(g.shape()));
            }
            Op::MergeRows { x, w, dest } => {
                let tx = self.value(*x);
                let tw = self.value(*w).data();
                let c = tx.cols();
                let r = tx.rows();
                let mut z = vec![1.0; r];
                let mut is_dest = vec![false; r];
                for (s, d) in dest.iter().enumerate() {
                    if let Some(d) = *d {
                        z[d] += tw[s];
                        is_dest[d] = true;
                    }
                }
                let mut gx = g.clone();
                let mut gw = vec![0.0; r];
                for d in 0..r {
                    if is_dest[d] {
                        for v in gx.row_mut(d) {
                            *v /= z[d];
                        }
                    }
                }
                for (s, d) in dest.iter().enumerate() {
                    if let Some(d) = *d {
                        let gd = g.row(d);
                        let (xs, od) = (tx.row(s), out.row(d));
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += gd[j] * (xs[j] - od[j]);
                        }
                        gw[s] = acc / z[d];
                        let scale = tw[s] / z[d];
                        for (j, v) in gx.row_mut(s).iter_mut().enumerate() {
                            *v += gd[j] * scale;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                let wshape = self.value(*w).shape().to_vec();
                self.accumulate(grads, *w, Tensor::new(wshape, gw).unwrap());
            }
        }
    }
}

pub(crate) fn merge_rows_forward(x: &Tensor, w: &[f64], dest: &[Option<usize>], c: usize) -> Tensor {
    let r = x.rows();
    let mut acc: Vec<Option<(Vec<f64>, f64)>> = vec![None; r];
    for (s, d) in dest.iter().enumerate() {
        if let Some(d) = *d {
            let entry = acc[d].get_or_insert_with(|| (x.row(d).to_vec(), 1.0));
            for (a, v) in entry.0.iter_mut().zip(x.row(s)) {
                *a += w[s] * v;
            }
            entry.1 += w[s];
        }
    }
    let mut out = x.clone();
    for (d, entry) in acc.into_iter().enumerate() {
        if let Some((sum, z)) = entry {
            for (o, v) in out.row_mut(d).iter_mut().zip(&sum) {
                *o = v / z;
            }
        }
    }
    debug_assert_eq!(out.cols(), c);
    out
}
