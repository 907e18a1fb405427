//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Every operation appends a node; `backward` walks the nodes in reverse
//! creation order, so each node is visited exactly once and the traversal is
//! deterministic. Nodes whose inputs do not require gradients are treated as
//! constants and skipped during the backward sweep.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
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
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastScalar(Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Ln(Var),
    Recip(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAll(Var),
    MeanRows(Var),
    RepeatRows(Var),
    GatherCols { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// A single-use gradient tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over one row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        let (rows, cols) = value.dims2()?;
        self.nodes.push(Node {
            value,
            rows,
            cols,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (na, nb) = (self.node(a), self.node(b));
        if (na.rows, na.cols) != (nb.rows, nb.cols) {
            return Err(Error::Dimension {
                op,
                lhs: vec![na.rows, na.cols],
                rhs: vec![nb.rows, nb.cols],
            });
        }
        Ok(())
    }

    /// Adds a leaf holding `value`. Only leaves with `requires_grad` receive
    /// gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Constant (non-differentiable) leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient accumulated into `v` by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn unary_map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let n = self.node(x);
        let data = n.value.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::matrix(n.rows, n.cols, data)?;
        let rg = n.requires_grad;
        self.push(value, rg, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (kb, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![br, bc],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.node(a).value.data(),
            false,
            self.node(b).value.data(),
            b_transposed,
            &mut out,
            false,
        );
        let rg = self.needs(&[a, b]);
        self.push(
            Tensor::matrix(m, n, out)?,
            rg,
            Op::MatMul { a, b, b_transposed },
        )
    }

    /// Elementwise sum; `b` may be an exact-shape match or a 1×1 scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let b = if self.shape(b) == (1, 1) && self.shape(a) != (1, 1) {
            let (r, c) = self.shape(a);
            self.broadcast_scalar(b, r, c)?
        } else {
            b
        };
        self.same_shape(name, a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let data = na
            .value
            .data()
            .iter()
            .zip(nb.value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::matrix(na.rows, na.cols, data)?;
        let rg = self.needs(&[a, b]);
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        self.push(value, rg, op)
    }

    /// `x * s` where `s` is a 1×1 node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            let (r, c) = self.shape(s);
            return Err(Error::Dimension {
                op: "mul_scalar",
                lhs: vec![self.shape(x).0, self.shape(x).1],
                rhs: vec![r, c],
            });
        }
        self.mul(x, s)
    }

    /// Expands a 1×1 node to `[rows×cols]`.
    pub fn broadcast_scalar(&mut self, s: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            let (r, c) = self.shape(s);
            return Err(Error::Dimension {
                op: "broadcast_scalar",
                lhs: vec![r, c],
                rhs: vec![rows, cols],
            });
        }
        let v = self.node(s).value.data()[0];
        let rg = self.node(s).requires_grad;
        self.push(Tensor::full(&[rows, cols], v), rg, Op::BroadcastScalar(s))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary_map(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary_map(x, Op::AddConst(x), |v| v + c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Sigmoid(x), sigmoid_scalar)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Tanh(x), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary_map(x, Op::Gelu(x), gelu_scalar)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.node(x).value.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::numeric("ln of a non-positive value"));
        }
        self.unary_map(x, Op::Ln(x), f64::ln)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if self.node(x).value.data().iter().any(|&v| v == 0.0) {
            return Err(Error::numeric("reciprocal of zero"));
        }
        self.unary_map(x, Op::Recip(x), |v| 1.0 / v)
    }

    /// Softmax along each row, computed with max-subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        if n.value.data().iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("softmax input contains NaN"));
        }
        let (rows, cols) = (n.rows, n.cols);
        let mut data = n.value.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let rg = n.requires_grad;
        self.push(Tensor::matrix(rows, cols, data)?, rg, Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalisation with `[1×d]` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, d) {
                let (r, c) = self.shape(p);
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: vec![rows, d],
                    rhs: vec![r, c],
                });
            }
        }
        let xs = self.node(x).value.data();
        let g = self.node(gain).value.data();
        let b = self.node(bias).value.data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        self.push(
            Tensor::matrix(rows, d, out)?,
            rg,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x).value.data().iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(Tensor::scalar(s), rg, Op::SumAll(x))
    }

    /// Column means over rows: `[n×d] -> [1×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        let (rows, cols) = (n.rows, n.cols);
        let mut out = vec![0.0; cols];
        for row in n.value.data().chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let rg = n.requires_grad;
        self.push(Tensor::row(out)?, rg, Op::MeanRows(x))
    }

    /// Tiles a `[1×d]` row into `[n×d]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != 1 || n == 0 {
            return Err(Error::Dimension {
                op: "repeat_rows",
                lhs: vec![r, c],
                rhs: vec![n],
            });
        }
        let row = self.node(x).value.data();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        let rg = self.node(x).requires_grad;
        self.push(Tensor::matrix(n, c, data)?, rg, Op::RepeatRows(x))
    }

    /// Selects columns of `x` by index (indices may repeat).
    pub fn gather_cols(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if index.is_empty() || index.iter().any(|&i| i >= c) {
            return Err(Error::Dimension {
                op: "gather_cols",
                lhs: vec![r, c],
                rhs: index,
            });
        }
        let xs = self.node(x).value.data();
        let mut data = Vec::with_capacity(r * index.len());
        for row in xs.chunks(c) {
            data.extend(index.iter().map(|&i| row[i]));
        }
        let value = Tensor::matrix(r, index.len(), data)?;
        let rg = self.node(x).requires_grad;
        self.push(value, rg, Op::GatherCols { x, index })
    }

    /// Stacks tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let cols = self.shape(*first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: vec![r, c],
                });
            }
            data.extend_from_slice(self.node(p).value.data());
            rows += r;
        }
        let rg = self.needs(parts);
        self.push(
            Tensor::matrix(rows, cols, data)?,
            rg,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Joins tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let rows = self.shape(*first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: vec![rows, total],
                    rhs: vec![r, c],
                });
            }
            total += c;
        }
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.shape(p);
            let src = self.node(p).value.data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let rg = self.needs(parts);
        self.push(
            Tensor::matrix(rows, total, data)?,
            rg,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > r {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let data = self.node(x).value.data()[start * c..(start + len) * c].to_vec();
        let rg = self.node(x).requires_grad;
        self.push(Tensor::matrix(len, c, data)?, rg, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let src = self.node(x).value.data();
        let mut data = Vec::with_capacity(r * len);
        for row in src.chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.node(x).requires_grad;
        self.push(Tensor::matrix(r, len, data)?, rg, Op::SliceCols { x, start })
    }

    /// Back-propagates from the scalar `loss`, accumulating gradients into
    /// every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got [{r}, {c}]"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0], &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn send(&mut self, target: Var, contribution: &[f64]) {
        let node = &mut self.nodes[target.0];
        if node.requires_grad {
            accumulate(node, contribution);
        }
    }

    fn grad_buf(&mut self, target: Var) -> Option<&mut Vec<f64>> {
        let node = &mut self.nodes[target.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(node.grad.get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (m, k) = self.shape(*a);
                let n = self.nodes[i].cols;
                let bt = *b_transposed;
                if self.requires_grad(*a) {
                    // da = g · bᵀ  (or g · b when b was used transposed)
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let da = self.grad_buf(*a).expect("checked");
                    gemm(m, n, k, g, false, &bv, !bt, da, true);
                }
                if self.requires_grad(*b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let db = self.grad_buf(*b).expect("checked");
                    if bt {
                        // b is n×k: db = gᵀ · a
                        gemm(n, m, k, g, true, &av, false, db, true);
                    } else {
                        // db = aᵀ · g
                        gemm(k, m, n, &av, true, g, false, db, true);
                    }
                }
            }
            Op::Add(a, b) => {
                self.send(*a, g);
                self.send(*b, g);
            }
            Op::Sub(a, b) => {
                self.send(*a, g);
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.send(*b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let c: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.send(*a, &c);
                }
                if self.requires_grad(*b) {
                    let c: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.send(*b, &c);
                }
            }
            Op::BroadcastScalar(x) => {
                let total: f64 = g.iter().sum();
                self.send(*x, &[total]);
            }
            Op::Scale(x, f) => {
                let c: Vec<f64> = g.iter().map(|v| v * f).collect();
                self.send(*x, &c);
            }
            Op::AddConst(x) => self.send(*x, g),
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                let c: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.send(*x, &c);
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data();
                let c: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.send(*x, &c);
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                let c: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| g * gelu_grad_scalar(x))
                    .collect();
                self.send(*x, &c);
            }
            Op::Ln(x) => {
                let xv = self.nodes[x.0].value.data();
                let c: Vec<f64> = g.iter().zip(xv).map(|(g, x)| g / x).collect();
                self.send(*x, &c);
            }
            Op::Recip(x) => {
                let y = self.nodes[i].value.data();
                let c: Vec<f64> = g.iter().zip(y).map(|(g, y)| -g * y * y).collect();
                self.send(*x, &c);
            }
            Op::SoftmaxRows(x) => {
                let cols = self.nodes[i].cols;
                let y = self.nodes[i].value.data();
                let mut c = vec![0.0; g.len()];
                for ((gr, yr), cr) in g.chunks(cols).zip(y.chunks(cols)).zip(c.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in cr.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.send(*x, &c);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, d) = self.shape(*x);
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gv), hv) in dg.iter_mut().zip(gr).zip(hr) {
                            *o += gv * hv;
                        }
                    }
                    self.send(*gain, &dg);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        for (o, gv) in db.iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                    self.send(*bias, &db);
                }
                if self.requires_grad(*x) {
                    let gain_v = self.nodes[gain.0].value.data().to_vec();
                    let mut dx = vec![0.0; rows * d];
                    let nf = d as f64;
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(&gain_v).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            dx[r * d + c] =
                                inv_std[r] / nf * (nf * dh[c] - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    self.send(*x, &dx);
                }
            }
            Op::SumAll(x) => {
                let n = self.nodes[x.0].value.numel();
                self.send(*x, &vec![g[0]; n]);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let mut c = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    c.extend(g.iter().map(|v| v / rows as f64));
                }
                self.send(*x, &c);
            }
            Op::RepeatRows(x) => {
                let cols = self.nodes[i].cols;
                let mut c = vec![0.0; cols];
                for gr in g.chunks(cols) {
                    for (o, v) in c.iter_mut().zip(gr) {
                        *o += v;
                    }
                }
                self.send(*x, &c);
            }
            Op::GatherCols { x, index } => {
                let (rows, cols) = self.shape(*x);
                let width = index.len();
                let mut c = vec![0.0; rows * cols];
                for r in 0..rows {
                    for (j, &src) in index.iter().enumerate() {
                        c[r * cols + src] += g[r * width + j];
                    }
                }
                self.send(*x, &c);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.send(p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].cols;
                let rows = self.nodes[i].rows;
                let mut offset = 0;
                for &p in parts {
                    let (_, c) = self.shape(p);
                    if self.requires_grad(p) {
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            part.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.send(p, &part);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.nodes[i].cols;
                if let Some(buf) = self.grad_buf(*x) {
                    for (o, v) in buf[start * cols..start * cols + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.shape(*x);
                let len = self.nodes[i].cols;
                let start = *start;
                if let Some(buf) = self.grad_buf(*x) {
                    for r in 0..rows {
                        for j in 0..len {
                            buf[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn accumulate(node: &mut Node, contribution: &[f64]) {
    match &mut node.grad {
        Some(buf) => {
            for (o, v) in buf.iter_mut().zip(contribution) {
                *o += v;
            }
        }
        None => node.grad = Some(contribution.to_vec()),
    }
}
