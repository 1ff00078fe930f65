use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
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
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Transpose(Var),
    Reshape(Var),
    Gather { x: Var, idx: Vec<usize> },
    AddBias(Var, Var),
    BroadcastRows(Var),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape. Nodes are appended in evaluation order, so parents always
/// precede children and a reverse sweep is a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tracked leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to `v`, if it reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `max(x, lo)`; clamped entries pass no gradient.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, |v| v.max(lo), Op::ClampMin(x, lo))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, f64::exp, Op::Exp(x));
        Self::check_finite("exp", self.value(v).data())?;
        Ok(v)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {bad} is not strictly positive"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("argument {bad} is not strictly positive"),
            });
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x)))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_values(x, axis, false)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_values(x, axis, true)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, rg))
    }

    fn softmax_values(&self, x: Var, axis: usize, log: bool) -> Result<Tensor> {
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis)?;
        if n == 0 {
            return Err(Error::Empty("softmax"));
        }
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..n).map(|k| (src[at(k)] - max).exp()).sum();
                let lse = sum.ln();
                for k in 0..n {
                    let z = src[at(k)] - max;
                    out[at(k)] = if log { z - lse } else { z.exp() / sum };
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out)
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Empty(if mean { "mean" } else { "sum" }));
        }
        let (shape, data) = match axis {
            None => {
                let s: f64 = t.data().iter().sum();
                let v = if mean { s / t.len() as f64 } else { s };
                (vec![], vec![v])
            }
            Some(axis) => {
                let (outer, n, inner) = split_axis(t.shape(), axis)?;
                let src = t.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            out[o * inner + i] += src[o * n * inner + k * inner + i];
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(axis);
                (shape, out)
            }
        };
        let rg = self.rg(x);
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    /// Sum along `axis`, removing it. `None` sums everything into a scalar.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let data = transpose_raw(self.value(x).data(), r, c);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(x),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Picks elements by flat row-major index into a tensor of `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Domain {
                op: "gather",
                detail: format!("index {bad} out of bounds for {} elements", src.len()),
            });
        }
        let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather { x, idx }, rg))
    }

    /// Rows `rows` of a matrix, in the given order (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("select_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Domain {
                op: "select_rows",
                detail: format!("row {bad} out of bounds for {r} rows"),
            });
        }
        let idx = rows.iter().flat_map(|&i| i * c..(i + 1) * c).collect();
        self.gather(x, idx, vec![rows.len(), c])
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (_, c) = self.matrix_dims("row", x)?;
        let v = self.select_rows(x, &[i])?;
        self.reshape(v, vec![c])
    }

    /// `x[m×n] + b[n]`, adding `b` to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_bias", x)?;
        if self.shape(b) != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: vec![m, n],
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::AddBias(x, b),
            rg,
        ))
    }

    /// Repeats a vector `[n]` into `m` rows.
    pub fn broadcast_rows(&mut self, v: Var, m: usize) -> Result<Var> {
        let t = self.value(v);
        if t.rank() != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![0],
            });
        }
        let n = t.len();
        let data: Vec<f64> = (0..m).flat_map(|_| t.data().iter().copied()).collect();
        let rg = self.rg(v);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::BroadcastRows(v),
            rg,
        ))
    }

    /// Vertically concatenates matrices; rank-1 inputs are treated as single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        let width = |s: &[usize]| if s.len() == 1 { s[0] } else { s[1] };
        let n = width(self.shape(parts[0]));
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s.len() > 2 || width(s) != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![n],
                    rhs: s.to_vec(),
                });
            }
            rows += if s.len() == 1 { 1 } else { s[0] };
            data.extend_from_slice(self.value(p).data());
            rg |= self.rg(p);
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows, n],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_cols", x)?;
        if start + len > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let src = self.value(x).data();
        let data: Vec<f64> = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![m, len],
                data,
            },
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols"));
        }
        let (m, _) = self.matrix_dims("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims("layer_norm", x)?;
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vec![n],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[i] = r;
            for j in 0..n {
                let z = (row[j] - mu) * r;
                normed[i * n + j] = z;
                out[i * n + j] = z * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm (norms floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("l2_normalize_rows", x)?;
        let src = self.value(x).data();
        let norms: Vec<f64> = src
            .chunks(n.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let data = src
            .iter()
            .enumerate()
            .map(|(k, v)| v / norms[k / n])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::L2NormalizeRows { x, norms },
            rg,
        ))
    }

    /// Dot product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p, None)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    /// Reverse sweep from a one-element `loss`, summing gradients into every
    /// tracked node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop_node(node, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.len();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let y = node.value.data();
        let elementwise = |grads: &mut [Option<Vec<f64>>], x: Var, d: &dyn Fn(usize) -> f64| {
            if rg(x) {
                Self::accumulate(grads, x, len(x), |g| {
                    for (k, gk) in g.iter_mut().enumerate() {
                        *gk += gout[k] * d(k);
                    }
                });
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if rg(a) {
                    let bt = transpose_raw(val(b), k, n);
                    Self::accumulate(grads, a, m * k, |g| matmul_raw(gout, &bt, m, n, k, g));
                }
                if rg(b) {
                    let at = transpose_raw(val(a), m, k);
                    Self::accumulate(grads, b, k * n, |g| matmul_raw(&at, gout, k, m, n, g));
                }
            }
            &Op::Add(a, b) => {
                elementwise(grads, a, &|_| 1.0);
                elementwise(grads, b, &|_| 1.0);
            }
            &Op::Sub(a, b) => {
                elementwise(grads, a, &|_| 1.0);
                elementwise(grads, b, &|_| -1.0);
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                elementwise(grads, a, &|k| vb[k]);
                elementwise(grads, b, &|k| va[k]);
            }
            &Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                elementwise(grads, a, &|k| 1.0 / vb[k]);
                elementwise(grads, b, &|k| -va[k] / (vb[k] * vb[k]));
            }
            &Op::Neg(x) => elementwise(grads, x, &|_| -1.0),
            &Op::Scale(x, c) => elementwise(grads, x, &|_| c),
            &Op::AddScalar(x) => elementwise(grads, x, &|_| 1.0),
            &Op::ClampMin(x, lo) => {
                let vx = val(x);
                elementwise(grads, x, &|k| if vx[k] > lo { 1.0 } else { 0.0 });
            }
            &Op::Sigmoid(x) => elementwise(grads, x, &|k| y[k] * (1.0 - y[k])),
            &Op::Tanh(x) => elementwise(grads, x, &|k| 1.0 - y[k] * y[k]),
            &Op::Exp(x) => elementwise(grads, x, &|k| y[k]),
            &Op::Log(x) => {
                let vx = val(x);
                elementwise(grads, x, &|k| 1.0 / vx[k]);
            }
            &Op::Sqrt(x) => elementwise(grads, x, &|k| 0.5 / y[k]),
            &Op::Gelu(x) => {
                let vx = val(x);
                elementwise(grads, x, &|k| gelu_grad(vx[k]));
            }
            &Op::Softmax { x, axis } | &Op::LogSoftmax { x, axis } => {
                if !rg(x) {
                    return;
                }
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, n, inner) = split_axis(node.value.shape(), axis).expect("checked");
                Self::accumulate(grads, x, y.len(), |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + i;
                            if log {
                                // dx = g - softmax * sum(g)
                                let s: f64 = (0..n).map(|k| gout[at(k)]).sum();
                                for k in 0..n {
                                    g[at(k)] += gout[at(k)] - y[at(k)].exp() * s;
                                }
                            } else {
                                // dx = y * (g - <g, y>)
                                let s: f64 = (0..n).map(|k| gout[at(k)] * y[at(k)]).sum();
                                for k in 0..n {
                                    g[at(k)] += y[at(k)] * (gout[at(k)] - s);
                                }
                            }
                        }
                    }
                });
            }
            &Op::Sum { x, axis } | &Op::Mean { x, axis } => {
                if !rg(x) {
                    return;
                }
                let mean = matches!(node.op, Op::Mean { .. });
                let xshape = self.shape(x);
                match axis {
                    None => {
                        let c = if mean {
                            gout[0] / len(x) as f64
                        } else {
                            gout[0]
                        };
                        Self::accumulate(grads, x, len(x), |g| g.iter_mut().for_each(|v| *v += c));
                    }
                    Some(axis) => {
                        let (outer, n, inner) = split_axis(xshape, axis).expect("checked");
                        let s = if mean { 1.0 / n as f64 } else { 1.0 };
                        Self::accumulate(grads, x, len(x), |g| {
                            for o in 0..outer {
                                for k in 0..n {
                                    for i in 0..inner {
                                        g[o * n * inner + k * inner + i] += gout[o * inner + i] * s;
                                    }
                                }
                            }
                        });
                    }
                }
            }
            &Op::Transpose(x) => {
                if rg(x) {
                    let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                    let back = transpose_raw(gout, c, r);
                    Self::accumulate(grads, x, r * c, |g| {
                        g.iter_mut().zip(&back).for_each(|(a, b)| *a += b)
                    });
                }
            }
            &Op::Reshape(x) => elementwise(grads, x, &|_| 1.0),
            Op::Gather { x, idx } => {
                if rg(*x) {
                    Self::accumulate(grads, *x, len(*x), |g| {
                        for (k, &i) in idx.iter().enumerate() {
                            g[i] += gout[k];
                        }
                    });
                }
            }
            &Op::AddBias(x, b) => {
                elementwise(grads, x, &|_| 1.0);
                if rg(b) {
                    let n = len(b);
                    Self::accumulate(grads, b, n, |g| {
                        for row in gout.chunks(n) {
                            g.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                    });
                }
            }
            &Op::BroadcastRows(v) => {
                if rg(v) {
                    let n = len(v);
                    Self::accumulate(grads, v, n, |g| {
                        for row in gout.chunks(n) {
                            g.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = len(p);
                    if rg(p) {
                        Self::accumulate(grads, p, l, |g| {
                            g.iter_mut()
                                .zip(&gout[off..off + l])
                                .for_each(|(a, b)| *a += b)
                        });
                    }
                    off += l;
                }
            }
            &Op::SliceCols { x, start } => {
                if rg(x) {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let w = node.value.shape()[1];
                    Self::accumulate(grads, x, m * n, |g| {
                        for i in 0..m {
                            for j in 0..w {
                                g[i * n + start + j] += gout[i * w + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if rg(p) {
                        Self::accumulate(grads, p, m * w, |g| {
                            for i in 0..m {
                                for j in 0..w {
                                    g[i * w + j] += gout[i * n + col + j];
                                }
                            }
                        });
                    }
                    col += w;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let gv = val(*gain);
                if rg(*x) {
                    Self::accumulate(grads, *x, m * n, |g| {
                        for i in 0..m {
                            let row = i * n..(i + 1) * n;
                            let dz: Vec<f64> =
                                row.clone().map(|k| gout[k] * gv[k - i * n]).collect();
                            let sum_dz: f64 = dz.iter().sum();
                            let sum_dz_z: f64 =
                                dz.iter().zip(&normed[row.clone()]).map(|(a, b)| a * b).sum();
                            for (j, k) in row.enumerate() {
                                g[k] += inv_std[i] / n as f64
                                    * (n as f64 * dz[j] - sum_dz - normed[k] * sum_dz_z);
                            }
                        }
                    });
                }
                if rg(*gain) {
                    Self::accumulate(grads, *gain, n, |g| {
                        for k in 0..m * n {
                            g[k % n] += gout[k] * normed[k];
                        }
                    });
                }
                if rg(*bias) {
                    Self::accumulate(grads, *bias, n, |g| {
                        for k in 0..m * n {
                            g[k % n] += gout[k];
                        }
                    });
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if rg(*x) {
                    let n = node.value.shape()[1];
                    Self::accumulate(grads, *x, y.len(), |g| {
                        for (i, &norm) in norms.iter().enumerate() {
                            let row = i * n..(i + 1) * n;
                            let zdot: f64 = row.clone().map(|k| y[k] * gout[k]).sum();
                            for k in row {
                                g[k] += (gout[k] - y[k] * zdot) / norm;
                            }
                        }
                    });
                }
            }
        }
    }
}
