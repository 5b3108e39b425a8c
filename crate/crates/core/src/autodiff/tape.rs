use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnOp {
    Neg,
    Tanh,
    Sigmoid,
    HardTanh,
    Relu,
    Log,
    Exp,
    Abs,
}

#[derive(Debug)]
enum Op {
    Input,
    MatMul(Var, Var),
    Binary(BinOp, Var, Var),
    Unary(UnOp, Var),
    Scale(Var, Real),
    Shift(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Cumsum(Var),
    SuffixProduct(Var),
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward computation for reverse traversal.
///
/// Single-writer: build and backpropagate one graph per tape. Leaf gradients
/// accumulate across [`Tape::backward`] calls until [`Tape::zero_grad`].
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<HashMap<usize, Vec<Real>>>,
    params: RefCell<BTreeMap<String, Var>>,
    hardtanh_margin: Cell<Real>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    let shapes: Vec<String> = shapes.iter().map(|s| format!("{s:?}")).collect();
    Error::Shape {
        op,
        shapes: shapes.join(" vs "),
    }
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    Row(usize),
    Col(usize),
}

impl Bcast {
    fn of(out: &[usize], operand: &[usize]) -> Option<Bcast> {
        if out == operand {
            return Some(Bcast::Same);
        }
        if operand.iter().product::<usize>() == 1 {
            return Some(Bcast::Scalar);
        }
        if out.len() == 2 {
            if operand == [out[1]] {
                return Some(Bcast::Row(out[1]));
            }
            if operand == [out[0], 1] {
                return Some(Bcast::Col(out[1]));
            }
        }
        None
    }

    #[inline]
    fn index(self, k: usize) -> usize {
        match self {
            Bcast::Same => k,
            Bcast::Scalar => 0,
            Bcast::Row(cols) => k % cols,
            Bcast::Col(cols) => k / cols,
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Some(a.to_vec());
    }
    let (big, small) = if (na, a.len()) >= (nb, b.len()) {
        (a, b)
    } else {
        (b, a)
    };
    Bcast::of(big, small).map(|_| big.to_vec())
}

/// `(rows, inner, cols)` of a matrix product, treating a 1-D left operand as
/// a row vector and a 1-D right operand as a column vector.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, Vec<usize>)> {
    let (m, k1) = match a.len() {
        1 => (1, a[0]),
        2 => (a[0], a[1]),
        _ => return None,
    };
    let (k2, n) = match b.len() {
        1 => (b[0], 1),
        2 => (b[0], b[1]),
        _ => return None,
    };
    if k1 != k2 {
        return None;
    }
    let shape = match (a.len(), b.len()) {
        (2, 2) => vec![m, n],
        (2, 1) => vec![m],
        (1, 2) => vec![n],
        _ => vec![],
    };
    Some((m, k1, n, shape))
}

/// Groups of a softmax along `axis`: (group count, group length, stride
/// between groups' first elements, stride within a group).
fn softmax_layout(shape: &[usize], axis: usize) -> Option<(usize, usize, usize, usize)> {
    match (shape.len(), axis) {
        (1, 0) => Some((1, shape[0], 0, 1)),
        (2, 1) => Some((shape[0], shape[1], shape[1], 1)),
        (2, 0) => Some((shape[1], shape[0], 1, shape[1])),
        _ => None,
    }
}

fn softmax_in_place(data: &mut [Real], groups: usize, len: usize, gstride: usize, stride: usize) {
    for g in 0..groups {
        let base = g * gstride;
        let mut max = Real::NEG_INFINITY;
        for i in 0..len {
            max = max.max(data[base + i * stride]);
        }
        let mut sum = 0.0;
        for i in 0..len {
            let e = (data[base + i * stride] - max).exp();
            data[base + i * stride] = e;
            sum += e;
        }
        for i in 0..len {
            data[base + i * stride] /= sum;
        }
    }
}

fn log_sum_exp(xs: &[Real]) -> Real {
    let max = xs.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if max == Real::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<Real>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(HashMap::new()),
            params: RefCell::new(BTreeMap::new()),
            hardtanh_margin: Cell::new(Real::INFINITY),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Records a leaf. Gradients are kept for it iff `t.requires_grad()`.
    pub fn input(&self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Input, rg)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t.with_grad(false), Op::Input, false)
    }

    pub fn scalar(&self, v: Real) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn vector(&self, v: Vec<Real>) -> Var {
        self.constant(Tensor::vector(v))
    }

    /// Brings a named parameter onto the tape. Repeated requests for the
    /// same name return the same handle.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.borrow().get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?
            .clone();
        let v = self.input(value.with_grad(true));
        self.params.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn data(&self, v: Var) -> Vec<Real> {
        self.nodes.borrow()[v.0].value.data().to_vec()
    }

    pub fn item(&self, v: Var) -> Real {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Smallest `| |x| - 1 |` over every hardtanh input recorded so far; the
    /// function is not differentiable where this is zero.
    pub fn hardtanh_margin(&self) -> Real {
        self.hardtanh_margin.get()
    }

    // ---- forward operations ------------------------------------------------

    /// Matrix product. 1-D operands act as row (left) or column (right)
    /// vectors and the corresponding output axis is dropped.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n, shape) = matmul_dims(ta.shape(), tb.shape())
                .ok_or_else(|| shape_err("matmul", &[ta.shape(), tb.shape()]))?;
            let (ad, bd) = (ta.data(), tb.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(value, Op::MatMul(a, b), self.needs_grad(&[a, b])))
    }

    fn binary(&self, op: BinOp, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let shape = broadcast_shape(ta.shape(), tb.shape())
                .ok_or_else(|| shape_err(name, &[ta.shape(), tb.shape()]))?;
            let ba = Bcast::of(&shape, ta.shape()).expect("checked");
            let bb = Bcast::of(&shape, tb.shape()).expect("checked");
            let numel: usize = shape.iter().product();
            let (ad, bd) = (ta.data(), tb.data());
            let f: fn(Real, Real) -> Real = match op {
                BinOp::Add => |x, y| x + y,
                BinOp::Sub => |x, y| x - y,
                BinOp::Mul => |x, y| x * y,
                BinOp::Div => |x, y| x / y,
            };
            let data = (0..numel)
                .map(|k| f(ad[ba.index(k)], bd[bb.index(k)]))
                .collect();
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(value, Op::Binary(op, a, b), self.needs_grad(&[a, b])))
    }

    /// Elementwise sum. Either side may be a one-element tensor, a row
    /// vector `[n]` against `[m, n]`, or a column `[m, 1]` against `[m, n]`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, "add", a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, "sub", a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, "mul", a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, "div", a, b)
    }

    fn unary(&self, op: UnOp, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if let UnOp::HardTanh = op {
                let margin = t
                    .data()
                    .iter()
                    .map(|v| (v.abs() - 1.0).abs())
                    .fold(self.hardtanh_margin.get(), Real::min);
                self.hardtanh_margin.set(margin);
            }
            let f: fn(Real) -> Real = match op {
                UnOp::Neg => |v| -v,
                UnOp::Tanh => Real::tanh,
                UnOp::Sigmoid => |v| 1.0 / (1.0 + (-v).exp()),
                UnOp::HardTanh => |v| v.clamp(-1.0, 1.0),
                UnOp::Relu => |v| v.max(0.0),
                UnOp::Log => Real::ln,
                UnOp::Exp => Real::exp,
                UnOp::Abs => Real::abs,
            };
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        };
        self.push(value, Op::Unary(op, x), self.needs_grad(&[x]))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(UnOp::Neg, x)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(UnOp::Tanh, x)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(UnOp::Sigmoid, x)
    }

    /// `clamp(x, -1, 1)`; the derivative at `|x| = 1` is taken as 0.
    pub fn hardtanh(&self, x: Var) -> Var {
        self.unary(UnOp::HardTanh, x)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(UnOp::Relu, x)
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(UnOp::Log, x)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(UnOp::Exp, x)
    }

    /// `|x|`, with derivative 0 at 0.
    pub fn abs(&self, x: Var) -> Var {
        self.unary(UnOp::Abs, x)
    }

    pub fn scale(&self, x: Var, c: Real) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())
        };
        self.push(value, Op::Scale(x, c), self.needs_grad(&[x]))
    }

    /// `x + c` elementwise.
    pub fn shift(&self, x: Var, c: Real) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect())
        };
        self.push(value, Op::Shift(x), self.needs_grad(&[x]))
    }

    /// Concatenation. Along axis 0, operands of rank 0 and 1 are joined into
    /// one vector and rank-2 operands are stacked by rows; along axis 1,
    /// rank-2 operands are joined column-wise.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", &[]));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let ts: Vec<&Tensor> = parts.iter().map(|v| &nodes[v.0].value).collect();
            let shapes: Vec<&[usize]> = ts.iter().map(|t| t.shape()).collect();
            let ranks_le1 = ts.iter().all(|t| t.shape().len() <= 1);
            let all_rank2 = ts.iter().all(|t| t.shape().len() == 2);
            match axis {
                0 if ranks_le1 => {
                    let data: Vec<Real> =
                        ts.iter().flat_map(|t| t.data().iter().copied()).collect();
                    Tensor::from_parts(vec![data.len()], data)
                }
                0 if all_rank2 => {
                    let cols = ts[0].cols();
                    if ts.iter().any(|t| t.cols() != cols) {
                        return Err(shape_err("concat", &shapes));
                    }
                    let data: Vec<Real> =
                        ts.iter().flat_map(|t| t.data().iter().copied()).collect();
                    Tensor::from_parts(vec![data.len() / cols, cols], data)
                }
                1 if all_rank2 => {
                    let rows = ts[0].rows();
                    if ts.iter().any(|t| t.rows() != rows) {
                        return Err(shape_err("concat", &shapes));
                    }
                    let cols: usize = ts.iter().map(|t| t.cols()).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for t in &ts {
                            data.extend_from_slice(t.row(r));
                        }
                    }
                    Tensor::from_parts(vec![rows, cols], data)
                }
                _ => return Err(shape_err("concat", &shapes)),
            }
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            self.needs_grad(parts),
        ))
    }

    /// Stacks 1-D vectors of equal length into the rows of a matrix.
    pub fn stack(&self, rows: &[Var]) -> Result<Var> {
        let n = rows.len();
        let flat = self.concat(rows, 0)?;
        let total = self.nodes.borrow()[flat.0].value.numel();
        if n == 0 || !total.is_multiple_of(n) {
            return Err(shape_err("stack", &[&[n, total]]));
        }
        self.reshape(flat, &[n, total / n])
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let shape = t.shape();
            match (shape.len(), axis) {
                (1, 0) if start + len <= shape[0] => {
                    Tensor::from_parts(vec![len], t.data()[start..start + len].to_vec())
                }
                (2, 0) if start + len <= shape[0] => {
                    let c = shape[1];
                    Tensor::from_parts(
                        vec![len, c],
                        t.data()[start * c..(start + len) * c].to_vec(),
                    )
                }
                (2, 1) if start + len <= shape[1] => {
                    let mut data = Vec::with_capacity(shape[0] * len);
                    for r in 0..shape[0] {
                        data.extend_from_slice(&t.row(r)[start..start + len]);
                    }
                    Tensor::from_parts(vec![shape[0], len], data)
                }
                _ => return Err(shape_err("slice", &[shape, &[axis, start, len]])),
            }
        };
        Ok(self.push(value, Op::Slice { x, axis, start }, self.needs_grad(&[x])))
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(&self, x: Var, r: usize) -> Result<Var> {
        let cols = self.shape(x).get(1).copied().unwrap_or(0);
        let s = self.slice(x, 0, r, 1)?;
        self.reshape(s, &[cols])
    }

    /// Element `i` of a vector as a scalar.
    pub fn index(&self, x: Var, i: usize) -> Result<Var> {
        let s = self.slice(x, 0, i, 1)?;
        self.reshape(s, &[])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if shape.len() > 2 || shape.iter().product::<usize>() != t.numel() {
                return Err(shape_err("reshape", &[t.shape(), shape]));
            }
            Tensor::from_parts(shape.to_vec(), t.data().to_vec())
        };
        Ok(self.push(value, Op::Reshape(x), self.needs_grad(&[x])))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (groups, len, gs, s) = softmax_layout(t.shape(), axis)
                .ok_or_else(|| shape_err("softmax", &[t.shape(), &[axis]]))?;
            let mut data = t.data().to_vec();
            softmax_in_place(&mut data, groups, len, gs, s);
            Tensor::from_parts(t.shape().to_vec(), data)
        };
        Ok(self.push(value, Op::Softmax { x, axis }, self.needs_grad(&[x])))
    }

    /// Log-softmax of a vector.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 1 || t.numel() == 0 {
                return Err(shape_err("log_softmax", &[t.shape()]));
            }
            let lse = log_sum_exp(t.data());
            Tensor::from_parts(
                t.shape().to_vec(),
                t.data().iter().map(|v| v - lse).collect(),
            )
        };
        Ok(self.push(value, Op::LogSoftmax(x), self.needs_grad(&[x])))
    }

    pub fn sum(&self, x: Var) -> Var {
        let v = self.nodes.borrow()[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(x), self.needs_grad(&[x]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.data();
            d.iter().sum::<Real>() / d.len() as Real
        };
        self.push(Tensor::scalar(v), Op::Mean(x), self.needs_grad(&[x]))
    }

    /// Sum of several one-element tensors.
    pub fn add_all(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Ok(self.scalar(0.0));
        }
        let joined = self.concat(xs, 0)?;
        Ok(self.sum(joined))
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Rows `ids` of `table` stacked into `[ids.len(), cols]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            if t.shape().len() != 2 {
                return Err(shape_err("embedding", &[t.shape()]));
            }
            let (rows, cols) = (t.rows(), t.cols());
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(shape_err("embedding", &[t.shape(), &[id]]));
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::from_parts(vec![ids.len(), cols], data)
        };
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            self.needs_grad(&[table]),
        ))
    }

    /// Mean negative log-likelihood of `targets` under softmax of `logits`
    /// (`[classes]` with one target, or `[rows, classes]` with one per row).
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.0].value;
            let (rows, cols) = match t.shape().len() {
                1 => (1, t.cols()),
                2 => (t.rows(), t.cols()),
                _ => return Err(shape_err("cross_entropy", &[t.shape()])),
            };
            if targets.len() != rows || targets.iter().any(|&c| c >= cols) {
                return Err(shape_err("cross_entropy", &[t.shape(), targets]));
            }
            let mut total = 0.0;
            for (r, &c) in targets.iter().enumerate() {
                let row = &t.data()[r * cols..(r + 1) * cols];
                total += log_sum_exp(row) - row[c];
            }
            Tensor::scalar(total / rows as Real)
        };
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            self.needs_grad(&[logits]),
        ))
    }

    /// Inclusive prefix sums of a vector.
    pub fn cumsum(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 1 {
                return Err(shape_err("cumsum", &[t.shape()]));
            }
            let mut acc = 0.0;
            let data = t
                .data()
                .iter()
                .map(|v| {
                    acc += v;
                    acc
                })
                .collect();
            Tensor::from_parts(t.shape().to_vec(), data)
        };
        Ok(self.push(value, Op::Cumsum(x), self.needs_grad(&[x])))
    }

    /// For a vector `a` of length `m`, returns `m + 1` values with
    /// `out[p] = a[p] * a[p+1] * ... * a[m-1]` and `out[m] = 1`.
    pub fn suffix_product(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 1 {
                return Err(shape_err("suffix_product", &[t.shape()]));
            }
            let m = t.numel();
            let mut out = vec![1.0; m + 1];
            for p in (0..m).rev() {
                out[p] = out[p + 1] * t.data()[p];
            }
            Tensor::from_parts(vec![m + 1], out)
        };
        Ok(self.push(value, Op::SuffixProduct(x), self.needs_grad(&[x])))
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub fn straight_through(&self, hard: Tensor, soft: Var) -> Result<Var> {
        let soft_shape = self.shape(soft);
        if hard.shape() != soft_shape.as_slice() {
            return Err(shape_err("straight_through", &[hard.shape(), &soft_shape]));
        }
        Ok(self.push(
            hard.with_grad(false),
            Op::StraightThrough(soft),
            self.needs_grad(&[soft]),
        ))
    }

    /// `x W + b` for a vector or a batch of row vectors, with `W: [in, out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    // ---- reverse pass ------------------------------------------------------

    /// Backpropagates from a one-element `loss`, adding into the gradients of
    /// every leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let lt = &nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(shape_err("backward (loss must be scalar)", &[lt.shape()]));
        }
        let mut adj: Vec<Option<Vec<Real>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        fn acc<'a>(
            adj: &'a mut [Option<Vec<Real>>],
            nodes: &[Node],
            v: Var,
        ) -> Option<&'a mut Vec<Real>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.numel();
            Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
        }

        let mut grads = self.grads.borrow_mut();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Input => {
                    let slot = grads.entry(i).or_insert_with(|| vec![0.0; g.len()]);
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n, _) =
                        matmul_dims(ta.shape(), tb.shape()).expect("checked in forward");
                    let (ad, bd) = (ta.data(), tb.data());
                    if let Some(da) = acc(&mut adj, &nodes, *a) {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                da[i * k + p] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<Real>();
                            }
                        }
                    }
                    if let Some(db) = acc(&mut adj, &nodes, *b) {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ad[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += aip * gv;
                                }
                            }
                        }
                    }
                }
                Op::Binary(op, a, b) => {
                    let shape = node.value.shape();
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ba = Bcast::of(shape, ta.shape()).expect("checked in forward");
                    let bb = Bcast::of(shape, tb.shape()).expect("checked in forward");
                    let (ad, bd) = (ta.data(), tb.data());
                    if let Some(da) = acc(&mut adj, &nodes, *a) {
                        for (k, gk) in g.iter().enumerate() {
                            da[ba.index(k)] += match op {
                                BinOp::Add | BinOp::Sub => *gk,
                                BinOp::Mul => gk * bd[bb.index(k)],
                                BinOp::Div => gk / bd[bb.index(k)],
                            };
                        }
                    }
                    if let Some(db) = acc(&mut adj, &nodes, *b) {
                        for (k, gk) in g.iter().enumerate() {
                            let bv = bd[bb.index(k)];
                            db[bb.index(k)] += match op {
                                BinOp::Add => *gk,
                                BinOp::Sub => -gk,
                                BinOp::Mul => gk * ad[ba.index(k)],
                                BinOp::Div => -gk * ad[ba.index(k)] / (bv * bv),
                            };
                        }
                    }
                }
                Op::Unary(op, x) => {
                    let xd = nodes[x.0].value.data();
                    if let Some(dx) = acc(&mut adj, &nodes, *x) {
                        for k in 0..g.len() {
                            let (xv, yv) = (xd[k], y[k]);
                            dx[k] += g[k]
                                * match op {
                                    UnOp::Neg => -1.0,
                                    UnOp::Tanh => 1.0 - yv * yv,
                                    UnOp::Sigmoid => yv * (1.0 - yv),
                                    UnOp::HardTanh => {
                                        if xv.abs() < 1.0 {
                                            1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                    UnOp::Relu => {
                                        if xv > 0.0 {
                                            1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                    UnOp::Log => 1.0 / xv,
                                    UnOp::Exp => yv,
                                    UnOp::Abs => {
                                        if xv > 0.0 {
                                            1.0
                                        } else if xv < 0.0 {
                                            -1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                };
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if let Some(dx) = acc(&mut adj, &nodes, *x) {
                        for (d, gv) in dx.iter_mut().zip(&g) {
                            *d += gv * c;
                        }
                    }
                }
                Op::Shift(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                    if let Some(dx) = acc(&mut adj, &nodes, *x) {
                        for (d, gv) in dx.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let rank2_cols = *axis == 1;
                    let mut offset = 0;
                    let out_cols = node.value.cols();
                    for p in parts {
                        let pt = &nodes[p.0].value;
                        let (numel, pc, pr) = (pt.numel(), pt.cols(), pt.rows());
                        if let Some(dp) = acc(&mut adj, &nodes, *p) {
                            if rank2_cols {
                                for r in 0..pr {
                                    for c in 0..pc {
                                        dp[r * pc + c] += g[r * out_cols + offset + c];
                                    }
                                }
                            } else {
                                for (d, gv) in dp.iter_mut().zip(&g[offset..offset + numel]) {
                                    *d += gv;
                                }
                            }
                        }
                        offset += if rank2_cols { pc } else { numel };
                    }
                }
                Op::Slice { x, axis, start } => {
                    let xt = &nodes[x.0].value;
                    let xcols = xt.cols();
                    let shape = node.value.shape().to_vec();
                    if let Some(dx) = acc(&mut adj, &nodes, *x) {
                        match (shape.len(), axis) {
                            (2, 1) => {
                                let (rows, len) = (shape[0], shape[1]);
                                for r in 0..rows {
                                    for c in 0..len {
                                        dx[r * xcols + start + c] += g[r * len + c];
                                    }
                                }
                            }
                            (2, 0) => {
                                let base = start * xcols;
                                for (k, gv) in g.iter().enumerate() {
                                    dx[base + k] += gv;
                                }
                            }
                            _ => {
                                for (k, gv) in g.iter().enumerate() {
                                    dx[start + k] += gv;
                                }
                            }
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let (groups, len, gs, s) =
                        softmax_layout(node.value.shape(), *axis).expect("checked");
                    if let Some(dx) = acc(&mut adj, &nodes, *x) {
                        for grp in 0..groups {
                            let base = grp * gs;
                            let dotp: Real =
                                (0..len).map(|i| g[base + i * s] * y[base + i * s]).sum();
                            for i in 0..len {
                                let k = base + i * s;
                                dx[k] += y[k] * (g[k] - dotp);
                            }
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    if let Some(dx) = acc(&mut adj, &nodes, *x) {
                        let total: Real = g.iter().sum();
                        for k in 0..g.len() {
                            dx[k] += g[k] - y[k].exp() * total;
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(dx) = acc(&mut adj, &nodes, *x) {
                        dx.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(dx) = acc(&mut adj, &nodes, *x) {
                        let scale = g[0] / dx.len() as Real;
                        dx.iter_mut().for_each(|d| *d += scale);
                    }
                }
                Op::Gather { table, ids } => {
                    let cols = nodes[table.0].value.cols();
                    if let Some(dt) = acc(&mut adj, &nodes, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            for c in 0..cols {
                                dt[id * cols + c] += g[r * cols + c];
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let lt = &nodes[logits.0].value;
                    let cols = lt.cols();
                    let rows = targets.len();
                    let ld = lt.data();
                    if let Some(dl) = acc(&mut adj, &nodes, *logits) {
                        let scale = g[0] / rows as Real;
                        for (r, &c) in targets.iter().enumerate() {
                            let row = &ld[r * cols..(r + 1) * cols];
                            let lse = log_sum_exp(row);
                            for j in 0..cols {
                                let p = (row[j] - lse).exp();
                                let t = if j == c { 1.0 } else { 0.0 };
                                dl[r * cols + j] += scale * (p - t);
                            }
                        }
                    }
                }
                Op::Cumsum(x) => {
                    if let Some(dx) = acc(&mut adj, &nodes, *x) {
                        let mut run = 0.0;
                        for k in (0..g.len()).rev() {
                            run += g[k];
                            dx[k] += run;
                        }
                    }
                }
                Op::SuffixProduct(x) => {
                    let a = nodes[x.0].value.data();
                    if let Some(dx) = acc(&mut adj, &nodes, *x) {
                        // d out[p] / d a[k] = prod(a[p..k]) * out[k+1] for p <= k.
                        for k in 0..a.len() {
                            let after = y[k + 1];
                            let mut prefix = 1.0;
                            let mut total = 0.0;
                            for p in (0..=k).rev() {
                                total += g[p] * prefix;
                                if p > 0 {
                                    prefix *= a[p - 1];
                                }
                            }
                            dx[k] += total * after;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any was computed.
    pub fn grad(&self, v: Var) -> Option<Vec<Real>> {
        self.grads.borrow().get(&v.0).cloned()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Adds the gradients of every parameter brought onto this tape into
    /// `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        let grads = self.grads.borrow();
        for (name, v) in self.params.borrow().iter() {
            if let Some(g) = grads.get(&v.0) {
                store.add_grad(name, g)?;
            }
        }
        Ok(())
    }
}
