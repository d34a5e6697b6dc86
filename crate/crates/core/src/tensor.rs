//! Dense f64 tensors and a define-by-run reverse-mode tape.
//!
//! Every tensor is viewed as a row-major matrix: the last dimension is the
//! column count and all leading dimensions fold into rows. Rank-1 tensors are
//! single rows. Binary elementwise ops broadcast the right operand when its
//! row or column count is 1.

use std::fmt;

use crate::error::{Error, Result};

/// A dense row-major array of f64 values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Tensor {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `scale * g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[f64], scale: f64) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        let acc = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, &v) in acc.iter_mut().zip(g) {
            *a += scale * v;
        }
        Ok(())
    }

    /// Row/column view used by every op.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&c, lead)) => (lead.iter().product(), c),
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
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
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: Axis,
    },
    Slice {
        x: Var,
        axis: Axis,
        start: usize,
    },
    Sum(Var),
    SumCols(Var),
    Mean(Var),
    Transpose(Var),
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Fault-injection switch used to prove the gradient checker catches broken
/// backward rules. Never enabled outside verification runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FaultInjection {
    #[default]
    None,
    /// Doubles the gradient that flows through every softmax.
    SoftmaxBackward,
    /// Flips the sign of the gain gradient in layer norm.
    LayerNormBackward,
}

impl FaultInjection {
    pub fn op_name(self) -> &'static str {
        match self {
            FaultInjection::None => "none",
            FaultInjection::SoftmaxBackward => "softmax",
            FaultInjection::LayerNormBackward => "layer_norm",
        }
    }
}

/// Operation record for one forward pass. Dropping the tape frees every
/// intermediate buffer.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: FaultInjection,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn with_fault(fault: FaultInjection) -> Tape {
        Tape {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are tracked when the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims2(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.value.len() != 1 {
            return Err(Error::NotScalar(n.shape.clone()));
        }
        Ok(n.value[0])
    }

    /// Copies a node out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() > 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = dims2(&sa);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        let ng = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul(a, b), ng))
    }

    fn broadcast_check(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (ra, ca) = self.dims2(a);
        let (rb, cb) = self.dims2(b);
        let ok = (rb == ra || rb == 1) && (cb == ca || cb == 1);
        if !ok {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (ra, ca) = self.dims2(a);
        let (rb, cb) = self.dims2(b);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(va.len());
        for i in 0..ra {
            let bi = if rb == 1 { 0 } else { i };
            for j in 0..ca {
                let bj = if cb == 1 { 0 } else { j };
                out.push(f(va[i * ca + j], vb[bi * cb + bj]));
            }
        }
        out
    }

    /// Elementwise `a + b`; `b` may broadcast over rows or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let out = self.binary(a, b, |x, y| x + y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let out = self.binary(a, b, |x, y| x - y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let out = self.binary(a, b, |x, y| x * y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + s).collect();
        let ng = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Softmax over the last dimension, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if c == 0 || self.value(a).is_empty() {
            return Err(Error::Empty("softmax"));
        }
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for i in 0..r {
            softmax_row(&x[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), ng))
    }

    /// Row-wise layer normalization followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; xv.len()];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Selects rows of a `[n × d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather needs a matrix table, got {:?}", s)));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {} out of range for {} rows", bad, n)));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.needs(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims2(p)).collect();
        let (r0, c0) = dims[0];
        let (rows, cols) = match axis {
            Axis::Rows => {
                if dims.iter().any(|d| d.1 != c0) {
                    return Err(shape_err("concat", self.shape(parts[0]), self.shape(parts[1])));
                }
                (dims.iter().map(|d| d.0).sum(), c0)
            }
            Axis::Cols => {
                if dims.iter().any(|d| d.0 != r0) {
                    return Err(shape_err("concat", self.shape(parts[0]), self.shape(parts[1])));
                }
                (r0, dims.iter().map(|d| d.1).sum())
            }
        };
        let mut out = Vec::with_capacity(rows * cols);
        match axis {
            Axis::Rows => {
                for &p in parts {
                    out.extend_from_slice(self.value(p));
                }
            }
            Axis::Cols => {
                for i in 0..rows {
                    for (&p, &(_, c)) in parts.iter().zip(&dims) {
                        out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                    }
                }
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Contiguous range `[start, start + len)` along `axis`; result is 2-D.
    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        let extent = if axis == Axis::Rows { r } else { c };
        if start + len > extent {
            return Err(Error::Shape(format!(
                "slice [{}, {}) exceeds extent {} of shape {:?}",
                start,
                start + len,
                extent,
                self.shape(x)
            )));
        }
        let v = self.value(x);
        let (out, shape) = match axis {
            Axis::Rows => (v[start * c..(start + len) * c].to_vec(), vec![len, c]),
            Axis::Cols => {
                let mut o = Vec::with_capacity(r * len);
                for i in 0..r {
                    o.extend_from_slice(&v[i * c + start..i * c + start + len]);
                }
                (o, vec![r, len])
            }
        };
        let ng = self.needs(&[x]);
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, ng))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.needs(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    /// Sum along the last dimension, producing an `[rows × 1]` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (r, c) = self.dims2(x);
        let v = self.value(x);
        let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        let ng = self.needs(&[x]);
        self.push(vec![r, 1], out, Op::SumCols(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(&[x]);
        Ok(self.push(vec![1], vec![m], Op::Mean(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims2(x);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.needs(&[x]);
        self.push(vec![c, r], out, Op::Transpose(x), ng)
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "mask of length {} for shape {:?}",
                mask.len(),
                self.shape(x)
            )));
        }
        let out = self
            .value(x)
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let ng = self.needs(&[x]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Back-propagates from a scalar. Leaf gradients are added to whatever a
    /// previous backward pass left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (r, c) = dims2(&node.shape);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].needs_grad {
                    // dA = dC · Bᵀ
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, m * k);
                    for ii in 0..m {
                        let grow = &g[ii * n..(ii + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            ga[ii * k + kk] += dot(grow, brow);
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dC
                    let av = self.value(*a);
                    let gb = slot(grads, *b, k * n);
                    for ii in 0..m {
                        let grow = &g[ii * n..(ii + 1) * n];
                        for kk in 0..k {
                            let s = av[ii * k + kk];
                            if s != 0.0 {
                                let dst = &mut gb[kk * n..(kk + 1) * n];
                                dst.iter_mut().zip(grow).for_each(|(d, v)| *d += s * v);
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.nodes[a.0].needs_grad {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if self.nodes[b.0].needs_grad {
                    let (rb, cb) = self.dims2(*b);
                    let gb = slot(grads, *b, rb * cb);
                    for ii in 0..r {
                        let bi = if rb == 1 { 0 } else { ii };
                        for jj in 0..c {
                            let bj = if cb == 1 { 0 } else { jj };
                            gb[bi * cb + bj] += sign * g[ii * c + jj];
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (rb, cb) = self.dims2(*b);
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    let ga = slot(grads, *a, g.len());
                    for ii in 0..r {
                        let bi = if rb == 1 { 0 } else { ii };
                        for jj in 0..c {
                            let bj = if cb == 1 { 0 } else { jj };
                            ga[ii * c + jj] += g[ii * c + jj] * bv[bi * cb + bj];
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let gb = slot(grads, *b, rb * cb);
                    for ii in 0..r {
                        let bi = if rb == 1 { 0 } else { ii };
                        for jj in 0..c {
                            let bj = if cb == 1 { 0 } else { jj };
                            gb[bi * cb + bj] += g[ii * c + jj] * av[ii * c + jj];
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
            }
            Op::AddScalar(a) => {
                let ga = slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::Exp(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * y[j];
                }
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let ga = slot(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] / x[j];
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * (1.0 - y[j] * y[j]);
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let ga = slot(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * gelu_grad(x[j]);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let factor = if self.fault == FaultInjection::SoftmaxBackward {
                    2.0
                } else {
                    1.0
                };
                let ga = slot(grads, *a, g.len());
                for ii in 0..r {
                    let yr = &y[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let inner = dot(yr, gr);
                    for jj in 0..c {
                        ga[ii * c + jj] += factor * yr[jj] * (gr[jj] - inner);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                if self.nodes[gain.0].needs_grad {
                    let sign = if self.fault == FaultInjection::LayerNormBackward {
                        -1.0
                    } else {
                        1.0
                    };
                    let gg = slot(grads, *gain, c);
                    for ii in 0..r {
                        for jj in 0..c {
                            gg[jj] += sign * g[ii * c + jj] * xhat[ii * c + jj];
                        }
                    }
                }
                if self.nodes[bias.0].needs_grad {
                    let gb = slot(grads, *bias, c);
                    for ii in 0..r {
                        for jj in 0..c {
                            gb[jj] += g[ii * c + jj];
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let gx = slot(grads, *x, r * c);
                    let n = c as f64;
                    for ii in 0..r {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for jj in 0..c {
                            let d = g[ii * c + jj] * gv[jj];
                            sum_d += d;
                            sum_dx += d * xhat[ii * c + jj];
                        }
                        for jj in 0..c {
                            let d = g[ii * c + jj] * gv[jj];
                            gx[ii * c + jj] += inv_std[ii]
                                * (d - sum_d / n - xhat[ii * c + jj] * sum_dx / n);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = c;
                let n = self.shape(*table)[0];
                let gt = slot(grads, *table, n * d);
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&g[row * d..(row + 1) * d])
                        .for_each(|(a, v)| *a += v);
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.dims2(p);
                    if self.nodes[p.0].needs_grad {
                        let gp = slot(grads, p, pr * pc);
                        match axis {
                            Axis::Rows => {
                                for (d, v) in gp.iter_mut().zip(&g[offset * c..(offset + pr) * c]) {
                                    *d += v;
                                }
                            }
                            Axis::Cols => {
                                for ii in 0..pr {
                                    for jj in 0..pc {
                                        gp[ii * pc + jj] += g[ii * c + offset + jj];
                                    }
                                }
                            }
                        }
                    }
                    offset += if *axis == Axis::Rows { pr } else { pc };
                }
            }
            Op::Slice { x, axis, start } => {
                let (xr, xc) = self.dims2(*x);
                let gx = slot(grads, *x, xr * xc);
                match axis {
                    Axis::Rows => {
                        for (d, v) in gx[start * xc..(start + r) * xc].iter_mut().zip(g) {
                            *d += v;
                        }
                    }
                    Axis::Cols => {
                        for ii in 0..r {
                            for jj in 0..c {
                                gx[ii * xc + start + jj] += g[ii * c + jj];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let gx = slot(grads, *x, n);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumCols(x) => {
                let (xr, xc) = self.dims2(*x);
                let gx = slot(grads, *x, xr * xc);
                for ii in 0..xr {
                    for jj in 0..xc {
                        gx[ii * xc + jj] += g[ii];
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gx = slot(grads, *x, n);
                let s = g[0] / n as f64;
                gx.iter_mut().for_each(|d| *d += s);
            }
            Op::Transpose(x) => {
                // node is [c_x × r_x] = [r × c]; input is [c × r]
                let gx = slot(grads, *x, r * c);
                for ii in 0..r {
                    for jj in 0..c {
                        gx[jj * r + ii] += g[ii * c + jj];
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    if !mask[j] {
                        gx[j] += g[j];
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{}: incompatible shapes {:?} and {:?}", op, a, b))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let s = a[i * k + kk];
            if s == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, v)| *o += s * v);
        }
    }
    out
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(&mat(&[&[1., 2.], &[3., 4.]]));
        let id = tape.leaf(&mat(&[&[1., 0.], &[0., 1.]]));
        let b = tape.leaf(&mat(&[&[5., 6.], &[7., 8.]]));
        let ai = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(ai), &[1., 2., 3., 4.]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab), &[19., 22., 43., 50.]);
        assert_eq!(tape.shape(ab), &[2, 2]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{}", err);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let c = tape.leaf(&Tensor::vector(vec![0.7, 0.7, 0.7]));
        let s = tape.softmax(c).unwrap();
        for &p in tape.value(s) {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = tape.leaf(&Tensor::vector(vec![0.0, 2f64.ln()]));
        let s = tape.softmax(x).unwrap();
        assert_abs_diff_eq!(tape.value(s)[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(s)[1], 2.0 / 3.0, epsilon = 1e-12);
        let big = tape.leaf(&Tensor::vector(vec![1000.0, 1000.0]));
        let s = tape.softmax(big).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_empty() {
        let mut tape = Tape::new();
        let e = tape.leaf(&Tensor::vector(vec![]));
        assert!(matches!(tape.softmax(e), Err(Error::Empty(_))));
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_accumulates_across_passes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn backward_sum_of_softmax_is_flat() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![0.3, -1.2, 2.0]).with_requires_grad(true));
        let s = tape.softmax(x).unwrap();
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        for &g in tape.grad(x).unwrap() {
            assert_abs_diff_eq!(g, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn backward_softmax_cross_entropy() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![0.0, 0.0, 0.0]).with_requires_grad(true));
        let s = tape.softmax(x).unwrap();
        let l = tape.log(s);
        let pick = tape.constant(Tensor::vector(vec![-1.0, 0.0, 0.0]));
        let l = tape.mul(l, pick).unwrap();
        let loss = tape.sum(l);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_abs_diff_eq!(g[0], -2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[2], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn broadcast_row_and_column() {
        let mut tape = Tape::new();
        let a = tape.leaf(&mat(&[&[1., 2.], &[3., 4.]]));
        let row = tape.leaf(&Tensor::vector(vec![10., 20.]));
        let col = tape.leaf(&Tensor::new(vec![2, 1], vec![100., 200.]).unwrap());
        let r = tape.add(a, row).unwrap();
        assert_eq!(tape.value(r), &[11., 22., 13., 24.]);
        let c = tape.sub(a, col).unwrap();
        assert_eq!(tape.value(c), &[-99., -98., -197., -196.]);
        let bad = tape.leaf(&Tensor::vector(vec![1., 2., 3.]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0], 1.0).unwrap();
        t.accumulate_grad(&[1.0, 2.0], 1.0).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0], 1.0).is_err());
    }
}
