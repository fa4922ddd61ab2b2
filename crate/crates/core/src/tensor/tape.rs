use super::kernels::{self, Conv2dDims};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param(ParamId),
    Gather { table: ParamId, ids: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Affine { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Log(Var),
    Sum(Var),
    Interaction(Var, Var),
    Reverse(Var, f64),
    SqNorm { param: ParamId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Gather { .. } => "gather",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Interaction(..) => "dot_interaction",
            Op::Reverse(..) => "grad_reverse",
            Op::SqNorm { .. } => "sq_norm",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it;
/// [`Tape::backward`] walks the nodes in exact reverse order.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Backward {
    nodes: Vec<Option<Vec<f64>>>,
    pub params: Gradients,
}

impl Backward {
    /// Gradient of the loss with respect to a tape node, if it needed one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { op: op.to_string() })
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(64),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
        }
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        check_finite(op.name(), &data)?;
        let needs_grad = match &op {
            Op::Input => false,
            Op::Leaf | Op::Param(_) | Op::Gather { .. } | Op::SqNorm { .. } => true,
            Op::Conv1d { x, w, b } | Op::Conv2d { x, w, b } => {
                self.needs(*x) || self.needs(*w) || self.needs(*b)
            }
            Op::MaxPool { x, .. }
            | Op::Scale(x, _)
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Reverse(x, _) => self.needs(*x),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Interaction(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Concat { xs, .. } => xs.iter().any(|x| self.needs(*x)),
            Op::Affine { x, w, b } => {
                self.needs(*x) || self.needs(*w) || b.is_some_and(|b| self.needs(b))
            }
        };
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t.shape, t.data, Op::Input)
    }

    /// Free variable whose gradient is reported by [`Backward::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t.shape, t.data, Op::Leaf)
    }

    /// References a stored parameter without copying it.
    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a node's value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.tensor(v);
        self.input(t)
    }

    /// Row lookup into a `[rows × width]` parameter table.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = self.params.get(table);
        if t.shape().len() != 2 {
            return Err(Error::dim("gather", format!("table shape {:?}", t.shape())));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            if i >= rows {
                return Err(Error::dim("gather", format!("id {i} out of range {rows}")));
            }
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        if ids.is_empty() {
            return Err(Error::dim("gather", "empty id list"));
        }
        self.push(
            vec![ids.len(), width],
            data,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Valid stride-1 convolution over a `[len × dim]` sequence with
    /// `[window × dim × channels]` filters.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 3 || bs.len() != 1 || ws[1] != xs[1] || ws[2] != bs[0] {
            return Err(Error::dim(
                "conv1d",
                format!("input {xs:?}, filters {ws:?}, bias {bs:?}"),
            ));
        }
        if ws[0] > xs[0] {
            return Err(Error::dim(
                "conv1d",
                format!("window {} exceeds input {xs:?}", ws[0]),
            ));
        }
        let (dim, window, ch) = (xs[1], ws[0], ws[2]);
        let out_len = xs[0] + 1 - window;
        let out = kernels::conv1d(self.value(x), dim, self.value(w), self.value(b), window);
        self.push(vec![out_len, ch], out, Op::Conv1d { x, w, b })
    }

    /// Valid stride-1 convolution over `[h × w × cin]` with
    /// `[kh × kw × cin × cout]` filters.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 || ws[2] != xs[2] || ws[3] != bs[0] {
            return Err(Error::dim(
                "conv2d",
                format!("input {xs:?}, filters {ws:?}, bias {bs:?}"),
            ));
        }
        if ws[0] > xs[0] || ws[1] > xs[1] {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {ws:?} larger than input {xs:?}"),
            ));
        }
        let d = Conv2dDims {
            h: xs[0],
            w: xs[1],
            cin: xs[2],
            kh: ws[0],
            kw: ws[1],
            cout: ws[3],
        };
        let out = kernels::conv2d(self.value(x), self.value(w), self.value(b), d);
        self.push(vec![d.out_h(), d.out_w(), d.cout], out, Op::Conv2d { x, w, b })
    }

    /// Max pooling over `[h × w × c]`; partial windows at the edges are dropped.
    pub fn maxpool2d(&mut self, x: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::dim("maxpool2d", format!("input {xs:?} is not rank 3")));
        }
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::dim("maxpool2d", "zero window or stride"));
        }
        if window.0 > xs[0] || window.1 > xs[1] {
            return Err(Error::dim(
                "maxpool2d",
                format!("window {window:?} larger than input {xs:?}"),
            ));
        }
        let dims = (xs[0], xs[1], xs[2]);
        let oh = (dims.0 - window.0) / stride.0 + 1;
        let ow = (dims.1 - window.1) / stride.1 + 1;
        let (out, argmax) = kernels::maxpool2d(self.value(x), dims, window, stride);
        self.push(vec![oh, ow, dims.2], out, Op::MaxPool { x, argmax })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(self.shape(a).to_vec(), out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, inner)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("shapes {base:?} and {s:?}")));
            }
            total += s[axis];
        }
        let (outer, inner) = Self::split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, inner) = Self::split_at_axis(&s, axis);
        let full = s[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        let v = self.value(x);
        for o in 0..outer {
            out.extend_from_slice(&v[o * full + start * inner..o * full + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(shape, out, Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} to {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        self.push(shape, out, Op::Reshape(x))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, vec![n])
    }

    /// `x W + b` with `x` read as a flat vector of length `din`, `W: [din × dout]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w);
        let din = self.value(x).len();
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::dim(
                "affine",
                format!("input {:?}, weights {ws:?}", self.shape(x)),
            ));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim(
                    "affine",
                    format!("bias {:?} for output {dout}", self.shape(b)),
                ));
            }
        }
        let out = kernels::affine(self.value(x), self.value(w), b.map(|b| self.value(b)), dout);
        self.push(vec![dout], out, Op::Affine { x, w, b })
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), out, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Log(x), f64::ln)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let width = *self.shape(x).last().unwrap();
        let out = kernels::softmax_rows(self.value(x), width);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    /// `M[i, j] = <a_i, b_j>` for row matrices `a: [m × d]`, `b: [n × d]`.
    pub fn dot_interaction(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("dot_interaction", format!("shapes {sa:?} and {sb:?}")));
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let out = kernels::interaction(self.value(a), self.value(b), d);
        self.push(vec![m, n], out, Op::Interaction(a, b))
    }

    /// Identity forward; multiplies the incoming gradient by `-scale` backward.
    pub fn grad_reverse(&mut self, x: Var, scale: f64) -> Result<Var> {
        let out = self.value(x).to_vec();
        self.push(self.shape(x).to_vec(), out, Op::Reverse(x, scale))
    }

    /// Squared Frobenius norm of a stored parameter, excluding a padding row.
    pub fn param_sq_norm(&mut self, id: ParamId) -> Result<Var> {
        let p = self.params.param(id);
        let skip = if p.pad_row { p.value.shape()[1] } else { 0 };
        let s = p.value.data()[skip..].iter().map(|v| v * v).sum();
        self.push(vec![1], vec![s], Op::SqNorm { param: id })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut params = Gradients::new(self.params.len());
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            check_finite(node.op.name(), &g)?;
            self.backward_node(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        if let Some(id) = params.first_non_finite() {
            return Err(Error::Numeric {
                op: format!("gradient of {}", self.params.name(id)),
            });
        }
        Ok(Backward {
            nodes: grads,
            params,
        })
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut Gradients,
    ) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(dst) => {
                    for (a, b) in dst.iter_mut().zip(&d) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Input | Op::Leaf => {}
            Op::Param(id) => params.add_dense(*id, g),
            Op::Gather { table, ids } => {
                let pad = self.params.param(*table).pad_row;
                let width = node.shape[1];
                for (r, &id) in ids.iter().enumerate() {
                    if pad && id == 0 {
                        continue;
                    }
                    params.add_row(*table, id, &g[r * width..(r + 1) * width]);
                }
            }
            Op::SqNorm { param } => {
                let p = self.params.param(*param);
                let skip = if p.pad_row { p.value.shape()[1] } else { 0 };
                let mut d: Vec<f64> = p.value.data().iter().map(|v| 2.0 * v * g[0]).collect();
                d[..skip].fill(0.0);
                params.add_dense_owned(*param, d);
            }
            Op::Conv1d { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let r = kernels::conv1d_backward(
                    g,
                    self.value(*x),
                    xs[1],
                    self.value(*w),
                    ws[2],
                    ws[0],
                    [needs(*x), needs(*w), needs(*b)],
                );
                if let Some(d) = r.dx {
                    acc(grads, *x, d);
                }
                if let Some(d) = r.dw {
                    acc(grads, *w, d);
                }
                if let Some(d) = r.db {
                    acc(grads, *b, d);
                }
            }
            Op::Conv2d { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let dims = Conv2dDims {
                    h: xs[0],
                    w: xs[1],
                    cin: xs[2],
                    kh: ws[0],
                    kw: ws[1],
                    cout: ws[3],
                };
                let r = kernels::conv2d_backward(
                    g,
                    self.value(*x),
                    self.value(*w),
                    dims,
                    [needs(*x), needs(*w), needs(*b)],
                );
                if let Some(d) = r.dx {
                    acc(grads, *x, d);
                }
                if let Some(d) = r.dw {
                    acc(grads, *w, d);
                }
                if let Some(d) = r.db {
                    acc(grads, *b, d);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    d[i] += gv;
                }
                acc(grads, *x, d);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    acc(grads, *a, d);
                }
                if needs(*b) {
                    let d = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    acc(grads, *b, d);
                }
            }
            Op::Scale(a, c) => acc(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Reverse(a, c) => acc(grads, *a, g.iter().map(|v| -v * c).collect()),
            Op::Concat { xs, axis } => {
                let (outer, inner) = Self::split_at_axis(&node.shape, *axis);
                let mut parts: Vec<Vec<f64>> = xs
                    .iter()
                    .map(|x| Vec::with_capacity(self.value(*x).len()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, x) in xs.iter().enumerate() {
                        let chunk = self.shape(*x)[*axis] * inner;
                        parts[k].extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (x, d) in xs.iter().zip(parts) {
                    acc(grads, *x, d);
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, inner) = Self::split_at_axis(s, *axis);
                let full = s[*axis] * inner;
                let len = node.shape[*axis] * inner;
                let mut d = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = o * full + start * inner;
                    d[dst..dst + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                acc(grads, *x, d);
            }
            Op::Reshape(x) => acc(grads, *x, g.to_vec()),
            Op::Affine { x, w, b } => {
                if needs(*x) {
                    let din = self.value(*x).len();
                    acc(grads, *x, kernels::affine_backward_x(g, self.value(*w), din));
                }
                if needs(*w) {
                    acc(grads, *w, kernels::affine_backward_w(g, self.value(*x)));
                }
                if let Some(b) = b {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let y = self.node_value(node);
                let d = g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                acc(grads, *x, d);
            }
            Op::Softmax(x) => {
                let y = self.node_value(node);
                let width = *node.shape.last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(width).zip(g.chunks(width)).zip(d.chunks_mut(width)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - s);
                    }
                }
                acc(grads, *x, d);
            }
            Op::Log(x) => {
                let d = g.iter().zip(self.value(*x)).map(|(gv, xv)| gv / xv).collect();
                acc(grads, *x, d);
            }
            Op::Sum(x) => acc(grads, *x, vec![g[0]; self.value(*x).len()]),
            Op::Interaction(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, n, d) = (sa[0], sb[0], sa[1]);
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let mut da = vec![0.0; m * d];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv != 0.0 {
                                for k in 0..d {
                                    da[i * d + k] += gv * vb[j * d + k];
                                }
                            }
                        }
                    }
                    acc(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; n * d];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv != 0.0 {
                                for k in 0..d {
                                    db[j * d + k] += gv * va[i * d + k];
                                }
                            }
                        }
                    }
                    acc(grads, *b, db);
                }
            }
        }
    }

    fn node_value<'a>(&'a self, node: &'a Node) -> &'a [f64] {
        match &node.value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.get(*id).data(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(t(&[3, 1], &[1.0, 2.0, 3.0])).unwrap();
        let w = tape.input(t(&[2, 1, 1], &[1.0, 1.0])).unwrap();
        let b = tape.input(t(&[1], &[0.0])).unwrap();
        let y = tape.conv1d(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[3.0, 5.0]);
        assert_eq!(tape.shape(y), &[2, 1]);

        let z = tape.input(Tensor::zeros(vec![4, 3])).unwrap();
        let wz = tape.input(t(&[4, 3, 2], &[0.7; 24])).unwrap();
        let bz = tape.input(Tensor::zeros(vec![2])).unwrap();
        let out = tape.conv1d(z, wz, bz).unwrap();
        assert_eq!(tape.shape(out), &[1, 2]);
        assert_eq!(tape.value(out), &[0.0, 0.0]);

        let bad = tape.input(Tensor::zeros(vec![2, 3, 2])).unwrap();
        let err = tape.conv1d(x, bad, bz).unwrap_err();
        assert!(err.to_string().contains("[3, 1]") && err.to_string().contains("[2, 3, 2]"));
    }

    #[test]
    fn conv2d_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let ones = tape.input(t(&[2, 2, 1, 1], &[1.0; 4])).unwrap();
        let zero_b = tape.input(t(&[1], &[0.0])).unwrap();
        let y = tape.conv2d(x, ones, zero_b).unwrap();
        assert_eq!(tape.value(y), &[10.0]);

        let id = tape.input(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = tape.conv2d(x, id, zero_b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zx = tape.input(Tensor::zeros(vec![3, 3, 2])).unwrap();
        let k = tape.input(t(&[2, 2, 2, 2], &[0.3; 16])).unwrap();
        let b = tape.input(t(&[2], &[0.25, -1.5])).unwrap();
        let y = tape.conv2d(zx, k, b).unwrap();
        assert_eq!(tape.value(y), &[0.25, -1.5].repeat(4)[..]);

        let big = tape.input(Tensor::zeros(vec![3, 3, 1, 1])).unwrap();
        assert!(matches!(tape.conv2d(x, big, zero_b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn maxpool_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tape.maxpool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(tape.value(y), &[4.0]);

        let c = tape.leaf(t(&[2, 2, 1], &[7.0; 4])).unwrap();
        let p = tape.maxpool2d(c, (2, 2), (2, 2)).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(tape.value(p), &[7.0]);
        assert_eq!(g.wrt(c).unwrap(), &[1.0, 0.0, 0.0, 0.0]);

        let x3 = tape.input(Tensor::zeros(vec![3, 3, 1])).unwrap();
        let p3 = tape.maxpool2d(x3, (2, 2), (2, 2)).unwrap();
        assert_eq!(tape.shape(p3), &[1, 1, 1]);

        assert!(tape.maxpool2d(x3, (4, 1), (1, 1)).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(t(&[2], &[3.0, 5.0])).unwrap();
        let b = tape.input(t(&[2], &[1.0, 2.0])).unwrap();
        let d = tape.sub(a, b).unwrap();
        assert_eq!(tape.value(d), &[2.0, 3.0]);
        let z = tape.sub(a, a).unwrap();
        assert_eq!(tape.value(z), &[0.0, 0.0]);
        let ones = tape.input(t(&[2], &[1.0, 1.0])).unwrap();
        let m = tape.mul(a, ones).unwrap();
        assert_eq!(tape.value(m), tape.value(a));
        let c = tape.input(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(tape.mul(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn concat_and_slice() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(t(&[2], &[1.0, 2.0])).unwrap();
        let b = tape.input(t(&[1], &[3.0])).unwrap();
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0]);
        let one = tape.concat(&[a], 0).unwrap();
        assert_eq!(tape.value(one), tape.value(a));
        let many = tape.concat(&[a, a, a, a], 0).unwrap();
        assert_eq!(tape.shape(many), &[8]);

        let m1 = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let m2 = tape.input(t(&[2, 1], &[5.0, 6.0])).unwrap();
        let mc = tape.concat(&[m1, m2], 1).unwrap();
        assert_eq!(tape.value(mc), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice(mc, 1, 2, 1).unwrap();
        assert_eq!(tape.value(back), tape.value(m2));
        assert!(tape.concat(&[m1, a], 0).is_err());
    }

    #[test]
    fn affine_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(t(&[2], &[1.0, 2.0])).unwrap();
        let w = tape.input(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let b = tape.input(t(&[1], &[0.5])).unwrap();
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[3.5]);

        let eye = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let zb = tape.input(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.affine(x, eye, Some(zb)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zx = tape.input(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.affine(zx, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), &[0.5]);
        assert!(tape.affine(b, w, None).is_err());
    }

    #[test]
    fn activation_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(t(&[2], &[-1.0, 2.0])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 2.0]);
        let z = tape.input(t(&[2], &[0.0, 0.0])).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
        let sm = tape.softmax(z).unwrap();
        assert_eq!(tape.value(sm), &[0.5, 0.5]);
        let big = tape.input(t(&[2], &[-700.0, 700.0])).unwrap();
        let s = tape.sigmoid(big).unwrap();
        assert!(tape.value(s).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn interaction_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 2.0])).unwrap();
        let b = tape.input(t(&[2, 2], &[3.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tape.dot_interaction(a, b).unwrap();
        assert_eq!(tape.value(m), &[3.0, 0.0, 0.0, 2.0]);

        let oh1 = tape.input(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 1., 0., 0.])).unwrap();
        let oh2 = tape.input(t(&[3, 3], &[0., 1., 0., 1., 0., 0., 0., 0., 1.])).unwrap();
        let m = tape.dot_interaction(oh1, oh2).unwrap();
        assert_eq!(tape.value(m), &[0., 1., 0., 1., 0., 0., 0., 1., 0.]);

        let c = tape.input(t(&[2, 3], &[0.0; 6])).unwrap();
        assert!(tape.dot_interaction(a, c).is_err());
    }

    #[test]
    fn backward_basics() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let s = tape.sum(x).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);
        let g = tape.backward(s2).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, -4.0, 1.0]);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(t(&[1], &[0.0])).unwrap();
        let err = tape.log(x).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref op } if op == "log"));
    }

    #[test]
    fn pad_row_gets_no_gradient() {
        let mut store = ParamStore::new();
        let emb = store.add_embedding("emb", t(&[3, 2], &[9.0, 9.0, 1.0, 2.0, 3.0, 4.0]));
        assert_eq!(&store.get(emb).data()[..2], &[0.0, 0.0]);
        let mut tape = Tape::new(&store);
        let rows = tape.gather(emb, &[0, 2, 0, 1]).unwrap();
        let s = tape.sum(rows).unwrap();
        let g = tape.backward(s).unwrap();
        let dense = g.params.dense(emb, 6);
        assert_eq!(dense, vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
