//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so tape order is already a topological order and the
//! backward pass is a single reverse sweep. Parameters are borrowed from a
//! [`ParamStore`] rather than copied onto the tape.
//!
//! Shape rules, per operation:
//!
//! | op | inputs | output |
//! |----|--------|--------|
//! | `matmul` | `[m,k]`, `[k,n]` | `[m,n]` |
//! | `matvec` | `[m,n]`, `[n]` | `[m]` |
//! | `matvec_t` | `[m,n]`, `[m]` | `[n]` |
//! | `matmul_nt` | `[n,d]`, `[a,d]` | `[n,a]` |
//! | `add`, `sub`, `mul` | equal shapes | same |
//! | `add_row` | `[n,a]`, `[a]` | `[n,a]` |
//! | `mul_scalar` | `[1]`, any | second operand's shape |
//! | `concat` | 1-D list | 1-D |
//! | `stack` | equal-length 1-D list | `[count, len]` |
//! | `softmax`, `log_softmax` | 1-D, or 2-D row-wise | same |
//! | `lookup` | `[V,d]`, index | `[d]` |
//! | `sum`, `mean`, `dot`, `select` | any | `[1]` |

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{GradStore, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatVec(Var, Var),
    MatVecT(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Stack(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Lookup(Var, usize),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Select(Var, usize),
    LogSumExpAt(Var, Vec<usize>),
    SumAt(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Records operations and replays them backwards.
///
/// A tape borrows its parameters immutably; gradients land in a separate
/// [`GradStore`] so a store can be read by many tapes and updated between them.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
    track_params: bool,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            track_params: true,
        }
    }

    /// A tape on which parameters are constants: nothing records gradients.
    pub fn frozen(params: &'p ParamStore) -> Self {
        Tape {
            track_params: false,
            ..Tape::new(params)
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
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First element of the node's value; intended for `[1]`-shaped results.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.to_vec()).expect("node shape invariant")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// A leaf that collects its own adjoint, readable from [`Gradients::get`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Param(id),
            requires_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Same value, but no gradient crosses this edge.
    pub fn detach(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).to_vec();
        self.push(shape, value, Op::Leaf, false)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn dims2(&self, v: Var) -> Option<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }

    fn dims1(&self, v: Var) -> Option<usize> {
        match self.shape(v) {
            &[n] => Some(n),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = match (self.dims2(a), self.dims2(b)) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(self.shape_err("matmul", a, b)),
        };
        debug_assert_eq!(k, k2);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x != 0.0 {
                    for (o, y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                        *o += x * y;
                    }
                }
            }
        }
        let g = self.grad_of(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), g))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = match (self.dims2(w), self.dims1(x)) {
            (Some((m, n)), Some(len)) if n == len => (m, n),
            _ => return Err(self.shape_err("matvec", w, x)),
        };
        let (wv, xv) = (self.value(w), self.value(x));
        let out = (0..m).map(|i| dot(&wv[i * n..(i + 1) * n], xv)).collect();
        let g = self.grad_of(&[w, x]);
        Ok(self.push(vec![m], out, Op::MatVec(w, x), g))
    }

    /// `vᵀ M`: a weighted sum of the rows of `m`.
    pub fn matvec_t(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = match (self.dims2(m), self.dims1(v)) {
            (Some((r, c)), Some(len)) if r == len => (r, c),
            _ => return Err(self.shape_err("matvec_t", m, v)),
        };
        let (mv, vv) = (self.value(m), self.value(v));
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            axpy(vv[i], &mv[i * cols..(i + 1) * cols], &mut out);
        }
        let g = self.grad_of(&[m, v]);
        Ok(self.push(vec![cols], out, Op::MatVecT(m, v), g))
    }

    /// `X Wᵀ` for `X: [n,d]`, `W: [a,d]`.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let ((n, d), a) = match (self.dims2(x), self.dims2(w)) {
            (Some((n, d)), Some((a, d2))) if d == d2 => ((n, d), a),
            _ => return Err(self.shape_err("matmul_nt", x, w)),
        };
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![0.0; n * a];
        for r in 0..n {
            let xr = &xv[r * d..(r + 1) * d];
            for c in 0..a {
                out[r * a + c] = dot(xr, &wv[c * d..(c + 1) * d]);
            }
        }
        let g = self.grad_of(&[x, w]);
        Ok(self.push(vec![n, a], out, Op::MatMulNt(x, w), g))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(self.shape_err(op, a, b))
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let g = self.grad_of(&[a, b]);
        self.push(shape, out, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds `v` to every row of `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = match (self.dims2(m), self.dims1(v)) {
            (Some((r, c)), Some(len)) if c == len => (r, c),
            _ => return Err(self.shape_err("add_row", m, v)),
        };
        let (mv, vv) = (self.value(m), self.value(v));
        let mut out = mv.to_vec();
        for r in 0..rows {
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(vv) {
                *o += x;
            }
        }
        let g = self.grad_of(&[m, v]);
        Ok(self.push(vec![rows, cols], out, Op::AddRow(m, v), g))
    }

    /// Scalar node `s` times every element of `x`.
    pub fn mul_scalar(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.shape_err("mul_scalar", s, x));
        }
        let k = self.scalar(s);
        let out = self.value(x).iter().map(|v| k * v).collect();
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[s, x]);
        Ok(self.push(shape, out, Op::MulScalar(s, x), g))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).iter().map(|v| k * v).collect();
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x]);
        self.push(shape, out, Op::Scale(x, k), g)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Adds a constant array (for example a `-inf` mask) to `x`.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "add_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let out = self.value(x).iter().zip(c).map(|(a, b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x]);
        Ok(self.push(shape, out, Op::AddConst(x), g))
    }

    /// `k - x`, elementwise.
    pub fn rsub_scalar(&mut self, k: f64, x: Var) -> Var {
        let n = self.value(x).len();
        let neg = self.neg(x);
        self.add_const(neg, &vec![k; n]).expect("length matches")
    }

    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let out = self.value(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x]);
        Ok(self.push(shape, out, Op::MulConst(x, c), g))
    }

    /// Inverted dropout: zero each element with probability `rate`, scale survivors
    /// by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(x, mask)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            if self.dims1(p).is_none() {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(p).to_vec(),
                    rhs: vec![],
                });
            }
            out.extend_from_slice(self.value(p));
        }
        let g = self.grad_of(parts);
        let n = out.len();
        Ok(self.push(vec![n], out, Op::Concat(parts.to_vec()), g))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        match self.dims1(x) {
            Some(n) if start + len <= n => {}
            _ => {
                return Err(Error::Shape {
                    op: "slice",
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![start, len],
                })
            }
        }
        let out = self.value(x)[start..start + len].to_vec();
        let g = self.grad_of(&[x]);
        Ok(self.push(vec![len], out, Op::Slice(x, start), g))
    }

    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let width = match self.dims1(*first) {
            Some(w) => w,
            None => return Err(self.shape_err("stack", *first, *first)),
        };
        let mut out = Vec::with_capacity(width * rows.len());
        for &r in rows {
            if self.dims1(r) != Some(width) {
                return Err(self.shape_err("stack", *first, r));
            }
            out.extend_from_slice(self.value(r));
        }
        let g = self.grad_of(rows);
        Ok(self.push(vec![rows.len(), width], out, Op::Stack(rows.to_vec()), g))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x]);
        self.push(shape, out, op, g)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    fn rows_of(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(x) {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            _ => Err(self.shape_err(op, x, x)),
        }
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rows_of(x, "softmax")?;
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x]);
        Ok(self.push(shape, out, Op::Softmax(x), g))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rows_of(x, "log_softmax")?;
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            log_softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.shape(x).to_vec();
        let g = self.grad_of(&[x]);
        Ok(self.push(shape, out, Op::LogSoftmax(x), g))
    }

    /// Row `index` of an embedding table.
    pub fn lookup(&mut self, table: Var, index: usize) -> Result<Var> {
        let (rows, cols) = match self.dims2(table) {
            Some(d) => d,
            None => return Err(self.shape_err("lookup", table, table)),
        };
        if index >= rows {
            return Err(Error::invalid(format!(
                "lookup index {index} out of range for table with {rows} rows"
            )));
        }
        let out = self.value(table)[index * cols..(index + 1) * cols].to_vec();
        let g = self.grad_of(&[table]);
        Ok(self.push(vec![cols], out, Op::Lookup(table, index), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let g = self.grad_of(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let g = self.grad_of(&[x]);
        self.push(vec![1], vec![m], Op::Mean(x), g)
    }

    /// Sum of a list of scalar nodes.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        match xs {
            [] => Ok(self.scalar_const(0.0)),
            [x] => Ok(*x),
            _ => {
                let c = self.concat(xs)?;
                Ok(self.sum(c))
            }
        }
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(self.shape_err("dot", a, b));
        }
        let d = dot(self.value(a), self.value(b));
        let g = self.grad_of(&[a, b]);
        Ok(self.push(vec![1], vec![d], Op::Dot(a, b), g))
    }

    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self.value(x).get(index).ok_or_else(|| {
            Error::invalid(format!(
                "select index {index} out of range for shape {:?}",
                self.shape(x)
            ))
        })?;
        let g = self.grad_of(&[x]);
        Ok(self.push(vec![1], vec![v], Op::Select(x, index), g))
    }

    /// `log Σ_{i ∈ indices} exp(x_i)`, for aggregating log-probabilities.
    pub fn log_sum_exp_at(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if indices.is_empty() || indices.iter().any(|&i| i >= v.len()) {
            return Err(Error::invalid(format!(
                "log_sum_exp_at indices {indices:?} invalid for shape {:?}",
                self.shape(x)
            )));
        }
        let out = log_sum_exp(indices.iter().map(|&i| v[i]));
        let g = self.grad_of(&[x]);
        Ok(self.push(vec![1], vec![out], Op::LogSumExpAt(x, indices.to_vec()), g))
    }

    /// `Σ_{i ∈ indices} x_i`; repeated indices count repeatedly.
    pub fn sum_at(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if indices.iter().any(|&i| i >= v.len()) {
            return Err(Error::invalid(format!(
                "sum_at indices {indices:?} invalid for shape {:?}",
                self.shape(x)
            )));
        }
        let out = indices.iter().map(|&i| v[i]).sum();
        let g = self.grad_of(&[x]);
        Ok(self.push(vec![1], vec![out], Op::SumAt(x, indices.to_vec()), g))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &dy, &mut adj);
            }
            adj[i] = Some(dy);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.requires_grad => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { adj, params })
    }

    fn propagate(&self, node: &Node<'p>, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a).unwrap();
                let n = self.dims2(*b).unwrap().1;
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, &|g| {
                    for i in 0..m {
                        for p in 0..k {
                            g[i * k + p] += dot(&dy[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                send(*b, &|g| {
                    for i in 0..m {
                        for p in 0..k {
                            axpy(
                                av[i * k + p],
                                &dy[i * n..(i + 1) * n],
                                &mut g[p * n..(p + 1) * n],
                            );
                        }
                    }
                });
            }
            Op::MatVec(w, x) => {
                let (m, n) = self.dims2(*w).unwrap();
                let (wv, xv) = (self.value(*w), self.value(*x));
                send(*w, &|g| {
                    for i in 0..m {
                        axpy(dy[i], xv, &mut g[i * n..(i + 1) * n]);
                    }
                });
                send(*x, &|g| {
                    for i in 0..m {
                        axpy(dy[i], &wv[i * n..(i + 1) * n], g);
                    }
                });
            }
            Op::MatVecT(mat, v) => {
                let (rows, cols) = self.dims2(*mat).unwrap();
                let (mv, vv) = (self.value(*mat), self.value(*v));
                send(*mat, &|g| {
                    for i in 0..rows {
                        axpy(vv[i], dy, &mut g[i * cols..(i + 1) * cols]);
                    }
                });
                send(*v, &|g| {
                    for i in 0..rows {
                        g[i] += dot(&mv[i * cols..(i + 1) * cols], dy);
                    }
                });
            }
            Op::MatMulNt(x, w) => {
                let (n, d) = self.dims2(*x).unwrap();
                let a = self.dims2(*w).unwrap().0;
                let (xv, wv) = (self.value(*x), self.value(*w));
                send(*x, &|g| {
                    for r in 0..n {
                        for c in 0..a {
                            axpy(
                                dy[r * a + c],
                                &wv[c * d..(c + 1) * d],
                                &mut g[r * d..(r + 1) * d],
                            );
                        }
                    }
                });
                send(*w, &|g| {
                    for r in 0..n {
                        for c in 0..a {
                            axpy(
                                dy[r * a + c],
                                &xv[r * d..(r + 1) * d],
                                &mut g[c * d..(c + 1) * d],
                            );
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &|g| axpy(1.0, dy, g));
                send(*b, &|g| axpy(1.0, dy, g));
            }
            Op::Sub(a, b) => {
                send(*a, &|g| axpy(1.0, dy, g));
                send(*b, &|g| axpy(-1.0, dy, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, &|g| {
                    for ((gi, d), y) in g.iter_mut().zip(dy).zip(bv) {
                        *gi += d * y;
                    }
                });
                send(*b, &|g| {
                    for ((gi, d), x) in g.iter_mut().zip(dy).zip(av) {
                        *gi += d * x;
                    }
                });
            }
            Op::AddRow(m, v) => {
                let cols = self.value(*v).len();
                send(*m, &|g| axpy(1.0, dy, g));
                send(*v, &|g| {
                    for row in dy.chunks(cols) {
                        axpy(1.0, row, g);
                    }
                });
            }
            Op::MulScalar(s, x) => {
                let k = self.scalar(*s);
                let xv = self.value(*x);
                send(*s, &|g| g[0] += dot(dy, xv));
                send(*x, &|g| axpy(k, dy, g));
            }
            Op::Scale(x, k) => send(*x, &|g| axpy(*k, dy, g)),
            Op::AddConst(x) => send(*x, &|g| axpy(1.0, dy, g)),
            Op::MulConst(x, c) => send(*x, &|g| {
                for ((gi, d), k) in g.iter_mut().zip(dy).zip(c) {
                    *gi += d * k;
                }
            }),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    send(*p, &|g| axpy(1.0, &dy[offset..offset + len], g));
                    offset += len;
                }
            }
            Op::Slice(x, start) => {
                send(*x, &|g| axpy(1.0, dy, &mut g[*start..*start + dy.len()]));
            }
            Op::Stack(rows) => {
                let width = dy.len() / rows.len();
                for (i, r) in rows.iter().enumerate() {
                    send(*r, &|g| axpy(1.0, &dy[i * width..(i + 1) * width], g));
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                send(*x, &|g| {
                    for ((gi, d), yi) in g.iter_mut().zip(dy).zip(y.iter()) {
                        *gi += d * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                send(*x, &|g| {
                    for ((gi, d), yi) in g.iter_mut().zip(dy).zip(y.iter()) {
                        *gi += d * yi * (1.0 - yi);
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                send(*x, &|g| {
                    for ((gi, d), xi) in g.iter_mut().zip(dy).zip(xv) {
                        *gi += d / xi;
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                send(*x, &|g| {
                    for ((gi, d), yi) in g.iter_mut().zip(dy).zip(y.iter()) {
                        *gi += d * yi;
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                send(*x, &|g| {
                    for ((gi, d), xi) in g.iter_mut().zip(dy).zip(xv) {
                        *gi += 2.0 * d * xi;
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                send(*x, &|g| {
                    for ((gr, dr), yr) in
                        g.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols))
                    {
                        let inner = dot(dr, yr);
                        for ((gi, d), yi) in gr.iter_mut().zip(dr).zip(yr) {
                            *gi += yi * (d - inner);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                send(*x, &|g| {
                    for ((gr, dr), yr) in
                        g.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols))
                    {
                        let total: f64 = dr.iter().sum();
                        for ((gi, d), yi) in gr.iter_mut().zip(dr).zip(yr) {
                            *gi += d - yi.exp() * total;
                        }
                    }
                });
            }
            Op::Lookup(table, index) => {
                let cols = dy.len();
                send(*table, &|g| {
                    axpy(1.0, dy, &mut g[index * cols..(index + 1) * cols])
                });
            }
            Op::Sum(x) => send(*x, &|g| g.iter_mut().for_each(|gi| *gi += dy[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                send(*x, &|g| g.iter_mut().for_each(|gi| *gi += dy[0] / n));
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, &|g| axpy(dy[0], bv, g));
                send(*b, &|g| axpy(dy[0], av, g));
            }
            Op::Select(x, index) => send(*x, &|g| g[*index] += dy[0]),
            Op::LogSumExpAt(x, indices) => {
                let xv = self.value(*x);
                let y = node.value[0];
                send(*x, &|g| {
                    for &i in indices {
                        g[i] += dy[0] * (xv[i] - y).exp();
                    }
                });
            }
            Op::SumAt(x, indices) => send(*x, &|g| {
                for &i in indices {
                    g[i] += dy[0];
                }
            }),
        }
    }
}

/// Adjoints from one backward sweep.
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Adjoint of a node, if the loss depends on it through differentiable edges.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adj.get(v.0).and_then(|a| a.as_deref())
    }

    /// Adds every parameter adjoint into `grads`.
    pub fn accumulate_into(&self, grads: &mut GradStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.adj[node] {
                grads.accumulate(id, g);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}
