//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Values are viewed as matrices (`rows x cols`); rank-1 tensors are row
//! vectors. Parameters are referenced by borrow rather than copied, and their
//! gradients are returned from [`Graph::backward`] as a [`Gradients`] map, so
//! several graphs can read the same [`ParamSet`] concurrently.
//!
//! Broadcasting is not implicit. The only broadcast is [`Graph::add_row`],
//! which adds a `1 x n` bias row to every row of an `m x n` matrix.

use crate::error::{Error, Result};
use crate::tensor::params::{Gradients, ParamId, ParamSet};
use crate::tensor::rng::SeededRng;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Pointwise operations accepted by [`Graph::map`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
}

enum Value<'a> {
    Owned(Vec<f64>),
    Borrowed(&'a [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(s) => s,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Gather {
        param: ParamId,
        row: usize,
        total: usize,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    GatherRows {
        param: ParamId,
        rows: Vec<usize>,
        total: usize,
    },
    SelectRows {
        x: Var,
        index: Vec<Option<usize>>,
    },
    BlendRows {
        new: Var,
        old: Var,
        take_new: Vec<bool>,
    },
    BlockPool {
        alpha: Var,
        values: Var,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Unfold {
        x: Var,
        height: usize,
        pad_front: usize,
        block: usize,
    },
    KMaxPool {
        x: Var,
        picks: Vec<Option<usize>>,
    },
    MulConst {
        x: Var,
        factor: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Gather { .. } => "gather",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Concat(_) => "concat",
            Op::StackRows(_) => "stack_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::BlendRows { .. } => "blend_rows",
            Op::BlockPool { .. } => "block_pool",
            Op::CrossEntropyRows { .. } => "cross_entropy_rows",
            Op::Unfold { .. } => "unfold",
            Op::KMaxPool { .. } => "k_max_pool",
            Op::MulConst { .. } => "mul_const",
        }
    }
}

struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    check_finite: bool,
    nonfinite: Option<&'static str>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// Finite-value checks are on in debug builds and off in release builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            check_finite: cfg!(debug_assertions),
            nonfinite: None,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Errors if any node produced NaN or infinity while checks were enabled.
    pub fn finite_check(&self) -> Result<()> {
        match self.nonfinite {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        value: Value<'a>,
        op: Op,
        needs_grad: bool,
    ) -> Var {
        debug_assert_eq!(rows * cols, value.as_slice().len());
        if self.check_finite
            && self.nonfinite.is_none()
            && !value.as_slice().iter().all(|x| x.is_finite())
        {
            self.nonfinite = Some(op.name());
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        let shape = if r == 1 { vec![c] } else { vec![r, c] };
        Tensor::from_vec(&shape, self.value(v).to_vec()).expect("node dims are positive")
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    // ── Leaves ─────────────────────────────────────────────────────────

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, Value::Owned(t.data().to_vec()), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::shape(
                "constant",
                format!("{rows}x{cols} with {} values", data.len()),
            ));
        }
        Ok(self.push(rows, cols, Value::Owned(data), Op::Leaf, false))
    }

    pub fn row_vector(&mut self, data: &[f64]) -> Result<Var> {
        self.constant_vec(1, data.len(), data.to_vec())
    }

    /// Differentiable reference to a parameter. The value is borrowed.
    pub fn param(&mut self, set: &'a ParamSet, id: ParamId) -> Var {
        let t = set.get(id);
        let (r, c) = t.dims2();
        self.push(r, c, Value::Borrowed(t.data()), Op::Param(id), true)
    }

    /// Parameter treated as a constant (frozen weights).
    pub fn frozen(&mut self, set: &'a ParamSet, id: ParamId) -> Var {
        let t = set.get(id);
        let (r, c) = t.dims2();
        self.push(r, c, Value::Borrowed(t.data()), Op::Leaf, false)
    }

    /// Row `row` of a matrix parameter as a `1 x cols` vector (embedding lookup).
    pub fn gather(
        &mut self,
        set: &'a ParamSet,
        id: ParamId,
        row: usize,
        trainable: bool,
    ) -> Result<Var> {
        let t = set.get(id);
        let (r, c) = t.dims2();
        if row >= r {
            return Err(Error::Index(format!(
                "row {row} out of range for {} with {r} rows",
                set.name(id)
            )));
        }
        let slice = &t.data()[row * c..(row + 1) * c];
        let op = if trainable {
            Op::Gather {
                param: id,
                row,
                total: r * c,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(1, c, Value::Borrowed(slice), op, trainable))
    }

    /// Rows `rows` of a matrix parameter stacked into an `n x cols` matrix.
    pub fn gather_rows(
        &mut self,
        set: &'a ParamSet,
        id: ParamId,
        rows: &[usize],
        trainable: bool,
    ) -> Result<Var> {
        let t = set.get(id);
        let (r, c) = t.dims2();
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "no rows requested"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            if row >= r {
                return Err(Error::Index(format!(
                    "row {row} out of range for {} with {r} rows",
                    set.name(id)
                )));
            }
            out.extend_from_slice(&t.data()[row * c..(row + 1) * c]);
        }
        let op = if trainable {
            Op::GatherRows {
                param: id,
                rows: rows.to_vec(),
                total: r * c,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(rows.len(), c, Value::Owned(out), op, trainable))
    }

    // ── Linear algebra ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        gemm((m, k, n), (av, k, 1), (bv, n, 1), &mut out, 0.0);
        let ng = self.needs(&[a, b]);
        Ok(self.push(m, n, Value::Owned(out), Op::MatMul(a, b), ng))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, Value::Owned(out), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, Value::Owned(out), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, Value::Owned(out), Op::Mul(a, b), ng))
    }

    /// Adds the `1 x n` row `bias` to every row of the `m x n` matrix `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(bias) != (1, n) {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for {m}x{n}", self.dims(bias)),
            ));
        }
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut out = xv.to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        let ng = self.needs(&[x, bias]);
        Ok(self.push(m, n, Value::Owned(out), Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|v| v * s).collect();
        let ng = self.needs(&[x]);
        self.push(r, c, Value::Owned(out), Op::Scale(x, s), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let ng = self.needs(&[x]);
        self.push(r, c, Value::Owned(out), Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let ng = self.needs(&[x]);
        self.push(r, c, Value::Owned(out), Op::Tanh(x), ng)
    }

    /// Dispatches a pointwise operation; binary ops need two operands of equal dims.
    pub fn map(&mut self, op: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            Elementwise::Sigmoid | Elementwise::Tanh => 1,
        };
        if operands.len() != arity {
            return Err(Error::Contract(format!(
                "{op:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Mul => self.mul(operands[0], operands[1]),
            Elementwise::Sigmoid => Ok(self.sigmoid(operands[0])),
            Elementwise::Tanh => Ok(self.tanh(operands[0])),
        }
    }

    // ── Shape manipulation ────────────────────────────────────────────

    /// Concatenates along columns; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.dims(p).0,
            None => return Err(Error::shape("concat", "no operands")),
        };
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape("concat", format!("row counts {rows} vs {r}")));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(
            rows,
            cols,
            Value::Owned(out),
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.dims(p).1,
            None => return Err(Error::shape("stack_rows", "no operands")),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape(
                    "stack_rows",
                    format!("column counts {cols} vs {c}"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = self.needs(parts);
        Ok(self.push(
            rows,
            cols,
            Value::Owned(out),
            Op::StackRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c}", start + len),
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(r, len, Value::Owned(out), Op::SliceCols(x, start), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("[{start}, {}) of {r}", start + len),
            ));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let ng = self.needs(&[x]);
        Ok(self.push(len, c, Value::Owned(out), Op::SliceRows(x, start), ng))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if rows * cols != r * c || rows == 0 {
            return Err(Error::shape("reshape", format!("{r}x{c} to {rows}x{cols}")));
        }
        let out = self.value(x).to_vec();
        let ng = self.needs(&[x]);
        Ok(self.push(rows, cols, Value::Owned(out), Op::Reshape(x), ng))
    }

    // ── Probabilities and losses ──────────────────────────────────────

    /// Row-wise softmax, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        out.chunks_mut(c).for_each(softmax_in_place);
        let ng = self.needs(&[x]);
        self.push(r, c, Value::Owned(out), Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.needs(&[x]);
        self.push(r, c, Value::Owned(out), Op::LogSoftmax(x), ng)
    }

    /// `-log softmax(logits)[target]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if r != 1 {
            return Err(Error::shape(
                "cross_entropy",
                format!("expected one row, got {r}"),
            ));
        }
        if target >= c {
            return Err(Error::Index(format!(
                "target {target} out of range for {c} classes"
            )));
        }
        let (loss, probs) = row_cross_entropy(self.value(logits), target);
        let ng = self.needs(&[logits]);
        Ok(self.push(
            1,
            1,
            Value::Owned(vec![loss]),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.needs(&[x]);
        self.push(1, 1, Value::Owned(vec![s]), Op::Sum(x), ng)
    }

    /// Sum of several `1 x 1` nodes (or of all their entries).
    pub fn sum_all(&mut self, parts: &[Var]) -> Result<Var> {
        let mut sums = Vec::with_capacity(parts.len());
        for &p in parts {
            sums.push(self.sum(p));
        }
        let stacked = self.stack_rows(&sums)?;
        Ok(self.sum(stacked))
    }

    /// Output row `i` is row `index[i]` of `x`, or zeros for `None`.
    pub fn select_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if index.is_empty() {
            return Err(Error::shape("select_rows", "empty index"));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= r) {
            return Err(Error::Index(format!("select_rows: row {bad} of {r}")));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; index.len() * c];
        for (i, src) in index.iter().enumerate() {
            if let Some(s) = src {
                out[i * c..(i + 1) * c].copy_from_slice(&xv[s * c..(s + 1) * c]);
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(
            index.len(),
            c,
            Value::Owned(out),
            Op::SelectRows {
                x,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Row `i` comes from `new` where `take_new[i]`, otherwise from `old`.
    pub fn blend_rows(&mut self, new: Var, old: Var, take_new: &[bool]) -> Result<Var> {
        let (r, c) = self.same_dims("blend_rows", new, old)?;
        if take_new.len() != r {
            return Err(Error::shape(
                "blend_rows",
                format!("{} flags for {r} rows", take_new.len()),
            ));
        }
        let (nv, ov) = (self.value(new), self.value(old));
        let mut out = Vec::with_capacity(r * c);
        for (i, &t) in take_new.iter().enumerate() {
            let src = if t { nv } else { ov };
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.needs(&[new, old]);
        Ok(self.push(
            r,
            c,
            Value::Owned(out),
            Op::BlendRows {
                new,
                old,
                take_new: take_new.to_vec(),
            },
            ng,
        ))
    }

    /// Blockwise weighted sum: `alpha` is `n x T`, `values` is `(n * T) x d`
    /// (block `b` = rows `b*T .. (b+1)*T`); output row `b` is
    /// `sum_t alpha[b, t] * values[b*T + t]`. For `n = 1` this is `alpha * values`.
    pub fn block_pool(&mut self, alpha: Var, values: Var) -> Result<Var> {
        let (n, t) = self.dims(alpha);
        let (vr, d) = self.dims(values);
        if vr != n * t {
            return Err(Error::shape(
                "block_pool",
                format!("{n}x{t} weights over {vr} value rows"),
            ));
        }
        let (av, vv) = (self.value(alpha), self.value(values));
        let mut out = vec![0.0; n * d];
        for b in 0..n {
            let orow = &mut out[b * d..(b + 1) * d];
            for j in 0..t {
                let w = av[b * t + j];
                if w == 0.0 {
                    continue;
                }
                let row = &vv[(b * t + j) * d..(b * t + j + 1) * d];
                orow.iter_mut().zip(row).for_each(|(o, v)| *o += w * v);
            }
        }
        let ng = self.needs(&[alpha, values]);
        Ok(self.push(n, d, Value::Owned(out), Op::BlockPool { alpha, values }, ng))
    }

    /// Sum over rows of `-log softmax(logits[i])[targets[i]]`, skipping `None`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::Index(format!(
                "target {bad} out of range for {c} classes"
            )));
        }
        let xv = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let row = &xv[i * c..(i + 1) * c];
            let (loss, p) = row_cross_entropy(row, *t);
            total += loss;
            probs[i * c..(i + 1) * c].copy_from_slice(&p);
        }
        let ng = self.needs(&[logits]);
        Ok(self.push(
            1,
            1,
            Value::Owned(vec![total]),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    // ── Convolution and pooling ───────────────────────────────────────

    /// Sliding windows of `height` consecutive rows, flattened: the output row
    /// `r` is `x[r - pad_front .. r - pad_front + height]` with zero rows outside
    /// `x`. Multiplying by a `(height * d) x F` filter bank gives a 1-D
    /// convolution over positions.
    pub fn unfold(
        &mut self,
        x: Var,
        height: usize,
        pad_front: usize,
        pad_back: usize,
    ) -> Result<Var> {
        let rows = self.dims(x).0;
        self.unfold_blocks(x, height, pad_front, pad_back, rows)
    }

    /// [`Graph::unfold`] applied independently to consecutive blocks of
    /// `block` rows; windows never reach across a block boundary.
    pub fn unfold_blocks(
        &mut self,
        x: Var,
        height: usize,
        pad_front: usize,
        pad_back: usize,
        block: usize,
    ) -> Result<Var> {
        let (l, d) = self.dims(x);
        if block == 0 || l % block != 0 {
            return Err(Error::shape(
                "unfold",
                format!("{l} rows in blocks of {block}"),
            ));
        }
        let padded = block + pad_front + pad_back;
        if height == 0 || padded < height {
            return Err(Error::InputTooShort {
                len: padded,
                height,
            });
        }
        let per_block = padded - height + 1;
        let blocks = l / block;
        let xv = self.value(x);
        let mut out = vec![0.0; blocks * per_block * height * d];
        for b in 0..blocks {
            for r in 0..per_block {
                let orow = b * per_block + r;
                for j in 0..height {
                    let src = r + j;
                    if src < pad_front || src - pad_front >= block {
                        continue;
                    }
                    let s = b * block + src - pad_front;
                    let dst = orow * height * d + j * d;
                    out[dst..dst + d].copy_from_slice(&xv[s * d..(s + 1) * d]);
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(
            blocks * per_block,
            height * d,
            Value::Owned(out),
            Op::Unfold {
                x,
                height,
                pad_front,
                block,
            },
            ng,
        ))
    }

    /// Column-wise order-preserving k-max pooling over the rows of `x`.
    ///
    /// Only rows `< valid_rows` are candidates. When fewer than `k` rows are
    /// valid the trailing output rows are zero and carry no gradient.
    pub fn k_max_pool(&mut self, x: Var, k: usize, valid_rows: usize) -> Result<Var> {
        let (l, f) = self.dims(x);
        if k == 0 || k > l {
            return Err(Error::Pool { k, len: l });
        }
        let valid = valid_rows.min(l);
        let xv = self.value(x);
        let mut out = vec![0.0; k * f];
        let mut picks = vec![None; k * f];
        let mut column = Vec::with_capacity(valid);
        for col in 0..f {
            column.clear();
            column.extend((0..valid).map(|r| xv[r * f + col]));
            let chosen = top_k_in_order(&column, k.min(valid))?;
            for (slot, &r) in chosen.iter().enumerate() {
                out[slot * f + col] = xv[r * f + col];
                picks[slot * f + col] = Some(r);
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(k, f, Value::Owned(out), Op::KMaxPool { x, picks }, ng))
    }

    /// Inverted dropout. Returns `x` itself in eval mode or when `rate == 0`.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut SeededRng,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let factor: Vec<f64> = (0..n)
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        Ok(self.mul_const(x, factor))
    }

    fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Var {
        let (r, c) = self.dims(x);
        let out = self
            .value(x)
            .iter()
            .zip(&factor)
            .map(|(a, b)| a * b)
            .collect();
        let ng = self.needs(&[x]);
        self.push(r, c, Value::Owned(out), Op::MulConst { x, factor }, ng)
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Gradients of the scalar `loss` with respect to every parameter reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let buf = out.buffer(*id, g.len());
                    buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x);
                }
                Op::Gather { param, row, total } => {
                    let cols = node.cols;
                    let buf = out.buffer(*param, *total);
                    buf[row * cols..(row + 1) * cols]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(b, x)| *b += x);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = node.cols;
                    if self.nodes[a.0].needs_grad {
                        let bv = self.value(*b);
                        let da = grad_buf(&mut grads, *a, m * k);
                        gemm((m, n, k), (&g, n, 1), (bv, 1, n), da, 1.0);
                    }
                    if self.nodes[b.0].needs_grad {
                        let av = self.value(*a);
                        let db = grad_buf(&mut grads, *b, k * n);
                        gemm((k, m, n), (av, 1, k), (&g, n, 1), db, 1.0);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|x| -x).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(
                        &mut grads,
                        *a,
                        g.iter().zip(bv).map(|(x, y)| x * y).collect(),
                    );
                    accumulate(
                        &mut grads,
                        *b,
                        g.iter().zip(av).map(|(x, y)| x * y).collect(),
                    );
                }
                Op::AddRow(x, bias) => {
                    let n = node.cols;
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, g.iter().map(|v| v * s).collect());
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_slice();
                    let dx = g
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let y = node.value.as_slice();
                    let dx = g
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let rows = node.rows;
                    let cols = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.dims(p).1;
                        if self.nodes[p.0].needs_grad {
                            let mut dp = Vec::with_capacity(rows * c);
                            for i in 0..rows {
                                dp.extend_from_slice(&g[i * cols + offset..i * cols + offset + c]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        offset += c;
                    }
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.nodes[p.0].needs_grad {
                            accumulate(&mut grads, p, g[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Op::SliceCols(x, start) => {
                    let (r, c) = self.dims(*x);
                    let len = node.cols;
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceRows(x, start) => {
                    let (r, c) = self.dims(*x);
                    let mut dx = vec![0.0; r * c];
                    dx[start * c..start * c + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::Softmax(x) => {
                    let c = node.cols;
                    let y = node.value.as_slice();
                    let mut dx = vec![0.0; g.len()];
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = dot(gr, yr);
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = yv * (gv - s);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmax(x) => {
                    let c = node.cols;
                    let y = node.value.as_slice();
                    let mut dx = vec![0.0; g.len()];
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = gv - yv.exp() * s;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    dx[*target] -= g[0];
                    accumulate(&mut grads, *logits, dx);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Unfold {
                    x,
                    height,
                    pad_front,
                    block,
                } => {
                    let (l, d) = self.dims(*x);
                    let blocks = l / block;
                    let per_block = node.rows / blocks;
                    let dx = grad_buf(&mut grads, *x, l * d);
                    for b in 0..blocks {
                        for r in 0..per_block {
                            let orow = b * per_block + r;
                            for j in 0..*height {
                                let src = r + j;
                                if src < *pad_front || src - pad_front >= *block {
                                    continue;
                                }
                                let s = b * block + src - pad_front;
                                let from = orow * height * d + j * d;
                                dx[s * d..(s + 1) * d]
                                    .iter_mut()
                                    .zip(&g[from..from + d])
                                    .for_each(|(a, v)| *a += v);
                            }
                        }
                    }
                }
                Op::GatherRows { param, rows, total } => {
                    let cols = node.cols;
                    let buf = out.buffer(*param, *total);
                    for (i, &row) in rows.iter().enumerate() {
                        buf[row * cols..(row + 1) * cols]
                            .iter_mut()
                            .zip(&g[i * cols..(i + 1) * cols])
                            .for_each(|(b, x)| *b += x);
                    }
                }
                Op::SelectRows { x, index } => {
                    let (r, c) = self.dims(*x);
                    let dx = grad_buf(&mut grads, *x, r * c);
                    for (i, src) in index.iter().enumerate() {
                        if let Some(s) = src {
                            dx[s * c..(s + 1) * c]
                                .iter_mut()
                                .zip(&g[i * c..(i + 1) * c])
                                .for_each(|(a, v)| *a += v);
                        }
                    }
                }
                Op::BlendRows { new, old, take_new } => {
                    let c = node.cols;
                    let n = g.len();
                    for (target, want) in [(*new, true), (*old, false)] {
                        if !self.nodes[target.0].needs_grad {
                            continue;
                        }
                        let d = grad_buf(&mut grads, target, n);
                        for (i, &t) in take_new.iter().enumerate() {
                            if t == want {
                                d[i * c..(i + 1) * c]
                                    .iter_mut()
                                    .zip(&g[i * c..(i + 1) * c])
                                    .for_each(|(a, v)| *a += v);
                            }
                        }
                    }
                }
                Op::BlockPool { alpha, values } => {
                    let (n, t) = self.dims(*alpha);
                    let d = node.cols;
                    if self.nodes[alpha.0].needs_grad {
                        let vv = self.value(*values);
                        let da = grad_buf(&mut grads, *alpha, n * t);
                        for b in 0..n {
                            let grow = &g[b * d..(b + 1) * d];
                            for j in 0..t {
                                da[b * t + j] +=
                                    dot(grow, &vv[(b * t + j) * d..(b * t + j + 1) * d]);
                            }
                        }
                    }
                    if self.nodes[values.0].needs_grad {
                        let av = self.value(*alpha);
                        let dv = grad_buf(&mut grads, *values, n * t * d);
                        for b in 0..n {
                            let grow = &g[b * d..(b + 1) * d];
                            for j in 0..t {
                                let w = av[b * t + j];
                                dv[(b * t + j) * d..(b * t + j + 1) * d]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(a, v)| *a += w * v);
                            }
                        }
                    }
                }
                Op::CrossEntropyRows {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = self.dims(*logits).1;
                    let mut dx = vec![0.0; probs.len()];
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..c {
                            dx[i * c + j] = probs[i * c + j] * g[0];
                        }
                        dx[i * c + t] -= g[0];
                    }
                    accumulate(&mut grads, *logits, dx);
                }
                Op::KMaxPool { x, picks } => {
                    let (l, f) = self.dims(*x);
                    let mut dx = vec![0.0; l * f];
                    for (slot, pick) in picks.iter().enumerate() {
                        if let Some(r) = pick {
                            dx[r * f + slot % f] += g[slot];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MulConst { x, factor } => {
                    accumulate(
                        &mut grads,
                        *x,
                        g.iter().zip(factor).map(|(a, b)| a * b).collect(),
                    );
                }
            }
        }
        Ok(out)
    }
}

/// Gradient buffer of `v`, created zeroed on first use.
/// `c = a b + beta c` for row-major `c` of shape `m x n`, where `a` is
/// `m x k` and `b` is `k x n`, each given with its row and column strides.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    if m < 4 || k < 4 {
        // Packing costs more than it saves for row vectors and outer products.
        if beta == 0.0 {
            c.fill(0.0);
        }
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            if csb == 1 {
                for p in 0..k {
                    let x = a[i * rsa + p * csa];
                    let brow = &b[p * rsb..p * rsb + n];
                    crow.iter_mut().zip(brow).for_each(|(o, w)| *o += x * w);
                }
            } else {
                for (j, o) in crow.iter_mut().enumerate() {
                    *o += (0..k)
                        .map(|p| a[i * rsa + p * csa] * b[p * rsb + j * csb])
                        .sum::<f64>();
                }
            }
        }
        return;
    }
    // SAFETY: the strides address only elements inside `a`, `b` and `c`,
    // whose lengths are checked above, and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
        slot @ None => *slot = Some(g),
    }
}

/// `(-log softmax(row)[target], softmax(row))`.
fn row_cross_entropy(row: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(row);
    let loss = lse - row[target];
    (loss, row.iter().map(|v| (v - lse).exp()).collect())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Indices of the `k` largest values, returned in their original order.
/// Ties prefer the earlier position.
pub fn top_k_in_order(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        return Err(Error::Pool {
            k,
            len: values.len(),
        });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}
