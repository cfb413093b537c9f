//! Append-only computation tape with reverse-mode differentiation.
//!
//! Every primitive's backward rule is itself expressed with tape primitives,
//! so a gradient computed with `create_graph = true` lives on the tape and
//! can be differentiated again. This is what lets an outer loss see through
//! the SGD steps that produced its parameters.
//!
//! When recording is switched off (see [`Tape::detached`]) primitives still
//! compute their values but are stored as constant leaves: nothing downstream
//! of them carries gradient.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{DiffError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Affine { a: usize, mul: f64 },
    ScaleBy { a: usize, s: usize },
    AddRow { a: usize, row: usize },
    SumRows(usize),
    BroadcastRows { a: usize },
    RowSum(usize),
    BroadcastCols { a: usize },
    Sum(usize),
    Broadcast { a: usize },
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Recip(usize),
    Sigmoid(usize),
    LogSoftmax(usize),
    Gather { a: usize, idx: Rc<[usize]> },
    Scatter { a: usize, idx: Rc<[usize]> },
    Clamp { a: usize, lo: f64, hi: f64 },
    Reshape(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Affine { .. } => "affine",
            Op::ScaleBy { .. } => "scale_by",
            Op::AddRow { .. } => "add_row",
            Op::SumRows(_) => "sum_rows",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::RowSum(_) => "row_sum",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::Sum(_) => "sum",
            Op::Broadcast { .. } => "broadcast",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Recip(_) => "recip",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::Clamp { .. } => "clamp",
            Op::Reshape(_) => "reshape",
        }
    }

    fn inputs(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul { a, b, .. } => [Some(a), Some(b)],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => [Some(a), Some(b)],
            Op::ScaleBy { a, s } => [Some(a), Some(s)],
            Op::AddRow { a, row } => [Some(a), Some(row)],
            Op::Neg(a)
            | Op::Affine { a, .. }
            | Op::SumRows(a)
            | Op::BroadcastRows { a }
            | Op::RowSum(a)
            | Op::BroadcastCols { a }
            | Op::Sum(a)
            | Op::Broadcast { a }
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Recip(a)
            | Op::Sigmoid(a)
            | Op::LogSoftmax(a)
            | Op::Gather { a, .. }
            | Op::Scatter { a, .. }
            | Op::Clamp { a, .. }
            | Op::Reshape(a) => [Some(a), None],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded sequence of primitive operations.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    checkpoints: Vec<usize>,
    recording: bool,
    fault: Option<DiffError>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            checkpoints: Vec::new(),
            recording: true,
            fault: None,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Marks an inner-update boundary and returns its node position.
    pub fn checkpoint(&mut self) -> usize {
        let at = self.nodes.len();
        self.checkpoints.push(at);
        at
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Runs `f` with recording switched off: every value produced inside is a
    /// constant as far as later gradients are concerned.
    pub fn detached<R>(&mut self, f: impl FnOnce(&mut Tape) -> R) -> R {
        let prev = self.recording;
        self.recording = false;
        let out = f(self);
        self.recording = prev;
        out
    }

    /// First numeric fault seen on this tape, if any.
    pub fn check(&self) -> Result<(), DiffError> {
        match &self.fault {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.idx < self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Differentiable leaf (a parameter or meta-parameter).
    pub fn param(&mut self, t: Tensor) -> Var {
        let requires_grad = self.recording;
        self.push_node(Op::Leaf, t, requires_grad)
    }

    /// Constant leaf; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(Op::Leaf, t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `v` that is cut off from gradient flow.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push_node(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let name = op.name();
        self.push_named(name, op, value, requires_grad)
    }

    fn push_named(&mut self, name: &'static str, op: Op, value: Tensor, requires_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(DiffError::NumericFault {
                op: name,
                detail: format!("non-finite output at node {}", self.nodes.len()),
            });
        }
        let idx = self.nodes.len();
        self.nodes.push(Node { op, value, requires_grad });
        Var { tape: self.id, idx }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let name = op.name();
        if !self.recording {
            return self.push_named(name, Op::Leaf, value, false);
        }
        let requires_grad = op
            .inputs()
            .iter()
            .flatten()
            .any(|&i| self.nodes[i].requires_grad);
        if requires_grad {
            self.push_named(name, op, value, true)
        } else {
            self.push_named(name, Op::Leaf, value, false)
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert!(self.owns(v), "variable {v:?} is not on tape {}", self.id);
        v.idx
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn dims2(&self, i: usize) -> (usize, usize) {
        match self.val(i).shape() {
            [r, c] => (*r, *c),
            s => panic!("expected a matrix, got shape {s:?}"),
        }
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (ar, ac) = self.dims2(ia);
        let (br, bc) = self.dims2(ib);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        // Row-major strides; a transposed view swaps them.
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        let (da, db) = (self.val(ia).data(), self.val(ib).data());
        if m == 0 || n == 0 || k == 0 {
        } else if m <= 4 || k <= 4 {
            // vector-shaped products: packing overhead would dominate
            small_matmul(da, (rsa, csa), db, (rsb, csb), &mut out, m, k, n);
        } else {
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    da.as_ptr(),
                    rsa,
                    csa,
                    db.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        self.push(Op::MatMul { a: ia, b: ib, ta, tb }, Tensor::from_parts(vec![m, n], out))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (va, vb) = (self.val(ia), self.val(ib));
        assert_eq!(va.shape(), vb.shape(), "{} shape mismatch", op.name());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = va.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, data))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ia = self.idx(a);
        let va = self.val(ia);
        let data = va.data().iter().map(|x| f(*x)).collect();
        let shape = va.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Add(self.idx(a), self.idx(b));
        self.zip_with(a, b, op, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Sub(self.idx(a), self.idx(b));
        self.zip_with(a, b, op, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Mul(self.idx(a), self.idx(b));
        self.zip_with(a, b, op, |x, y| x * y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let op = Op::Neg(self.idx(a));
        self.map(a, op, |x| -x)
    }

    /// `mul * a + add` with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let op = Op::Affine { a: self.idx(a), mul };
        self.map(a, op, |x| mul * x + add)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    /// Tensor times a scalar variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let (ia, is) = (self.idx(a), self.idx(s));
        let sv = self.val(is).item();
        let op = Op::ScaleBy { a: ia, s: is };
        self.map(a, op, |x| x * sv)
    }

    /// Adds a length-`n` row to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ia, ir) = (self.idx(a), self.idx(row));
        let (m, n) = self.dims2(ia);
        let r = self.val(ir).data();
        assert_eq!(r.len(), n, "add_row width mismatch");
        let mut data = self.val(ia).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(r).for_each(|(x, b)| *x += b);
        }
        self.push(Op::AddRow { a: ia, row: ir }, Tensor::from_parts(vec![m, n], data))
    }

    /// Column sums: `[m, n] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let (_, n) = self.dims2(ia);
        let mut out = vec![0.0; n];
        for row in self.val(ia).data().chunks(n.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        self.push(Op::SumRows(ia), Tensor::from_parts(vec![n], out))
    }

    /// Repeats a length-`n` vector as `m` rows.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Var {
        let ia = self.idx(a);
        let v = self.val(ia).data();
        let n = v.len();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(v);
        }
        self.push(Op::BroadcastRows { a: ia }, Tensor::from_parts(vec![m, n], out))
    }

    /// Row sums: `[m, n] -> [m]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let (m, n) = self.dims2(ia);
        let out = if n == 0 {
            vec![0.0; m]
        } else {
            self.val(ia).data().chunks(n).map(|r| r.iter().sum()).collect()
        };
        self.push(Op::RowSum(ia), Tensor::from_parts(vec![m], out))
    }

    /// Repeats each entry of a length-`m` vector across `n` columns.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Var {
        let ia = self.idx(a);
        let v = self.val(ia).data();
        let m = v.len();
        let out = v.iter().flat_map(|x| std::iter::repeat(*x).take(n)).collect();
        self.push(Op::BroadcastCols { a: ia }, Tensor::from_parts(vec![m, n], out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let s = self.val(ia).data().iter().sum();
        self.push(Op::Sum(ia), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts a scalar to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Var {
        let ia = self.idx(a);
        let v = self.val(ia).item();
        self.push(Op::Broadcast { a: ia }, Tensor::filled(shape, v))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let op = Op::Relu(self.idx(a));
        self.map(a, op, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let op = Op::Exp(self.idx(a));
        self.map(a, op, f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let op = Op::Ln(self.idx(a));
        self.map(a, op, f64::ln)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let op = Op::Recip(self.idx(a));
        self.map(a, op, |x| 1.0 / x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let op = Op::Sigmoid(self.idx(a));
        self.map(a, op, sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Row-wise log-softmax of an `[m, n]` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let (m, n) = self.dims2(ia);
        let mut out = self.val(ia).data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(Op::LogSoftmax(ia), Tensor::from_parts(vec![m, n], out))
    }

    /// Picks one column per row: `out[r] = a[r, idx[r]]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        self.gather_rc(a, idx.into())
    }

    fn gather_rc(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let ia = self.idx(a);
        let (m, n) = self.dims2(ia);
        assert_eq!(idx.len(), m, "gather needs one index per row");
        let d = self.val(ia).data();
        let out = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < n, "gather index {c} out of range {n}");
                d[r * n + c]
            })
            .collect();
        self.push(Op::Gather { a: ia, idx }, Tensor::from_parts(vec![m], out))
    }

    fn scatter_rc(&mut self, a: Var, idx: Rc<[usize]>, cols: usize) -> Var {
        let ia = self.idx(a);
        let v = self.val(ia).data();
        let m = v.len();
        let mut out = vec![0.0; m * cols];
        for (r, &c) in idx.iter().enumerate() {
            out[r * cols + c] = v[r];
        }
        self.push(Op::Scatter { a: ia, idx }, Tensor::from_parts(vec![m, cols], out))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let op = Op::Clamp { a: self.idx(a), lo, hi };
        self.map(a, op, |x| x.clamp(lo, hi))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let ia = self.idx(a);
        let v = self.val(ia);
        assert_eq!(shape.iter().product::<usize>(), v.len(), "reshape size mismatch");
        let t = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        self.push(Op::Reshape(ia), t)
    }

    // ---- reverse mode -----------------------------------------------------

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves recorded and
    /// differentiable; otherwise they are constants. Variables not on a path
    /// to `output` receive zeros.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>, DiffError> {
        if !self.owns(output) {
            return Err(DiffError::Structural("output is not recorded on this tape".into()));
        }
        if let Some(w) = wrt.iter().find(|w| !self.owns(**w)) {
            return Err(DiffError::Structural(format!("wrt variable {w:?} is not on this tape")));
        }
        if self.value(output).len() != 1 || !self.value(output).shape().is_empty() {
            return Err(DiffError::Structural(format!(
                "gradient requires a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        self.check()?;

        let end = output.idx;
        let start = wrt.iter().map(|w| w.idx).min().unwrap_or(end);
        let mut relevant = vec![false; end + 1];
        for w in wrt {
            if w.idx <= end {
                relevant[w.idx] = true;
            }
        }
        for i in start..=end {
            if relevant[i] || !self.nodes[i].requires_grad {
                continue;
            }
            relevant[i] = self.nodes[i]
                .op
                .inputs()
                .iter()
                .flatten()
                .any(|&j| j >= start && relevant[j]);
        }

        let prev = self.recording;
        self.recording = create_graph;
        let mut adj: Vec<Option<Var>> = vec![None; end + 1];
        adj[end] = Some(self.constant(Tensor::scalar(1.0)));
        for i in (start..=end).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let y = Var { tape: self.id, idx: i };
            self.backprop(&op, y, g, &relevant, &mut adj);
        }
        self.recording = prev;
        self.check()?;

        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.idx).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.value(*w).shape().to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            })
            .collect())
    }

    fn backprop(&mut self, op: &Op, y: Var, g: Var, relevant: &[bool], adj: &mut [Option<Var>]) {
        let var = |i: usize| Var { tape: y.tape, idx: i };
        let wants = |i: usize| relevant[i];
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                if wants(a) {
                    let da = match (ta, tb) {
                        (false, false) => self.matmul_t(g, false, var(b), true),
                        (false, true) => self.matmul_t(g, false, var(b), false),
                        (true, false) => self.matmul_t(var(b), false, g, true),
                        (true, true) => self.matmul_t(var(b), true, g, true),
                    };
                    self.accumulate(adj, a, da);
                }
                if wants(b) {
                    let db = match (ta, tb) {
                        (false, false) => self.matmul_t(var(a), true, g, false),
                        (false, true) => self.matmul_t(g, true, var(a), false),
                        (true, false) => self.matmul_t(var(a), false, g, false),
                        (true, true) => self.matmul_t(g, true, var(a), true),
                    };
                    self.accumulate(adj, b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    self.accumulate(adj, a, g);
                }
                if wants(b) {
                    self.accumulate(adj, b, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    self.accumulate(adj, a, g);
                }
                if wants(b) {
                    let nb = self.neg(g);
                    self.accumulate(adj, b, nb);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let da = self.mul(g, var(b));
                    self.accumulate(adj, a, da);
                }
                if wants(b) {
                    let db = self.mul(g, var(a));
                    self.accumulate(adj, b, db);
                }
            }
            Op::Neg(a) => {
                let da = self.neg(g);
                self.accumulate(adj, a, da);
            }
            Op::Affine { a, mul } => {
                let da = self.scale(g, mul);
                self.accumulate(adj, a, da);
            }
            Op::ScaleBy { a, s } => {
                if wants(a) {
                    let da = self.scale_by(g, var(s));
                    self.accumulate(adj, a, da);
                }
                if wants(s) {
                    let prod = self.mul(g, var(a));
                    let ds = self.sum(prod);
                    let ds = self.match_shape(ds, s);
                    self.accumulate(adj, s, ds);
                }
            }
            Op::AddRow { a, row } => {
                if wants(a) {
                    self.accumulate(adj, a, g);
                }
                if wants(row) {
                    let dr = self.sum_rows(g);
                    self.accumulate(adj, row, dr);
                }
            }
            Op::SumRows(a) => {
                let m = self.dims2(a).0;
                let da = self.broadcast_rows(g, m);
                self.accumulate(adj, a, da);
            }
            Op::BroadcastRows { a } => {
                let da = self.sum_rows(g);
                self.accumulate(adj, a, da);
            }
            Op::RowSum(a) => {
                let n = self.dims2(a).1;
                let da = self.broadcast_cols(g, n);
                self.accumulate(adj, a, da);
            }
            Op::BroadcastCols { a } => {
                let da = self.row_sum(g);
                self.accumulate(adj, a, da);
            }
            Op::Sum(a) => {
                let shape = self.val(a).shape().to_vec();
                let da = self.broadcast(g, &shape);
                self.accumulate(adj, a, da);
            }
            Op::Broadcast { a } => {
                let ds = self.sum(g);
                let ds = self.match_shape(ds, a);
                self.accumulate(adj, a, ds);
            }
            Op::Relu(a) => {
                // Subgradient at exactly zero is zero.
                let mask = self.mask(a, |x| x > 0.0);
                let da = self.mul(g, mask);
                self.accumulate(adj, a, da);
            }
            Op::Exp(_) => {
                let a = self.input0(y);
                let da = self.mul(g, y);
                self.accumulate(adj, a, da);
            }
            Op::Ln(a) => {
                let r = self.recip(var(a));
                let da = self.mul(g, r);
                self.accumulate(adj, a, da);
            }
            Op::Recip(a) => {
                let y2 = self.mul(y, y);
                let t = self.mul(g, y2);
                let da = self.neg(t);
                self.accumulate(adj, a, da);
            }
            Op::Sigmoid(a) => {
                let one_minus = self.affine(y, -1.0, 1.0);
                let d = self.mul(y, one_minus);
                let da = self.mul(g, d);
                self.accumulate(adj, a, da);
            }
            Op::LogSoftmax(a) => {
                let n = self.dims2(a).1;
                let p = self.exp(y);
                let gs = self.row_sum(g);
                let gb = self.broadcast_cols(gs, n);
                let pg = self.mul(p, gb);
                let da = self.sub(g, pg);
                self.accumulate(adj, a, da);
            }
            Op::Gather { a, ref idx } => {
                let cols = self.dims2(a).1;
                let da = self.scatter_rc(g, idx.clone(), cols);
                self.accumulate(adj, a, da);
            }
            Op::Scatter { a, ref idx, .. } => {
                let da = self.gather_rc(g, idx.clone());
                self.accumulate(adj, a, da);
            }
            Op::Clamp { a, lo, hi } => {
                let mask = self.mask(a, |x| x >= lo && x <= hi);
                let da = self.mul(g, mask);
                self.accumulate(adj, a, da);
            }
            Op::Reshape(a) => {
                let shape = self.val(a).shape().to_vec();
                let da = self.reshape(g, &shape);
                self.accumulate(adj, a, da);
            }
        }
    }

    fn input0(&self, y: Var) -> usize {
        self.nodes[y.idx].op.inputs()[0].expect("unary op has an input")
    }

    fn mask(&mut self, a: usize, keep: impl Fn(f64) -> bool) -> Var {
        let v = self.val(a);
        let data = v.data().iter().map(|x| if keep(*x) { 1.0 } else { 0.0 }).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        self.constant(t)
    }

    /// Scalar-valued gradients must take the shape of the node they flow into.
    fn match_shape(&mut self, g: Var, target: usize) -> Var {
        let shape = self.val(target).shape().to_vec();
        if shape.is_empty() {
            g
        } else {
            self.reshape(g, &shape)
        }
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], i: usize, g: Var) {
        adj[i] = Some(match adj[i] {
            Some(prev) => self.add(prev, g),
            None => g,
        });
    }
}

/// Direct loops for products with a short dimension; strides as in dgemm.
#[allow(clippy::too_many_arguments)]
fn small_matmul(
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    let at = |i: usize, p: usize| a[(i as isize * rsa + p as isize * csa) as usize];
    if csb == 1 {
        // rows of b are contiguous: accumulate scaled rows
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = at(i, p);
                if x == 0.0 {
                    continue;
                }
                let brow = &b[p * rsb as usize..p * rsb as usize + n];
                row.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
            }
        }
    } else {
        // columns of b are contiguous: dot products
        for i in 0..m {
            for j in 0..n {
                let col = &b[j * csb as usize..j * csb as usize + k];
                out[i * n + j] = if csa == 1 {
                    let arow = &a[i * rsa as usize..i * rsa as usize + k];
                    arow.iter().zip(col).map(|(x, y)| x * y).sum()
                } else {
                    (0..k).map(|p| at(i, p) * col[p]).sum()
                };
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

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn square_value_and_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x);
        assert_eq!(t.item(y), 9.0);
        let half = t.scale(y, 0.5);
        let g = t.grad(half, &[x], false).unwrap();
        assert_eq!(t.item(g[0]), 3.0);
    }

    #[test]
    fn relu_value_and_subgradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(-2.0));
        let y = t.relu(x);
        assert_eq!(t.item(y), 0.0);

        let x = t.param(Tensor::scalar(-1.0));
        let y = t.relu(x);
        let g = t.grad(y, &[x], false).unwrap()[0];
        assert_eq!(t.item(g), 0.0);

        let x = t.param(Tensor::scalar(0.0));
        let y = t.relu(x);
        let g = t.grad(y, &[x], false).unwrap()[0];
        assert_eq!(t.item(g), 0.0);
    }

    #[test]
    fn matvec() {
        let mut t = Tape::new();
        let w = t.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = t.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let y = t.matmul(w, x);
        assert_eq!(t.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn transposed_matmul_gradients() {
        // sum(op(A) op(B)) for every transpose combination against finite differences.
        for &(ta, tb) in &[(false, false), (false, true), (true, false), (true, true)] {
            let a0 = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
            let b0 = vec![1.1, 0.2, -0.5, 0.9, 1.3, -0.8];
            let f = |a: &[f64], b: &[f64]| {
                let mut t = Tape::new();
                let av = t.param(Tensor::matrix(if ta { 3 } else { 2 }, if ta { 2 } else { 3 }, a.to_vec()).unwrap());
                let bv = t.param(Tensor::matrix(if tb { 2 } else { 3 }, if tb { 3 } else { 2 }, b.to_vec()).unwrap());
                let c = t.matmul_t(av, ta, bv, tb);
                let sq = t.square(c);
                let s = t.sum(sq);
                let g = t.grad(s, &[av, bv], false).unwrap();
                (t.item(s), t.value(g[0]).data().to_vec(), t.value(g[1]).data().to_vec())
            };
            let (_, ga, gb) = f(&a0, &b0);
            let h = 1e-6;
            for i in 0..6 {
                let mut ap = a0.clone();
                ap[i] += h;
                let mut am = a0.clone();
                am[i] -= h;
                let fd = (f(&ap, &b0).0 - f(&am, &b0).0) / (2.0 * h);
                assert_relative_eq!(ga[i], fd, max_relative = 1e-6, epsilon = 1e-8);
                let mut bp = b0.clone();
                bp[i] += h;
                let mut bm = b0.clone();
                bm[i] -= h;
                let fd = (f(&a0, &bp).0 - f(&a0, &bm).0) / (2.0 * h);
                assert_relative_eq!(gb[i], fd, max_relative = 1e-6, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let x2 = t.mul(x, x);
        let x3 = t.mul(x2, x);
        let g = t.grad(x3, &[x], true).unwrap()[0];
        assert_eq!(t.item(g), 12.0);
        let h = t.grad(g, &[x], false).unwrap()[0];
        assert_eq!(t.item(h), 12.0);
    }

    #[test]
    fn second_derivative_through_log_softmax_and_sigmoid() {
        // d²/dx² of log_softmax([x, 0])[0] = -σ(x)(1-σ(x)); check by differencing the first derivative.
        let first = |x0: f64| {
            let mut t = Tape::new();
            let x = t.param(Tensor::scalar(x0));
            let row = t.reshape(x, &[1, 1]);
            let zero = t.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
            // Build [x, 0] with a matmul against [1, 0] plus zero-padding.
            let e = t.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
            let xs = t.matmul(row, e);
            let _ = zero;
            let ls = t.log_softmax(xs);
            let lp = t.gather(ls, &[0]);
            let s = t.sum(lp);
            let g = t.grad(s, &[x], true).unwrap()[0];
            let gg = t.grad(g, &[x], false).unwrap()[0];
            (t.item(g), t.item(gg))
        };
        let (_, gg) = first(0.4);
        let fd = (first(0.4 + 1e-5).0 - first(0.4 - 1e-5).0) / 2e-5;
        assert_relative_eq!(gg, fd, max_relative = 1e-6);
        let s = sigmoid(-0.4);
        assert_relative_eq!(first(0.4).0, s, max_relative = 1e-12);
    }

    #[test]
    fn unrelated_variable_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let z = t.param(Tensor::vector(vec![5.0, 6.0]));
        let s = t.sum(x);
        let g = t.grad(s, &[x, z], false).unwrap();
        assert_eq!(t.value(g[1]).data(), &[0.0, 0.0]);
        assert_eq!(t.value(g[1]).shape(), &[2]);
    }

    #[test]
    fn foreign_output_is_structural_error() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(Tensor::scalar(1.0));
        let y = b.param(Tensor::scalar(1.0));
        assert!(matches!(b.grad(x, &[y], false), Err(DiffError::Structural(_))));
        let v = b.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(b.grad(v, &[v], false), Err(DiffError::Structural(_))));
    }

    #[test]
    fn non_finite_is_reported_with_op_name() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.ln(x);
        let s = t.sum(y);
        match t.grad(s, &[x], false) {
            Err(DiffError::NumericFault { op, .. }) => assert_eq!(op, "ln"),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }

    #[test]
    fn detached_values_carry_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let y = t.detached(|t| t.mul(x, x));
        let z = t.mul(y, x);
        let g = t.grad(z, &[x], false).unwrap()[0];
        assert_eq!(t.item(g), 4.0);
    }
}
