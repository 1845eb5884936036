use std::cell::RefCell;
use std::rc::Rc;

use super::linalg::{self, cholesky_lower, gemm_acc, solve_lower_in_place};
use super::{dim_err, Tensor, TensorError};

/// Relative jitter schedule for [`Var::cholesky`]: first attempt, then one retry.
pub const CHOLESKY_JITTER: [f64; 2] = [1e-6, 1e-4];

/// A differentiable operation defined outside this module.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the tape only needs the vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, in the order they were given.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor)
        -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Square,
    Scale(f64),
    AddScalar,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    ScaleBy { a: usize, s: usize },
    Broadcast { s: usize },
    Unary { a: usize, kind: Unary },
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    Transpose(usize),
    MeanRowBlocks { a: usize, blocks: usize },
    Cholesky { a: usize, jitter_rel: f64 },
    SolveLower { l: usize, b: usize, trans: bool },
    LogDetChol(usize),
    LowerExpDiag(usize),
    ClampMin { a: usize, floor: f64 },
    SqDist { a: usize, b: usize },
    BceWithLogits { logits: usize, targets: Rc<Tensor> },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in evaluation order; node ids are topologically sorted
/// by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients of a scalar root with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient with respect to `var`; zeros when `var` does not reach the root.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.needs_grad(inputs);
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn check_owner(&self, vars: &[Var<'_>]) -> Result<(), TensorError> {
        let n = self.len();
        for v in vars {
            if !std::ptr::eq(v.tape, self) || v.id >= n {
                return Err(TensorError::MissingNode(v.id));
            }
        }
        Ok(())
    }

    /// Stacks inputs vertically; all must have the same column count.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        self.check_owner(parts)?;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = vals.first().map_or(0, |v| v.cols());
        if vals.iter().any(|v| !v.is_matrix() || v.cols() != cols) {
            return Err(dim_err("concat_rows", "column counts differ"));
        }
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push("concat_rows", Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(ids.clone()), &ids)
    }

    /// Joins inputs side by side; all must have the same row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        self.check_owner(parts)?;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = vals.first().map_or(0, |v| v.rows());
        if vals.iter().any(|v| !v.is_matrix() || v.rows() != rows) {
            return Err(dim_err("concat_cols", "row counts differ"));
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push("concat_cols", Tensor::new(vec![rows, cols], data)?, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Records a custom op whose forward value was computed by the caller.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var<'t>, TensorError> {
        self.check_owner(inputs)?;
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let name = op.name();
        self.push(name, output, Op::Custom { inputs: ids.clone(), op }, &ids)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, TensorError> {
        self.check_owner(&[root])?;
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(&root_shape));
        for id in (0..=root.id).rev() {
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Adds into the gradient buffer of `id`, creating a zero buffer if needed.
fn acc_with(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    f(slot.data_mut());
}

fn acc(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: &[f64]) {
    acc_with(nodes, grads, id, |buf| {
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    });
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(a), val(b));
            acc_with(nodes, grads, a, |buf| {
                if ta {
                    gemm_acc(1.0, bv, tb, g, true, buf);
                } else {
                    gemm_acc(1.0, g, false, bv, !tb, buf);
                }
            });
            acc_with(nodes, grads, b, |buf| {
                if tb {
                    gemm_acc(1.0, g, true, av, ta, buf);
                } else {
                    gemm_acc(1.0, av, !ta, g, false, buf);
                }
            });
        }
        &Op::Add(a, b) => {
            acc(nodes, grads, a, gd);
            acc(nodes, grads, b, gd);
        }
        &Op::Sub(a, b) => {
            acc(nodes, grads, a, gd);
            acc_with(nodes, grads, b, |buf| {
                for (x, v) in buf.iter_mut().zip(gd) {
                    *x -= v;
                }
            });
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            acc_with(nodes, grads, a, |buf| {
                for ((x, gv), bb) in buf.iter_mut().zip(gd).zip(bv) {
                    *x += gv * bb;
                }
            });
            acc_with(nodes, grads, b, |buf| {
                for ((x, gv), aa) in buf.iter_mut().zip(gd).zip(av) {
                    *x += gv * aa;
                }
            });
        }
        &Op::AddRow { a, row } => {
            acc(nodes, grads, a, gd);
            let cols = val(row).len();
            acc_with(nodes, grads, row, |buf| {
                for chunk in gd.chunks(cols) {
                    for (x, v) in buf.iter_mut().zip(chunk) {
                        *x += v;
                    }
                }
            });
        }
        &Op::MulRow { a, row } => {
            let (av, rv) = (val(a).data(), val(row).data());
            let cols = rv.len();
            acc_with(nodes, grads, a, |buf| {
                for (r, chunk) in buf.chunks_mut(cols).enumerate() {
                    for (c, x) in chunk.iter_mut().enumerate() {
                        *x += gd[r * cols + c] * rv[c];
                    }
                }
            });
            acc_with(nodes, grads, row, |buf| {
                for (gchunk, achunk) in gd.chunks(cols).zip(av.chunks(cols)) {
                    for c in 0..cols {
                        buf[c] += gchunk[c] * achunk[c];
                    }
                }
            });
        }
        &Op::ScaleBy { a, s } => {
            let sv = val(s).item();
            let av = val(a).data();
            acc_with(nodes, grads, a, |buf| {
                for (x, v) in buf.iter_mut().zip(gd) {
                    *x += v * sv;
                }
            });
            let dot: f64 = gd.iter().zip(av).map(|(x, y)| x * y).sum();
            acc_with(nodes, grads, s, |buf| buf[0] += dot);
        }
        &Op::Broadcast { s } => {
            let total: f64 = gd.iter().sum();
            acc_with(nodes, grads, s, |buf| buf[0] += total);
        }
        &Op::Unary { a, kind } => {
            let x = val(a).data();
            let y = out.data();
            acc_with(nodes, grads, a, |buf| match kind {
                Unary::Sigmoid => {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Unary::Tanh => {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Unary::Relu => {
                    for i in 0..buf.len() {
                        if x[i] > 0.0 {
                            buf[i] += gd[i];
                        }
                    }
                }
                Unary::Exp => {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * y[i];
                    }
                }
                Unary::Log => {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] / x[i];
                    }
                }
                Unary::Square => {
                    for i in 0..buf.len() {
                        buf[i] += 2.0 * gd[i] * x[i];
                    }
                }
                Unary::Scale(c) => {
                    for i in 0..buf.len() {
                        buf[i] += gd[i] * c;
                    }
                }
                Unary::AddScalar => {
                    for i in 0..buf.len() {
                        buf[i] += gd[i];
                    }
                }
            });
        }
        &Op::Sum(a) => {
            let g0 = gd[0];
            acc_with(nodes, grads, a, |buf| buf.iter_mut().for_each(|x| *x += g0));
        }
        &Op::Mean(a) => {
            let g0 = gd[0] / val(a).len() as f64;
            acc_with(nodes, grads, a, |buf| buf.iter_mut().for_each(|x| *x += g0));
        }
        &Op::SumRows(a) => {
            let cols = val(a).cols();
            acc_with(nodes, grads, a, |buf| {
                for chunk in buf.chunks_mut(cols) {
                    for (x, v) in chunk.iter_mut().zip(gd) {
                        *x += v;
                    }
                }
            });
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &p in ids {
                let n = val(p).len();
                acc(nodes, grads, p, &gd[offset..offset + n]);
                offset += n;
            }
        }
        Op::ConcatCols(ids) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in ids {
                let c = val(p).cols();
                acc_with(nodes, grads, p, |buf| {
                    for (r, chunk) in buf.chunks_mut(c).enumerate() {
                        let src = &gd[r * total + offset..r * total + offset + c];
                        for (x, v) in chunk.iter_mut().zip(src) {
                            *x += v;
                        }
                    }
                });
                offset += c;
            }
        }
        &Op::SliceRows { a, start } => {
            let cols = out.cols();
            acc_with(nodes, grads, a, |buf| {
                let dst = &mut buf[start * cols..start * cols + gd.len()];
                for (x, v) in dst.iter_mut().zip(gd) {
                    *x += v;
                }
            });
        }
        &Op::SliceCols { a, start } => {
            let width = out.cols();
            let total = val(a).cols();
            acc_with(nodes, grads, a, |buf| {
                for (r, chunk) in gd.chunks(width).enumerate() {
                    let dst = &mut buf[r * total + start..r * total + start + width];
                    for (x, v) in dst.iter_mut().zip(chunk) {
                        *x += v;
                    }
                }
            });
        }
        &Op::Transpose(a) => {
            let gt = g.transpose();
            acc(nodes, grads, a, gt.data());
        }
        &Op::MeanRowBlocks { a, blocks } => {
            let inv = 1.0 / blocks as f64;
            let n = gd.len();
            acc_with(nodes, grads, a, |buf| {
                for chunk in buf.chunks_mut(n) {
                    for (x, v) in chunk.iter_mut().zip(gd) {
                        *x += v * inv;
                    }
                }
            });
        }
        &Op::Cholesky { a, jitter_rel } => {
            let n = out.rows();
            let abar = cholesky_backward(out.data(), gd, n);
            let trace: f64 = (0..n).map(|i| abar[i * n + i]).sum();
            let extra = jitter_rel * trace / n as f64;
            acc_with(nodes, grads, a, |buf| {
                for (x, v) in buf.iter_mut().zip(&abar) {
                    *x += v;
                }
                for i in 0..n {
                    buf[i * n + i] += extra;
                }
            });
        }
        &Op::SolveLower { l, b, trans } => {
            let lv = val(l);
            let n = lv.rows();
            let cols = out.cols();
            let mut bbar = gd.to_vec();
            solve_lower_in_place(lv.data(), n, &mut bbar, cols, !trans);
            let x = out.data();
            acc_with(nodes, grads, l, |buf| {
                // L̄ = -tril(B̄ Xᵀ) or -tril(X B̄ᵀ)
                let (p, q) = if trans { (x, &bbar[..]) } else { (&bbar[..], x) };
                for i in 0..n {
                    for j in 0..=i {
                        let pi = &p[i * cols..(i + 1) * cols];
                        let qj = &q[j * cols..(j + 1) * cols];
                        let dot: f64 = pi.iter().zip(qj).map(|(u, v)| u * v).sum();
                        buf[i * n + j] -= dot;
                    }
                }
            });
            acc(nodes, grads, b, &bbar);
        }
        &Op::LogDetChol(l) => {
            let lv = val(l);
            let n = lv.rows();
            let g0 = gd[0];
            acc_with(nodes, grads, l, |buf| {
                for i in 0..n {
                    buf[i * n + i] += 2.0 * g0 / lv.data()[i * n + i];
                }
            });
        }
        &Op::LowerExpDiag(a) => {
            let n = out.rows();
            let y = out.data();
            acc_with(nodes, grads, a, |buf| {
                for i in 0..n {
                    for j in 0..i {
                        buf[i * n + j] += gd[i * n + j];
                    }
                    buf[i * n + i] += gd[i * n + i] * y[i * n + i];
                }
            });
        }
        &Op::ClampMin { a, floor } => {
            let x = val(a).data();
            acc_with(nodes, grads, a, |buf| {
                for i in 0..buf.len() {
                    if x[i] > floor {
                        buf[i] += gd[i];
                    }
                }
            });
        }
        &Op::SqDist { a, b } => {
            let (av, bv) = (val(a), val(b));
            let (na, nb, d) = (av.rows(), bv.rows(), av.cols());
            let (x, y) = (av.data(), bv.data());
            acc_with(nodes, grads, a, |buf| {
                for i in 0..na {
                    for j in 0..nb {
                        let w = 2.0 * gd[i * nb + j];
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            buf[i * d + k] += w * (x[i * d + k] - y[j * d + k]);
                        }
                    }
                }
            });
            acc_with(nodes, grads, b, |buf| {
                for i in 0..na {
                    for j in 0..nb {
                        let w = 2.0 * gd[i * nb + j];
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            buf[j * d + k] -= w * (x[i * d + k] - y[j * d + k]);
                        }
                    }
                }
            });
        }
        Op::BceWithLogits { logits, targets } => {
            let z = val(*logits).data();
            let t = targets.data();
            acc_with(nodes, grads, *logits, |buf| {
                for i in 0..buf.len() {
                    buf[i] += gd[i] * (sigmoid(z[i]) - t[i]);
                }
            });
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let parts = op.backward(&ins, out, g);
            for (&i, part) in inputs.iter().zip(parts) {
                if let Some(p) = part {
                    acc(nodes, grads, i, p.data());
                }
            }
        }
    }
}

/// Symmetric adjoint of the Cholesky factorization:
/// Ā = ½(S + Sᵀ), S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹, Φ = lower triangle with halved diagonal.
fn cholesky_backward(l: &[f64], lbar: &[f64], n: usize) -> Vec<f64> {
    let lt = Tensor::new(vec![n, n], l.to_vec()).expect("square");
    let lb = Tensor::new(vec![n, n], lbar.to_vec()).expect("square");
    let mut p = vec![0.0; n * n];
    gemm_acc(1.0, &lt, true, &lb, false, &mut p);
    for i in 0..n {
        for j in i + 1..n {
            p[i * n + j] = 0.0;
        }
        p[i * n + i] *= 0.5;
    }
    // Qᵀ = L⁻ᵀ Pᵀ, then S = L⁻ᵀ Q.
    let mut qt = Tensor::new(vec![n, n], p).expect("square").transpose().into_data();
    solve_lower_in_place(l, n, &mut qt, n, true);
    let mut s = Tensor::new(vec![n, n], qt).expect("square").transpose().into_data();
    solve_lower_in_place(l, n, &mut s, n, true);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (s[i * n + j] + s[j * n + i]);
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<(), TensorError> {
        self.tape.check_owner(&[*self])?;
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(TensorError::MissingNode(other.id));
        }
        self.tape.check_owner(&[*other])
    }

    fn matmul_impl(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other)?;
        let v = linalg::matmul(&self.value(), ta, &other.value(), tb)?;
        self.tape.push(
            "matmul",
            v,
            Op::MatMul { a: self.id, b: other.id, ta, tb },
            &[self.id, other.id],
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.matmul_impl(other, false, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.matmul_impl(other, false, true)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.matmul_impl(other, true, false)
    }

    fn zip_with(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(dim_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        self.tape.push(name, Tensor::new(a.shape().to_vec(), data)?, op, &[self.id, other.id])
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_with(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_with(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.zip_with(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds `row` (any shape with `cols` entries) to every row of a matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&row)?;
        let (a, r) = (self.value(), row.value());
        let cols = a.cols();
        if r.len() != cols {
            return Err(dim_err("add_row", format!("row of {} for {cols} columns", r.len())));
        }
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (x, b) in chunk.iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        self.tape.push(
            "add_row",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::AddRow { a: self.id, row: row.id },
            &[self.id, row.id],
        )
    }

    /// Multiplies every row of a matrix elementwise by `row`.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&row)?;
        let (a, r) = (self.value(), row.value());
        let cols = a.cols();
        if r.len() != cols {
            return Err(dim_err("mul_row", format!("row of {} for {cols} columns", r.len())));
        }
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (x, b) in chunk.iter_mut().zip(r.data()) {
                *x *= b;
            }
        }
        self.tape.push(
            "mul_row",
            Tensor::new(a.shape().to_vec(), data)?,
            Op::MulRow { a: self.id, row: row.id },
            &[self.id, row.id],
        )
    }

    /// Multiplies every entry by the single value of `s`.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&s)?;
        let sv = s.value();
        if sv.len() != 1 {
            return Err(dim_err("scale_by", format!("scalar expected, got {:?}", sv.shape())));
        }
        let v = self.value().map(|x| x * sv.item());
        self.tape.push("scale_by", v, Op::ScaleBy { a: self.id, s: s.id }, &[self.id, s.id])
    }

    /// Repeats a one-element tensor into `shape`.
    pub fn broadcast(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let sv = self.value();
        if sv.len() != 1 {
            return Err(dim_err("broadcast", format!("scalar expected, got {:?}", sv.shape())));
        }
        self.tape.push(
            "broadcast",
            Tensor::full(shape, sv.item()),
            Op::Broadcast { s: self.id },
            &[self.id],
        )
    }

    fn unary(self, name: &'static str, kind: Unary, f: impl Fn(f64) -> f64) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let v = self.value().map(f);
        self.tape.push(name, v, Op::Unary { a: self.id, kind }, &[self.id])
    }

    pub fn sigmoid(self) -> Result<Var<'t>, TensorError> {
        self.unary("sigmoid", Unary::Sigmoid, sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t>, TensorError> {
        self.unary("tanh", Unary::Tanh, f64::tanh)
    }

    pub fn relu(self) -> Result<Var<'t>, TensorError> {
        self.unary("relu", Unary::Relu, |x| x.max(0.0))
    }

    pub fn exp(self) -> Result<Var<'t>, TensorError> {
        self.unary("exp", Unary::Exp, f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>, TensorError> {
        self.unary("log", Unary::Log, f64::ln)
    }

    pub fn square(self) -> Result<Var<'t>, TensorError> {
        self.unary("square", Unary::Square, |x| x * x)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>, TensorError> {
        self.unary("scale", Unary::Scale(c), move |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>, TensorError> {
        self.unary("add_scalar", Unary::AddScalar, move |x| x + c)
    }

    pub fn sum(self) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let s = self.value().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let v = self.value();
        if v.is_empty() {
            return Err(dim_err("mean", "empty tensor"));
        }
        let m = v.sum() / v.len() as f64;
        self.tape.push("mean", Tensor::scalar(m), Op::Mean(self.id), &[self.id])
    }

    /// Column sums of a matrix as a `[1 × cols]` row.
    pub fn sum_rows(self) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let v = self.value();
        let cols = v.cols();
        let mut out = vec![0.0; cols];
        for chunk in v.data().chunks(cols) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        self.tape.push("sum_rows", Tensor::new(vec![1, cols], out)?, Op::SumRows(self.id), &[self.id])
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let v = self.value();
        if !v.is_matrix() || start > end || end > v.rows() {
            return Err(dim_err("slice_rows", format!("{start}..{end} of {:?}", v.shape())));
        }
        let cols = v.cols();
        let data = v.data()[start * cols..end * cols].to_vec();
        self.tape.push(
            "slice_rows",
            Tensor::new(vec![end - start, cols], data)?,
            Op::SliceRows { a: self.id, start },
            &[self.id],
        )
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let v = self.value();
        if !v.is_matrix() || start > end || end > v.cols() {
            return Err(dim_err("slice_cols", format!("{start}..{end} of {:?}", v.shape())));
        }
        let mut data = Vec::with_capacity(v.rows() * (end - start));
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        self.tape.push(
            "slice_cols",
            Tensor::new(vec![v.rows(), end - start], data)?,
            Op::SliceCols { a: self.id, start },
            &[self.id],
        )
    }

    pub fn transpose(self) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let v = self.value();
        if !v.is_matrix() {
            return Err(dim_err("transpose", format!("{:?}", v.shape())));
        }
        self.tape.push("transpose", v.transpose(), Op::Transpose(self.id), &[self.id])
    }

    /// Averages `blocks` consecutive row blocks of equal height:
    /// `[blocks·n × c] → [n × c]`.
    pub fn mean_row_blocks(self, blocks: usize) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let v = self.value();
        if blocks == 0 || !v.is_matrix() || !v.rows().is_multiple_of(blocks) {
            return Err(dim_err("mean_row_blocks", format!("{blocks} blocks of {:?}", v.shape())));
        }
        let n = v.rows() / blocks * v.cols();
        let mut out = vec![0.0; n];
        for chunk in v.data().chunks(n) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        let inv = 1.0 / blocks as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.tape.push(
            "mean_row_blocks",
            Tensor::new(vec![v.rows() / blocks, v.cols()], out)?,
            Op::MeanRowBlocks { a: self.id, blocks },
            &[self.id],
        )
    }

    /// Lower Cholesky factor of `A + rel·mean(diag A)·I`, trying each relative
    /// jitter of [`CHOLESKY_JITTER`] in turn.
    pub fn cholesky(self) -> Result<Var<'t>, TensorError> {
        match self.cholesky_with_jitter(CHOLESKY_JITTER[0]) {
            Err(TensorError::NotPositiveDefinite { .. }) => {
                self.cholesky_with_jitter(CHOLESKY_JITTER[1])
            }
            other => other,
        }
    }

    /// Cholesky factor with a single fixed relative jitter (0 for none).
    pub fn cholesky_with_jitter(self, jitter_rel: f64) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let v = self.value();
        let n = v.rows();
        if !v.is_matrix() || v.cols() != n {
            return Err(dim_err("cholesky", format!("square matrix expected, got {:?}", v.shape())));
        }
        let a = v.data();
        let scale = a.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
        let mut sym = vec![0.0; n * n];
        let mut max_asym = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                max_asym = max_asym.max((a[i * n + j] - a[j * n + i]).abs());
                sym[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
            }
        }
        if max_asym > 1e-10 * scale {
            return Err(TensorError::NotSymmetric { max_asymmetry: max_asym });
        }
        let mean_diag = (0..n).map(|i| sym[i * n + i]).sum::<f64>() / n.max(1) as f64;
        let jitter = jitter_rel * mean_diag;
        for i in 0..n {
            sym[i * n + i] += jitter;
        }
        let l = cholesky_lower(&sym, n)?;
        self.tape.push(
            "cholesky",
            Tensor::new(vec![n, n], l)?,
            Op::Cholesky { a: self.id, jitter_rel },
            &[self.id],
        )
    }

    /// Solves `L X = B` (`self` is lower-triangular `L`), or `Lᵀ X = B` when `trans`.
    pub fn solve_lower(self, b: Var<'t>, trans: bool) -> Result<Var<'t>, TensorError> {
        self.same_tape(&b)?;
        let (lv, bv) = (self.value(), b.value());
        let n = lv.rows();
        if !lv.is_matrix() || lv.cols() != n || !bv.is_matrix() || bv.rows() != n {
            return Err(dim_err("solve_lower", format!("{:?} \\ {:?}", lv.shape(), bv.shape())));
        }
        let mut x = bv.data().to_vec();
        solve_lower_in_place(lv.data(), n, &mut x, bv.cols(), trans);
        self.tape.push(
            "solve_lower",
            Tensor::new(bv.shape().to_vec(), x)?,
            Op::SolveLower { l: self.id, b: b.id, trans },
            &[self.id, b.id],
        )
    }

    /// `log det(L Lᵀ) = 2 Σ log Lᵢᵢ` for a Cholesky factor `L`.
    pub fn log_det_from_cholesky(self) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let v = self.value();
        let n = v.rows();
        if !v.is_matrix() || v.cols() != n {
            return Err(dim_err("log_det_from_cholesky", format!("{:?}", v.shape())));
        }
        let s: f64 = (0..n).map(|i| 2.0 * v.get(i, i).ln()).sum();
        self.tape.push("log_det_from_cholesky", Tensor::scalar(s), Op::LogDetChol(self.id), &[self.id])
    }

    /// Lower-triangular matrix whose diagonal is `exp` of the input diagonal;
    /// entries above the diagonal are ignored.
    pub fn lower_exp_diag(self) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let v = self.value();
        let n = v.rows();
        if !v.is_matrix() || v.cols() != n {
            return Err(dim_err("lower_exp_diag", format!("{:?}", v.shape())));
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                out[i * n + j] = v.get(i, j);
            }
            out[i * n + i] = v.get(i, i).exp();
        }
        self.tape.push("lower_exp_diag", Tensor::new(vec![n, n], out)?, Op::LowerExpDiag(self.id), &[self.id])
    }

    pub fn clamp_min(self, floor: f64) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let v = self.value().map(|x| x.max(floor));
        self.tape.push("clamp_min", v, Op::ClampMin { a: self.id, floor }, &[self.id])
    }

    /// Pairwise squared Euclidean distances between the rows of two matrices.
    pub fn sq_dist(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if !a.is_matrix() || !b.is_matrix() || a.cols() != b.cols() {
            return Err(dim_err("sq_dist", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let (na, nb) = (a.rows(), b.rows());
        let mut out = vec![0.0; na * nb];
        for i in 0..na {
            let x = a.row(i);
            for j in 0..nb {
                out[i * nb + j] = x.iter().zip(b.row(j)).map(|(u, v)| (u - v) * (u - v)).sum();
            }
        }
        self.tape.push(
            "sq_dist",
            Tensor::new(vec![na, nb], out)?,
            Op::SqDist { a: self.id, b: other.id },
            &[self.id, other.id],
        )
    }

    /// Elementwise binary cross-entropy of logits against fixed 0/1 targets.
    pub fn bce_with_logits(self, targets: &Tensor) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(&[self])?;
        let z = self.value();
        if z.len() != targets.len() {
            return Err(dim_err("bce_with_logits", format!("{} logits, {} targets", z.len(), targets.len())));
        }
        let data = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .collect();
        self.tape.push(
            "bce_with_logits",
            Tensor::new(z.shape().to_vec(), data)?,
            Op::BceWithLogits {
                logits: self.id,
                targets: Rc::new(targets.clone()),
            },
            &[self.id],
        )
    }
}
