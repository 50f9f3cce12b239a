//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order; [`Tape::backward`] replays the records in reverse, visiting each
//! node once. A fresh tape is built for every forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow {
        a: usize,
        row: usize,
    },
    Affine {
        a: usize,
        scale: f64,
    },
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Sum(usize),
    Mean(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Pick {
        a: usize,
        cols: Vec<usize>,
    },
    Reshape(usize),
    Concat(Vec<usize>),
    Slice {
        a: usize,
        start: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
    },
    PixelShuffle {
        a: usize,
        r: usize,
    },
    Bilinear {
        x: usize,
        grid: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::AddRow { a, row } => vec![*a, *row],
            Op::Transpose(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Reshape(a) => vec![*a],
            Op::Affine { a, .. }
            | Op::Clamp { a, .. }
            | Op::Pick { a, .. }
            | Op::Slice { a, .. }
            | Op::PixelShuffle { a, .. } => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Conv2d { x, w, b } => vec![*x, *w, *b],
            Op::Bilinear { x, grid } => vec![*x, *grid],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.dims())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    dims: Vec<Vec<usize>>,
}

impl Grads {
    /// `∂loss/∂var`; zeros when no path connects `var` to the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let dims = self.dims[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::new(dims, g.clone()).expect("gradient matches its node"),
            None => Tensor::zeros(dims),
        }
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

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let loss_len = nodes[loss.id].value.len();
        if loss_len != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got dims {:?}", nodes[loss.id].value.dims()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let dims = nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Grads { grads, dims })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    match &mut grads[id] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (va, vb) = (val(a), val(b));
            let (m, n) = (out.dims()[0], out.dims()[1]);
            let k = if ta { va.dims()[0] } else { va.dims()[1] };
            if wants(a) {
                let mut da = vec![0.0; m * k];
                if ta {
                    // A stored k×m: dA = op(B) · dCᵀ
                    kernels::gemm(k, n, m, vb.data(), tb, g, true, &mut da, false);
                } else {
                    kernels::gemm(m, n, k, g, false, vb.data(), !tb, &mut da, false);
                }
                accumulate(grads, a, da);
            }
            if wants(b) {
                let mut db = vec![0.0; k * n];
                if tb {
                    // B stored n×k: dB = dCᵀ · op(A)
                    kernels::gemm(n, m, k, g, true, va.data(), ta, &mut db, false);
                } else {
                    kernels::gemm(k, m, n, va.data(), !ta, g, false, &mut db, false);
                }
                accumulate(grads, b, db);
            }
        }
        &Op::Transpose(a) => {
            let (r, c) = (out.dims()[0], out.dims()[1]);
            accumulate(grads, a, transpose(g, r, c));
        }
        &Op::Add(a, b) => {
            if wants(a) {
                accumulate(grads, a, g.to_vec());
            }
            if wants(b) {
                accumulate(grads, b, g.to_vec());
            }
        }
        &Op::Sub(a, b) => {
            if wants(a) {
                accumulate(grads, a, g.to_vec());
            }
            if wants(b) {
                accumulate(grads, b, g.iter().map(|x| -x).collect());
            }
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            if wants(a) {
                accumulate(grads, a, zip_map(g, vb.data(), |g, y| g * y));
            }
            if wants(b) {
                accumulate(grads, b, zip_map(g, va.data(), |g, x| g * x));
            }
        }
        &Op::Div(a, b) => {
            let vb = val(b);
            if wants(a) {
                accumulate(grads, a, zip_map(g, vb.data(), |g, y| g / y));
            }
            if wants(b) {
                let d = g
                    .iter()
                    .zip(out.data())
                    .zip(vb.data())
                    .map(|((g, q), y)| -g * q / y)
                    .collect();
                accumulate(grads, b, d);
            }
        }
        &Op::AddRow { a, row } => {
            if wants(a) {
                accumulate(grads, a, g.to_vec());
            }
            if wants(row) {
                let m = val(row).len();
                let mut d = vec![0.0; m];
                for chunk in g.chunks(m) {
                    for (acc, x) in d.iter_mut().zip(chunk) {
                        *acc += x;
                    }
                }
                accumulate(grads, row, d);
            }
        }
        &Op::Affine { a, scale } => accumulate(grads, a, g.iter().map(|x| x * scale).collect()),
        &Op::Sigmoid(a) => accumulate(grads, a, zip_map(g, out.data(), |g, s| g * s * (1.0 - s))),
        &Op::Log(a) => accumulate(grads, a, zip_map(g, val(a).data(), |g, x| g / x)),
        &Op::Exp(a) => accumulate(grads, a, zip_map(g, out.data(), |g, e| g * e)),
        &Op::Clamp { a, lo, hi } => {
            let d = zip_map(g, val(a).data(), |g, x| if x >= lo && x <= hi { g } else { 0.0 });
            accumulate(grads, a, d);
        }
        &Op::Sum(a) => accumulate(grads, a, vec![g[0]; val(a).len()]),
        &Op::Mean(a) => {
            let n = val(a).len();
            accumulate(grads, a, vec![g[0] / n as f64; n]);
        }
        &Op::SoftmaxRows(a) => {
            let n = out.dims()[1];
            let mut d = vec![0.0; out.len()];
            for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for ((dx, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                    *dx = yi * (gi - dot);
                }
            }
            accumulate(grads, a, d);
        }
        &Op::LogSoftmaxRows(a) => {
            let n = out.dims()[1];
            let mut d = vec![0.0; out.len()];
            for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let total: f64 = grow.iter().sum();
                for ((dx, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                    *dx = gi - yi.exp() * total;
                }
            }
            accumulate(grads, a, d);
        }
        Op::Pick { a, cols } => {
            let va = val(*a);
            let k = va.dims()[1];
            let mut d = vec![0.0; va.len()];
            for (i, &c) in cols.iter().enumerate() {
                d[i * k + c] = g[i];
            }
            accumulate(grads, *a, d);
        }
        &Op::Reshape(a) => accumulate(grads, a, g.to_vec()),
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if wants(p) {
                    accumulate(grads, p, g[offset..offset + n].to_vec());
                }
                offset += n;
            }
        }
        &Op::Slice { a, start } => {
            let va = val(a);
            let plane: usize = va.dims()[1..].iter().product();
            let mut d = vec![0.0; va.len()];
            d[start * plane..start * plane + g.len()].copy_from_slice(g);
            accumulate(grads, a, d);
        }
        &Op::Conv2d { x, w, b } => {
            let (vx, vw) = (val(x), val(w));
            let (cin, h, wd) = (vx.dims()[0], vx.dims()[1], vx.dims()[2]);
            let (cout, k) = (vw.dims()[0], vw.dims()[2]);
            let hw = h * wd;
            let ck = cin * k * k;
            if wants(w) {
                let cols = kernels::im2col(vx.data(), cin, h, wd, k);
                let mut dw = vec![0.0; cout * ck];
                kernels::gemm(cout, hw, ck, g, false, &cols, true, &mut dw, false);
                accumulate(grads, w, dw);
            }
            if wants(x) {
                let mut dcols = vec![0.0; ck * hw];
                kernels::gemm(ck, cout, hw, vw.data(), true, g, false, &mut dcols, false);
                accumulate(grads, x, kernels::col2im(&dcols, cin, h, wd, k));
            }
            if wants(b) {
                accumulate(grads, b, g.chunks(hw).map(|c| c.iter().sum()).collect());
            }
        }
        &Op::PixelShuffle { a, r } => {
            let (c, ho, wo) = (out.dims()[0], out.dims()[1], out.dims()[2]);
            accumulate(grads, a, kernels::pixel_unshuffle(g, c, ho / r, wo / r, r));
        }
        &Op::Bilinear { x, grid } => {
            let (vx, vg) = (val(x), val(grid));
            let (c, h, w) = (vx.dims()[0], vx.dims()[1], vx.dims()[2]);
            let (ho, wo) = (vg.dims()[1], vg.dims()[2]);
            let n = ho * wo;
            let gd = vg.data();
            let mut dx = wants(x).then(|| vec![0.0; vx.len()]);
            let mut dgrid = wants(grid).then(|| vec![0.0; vg.len()]);
            for p in 0..n {
                let (y0, y1, fy, iny) = kernels::bilinear_tap(gd[p], h);
                let (x0, x1, fx, inx) = kernels::bilinear_tap(gd[n + p], w);
                let (w00, w01, w10, w11) = ((1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx);
                for ch in 0..c {
                    let go = g[ch * n + p];
                    let base = ch * h * w;
                    if let Some(dx) = dx.as_mut() {
                        dx[base + y0 * w + x0] += go * w00;
                        dx[base + y0 * w + x1] += go * w01;
                        dx[base + y1 * w + x0] += go * w10;
                        dx[base + y1 * w + x1] += go * w11;
                    }
                    if let Some(dg) = dgrid.as_mut() {
                        let xv = vx.data();
                        let (v00, v01, v10, v11) = (
                            xv[base + y0 * w + x0],
                            xv[base + y0 * w + x1],
                            xv[base + y1 * w + x0],
                            xv[base + y1 * w + x1],
                        );
                        if iny && h > 1 {
                            dg[p] += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                        if inx && w > 1 {
                            dg[n + p] += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                        }
                    }
                }
            }
            if let Some(dx) = dx {
                accumulate(grads, x, dx);
            }
            if let Some(dg) = dgrid {
                accumulate(grads, grid, dg);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

pub(crate) fn bilinear_forward(x: &Tensor, grid: &Tensor) -> Tensor {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let (ho, wo) = (grid.dims()[1], grid.dims()[2]);
    let n = ho * wo;
    let gd = grid.data();
    let xv = x.data();
    let mut out = vec![0.0; c * n];
    for p in 0..n {
        let (y0, y1, fy, _) = kernels::bilinear_tap(gd[p], h);
        let (x0, x1, fx, _) = kernels::bilinear_tap(gd[n + p], w);
        for ch in 0..c {
            let base = ch * h * w;
            let top = (1.0 - fx) * xv[base + y0 * w + x0] + fx * xv[base + y0 * w + x1];
            let bottom = (1.0 - fx) * xv[base + y1 * w + x0] + fx * xv[base + y1 * w + x1];
            out[ch * n + p] = (1.0 - fy) * top + fy * bottom;
        }
    }
    Tensor::new(vec![c, ho, wo], out).expect("extents are positive")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.dims().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.record(v, op)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.dims() != b.dims() {
            return Err(shape_err(name, a.dims(), b.dims()));
        }
        let data = zip_map(a.data(), b.data(), f);
        Ok(self.tape.record(Tensor::new(a.dims().to_vec(), data)?, op))
    }

    /// Matrix product `self · other` of `m×k` and `k×n` operands.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&self, other: &Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 {
            return Err(shape_err("matmul", a.dims(), b.dims()));
        }
        let (m, ka) = if ta { (a.dims()[1], a.dims()[0]) } else { (a.dims()[0], a.dims()[1]) };
        let (kb, n) = if tb { (b.dims()[1], b.dims()[0]) } else { (b.dims()[0], b.dims()[1]) };
        if ka != kb {
            return Err(shape_err("matmul", a.dims(), b.dims()));
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, ka, n, a.data(), ta, b.data(), tb, &mut c, false);
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            ta,
            tb,
        };
        Ok(self.tape.record(Tensor::new(vec![m, n], c)?, op))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {:?}", a.dims())));
        }
        let (r, c) = (a.dims()[0], a.dims()[1]);
        let t = Tensor::new(vec![c, r], transpose(a.data(), r, c))?;
        Ok(self.tape.record(t, Op::Transpose(self.id)))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Adds a length-`m` row to every row of an `n×m` matrix.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row);
        let (a, r) = (self.value(), row.value());
        let m = r.len();
        if a.rank() != 2 || a.dims()[1] != m {
            return Err(shape_err("add_row", a.dims(), r.dims()));
        }
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (x, b) in chunk.iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        let op = Op::AddRow {
            a: self.id,
            row: row.id,
        };
        Ok(self.tape.record(Tensor::new(a.dims().to_vec(), data)?, op))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'t> {
        self.unary(Op::Affine { a: self.id, scale }, |x| scale * x + shift)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// Natural log; callers keep the input strictly positive.
    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { a: self.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.record(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.tape.record(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Row-wise softmax of a rank-2 tensor, stabilized by the row max.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(invalid("softmax_rows", format!("expected rank 2, got {:?}", a.dims())));
        }
        let n = a.dims()[1];
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        Ok(self.tape.record(Tensor::new(a.dims().to_vec(), data)?, Op::SoftmaxRows(self.id)))
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(invalid("log_softmax_rows", format!("expected rank 2, got {:?}", a.dims())));
        }
        let n = a.dims()[1];
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let op = Op::LogSoftmaxRows(self.id);
        Ok(self.tape.record(Tensor::new(a.dims().to_vec(), data)?, op))
    }

    /// Selects `self[i, cols[i]]` for every row `i`, giving a length-`n` vector.
    pub fn pick(&self, cols: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || a.dims()[0] != cols.len() {
            return Err(shape_err("pick", a.dims(), &[cols.len()]));
        }
        let k = a.dims()[1];
        if let Some(&bad) = cols.iter().find(|&&c| c >= k) {
            return Err(invalid("pick", format!("column {bad} out of range for width {k}")));
        }
        let data = cols.iter().enumerate().map(|(i, &c)| a.data()[i * k + c]).collect();
        let op = Op::Pick {
            a: self.id,
            cols: cols.to_vec(),
        };
        Ok(self.tape.record(Tensor::new(vec![cols.len()], data)?, op))
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(dims)?;
        Ok(self.tape.record(v, Op::Reshape(self.id)))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let head = first.value();
        let trailing = head.dims()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            first.same_tape(p);
            let v = p.value();
            if v.dims()[1..] != trailing[..] {
                return Err(shape_err("concat", head.dims(), v.dims()));
            }
            lead += v.dims()[0];
            data.extend_from_slice(v.data());
        }
        let mut dims = vec![lead];
        dims.extend(trailing);
        let op = Op::Concat(parts.iter().map(|p| p.id).collect());
        Ok(tape.record(Tensor::new(dims, data)?, op))
    }

    /// Entries `[start, start + count)` along the leading axis.
    pub fn slice(&self, start: usize, count: usize) -> Result<Var<'t>> {
        let a = self.value();
        if count == 0 || start + count > a.dims()[0] {
            return Err(invalid("slice", format!("{start}..{} of {:?}", start + count, a.dims())));
        }
        let plane: usize = a.dims()[1..].iter().product();
        let mut dims = a.dims().to_vec();
        dims[0] = count;
        let data = a.data()[start * plane..(start + count) * plane].to_vec();
        let op = Op::Slice { a: self.id, start };
        Ok(self.tape.record(Tensor::new(dims, data)?, op))
    }

    /// Same-padded 2-D convolution of a `(cin, h, w)` map with
    /// `(cout, cin, k, k)` weights and a length-`cout` bias.
    pub fn conv2d_same(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(weight);
        self.same_tape(bias);
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        if x.rank() != 3 || w.rank() != 4 || w.dims()[1] != x.dims()[0] {
            return Err(shape_err("conv2d_same", x.dims(), w.dims()));
        }
        let (cout, k) = (w.dims()[0], w.dims()[2]);
        if w.dims()[3] != k || k % 2 == 0 {
            return Err(invalid("conv2d_same", format!("kernel must be odd and square, got {:?}", w.dims())));
        }
        if b.len() != cout {
            return Err(shape_err("conv2d_same", w.dims(), b.dims()));
        }
        let (cin, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let hw = h * wd;
        let cols = kernels::im2col(x.data(), cin, h, wd, k);
        let mut out = vec![0.0; cout * hw];
        for (chunk, &bias) in out.chunks_mut(hw).zip(b.data()) {
            chunk.fill(bias);
        }
        kernels::gemm(cout, cin * k * k, hw, w.data(), false, &cols, false, &mut out, true);
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.id,
        };
        Ok(self.tape.record(Tensor::new(vec![cout, h, wd], out)?, op))
    }

    /// `(c·r², h, w) → (c, r·h, r·w)` with
    /// `out[c][h·r+i][w·r+j] = in[c·r² + i·r + j][h][w]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 3 || r == 0 || x.dims()[0] % (r * r) != 0 {
            return Err(invalid(
                "pixel_shuffle",
                format!("channels of {:?} not divisible by r²={}", x.dims(), r * r),
            ));
        }
        let (c, h, w) = (x.dims()[0] / (r * r), x.dims()[1], x.dims()[2]);
        let data = kernels::pixel_shuffle(x.data(), c, h, w, r);
        let op = Op::PixelShuffle { a: self.id, r };
        Ok(self.tape.record(Tensor::new(vec![c, h * r, w * r], data)?, op))
    }

    /// Samples a `(c, h, w)` map at the `(2, ho, wo)` source coordinates in
    /// `grid` (row coordinate first). Coordinates are in source-pixel units
    /// with integer values landing on pixel centers; out-of-range
    /// coordinates are clamped to the border.
    pub fn bilinear_sample(&self, grid: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(grid);
        let (x, g) = (self.value(), grid.value());
        if x.rank() != 3 || g.rank() != 3 || g.dims()[0] != 2 {
            return Err(shape_err("bilinear_sample", x.dims(), g.dims()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite { op: "bilinear_sample" });
        }
        let out = bilinear_forward(&x, &g);
        let op = Op::Bilinear {
            x: self.id,
            grid: grid.id,
        };
        Ok(self.tape.record(out, op))
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, rel_err};
    use crate::rng::Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        assert_eq!(i.matmul(&b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(&c).unwrap().value().data(), &[11.0]);
        let z = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(z.matmul(&b).unwrap().value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[0.0, 0.0, 1.0, 2.0, 1000.0, 1000.0]));
        let y = x.softmax_rows().unwrap().value();
        let d = y.data();
        assert_eq!(&d[0..2], &[0.5, 0.5]);
        assert!((d[2] - 0.26894).abs() < 1e-5 && (d[3] - 0.73106).abs() < 1e-5);
        assert_eq!(&d[4..6], &[0.5, 0.5]);
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().value().item(), 0.5);
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
        let s = tape.constant(t(&[2], &[2.0, 4.0]));
        assert_eq!(s.scale(0.25).value().data(), &[0.5, 1.0]);
        let c = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn concat_orders_channels_and_slices_back() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[3, 1, 1], &[3.0, 4.0, 5.0]));
        let c = Var::concat(&[a, b]).unwrap();
        assert_eq!(c.dims(), vec![5, 1, 1]);
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(*c.slice(2, 3).unwrap().value(), *b.value());
        let single = Var::concat(&[a]).unwrap();
        assert_eq!(*single.value(), *a.value());
        let bad = tape.constant(Tensor::zeros(vec![1, 2, 1]));
        assert!(Var::concat(&[a, bad]).is_err());
    }

    #[test]
    fn concat_sum_gradient_splits_ones() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 1, 1], &[1.0, 2.0]));
        let b = tape.leaf(t(&[3, 1, 1], &[3.0, 4.0, 5.0]));
        let loss = Var::concat(&[a, b]).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0, 1.0]);
        assert_eq!(g.wrt(b).data(), &[1.0, 1.0, 1.0]);
        // and the finite-difference oracle agrees
        let inputs = [a.value().as_ref().clone(), b.value().as_ref().clone()];
        let report = check_gradients(&inputs, 1e-5, |_, v| Ok(Var::concat(v)?.sum())).unwrap();
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.3, -1.0, 2.0, 5.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 4]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let lonely = tape.leaf(t(&[2], &[7.0, 8.0]));
        let loss = x.mul(&x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(g.wrt(lonely).data(), &[0.0, 0.0]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn pick_rejects_out_of_range() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(x.pick(&[0, 2]).is_err());
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 3]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(x.conv2d_same(&w, &b).is_err());
    }

    #[test]
    fn three_layer_composite_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let inputs = [
            Tensor::uniform(vec![4, 5], -1.0, 1.0, &mut rng),
            Tensor::uniform(vec![5, 6], -1.0, 1.0, &mut rng),
            Tensor::uniform(vec![6, 3], -1.0, 1.0, &mut rng),
            Tensor::uniform(vec![3], -1.0, 1.0, &mut rng),
        ];
        let report = check_gradients(&inputs, 1e-5, |_, v| {
            let h1 = v[0].matmul(&v[1])?.sigmoid();
            let h2 = h1.matmul(&v[2])?.add_row(&v[3])?.softmax_rows()?;
            Ok(h2.mul(&h2)?.exp().mean())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        assert!(rel_err(1.0, 1.0) == 0.0);
    }
}
