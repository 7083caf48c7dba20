//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Values are kept
//! on the tape so that [`Graph::backward`] can replay the chain in reverse.
//! Index-valued decisions (FPS, kNN, top-k selection) are taken on plain
//! values outside the tape and enter it only through [`Graph::gather`].

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Square,
    Sqrt,
    Abs,
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMulNt { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    MulCol { a: Var, col: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Gather { a: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    GroupSum { a: Var, k: usize },
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    RowMatVec { m: Var, h: Var },
    ShiftRows { a: Var, offset: isize },
    LaplaceBin { y: Var, mu: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter touched by the pass, in id order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].clone().map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability mass of the unit bin centred at `y` under a Laplace law
/// with location `mu` and scale `b`, plus its partials w.r.t. `(y, b)`.
/// The partial w.r.t. `mu` is the negation of the one w.r.t. `y`.
pub(crate) fn laplace_bin(y: f64, mu: f64, b: f64) -> (f64, f64, f64) {
    let d = y - mu;
    let m = d.abs();
    let s = if d >= 0.0 { 1.0 } else { -1.0 };
    if m >= 0.5 {
        // 0.5 * (e^{-(m-.5)/b} - e^{-(m+.5)/b})
        let e1 = (-(m - 0.5) / b).exp();
        let e2 = (-(m + 0.5) / b).exp();
        let p = 0.5 * (e1 - e2);
        let dp_dm = 0.5 * (-e1 + e2) / b;
        let dp_db = 0.5 * (e1 * (m - 0.5) - e2 * (m + 0.5)) / (b * b);
        (p, s * dp_dm, dp_db)
    } else {
        // 1 - 0.5 * (e^{-(.5-m)/b} + e^{-(.5+m)/b})
        let e1 = (-(0.5 - m) / b).exp();
        let e2 = (-(0.5 + m) / b).exp();
        let p = 1.0 - 0.5 * (e1 + e2);
        let dp_dm = -0.5 * (e1 / b - e2 / b);
        let dp_db = -0.5 * (e1 * (0.5 - m) + e2 * (0.5 + m)) / (b * b);
        (p, s * dp_dm, dp_db)
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Places a parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, Op::Leaf)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), wv.rows(), "linear: input width {} vs weight rows {}", xv.cols(), wv.rows());
        let mut out = Tensor::zeros(xv.rows(), wv.cols());
        gemm(false, false, xv, wv, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, out.cols()));
            let bd = bv.data().to_vec();
            for r in 0..out.rows() {
                for (o, bb) in out.row_mut(r).iter_mut().zip(&bd) {
                    *o += bb;
                }
            }
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.linear(a, b, None)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(false, true, av, bv, &mut out, 0.0);
        self.push(out, Op::MatMulNt { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row).clone();
        let av = self.value(a);
        assert_eq!(rv.shape(), (1, av.cols()), "add_row shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow { a, row })
    }

    /// Multiplies every row of `a` elementwise by a `1×m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row).clone();
        let av = self.value(a);
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= x;
            }
        }
        self.push(out, Op::MulRow { a, row })
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `n×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let cv = self.value(col).clone();
        let av = self.value(a);
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col shape mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= s);
        }
        self.push(out, Op::MulCol { a, col })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Softplus => softplus,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Square => |x| x * x,
            Unary::Sqrt => f64::sqrt,
            Unary::Abs => f64::abs,
        };
        let out = self.value(a).map(f);
        self.push(out, Op::Unary(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    /// Rows of `a` picked by `idx` (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let out = self.value(a).gather_rows(&idx);
        self.push(out, Op::Gather { a, idx })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_cols(&vals);
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_rows(&vals);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_cols(start, end);
        self.push(out, Op::SliceCols { a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_rows(start, end);
        self.push(out, Op::SliceRows { a, start })
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshape(rows, cols);
        self.push(out, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `log Σ_c exp(a[r, c])` for every row, as an `n×1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows(), 1);
        for r in 0..av.rows() {
            let row = av.row(r);
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            out.data_mut()[r] = m + s.ln();
        }
        self.push(out, Op::LogSumExpRows(a))
    }

    /// Sums consecutive blocks of `k` rows: `(n·k)×m → n×m`.
    pub fn group_sum(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        assert!(k > 0 && av.rows().is_multiple_of(k), "group_sum: {} rows not divisible by {k}", av.rows());
        let n = av.rows() / k;
        let mut out = Tensor::zeros(n, av.cols());
        for g in 0..n {
            for j in 0..k {
                let src = av.row(g * k + j);
                for (o, x) in out.row_mut(g).iter_mut().zip(src) {
                    *o += x;
                }
            }
        }
        self.push(out, Op::GroupSum { a, k })
    }

    pub fn group_mean(&mut self, a: Var, k: usize) -> Var {
        let s = self.group_sum(a, k);
        self.scale(s, 1.0 / k as f64)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums as an `n×1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(av.rows(), 1, data);
        self.push(out, Op::RowSums(a))
    }

    /// Per-column sums as a `1×m` row.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        self.push(out, Op::ColSums(a))
    }

    /// Row-wise matrix–vector product: `m` is `R×(o·i)` holding one `o×i`
    /// matrix per row, `h` is `R×i`; result is `R×o`.
    pub fn row_matvec(&mut self, m: Var, h: Var) -> Var {
        let mv = self.value(m);
        let hv = self.value(h);
        let (r, i) = hv.shape();
        assert_eq!(mv.rows(), r);
        assert!(i > 0 && mv.cols().is_multiple_of(i));
        let o = mv.cols() / i;
        let mut out = Tensor::zeros(r, o);
        for row in 0..r {
            let mm = mv.row(row);
            let hh = hv.row(row);
            for a in 0..o {
                let w = &mm[a * i..(a + 1) * i];
                out.data_mut()[row * o + a] = w.iter().zip(hh).map(|(x, y)| x * y).sum();
            }
        }
        self.push(out, Op::RowMatVec { m, h })
    }

    /// Shifts rows by `offset` (`out[r] = a[r - offset]`), zero-filling.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        let mut out = Tensor::zeros(n, c);
        for r in 0..n {
            let src = r as isize - offset;
            if src >= 0 && (src as usize) < n {
                out.row_mut(r).copy_from_slice(av.row(src as usize));
            }
        }
        self.push(out, Op::ShiftRows { a, offset })
    }

    /// Elementwise Laplace mass of the unit bin around `y`.
    pub fn laplace_bin(&mut self, y: Var, mu: Var, b: Var) -> Var {
        let yv = self.value(y);
        let mv = self.value(mu);
        let bv = self.value(b);
        assert_eq!(yv.shape(), mv.shape());
        assert_eq!(yv.shape(), bv.shape());
        let data = (0..yv.len()).map(|i| laplace_bin(yv.data()[i], mv.data()[i], bv.data()[i]).0).collect();
        let out = Tensor::from_vec(yv.rows(), yv.cols(), data);
        self.push(out, Op::LaplaceBin { y, mu, b })
    }

    /// Reverse pass from a `1×1` loss. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(go) = grads[i].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    gemm(false, true, &go, wv, &mut gx, 0.0);
                    let mut gw = Tensor::zeros(wv.rows(), wv.cols());
                    gemm(true, false, xv, &go, &mut gw, 0.0);
                    if let Some(b) = b {
                        let mut gb = Tensor::zeros(1, go.cols());
                        for r in 0..go.rows() {
                            for (o, x) in gb.data_mut().iter_mut().zip(go.row(r)) {
                                *o += x;
                            }
                        }
                        acc(&mut grads, *b, gb);
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                }
                Op::MatMulNt { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(false, false, &go, bv, &mut ga, 0.0);
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(true, false, &go, av, &mut gb, 0.0);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, go.clone());
                    acc(&mut grads, *b, go);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, go.map(|x| -x));
                    acc(&mut grads, *a, go);
                }
                Op::Mul(a, b) => {
                    let ga = go.zip_map(self.value(*b), |g, y| g * y);
                    let gb = go.zip_map(self.value(*a), |g, x| g * x);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow { a, row } => {
                    let mut gr = Tensor::zeros(1, go.cols());
                    for r in 0..go.rows() {
                        for (o, x) in gr.data_mut().iter_mut().zip(go.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, go);
                }
                Op::MulRow { a, row } => {
                    let av = self.value(*a);
                    let rv = self.value(*row);
                    let mut ga = go.clone();
                    let mut gr = Tensor::zeros(1, go.cols());
                    for r in 0..go.rows() {
                        let gorow = go.row(r);
                        let arow = av.row(r);
                        for c in 0..go.cols() {
                            gr.data_mut()[c] += gorow[c] * arow[c];
                        }
                        for (g, x) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *g *= x;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::MulCol { a, col } => {
                    let av = self.value(*a);
                    let cv = self.value(*col);
                    let mut ga = go.clone();
                    let mut gc = Tensor::zeros(go.rows(), 1);
                    for r in 0..go.rows() {
                        gc.data_mut()[r] = go.row(r).iter().zip(av.row(r)).map(|(g, x)| g * x).sum();
                        let s = cv.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|g| *g *= s);
                    }
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, go.map(|g| g * s));
                }
                Op::AddScalar(a) => acc(&mut grads, *a, go),
                Op::Unary(a, kind) => {
                    let x = self.value(*a);
                    let ga = match kind {
                        Unary::Relu => go.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }),
                        Unary::Sigmoid => go.zip_map(out, |g, y| g * y * (1.0 - y)),
                        Unary::Tanh => go.zip_map(out, |g, y| g * (1.0 - y * y)),
                        Unary::Softplus => go.zip_map(x, |g, x| g * sigmoid(x)),
                        Unary::Exp => go.zip_map(out, |g, y| g * y),
                        Unary::Log => go.zip_map(x, |g, x| g / x),
                        Unary::Square => go.zip_map(x, |g, x| 2.0 * g * x),
                        Unary::Sqrt => go.zip_map(out, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 }),
                        Unary::Abs => go.zip_map(x, |g, x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 }),
                    };
                    acc(&mut grads, *a, ga);
                }
                Op::Gather { a, idx } => {
                    let (n, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(n, c);
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, g) in ga.row_mut(src).iter_mut().zip(go.row(r)) {
                            *o += g;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut grads, *p, go.slice_cols(start, start + w));
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc(&mut grads, *p, go.slice_rows(start, start + h));
                        start += h;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (n, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(n, c);
                    for r in 0..n {
                        ga.row_mut(r)[*start..*start + go.cols()].copy_from_slice(go.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows { a, start } => {
                    let (n, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(n, c);
                    ga.data_mut()[start * c..(start + go.rows()) * c].copy_from_slice(go.data());
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let (n, c) = self.shape(*a);
                    acc(&mut grads, *a, go.reshape(n, c));
                }
                Op::Transpose(a) => acc(&mut grads, *a, go.transpose()),
                Op::SoftmaxRows(a) => {
                    let mut ga = go.clone();
                    for r in 0..go.rows() {
                        let y = out.row(r);
                        let dot: f64 = go.row(r).iter().zip(y).map(|(g, y)| g * y).sum();
                        for (gg, yy) in ga.row_mut(r).iter_mut().zip(y) {
                            *gg = yy * (*gg - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let lse = out.data()[r];
                        let g = go.data()[r];
                        for (o, xx) in ga.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = g * (xx - lse).exp();
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GroupSum { a, k } => {
                    let (n, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(n, c);
                    for r in 0..n {
                        ga.row_mut(r).copy_from_slice(go.row(r / k));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (n, c) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::full(n, c, go.item()));
                }
                Op::RowSums(a) => {
                    let (n, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(n, c);
                    for r in 0..n {
                        let g = go.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x = g);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ColSums(a) => {
                    let (n, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(n, c);
                    for r in 0..n {
                        ga.row_mut(r).copy_from_slice(go.data());
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowMatVec { m, h } => {
                    let mv = self.value(*m);
                    let hv = self.value(*h);
                    let (r, iw) = hv.shape();
                    let o = go.cols();
                    let mut gm = Tensor::zeros(mv.rows(), mv.cols());
                    let mut gh = Tensor::zeros(r, iw);
                    for row in 0..r {
                        let g = go.row(row);
                        let hh = hv.row(row);
                        let mm = mv.row(row);
                        let gmr = gm.row_mut(row);
                        for a in 0..o {
                            for b in 0..iw {
                                gmr[a * iw + b] = g[a] * hh[b];
                            }
                        }
                        let ghr = gh.row_mut(row);
                        for a in 0..o {
                            for b in 0..iw {
                                ghr[b] += g[a] * mm[a * iw + b];
                            }
                        }
                    }
                    acc(&mut grads, *m, gm);
                    acc(&mut grads, *h, gh);
                }
                Op::ShiftRows { a, offset } => {
                    let (n, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(n, c);
                    for r in 0..n {
                        let src = r as isize - offset;
                        if src >= 0 && (src as usize) < n {
                            ga.row_mut(src as usize).copy_from_slice(go.row(r));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LaplaceBin { y, mu, b } => {
                    let yv = self.value(*y);
                    let mv = self.value(*mu);
                    let bv = self.value(*b);
                    let (n, c) = yv.shape();
                    let mut gy = Tensor::zeros(n, c);
                    let mut gb = Tensor::zeros(n, c);
                    for i in 0..yv.len() {
                        let (_, dy, db) = laplace_bin(yv.data()[i], mv.data()[i], bv.data()[i]);
                        gy.data_mut()[i] = go.data()[i] * dy;
                        gb.data_mut()[i] = go.data()[i] * db;
                    }
                    acc(&mut grads, *mu, gy.map(|x| -x));
                    acc(&mut grads, *y, gy);
                    acc(&mut grads, *b, gb);
                }
            }
        }
        let params = self.params.iter().map(|(k, v)| (*k, *v)).collect();
        Gradients { grads, params }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `f` w.r.t. every entry of `x0`.
    fn check(x0: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = f(&mut g, x);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or(Tensor::zeros(x0.rows(), x0.cols()));
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut t = x0.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.input(t);
                let y = f(&mut g, x);
                g.value(y).sum()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "entry {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_tensor(&mut rng, 3, 4);
        check(x0.clone(), |g, x| g.sigmoid(x));
        check(x0.clone(), |g, x| g.tanh(x));
        check(x0.clone(), |g, x| g.softplus(x));
        check(x0.clone(), |g, x| g.exp(x));
        check(x0.clone(), |g, x| g.square(x));
        check(x0.map(|v| v.abs() + 0.5), |g, x| g.ln(x));
        check(x0.map(|v| v.abs() + 0.5), |g, x| g.sqrt(x));
        check(x0.clone(), |g, x| {
            let s = g.softmax_rows(x);
            let w = g.constant(Tensor::from_vec(3, 4, (0..12).map(|i| i as f64).collect()));
            g.mul(s, w)
        });
        check(x0.clone(), |g, x| g.logsumexp_rows(x));
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_tensor(&mut rng, 4, 3);
        let w0 = rand_tensor(&mut rng, 3, 2);
        check(x0.clone(), |g, x| {
            let w = g.constant(w0.clone());
            let b = g.constant(Tensor::from_vec(1, 2, vec![0.3, -0.2]));
            let y = g.linear(x, w, Some(b));
            g.square(y)
        });
        check(w0.clone(), |g, w| {
            let x = g.constant(x0.clone());
            let y = g.linear(x, w, None);
            g.square(y)
        });
        check(x0.clone(), |g, x| {
            let y = g.gather(x, vec![3, 0, 0, 2]);
            g.square(y)
        });
        check(x0.clone(), |g, x| {
            let t = g.matmul_nt(x, x);
            g.square(t)
        });
        check(x0.clone(), |g, x| {
            let gs = g.group_sum(x, 2);
            let sq = g.square(gs);
            let r = g.row_sums(sq);
            let c = g.col_sums(x);
            let c2 = g.square(c);
            let s1 = g.sum(r);
            let s2 = g.sum(c2);
            g.add(s1, s2)
        });
        check(x0.clone(), |g, x| {
            let a = g.slice_cols(x, 1, 3);
            let b = g.slice_rows(x, 1, 3);
            let p = g.matmul(a, b);
            let pt = g.transpose(p);
            let r = g.reshape(pt, 2, 6);
            g.square(r)
        });
        check(x0.clone(), |g, x| {
            let s1 = g.shift_rows(x, 1);
            let s2 = g.shift_rows(x, -1);
            let c = g.concat_cols(&[s1, x, s2]);
            let d = g.concat_rows(&[c, c]);
            g.square(d)
        });
        check(x0.clone(), |g, x| {
            let col = g.slice_cols(x, 0, 1);
            let row = g.slice_rows(x, 0, 1);
            let a = g.mul_col(x, col);
            let b = g.mul_row(a, row);
            g.add_row(b, row)
        });
        let m0 = rand_tensor(&mut rng, 4, 6);
        check(m0, |g, m| {
            let h = g.constant(x0.clone());
            let y = g.row_matvec(m, h);
            g.square(y)
        });
        check(x0.clone(), |g, h| {
            let m = g.constant(Tensor::from_vec(4, 6, (0..24).map(|i| (i as f64).sin()).collect()));
            let y = g.row_matvec(m, h);
            g.square(y)
        });
    }

    #[test]
    fn laplace_bin_partials_match_finite_differences() {
        for &(y, mu, b) in &[(0.0, 0.1, 0.7), (2.0, -0.3, 1.3), (-3.0, 0.2, 0.4), (0.3, 0.0, 2.0)] {
            let (_, dy, db) = laplace_bin(y, mu, b);
            let h = 1e-6;
            let fy = (laplace_bin(y + h, mu, b).0 - laplace_bin(y - h, mu, b).0) / (2.0 * h);
            let fb = (laplace_bin(y, mu, b + h).0 - laplace_bin(y, mu, b - h).0) / (2.0 * h);
            assert!((fy - dy).abs() < 1e-7, "{fy} vs {dy}");
            assert!((fb - db).abs() < 1e-7, "{fb} vs {db}");
        }
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 1, vec![3.0]));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let loss = g.sum(p);
        let grads = g.backward(loss);
        let pg = grads.param_grads();
        assert_eq!(pg.len(), 1);
        assert!((pg[0].1.item() - 6.0).abs() < 1e-12);
    }
}
