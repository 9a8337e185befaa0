//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value is a 2-D matrix; scalars are `1 x 1`. Nodes are appended in
//! evaluation order, so a single reverse sweep in index order yields exact
//! gradients. The tape is rebuilt for every forward pass.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::sparse::CsrMatrix;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Mat>),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    LogSigmoid(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Rc<Vec<Option<usize>>>),
    SpMM(Rc<CsrMatrix>, Var),
    RowDot(Var, Var),
    Sum(Var),
    Gru(Box<GruNode>),
}

/// Inputs and gate activations kept by a fused recurrent step.
#[derive(Debug)]
struct GruNode {
    x: Var,
    h: Var,
    w_input: Var,
    w_hidden: Var,
    b_input: Var,
    b_hidden: Var,
    keep: Option<Rc<Mat>>,
    r: Mat,
    u: Mat,
    n: Mat,
    hidden_n: Mat,
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

/// `ln(sigmoid(x))`, evaluated without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a row vector");
        let v = self.value(a) + r;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise product with a constant matrix (masks, sampled noise).
    pub fn mul_const(&mut self, a: Var, c: Rc<Mat>) -> Var {
        let v = self.value(a) * c.as_ref();
        self.push(v, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<Option<usize>>>) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((idx.len(), src.ncols()));
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = i {
                v.row_mut(r).assign(&src.row(*i));
            }
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let idx = Rc::new(idx.iter().map(|&i| Some(i)).collect());
        self.gather_rows(a, idx)
    }

    /// Constant sparse matrix times a dense node.
    pub fn spmm(&mut self, a: Rc<CsrMatrix>, x: Var) -> Var {
        let v = a.mul_dense(self.value(x));
        self.push(v, Op::SpMM(a, x))
    }

    /// Row-wise dot product of two equally shaped matrices, giving `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let v = (self.value(a) * self.value(b))
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.push(v, Op::RowDot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// One gated recurrent step as a single node.
    ///
    /// Gate columns are ordered reset, update, candidate. With `keep`, rows
    /// whose flag is 0 carry `h` through unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn gru(&mut self, x: Var, h: Var, w_input: Var, w_hidden: Var, b_input: Var, b_hidden: Var, keep: Option<Rc<Mat>>) -> Var {
        let hv = self.value(h);
        let hd = hv.ncols();
        let gx = self.value(x).dot(self.value(w_input)) + self.value(b_input);
        let gh = hv.dot(self.value(w_hidden)) + self.value(b_hidden);
        let mut r = &gx.slice(s![.., 0..hd]) + &gh.slice(s![.., 0..hd]);
        r.mapv_inplace(sigmoid);
        let mut u = &gx.slice(s![.., hd..2 * hd]) + &gh.slice(s![.., hd..2 * hd]);
        u.mapv_inplace(sigmoid);
        let hidden_n = gh.slice(s![.., 2 * hd..]).to_owned();
        let mut n = &gx.slice(s![.., 2 * hd..]) + &(&r * &hidden_n);
        n.mapv_inplace(f64::tanh);
        let mut out = &n + &(&u * &(hv - &n));
        if let Some(k) = &keep {
            Zip::from(&mut out)
                .and(hv)
                .and(k.as_ref())
                .for_each(|o, &h, &k| *o = h + k * (*o - h));
        }
        self.push(
            out,
            Op::Gru(Box::new(GruNode {
                x,
                h,
                w_input,
                w_hidden,
                b_input,
                b_hidden,
                keep,
                r,
                u,
                n,
                hidden_n,
            })),
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *r, gr);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, &g * c.as_ref()),
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| {
                            if x <= 0.0 {
                                *g = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Square(a) => acc(&mut grads, *a, g * self.value(*a) * 2.0),
                Op::LogSigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g *= sigmoid(-x));
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, &x| {
                            if x < *lo || x > *hi {
                                *g = 0.0
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Mat::zeros(self.shape(*a));
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = i {
                            let mut dst = ga.row_mut(*i);
                            dst += &g.row(r);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SpMM(m, x) => acc(&mut grads, *x, m.mul_transpose_dense(&g)),
                Op::RowDot(a, b) => {
                    let ga = self.value(*b) * &g;
                    let gb = self.value(*a) * &g;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sum(a) => {
                    let k = g[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(self.shape(*a), k));
                }
                Op::Gru(c) => {
                    let hv = self.value(c.h);
                    let hd = hv.ncols();
                    let (g_step, g_carry) = match &c.keep {
                        Some(k) => (&g * k.as_ref(), Some(&g * &k.mapv(|k| 1.0 - k))),
                        None => (g, None),
                    };
                    let rows = g_step.nrows();
                    let mut d_gx = Mat::zeros((rows, 3 * hd));
                    let mut d_gh = Mat::zeros((rows, 3 * hd));
                    let mut d_h = &g_step * &c.u;
                    for i in 0..rows {
                        for j in 0..hd {
                            let (r, u, n) = (c.r[[i, j]], c.u[[i, j]], c.n[[i, j]]);
                            let gs = g_step[[i, j]];
                            let du = gs * (hv[[i, j]] - n) * u * (1.0 - u);
                            let dn = gs * (1.0 - u) * (1.0 - n * n);
                            let dr = dn * c.hidden_n[[i, j]] * r * (1.0 - r);
                            d_gx[[i, j]] = dr;
                            d_gx[[i, hd + j]] = du;
                            d_gx[[i, 2 * hd + j]] = dn;
                            d_gh[[i, j]] = dr;
                            d_gh[[i, hd + j]] = du;
                            d_gh[[i, 2 * hd + j]] = dn * r;
                        }
                    }
                    d_h += &d_gh.dot(&self.value(c.w_hidden).t());
                    if let Some(carry) = g_carry {
                        d_h += &carry;
                    }
                    acc(&mut grads, c.x, d_gx.dot(&self.value(c.w_input).t()));
                    acc(&mut grads, c.w_input, self.value(c.x).t().dot(&d_gx));
                    acc(&mut grads, c.b_input, d_gx.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, c.w_hidden, hv.t().dot(&d_gh));
                    acc(&mut grads, c.b_hidden, d_gh.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, c.h, d_h);
                }
            }
        }
        Gradients { grads }
    }
}
