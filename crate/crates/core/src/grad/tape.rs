//! Reverse-mode gradients over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! accumulates adjoints. The operator set is fixed and small: it covers the
//! model forward pass and every training loss, nothing more.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

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
    /// `a * b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    NormalizeRows(Var, Vec<f64>),
    Sum(Var),
    SumRows(Var),
    GatherRows(Var, Vec<usize>),
    ClassProduct(Var, Var),
    /// Row-softmax over off-diagonal similarities minus the partner picks,
    /// scaled by `1 / (n * temperature)`.
    InfoNce(Var, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like `like` when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, like: &Matrix) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).gemm(false, self.value(b), true)?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape(
                "add_row",
                format!("(1, {})", av.cols()),
                format!("{:?}", rv.shape()),
            ));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant (no gradient flows into `c`).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        same_shape("mul_const", self.value(a), &c)?;
        let value = self.value(a).zip_map(&c, |x, y| x * y);
        Ok(self.push(value, Op::MulConst(a, c)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Var {
        let value = self.value(a).map(|x| x + shift);
        self.push(value, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn powf(&mut self, a: Var, exponent: f64) -> Var {
        let value = self.value(a).map(|x| {
            if exponent == 0.0 {
                1.0
            } else {
                x.powf(exponent)
            }
        });
        self.push(value, Op::Powf(a, exponent))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let norm = av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for v in value.row_mut(r) {
                *v /= norm;
            }
            norms.push(norm);
        }
        self.push(value, Op::NormalizeRows(a, norms))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::from_fn(av.rows(), 1, |r, _| av.row(r).iter().sum());
        self.push(value, Op::SumRows(a))
    }

    /// `sum(weights * a)` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Matrix) -> Result<Var> {
        let m = self.mul_const(a, weights)?;
        Ok(self.sum(m))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::shape("gather_rows", format!("< {}", av.rows()), bad));
        }
        let value = av.select_rows(&indices);
        Ok(self.push(value, Op::GatherRows(a, indices)))
    }

    /// Row `i * C + c` of the result is `h[i] ⊙ e[c]`, for `h: n x H`, `e: C x H`.
    pub fn class_product(&mut self, h: Var, e: Var) -> Result<Var> {
        let (hv, ev) = (self.value(h), self.value(e));
        if hv.cols() != ev.cols() {
            return Err(Error::shape("class_product", hv.cols(), ev.cols()));
        }
        let (n, classes, width) = (hv.rows(), ev.rows(), hv.cols());
        let mut value = Matrix::zeros(n * classes, width);
        for i in 0..n {
            let hr = hv.row(i);
            for c in 0..classes {
                let out = value.row_mut(i * classes + c);
                for ((o, x), y) in out.iter_mut().zip(hr).zip(ev.row(c)) {
                    *o = x * y;
                }
            }
        }
        Ok(self.push(value, Op::ClassProduct(h, e)))
    }

    /// Mean InfoNCE over the rows of `z`: for row `i`,
    /// `log Σ_{j≠i} exp(z_i·z_j/τ) - z_i·z_{partner[i]}/τ`.
    pub fn info_nce(&mut self, z: Var, partner: &[usize], temperature: f64) -> Result<Var> {
        let zv = self.value(z);
        let n = zv.rows();
        if partner.len() != n {
            return Err(Error::shape("info_nce", n, partner.len()));
        }
        if let Some((i, _)) = partner.iter().enumerate().find(|&(i, &j)| j >= n || j == i) {
            return Err(Error::shape("info_nce", "partner distinct from row and in range", i));
        }
        let inv_t = 1.0 / temperature;
        let mut g = zv.gemm(false, zv, true)?;
        let mut total = 0.0;
        for i in 0..n {
            let row = g.row_mut(i);
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v * inv_t)
                .fold(f64::NEG_INFINITY, f64::max);
            let positive = row[partner[i]] * inv_t;
            let mut denom = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if j == i { 0.0 } else { (*v * inv_t - max).exp() };
                denom += *v;
            }
            total += max + denom.ln() - positive;
            for v in row.iter_mut() {
                *v /= denom;
            }
            row[partner[i]] -= 1.0;
        }
        g.scale_assign(inv_t / n as f64);
        Ok(self.push(Matrix::scalar(total / n as f64), Op::InfoNce(z, g)))
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                "scalar output",
                format!("{:?}", out.shape()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.gemm(false, self.value(*b), true)?;
                    let gb = self.value(*a).gemm(true, &g, false)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.gemm(true, self.value(*a), false)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => {
                    accumulate(&mut grads, *a, g.zip_map(c, |x, y| x * y));
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    accumulate(&mut grads, *a, g.map(|x| x * f));
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, s| x * s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| x / v);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |x, e| x * e);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    let ga = if p == 0.0 {
                        Matrix::zeros(g.rows(), g.cols())
                    } else {
                        g.zip_map(self.value(*a), |x, v| x * p * v.powf(p - 1.0))
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = g.zip_map(self.value(*a), |x, v| {
                        if v >= lo && v <= hi {
                            x
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        let inv = 1.0 / norms[r];
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = (gv - yv * dot) * inv;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, Matrix::filled(av.rows(), av.cols(), g.item()));
                }
                Op::SumRows(a) => {
                    let av = self.value(*a);
                    let ga = Matrix::from_fn(av.rows(), av.cols(), |r, _| g.get(r, 0));
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ClassProduct(h, e) => {
                    let (hv, ev) = (self.value(*h), self.value(*e));
                    let classes = ev.rows();
                    let mut gh = Matrix::zeros(hv.rows(), hv.cols());
                    let mut ge = Matrix::zeros(ev.rows(), ev.cols());
                    for i in 0..hv.rows() {
                        for c in 0..classes {
                            let gr = g.row(i * classes + c);
                            for (k, gv) in gr.iter().enumerate() {
                                gh.row_mut(i)[k] += gv * ev.get(c, k);
                                ge.row_mut(c)[k] += gv * hv.get(i, k);
                            }
                        }
                    }
                    accumulate(&mut grads, *h, gh);
                    accumulate(&mut grads, *e, ge);
                }
                Op::InfoNce(z, m) => {
                    let zv = self.value(*z);
                    let mut gz = m.matmul(zv)?;
                    gz.add_assign(&m.gemm(true, zv, false)?);
                    gz.scale_assign(g.item());
                    accumulate(&mut grads, *z, gz);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
