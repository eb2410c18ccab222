//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of one forward evaluation. Calling
//! [`Tape::backward`] on a scalar node replays the tape in reverse and
//! returns the gradient of every node that depends on a differentiable leaf.
//! Parameters can be borrowed into the tape, so building a tape per loss
//! evaluation does not copy the model.
//!
//! All operations work on rank-2 tensors (a rank-1 tensor behaves as a single
//! row). One tape belongs to one thread.

use std::borrow::Cow;

use rand::Rng;

use super::tensor::{gemm_into, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    Gelu { x: Var, tanh: Vec<T> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Dropout { x: Var, mask: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Transpose(Var),
    RowNormalize { x: Var, norms: Vec<T> },
    Mse { pred: Var, target: Var },
    Mean(Var),
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf owning its value.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Differentiable leaf borrowing its value (parameters).
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = if ta { av.cols() } else { av.rows() };
        let n = if tb { bv.rows() } else { bv.cols() };
        let mut out = vec![T::zero(); m * n];
        gemm_into(av, ta, bv, tb, &mut out, false);
        let value = Tensor::matrix(m, n, out).expect("matmul shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(value), Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.len(), self.value(b).len(), "add: shape mismatch");
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(value), Op::Add(a, b), rg)
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut value = self.value(a).clone();
        let c = value.cols();
        let b = self.value(bias).data();
        assert_eq!(b.len(), c, "add_row: bias length");
        for row in value.data_mut().chunks_mut(c) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(Cow::Owned(value), Op::AddRow(a, bias), rg)
    }

    /// `x · wᵀ + b`, the usual linear layer with weight `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul_nt(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(Cow::Owned(value), Op::Scale(a, s), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "mul: shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("mul shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(value), Op::Mul(a, b), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        let av = self.value(a);
        let tanh: Vec<T> = av.data().iter().map(|&x| (c * (x + k * x * x * x)).tanh_fast()).collect();
        let data = av.data().iter().zip(&tanh).map(|(&x, &t)| half * x * (T::one() + t)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("gelu shape");
        let rg = self.rg(a);
        self.push(Cow::Owned(value), Op::Gelu { x: a, tanh }, rg)
    }

    /// Row-wise layer normalisation with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = T::lit(c as f64);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("ln shape");
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Cow::Owned(value),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = super::tensor::softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(Cow::Owned(value), Op::Softmax(a), rg)
    }

    /// Inverted dropout. Identity when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let av = self.value(a);
        let mask: Vec<T> = (0..av.len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("dropout shape");
        let rg = self.rg(a);
        self.push(Cow::Owned(value), Op::Dropout { x: a, mask }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        let rg = self.rg(a);
        self.push(Cow::Owned(value), Op::SliceCols { x: a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), r, "concat_cols: row mismatch");
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        let value = Tensor::matrix(r, total, data).expect("concat shape");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(value), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&refs).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Cow::Owned(value), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).gather_rows(idx);
        let rg = self.rg(a);
        self.push(
            Cow::Owned(value),
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(Cow::Owned(value), Op::Transpose(a), rg)
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut norms = Vec::with_capacity(av.rows());
        let mut data = Vec::with_capacity(av.len());
        for row in av.data().chunks(c) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            norms.push(n);
            if n > T::zero() {
                data.extend(row.iter().map(|&x| x / n));
            } else {
                data.extend(std::iter::repeat_n(T::zero(), c));
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data).expect("normalize shape");
        let rg = self.rg(a);
        self.push(Cow::Owned(value), Op::RowNormalize { x: a, norms }, rg)
    }

    /// Mean squared error between two equally sized nodes, as a `[1×1]` node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.len(), t.len(), "mse: shape mismatch");
        let n = T::lit(p.len() as f64);
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        let rg = self.rg(pred) || self.rg(target);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Mse { pred, target }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / T::lit(av.len() as f64);
        let rg = self.rg(a);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Mean(a), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<T> {
        Tensor::zeros(self.value(v).shape())
    }

    fn propagate(&self, node: &Node<'a, T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.rg(a) {
                    let mut da = vec![T::zero(); av.len()];
                    match (ta, tb) {
                        (false, false) => gemm_into(g, false, bv, true, &mut da, false),
                        (false, true) => gemm_into(g, false, bv, false, &mut da, false),
                        (true, false) => gemm_into(bv, false, g, true, &mut da, false),
                        (true, true) => gemm_into(bv, true, g, true, &mut da, false),
                    };
                    let da = Tensor::new(av.shape().to_vec(), da).expect("matmul grad");
                    self.accumulate(grads, a, da);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    match (ta, tb) {
                        (false, false) => gemm_into(av, true, g, false, &mut db, false),
                        (false, true) => gemm_into(g, true, av, false, &mut db, false),
                        (true, false) => gemm_into(av, false, g, false, &mut db, false),
                        (true, true) => gemm_into(g, true, av, true, &mut db, false),
                    };
                    let db = Tensor::new(bv.shape().to_vec(), db).expect("matmul grad");
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, reshape_like(g, self.value(a)));
                self.accumulate(grads, b, reshape_like(g, self.value(b)));
            }
            &Op::AddRow(a, bias) => {
                self.accumulate(grads, a, g.clone());
                if self.rg(bias) {
                    let c = g.cols();
                    let mut db = self.zeros_like(bias);
                    for row in g.data().chunks(c) {
                        for (x, &y) in db.data_mut().iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                    self.accumulate(grads, bias, db);
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|x| x * s)),
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.rg(a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), d).unwrap());
                }
                if self.rg(b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, b, Tensor::new(bv.shape().to_vec(), d).unwrap());
                }
            }
            Op::Gelu { x: a, tanh } => {
                let a = *a;
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let av = self.value(a);
                let d = av
                    .data()
                    .iter()
                    .zip(g.data())
                    .zip(tanh)
                    .map(|((&x, &gy), &t)| {
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        gy * (half * (T::one() + t) + half * x * dt)
                    })
                    .collect();
                self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let n = T::lit(c as f64);
                let gam = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for (r, (grow, hrow)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            mean_d += dh;
                            mean_dh += dh * hrow[j];
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            dx.push(rstd[r] * (dh - mean_d - hrow[j] * mean_dh));
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, dx).unwrap());
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = self.zeros_like(*gamma);
                    let mut db = self.zeros_like(*beta);
                    for (grow, hrow) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg.data_mut()[j] += grow[j] * hrow[j];
                            db.data_mut()[j] += grow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (yrow, grow) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: T = yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum();
                    d.extend(yrow.iter().zip(grow).map(|(&p, &q)| p * (q - dot)));
                }
                self.accumulate(grads, a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(&q, &m)| q * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            &Op::SliceCols { x, start } => {
                if self.rg(x) {
                    let mut dx = self.zeros_like(x);
                    let (cols, w) = (dx.cols(), g.cols());
                    for i in 0..g.rows() {
                        dx.data_mut()[i * cols + start..i * cols + start + w]
                            .copy_from_slice(g.row(i));
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.rg(p) {
                        let d = g.data()[off..off + n].to_vec();
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), d).unwrap());
                    }
                    off += n;
                    debug_assert_eq!(n % c.max(1), 0);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.rg(*x) {
                    let mut dx = self.zeros_like(*x);
                    for (k, &i) in idx.iter().enumerate() {
                        for (a, &b) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            &Op::Transpose(a) => {
                let t = g.transpose();
                self.accumulate(grads, a, reshape_like(&t, self.value(a)));
            }
            Op::RowNormalize { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for ((yrow, grow), &n) in y.data().chunks(c).zip(g.data().chunks(c)).zip(norms) {
                    if n > T::zero() {
                        let dot: T = yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum();
                        d.extend(yrow.iter().zip(grow).map(|(&p, &q)| (q - p * dot) / n));
                    } else {
                        d.extend(std::iter::repeat_n(T::zero(), c));
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            &Op::Mse { pred, target } => {
                let (p, t) = (self.value(pred), self.value(target));
                let scale = g.data()[0] * T::lit(2.0 / p.len() as f64);
                let d: Vec<T> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| (a - b) * scale)
                    .collect();
                if self.rg(target) {
                    let neg = d.iter().map(|&x| -x).collect();
                    self.accumulate(grads, target, Tensor::new(t.shape().to_vec(), neg).unwrap());
                }
                self.accumulate(grads, pred, Tensor::new(p.shape().to_vec(), d).unwrap());
            }
            &Op::Mean(a) => {
                let av = self.value(a);
                let v = g.data()[0] / T::lit(av.len() as f64);
                self.accumulate(grads, a, Tensor::full(av.shape(), v));
            }
        }
    }
}

fn reshape_like<T: Real>(g: &Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    if g.shape() == like.shape() {
        g.clone()
    } else {
        Tensor::new(like.shape().to_vec(), g.data().to_vec()).expect("reshape_like")
    }
}
