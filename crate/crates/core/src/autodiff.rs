//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a scalar output walks the records in reverse and
//! accumulates adjoints. Only nodes that depend on a parameter receive
//! gradients; constant subgraphs are skipped.
//!
//! Vectors are `n x 1` column matrices throughout.
//!
//! ```
//! use gridopf::autodiff::Tape;
//! use ndarray::array;
//!
//! let mut t = Tape::new();
//! let w = t.param(array![[2.0], [3.0]]);
//! let x = t.constant(array![[1.0, 4.0]]);
//! let y = t.matmul(x, w); // 1*2 + 4*3 = 14
//! let loss = t.square(y);
//! let grads = t.backward(loss);
//! assert_eq!(t.value(loss)[[0, 0]], 196.0);
//! assert_eq!(grads.get(w).unwrap(), &array![[28.0], [112.0]]);
//! ```

use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, Axis};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    Abs(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Concat(Vec<usize>),
    Slice {
        x: usize,
        start: usize,
    },
    Gather {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    ScatterAdd {
        x: usize,
        idx: Arc<Vec<usize>>,
    },
    Sum(usize),
    HingeNorm {
        p: usize,
        q: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, or `None` if the output
    /// does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros shaped like `shape` when the
    /// output does not depend on `v`.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant column vector.
    pub fn column(&mut self, values: &[f64]) -> Var {
        let a = Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape");
        self.constant(a)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Single entry of a `1 x 1` value.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// Add a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }

    /// `x W + b` with `W` of shape `k x m` and `b` of shape `1 x m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// `a * k + c` elementwise for scalars `k` and `c`.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * k + c);
        self.push(v, Op::Affine(a.0, k), &[a.0])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sin);
        self.push(v, Op::Sin(a.0), &[a.0])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::cos);
        self.push(v, Op::Cos(a.0), &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a.0), &[a.0])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a.0), &[a.0])
    }

    /// Per-row layer normalization with `1 x m` scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / d;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|c| c * c).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Horizontal concatenation.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat rows must agree");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(v, Op::Concat(ids.clone()), &ids)
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(v, Op::Slice { x: x.0, start }, &[x.0])
    }

    /// Row `r` of the output is row `idx[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &Arc<Vec<usize>>) -> Var {
        let v = self.value(x).select(Axis(0), idx);
        self.push(
            v,
            Op::Gather {
                x: x.0,
                idx: Arc::clone(idx),
            },
            &[x.0],
        )
    }

    /// Output has `n` rows; row `idx[r]` accumulates row `r` of `x`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &Arc<Vec<usize>>, n: usize) -> Var {
        let xv = self.value(x);
        let mut v = Array2::zeros((n, xv.ncols()));
        for (r, &target) in idx.iter().enumerate() {
            let mut row = v.row_mut(target);
            row += &xv.row(r);
        }
        self.push(
            v,
            Op::ScatterAdd {
                x: x.0,
                idx: Arc::clone(idx),
            },
            &[x.0],
        )
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a.0), &[a.0])
    }

    /// Mean of all entries as a `1 x 1` value.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `max(0, sqrt(p^2 + q^2) - limit)` elementwise, with a zero gradient
    /// wherever the hinge is inactive.
    pub fn hinge_norm(&mut self, p: Var, q: Var, limit: &Array2<f64>) -> Var {
        let pv = self.value(p);
        let qv = self.value(q);
        let mut v = Array2::zeros(pv.dim());
        ndarray::Zip::from(&mut v)
            .and(pv)
            .and(qv)
            .and(limit)
            .for_each(|o, &a, &b, &l| *o = (a.hypot(b) - l).max(0.0));
        self.push(v, Op::HingeNorm { p: p.0, q: q.0 }, &[p.0, q.0])
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Array2::ones((1, 1)));
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let needs = |i: usize| self.nodes[i].needs_grad;
            let val = |i: usize| &self.nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads[*a], g.dot(&val(*b).t()));
                    }
                    if needs(*b) {
                        accumulate(&mut grads[*b], val(*a).t().dot(&g));
                    }
                }
                Op::AddRow(a, r) => {
                    if needs(*r) {
                        accumulate(&mut grads[*r], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if needs(*a) {
                        accumulate(&mut grads[*a], g);
                    }
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads[*b], g.clone());
                    }
                    if needs(*a) {
                        accumulate(&mut grads[*a], g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads[*b], -&g);
                    }
                    if needs(*a) {
                        accumulate(&mut grads[*a], g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads[*a], &g * val(*b));
                    }
                    if needs(*b) {
                        accumulate(&mut grads[*b], &g * val(*a));
                    }
                }
                Op::Affine(a, k) => accumulate(&mut grads[*a], g * *k),
                Op::Relu(a) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(val(*a))
                        .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                    accumulate(&mut grads[*a], d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads[*a], d);
                }
                Op::Sin(a) => accumulate(&mut grads[*a], g * &val(*a).mapv(f64::cos)),
                Op::Cos(a) => accumulate(&mut grads[*a], g * &val(*a).mapv(|x| -x.sin())),
                Op::Square(a) => accumulate(&mut grads[*a], g * &val(*a).mapv(|x| 2.0 * x)),
                Op::Abs(a) => accumulate(&mut grads[*a], g * &val(*a).mapv(sign)),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if needs(*beta) {
                        accumulate(&mut grads[*beta], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if needs(*gamma) {
                        accumulate(
                            &mut grads[*gamma],
                            (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if needs(*x) {
                        let dxhat = &g * val(*gamma);
                        let d = xhat.ncols() as f64;
                        let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                        let sum_dx = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let dx = (dxhat * d - &sum_d - xhat * &sum_dx)
                            * &inv_std.view().insert_axis(Axis(1))
                            / d;
                        accumulate(&mut grads[*x], dx);
                    }
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        if needs(p) {
                            accumulate(&mut grads[p], g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::Slice { x, start } => {
                    let mut d = Array2::zeros(val(*x).dim());
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads[*x], d);
                }
                Op::Gather { x, idx } => {
                    let mut d = Array2::zeros(val(*x).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads[*x], d);
                }
                Op::ScatterAdd { x, idx } => {
                    accumulate(&mut grads[*x], g.select(Axis(0), idx));
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    accumulate(&mut grads[*a], Array2::from_elem(val(*a).dim(), s));
                }
                Op::HingeNorm { p, q } => {
                    let (pv, qv) = (val(*p), val(*q));
                    let mut dp = Array2::zeros(pv.dim());
                    let mut dq = Array2::zeros(pv.dim());
                    for ((r, c), &o) in node.value.indexed_iter() {
                        if o > 0.0 {
                            let n = pv[[r, c]].hypot(qv[[r, c]]);
                            dp[[r, c]] = g[[r, c]] * pv[[r, c]] / n;
                            dq[[r, c]] = g[[r, c]] * qv[[r, c]] / n;
                        }
                    }
                    if needs(*p) {
                        accumulate(&mut grads[*p], dp);
                    }
                    if needs(*q) {
                        accumulate(&mut grads[*q], dq);
                    }
                }
            }
        }
        Gradients { grads }
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

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x`, compared against the tape.
    fn check(x0: Array2<f64>, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let y = f(&mut t, x);
        let grads = t.backward(y);
        let g = grads.get_or_zeros(x, x0.dim());
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let mut t = Tape::new();
                let x = t.constant(xp);
                let y = f(&mut t, x);
                t.scalar(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "coordinate {idx}: analytic {an}, numeric {fd}"
            );
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 2);
        check(x.clone(), |t, x| {
            let a = t.sin(x);
            let b = t.cos(x);
            let c = t.mul(a, b);
            let d = t.sigmoid(c);
            let e = t.square(d);
            let f = t.affine(e, 3.0, 1.0);
            t.sum(f)
        });
        check(x.clone(), |t, x| {
            let a = t.affine(x, 1.0, 0.3);
            let r = t.relu(a);
            let b = t.abs(x);
            let c = t.sub(r, b);
            let d = t.add(c, x);
            t.mean(d)
        });
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, 4, 3);
        let b = random(&mut rng, 1, 3);
        let gamma = random(&mut rng, 1, 3);
        let x = random(&mut rng, 5, 4);
        let idx = Arc::new(vec![0, 2, 2, 4, 1, 3]);
        check(x.clone(), |t, x| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            let g = t.constant(gamma.clone());
            let h = t.linear(x, w, b);
            let n = t.layer_norm(h, g, b);
            let c = t.concat_cols(&[n, x]);
            let s = t.slice_cols(c, 1, 5);
            let gathered = t.gather_rows(s, &idx);
            let scattered = t.scatter_add_rows(gathered, &idx, 5);
            let sq = t.square(scattered);
            t.sum(sq)
        });
        check(w.clone(), |t, w| {
            let xv = t.constant(x.clone());
            let b = t.constant(b.clone());
            let g = t.constant(gamma.clone());
            let h = t.linear(xv, w, b);
            let n = t.layer_norm(h, g, b);
            let s = t.sin(n);
            t.sum(s)
        });
        check(gamma.clone(), |t, g| {
            let xv = t.constant(x.slice(s![.., 0..3]).to_owned());
            let b = t.constant(b.clone());
            let n = t.layer_norm(xv, g, b);
            let s = t.square(n);
            let s = t.sin(s);
            t.sum(s)
        });
    }

    #[test]
    fn hinge_norm_gradient() {
        let p = array![[0.3], [1.0], [2.0]];
        let limit = array![[1.0], [0.5], [1.0]];
        check(p, |t, p| {
            let q = t.affine(p, 0.5, 0.2);
            let h = t.hinge_norm(p, q, &limit);
            let s = t.square(h);
            t.sum(s)
        });
    }

    #[test]
    fn inactive_hinge_has_zero_gradient_at_origin() {
        let mut t = Tape::new();
        let p = t.param(array![[0.0]]);
        let q = t.param(array![[0.0]]);
        let h = t.hinge_norm(p, q, &array![[0.0]]);
        let s = t.sum(h);
        let g = t.backward(s);
        assert_eq!(g.get(p).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0]]);
        let p = t.param(array![[2.0]]);
        let y = t.mul(c, p);
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap()[[0, 0]], 1.0);
    }
}
