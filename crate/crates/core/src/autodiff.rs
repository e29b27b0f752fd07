//! Tape-based reverse-mode automatic differentiation over small dense vectors.
//!
//! A [`Graph`] records every operation of one forward pass. Values are plain
//! `Vec<f64>`; scalars are vectors of length one. Trainable tensors live in a
//! [`ParamStore`] and enter the tape either as a single row
//! ([`Graph::param_row`]) or as the weight of an affine map
//! ([`Graph::affine`]), so large embedding tables are never copied.
//!
//! [`Graph::backward`] walks the tape in reverse and accumulates parameter
//! gradients into a [`Gradients`] buffer that mirrors the store layout.

use crate::params::{ParamId, ParamStore};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Guard applied to vector norms inside [`Graph::cosine`].
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Detach,
    ParamRow { param: ParamId, row: usize },
    Affine { x: usize, w: ParamId, b: Option<ParamId> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MulScalar(usize, usize),
    Exp(usize),
    Ln(usize),
    Recip(usize),
    Logistic(usize),
    Tanh(usize),
    Softplus(usize),
    Sum(usize),
    Dot(usize, usize),
    Cosine(usize, usize),
    Concat(Vec<usize>),
    Index(usize, usize),
    Softmax(usize),
    LogSumExp(usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Per-parameter gradient buffers, laid out like the owning [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: store.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn fill_zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flat_map(|g| g.iter()).all(|v| v.is_finite())
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    /// Values substituted, in order, for detached nodes.
    frozen: Option<Vec<Vec<f64>>>,
    detached: Vec<Var>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unary(a: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.iter().map(|&x| f(x)).collect()
}

fn binary(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "elementwise op on mismatched lengths");
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            frozen: None,
            detached: Vec::new(),
        }
    }

    /// A graph whose `k`-th detached node takes `frozen[k]` instead of the
    /// value of its argument. Evaluating such graphs at perturbed parameters
    /// differentiates the same surrogate that `backward` does.
    pub fn with_frozen(params: &'p ParamStore, frozen: Vec<Vec<f64>>) -> Self {
        Graph {
            frozen: Some(frozen),
            ..Graph::new(params)
        }
    }

    /// Values of the detached nodes, in creation order.
    pub fn detached_values(&self) -> Vec<Vec<f64>> {
        self.detached.iter().map(|&v| self.value(v).to_vec()).collect()
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

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &[f64] {
        &self.nodes[i].value
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn constant(&mut self, x: f64) -> Var {
        self.input(vec![x])
    }

    /// Copies the value of `a` but blocks gradient flow into it.
    pub fn detach(&mut self, a: Var) -> Var {
        let k = self.detached.len();
        let value = match &self.frozen {
            Some(f) => {
                let v = f[k].clone();
                assert_eq!(v.len(), self.val(a.0).len(), "frozen value has the wrong width");
                v
            }
            None => self.val(a.0).to_vec(),
        };
        let v = self.push(value, Op::Detach);
        self.detached.push(v);
        v
    }

    pub fn param_row(&mut self, param: ParamId, row: usize) -> Var {
        let value = self.params.tensor(param).row(row).to_vec();
        self.push(value, Op::ParamRow { param, row })
    }

    /// Whole parameter viewed as a flat vector (used for 1-row tensors).
    pub fn param_vec(&mut self, param: ParamId) -> Var {
        debug_assert_eq!(self.params.tensor(param).rows, 1);
        self.param_row(param, 0)
    }

    /// Row-vector affine map `x W + b` with `W` of shape `len(x) × out`.
    pub fn affine(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let wt = self.params.tensor(w);
        let xv = self.val(x.0);
        assert_eq!(
            xv.len(),
            wt.rows,
            "affine input width {} does not match `{}` ({}x{})",
            xv.len(),
            wt.name,
            wt.rows,
            wt.cols
        );
        let mut out = match b {
            Some(b) => self.params.tensor(b).data.clone(),
            None => vec![0.0; wt.cols],
        };
        for (i, &xi) in xv.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &wij) in out.iter_mut().zip(wt.row(i)) {
                *o += xi * wij;
            }
        }
        self.push(out, Op::Affine { x: x.0, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary(self.val(a.0), self.val(b.0), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary(self.val(a.0), self.val(b.0), |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary(self.val(a.0), self.val(b.0), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = binary(self.val(a.0), self.val(b.0), |x, y| x / y);
        self.push(v, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = unary(self.val(a.0), |x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = unary(self.val(a.0), |x| x + c);
        self.push(v, Op::Shift(a.0))
    }

    /// Multiplies every element of `a` by the scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = unary(self.val(a.0), |x| x * sv);
        self.push(v, Op::MulScalar(a.0, s.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = unary(self.val(a.0), f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = unary(self.val(a.0), f64::ln);
        self.push(v, Op::Ln(a.0))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = unary(self.val(a.0), |x| 1.0 / x);
        self.push(v, Op::Recip(a.0))
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        let v = unary(self.val(a.0), logistic);
        self.push(v, Op::Logistic(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = unary(self.val(a.0), f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = unary(self.val(a.0), softplus);
        self.push(v, Op::Softplus(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.val(a.0).iter().sum();
        self.push(vec![v], Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.val(a.0).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a.0), self.val(b.0));
        assert_eq!(x.len(), y.len(), "dot on mismatched lengths");
        let v = x.iter().zip(y).map(|(p, q)| p * q).sum();
        self.push(vec![v], Op::Dot(a.0, b.0))
    }

    /// Cosine similarity; each norm is floored at [`NORM_GUARD`], so a zero
    /// vector has similarity 0 with everything.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a.0), self.val(b.0));
        assert_eq!(x.len(), y.len(), "cosine on mismatched lengths");
        let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let v = d / (norm(x).max(NORM_GUARD) * norm(y).max(NORM_GUARD));
        self.push(vec![v], Op::Cosine(a.0, b.0))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(self.val(p.0));
        }
        self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let v = self.val(a.0)[i];
        self.push(vec![v], Op::Index(a.0, i))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.val(a.0);
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let v = e.into_iter().map(|v| v / z).collect();
        self.push(v, Op::Softmax(a.0))
    }

    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let x = self.val(a.0);
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        self.push(vec![v], Op::LogSumExp(a.0))
    }

    /// Sum of several scalar (or equal-length) nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Reverse sweep from the scalar `root`, adding `seed * d root / d param`
    /// into `grads`.
    pub fn backward(&self, root: Var, seed: f64, grads: &mut Gradients) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![seed]);

        fn acc(adj: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
            adj[i].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match node.op {
                Op::Input | Op::Detach => {}
                Op::ParamRow { param, row } => {
                    let cols = self.params.tensor(param).cols;
                    let dst = &mut grads.grads[param.0][row * cols..(row + 1) * cols];
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::Affine { x, w, b } => {
                    let wt = self.params.tensor(w);
                    let xv = &self.nodes[x].value;
                    {
                        let gw = &mut grads.grads[w.0];
                        for (r, &xi) in xv.iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            let dst = &mut gw[r * wt.cols..(r + 1) * wt.cols];
                            for (d, gv) in dst.iter_mut().zip(&g) {
                                *d += xi * gv;
                            }
                        }
                    }
                    if let Some(b) = b {
                        for (d, gv) in grads.grads[b.0].iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    let dx = acc(&mut adj, x, xv.len());
                    for (r, d) in dx.iter_mut().enumerate() {
                        *d += wt.row(r).iter().zip(&g).map(|(w, gv)| w * gv).sum::<f64>();
                    }
                }
                Op::Add(a, b) => {
                    for (d, gv) in acc(&mut adj, a, g.len()).iter_mut().zip(&g) {
                        *d += gv;
                    }
                    for (d, gv) in acc(&mut adj, b, g.len()).iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::Sub(a, b) => {
                    for (d, gv) in acc(&mut adj, a, g.len()).iter_mut().zip(&g) {
                        *d += gv;
                    }
                    for (d, gv) in acc(&mut adj, b, g.len()).iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    let da: Vec<f64> = g.iter().zip(bv).map(|(gv, y)| gv * y).collect();
                    let db: Vec<f64> = g.iter().zip(av).map(|(gv, x)| gv * x).collect();
                    for (d, v) in acc(&mut adj, a, g.len()).iter_mut().zip(da) {
                        *d += v;
                    }
                    for (d, v) in acc(&mut adj, b, g.len()).iter_mut().zip(db) {
                        *d += v;
                    }
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b].value;
                    let da: Vec<f64> = g.iter().zip(bv).map(|(gv, y)| gv / y).collect();
                    let db: Vec<f64> = g.iter().zip(out).zip(bv).map(|((gv, o), y)| -gv * o / y).collect();
                    for (d, v) in acc(&mut adj, a, g.len()).iter_mut().zip(da) {
                        *d += v;
                    }
                    for (d, v) in acc(&mut adj, b, g.len()).iter_mut().zip(db) {
                        *d += v;
                    }
                }
                Op::Scale(a, c) => {
                    for (d, gv) in acc(&mut adj, a, g.len()).iter_mut().zip(&g) {
                        *d += gv * c;
                    }
                }
                Op::Shift(a) => {
                    for (d, gv) in acc(&mut adj, a, g.len()).iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::MulScalar(a, s) => {
                    let sv = self.nodes[s].value[0];
                    let av = &self.nodes[a].value;
                    let ds: f64 = g.iter().zip(av).map(|(gv, x)| gv * x).sum();
                    for (d, gv) in acc(&mut adj, a, g.len()).iter_mut().zip(&g) {
                        *d += gv * sv;
                    }
                    acc(&mut adj, s, 1)[0] += ds;
                }
                Op::Exp(a) => {
                    for ((d, gv), o) in acc(&mut adj, a, g.len()).iter_mut().zip(&g).zip(out) {
                        *d += gv * o;
                    }
                }
                Op::Ln(a) => {
                    let av = &self.nodes[a].value;
                    let da: Vec<f64> = g.iter().zip(av).map(|(gv, x)| gv / x).collect();
                    for (d, v) in acc(&mut adj, a, g.len()).iter_mut().zip(da) {
                        *d += v;
                    }
                }
                Op::Recip(a) => {
                    for ((d, gv), o) in acc(&mut adj, a, g.len()).iter_mut().zip(&g).zip(out) {
                        *d -= gv * o * o;
                    }
                }
                Op::Logistic(a) => {
                    for ((d, gv), o) in acc(&mut adj, a, g.len()).iter_mut().zip(&g).zip(out) {
                        *d += gv * o * (1.0 - o);
                    }
                }
                Op::Tanh(a) => {
                    for ((d, gv), o) in acc(&mut adj, a, g.len()).iter_mut().zip(&g).zip(out) {
                        *d += gv * (1.0 - o * o);
                    }
                }
                Op::Softplus(a) => {
                    let av = &self.nodes[a].value;
                    let da: Vec<f64> = g.iter().zip(av).map(|(gv, &x)| gv * logistic(x)).collect();
                    for (d, v) in acc(&mut adj, a, g.len()).iter_mut().zip(da) {
                        *d += v;
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a].value.len();
                    for d in acc(&mut adj, a, n).iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    let n = av.len();
                    let da: Vec<f64> = bv.iter().map(|y| g[0] * y).collect();
                    let db: Vec<f64> = av.iter().map(|x| g[0] * x).collect();
                    for (d, v) in acc(&mut adj, a, n).iter_mut().zip(da) {
                        *d += v;
                    }
                    for (d, v) in acc(&mut adj, b, n).iter_mut().zip(db) {
                        *d += v;
                    }
                }
                Op::Cosine(a, b) => {
                    let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                    let n = av.len();
                    let (na, nb) = (norm(av), norm(bv));
                    let (ga, gb) = (na.max(NORM_GUARD), nb.max(NORM_GUARD));
                    let c = out[0];
                    // d/da [a.b / (|a||b|)] = b/(|a||b|) - c a/|a|^2 while the
                    // norm is above the guard; below it the norm is a constant.
                    let fa = if na > NORM_GUARD { c / (na * na) } else { 0.0 };
                    let fb = if nb > NORM_GUARD { c / (nb * nb) } else { 0.0 };
                    let da: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| g[0] * (y / (ga * gb) - fa * x))
                        .collect();
                    let db: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| g[0] * (x / (ga * gb) - fb * y))
                        .collect();
                    for (d, v) in acc(&mut adj, a, n).iter_mut().zip(da) {
                        *d += v;
                    }
                    for (d, v) in acc(&mut adj, b, n).iter_mut().zip(db) {
                        *d += v;
                    }
                }
                Op::Concat(ref parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        for (d, gv) in acc(&mut adj, p, n).iter_mut().zip(&g[off..off + n]) {
                            *d += gv;
                        }
                        off += n;
                    }
                }
                Op::Index(a, k) => {
                    let n = self.nodes[a].value.len();
                    acc(&mut adj, a, n)[k] += g[0];
                }
                Op::Softmax(a) => {
                    let inner: f64 = g.iter().zip(out).map(|(gv, o)| gv * o).sum();
                    for ((d, gv), o) in acc(&mut adj, a, g.len()).iter_mut().zip(&g).zip(out) {
                        *d += o * (gv - inner);
                    }
                }
                Op::LogSumExp(a) => {
                    let av = &self.nodes[a].value;
                    let n = av.len();
                    let lse = out[0];
                    let da: Vec<f64> = av.iter().map(|x| g[0] * (x - lse).exp()).collect();
                    for (d, v) in acc(&mut adj, a, n).iter_mut().zip(da) {
                        *d += v;
                    }
                }
            }
        }
    }
}
