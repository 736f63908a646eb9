use std::collections::HashMap;

use super::params::{Gradients, ParamKey, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamKey),
    /// `w` is row-major `[out, in]`.
    Linear { w: Var, b: Var, x: Var },
    Tanh(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Square(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    LogSoftmax(Var),
    Softmax(Var),
    Max(Var),
    Clamp(Var, f64, f64),
    StopGrad,
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Values are 64-bit. Parameters enter through [`Tape::param`] (trainable)
/// or [`Tape::frozen`] (a constant copy that never receives gradient).
/// [`Tape::stop_grad`] is the identity on values and blocks every gradient
/// flowing back through it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
    frozen: HashMap<ParamKey, Var>,
    consumed: bool,
}

pub(crate) fn affine<W: Copy + Into<f64>, B: Copy + Into<f64>>(
    w: &[W],
    b: &[B],
    x: &[f64],
) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(i, bi)| {
            let row = &w[i * cols..(i + 1) * cols];
            let mut acc = 0.0f64;
            for (wij, xj) in row.iter().zip(x) {
                acc += (*wij).into() * xj;
            }
            acc + (*bi).into()
        })
        .collect()
}

pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    log_softmax(x).into_iter().map(f64::exp).collect()
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

    fn push(&mut self, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.input(vec![value])
    }

    /// Trainable leaf for tensor `index` of `store`. Repeated calls reuse the
    /// same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let key = store.key(index);
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let value = store.tensor(index).data.iter().map(|v| *v as f64).collect();
        let v = self.push(value, Op::Param(key.clone()), true);
        self.params.insert(key, v);
        v
    }

    /// Constant copy of tensor `index` of `store`.
    pub fn frozen(&mut self, store: &ParamStore, index: usize) -> Var {
        let key = store.key(index);
        if let Some(v) = self.frozen.get(&key) {
            return *v;
        }
        let value = store.tensor(index).data.iter().map(|v| *v as f64).collect();
        let v = self.push(value, Op::Input, false);
        self.frozen.insert(key, v);
        v
    }

    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Var {
        let (wv, bv, xv) = (self.value(w), self.value(b), self.value(x));
        assert_eq!(wv.len(), bv.len() * xv.len(), "linear: weight shape");
        let out = affine(wv, bv, xv);
        let rg = self.rg(w) || self.rg(b) || self.rg(x);
        self.push(out, Op::Linear { w, b, x }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| v.exp()).collect();
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise op: length mismatch");
        let out = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * k).collect();
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).iter().map(|v| v + k).collect();
        let rg = self.rg(a);
        self.push(out, Op::Shift(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| v * v).collect();
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = vec![self.value(a).iter().sum()];
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Squared L2 norm of `a - b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.sum(s)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a)[start..start + len].to_vec();
        let rg = self.rg(a);
        self.push(out, Op::Slice(a, start), rg)
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        self.slice(a, i, 1)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Scalar maximum; the gradient goes to the first maximizing entry.
    pub fn max(&mut self, a: Var) -> Var {
        let m = self.value(a).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let rg = self.rg(a);
        self.push(vec![m], Op::Max(a), rg)
    }

    /// Elementwise clamp; entries outside `[lo, hi]` get zero gradient.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).iter().map(|v| v.clamp(lo, hi)).collect();
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    pub fn stop_grad(&mut self, a: Var) -> Var {
        let out = self.value(a).to_vec();
        self.push(out, Op::StopGrad, false)
    }

    /// Sum of scalar nodes weighted by constants.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for (w, v) in terms {
            let scaled = self.scale(*v, *w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.unwrap_or_else(|| self.constant(0.0))
    }

    /// Reverse pass from scalar `root` with seed 1.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, has {} entries",
                self.nodes[root.0].value.len()
            )));
        }
        self.backward_with(root, &[1.0])
    }

    /// Reverse pass from `root` seeded with `seed` (the loss gradient with
    /// respect to `root`). A tape can be consumed only once.
    pub fn backward_with(&mut self, root: Var, seed: &[f64]) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by a backward pass".into()));
        }
        if seed.len() != self.nodes[root.0].value.len() {
            return Err(Error::Usage("backward seed length mismatch".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.to_vec());
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: impl IntoIterator<Item = f64>) {
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.into_iter().collect()),
            }
        }

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let rg = |v: &Var| self.nodes[v.0].requires_grad;
            let val = |v: &Var| self.nodes[v.0].value.as_slice();
            match &node.op {
                Op::Input | Op::StopGrad => {}
                Op::Param(key) => out.insert(key.clone(), g),
                Op::Linear { w, b, x } => {
                    let xv = val(x);
                    let cols = xv.len();
                    if rg(x) {
                        let wv = val(w);
                        let mut gx = vec![0.0; cols];
                        for (i, gi) in g.iter().enumerate() {
                            let row = &wv[i * cols..(i + 1) * cols];
                            for (gxj, wij) in gx.iter_mut().zip(row) {
                                *gxj += wij * gi;
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                    if rg(w) {
                        let gw = g.iter().flat_map(|gi| xv.iter().map(move |xj| gi * xj));
                        acc(&mut grads, *w, gw.collect::<Vec<_>>());
                    }
                    if rg(b) {
                        acc(&mut grads, *b, g.iter().copied());
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect::<Vec<_>>());
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, g.iter().zip(y).map(|(g, y)| g * y).collect::<Vec<_>>());
                }
                Op::Add(a, b) => {
                    if rg(a) {
                        acc(&mut grads, *a, g.iter().copied());
                    }
                    if rg(b) {
                        acc(&mut grads, *b, g.iter().copied());
                    }
                }
                Op::Sub(a, b) => {
                    if rg(a) {
                        acc(&mut grads, *a, g.iter().copied());
                    }
                    if rg(b) {
                        acc(&mut grads, *b, g.iter().map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if rg(a) {
                        let bv = val(b);
                        acc(&mut grads, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect::<Vec<_>>());
                    }
                    if rg(b) {
                        let av = val(a);
                        acc(&mut grads, *b, g.iter().zip(av).map(|(g, x)| g * x).collect::<Vec<_>>());
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g.iter().map(|v| v * k)),
                Op::Shift(a) => acc(&mut grads, *a, g.iter().copied()),
                Op::Square(a) => {
                    let av = val(a);
                    acc(&mut grads, *a, g.iter().zip(av).map(|(g, x)| 2.0 * g * x).collect::<Vec<_>>());
                }
                Op::Sum(a) => {
                    let n = val(a).len();
                    acc(&mut grads, *a, std::iter::repeat_n(g[0], n));
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = val(p).len();
                        if rg(p) {
                            acc(&mut grads, *p, g[off..off + n].iter().copied());
                        }
                        off += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = val(a).len();
                    let mut ga = vec![0.0; n];
                    ga[*start..*start + g.len()].copy_from_slice(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    let y = &node.value;
                    acc(&mut grads, *a, g.iter().zip(y).map(|(g, y)| g - y.exp() * total).collect::<Vec<_>>());
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    acc(&mut grads, *a, g.iter().zip(y).map(|(g, y)| y * (g - dot)).collect::<Vec<_>>());
                }
                Op::Max(a) => {
                    let av = val(a);
                    let m = node.value[0];
                    let arg = av.iter().position(|v| *v == m).unwrap_or(0);
                    let mut ga = vec![0.0; av.len()];
                    ga[arg] = g[0];
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let av = val(a);
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(av)
                        .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new("lin");
        s.add("w", &[2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
        s.add("b", &[2], vec![0.01, -0.02]).unwrap();
        s
    }

    #[test]
    fn sum_of_linear_gives_outer_product_grad() {
        let s = store();
        let mut t = Tape::new();
        let (w, b) = (t.param(&s, 0), t.param(&s, 1));
        let x = t.input(vec![1.0, 2.0, 3.0]);
        let y = t.linear(w, b, x);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.of(&s, 0).unwrap(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.of(&s, 1).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn stop_grad_blocks_exactly() {
        let s = store();
        let mut t = Tape::new();
        let (w, b) = (t.param(&s, 0), t.param(&s, 1));
        let x = t.input(vec![1.0, 2.0, 3.0]);
        let y = t.linear(w, b, x);
        let y = t.stop_grad(y);
        let y = t.square(y);
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert!(g.of(&s, 0).is_none());
        assert_eq!(g.max_abs_in_group("lin"), 0.0);
    }

    #[test]
    fn second_backward_is_usage_error() {
        let mut t = Tape::new();
        let x = t.input(vec![1.0]);
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::Usage(_))));
    }

    #[test]
    fn softmax_grad_matches_finite_difference() {
        let base = vec![0.3, -1.2, 0.7];
        let weights = [0.5, -2.0, 1.5];
        let f = |x: &[f64]| -> f64 { softmax(x).iter().zip(weights).map(|(p, w)| p * w).sum() };
        let mut s = ParamStore::new("p");
        s.add("x", &[3], base.iter().map(|v| *v as f32).collect()).unwrap();
        let mut t = Tape::new();
        let x = t.param(&s, 0);
        let p = t.softmax(x);
        let wv = t.input(weights.to_vec());
        let m = t.mul(p, wv);
        let l = t.sum(m);
        let g = t.backward(l).unwrap();
        let xs: Vec<f64> = s.tensor(0).data.iter().map(|v| *v as f64).collect();
        for i in 0..3 {
            let (mut a, mut b) = (xs.clone(), xs.clone());
            a[i] += 1e-5;
            b[i] -= 1e-5;
            let fd = (f(&a) - f(&b)) / 2e-5;
            assert!((fd - g.of(&s, 0).unwrap()[i]).abs() < 1e-8);
        }
    }
}
