use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use smallvec::SmallVec;

use super::Real;

const CONST: u32 = u32::MAX;

/// Reverse pass of a fused multi-output node.
///
/// `out_adj` holds the adjoints of the node's outputs; the implementation
/// adds the resulting input adjoints into `adj`, indexed by tape position.
pub trait CustomBackward {
    fn backward(&self, out_adj: &[f64], adj: &mut [f64]);
}

struct Custom {
    first: u32,
    count: u32,
    op: Box<dyn CustomBackward>,
}

#[derive(Default)]
struct Inner {
    vals: Vec<f64>,
    start: Vec<u32>,
    edges: Vec<(u32, f64)>,
    customs: Vec<Custom>,
}

impl Inner {
    #[inline]
    fn push(&mut self, val: f64, edges: &[(u32, f64)]) -> u32 {
        let idx = self.vals.len() as u32;
        self.vals.push(val);
        self.edges.extend_from_slice(edges);
        self.start.push(self.edges.len() as u32);
        idx
    }
}

/// Append-only record of scalar operations.
///
/// Nodes are stored in creation order, which is a topological order, so
/// the adjoint sweep is a single reverse pass. Constants never touch the
/// tape.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        let inner = Inner { start: vec![0], ..Default::default() };
        Self { inner: RefCell::new(inner) }
    }

    pub fn with_capacity(nodes: usize) -> Self {
        let t = Self::new();
        {
            let mut i = t.inner.borrow_mut();
            i.vals.reserve(nodes);
            i.start.reserve(nodes);
            i.edges.reserve(2 * nodes);
        }
        t
    }

    /// Drop all nodes, keeping allocations.
    pub fn clear(&mut self) {
        let i = self.inner.get_mut();
        i.vals.clear();
        i.edges.clear();
        i.start.clear();
        i.start.push(0);
        i.customs.clear();
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a leaf.
    pub fn var(&self, x: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(x, &[]);
        Var { tape: Some(self), idx, val: x }
    }

    /// Record a fused node with `values.len()` outputs whose reverse pass is
    /// supplied by `op`. Inputs of `op` must already be on the tape.
    pub fn custom(&self, values: &[f64], op: Box<dyn CustomBackward>) -> Vec<Var<'_>> {
        let mut inner = self.inner.borrow_mut();
        let first = inner.vals.len() as u32;
        let out: Vec<Var<'_>> = values
            .iter()
            .map(|&v| Var { tape: Some(self), idx: inner.push(v, &[]), val: v })
            .collect();
        inner.customs.push(Custom { first, count: values.len() as u32, op });
        out
    }

    /// One reverse sweep from `output`. Constants yield an all-zero result.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let inner = self.inner.borrow();
        let n = inner.vals.len();
        let mut adj = vec![0.0; n];
        if output.idx == CONST {
            return Gradients { adj };
        }
        debug_assert!(output.tape.is_some_and(|t| std::ptr::eq(t, self)));
        let out = output.idx as usize;
        adj[out] = 1.0;
        let mut pending = inner.customs.len();
        while pending > 0 && inner.customs[pending - 1].first as usize > out {
            pending -= 1;
        }
        let mut scratch = Vec::new();
        for i in (0..=out).rev() {
            if pending > 0 && inner.customs[pending - 1].first as usize == i {
                let c = &inner.customs[pending - 1];
                let (f, k) = (c.first as usize, c.count as usize);
                scratch.clear();
                scratch.extend_from_slice(&adj[f..f + k]);
                if scratch.iter().any(|&a| a != 0.0) {
                    c.op.backward(&scratch, &mut adj);
                }
                pending -= 1;
            }
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = (inner.start[i] as usize, inner.start[i + 1] as usize);
            for &(p, w) in &inner.edges[s..e] {
                adj[p as usize] += a * w;
            }
        }
        Gradients { adj }
    }
}

/// Adjoints of every tape node after a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: &Var<'_>) -> f64 {
        if v.idx == CONST {
            0.0
        } else {
            self.adj[v.idx as usize]
        }
    }

    /// Adjoints of the contiguous node range `start..start + len`.
    pub fn range(&self, start: usize, len: usize) -> &[f64] {
        &self.adj[start..start + len]
    }
}

/// Scalar recorded on a [`Tape`], or a free constant.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.idx == CONST {
            write!(f, "Var(const {})", self.val)
        } else {
            write!(f, "Var(#{} = {})", self.idx, self.val)
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(x: f64) -> Self {
        Var { tape: None, idx: CONST, val: x }
    }

    pub fn index(&self) -> Option<usize> {
        (self.idx != CONST).then_some(self.idx as usize)
    }

    pub fn tape(&self) -> Option<&'t Tape> {
        self.tape
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => {
                let idx = t.inner.borrow_mut().push(val, &[(self.idx, d)]);
                Var { tape: Some(t), idx, val }
            }
        }
    }

    #[inline]
    fn binary(self, b: Self, val: f64, da: f64, db: f64) -> Self {
        match (self.tape, b.tape) {
            (None, None) => Var::constant(val),
            (Some(t), None) => {
                let idx = t.inner.borrow_mut().push(val, &[(self.idx, da)]);
                Var { tape: Some(t), idx, val }
            }
            (None, Some(t)) => {
                let idx = t.inner.borrow_mut().push(val, &[(b.idx, db)]);
                Var { tape: Some(t), idx, val }
            }
            (Some(t), Some(_)) => {
                let idx = t.inner.borrow_mut().push(val, &[(self.idx, da), (b.idx, db)]);
                Var { tape: Some(t), idx, val }
            }
        }
    }

    fn nary(tape: Option<&'t Tape>, val: f64, edges: &[(u32, f64)]) -> Self {
        match tape {
            Some(t) if !edges.is_empty() => {
                let idx = t.inner.borrow_mut().push(val, edges);
                Var { tape: Some(t), idx, val }
            }
            _ => Var::constant(val),
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    #[inline]
    fn add(self, b: Self) -> Self {
        self.binary(b, self.val + b.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    #[inline]
    fn sub(self, b: Self) -> Self {
        self.binary(b, self.val - b.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    #[inline]
    fn mul(self, b: Self) -> Self {
        self.binary(b, self.val * b.val, b.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    #[inline]
    fn div(self, b: Self) -> Self {
        let q = self.val / b.val;
        self.binary(b, q, 1.0 / b.val, -q / b.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn add(self, b: f64) -> Self {
        if b == 0.0 {
            return self;
        }
        self.unary(self.val + b, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn sub(self, b: f64) -> Self {
        if b == 0.0 {
            return self;
        }
        self.unary(self.val - b, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn mul(self, b: f64) -> Self {
        if b == 1.0 {
            return self;
        }
        self.unary(self.val * b, b)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn div(self, b: f64) -> Self {
        self.unary(self.val / b, 1.0 / b)
    }
}

impl<'t> Real for Var<'t> {
    fn cst(x: f64) -> Self {
        Var::constant(x)
    }

    fn value(&self) -> f64 {
        self.val
    }

    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }

    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }

    fn tanh(self) -> Self {
        let y = self.val.tanh();
        self.unary(y, 1.0 - y * y)
    }

    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        self.unary(r, 0.5 / r)
    }

    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }

    fn atan2(self, x: Self) -> Self {
        let r2 = self.val * self.val + x.val * x.val;
        self.binary(x, self.val.atan2(x.val), x.val / r2, -self.val / r2)
    }

    fn lin_comb(terms: &[(f64, Self)]) -> Self {
        let mut tape = None;
        let mut val = 0.0;
        let mut edges: SmallVec<[(u32, f64); 32]> = SmallVec::new();
        for &(c, x) in terms {
            val += c * x.val;
            if x.idx != CONST && c != 0.0 {
                tape = x.tape;
                edges.push((x.idx, c));
            }
        }
        Var::nary(tape, val, &edges)
    }

    fn sum_prod(terms: &[(f64, Self, Self)]) -> Self {
        let mut tape = None;
        let mut val = 0.0;
        let mut edges: SmallVec<[(u32, f64); 32]> = SmallVec::new();
        for &(c, x, y) in terms {
            val += x.val * y.val * c;
            if c == 0.0 {
                continue;
            }
            if x.idx != CONST {
                tape = x.tape;
                edges.push((x.idx, c * y.val));
            }
            if y.idx != CONST {
                tape = y.tape;
                edges.push((y.idx, c * x.val));
            }
        }
        Var::nary(tape, val, &edges)
    }

    fn is_finite(&self) -> bool {
        self.val.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Jet2;

    #[test]
    fn identity_gradient() {
        let t = Tape::new();
        let x = t.var(1.7);
        let g = t.backward(x);
        assert_eq!(g.wrt(&x), 1.0);
    }

    #[test]
    fn product_gradient() {
        let t = Tape::new();
        let x = t.var(2.0);
        let y = t.var(3.0);
        let g = t.backward(x * y);
        assert_eq!((g.wrt(&x), g.wrt(&y)), (3.0, 2.0));
    }

    fn f<S: Real>(x: S, y: S) -> S {
        (x * y).sin() + (x / (y + 2.0)).tanh() * (y * 0.3).exp() + (x * x + 1.0).ln().sqrt() + y.atan2(x)
            + S::sum_prod(&[(0.5, x, y), (-1.5, y, y)])
            + S::lin_comb(&[(2.0, x), (-0.25, y)])
    }

    #[test]
    fn matches_central_differences() {
        let t = Tape::new();
        let (x0, y0) = (0.7, -0.4);
        let x = t.var(x0);
        let y = t.var(y0);
        let out = f(x, y);
        assert_eq!(out.value(), f(x0, y0));
        let g = t.backward(out);
        let h = 1e-6;
        let gx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let gy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert!((g.wrt(&x) - gx).abs() < 1e-8);
        assert!((g.wrt(&y) - gy).abs() < 1e-8);
    }

    #[test]
    fn backward_is_linear() {
        let t = Tape::new();
        let x = t.var(0.3);
        let y = t.var(1.1);
        let a = f(x, y);
        let b = (x * y * y).cos();
        let ga = t.backward(a);
        let gb = t.backward(b);
        let gs = t.backward(a + b);
        for v in [x, y] {
            assert!((gs.wrt(&v) - ga.wrt(&v) - gb.wrt(&v)).abs() < 1e-14);
        }
    }

    #[test]
    fn repeated_taping_is_bit_identical() {
        let run = || {
            let t = Tape::new();
            let x = t.var(0.9);
            let y = t.var(-0.2);
            let g = t.backward(f(x, y));
            (g.wrt(&x).to_bits(), g.wrt(&y).to_bits())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constants_stay_off_tape() {
        let t = Tape::new();
        let x = t.var(1.0);
        let c = Var::constant(2.0) * Var::constant(3.0) + 1.0;
        assert_eq!(t.len(), 1);
        let y = x * c;
        assert_eq!(t.len(), 2);
        assert_eq!(t.backward(y).wrt(&x), 7.0);
    }

    #[test]
    fn second_order_through_jets_on_tape() {
        // d/dx of the second derivative of sin(x·s) in s at s = 0: −x²·sin(0) … use
        // g(x) = d²/ds² exp(x·s)|₀ = x², so dg/dx = 2x.
        let t = Tape::new();
        let x = t.var(1.5);
        let s = Jet2::new(Var::constant(0.0), Var::constant(1.0), Var::constant(0.0));
        let j = (s * Jet2::constant(x)).exp();
        let g = t.backward(j.d2);
        assert!((g.wrt(&x) - 3.0).abs() < 1e-14);
    }

    struct Doubler {
        input: usize,
    }

    impl CustomBackward for Doubler {
        fn backward(&self, out_adj: &[f64], adj: &mut [f64]) {
            adj[self.input] += 2.0 * out_adj[0] + 3.0 * out_adj[1];
        }
    }

    #[test]
    fn custom_nodes_participate_in_backward() {
        let t = Tape::new();
        let x = t.var(0.5);
        let outs = t.custom(&[1.0, 1.5], Box::new(Doubler { input: x.index().unwrap() }));
        let y = outs[0] * outs[1] + x;
        let g = t.backward(y);
        // ∂y/∂x = 1 + 2·out1 + 3·out0 = 1 + 3 + 3
        assert!((g.wrt(&x) - 7.0).abs() < 1e-15);
    }
}
