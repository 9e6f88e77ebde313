//! Scalar computation tape.
//!
//! Every operation appends a node holding its primal value, its parents and the
//! local partial derivatives w.r.t. those parents. A reverse sweep from any node
//! yields adjoints for everything recorded before it.
//!
//! Forward tangents (derivatives w.r.t. a single seeded direction, here the time
//! input of the network) are not stored as plain numbers: each tangent is itself
//! a node built from ordinary operations. A reverse sweep through a tangent node
//! therefore differentiates the tangent w.r.t. the leaves, which is exactly what
//! a loss containing `d(net)/dt` needs when it is differentiated w.r.t. weights.
//!
//! Nodes created while building tangents carry no tangent of their own
//! ([`Var::tangent`] returns `None` for them); anything computed from such a node
//! inherits that.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

const NO_PARENT: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite leaf: {0}")]
    NonFiniteLeaf(f64),
    #[error("singular division: denominator primal is zero")]
    SingularDivision,
    #[error("non-finite value at node {node} during reverse sweep")]
    NonFinite { node: usize },
    #[error("variables belong to different tapes")]
    TapeMismatch,
    #[error("operation {kind:?} expects {expected} argument(s), got {got}")]
    Arity {
        kind: OpKind,
        expected: usize,
        got: usize,
    },
}

/// Operation kinds that can appear on a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Tanh,
    Exp,
    Square,
    Scale(f64),
}

impl OpKind {
    fn arity(self) -> usize {
        match self {
            OpKind::Leaf | OpKind::Const => 0,
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => 2,
            OpKind::Tanh | OpKind::Exp | OpKind::Square | OpKind::Scale(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tangent {
    /// Structurally zero, no node needed.
    Zero,
    Node(u32),
    /// Not tracked (the node is part of a tangent computation).
    Absent,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    kind: OpKind,
    parents: [u32; 2],
    partials: [f64; 2],
    value: f64,
    tangent: Tangent,
}

#[derive(Default)]
struct Nodes {
    nodes: Vec<Node>,
    one: Option<u32>,
}

impl Nodes {
    fn push(&mut self, kind: OpKind, parents: [u32; 2], partials: [f64; 2], value: f64, tangent: Tangent) -> u32 {
        let idx = self.nodes.len();
        assert!(idx < NO_PARENT as usize, "tape exceeds u32 node capacity");
        self.nodes.push(Node {
            kind,
            parents,
            partials,
            value,
            tangent,
        });
        idx as u32
    }

    fn value(&self, i: u32) -> f64 {
        self.nodes[i as usize].value
    }

    fn tangent(&self, i: u32) -> Tangent {
        self.nodes[i as usize].tangent
    }

    fn one(&mut self) -> u32 {
        match self.one {
            Some(i) => i,
            None => {
                let i = self.push(OpKind::Const, [NO_PARENT; 2], [0.0; 2], 1.0, Tangent::Zero);
                self.one = Some(i);
                i
            }
        }
    }

    // Tangent-free primitives used to build tangent expressions.

    fn raw_add(&mut self, a: u32, b: u32) -> u32 {
        let v = self.value(a) + self.value(b);
        self.push(OpKind::Add, [a, b], [1.0, 1.0], v, Tangent::Absent)
    }

    fn raw_sub(&mut self, a: u32, b: u32) -> u32 {
        let v = self.value(a) - self.value(b);
        self.push(OpKind::Sub, [a, b], [1.0, -1.0], v, Tangent::Absent)
    }

    fn raw_mul(&mut self, a: u32, b: u32) -> u32 {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(OpKind::Mul, [a, b], [vb, va], va * vb, Tangent::Absent)
    }

    fn raw_div(&mut self, a: u32, b: u32) -> u32 {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(OpKind::Div, [a, b], [1.0 / vb, -va / (vb * vb)], va / vb, Tangent::Absent)
    }

    fn raw_square(&mut self, a: u32) -> u32 {
        let va = self.value(a);
        self.push(OpKind::Square, [a, NO_PARENT], [2.0 * va, 0.0], va * va, Tangent::Absent)
    }

    fn raw_scale(&mut self, a: u32, c: f64) -> u32 {
        let va = self.value(a);
        self.push(OpKind::Scale(c), [a, NO_PARENT], [c, 0.0], c * va, Tangent::Absent)
    }

    fn t_add(&mut self, ta: Tangent, tb: Tangent) -> Tangent {
        match (ta, tb) {
            (Tangent::Absent, _) | (_, Tangent::Absent) => Tangent::Absent,
            (Tangent::Zero, t) | (t, Tangent::Zero) => t,
            (Tangent::Node(a), Tangent::Node(b)) => Tangent::Node(self.raw_add(a, b)),
        }
    }

    fn t_sub(&mut self, ta: Tangent, tb: Tangent) -> Tangent {
        match (ta, tb) {
            (Tangent::Absent, _) | (_, Tangent::Absent) => Tangent::Absent,
            (t, Tangent::Zero) => t,
            (Tangent::Zero, Tangent::Node(b)) => Tangent::Node(self.raw_scale(b, -1.0)),
            (Tangent::Node(a), Tangent::Node(b)) => Tangent::Node(self.raw_sub(a, b)),
        }
    }

    /// `coef * t` where `coef` is an existing node.
    fn t_mul(&mut self, coef: u32, t: Tangent) -> Tangent {
        match t {
            Tangent::Node(n) => Tangent::Node(self.raw_mul(coef, n)),
            other => other,
        }
    }

    fn t_scale(&mut self, t: Tangent, c: f64) -> Tangent {
        match t {
            Tangent::Node(n) => Tangent::Node(self.raw_scale(n, c)),
            other => other,
        }
    }
}

/// Append-only scalar computation graph.
///
/// Single-threaded; use one tape per thread (and per training iteration).
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Nodes>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Tape {
            inner: RefCell::new(Nodes {
                nodes: Vec::with_capacity(capacity),
                one: None,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Creates an input node. `tangent` is the seed of the forward direction:
    /// 1 for the time input, 0 for weights.
    pub fn leaf(&self, value: f64, tangent: f64) -> Result<Var<'_>, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteLeaf(value));
        }
        if !tangent.is_finite() {
            return Err(AutodiffError::NonFiniteLeaf(tangent));
        }
        let mut nodes = self.inner.borrow_mut();
        let t = if tangent == 0.0 {
            Tangent::Zero
        } else {
            Tangent::Node(nodes.push(OpKind::Const, [NO_PARENT; 2], [0.0; 2], tangent, Tangent::Zero))
        };
        let idx = nodes.push(OpKind::Leaf, [NO_PARENT; 2], [0.0; 2], value, t);
        Ok(Var { tape: self, idx })
    }

    /// A constant: participates in the graph but has a zero tangent.
    pub fn constant(&self, value: f64) -> Var<'_> {
        let idx = self
            .inner
            .borrow_mut()
            .push(OpKind::Const, [NO_PARENT; 2], [0.0; 2], value, Tangent::Zero);
        Var { tape: self, idx }
    }

    /// Records `kind` applied to `args`.
    pub fn apply<'t>(&'t self, kind: OpKind, args: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
        let expected = kind.arity();
        if expected == 0 || args.len() != expected {
            return Err(AutodiffError::Arity {
                kind,
                expected,
                got: args.len(),
            });
        }
        if args.iter().any(|a| !std::ptr::eq(a.tape, self)) {
            return Err(AutodiffError::TapeMismatch);
        }
        let idx = match kind {
            OpKind::Add => self.record_add(args[0].idx, args[1].idx),
            OpKind::Sub => self.record_sub(args[0].idx, args[1].idx),
            OpKind::Mul => self.record_mul(args[0].idx, args[1].idx),
            OpKind::Div => self.record_div(args[0].idx, args[1].idx)?,
            OpKind::Tanh => self.record_tanh(args[0].idx),
            OpKind::Exp => self.record_exp(args[0].idx),
            OpKind::Square => self.record_square(args[0].idx),
            OpKind::Scale(c) => self.record_scale(args[0].idx, c),
            OpKind::Leaf | OpKind::Const => unreachable!(),
        };
        Ok(Var { tape: self, idx })
    }

    fn record_add(&self, a: u32, b: u32) -> u32 {
        let mut n = self.inner.borrow_mut();
        let (ta, tb) = (n.tangent(a), n.tangent(b));
        let t = n.t_add(ta, tb);
        let v = n.value(a) + n.value(b);
        n.push(OpKind::Add, [a, b], [1.0, 1.0], v, t)
    }

    fn record_sub(&self, a: u32, b: u32) -> u32 {
        let mut n = self.inner.borrow_mut();
        let (ta, tb) = (n.tangent(a), n.tangent(b));
        let t = n.t_sub(ta, tb);
        let v = n.value(a) - n.value(b);
        n.push(OpKind::Sub, [a, b], [1.0, -1.0], v, t)
    }

    fn record_mul(&self, a: u32, b: u32) -> u32 {
        let mut n = self.inner.borrow_mut();
        let (ta, tb) = (n.tangent(a), n.tangent(b));
        let left = n.t_mul(b, ta);
        let right = n.t_mul(a, tb);
        let t = n.t_add(left, right);
        let (va, vb) = (n.value(a), n.value(b));
        n.push(OpKind::Mul, [a, b], [vb, va], va * vb, t)
    }

    fn record_div(&self, a: u32, b: u32) -> Result<u32, AutodiffError> {
        let mut n = self.inner.borrow_mut();
        let (va, vb) = (n.value(a), n.value(b));
        if vb == 0.0 {
            return Err(AutodiffError::SingularDivision);
        }
        let out_v = va / vb;
        // Tangent (ta - out*tb)/b needs the output node, so push it first and
        // patch its tangent afterwards.
        let out = n.push(
            OpKind::Div,
            [a, b],
            [1.0 / vb, -va / (vb * vb)],
            out_v,
            Tangent::Absent,
        );
        let (ta, tb) = (n.tangent(a), n.tangent(b));
        let scaled = n.t_mul(out, tb);
        let num = n.t_sub(ta, scaled);
        let t = match num {
            Tangent::Node(m) => Tangent::Node(n.raw_div(m, b)),
            other => other,
        };
        n.nodes[out as usize].tangent = t;
        Ok(out)
    }

    fn record_tanh(&self, a: u32) -> u32 {
        let mut n = self.inner.borrow_mut();
        let y = n.value(a).tanh();
        let out = n.push(OpKind::Tanh, [a, NO_PARENT], [1.0 - y * y, 0.0], y, Tangent::Absent);
        let t = match n.tangent(a) {
            Tangent::Node(ta) => {
                let one = n.one();
                let sq = n.raw_square(out);
                let deriv = n.raw_sub(one, sq);
                Tangent::Node(n.raw_mul(deriv, ta))
            }
            other => other,
        };
        n.nodes[out as usize].tangent = t;
        out
    }

    fn record_exp(&self, a: u32) -> u32 {
        let mut n = self.inner.borrow_mut();
        let y = n.value(a).exp();
        let out = n.push(OpKind::Exp, [a, NO_PARENT], [y, 0.0], y, Tangent::Absent);
        let ta = n.tangent(a);
        let t = n.t_mul(out, ta);
        n.nodes[out as usize].tangent = t;
        out
    }

    fn record_square(&self, a: u32) -> u32 {
        let mut n = self.inner.borrow_mut();
        let ta = n.tangent(a);
        let prod = n.t_mul(a, ta);
        let t = n.t_scale(prod, 2.0);
        let va = n.value(a);
        n.push(OpKind::Square, [a, NO_PARENT], [2.0 * va, 0.0], va * va, t)
    }

    fn record_scale(&self, a: u32, c: f64) -> u32 {
        let mut n = self.inner.borrow_mut();
        let ta = n.tangent(a);
        let t = n.t_scale(ta, c);
        let va = n.value(a);
        n.push(OpKind::Scale(c), [a, NO_PARENT], [c, 0.0], c * va, t)
    }

    /// Single reverse sweep seeded with adjoint 1 at `output`.
    ///
    /// The tape is left untouched, so the sweep can be repeated from any node.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, AutodiffError> {
        if !std::ptr::eq(output.tape, self) {
            return Err(AutodiffError::TapeMismatch);
        }
        let n = self.inner.borrow();
        let end = output.idx as usize;
        let mut adjoints = vec![0.0f64; end + 1];
        adjoints[end] = 1.0;
        for i in (0..=end).rev() {
            let node = &n.nodes[i];
            let adj = adjoints[i];
            if !node.value.is_finite() || !adj.is_finite() {
                return Err(AutodiffError::NonFinite { node: i });
            }
            if adj == 0.0 {
                continue;
            }
            for k in 0..2 {
                let p = node.parents[k];
                if p != NO_PARENT {
                    adjoints[p as usize] += node.partials[k] * adj;
                }
            }
        }
        let leaves = n.nodes[..=end]
            .iter()
            .enumerate()
            .filter(|(_, node)| node.kind == OpKind::Leaf)
            .map(|(i, _)| i)
            .collect();
        Ok(Gradients { adjoints, leaves })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    adjoints: Vec<f64>,
    leaves: Vec<usize>,
}

impl Gradients {
    /// Adjoint of `var`; zero for nodes recorded after the swept output.
    pub fn wrt(&self, var: Var<'_>) -> f64 {
        self.adjoints.get(var.idx as usize).copied().unwrap_or(0.0)
    }

    /// `(node index, adjoint)` for every leaf, in creation order.
    pub fn leaves(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.leaves.iter().map(move |&i| (i, self.adjoints[i]))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("idx", &self.idx)
            .field("value", &self.value())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn index(self) -> usize {
        self.idx as usize
    }

    pub fn value(self) -> f64 {
        self.tape.inner.borrow().value(self.idx)
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    /// The forward tangent as a graph node. `None` for nodes that are
    /// themselves part of a tangent computation.
    pub fn tangent(self) -> Option<Var<'t>> {
        let t = self.tape.inner.borrow().tangent(self.idx);
        match t {
            Tangent::Node(idx) => Some(Var { tape: self.tape, idx }),
            Tangent::Zero => Some(self.tape.constant(0.0)),
            Tangent::Absent => None,
        }
    }

    /// Primal value of the tangent, if tracked.
    pub fn tangent_value(self) -> Option<f64> {
        let n = self.tape.inner.borrow();
        match n.tangent(self.idx) {
            Tangent::Node(i) => Some(n.value(i)),
            Tangent::Zero => Some(0.0),
            Tangent::Absent => None,
        }
    }

    fn same_tape(self, other: Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    pub fn checked_div(self, rhs: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.tape.apply(OpKind::Div, &[self, rhs])
    }

    pub fn tanh(self) -> Var<'t> {
        Var {
            tape: self.tape,
            idx: self.tape.record_tanh(self.idx),
        }
    }

    pub fn exp(self) -> Var<'t> {
        Var {
            tape: self.tape,
            idx: self.tape.record_exp(self.idx),
        }
    }

    pub fn square(self) -> Var<'t> {
        Var {
            tape: self.tape,
            idx: self.tape.record_square(self.idx),
        }
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        Var {
            tape: self.tape,
            idx: self.tape.record_scale(self.idx, c),
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        Var {
            tape: self.tape,
            idx: self.tape.record_add(self.idx, rhs.idx),
        }
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        Var {
            tape: self.tape,
            idx: self.tape.record_sub(self.idx, rhs.idx),
        }
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        Var {
            tape: self.tape,
            idx: self.tape.record_mul(self.idx, rhs.idx),
        }
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.scale(c)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self + self.tape.constant(c)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

/// Sum of a non-empty sequence of variables.
pub fn sum<'t>(vars: impl IntoIterator<Item = Var<'t>>) -> Option<Var<'t>> {
    vars.into_iter().reduce(|acc, v| acc + v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_records_value_and_seed() {
        let t = Tape::new();
        let x = t.leaf(0.5, 1.0).unwrap();
        assert_eq!(x.value(), 0.5);
        assert_eq!(x.tangent_value(), Some(1.0));
        let w = t.leaf(2.0, 0.0).unwrap();
        assert_eq!(w.value(), 2.0);
        assert_eq!(w.tangent_value(), Some(0.0));
    }

    #[test]
    fn non_finite_leaf_is_rejected() {
        let t = Tape::new();
        let err = t.leaf(f64::NAN, 0.0).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFiniteLeaf(v) if v.is_nan()));
        assert!(err.to_string().contains("non-finite leaf"));
    }

    #[test]
    fn tanh_at_zero() {
        let t = Tape::new();
        let x = t.leaf(0.0, 1.0).unwrap();
        let y = t.apply(OpKind::Tanh, &[x]).unwrap();
        assert_eq!(y.value(), 0.0);
        assert_eq!(y.tangent_value(), Some(1.0));
    }

    #[test]
    fn product_rule() {
        let t = Tape::new();
        let x = t.leaf(2.0, 0.0).unwrap();
        let y = t.leaf(3.0, 0.0).unwrap();
        let f = t.apply(OpKind::Mul, &[x, y]).unwrap();
        assert_eq!(f.value(), 6.0);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x), 3.0);
        assert_eq!(g.wrt(y), 2.0);
        let leaves: Vec<_> = g.leaves().collect();
        assert_eq!(leaves, vec![(x.index(), 3.0), (y.index(), 2.0)]);
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let t = Tape::new();
        let x = t.leaf(1.0, 0.0).unwrap();
        let y = t.leaf(0.0, 0.0).unwrap();
        let err = t.apply(OpKind::Div, &[x, y]).unwrap_err();
        assert_eq!(err, AutodiffError::SingularDivision);
        assert!(err.to_string().contains("singular division"));
    }

    #[test]
    fn tanh_of_product_gradient() {
        let t = Tape::new();
        let w = t.leaf(0.0, 0.0).unwrap();
        let time = t.leaf(5.0, 1.0).unwrap();
        let f = (w * time).tanh();
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(w), 5.0);
        assert_eq!(g.wrt(time), 0.0);
    }

    #[test]
    fn backward_is_repeatable() {
        let t = Tape::new();
        let x = t.leaf(0.7, 1.0).unwrap();
        let f = x.exp() * x.square();
        let a = t.backward(f).unwrap();
        let len = t.len();
        let b = t.backward(f).unwrap();
        assert_eq!(a, b);
        assert_eq!(t.len(), len);
    }

    #[test]
    fn tangent_nodes_differentiate_wrt_weights() {
        // f = tanh(w t); df/dt = w sech^2(w t); d/dw(df/dt) = sech^2 - 2 w t tanh sech^2
        let t = Tape::new();
        let w = t.leaf(0.3, 0.0).unwrap();
        let time = t.leaf(0.8, 1.0).unwrap();
        let f = (w * time).tanh();
        let df = f.tangent().unwrap();
        let z: f64 = 0.3 * 0.8;
        let sech2 = 1.0 - z.tanh().powi(2);
        assert!((df.value() - 0.3 * sech2).abs() < 1e-15);
        let g = t.backward(df).unwrap();
        let expected = sech2 - 2.0 * z * z.tanh() * sech2;
        assert!((g.wrt(w) - expected).abs() < 1e-14);
        // tangent nodes carry no tangent of their own
        assert!(df.tangent().is_none());
    }

    #[test]
    fn nan_is_reported_at_sweep_time() {
        let t = Tape::new();
        let x = t.leaf(800.0, 0.0).unwrap();
        let big = x.exp() * x.exp();
        let f = big - big;
        assert!(f.value().is_nan());
        assert!(matches!(
            t.backward(f),
            Err(AutodiffError::NonFinite { .. })
        ));
    }

    #[test]
    fn foreign_variables_are_rejected() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.leaf(1.0, 0.0).unwrap();
        let y = b.leaf(1.0, 0.0).unwrap();
        assert_eq!(
            a.apply(OpKind::Add, &[x, y]).unwrap_err(),
            AutodiffError::TapeMismatch
        );
        assert_eq!(b.backward(x).unwrap_err(), AutodiffError::TapeMismatch);
    }

    #[test]
    fn arity_is_checked() {
        let t = Tape::new();
        let x = t.leaf(1.0, 0.0).unwrap();
        assert!(matches!(
            t.apply(OpKind::Add, &[x]),
            Err(AutodiffError::Arity { expected: 2, got: 1, .. })
        ));
    }
}
