use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::scalar::{logistic, Scalar};

use super::tensor::{broadcast_index_map, broadcast_shape, Tensor};
use super::AutodiffError;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Sqrt,
    Tanh,
    Relu,
    Logistic,
    Neg,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

enum Op<S> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
    },
    AddScalar {
        a: NodeId,
    },
    MulScalar {
        a: NodeId,
        k: S,
    },
    Unary {
        kind: UnaryKind,
        a: NodeId,
    },
    Reduce {
        kind: ReduceKind,
        a: NodeId,
        axis: Option<usize>,
        // flat input index feeding each output element (max only)
        argmax: Vec<usize>,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
    },
    Interp1d {
        signal: NodeId,
        loc: NodeId,
        lower: Vec<usize>,
        frac: Vec<S>,
        inside: Vec<bool>,
    },
    GatherLast {
        a: NodeId,
        index: Rc<Vec<usize>>,
    },
    SelectRows {
        a: NodeId,
        rows: Rc<Vec<usize>>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    GradReverse {
        a: NodeId,
    },
    StraightThrough {
        value: NodeId,
        relaxed: NodeId,
        direction: Rc<Tensor<S>>,
    },
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in execution order, so every operation's inputs precede
/// it. [`Tape::backward`] walks the nodes once in reverse and may be called at
/// most once per tape; build a fresh tape for every step.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    consumed: Cell<bool>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Records a tensor that gradients are accumulated for.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a tensor that is treated as a constant.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: S) -> Var<'_, S> {
        self.constant(Tensor::scalar(v))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenates tensors along axis 0. Trailing dimensions must agree.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, S>]) -> Result<Var<'t, S>, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::Empty { op: "concat_rows" })?;
        let head = first.value();
        if head.rank() == 0 {
            return Err(AutodiffError::Rank {
                op: "concat_rows",
                expected: 1,
                shape: head.shape().to_vec(),
            });
        }
        let tail = head.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut requires = false;
        for p in parts {
            self.check_same(p)?;
            let v = p.value();
            if v.rank() != head.rank() || v.shape()[1..] != tail[..] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: head.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
            requires |= p.requires_grad();
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            requires,
        ))
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
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

    fn value(&self, id: NodeId) -> Rc<Tensor<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn check_same(&self, v: &Var<'_, S>) -> Result<(), AutodiffError> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(AutodiffError::DetachedTape)
        }
    }

    /// Reverse-mode sweep from a rank-0 `loss`.
    ///
    /// Returns gradients for every `param` leaf the loss depends on.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>, AutodiffError> {
        self.check_same(&loss)?;
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.rank() != 0 {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        if self.consumed.replace(true) {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![S::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

fn accumulate<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], id: NodeId, contribution: Vec<S>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop<S: Scalar>(nodes: &[Node<S>], id: NodeId, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let map_a = (av.shape() != out.shape()).then(|| broadcast_index_map(av.shape(), out.shape()));
            let map_b = (bv.shape() != out.shape()).then(|| broadcast_index_map(bv.shape(), out.shape()));
            let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
            let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
            if nodes[*a].requires_grad {
                let mut ga = vec![S::zero(); av.len()];
                for (i, &gi) in g.iter().enumerate() {
                    ga[ia(i)] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => gi,
                        BinaryKind::Mul => gi * bv.data()[ib(i)],
                        BinaryKind::Div => gi / bv.data()[ib(i)],
                    };
                }
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![S::zero(); bv.len()];
                for (i, &gi) in g.iter().enumerate() {
                    gb[ib(i)] += match kind {
                        BinaryKind::Add => gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * av.data()[ia(i)],
                        BinaryKind::Div => -gi * out.data()[i] / bv.data()[ib(i)],
                    };
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::AddScalar { a } => accumulate(nodes, grads, *a, g.to_vec()),
        Op::MulScalar { a, k } => accumulate(nodes, grads, *a, g.iter().map(|&v| v * *k).collect()),
        Op::Unary { kind, a } => {
            let x = nodes[*a].value.data();
            let y = out.data();
            let two = S::lit(2.0);
            let ga = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| match kind {
                    UnaryKind::Exp => gi * y[i],
                    UnaryKind::Log => gi / x[i],
                    UnaryKind::Sqrt => gi / (two * y[i]),
                    UnaryKind::Tanh => gi * (S::one() - y[i] * y[i]),
                    UnaryKind::Relu => {
                        if x[i] > S::zero() {
                            gi
                        } else {
                            S::zero()
                        }
                    }
                    UnaryKind::Logistic => gi * y[i] * (S::one() - y[i]),
                    UnaryKind::Neg => -gi,
                    UnaryKind::Square => gi * two * x[i],
                })
                .collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Reduce { kind, a, axis, argmax } => {
            let av = &nodes[*a].value;
            let mut ga = vec![S::zero(); av.len()];
            match kind {
                ReduceKind::Max => {
                    for (o, &src) in argmax.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }
                ReduceKind::Sum | ReduceKind::Mean => {
                    let (outer, extent, inner) = reduce_layout(av.shape(), *axis);
                    let scale = if *kind == ReduceKind::Mean {
                        S::one() / S::lit(extent as f64)
                    } else {
                        S::one()
                    };
                    for o in 0..outer {
                        for j in 0..extent {
                            for i in 0..inner {
                                ga[(o * extent + j) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Matmul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (n, k) = (av.shape()[0], av.shape()[1]);
            let m = bv.shape()[1];
            if nodes[*a].requires_grad {
                let mut ga = vec![S::zero(); n * k];
                for i in 0..n {
                    for p in 0..k {
                        let mut acc = S::zero();
                        for j in 0..m {
                            acc += g[i * m + j] * bv.data()[p * m + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![S::zero(); k * m];
                for i in 0..n {
                    for p in 0..k {
                        let aip = av.data()[i * k + p];
                        for j in 0..m {
                            gb[p * m + j] += aip * g[i * m + j];
                        }
                    }
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Transpose { a } => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let mut ga = vec![S::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] = g[i * c + j];
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Reshape { a } | Op::GradReverse { a } => {
            let ga = if matches!(node.op, Op::GradReverse { .. }) {
                g.iter().map(|&v| -v).collect()
            } else {
                g.to_vec()
            };
            accumulate(nodes, grads, *a, ga);
        }
        Op::Conv1d { x, w, stride, padding } => {
            let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
            let (n, ci, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (co, k) = (wv.shape()[0], wv.shape()[2]);
            let lo = out.shape()[2];
            let want_x = nodes[*x].requires_grad;
            let want_w = nodes[*w].requires_grad;
            let mut gx = vec![S::zero(); if want_x { xv.len() } else { 0 }];
            let mut gw = vec![S::zero(); if want_w { wv.len() } else { 0 }];
            for b in 0..n {
                for o in 0..co {
                    let grow = &g[(b * co + o) * lo..(b * co + o + 1) * lo];
                    for c in 0..ci {
                        let xrow = (b * ci + c) * l;
                        let wrow = (o * ci + c) * k;
                        for j in 0..k {
                            let wj = wv.data()[wrow + j];
                            let mut acc_w = S::zero();
                            for (t, &gt) in grow.iter().enumerate() {
                                let pos = t * stride + j;
                                if pos < *padding || pos - padding >= l {
                                    continue;
                                }
                                let src = xrow + pos - padding;
                                if want_x {
                                    gx[src] += gt * wj;
                                }
                                acc_w += gt * xv.data()[src];
                            }
                            if want_w {
                                gw[wrow + j] += acc_w;
                            }
                        }
                    }
                }
            }
            if want_x {
                accumulate(nodes, grads, *x, gx);
            }
            if want_w {
                accumulate(nodes, grads, *w, gw);
            }
        }
        Op::Interp1d {
            signal,
            loc,
            lower,
            frac,
            inside,
        } => {
            let sv = &nodes[*signal].value;
            let l = *sv.shape().last().unwrap();
            let lq = *out.shape().last().unwrap();
            let half_span = S::lit((l as f64 - 1.0) / 2.0);
            let mut gs = vec![S::zero(); sv.len()];
            let mut gl = vec![S::zero(); g.len()];
            for (q, &gq) in g.iter().enumerate() {
                let row = (q / lq) * l;
                let i0 = lower[q];
                if l == 1 {
                    gs[row] += gq;
                    continue;
                }
                let f = frac[q];
                gs[row + i0] += gq * (S::one() - f);
                gs[row + i0 + 1] += gq * f;
                if inside[q] {
                    gl[q] = gq * (sv.data()[row + i0 + 1] - sv.data()[row + i0]) * half_span;
                }
            }
            accumulate(nodes, grads, *signal, gs);
            accumulate(nodes, grads, *loc, gl);
        }
        Op::GatherLast { a, index } => {
            let av = &nodes[*a].value;
            let lin = *av.shape().last().unwrap();
            let lout = *out.shape().last().unwrap();
            let mut ga = vec![S::zero(); av.len()];
            for (i, &gi) in g.iter().enumerate() {
                ga[(i / lout) * lin + index[i]] += gi;
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SelectRows { a, rows } => {
            let av = &nodes[*a].value;
            let inner = av.len() / av.shape()[0];
            let mut ga = vec![S::zero(); av.len()];
            for (r, &src) in rows.iter().enumerate() {
                for e in 0..inner {
                    ga[src * inner + e] += g[r * inner + e];
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                accumulate(nodes, grads, p, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::StraightThrough {
            value,
            relaxed,
            direction,
        } => {
            accumulate(nodes, grads, *value, g.to_vec());
            let dot = g
                .iter()
                .zip(direction.data())
                .fold(S::zero(), |acc, (&gi, &di)| acc + gi * di);
            accumulate(nodes, grads, *relaxed, vec![dot]);
        }
    }
}

fn reduce_layout(shape: &[usize], axis: Option<usize>) -> (usize, usize, usize) {
    match axis {
        None => (1, shape.iter().product(), 1),
        Some(ax) => (
            shape[..ax].iter().product(),
            shape[ax],
            shape[ax + 1..].iter().product(),
        ),
    }
}

/// Gradients of a loss with respect to the `param` leaves of a tape.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, S>) -> Tensor<S> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape().to_vec()))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: NodeId,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

// Arithmetic is fallible (shape checks), so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Constant copy of this value; gradients stop here.
    pub fn detach(&self) -> Var<'t, S> {
        self.tape.constant((*self.value()).clone())
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires: bool) -> Var<'t, S> {
        self.tape.push(value, op, requires)
    }

    fn binary(self, other: Var<'t, S>, kind: BinaryKind) -> Result<Var<'t, S>, AutodiffError> {
        self.tape.check_same(&other)?;
        let (av, bv) = (self.value(), other.value());
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| AutodiffError::ShapeMismatch {
            op: op_name,
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        })?;
        if kind == BinaryKind::Div {
            if let Some(index) = bv.data().iter().position(|v| v.is_zero()) {
                return Err(AutodiffError::DivisionByZero { index });
            }
        }
        let f = |x: S, y: S| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<S> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(av.shape(), &shape);
            let mb = broadcast_index_map(bv.shape(), &shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(av.data()[i], bv.data()[j]))
                .collect()
        };
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            requires,
        ))
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn add_scalar(self, k: S) -> Var<'t, S> {
        let v = self.value().map(|x| x + k);
        self.push(v, Op::AddScalar { a: self.id }, self.requires_grad())
    }

    pub fn mul_scalar(self, k: S) -> Var<'t, S> {
        let v = self.value().map(|x| x * k);
        self.push(v, Op::MulScalar { a: self.id, k }, self.requires_grad())
    }

    fn unary(self, kind: UnaryKind) -> Result<Var<'t, S>, AutodiffError> {
        let av = self.value();
        let domain = |op: &'static str, ok: fn(S) -> bool| match av.data().iter().position(|&x| !ok(x)) {
            Some(index) => Err(AutodiffError::Domain { op, index }),
            None => Ok(()),
        };
        match kind {
            UnaryKind::Log => domain("log", |x| x > S::zero())?,
            UnaryKind::Sqrt => domain("sqrt", |x| x >= S::zero())?,
            _ => {}
        }
        let out = av.map(|x| match kind {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Relu => x.max(S::zero()),
            UnaryKind::Logistic => logistic(x),
            UnaryKind::Neg => -x,
            UnaryKind::Square => x * x,
        });
        Ok(self.push(out, Op::Unary { kind, a: self.id }, self.requires_grad()))
    }

    pub fn exp(self) -> Var<'t, S> {
        self.unary(UnaryKind::Exp).expect("exp has no domain restriction")
    }

    pub fn log(self) -> Result<Var<'t, S>, AutodiffError> {
        self.unary(UnaryKind::Log)
    }

    pub fn sqrt(self) -> Result<Var<'t, S>, AutodiffError> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn tanh(self) -> Var<'t, S> {
        self.unary(UnaryKind::Tanh).expect("tanh has no domain restriction")
    }

    pub fn relu(self) -> Var<'t, S> {
        self.unary(UnaryKind::Relu).expect("relu has no domain restriction")
    }

    pub fn logistic(self) -> Var<'t, S> {
        self.unary(UnaryKind::Logistic)
            .expect("logistic has no domain restriction")
    }

    pub fn neg(self) -> Var<'t, S> {
        self.unary(UnaryKind::Neg).expect("neg has no domain restriction")
    }

    pub fn square(self) -> Var<'t, S> {
        self.unary(UnaryKind::Square).expect("square has no domain restriction")
    }

    /// Reduction over `axis`, or over every element when `axis` is `None`.
    ///
    /// `max` routes its gradient to the first maximal element.
    pub fn reduce(self, kind: ReduceKind, axis: Option<usize>, keepdim: bool) -> Result<Var<'t, S>, AutodiffError> {
        let av = self.value();
        if let Some(ax) = axis {
            if ax >= av.rank() {
                return Err(AutodiffError::AxisOutOfRange {
                    axis: ax,
                    rank: av.rank(),
                });
            }
        }
        if av.is_empty() {
            return Err(AutodiffError::Empty { op: "reduce" });
        }
        let (outer, extent, inner) = reduce_layout(av.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * extent + j) * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut s = S::zero();
                        for j in 0..extent {
                            s += av.data()[at(j)];
                        }
                        if kind == ReduceKind::Mean {
                            s /= S::lit(extent as f64);
                        }
                        data.push(s);
                    }
                    ReduceKind::Max => {
                        let mut best = at(0);
                        for j in 1..extent {
                            if av.data()[at(j)] > av.data()[best] {
                                best = at(j);
                            }
                        }
                        argmax.push(best);
                        data.push(av.data()[best]);
                    }
                }
            }
        }
        let shape: Vec<usize> = match (axis, keepdim) {
            (None, false) => Vec::new(),
            (None, true) => vec![1; av.rank()],
            (Some(ax), keep) => av
                .shape()
                .iter()
                .enumerate()
                .filter_map(|(d, &n)| {
                    if d != ax {
                        Some(n)
                    } else if keep {
                        Some(1)
                    } else {
                        None
                    }
                })
                .collect(),
        };
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Reduce {
                kind,
                a: self.id,
                axis,
                argmax,
            },
            self.requires_grad(),
        ))
    }

    pub fn sum(self) -> Var<'t, S> {
        self.reduce(ReduceKind::Sum, None, false).expect("full sum")
    }

    pub fn mean(self) -> Var<'t, S> {
        self.reduce(ReduceKind::Mean, None, false).expect("full mean")
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, S>, AutodiffError> {
        self.reduce(ReduceKind::Sum, Some(axis), keepdim)
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, S>, AutodiffError> {
        self.reduce(ReduceKind::Mean, Some(axis), keepdim)
    }

    pub fn max_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, S>, AutodiffError> {
        self.reduce(ReduceKind::Max, Some(axis), keepdim)
    }

    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        self.tape.check_same(&other)?;
        let (av, bv) = (self.value(), other.value());
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut data = vec![S::zero(); n * m];
        for i in 0..n {
            let row = &mut data[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = av.data()[i * k + p];
                let brow = &bv.data()[p * m..(p + 1) * m];
                for (r, &b) in row.iter_mut().zip(brow) {
                    *r += aip * b;
                }
            }
        }
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self.push(
            Tensor::new(vec![n, m], data)?,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
            requires,
        ))
    }

    pub fn transpose(self) -> Result<Var<'t, S>, AutodiffError> {
        let av = self.value();
        if av.rank() != 2 {
            return Err(AutodiffError::Rank {
                op: "transpose",
                expected: 2,
                shape: av.shape().to_vec(),
            });
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av.data()[i * c + j];
            }
        }
        Ok(self.push(
            Tensor::new(vec![c, r], data)?,
            Op::Transpose { a: self.id },
            self.requires_grad(),
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, S>, AutodiffError> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a: self.id }, self.requires_grad()))
    }

    /// 1-D cross-correlation of `self` (N, C_in, L) with kernels `w`
    /// (C_out, C_in, k) under zero padding.
    pub fn conv1d(self, w: Var<'t, S>, stride: usize, padding: usize) -> Result<Var<'t, S>, AutodiffError> {
        self.tape.check_same(&w)?;
        let (xv, wv) = (self.value(), w.value());
        if xv.rank() != 3 || wv.rank() != 3 || xv.shape()[1] != wv.shape()[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv1d",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument("conv1d stride must be positive"));
        }
        let (n, ci, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (co, k) = (wv.shape()[0], wv.shape()[2]);
        let padded = l + 2 * padding;
        if k > padded || k == 0 {
            return Err(AutodiffError::KernelTooLarge { kernel: k, padded });
        }
        let lo = (padded - k) / stride + 1;
        let mut data = vec![S::zero(); n * co * lo];
        for b in 0..n {
            for o in 0..co {
                let orow = &mut data[(b * co + o) * lo..(b * co + o + 1) * lo];
                for c in 0..ci {
                    let xrow = &xv.data()[(b * ci + c) * l..(b * ci + c + 1) * l];
                    let wrow = &wv.data()[(o * ci + c) * k..(o * ci + c + 1) * k];
                    for (t, acc) in orow.iter_mut().enumerate() {
                        let start = t * stride;
                        for (j, &wj) in wrow.iter().enumerate() {
                            let pos = start + j;
                            if pos >= padding && pos - padding < l {
                                *acc += wj * xrow[pos - padding];
                            }
                        }
                    }
                }
            }
        }
        let requires = self.requires_grad() || w.requires_grad();
        Ok(self.push(
            Tensor::new(vec![n, co, lo], data)?,
            Op::Conv1d {
                x: self.id,
                w: w.id,
                stride,
                padding,
            },
            requires,
        ))
    }

    /// Linear interpolation of `self` (…, L) at normalized `locations`
    /// (…, L_q) in [-1, 1]; -1 is the first sample and +1 the last.
    ///
    /// Locations outside the range are clamped and receive zero gradient.
    pub fn interp1d(self, locations: Var<'t, S>) -> Result<Var<'t, S>, AutodiffError> {
        self.tape.check_same(&locations)?;
        let (sv, lv) = (self.value(), locations.value());
        let rank = sv.rank();
        if rank == 0 || lv.rank() != rank || sv.shape()[..rank - 1] != lv.shape()[..rank - 1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "interp1d",
                left: sv.shape().to_vec(),
                right: lv.shape().to_vec(),
            });
        }
        let l = sv.shape()[rank - 1];
        let lq = lv.shape()[rank - 1];
        if l == 0 {
            return Err(AutodiffError::Empty { op: "interp1d" });
        }
        let half_span = S::lit((l as f64 - 1.0) / 2.0);
        let mut lower = Vec::with_capacity(lv.len());
        let mut frac = Vec::with_capacity(lv.len());
        let mut inside = Vec::with_capacity(lv.len());
        let mut data = Vec::with_capacity(lv.len());
        for (q, &raw) in lv.data().iter().enumerate() {
            let row = (q / lq) * l;
            let clamped = raw.max(-S::one()).min(S::one());
            inside.push(clamped == raw);
            if l == 1 {
                lower.push(0);
                frac.push(S::zero());
                data.push(sv.data()[row]);
                continue;
            }
            let pos = (clamped + S::one()) * half_span;
            let i0 = pos.floor().to_usize().unwrap_or(0).min(l - 2);
            let f = pos - S::lit(i0 as f64);
            lower.push(i0);
            frac.push(f);
            data.push(sv.data()[row + i0] * (S::one() - f) + sv.data()[row + i0 + 1] * f);
        }
        let requires = self.requires_grad() || locations.requires_grad();
        Ok(self.push(
            Tensor::new(lv.shape().to_vec(), data)?,
            Op::Interp1d {
                signal: self.id,
                loc: locations.id,
                lower,
                frac,
                inside,
            },
            requires,
        ))
    }

    /// Gathers along the last axis: `out[r, j] = self[r, index[r * out_len + j]]`.
    pub fn gather_last(self, index: Rc<Vec<usize>>, out_len: usize) -> Result<Var<'t, S>, AutodiffError> {
        let av = self.value();
        if av.rank() == 0 {
            return Err(AutodiffError::Rank {
                op: "gather_last",
                expected: 1,
                shape: Vec::new(),
            });
        }
        let lin = *av.shape().last().unwrap();
        let rows = av.len() / lin.max(1);
        if index.len() != rows * out_len || index.iter().any(|&i| i >= lin) {
            return Err(AutodiffError::InvalidArgument(
                "gather index out of range or wrong length",
            ));
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(q, &i)| av.data()[(q / out_len.max(1)) * lin + i])
            .collect();
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = out_len;
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::GatherLast { a: self.id, index },
            self.requires_grad(),
        ))
    }

    /// Ascending sort along the last axis.
    ///
    /// Returns the sorted values and, per row, the source index of each
    /// output position. Gradients scatter back through that permutation.
    pub fn sort_last(self) -> Result<(Var<'t, S>, Vec<usize>), AutodiffError> {
        let av = self.value();
        if av.rank() == 0 {
            return Err(AutodiffError::Rank {
                op: "sort_last",
                expected: 1,
                shape: Vec::new(),
            });
        }
        let l = *av.shape().last().unwrap();
        let mut perm = Vec::with_capacity(av.len());
        for row in av.data().chunks(l.max(1)) {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&i, &j| row[i].partial_cmp(&row[j]).unwrap_or(std::cmp::Ordering::Equal));
            perm.extend(idx);
        }
        let sorted = self.gather_last(Rc::new(perm.clone()), l)?;
        Ok((sorted, perm))
    }

    /// Selects rows along axis 0.
    pub fn select_rows(self, rows: Rc<Vec<usize>>) -> Result<Var<'t, S>, AutodiffError> {
        let av = self.value();
        if av.rank() == 0 {
            return Err(AutodiffError::Rank {
                op: "select_rows",
                expected: 1,
                shape: Vec::new(),
            });
        }
        let n = av.shape()[0];
        if rows.iter().any(|&r| r >= n) {
            return Err(AutodiffError::InvalidArgument("row index out of range"));
        }
        let inner = av.len() / n.max(1);
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows.iter() {
            data.extend_from_slice(&av.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[0] = rows.len();
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::SelectRows { a: self.id, rows },
            self.requires_grad(),
        ))
    }

    /// Identity in the forward pass; negates the gradient in the backward pass.
    pub fn grad_reverse(self) -> Var<'t, S> {
        let v = (*self.value()).clone();
        self.push(v, Op::GradReverse { a: self.id }, self.requires_grad())
    }

    /// Straight-through estimator: forwards `self` unchanged, and routes
    /// `sum(grad ⊙ direction)` to the rank-0 `relaxed` input as if
    /// `d self / d relaxed == direction`.
    pub fn straight_through(self, relaxed: Var<'t, S>, direction: Tensor<S>) -> Result<Var<'t, S>, AutodiffError> {
        self.tape.check_same(&relaxed)?;
        let v = (*self.value()).clone();
        if direction.shape() != v.shape() || relaxed.value().len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "straight_through",
                left: v.shape().to_vec(),
                right: direction.shape().to_vec(),
            });
        }
        let requires = self.requires_grad() || relaxed.requires_grad();
        Ok(self.push(
            v,
            Op::StraightThrough {
                value: self.id,
                relaxed: relaxed.id,
                direction: Rc::new(direction),
            },
            requires,
        ))
    }
}
