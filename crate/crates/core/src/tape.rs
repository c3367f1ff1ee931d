//! Reverse-mode differentiation over a fixed op set.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes in
//! topological order; [`Tape::backward`] replays it in reverse, pushing a
//! cotangent from the output to every leaf that requires a gradient. The op
//! set covers exactly what the lab needs: affine maps for the MLP, the
//! low-rank product for adapters, elementwise SiLU, feature concatenation,
//! embedding lookup and sum reductions. The splat rasterizer keeps its own
//! hand-derived VJP in `splat` and does not go through the tape.

use crate::error::{Error, Result};
use crate::store::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// y = x · wᵀ + b with x:[m,k], w:[n,k], b:[n].
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    /// y = a · bᵀ with a:[m,k], b:[n,k].
    MatNT(NodeId, NodeId),
    Silu(NodeId),
    /// Concatenation along the feature (last) axis of two [m, *] tensors.
    ConcatCols(NodeId, NodeId),
    /// Row gather from a [v, d] table; indices are constants.
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    /// Scalar sum of all elements.
    Sum(NodeId),
}

struct Node<S: Scalar> {
    op: Op,
    value: Tensor<S>,
    needs_grad: bool,
}

/// One recorded forward computation.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.check_same("add", a, b)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = {
            self.check_shapes("sub", a, b)?;
            self.value(a).sub(self.value(b))
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), v, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_shapes("mul", a, b)?;
        let v = self.value(a).mul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), v, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(S::from_f64(c));
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), v, needs)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            if bv.shape().len() != 1 || bv.shape()[0] != wv.shape()[0] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs weight {:?}", bv.shape(), wv.shape()),
                ));
            }
            let mut y = xv.matmul_nt(wv)?;
            let n = bv.len();
            for row in 0..y.shape()[0] {
                let start = row * n;
                for (j, bj) in bv.data().iter().enumerate() {
                    y.data_mut()[start + j] = y.data()[start + j] + *bj;
                }
            }
            y
        };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear { x, w, b }, y, needs))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatNT(a, b), v, needs))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(silu);
        let needs = self.needs(a);
        self.push(Op::Silu(a), v, needs)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = {
            let av = self.value(a);
            let bv = self.value(b);
            let (m, p) = dims2(av, "concat_cols")?;
            let (m2, q) = dims2(bv, "concat_cols")?;
            if m != m2 {
                return Err(Error::shape(
                    "concat_cols",
                    format!("{:?} vs {:?}", av.shape(), bv.shape()),
                ));
            }
            let mut data = Vec::with_capacity(m * (p + q));
            for i in 0..m {
                data.extend_from_slice(av.row(i));
                data.extend_from_slice(bv.row(i));
            }
            Tensor::new(vec![m, p + q], data)
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols(a, b), v, needs))
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = {
            let t = self.value(table);
            let (rows, d) = dims2(t, "gather_rows")?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(Error::contract(format!(
                    "gather index {bad} out of range {rows}"
                )));
            }
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![idx.len(), d], data)
        };
        let needs = self.needs(table);
        Ok(self.push(
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            v,
            needs,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(S::from_f64(self.value(a).sum()));
        let needs = self.needs(a);
        self.push(Op::Sum(a), v, needs)
    }

    /// Mean squared error between two same-shape nodes, as a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq);
        Ok(self.scale(s, 1.0 / n))
    }

    fn check_same(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Tensor<S>> {
        self.check_shapes(op, a, b)?;
        Ok(self.value(a).add(self.value(b)))
    }

    fn check_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    /// Pulls `cotangent` back from `output` to every grad-requiring node and
    /// returns the per-node cotangents (leaves included). The result is a
    /// pure function of (recorded values, cotangent).
    pub fn backward(&self, output: NodeId, cotangent: Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        if cotangent.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "cotangent {:?} vs output {:?}",
                    cotangent.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        let mut cots: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        cots[output.0] = Some(cotangent);

        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                cots[i] = None;
                continue;
            }
            let Some(g) = cots[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    cots[i] = Some(g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut cots, *a, g.clone(), self);
                    accumulate(&mut cots, *b, g, self);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut cots, *b, g.scale(-S::one()), self);
                    accumulate(&mut cots, *a, g, self);
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b));
                    let gb = g.mul(self.value(*a));
                    accumulate(&mut cots, *a, ga, self);
                    accumulate(&mut cots, *b, gb, self);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut cots, *a, g.scale(S::from_f64(*c)), self);
                }
                Op::Linear { x, w, b } => {
                    if self.needs(*x) {
                        let gx = g.matmul(self.value(*w))?;
                        accumulate(&mut cots, *x, gx, self);
                    }
                    if self.needs(*w) {
                        let gw = g.matmul_tn(self.value(*x))?;
                        accumulate(&mut cots, *w, gw, self);
                    }
                    if self.needs(*b) {
                        let gb = g.col_sum()?;
                        accumulate(&mut cots, *b, gb, self);
                    }
                }
                Op::MatNT(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(self.value(*b))?;
                        accumulate(&mut cots, *a, ga, self);
                    }
                    if self.needs(*b) {
                        let gb = g.matmul_tn(self.value(*a))?;
                        accumulate(&mut cots, *b, gb, self);
                    }
                }
                Op::Silu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| gv * silu_grad(x));
                    accumulate(&mut cots, *a, ga, self);
                }
                Op::ConcatCols(a, b) => {
                    let p = self.value(*a).shape()[1];
                    let q = self.value(*b).shape()[1];
                    let m = self.value(*a).shape()[0];
                    let mut ga = Vec::with_capacity(m * p);
                    let mut gb = Vec::with_capacity(m * q);
                    for r in 0..m {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..p]);
                        gb.extend_from_slice(&row[p..]);
                    }
                    accumulate(&mut cots, *a, Tensor::new(vec![m, p], ga), self);
                    accumulate(&mut cots, *b, Tensor::new(vec![m, q], gb), self);
                }
                Op::GatherRows { table, idx } => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.shape().to_vec());
                    let d = t.shape()[1];
                    for (r, &row) in idx.iter().enumerate() {
                        let src = g.row(r);
                        let dst = &mut gt.data_mut()[row * d..(row + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                    accumulate(&mut cots, *table, gt, self);
                }
                Op::Sum(a) => {
                    let c = g.data()[0];
                    let ga = Tensor::full(self.value(*a).shape().to_vec(), c);
                    accumulate(&mut cots, *a, ga, self);
                }
            }
            // `take()` cleared the slot; only leaves re-install theirs, so
            // what survives the loop is exactly the leaf cotangents.
        }
        Ok(cots)
    }

    /// Gradient of a leaf after [`Tape::backward`]. Zero if nothing flowed.
    pub fn leaf_grad(
        cots: &[Option<Tensor<S>>],
        id: NodeId,
        shape: &[usize],
    ) -> Tensor<S> {
        cots[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn accumulate<S: Scalar>(
    cots: &mut [Option<Tensor<S>>],
    id: NodeId,
    delta: Tensor<S>,
    tape: &Tape<S>,
) {
    if !tape.needs(id) {
        return;
    }
    match &mut cots[id.0] {
        Some(existing) => *existing = existing.add(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn dims2<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() == 2 {
        Ok((t.shape()[0], t.shape()[1]))
    } else {
        Err(Error::shape(op, format!("expected 2-D, got {:?}", t.shape())))
    }
}

pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Loads every store entry onto the tape as a non-differentiable constant.
/// Inference paths use this; training paths use [`StoreBinding`] instead.
pub fn bind_constants<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
) -> std::collections::BTreeMap<String, NodeId> {
    let mut map = std::collections::BTreeMap::new();
    for (name, entry) in store.iter() {
        let id = tape.constant(entry.value.clone());
        map.insert(name.clone(), id);
    }
    map
}

/// Binds every entry of a `ParamStore` as a tape leaf so a recorded loss can
/// be pulled back into the store's gradients. This is the store-level VJP
/// entry point used by the training loops.
pub struct StoreBinding {
    bound: Vec<(String, NodeId, Vec<usize>)>,
}

impl StoreBinding {
    pub fn bind_all<S: Scalar>(tape: &mut Tape<S>, store: &ParamStore<S>) -> Self {
        let mut bound = Vec::with_capacity(store.len());
        for (name, entry) in store.iter() {
            let id = tape.var(entry.value.clone());
            bound.push((name.clone(), id, entry.value.shape().to_vec()));
        }
        StoreBinding { bound }
    }

    /// Binds only the named entries as differentiable leaves; everything the
    /// forward pass needs beyond these must be added as constants.
    pub fn bind_named<S: Scalar>(
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        names: &[String],
    ) -> Result<Self> {
        let mut bound = Vec::with_capacity(names.len());
        for name in names {
            let entry = store.get(name)?;
            let id = tape.var(entry.value.clone());
            bound.push((name.clone(), id, entry.value.shape().to_vec()));
        }
        Ok(StoreBinding { bound })
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.bound
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, id, _)| *id)
    }

    /// Accumulates backward results into the store's gradient slots.
    pub fn accumulate_into<S: Scalar>(
        &self,
        cots: &[Option<Tensor<S>>],
        store: &mut ParamStore<S>,
    ) -> Result<()> {
        for (name, id, shape) in &self.bound {
            let g = Tape::leaf_grad(cots, *id, shape);
            store.accumulate_grad(name, &g)?;
        }
        Ok(())
    }
}
