//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so reverse creation order is a valid topological order
//! for the backward sweep.

use std::collections::BTreeMap;

use super::kernels::{self, Conv2dSpec};
use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Exp(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Upsample2x(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameters of a [`ParamStore`] bound into a graph as differentiable leaves.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients keyed by parameter name; parameters that did not influence
    /// the loss get zeros.
    pub fn for_params(&self, bound: &Bound, graph: &Graph) -> BTreeMap<String, Tensor> {
        bound
            .vars
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds every tensor of `store`. Frozen stores produce constants.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let trainable = !store.is_frozen();
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = self.push(t.clone(), Op::Leaf, trainable);
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    fn broadcast(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = kernels::broadcast_shape(ta.shape(), tb.shape()).unwrap_or_else(|| {
            panic!(
                "incompatible shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )
        });
        if ta.shape() == tb.shape() {
            return ta.zip_map(tb, f);
        }
        let mut out = Tensor::zeros(&shape);
        let (da, db) = (ta.data(), tb.data());
        let dst = out.data_mut();
        kernels::for_each_broadcast(ta.shape(), tb.shape(), &shape, |o, i, j| {
            dst[o] = f(da[i], db[j]);
        });
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.broadcast(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.broadcast(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.broadcast(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let v = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(v, Op::Conv2d { x, w, b, spec }, ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = kernels::upsample2x(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::Upsample2x(x), ng)
    }

    /// [M, K] · [K, N] → [M, N]
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), 2);
        assert_eq!(tb.rank(), 2);
        let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
        assert_eq!(k, tb.dim(0), "matmul inner dims");
        let mut out = Tensor::zeros(&[m, n]);
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            ta.data(),
            k as isize,
            1,
            tb.data(),
            n as isize,
            1,
            0.0,
            out.data_mut(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value(x).narrow(axis, start, len);
        let ng = self.ng(x);
        self.push(v, Op::Narrow { x, axis, start }, ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, axis);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar");
        t.data()[0]
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads[v.0] = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                if self.ng(*a) {
                    self.accumulate(grads, *a, kernels::reduce_to_shape(g, sa));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, kernels::reduce_to_shape(g, sb));
                }
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                if self.ng(*a) {
                    self.accumulate(grads, *a, kernels::reduce_to_shape(g, sa));
                }
                if self.ng(*b) {
                    let mut gb = kernels::reduce_to_shape(g, sb);
                    gb.scale_assign(-1.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let out = node.value.shape();
                for (this, other, flip) in [(*a, tb, false), (*b, ta, true)] {
                    if !self.ng(this) {
                        continue;
                    }
                    let this_shape = self.value(this).shape();
                    let mut full = Tensor::zeros(out);
                    let (sa, sb) = if flip {
                        (other.shape(), this_shape)
                    } else {
                        (this_shape, other.shape())
                    };
                    let od = other.data();
                    let dst = full.data_mut();
                    kernels::for_each_broadcast(sa, sb, out, |o, ia, ib| {
                        let oi = if flip { ia } else { ib };
                        dst[o] = g.data()[o] * od[oi];
                    });
                    self.accumulate(grads, this, kernels::reduce_to_shape(&full, this_shape));
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = g.zip_map(x, |gv, xv| {
                    let s = 1.0 / (1.0 + (-xv).exp());
                    gv * s * (1.0 + xv * (1.0 - s))
                });
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y);
                self.accumulate(grads, *a, d);
            }
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *spec,
                    self.ng(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Upsample2x(x) => {
                let dx = kernels::upsample2x_backward(g, self.value(*x).shape());
                self.accumulate(grads, *x, dx);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
                if self.ng(*a) {
                    // dA = G · Bᵀ
                    let mut da = Tensor::zeros(ta.shape());
                    kernels::gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g.data(),
                        n as isize,
                        1,
                        tb.data(),
                        1,
                        n as isize,
                        0.0,
                        da.data_mut(),
                    );
                    self.accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    // dB = Aᵀ · G
                    let mut db = Tensor::zeros(tb.shape());
                    kernels::gemm(
                        k,
                        m,
                        n,
                        1.0,
                        ta.data(),
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        0.0,
                        db.data_mut(),
                    );
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape));
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.value(*x).shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let (dim, len) = (xs[*axis], g.shape()[*axis]);
                let mut dx = Tensor::zeros(xs);
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if self.ng(p) {
                        self.accumulate(grads, p, g.narrow(*axis, offset, len));
                    }
                    offset += len;
                }
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::full(shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.data()[0] / t.len() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape(), v));
            }
        }
    }
}
