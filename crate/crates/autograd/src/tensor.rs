//! Reverse-mode automatic differentiation over `f64` ndarray buffers.
//!
//! A `Tensor` is a node in an implicit computation graph. Ops build new nodes
//! that keep `Rc` handles to their parents plus a closure computing
//! vector-Jacobian products. Calling [`Tensor::backward`] on a scalar output
//! walks the graph in reverse topological order and accumulates gradients for
//! every watched leaf (network parameters and explicitly created variables).
//!
//! Everything runs single-threaded on the CPU so results are bit-reproducible
//! for a fixed seed and build.

use ndarray::{ArrayD, Axis, IxDyn, Slice};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub type Arr = ArrayD<f64>;
pub type ArrRc = Rc<ArrayD<f64>>;

/// Identifier of a gradient-receiving leaf (parameter or watched variable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LeafId(pub u64);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn fresh_leaf_id() -> LeafId {
    LeafId(fresh_id())
}

type GradFn = Box<dyn Fn(&Arr, &[Tensor]) -> Vec<Option<Arr>>>;

pub(crate) struct Node {
    id: u64,
    data: ArrRc,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
    leaf: Option<LeafId>,
}

/// A reference-counted handle to a graph node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Node>,
}

/// Gradients collected by a backward pass, keyed by leaf id.
#[derive(Debug, Default)]
pub struct Gradients {
    map: std::collections::BTreeMap<LeafId, Arr>,
}

impl Gradients {
    pub fn get(&self, id: LeafId) -> Option<&Arr> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LeafId, &Arr)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Global L2 norm over every stored gradient.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl Tensor {
    /// A constant with no gradient tracking.
    pub fn constant(data: Arr) -> Tensor {
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                data: Rc::new(data),
                parents: Vec::new(),
                grad_fn: None,
                needs_grad: false,
                leaf: None,
            }),
        }
    }

    pub fn scalar_const(v: f64) -> Tensor {
        Tensor::constant(Arr::from_elem(IxDyn(&[]), v))
    }

    /// A watched variable: gradients will be reported under its leaf id.
    pub fn var(data: Arr) -> Tensor {
        Tensor::leaf_from(Rc::new(data), fresh_leaf_id(), true)
    }

    pub(crate) fn leaf_from(data: ArrRc, leaf: LeafId, trainable: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                data,
                parents: Vec::new(),
                grad_fn: None,
                needs_grad: trainable,
                leaf: Some(leaf),
            }),
        }
    }

    pub(crate) fn from_op(data: Arr, parents: Vec<Tensor>, grad_fn: GradFn) -> Tensor {
        let needs = parents.iter().any(|p| p.inner.needs_grad);
        if !needs {
            return Tensor::constant(data);
        }
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                data: Rc::new(data),
                parents,
                grad_fn: Some(grad_fn),
                needs_grad: true,
                leaf: None,
            }),
        }
    }

    pub fn data(&self) -> &Arr {
        &self.inner.data
    }

    pub fn data_rc(&self) -> ArrRc {
        Rc::clone(&self.inner.data)
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.data.shape()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    pub fn leaf_id(&self) -> Option<LeafId> {
        self.inner.leaf
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "scalar() on tensor of len {}", self.len());
        *self.inner.data.iter().next().expect("empty tensor")
    }

    /// Same values, no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Node {
                id: fresh_id(),
                data: Rc::clone(&self.inner.data),
                parents: Vec::new(),
                grad_fn: None,
                needs_grad: false,
                leaf: None,
            }),
        }
    }

    /// Backward pass from a scalar output with seed gradient 1.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        self.backward_with_seed(Arr::from_elem(self.inner.data.raw_dim(), 1.0))
    }

    /// Backward pass with an explicit output gradient.
    pub fn backward_with_seed(&self, seed: Arr) -> Gradients {
        assert_eq!(seed.shape(), self.shape(), "seed shape mismatch");
        let mut grads = Gradients::default();
        if !self.inner.needs_grad {
            return grads;
        }

        // Topological order via iterative post-order DFS over needs-grad nodes.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child)) = stack.pop() {
            let parents = &node.inner.parents;
            let mut next = child;
            while next < parents.len() {
                let p = &parents[next];
                if p.inner.needs_grad && !visited.contains(&p.inner.id) {
                    visited.insert(p.inner.id);
                    stack.push((node.clone(), next + 1));
                    stack.push((p.clone(), 0));
                    next = usize::MAX;
                    break;
                }
                next += 1;
            }
            if next != usize::MAX {
                order.push(node);
            }
        }

        let mut accum: HashMap<u64, Arr> = HashMap::new();
        accum.insert(self.inner.id, seed);

        for node in order.iter().rev() {
            let Some(grad_out) = accum.remove(&node.inner.id) else {
                continue;
            };
            if let Some(leaf) = node.inner.leaf {
                match grads.map.entry(leaf) {
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        *e.get_mut() += &grad_out;
                    }
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(grad_out.clone());
                    }
                }
            }
            if let Some(grad_fn) = &node.inner.grad_fn {
                let parent_grads = grad_fn(&grad_out, &node.inner.parents);
                debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
                for (p, g) in node.inner.parents.iter().zip(parent_grads) {
                    if !p.inner.needs_grad {
                        continue;
                    }
                    if let Some(g) = g {
                        debug_assert_eq!(g.shape(), p.shape(), "parent grad shape mismatch");
                        match accum.entry(p.inner.id) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                *e.get_mut() += &g;
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(g);
                            }
                        }
                    }
                }
            }
        }
        grads
    }

    // ----- elementwise unary ---------------------------------------------

    fn unary(
        &self,
        value: impl Fn(f64) -> f64,
        deriv: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let out = self.inner.data.mapv(&value);
        let saved_out = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let x = parents[0].data();
                let mut dx = Arr::zeros(g.raw_dim());
                for ((d, (&gv, &xv)), &ov) in dx
                    .iter_mut()
                    .zip(g.iter().zip(x.iter()))
                    .zip(saved_out.iter())
                {
                    *d = gv * deriv(xv, ov);
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn silu(&self) -> Tensor {
        self.unary(
            |x| x * sigmoid_f(x),
            |x, _| {
                let s = sigmoid_f(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid_f, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(|x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(|x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(|x| x.sqrt(), |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn erf(&self) -> Tensor {
        // d/dx erf(x) = 2/sqrt(pi) * exp(-x^2)
        const TWO_OVER_SQRT_PI: f64 = 1.128_379_167_095_512_6;
        self.unary(libm::erf, |x, _| TWO_OVER_SQRT_PI * (-x * x).exp())
    }

    pub fn abs(&self) -> Tensor {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn softplus(&self) -> Tensor {
        // log(1+e^x), stable for large |x|
        self.unary(
            |x| {
                if x > 30.0 {
                    x
                } else if x < -30.0 {
                    x.exp()
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| sigmoid_f(x),
        )
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        self.unary(
            move |x| x.max(lo),
            move |x, _| if x >= lo { 1.0 } else { 0.0 },
        )
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    // ----- elementwise binary (same shape) --------------------------------

    fn binary(
        &self,
        rhs: &Tensor,
        value: impl Fn(f64, f64) -> f64,
        deriv: impl Fn(f64, f64) -> (f64, f64) + 'static,
    ) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "binary op shape mismatch");
        let mut out = Arr::zeros(self.inner.data.raw_dim());
        for ((o, &a), &b) in out
            .iter_mut()
            .zip(self.inner.data.iter())
            .zip(rhs.inner.data.iter())
        {
            *o = value(a, b);
        }
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, parents| {
                let a = parents[0].data();
                let b = parents[1].data();
                let mut da = Arr::zeros(g.raw_dim());
                let mut db = Arr::zeros(g.raw_dim());
                for ((((da_i, db_i), &gv), &av), &bv) in da
                    .iter_mut()
                    .zip(db.iter_mut())
                    .zip(g.iter())
                    .zip(a.iter())
                    .zip(b.iter())
                {
                    let (pa, pb) = deriv(av, bv);
                    *da_i = gv * pa;
                    *db_i = gv * pb;
                }
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        self.binary(rhs, |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    /// Elementwise ternary op with caller-supplied value and partials.
    pub fn zip3_map(
        a: &Tensor,
        b: &Tensor,
        c: &Tensor,
        f: impl Fn(f64, f64, f64) -> (f64, f64, f64, f64) + 'static,
    ) -> Tensor {
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.shape(), c.shape());
        let dim = a.data().raw_dim();
        let mut out = Arr::zeros(dim.clone());
        let mut pa = Arr::zeros(dim.clone());
        let mut pb = Arr::zeros(dim.clone());
        let mut pc = Arr::zeros(dim);
        for ((((&av, &bv), &cv), o), (ga, (gb, gc))) in a
            .data()
            .iter()
            .zip(b.data().iter())
            .zip(c.data().iter())
            .zip(out.iter_mut())
            .zip(pa.iter_mut().zip(pb.iter_mut().zip(pc.iter_mut())))
        {
            let (v, da, db, dc) = f(av, bv, cv);
            *o = v;
            *ga = da;
            *gb = db;
            *gc = dc;
        }
        Tensor::from_op(
            out,
            vec![a.clone(), b.clone(), c.clone()],
            Box::new(move |g, _| {
                let mk = |p: &Arr| {
                    let mut d = g.clone();
                    d.zip_mut_with(p, |gv, &pv| *gv *= pv);
                    Some(d)
                };
                vec![mk(&pa), mk(&pb), mk(&pc)]
            }),
        )
    }

    // ----- shape ops ------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let new_len: usize = shape.iter().product();
        assert_eq!(new_len, self.len(), "reshape length mismatch");
        let out = self
            .inner
            .data
            .as_ref()
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape");
        let old_shape: Vec<usize> = self.shape().to_vec();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let back = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape(IxDyn(&old_shape))
                    .expect("reshape back");
                vec![Some(back)]
            }),
        )
    }

    pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| t.inner.data.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op(
            out,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut start = 0isize;
                for &sz in &sizes {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::new(start, Some(start + sz as isize), 1))
                        .to_owned();
                    grads.push(Some(piece));
                    start += sz as isize;
                }
                grads
            }),
        )
    }

    pub fn slice_axis_op(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let out = self
            .inner
            .data
            .slice_axis(
                Axis(axis),
                Slice::new(start as isize, Some((start + len) as isize), 1),
            )
            .to_owned();
        let full_shape: Vec<usize> = self.shape().to_vec();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = Arr::zeros(IxDyn(&full_shape));
                dx.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(g);
                vec![Some(dx)]
            }),
        )
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Tensor {
        let mut out = self.inner.data.sum_axis(Axis(axis));
        out.insert_axis_inplace(Axis(axis));
        let n = self.shape()[axis];
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let target = parents[0].shape().to_vec();
                let mut dx = Arr::zeros(IxDyn(&target));
                for mut lane in dx.axis_iter_mut(Axis(axis)) {
                    lane += &g.index_axis(Axis(axis), 0);
                }
                let _ = n;
                vec![Some(dx)]
            }),
        )
    }

    /// Broadcast along axes of size 1 up to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        assert_eq!(shape.len(), self.shape().len(), "broadcast rank mismatch");
        let out = self
            .inner
            .data
            .broadcast(IxDyn(shape))
            .expect("broadcast_to")
            .to_owned();
        let src_shape: Vec<usize> = self.shape().to_vec();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut dx = g.clone();
                for (ax, (&s, &d)) in src_shape.iter().zip(dx.shape().to_vec().iter()).enumerate() {
                    if s == 1 && d != 1 {
                        let mut summed = dx.sum_axis(Axis(ax));
                        summed.insert_axis_inplace(Axis(ax));
                        dx = summed;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.inner.data.sum();
        Tensor::from_op(
            Arr::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            Box::new(|g, parents| {
                let gv = g[[]];
                vec![Some(Arr::from_elem(parents[0].data().raw_dim(), gv))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }
}

#[inline]
fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean squared error between two same-shape tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).square().mean_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr(vals: &[f64]) -> Arr {
        Arr::from_shape_vec(IxDyn(&[vals.len()]), vals.to_vec()).unwrap()
    }

    #[test]
    fn add_mul_backward() {
        let a = Tensor::var(arr(&[1.0, 2.0, 3.0]));
        let b = Tensor::var(arr(&[4.0, 5.0, 6.0]));
        let out = a.add(&b).mul(&b).sum_all(); // sum((a+b)*b)
        let grads = out.backward();
        let ga = grads.get(a.leaf_id().unwrap()).unwrap();
        let gb = grads.get(b.leaf_id().unwrap()).unwrap();
        // d/da = b, d/db = a + 2b
        assert_eq!(ga.as_slice().unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(gb.as_slice().unwrap(), &[9.0, 12.0, 15.0]);
    }

    #[test]
    fn detach_blocks_grad() {
        let a = Tensor::var(arr(&[2.0]));
        let out = a.detach().square().sum_all();
        let grads = out.backward();
        assert!(grads.is_empty());
    }

    #[test]
    fn diamond_reuse_accumulates() {
        let a = Tensor::var(arr(&[3.0]));
        let b = a.square(); // 9
        let out = b.add(&b).sum_all(); // 2*a^2
        let grads = out.backward();
        let ga = grads.get(a.leaf_id().unwrap()).unwrap();
        assert_eq!(ga.as_slice().unwrap(), &[12.0]);
    }

    #[test]
    fn constant_graph_prunes() {
        let a = Tensor::constant(arr(&[1.0, 2.0]));
        let out = a.square().sum_all();
        assert!(!out.needs_grad());
    }

    #[test]
    fn concat_slice_roundtrip_grads() {
        let a = Tensor::var(arr(&[1.0, 2.0]));
        let b = Tensor::var(arr(&[3.0]));
        let cat = Tensor::concat(0, &[a.clone(), b.clone()]);
        let out = cat.slice_axis_op(0, 1, 2).square().sum_all(); // uses [2, 3]
        let grads = out.backward();
        let ga = grads.get(a.leaf_id().unwrap()).unwrap();
        let gb = grads.get(b.leaf_id().unwrap()).unwrap();
        assert_eq!(ga.as_slice().unwrap(), &[0.0, 4.0]);
        assert_eq!(gb.as_slice().unwrap(), &[6.0]);
    }
}
