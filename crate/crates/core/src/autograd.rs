//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters of
//! a [`ParamStore`] are bound first, so `ParamId(i)` maps to node `i`.
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient to one optional gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    num_params: usize,
}

/// Gradients of leaf nodes. Intermediate gradients are released during the
/// sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    num_params: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// One gradient per bound parameter; parameters the loss did not reach
    /// get `None`.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor<T>>> {
        self.grads.truncate(self.num_params);
        self.grads
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            num_params: 0,
        }
    }

    /// A graph whose first nodes are the (trainable) parameters of `store`.
    pub fn with_params(store: &ParamStore<T>) -> Self {
        let nodes = store
            .values()
            .map(|v| Node {
                value: Rc::new(v.clone()),
                parents: Vec::new(),
                backward: None,
                requires_grad: true,
            })
            .collect::<Vec<_>>();
        Self {
            num_params: nodes.len(),
            nodes: RefCell::new(nodes),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(
            id.index() < self.num_params,
            "parameter {} not bound to this graph",
            id.index()
        );
        Var(id.index())
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an operation. `backward` receives the gradient of the output
    /// and returns gradients aligned with `parents`. It is dropped when no
    /// parent needs a gradient.
    pub fn push(&self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_grads = bw(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            grads,
            num_params: self.num_params,
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(op, format!("{sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], Box::new(|g| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|g| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x * y)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |g| {
                vec![
                    Some(g.zip_map(&vb, |x, y| x * y).unwrap()),
                    Some(g.zip_map(&va, |x, y| x * y).unwrap()),
                ]
            }),
        ))
    }

    /// Sum of any number of same-shaped vars.
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Validation("add_n of nothing".into()))?;
        let mut out = (*self.value(first)).clone();
        for &x in &xs[1..] {
            self.same_shape("add_n", first, x)?;
            out.add_assign(&self.value(x));
        }
        let n = xs.len();
        Ok(self.push(out, xs, Box::new(move |g| vec![Some(g.clone()); n])))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, &[x], Box::new(move |g| vec![Some(g.map(|v| v * c))]))
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, &[x], Box::new(|g| vec![Some(g.clone())]))
    }

    /// `x * s` where `s` is a one-element var.
    pub fn mul_scalar_var(&self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.len() != 1 {
            return shape_err("mul_scalar_var", format!("scalar has shape {:?}", vs.shape()));
        }
        let sv = vs.data()[0];
        let out = vx.map(|v| v * sv);
        let shape = vs.shape().to_vec();
        Ok(self.push(
            out,
            &[x, s],
            Box::new(move |g| {
                let gs: T = g.data().iter().zip(vx.data()).map(|(&a, &b)| a * b).sum();
                vec![
                    Some(g.map(|v| v * sv)),
                    Some(Tensor::new(&shape, vec![gs]).unwrap()),
                ]
            }),
        ))
    }

    /// Broadcast multiply by a vector over the last axis.
    pub fn mul_lastdim(&self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let c = vx.last_dim();
        if vw.len() != c {
            return shape_err(
                "mul_lastdim",
                format!("x {:?} with weight {:?}", vx.shape(), vw.shape()),
            );
        }
        let mut out = (*vx).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= vw.data()[i % c];
        }
        Ok(self.push(
            out,
            &[x, w],
            Box::new(move |g| {
                let mut gx = g.clone();
                let mut gw = Tensor::zeros(vw.shape());
                for (i, gv) in gx.data_mut().iter_mut().enumerate() {
                    gw.data_mut()[i % c] += *gv * vx.data()[i];
                    *gv *= vw.data()[i % c];
                }
                vec![Some(gx), Some(gw)]
            }),
        ))
    }

    /// Broadcast add of a vector over the last axis.
    pub fn add_lastdim(&self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vx.last_dim();
        if vb.len() != c {
            return shape_err(
                "add_lastdim",
                format!("x {:?} with bias {:?}", vx.shape(), vb.shape()),
            );
        }
        let mut out = (*vx).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vb.data()[i % c];
        }
        let bshape = vb.shape().to_vec();
        Ok(self.push(
            out,
            &[x, b],
            Box::new(move |g| {
                let mut gb = Tensor::zeros(&bshape);
                for (i, &gv) in g.data().iter().enumerate() {
                    gb.data_mut()[i % c] += gv;
                }
                vec![Some(g.clone()), Some(gb)]
            }),
        ))
    }

    /// `y[r, j] = x[r, j] * s[r]` for a rank-2 `x` and a length-`rows` `s`.
    pub fn mul_rows(&self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let (rows, cols) = vx.rc()?;
        if vs.len() != rows {
            return shape_err(
                "mul_rows",
                format!("x {:?} with row scale {:?}", vx.shape(), vs.shape()),
            );
        }
        let mut out = (*vx).clone();
        for r in 0..rows {
            for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                *v *= vs.data()[r];
            }
        }
        Ok(self.push(
            out,
            &[x, s],
            Box::new(move |g| {
                let mut gx = g.clone();
                let mut gs = Tensor::zeros(vs.shape());
                for r in 0..rows {
                    let sr = vs.data()[r];
                    let mut acc = T::zero();
                    for j in 0..cols {
                        let i = r * cols + j;
                        acc += g.data()[i] * vx.data()[i];
                        gx.data_mut()[i] = g.data()[i] * sr;
                    }
                    gs.data_mut()[r] = acc;
                }
                vec![Some(gx), Some(gs)]
            }),
        ))
    }

    fn unary(
        &self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let vx = self.value(x);
        let out = vx.map(f);
        let vy = Rc::new(out.clone());
        self.push(
            out,
            &[x],
            Box::new(move |g| {
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data().iter().zip(vy.data()))
                    .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                    .collect();
                vec![Some(Tensor::new(g.shape(), d).unwrap())]
            }),
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max(T::zero()),
            |xv, _| if xv > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |xv, _| {
                let s = sigmoid(xv);
                s * (T::one() + xv * (T::one() - s))
            },
        )
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus, |xv, _| sigmoid(xv))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let out = Tensor::new(&[1], vec![vx.sum()]).unwrap();
        self.push(
            out,
            &[x],
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::c(n as f64))
    }

    pub fn sum_squares(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(&[1], vec![vx.sum_sq()]).unwrap();
        self.push(
            out,
            &[x],
            Box::new(move |g| {
                let two = T::c(2.0) * g.data()[0];
                vec![Some(vx.map(|v| v * two))]
            }),
        )
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let orig = vx.shape().to_vec();
        let out = (*vx).clone().reshape(shape)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g| vec![Some(g.clone().reshape(&orig).unwrap())]),
        ))
    }

    /// Contiguous window `[start, start + len)` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            );
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            &[x],
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    gx.data_mut()[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Rc<Tensor<T>>> = xs.iter().map(|&x| self.value(x)).collect();
        let first = vals
            .first()
            .ok_or_else(|| Error::Validation("concat of nothing".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return shape_err("concat", format!("axis {axis} on rank {rank}"));
        }
        for v in &vals {
            let ok = v.rank() == rank
                && (0..rank).all(|d| d == axis || v.shape()[d] == first.shape()[d]);
            if !ok {
                return shape_err(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", first.shape(), v.shape()),
                );
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let dims: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &d) in vals.iter().zip(&dims) {
                out.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut oshape = first.shape().to_vec();
        oshape[axis] = total;
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            xs,
            Box::new(move |g| {
                let mut parts: Vec<Vec<T>> = dims
                    .iter()
                    .map(|&d| Vec::with_capacity(outer * d * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, &d) in parts.iter_mut().zip(&dims) {
                        p.extend_from_slice(&g.data()[off..off + d * inner]);
                        off += d * inner;
                    }
                }
                parts
                    .into_iter()
                    .zip(&shapes)
                    .map(|(p, s)| Some(Tensor::new(s, p).unwrap()))
                    .collect()
            }),
        ))
    }

    // ---- linear algebra ----------------------------------------------

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.rc()?;
        let (k2, n) = vb.rc()?;
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", va.shape(), vb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for kk in 0..k {
                let av = va.data()[i * k + kk];
                let brow = &vb.data()[kk * n..(kk + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            &[a, b],
            Box::new(move |g| {
                let gd = g.data();
                let mut ga = vec![T::zero(); m * k];
                let mut gb = vec![T::zero(); k * n];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &vb.data()[kk * n..(kk + 1) * n];
                        ga[i * k + kk] = dot(grow, brow);
                        let av = va.data()[i * k + kk];
                        for (o, &gv) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[m, k], ga).unwrap()),
                    Some(Tensor::new(&[k, n], gb).unwrap()),
                ]
            }),
        ))
    }

    /// `[M, K] x [N, K]^T -> [M, N]`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.rc()?;
        let (n, k2) = vb.rc()?;
        if k != k2 {
            return shape_err("matmul_nt", format!("{:?} x {:?}^T", va.shape(), vb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &va.data()[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &vb.data()[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            &[a, b],
            Box::new(move |g| {
                let gd = g.data();
                let mut ga = vec![T::zero(); m * k];
                let mut gb = vec![T::zero(); n * k];
                for i in 0..m {
                    let arow = &va.data()[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gv = gd[i * n + j];
                        if gv == T::zero() {
                            continue;
                        }
                        let brow = &vb.data()[j * k..(j + 1) * k];
                        for (o, &bv) in ga[i * k..(i + 1) * k].iter_mut().zip(brow) {
                            *o += gv * bv;
                        }
                        for (o, &av) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                            *o += gv * av;
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[m, k], ga).unwrap()),
                    Some(Tensor::new(&[n, k], gb).unwrap()),
                ]
            }),
        ))
    }

    /// Per-position affine map over the last axis: `x [.., Ci] * w [Ci, Co] + b [Co]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (ci, co) = vw.rc()?;
        if vx.last_dim() != ci {
            return shape_err(
                "linear",
                format!("input {:?} with weight {:?}", vx.shape(), vw.shape()),
            );
        }
        let vb = match b {
            Some(b) => {
                let vb = self.value(b);
                if vb.len() != co {
                    return shape_err("linear", format!("bias {:?} for {co} outputs", vb.shape()));
                }
                Some(vb)
            }
            None => None,
        };
        let positions = vx.len() / ci;
        let mut out = vec![T::zero(); positions * co];
        for p in 0..positions {
            let row = &mut out[p * co..(p + 1) * co];
            if let Some(vb) = &vb {
                row.copy_from_slice(vb.data());
            }
            let xin = &vx.data()[p * ci..(p + 1) * ci];
            for (i, &xv) in xin.iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                let wrow = &vw.data()[i * co..(i + 1) * co];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let mut oshape = vx.shape().to_vec();
        *oshape.last_mut().unwrap() = co;
        let xshape = vx.shape().to_vec();
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            &parents,
            Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![T::zero(); positions * ci];
                let mut gw = vec![T::zero(); ci * co];
                let mut gb = vec![T::zero(); co];
                for p in 0..positions {
                    let grow = &gd[p * co..(p + 1) * co];
                    let xin = &vx.data()[p * ci..(p + 1) * ci];
                    for i in 0..ci {
                        let wrow = &vw.data()[i * co..(i + 1) * co];
                        gx[p * ci + i] = dot(grow, wrow);
                        let xv = xin[i];
                        if xv != T::zero() {
                            for (o, &gv) in gw[i * co..(i + 1) * co].iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                    if has_bias {
                        for (o, &gv) in gb.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                }
                let mut res = vec![
                    Some(Tensor::new(&xshape, gx).unwrap()),
                    Some(Tensor::new(&[ci, co], gw).unwrap()),
                ];
                if has_bias {
                    res.push(Some(Tensor::new(&[co], gb).unwrap()));
                }
                res
            }),
        ))
    }

    /// 2D convolution of an `H x W x Ci` map with a `K x K x Ci x Co` kernel,
    /// zero padding `pad` on every side.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (h, wd, ci) = vx.hwc()?;
        let (k, k2, wci, co) = match vw.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => return shape_err("conv2d", format!("kernel shape {:?}", vw.shape())),
        };
        if k != k2 || wci != ci || stride == 0 {
            return shape_err(
                "conv2d",
                format!("input {:?} with kernel {:?}", vx.shape(), vw.shape()),
            );
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return shape_err("conv2d", format!("input {h}x{wd} smaller than kernel {k}"));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let vb = b.map(|b| self.value(b));
        if let Some(vb) = &vb {
            if vb.len() != co {
                return shape_err("conv2d", format!("bias {:?} for {co} outputs", vb.shape()));
            }
        }
        let geom = ConvGeom {
            h,
            w: wd,
            ci,
            co,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let mut out = vec![T::zero(); oh * ow * co];
        geom.forward(vx.data(), vw.data(), vb.as_deref().map(|b| b.data()), &mut out);
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        let wshape = vw.shape().to_vec();
        Ok(self.push(
            Tensor::new(&[oh, ow, co], out)?,
            &parents,
            Box::new(move |g| {
                let mut gx = vec![T::zero(); h * wd * ci];
                let mut gw = vec![T::zero(); k * k * ci * co];
                geom.backward(vx.data(), vw.data(), g.data(), &mut gx, &mut gw);
                let mut res = vec![
                    Some(Tensor::new(&[h, wd, ci], gx).unwrap()),
                    Some(Tensor::new(&wshape, gw).unwrap()),
                ];
                if has_bias {
                    let mut gb = vec![T::zero(); co];
                    for p in 0..oh * ow {
                        for (o, &gv) in gb.iter_mut().zip(&g.data()[p * co..(p + 1) * co]) {
                            *o += gv;
                        }
                    }
                    res.push(Some(Tensor::new(&[co], gb).unwrap()));
                }
                res
            }),
        ))
    }

    // ---- normalisation / attention ------------------------------------

    /// Standardises every position over the last axis (no affine).
    pub fn layer_norm(&self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let n = vx.len() / c;
        let eps = T::c(eps);
        let cf = T::c(c as f64);
        let mut out = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); n];
        for p in 0..n {
            let row = &vx.data()[p * c..(p + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[p] = is;
            for (o, &v) in out[p * c..(p + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let y = Rc::new(Tensor::new(vx.shape(), out).unwrap());
        let yc = y.clone();
        self.push(
            (*y).clone(),
            &[x],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); g.len()];
                for p in 0..n {
                    let gr = &g.data()[p * c..(p + 1) * c];
                    let yr = &yc.data()[p * c..(p + 1) * c];
                    let mg = gr.iter().copied().sum::<T>() / cf;
                    let mgy = dot(gr, yr) / cf;
                    for j in 0..c {
                        gx[p * c + j] = inv_std[p] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                vec![Some(Tensor::new(g.shape(), gx).unwrap())]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut out = vec![T::zero(); vx.len()];
        for (orow, row) in out.chunks_mut(c).zip(vx.data().chunks(c)) {
            softmax_into(row, orow);
        }
        let y = Rc::new(Tensor::new(vx.shape(), out).unwrap());
        let yc = y.clone();
        self.push(
            (*y).clone(),
            &[x],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); g.len()];
                for ((o, gr), yr) in gx
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(yc.data().chunks(c))
                {
                    let s = dot(gr, yr);
                    for j in 0..c {
                        o[j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![Some(Tensor::new(g.shape(), gx).unwrap())]
            }),
        )
    }

    // ---- spatial resampling -------------------------------------------

    /// Adaptive average pooling to `oh x ow`; bin `i` covers rows
    /// `floor(i*H/oh) .. ceil((i+1)*H/oh)` (same for columns).
    pub fn adaptive_avg_pool(&self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let vx = self.value(x);
        let (h, w, c) = vx.hwc()?;
        if oh == 0 || ow == 0 {
            return shape_err("adaptive_avg_pool", "zero output size");
        }
        let rows = pool_bins(h, oh);
        let cols = pool_bins(w, ow);
        let mut out = vec![T::zero(); oh * ow * c];
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let o = &mut out[(i * ow + j) * c..(i * ow + j + 1) * c];
                for y in r0..r1 {
                    for xx in c0..c1 {
                        let src = &vx.data()[(y * w + xx) * c..(y * w + xx + 1) * c];
                        for (a, &v) in o.iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                }
                let inv = T::one() / T::c(((r1 - r0) * (c1 - c0)) as f64);
                for a in o.iter_mut() {
                    *a *= inv;
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[oh, ow, c], out)?,
            &[x],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); h * w * c];
                for (i, &(r0, r1)) in rows.iter().enumerate() {
                    for (j, &(c0, c1)) in cols.iter().enumerate() {
                        let inv = T::one() / T::c(((r1 - r0) * (c1 - c0)) as f64);
                        let gsrc = &g.data()[(i * ow + j) * c..(i * ow + j + 1) * c];
                        for y in r0..r1 {
                            for xx in c0..c1 {
                                let dst = &mut gx[(y * w + xx) * c..(y * w + xx + 1) * c];
                                for (a, &gv) in dst.iter_mut().zip(gsrc) {
                                    *a += gv * inv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[h, w, c], gx).unwrap())]
            }),
        ))
    }

    /// Bilinear resize with half-pixel centres (no corner alignment).
    pub fn resize_bilinear(&self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let vx = self.value(x);
        let (h, w, c) = vx.hwc()?;
        if oh == 0 || ow == 0 {
            return shape_err("resize_bilinear", "zero output size");
        }
        if (h, w) == (oh, ow) {
            return Ok(x);
        }
        let ry = bilinear_taps(h, oh);
        let rx = bilinear_taps(w, ow);
        let mut out = vec![T::zero(); oh * ow * c];
        for (oy, &(y0, y1, ly)) in ry.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in rx.iter().enumerate() {
                let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for (yy, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                    for (xx, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                        let wgt = T::c(wy * wx);
                        let src = &vx.data()[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                        for (a, &v) in o.iter_mut().zip(src) {
                            *a += wgt * v;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[oh, ow, c], out)?,
            &[x],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); h * w * c];
                for (oy, &(y0, y1, ly)) in ry.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in rx.iter().enumerate() {
                        let gsrc = &g.data()[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                        for (yy, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                            for (xx, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                                let wgt = T::c(wy * wx);
                                let dst = &mut gx[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                                for (a, &gv) in dst.iter_mut().zip(gsrc) {
                                    *a += wgt * gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[h, w, c], gx).unwrap())]
            }),
        ))
    }

    // ---- wavelet ------------------------------------------------------

    /// Haar analysis into the stacked `[LL | LH | HL | HH]` layout.
    /// Odd sizes are padded by repeating the last row/column first.
    pub fn dwt2(&self, x: Var) -> Result<Var> {
        let (h, w, _) = self.value(x).hwc()?;
        let x = if h % 2 == 1 || w % 2 == 1 {
            self.pad_to_even(x)?
        } else {
            x
        };
        let out = crate::wavelet::haar_forward_stacked(&self.value(x))?;
        // orthonormal: the adjoint is the inverse
        Ok(self.push(
            out,
            &[x],
            Box::new(|g| vec![Some(crate::wavelet::haar_inverse_stacked(g).unwrap())]),
        ))
    }

    /// Haar synthesis from the stacked layout.
    pub fn idwt2(&self, s: Var) -> Result<Var> {
        let out = crate::wavelet::haar_inverse_stacked(&self.value(s))?;
        Ok(self.push(
            out,
            &[s],
            Box::new(|g| vec![Some(crate::wavelet::haar_forward_stacked(g).unwrap())]),
        ))
    }

    pub fn pad_to_even(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (h, w, c) = vx.hwc()?;
        let out = crate::wavelet::pad_to_even(&vx)?;
        let (ph, pw) = (out.shape()[0], out.shape()[1]);
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); h * w * c];
                for y in 0..ph {
                    for xx in 0..pw {
                        let (sy, sx) = (y.min(h - 1), xx.min(w - 1));
                        for ch in 0..c {
                            gx[(sy * w + sx) * c + ch] += g.data()[(y * pw + xx) * c + ch];
                        }
                    }
                }
                vec![Some(Tensor::new(&[h, w, c], gx).unwrap())]
            }),
        ))
    }

    /// Top-left `height x width` window of a map.
    pub fn crop(&self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (h, w, _) = self.value(x).hwc()?;
        let x = if height != h { self.slice(x, 0, 0, height)? } else { x };
        if width != w {
            self.slice(x, 1, 0, width)
        } else {
            Ok(x)
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    if v > T::c(20.0) {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Eight independent partial sums so the loop vectorises.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut acc = lanes.iter().copied().sum::<T>();
    for (&x, &y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    acc
}

pub(crate) fn softmax_into<T: Real>(row: &[T], out: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

pub(crate) fn pool_bins(n: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| {
            let start = i * n / out;
            let end = ((i + 1) * n).div_ceil(out);
            (start, end)
        })
        .collect()
}

fn bilinear_taps(n: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let l = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, l)
        })
        .collect()
}

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    #[inline]
    fn src(&self, o: usize, kk: usize, n: usize) -> Option<usize> {
        let p = (o * self.stride + kk).checked_sub(self.pad)?;
        (p < n).then_some(p)
    }

    /// Patch matrix `[oh*ow, k*k*ci]`, zero where the window leaves the map.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (ci, k) = (self.ci, self.k);
        let kk = k * k * ci;
        let mut cols = vec![T::zero(); self.oh * self.ow * kk];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * kk..][..kk];
                for ky in 0..k {
                    let Some(iy) = self.src(oy, ky, self.h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = self.src(ox, kx, self.w) else { continue };
                        row[(ky * k + kx) * ci..][..ci]
                            .copy_from_slice(&x[(iy * self.w + ix) * ci..][..ci]);
                    }
                }
            }
        }
        cols
    }

    /// `[K, co]` kernel as `[co, K]`.
    fn transpose_kernel<T: Real>(&self, w: &[T]) -> Vec<T> {
        let (kk, co) = (self.k * self.k * self.ci, self.co);
        let mut wt = vec![T::zero(); kk * co];
        for j in 0..kk {
            for o in 0..co {
                wt[o * kk + j] = w[j * co + o];
            }
        }
        wt
    }

    fn forward<T: Real>(&self, x: &[T], w: &[T], b: Option<&[T]>, out: &mut [T]) {
        let (kk, co) = (self.k * self.k * self.ci, self.co);
        let cols = self.im2col(x);
        let wt = self.transpose_kernel(w);
        for (p, o) in out.chunks_exact_mut(co).enumerate() {
            let patch = &cols[p * kk..][..kk];
            for (c, a) in o.iter_mut().enumerate() {
                *a = dot(patch, &wt[c * kk..][..kk]) + b.map_or(T::zero(), |b| b[c]);
            }
        }
    }

    fn backward<T: Real>(&self, x: &[T], w: &[T], g: &[T], gx: &mut [T], gw: &mut [T]) {
        let (ci, k, co) = (self.ci, self.k, self.co);
        let kk = k * k * ci;
        let cols = self.im2col(x);
        let wt = self.transpose_kernel(w);
        let mut gwt = vec![T::zero(); co * kk];
        let mut gpatch = vec![T::zero(); kk];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let p = oy * self.ow + ox;
                let go = &g[p * co..][..co];
                let patch = &cols[p * kk..][..kk];
                gpatch.iter_mut().for_each(|v| *v = T::zero());
                for (c, &gv) in go.iter().enumerate() {
                    if gv == T::zero() {
                        continue;
                    }
                    axpy(gv, patch, &mut gwt[c * kk..][..kk]);
                    axpy(gv, &wt[c * kk..][..kk], &mut gpatch);
                }
                for ky in 0..k {
                    let Some(iy) = self.src(oy, ky, self.h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = self.src(ox, kx, self.w) else { continue };
                        let dst = &mut gx[(iy * self.w + ix) * ci..][..ci];
                        for (d, &v) in dst.iter_mut().zip(&gpatch[(ky * k + kx) * ci..][..ci]) {
                            *d += v;
                        }
                    }
                }
            }
        }
        for j in 0..kk {
            for o in 0..co {
                gw[j * co + o] += gwt[o * kk + j];
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}
