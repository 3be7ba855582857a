//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation on [`Var`] handles in creation order,
//! which is automatically a topological order. Backward functions are written
//! in terms of the same differentiable operations, so calling
//! [`Tape::grad`] with `create_graph = true` records the backward pass itself
//! and the result can be differentiated again. Second-order gradients are
//! what the Lipschitz penalty needs: the input-gradient norm becomes an
//! ordinary node whose parameter gradient comes from a second sweep.
//!
//! Scalars are 0-dimensional arrays. Binary elementwise operations broadcast
//! with NumPy rules.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Zip};

use crate::{Error, Result};

pub type Array = ArrayD<f64>;

pub struct BackCtx<'t> {
    pub tape: &'t Tape,
    pub inputs: Vec<Var<'t>>,
    pub output: Var<'t>,
    pub grad: Var<'t>,
    /// Whether each input needs a gradient on this sweep.
    pub needs: Vec<bool>,
}

type Grads<'t> = Result<Vec<Option<Var<'t>>>>;
type BackwardFn = Rc<dyn for<'t> Fn(&BackCtx<'t>) -> Grads<'t>>;

struct Node {
    value: Rc<Array>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Operation record for one forward (and optionally backward) computation.
/// A tape is confined to one thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Array, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    pub fn constant(&self, value: Array) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Array) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_> {
        self.constant(Array::zeros(IxDyn(shape)))
    }

    /// Runs `f` without recording gradients.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let prev = self.recording.replace(false);
        let out = f();
        self.recording.set(prev);
        out
    }

    fn op<'t, F>(&'t self, value: Array, inputs: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: for<'a> Fn(&BackCtx<'a>) -> Grads<'a> + 'static,
    {
        let track = self.recording.get() && inputs.iter().any(|v| v.requires_grad());
        if track {
            self.push(Node {
                value: Rc::new(value),
                parents: inputs.iter().map(|v| v.id).collect(),
                backward: Some(Rc::new(backward)),
                requires_grad: true,
            })
        } else {
            self.constant(value)
        }
    }

    /// Gradients of the scalar `output` with respect to `wrt`. With
    /// `create_graph` the backward pass is recorded so the returned gradients
    /// are themselves differentiable. Inputs that `output` does not depend on
    /// receive zeros.
    pub fn grad<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>> {
        if !output.shape().is_empty() {
            return Err(Error::invalid(format!(
                "gradient source must be a scalar, got shape {:?}",
                output.shape()
            )));
        }
        let top = output.id;
        // Nodes through which a wrt leaf reaches `output`.
        let mut reach = vec![false; top + 1];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id <= top {
                    reach[w.id] = true;
                }
            }
            for id in 0..=top {
                if !reach[id] && nodes[id].requires_grad {
                    reach[id] = nodes[id].parents.iter().any(|&p| reach[p]);
                }
            }
        }
        let prev = self.recording.replace(create_graph);
        let result = self.sweep(output, &reach, create_graph);
        self.recording.set(prev);
        let grads = result?;
        Ok(wrt
            .iter()
            .map(|w| match grads.get(&w.id) {
                Some(&g) => Var { tape: self, id: g },
                None => self.zeros(&w.shape()),
            })
            .collect())
    }

    fn sweep(
        &self,
        output: Var<'_>,
        reach: &[bool],
        create_graph: bool,
    ) -> Result<HashMap<usize, usize>> {
        let mut grads: HashMap<usize, usize> = HashMap::new();
        if !reach[output.id] {
            return Ok(grads);
        }
        let seed = self.constant(Array::from_elem(IxDyn(&[]), 1.0));
        grads.insert(output.id, seed.id);
        for id in (0..=output.id).rev() {
            if !reach[id] {
                continue;
            }
            let Some(&gid) = grads.get(&id) else { continue };
            let (parents, backward) = {
                let nodes = self.nodes.borrow();
                (nodes[id].parents.clone(), nodes[id].backward.clone())
            };
            let Some(backward) = backward else { continue };
            let needs: Vec<bool> = parents.iter().map(|&p| reach[p]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let ctx = BackCtx {
                tape: self,
                inputs: parents.iter().map(|&p| Var { tape: self, id: p }).collect(),
                output: Var { tape: self, id },
                grad: Var { tape: self, id: gid },
                needs: needs.clone(),
            };
            let input_grads = backward(&ctx)?;
            for ((&p, need), g) in parents.iter().zip(needs).zip(input_grads) {
                let (true, Some(g)) = (need, g) else { continue };
                let acc = match grads.get(&p) {
                    Some(&prev) => Var { tape: self, id: prev }.add(g)?.id,
                    None => g.id,
                };
                grads.insert(p, acc);
            }
            if !create_graph {
                grads.remove(&id);
            }
        }
        Ok(grads)
    }

    /// Gradients of `loss` for every leaf that requires them.
    pub fn backward<'t>(&'t self, loss: Var<'t>) -> Result<Gradients> {
        let leaves: Vec<Var<'t>> = {
            let nodes = self.nodes.borrow();
            (0..=loss.id)
                .filter(|&i| nodes[i].requires_grad && nodes[i].parents.is_empty())
                .map(|id| Var { tape: self, id })
                .collect()
        };
        let mark = self.len();
        let gs = self.grad(loss, &leaves, false)?;
        let map = leaves
            .iter()
            .zip(gs)
            .map(|(l, g)| (l.id, (*g.value()).clone()))
            .collect();
        self.nodes.borrow_mut().truncate(mark);
        Ok(Gradients { map })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    map: HashMap<usize, Array>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Array> {
        self.map.get(&v.id)
    }
}

// ---------------------------------------------------------------------------
// shape helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::invalid(format!(
                    "cannot broadcast shapes {a:?} and {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// strided kernels
//
// Broadcasting elementwise work runs over flat standard-layout buffers. Each
// operand gets element strides in the output index space (0 on broadcast
// axes); adjacent axes that are contiguous for every operand are merged so
// the inner loop is as long as possible.

fn std_strides(shape: &[usize]) -> Vec<isize> {
    let mut st = vec![0isize; shape.len()];
    let mut acc = 1isize;
    for i in (0..shape.len()).rev() {
        st[i] = acc;
        acc *= shape[i] as isize;
    }
    st
}

/// Strides of a standard-layout operand of shape `src` read at positions of
/// `out` (right-aligned, 0 on broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<isize> {
    let own = std_strides(src);
    let off = out.len() - src.len();
    (0..out.len())
        .map(|i| if i < off || src[i - off] == 1 { 0 } else { own[i - off] })
        .collect()
}

/// Merges adjacent axes that are jointly contiguous for every stride set.
fn collapse(shape: &[usize], strides: &[Vec<isize>]) -> (Vec<usize>, Vec<Vec<isize>>) {
    let mut dims: Vec<usize> = Vec::new();
    let mut st: Vec<Vec<isize>> = vec![Vec::new(); strides.len()];
    for i in 0..shape.len() {
        if shape[i] == 1 {
            continue;
        }
        let mergeable = !dims.is_empty()
            && strides.iter().zip(&st).all(|(s, m)| *m.last().unwrap() == s[i] * shape[i] as isize);
        if mergeable {
            *dims.last_mut().unwrap() *= shape[i];
            for (m, s) in st.iter_mut().zip(strides) {
                *m.last_mut().unwrap() = s[i];
            }
        } else {
            dims.push(shape[i]);
            for (m, s) in st.iter_mut().zip(strides) {
                m.push(s[i]);
            }
        }
    }
    if dims.is_empty() {
        dims.push(1);
        for m in st.iter_mut() {
            m.push(0);
        }
    }
    (dims, st)
}

/// Calls `f(offsets, len, inner_strides)` for every run of the innermost
/// merged axis, in standard order of `shape`.
fn walk<const N: usize>(shape: &[usize], strides: [Vec<isize>; N], mut f: impl FnMut([isize; N], usize, [isize; N])) {
    if shape.iter().product::<usize>() == 0 {
        return;
    }
    let (dims, st) = collapse(shape, &strides);
    let nd = dims.len();
    let inner = dims[nd - 1];
    let inner_st: [isize; N] = std::array::from_fn(|k| st[k][nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let mut off = [0isize; N];
    loop {
        f(off, inner, inner_st);
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            for k in 0..N {
                off[k] += st[k][ax];
            }
            if idx[ax] < dims[ax] {
                break;
            }
            for k in 0..N {
                off[k] -= st[k][ax] * dims[ax] as isize;
            }
            idx[ax] = 0;
        }
    }
}

fn std_slice(x: &Array) -> std::borrow::Cow<'_, [f64]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// Broadcasting elementwise `f(a, b)`.
fn binary_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let (xa, xb) = (std_slice(a), std_slice(b));
    let mut out = Vec::with_capacity(shape.iter().product());
    if a.shape() == b.shape() {
        out.extend(xa.iter().zip(xb.iter()).map(|(&x, &y)| f(x, y)));
    } else {
        let sa = broadcast_strides(a.shape(), &shape);
        let sb = broadcast_strides(b.shape(), &shape);
        walk(&shape, [sa, sb], |[oa, ob], len, [ia, ib]| {
            let (oa, ob) = (oa as usize, ob as usize);
            match (ia, ib) {
                (1, 1) => out.extend(xa[oa..oa + len].iter().zip(&xb[ob..ob + len]).map(|(&x, &y)| f(x, y))),
                (1, 0) => {
                    let y = xb[ob];
                    out.extend(xa[oa..oa + len].iter().map(|&x| f(x, y)))
                }
                (0, 1) => {
                    let x = xa[oa];
                    out.extend(xb[ob..ob + len].iter().map(|&y| f(x, y)))
                }
                _ => out.extend((0..len as isize).map(|i| f(xa[(oa as isize + i * ia) as usize], xb[(ob as isize + i * ib) as usize]))),
            }
        });
    }
    Ok(Array::from_shape_vec(IxDyn(&shape), out).expect("broadcast size"))
}

fn broadcast_array(x: &Array, shape: &[usize]) -> Array {
    let xs = std_slice(x);
    let mut out = Vec::with_capacity(shape.iter().product());
    walk(shape, [broadcast_strides(x.shape(), shape)], |[o], len, [i]| {
        let o = o as usize;
        if i == 1 {
            out.extend_from_slice(&xs[o..o + len]);
        } else if i == 0 {
            out.extend(std::iter::repeat_n(xs[o], len));
        } else {
            out.extend((0..len as isize).map(|j| xs[(o as isize + j * i) as usize]));
        }
    });
    Array::from_shape_vec(IxDyn(shape), out).expect("broadcast size")
}

fn permute_array(x: &Array, axes: &[usize]) -> Array {
    let xs = std_slice(x);
    let own = std_strides(x.shape());
    let shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src: Vec<isize> = axes.iter().map(|&a| own[a]).collect();
    let mut out = Vec::with_capacity(xs.len());
    walk(&shape, [src], |[o], len, [i]| {
        let o = o as usize;
        if i == 1 {
            out.extend_from_slice(&xs[o..o + len]);
        } else {
            out.extend((0..len).map(|j| xs[o + j * i as usize]));
        }
    });
    Array::from_shape_vec(IxDyn(&shape), out).expect("permuted size")
}

/// Sums `x` over the axes broadcast from `shape`.
fn sum_to_array(x: &Array, shape: &[usize]) -> Array {
    let xs = std_slice(x);
    let mut out = vec![0.0; shape.iter().product()];
    let dst = broadcast_strides(shape, x.shape());
    walk(x.shape(), [std_strides(x.shape()), dst], |[ox, oo], len, [ix, io]| {
        let (ox, oo) = (ox as usize, oo as usize);
        match (ix, io) {
            (1, 1) => out[oo..oo + len].iter_mut().zip(&xs[ox..ox + len]).for_each(|(o, &v)| *o += v),
            (1, 0) => out[oo] += xs[ox..ox + len].iter().sum::<f64>(),
            _ => (0..len as isize).for_each(|j| out[(oo as isize + j * io) as usize] += xs[(ox as isize + j * ix) as usize]),
        }
    });
    Array::from_shape_vec(IxDyn(shape), out).expect("reduced size")
}

fn contiguous(x: Array) -> Array {
    if x.is_standard_layout() {
        x
    } else {
        x.as_standard_layout().into_owned()
    }
}

fn contiguous_ref(x: &Array) -> std::borrow::Cow<'_, Array> {
    if x.is_standard_layout() {
        std::borrow::Cow::Borrowed(x)
    } else {
        std::borrow::Cow::Owned(reshape_array(x, x.shape()))
    }
}

fn reshape_array(x: &Array, shape: &[usize]) -> Array {
    Array::from_shape_vec(IxDyn(shape), std_slice(x).into_owned()).expect("reshape with equal size")
}


/// Batched product over the last two axes with identical leading axes, or a
/// shared rank-2 right operand.
fn matmul_array(a: &Array, b: &Array) -> Result<Array> {
    let (ra, rb) = (a.ndim(), b.ndim());
    if ra < 2 || rb < 2 {
        return Err(Error::invalid("matmul needs rank >= 2 operands"));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(Error::invalid(format!(
            "matmul inner mismatch {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if rb == 2 {
        let rows: usize = a.shape()[..ra - 1].iter().product();
        let a_std = contiguous_ref(a);
        let a2 = a_std.view().into_shape_with_order((rows, k)).unwrap();
        let b2 = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let out = a2.dot(&b2);
        let mut shape = a.shape()[..ra - 1].to_vec();
        shape.push(n);
        return Ok(contiguous(out.into_dyn()).into_shape_with_order(IxDyn(&shape)).unwrap());
    }
    if a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(Error::invalid(format!(
            "matmul batch mismatch {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let (a_std, b_std) = (contiguous_ref(a), contiguous_ref(b));
    let a3 = a_std.view().into_shape_with_order((batch, m, k)).unwrap();
    let b3 = b_std.view().into_shape_with_order((batch, k, n)).unwrap();
    let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
    for i in 0..batch {
        ndarray::linalg::general_mat_mul(
            1.0,
            &a3.index_axis(Axis(0), i),
            &b3.index_axis(Axis(0), i),
            0.0,
            &mut out.index_axis_mut(Axis(0), i),
        );
    }
    let mut shape = a.shape()[..ra - 2].to_vec();
    shape.extend([m, n]);
    Ok(out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap())
}

fn normalize_axis(axis: isize, ndim: usize) -> Result<usize> {
    let a = if axis < 0 { ndim as isize + axis } else { axis };
    if a < 0 || a as usize >= ndim {
        return Err(Error::invalid(format!("axis {axis} out of range for rank {ndim}")));
    }
    Ok(a as usize)
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_d1(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn gelu_d2(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp() * (2.0 - x * x)
}

fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// operations

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        backward: impl for<'a> Fn(&BackCtx<'a>) -> Grads<'a> + 'static,
    ) -> Var<'t> {
        let v = self.value().mapv(f);
        self.tape.op(v, &[self], backward)
    }

    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    // -- elementwise binary with broadcasting ------------------------------

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let out = binary_map(&a, &b, |x, y| x + y)?;
        debug_assert_eq!(out.shape(), &shape[..]);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.op(out, &[self, other], move |c| {
            Ok(vec![
                c.needs[0].then(|| c.grad.sum_to(&sa)).transpose()?,
                c.needs[1].then(|| c.grad.sum_to(&sb)).transpose()?,
            ])
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        broadcast_shape(a.shape(), b.shape())?;
        let out = binary_map(&a, &b, |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.op(out, &[self, other], move |c| {
            Ok(vec![
                c.needs[0].then(|| c.grad.sum_to(&sa)).transpose()?,
                c.needs[1].then(|| c.grad.neg().sum_to(&sb)).transpose()?,
            ])
        }))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        broadcast_shape(a.shape(), b.shape())?;
        let out = binary_map(&a, &b, |x, y| x * y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.op(out, &[self, other], move |c| {
            let (x, y) = (c.inputs[0], c.inputs[1]);
            Ok(vec![
                c.needs[0].then(|| c.grad.mul(y)?.sum_to(&sa)).transpose()?,
                c.needs[1].then(|| c.grad.mul(x)?.sum_to(&sb)).transpose()?,
            ])
        }))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        broadcast_shape(a.shape(), b.shape())?;
        let out = binary_map(&a, &b, |x, y| x / y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.op(out, &[self, other], move |c| {
            let (y, out) = (c.inputs[1], c.output);
            let ga = c.needs[0].then(|| c.grad.div(y)?.sum_to(&sa)).transpose()?;
            // d(a/b)/db = -(a/b)/b
            let gb = c.needs[1]
                .then(|| c.grad.mul(out)?.div(y)?.neg().sum_to(&sb))
                .transpose()?;
            Ok(vec![ga, gb])
        }))
    }

    // -- scalar and unary ---------------------------------------------------

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(move |x| x * s, move |c| Ok(vec![Some(c.grad.scale(s))]))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(move |x| x + s, |c| Ok(vec![Some(c.grad)]))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |c| Ok(vec![Some(c.grad.mul(c.output)?)]))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |c| Ok(vec![Some(c.grad.div(c.inputs[0])?)]))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |c| {
            Ok(vec![Some(c.grad.div(c.output)?.scale(0.5))])
        })
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |c| {
            let d = c.output.square().neg().add_scalar(1.0);
            Ok(vec![Some(c.grad.mul(d)?)])
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid_f, |c| {
            let s = c.output;
            let d = s.mul(s.neg().add_scalar(1.0))?;
            Ok(vec![Some(c.grad.mul(d)?)])
        })
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu_f, |c| Ok(vec![Some(c.grad.mul(c.inputs[0].gelu_derivative())?)]))
    }

    /// First derivative of GELU as a tensor op. Its own derivative is
    /// provided, but treated as constant beyond that (third order is never
    /// needed).
    pub fn gelu_derivative(self) -> Var<'t> {
        self.unary(gelu_d1, |c| {
            let d2 = c.tape.constant(c.inputs[0].value().mapv(gelu_d2));
            Ok(vec![Some(c.grad.mul(d2)?)])
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(
            |x| x.max(0.0),
            |c| {
                let step = c
                    .tape
                    .constant(c.inputs[0].value().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                Ok(vec![Some(c.grad.mul(step)?)])
            },
        )
    }

    // -- reductions and broadcasting ----------------------------------------

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Array::from_elem(IxDyn(&[]), x.sum());
        self.tape
            .op(out, &[self], move |c| Ok(vec![Some(c.grad.broadcast_to(&shape)?)]))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(self, axis: isize) -> Result<Var<'t>> {
        let x = self.value();
        let ax = normalize_axis(axis, x.ndim())?;
        let shape = x.shape().to_vec();
        let out = x.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        Ok(self
            .tape
            .op(out, &[self], move |c| Ok(vec![Some(c.grad.broadcast_to(&shape)?)])))
    }

    pub fn mean_axis(self, axis: isize) -> Result<Var<'t>> {
        let x = self.value();
        let ax = normalize_axis(axis, x.ndim())?;
        let n = x.shape()[ax].max(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let src = x.shape().to_vec();
        if broadcast_shape(&src, shape)? != shape {
            return Err(Error::invalid(format!("cannot broadcast {src:?} to {shape:?}")));
        }
        let out = broadcast_array(&x, shape);
        Ok(self
            .tape
            .op(out, &[self], move |c| Ok(vec![Some(c.grad.sum_to(&src)?)])))
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape() == shape {
            return Ok(self);
        }
        let src = x.shape().to_vec();
        if broadcast_shape(shape, &src)? != src {
            return Err(Error::invalid(format!("cannot sum {src:?} down to {shape:?}")));
        }
        let out = sum_to_array(&x, shape);
        Ok(self
            .tape
            .op(out, &[self], move |c| Ok(vec![Some(c.grad.broadcast_to(&src)?)])))
    }

    // -- shape ----------------------------------------------------------------

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} to {shape:?}",
                x.shape()
            )));
        }
        let src = x.shape().to_vec();
        let out = reshape_array(&x, shape);
        Ok(self
            .tape
            .op(out, &[self], move |c| Ok(vec![Some(c.grad.reshape(&src)?)])))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.ndim()];
        if axes.len() != x.ndim()
            || axes.iter().any(|&a| a >= x.ndim() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::invalid(format!("bad permutation {axes:?}")));
        }
        let out = permute_array(&x, axes);
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        Ok(self
            .tape
            .op(out, &[self], move |c| Ok(vec![Some(c.grad.permute(&inv)?)])))
    }

    /// Swaps the last two axes.
    pub fn t(self) -> Result<Var<'t>> {
        let nd = self.value().ndim();
        if nd < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    pub fn concat(parts: &[Var<'t>], axis: isize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let nd = first.value().ndim();
        let ax = normalize_axis(axis, nd)?;
        let values: Vec<Rc<Array>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(ax), &views)
            .map_err(|e| Error::invalid(format!("concat: {e}")))?;
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[ax]).collect();
        Ok(first.tape.op(out, parts, move |c| {
            let mut start = 0;
            let mut gs = Vec::with_capacity(lens.len());
            for (i, &len) in lens.iter().enumerate() {
                gs.push(c.needs[i].then(|| c.grad.slice(ax as isize, start, start + len)).transpose()?);
                start += len;
            }
            Ok(gs)
        }))
    }

    pub fn slice(self, axis: isize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        let ax = normalize_axis(axis, x.ndim())?;
        let total = x.shape()[ax];
        if start > end || end > total {
            return Err(Error::invalid(format!("slice {start}..{end} of length {total}")));
        }
        let out = x
            .slice_axis(Axis(ax), ndarray::Slice::from(start..end))
            .to_owned();
        Ok(self.tape.op(out, &[self], move |c| {
            Ok(vec![Some(c.grad.pad_axis(ax as isize, start, total)?)])
        }))
    }

    /// Embeds `self` at offset `start` of a zero tensor whose `axis` has
    /// length `total`. Adjoint of [`Var::slice`].
    pub fn pad_axis(self, axis: isize, start: usize, total: usize) -> Result<Var<'t>> {
        let x = self.value();
        let ax = normalize_axis(axis, x.ndim())?;
        let len = x.shape()[ax];
        if start + len > total {
            return Err(Error::invalid("pad_axis overflow"));
        }
        let mut shape = x.shape().to_vec();
        shape[ax] = total;
        let mut out = Array::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(ax), ndarray::Slice::from(start..start + len))
            .assign(&*x);
        Ok(self.tape.op(out, &[self], move |c| {
            Ok(vec![Some(c.grad.slice(ax as isize, start, start + len)?)])
        }))
    }

    // -- products -------------------------------------------------------------

    /// Batched matrix product (see module docs for accepted shapes).
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = matmul_array(&a, &b)?;
        let a_shape = a.shape().to_vec();
        let shared = b.ndim() == 2;
        Ok(self.tape.op(out, &[self, other], move |c| {
            let (x, w) = (c.inputs[0], c.inputs[1]);
            let ga = c.needs[0].then(|| c.grad.matmul(w.t()?)).transpose()?;
            let gb = if !c.needs[1] {
                None
            } else if shared {
                let k = a_shape[a_shape.len() - 1];
                let rows: usize = a_shape[..a_shape.len() - 1].iter().product();
                let g = c.grad;
                let n = *g.shape().last().unwrap();
                Some(x.reshape(&[rows, k])?.t()?.matmul(g.reshape(&[rows, n])?)?)
            } else {
                Some(x.t()?.matmul(c.grad)?)
            };
            Ok(vec![ga, gb])
        }))
    }

    /// `X Xᵀ` over the last two axes.
    pub fn outer(self) -> Result<Var<'t>> {
        self.matmul(self.t()?)
    }

    // -- indexing -------------------------------------------------------------

    /// Permutes the last axis independently per leading row:
    /// `out[r, i] = x[r, perms[r][i]]`.
    pub fn gather_last(self, perms: &[Vec<usize>]) -> Result<Var<'t>> {
        let x = self.value();
        let m = *x.shape().last().ok_or_else(|| Error::invalid("gather on scalar"))?;
        let rows = x.len() / m.max(1);
        if perms.len() != rows || perms.iter().any(|p| p.len() != m) {
            return Err(Error::invalid("gather_last: permutation shape mismatch"));
        }
        let flat = reshape_array(&x, &[rows, m]);
        let mut out = Array::zeros(IxDyn(&[rows, m]));
        let mut inv = vec![vec![0; m]; rows];
        for r in 0..rows {
            for i in 0..m {
                let j = perms[r][i];
                if j >= m {
                    return Err(Error::invalid("gather_last: index out of range"));
                }
                out[[r, i]] = flat[[r, j]];
                inv[r][j] = i;
            }
        }
        let shape = x.shape().to_vec();
        let out = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        Ok(self.tape.op(out, &[self], move |c| {
            Ok(vec![Some(c.grad.gather_last(&inv)?)])
        }))
    }

    // -- 1D convolution support ---------------------------------------------

    /// `[B, C, L]` → `[B, L_out, C·K]` patches with zero padding `pad` on both
    /// sides and the given stride.
    pub fn unfold1d(self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 3 || stride == 0 || kernel == 0 {
            return Err(Error::invalid("unfold1d needs [B, C, L], kernel > 0, stride > 0"));
        }
        let (b, ch, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if len + 2 * pad < kernel {
            return Err(Error::invalid(format!(
                "kernel {kernel} longer than padded input {}",
                len + 2 * pad
            )));
        }
        let lout = (len + 2 * pad - kernel) / stride + 1;
        let mut out = Array::zeros(IxDyn(&[b, lout, ch * kernel]));
        for bi in 0..b {
            for t in 0..lout {
                for c in 0..ch {
                    for j in 0..kernel {
                        let pos = (t * stride + j) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < len {
                            out[[bi, t, c * kernel + j]] = x[[bi, c, pos as usize]];
                        }
                    }
                }
            }
        }
        Ok(self.tape.op(out, &[self], move |c| {
            Ok(vec![Some(c.grad.fold1d(ch, len, kernel, stride, pad)?)])
        }))
    }

    /// Adjoint of [`Var::unfold1d`]: scatters patches back onto `[B, C, L]`.
    pub fn fold1d(
        self,
        channels: usize,
        len: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let g = self.value();
        if g.ndim() != 3 || g.shape()[2] != channels * kernel {
            return Err(Error::invalid("fold1d shape mismatch"));
        }
        let (b, lout) = (g.shape()[0], g.shape()[1]);
        let mut out = Array::zeros(IxDyn(&[b, channels, len]));
        for bi in 0..b {
            for t in 0..lout {
                for c in 0..channels {
                    for j in 0..kernel {
                        let pos = (t * stride + j) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < len {
                            out[[bi, c, pos as usize]] += g[[bi, t, c * kernel + j]];
                        }
                    }
                }
            }
        }
        Ok(self.tape.op(out, &[self], move |c| {
            Ok(vec![Some(c.grad.unfold1d(kernel, stride, pad)?)])
        }))
    }

    // -- composites -------------------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let shift = {
            let x = self.value();
            let nd = x.ndim();
            let mx = x.map_axis(Axis(nd - 1), |r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
            self.tape.constant(mx.insert_axis(Axis(nd - 1)))
        };
        let e = self.sub(shift)?.exp();
        e.div(e.sum_axis(-1)?)
    }

    /// Layer normalization over the last axis (no affine part).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let mu = self.mean_axis(-1)?;
        let xc = self.sub(mu)?;
        let var = xc.square().mean_axis(-1)?;
        xc.div(var.add_scalar(eps).sqrt())
    }

    /// Lower-triangular part of the last two axes, diagonal excluded.
    pub fn tril_strict(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let nd = shape.len();
        if nd < 2 || shape[nd - 1] != shape[nd - 2] {
            return Err(Error::invalid("tril_strict needs square trailing axes"));
        }
        let n = shape[nd - 1];
        let mask = Array::from_shape_fn(IxDyn(&[n, n]), |ix| if ix[0] > ix[1] { 1.0 } else { 0.0 });
        self.mul(self.tape.constant(mask))
    }

    /// Elementwise multiplication by an inverted-dropout mask drawn from `rng`.
    pub fn dropout(self, rate: f64, rng: &mut impl rand::Rng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(self);
        }
        let keep = 1.0 - rate;
        let mask = Array::from_shape_simple_fn(IxDyn(&self.shape()), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.mul(self.tape.constant(mask))
    }

    /// Matrix exponential over the last two axes by scaling and squaring
    /// with the Taylor degree from [`crate::linalg::tol`]. The number of
    /// squarings is chosen from the value and is not differentiated.
    pub fn matrix_exp(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let nd = shape.len();
        if nd < 2 || shape[nd - 1] != shape[nd - 2] {
            return Err(Error::invalid("matrix_exp needs square trailing axes"));
        }
        let n = shape[nd - 1];
        let x = self.value();
        let norm = x
            .to_shape(IxDyn(&[x.len() / (n * n).max(1), n, n]))
            .unwrap()
            .outer_iter()
            .map(|m| {
                let m = m.into_dimensionality::<ndarray::Ix2>().unwrap();
                crate::linalg::one_norm(m)
            })
            .fold(0.0, f64::max);
        let j = crate::linalg::exp_squarings(norm);
        let xs = self.scale(1.0 / 2f64.powi(j as i32));
        let eye = self
            .tape
            .constant(Array::from_shape_fn(IxDyn(&[n, n]), |ix| (ix[0] == ix[1]) as u8 as f64));
        let mut r = eye.broadcast_to(&shape)?;
        for t in (1..=crate::linalg::tol::EXP_TAYLOR_TERMS).rev() {
            r = xs.matmul(r)?.scale(1.0 / t as f64).add(eye)?;
        }
        for _ in 0..j {
            r = r.matmul(r)?;
        }
        Ok(r)
    }
}

/// Maximum over coordinates of `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`
/// for a scalar function, using central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Array, h: f64) -> Result<f64>
where
    F: for<'a> Fn(Var<'a>) -> Result<Var<'a>>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(xv)?;
    let analytic = (*tape.grad(y, &[xv], false)?[0].value()).clone();
    let eval = |p: &Array| -> Result<f64> {
        let t = Tape::new();
        let v = t.param(p.clone());
        Ok(f(v)?.item())
    };
    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice_memory_order().unwrap()[i];
        probe.as_slice_memory_order_mut().unwrap()[i] = orig + h;
        let up = eval(&probe)?;
        probe.as_slice_memory_order_mut().unwrap()[i] = orig - h;
        let down = eval(&probe)?;
        probe.as_slice_memory_order_mut().unwrap()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.as_slice_memory_order().unwrap()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Elementwise comparison helper for tests and diagnostics.
pub fn max_abs_diff(a: &Array, b: &Array) -> f64 {
    assert_eq!(a.shape(), b.shape());
    Zip::from(a).and(b).fold(0.0, |m, x, y| m.max((x - y).abs()))
}
