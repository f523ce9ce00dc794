//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] walks the nodes in reverse insertion order, which
//! is a valid reverse topological order because a node can only reference
//! nodes recorded before it.
//!
//! Every value is a 2-D `f64` matrix; vectors are `1×d` rows or `n×1`
//! columns and scalars are `1×1`. Broadcasting exists only for
//! [`Tape::mul_bcast`] and [`Tape::add_bcast`], where the right operand is a
//! per-row column, a per-column row, or a scalar.

use std::cell::{Cell, Ref, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng as _;

use super::params::ParameterStore;
use super::rng::Rng;
use super::sparse::SparseMatrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Affine { x: Var, scale: f64 },
    MatMul(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Array2<f64>>),
    MulBcast(Var, Var),
    AddBcast(Var, Var),
    Concat(Vec<Var>),
    SelectCol(Var, usize),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColSum(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Recip(Var),
    Gather(Var, Rc<Vec<usize>>),
    Spmm(Rc<SparseMatrix>, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "constant",
            Op::Param(_) => "parameter",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Affine { .. } => "affine",
            Op::MatMul(..) => "matmul",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::MulBcast(..) => "mul_bcast",
            Op::AddBcast(..) => "add_bcast",
            Op::Concat(..) => "concat",
            Op::SelectCol(..) => "select_col",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::ColSum(..) => "col_sum",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Log(..) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Recip(..) => "recip",
            Op::Gather(..) => "gather",
            Op::Spmm(..) => "spmm",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a loss with respect to named parameters.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_name: BTreeMap<String, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    /// Overwrites every gradient slot in `store`; parameters absent from the
    /// tape (including frozen ones) get zeros.
    pub fn write_to(&self, store: &mut ParameterStore) {
        for (name, param) in store.iter_mut() {
            match self.by_name.get(name) {
                Some(g) if !param.frozen => param.grad.assign(g),
                _ => param.grad.fill(0.0),
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    poisoned: Cell<Option<&'static str>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        if self.poisoned.get().is_none() && !value.iter().all(|x| x.is_finite()) {
            self.poisoned.set(Some(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Borrow of a node's value. Do not hold across further recording calls.
    pub fn value(&self, v: Var) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.dim(), (1, 1), "scalar() on a non-scalar node");
        value[[0, 0]]
    }

    /// Errors if any recorded value so far is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.poisoned.get() {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a parameter from `store`. Frozen parameters become constants.
    pub fn param(&self, store: &ParameterStore, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        if p.frozen {
            Ok(self.push(p.value.clone(), Op::Leaf, false))
        } else {
            Ok(self.push(p.value.clone(), Op::Param(name.to_string()), true))
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), y.dim(), "add shape");
            &*x + &*y
        };
        self.push(value, Op::Add(a, b), self.needs(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), y.dim(), "sub shape");
            &*x - &*y
        };
        self.push(value, Op::Sub(a, b), self.needs(&[a, b]))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).mapv(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, self.needs(&[x]))
    }

    pub fn scale(&self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Sum of several same-shape nodes.
    pub fn add_all(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_all of nothing");
        vars[1..].iter().fold(vars[0], |acc, &v| self.add(acc, v))
    }

    /// Elementwise mean of several same-shape nodes.
    pub fn mean_all(&self, vars: &[Var]) -> Var {
        let total = self.add_all(vars);
        self.scale(total, 1.0 / vars.len() as f64)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.ncols(), y.nrows(), "matmul shape");
            x.dot(&*y)
        };
        self.push(value, Op::MatMul(a, b), self.needs(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.dim(), y.dim(), "mul shape");
            &*x * &*y
        };
        self.push(value, Op::Mul(a, b), self.needs(&[a, b]))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&self, a: Var, c: Rc<Array2<f64>>) -> Var {
        let value = {
            let x = self.value(a);
            assert_eq!(x.dim(), c.dim(), "mul_const shape");
            &*x * &*c
        };
        self.push(value, Op::MulConst(a, c), self.needs(&[a]))
    }

    /// `a ⊙ b` where `b` is `n×1`, `1×d` or `1×1`.
    pub fn mul_bcast(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            check_bcast(x.dim(), y.dim(), "mul_bcast");
            &*x * &*y
        };
        self.push(value, Op::MulBcast(a, b), self.needs(&[a, b]))
    }

    /// `a + b` where `b` is `n×1`, `1×d` or `1×1`.
    pub fn add_bcast(&self, a: Var, b: Var) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            check_bcast(x.dim(), y.dim(), "add_bcast");
            &*x + &*y
        };
        self.push(value, Op::AddBcast(a, b), self.needs(&[a, b]))
    }

    /// Column-wise concatenation `[a ∥ b ∥ …]`.
    pub fn concat(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "concat of nothing");
        let value = {
            let views: Vec<_> = vars.iter().map(|&v| self.value(v)).collect();
            let rows = views[0].nrows();
            assert!(views.iter().all(|v| v.nrows() == rows), "concat rows");
            let cols = views.iter().map(|v| v.ncols()).sum();
            let mut out = Array2::zeros((rows, cols));
            let mut at = 0;
            for v in &views {
                out.slice_mut(s![.., at..at + v.ncols()]).assign(&**v);
                at += v.ncols();
            }
            out
        };
        self.push(value, Op::Concat(vars.to_vec()), self.needs(vars))
    }

    /// Column `j` as an `n×1` node.
    pub fn select_col(&self, x: Var, j: usize) -> Var {
        let value = self.value(x).slice(s![.., j..j + 1]).to_owned();
        self.push(value, Op::SelectCol(x, j), self.needs(&[x]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum(x), self.needs(&[x]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let value = {
            let v = self.value(x);
            Array2::from_elem((1, 1), v.sum() / v.len() as f64)
        };
        self.push(value, Op::Mean(x), self.needs(&[x]))
    }

    /// Per-row sums, `n×d → n×1`.
    pub fn row_sum(&self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(x), self.needs(&[x]))
    }

    /// Per-column sums, `n×d → 1×d`.
    pub fn col_sum(&self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::ColSum(x), self.needs(&[x]))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x), self.needs(&[x]))
    }

    pub fn relu(&self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(x), self.needs(&[x]))
    }

    pub fn log(&self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        self.push(value, Op::Log(x), self.needs(&[x]))
    }

    /// Elementwise clamp; the gradient is zero where the input is clipped.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).mapv(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { x, lo, hi }, self.needs(&[x]))
    }

    pub fn recip(&self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 / v);
        self.push(value, Op::Recip(x), self.needs(&[x]))
    }

    /// Row gather; the gradient scatters back onto the gathered rows.
    pub fn gather(&self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let value = {
            let v = self.value(x);
            let mut out = Array2::zeros((idx.len(), v.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                if i >= v.nrows() {
                    return Err(Error::OutOfRange {
                        what: "gather rows",
                        index: i,
                        len: v.nrows(),
                    });
                }
                out.row_mut(r).assign(&v.row(i));
            }
            out
        };
        Ok(self.push(value, Op::Gather(x, idx), self.needs(&[x])))
    }

    /// Constant sparse operator applied on the left: `m · x`.
    pub fn spmm(&self, m: Rc<SparseMatrix>, x: Var) -> Var {
        let value = m.matmul(&self.value(x));
        self.push(value, Op::Spmm(m, x), self.needs(&[x]))
    }

    /// Inverted dropout: during training each entry survives with
    /// probability `keep_prob` and is scaled by `1 / keep_prob`.
    pub fn dropout(&self, x: Var, keep_prob: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        validate_keep_prob(keep_prob)?;
        if !training || keep_prob == 1.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).raw_dim(), keep_prob, rng);
        Ok(self.mul_const(x, Rc::new(mask)))
    }

    /// Gradients of `loss` with respect to every unfrozen parameter on the
    /// tape. `loss` is seeded with ones, so for a `1×1` loss this is ∂loss/∂θ.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(nodes[loss.0].value.raw_dim()));
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |v: Var, delta: Array2<f64>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot => *slot = Some(delta),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => match out.by_name.get_mut(name) {
                    Some(existing) => *existing += &g,
                    None => {
                        out.by_name.insert(name.clone(), g);
                    }
                },
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Affine { x, scale } => acc(*x, g * *scale),
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&val(*b).t()));
                    acc(*b, val(*a).t().dot(&g));
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * val(*b));
                    acc(*b, &g * val(*a));
                }
                Op::MulConst(a, c) => acc(*a, &g * &**c),
                Op::MulBcast(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    acc(*a, &g * y);
                    acc(*b, reduce_to(&g * x, y.dim()));
                }
                Op::AddBcast(a, b) => {
                    let dim = val(*b).dim();
                    acc(*a, g.clone());
                    acc(*b, reduce_to(g, dim));
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::SelectCol(x, j) => {
                    let mut d = Array2::zeros(val(*x).raw_dim());
                    d.slice_mut(s![.., *j..*j + 1]).assign(&g);
                    acc(*x, d);
                }
                Op::Sum(x) => acc(*x, Array2::from_elem(val(*x).raw_dim(), g[[0, 0]])),
                Op::Mean(x) => {
                    let n = val(*x).len() as f64;
                    acc(*x, Array2::from_elem(val(*x).raw_dim(), g[[0, 0]] / n));
                }
                Op::RowSum(x) | Op::ColSum(x) => {
                    let d = Array2::zeros(val(*x).raw_dim()) + &g;
                    acc(*x, d);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let mut d = g;
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(*x, d);
                }
                Op::Relu(x) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(val(*x))
                        .for_each(|d, &v| *d = if v > 0.0 { *d } else { 0.0 });
                    acc(*x, d);
                }
                Op::Log(x) => acc(*x, g / val(*x)),
                Op::Clamp { x, lo, hi } => {
                    let mut d = g;
                    Zip::from(&mut d).and(val(*x)).for_each(|d, &v| {
                        if v < *lo || v > *hi {
                            *d = 0.0;
                        }
                    });
                    acc(*x, d);
                }
                Op::Recip(x) => {
                    let y = &node.value;
                    acc(*x, -(g * y * y));
                }
                Op::Gather(x, idx) => {
                    let mut d = Array2::zeros(val(*x).raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        d.row_mut(i).scaled_add(1.0, &g.row(r));
                    }
                    acc(*x, d);
                }
                Op::Spmm(m, x) => {
                    let mut d = Array2::zeros(val(*x).raw_dim());
                    m.transpose_matmul_into(&g, &mut d);
                    acc(*x, d);
                }
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_bcast(lhs: (usize, usize), rhs: (usize, usize), op: &'static str) {
    let ok = rhs == (lhs.0, 1) || rhs == (1, lhs.1) || rhs == (1, 1);
    assert!(ok, "{op}: cannot broadcast {rhs:?} onto {lhs:?}");
}

fn reduce_to(g: Array2<f64>, dim: (usize, usize)) -> Array2<f64> {
    if g.dim() == dim {
        return g;
    }
    let g = if dim.0 == 1 {
        g.sum_axis(Axis(0)).insert_axis(Axis(0))
    } else {
        g
    };
    if dim.1 == 1 && g.ncols() != 1 {
        g.sum_axis(Axis(1)).insert_axis(Axis(1))
    } else {
        g
    }
}

fn validate_keep_prob(keep_prob: f64) -> Result<()> {
    if keep_prob > 0.0 && keep_prob <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "keep_prob must lie in (0, 1], got {keep_prob}"
        )))
    }
}

fn dropout_mask(dim: ndarray::Ix2, keep_prob: f64, rng: &mut Rng) -> Array2<f64> {
    let scale = 1.0 / keep_prob;
    Array2::from_shape_simple_fn(dim, || {
        if rng.gen::<f64>() < keep_prob {
            scale
        } else {
            0.0
        }
    })
}

/// Inverted dropout on a plain array; identity outside training.
pub fn dropout(
    values: &Array2<f64>,
    keep_prob: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    validate_keep_prob(keep_prob)?;
    if !training || keep_prob == 1.0 {
        return Ok(values.clone());
    }
    Ok(values * &dropout_mask(values.raw_dim(), keep_prob, rng))
}
