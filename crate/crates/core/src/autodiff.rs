//! Tape-based reverse-mode differentiation over [`Tensor2D`] values.
//!
//! Every operation appends a node to a [`Tape`]; because a node can only
//! refer to nodes recorded before it, tape order is already a topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! The primitive set is deliberately small: it covers exactly what the
//! attention layer, the recurrent cells, the output heads and the losses
//! need. [`finite_diff_grad`] is the independent central-difference oracle
//! used to check the analytic gradients.

use std::cell::RefCell;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_acc, matmul_tn_acc, Tensor2D};

/// Default step for central differences at 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

/// A primitive operation together with its non-tensor arguments.
#[derive(Clone, Debug)]
pub enum Primitive {
    MatMul,
    /// Elementwise sum with 2-D broadcasting (a dimension of 1 stretches).
    Add,
    /// Elementwise difference with the same broadcasting rule as `Add`.
    Sub,
    Mul,
    Div,
    ConcatCols,
    SliceCols { start: usize, end: usize },
    Transpose,
    LeakyRelu { slope: f64 },
    Elu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
    /// Weighted sum of all entries; weights are usually a 0/1 mask. Yields 1x1.
    MaskedSum { weights: Arc<Tensor2D> },
    Scale { factor: f64 },
    AddScalar { value: f64 },
    /// Softmax along each row restricted to `mask == true`; excluded positions
    /// behave as -inf logits and come out as exact zeros.
    RowSoftmaxMasked { mask: Arc<Vec<bool>> },
}

impl Primitive {
    pub fn tag(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "elementwise-multiply",
            Primitive::Div => "elementwise-divide",
            Primitive::ConcatCols => "concat-cols",
            Primitive::SliceCols { .. } => "slice-cols",
            Primitive::Transpose => "transpose",
            Primitive::LeakyRelu { .. } => "leaky-relu",
            Primitive::Elu => "elu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Softplus => "softplus",
            Primitive::MaskedSum { .. } => "masked-sum",
            Primitive::Scale { .. } => "scalar-scale",
            Primitive::AddScalar { .. } => "add-scalar",
            Primitive::RowSoftmaxMasked { .. } => "row-softmax-masked",
        }
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor2D, b: &Tensor2D) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::shape(
            op,
            format!("cannot broadcast {}x{} with {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        )),
    }
}

#[inline]
fn bget(t: &Tensor2D, i: usize, j: usize) -> f64 {
    let r = if t.rows() == 1 { 0 } else { i };
    let c = if t.cols() == 1 { 0 } else { j };
    t[(r, c)]
}

/// Sums `g` down to `shape`, undoing a broadcast.
fn reduce_to(g: &Tensor2D, shape: (usize, usize)) -> Tensor2D {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor2D::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let r = if shape.0 == 1 { 0 } else { i };
            let c = if shape.1 == 1 { 0 } else { j };
            out[(r, c)] += g[(i, j)];
        }
    }
    out
}

fn expect_arity(op: &Primitive, inputs: &[&Tensor2D], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(op.tag(), format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

/// Evaluates one primitive on concrete inputs.
pub fn primitive_forward(op: &Primitive, inputs: &[&Tensor2D]) -> Result<Tensor2D> {
    use Primitive::*;
    match op {
        MatMul => {
            expect_arity(op, inputs, 2)?;
            inputs[0].matmul(inputs[1])
        }
        Add | Sub => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (r, c) = broadcast_shape(op.tag(), a, b)?;
            let sign = if matches!(op, Add) { 1.0 } else { -1.0 };
            Ok(Tensor2D::from_fn(r, c, |i, j| bget(a, i, j) + sign * bget(b, i, j)))
        }
        Mul | Div => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            a.expect_same_shape(op.tag(), b)?;
            if matches!(op, Mul) {
                a.zip_map(b, |x, y| x * y)
            } else {
                a.zip_map(b, |x, y| x / y)
            }
        }
        ConcatCols => {
            let Some(first) = inputs.first() else {
                return Err(Error::shape(op.tag(), "no inputs"));
            };
            let rows = first.rows();
            if let Some(bad) = inputs.iter().find(|t| t.rows() != rows) {
                return Err(Error::shape(
                    op.tag(),
                    format!("row counts differ: {} vs {}", rows, bad.rows()),
                ));
            }
            let cols: usize = inputs.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for t in inputs {
                    data.extend_from_slice(t.row(i));
                }
            }
            Tensor2D::from_vec(rows, cols, data)
        }
        SliceCols { start, end } => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            if start >= end || *end > x.cols() {
                return Err(Error::shape(
                    op.tag(),
                    format!("range {start}..{end} out of bounds for {}x{}", x.rows(), x.cols()),
                ));
            }
            Ok(Tensor2D::from_fn(x.rows(), end - start, |i, j| x[(i, start + j)]))
        }
        Transpose => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].transpose())
        }
        LeakyRelu { slope } => unary(op, inputs, |x| leaky_relu(x, *slope)),
        Elu => unary(op, inputs, elu),
        Sigmoid => unary(op, inputs, sigmoid),
        Tanh => unary(op, inputs, f64::tanh),
        Exp => unary(op, inputs, f64::exp),
        Log => unary(op, inputs, f64::ln),
        Softplus => unary(op, inputs, softplus),
        Scale { factor } => unary(op, inputs, |x| factor * x),
        AddScalar { value } => unary(op, inputs, |x| x + value),
        MaskedSum { weights } => {
            expect_arity(op, inputs, 1)?;
            inputs[0].expect_same_shape(op.tag(), weights)?;
            let s = inputs[0]
                .as_slice()
                .iter()
                .zip(weights.as_slice())
                .filter(|(_, &w)| w != 0.0)
                .map(|(x, w)| x * w)
                .sum();
            Ok(Tensor2D::scalar(s))
        }
        RowSoftmaxMasked { mask } => {
            expect_arity(op, inputs, 1)?;
            let x = inputs[0];
            if mask.len() != x.len() {
                return Err(Error::shape(
                    op.tag(),
                    format!("mask has {} entries for a {}x{} input", mask.len(), x.rows(), x.cols()),
                ));
            }
            let c = x.cols();
            let mut out = Tensor2D::zeros(x.rows(), c);
            for i in 0..x.rows() {
                let row = x.row(i);
                let m = &mask[i * c..(i + 1) * c];
                let max = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &keep)| keep)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut denom = 0.0;
                for j in 0..c {
                    if m[j] {
                        let e = (row[j] - max).exp();
                        out[(i, j)] = e;
                        denom += e;
                    }
                }
                for j in 0..c {
                    out[(i, j)] /= denom;
                }
            }
            Ok(out)
        }
    }
}

fn unary(op: &Primitive, inputs: &[&Tensor2D], f: impl Fn(f64) -> f64) -> Result<Tensor2D> {
    expect_arity(op, inputs, 1)?;
    Ok(inputs[0].map(f))
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor2D,
    op: Option<Primitive>,
    parents: Vec<Var>,
    requires_grad: bool,
}

/// Records a forward computation for one backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
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

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&self, value: Tensor2D) -> Var {
        self.push(Node { value, op: None, parents: Vec::new(), requires_grad: true })
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor2D) -> Var {
        self.push(Node { value, op: None, parents: Vec::new(), requires_grad: false })
    }

    pub fn param(&self, p: &Parameter) -> Var {
        self.variable(p.value.clone())
    }

    pub fn value(&self, v: Var) -> Tensor2D {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Applies `op` to previously recorded nodes.
    pub fn apply(&self, op: Primitive, parents: &[Var]) -> Result<Var> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let inputs: Vec<&Tensor2D> = parents.iter().map(|p| &nodes[p.0].value).collect();
            let value = primitive_forward(&op, &inputs)?;
            (value, parents.iter().any(|p| nodes[p.0].requires_grad))
        };
        Ok(self.push(Node { value, op: Some(op), parents: parents.to_vec(), requires_grad }))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatCols, parts)
    }

    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::SliceCols { start, end }, &[x])
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[x])
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Result<Var> {
        self.apply(Primitive::LeakyRelu { slope }, &[x])
    }

    pub fn elu(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Elu, &[x])
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn softplus(&self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[x])
    }

    pub fn masked_sum(&self, x: Var, weights: Arc<Tensor2D>) -> Result<Var> {
        self.apply(Primitive::MaskedSum { weights }, &[x])
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        self.masked_sum(x, Arc::new(Tensor2D::ones(r, c)))
    }

    pub fn scale(&self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Primitive::Scale { factor }, &[x])
    }

    pub fn add_scalar(&self, x: Var, value: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar { value }, &[x])
    }

    pub fn row_softmax_masked(&self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        self.apply(Primitive::RowSoftmaxMasked { mask }, &[x])
    }

    /// Reverse sweep from a 1x1 root. Each node is visited exactly once.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.0].value.shape();
        if root_shape != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("root must be 1x1, got {}x{}", root_shape.0, root_shape.1),
            ));
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor2D::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor2D> = node.parents.iter().map(|p| &nodes[p.0].value).collect();
            let local = local_grads(op, &inputs, &node.value, &g);
            for (parent, pg) in node.parents.iter().zip(local) {
                if !nodes[parent.0].requires_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[parent.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // keep intermediate gradients only for leaves
            if node.op.is_some() {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Vector-Jacobian products of one primitive, one entry per input.
fn local_grads(
    op: &Primitive,
    inputs: &[&Tensor2D],
    out: &Tensor2D,
    g: &Tensor2D,
) -> Vec<Option<Tensor2D>> {
    use Primitive::*;
    let pointwise = |deriv: &dyn Fn(f64, f64) -> f64| {
        let x = inputs[0];
        let data = x
            .as_slice()
            .iter()
            .zip(out.as_slice())
            .zip(g.as_slice())
            .map(|((&xv, &yv), &gv)| gv * deriv(xv, yv))
            .collect();
        vec![Some(Tensor2D::from_vec(x.rows(), x.cols(), data).expect("same shape"))]
    };
    match op {
        MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let mut ga = Tensor2D::zeros(a.rows(), a.cols());
            matmul_nt_acc(&mut ga, g, b);
            let mut gb = Tensor2D::zeros(b.rows(), b.cols());
            matmul_tn_acc(&mut gb, a, g);
            vec![Some(ga), Some(gb)]
        }
        Add => vec![Some(reduce_to(g, inputs[0].shape())), Some(reduce_to(g, inputs[1].shape()))],
        Sub => {
            let gb = reduce_to(g, inputs[1].shape()).map(|v| -v);
            vec![Some(reduce_to(g, inputs[0].shape())), Some(gb)]
        }
        Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = g.zip_map(b, |gv, bv| gv * bv).expect("same shape");
            let gb = g.zip_map(a, |gv, av| gv * av).expect("same shape");
            vec![Some(ga), Some(gb)]
        }
        Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = g.zip_map(b, |gv, bv| gv / bv).expect("same shape");
            let gb = Tensor2D::from_fn(b.rows(), b.cols(), |i, j| {
                let bv = b[(i, j)];
                -g[(i, j)] * a[(i, j)] / (bv * bv)
            });
            vec![Some(ga), Some(gb)]
        }
        ConcatCols => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let c = t.cols();
                    let part = Tensor2D::from_fn(t.rows(), c, |i, j| g[(i, offset + j)]);
                    offset += c;
                    Some(part)
                })
                .collect()
        }
        SliceCols { start, end } => {
            let x = inputs[0];
            let mut gx = Tensor2D::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                for j in *start..*end {
                    gx[(i, j)] = g[(i, j - start)];
                }
            }
            vec![Some(gx)]
        }
        Transpose => vec![Some(g.transpose())],
        LeakyRelu { slope } => pointwise(&|x, _| if x > 0.0 { 1.0 } else { *slope }),
        Elu => pointwise(&|x, y| if x > 0.0 { 1.0 } else { y + 1.0 }),
        Sigmoid => pointwise(&|_, y| y * (1.0 - y)),
        Tanh => pointwise(&|_, y| 1.0 - y * y),
        Exp => pointwise(&|_, y| y),
        Log => pointwise(&|x, _| 1.0 / x),
        Softplus => pointwise(&|x, _| sigmoid(x)),
        Scale { factor } => vec![Some(g.map(|v| factor * v))],
        AddScalar { .. } => vec![Some(g.clone())],
        MaskedSum { weights } => {
            let s = g.item().expect("masked-sum output is 1x1");
            vec![Some(weights.map(|w| w * s))]
        }
        RowSoftmaxMasked { mask } => {
            let c = out.cols();
            let mut gx = Tensor2D::zeros(out.rows(), c);
            for i in 0..out.rows() {
                let y = out.row(i);
                let gr = g.row(i);
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    if mask[i * c + j] {
                        gx[(i, j)] = y[j] * (gr[j] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
    }
}

/// Gradients of a root with respect to every leaf that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    /// `None` when `v` does not influence the root (or is a constant).
    pub fn get(&self, v: Var) -> Option<&Tensor2D> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// A named trainable tensor plus its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor2D,
    pub grad: Tensor2D,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor2D) -> Self {
        let grad = Tensor2D::zeros(value.rows(), value.cols());
        Self { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds the gradient recorded for `var` (if any) into the accumulator.
    pub fn accumulate(&mut self, grads: &Gradients, var: Var) {
        if let Some(g) = grads.get(var) {
            self.grad.add_assign(g);
        }
    }
}

/// Central differences `(f(p+h) - f(p-h)) / 2h` for every coordinate of
/// every tensor in `params`. Coordinates are evaluated in parallel; each
/// worker perturbs its own copy of the parameters.
pub fn finite_diff_grad<F>(f: F, params: &[Tensor2D], h: f64) -> Result<Vec<Tensor2D>>
where
    F: Fn(&[Tensor2D]) -> f64 + Sync,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let values: Vec<Result<f64>> = coords
        .par_iter()
        .map_init(
            || params.to_vec(),
            |local, &(p, i)| {
                let orig = local[p].as_slice()[i];
                local[p].as_mut_slice()[i] = orig + h;
                let plus = f(local);
                local[p].as_mut_slice()[i] = orig - h;
                let minus = f(local);
                local[p].as_mut_slice()[i] = orig;
                if plus.is_finite() && minus.is_finite() {
                    Ok((plus - minus) / (2.0 * h))
                } else {
                    Err(Error::NonFiniteProbe { param: p, index: i })
                }
            },
        )
        .collect();
    let mut out: Vec<Tensor2D> = params.iter().map(|t| Tensor2D::zeros(t.rows(), t.cols())).collect();
    for (&(p, i), v) in coords.iter().zip(values) {
        out[p].as_mut_slice()[i] = v?;
    }
    Ok(out)
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}
