//! A small reverse-mode automatic differentiation tape over dense row-major
//! matrices.
//!
//! Every value is an [`Array2`]; vectors are `1 × D` rows and scalars are
//! `1 × 1`. A [`Graph`] records operations as they are applied to [`Var`]
//! handles, and [`Graph::backward`] walks the tape in reverse to produce
//! gradients for every node that depends on a trainable leaf.
//!
//! The tape is generic over [`Scalar`] so the same model code runs in 32-bit
//! for training and 64-bit for finite-difference gradient checks.

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{concatenate, s, Array2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Scalar:
    LinalgScalar
    + Float
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("representable constant")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, F),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Array2<F>,
        rstd: Vec<F>,
    },
    L2NormalizeRows {
        x: usize,
        norms: Vec<F>,
    },
    SumAll(usize),
    SumRows(usize),
    MeanRows(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    SelectRows(usize, Vec<usize>),
    Gather(usize, Vec<(usize, usize)>),
    Reshape(usize),
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Operation tape. Create one per forward pass.
pub struct Graph<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F: Scalar> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<F: Scalar> Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{}x{}]", self.id, r, c)
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. `var`, or `None` if the loss does not
    /// depend on it.
    pub fn get(&self, var: Var<'_, F>) -> Option<&Array2<F>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<F>, op: Op<F>, needs_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Array2<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Array2<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, x: F) -> Var<'_, F> {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn row(&self, values: &[F]) -> Var<'_, F> {
        self.constant(Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn unary(&self, a: usize, f: impl FnOnce(&Array2<F>) -> Array2<F>, op: Op<F>) -> Var<'_, F> {
        let value = f(&self.nodes.borrow()[a].value);
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    fn binary(&self, a: usize, b: usize, f: impl FnOnce(&Array2<F>, &Array2<F>) -> Array2<F>, op: Op<F>) -> Var<'_, F> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let needs = self.needs(&[a, b]);
        self.push(value, op, needs)
    }

    /// Reverse-mode sweep from a `1 × 1` loss node.
    pub fn backward(&self, loss: Var<'_, F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.dim(), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Array2<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array2::from_elem((1, 1), F::one()));

        for id in (0..=loss.id).rev() {
            let Some(dout) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(dout);
                continue;
            }
            let mut send = |target: usize, g: Array2<F>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    send(*a, dout.dot(&val(*b).t()));
                    send(*b, val(*a).t().dot(&dout));
                }
                Op::MatMulT(a, b) => {
                    send(*a, dout.dot(val(*b)));
                    send(*b, dout.t().dot(val(*a)));
                }
                Op::Transpose(a) => send(*a, dout.t().to_owned()),
                Op::Add(a, b) => {
                    send(*a, dout.clone());
                    send(*b, dout.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, dout.clone());
                    send(*b, dout.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    send(*a, &dout * val(*b));
                    send(*b, &dout * val(*a));
                }
                Op::AddRow(a, b) => {
                    send(*b, dout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*a, dout.clone());
                }
                Op::Scale(a, k) => send(*a, dout.mapv(|g| g * *k)),
                Op::AddScalar(a) => send(*a, dout.clone()),
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut g = dout.clone();
                    g.zip_mut_with(y, |g, &y| *g = *g * (F::one() - y * y));
                    send(*a, g);
                }
                Op::Relu(a) => {
                    let mut g = dout.clone();
                    g.zip_mut_with(val(*a), |g, &x| {
                        if x <= F::zero() {
                            *g = F::zero()
                        }
                    });
                    send(*a, g);
                }
                Op::Exp(a) => send(*a, &dout * &node.value),
                Op::Ln(a) => send(*a, &dout / val(*a)),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&dout * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*a, y * &(&dout - &dot));
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(|v| v.exp());
                    let total = dout.sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*a, &dout - &(&p * &total));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gain_v = val(*gain);
                    send(*bias, dout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*gain, (&dout * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    if nodes[*x].needs_grad {
                        let dxhat = &dout * gain_v;
                        let n = F::of(xhat.ncols() as f64);
                        let mut dx = Array2::zeros(xhat.raw_dim());
                        for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let sum_dh: F = dh.iter().copied().sum();
                            let sum_dh_xh: F = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
                            let k = rstd[r] / n;
                            for c in 0..row.len() {
                                row[c] = k * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let dot = (&dout * y).sum_axis(Axis(1));
                    let mut dx = dout.clone();
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let inv = F::one() / norms[r];
                        for c in 0..row.len() {
                            row[c] = (row[c] - y[[r, c]] * dot[r]) * inv;
                        }
                    }
                    send(*x, dx);
                }
                Op::SumAll(a) => send(*a, Array2::from_elem(val(*a).raw_dim(), dout[[0, 0]])),
                Op::SumRows(a) => {
                    let shape = val(*a).raw_dim();
                    let g = dout.broadcast(shape).unwrap().to_owned();
                    send(*a, g);
                }
                Op::MeanRows(a) => {
                    let shape = val(*a).raw_dim();
                    let m = F::of(shape[0] as f64);
                    let g = dout.mapv(|v| v / m).broadcast(shape).unwrap().to_owned();
                    send(*a, g);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = val(p).nrows();
                        send(p, dout.slice(s![start..start + rows, ..]).to_owned());
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = val(p).ncols();
                        send(p, dout.slice(s![.., start..start + cols]).to_owned());
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut g = Array2::zeros(val(*a).raw_dim());
                    let rows = dout.nrows();
                    g.slice_mut(s![*start..*start + rows, ..]).assign(&dout);
                    send(*a, g);
                }
                Op::SliceCols(a, start) => {
                    let mut g = Array2::zeros(val(*a).raw_dim());
                    let cols = dout.ncols();
                    g.slice_mut(s![.., *start..*start + cols]).assign(&dout);
                    send(*a, g);
                }
                Op::SelectRows(a, idx) => {
                    let mut g = Array2::zeros(val(*a).raw_dim());
                    for (k, &r) in idx.iter().enumerate() {
                        g.row_mut(r).zip_mut_with(&dout.row(k), |a, &b| *a += b);
                    }
                    send(*a, g);
                }
                Op::Gather(a, idx) => {
                    let mut g = Array2::zeros(val(*a).raw_dim());
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        g[[r, c]] = g[[r, c]] + dout[[k, 0]];
                    }
                    send(*a, g);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).raw_dim();
                    send(*a, dout.to_shape(shape).unwrap().to_owned());
                }
            }
            grads[id] = Some(dout);
        }
        Gradients { grads }
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g, F>]) -> Var<'g, F> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = ids.iter().map(|&i| nodes[i].value.view()).collect();
            concatenate(Axis(0), &views).expect("concat_rows: column counts differ")
        };
        let needs = self.needs(&ids);
        self.push(value, Op::ConcatRows(ids), needs)
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g, F>]) -> Var<'g, F> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = ids.iter().map(|&i| nodes[i].value.view()).collect();
            concatenate(Axis(1), &views).expect("concat_cols: row counts differ")
        };
        let needs = self.needs(&ids);
        self.push(value, Op::ConcatCols(ids), needs)
    }
}

impl<'g, F: Scalar> Var<'g, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.dim()
    }

    pub fn value(&self) -> Array2<F> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Array2<F>) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    /// Value of a `1 × 1` node.
    pub fn item(&self) -> F {
        self.with_value(|v| {
            assert_eq!(v.dim(), (1, 1), "item() on non-scalar");
            v[[0, 0]]
        })
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, F> {
        self.graph.constant(self.value())
    }

    pub fn matmul(self, rhs: Var<'g, F>) -> Var<'g, F> {
        self.graph
            .binary(self.id, rhs.id, |a, b| a.dot(b), Op::MatMul(self.id, rhs.id))
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(self, rhs: Var<'g, F>) -> Var<'g, F> {
        self.graph
            .binary(self.id, rhs.id, |a, b| a.dot(&b.t()), Op::MatMulT(self.id, rhs.id))
    }

    pub fn t(self) -> Var<'g, F> {
        self.graph.unary(
            self.id,
            |a| a.t().as_standard_layout().to_owned(),
            Op::Transpose(self.id),
        )
    }

    pub fn add(self, rhs: Var<'g, F>) -> Var<'g, F> {
        self.graph
            .binary(self.id, rhs.id, |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'g, F>) -> Var<'g, F> {
        self.graph
            .binary(self.id, rhs.id, |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'g, F>) -> Var<'g, F> {
        self.graph
            .binary(self.id, rhs.id, |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    /// Adds a `1 × n` row to every row of `self`.
    pub fn add_row(self, row: Var<'g, F>) -> Var<'g, F> {
        self.graph.binary(
            self.id,
            row.id,
            |a, b| {
                assert_eq!(b.nrows(), 1, "add_row expects a 1×n row");
                a + b
            },
            Op::AddRow(self.id, row.id),
        )
    }

    pub fn scale(self, k: F) -> Var<'g, F> {
        self.graph.unary(self.id, |a| a.mapv(|v| v * k), Op::Scale(self.id, k))
    }

    pub fn add_scalar(self, k: F) -> Var<'g, F> {
        self.graph.unary(self.id, |a| a.mapv(|v| v + k), Op::AddScalar(self.id))
    }

    pub fn tanh(self) -> Var<'g, F> {
        self.graph.unary(self.id, |a| a.mapv(|v| v.tanh()), Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'g, F> {
        self.graph
            .unary(self.id, |a| a.mapv(|v| v.max(F::zero())), Op::Relu(self.id))
    }

    pub fn exp(self) -> Var<'g, F> {
        self.graph.unary(self.id, |a| a.mapv(|v| v.exp()), Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'g, F> {
        self.graph.unary(self.id, |a| a.mapv(|v| v.ln()), Op::Ln(self.id))
    }

    pub fn softmax_rows(self) -> Var<'g, F> {
        self.graph.unary(self.id, |a| softmax_rows(a), Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(self) -> Var<'g, F> {
        self.graph
            .unary(self.id, |a| log_softmax_rows(a), Op::LogSoftmaxRows(self.id))
    }

    /// Row-wise layer normalisation with a `1 × n` gain and bias.
    pub fn layer_norm(self, gain: Var<'g, F>, bias: Var<'g, F>, eps: F) -> Var<'g, F> {
        let g = self.graph;
        let (value, xhat, rstd) = {
            let nodes = g.nodes.borrow();
            let x = &nodes[self.id].value;
            let n = F::of(x.ncols() as f64);
            let mut xhat = x.clone();
            let mut rstd = Vec::with_capacity(x.nrows());
            for mut row in xhat.rows_mut() {
                let mean = row.iter().copied().sum::<F>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                let r = F::one() / (var + eps).sqrt();
                row.mapv_inplace(|v| (v - mean) * r);
                rstd.push(r);
            }
            let value = &(&xhat * &nodes[gain.id].value) + &nodes[bias.id].value;
            (value, xhat, rstd)
        };
        let needs = g.needs(&[self.id, gain.id, bias.id]);
        g.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Scales every row to unit Euclidean norm. Zero rows are clamped to a
    /// tiny norm and stay zero.
    pub fn l2_normalize_rows(self) -> Var<'g, F> {
        let g = self.graph;
        let (value, norms) = {
            let nodes = g.nodes.borrow();
            let x = &nodes[self.id].value;
            let tiny = F::min_positive_value().sqrt();
            let norms: Vec<F> = x
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|&v| v * v).sum::<F>().sqrt().max(tiny))
                .collect();
            let mut y = x.clone();
            for (r, mut row) in y.rows_mut().into_iter().enumerate() {
                row.mapv_inplace(|v| v / norms[r]);
            }
            (y, norms)
        };
        let needs = g.needs(&[self.id]);
        g.push(value, Op::L2NormalizeRows { x: self.id, norms }, needs)
    }

    pub fn sum(self) -> Var<'g, F> {
        self.graph
            .unary(self.id, |a| Array2::from_elem((1, 1), a.sum()), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'g, F> {
        let (r, c) = self.shape();
        self.sum().scale(F::one() / F::of((r * c) as f64))
    }

    /// Per-row sums as an `m × 1` column.
    pub fn sum_rows(self) -> Var<'g, F> {
        self.graph.unary(
            self.id,
            |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::SumRows(self.id),
        )
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(self) -> Var<'g, F> {
        self.graph.unary(
            self.id,
            |a| a.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0)),
            Op::MeanRows(self.id),
        )
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'g, F> {
        self.graph.unary(
            self.id,
            |a| a.slice(s![start..end, ..]).to_owned(),
            Op::SliceRows(self.id, start),
        )
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'g, F> {
        self.graph.unary(
            self.id,
            |a| a.slice(s![.., start..end]).to_owned(),
            Op::SliceCols(self.id, start),
        )
    }

    pub fn row(self, r: usize) -> Var<'g, F> {
        self.slice_rows(r, r + 1)
    }

    /// Gathers rows by index (duplicates allowed).
    pub fn select_rows(self, idx: &[usize]) -> Var<'g, F> {
        let idx = idx.to_vec();
        self.graph.unary(
            self.id,
            |a| a.select(Axis(0), &idx),
            Op::SelectRows(self.id, idx.clone()),
        )
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'g, F> {
        self.graph.unary(
            self.id,
            |a| {
                a.as_standard_layout()
                    .to_shape((rows, cols))
                    .expect("reshape: element count differs")
                    .to_owned()
            },
            Op::Reshape(self.id),
        )
    }

    /// Gathers individual `(row, col)` entries into a `k × 1` column.
    pub fn gather(self, idx: &[(usize, usize)]) -> Var<'g, F> {
        let idx = idx.to_vec();
        self.graph.unary(
            self.id,
            |a| Array2::from_shape_fn((idx.len(), 1), |(k, _)| a[idx[k]]),
            Op::Gather(self.id, idx.clone()),
        )
    }
}

impl<'g, F: Scalar> std::ops::Add for Var<'g, F> {
    type Output = Var<'g, F>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g, F: Scalar> std::ops::Sub for Var<'g, F> {
    type Output = Var<'g, F>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g, F: Scalar> std::ops::Mul for Var<'g, F> {
    type Output = Var<'g, F>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

pub fn softmax_rows<F: Scalar>(a: &Array2<F>) -> Array2<F> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub fn log_softmax_rows<F: Scalar>(a: &Array2<F>) -> Array2<F> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
