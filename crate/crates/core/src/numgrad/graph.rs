//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! vector-Jacobian products into every node that depends on a parameter.

use super::array::{gemm, Array};
use super::NumError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sigmoid(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    RowNorm(usize),
    Min(usize, usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    ScaleGrad(usize, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::RowNorm(..) => "row_norm",
            Op::Min(..) => "min",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ScaleGrad(..) => "scale_grad",
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<(usize, &'static str)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// First node whose forward value was non-finite, if any.
    pub fn non_finite(&self) -> Option<(usize, &'static str)> {
        self.non_finite
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(a.0);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            va.shape(),
            vb.shape(),
            "elementwise {} shape mismatch",
            op.name()
        );
        let value = va.zip_map(vb, f);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        assert_eq!(k, vb.rows(), "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        gemm(va.data(), m, k, false, vb.data(), k, n, false, &mut out);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Array::matrix(m, n, out), Op::MatMul(a.0, b.0), rg)
    }

    /// `a + row` with `row` (shape `1 x cols`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let c = va.cols();
        assert_eq!(vr.len(), c, "add_row width");
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a.0) || self.rg(row.0);
        self.push(value, Op::AddRow(a.0, row.0), rg)
    }

    /// `a * row` with `row` (shape `1 x cols`) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(vr.len(), va.cols(), "mul_row width");
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(vr.data()) {
                *x *= b;
            }
        }
        let rg = self.rg(a.0) || self.rg(row.0);
        self.push(value, Op::MulRow(a.0, row.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Min(a.0, b.0), |x, y| if x <= y { x } else { y })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.0, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a.0), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    /// Sum of all elements, as a `1x1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a.0);
        self.push(Array::scalar(s), Op::Sum(a.0), rg)
    }

    /// Mean of all elements, as a `1x1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.sum() / v.len() as f64;
        let rg = self.rg(a.0);
        self.push(Array::scalar(m), Op::Mean(a.0), rg)
    }

    /// Per-row sum, shape `rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let data: Vec<f64> = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let rg = self.rg(a.0);
        self.push(Array::matrix(data.len(), 1, data), Op::SumCols(a.0), rg)
    }

    /// Per-row Euclidean norm, shape `rows x 1`. The gradient at a zero row
    /// is taken to be zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let data: Vec<f64> = (0..v.rows())
            .map(|r| v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(a.0);
        self.push(Array::matrix(data.len(), 1, data), Op::RowNorm(a.0), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.concat_cols(&self.nodes[b.0].value);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::ConcatCols(a.0, b.0), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.nodes[a.0].value.slice_cols(start, end);
        let rg = self.rg(a.0);
        self.push(value, Op::SliceCols(a.0, start), rg)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by `c`.
    pub fn scale_grad(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a.0) && c != 0.0;
        self.push(value, Op::ScaleGrad(a.0, c), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        if let Some((node, op)) = self.non_finite {
            if node <= loss.0 {
                return Err(NumError::NonFinite { node, op });
            }
        }
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |j: usize| &self.nodes[j].value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(g.data(), m, n, false, vb.data(), k, n, true, &mut da);
                    accumulate(grads, a, Array::matrix(m, k, da), va.shape());
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(va.data(), m, k, true, g.data(), m, n, false, &mut db);
                    accumulate(grads, b, Array::matrix(k, n, db), vb.shape());
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone(), val(a).shape());
                }
                if self.rg(row) {
                    let c = g.cols();
                    let mut col_sums = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (s, x) in col_sums.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    accumulate(grads, row, Array::matrix(1, c, col_sums), val(row).shape());
                }
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (val(a), val(row));
                if self.rg(a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        for (x, b) in d.row_mut(r).iter_mut().zip(vr.data()) {
                            *x *= b;
                        }
                    }
                    accumulate(grads, a, d, va.shape());
                }
                if self.rg(row) {
                    let c = g.cols();
                    let mut sums = vec![0.0; c];
                    for r in 0..g.rows() {
                        for ((s, x), y) in sums.iter_mut().zip(g.row(r)).zip(va.row(r)) {
                            *s += x * y;
                        }
                    }
                    accumulate(grads, row, Array::matrix(1, c, sums), vr.shape());
                }
            }
            Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone(), val(a).shape());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.clone(), val(b).shape());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone(), val(a).shape());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.map(|x| -x), val(b).shape());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.zip_map(val(b), |x, y| x * y), val(a).shape());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.zip_map(val(a), |x, y| x * y), val(b).shape());
                }
            }
            Op::Min(a, b) => {
                let (va, vb) = (val(a), val(b));
                if self.rg(a) {
                    let mut d = g.clone();
                    for ((d, x), y) in d.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        if x > y {
                            *d = 0.0;
                        }
                    }
                    accumulate(grads, a, d, va.shape());
                }
                if self.rg(b) {
                    let mut d = g.clone();
                    for ((d, x), y) in d.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        if x <= y {
                            *d = 0.0;
                        }
                    }
                    accumulate(grads, b, d, vb.shape());
                }
            }
            Op::Scale(a, c) | Op::ScaleGrad(a, c) => {
                accumulate(grads, a, g.map(|x| x * c), val(a).shape());
            }
            Op::AddScalar(a) => accumulate(grads, a, g.clone(), val(a).shape()),
            Op::Tanh(a) => {
                accumulate(grads, a, g.zip_map(y, |g, y| g * (1.0 - y * y)), val(a).shape())
            }
            Op::Exp(a) => accumulate(grads, a, g.zip_map(y, |g, y| g * y), val(a).shape()),
            Op::Log(a) => accumulate(grads, a, g.zip_map(val(a), |g, x| g / x), val(a).shape()),
            Op::Softplus(a) => accumulate(
                grads,
                a,
                g.zip_map(val(a), |g, x| g * sigmoid(x)),
                val(a).shape(),
            ),
            Op::Sigmoid(a) => accumulate(
                grads,
                a,
                g.zip_map(y, |g, y| g * y * (1.0 - y)),
                val(a).shape(),
            ),
            Op::Square(a) => accumulate(
                grads,
                a,
                g.zip_map(val(a), |g, x| 2.0 * g * x),
                val(a).shape(),
            ),
            Op::Sum(a) => {
                let s = g.data()[0];
                accumulate(grads, a, Array::filled(val(a).shape(), s), val(a).shape());
            }
            Op::Mean(a) => {
                let va = val(a);
                let s = g.data()[0] / va.len() as f64;
                accumulate(grads, a, Array::filled(va.shape(), s), va.shape());
            }
            Op::SumCols(a) => {
                let va = val(a);
                let c = va.cols();
                let mut d = Array::zeros(va.shape());
                for r in 0..va.rows() {
                    let gr = g.data()[r];
                    d.row_mut(r).iter_mut().take(c).for_each(|x| *x = gr);
                }
                accumulate(grads, a, d, va.shape());
            }
            Op::RowNorm(a) => {
                let va = val(a);
                let mut d = Array::zeros(va.shape());
                for r in 0..va.rows() {
                    let norm = y.data()[r];
                    if norm > 0.0 {
                        let s = g.data()[r] / norm;
                        for (o, x) in d.row_mut(r).iter_mut().zip(va.row(r)) {
                            *o = s * x;
                        }
                    }
                }
                accumulate(grads, a, d, va.shape());
            }
            Op::ConcatCols(a, b) => {
                let ca = val(a).cols();
                if self.rg(a) {
                    accumulate(grads, a, g.slice_cols(0, ca), val(a).shape());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.slice_cols(ca, g.cols()), val(b).shape());
                }
            }
            Op::SliceCols(a, start) => {
                let va = val(a);
                let w = g.cols();
                let mut d = Array::zeros(va.shape());
                for r in 0..va.rows() {
                    d.row_mut(r)[start..start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, a, d, va.shape());
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array>], idx: usize, delta: Array, shape: &[usize]) {
    let delta = if delta.shape() == shape {
        delta
    } else {
        Array::new(shape.to_vec(), delta.into_data()).expect("gradient size")
    };
    match &mut grads[idx] {
        Some(g) => {
            for (x, d) in g.data_mut().iter_mut().zip(delta.data()) {
                *x += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing reached it.
    pub fn take_or_zeros(&mut self, v: Var, like: &Array) -> Array {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Array::zeros(like.shape()))
    }
}

/// Reverse-mode gradient of a scalar loss with respect to `params`.
///
/// `loss` builds the computation on a fresh graph from parameter leaves and
/// returns the scalar output node.
pub fn grad<F>(params: &[Array], loss: F) -> Result<(f64, Vec<Array>), NumError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = loss(&mut g, &vars)?;
    let value = g.scalar(out);
    let mut grads = g.backward(out)?;
    let result = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p))
        .collect();
    Ok((value, result))
}

/// Evaluates a graph-built loss without differentiating it.
pub fn eval_loss<F>(params: &[Array], loss: &F) -> Result<f64, NumError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = loss(&mut g, &vars)?;
    Ok(g.scalar(out))
}

/// Central-difference gradient, one coordinate at a time.
pub fn finite_diff_grad<F>(params: &[Array], eps: f64, loss: F) -> Result<Vec<Array>, NumError>
where
    F: Fn(&[Array]) -> Result<f64, NumError>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut work: Vec<Array> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut d = Array::zeros(params[t].shape());
        for i in 0..params[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = loss(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let down = loss(&work)?;
            work[t].data_mut()[i] = orig;
            d.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        out.push(d);
    }
    Ok(out)
}
