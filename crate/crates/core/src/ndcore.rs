//! Dense `f64` tensors, a recorded primitive graph with reverse-mode
//! differentiation, and the Adam optimizer.
//!
//! The graph is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`] and enter a graph by id, so gradients map back onto the
//! store without copying.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid tensor: shape {shape:?} holds {expected} elements but {got} values were given")]
    InvalidTensor {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("gather index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, NdError>;

/// Row-major dense tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || expected != data.len() {
            return Err(NdError::InvalidTensor {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zero-sized tensor")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::new(vec![data.len()], data).expect("empty vector")
    }

    /// Builds a `[rows, cols]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NdError::Shape {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

/// `c = a·b` for row-major `a: [m,k]`, `b: [k,n]`, with optional transposes
/// expressed through strides. Per-element summation order depends only on
/// `k`, so a row's result does not depend on how many rows are batched.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents describe regions within the given slices,
    // which the callers size as [m,k], [k,n] and [m,n].
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Node handle inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Constant,
    Linear { x: Var, w: Var, b: Var },
    Silu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Mse { pred: Var, target: Var },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Gradients keyed by parameter; `None` where no path from the loss exists.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

/// Recorded forward computation over a borrowed parameter store.
///
/// Nodes are appended in evaluation order, which is also a topological
/// order, so backward is a single reverse sweep.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    /// Drops all recorded nodes; the graph can then record a fresh pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, op: Op, value: Option<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Op::Param(id), None, true)
    }

    /// A detached leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, Some(t), false)
    }

    /// `x·w + b` with `x: [B, In]`, `w: [In, Out]`, `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(NdError::Shape {
                op: "linear",
                left: xs,
                right: ws,
            });
        }
        if bs != [ws[1]] {
            return Err(NdError::Shape {
                op: "linear bias",
                left: ws,
                right: bs,
            });
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[1]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        gemm(
            batch,
            fan_in,
            fan_out,
            self.value(x).data(),
            (fan_in as isize, 1),
            self.value(w).data(),
            (fan_out as isize, 1),
            &mut out,
            1.0,
        );
        let value = Tensor::new(vec![batch, fan_out], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Linear { x, w, b }, Some(value), rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).unwrap();
        let rg = self.rg(x);
        self.push(Op::Silu(x), Some(value), rg)
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NdError::Shape {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), Some(value), rg))
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NdError::Shape {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), Some(value), rg))
    }

    /// Mean over all elements of the squared difference; a scalar node.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(NdError::Shape {
                op: "mse_loss",
                left: tp.shape().to_vec(),
                right: tt.shape().to_vec(),
            });
        }
        let n = tp.numel() as f64;
        let sum: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Op::Mse { pred, target }, Some(Tensor::scalar(sum / n)), rg))
    }

    /// Selects rows of a `[V, E]` table, producing `[ids.len(), E]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(NdError::Shape {
                op: "gather_rows",
                left: t.shape().to_vec(),
                right: vec![ids.len()],
            });
        }
        let rows = t.shape()[0];
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            if i >= rows {
                return Err(NdError::IndexOutOfRange { index: i, rows });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![ids.len(), t.cols()], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            Some(value),
            rg,
        ))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let rows = first[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(NdError::Shape {
                    op: "concat_cols",
                    left: first,
                    right: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Some(value), rg))
    }

    /// Reverse sweep from a scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NdError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Param(id) => accumulate(&mut param_grads[id.0], g),
                Op::Constant => {}
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, fan_in) = (xv.shape()[0], xv.shape()[1]);
                    let fan_out = wv.shape()[1];
                    if self.rg(*x) {
                        // dx = g·wᵀ
                        let mut dx = vec![0.0; batch * fan_in];
                        gemm(
                            batch,
                            fan_out,
                            fan_in,
                            g.data(),
                            (fan_out as isize, 1),
                            wv.data(),
                            (1, fan_out as isize),
                            &mut dx,
                            0.0,
                        );
                        accumulate(&mut adj[x.0], Tensor::new(vec![batch, fan_in], dx)?);
                    }
                    if self.rg(*w) {
                        // dw = xᵀ·g
                        let mut dw = vec![0.0; fan_in * fan_out];
                        gemm(
                            fan_in,
                            batch,
                            fan_out,
                            xv.data(),
                            (1, fan_in as isize),
                            g.data(),
                            (fan_out as isize, 1),
                            &mut dw,
                            0.0,
                        );
                        accumulate(&mut adj[w.0], Tensor::new(vec![fan_in, fan_out], dw)?);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; fan_out];
                        for r in 0..batch {
                            for (acc, v) in db.iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut adj[b.0], Tensor::vector(db));
                    }
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| {
                            let s = sigmoid(v);
                            gv * (s + v * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut adj[x.0], Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.rg(*v) {
                            accumulate(&mut adj[v.0], g.clone());
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let data = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut adj[a.0], Tensor::new(av.shape().to_vec(), data)?);
                    }
                    if self.rg(*b) {
                        let data = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut adj[b.0], Tensor::new(bv.shape().to_vec(), data)?);
                    }
                }
                Op::Mse { pred, target } => {
                    let (pv, tv) = (self.value(*pred), self.value(*target));
                    let scale = 2.0 * g.data()[0] / pv.numel() as f64;
                    let diff: Vec<f64> = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(p, t)| scale * (p - t))
                        .collect();
                    if self.rg(*target) {
                        let neg = diff.iter().map(|d| -d).collect();
                        accumulate(&mut adj[target.0], Tensor::new(tv.shape().to_vec(), neg)?);
                    }
                    if self.rg(*pred) {
                        accumulate(&mut adj[pred.0], Tensor::new(pv.shape().to_vec(), diff)?);
                    }
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let cols = tv.cols();
                    let mut dt = vec![0.0; tv.numel()];
                    for (r, &i) in ids.iter().enumerate() {
                        for (acc, v) in dt[i * cols..(i + 1) * cols].iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut adj[table.0], Tensor::new(tv.shape().to_vec(), dt)?);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).cols();
                        if self.rg(p) {
                            let mut dp = Vec::with_capacity(rows * width);
                            for r in 0..rows {
                                dp.extend_from_slice(&g.row(r)[offset..offset + width]);
                            }
                            accumulate(&mut adj[p.0], Tensor::new(vec![rows, width], dp)?);
                        }
                        offset += width;
                    }
                }
            }
        }
        Ok(Gradients { grads: param_grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data.iter_mut().zip(g.data) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

/// Adam moments and hyperparameters for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// left untouched, moments included. All gradients are checked for
    /// finiteness before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                let p = params.get(id);
                if g.shape() != p.shape() {
                    return Err(NdError::Shape {
                        op: "adam_step",
                        left: p.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(NdError::NonFiniteGradient(params.name(id).to_string()));
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((p, &gi), mi), vi) in params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst_param: Option<String>,
}

pub const GRADCHECK_STEP: f64 = 1e-3;

/// Gradient magnitude below which errors are measured in absolute terms,
/// since central differences of an O(1) loss carry about 1e-12 roundoff.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compares autodiff against the fourth-order central difference
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h` with
/// `h =` [`GRADCHECK_STEP`]. Tensors with more than `max_coords` entries are
/// checked on a seeded random subset of coordinates.
///
/// The reported error is `max |autodiff − fd| / max(|autodiff|, |fd|, GRADCHECK_FLOOR)`.
pub fn gradcheck<F>(
    params: &mut ParamStore,
    loss_fn: F,
    max_coords: usize,
    seed: u64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |params: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(params);
        let loss = loss_fn(&mut g)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(NdError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst_param: None,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..n)).collect()
        };
        for c in coords {
            let orig = params.get(id).data()[c];
            let mut at = |k: f64| -> Result<f64> {
                params.get_mut(id).data_mut()[c] = orig + k * GRADCHECK_STEP;
                eval(params)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            params.get_mut(id).data_mut()[c] = orig;

            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * GRADCHECK_STEP);
            let ad = analytic.get(id).map_or(0.0, |g| g.data()[c]);
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(GRADCHECK_FLOOR);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(params.name(id).to_string());
            }
        }
    }
    Ok(report)
}
