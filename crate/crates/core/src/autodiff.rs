//! Reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the recipe for its backward rule. [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients into the [`ParamSet`] slots of the
//! parameters that were read with [`Graph::param`]. Parameter gradients
//! accumulate across calls until [`ParamSet::zero_grad`].
//!
//! Reductions run in a fixed serial order, so results are bit-reproducible.

use std::fmt;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("zero vector in {0}")]
    ZeroVector(&'static str),
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("non-finite value in parameter {0}")]
    NonFinite(String),
    #[error("row {0} of a masked reduction has no unmasked entries")]
    EmptyMaskRow(usize),
    #[error("index {index} out of range for {len}")]
    OutOfRange { index: usize, len: usize },
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

/// A dense `rows × cols` matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape(), self.data)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn row(values: &[f64]) -> Self {
        Tensor::from_vec(1, values.len(), values.to_vec())
    }

    pub fn column(values: &[f64]) -> Self {
        Tensor::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::from_vec(rows.len(), cols, data)
    }

    /// Uniform Glorot initialisation.
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        Tensor::from_vec(rows, cols, data)
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, AutodiffError> {
        if self.cols != other.rows {
            return Err(mismatch("matmul", self, other));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_into(&mut out.data, &self.data, &other.data, self.rows, self.cols, other.cols);
        Ok(out)
    }
}

/// `out += a · b` with `a: n×k`, `b: k×m`.
fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &a_ip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `out += aᵀ · b` with `a: k×n`, `b: k×m`.
fn matmul_tn_into(out: &mut [f64], a: &[f64], b: &[f64], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let b_row = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let a_pi = a[p * n + i];
            if a_pi == 0.0 {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: n×k`, `b: m×k`.
fn matmul_nt_into(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * m + j] += s;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named trainable tensors with their gradient slots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.grads.push(Tensor::zeros(value.rows, value.cols));
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Copies values (not gradients) from another set with identical layout.
    pub fn load_values(&mut self, other: &ParamSet) {
        assert_eq!(self.names, other.names, "parameter layout differs");
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            assert_eq!(dst.shape(), src.shape());
            dst.data.copy_from_slice(&src.data);
        }
    }

    pub fn all_finite(&self) -> Result<(), AutodiffError> {
        match self.values.iter().position(|t| !t.is_finite()) {
            Some(i) => Err(AutodiffError::NonFinite(self.names[i].clone())),
            None => Ok(()),
        }
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    NormalizeRows(Var, Vec<f64>),
    Cosine(Var, Var),
    LogSumExpRows(Var, Vec<bool>),
    PickRows(Var, Vec<usize>),
    GatherRows(Var, Vec<Option<usize>>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A differentiation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Reads a parameter; backward accumulates into its gradient slot.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(op, x, y));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds the `1×m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if y.rows != 1 || y.cols != x.cols {
            return Err(mismatch("add_row", x, y));
        }
        let mut v = x.clone();
        for r in 0..v.rows {
            for (o, b) in v.data[r * v.cols..(r + 1) * v.cols].iter_mut().zip(&y.data) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let rows = self.value(parts[0]).rows;
        for &p in parts {
            if self.value(p).rows != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                v.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row_slice(r));
                off += t.cols;
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            data.extend_from_slice(&t.data);
        }
        let v = Tensor::from_vec(data.len() / cols.max(1), cols, data);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        if start + len > x.cols {
            return Err(AutodiffError::OutOfRange {
                index: start + len,
                len: x.cols,
            });
        }
        let mut v = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            v.data[r * len..(r + 1) * len].copy_from_slice(&x.row_slice(r)[start..start + len]);
        }
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        if start + len > x.rows {
            return Err(AutodiffError::OutOfRange {
                index: start + len,
                len: x.rows,
            });
        }
        let v = Tensor::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        let mut v = x.clone();
        let mut norms = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let n = x.row_slice(r).iter().map(|e| e * e).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(AutodiffError::ZeroVector("normalize_rows"));
            }
            v.data[r * x.cols..(r + 1) * x.cols].iter_mut().for_each(|e| *e /= n);
            norms.push(n);
        }
        Ok(self.push(v, Op::NormalizeRows(a, norms)))
    }

    /// ⟨a,b⟩/(‖a‖‖b‖) for two tensors of equal shape, as a 1×1 value.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("cosine_similarity", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let dot: f64 = x.data.iter().zip(&y.data).map(|(p, q)| p * q).sum();
        let nx = x.data.iter().map(|e| e * e).sum::<f64>().sqrt();
        let ny = y.data.iter().map(|e| e * e).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            return Err(AutodiffError::ZeroVector("cosine_similarity"));
        }
        Ok(self.push(Tensor::scalar(dot / (nx * ny)), Op::Cosine(a, b)))
    }

    /// Per-row `log Σ exp` over the entries where `include` is true; `n×1`.
    pub fn logsumexp_rows(&mut self, a: Var, include: Vec<bool>) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        if include.len() != x.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "logsumexp_rows",
                left: x.shape(),
                right: [include.len(), 1],
            });
        }
        let mut v = Tensor::zeros(x.rows, 1);
        for r in 0..x.rows {
            let row = x.row_slice(r);
            let mask = &include[r * x.cols..(r + 1) * x.cols];
            let m = row
                .iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .map(|(&e, _)| e)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(AutodiffError::EmptyMaskRow(r));
            }
            let s: f64 = row
                .iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .map(|(&e, _)| (e - m).exp())
                .sum();
            v.data[r] = m + s.ln();
        }
        Ok(self.push(v, Op::LogSumExpRows(a, include)))
    }

    /// Selects column `index[r]` of each row `r`; `n×1`.
    pub fn pick_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        if index.len() != x.rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "pick_rows",
                left: x.shape(),
                right: [index.len(), 1],
            });
        }
        if let Some(&bad) = index.iter().find(|&&c| c >= x.cols) {
            return Err(AutodiffError::OutOfRange { index: bad, len: x.cols });
        }
        let v = Tensor::column(&index.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect::<Vec<_>>());
        Ok(self.push(v, Op::PickRows(a, index)))
    }

    /// Row `r` of the result is row `index[r]` of `a`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        let mut v = Tensor::zeros(index.len(), x.cols);
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                if s >= x.rows {
                    return Err(AutodiffError::OutOfRange { index: s, len: x.rows });
                }
                v.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(x.row_slice(s));
            }
        }
        Ok(self.push(v, Op::GatherRows(a, index)))
    }

    /// Reverse accumulation from a scalar `loss` into `params`' gradient
    /// slots (added to whatever they already hold).
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<(), AutodiffError> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                params.grads[id.0].add_assign(&g);
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every tape node (None where no
    /// gradient reaches).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>, AutodiffError> {
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Input | Op::Param(_) => grads[i] = Some(dy),
                Op::MatMul(a, b) => {
                    let (x, w) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut grads, *a, x);
                    matmul_nt_into(&mut ga.data, &dy.data, &w.data, x.rows, w.cols, w.rows);
                    let gb = slot(&mut grads, *b, w);
                    matmul_tn_into(&mut gb.data, &x.data, &dy.data, x.rows, x.cols, w.cols);
                }
                Op::Transpose(a) => slot(&mut grads, *a, self.value(*a)).add_assign(&dy.transpose()),
                Op::Add(a, b) => {
                    slot(&mut grads, *a, y).add_assign(&dy);
                    slot(&mut grads, *b, y).add_assign(&dy);
                }
                Op::AddRow(a, b) => {
                    slot(&mut grads, *a, y).add_assign(&dy);
                    let gb = slot(&mut grads, *b, self.value(*b));
                    for r in 0..dy.rows {
                        for (o, d) in gb.data.iter_mut().zip(dy.row_slice(r)) {
                            *o += d;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    slot(&mut grads, *a, y).add_assign(&dy);
                    slot(&mut grads, *b, y).add_assign(&dy.map(|d| -d));
                }
                Op::Mul(a, b) => {
                    let ga = dy.zip(self.value(*b), |d, v| d * v);
                    let gb = dy.zip(self.value(*a), |d, v| d * v);
                    slot(&mut grads, *a, y).add_assign(&ga);
                    slot(&mut grads, *b, y).add_assign(&gb);
                }
                Op::Scale(a, c) => slot(&mut grads, *a, y).add_assign(&dy.map(|d| d * c)),
                Op::AddScalar(a) => slot(&mut grads, *a, y).add_assign(&dy),
                Op::Sigmoid(a) => {
                    slot(&mut grads, *a, y).add_assign(&dy.zip(y, |d, s| d * s * (1.0 - s)))
                }
                Op::Tanh(a) => slot(&mut grads, *a, y).add_assign(&dy.zip(y, |d, t| d * (1.0 - t * t))),
                Op::Exp(a) => slot(&mut grads, *a, y).add_assign(&dy.zip(y, |d, e| d * e)),
                Op::Log(a) => {
                    let g = dy.zip(self.value(*a), |d, x| d / x);
                    slot(&mut grads, *a, y).add_assign(&g)
                }
                Op::Softplus(a) => {
                    let g = dy.zip(self.value(*a), |d, x| d * sigmoid(x));
                    slot(&mut grads, *a, y).add_assign(&g)
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let gp = slot(&mut grads, *p, pv);
                        for r in 0..dy.rows {
                            let src = &dy.row_slice(r)[off..off + pv.cols];
                            for (o, d) in gp.data[r * pv.cols..(r + 1) * pv.cols].iter_mut().zip(src) {
                                *o += d;
                            }
                        }
                        off += pv.cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let gp = slot(&mut grads, *p, pv);
                        for (o, d) in gp.data.iter_mut().zip(&dy.data[off..off + pv.len()]) {
                            *o += d;
                        }
                        off += pv.len();
                    }
                }
                Op::SliceCols(a, start) => {
                    let ga = slot(&mut grads, *a, self.value(*a));
                    let cols = ga.cols;
                    for r in 0..dy.rows {
                        let dst = &mut ga.data[r * cols + start..r * cols + start + dy.cols];
                        for (o, d) in dst.iter_mut().zip(dy.row_slice(r)) {
                            *o += d;
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    let ga = slot(&mut grads, *a, self.value(*a));
                    let off = start * ga.cols;
                    for (o, d) in ga.data[off..off + dy.len()].iter_mut().zip(&dy.data) {
                        *o += d;
                    }
                }
                Op::Sum(a) => {
                    let d = dy.item();
                    slot(&mut grads, *a, self.value(*a)).data.iter_mut().for_each(|o| *o += d);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let d = dy.item() / x.len() as f64;
                    slot(&mut grads, *a, x).data.iter_mut().for_each(|o| *o += d);
                }
                Op::NormalizeRows(a, norms) => {
                    let ga = slot(&mut grads, *a, y);
                    let cols = y.cols;
                    for (r, n) in norms.iter().enumerate() {
                        let yr = y.row_slice(r);
                        let dr = dy.row_slice(r);
                        let proj: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                        for c in 0..cols {
                            ga.data[r * cols + c] += (dr[c] - yr[c] * proj) / n;
                        }
                    }
                }
                Op::Cosine(a, b) => {
                    let (x, w) = (self.value(*a), self.value(*b));
                    let nx = x.data.iter().map(|e| e * e).sum::<f64>().sqrt();
                    let nw = w.data.iter().map(|e| e * e).sum::<f64>().sqrt();
                    let c = y.item();
                    let d = dy.item();
                    let gx = x.zip(w, |xi, wi| d * (wi / (nx * nw) - c * xi / (nx * nx)));
                    let gw = w.zip(x, |wi, xi| d * (xi / (nx * nw) - c * wi / (nw * nw)));
                    slot(&mut grads, *a, x).add_assign(&gx);
                    slot(&mut grads, *b, w).add_assign(&gw);
                }
                Op::LogSumExpRows(a, include) => {
                    let x = self.value(*a);
                    let ga = slot(&mut grads, *a, x);
                    for r in 0..x.rows {
                        let lse = y.data[r];
                        for c in 0..x.cols {
                            let k = r * x.cols + c;
                            if include[k] {
                                ga.data[k] += dy.data[r] * (x.data[k] - lse).exp();
                            }
                        }
                    }
                }
                Op::GatherRows(a, index) => {
                    let x = self.value(*a);
                    let ga = slot(&mut grads, *a, x);
                    let cols = x.cols;
                    for (r, src) in index.iter().enumerate() {
                        if let Some(s) = *src {
                            let dst = &mut ga.data[s * cols..(s + 1) * cols];
                            for (o, d) in dst.iter_mut().zip(dy.row_slice(r)) {
                                *o += d;
                            }
                        }
                    }
                }
                Op::PickRows(a, index) => {
                    let x = self.value(*a);
                    let ga = slot(&mut grads, *a, x);
                    for (r, &c) in index.iter().enumerate() {
                        ga.data[r * x.cols + c] += dy.data[r];
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, like: &Tensor) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.rows, like.cols))
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates the parameters listed in `trainable` from their gradient
    /// slots. Nothing is written if any updated value would be non-finite.
    pub fn step(&mut self, params: &mut ParamSet, trainable: &[ParamId]) -> Result<(), AutodiffError> {
        if self.m.len() != params.len() {
            self.m = params.values.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
            self.v = self.m.clone();
        }
        let t = self.step + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);

        let mut staged = Vec::with_capacity(trainable.len());
        for &id in trainable {
            let (theta, g) = (&params.values[id.0], &params.grads[id.0]);
            if g.shape() != theta.shape() || self.m[id.0].shape() != theta.shape() {
                return Err(mismatch("adam_step", theta, g));
            }
            let mut m = self.m[id.0].clone();
            let mut v = self.v[id.0].clone();
            let mut next = theta.clone();
            for k in 0..theta.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m.data[k] / bc1;
                let v_hat = v.data[k] / bc2;
                next.data[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            if !next.is_finite() {
                return Err(AutodiffError::NonFinite(params.names[id.0].clone()));
            }
            staged.push((id, m, v, next));
        }
        for (id, m, v, next) in staged {
            self.m[id.0] = m;
            self.v[id.0] = v;
            params.values[id.0] = next;
        }
        self.step = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_param(v: f64) -> (ParamSet, ParamId) {
        let mut p = ParamSet::new();
        let id = p.add("x", Tensor::scalar(v));
        (p, id)
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut p = ParamSet::new();
        let x = p.add("x", Tensor::row(&[1.0, -2.0, 3.0]));
        let mut g = Graph::new();
        let xv = g.param(&p, x);
        let loss = g.sum(xv);
        g.backward(loss, &mut p).unwrap();
        assert_eq!(p.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient() {
        let (mut p, x) = scalar_param(3.0);
        let mut g = Graph::new();
        let xv = g.param(&p, x);
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut p).unwrap();
        assert_eq!(p.grad(x).item(), 6.0);

        // A second backward accumulates until explicitly zeroed.
        g.backward(loss, &mut p).unwrap();
        assert_eq!(p.grad(x).item(), 12.0);
        p.zero_grad();
        assert_eq!(p.grad(x).item(), 0.0);
    }

    #[test]
    fn log_sigmoid_at_zero() {
        let (mut p, x) = scalar_param(0.0);
        let mut g = Graph::new();
        let xv = g.param(&p, x);
        let s = g.sigmoid(xv);
        let loss = g.log(s);
        g.backward(loss, &mut p).unwrap();
        let analytic = p.grad(x).item();
        let f = |x: f64| (1.0 / (1.0 + (-x).exp())).ln();
        let h = 1e-5;
        let numeric = (f(h) - f(-h)) / (2.0 * h);
        assert!((analytic - 0.5).abs() < 1e-15);
        assert!((analytic - numeric).abs() < 1e-9);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut p = ParamSet::new();
        let x = p.add("x", Tensor::row(&[1.0, 2.0]));
        let mut g = Graph::new();
        let xv = g.param(&p, x);
        assert_eq!(g.backward(xv, &mut p), Err(AutodiffError::NonScalarLoss([1, 2])));
    }

    #[test]
    fn cosine_basics() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&[3.0, 4.0]));
        let s = g.cosine_similarity(a, a).unwrap();
        assert!((g.value(s).item() - 1.0).abs() < 1e-15);
        let x = g.constant(Tensor::row(&[1.0, 0.0]));
        let y = g.constant(Tensor::row(&[0.0, 1.0]));
        let o = g.cosine_similarity(x, y).unwrap();
        assert_eq!(g.value(o).item(), 0.0);
        let z = g.constant(Tensor::row(&[0.0, 0.0]));
        assert_eq!(g.cosine_similarity(x, z), Err(AutodiffError::ZeroVector("cosine_similarity")));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));
        let c = g.constant(Tensor::zeros(3, 2));
        assert!(matches!(g.add(a, c), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(g.slice_cols(a, 2, 2).is_err());
    }

    #[test]
    fn adam_first_step() {
        let (mut p, x) = scalar_param(0.0);
        p.grads[0] = Tensor::scalar(2.0);
        let mut adam = Adam::new(1e-3);
        adam.step(&mut p, &[x]).unwrap();
        let expected = -1e-3 * 2.0 / (2.0 + 1e-8);
        assert_eq!(p.value(x).item(), expected);
        assert!((p.value(x).item() + 0.000999999995).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let (mut p, x) = scalar_param(1.5);
        let mut adam = Adam::new(1e-3);
        for _ in 0..5 {
            adam.step(&mut p, &[x]).unwrap();
        }
        assert_eq!(p.value(x).item(), 1.5);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let (mut p, x) = scalar_param(1.0);
        p.grads[0] = Tensor::scalar(f64::NAN);
        let mut adam = Adam::new(1e-3);
        assert!(matches!(adam.step(&mut p, &[x]), Err(AutodiffError::NonFinite(_))));
        assert_eq!(p.value(x).item(), 1.0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut p = ParamSet::new();
            let w = p.add("w", Tensor::glorot(3, 2, &mut rng));
            let mut adam = Adam::new(1e-2);
            for _ in 0..10 {
                p.zero_grad();
                let mut g = Graph::new();
                let wv = g.param(&p, w);
                let t = g.tanh(wv);
                let loss = g.sum(t);
                g.backward(loss, &mut p).unwrap();
                adam.step(&mut p, &[w]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
