//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! as borrowed leaves, so building a graph never copies weights in double
//! precision. [`Graph::backward`] walks the tape in reverse and returns the
//! adjoint of every node; [`Graph::param_gradients`] folds those adjoints
//! into a [`Gradients`] buffer aligned with the [`ParamStore`].

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Global run mode for numeric precision. Storage is `f64` in both modes;
/// `Single` rounds every produced value through `f32`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Tensor),
    Relu(Var),
    Abs(Var),
    Square(Var),
    LayerNorm {
        x: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    MaskNegInf(Var, Vec<bool>),
    LogSumExpRows(Var),
    MeanRows(Var),
    MeanAll(Var),
    SumAll(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    precision: Precision,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn round_single(mut t: Tensor) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    t
}

impl<'a> Default for Graph<'a> {
    fn default() -> Self {
        Self::new(Precision::Double)
    }
}

impl<'a> Graph<'a> {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let value = match self.precision {
            Precision::Double => value,
            Precision::Single => round_single(value),
        };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let value = store.value(id);
        let value = match self.precision {
            Precision::Double => Cow::Borrowed(value),
            Precision::Single => Cow::Owned(round_single(value.clone())),
        };
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        let r = self.value(row);
        if r.numel() != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let mut out = self.value(a).clone().reshape(&[m, n])?;
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the single entry of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(a).map(|x| x * sv);
        Ok(self.push(out, Op::MulScalar(a, s)))
    }

    /// Scales row `i` of an `m×n` matrix by entry `i` of an `m×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(col).numel() != m {
            return Err(Error::dim("mul_col", self.shape(a), self.shape(col)));
        }
        let c = self.value(col).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= c[i]);
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, t: Tensor) -> Result<Var> {
        let out = self.value(a).zip_map(&t, |x, y| x * y)?;
        Ok(self.push(out, Op::MulConst(a, t)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = tensor::relu(self.value(a));
        self.push(out, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// Per-row layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (m, n) = t.dims2();
        let mut xhat = t.clone();
        let mut inv_std = Vec::with_capacity(m);
        for row in xhat.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let out = xhat.clone();
        self.push(out, Op::LayerNorm { x, xhat, inv_std })
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_lastdim(self.value(a))?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Replaces entries whose mask bit is false with `-inf`.
    pub fn mask_neg_inf(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        if keep.len() != self.value(a).numel() {
            return Err(Error::dim("mask_neg_inf", self.shape(a), &[keep.len()]));
        }
        let mut out = self.value(a).clone();
        for (v, &k) in out.data_mut().iter_mut().zip(&keep) {
            if !k {
                *v = f64::NEG_INFINITY;
            }
        }
        Ok(self.push(out, Op::MaskNegInf(a, keep)))
    }

    /// `m×n → m×1` row-wise log-sum-exp.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let data = t.data().chunks(n).map(tensor::logsumexp).collect();
        let out = Tensor::new(&[m, 1], data).expect("m×1");
        self.push(out, Op::LogSumExpRows(a))
    }

    /// `m×n → 1×n` mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut data = vec![0.0; n];
        for chunk in t.data().chunks(n) {
            for (o, v) in data.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= m as f64);
        let out = Tensor::new(&[1, n], data).expect("1×n");
        self.push(out, Op::MeanRows(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(out, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2();
        if start + len > n || len == 0 {
            return Err(Error::dim("slice_cols", t.shape(), &[start, len]));
        }
        let data = t
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(&[m, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::dim(
                "concat_cols",
                self.shape(parts[0]),
                self.shape(*parts.last().unwrap()),
            ));
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2();
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::dim("gather_rows", t.shape(), &[rows.len()]));
        }
        let data = rows
            .iter()
            .flat_map(|&r| t.row(r).iter().copied())
            .collect();
        let out = Tensor::new(&[rows.len(), n], data)?;
        Ok(self.push(out, Op::GatherRows(x, rows)))
    }

    /// Places row `k` of `x` at row `rows[k]` of a zero `total×n` matrix.
    pub fn scatter_rows(&mut self, x: Var, rows: Vec<usize>, total: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2();
        if rows.len() != m || rows.iter().any(|&r| r >= total) {
            return Err(Error::dim("scatter_rows", t.shape(), &[total]));
        }
        let mut out = Tensor::zeros(&[total, n]);
        for (k, &r) in rows.iter().enumerate() {
            out.data_mut()[r * n..(r + 1) * n].copy_from_slice(t.row(k));
        }
        Ok(self.push(out, Op::ScatterRows(x, rows)))
    }

    /// Picks entries `(i, j)` of a matrix into an `m×1` column.
    pub fn gather_elems(&mut self, x: Var, at: Vec<(usize, usize)>) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if at.is_empty() || at.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(Error::dim("gather_elems", t.shape(), &[at.len()]));
        }
        let data = at.iter().map(|&(i, j)| t.get2(i, j)).collect();
        let out = Tensor::new(&[at.len(), 1], data)?;
        Ok(self.push(out, Op::GatherElems(x, at)))
    }

    /// Reverse sweep seeded with `d(root)/d(root) = 1`. The root must hold a
    /// single value.
    pub fn backward(&self, root: Var) -> Result<Adjoints> {
        if self.value(root).numel() != 1 {
            return Err(Error::dim("backward", self.shape(root), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Adjoints { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &self.nodes[idx].op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = tensor::matmul_nt(g, val(*b))?;
                let gb = tensor::matmul_tn(val(*a), g)?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulNt(a, b) => {
                let ga = tensor::matmul(g, val(*b))?;
                let gb = tensor::matmul_tn(g, val(*a))?;
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                let n = g.cols();
                let mut gr = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (o, v) in gr.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, g.clone().reshape(val(*a).shape())?);
                accumulate(grads, *row, Tensor::new(val(*row).shape(), gr)?);
            }
            Op::AddConst(a) => accumulate(grads, *a, g.clone()),
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::MulScalar(a, s) => {
                let sv = val(*s).data()[0];
                let gs: f64 = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, y)| x * y)
                    .sum();
                accumulate(grads, *a, g.map(|v| v * sv));
                accumulate(grads, *s, Tensor::new(val(*s).shape(), vec![gs])?);
            }
            Op::MulCol(a, col) => {
                let av = val(*a);
                let n = av.cols();
                let c = val(*col).data();
                let mut ga = g.clone();
                let mut gc = vec![0.0; c.len()];
                for (i, chunk) in ga.data_mut().chunks_mut(n).enumerate() {
                    gc[i] = chunk.iter().zip(av.row(i)).map(|(x, y)| x * y).sum();
                    chunk.iter_mut().for_each(|v| *v *= c[i]);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *col, Tensor::new(val(*col).shape(), gc)?);
            }
            Op::MulConst(a, t) => accumulate(grads, *a, g.zip_map(t, |x, y| x * y)?),
            Op::Relu(a) => {
                let ga = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g.zip_map(val(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                accumulate(grads, *a, ga);
            }
            Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |gv, x| 2.0 * x * gv)?),
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = xhat.cols();
                let mut gx = g.clone();
                for (i, row) in gx.data_mut().chunks_mut(n).enumerate() {
                    let xh = xhat.row(i);
                    let mean_g = row.iter().sum::<f64>() / n as f64;
                    let mean_gx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for (v, &h) in row.iter_mut().zip(xh) {
                        *v = inv_std[i] * (*v - mean_g - h * mean_gx);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let n = y.cols();
                let mut ga = g.clone();
                for (i, row) in ga.data_mut().chunks_mut(n).enumerate() {
                    let yr = y.row(i);
                    let dot: f64 = row.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (v, &p) in row.iter_mut().zip(yr) {
                        *v = p * (*v - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::MaskNegInf(a, keep) => {
                let mut ga = g.clone();
                for (v, &k) in ga.data_mut().iter_mut().zip(keep) {
                    if !k {
                        *v = 0.0;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSumExpRows(a) => {
                let av = val(*a);
                let mut ga = tensor::softmax_lastdim(av)?;
                let n = ga.cols();
                for (i, row) in ga.data_mut().chunks_mut(n).enumerate() {
                    row.iter_mut().for_each(|v| *v *= g.data()[i]);
                }
                accumulate(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let av = val(*a);
                let (m, n) = av.dims2();
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..m {
                    data.extend(g.data().iter().map(|v| v / m as f64));
                }
                accumulate(grads, *a, Tensor::new(av.shape(), data)?);
            }
            Op::MeanAll(a) => {
                let av = val(*a);
                let gv = g.data()[0] / av.numel() as f64;
                accumulate(grads, *a, Tensor::full(av.shape(), gv));
            }
            Op::SumAll(a) => {
                accumulate(grads, *a, Tensor::full(val(*a).shape(), g.data()[0]));
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (_, n) = xv.dims2();
                let len = g.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for (i, row) in gx.data_mut().chunks_mut(n).enumerate() {
                    row[*start..start + len].copy_from_slice(g.row(i));
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    let data = (0..pv.rows())
                        .flat_map(|i| g.row(i)[offset..offset + w].iter().copied())
                        .collect();
                    accumulate(grads, p, Tensor::new(pv.shape(), data)?);
                    offset += w;
                }
            }
            Op::GatherRows(x, rows) => {
                let xv = val(*x);
                let n = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in gx.data_mut()[r * n..(r + 1) * n].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ScatterRows(x, rows) => {
                let xv = val(*x);
                let data = rows
                    .iter()
                    .flat_map(|&r| g.row(r).iter().copied())
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape(), data)?);
            }
            Op::GatherElems(x, at) => {
                let xv = val(*x);
                let c = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for (k, &(i, j)) in at.iter().enumerate() {
                    gx.data_mut()[i * c + j] += g.data()[k];
                }
                accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }

    /// Sums the adjoints of every parameter leaf into a buffer aligned with
    /// `store`. Parameters absent from the graph receive zeros.
    pub fn param_gradients(&self, adjoints: &Adjoints, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        for (node, grad) in self.nodes.iter().zip(&adjoints.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                out.tensors[id.index()]
                    .add_assign(g)
                    .expect("parameter adjoint matches parameter shape");
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g).expect("adjoint shape matches node"),
        slot @ None => *slot = Some(g),
    }
}
