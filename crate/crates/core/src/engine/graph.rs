//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records one forward computation against a borrowed
//! [`ParamStore`]. Parameters are referenced, never copied; embedding lookups
//! are recorded as row gathers and scatter their gradient back into the table.
//! Every matrix product is charged to a [`MacKind`] so layer code can be
//! audited for its multiply-accumulate count.

use std::rc::Rc;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm_into, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Category a matrix product is charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MacKind {
    Projection,
    Attention,
    Other,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    pub projection: u64,
    pub attention: u64,
    pub other: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.projection + self.attention + self.other
    }

    pub fn since(&self, earlier: &MacCount) -> MacCount {
        MacCount {
            projection: self.projection - earlier.projection,
            attention: self.attention - earlier.attention,
            other: self.other - earlier.other,
        }
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Gather { table: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Silu(Var),
    MaskedSilu { s: Var, mask: Rc<Tensor<T>>, row_scale: Rc<Vec<T>> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    Standardize { x: Var, inv_std: Vec<T> },
    GroupAffine { x: Var, slots: Vec<usize>, gains: Vec<Var>, biases: Vec<Var> },
    SoftmaxRows(Var),
    BceWithLogits { logits: Var, labels: Vec<T>, weight: T },
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
}

pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    macs: MacCount,
    tag: MacKind,
    live_bytes: usize,
    peak_bytes: usize,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            macs: MacCount::default(),
            tag: MacKind::Other,
            live_bytes: 0,
            peak_bytes: 0,
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn macs(&self) -> MacCount {
        self.macs
    }

    /// Sets the category for subsequent matrix products; returns the previous one.
    pub fn set_tag(&mut self, tag: MacKind) -> MacKind {
        std::mem::replace(&mut self.tag, tag)
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.value(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.live_bytes += value.bytes();
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    fn charge(&mut self, m: usize, k: usize, n: usize) {
        let c = (m * k * n) as u64;
        match self.tag {
            MacKind::Projection => self.macs.projection += c,
            MacKind::Attention => self.macs.attention += c,
            MacKind::Other => self.macs.other += c,
        }
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { op: Op::Param(id), value: None });
        Var(self.nodes.len() - 1)
    }

    /// Rows `ids` of an embedding table.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = self.store.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Lookup(format!(
                "id {bad} outside vocabulary of size {} for `{}`",
                t.rows(),
                self.store.param(table).name
            )));
        }
        let out = t.select_rows(ids);
        Ok(self.push(Op::Gather { table, ids: ids.to_vec() }, out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let [m, k] = self.shape(a);
        let n = out.cols();
        self.charge(m, k, n);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let [m, k] = self.shape(a);
        let n = out.cols();
        self.charge(m, k, n);
        Ok(self.push(Op::MatMulT(a, b), out))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let [_, n] = self.shape(a);
        if self.shape(row) != [1, n] {
            return Err(Error::Dimension(format!("add_row: bias {:?} for width {n}", self.shape(row))));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).row(0).to_vec();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o = *o + b;
            }
        }
        Ok(self.push(Op::AddRow(a, row), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * y;
        }
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        self.push(Op::Silu(a), out)
    }

    /// `silu(s ⊙ mask)` with each row multiplied by `row_scale[row]`.
    pub fn masked_silu(&mut self, s: Var, mask: Rc<Tensor<T>>, row_scale: Rc<Vec<T>>) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != mask.shape() || row_scale.len() != sv.rows() {
            return Err(Error::Dimension(format!(
                "masked_silu: scores {:?}, mask {:?}, {} row scales",
                sv.shape(),
                mask.shape(),
                row_scale.len()
            )));
        }
        let mut out = Tensor::zeros(sv.rows(), sv.cols());
        for r in 0..sv.rows() {
            let sc = row_scale[r];
            let (src, m) = (sv.row(r), mask.row(r));
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = silu(src[c] * m[c]) * sc;
            }
        }
        Ok(self.push(Op::MaskedSilu { s, mask, row_scale }, out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p)[0]);
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(Error::Dimension("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Row concatenation; `cols` fixes the width when `parts` is empty.
    pub fn concat_rows(&mut self, parts: &[Var], cols: usize) -> Result<Var> {
        if parts.iter().any(|&p| self.shape(p)[1] != cols) {
            return Err(Error::Dimension("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::from_vec(if cols == 0 { 0 } else { rows }, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [_, c] = self.shape(a);
        if start + len > c {
            return Err(Error::Dimension(format!("slice_cols {start}+{len} of width {c}")));
        }
        let out = self.value(a).slice_cols(start, len);
        Ok(self.push(Op::SliceCols(a, start), out))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [r, _] = self.shape(a);
        if start + len > r {
            return Err(Error::Dimension(format!("slice_rows {start}+{len} of height {r}")));
        }
        let out = self.value(a).slice_rows(start, len);
        Ok(self.push(Op::SliceRows(a, start), out))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let [r, _] = self.shape(a);
        if idx.iter().any(|&i| i >= r) {
            return Err(Error::Dimension("select_rows index out of range".into()));
        }
        let out = self.value(a).select_rows(idx);
        Ok(self.push(Op::SelectRows(a, idx.to_vec()), out))
    }

    /// Per-row standardization to zero mean and unit variance.
    pub fn standardize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = T::of(xv.cols() as f64);
        let mut out = Tensor::zeros(xv.rows(), xv.cols());
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / d;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / d;
            let is = T::one() / (var + T::of(eps)).sqrt();
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(Op::Standardize { x, inv_std }, out)
    }

    /// `out[r] = x[r] ⊙ gains[slots[r]] + biases[slots[r]]`, gains/biases `1 x d`.
    pub fn group_affine(
        &mut self,
        x: Var,
        slots: &[usize],
        gains: &[Var],
        biases: &[Var],
    ) -> Result<Var> {
        let [rows, d] = self.shape(x);
        if slots.len() != rows || gains.len() != biases.len() {
            return Err(Error::Dimension("group_affine: slot/param count mismatch".into()));
        }
        if slots.iter().any(|&s| s >= gains.len())
            || gains.iter().chain(biases).any(|&p| self.shape(p) != [1, d])
        {
            return Err(Error::Dimension("group_affine: bad group parameters".into()));
        }
        let mut out = self.value(x).clone();
        for (r, &s) in slots.iter().enumerate() {
            let g = self.value(gains[s]).row(0).to_vec();
            let b = self.value(biases[s]).row(0);
            for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(&g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        Ok(self.push(
            Op::GroupAffine { x, slots: slots.to_vec(), gains: gains.to_vec(), biases: biases.to_vec() },
            out,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// `weight * Σ_i [softplus(z_i) - y_i z_i]` over a column of logits, as `1 x 1`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T], weight: T) -> Result<Var> {
        let z = self.value(logits);
        if z.cols() != 1 || z.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "bce: logits {:?} vs {} labels",
                z.shape(),
                labels.len()
            )));
        }
        let mut total = T::zero();
        for (&zi, &yi) in z.data().iter().zip(labels) {
            // softplus(z) = max(z, 0) + ln(1 + e^{-|z|})
            let sp = zi.max(T::zero()) + (-zi.abs()).exp().ln_1p();
            total = total + sp - yi * zi;
        }
        let out = Tensor::from_vec(1, 1, vec![total * weight])?;
        Ok(self.push(Op::BceWithLogits { logits, labels: labels.to_vec(), weight }, out))
    }

    /// Reverse sweep from a scalar `loss`; returns dense parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, T::one()));
        let mut out = Gradients::zeros_like(self.store);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.grads[id.0].add_assign(&dy),
                Op::Gather { table, ids } => {
                    let g = &mut out.grads[table.0];
                    for (r, &i) in ids.iter().enumerate() {
                        for (a, &b) in g.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *a = *a + b;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm_into(&dy, false, bv, true, T::zero(), &mut da);
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_into(av, true, &dy, false, T::zero(), &mut db);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    // y = a b^T: da = dy b, db = dy^T a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm_into(&dy, false, bv, false, T::zero(), &mut da);
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_into(&dy, true, av, false, T::zero(), &mut db);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::AddRow(a, row) => {
                    let mut db = Tensor::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, &g) in db.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *o = *o + g;
                        }
                    }
                    accumulate(&mut grads, *a, dy);
                    accumulate(&mut grads, *row, db);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = dy.clone();
                    for (o, &y) in da.data_mut().iter_mut().zip(bv.data()) {
                        *o = *o * y;
                    }
                    let mut db = dy;
                    for (o, &x) in db.data_mut().iter_mut().zip(av.data()) {
                        *o = *o * x;
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let mut da = dy;
                    for (o, &x) in da.data_mut().iter_mut().zip(av.data()) {
                        *o = *o * silu_grad(x);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MaskedSilu { s, mask, row_scale } => {
                    let sv = self.value(*s);
                    let mut ds = dy;
                    for r in 0..sv.rows() {
                        let sc = row_scale[r];
                        let (src, m) = (sv.row(r), mask.row(r));
                        for (c, o) in ds.row_mut(r).iter_mut().enumerate() {
                            *o = *o * sc * m[c] * silu_grad(src[c] * m[c]);
                        }
                    }
                    accumulate(&mut grads, *s, ds);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        accumulate(&mut grads, p, dy.slice_cols(off, w));
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.shape(p)[0];
                        accumulate(&mut grads, p, dy.slice_rows(off, h));
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let [r, c] = self.shape(*a);
                    let mut da = Tensor::zeros(r, c);
                    for i in 0..r {
                        da.row_mut(i)[*start..*start + dy.cols()].copy_from_slice(dy.row(i));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceRows(a, start) => {
                    let [r, c] = self.shape(*a);
                    let mut da = Tensor::zeros(r, c);
                    for i in 0..dy.rows() {
                        da.row_mut(start + i).copy_from_slice(dy.row(i));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SelectRows(a, idx) => {
                    let [r, c] = self.shape(*a);
                    let mut da = Tensor::zeros(r, c);
                    for (o, &i) in idx.iter().enumerate() {
                        for (x, &g) in da.row_mut(i).iter_mut().zip(dy.row(o)) {
                            *x = *x + g;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Standardize { x, inv_std } => {
                    let y = node.value.as_ref().expect("standardize output");
                    let d = T::of(y.cols() as f64);
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let sum_g = gr.iter().fold(T::zero(), |a, &b| a + b);
                        let sum_gy = gr.iter().zip(yr).fold(T::zero(), |a, (&g, &yv)| a + g * yv);
                        let k = inv_std[r] / d;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = k * (d * gr[c] - sum_g - yr[c] * sum_gy);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GroupAffine { x, slots, gains, biases } => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dx = dy.clone();
                    let mut dg = vec![Tensor::zeros(1, d); gains.len()];
                    let mut db = vec![Tensor::zeros(1, d); gains.len()];
                    for (r, &s) in slots.iter().enumerate() {
                        let g = self.value(gains[s]).row(0);
                        let (xr, gr) = (xv.row(r), dy.row(r));
                        for c in 0..d {
                            dx.row_mut(r)[c] = gr[c] * g[c];
                            dg[s].row_mut(0)[c] = dg[s].get(0, c) + gr[c] * xr[c];
                            db[s].row_mut(0)[c] = db[s].get(0, c) + gr[c];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    for (s, (g, b)) in dg.into_iter().zip(db).enumerate() {
                        accumulate(&mut grads, gains[s], g);
                        accumulate(&mut grads, biases[s], b);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("softmax output");
                    let mut da = dy;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot = da.row(r).iter().zip(yr).fold(T::zero(), |s, (&g, &p)| s + g * p);
                        for (o, &p) in da.row_mut(r).iter_mut().zip(yr) {
                            *o = p * (*o - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::BceWithLogits { logits, labels, weight } => {
                    let z = self.value(*logits);
                    let g = dy.get(0, 0) * *weight;
                    let dz: Vec<T> =
                        z.data().iter().zip(labels).map(|(&zi, &yi)| (sigmoid(zi) - yi) * g).collect();
                    accumulate(&mut grads, *logits, Tensor::from_vec(dz.len(), 1, dz)?);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
