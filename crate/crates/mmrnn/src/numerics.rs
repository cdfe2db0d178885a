//! Minimal dense linear algebra and gradient bookkeeping.
//!
//! Everything is 64-bit: the gradient-check tolerances used throughout the
//! test suites are not reliably achievable in f32. The containers here are
//! deliberately small and explicit; there is no general autodiff, only a
//! parameter store whose gradients are filled by hand-written backward
//! passes and checked against [`finite_diff_grad`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense vector of f64 with a fixed length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Vector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// self += alpha * other
    pub fn add_scaled(&mut self, alpha: f64, other: &Vector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.0 {
            *a *= alpha;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.0.fill(value);
    }

    pub fn sum(&self) -> f64 {
        kahan_sum(self.0.iter().copied())
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum()
    }

    /// L1-normalize into a fresh vector; an all-zero input stays all zero.
    pub fn l1_normalized(&self) -> Vector {
        let total = self.sum();
        if total <= 0.0 {
            return Vector::zeros(self.len());
        }
        Vector(self.0.iter().map(|x| x / total).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows in matrix literal".into()));
        }
        Ok(Matrix {
            data: rows.into_iter().flatten().collect(),
            rows: r,
            cols: c,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// M * v
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::Dimension(format!(
                "matvec: {}x{} matrix against length-{} vector",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = Vector::zeros(self.rows);
        for r in 0..self.rows {
            out.0[r] = self.row(r).iter().zip(v.iter()).map(|(m, x)| m * x).sum();
        }
        Ok(out)
    }

    /// M^T * v
    pub fn matvec_t(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.rows {
            return Err(Error::Dimension(format!(
                "matvec_t: {}x{} matrix against length-{} vector",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = Vector::zeros(self.cols);
        for r in 0..self.rows {
            let vr = v.0[r];
            for (o, m) in out.0.iter_mut().zip(self.row(r)) {
                *o += vr * m;
            }
        }
        Ok(out)
    }

    /// self += alpha * a * b^T  (a has `rows` entries, b has `cols` entries)
    pub fn add_outer_scaled(&mut self, alpha: f64, a: &Vector, b: &Vector) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for r in 0..self.rows {
            let ar = alpha * a.0[r];
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (m, bv) in row.iter_mut().zip(&b.0) {
                *m += ar * bv;
            }
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// self * other.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let v = self.data[r * self.cols + k];
                if v == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dest = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, o) in dest.iter_mut().zip(orow) {
                    *d += v * o;
                }
            }
        }
        Ok(out)
    }
}

/// A value slot in a [`ParamStore`]: either a vector or a matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Tensor {
    Vec(Vector),
    Mat(Matrix),
}

impl Tensor {
    pub fn n_elems(&self) -> usize {
        match self {
            Tensor::Vec(v) => v.len(),
            Tensor::Mat(m) => m.rows() * m.cols(),
        }
    }

    fn zero_like(&self) -> Tensor {
        match self {
            Tensor::Vec(v) => Tensor::Vec(Vector::zeros(v.len())),
            Tensor::Mat(m) => Tensor::Mat(Matrix::zeros(m.rows(), m.cols())),
        }
    }

    fn elems(&self) -> &[f64] {
        match self {
            Tensor::Vec(v) => v.as_slice(),
            Tensor::Mat(m) => m.data(),
        }
    }

    fn elems_mut(&mut self) -> &mut [f64] {
        match self {
            Tensor::Vec(v) => v.as_mut_slice(),
            Tensor::Mat(m) => m.data_mut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named parameter slots, each paired with a same-shape gradient accumulator.
///
/// Slot order is fixed at insertion and determines the coordinate order used
/// by [`ParamStore::flatten`] and [`finite_diff_grad`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    slots: Vec<Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert_vec(&mut self, name: &str, value: Vector) {
        self.insert(name, Tensor::Vec(value));
    }

    pub fn insert_mat(&mut self, name: &str, value: Matrix) {
        self.insert(name, Tensor::Mat(value));
    }

    fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            self.slots.iter().all(|s| s.name != name),
            "duplicate slot {name}"
        );
        let grad = value.zero_like();
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            grad,
        });
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    fn slot(&self, name: &str) -> &Slot {
        self.slots
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter slot named {name}"))
    }

    fn slot_mut(&mut self, name: &str) -> &mut Slot {
        self.slots
            .iter_mut()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter slot named {name}"))
    }

    pub fn vec(&self, name: &str) -> &Vector {
        match &self.slot(name).value {
            Tensor::Vec(v) => v,
            Tensor::Mat(_) => panic!("slot {name} is a matrix, not a vector"),
        }
    }

    pub fn mat(&self, name: &str) -> &Matrix {
        match &self.slot(name).value {
            Tensor::Mat(m) => m,
            Tensor::Vec(_) => panic!("slot {name} is a vector, not a matrix"),
        }
    }

    pub fn vec_mut(&mut self, name: &str) -> &mut Vector {
        match &mut self.slot_mut(name).value {
            Tensor::Vec(v) => v,
            Tensor::Mat(_) => panic!("slot {name} is a matrix, not a vector"),
        }
    }

    pub fn mat_mut(&mut self, name: &str) -> &mut Matrix {
        match &mut self.slot_mut(name).value {
            Tensor::Mat(m) => m,
            Tensor::Vec(_) => panic!("slot {name} is a vector, not a matrix"),
        }
    }

    pub fn grad_vec_mut(&mut self, name: &str) -> &mut Vector {
        match &mut self.slot_mut(name).grad {
            Tensor::Vec(v) => v,
            Tensor::Mat(_) => panic!("slot {name} is a matrix, not a vector"),
        }
    }

    pub fn grad_mat_mut(&mut self, name: &str) -> &mut Matrix {
        match &mut self.slot_mut(name).grad {
            Tensor::Mat(m) => m,
            Tensor::Vec(_) => panic!("slot {name} is a vector, not a matrix"),
        }
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            slot.grad.elems_mut().fill(0.0);
        }
    }

    /// One plain gradient-descent step: value -= lr * grad, gradients untouched.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        for slot in &mut self.slots {
            let grads = match &slot.grad {
                Tensor::Vec(v) => v.as_slice().to_vec(),
                Tensor::Mat(m) => m.data().to_vec(),
            };
            for (v, g) in slot.value.elems_mut().iter_mut().zip(grads) {
                *v -= lr * g;
            }
        }
        Ok(())
    }

    /// grad += scale * value, for every slot. Used for isotropic Gaussian priors.
    pub fn add_grad_l2(&mut self, scale: f64) {
        for slot in &mut self.slots {
            let values = slot.value.elems().to_vec();
            for (g, v) in slot.grad.elems_mut().iter_mut().zip(values) {
                *g += scale * v;
            }
        }
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.slots
            .iter()
            .map(|s| s.value.elems().iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    pub fn n_params(&self) -> usize {
        self.slots.iter().map(|s| s.value.n_elems()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slots
            .iter()
            .flat_map(|s| s.value.elems().iter().copied())
            .collect()
    }

    pub fn flatten_grads(&self) -> Vec<f64> {
        self.slots
            .iter()
            .flat_map(|s| s.grad.elems().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "assign_flat: expected {} values, got {}",
                self.n_params(),
                values.len()
            )));
        }
        let mut offset = 0;
        for slot in &mut self.slots {
            let elems = slot.value.elems_mut();
            elems.copy_from_slice(&values[offset..offset + elems.len()]);
            offset += elems.len();
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.slots
            .iter()
            .all(|s| s.value.elems().iter().all(|x| x.is_finite()))
    }
}

/// Compensated (Kahan) summation. The softmax normalizer and the simplex
/// checks in the test suites both need error independent of input length.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Numerically stable softmax: shifts by the max before exponentiating.
pub fn softmax(v: &Vector) -> Result<Vector> {
    if v.is_empty() {
        return Err(Error::Dimension("softmax of empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z = kahan_sum(exps.iter().copied());
    Ok(Vector(exps.into_iter().map(|e| e / z).collect()))
}

/// Jacobian-transpose product of the softmax: given s = softmax(v) and the
/// upstream gradient ds, returns dv with dv_i = s_i * (ds_i - <s, ds>).
pub fn softmax_backward(s: &Vector, ds: &Vector) -> Vector {
    debug_assert_eq!(s.len(), ds.len());
    let inner = s.dot(ds);
    Vector(
        s.iter()
            .zip(ds.iter())
            .map(|(si, dsi)| si * (dsi - inner))
            .collect(),
    )
}

/// Relative error metric used by every gradient check in the crate.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central finite differences of `loss_fn` at `store`, one estimate per
/// scalar coordinate in slot order. `loss_fn` must be deterministic.
pub fn finite_diff_grad<F>(mut loss_fn: F, store: &ParamStore, eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be > 0, got {eps}")));
    }
    let base = store.flatten();
    let mut probe = store.clone();
    let mut grad = Vec::with_capacity(base.len());
    let mut coords = base.clone();
    for i in 0..base.len() {
        coords[i] = base[i] + eps;
        probe.assign_flat(&coords)?;
        let up = loss_fn(&probe)?;
        coords[i] = base[i] - eps;
        probe.assign_flat(&coords)?;
        let down = loss_fn(&probe)?;
        coords[i] = base[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numerical(format!(
                "loss returned a non-finite value near coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}
