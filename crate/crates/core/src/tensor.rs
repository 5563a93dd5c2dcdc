//! Dense row-major `f64` tensors and the few kernels the rest of the crate needs.
//!
//! Every constructor and operation rejects NaN/Inf, so a `Tensor` that exists
//! is always finite.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Vectors whose norm falls below this are rejected by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor { shape: t.shape, data: t.data }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(dim_err(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(dim_err(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    /// `(h, w, d)` of a rank-3 feature map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, d] => Ok((h, w, d)),
            _ => Err(dim_err(format!("expected H×W×D, got shape {:?}", self.shape))),
        }
    }

    /// Last-axis slice `i` of the tensor viewed as `(len / last_dim) × last_dim`.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.last_dim())
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Elementwise map; fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        checked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect(), "map")
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        checked(self.shape.clone(), data, op)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

fn checked(shape: Vec<usize>, data: Vec<f64>, op: &'static str) -> Result<Tensor> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(op));
    }
    Ok(Tensor { shape, data })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err(format!("matmul: {m}×{k} by {k2}×{n}")));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    checked(vec![m, n], out, "matmul")
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(dim_err(format!("matmul_nt: {m}×{k} by ({n}×{k2})ᵀ")));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(dot(a.row(i), b.row(j)));
        }
    }
    checked(vec![m, n], out, "matmul_nt")
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Normalizes every last-axis vector to unit length.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let mut out = Vec::with_capacity(v.len());
    for (i, row) in v.rows().enumerate() {
        let n = norm(row);
        if n <= NORM_EPS {
            return Err(Error::Degenerate(format!("row {i} has norm {n:e}")));
        }
        out.extend(row.iter().map(|x| x / n));
    }
    checked(v.shape.clone(), out, "l2_normalize")
}

/// Cell boundaries for splitting `extent` into `g` near-equal parts; the last
/// `extent % g` cells are one element larger.
pub fn grid_cells(extent: usize, g: usize) -> Vec<std::ops::Range<usize>> {
    let base = extent / g;
    let rem = extent % g;
    let mut start = 0;
    (0..g)
        .map(|i| {
            let len = if i >= g - rem { base + 1 } else { base };
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Adaptive max pooling of an `H×W×D` map to a `g×g` grid, flattened row-major
/// to `g²×D`.
pub fn max_pool_grid(x: &Tensor, g: usize) -> Result<Tensor> {
    let (h, w, d) = x.dims3()?;
    if g == 0 || h < g || w < g {
        return Err(dim_err(format!("cannot pool {h}×{w} to a {g}×{g} grid")));
    }
    let rows = grid_cells(h, g);
    let cols = grid_cells(w, g);
    let mut out = Vec::with_capacity(g * g * d);
    for rr in &rows {
        for cr in &cols {
            let mut cell = vec![f64::NEG_INFINITY; d];
            for y in rr.clone() {
                for xx in cr.clone() {
                    let px = &x.data[(y * w + xx) * d..(y * w + xx + 1) * d];
                    for (m, &v) in cell.iter_mut().zip(px) {
                        *m = m.max(v);
                    }
                }
            }
            out.extend(cell);
        }
    }
    checked(vec![g * g, d], out, "max_pool_grid")
}

pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log(softmax(x))`, computed without forming the softmax.
pub fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let out = x.rows().flat_map(softmax_slice).collect();
    checked(x.shape.clone(), out, "softmax_lastdim")
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    x.map(sigmoid_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn constructor_rejects_bad_shapes_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        assert_eq!(matmul(&Tensor::identity(3).unwrap(), &a).unwrap(), a);
        let z = Tensor::zeros(&[3, 2]).unwrap();
        assert_eq!(matmul(&a, &z).unwrap(), Tensor::zeros(&[3, 2]).unwrap());
        let r = matmul(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &m(&[&[1.0], &[1.0]])).unwrap();
        assert_eq!(r, m(&[&[3.0], &[7.0]]));
        assert!(matches!(matmul(&a, &m(&[&[1.0]])), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_nt_agrees_with_transpose() {
        let a = m(&[&[1.0, -2.0], &[0.5, 3.0], &[2.0, 2.0]]);
        let b = m(&[&[4.0, 1.0], &[-1.0, 0.25]]);
        assert_eq!(
            matmul_nt(&a, &b).unwrap(),
            matmul(&a, &b.transpose().unwrap()).unwrap()
        );
    }

    #[test]
    fn l2_normalize_examples() {
        let v = l2_normalize(&m(&[&[3.0, 4.0]])).unwrap();
        assert!((v.data()[0] - 0.6).abs() < 1e-15 && (v.data()[1] - 0.8).abs() < 1e-15);
        let u = m(&[&[0.0, 1.0]]);
        assert_eq!(l2_normalize(&u).unwrap(), u);
        assert!(matches!(l2_normalize(&m(&[&[0.0, 0.0]])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn grid_cells_put_remainder_at_high_end() {
        assert_eq!(grid_cells(7, 3), vec![0..2, 2..4, 4..7]);
        assert_eq!(grid_cells(8, 3), vec![0..2, 2..5, 5..8]);
        assert_eq!(grid_cells(3, 3), vec![0..1, 1..2, 2..3]);
    }

    #[test]
    fn max_pool_grid_examples() {
        let c = Tensor::full(&[5, 7, 2], 1.5).unwrap();
        let p = max_pool_grid(&c, 3).unwrap();
        assert_eq!(p.shape(), &[9, 2]);
        assert!(p.data().iter().all(|&v| v == 1.5));

        let x = Tensor::new(vec![3, 3, 2], (0..18).map(f64::from).collect()).unwrap();
        assert_eq!(max_pool_grid(&x, 3).unwrap().data(), x.data());

        let mut one = Tensor::zeros(&[6, 6, 1]).unwrap();
        one.data_mut()[0] = 1.0;
        let p = max_pool_grid(&one, 3).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        assert!(max_pool_grid(&Tensor::zeros(&[2, 5, 1]).unwrap(), 3).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_lastdim(&Tensor::full(&[2, 4], 3.0).unwrap()).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let s = softmax_lastdim(&m(&[&[0.0, 1000.0]])).unwrap();
        assert!(s.data()[0] < 1e-300 && (s.data()[1] - 1.0).abs() < 1e-15);

        // e^1, e^2, e^3 over their sum, evaluated independently.
        let (e1, e2, e3) = (1f64.exp(), 2f64.exp(), 3f64.exp());
        let z = e1 + e2 + e3;
        let s = softmax_lastdim(&m(&[&[1.0, 2.0, 3.0]])).unwrap();
        for (got, want) in s.data().iter().zip([e1 / z, e2 / z, e3 / z]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(2.0) - 0.8807970779).abs() < 1e-10);
        for x in [-30.0, -1.5, 0.3, 7.0] {
            assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() < 1e-15);
        }
        assert!(sigmoid_scalar(-800.0) >= 0.0);
    }

    #[test]
    fn json_form_is_shape_and_data() {
        let t = m(&[&[1.0, 2.0]]);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"shape":[1,2],"data":[1.0,2.0]}"#);
        assert_eq!(serde_json::from_str::<Tensor>(&s).unwrap(), t);
        assert!(serde_json::from_str::<Tensor>(r#"{"shape":[2,2],"data":[1.0]}"#).is_err());
    }

    fn mat(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in mat(3, 4), b in mat(4, 2), c in mat(2, 5)) {
            let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = l.max_abs().max(1.0);
            for (x, y) in l.data().iter().zip(r.data()) {
                prop_assert!((x - y).abs() / scale < 1e-9);
            }
        }

        #[test]
        fn normalized_rows_have_unit_norm(a in mat(4, 6)) {
            prop_assume!(a.rows().all(|r| norm(r) > 1e-6));
            let n = l2_normalize(&a).unwrap();
            for r in n.rows() {
                prop_assert!((norm(r) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_sums_to_one_and_ignores_shift(a in mat(3, 5), shift in -50.0f64..50.0) {
            let s = softmax_lastdim(&a).unwrap();
            let t = softmax_lastdim(&a.map(|v| v + shift).unwrap()).unwrap();
            for r in s.rows() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(r.iter().all(|&v| v >= 0.0));
            }
            for (x, y) in s.data().iter().zip(t.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn grid_pool_is_idempotent_at_grid_size(d in prop::collection::vec(-1.0f64..1.0, 9 * 3)) {
            let x = Tensor::new(vec![3, 3, 3], d).unwrap();
            let once = max_pool_grid(&x, 3).unwrap();
            let twice = max_pool_grid(&once.clone().reshape(vec![3, 3, 3]).unwrap(), 3).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
