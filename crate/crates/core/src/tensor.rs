//! Dense row-major `f64` tensors and the matrix products used throughout the
//! engine.
//!
//! All products use a fixed loop order so results are reproducible bit for bit
//! across runs. Matrices are simply rank-2 tensors; batches of flattened
//! examples are stored as `[N, D]`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// `n x n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err("Tensor::from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Tensor::new(vec![r, c], data)
    }

    /// Vector (rank-1 tensor).
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err(op, format!("expected a matrix, got {:?}", self.shape))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.check_same(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Self> {
        self.check_same(other, "mul_elem")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(shape_err("dot", format!("{} vs {}", self.len(), other.len())));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `‖self − other‖ / max(‖self‖, ‖other‖)` in the Frobenius norm.
    pub fn rel_diff(&self, other: &Tensor) -> f64 {
        let scale = self.norm().max(other.norm()).max(f64::MIN_POSITIVE);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            / scale
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums let the compiler vectorize the loop.
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Tile height and width of the [`matmul`] micro-kernel. A 4×4 tile of
/// accumulators stays in registers across the whole inner dimension.
const MR: usize = 4;
const NR: usize = 4;

/// `a · b`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    // Pack b into contiguous column panels of width NR (zero padded) so the
    // kernel reads it sequentially.
    let panels = n.div_ceil(NR);
    let mut packed = vec![0.0; panels * k * NR];
    for p in 0..k {
        for j in 0..n {
            packed[(j / NR) * k * NR + p * NR + j % NR] = b.data[p * n + j];
        }
    }
    let mut out = vec![0.0; m * n];
    for i0 in (0..m).step_by(MR) {
        let mr = MR.min(m - i0);
        for jb in 0..panels {
            let panel = &packed[jb * k * NR..(jb + 1) * k * NR];
            let mut acc = [[0.0; NR]; MR];
            if mr == MR {
                let rows: [&[f64]; MR] = std::array::from_fn(|r| &a.data[(i0 + r) * k..(i0 + r + 1) * k]);
                for (p, bv) in panel.chunks_exact(NR).enumerate() {
                    for r in 0..MR {
                        let av = rows[r][p];
                        for c in 0..NR {
                            acc[r][c] += av * bv[c];
                        }
                    }
                }
            } else {
                for r in 0..mr {
                    let row = &a.data[(i0 + r) * k..(i0 + r + 1) * k];
                    for (av, bv) in row.iter().zip(panel.chunks_exact(NR)) {
                        for c in 0..NR {
                            acc[r][c] += av * bv[c];
                        }
                    }
                }
            }
            let j0 = jb * NR;
            let nc = NR.min(n - j0);
            for r in 0..mr {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + nc].copy_from_slice(&acc[r][..nc]);
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ`
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, k) = a.dims2("matmul_a_bt")?;
    let (_, k2) = b.dims2("matmul_a_bt")?;
    if k != k2 {
        return Err(shape_err(
            "matmul_a_bt",
            format!("{:?} x {:?}ᵀ", a.shape, b.shape),
        ));
    }
    matmul(a, &b.transpose()?)
}

/// `aᵀ · b`
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, _) = a.dims2("matmul_at_b")?;
    let (k2, _) = b.dims2("matmul_at_b")?;
    if k != k2 {
        return Err(shape_err(
            "matmul_at_b",
            format!("{:?}ᵀ x {:?}", a.shape, b.shape),
        ));
    }
    matmul(&a.transpose()?, b)
}

/// Matrix-vector product `a · x`.
pub fn matvec(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (m, k) = a.dims2("matvec")?;
    if x.len() != k {
        return Err(shape_err("matvec", format!("{:?} x [{}]", a.shape, x.len())));
    }
    Ok((0..m).map(|i| dot(&a.data[i * k..(i + 1) * k], x)).collect())
}

/// `aᵀ · x`
pub fn matvec_t(a: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (m, k) = a.dims2("matvec_t")?;
    if x.len() != m {
        return Err(shape_err("matvec_t", format!("{:?}ᵀ x [{}]", a.shape, x.len())));
    }
    let mut out = vec![0.0; k];
    for (i, &xi) in x.iter().enumerate() {
        for (o, av) in out.iter_mut().zip(&a.data[i * k..(i + 1) * k]) {
            *o += xi * av;
        }
    }
    Ok(out)
}

impl std::fmt::Display for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let [r, c] = self.shape[..] {
            for i in 0..r {
                let row: Vec<String> = (0..c).map(|j| format!("{:>10.4}", self.at(i, j))).collect();
                writeln!(f, "[{}]", row.join(", "))?;
            }
            Ok(())
        } else {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        }
    }
}

impl From<Vec<f64>> for Tensor {
    fn from(v: Vec<f64>) -> Self {
        Tensor::vector(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::SnfError;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum()
        })
    }

    #[test]
    fn identity_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 3], &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
    }

    #[test]
    fn small_product() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[7, 5], &mut rng);
        let b = Tensor::randn(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        let o = naive(&a, &b);
        for (x, y) in c.data().iter().zip(o.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = a.transpose().unwrap();
        let bt = b.transpose().unwrap();
        assert!(matmul_at_b(&at, &b).unwrap().rel_diff(&o) < 1e-14);
        assert!(matmul_a_bt(&a, &bt).unwrap().rel_diff(&o) < 1e-14);
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(SnfError::ShapeMismatch { .. })));
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }
}
