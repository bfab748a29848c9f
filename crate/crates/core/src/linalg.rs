//! LU factorization with partial pivoting, and the determinant, solve and
//! inverse routines built on it.

use crate::error::{shape_err, Result, SnfError};
use crate::tensor::Tensor;

/// Pivots smaller than this are treated as exact zeros.
pub const SINGULAR_PIVOT: f64 = 1e-300;

/// Packed `P·A = L·U` factorization. `L` is unit lower triangular and shares
/// storage with `U`.
#[derive(Clone, Debug)]
pub struct LuFactorization {
    lu: Tensor,
    /// `perm[i]` is the row of `A` that ended up in row `i`.
    perm: Vec<usize>,
    sign: f64,
}

pub fn lu_factor(a: &Tensor) -> Result<LuFactorization> {
    let n = match a.shape() {
        [r, c] if r == c => *r,
        s => return Err(shape_err("lu_factor", format!("expected square matrix, got {:?}", s))),
    };
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    let m = lu.data_mut();
    for k in 0..n {
        let mut p = k;
        let mut best = m[k * n + k].abs();
        for i in k + 1..n {
            let v = m[i * n + k].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best < SINGULAR_PIVOT {
            return Err(SnfError::SingularMatrix {
                index: k,
                magnitude: best,
            });
        }
        if p != k {
            for j in 0..n {
                m.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
            sign = -sign;
        }
        let pivot = m[k * n + k];
        let (upper, lower) = m.split_at_mut((k + 1) * n);
        let pivot_row = &upper[k * n + k + 1..k * n + n];
        for i in 0..n - k - 1 {
            let row = &mut lower[i * n..(i + 1) * n];
            let l = row[k] / pivot;
            row[k] = l;
            if l != 0.0 {
                for (r, u) in row[k + 1..].iter_mut().zip(pivot_row) {
                    *r -= l * u;
                }
            }
        }
    }
    Ok(LuFactorization { lu, perm, sign })
}

impl LuFactorization {
    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn permutation_sign(&self) -> f64 {
        self.sign
    }

    pub fn lower(&self) -> Tensor {
        let n = self.dim();
        Tensor::from_fn(&[n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            match i.cmp(&j) {
                std::cmp::Ordering::Greater => self.lu.at(i, j),
                std::cmp::Ordering::Equal => 1.0,
                std::cmp::Ordering::Less => 0.0,
            }
        })
    }

    pub fn upper(&self) -> Tensor {
        let n = self.dim();
        Tensor::from_fn(&[n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            if i <= j {
                self.lu.at(i, j)
            } else {
                0.0
            }
        })
    }

    /// `P·A` as a matrix, for reconstruction checks.
    pub fn permute_rows(&self, a: &Tensor) -> Tensor {
        let n = self.dim();
        let c = a.cols();
        let mut out = Tensor::zeros(&[n, c]);
        for (i, &src) in self.perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(a.row(src));
        }
        out
    }

    /// `(sign, log|det A|)`.
    pub fn logabsdet(&self) -> (f64, f64) {
        let n = self.dim();
        let mut sign = self.sign;
        let mut logabs = 0.0;
        for i in 0..n {
            let u = self.lu.at(i, i);
            if u < 0.0 {
                sign = -sign;
            }
            logabs += u.abs().ln();
        }
        (sign, logabs)
    }

    /// Solves `A·X = B` for a `D × n` right-hand side.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.dim();
        if b.ndim() != 2 || b.rows() != n {
            return Err(shape_err(
                "solve",
                format!("factorization is {n}x{n}, rhs {:?}", b.shape()),
            ));
        }
        let mut x = self.permute_rows(b);
        self.solve_in_place(&mut x);
        Ok(x)
    }

    /// Solves `A·x = b` for a single vector.
    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(shape_err("solve_vec", format!("{} vs {}", b.len(), n)));
        }
        let col = Tensor::new(vec![n, 1], b.to_vec())?;
        Ok(self.solve(&col)?.into_data())
    }

    fn solve_in_place(&self, x: &mut Tensor) {
        let n = self.dim();
        let c = x.cols();
        let lu = self.lu.data();
        let xs = x.data_mut();
        // Forward substitution with unit-diagonal L.
        for i in 1..n {
            let (done, rest) = xs.split_at_mut(i * c);
            let xi = &mut rest[..c];
            for j in 0..i {
                let l = lu[i * n + j];
                if l != 0.0 {
                    for (a, b) in xi.iter_mut().zip(&done[j * c..(j + 1) * c]) {
                        *a -= l * b;
                    }
                }
            }
        }
        // Back substitution with U.
        for i in (0..n).rev() {
            let (head, tail) = xs.split_at_mut((i + 1) * c);
            let xi = &mut head[i * c..];
            for j in i + 1..n {
                let u = lu[i * n + j];
                if u != 0.0 {
                    let xj = &tail[(j - i - 1) * c..(j - i) * c];
                    for (a, b) in xi.iter_mut().zip(xj) {
                        *a -= u * b;
                    }
                }
            }
            let d = lu[i * n + i];
            for a in xi.iter_mut() {
                *a /= d;
            }
        }
    }

    pub fn inverse(&self) -> Tensor {
        let n = self.dim();
        let mut x = Tensor::zeros(&[n, n]);
        for (i, &src) in self.perm.iter().enumerate() {
            x.set(i, src, 1.0);
        }
        self.solve_in_place(&mut x);
        x
    }
}

/// Convenience: `(sign, log|det a|)` of a square matrix.
pub fn logabsdet(a: &Tensor) -> Result<(f64, f64)> {
    Ok(lu_factor(a)?.logabsdet())
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    Ok(lu_factor(a)?.inverse())
}
