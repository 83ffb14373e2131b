//! Small dense vectors and square orthonormal matrices.
//!
//! The scene dimension is tiny (2-4 in practice), so plain `Vec` storage
//! beats pulling in a matrix library.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

pub fn sub<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(x, y)| *x - *y).collect()
}

pub fn add<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

pub fn scale<S: Scalar>(a: &[S], c: S) -> Vec<S> {
    a.iter().map(|x| *x * c).collect()
}

/// `a + c * b`, in place.
pub fn axpy<S: Scalar>(a: &mut [S], c: S, b: &[S]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += c * *y;
    }
}

pub fn distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x - *y) * (*x - *y))
        .sum::<S>()
        .sqrt()
}

pub fn check_dim<S: Scalar>(v: &[S], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Dense square matrix, row major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    dim: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for r in rows {
            check_dim(r, dim)?;
            data.extend_from_slice(r);
        }
        Ok(Matrix { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![S::zero(); dim * dim];
        for i in 0..dim {
            data[i * dim + i] = S::one();
        }
        Matrix { dim, data }
    }

    /// Random orthonormal matrix: Gaussian columns through modified
    /// Gram-Schmidt, run twice for orthogonality near machine precision.
    pub fn random_orthonormal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut cols: Vec<Vec<S>> = (0..dim)
            .map(|_| (0..dim).map(|_| S::std_normal(rng)).collect())
            .collect();
        for _pass in 0..2 {
            for j in 0..dim {
                for i in 0..j {
                    let proj = dot(&cols[j], &cols[i]);
                    let prev = cols[i].clone();
                    axpy(&mut cols[j], -proj, &prev);
                }
                let n = norm(&cols[j]);
                let inv = if n > S::zero() { S::one() / n } else { S::zero() };
                for v in cols[j].iter_mut() {
                    *v *= inv;
                }
            }
        }
        let mut data = vec![S::zero(); dim * dim];
        for (j, col) in cols.iter().enumerate() {
            for i in 0..dim {
                data[i * dim + j] = col[i];
            }
        }
        Matrix { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.dim + j]
    }

    /// `R x`.
    pub fn mul_vec(&self, x: &[S]) -> Result<Vec<S>> {
        check_dim(x, self.dim)?;
        Ok((0..self.dim)
            .map(|i| dot(&self.data[i * self.dim..(i + 1) * self.dim], x))
            .collect())
    }

    /// `R^T x`.
    pub fn tr_mul_vec(&self, x: &[S]) -> Result<Vec<S>> {
        check_dim(x, self.dim)?;
        let mut out = vec![S::zero(); self.dim];
        for i in 0..self.dim {
            let xi = x[i];
            for j in 0..self.dim {
                out[j] += self.data[i * self.dim + j] * xi;
            }
        }
        Ok(out)
    }

    /// Max entry of `|R^T R - I|`.
    pub fn orthonormality_defect(&self) -> S {
        let mut worst = S::zero();
        for i in 0..self.dim {
            for j in 0..self.dim {
                let mut acc = S::zero();
                for k in 0..self.dim {
                    acc += self.get(k, i) * self.get(k, j);
                }
                let target = if i == j { S::one() } else { S::zero() };
                worst = worst.max((acc - target).abs());
            }
        }
        worst
    }

    pub fn check_orthonormal(&self, tol: S) -> Result<()> {
        let defect = self.orthonormality_defect();
        if defect > tol {
            return Err(Error::NotOrthonormal {
                defect: defect.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_orthonormal_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dim in [2usize, 3, 5] {
            let m = Matrix::<f64>::random_orthonormal(dim, &mut rng);
            assert!(m.orthonormality_defect() < 1e-12);
        }
    }

    #[test]
    fn tr_mul_inverts_mul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Matrix::<f64>::random_orthonormal(3, &mut rng);
        let x = vec![0.3, -1.2, 2.5];
        let y = m.mul_vec(&x).unwrap();
        let back = m.tr_mul_vec(&y).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_dims() {
        let m = Matrix::<f64>::identity(2);
        assert!(m.mul_vec(&[1.0, 2.0, 3.0]).is_err());
    }
}
