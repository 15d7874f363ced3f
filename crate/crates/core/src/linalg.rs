use crate::error::{PtqError, Result};

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(PtqError::ShapeMismatch(format!(
                "{rows}x{cols} matrix from {} elements",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self * rhs`, accumulated in f64.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(PtqError::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = vec![0.0f32; self.rows * rhs.cols];
        let mut acc = vec![0.0f64; rhs.cols];
        for i in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let a = a as f64;
                for (dst, &b) in acc.iter_mut().zip(rhs.row(k)) {
                    *dst += a * b as f64;
                }
            }
            for (o, a) in out[i * rhs.cols..(i + 1) * rhs.cols].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: rhs.cols,
            data: out,
        })
    }

    pub fn relu_in_place(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

/// `||a - b||_F / ||b||_F`; zero when both are zero.
pub fn relative_error(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PtqError::ShapeMismatch(format!("{} vs {} elements", a.len(), b.len())));
    }
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        num += d * d;
        den += (y as f64) * (y as f64);
    }
    if num == 0.0 {
        return Ok(0.0);
    }
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::new(3, 1, vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data, vec![-2.0, -2.0]);
        assert!(b.matmul(&b).is_err());
        assert_eq!(Matrix::identity(3).matmul(&b).unwrap(), b);
    }

    #[test]
    fn rel_err() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((relative_error(&[0.0, 1.0], &[0.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    }
}
