use crate::error::{Error, Result};
use crate::mathcore::{cosine_distance, Matrix};

/// Mean per-row cosine distance between two value snapshots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drift {
    pub mean: f32,
    /// Rows skipped because either side had zero norm.
    pub excluded: usize,
}

pub fn drift(prev: &Matrix, curr: &Matrix) -> Result<Drift> {
    if prev.rows() != curr.rows() || prev.cols() != curr.cols() {
        return Err(Error::ShapeMismatch(format!(
            "drift between {}x{} and {}x{}",
            prev.rows(),
            prev.cols(),
            curr.rows(),
            curr.cols()
        )));
    }
    let mut sum = 0.0f64;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for r in 0..prev.rows() {
        match cosine_distance(prev.row(r), curr.row(r)) {
            Ok(d) => {
                sum += f64::from(d);
                counted += 1;
            }
            Err(Error::ZeroNormVector) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if counted == 0 {
        return Err(Error::ZeroNormVector);
    }
    Ok(Drift {
        mean: (sum / counted as f64) as f32,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_snapshots_have_zero_drift() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        assert!(drift(&m, &m).unwrap().mean.abs() < 1e-6);
    }

    #[test]
    fn opposite_rows_average() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((drift(&a, &b).unwrap().mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_rows_are_excluded() {
        let a = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let d = drift(&a, &b).unwrap();
        assert_eq!(d.excluded, 1);
        assert!((d.mean - 1.0).abs() < 1e-6);
        let z = Matrix::zeros(2, 2);
        assert!(matches!(drift(&z, &b), Err(Error::ZeroNormVector)));
    }

    #[test]
    fn shape_mismatch() {
        assert!(drift(&Matrix::zeros(2, 2), &Matrix::zeros(3, 2)).is_err());
    }
}
