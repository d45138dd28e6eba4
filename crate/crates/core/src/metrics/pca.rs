use crate::error::{Error, Result};
use crate::mathcore::Matrix;

const TOL: f64 = 1e-8;
const MAX_ITERS: usize = 1000;

/// Principal axes found by power iteration with deflation.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm axes, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each axis.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

#[derive(Debug, Clone)]
pub struct PcaProjection {
    pub scores: Matrix,
    pub explained_variance: Vec<f64>,
}

fn mat_vec(c: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d)
        .map(|i| {
            c[i * d..(i + 1) * d]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for u in basis {
        let p = dot(v, u);
        v.iter_mut().zip(u).for_each(|(x, ui)| *x -= p * ui);
    }
}

/// Fixed, non-degenerate start vector.
fn start_vector(d: usize, k: usize) -> Vec<f64> {
    (0..d)
        .map(|i| 1.0 + ((i * 7 + k * 13) as f64 * 0.618_033_988_75).fract())
        .collect()
}

impl Pca {
    pub fn fit(data: &Matrix, n_components: usize) -> Result<Self> {
        let (n, d) = (data.rows(), data.cols());
        if n < 2 || d == 0 {
            return Err(Error::DegenerateCovariance);
        }
        let mut mean = vec![0.0f64; d];
        for r in 0..n {
            for (m, &x) in mean.iter_mut().zip(data.row(r)) {
                *m += f64::from(x);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let mut cov = vec![0.0f64; d * d];
        let mut centered = vec![0.0f64; d];
        for r in 0..n {
            for (c, (&x, m)) in centered.iter_mut().zip(data.row(r).iter().zip(&mean)) {
                *c = f64::from(x) - m;
            }
            for i in 0..d {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                for (acc, &cj) in cov[i * d..(i + 1) * d].iter_mut().zip(&centered) {
                    *acc += ci * cj;
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
        let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        let scale: f64 = mean.iter().map(|m| m * m).sum::<f64>().max(1.0);
        if total_variance <= 1e-12 * scale {
            return Err(Error::DegenerateCovariance);
        }

        let k = n_components.min(d);
        let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut variances = Vec::with_capacity(k);
        let floor = total_variance * 1e-14;
        for c in 0..k {
            let mut v = start_vector(d, c);
            orthogonalize(&mut v, &components);
            normalize(&mut v);
            let mut lambda = 0.0;
            for _ in 0..MAX_ITERS {
                let mut w = mat_vec(&cov, &v);
                for (u, &lu) in components.iter().zip(&variances) {
                    let p = dot(u, &v) * lu;
                    w.iter_mut().zip(u).for_each(|(x, ui)| *x -= p * ui);
                }
                orthogonalize(&mut w, &components);
                let norm = normalize(&mut w);
                if norm <= floor {
                    lambda = 0.0;
                    break;
                }
                let delta: f64 = w
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                v = w;
                lambda = norm;
                if delta < TOL {
                    break;
                }
            }
            if lambda > 0.0 {
                lambda = dot(&v, &mat_vec(&cov, &v)).max(0.0);
            }
            // Sign convention: largest-magnitude coordinate positive.
            let pivot =
                v.iter().enumerate().fold(
                    0,
                    |best, (i, x)| if x.abs() > v[best].abs() { i } else { best },
                );
            if v[pivot] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            variances.push(lambda);
        }
        Ok(Self {
            mean,
            components,
            explained_variance: variances,
            total_variance,
        })
    }

    pub fn transform(&self, data: &Matrix) -> Result<Matrix> {
        let d = self.mean.len();
        if data.cols() != d {
            return Err(Error::ShapeMismatch(format!(
                "pca fitted on {d} columns, got {}",
                data.cols()
            )));
        }
        let k = self.components.len();
        let mut out = Vec::with_capacity(data.rows() * k);
        let mut centered = vec![0.0f64; d];
        for r in 0..data.rows() {
            for (c, (&x, m)) in centered.iter_mut().zip(data.row(r).iter().zip(&self.mean)) {
                *c = f64::from(x) - m;
            }
            for u in &self.components {
                out.push(dot(&centered, u) as f32);
            }
        }
        Matrix::from_vec(data.rows(), k, out)
    }
}

/// Fits on `data` and returns its coordinates in the top `components` axes.
pub fn pca_project(data: &Matrix, components: usize) -> Result<PcaProjection> {
    let pca = Pca::fit(data, components)?;
    Ok(PcaProjection {
        scores: pca.transform(data)?,
        explained_variance: pca.explained_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_variances() {
        // Points spread 3x wider along x than y.
        let rows: Vec<Vec<f32>> = [(-3.0, -1.0), (3.0, -1.0), (-3.0, 1.0), (3.0, 1.0)]
            .iter()
            .map(|&(x, y)| vec![x, y])
            .collect();
        let p = pca_project(&Matrix::from_rows(&rows).unwrap(), 2).unwrap();
        assert!((p.explained_variance[0] - 12.0).abs() < 1e-6);
        assert!((p.explained_variance[1] - 4.0 / 3.0).abs() < 1e-6);
        assert!((p.scores.get(0, 0).abs() - 3.0).abs() < 1e-5);
    }

    #[test]
    fn collinear_points_have_empty_second_axis() {
        let rows: Vec<Vec<f32>> = (0..10)
            .map(|i| vec![i as f32, 2.0 * i as f32, -(i as f32)])
            .collect();
        let p = pca_project(&Matrix::from_rows(&rows).unwrap(), 2).unwrap();
        assert!(p.explained_variance[0] > 1.0);
        assert!(p.explained_variance[1].abs() < 1e-6);
    }

    #[test]
    fn identical_points_are_degenerate() {
        let rows = vec![vec![1.0f32, 2.0]; 5];
        assert!(matches!(
            Pca::fit(&Matrix::from_rows(&rows).unwrap(), 2),
            Err(Error::DegenerateCovariance)
        ));
    }

    #[test]
    fn deterministic() {
        let rows: Vec<Vec<f32>> = (0..20)
            .map(|i| vec![(i as f32).sin(), (i as f32 * 0.7).cos(), i as f32 * 0.1])
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let a = pca_project(&m, 2).unwrap();
        let b = pca_project(&m, 2).unwrap();
        assert!(a.scores.bitwise_eq(&b.scores));
    }
}
