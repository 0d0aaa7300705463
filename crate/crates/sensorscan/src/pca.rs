//! Principal component analysis via a cyclic Jacobi eigensolver on the
//! covariance matrix. Deterministic, no external linear-algebra backend.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcaFit {
    pub mean: Vec<f64>,
    /// dims×D matrix; rows are orthonormal principal axes ordered by
    /// descending variance. Sign convention: within each axis, the
    /// largest-magnitude loading is positive.
    pub components: Tensor,
    pub explained_variance: Vec<f64>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and a matrix whose COLUMNS are the matching eigenvectors.
fn jacobi_eigen(mut a: Tensor) -> (Vec<f64>, Tensor) {
    let d = a.rows();
    assert_eq!(d, a.cols(), "jacobi: matrix must be square");
    let mut v = Tensor::zeros(&[d, d]);
    for i in 0..d {
        v.set(i, i, 1.0);
    }
    let scale: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| (0..d).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a.at(p, q) * a.at(p, q))
            .sum::<f64>()
            .sqrt();
        if off < 1e-14 * scale {
            break;
        }
        for p in 0..d.saturating_sub(1) {
            for q in (p + 1)..d {
                let apq = a.at(p, q);
                if apq.abs() < 1e-300 * scale {
                    continue;
                }
                let theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let (app, aqq) = (a.at(p, p), a.at(q, q));
                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..d {
                    if k != p && k != q {
                        let akp = a.at(k, p);
                        let akq = a.at(k, q);
                        a.set(k, p, c * akp - s * akq);
                        a.set(p, k, c * akp - s * akq);
                        a.set(k, q, s * akp + c * akq);
                        a.set(q, k, s * akp + c * akq);
                    }
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let eigvals = (0..d).map(|i| a.at(i, i)).collect();
    (eigvals, v)
}

/// Fit PCA on the rows of `data` (N×D), keeping `dims` components.
pub fn fit(data: &Tensor, dims: usize) -> Result<PcaFit> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(Error::Validation(format!(
            "pca: need at least 2 samples, got {n}"
        )));
    }
    if dims == 0 || dims > d.min(n) {
        return Err(Error::Validation(format!(
            "pca: dims = {dims} must lie in 1..={} (min of N={n} and D={d})",
            d.min(n)
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(data.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for (j, (o, &x)) in centered.row_mut(i).iter_mut().zip(data.row(i)).enumerate() {
            *o = x - mean[j];
        }
    }
    let cov = centered.matmul_ta(&centered).scale(1.0 / (n as f64 - 1.0));
    let (eigvals, eigvecs) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b)));

    let mut components = Tensor::zeros(&[dims, d]);
    let mut explained = Vec::with_capacity(dims);
    for (r, &col) in order.iter().take(dims).enumerate() {
        let axis: Vec<f64> = (0..d).map(|k| eigvecs.at(k, col)).collect();
        // Sign convention: the largest-magnitude loading is positive.
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| {
                a.abs()
                    .partial_cmp(&b.abs())
                    .unwrap()
                    .then(j.cmp(i)) // earliest index wins exact ties
            })
            .map(|(_, &v)| v)
            .unwrap_or(1.0);
        let flip = if lead < 0.0 { -1.0 } else { 1.0 };
        for (o, &x) in components.row_mut(r).iter_mut().zip(&axis) {
            *o = flip * x;
        }
        explained.push(eigvals[col].max(0.0));
    }
    Ok(PcaFit {
        mean,
        components,
        explained_variance: explained,
    })
}

impl PcaFit {
    /// Project rows of `data` onto the fitted axes: (x − mean)·Wᵀ.
    pub fn transform(&self, data: &Tensor) -> Tensor {
        let (n, d) = (data.rows(), data.cols());
        assert_eq!(d, self.mean.len(), "pca transform: dimension mismatch");
        let mut centered = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for (j, (o, &x)) in centered.row_mut(i).iter_mut().zip(data.row(i)).enumerate() {
                *o = x - self.mean[j];
            }
        }
        centered.matmul_tb(&self.components)
    }

    /// Map projected points back to the original space: y·W + mean.
    pub fn inverse_transform(&self, projected: &Tensor) -> Tensor {
        let mut out = projected.matmul(&self.components);
        for i in 0..out.rows() {
            for (o, &m) in out.row_mut(i).iter_mut().zip(&self.mean) {
                *o += m;
            }
        }
        out
    }
}

/// Convenience wrapper: center and project onto the top-2 principal axes.
pub fn project_2d(data: &Tensor) -> Result<Tensor> {
    Ok(fit(data, 2)?.transform(data))
}
