use nalgebra::{DMatrix, SymmetricEigen};

use super::mat::{gemm, Mat};
use crate::error::{Error, Result};

/// Principal axes of the rows of a matrix, largest variance first.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `cols x k`; column `c` is the `c`-th principal axis.
    pub components: Mat,
    pub variances: Vec<f64>,
}

impl Pca {
    /// Eigen-decomposes the sample covariance and keeps the top `k` axes. Each axis is
    /// sign-fixed so its largest-magnitude loading is positive (first such index on ties).
    pub fn fit(x: &Mat, k: usize) -> Result<Pca> {
        let (n, d) = x.shape();
        if k > d {
            return Err(Error::shape(
                "pca_project",
                format!("k = {k} exceeds {d} columns"),
            ));
        }
        if n < 2 {
            return Err(Error::UndefinedMetric(format!(
                "PCA needs at least 2 rows, got {n}"
            )));
        }
        let mean = x.column_means();
        let centered = center(x, &mean);
        let mut cov = Mat::zeros(d, d);
        gemm(
            1.0 / (n - 1) as f64,
            &centered,
            true,
            &centered,
            false,
            0.0,
            &mut cov,
        );
        // symmetrize exactly so the eigensolver sees a symmetric input
        for i in 0..d {
            for j in (i + 1)..d {
                let v = 0.5 * (cov.get(i, j) + cov.get(j, i));
                cov.set(i, j, v);
                cov.set(j, i, v);
            }
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.data()));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut components = Mat::zeros(d, k);
        let mut variances = Vec::with_capacity(k);
        for (c, &idx) in order.iter().take(k).enumerate() {
            let axis = eig.eigenvectors.column(idx);
            let mut pivot = 0;
            for r in 1..d {
                if axis[r].abs() > axis[pivot].abs() {
                    pivot = r;
                }
            }
            let sign = if axis[pivot] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..d {
                components.set(r, c, sign * axis[r]);
            }
            variances.push(eig.eigenvalues[idx].max(0.0));
        }
        Ok(Pca {
            mean,
            components,
            variances,
        })
    }

    pub fn transform(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape(
                "Pca::transform",
                format!("{} columns, fitted on {}", x.cols(), self.mean.len()),
            ));
        }
        let centered = center(x, &self.mean);
        centered.matmul(&self.components)
    }
}

fn center(x: &Mat, mean: &[f64]) -> Mat {
    let mut c = x.clone();
    for i in 0..c.rows() {
        for (v, m) in c.row_mut(i).iter_mut().zip(mean) {
            *v -= m;
        }
    }
    c
}

/// Projects mean-centered rows onto the top-`k` principal components.
pub fn pca_project(x: &Mat, k: usize) -> Result<Mat> {
    Pca::fit(x, k)?.transform(x)
}
