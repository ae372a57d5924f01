//! Gaussian-affinity graph over the rows of a matrix and the Laplacian smoothing it induces.

use super::mat::Mat;

/// Squared Euclidean distance between two equal-length slices.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distances beyond this give an affinity of exactly zero. `exp(-600)` is far below
/// anything an `f64` sum of unit-scale terms can resolve, and the cut keeps subnormal
/// values (slow in hardware) out of the affinity matrix and the products built from it.
pub const AFFINITY_CUTOFF: f64 = 600.0;

/// `exp(-d2)`, or zero past [`AFFINITY_CUTOFF`].
#[inline]
pub fn affinity_kernel(d2: f64) -> f64 {
    if d2 > AFFINITY_CUTOFF {
        0.0
    } else {
        (-d2).exp()
    }
}

/// `w_ij = exp(-|x_i - x_j|^2)` for `i != j`, zero on the diagonal.
pub fn gaussian_affinity(x: &Mat) -> Mat {
    let n = x.rows();
    let mut w = Mat::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = affinity_kernel(sq_dist(x.row(i), x.row(j)));
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    w
}

/// Which token pairs the affinity graph connects.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Neighbourhood {
    /// Every pair `i != j`.
    #[default]
    All,
    /// Row `i` only sees rows `j < i`, so no token is influenced by later ones.
    Preceding,
}

/// [`gaussian_affinity`] restricted to a [`Neighbourhood`]; `Preceding` keeps the strictly
/// lower triangle.
pub fn masked_affinity(x: &Mat, hood: Neighbourhood) -> Mat {
    let mut w = gaussian_affinity(x);
    if hood == Neighbourhood::Preceding {
        for i in 0..w.rows() {
            w.row_mut(i)[i..].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    w
}

/// Graph-Laplacian smoothing: row `i` is `sum_j w_ij (x_j - x_i)`.
pub fn laplacian_apply(x: &Mat) -> Mat {
    let w = gaussian_affinity(x);
    laplacian_with(&w, x)
}

/// [`laplacian_apply`] over a restricted neighbourhood.
pub fn masked_laplacian(x: &Mat, hood: Neighbourhood) -> Mat {
    laplacian_with(&masked_affinity(x, hood), x)
}

/// Same as [`laplacian_apply`] with a precomputed affinity matrix.
pub fn laplacian_with(w: &Mat, x: &Mat) -> Mat {
    let (n, d) = x.shape();
    let mut out = Mat::zeros(n, d);
    for i in 0..n {
        let xi = x.row(i).to_vec();
        let oi = out.row_mut(i);
        for j in 0..n {
            let wij = w.get(i, j);
            if wij == 0.0 {
                continue;
            }
            for ((o, xj), xi) in oi.iter_mut().zip(x.row(j)).zip(&xi) {
                *o += wij * (xj - xi);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng::RngState;

    #[test]
    fn affinity_examples() {
        let w = gaussian_affinity(&Mat::from_rows(&[[0.0, 0.0], [1.0, 0.0]]));
        assert!((w.get(0, 1) - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert_eq!(w.get(0, 0), 0.0);
        let same = gaussian_affinity(&Mat::from_rows(&[[0.3, 0.1], [0.3, 0.1]]));
        assert_eq!(same.get(0, 1), 1.0);
        assert_eq!(
            gaussian_affinity(&Mat::from_rows(&[[1.0, 2.0]])),
            Mat::zeros(1, 1)
        );
    }

    #[test]
    fn laplacian_examples() {
        let l = laplacian_apply(&Mat::from_rows(&[[0.0, 0.0], [1.0, 0.0]]));
        let e = (-1.0f64).exp();
        assert!((l.get(0, 0) - e).abs() < 1e-15 && l.get(0, 1) == 0.0);
        assert!((l.get(1, 0) + e).abs() < 1e-15);
        let flat = Mat::filled(4, 3, 0.25);
        assert_eq!(laplacian_apply(&flat), Mat::zeros(4, 3));
        assert_eq!(
            laplacian_apply(&Mat::from_rows(&[[5.0, 1.0]])),
            Mat::zeros(1, 2)
        );
    }

    #[test]
    fn preceding_neighbourhood_ignores_later_rows() {
        let x = RngState::new(8).gaussian_mat(5, 3);
        let w = masked_affinity(&x, Neighbourhood::Preceding);
        let full = gaussian_affinity(&x);
        for i in 0..5 {
            for j in 0..5 {
                let expected = if j < i { full.get(i, j) } else { 0.0 };
                assert_eq!(w.get(i, j), expected);
            }
        }
        let l = masked_laplacian(&x, Neighbourhood::Preceding);
        assert!(l.row(0).iter().all(|&v| v == 0.0));
        let mut y = x.clone();
        y.row_mut(4).iter_mut().for_each(|v| *v += 1.0);
        let m = masked_laplacian(&y, Neighbourhood::Preceding);
        for i in 0..4 {
            assert_eq!(l.row(i), m.row(i));
        }
        assert_eq!(
            masked_laplacian(&x, Neighbourhood::All),
            laplacian_apply(&x)
        );
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let mut rng = RngState::new(4);
        for _ in 0..10 {
            let x = rng.gaussian_mat(9, 4).scale(0.5);
            let l = laplacian_apply(&x);
            for s in l.column_means() {
                assert!(s.abs() * 9.0 < 1e-10);
            }
        }
    }

    #[test]
    fn affinity_symmetric() {
        let mut rng = RngState::new(6);
        let w = gaussian_affinity(&rng.gaussian_mat(6, 3));
        assert_eq!(w, w.transpose());
    }
}
