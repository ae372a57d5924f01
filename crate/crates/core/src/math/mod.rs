//! Dense linear algebra and numerical helpers shared by the rest of the crate.

pub mod graph;
pub mod mat;
pub mod numdiff;
pub mod pca;
pub mod rng;

pub use graph::{
    affinity_kernel, gaussian_affinity, laplacian_apply, masked_affinity, masked_laplacian,
    sq_dist, Neighbourhood, AFFINITY_CUTOFF,
};
pub use mat::{matmul, row_normalize, Mat};
pub use numdiff::{finite_diff_grad, max_relative_error};
pub use pca::{pca_project, Pca};
pub use rng::RngState;
