//! Hierarchical latent space folding.
//!
//! One folding stage maps token embeddings through a learned affine transform, takes a
//! gradient step on a structural objective (attraction to cluster centers plus pairwise
//! Gaussian cohesion), adds graph-Laplacian diffusion, and renormalizes every row.
//! Stacking stages gives [`fold`]. The continuous-time view is the energy flow driven by
//! [`flow_step`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::graph::{
    gaussian_affinity, laplacian_with, masked_laplacian, sq_dist, Neighbourhood,
};
use crate::math::{laplacian_apply, row_normalize, Mat, RngState};

/// Token -> cluster index.
pub type Assignment = Vec<usize>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldingConfig {
    /// Center attraction weight.
    pub alpha: f64,
    /// Diffusion weight.
    pub beta: f64,
    /// Pairwise cohesion weight.
    pub gamma: f64,
    /// Weight of the Laplacian perturbation added to the affine output.
    pub lambda: f64,
    /// Step size of the per-stage adjustment.
    pub eta: f64,
    pub depth: usize,
    pub clusters: usize,
    /// Per-dimension diffusion scale for the flow. Empty means all ones.
    pub sigma: Vec<f64>,
    pub flow_dt: f64,
    /// Adjustment steps per stage before normalization.
    pub inner_steps: usize,
}

impl Default for FoldingConfig {
    fn default() -> Self {
        FoldingConfig {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            lambda: 0.0,
            eta: 0.05,
            depth: 3,
            clusters: 4,
            sigma: Vec::new(),
            flow_dt: 1e-2,
            inner_steps: 1,
        }
    }
}

impl FoldingConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("eta", self.eta),
        ];
        for (name, v) in weights {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.clusters == 0 {
            return Err(Error::Config("clusters must be >= 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be >= 1".into()));
        }
        if !(self.flow_dt.is_finite() && self.flow_dt > 0.0) {
            return Err(Error::Config(format!(
                "flow_dt must be > 0, got {}",
                self.flow_dt
            )));
        }
        if let Some(s) = self.sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!("sigma entries must be > 0, got {s}")));
        }
        Ok(())
    }

    fn sigma_at(&self, j: usize) -> f64 {
        if self.sigma.is_empty() {
            1.0
        } else {
            self.sigma[j]
        }
    }
}

/// Parameters of one folding stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldingLayer {
    /// `d x d`, applied to the feature dimension: `x -> x W^T + b`.
    pub transform: Mat,
    pub bias: Vec<f64>,
    /// `K x d`.
    pub centers: Mat,
    /// Residual gate in `[0, 1]`; only used when the stage sits inside a model.
    pub gate: f64,
}

impl FoldingLayer {
    /// Identity transform, zero bias, closed gate.
    pub fn identity(centers: Mat) -> Self {
        let d = centers.cols();
        FoldingLayer {
            transform: Mat::identity(d),
            bias: vec![0.0; d],
            centers,
            gate: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.transform.cols()
    }
}

/// Per-stage state recorded by [`fold`]; index 0 is the input.
#[derive(Clone, Debug)]
pub struct FoldTrace {
    pub embeddings: Vec<Mat>,
    pub objective: Vec<f64>,
    pub energy: Vec<f64>,
}

impl FoldTrace {
    pub fn output(&self) -> &Mat {
        self.embeddings
            .last()
            .expect("trace always holds the input")
    }
}

/// Picks `k` distinct rows of `x` as initial centers.
pub fn init_centers(x: &Mat, k: usize, rng: &mut RngState) -> Result<Mat> {
    if k == 0 || k > x.rows() {
        return Err(Error::Config(format!(
            "cannot pick {k} distinct centers from {} tokens",
            x.rows()
        )));
    }
    let idx = rng.sample_distinct(x.rows(), k);
    let mut c = Mat::zeros(k, x.cols());
    for (r, &i) in idx.iter().enumerate() {
        c.row_mut(r).copy_from_slice(x.row(i));
    }
    Ok(c)
}

/// `x W^T + b` row by row, plus `lambda * laplacian_apply(x)` when `lambda > 0`.
pub fn affine_transform(x: &Mat, layer: &FoldingLayer) -> Result<Mat> {
    affine_with_perturbation(x, layer, 0.0, Neighbourhood::All)
}

fn affine_with_perturbation(
    x: &Mat,
    layer: &FoldingLayer,
    lambda: f64,
    hood: Neighbourhood,
) -> Result<Mat> {
    let d = layer.dim();
    if x.cols() != d || layer.transform.rows() != d || layer.bias.len() != d {
        return Err(Error::shape(
            "affine_transform",
            format!(
                "input has {} columns, layer is {}x{} with bias {}",
                x.cols(),
                layer.transform.rows(),
                d,
                layer.bias.len()
            ),
        ));
    }
    let mut out = Mat::zeros(x.rows(), d);
    crate::math::mat::gemm(1.0, x, false, &layer.transform, true, 0.0, &mut out);
    for i in 0..out.rows() {
        for (v, b) in out.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    if lambda > 0.0 {
        out.axpy(lambda, &masked_laplacian(x, hood))?;
    }
    Ok(out)
}

fn check_centers(x: &Mat, centers: &Mat, op: &'static str) -> Result<()> {
    if centers.rows() == 0 {
        return Err(Error::Config(format!("{op}: no cluster centers")));
    }
    if centers.cols() != x.cols() {
        return Err(Error::shape(
            op,
            format!(
                "centers have {} columns, tokens {}",
                centers.cols(),
                x.cols()
            ),
        ));
    }
    Ok(())
}

fn check_assignment(x: &Mat, centers: &Mat, assignment: &[usize], op: &'static str) -> Result<()> {
    check_centers(x, centers, op)?;
    if assignment.len() != x.rows() {
        return Err(Error::shape(
            op,
            format!("{} assignments for {} tokens", assignment.len(), x.rows()),
        ));
    }
    if let Some(a) = assignment.iter().find(|&&a| a >= centers.rows()) {
        return Err(Error::shape(
            op,
            format!("cluster {a} of {}", centers.rows()),
        ));
    }
    Ok(())
}

/// Nearest center by squared distance; ties go to the lowest index.
pub fn assign_clusters(x: &Mat, centers: &Mat) -> Result<Assignment> {
    check_centers(x, centers, "assign_clusters")?;
    Ok(nearest_centers(x, centers))
}

pub(crate) fn nearest_centers(x: &Mat, centers: &Mat) -> Assignment {
    x.row_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centers.row_iter().enumerate() {
                let d = sq_dist(row, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Mean of each cluster's members; a cluster with no members keeps its previous center.
pub fn update_centers(x: &Mat, assignment: &[usize], k: usize, previous: &Mat) -> Result<Mat> {
    if assignment.len() != x.rows() {
        return Err(Error::shape(
            "update_centers",
            format!("{} assignments for {} tokens", assignment.len(), x.rows()),
        ));
    }
    if previous.shape() != (k, x.cols()) {
        return Err(Error::shape(
            "update_centers",
            format!(
                "previous centers {:?}, expected ({k}, {})",
                previous.shape(),
                x.cols()
            ),
        ));
    }
    let mut sums = Mat::zeros(k, x.cols());
    let mut counts = vec![0usize; k];
    for (row, &a) in x.row_iter().zip(assignment) {
        if a >= k {
            return Err(Error::shape(
                "update_centers",
                format!("cluster {a} of {k}"),
            ));
        }
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            sums.row_mut(c).copy_from_slice(previous.row(c));
        } else {
            let n = count as f64;
            sums.row_mut(c).iter_mut().for_each(|s| *s /= n);
        }
    }
    Ok(sums)
}

fn attraction(x: &Mat, centers: &Mat, assignment: &[usize]) -> f64 {
    x.row_iter()
        .zip(assignment)
        .map(|(row, &a)| sq_dist(row, centers.row(a)))
        .sum()
}

/// Sum of `exp(-|x_i - x_j|^2)` over ordered pairs `i != j`.
fn cohesion(w: &Mat) -> f64 {
    w.data().iter().sum()
}

/// `alpha * sum_i |x_i - c_a(i)|^2 - gamma * sum_{i != j} exp(-|x_i - x_j|^2)`.
///
/// Descending this pulls tokens toward their centers and near neighbours toward each
/// other.
pub fn structural_objective(
    x: &Mat,
    centers: &Mat,
    assignment: &[usize],
    cfg: &FoldingConfig,
) -> Result<f64> {
    check_assignment(x, centers, assignment, "structural_objective")?;
    let mut value = cfg.alpha * attraction(x, centers, assignment);
    if cfg.gamma != 0.0 {
        value -= cfg.gamma * cohesion(&gaussian_affinity(x));
    }
    Ok(value)
}

/// Analytic gradient of [`structural_objective`] with respect to the tokens:
/// row `i` is `2 alpha (x_i - c_a(i)) + 4 gamma sum_j w_ij (x_i - x_j)`.
pub fn objective_gradient(
    x: &Mat,
    centers: &Mat,
    assignment: &[usize],
    cfg: &FoldingConfig,
) -> Result<Mat> {
    check_assignment(x, centers, assignment, "objective_gradient")?;
    Ok(gradient_with(x, centers, assignment, cfg, None))
}

fn gradient_with(
    x: &Mat,
    centers: &Mat,
    assignment: &[usize],
    cfg: &FoldingConfig,
    laplacian: Option<&Mat>,
) -> Mat {
    let mut g = Mat::zeros(x.rows(), x.cols());
    for (i, &a) in assignment.iter().enumerate() {
        let c = centers.row(a);
        let xi = x.row(i);
        for ((gv, xv), cv) in g.row_mut(i).iter_mut().zip(xi).zip(c) {
            *gv = 2.0 * cfg.alpha * (xv - cv);
        }
    }
    if cfg.gamma != 0.0 {
        // sum_j w_ij (x_i - x_j) is the negated Laplacian row
        let owned;
        let lap = match laplacian {
            Some(l) => l,
            None => {
                owned = laplacian_apply(x);
                &owned
            }
        };
        g.axpy(-4.0 * cfg.gamma, lap).expect("shapes agree");
    }
    g
}

/// The adjustment half of a folding stage (no affine map, no normalization): repeats
/// `X += eta * (-grad F(X) + beta * L(X))` `inner_steps` times, reassigning tokens to
/// their nearest center before each step.
pub fn fold_adjust(x: &Mat, centers: &Mat, cfg: &FoldingConfig) -> Result<Mat> {
    fold_adjust_in(x, centers, cfg, Neighbourhood::All)
}

/// [`fold_adjust`] with the Laplacian restricted to `hood`.
pub fn fold_adjust_in(
    x: &Mat,
    centers: &Mat,
    cfg: &FoldingConfig,
    hood: Neighbourhood,
) -> Result<Mat> {
    check_centers(x, centers, "fold_adjust")?;
    let mut cur = x.clone();
    for _ in 0..cfg.inner_steps {
        let assignment = nearest_centers(&cur, centers);
        let lap = masked_laplacian(&cur, hood);
        let grad = gradient_with(&cur, centers, &assignment, cfg, Some(&lap));
        if !grad.is_finite() {
            return Err(Error::Numerical {
                stage: "objective_gradient",
            });
        }
        cur.axpy(-cfg.eta, &grad)?;
        cur.axpy(cfg.eta * cfg.beta, &lap)?;
        if !cur.is_finite() {
            return Err(Error::Numerical {
                stage: "adjustment",
            });
        }
    }
    Ok(cur)
}

/// One folding stage: affine transform, [`fold_adjust`], then row normalization.
pub fn fold_step(x: &Mat, layer: &FoldingLayer, cfg: &FoldingConfig) -> Result<Mat> {
    fold_step_in(x, layer, cfg, Neighbourhood::All)
}

/// [`fold_step`] with every Laplacian restricted to `hood`.
pub fn fold_step_in(
    x: &Mat,
    layer: &FoldingLayer,
    cfg: &FoldingConfig,
    hood: Neighbourhood,
) -> Result<Mat> {
    let transformed = affine_with_perturbation(x, layer, cfg.lambda, hood)?;
    if !transformed.is_finite() {
        return Err(Error::Numerical {
            stage: "affine_transform",
        });
    }
    let adjusted = fold_adjust_in(&transformed, &layer.centers, cfg, hood)?;
    let out = row_normalize(&adjusted);
    if !out.is_finite() {
        return Err(Error::Numerical {
            stage: "normalization",
        });
    }
    Ok(out)
}

/// Runs every stage in order. Before each stage the tokens are reassigned to the stage's
/// centers and the centers are refreshed to their cluster means.
pub fn fold(x: &Mat, layers: &[FoldingLayer], cfg: &FoldingConfig) -> Result<FoldTrace> {
    if layers.len() != cfg.depth {
        return Err(Error::Config(format!(
            "{} layers supplied for depth {}",
            layers.len(),
            cfg.depth
        )));
    }
    let first = layers
        .first()
        .ok_or_else(|| Error::Config("no folding layers".into()))?;
    let a0 = assign_clusters(x, &first.centers)?;
    let mut trace = FoldTrace {
        embeddings: vec![x.clone()],
        objective: vec![structural_objective(x, &first.centers, &a0, cfg)?],
        energy: vec![energy(x, &first.centers, &a0, cfg)?],
    };
    let mut cur = x.clone();
    for layer in layers {
        let assignment = assign_clusters(&cur, &layer.centers)?;
        let centers = update_centers(&cur, &assignment, layer.centers.rows(), &layer.centers)?;
        let refreshed = FoldingLayer {
            centers,
            ..layer.clone()
        };
        cur = fold_step(&cur, &refreshed, cfg)?;
        let a = assign_clusters(&cur, &refreshed.centers)?;
        trace
            .objective
            .push(structural_objective(&cur, &refreshed.centers, &a, cfg)?);
        trace
            .energy
            .push(energy(&cur, &refreshed.centers, &a, cfg)?);
        trace.embeddings.push(cur.clone());
    }
    Ok(trace)
}

/// `1/2 sum_{i<j} w_ij |x_i - x_j|^2 + alpha sum_i |x_i - c_a(i)|^2`.
pub fn energy(x: &Mat, centers: &Mat, assignment: &[usize], cfg: &FoldingConfig) -> Result<f64> {
    check_assignment(x, centers, assignment, "energy")?;
    let n = x.rows();
    let mut dirichlet = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let u = sq_dist(x.row(i), x.row(j));
            dirichlet += (-u).exp() * u;
        }
    }
    Ok(0.5 * dirichlet + cfg.alpha * attraction(x, centers, assignment))
}

/// Gradient of [`energy`]: row `r` is
/// `sum_j w_rj (1 - |x_r - x_j|^2)(x_r - x_j) + 2 alpha (x_r - c_a(r))`.
pub fn energy_gradient(
    x: &Mat,
    centers: &Mat,
    assignment: &[usize],
    cfg: &FoldingConfig,
) -> Result<Mat> {
    check_assignment(x, centers, assignment, "energy_gradient")?;
    let (n, d) = x.shape();
    let mut g = Mat::zeros(n, d);
    for (r, &a) in assignment.iter().enumerate() {
        let xr = x.row(r).to_vec();
        let c = centers.row(a).to_vec();
        let gr = g.row_mut(r);
        for j in 0..n {
            if j == r {
                continue;
            }
            let xj = x.row(j);
            let u = sq_dist(&xr, xj);
            let coef = (-u).exp() * (1.0 - u);
            for k in 0..d {
                gr[k] += coef * (xr[k] - xj[k]);
            }
        }
        for k in 0..d {
            gr[k] += 2.0 * cfg.alpha * (xr[k] - c[k]);
        }
    }
    Ok(g)
}

fn anisotropic_diffusion(x: &Mat, cfg: &FoldingConfig) -> Result<Mat> {
    if !cfg.sigma.is_empty() && cfg.sigma.len() != x.cols() {
        return Err(Error::shape(
            "flow_step",
            format!(
                "sigma has {} entries for {} dimensions",
                cfg.sigma.len(),
                x.cols()
            ),
        ));
    }
    let mut lap = laplacian_with(&gaussian_affinity(x), x);
    if !cfg.sigma.is_empty() {
        for i in 0..lap.rows() {
            for (j, v) in lap.row_mut(i).iter_mut().enumerate() {
                *v *= cfg.sigma_at(j);
            }
        }
    }
    Ok(lap)
}

/// One explicit Euler step `X += dt (-grad E(X) + beta sum_j w_ij sigma * (x_j - x_i))`
/// using `cfg.flow_dt`.
pub fn flow_step(x: &Mat, centers: &Mat, assignment: &[usize], cfg: &FoldingConfig) -> Result<Mat> {
    flow_step_dt(x, centers, assignment, cfg, cfg.flow_dt)
}

fn flow_step_dt(
    x: &Mat,
    centers: &Mat,
    assignment: &[usize],
    cfg: &FoldingConfig,
    dt: f64,
) -> Result<Mat> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!(
            "flow time step must be > 0, got {dt}"
        )));
    }
    let grad = energy_gradient(x, centers, assignment, cfg)?;
    let mut out = x.clone();
    out.axpy(-dt, &grad)?;
    if cfg.beta != 0.0 {
        out.axpy(dt * cfg.beta, &anisotropic_diffusion(x, cfg)?)?;
    }
    if !out.is_finite() {
        return Err(Error::Numerical { stage: "flow_step" });
    }
    Ok(out)
}

/// Energies and accepted step sizes along a flow run.
#[derive(Clone, Debug)]
pub struct FlowTrace {
    pub energies: Vec<f64>,
    pub dts: Vec<f64>,
    pub points: Mat,
}

/// Slack allowed on energy increases before a step counts as a violation.
pub const ENERGY_SLACK: f64 = 1e-9;
const MAX_HALVINGS: usize = 40;

/// Integrates the flow for `steps` Euler steps at fixed centers and assignment. A step
/// that raises the energy by more than [`ENERGY_SLACK`] is retried with half the time
/// step; the reduced step is kept for later steps.
pub fn flow_descend(
    x: &Mat,
    centers: &Mat,
    assignment: &[usize],
    cfg: &FoldingConfig,
    steps: usize,
) -> Result<FlowTrace> {
    let mut dt = cfg.flow_dt;
    let mut cur = x.clone();
    let mut e = energy(&cur, centers, assignment, cfg)?;
    let mut trace = FlowTrace {
        energies: vec![e],
        dts: Vec::with_capacity(steps),
        points: Mat::zeros(0, 0),
    };
    for _ in 0..steps {
        let mut halvings = 0;
        loop {
            let next = flow_step_dt(&cur, centers, assignment, cfg, dt)?;
            let e_next = energy(&next, centers, assignment, cfg)?;
            if e_next <= e + ENERGY_SLACK || halvings == MAX_HALVINGS {
                cur = next;
                e = e_next;
                break;
            }
            dt *= 0.5;
            halvings += 1;
        }
        trace.energies.push(e);
        trace.dts.push(dt);
    }
    trace.points = cur;
    Ok(trace)
}

/// `sum_i |L(X)_i|^2 - gamma sum_{i != j} exp(-|x_i - x_j|^2)`: curvature penalty minus
/// cohesion.
pub fn fold_loss(x: &Mat, cfg: &FoldingConfig) -> f64 {
    let w = gaussian_affinity(x);
    let lap = laplacian_with(&w, x);
    lap.sum_sq() - cfg.gamma * cohesion(&w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_diff_grad, max_relative_error};

    fn cfg(alpha: f64, gamma: f64) -> FoldingConfig {
        FoldingConfig {
            alpha,
            gamma,
            ..FoldingConfig::default()
        }
    }

    fn two_points() -> (Mat, Mat, Assignment) {
        (
            Mat::from_rows(&[[0.5, 0.0], [-0.5, 0.0]]),
            Mat::from_rows(&[[0.0, 0.0]]),
            vec![0, 0],
        )
    }

    #[test]
    fn affine_examples() {
        let x = Mat::from_rows(&[[1.0, 0.0], [0.3, -2.0]]);
        let id = FoldingLayer::identity(Mat::zeros(1, 2));
        assert_eq!(affine_transform(&x, &id).unwrap(), x);
        let double = FoldingLayer {
            transform: Mat::identity(2).scale(2.0),
            ..id.clone()
        };
        assert_eq!(affine_transform(&x, &double).unwrap().row(0), &[2.0, 0.0]);
        let constant = FoldingLayer {
            transform: Mat::zeros(2, 2),
            bias: vec![1.0, 1.0],
            ..id.clone()
        };
        let out = affine_transform(&x, &constant).unwrap();
        assert!(out.row_iter().all(|r| r == [1.0, 1.0]));
        assert!(affine_transform(&Mat::zeros(2, 3), &id).is_err());
    }

    #[test]
    fn affine_uses_transpose() {
        let layer = FoldingLayer {
            transform: Mat::from_rows(&[[0.0, 1.0], [0.0, 0.0]]),
            ..FoldingLayer::identity(Mat::zeros(1, 2))
        };
        // x W^T: output feature 0 reads input feature 1
        let out = affine_transform(&Mat::from_rows(&[[3.0, 7.0]]), &layer).unwrap();
        assert_eq!(out.row(0), &[7.0, 0.0]);
    }

    #[test]
    fn assignment_rules() {
        let centers = Mat::from_rows(&[[0.0, 0.0], [10.0, 0.0]]);
        assert_eq!(
            assign_clusters(&Mat::from_rows(&[[1.0, 0.0]]), &centers).unwrap(),
            vec![0]
        );
        assert_eq!(
            assign_clusters(&Mat::from_rows(&[[5.0, 0.0]]), &centers).unwrap(),
            vec![0]
        );
        let one = Mat::from_rows(&[[3.0, 3.0]]);
        let x = Mat::from_rows(&[[1.0, 0.0], [-4.0, 2.0], [9.0, 9.0]]);
        assert_eq!(assign_clusters(&x, &one).unwrap(), vec![0, 0, 0]);
        assert!(matches!(
            assign_clusters(&x, &Mat::zeros(0, 2)).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn center_update_rules() {
        let x = Mat::from_rows(&[[0.0, 0.0], [2.0, 0.0]]);
        let prev = Mat::from_rows(&[[9.0, 9.0], [-1.0, 4.0]]);
        let c = update_centers(&x, &[0, 0], 2, &prev).unwrap();
        assert_eq!(c.row(0), &[1.0, 0.0]);
        assert_eq!(c.row(1), &[-1.0, 4.0]);
    }

    #[test]
    fn center_update_minimizes_attraction_on_grid() {
        let mut rng = RngState::new(77);
        for _ in 0..10 {
            let n = 2 + rng.below(8);
            let x = Mat::from_fn(n, 1, |_, _| rng.uniform() * 4.0 - 2.0);
            let assignment: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            let c = update_centers(&x, &assignment, 2, &Mat::zeros(2, 1)).unwrap();
            let best = attraction(&x, &c, &assignment);
            for a in -40..=40 {
                for b in -40..=40 {
                    let grid = Mat::from_rows(&[[a as f64 * 0.05], [b as f64 * 0.05]]);
                    assert!(best <= attraction(&x, &grid, &assignment) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn objective_examples() {
        let (x, c, a) = two_points();
        let f = structural_objective(&x, &c, &a, &cfg(1.0, 1.0)).unwrap();
        assert!((f - (0.5 - 2.0 * (-1.0f64).exp())).abs() < 1e-12);
        assert!((f + 0.235_758_882_342_885).abs() < 1e-9);
        let at_center = Mat::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]);
        assert_eq!(
            structural_objective(&at_center, &at_center, &[0, 1], &cfg(1.0, 0.0)).unwrap(),
            0.0
        );
        let one = Mat::from_rows(&[[1.0, 0.0]]);
        let f1 = structural_objective(&one, &Mat::zeros(1, 2), &[0], &cfg(1.0, 0.0)).unwrap();
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn gradient_examples() {
        let (x, c, a) = two_points();
        let g = objective_gradient(&x, &c, &a, &cfg(1.0, 1.0)).unwrap();
        let expected = 1.0 + 4.0 * (-1.0f64).exp();
        assert!((g.get(0, 0) - expected).abs() < 1e-12);
        assert!((g.get(0, 0) - 2.471_517_764_685_769).abs() < 1e-9);
        assert_eq!(g.get(0, 1), 0.0);
        assert!((g.get(1, 0) + expected).abs() < 1e-12);
        let fd = finite_diff_grad(
            |m| structural_objective(m, &c, &a, &cfg(1.0, 1.0)).unwrap(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&g, &fd, 1e-8) < 1e-6);

        let coincident = Mat::filled(3, 2, 0.25);
        let centers = Mat::filled(1, 2, 0.25);
        assert_eq!(
            objective_gradient(&coincident, &centers, &[0, 0, 0], &cfg(1.0, 1.0)).unwrap(),
            Mat::zeros(3, 2)
        );
        assert_eq!(
            objective_gradient(&x, &c, &a, &cfg(0.0, 0.0)).unwrap(),
            Mat::zeros(2, 2)
        );
    }

    #[test]
    fn gradient_matches_finite_differences_random() {
        for seed in [1u64, 2] {
            let mut rng = RngState::new(seed);
            for _ in 0..5 {
                let n = 2 + rng.below(7);
                let d = 1 + rng.below(4);
                let k = 1 + rng.below(n.min(3));
                let x = rng.gaussian_mat(n, d).scale(0.7);
                let c = init_centers(&x, k, &mut rng).unwrap().scale(0.9);
                let a = assign_clusters(&x, &c).unwrap();
                let conf = cfg(0.3 + rng.uniform(), 0.2 + rng.uniform());
                let g = objective_gradient(&x, &c, &a, &conf).unwrap();
                let fd = finite_diff_grad(
                    |m| structural_objective(m, &c, &a, &conf).unwrap(),
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(max_relative_error(&g, &fd, 1e-8) < 1e-4);
            }
        }
    }

    #[test]
    fn fold_step_noop_and_unit_rows() {
        let mut rng = RngState::new(3);
        let x = row_normalize(&rng.gaussian_mat(10, 4));
        let layer = FoldingLayer::identity(init_centers(&x, 3, &mut rng).unwrap());
        let noop = FoldingConfig {
            eta: 0.0,
            ..FoldingConfig::default()
        };
        assert_eq!(fold_step(&x, &layer, &noop).unwrap(), x);

        let y = fold_step(&rng.gaussian_mat(10, 4), &layer, &FoldingConfig::default()).unwrap();
        for r in y.row_iter() {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn adjustment_descends_objective() {
        let (x, c, a) = two_points();
        let conf = FoldingConfig {
            eta: 1e-3,
            beta: 0.0,
            ..cfg(1.0, 1.0)
        };
        let before = structural_objective(&x, &c, &a, &conf).unwrap();
        let moved = fold_adjust(&x, &c, &conf).unwrap();
        assert!(structural_objective(&moved, &c, &a, &conf).unwrap() < before);
        let layer = FoldingLayer::identity(c.clone());
        assert!(fold_step(&x, &layer, &conf).unwrap().is_finite());
    }

    #[test]
    fn fold_step_names_failing_stage() {
        let layer = FoldingLayer {
            bias: vec![f64::INFINITY, 0.0],
            ..FoldingLayer::identity(Mat::zeros(1, 2))
        };
        let err = fold_step(
            &Mat::from_rows(&[[1.0, 0.0]]),
            &layer,
            &FoldingConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Numerical {
                stage: "affine_transform"
            }
        ));
    }

    #[test]
    fn fold_depth_one_is_one_step() {
        let mut rng = RngState::new(12);
        let x = row_normalize(&rng.gaussian_mat(8, 3));
        let c = init_centers(&x, 2, &mut rng).unwrap();
        let conf = FoldingConfig {
            depth: 1,
            ..FoldingConfig::default()
        };
        let layers = vec![FoldingLayer::identity(c.clone())];
        let trace = fold(&x, &layers, &conf).unwrap();
        assert_eq!(trace.embeddings.len(), 2);
        assert_eq!(trace.objective.len(), 2);
        assert_eq!(trace.energy.len(), 2);
        let a = assign_clusters(&x, &c).unwrap();
        let refreshed = FoldingLayer::identity(update_centers(&x, &a, 2, &c).unwrap());
        assert_eq!(trace.output(), &fold_step(&x, &refreshed, &conf).unwrap());
    }

    #[test]
    fn fold_identity_noop() {
        let mut rng = RngState::new(13);
        let x = row_normalize(&rng.gaussian_mat(12, 5));
        let conf = FoldingConfig {
            eta: 0.0,
            depth: 4,
            ..FoldingConfig::default()
        };
        let layers: Vec<_> = (0..4)
            .map(|_| FoldingLayer::identity(init_centers(&x, 4, &mut rng).unwrap()))
            .collect();
        assert_eq!(fold(&x, &layers, &conf).unwrap().output(), &x);
        assert!(fold(&x, &layers[..2], &conf).is_err());
    }

    #[test]
    fn energy_examples() {
        let one = Mat::from_rows(&[[1.0, 0.0]]);
        assert_eq!(
            energy(&one, &Mat::zeros(1, 2), &[0], &cfg(1.0, 0.0)).unwrap(),
            1.0
        );
        let same = Mat::filled(4, 2, 0.3);
        assert_eq!(
            energy(&same, &Mat::filled(1, 2, 0.3), &[0; 4], &cfg(1.0, 0.0)).unwrap(),
            0.0
        );
        let pair = Mat::from_rows(&[[0.0, 0.0], [1.0, 0.0]]);
        let e = energy(&pair, &Mat::zeros(1, 2), &[0, 0], &cfg(0.0, 0.0)).unwrap();
        assert!((e - 0.5 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((e - 0.183_939_720_585_721).abs() < 1e-9);
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let mut rng = RngState::new(31);
        for _ in 0..5 {
            let x = rng.gaussian_mat(6, 3).scale(0.6);
            let c = init_centers(&x, 2, &mut rng).unwrap();
            let a = assign_clusters(&x, &c).unwrap();
            let conf = cfg(0.7, 0.0);
            let g = energy_gradient(&x, &c, &a, &conf).unwrap();
            let fd = finite_diff_grad(|m| energy(m, &c, &a, &conf).unwrap(), &x, 1e-5).unwrap();
            assert!(max_relative_error(&g, &fd, 1e-8) < 1e-5);
        }
    }

    #[test]
    fn flow_fixed_point_and_isotropic_case() {
        let same = Mat::filled(5, 3, -0.2);
        let c = Mat::filled(1, 3, -0.2);
        assert_eq!(
            flow_step(&same, &c, &[0; 5], &FoldingConfig::default()).unwrap(),
            same
        );

        let mut rng = RngState::new(5);
        let x = rng.gaussian_mat(6, 3).scale(0.5);
        let c = init_centers(&x, 2, &mut rng).unwrap();
        let a = assign_clusters(&x, &c).unwrap();
        let iso = FoldingConfig {
            sigma: vec![1.0; 3],
            ..FoldingConfig::default()
        };
        let y = flow_step(&x, &c, &a, &iso).unwrap();
        let mut expected = x.clone();
        expected
            .axpy(-iso.flow_dt, &energy_gradient(&x, &c, &a, &iso).unwrap())
            .unwrap();
        expected
            .axpy(iso.flow_dt * iso.beta, &laplacian_apply(&x))
            .unwrap();
        assert!(y.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn flow_two_point_energy_non_increasing() {
        let pair = Mat::from_rows(&[[0.0, 0.0], [1.0, 0.0]]);
        let c = Mat::from_rows(&[[0.5, 0.0]]);
        let conf = FoldingConfig {
            flow_dt: 1e-3,
            ..FoldingConfig::default()
        };
        let e0 = energy(&pair, &c, &[0, 0], &conf).unwrap();
        let next = flow_step(&pair, &c, &[0, 0], &conf).unwrap();
        assert!(energy(&next, &c, &[0, 0], &conf).unwrap() <= e0);
    }

    #[test]
    fn fold_loss_examples() {
        let conf = cfg(1.0, 0.5);
        let same = Mat::filled(4, 2, 1.5);
        assert!((fold_loss(&same, &conf) - (-0.5 * 12.0)).abs() < 1e-12);
        assert_eq!(fold_loss(&Mat::from_rows(&[[2.0, 1.0]]), &conf), 0.0);
        let line = Mat::from_rows(&[[0.0], [0.5], [1.0], [1.5]]);
        let mut brute = 0.0;
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..4 {
                if i != j {
                    let dx: f64 = line.get(j, 0) - line.get(i, 0);
                    s += (-dx * dx).exp() * dx;
                }
            }
            brute += s * s;
        }
        assert!((fold_loss(&line, &cfg(1.0, 0.0)) - brute).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(FoldingConfig::default().validate().is_ok());
        assert!(cfg(-1.0, 0.0).validate().is_err());
        let bad_sigma = FoldingConfig {
            sigma: vec![1.0, 0.0],
            ..FoldingConfig::default()
        };
        assert!(bad_sigma.validate().is_err());
    }
}
