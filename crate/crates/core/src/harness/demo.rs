//! Folding on synthetic Gaussian clusters, reported as plain text.

use std::fmt::Write as _;

use crate::error::Result;
use crate::folding::{
    assign_clusters, flow_descend, fold, init_centers, FoldingConfig, FoldingLayer,
};
use crate::harness::output::fixed6;
use crate::math::{Mat, RngState};

#[derive(Clone, Debug, PartialEq)]
pub struct DemoConfig {
    pub points: usize,
    pub dim: usize,
    pub flow_steps: usize,
    pub folding: FoldingConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            points: 32,
            dim: 8,
            flow_steps: 50,
            folding: FoldingConfig::default(),
        }
    }
}

/// `points` samples around `clusters` random means (spread 2, noise 0.3).
pub fn clustered_points(points: usize, dim: usize, clusters: usize, rng: &mut RngState) -> Mat {
    let means = rng.gaussian_mat(clusters.max(1), dim).scale(2.0);
    let mut x = rng.gaussian_mat(points, dim).scale(0.3);
    for i in 0..points {
        let m = means.row(i % means.rows()).to_vec();
        x.row_mut(i).iter_mut().zip(&m).for_each(|(v, c)| *v += c);
    }
    x
}

/// Runs every folding stage on clustered points, then the energy flow at the first
/// stage's centers, and renders both traces.
pub fn fold_demo(seed: u64, cfg: &DemoConfig) -> Result<String> {
    cfg.folding.validate()?;
    let mut rng = RngState::new(seed);
    let f = &cfg.folding;
    let x = clustered_points(cfg.points, cfg.dim, f.clusters, &mut rng);
    let mut layers = Vec::with_capacity(f.depth);
    for _ in 0..f.depth {
        let mut layer = FoldingLayer::identity(init_centers(&x, f.clusters, &mut rng)?);
        layer.transform = layer
            .transform
            .add(&rng.gaussian_mat(cfg.dim, cfg.dim).scale(0.05))?;
        layers.push(layer);
    }
    let trace = fold(&x, &layers, f)?;

    let mut out = String::new();
    let w = &mut out;
    writeln!(
        w,
        "fold-demo seed={seed} points={} dim={} clusters={} depth={}",
        cfg.points, cfg.dim, f.clusters, f.depth
    )
    .ok();
    writeln!(w, "stage,objective,energy").ok();
    for (s, (o, e)) in trace.objective.iter().zip(&trace.energy).enumerate() {
        writeln!(w, "{s},{},{}", fixed6(*o), fixed6(*e)).ok();
    }

    let centers = &layers[0].centers;
    let assignment = assign_clusters(&x, centers)?;
    let flow = flow_descend(&x, centers, &assignment, f, cfg.flow_steps)?;
    writeln!(w, "step,energy,dt").ok();
    writeln!(w, "0,{},", fixed6(flow.energies[0])).ok();
    for (k, (e, dt)) in flow.energies[1..].iter().zip(&flow.dts).enumerate() {
        writeln!(w, "{},{},{}", k + 1, fixed6(*e), fixed6(*dt)).ok();
    }
    Ok(out)
}
