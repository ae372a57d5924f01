use crate::error::Result;
use crate::folding::{init_centers, FoldingLayer};
use crate::math::{Mat, RngState};
use crate::model::config::ModelConfig;

const EMBED_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub ff_in: Mat,
    pub ff_in_bias: Mat,
    pub ff_out: Mat,
    pub ff_out_bias: Mat,
    pub fold: FoldingLayer,
    /// Scale/shift of the normalization applied to the folded stream.
    pub fold_norm_gain: Mat,
    pub fold_norm_bias: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    /// `vocab x d_model`; also the (tied) output projection.
    pub embedding: Mat,
    pub layers: Vec<LayerParams>,
    pub final_gain: Mat,
    pub final_bias: Mat,
}

/// Name and shape of one parameter tensor, in canonical order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Per-layer tensor names, in canonical order.
pub const LAYER_TENSORS: [&str; 18] = [
    "ln1.gain",
    "ln1.bias",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ln2.gain",
    "ln2.bias",
    "ff.w_in",
    "ff.b_in",
    "ff.w_out",
    "ff.b_out",
    "fold.transform",
    "fold.bias",
    "fold.centers",
    "fold.gate",
    "fold.norm.gain",
    "fold.norm.bias",
];

impl LayerParams {
    fn shapes(&self) -> [(usize, usize); 18] {
        let d = self.fold.bias.len();
        [
            self.ln1_gain.shape(),
            self.ln1_bias.shape(),
            self.wq.shape(),
            self.wk.shape(),
            self.wv.shape(),
            self.wo.shape(),
            self.ln2_gain.shape(),
            self.ln2_bias.shape(),
            self.ff_in.shape(),
            self.ff_in_bias.shape(),
            self.ff_out.shape(),
            self.ff_out_bias.shape(),
            self.fold.transform.shape(),
            (1, d),
            self.fold.centers.shape(),
            (1, 1),
            self.fold_norm_gain.shape(),
            self.fold_norm_bias.shape(),
        ]
    }

    fn slices(&self) -> [&[f64]; 18] {
        [
            self.ln1_gain.data(),
            self.ln1_bias.data(),
            self.wq.data(),
            self.wk.data(),
            self.wv.data(),
            self.wo.data(),
            self.ln2_gain.data(),
            self.ln2_bias.data(),
            self.ff_in.data(),
            self.ff_in_bias.data(),
            self.ff_out.data(),
            self.ff_out_bias.data(),
            self.fold.transform.data(),
            &self.fold.bias,
            self.fold.centers.data(),
            std::slice::from_ref(&self.fold.gate),
            self.fold_norm_gain.data(),
            self.fold_norm_bias.data(),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 18] {
        let LayerParams {
            ln1_gain,
            ln1_bias,
            wq,
            wk,
            wv,
            wo,
            ln2_gain,
            ln2_bias,
            ff_in,
            ff_in_bias,
            ff_out,
            ff_out_bias,
            fold,
            fold_norm_gain,
            fold_norm_bias,
        } = self;
        let FoldingLayer {
            transform,
            bias,
            centers,
            gate,
        } = fold;
        [
            ln1_gain.data_mut(),
            ln1_bias.data_mut(),
            wq.data_mut(),
            wk.data_mut(),
            wv.data_mut(),
            wo.data_mut(),
            ln2_gain.data_mut(),
            ln2_bias.data_mut(),
            ff_in.data_mut(),
            ff_in_bias.data_mut(),
            ff_out.data_mut(),
            ff_out_bias.data_mut(),
            transform.data_mut(),
            bias,
            centers.data_mut(),
            std::slice::from_mut(gate),
            fold_norm_gain.data_mut(),
            fold_norm_bias.data_mut(),
        ]
    }
}

impl Parameters {
    /// Seeded initialization. The draws do not depend on `fold_enabled`, so a baseline and a
    /// folding model built from the same seed share every backbone weight.
    pub fn init(cfg: &ModelConfig) -> Result<Parameters> {
        cfg.validate()?;
        let mut rng = RngState::new(cfg.seed);
        let d = cfg.d_model;
        let depth_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut normal = |rows, cols, std: f64| rng.gaussian_mat(rows, cols).scale(std);
        let embedding = normal(cfg.vocab_size, d, EMBED_STD);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let in_std = 1.0 / (d as f64).sqrt();
            layers.push(LayerParams {
                ln1_gain: Mat::filled(1, d, 1.0),
                ln1_bias: Mat::zeros(1, d),
                wq: normal(d, d, in_std),
                wk: normal(d, d, in_std),
                wv: normal(d, d, in_std),
                wo: normal(d, d, in_std * depth_scale),
                ln2_gain: Mat::filled(1, d, 1.0),
                ln2_bias: Mat::zeros(1, d),
                ff_in: normal(d, cfg.d_ff, in_std),
                ff_in_bias: Mat::zeros(1, cfg.d_ff),
                ff_out: normal(cfg.d_ff, d, depth_scale / (cfg.d_ff as f64).sqrt()),
                ff_out_bias: Mat::zeros(1, d),
                fold: FoldingLayer::identity(Mat::zeros(0, d)),
                fold_norm_gain: Mat::filled(1, d, 1.0),
                fold_norm_bias: Mat::zeros(1, d),
            });
        }
        let k = cfg.folding.clusters.min(cfg.vocab_size);
        for layer in &mut layers {
            layer.fold.centers = init_centers(&embedding, k, &mut rng)?;
            if let Some(g) = cfg.fixed_gate {
                layer.fold.gate = g;
            }
        }
        Ok(Parameters {
            embedding,
            layers,
            final_gain: Mat::filled(1, d, 1.0),
            final_bias: Mat::zeros(1, d),
        })
    }

    /// Every tensor in canonical order.
    pub fn visit(&self, mut f: impl FnMut(String, (usize, usize), &[f64])) {
        f(
            "embedding".into(),
            self.embedding.shape(),
            self.embedding.data(),
        );
        for (l, layer) in self.layers.iter().enumerate() {
            for ((name, shape), data) in
                LAYER_TENSORS.iter().zip(layer.shapes()).zip(layer.slices())
            {
                f(format!("layers.{l}.{name}"), shape, data);
            }
        }
        f(
            "final.gain".into(),
            self.final_gain.shape(),
            self.final_gain.data(),
        );
        f(
            "final.bias".into(),
            self.final_bias.shape(),
            self.final_bias.data(),
        );
    }

    /// Every tensor in canonical order, mutably.
    pub fn visit_mut(&mut self, mut f: impl FnMut(String, (usize, usize), &mut [f64])) {
        f(
            "embedding".into(),
            self.embedding.shape(),
            self.embedding.data_mut(),
        );
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let shapes = layer.shapes();
            for ((name, shape), data) in LAYER_TENSORS.iter().zip(shapes).zip(layer.slices_mut()) {
                f(format!("layers.{l}.{name}"), shape, data);
            }
        }
        f(
            "final.gain".into(),
            self.final_gain.shape(),
            self.final_gain.data_mut(),
        );
        f(
            "final.bias".into(),
            self.final_bias.shape(),
            self.final_bias.data_mut(),
        );
    }

    pub fn specs(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        self.visit(|name, (rows, cols), _| out.push(TensorSpec { name, rows, cols }));
        out
    }

    pub fn flat_tensors(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        self.visit(|_, _, data| out.push(data.to_vec()));
        out
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, _, data| ok &= data.iter().all(|v| v.is_finite()));
        ok
    }
}
