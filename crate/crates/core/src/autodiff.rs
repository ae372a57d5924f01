//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`] walks it in
//! reverse and accumulates vector-Jacobian products. Only the operations the transformer
//! and the folding module need are provided, several of them fused (layer norm, causal
//! softmax, Laplacian smoothing, cross-entropy) with hand-derived backward passes.

use std::borrow::Cow;

use crate::math::graph::{affinity_kernel, Neighbourhood};
use crate::math::mat::{gemm, gram_lower, lower_mul, lower_t_mul, Mat, ZERO_ROW_GUARD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `x + 1 b` with `b` a row vector.
    AddRow(Var, Var),
    /// `x * 1 g` elementwise with `g` a row vector.
    MulRow(Var, Var),
    Scale(Var, f64),
    /// `x * s` with `s` a 1x1 variable.
    ScaleBy(Var, Var),
    Relu(Var),
    /// Row standardization without affine parameters.
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CausalSoftmax {
        x: Var,
        scale: f64,
    },
    /// Gaussian-affinity Laplacian; `w` is the affinity used in the forward pass.
    Laplacian {
        x: Var,
        w: Mat,
        hood: Neighbourhood,
    },
    /// `x + attract (x - c_a) + diffuse L(x)`; `w` is the Laplacian's affinity when
    /// `diffuse != 0`.
    FoldAdjust {
        x: Var,
        centers: Var,
        assignment: Vec<usize>,
        attract: f64,
        diffuse: f64,
        w: Option<Mat>,
        hood: Neighbourhood,
    },
    /// `x + s (y - x)` with `s` a 1x1 variable.
    GateMix {
        x: Var,
        y: Var,
        s: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    /// `sum(x * weights)` against a fixed weight matrix.
    WeightedSum {
        x: Var,
        weights: Mat,
    },
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input borrowed from the caller.
    pub fn param(&mut self, m: &'a Mat) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(m),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input owned by the tape.
    pub fn param_owned(&mut self, m: Mat) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(m),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(m),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "tape matmul shape");
        let mut out = Mat::zeros(av.rows(), bv.cols());
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "tape matmul_t shape");
        let mut out = Mat::zeros(av.rows(), bv.rows());
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("tape add shape");
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b)).expect("tape sub shape");
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(bv.shape(), (1, self.value(x).cols()), "tape add_row shape");
        let mut out = self.value(x).clone();
        let bias = bv.row(0).to_vec();
        for i in 0..out.rows() {
            out.row_mut(i)
                .iter_mut()
                .zip(&bias)
                .for_each(|(o, b)| *o += b);
        }
        self.push(out, Op::AddRow(x, b), &[x, b])
    }

    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let gv = self.value(g);
        assert_eq!(gv.shape(), (1, self.value(x).cols()), "tape mul_row shape");
        let mut out = self.value(x).clone();
        let gain = gv.row(0).to_vec();
        for i in 0..out.rows() {
            out.row_mut(i)
                .iter_mut()
                .zip(&gain)
                .for_each(|(o, g)| *o *= g);
        }
        self.push(out, Op::MulRow(x, g), &[x, g])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1), "tape scale_by expects a scalar");
        let out = self.value(x).scale(sv.get(0, 0));
        self.push(out, Op::ScaleBy(x, s), &[x, s])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut out = Mat::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Unit-norm rows; rows with norm below the zero guard pass through.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm >= ZERO_ROW_GUARD {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            norms.push(norm);
        }
        self.push(out, Op::RowNormalize { x, norms }, &[x])
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "tape slice_cols range");
        let out = Mat::from_fn(xv.rows(), len, |i, j| xv.get(i, start + j));
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Mat::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "tape concat_cols rows");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + pv.cols()].copy_from_slice(pv.row(i));
            }
            offset += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row softmax of `scale * x` restricted to columns `j <= i`; later columns are 0.
    pub fn causal_softmax(&mut self, x: Var, scale: f64) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        let mut out = Mat::zeros(n, m);
        for i in 0..n {
            let visible = (i + 1).min(m);
            let row = &xv.row(i)[..visible];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(scale * b));
            let orow = out.row_mut(i);
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (scale * v - max).exp();
                sum += *o;
            }
            orow[..visible].iter_mut().for_each(|o| *o /= sum);
        }
        self.push(out, Op::CausalSoftmax { x, scale }, &[x])
    }

    /// Row `i` is `sum_j w_ij (x_j - x_i)` with `w_ij = exp(-|x_i - x_j|^2)`, `w_ii = 0`,
    /// and `w_ij = 0` for pairs outside `hood`.
    pub fn laplacian(&mut self, x: Var, hood: Neighbourhood) -> Var {
        let xv = self.value(x);
        let w = affinity_via_gram(xv, hood);
        let out = laplacian_from(xv, &w, hood);
        self.push(out, Op::Laplacian { x, w, hood }, &[x])
    }

    /// One folding adjustment, `x + (attract (x - c_a) + diffuse L(x))`, where row `i` of
    /// `c_a` is `centers[assignment[i]]` and `L` is [`Tape::laplacian`] over `hood`. A zero
    /// weight drops its term.
    pub fn fold_adjust(
        &mut self,
        x: Var,
        centers: Var,
        assignment: &[usize],
        (attract, diffuse): (f64, f64),
        hood: Neighbourhood,
    ) -> Var {
        let xv = self.value(x);
        let cv = self.value(centers);
        assert_eq!(assignment.len(), xv.rows(), "tape fold_adjust assignment");
        assert_eq!(cv.cols(), xv.cols(), "tape fold_adjust centers");
        let (n, d) = xv.shape();
        let mut step = Mat::zeros(n, d);
        if attract != 0.0 {
            for (i, &a) in assignment.iter().enumerate() {
                let (xi, ci) = (xv.row(i), cv.row(a));
                for ((o, xv), cv) in step.row_mut(i).iter_mut().zip(xi).zip(ci) {
                    *o = attract * (xv - cv);
                }
            }
        }
        let w = (diffuse != 0.0).then(|| affinity_via_gram(xv, hood));
        if let Some(w) = &w {
            step.axpy(diffuse, &laplacian_from(xv, w, hood))
                .expect("shapes agree");
        }
        let out = xv.add(&step).expect("shapes agree");
        let op = Op::FoldAdjust {
            x,
            centers,
            assignment: assignment.to_vec(),
            attract,
            diffuse,
            w,
            hood,
        };
        self.push(out, op, &[x, centers])
    }

    /// `x + s (y - x)` for a 1x1 gate `s`.
    pub fn gate_mix(&mut self, x: Var, y: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1), "tape gate_mix expects a scalar gate");
        let sv = sv.get(0, 0);
        let out = self
            .value(x)
            .zip_map(self.value(y), |a, b| a + (b - a) * sv)
            .expect("tape gate_mix shape");
        self.push(out, Op::GateMix { x, y, s }, &[x, y, s])
    }

    /// Mean next-token negative log-likelihood (nats) as a 1x1 value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "tape cross_entropy rows");
        let (n, v) = lv.shape();
        let mut probs = Mat::zeros(n, v);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let prow = probs.row_mut(i);
            let mut sum = 0.0;
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            prow.iter_mut().for_each(|p| *p /= sum);
            total += max + sum.ln() - row[t];
        }
        let loss = Mat::from_rows(&[[total / n.max(1) as f64]]);
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `sum_ij x_ij * weights_ij` as a 1x1 value.
    pub fn weighted_sum(&mut self, x: Var, weights: Mat) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape(), "tape weighted_sum shape");
        let s: f64 = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(Mat::filled(1, 1, s), Op::WeightedSum { x, weights }, &[x])
    }

    /// Gradients of the 1x1 `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward from a non-scalar"
        );
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    accumulate_gemm(grads, *a, self.value(*a).shape(), g, false, bv, true);
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    accumulate_gemm(grads, *b, self.value(*b).shape(), av, true, g, false);
                }
            }
            Op::MatMulT(a, b) => {
                // c = a b^T: da = g b, db = g^T a
                if self.wants(*a) {
                    let bv = self.value(*b);
                    accumulate_gemm(grads, *a, self.value(*a).shape(), g, false, bv, false);
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    accumulate_gemm(grads, *b, self.value(*b).shape(), g, true, av, false);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g, 1.0);
                self.accumulate(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g, 1.0);
                self.accumulate(grads, *b, g, -1.0);
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g, 1.0);
                if self.wants(*b) {
                    let col_sums = Mat::row_vector(&column_sums(g));
                    self.accumulate(grads, *b, &col_sums, 1.0);
                }
            }
            Op::MulRow(x, gain) => {
                let gv = self.value(*gain);
                if self.wants(*x) {
                    let mut dx = g.clone();
                    let gain_row = gv.row(0);
                    for i in 0..dx.rows() {
                        dx.row_mut(i)
                            .iter_mut()
                            .zip(gain_row)
                            .for_each(|(d, s)| *d *= s);
                    }
                    self.accumulate_owned(grads, *x, dx);
                }
                if self.wants(*gain) {
                    let xv = self.value(*x);
                    let mut dg = vec![0.0; gv.cols()];
                    for i in 0..g.rows() {
                        for ((d, gi), xi) in dg.iter_mut().zip(g.row(i)).zip(xv.row(i)) {
                            *d += gi * xi;
                        }
                    }
                    self.accumulate(grads, *gain, &Mat::row_vector(&dg), 1.0);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g, *s),
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).get(0, 0);
                self.accumulate(grads, *x, g, sv);
                if self.wants(*s) {
                    let xv = self.value(*x);
                    let dot: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, &Mat::filled(1, 1, dot), 1.0);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let dx = g
                        .zip_map(xv, |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                        .expect("relu shapes");
                    self.accumulate_owned(grads, *x, dx);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let (n, d) = g.shape();
                    let mut dx = Mat::zeros(n, d);
                    for (i, &inv) in inv_std.iter().enumerate().take(n) {
                        let gi = g.row(i);
                        let yi = y.row(i);
                        let mean_g = gi.iter().sum::<f64>() / d as f64;
                        let mean_gy = gi.iter().zip(yi).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for ((o, a), b) in dx.row_mut(i).iter_mut().zip(gi).zip(yi) {
                            *o = inv * (a - mean_g - b * mean_gy);
                        }
                    }
                    self.accumulate_owned(grads, *x, dx);
                }
            }
            Op::RowNormalize { x, norms } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (i, &norm) in norms.iter().enumerate() {
                        if norm < ZERO_ROW_GUARD {
                            continue;
                        }
                        let yi = y.row(i);
                        let dot: f64 = g.row(i).iter().zip(yi).map(|(a, b)| a * b).sum();
                        for (o, yv) in dx.row_mut(i).iter_mut().zip(yi) {
                            *o = (*o - yv * dot) / norm;
                        }
                    }
                    self.accumulate_owned(grads, *x, dx);
                }
            }
            Op::GatherRows { table, ids } => {
                if self.wants(*table) {
                    let shape = self.value(*table).shape();
                    let dt = grads[table.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
                    for (r, &id) in ids.iter().enumerate() {
                        dt.row_mut(id)
                            .iter_mut()
                            .zip(g.row(r))
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape();
                    let dx = grads[x.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
                    let len = g.cols();
                    for i in 0..g.rows() {
                        dx.row_mut(i)[*start..*start + len]
                            .iter_mut()
                            .zip(g.row(i))
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.wants(*p) {
                        let part = Mat::from_fn(g.rows(), cols, |i, j| g.get(i, offset + j));
                        self.accumulate_owned(grads, *p, part);
                    }
                    offset += cols;
                }
            }
            Op::CausalSoftmax { x, scale } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let (n, m) = g.shape();
                    let mut dx = Mat::zeros(n, m);
                    for i in 0..n {
                        let visible = (i + 1).min(m);
                        let yi = &y.row(i)[..visible];
                        let gi = &g.row(i)[..visible];
                        let dot: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in dx.row_mut(i).iter_mut().zip(yi).zip(gi) {
                            *o = scale * yv * (gv - dot);
                        }
                    }
                    self.accumulate_owned(grads, *x, dx);
                }
            }
            Op::Laplacian { x, w, hood } => {
                if self.wants(*x) {
                    let dx = laplacian_vjp(self.value(*x), w, g, *hood);
                    self.accumulate_owned(grads, *x, dx);
                }
            }
            Op::FoldAdjust {
                x,
                centers,
                assignment,
                attract,
                diffuse,
                w,
                hood,
            } => {
                if self.wants(*x) {
                    let mut dx = g.zip_map(g, |a, _| a + attract * a).expect("same shape");
                    if let Some(w) = w {
                        let lap = laplacian_vjp(self.value(*x), w, g, *hood);
                        dx.axpy(*diffuse, &lap).expect("shapes agree");
                    }
                    self.accumulate_owned(grads, *x, dx);
                }
                if *attract != 0.0 && self.wants(*centers) {
                    let shape = self.value(*centers).shape();
                    let dc = grads[centers.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1));
                    for (i, &a) in assignment.iter().enumerate() {
                        dc.row_mut(a)
                            .iter_mut()
                            .zip(g.row(i))
                            .for_each(|(o, v)| *o -= attract * v);
                    }
                }
            }
            Op::GateMix { x, y, s } => {
                let sv = self.value(*s).get(0, 0);
                if self.wants(*x) {
                    let dx = g.map(|v| v - v * sv);
                    self.accumulate_owned(grads, *x, dx);
                }
                self.accumulate(grads, *y, g, sv);
                if self.wants(*s) {
                    let (xv, yv) = (self.value(*x), self.value(*y));
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(xv.data().iter().zip(yv.data()))
                        .map(|(gv, (a, b))| gv * (b - a))
                        .sum();
                    self.accumulate(grads, *s, &Mat::filled(1, 1, dot), 1.0);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let scale = g.get(0, 0) / targets.len().max(1) as f64;
                    let mut dl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let v = dl.get(i, t);
                        dl.set(i, t, v - 1.0);
                    }
                    self.accumulate(grads, *logits, &dl, scale);
                }
            }
            Op::WeightedSum { x, weights } => self.accumulate(grads, *x, weights, g.get(0, 0)),
        }
    }

    /// Adds a freshly built gradient, moving it into an empty slot.
    fn accumulate_owned(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &g).expect("gradient shape"),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: &Mat, s: f64) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(s, g).expect("gradient shape"),
            slot @ None => *slot = Some(if s == 1.0 { g.clone() } else { g.scale(s) }),
        }
    }
}

fn accumulate_gemm(
    grads: &mut [Option<Mat>],
    v: Var,
    shape: (usize, usize),
    a: &Mat,
    ta: bool,
    b: &Mat,
    tb: bool,
) {
    match &mut grads[v.0] {
        Some(existing) => gemm(1.0, a, ta, b, tb, 1.0, existing),
        slot @ None => {
            let mut out = Mat::zeros(shape.0, shape.1);
            gemm(1.0, a, ta, b, tb, 0.0, &mut out);
            *slot = Some(out);
        }
    }
}

fn column_sums(g: &Mat) -> Vec<f64> {
    let mut s = vec![0.0; g.cols()];
    for r in g.row_iter() {
        s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    s
}

/// Gaussian affinity from the Gram matrix: `|x_i - x_j|^2 = |x_i|^2 + |x_j|^2 - 2 x_i.x_j`.
/// `W X - deg(W) X` for a precomputed affinity.
fn laplacian_from(x: &Mat, w: &Mat, hood: Neighbourhood) -> Mat {
    let (n, d) = x.shape();
    let mut out = Mat::zeros(n, d);
    match hood {
        Neighbourhood::All => gemm(1.0, w, false, x, false, 0.0, &mut out),
        Neighbourhood::Preceding => lower_mul(1.0, w, x, &mut out),
    }
    for i in 0..n {
        let deg: f64 = w.row(i).iter().sum();
        out.row_mut(i)
            .iter_mut()
            .zip(x.row(i))
            .for_each(|(o, v)| *o -= deg * v);
    }
    out
}

fn affinity_via_gram(x: &Mat, hood: Neighbourhood) -> Mat {
    let n = x.rows();
    let mut w = match hood {
        Neighbourhood::All => {
            let mut gram = Mat::zeros(n, n);
            gemm(1.0, x, false, x, true, 0.0, &mut gram);
            gram
        }
        Neighbourhood::Preceding => gram_lower(x, x),
    };
    let sq: Vec<f64> = (0..n).map(|i| w.get(i, i)).collect();
    for i in 0..n {
        let row = w.row_mut(i);
        for (j, v) in row[..i].iter_mut().enumerate() {
            *v = affinity_kernel((sq[i] + sq[j] - 2.0 * *v).max(0.0));
        }
        row[i..].iter_mut().for_each(|v| *v = 0.0);
    }
    if hood == Neighbourhood::All {
        // mirror the lower triangle so the matrix is exactly symmetric
        for i in 0..n {
            for j in (i + 1)..n {
                let v = w.get(j, i);
                w.set(i, j, v);
            }
        }
    }
    w
}

/// Vector-Jacobian product of the Laplacian map `Y = W X - deg(W) X`:
/// `dX = W^T G - deg(W) G + 2 (M X - deg(M) X)` where `M = m + m^T` and
/// `m_ij = w_ij <g_i, x_j - x_i>`. Under the causal mask `W` and `m` are strictly lower
/// triangular and only their nonzero blocks are multiplied.
fn laplacian_vjp(x: &Mat, w: &Mat, g: &Mat, hood: Neighbourhood) -> Mat {
    let (n, d) = x.shape();
    let mut m = match hood {
        Neighbourhood::All => {
            let mut p = Mat::zeros(n, n);
            gemm(1.0, g, false, x, true, 0.0, &mut p);
            p
        }
        Neighbourhood::Preceding => gram_lower(g, x),
    };
    let diag: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    let mut deg_m = vec![0.0; n];
    for i in 0..n {
        let (wi, mi) = (w.row(i), m.row_mut(i));
        for (j, (v, wij)) in mi.iter_mut().zip(wi).enumerate() {
            *v = if *wij == 0.0 {
                0.0
            } else {
                wij * (*v - diag[i])
            };
            deg_m[i] += *v;
            deg_m[j] += *v;
        }
    }
    let mut dx = Mat::zeros(n, d);
    match hood {
        Neighbourhood::All => {
            gemm(1.0, w, true, g, false, 0.0, &mut dx);
            gemm(2.0, &m, false, x, false, 1.0, &mut dx);
            gemm(2.0, &m, true, x, false, 1.0, &mut dx);
        }
        Neighbourhood::Preceding => {
            lower_t_mul(1.0, w, g, &mut dx);
            lower_mul(2.0, &m, x, &mut dx);
            lower_t_mul(2.0, &m, x, &mut dx);
        }
    }
    for (i, &deg_mi) in deg_m.iter().enumerate().take(n) {
        let deg_w: f64 = w.row(i).iter().sum();
        let (gi, xi) = (g.row(i), x.row(i));
        for ((o, gv), xv) in dx.row_mut(i).iter_mut().zip(gi).zip(xi) {
            *o -= deg_w * gv + 2.0 * deg_mi * xv;
        }
    }
    dx
}
