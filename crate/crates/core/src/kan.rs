//! KAN layers, the representation network, treatment heads and the
//! assembled model.
//!
//! A layer maps `n_in` inputs to `n_out` outputs by summing one learnable
//! activation per edge: `out_j = sum_i phi_{j,i}(in_i)`. Every edge leaving
//! input `i` shares that input's knot grid, so basis values are computed
//! once per input column.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::spline::{grid_from_samples, kan_edges, BSplineBasis, SplineFunction};

/// Standard deviation of the initial spline coefficients.
pub const COEF_INIT_STD: f64 = 0.1;
/// Relative padding added around observed activations when fitting grids.
pub const GRID_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct KanLayer {
    n_in: usize,
    n_out: usize,
    bases: Arc<Vec<BSplineBasis>>,
    /// `[n_out, n_in, num_basis]`
    pub coefficients: Vec<f64>,
    /// `[n_out, n_in]`
    pub residual_weights: Vec<f64>,
    /// `[n_out, n_in]`
    pub spline_weights: Vec<f64>,
}

impl KanLayer {
    /// Builds a layer from its activation matrix, `phi[q][p]` mapping input
    /// `p` into output `q`. All functions on one input column must share a
    /// basis.
    pub fn from_functions(phi: Vec<Vec<SplineFunction>>) -> Result<Self> {
        let n_out = phi.len();
        let n_in = phi.first().map_or(0, Vec::len);
        if n_out == 0 || n_in == 0 || phi.iter().any(|r| r.len() != n_in) {
            return Err(Error::invalid("layer needs a non-empty rectangular activation matrix"));
        }
        let bases: Vec<BSplineBasis> = phi[0].iter().map(|f| f.basis.clone()).collect();
        let nb = bases[0].num_basis();
        if bases.iter().any(|b| b.num_basis() != nb || b.degree() != bases[0].degree()) {
            return Err(Error::invalid("all bases in a layer need the same size and degree"));
        }
        let mut coefficients = Vec::with_capacity(n_out * n_in * nb);
        let mut residual_weights = Vec::with_capacity(n_out * n_in);
        let mut spline_weights = Vec::with_capacity(n_out * n_in);
        for row in &phi {
            for (p, f) in row.iter().enumerate() {
                if f.basis != bases[p] {
                    return Err(Error::invalid(format!("input {p}: activations disagree on the knot grid")));
                }
                coefficients.extend_from_slice(&f.coefficients);
                residual_weights.push(f.residual_weight);
                spline_weights.push(f.spline_weight);
            }
        }
        Ok(Self {
            n_in,
            n_out,
            bases: Arc::new(bases),
            coefficients,
            residual_weights,
            spline_weights,
        })
    }

    /// Random layer: `c ~ N(0, 0.1)`, `w_s = 1`, and residual weights drawn
    /// from `U(-a, a)` with `a = sqrt(3 / n_in)` so that activations keep
    /// unit order of magnitude through wide stacks.
    pub fn random<R: Rng + ?Sized>(n_out: usize, bases: Vec<BSplineBasis>, rng: &mut R) -> Result<Self> {
        let n_in = bases.len();
        if n_in == 0 || n_out == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let nb = bases[0].num_basis();
        let normal = Normal::new(0.0, COEF_INIT_STD).expect("valid std");
        let a = (3.0 / n_in as f64).sqrt();
        let uniform = Uniform::new_inclusive(-a, a).expect("valid range");
        let coefficients = (0..n_out * n_in * nb).map(|_| normal.sample(rng)).collect();
        let residual_weights = (0..n_out * n_in).map(|_| uniform.sample(rng)).collect();
        Ok(Self {
            n_in,
            n_out,
            bases: Arc::new(bases),
            coefficients,
            residual_weights,
            spline_weights: vec![1.0; n_out * n_in],
        })
    }

    /// Layer from one basis per input and flat parameter buffers laid out
    /// as `[n_out, n_in, num_basis]` and `[n_out, n_in]`.
    pub fn from_parts(
        n_out: usize,
        bases: Vec<BSplineBasis>,
        coefficients: Vec<f64>,
        residual_weights: Vec<f64>,
        spline_weights: Vec<f64>,
    ) -> Result<Self> {
        let n_in = bases.len();
        if n_in == 0 || n_out == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let nb = bases[0].num_basis();
        if bases.iter().any(|b| b.num_basis() != nb || b.degree() != bases[0].degree()) {
            return Err(Error::invalid("all bases in a layer need the same size and degree"));
        }
        let edges = n_out * n_in;
        if coefficients.len() != edges * nb || residual_weights.len() != edges || spline_weights.len() != edges {
            return Err(Error::invalid(format!("layer {n_in}->{n_out}: parameter buffers have the wrong length")));
        }
        if coefficients.iter().chain(&residual_weights).chain(&spline_weights).any(|v| !v.is_finite()) {
            return Err(Error::invalid("layer parameters must be finite"));
        }
        Ok(Self {
            n_in,
            n_out,
            bases: Arc::new(bases),
            coefficients,
            residual_weights,
            spline_weights,
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn bases(&self) -> &[BSplineBasis] {
        &self.bases
    }

    pub fn num_basis(&self) -> usize {
        self.bases[0].num_basis()
    }

    /// `n_in * n_out * (G + k + 2)`.
    pub fn parameter_count(&self) -> usize {
        self.n_in * self.n_out * (self.num_basis() + 2)
    }

    /// Activation on the edge from input `p` to output `q`.
    pub fn phi(&self, q: usize, p: usize) -> SplineFunction {
        let nb = self.num_basis();
        let e = q * self.n_in + p;
        SplineFunction {
            basis: self.bases[p].clone(),
            coefficients: self.coefficients[e * nb..(e + 1) * nb].to_vec(),
            residual_weight: self.residual_weights[e],
            spline_weight: self.spline_weights[e],
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundLayer<'t> {
        self.bind_with(tape, true)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundLayer<'t> {
        let mk = |shape: Vec<usize>, data: &Vec<f64>| {
            let t = Tensor::from_parts(shape, data.clone());
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        BoundLayer {
            bases: Arc::clone(&self.bases),
            coefficients: mk(vec![self.n_out, self.n_in, self.num_basis()], &self.coefficients),
            residual_weights: mk(vec![self.n_out, self.n_in], &self.residual_weights),
            spline_weights: mk(vec![self.n_out, self.n_in], &self.spline_weights),
        }
    }

    fn params(&self) -> [&Vec<f64>; 3] {
        [&self.coefficients, &self.residual_weights, &self.spline_weights]
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [
            &mut self.coefficients,
            &mut self.residual_weights,
            &mut self.spline_weights,
        ]
    }
}

/// A layer whose parameters live on a tape.
pub struct BoundLayer<'t> {
    bases: Arc<Vec<BSplineBasis>>,
    pub coefficients: Var<'t>,
    pub residual_weights: Var<'t>,
    pub spline_weights: Var<'t>,
}

impl<'t> BoundLayer<'t> {
    fn leaves(&self) -> [Var<'t>; 3] {
        [self.coefficients, self.residual_weights, self.spline_weights]
    }
}

/// `[batch, n_in] -> [batch, n_out]`.
pub fn layer_forward<'t>(layer: &BoundLayer<'t>, h: Var<'t>) -> Result<Var<'t>> {
    kan_edges(
        h,
        layer.coefficients,
        layer.residual_weights,
        layer.spline_weights,
        Arc::clone(&layer.bases),
    )
}

fn stack_forward<'t>(layers: &[BoundLayer<'t>], x: Var<'t>) -> Result<Var<'t>> {
    layers.iter().try_fold(x, |h, l| layer_forward(l, h))
}

/// Covariates to the latent representation.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationNetwork {
    pub layers: Vec<KanLayer>,
}

/// Latent representation to one potential outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentHead {
    pub layers: Vec<KanLayer>,
}

/// Layer widths and spline resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_covariates: usize,
    /// Widths after each representation layer; the last is the latent
    /// dimension.
    pub psi_widths: Vec<usize>,
    /// Hidden widths of each head; the scalar output layer is implicit.
    pub head_widths: Vec<usize>,
    pub treatments: usize,
    pub grid_size: usize,
    pub degree: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.n_covariates == 0 {
            return Err(Error::invalid("architecture: no covariates"));
        }
        if self.psi_widths.is_empty() {
            return Err(Error::invalid("architecture: representation network needs at least one layer"));
        }
        if self.psi_widths.iter().chain(&self.head_widths).any(|&w| w == 0) {
            return Err(Error::invalid("architecture: zero width"));
        }
        if self.treatments == 0 {
            return Err(Error::invalid("architecture: no treatments"));
        }
        if self.grid_size == 0 {
            return Err(Error::invalid("architecture: grid size must be at least 1"));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        *self.psi_widths.last().expect("validated")
    }

    /// `(n_in, n_out)` of every representation layer, then every head layer.
    pub fn layer_shapes(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let mut psi = Vec::new();
        let mut prev = self.n_covariates;
        for &w in &self.psi_widths {
            psi.push((prev, w));
            prev = w;
        }
        let mut head = Vec::new();
        for &w in self.head_widths.iter().chain(std::iter::once(&1)) {
            head.push((prev, w));
            prev = w;
        }
        (psi, head)
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let per_edge = self.grid_size + self.degree + 2;
        let (psi, head) = self.layer_shapes();
        let edges = |v: &[(usize, usize)]| v.iter().map(|(a, b)| a * b).sum::<usize>();
        per_edge * (edges(&psi) + self.treatments * edges(&head))
    }
}

/// Representation network plus one head per treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct KaniteModel {
    pub psi: RepresentationNetwork,
    pub heads: Vec<TreatmentHead>,
    pub grid_size: usize,
    pub degree: usize,
}

pub struct BoundModel<'t> {
    pub psi: Vec<BoundLayer<'t>>,
    pub heads: Vec<Vec<BoundLayer<'t>>>,
}

impl<'t> BoundModel<'t> {
    /// Latent representation `[batch, d]`.
    pub fn represent(&self, x: Var<'t>) -> Result<Var<'t>> {
        stack_forward(&self.psi, x)
    }

    /// Head predictions `[batch, K]` from a representation.
    pub fn heads_forward(&self, reps: Var<'t>) -> Result<Var<'t>> {
        let cols = self
            .heads
            .iter()
            .map(|h| stack_forward(h, reps))
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&cols, 1)
    }

    /// Representation and predictions in one pass.
    pub fn forward(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let reps = self.represent(x)?;
        let preds = self.heads_forward(reps)?;
        Ok((reps, preds))
    }

    /// Every trainable leaf, in [`KaniteModel::params`] order.
    pub fn leaves(&self) -> Vec<Var<'t>> {
        self.psi
            .iter()
            .chain(self.heads.iter().flatten())
            .flat_map(BoundLayer::leaves)
            .collect()
    }

    /// Coefficient leaves only (targets of the sparsity penalty).
    pub fn coefficient_leaves(&self) -> Vec<Var<'t>> {
        self.psi
            .iter()
            .chain(self.heads.iter().flatten())
            .map(|l| l.coefficients)
            .collect()
    }
}

fn fit_bases(h: &Tensor, grid_size: usize, degree: usize) -> Result<Vec<BSplineBasis>> {
    (0..h.cols())
        .map(|c| {
            let col = h.column(c);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let margin = (GRID_MARGIN * (hi - lo)).max(1e-2);
            grid_from_samples(&col, grid_size, degree, margin)
        })
        .collect()
}

impl KaniteModel {
    /// Random model whose knot grids cover the activations that
    /// `x_train` produces at initialisation.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, x_train: &Tensor, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if x_train.shape().len() != 2 || x_train.cols() != arch.n_covariates || x_train.rows() == 0 {
            return Err(Error::Shape {
                op: "init",
                lhs: vec![x_train.rows(), arch.n_covariates],
                rhs: x_train.shape().to_vec(),
            });
        }
        let (g, k) = (arch.grid_size, arch.degree);
        let (psi_shapes, head_shapes) = arch.layer_shapes();

        let mut h = x_train.clone();
        let mut psi = Vec::with_capacity(psi_shapes.len());
        for &(_, n_out) in &psi_shapes {
            let layer = KanLayer::random(n_out, fit_bases(&h, g, k)?, rng)?;
            h = eval_layers(std::slice::from_ref(&layer), &h)?;
            psi.push(layer);
        }
        let reps = h;
        let mut heads = Vec::with_capacity(arch.treatments);
        for _ in 0..arch.treatments {
            let mut h = reps.clone();
            let mut layers = Vec::with_capacity(head_shapes.len());
            for &(_, n_out) in &head_shapes {
                let layer = KanLayer::random(n_out, fit_bases(&h, g, k)?, rng)?;
                h = eval_layers(std::slice::from_ref(&layer), &h)?;
                layers.push(layer);
            }
            heads.push(TreatmentHead { layers });
        }
        Ok(Self {
            psi: RepresentationNetwork { layers: psi },
            heads,
            grid_size: g,
            degree: k,
        })
    }

    /// Assembles a model from explicit layers, checking that widths chain.
    pub fn from_layers(psi: Vec<KanLayer>, heads: Vec<Vec<KanLayer>>) -> Result<Self> {
        let first = psi.first().ok_or_else(|| Error::invalid("empty representation network"))?;
        let nb = first.num_basis();
        let degree = first.bases()[0].degree();
        let check_chain = |layers: &[KanLayer], mut prev: usize| -> Result<usize> {
            for l in layers {
                if l.n_in() != prev {
                    return Err(Error::invalid(format!("width mismatch: {} into {}", prev, l.n_in())));
                }
                if l.num_basis() != nb || l.bases()[0].degree() != degree {
                    return Err(Error::invalid("layers disagree on spline resolution"));
                }
                prev = l.n_out();
            }
            Ok(prev)
        };
        let d = check_chain(&psi, first.n_in())?;
        for h in &heads {
            if h.is_empty() || check_chain(h, d)? != 1 {
                return Err(Error::invalid("each head must end in a single output"));
            }
        }
        Ok(Self {
            psi: RepresentationNetwork { layers: psi },
            heads: heads.into_iter().map(|layers| TreatmentHead { layers }).collect(),
            grid_size: nb - degree,
            degree,
        })
    }

    pub fn treatments(&self) -> usize {
        self.heads.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.psi.layers[0].n_in()
    }

    pub fn latent_dim(&self) -> usize {
        self.psi.layers.last().expect("non-empty").n_out()
    }

    pub fn architecture(&self) -> Architecture {
        let head_widths = self.heads.first().map_or_else(Vec::new, |h| {
            h.layers[..h.layers.len() - 1].iter().map(KanLayer::n_out).collect()
        });
        Architecture {
            n_covariates: self.n_covariates(),
            psi_widths: self.psi.layers.iter().map(KanLayer::n_out).collect(),
            head_widths,
            treatments: self.treatments(),
            grid_size: self.grid_size,
            degree: self.degree,
        }
    }

    fn all_layers(&self) -> impl Iterator<Item = &KanLayer> {
        self.psi.layers.iter().chain(self.heads.iter().flat_map(|h| h.layers.iter()))
    }

    /// Parameter buffers in a fixed order: representation layers, then each
    /// head's layers; within a layer coefficients, residual weights, spline
    /// weights.
    pub fn params(&self) -> Vec<&Vec<f64>> {
        self.all_layers().flat_map(KanLayer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.psi
            .layers
            .iter_mut()
            .chain(self.heads.iter_mut().flat_map(|h| h.layers.iter_mut()))
            .flat_map(KanLayer::params_mut)
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        self.bind_inner(tape, true)
    }

    /// Parameters as shaped tensors, in [`KaniteModel::params`] order.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.all_layers()
            .flat_map(|l| {
                let (o, i, nb) = (l.n_out, l.n_in, l.num_basis());
                [
                    Tensor::from_parts(vec![o, i, nb], l.coefficients.clone()),
                    Tensor::from_parts(vec![o, i], l.residual_weights.clone()),
                    Tensor::from_parts(vec![o, i], l.spline_weights.clone()),
                ]
            })
            .collect()
    }

    /// Uses caller-owned variables (shaped as [`KaniteModel::param_tensors`])
    /// in place of this model's parameters; the knot grids are kept.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> Result<BoundModel<'t>> {
        let expected = self.param_tensors();
        if vars.len() != expected.len() {
            return Err(Error::invalid(format!("bind_vars: {} variables for {} parameters", vars.len(), expected.len())));
        }
        for (v, e) in vars.iter().zip(&expected) {
            if v.shape() != e.shape() {
                return Err(Error::Shape { op: "bind_vars", lhs: e.shape().to_vec(), rhs: v.shape() });
            }
        }
        let mut it = vars.chunks(3);
        let mut take = |l: &KanLayer| {
            let c = it.next().expect("length checked");
            BoundLayer { bases: Arc::clone(&l.bases), coefficients: c[0], residual_weights: c[1], spline_weights: c[2] }
        };
        let psi = self.psi.layers.iter().map(&mut take).collect();
        let heads = self.heads.iter().map(|h| h.layers.iter().map(&mut take).collect()).collect();
        Ok(BoundModel { psi, heads })
    }

    /// Binds parameters as constants (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        self.bind_inner(tape, false)
    }

    fn bind_inner<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        BoundModel {
            psi: self.psi.layers.iter().map(|l| l.bind_with(tape, trainable)).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| h.layers.iter().map(|l| l.bind_with(tape, trainable)).collect())
                .collect(),
        }
    }

    /// Predictions `[batch, K]` for every treatment, factual or not.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let (_, preds) = bound.forward(tape.constant(x.clone()))?;
        Ok((*preds.value()).clone())
    }

    /// Latent representation `[batch, d]`.
    pub fn represent(&self, x: &Tensor) -> Result<Tensor> {
        eval_layers(&self.psi.layers, x)
    }
}

fn eval_layers(layers: &[KanLayer], x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bound: Vec<_> = layers.iter().map(|l| l.bind_with(&tape, false)).collect();
    let out = stack_forward(&bound, tape.constant(x.clone()))?;
    Ok((*out.value()).clone())
}

/// Model predictions on a tape, `[batch, K]`.
pub fn model_forward<'t>(model: &BoundModel<'t>, x: Var<'t>) -> Result<Var<'t>> {
    Ok(model.forward(x)?.1)
}

/// `Y_a - Y_b` per row, with 1-based treatment ids.
pub fn predicted_ite(model: &KaniteModel, x: &Tensor, a: usize, b: usize) -> Result<Vec<f64>> {
    let k = model.treatments();
    for id in [a, b] {
        if id == 0 || id > k {
            return Err(Error::Treatment { id, k });
        }
    }
    let preds = model.predict(x)?;
    Ok((0..preds.rows())
        .map(|r| preds.get(r, a - 1) - preds.get(r, b - 1))
        .collect())
}

/// Number of trainable scalars.
pub fn count_parameters(model: &KaniteModel) -> usize {
    model.all_layers().map(KanLayer::parameter_count).sum()
}
