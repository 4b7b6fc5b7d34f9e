//! Micro model zoo of linear weight-sharing layers.
//!
//! A model is an ordered list of layers applied per example to an input
//! with an extra weight-sharing dimension of size R (sequence positions,
//! spatial sites, graph nodes/edges). `forward` captures, for every
//! weight-bearing part, the layer input rows `a` and pre-activation rows
//! `s = W a`; `backward_jacobians` produces the output Jacobians w.r.t.
//! every pre-activation row by one reverse sweep per output coordinate.
//! Those two captures are exactly what the exact-curvature oracle and
//! the Kronecker-factored approximations consume.

mod conv;
mod graph;
mod layers;

pub use conv::conv_unfold;
pub use graph::{graph_block_forward, GraphCot, GraphData};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where the weight-sharing dimension is aggregated relative to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    /// The loss has N·R terms; the shared dimension survives to the loss.
    Expand,
    /// The loss has N terms; the shared dimension is aggregated in the
    /// forward pass.
    Reduce,
}

/// Negative log-likelihood family applied to the model output.
#[derive(Debug, Clone)]
pub enum LossKind {
    /// Gaussian with SPD covariance (loss Hessian is `sigma⁻¹`).
    Gaussian { sigma: Tensor },
    /// Softmax cross-entropy over `classes` categories.
    Categorical { classes: usize },
}

impl LossKind {
    pub fn output_dim(&self) -> usize {
        match self {
            LossKind::Gaussian { sigma } => sigma.rows(),
            LossKind::Categorical { classes } => *classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Layer kinds. Weight matrices are `P_out × P_in_eff` where the
/// effective input width includes the constant-1 bias column when the
/// layer folds a bias.
#[derive(Debug, Clone)]
pub enum LayerKind {
    DenseWs {
        weight: Tensor,
    },
    Nonlinearity {
        activation: Activation,
    },
    ScaledSumAggregate {
        scale: f64,
    },
    /// Per-row weighted sum; with unequal weights this is the linear
    /// aggregation for which the reduce approximation loses exactness.
    WeightedSumAggregate {
        weights: Vec<f64>,
    },
    SimplifiedSelfAttention {
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
    },
    SoftmaxSelfAttention {
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
    },
    Conv2dUnfold {
        weight: Tensor,
        kernel: usize,
        channels_in: usize,
        height: usize,
        width: usize,
    },
    GraphBlock {
        w_edge: Tensor,
        w_node: Tensor,
        w_global: Tensor,
    },
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    /// Fold a bias into the weights via an appended constant-1 input
    /// column. Supported for `DenseWs` and `Conv2dUnfold`.
    pub has_bias: bool,
}

impl Layer {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            has_bias: false,
        }
    }

    pub fn with_bias(kind: LayerKind) -> Self {
        Self {
            kind,
            has_bias: true,
        }
    }
}

/// Which weight matrix of a layer a capture belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamPart {
    Main,
    Query,
    Key,
    Value,
    Edge,
    Node,
    Global,
}

impl ParamPart {
    pub fn label(&self) -> &'static str {
        match self {
            ParamPart::Main => "main",
            ParamPart::Query => "query",
            ParamPart::Key => "key",
            ParamPart::Value => "value",
            ParamPart::Edge => "edge",
            ParamPart::Node => "node",
            ParamPart::Global => "global",
        }
    }
}

/// One weight matrix of the model, addressable for curvature blocks.
#[derive(Debug, Clone)]
pub struct ParamLayerInfo {
    pub layer: usize,
    pub part: ParamPart,
    /// Effective input width (bias column included when folded).
    pub p_in: usize,
    pub p_out: usize,
}

impl ParamLayerInfo {
    /// Flattened parameter count of this block.
    pub fn param_count(&self) -> usize {
        self.p_in * self.p_out
    }

    pub fn name(&self) -> String {
        format!("layer{}:{}", self.layer, self.part.label())
    }
}

/// Layered model description plus loss and setting tag.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub layers: Vec<Layer>,
    pub loss: LossKind,
    pub setting: Setting,
}

impl ModelSpec {
    pub fn new(layers: Vec<Layer>, loss: LossKind, setting: Setting) -> Result<Self> {
        let model = Self {
            layers,
            loss,
            setting,
        };
        model.validate()?;
        Ok(model)
    }

    /// Structural checks: adjacent widths compatible, aggregation count
    /// consistent with the setting tag, bias flags only where supported.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Configuration("model has no layers".into()));
        }
        let mut aggregations = 0usize;
        let mut graph_blocks = 0usize;
        let mut width: Option<layers::Width> = None;
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.has_bias
                && !matches!(
                    layer.kind,
                    LayerKind::DenseWs { .. } | LayerKind::Conv2dUnfold { .. }
                )
            {
                return Err(Error::Configuration(format!(
                    "layer {idx}: bias folding only supported for dense and conv layers"
                )));
            }
            match layer.kind {
                LayerKind::ScaledSumAggregate { scale } => {
                    if scale == 0.0 {
                        return Err(Error::Configuration(format!(
                            "layer {idx}: scaled-sum scale must be nonzero"
                        )));
                    }
                    aggregations += 1;
                }
                LayerKind::WeightedSumAggregate { ref weights } => {
                    if weights.is_empty() {
                        return Err(Error::Configuration(format!(
                            "layer {idx}: weighted sum needs at least one weight"
                        )));
                    }
                    aggregations += 1;
                }
                LayerKind::GraphBlock { .. } => graph_blocks += 1,
                _ => {}
            }
            width = Some(layers::chain_width(layer, idx, width)?);
        }
        match self.setting {
            Setting::Expand => {
                if aggregations > 0 || graph_blocks > 0 {
                    return Err(Error::Configuration(
                        "expand models must not aggregate the weight-sharing dimension".into(),
                    ));
                }
            }
            Setting::Reduce => {
                let ok = (aggregations == 1 && graph_blocks == 0)
                    || (aggregations == 0 && graph_blocks > 0);
                if !ok {
                    return Err(Error::Configuration(
                        "reduce models need exactly one aggregation (or graph blocks)".into(),
                    ));
                }
            }
        }
        let out_width = match width.unwrap() {
            layers::Width::Mat(w) => w,
            layers::Width::Graph { du, .. } => du,
        };
        if out_width != self.loss.output_dim() {
            return Err(Error::Configuration(format!(
                "model output width {out_width} does not match loss dimension {}",
                self.loss.output_dim()
            )));
        }
        Ok(())
    }

    /// All weight matrices in forward order.
    pub fn param_layers(&self) -> Vec<ParamLayerInfo> {
        let mut out = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut push = |part: ParamPart, w: &Tensor| {
                out.push(ParamLayerInfo {
                    layer: idx,
                    part,
                    p_in: w.cols(),
                    p_out: w.rows(),
                });
            };
            match &layer.kind {
                LayerKind::DenseWs { weight } => push(ParamPart::Main, weight),
                LayerKind::Conv2dUnfold { weight, .. } => push(ParamPart::Main, weight),
                LayerKind::SimplifiedSelfAttention { wq, wk, wv }
                | LayerKind::SoftmaxSelfAttention { wq, wk, wv } => {
                    push(ParamPart::Query, wq);
                    push(ParamPart::Key, wk);
                    push(ParamPart::Value, wv);
                }
                LayerKind::GraphBlock {
                    w_edge,
                    w_node,
                    w_global,
                } => {
                    push(ParamPart::Edge, w_edge);
                    push(ParamPart::Node, w_node);
                    push(ParamPart::Global, w_global);
                }
                _ => {}
            }
        }
        out
    }

    pub fn weight(&self, layer: usize, part: ParamPart) -> &Tensor {
        match (&self.layers[layer].kind, part) {
            (LayerKind::DenseWs { weight }, ParamPart::Main) => weight,
            (LayerKind::Conv2dUnfold { weight, .. }, ParamPart::Main) => weight,
            (LayerKind::SimplifiedSelfAttention { wq, .. }, ParamPart::Query) => wq,
            (LayerKind::SimplifiedSelfAttention { wk, .. }, ParamPart::Key) => wk,
            (LayerKind::SimplifiedSelfAttention { wv, .. }, ParamPart::Value) => wv,
            (LayerKind::SoftmaxSelfAttention { wq, .. }, ParamPart::Query) => wq,
            (LayerKind::SoftmaxSelfAttention { wk, .. }, ParamPart::Key) => wk,
            (LayerKind::SoftmaxSelfAttention { wv, .. }, ParamPart::Value) => wv,
            (LayerKind::GraphBlock { w_edge, .. }, ParamPart::Edge) => w_edge,
            (LayerKind::GraphBlock { w_node, .. }, ParamPart::Node) => w_node,
            (LayerKind::GraphBlock { w_global, .. }, ParamPart::Global) => w_global,
            _ => panic!("no weight for layer {layer} part {part:?}"),
        }
    }

    pub fn weight_mut(&mut self, layer: usize, part: ParamPart) -> &mut Tensor {
        match (&mut self.layers[layer].kind, part) {
            (LayerKind::DenseWs { weight }, ParamPart::Main) => weight,
            (LayerKind::Conv2dUnfold { weight, .. }, ParamPart::Main) => weight,
            (LayerKind::SimplifiedSelfAttention { wq, .. }, ParamPart::Query) => wq,
            (LayerKind::SimplifiedSelfAttention { wk, .. }, ParamPart::Key) => wk,
            (LayerKind::SimplifiedSelfAttention { wv, .. }, ParamPart::Value) => wv,
            (LayerKind::SoftmaxSelfAttention { wq, .. }, ParamPart::Query) => wq,
            (LayerKind::SoftmaxSelfAttention { wk, .. }, ParamPart::Key) => wk,
            (LayerKind::SoftmaxSelfAttention { wv, .. }, ParamPart::Value) => wv,
            (LayerKind::GraphBlock { w_edge, .. }, ParamPart::Edge) => w_edge,
            (LayerKind::GraphBlock { w_node, .. }, ParamPart::Node) => w_node,
            (LayerKind::GraphBlock { w_global, .. }, ParamPart::Global) => w_global,
            _ => panic!("no weight for layer {layer} part {part:?}"),
        }
    }
}

/// One example's input: a row matrix `R × D` or a graph.
#[derive(Debug, Clone)]
pub enum ExampleInput {
    Matrix(Tensor),
    Graph(GraphData),
}

/// Labels for a batch. Gaussian labels are row matrices (`R × C` in the
/// expand setting, `1 × C` in the reduce setting); categorical labels
/// are class indices per loss term.
#[derive(Debug, Clone)]
pub enum Labels {
    Gaussian(Vec<Tensor>),
    Categorical(Vec<Vec<usize>>),
}

/// Inputs and labels for one mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<ExampleInput>,
    pub labels: Labels,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// A stack of feature rows that, unlike [`Tensor`], may be empty.
/// Used for captures and cotangents where a graph can contribute zero
/// rows (a graph without edges).
#[derive(Debug, Clone, PartialEq)]
pub struct RowStack {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowStack {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Column-wise sum over rows.
    pub fn row_sum(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (a, v) in acc.iter_mut().zip(self.row(r)) {
                *a += v;
            }
        }
        acc
    }

    pub fn to_tensor(&self) -> Option<Tensor> {
        if self.rows == 0 {
            None
        } else {
            Some(Tensor::matrix(self.rows, self.cols, self.data.clone()).unwrap())
        }
    }
}

/// Captured quantities for one weight matrix and one example: layer
/// input rows `a` (bias column included when folded) and pre-activation
/// rows `s = a Wᵀ`.
#[derive(Debug, Clone)]
pub struct Capture {
    pub a: RowStack,
    pub s: RowStack,
}

/// Everything one forward sweep records.
#[derive(Debug)]
pub struct Tape {
    /// Model outputs, one `R_out × C` matrix per example (`1 × C` in the
    /// reduce setting).
    pub outputs: Vec<Tensor>,
    /// `captures[param_layer][example]`.
    pub captures: Vec<Vec<Capture>>,
    records: Vec<Vec<layers::LayerRecord>>,
}

impl Tape {
    pub fn num_examples(&self) -> usize {
        self.outputs.len()
    }
}

/// Output Jacobians w.r.t. one weight matrix's pre-activation rows for
/// one example: `b(r, m)[p, i] = ∂ f(x)_{r,i} / ∂ s_{m,p}`.
#[derive(Debug, Clone)]
pub struct PreactJacobian {
    pub out_rows: usize,
    pub classes: usize,
    pub in_rows: usize,
    pub p_out: usize,
    data: Vec<f64>,
}

impl PreactJacobian {
    fn zeros(out_rows: usize, classes: usize, in_rows: usize, p_out: usize) -> Self {
        Self {
            out_rows,
            classes,
            in_rows,
            p_out,
            data: vec![0.0; out_rows * classes * in_rows * p_out],
        }
    }

    #[inline]
    fn idx(&self, r: usize, m: usize, p: usize, i: usize) -> usize {
        ((r * self.in_rows + m) * self.p_out + p) * self.classes + i
    }

    #[inline]
    pub fn at(&self, r: usize, m: usize, p: usize, i: usize) -> f64 {
        self.data[self.idx(r, m, p, i)]
    }

    /// The `P_out × C` block `b(r, m)`.
    pub fn block(&self, r: usize, m: usize) -> Tensor {
        Tensor::from_fn(self.p_out, self.classes, |p, i| self.at(r, m, p, i))
    }

    /// Row-sum over the weight-sharing dimension: `Σₘ b(r, m)`.
    pub fn block_sum_over_rows(&self, r: usize) -> Tensor {
        let mut out = Tensor::zeros(&[self.p_out, self.classes]);
        for m in 0..self.in_rows {
            for p in 0..self.p_out {
                for i in 0..self.classes {
                    out.add_at(p, i, self.at(r, m, p, i));
                }
            }
        }
        out
    }
}

/// Run the model over a batch, capturing inputs and pre-activations for
/// every weight matrix.
pub fn forward(model: &ModelSpec, batch: &Batch) -> Result<Tape> {
    model.validate()?;
    validate_batch(model, batch)?;
    let params = model.param_layers();
    let mut outputs = Vec::with_capacity(batch.len());
    let mut records = Vec::with_capacity(batch.len());
    let mut captures: Vec<Vec<Capture>> = vec![Vec::with_capacity(batch.len()); params.len()];
    for input in &batch.inputs {
        let (output, recs) = layers::forward_example(model, input)?;
        if model.setting == Setting::Reduce && output.rows() != 1 {
            return Err(Error::Configuration(
                "reduce model produced a multi-row output; aggregation missing".into(),
            ));
        }
        for (slot, pl) in captures.iter_mut().zip(&params) {
            slot.push(layers::capture_for(&recs[pl.layer], pl.part));
        }
        outputs.push(output);
        records.push(recs);
    }
    Ok(Tape {
        outputs,
        captures,
        records,
    })
}

fn validate_batch(model: &ModelSpec, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Configuration("batch is empty".into()));
    }
    let needs_terms: usize = match model.setting {
        Setting::Expand => batch
            .inputs
            .iter()
            .map(|inp| match inp {
                ExampleInput::Matrix(m) => m.rows(),
                ExampleInput::Graph(_) => 0,
            })
            .sum(),
        Setting::Reduce => batch.len(),
    };
    let label_terms = match &batch.labels {
        Labels::Gaussian(rows) => rows.iter().map(|t| t.rows()).sum::<usize>(),
        Labels::Categorical(per_example) => per_example.iter().map(|v| v.len()).sum::<usize>(),
    };
    if label_terms != needs_terms {
        return Err(Error::Configuration(format!(
            "label count {label_terms} does not match the {needs_terms} loss terms of this setting"
        )));
    }
    Ok(())
}

/// Analytic output Jacobians w.r.t. every pre-activation row, one
/// reverse sweep per output coordinate.
///
/// Returned as `jac[param_layer][example]`.
#[allow(clippy::needless_range_loop)]
pub fn backward_jacobians(model: &ModelSpec, tape: &Tape) -> Result<Vec<Vec<PreactJacobian>>> {
    let params = model.param_layers();
    let mut out: Vec<Vec<PreactJacobian>> = vec![Vec::new(); params.len()];
    for (n, output) in tape.outputs.iter().enumerate() {
        let out_rows = output.rows();
        let classes = output.cols();
        let mut jacs: Vec<PreactJacobian> = params
            .iter()
            .enumerate()
            .map(|(k, pl)| {
                let cap = &tape.captures[k][n];
                PreactJacobian::zeros(out_rows, classes, cap.s.rows(), pl.p_out)
            })
            .collect();
        for r in 0..out_rows {
            for i in 0..classes {
                let mut seed = Tensor::zeros(&[out_rows, classes]);
                seed.set(r, i, 1.0);
                let ds = layers::backward_example(model, &tape.records[n], &seed)?;
                for (k, stack) in ds.iter().enumerate() {
                    let jac = &mut jacs[k];
                    for m in 0..stack.rows() {
                        let row = stack.row(m);
                        for p in 0..jac.p_out {
                            let idx = jac.idx(r, m, p, i);
                            jac.data[idx] = row[p];
                        }
                    }
                }
            }
        }
        for (k, jac) in jacs.into_iter().enumerate() {
            out[k].push(jac);
        }
    }
    Ok(out)
}

/// Backpropagate per-example output cotangents to per-weight-matrix
/// pre-activation gradients: `grads[param_layer][example]` has the same
/// row count as the matching capture.
pub fn backprop_seeds(
    model: &ModelSpec,
    tape: &Tape,
    seeds: &[Tensor],
) -> Result<Vec<Vec<RowStack>>> {
    let params = model.param_layers();
    let mut out: Vec<Vec<RowStack>> = vec![Vec::with_capacity(seeds.len()); params.len()];
    for (n, seed) in seeds.iter().enumerate() {
        let ds = layers::backward_example(model, &tape.records[n], seed)?;
        for (k, stack) in ds.into_iter().enumerate() {
            out[k].push(stack);
        }
    }
    Ok(out)
}

/// Total loss and its gradient per output row for every example.
pub fn loss_and_output_grads(
    model: &ModelSpec,
    tape: &Tape,
    batch: &Batch,
) -> Result<(f64, Vec<Tensor>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(tape.outputs.len());
    for (n, output) in tape.outputs.iter().enumerate() {
        let mut grad = Tensor::zeros(&[output.rows(), output.cols()]);
        for r in 0..output.rows() {
            let f: Vec<f64> = output.row(r).to_vec();
            let (l, g) = loss_term(model, batch, n, r, &f)?;
            total += l;
            for (j, gj) in g.iter().enumerate() {
                grad.set(r, j, *gj);
            }
        }
        grads.push(grad);
    }
    Ok((total, grads))
}

/// Negative log-likelihood of one loss term and its gradient w.r.t. the
/// output row. Gaussian terms include their normalisation constant so
/// the value is a true log-density.
pub fn loss_term(
    model: &ModelSpec,
    batch: &Batch,
    example: usize,
    row: usize,
    f: &[f64],
) -> Result<(f64, Vec<f64>)> {
    match (&model.loss, &batch.labels) {
        (LossKind::Gaussian { sigma }, Labels::Gaussian(labels)) => {
            let y = labels[example].row(row);
            let resid = Tensor::vector(f.iter().zip(y).map(|(a, b)| a - b).collect());
            let sig_inv_r = sigma.solve_spd(&resid)?;
            let quad = resid.dot(&sig_inv_r)?;
            let c = f.len() as f64;
            let log_det = sigma.log_det_spd()?;
            let value = 0.5 * quad + 0.5 * (c * (2.0 * std::f64::consts::PI).ln() + log_det);
            Ok((value, sig_inv_r.data().to_vec()))
        }
        (LossKind::Categorical { .. }, Labels::Categorical(labels)) => {
            let y = labels[example][row];
            let p = softmax_probs(f);
            let value = -p[y].max(f64::MIN_POSITIVE).ln();
            let mut grad = p;
            grad[y] -= 1.0;
            Ok((value, grad))
        }
        _ => Err(Error::Configuration(
            "label kind does not match loss kind".into(),
        )),
    }
}

/// Additive constant of one loss term (the Gaussian normaliser); zero
/// for categorical terms. Subtracting it from the negative
/// log-likelihood leaves the pure data-fit part.
pub fn loss_constant(loss: &LossKind) -> Result<f64> {
    match loss {
        LossKind::Gaussian { sigma } => {
            let c = sigma.rows() as f64;
            Ok(0.5 * (c * (2.0 * std::f64::consts::PI).ln() + sigma.log_det_spd()?))
        }
        LossKind::Categorical { .. } => Ok(0.0),
    }
}

/// Number of loss terms in the batch under the model's setting.
pub fn loss_term_count(model: &ModelSpec, batch: &Batch) -> usize {
    match model.setting {
        Setting::Expand => match &batch.labels {
            Labels::Gaussian(rows) => rows.iter().map(|t| t.rows()).sum(),
            Labels::Categorical(per) => per.iter().map(|v| v.len()).sum(),
        },
        Setting::Reduce => batch.len(),
    }
}

/// Total loss and per-weight-matrix gradients `∇_W = Σₘ dsₘ aₘᵀ`.
pub fn loss_gradients(model: &ModelSpec, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
    let tape = forward(model, batch)?;
    let (total, out_grads) = loss_and_output_grads(model, &tape, batch)?;
    let ds = backprop_seeds(model, &tape, &out_grads)?;
    let params = model.param_layers();
    let mut grads = Vec::with_capacity(params.len());
    for (k, pl) in params.iter().enumerate() {
        let mut g = Tensor::zeros(&[pl.p_out, pl.p_in]);
        for (n, stack) in ds[k].iter().enumerate() {
            let a = &tape.captures[k][n].a;
            for m in 0..stack.rows() {
                g.add_outer_scaled(stack.row(m), a.row(m), 1.0);
            }
        }
        grads.push(g);
    }
    Ok((total, grads))
}

/// Scaled column-wise sum `c · Σᵣ sᵣ` of a row matrix.
pub fn aggregate_scaled_sum(s: &Tensor, c: f64) -> Result<Tensor> {
    if c == 0.0 {
        return Err(Error::Argument("scaled-sum scale must be nonzero".into()));
    }
    if s.rank() != 2 {
        return Err(Error::Rank("aggregate_scaled_sum needs a matrix".into()));
    }
    let mut acc = vec![0.0; s.cols()];
    for r in 0..s.rows() {
        for (a, v) in acc.iter_mut().zip(s.row(r)) {
            *a += v;
        }
    }
    Ok(Tensor::vector(acc.iter().map(|v| c * v).collect()))
}

pub(crate) fn softmax_probs(f: &[f64]) -> Vec<f64> {
    let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = f.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|v| v / sum).collect()
}

/// Gradient of one loss term with the label drawn from the model's own
/// predictive distribution. Gaussian draws go through the Cholesky
/// factor of the covariance, so `∇ = −L⁻ᵀ ε` has covariance `Σ⁻¹`.
pub fn sampled_loss_gradient(
    loss: &LossKind,
    f: &[f64],
    stream: &mut crate::rng::Substream,
) -> Result<Vec<f64>> {
    match loss {
        LossKind::Gaussian { sigma } => {
            let c = f.len();
            if sigma.rows() != c {
                return Err(Error::Dimension(
                    "loss covariance does not match output width".into(),
                ));
            }
            let l = sigma.cholesky()?;
            let eps: Vec<f64> = (0..c).map(|_| stream.standard_normal()).collect();
            // y = f + L ε, so ∇_f ℓ = Σ⁻¹ (f − y) = −Σ⁻¹ L ε
            let mut noise = vec![0.0; c];
            for (i, n) in noise.iter_mut().enumerate() {
                for (j, e) in eps.iter().enumerate().take(i + 1) {
                    *n += l.at(i, j) * e;
                }
            }
            let grad = sigma.solve_spd(&Tensor::vector(noise))?;
            Ok(grad.data().iter().map(|v| -v).collect())
        }
        LossKind::Categorical { .. } => {
            let p = softmax_probs(f);
            let y = stream.categorical(&p);
            let mut grad = p;
            grad[y] -= 1.0;
            Ok(grad)
        }
    }
}

/// Convenience: deep linear chain `W_L ⋯ W_1` as DenseWs layers
/// (no biases), with the given loss and setting.
pub fn deep_linear_model(
    weights: Vec<Tensor>,
    loss: LossKind,
    setting: Setting,
) -> Result<ModelSpec> {
    let layers = weights
        .into_iter()
        .map(|w| Layer::new(LayerKind::DenseWs { weight: w }))
        .collect();
    ModelSpec::new(layers, loss, setting)
}
