//! Per-layer forward evaluation and vector-Jacobian products.
//!
//! Each layer stores in its record exactly what its reverse sweep needs.
//! Pre-activation gradients are returned per weight matrix so the sweep
//! driver can assemble output Jacobians or loss gradients.

use super::conv::{conv_fold_back, unfold_site_matrix};
use super::graph::{graph_backward, graph_forward, GraphCot, GraphData, GraphRecord};
use super::{Activation, Capture, ExampleInput, Layer, LayerKind, ModelSpec, ParamPart, RowStack};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the value flowing between layers, for shape chaining.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Width {
    Mat(usize),
    Graph { du: usize, dv: usize, de: usize },
}

/// Check layer `idx` against the incoming width and return its output
/// width. `None` incoming width means the model input (any width).
pub(super) fn chain_width(layer: &Layer, idx: usize, incoming: Option<Width>) -> Result<Width> {
    let bias = layer.has_bias as usize;
    let mismatch = |msg: String| Err(Error::Configuration(format!("layer {idx}: {msg}")));
    match (&layer.kind, incoming) {
        (LayerKind::DenseWs { weight }, w) => {
            let expect = weight.cols() - bias;
            match w {
                Some(Width::Mat(p)) if p != expect => {
                    return mismatch(format!("expects width {expect}, got {p}"))
                }
                Some(Width::Graph { .. }) => {
                    return mismatch("dense layer cannot follow a graph value".into())
                }
                _ => {}
            }
            Ok(Width::Mat(weight.rows()))
        }
        (LayerKind::Nonlinearity { .. }, Some(Width::Mat(p))) => Ok(Width::Mat(p)),
        (LayerKind::Nonlinearity { .. }, _) => mismatch("nonlinearity needs a matrix value".into()),
        (LayerKind::ScaledSumAggregate { .. }, Some(Width::Mat(p)))
        | (LayerKind::WeightedSumAggregate { .. }, Some(Width::Mat(p))) => Ok(Width::Mat(p)),
        (LayerKind::ScaledSumAggregate { .. }, _) | (LayerKind::WeightedSumAggregate { .. }, _) => {
            mismatch("aggregation needs a matrix value".into())
        }
        (LayerKind::SimplifiedSelfAttention { wq, wk, wv }, w)
        | (LayerKind::SoftmaxSelfAttention { wq, wk, wv }, w) => {
            let d = wq.cols();
            if wk.cols() != d || wv.cols() != d {
                return mismatch("attention projections disagree on input width".into());
            }
            if wq.rows() != wk.rows() {
                return mismatch("query/key projections disagree on output width".into());
            }
            match w {
                Some(Width::Mat(p)) if p != d => {
                    return mismatch(format!("expects width {d}, got {p}"))
                }
                Some(Width::Graph { .. }) => {
                    return mismatch("attention cannot follow a graph value".into())
                }
                _ => {}
            }
            Ok(Width::Mat(wv.rows()))
        }
        (
            LayerKind::Conv2dUnfold {
                weight,
                kernel,
                channels_in,
                ..
            },
            w,
        ) => {
            if kernel % 2 == 0 {
                return Err(Error::Capability(format!(
                    "layer {idx}: even kernel size {kernel} unsupported under same-padding"
                )));
            }
            if weight.cols() != channels_in * kernel * kernel + bias {
                return mismatch(format!(
                    "conv weight has {} columns, expected {}",
                    weight.cols(),
                    channels_in * kernel * kernel + bias
                ));
            }
            match w {
                Some(Width::Mat(p)) if p != *channels_in => {
                    return mismatch(format!("expects {channels_in} channels, got {p}"))
                }
                Some(Width::Graph { .. }) => {
                    return mismatch("conv cannot follow a graph value".into())
                }
                _ => {}
            }
            Ok(Width::Mat(weight.rows()))
        }
        (
            LayerKind::GraphBlock {
                w_edge,
                w_node,
                w_global,
            },
            w,
        ) => {
            let de_out = w_edge.rows();
            let dv_out = w_node.rows();
            let du_out = w_global.rows();
            if let Some(Width::Graph { du, dv, de }) = w {
                if w_edge.cols() != de + 2 * dv + du {
                    return mismatch(format!(
                        "edge update expects width {}, got {}",
                        de + 2 * dv + du,
                        w_edge.cols()
                    ));
                }
                if w_node.cols() != dv + de_out + du {
                    return mismatch("node update width mismatch".into());
                }
                if w_global.cols() != du + dv_out + de_out {
                    return mismatch("global update width mismatch".into());
                }
            } else if let Some(Width::Mat(_)) = w {
                return mismatch("graph block cannot follow a matrix value".into());
            }
            Ok(Width::Graph {
                du: du_out,
                dv: dv_out,
                de: de_out,
            })
        }
    }
}

#[derive(Debug, Clone)]
enum Value {
    Matrix(Tensor),
    Graph(GraphData),
}

/// Cotangent flowing backwards through the chain.
#[derive(Debug, Clone)]
pub(super) enum Cot {
    Matrix(Tensor),
    Graph(GraphCot),
}

#[derive(Debug)]
pub(super) enum LayerRecord {
    Dense {
        a: RowStack,
        s: RowStack,
        has_bias: bool,
    },
    Nonlinearity {
        input: Tensor,
    },
    ScaledSum {
        rows: usize,
        scale: f64,
    },
    WeightedSum {
        weights: Vec<f64>,
    },
    Attention {
        a: RowStack,
        sq: Tensor,
        sk: Tensor,
        sv: Tensor,
        /// Row-softmax attention matrix; `None` for the simplified form.
        attn: Option<Tensor>,
    },
    Conv {
        a: RowStack,
        s: RowStack,
        kernel: usize,
        channels_in: usize,
        height: usize,
        width: usize,
        has_bias: bool,
    },
    Graph(GraphRecord),
}

/// Append a constant-1 column when the layer folds a bias.
fn augment(x: &Tensor, has_bias: bool) -> Tensor {
    if !has_bias {
        return x.clone();
    }
    let (r, c) = (x.rows(), x.cols());
    Tensor::from_fn(r, c + 1, |i, j| if j < c { x.at(i, j) } else { 1.0 })
}

pub(super) fn forward_example(
    model: &ModelSpec,
    input: &ExampleInput,
) -> Result<(Tensor, Vec<LayerRecord>)> {
    let mut value = match input {
        ExampleInput::Matrix(m) => {
            if m.rank() != 2 {
                return Err(Error::Rank("example inputs must be R x D matrices".into()));
            }
            Value::Matrix(m.clone())
        }
        ExampleInput::Graph(g) => {
            g.validate()?;
            Value::Graph(g.clone())
        }
    };
    let mut records = Vec::with_capacity(model.layers.len());
    for (idx, layer) in model.layers.iter().enumerate() {
        let (next, record) = forward_layer(layer, idx, value)?;
        records.push(record);
        value = next;
    }
    let output = match value {
        Value::Matrix(m) => m,
        Value::Graph(g) => Tensor::matrix(1, g.global.len(), g.global.clone())?,
    };
    Ok((output, records))
}

fn forward_layer(layer: &Layer, idx: usize, value: Value) -> Result<(Value, LayerRecord)> {
    let want_matrix = |v: Value| -> Result<Tensor> {
        match v {
            Value::Matrix(m) => Ok(m),
            Value::Graph(_) => Err(Error::Capability(format!(
                "layer {idx}: cannot apply a matrix layer to a graph value"
            ))),
        }
    };
    match &layer.kind {
        LayerKind::DenseWs { weight } => {
            let x = want_matrix(value)?;
            let a = augment(&x, layer.has_bias);
            if a.cols() != weight.cols() {
                return Err(Error::Dimension(format!(
                    "layer {idx}: input width {} does not match weight width {}",
                    a.cols(),
                    weight.cols()
                )));
            }
            let s = a.matmul(&weight.transpose())?;
            let record = LayerRecord::Dense {
                a: RowStack::from_tensor(&a),
                s: RowStack::from_tensor(&s),
                has_bias: layer.has_bias,
            };
            Ok((Value::Matrix(s), record))
        }
        LayerKind::Nonlinearity { activation } => {
            let x = want_matrix(value)?;
            let out = Tensor::from_fn(x.rows(), x.cols(), |i, j| apply(*activation, x.at(i, j)));
            Ok((Value::Matrix(out), LayerRecord::Nonlinearity { input: x }))
        }
        LayerKind::ScaledSumAggregate { scale } => {
            let x = want_matrix(value)?;
            let agg = super::aggregate_scaled_sum(&x, *scale)?;
            let out = Tensor::matrix(1, agg.len(), agg.data().to_vec())?;
            Ok((
                Value::Matrix(out),
                LayerRecord::ScaledSum {
                    rows: x.rows(),
                    scale: *scale,
                },
            ))
        }
        LayerKind::WeightedSumAggregate { weights } => {
            let x = want_matrix(value)?;
            if weights.len() != x.rows() {
                return Err(Error::Dimension(format!(
                    "layer {idx}: {} weights for {} rows",
                    weights.len(),
                    x.rows()
                )));
            }
            let mut acc = vec![0.0; x.cols()];
            for (r, w) in weights.iter().enumerate() {
                for (a, v) in acc.iter_mut().zip(x.row(r)) {
                    *a += w * v;
                }
            }
            let out = Tensor::matrix(1, acc.len(), acc)?;
            Ok((
                Value::Matrix(out),
                LayerRecord::WeightedSum {
                    weights: weights.clone(),
                },
            ))
        }
        LayerKind::SimplifiedSelfAttention { wq, wk, wv } => {
            let x = want_matrix(value)?;
            let sq = x.matmul(&wq.transpose())?;
            let sk = x.matmul(&wk.transpose())?;
            let sv = x.matmul(&wv.transpose())?;
            let out = sq.matmul(&sk.transpose())?.matmul(&sv)?;
            let record = LayerRecord::Attention {
                a: RowStack::from_tensor(&x),
                sq,
                sk,
                sv,
                attn: None,
            };
            Ok((Value::Matrix(out), record))
        }
        LayerKind::SoftmaxSelfAttention { wq, wk, wv } => {
            let x = want_matrix(value)?;
            let sq = x.matmul(&wq.transpose())?;
            let sk = x.matmul(&wk.transpose())?;
            let sv = x.matmul(&wv.transpose())?;
            let scores = sq.matmul(&sk.transpose())?;
            let attn = Tensor::from_fn(scores.rows(), scores.cols(), |i, _| {
                // placeholder; filled row-wise below
                let _ = i;
                0.0
            });
            let mut attn = attn;
            for r in 0..scores.rows() {
                let p = super::softmax_probs(scores.row(r));
                for (j, v) in p.iter().enumerate() {
                    attn.set(r, j, *v);
                }
            }
            let out = attn.matmul(&sv)?;
            let record = LayerRecord::Attention {
                a: RowStack::from_tensor(&x),
                sq,
                sk,
                sv,
                attn: Some(attn),
            };
            Ok((Value::Matrix(out), record))
        }
        LayerKind::Conv2dUnfold {
            weight,
            kernel,
            channels_in,
            height,
            width,
        } => {
            let x = want_matrix(value)?;
            if x.rows() != height * width || x.cols() != *channels_in {
                return Err(Error::Dimension(format!(
                    "layer {idx}: conv input must be {}x{} (sites x channels), got {}x{}",
                    height * width,
                    channels_in,
                    x.rows(),
                    x.cols()
                )));
            }
            let unfolded = unfold_site_matrix(&x, *kernel, *channels_in, *height, *width)?;
            let a = augment(&unfolded, layer.has_bias);
            let s = a.matmul(&weight.transpose())?;
            let record = LayerRecord::Conv {
                a: RowStack::from_tensor(&a),
                s: RowStack::from_tensor(&s),
                kernel: *kernel,
                channels_in: *channels_in,
                height: *height,
                width: *width,
                has_bias: layer.has_bias,
            };
            Ok((Value::Matrix(s), record))
        }
        LayerKind::GraphBlock {
            w_edge,
            w_node,
            w_global,
        } => {
            let g = match value {
                Value::Graph(g) => g,
                Value::Matrix(_) => {
                    return Err(Error::Capability(format!(
                        "layer {idx}: graph block needs a graph value"
                    )))
                }
            };
            let (out, record) = graph_forward(&g, w_edge, w_node, w_global)?;
            Ok((Value::Graph(out), record))
        }
    }
}

fn apply(activation: Activation, v: f64) -> f64 {
    match activation {
        Activation::Tanh => v.tanh(),
        Activation::Relu => v.max(0.0),
    }
}

fn apply_grad(activation: Activation, v: f64) -> f64 {
    match activation {
        Activation::Tanh => 1.0 - v.tanh() * v.tanh(),
        Activation::Relu => {
            if v > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Reverse sweep from an output cotangent down to every weight matrix's
/// pre-activation rows. Returns one gradient stack per weight matrix in
/// `param_layers` order.
pub(super) fn backward_example(
    model: &ModelSpec,
    records: &[LayerRecord],
    output_cot: &Tensor,
) -> Result<Vec<RowStack>> {
    let mut cot = match records.last().unwrap() {
        LayerRecord::Graph(g) => {
            debug_assert_eq!(output_cot.rows(), 1);
            Cot::Graph(GraphCot {
                global: output_cot.row(0).to_vec(),
                nodes: RowStack::zeros(g.n_nodes(), g.dv_out()),
                edges: RowStack::zeros(g.n_edges(), g.de_out()),
            })
        }
        _ => Cot::Matrix(output_cot.clone()),
    };
    let mut per_layer_ds: Vec<Vec<(ParamPart, RowStack)>> = Vec::with_capacity(records.len());
    for (layer, record) in model.layers.iter().zip(records).rev() {
        let (next, ds) = backward_layer(layer, record, cot)?;
        per_layer_ds.push(ds);
        cot = next;
    }
    per_layer_ds.reverse();
    // flatten in param_layers order (layer-major, parts in declaration order)
    let flat: Vec<RowStack> = per_layer_ds
        .into_iter()
        .flatten()
        .map(|(_, stack)| stack)
        .collect();
    debug_assert_eq!(flat.len(), model.param_layers().len());
    Ok(flat)
}

fn backward_layer(
    layer: &Layer,
    record: &LayerRecord,
    cot: Cot,
) -> Result<(Cot, Vec<(ParamPart, RowStack)>)> {
    let want_matrix = |c: Cot| -> Tensor {
        match c {
            Cot::Matrix(m) => m,
            Cot::Graph(_) => unreachable!("graph cotangent into a matrix layer"),
        }
    };
    match (&layer.kind, record) {
        (LayerKind::DenseWs { weight }, LayerRecord::Dense { a: _, has_bias, .. })
        | (LayerKind::Conv2dUnfold { weight, .. }, LayerRecord::Conv { a: _, has_bias, .. }) => {
            let g = want_matrix(cot);
            // dS is the cotangent itself; input cotangent is g W with the
            // bias column dropped, then (for conv) folded back to sites.
            let mut din = g.matmul(weight)?;
            if *has_bias {
                din = Tensor::from_fn(din.rows(), din.cols() - 1, |i, j| din.at(i, j));
            }
            let din = match record {
                LayerRecord::Conv {
                    kernel,
                    channels_in,
                    height,
                    width,
                    ..
                } => conv_fold_back(&din, *kernel, *channels_in, *height, *width)?,
                _ => din,
            };
            Ok((
                Cot::Matrix(din),
                vec![(ParamPart::Main, RowStack::from_tensor(&g))],
            ))
        }
        (LayerKind::Nonlinearity { activation }, LayerRecord::Nonlinearity { input }) => {
            let g = want_matrix(cot);
            let din = Tensor::from_fn(g.rows(), g.cols(), |i, j| {
                g.at(i, j) * apply_grad(*activation, input.at(i, j))
            });
            Ok((Cot::Matrix(din), vec![]))
        }
        (LayerKind::ScaledSumAggregate { .. }, LayerRecord::ScaledSum { rows, scale }) => {
            let g = want_matrix(cot);
            let din = Tensor::from_fn(*rows, g.cols(), |_, j| scale * g.at(0, j));
            Ok((Cot::Matrix(din), vec![]))
        }
        (LayerKind::WeightedSumAggregate { .. }, LayerRecord::WeightedSum { weights }) => {
            let g = want_matrix(cot);
            let din = Tensor::from_fn(weights.len(), g.cols(), |r, j| weights[r] * g.at(0, j));
            Ok((Cot::Matrix(din), vec![]))
        }
        (
            LayerKind::SimplifiedSelfAttention { wq, wk, wv },
            LayerRecord::Attention {
                sq,
                sk,
                sv,
                attn: None,
                ..
            },
        ) => {
            let g = want_matrix(cot);
            let dsq = g.matmul(&sv.transpose())?.matmul(sk)?;
            let dsk = sv.matmul(&g.transpose())?.matmul(sq)?;
            let dsv = sk.matmul(&sq.transpose())?.matmul(&g)?;
            let din = dsq
                .matmul(wq)?
                .add(&dsk.matmul(wk)?)?
                .add(&dsv.matmul(wv)?)?;
            Ok((
                Cot::Matrix(din),
                vec![
                    (ParamPart::Query, RowStack::from_tensor(&dsq)),
                    (ParamPart::Key, RowStack::from_tensor(&dsk)),
                    (ParamPart::Value, RowStack::from_tensor(&dsv)),
                ],
            ))
        }
        (
            LayerKind::SoftmaxSelfAttention { wq, wk, wv },
            LayerRecord::Attention {
                sq,
                sk,
                sv,
                attn: Some(attn),
                ..
            },
        ) => {
            let g = want_matrix(cot);
            let dsv = attn.transpose().matmul(&g)?;
            let dattn = g.matmul(&sv.transpose())?;
            // softmax vjp per row: dM = (dA − (dA·A) 1ᵀ) ⊙ A
            let mut dscores = Tensor::zeros(&[attn.rows(), attn.cols()]);
            for r in 0..attn.rows() {
                let dot: f64 = (0..attn.cols())
                    .map(|j| dattn.at(r, j) * attn.at(r, j))
                    .sum();
                for j in 0..attn.cols() {
                    dscores.set(r, j, (dattn.at(r, j) - dot) * attn.at(r, j));
                }
            }
            let dsq = dscores.matmul(sk)?;
            let dsk = dscores.transpose().matmul(sq)?;
            let din = dsq
                .matmul(wq)?
                .add(&dsk.matmul(wk)?)?
                .add(&dsv.matmul(wv)?)?;
            Ok((
                Cot::Matrix(din),
                vec![
                    (ParamPart::Query, RowStack::from_tensor(&dsq)),
                    (ParamPart::Key, RowStack::from_tensor(&dsk)),
                    (ParamPart::Value, RowStack::from_tensor(&dsv)),
                ],
            ))
        }
        (
            LayerKind::GraphBlock {
                w_edge,
                w_node,
                w_global,
            },
            LayerRecord::Graph(rec),
        ) => {
            let gcot = match cot {
                Cot::Graph(g) => g,
                Cot::Matrix(_) => unreachable!("matrix cotangent into a graph block"),
            };
            let (din, ds_edge, ds_node, ds_global) =
                graph_backward(rec, w_edge, w_node, w_global, &gcot)?;
            Ok((
                Cot::Graph(din),
                vec![
                    (ParamPart::Edge, ds_edge),
                    (ParamPart::Node, ds_node),
                    (ParamPart::Global, ds_global),
                ],
            ))
        }
        _ => Err(Error::Capability(
            "layer record does not match layer kind".into(),
        )),
    }
}

/// Pull the capture (input rows, pre-activation rows) for one weight
/// matrix out of a layer record.
pub(super) fn capture_for(record: &LayerRecord, part: ParamPart) -> Capture {
    match (record, part) {
        (LayerRecord::Dense { a, s, .. }, ParamPart::Main)
        | (LayerRecord::Conv { a, s, .. }, ParamPart::Main) => Capture {
            a: a.clone(),
            s: s.clone(),
        },
        (LayerRecord::Attention { a, sq, .. }, ParamPart::Query) => Capture {
            a: a.clone(),
            s: RowStack::from_tensor(sq),
        },
        (LayerRecord::Attention { a, sk, .. }, ParamPart::Key) => Capture {
            a: a.clone(),
            s: RowStack::from_tensor(sk),
        },
        (LayerRecord::Attention { a, sv, .. }, ParamPart::Value) => Capture {
            a: a.clone(),
            s: RowStack::from_tensor(sv),
        },
        (LayerRecord::Graph(rec), ParamPart::Edge) => rec.edge_capture(),
        (LayerRecord::Graph(rec), ParamPart::Node) => rec.node_capture(),
        (LayerRecord::Graph(rec), ParamPart::Global) => rec.global_capture(),
        _ => panic!("no capture for part {part:?}"),
    }
}
