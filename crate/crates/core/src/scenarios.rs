//! Synthetic models, batches and toy datasets for the experiment
//! harness and the verification suites. Everything is generated from
//! named substreams of an explicit seed.

use crate::error::Result;
use crate::net::{
    Batch, ExampleInput, GraphData, Labels, Layer, LayerKind, LossKind, ModelSpec, RowStack,
    Setting,
};
use crate::rng::Substream;
use crate::tensor::Tensor;

pub fn random_matrix(rows: usize, cols: usize, s: &mut Substream) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| s.standard_normal())
}

/// Random SPD matrix `MᵀM/n + I`, comfortably conditioned.
pub fn random_spd(n: usize, s: &mut Substream) -> Tensor {
    let m = random_matrix(n, n, s);
    m.transpose()
        .matmul(&m)
        .unwrap()
        .scale(1.0 / n as f64)
        .add(&Tensor::identity(n))
        .unwrap()
}

fn glorot(rows: usize, cols: usize, s: &mut Substream) -> Tensor {
    let scale = 1.0 / (cols as f64).sqrt();
    random_matrix(rows, cols, s).scale(scale)
}

/// Deep linear chain over widths `dims[0] → … → dims[last]`. In the
/// reduce setting a scaled-sum aggregation (scale `agg_scale`) follows
/// the chain; `weighted_agg` swaps it for an unequal-weight sum.
pub struct DeepLinearScenario {
    pub dims: Vec<usize>,
    pub r: usize,
    pub n: usize,
    pub setting: Setting,
    pub agg_scale: f64,
    pub weighted_agg: Option<Vec<f64>>,
}

impl DeepLinearScenario {
    pub fn build(&self, sigma: Tensor, seed: u64) -> Result<(ModelSpec, Batch)> {
        let mut ws = Substream::new(seed, "scenario/deep-linear/weights");
        let mut xs = Substream::new(seed, "scenario/deep-linear/inputs");
        let mut ys = Substream::new(seed, "scenario/deep-linear/labels");
        let mut layers: Vec<Layer> = self
            .dims
            .windows(2)
            .map(|w| {
                Layer::new(LayerKind::DenseWs {
                    weight: random_matrix(w[1], w[0], &mut ws),
                })
            })
            .collect();
        if self.setting == Setting::Reduce {
            match &self.weighted_agg {
                Some(weights) => layers.push(Layer::new(LayerKind::WeightedSumAggregate {
                    weights: weights.clone(),
                })),
                None => layers.push(Layer::new(LayerKind::ScaledSumAggregate {
                    scale: self.agg_scale,
                })),
            }
        }
        let c = *self.dims.last().unwrap();
        let d = self.dims[0];
        let model = ModelSpec::new(layers, LossKind::Gaussian { sigma }, self.setting)?;
        let inputs: Vec<ExampleInput> = (0..self.n)
            .map(|_| ExampleInput::Matrix(random_matrix(self.r, d, &mut xs)))
            .collect();
        let label_rows = match self.setting {
            Setting::Expand => self.r,
            Setting::Reduce => 1,
        };
        let labels = Labels::Gaussian(
            (0..self.n)
                .map(|_| random_matrix(label_rows, c, &mut ys))
                .collect(),
        );
        Ok((model, Batch { inputs, labels }))
    }
}

/// One simplified self-attention block (`d → p_qk` query/key width,
/// `c` output width) with Gaussian labels.
#[allow(clippy::too_many_arguments)]
pub fn attention_scenario(
    d: usize,
    p_qk: usize,
    c: usize,
    r: usize,
    n: usize,
    sigma: Tensor,
    setting: Setting,
    seed: u64,
) -> Result<(ModelSpec, Batch)> {
    let mut ws = Substream::new(seed, "scenario/attention/weights");
    let mut xs = Substream::new(seed, "scenario/attention/inputs");
    let mut ys = Substream::new(seed, "scenario/attention/labels");
    let mut layers = vec![Layer::new(LayerKind::SimplifiedSelfAttention {
        wq: random_matrix(p_qk, d, &mut ws),
        wk: random_matrix(p_qk, d, &mut ws),
        wv: random_matrix(c, d, &mut ws),
    })];
    if setting == Setting::Reduce {
        layers.push(Layer::new(LayerKind::ScaledSumAggregate {
            scale: 1.0 / r as f64,
        }));
    }
    let model = ModelSpec::new(layers, LossKind::Gaussian { sigma }, setting)?;
    let inputs: Vec<ExampleInput> = (0..n)
        .map(|_| ExampleInput::Matrix(random_matrix(r, d, &mut xs)))
        .collect();
    let label_rows = if setting == Setting::Expand { r } else { 1 };
    let labels = Labels::Gaussian(
        (0..n)
            .map(|_| random_matrix(label_rows, c, &mut ys))
            .collect(),
    );
    Ok((model, Batch { inputs, labels }))
}

/// Random graph with the given node and edge counts.
pub fn random_graph(
    n_nodes: usize,
    n_edges: usize,
    du: usize,
    dv: usize,
    de: usize,
    s: &mut Substream,
) -> GraphData {
    let mut edges = RowStack::zeros(n_edges, de);
    for e in 0..n_edges {
        for j in 0..de {
            edges.row_mut(e)[j] = s.standard_normal();
        }
    }
    GraphData {
        global: (0..du).map(|_| s.standard_normal()).collect(),
        nodes: RowStack::from_tensor(&random_matrix(n_nodes, dv, s)),
        edges,
        recv: (0..n_edges).map(|_| s.below(n_nodes)).collect(),
        send: (0..n_edges).map(|_| s.below(n_nodes)).collect(),
    }
}

/// One graph block classifying into `classes`, plus a ragged batch of
/// random graphs whose edge counts are taken from `edge_counts`.
pub fn graph_scenario(
    du: usize,
    dv: usize,
    de: usize,
    classes: usize,
    node_count: usize,
    edge_counts: &[usize],
    seed: u64,
) -> Result<(ModelSpec, Batch)> {
    let mut ws = Substream::new(seed, "scenario/graph/weights");
    let mut gs = Substream::new(seed, "scenario/graph/graphs");
    let mut ys = Substream::new(seed, "scenario/graph/labels");
    let model = ModelSpec::new(
        vec![Layer::new(LayerKind::GraphBlock {
            w_edge: glorot(de, de + 2 * dv + du, &mut ws),
            w_node: glorot(dv, dv + de + du, &mut ws),
            w_global: glorot(classes, du + dv + de, &mut ws),
        })],
        LossKind::Categorical { classes },
        Setting::Reduce,
    )?;
    let inputs: Vec<ExampleInput> = edge_counts
        .iter()
        .map(|&ne| ExampleInput::Graph(random_graph(node_count, ne, du, dv, de, &mut gs)))
        .collect();
    let labels = Labels::Categorical(
        edge_counts
            .iter()
            .map(|_| vec![ys.below(classes)])
            .collect(),
    );
    Ok((model, Batch { inputs, labels }))
}

/// Raw per-example capture pairs for the factor-accumulation timing
/// harness: `n` examples of `r` rows each.
pub fn synthetic_grad_captures(
    n: usize,
    r: usize,
    p_in: usize,
    p_out: usize,
    seed: u64,
) -> (Vec<RowStack>, Vec<RowStack>) {
    let mut s = Substream::new(seed, "scenario/timing");
    let mut inputs = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    for _ in 0..n {
        let mut a = RowStack::zeros(r, p_in);
        for m in 0..r {
            for j in 0..p_in {
                a.row_mut(m)[j] = s.standard_normal();
            }
        }
        let mut g = RowStack::zeros(r, p_out);
        for m in 0..r {
            for j in 0..p_out {
                g.row_mut(m)[j] = s.standard_normal();
            }
        }
        inputs.push(a);
        grads.push(g);
    }
    (inputs, grads)
}

// ---------------------------------------------------------------------------
// toy training tasks
// ---------------------------------------------------------------------------

/// Deep-linear regression: anisotropic inputs, noiseless targets from a
/// ground-truth matrix, two-layer linear model. The input anisotropy
/// makes plain gradient descent crawl.
pub fn deep_linear_regression(n: usize, d: usize, seed: u64) -> Result<(ModelSpec, Batch)> {
    let mut ws = Substream::new(seed, "task/linreg/weights");
    let mut xs = Substream::new(seed, "task/linreg/inputs");
    let c = 2usize;
    let hidden = d;
    let truth = random_matrix(c, d, &mut xs);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = random_matrix(1, d, &mut xs);
        for j in 0..d {
            // geometric anisotropy over input coordinates
            let scale = 3.0 * (3.0f64).powf(-(j as f64) / (d.max(2) - 1) as f64);
            x.set(0, j, x.at(0, j) * scale);
        }
        let y = x.matmul(&truth.transpose())?;
        inputs.push(ExampleInput::Matrix(x));
        labels.push(y);
    }
    let model = ModelSpec::new(
        vec![
            Layer::new(LayerKind::DenseWs {
                weight: glorot(hidden, d, &mut ws),
            }),
            Layer::new(LayerKind::DenseWs {
                weight: glorot(c, hidden, &mut ws),
            }),
        ],
        LossKind::Gaussian {
            sigma: Tensor::identity(c),
        },
        Setting::Expand,
    )?;
    Ok((
        model,
        Batch {
            inputs,
            labels: Labels::Gaussian(labels),
        },
    ))
}

/// Two-moons classification with a tiny attention head: each example is
/// a two-token sequence derived from one planar point on an interleaved
/// half-circle, embedded with a badly conditioned projection. The point
/// cloud is a deterministic grid so the task difficulty is seed-stable;
/// the seed moves only the weight init and a small token jitter.
pub fn attention_moons(n: usize, seed: u64) -> Result<(ModelSpec, Batch)> {
    let mut ws = Substream::new(seed, "task/moons/weights");
    let mut xs = Substream::new(seed, "task/moons/jitter");
    let d = 4usize;
    let p = 4usize;
    let r = 2usize;
    let classes = 2usize;
    // fixed ill-conditioned embedding of the plane into d dims
    let embed = Tensor::matrix(d, 2, vec![6.0, 0.3, -0.2, 5.0, 0.08, 0.05, 0.04, -0.07])?;
    let per_class = n.div_ceil(2);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let idx = i / 2;
        let t = std::f64::consts::PI * (idx as f64 + 0.5) / per_class as f64;
        let (px, py) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.35 - t.sin())
        };
        let point = Tensor::matrix(2, 1, vec![px, py])?;
        let base = embed.matmul(&point)?;
        let mut x = Tensor::zeros(&[r, d]);
        for row in 0..r {
            let gain = if row == 0 { 1.0 } else { 0.5 };
            for j in 0..d {
                x.set(row, j, gain * base.at(j, 0) + 0.02 * xs.standard_normal());
            }
        }
        inputs.push(ExampleInput::Matrix(x));
        labels.push(vec![class]);
    }
    let model = ModelSpec::new(
        vec![
            Layer::new(LayerKind::SimplifiedSelfAttention {
                wq: glorot(p, d, &mut ws),
                wk: glorot(p, d, &mut ws),
                wv: glorot(p, d, &mut ws),
            }),
            Layer::new(LayerKind::ScaledSumAggregate {
                scale: 1.0 / r as f64,
            }),
            Layer::with_bias(LayerKind::DenseWs {
                weight: Tensor::zeros(&[classes, p + 1]),
            }),
        ],
        LossKind::Categorical { classes },
        Setting::Reduce,
    )?;
    Ok((
        model,
        Batch {
            inputs,
            labels: Labels::Categorical(labels),
        },
    ))
}

/// Two-node-motif graph classification: class 0 graphs carry a single
/// edge, class 1 graphs a reciprocal pair, with class-shifted node
/// features.
pub fn graph_motifs(n: usize, seed: u64) -> Result<(ModelSpec, Batch)> {
    let mut ws = Substream::new(seed, "task/motifs/weights");
    let mut gs = Substream::new(seed, "task/motifs/graphs");
    let (du, dv, de, classes) = (2usize, 2usize, 1usize, 2usize);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let n_edges = if class == 0 { 1 } else { 2 };
        let mut g = random_graph(2, n_edges, du, dv, de, &mut gs);
        g.recv = if class == 0 { vec![1] } else { vec![1, 0] };
        g.send = if class == 0 { vec![0] } else { vec![0, 1] };
        let shift = if class == 0 { 1.0 } else { -1.0 };
        for v in 0..2 {
            for val in g.nodes.row_mut(v) {
                *val = 0.3 * *val + shift;
            }
        }
        inputs.push(ExampleInput::Graph(g));
        labels.push(vec![class]);
    }
    let model = ModelSpec::new(
        vec![Layer::new(LayerKind::GraphBlock {
            w_edge: glorot(de, de + 2 * dv + du, &mut ws),
            w_node: glorot(dv, dv + de + du, &mut ws),
            w_global: glorot(classes, du + dv + de, &mut ws),
        })],
        LossKind::Categorical { classes },
        Setting::Reduce,
    )?;
    Ok((
        model,
        Batch {
            inputs,
            labels: Labels::Categorical(labels),
        },
    ))
}

/// Linear-Gaussian regression task for evidence maximisation: a single
/// dense layer, known noise variance.
pub fn linear_gaussian_task(
    n: usize,
    d: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(ModelSpec, Batch, Tensor)> {
    linear_gaussian_split(n, d, noise_std, seed, "train")
}

/// Same generating process with a named split: the ground-truth weights
/// depend only on the seed, the inputs and noise also on the split tag.
pub fn linear_gaussian_split(
    n: usize,
    d: usize,
    noise_std: f64,
    seed: u64,
    split: &str,
) -> Result<(ModelSpec, Batch, Tensor)> {
    let mut xs = Substream::new(seed, &format!("task/ridge/{split}/inputs"));
    let mut ns = Substream::new(seed, &format!("task/ridge/{split}/noise"));
    let mut ws = Substream::new(seed, "task/ridge/weights");
    let truth = random_matrix(1, d, &mut ws);
    let mut design = Tensor::zeros(&[n, d]);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let x = random_matrix(1, d, &mut xs);
        for j in 0..d {
            design.set(i, j, x.at(0, j));
        }
        let clean = x.matmul(&truth.transpose())?;
        let y = Tensor::matrix(
            1,
            1,
            vec![clean.at(0, 0) + noise_std * ns.standard_normal()],
        )?;
        inputs.push(ExampleInput::Matrix(x));
        labels.push(y);
    }
    let sigma = Tensor::matrix(1, 1, vec![noise_std * noise_std])?;
    let model = ModelSpec::new(
        vec![Layer::new(LayerKind::DenseWs {
            weight: Tensor::zeros(&[1, d]),
        })],
        LossKind::Gaussian { sigma },
        Setting::Expand,
    )?;
    Ok((
        model,
        Batch {
            inputs,
            labels: Labels::Gaussian(labels),
        },
        design,
    ))
}
