//! Graph block: linear edge/node/global updates with scatter-sum
//! aggregation.
//!
//! One block executes six steps per graph: edge update from concatenated
//! (edge, receiver, sender, global) features, scatter-sum of updated
//! edges onto receiving nodes, node update, sum of updated edges and
//! nodes into the global slot, global update. The edge and node updates
//! share their weights over all edges/nodes of the graph, so their
//! weight-sharing dimension R_n varies per example.

use super::{Capture, RowStack};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One graph example: global features, node features, edge features and
/// the receiver/sender node index per edge. Edge count may be zero.
#[derive(Debug, Clone)]
pub struct GraphData {
    pub global: Vec<f64>,
    /// `n_nodes × d_node`.
    pub nodes: RowStack,
    /// `n_edges × d_edge` (zero rows allowed).
    pub edges: RowStack,
    pub recv: Vec<usize>,
    pub send: Vec<usize>,
}

impl GraphData {
    pub fn n_nodes(&self) -> usize {
        self.nodes.rows()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.recv.len() != self.n_edges() || self.send.len() != self.n_edges() {
            return Err(Error::GraphStructure(format!(
                "{} edges but {} receiver / {} sender indices",
                self.n_edges(),
                self.recv.len(),
                self.send.len()
            )));
        }
        for &v in self.recv.iter().chain(&self.send) {
            if v >= self.n_nodes() {
                return Err(Error::GraphStructure(format!(
                    "edge endpoint {v} out of range for {} nodes",
                    self.n_nodes()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub(super) struct GraphRecord {
    input: GraphData,
    a_edge: RowStack,
    s_edge: RowStack,
    a_node: RowStack,
    s_node: RowStack,
    a_global: RowStack,
    s_global: RowStack,
}

impl GraphRecord {
    pub fn n_nodes(&self) -> usize {
        self.input.n_nodes()
    }

    pub fn n_edges(&self) -> usize {
        self.input.n_edges()
    }

    pub fn dv_out(&self) -> usize {
        self.s_node.cols()
    }

    pub fn de_out(&self) -> usize {
        self.s_edge.cols()
    }

    pub fn edge_capture(&self) -> Capture {
        Capture {
            a: self.a_edge.clone(),
            s: self.s_edge.clone(),
        }
    }

    pub fn node_capture(&self) -> Capture {
        Capture {
            a: self.a_node.clone(),
            s: self.s_node.clone(),
        }
    }

    pub fn global_capture(&self) -> Capture {
        Capture {
            a: self.a_global.clone(),
            s: self.s_global.clone(),
        }
    }
}

/// Cotangent of a graph value.
#[derive(Debug, Clone)]
pub struct GraphCot {
    pub global: Vec<f64>,
    pub nodes: RowStack,
    pub edges: RowStack,
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    debug_assert_eq!(cols, x.len());
    let mut out = vec![0.0; rows];
    for (r, o) in out.iter_mut().enumerate() {
        let row = w.row(r);
        let mut sum = 0.0;
        for (a, b) in row.iter().zip(x) {
            sum += a * b;
        }
        *o = sum;
    }
    out
}

/// `stack · wᵀ` on a possibly empty row stack.
fn stack_matmul_t(stack: &RowStack, w: &Tensor) -> RowStack {
    let mut out = RowStack::zeros(stack.rows(), w.rows());
    for r in 0..stack.rows() {
        let res = matvec(w, stack.row(r));
        out.row_mut(r).copy_from_slice(&res);
    }
    out
}

/// `stack · w` (adjoint direction) on a possibly empty row stack.
fn stack_matmul(stack: &RowStack, w: &Tensor) -> RowStack {
    let mut out = RowStack::zeros(stack.rows(), w.cols());
    for r in 0..stack.rows() {
        let g = stack.row(r);
        let o = out.row_mut(r);
        for (p, &gp) in g.iter().enumerate() {
            if gp == 0.0 {
                continue;
            }
            for (j, wv) in w.row(p).iter().enumerate() {
                o[j] += gp * wv;
            }
        }
    }
    out
}

pub(super) fn graph_forward(
    g: &GraphData,
    w_edge: &Tensor,
    w_node: &Tensor,
    w_global: &Tensor,
) -> Result<(GraphData, super::layers::LayerRecord)> {
    g.validate()?;
    let (du, dv, de) = (g.global.len(), g.nodes.cols(), g.edges.cols());
    if w_edge.cols() != de + 2 * dv + du {
        return Err(Error::Dimension(format!(
            "edge update expects width {}, weight has {}",
            de + 2 * dv + du,
            w_edge.cols()
        )));
    }
    let de_out = w_edge.rows();
    if w_node.cols() != dv + de_out + du {
        return Err(Error::Dimension("node update width mismatch".into()));
    }
    let dv_out = w_node.rows();
    if w_global.cols() != du + dv_out + de_out {
        return Err(Error::Dimension("global update width mismatch".into()));
    }

    // 1. edge update on concat(edge, recv node, send node, global)
    let n_e = g.n_edges();
    let mut a_edge = RowStack::zeros(n_e, de + 2 * dv + du);
    for e in 0..n_e {
        let row = a_edge.row_mut(e);
        row[..de].copy_from_slice(g.edges.row(e));
        row[de..de + dv].copy_from_slice(g.nodes.row(g.recv[e]));
        row[de + dv..de + 2 * dv].copy_from_slice(g.nodes.row(g.send[e]));
        row[de + 2 * dv..].copy_from_slice(&g.global);
    }
    let s_edge = stack_matmul_t(&a_edge, w_edge);

    // 2. scatter-sum updated edges onto receiving nodes
    let n_v = g.n_nodes();
    let mut edge_agg = RowStack::zeros(n_v, de_out);
    for e in 0..n_e {
        let src = s_edge.row(e).to_vec();
        let dst = edge_agg.row_mut(g.recv[e]);
        for (d, s) in dst.iter_mut().zip(&src) {
            *d += s;
        }
    }

    // 3. node update on concat(node, edge aggregate, global)
    let mut a_node = RowStack::zeros(n_v, dv + de_out + du);
    for v in 0..n_v {
        let row = a_node.row_mut(v);
        row[..dv].copy_from_slice(g.nodes.row(v));
        row[dv..dv + de_out].copy_from_slice(edge_agg.row(v));
        row[dv + de_out..].copy_from_slice(&g.global);
    }
    let s_node = stack_matmul_t(&a_node, w_node);

    // 4./5. sum updated edges and nodes into the global slot
    let edge_total = s_edge.row_sum();
    let node_total = s_node.row_sum();

    // 6. global update on concat(global, node sum, edge sum)
    let mut a_global = RowStack::zeros(1, du + dv_out + de_out);
    {
        let row = a_global.row_mut(0);
        row[..du].copy_from_slice(&g.global);
        row[du..du + dv_out].copy_from_slice(&node_total);
        row[du + dv_out..].copy_from_slice(&edge_total);
    }
    let s_global = stack_matmul_t(&a_global, w_global);

    let out = GraphData {
        global: s_global.row(0).to_vec(),
        nodes: s_node.clone(),
        edges: s_edge.clone(),
        recv: g.recv.clone(),
        send: g.send.clone(),
    };
    let record = super::layers::LayerRecord::Graph(GraphRecord {
        input: g.clone(),
        a_edge,
        s_edge,
        a_node,
        s_node,
        a_global,
        s_global,
    });
    Ok((out, record))
}

/// Reverse sweep through one block. Returns the input cotangent and the
/// pre-activation gradients for the edge, node and global updates.
pub(super) fn graph_backward(
    rec: &GraphRecord,
    w_edge: &Tensor,
    w_node: &Tensor,
    w_global: &Tensor,
    cot: &GraphCot,
) -> Result<(GraphCot, RowStack, RowStack, RowStack)> {
    let g = &rec.input;
    let (du, dv, de) = (g.global.len(), g.nodes.cols(), g.edges.cols());
    let de_out = rec.de_out();
    let dv_out = rec.dv_out();
    let n_v = g.n_nodes();
    let n_e = g.n_edges();

    let mut d_global_in = vec![0.0; du];
    let mut d_nodes_in = RowStack::zeros(n_v, dv);
    let mut d_edges_in = RowStack::zeros(n_e, de);

    // step 6 reverse: global update
    let ds_global = RowStack::from_rows(1, cot.global.len(), cot.global.clone());
    let da_global = stack_matmul(&ds_global, w_global);
    let dag = da_global.row(0);
    for (acc, v) in d_global_in.iter_mut().zip(&dag[..du]) {
        *acc += v;
    }
    let d_node_total = &dag[du..du + dv_out];
    let d_edge_total = &dag[du + dv_out..];

    // steps 5 and the incoming node cotangent feed the node update
    let mut ds_node = RowStack::zeros(n_v, dv_out);
    for v in 0..n_v {
        let row = ds_node.row_mut(v);
        for (acc, (a, b)) in row
            .iter_mut()
            .zip(cot.nodes.row(v).iter().zip(d_node_total))
        {
            *acc = a + b;
        }
    }

    // step 3 reverse: node update
    let da_node = stack_matmul(&ds_node, w_node);
    let mut d_edge_agg = RowStack::zeros(n_v, de_out);
    for v in 0..n_v {
        let row = da_node.row(v);
        for (acc, x) in d_nodes_in.row_mut(v).iter_mut().zip(&row[..dv]) {
            *acc += x;
        }
        d_edge_agg.row_mut(v).copy_from_slice(&row[dv..dv + de_out]);
        for (acc, x) in d_global_in.iter_mut().zip(&row[dv + de_out..]) {
            *acc += x;
        }
    }

    // steps 4 and 2 reverse plus the incoming edge cotangent
    let mut ds_edge = RowStack::zeros(n_e, de_out);
    for e in 0..n_e {
        let agg = d_edge_agg.row(g.recv[e]).to_vec();
        let incoming = cot.edges.row(e).to_vec();
        let row = ds_edge.row_mut(e);
        for j in 0..de_out {
            row[j] = incoming[j] + d_edge_total[j] + agg[j];
        }
    }

    // step 1 reverse: edge update
    let da_edge = stack_matmul(&ds_edge, w_edge);
    for e in 0..n_e {
        let row = da_edge.row(e);
        for (acc, x) in d_edges_in.row_mut(e).iter_mut().zip(&row[..de]) {
            *acc += x;
        }
        for (acc, x) in d_nodes_in
            .row_mut(g.recv[e])
            .iter_mut()
            .zip(&row[de..de + dv])
        {
            *acc += x;
        }
        for (acc, x) in d_nodes_in
            .row_mut(g.send[e])
            .iter_mut()
            .zip(&row[de + dv..de + 2 * dv])
        {
            *acc += x;
        }
        for (acc, x) in d_global_in.iter_mut().zip(&row[de + 2 * dv..]) {
            *acc += x;
        }
    }

    Ok((
        GraphCot {
            global: d_global_in,
            nodes: d_nodes_in,
            edges: d_edges_in,
        },
        ds_edge,
        ds_node,
        ds_global,
    ))
}

/// Standalone block application: run the six update steps on one graph.
pub fn graph_block_forward(
    w_edge: &Tensor,
    w_node: &Tensor,
    w_global: &Tensor,
    g: &GraphData,
) -> Result<GraphData> {
    let (out, _) = graph_forward(g, w_edge, w_node, w_global)?;
    Ok(out)
}
