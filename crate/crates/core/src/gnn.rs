//! Message-passing layers, pooling, and model assembly.
//!
//! Messages flow src -> dst; undirected datasets store both directions.
//! Self-loops are added internally by the GCN normalization.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Batch;
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Arch {
    Gcn,
    Gin,
    GraphSage,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Node,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub num_layers: usize,
    pub hidden: usize,
    pub classes: usize,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<Pool>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 || self.hidden < 1 {
            return Err(Error::InvalidArgument("num_layers and hidden must be >= 1".into()));
        }
        match (self.task, self.pool) {
            (Task::Graph, None) => Err(Error::InvalidArgument("graph task requires a pool".into())),
            (Task::Node, Some(_)) => Err(Error::InvalidArgument("node task must not set pool".into())),
            _ => Ok(()),
        }
    }
}

/// A named parameter set matching a [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub d_in: usize,
    pub params: Vec<(String, Mat)>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

impl Model {
    pub fn init(spec: ModelSpec, d_in: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let mut width = d_in;
        for l in 0..spec.num_layers {
            let out = spec.hidden;
            match spec.arch {
                Arch::Gcn | Arch::Mlp => {
                    params.push((format!("layer{l}.W"), glorot(rng, width, out)));
                    params.push((format!("layer{l}.b"), Mat::zeros((1, out))));
                }
                Arch::GraphSage => {
                    params.push((format!("layer{l}.W"), glorot(rng, 2 * width, out)));
                    params.push((format!("layer{l}.b"), Mat::zeros((1, out))));
                }
                Arch::Gin => {
                    params.push((format!("layer{l}.mlp.W1"), glorot(rng, width, spec.hidden)));
                    params.push((format!("layer{l}.mlp.b1"), Mat::zeros((1, spec.hidden))));
                    params.push((format!("layer{l}.mlp.W2"), glorot(rng, spec.hidden, out)));
                    params.push((format!("layer{l}.mlp.b2"), Mat::zeros((1, out))));
                    params.push((format!("layer{l}.eps"), Mat::zeros((1, 1))));
                }
            }
            width = out;
        }
        params.push(("classifier.W".into(), glorot(rng, width, spec.classes)));
        params.push(("classifier.b".into(), Mat::zeros((1, spec.classes))));
        Ok(Model { spec, d_in, params })
    }

    /// Exact total scalar parameter count.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|(_, m)| m.len()).sum()
    }
}

/// Connectivity view of a batch with precomputed propagation coefficients.
#[derive(Debug, Clone)]
pub struct GraphStructure {
    pub num_nodes: usize,
    pub srcs: Vec<usize>,
    pub dsts: Vec<usize>,
    /// 1/sqrt(deg~(src) * deg~(dst)) per edge, deg~ = 1 + in-degree.
    pub gcn_edge_coeff: Vec<f64>,
    /// 1/deg~(i) per node (the self-loop entry of the normalized adjacency).
    pub gcn_self_coeff: Vec<f64>,
    /// 1/in-degree per node, 0 for isolated nodes (GraphSage neighbor mean).
    pub inv_in_deg: Vec<f64>,
    pub node_to_graph: Vec<usize>,
    pub num_graphs: usize,
}

impl GraphStructure {
    pub fn from_batch(batch: &Batch) -> Self {
        Self::from_edges(batch.num_nodes(), &batch.edges, &batch.node_to_graph, batch.num_graphs())
    }

    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        node_to_graph: &[usize],
        num_graphs: usize,
    ) -> Self {
        let mut in_deg = vec![0.0f64; num_nodes];
        for &(_, d) in edges {
            in_deg[d] += 1.0;
        }
        let deg_tilde: Vec<f64> = in_deg.iter().map(|&d| d + 1.0).collect();
        let srcs: Vec<usize> = edges.iter().map(|&(s, _)| s).collect();
        let dsts: Vec<usize> = edges.iter().map(|&(_, d)| d).collect();
        let gcn_edge_coeff = edges
            .iter()
            .map(|&(s, d)| 1.0 / (deg_tilde[s] * deg_tilde[d]).sqrt())
            .collect();
        let gcn_self_coeff = deg_tilde.iter().map(|&d| 1.0 / d).collect();
        let inv_in_deg = in_deg
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 })
            .collect();
        GraphStructure {
            num_nodes,
            srcs,
            dsts,
            gcn_edge_coeff,
            gcn_self_coeff,
            inv_in_deg,
            node_to_graph: node_to_graph.to_vec(),
            num_graphs,
        }
    }
}

/// GCN propagation: Ahat * X with Ahat = D~^{-1/2}(A+I)D~^{-1/2}.
pub fn gcn_propagate(tape: &Tape, x: Var, gs: &GraphStructure) -> Var {
    let self_term = tape.scale_rows_const(x, &gs.gcn_self_coeff);
    if gs.srcs.is_empty() {
        return self_term;
    }
    let msgs = tape.gather_rows(x, &gs.srcs);
    let scaled = tape.scale_rows_const(msgs, &gs.gcn_edge_coeff);
    let agg = tape.scatter_sum(scaled, &gs.dsts, gs.num_nodes);
    tape.add(self_term, agg)
}

/// Single GCN layer: Ahat * X * W (+ optional bias).
pub fn gcn_layer(tape: &Tape, x: Var, gs: &GraphStructure, w: Var, b: Option<Var>) -> Var {
    let xw = tape.matmul(x, w);
    let out = gcn_propagate(tape, xw, gs);
    match b {
        Some(b) => tape.add_row_bias(out, b),
        None => out,
    }
}

/// GIN aggregation + 2-layer MLP: mlp((1+eps) x_i + sum_{j->i} x_j).
#[allow(clippy::too_many_arguments)]
pub fn gin_layer(
    tape: &Tape,
    x: Var,
    gs: &GraphStructure,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    eps: Var,
) -> Var {
    let one_plus_eps = tape.add(eps, tape.scalar_const(1.0));
    let self_term = tape.scale_by_scalar(x, one_plus_eps);
    let agg = if gs.srcs.is_empty() {
        self_term
    } else {
        let msgs = tape.gather_rows(x, &gs.srcs);
        let nbr = tape.scatter_sum(msgs, &gs.dsts, gs.num_nodes);
        tape.add(self_term, nbr)
    };
    let h = tape.relu(tape.add_row_bias(tape.matmul(agg, w1), b1));
    tape.add_row_bias(tape.matmul(h, w2), b2)
}

/// GraphSage layer: concat(x_i, mean of in-neighbors) * W; isolated nodes use
/// a zero neighbor mean.
pub fn sage_layer(tape: &Tape, x: Var, gs: &GraphStructure, w: Var, b: Option<Var>) -> Var {
    let nbr_mean = if gs.srcs.is_empty() {
        tape.constant(Mat::zeros((gs.num_nodes, x.cols)))
    } else {
        let msgs = tape.gather_rows(x, &gs.srcs);
        let sums = tape.scatter_sum(msgs, &gs.dsts, gs.num_nodes);
        tape.scale_rows_const(sums, &gs.inv_in_deg)
    };
    let cat = tape.concat_cols(x, nbr_mean);
    let out = tape.matmul(cat, w);
    match b {
        Some(b) => tape.add_row_bias(out, b),
        None => out,
    }
}

/// A model's parameters bound onto a tape.
pub struct TapeModel<'a> {
    pub spec: ModelSpec,
    pub d_in: usize,
    pub vars: Vec<(String, Var)>,
    tape: &'a Tape,
}

impl Model {
    /// Insert all parameters as tape leaves. `requires_grad = false` yields a
    /// frozen (teacher) binding: no operations downstream are recorded.
    pub fn bind<'a>(&self, tape: &'a Tape, requires_grad: bool) -> TapeModel<'a> {
        let vars = self
            .params
            .iter()
            .map(|(name, m)| (name.clone(), tape.leaf(m.clone(), requires_grad)))
            .collect();
        TapeModel {
            spec: self.spec.clone(),
            d_in: self.d_in,
            vars,
            tape,
        }
    }
}

impl<'a> TapeModel<'a> {
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .1
    }

    /// Forward pass. Returns (F, Z): penultimate node embeddings after the
    /// last message-passing layer and nonlinearity, and classifier logits
    /// (per node for node tasks, per graph for graph tasks).
    pub fn forward(
        &self,
        x: Var,
        gs: &GraphStructure,
        train_mode: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (Var, Var) {
        assert_eq!(x.cols, self.d_in, "forward: input width {} != model width {}", x.cols, self.d_in);
        let tape = self.tape;
        let mut h = x;
        let last = self.spec.num_layers - 1;
        for l in 0..self.spec.num_layers {
            h = match self.spec.arch {
                Arch::Gcn => gcn_layer(
                    tape,
                    h,
                    gs,
                    self.var(&format!("layer{l}.W")),
                    Some(self.var(&format!("layer{l}.b"))),
                ),
                Arch::Mlp => {
                    let w = self.var(&format!("layer{l}.W"));
                    let b = self.var(&format!("layer{l}.b"));
                    tape.add_row_bias(tape.matmul(h, w), b)
                }
                Arch::GraphSage => sage_layer(
                    tape,
                    h,
                    gs,
                    self.var(&format!("layer{l}.W")),
                    Some(self.var(&format!("layer{l}.b"))),
                ),
                Arch::Gin => gin_layer(
                    tape,
                    h,
                    gs,
                    self.var(&format!("layer{l}.mlp.W1")),
                    self.var(&format!("layer{l}.mlp.b1")),
                    self.var(&format!("layer{l}.mlp.W2")),
                    self.var(&format!("layer{l}.mlp.b2")),
                    self.var(&format!("layer{l}.eps")),
                ),
            };
            h = tape.relu(h);
            // dropout between hidden layers; the penultimate embedding F is
            // exported undropped
            if l != last && train_mode && self.spec.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    h = dropout(tape, h, self.spec.dropout, rng);
                }
            }
        }
        let f = h;
        let feats = match self.spec.task {
            Task::Node => f,
            Task::Graph => match self.spec.pool.expect("graph task requires pool") {
                Pool::Mean => tape.segment_mean(f, &gs.node_to_graph, gs.num_graphs),
                Pool::Sum => {
                    // sum pool as scatter of each node row into its graph slot
                    let idx: Vec<usize> = gs.node_to_graph.clone();
                    tape.scatter_sum(f, &idx, gs.num_graphs)
                }
            },
        };
        let z = tape.add_row_bias(
            tape.matmul(feats, self.var("classifier.W")),
            self.var("classifier.b"),
        );
        (f, z)
    }
}

fn dropout(tape: &Tape, h: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
    let keep = 1.0 - rate;
    let mask = Mat::from_shape_fn((h.rows, h.cols), |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.elementwise_mul(h, tape.constant(mask))
}

// ---- checkpoints ----

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    spec: ModelSpec,
    d_in: usize,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub fn save_checkpoint(model: &Model, path: &std::path::Path) -> Result<()> {
    let file = CheckpointFile {
        version: 1,
        spec: model.spec.clone(),
        d_in: model.d_in,
        params: model
            .params
            .iter()
            .map(|(name, m)| ParamEntry {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
                data: m.iter().copied().collect(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", file.version)));
    }
    file.spec.validate()?;
    let mut params = Vec::with_capacity(file.params.len());
    for p in file.params {
        if p.data.len() != p.rows * p.cols {
            return Err(Error::Checkpoint(format!(
                "parameter {}: {} values for declared shape {}x{}",
                p.name,
                p.data.len(),
                p.rows,
                p.cols
            )));
        }
        let m = Array2::from_shape_vec((p.rows, p.cols), p.data)
            .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", p.name)))?;
        params.push((p.name, m));
    }
    let model = Model {
        spec: file.spec,
        d_in: file.d_in,
        params,
    };
    // reject spec/shape mismatches by re-deriving the expected layout
    let mut rng = crate::rng::stream_rng(0, crate::rng::Stream::Init);
    let reference = Model::init(model.spec.clone(), model.d_in, &mut rng)?;
    if reference.params.len() != model.params.len() {
        return Err(Error::Checkpoint("parameter list does not match spec".into()));
    }
    for ((n1, m1), (n2, m2)) in reference.params.iter().zip(&model.params) {
        if n1 != n2 || m1.raw_dim() != m2.raw_dim() {
            return Err(Error::Checkpoint(format!(
                "parameter {n2} has shape {:?}, spec requires {n1} {:?}",
                m2.raw_dim(),
                m1.raw_dim()
            )));
        }
    }
    Ok(model)
}
