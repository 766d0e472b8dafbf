//! Distillation objectives: logit matching, feature mimicking (FitNet, AT),
//! local/global structure preserving losses, and contrastive representation
//! distillation with projection heads.
//!
//! Teacher backbone values enter every loss as constants; only projection
//! head parameters on the teacher side participate in optimization.

use std::cell::RefCell;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{gcn_layer, GraphStructure};
use crate::kernels::{edgewise_var, pairwise_var, Kernel};
use crate::tape::{row_log_softmax_mat, row_softmax_mat, Mat, Tape, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aux {
    Fitnet,
    At,
    Lsp,
    Gsp,
    Crd,
    Gcrd,
}

/// A distillation method: optional logit KD term plus optional auxiliary
/// representation loss, e.g. `kd`, `gcrd`, or `kd+gcrd`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Method {
    pub kd: bool,
    pub aux: Option<Aux>,
}

impl Method {
    pub const SUPERVISED: Method = Method { kd: false, aux: None };
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut kd = false;
        let mut aux = None;
        for part in s.split('+') {
            match part.trim() {
                "supervised" => {}
                "kd" => kd = true,
                "fitnet" => aux = Some(Aux::Fitnet),
                "at" => aux = Some(Aux::At),
                "lsp" => aux = Some(Aux::Lsp),
                "gsp" => aux = Some(Aux::Gsp),
                "crd" => aux = Some(Aux::Crd),
                "gcrd" => aux = Some(Aux::Gcrd),
                other => {
                    return Err(Error::InvalidArgument(format!("unknown method component '{other}'")))
                }
            }
        }
        Ok(Method { kd, aux })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let aux = self.aux.map(|a| match a {
            Aux::Fitnet => "fitnet",
            Aux::At => "at",
            Aux::Lsp => "lsp",
            Aux::Gsp => "gsp",
            Aux::Crd => "crd",
            Aux::Gcrd => "gcrd",
        });
        match (self.kd, aux) {
            (false, None) => write!(f, "supervised"),
            (true, None) => write!(f, "kd"),
            (false, Some(a)) => write!(f, "{a}"),
            (true, Some(a)) => write!(f, "kd+{a}"),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Method::from_str(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GspMetric {
    Mse,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Identity,
    Mlp,
    Gcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastLevel {
    Node,
    NodeSamplewise,
    Global,
}

/// Full configuration of a distillation run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DistillSpec {
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub kernel: Kernel,
    pub gsp_metric: GspMetric,
    pub gsp_cap: usize,
    pub head: HeadKind,
    pub contrast_level: ContrastLevel,
    #[serde(default)]
    pub lsp_kl_reverse: bool,
}

impl Default for DistillSpec {
    fn default() -> Self {
        DistillSpec {
            method: Method::SUPERVISED,
            alpha: 0.9,
            beta: 0.1,
            tau1: 4.0,
            tau2: 0.075,
            kernel: Kernel::Rbf { sigma: 1.0 },
            gsp_metric: GspMetric::Mse,
            gsp_cap: 512,
            head: HeadKind::Mlp,
            contrast_level: ContrastLevel::Node,
            lsp_kl_reverse: false,
        }
    }
}

impl DistillSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidArgument("beta must be non-negative".into()));
        }
        if self.tau1 <= 0.0 || self.tau2 <= 0.0 {
            return Err(Error::InvalidArgument("temperatures must be positive".into()));
        }
        if self.gsp_cap < 2 {
            return Err(Error::InvalidArgument("gsp_cap must be >= 2".into()));
        }
        self.kernel.validate()
    }
}

// ---- projection heads ----

/// Learned map into the shared contrastive space. The mlp and gcn variants
/// have identical parameter counts for equal widths: one weight matrix plus
/// batch-norm affines.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub kind: HeadKind,
    pub d_in: usize,
    pub d_out: usize,
    pub params: Vec<(String, Mat)>,
    running: RefCell<(Vec<f64>, Vec<f64>)>,
}

impl ProjectionHead {
    pub fn init(kind: HeadKind, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let params = match kind {
            HeadKind::Identity => Vec::new(),
            HeadKind::Mlp | HeadKind::Gcn => {
                let limit = (6.0 / (d_in + d_out) as f64).sqrt();
                vec![
                    ("W".to_string(), Mat::from_shape_fn((d_in, d_out), |_| rng.gen_range(-limit..limit))),
                    ("gamma".to_string(), Mat::from_elem((1, d_out), 1.0)),
                    ("beta".to_string(), Mat::zeros((1, d_out))),
                ]
            }
        };
        ProjectionHead {
            kind,
            d_in,
            d_out,
            params,
            running: RefCell::new((vec![0.0; d_out], vec![1.0; d_out])),
        }
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn bind<'h>(&'h self, tape: &Tape, requires_grad: bool) -> BoundHead<'h> {
        let vars = self
            .params
            .iter()
            .map(|(n, m)| (n.clone(), tape.leaf(m.clone(), requires_grad)))
            .collect();
        BoundHead { head: self, vars }
    }

    /// Bind with externally supplied parameter vars, in the order of
    /// `self.params`. Used by the gradient-check harness.
    pub fn bind_vars<'h>(&'h self, vars: &[Var]) -> BoundHead<'h> {
        assert_eq!(vars.len(), self.params.len(), "bind_vars: wrong parameter count");
        let vars = self
            .params
            .iter()
            .zip(vars)
            .map(|((n, _), v)| (n.clone(), *v))
            .collect();
        BoundHead { head: self, vars }
    }
}

pub struct BoundHead<'h> {
    head: &'h ProjectionHead,
    pub vars: Vec<(String, Var)>,
}

impl BoundHead<'_> {
    fn var(&self, name: &str) -> Var {
        self.vars.iter().find(|(n, _)| n == name).expect("head param").1
    }

    /// Apply the head: linear or GCN transform, batch norm, relu. Identity
    /// heads return the input unchanged. Training mode uses batch statistics
    /// and folds them into the running averages; evaluation mode uses the
    /// running averages.
    pub fn project(&self, tape: &Tape, f: Var, gs: &GraphStructure, train: bool) -> Var {
        if self.head.kind == HeadKind::Identity {
            return f;
        }
        let lin = match self.head.kind {
            HeadKind::Mlp => tape.matmul(f, self.var("W")),
            HeadKind::Gcn => gcn_layer(tape, f, gs, self.var("W"), None),
            HeadKind::Identity => unreachable!(),
        };
        let bn = if train {
            let v = tape.value(lin);
            let n = v.nrows() as f64;
            let mean: Vec<f64> = v.mean_axis(ndarray::Axis(0)).unwrap().to_vec();
            let var: Vec<f64> = (0..v.ncols())
                .map(|j| v.column(j).iter().map(|&a| (a - mean[j]).powi(2)).sum::<f64>() / n)
                .collect();
            {
                let mut run = self.head.running.borrow_mut();
                for j in 0..mean.len() {
                    run.0[j] = (1.0 - BN_MOMENTUM) * run.0[j] + BN_MOMENTUM * mean[j];
                    run.1[j] = (1.0 - BN_MOMENTUM) * run.1[j] + BN_MOMENTUM * var[j];
                }
            }
            tape.batch_norm_rows(lin, self.var("gamma"), self.var("beta"), BN_EPS, None)
        } else {
            let run = self.head.running.borrow();
            tape.batch_norm_rows(lin, self.var("gamma"), self.var("beta"), BN_EPS, Some((&run.0, &run.1)))
        };
        tape.relu(bn)
    }
}

// ---- losses ----

/// Mean over prediction rows of KL(softmax(z_T/tau) || softmax(z_S/tau)).
/// Callers apply the tau^2 factor from the combined loss. Teacher logits are
/// constants.
pub fn kd_loss(tape: &Tape, z_s: Var, z_t: &Mat, tau1: f64) -> Result<Var> {
    if tau1 <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau1 must be positive, got {tau1}")));
    }
    if (z_s.rows, z_s.cols) != (z_t.nrows(), z_t.ncols()) {
        return Err(Error::Shape(format!(
            "kd_loss: student {}x{} vs teacher {}x{}",
            z_s.rows,
            z_s.cols,
            z_t.nrows(),
            z_t.ncols()
        )));
    }
    let n = z_s.rows as f64;
    let scaled_t = z_t / tau1;
    let p_t = row_softmax_mat(&scaled_t);
    let lp_t = row_log_softmax_mat(&scaled_t);
    let ls_s = tape.row_log_softmax(tape.mul_scalar(z_s, 1.0 / tau1));
    let diff = tape.sub(tape.constant(lp_t), ls_s);
    let prod = tape.elementwise_mul(tape.constant(p_t), diff);
    Ok(tape.mul_scalar(tape.reduce_sum(prod), 1.0 / n))
}

/// Mean over nodes of the squared distance between row-l2-normalized
/// projections of student and teacher features.
pub fn fitnet_loss(
    tape: &Tape,
    f_s: Var,
    f_t: Var,
    head_s: &BoundHead,
    head_t: &BoundHead,
    gs: &GraphStructure,
    train: bool,
) -> Var {
    let ps = tape.row_l2_normalize(head_s.project(tape, f_s, gs, train));
    let pt = tape.row_l2_normalize(head_t.project(tape, f_t, gs, train));
    let d = tape.sub(pt, ps);
    let per_node = tape.row_sum(tape.elementwise_mul(d, d));
    tape.reduce_mean(per_node)
}

/// Attention transfer adapted to node sets: per-node squared-norm attention
/// map, l2-normalized over the node axis, matched by squared distance.
pub fn at_loss(tape: &Tape, f_s: Var, f_t: Var) -> Var {
    let map = |f: Var| {
        let a = tape.row_sum(tape.elementwise_mul(f, f)); // n x 1
        tape.row_l2_normalize(tape.transpose(a)) // 1 x n unit vector
    };
    let d = tape.sub(map(f_s), map(f_t));
    tape.reduce_sum(tape.elementwise_mul(d, d))
}

/// Local structure preserving loss: per-node softmax over out-neighborhood
/// kernel values, matched by KL. The printed ordering is
/// KL(student || teacher); `reverse` flips it. Mean over nodes with at least
/// two out-neighbors; smaller neighborhoods contribute zero.
pub fn lsp_loss(
    tape: &Tape,
    f_s: Var,
    f_t: Var,
    edges: &[(usize, usize)],
    kernel: Kernel,
    reverse: bool,
) -> Var {
    if edges.is_empty() {
        eprintln!("warning: lsp_loss on empty edge set, returning 0");
        return tape.scalar_const(0.0);
    }
    let n = f_s.rows;
    let srcs: Vec<usize> = edges.iter().map(|&(s, _)| s).collect();
    let dsts: Vec<usize> = edges.iter().map(|&(_, d)| d).collect();
    let mut out_deg = vec![0usize; n];
    for &s in &srcs {
        out_deg[s] += 1;
    }
    let active = out_deg.iter().filter(|&&d| d >= 2).count();
    if active == 0 {
        return tape.scalar_const(0.0);
    }

    let k_s = edgewise_var(tape, f_s, &srcs, &dsts, kernel);
    let k_t = edgewise_var(tape, f_t, &srcs, &dsts, kernel);
    let ls_s = tape.segment_log_softmax(k_s, &srcs, n);
    let ls_t = tape.segment_log_softmax(k_t, &srcs, n);
    // KL(a || b) accumulated edgewise: sum p_a (log p_a - log p_b)
    let (ls_a, ls_b) = if reverse { (ls_t, ls_s) } else { (ls_s, ls_t) };
    let p_a = tape.exp(ls_a);
    let term = tape.elementwise_mul(p_a, tape.sub(ls_a, ls_b));
    tape.mul_scalar(tape.reduce_sum(term), 1.0 / active as f64)
}

/// Global structure preserving loss over full pairwise kernel matrices, with
/// uniform node sub-sampling above `cap`.
#[allow(clippy::too_many_arguments)]
pub fn gsp_loss(
    tape: &Tape,
    f_s: Var,
    f_t: Var,
    kernel: Kernel,
    metric: GspMetric,
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if cap < 2 {
        return Err(Error::InvalidArgument(format!("gsp cap must be >= 2, got {cap}")));
    }
    let n = f_s.rows;
    let (f_s, f_t) = if n > cap {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.truncate(cap);
        idx.sort_unstable();
        (tape.gather_rows(f_s, &idx), tape.gather_rows(f_t, &idx))
    } else {
        (f_s, f_t)
    };
    let k_s = pairwise_var(tape, f_s, kernel);
    let k_t = pairwise_var(tape, f_t, kernel);
    Ok(match metric {
        GspMetric::Mse => tape.mse(k_s, k_t),
        GspMetric::Kl => {
            // rowwise softmax then mean rowwise KL, same ordering as LSP
            let ls_s = tape.row_log_softmax(k_s);
            let ls_t = tape.row_log_softmax(k_t);
            let p_s = tape.exp(ls_s);
            let term = tape.elementwise_mul(p_s, tape.sub(ls_s, ls_t));
            tape.mul_scalar(tape.reduce_sum(term), 1.0 / f_s.rows as f64)
        }
    })
}

fn contrast_features(
    tape: &Tape,
    f_s: Var,
    f_t: Var,
    head_s: &BoundHead,
    head_t: &BoundHead,
    gs: &GraphStructure,
    level: ContrastLevel,
    train: bool,
) -> Result<(Var, Var, Option<Mat>)> {
    match level {
        ContrastLevel::Node | ContrastLevel::NodeSamplewise => {
            let ps = tape.row_l2_normalize(head_s.project(tape, f_s, gs, train));
            let pt = tape.row_l2_normalize(head_t.project(tape, f_t, gs, train));
            let mask = if level == ContrastLevel::NodeSamplewise {
                let n = gs.node_to_graph.len();
                let mut m = Mat::zeros((n, n));
                for i in 0..n {
                    for j in 0..n {
                        if gs.node_to_graph[i] != gs.node_to_graph[j] {
                            m[[i, j]] = -1e9;
                        }
                    }
                }
                Some(m)
            } else {
                None
            };
            Ok((ps, pt, mask))
        }
        ContrastLevel::Global => {
            if gs.num_graphs < 2 {
                return Err(Error::InvalidArgument(
                    "global contrast level requires at least 2 graphs in the batch".into(),
                ));
            }
            let pooled_s = tape.segment_mean(f_s, &gs.node_to_graph, gs.num_graphs);
            let pooled_t = tape.segment_mean(f_t, &gs.node_to_graph, gs.num_graphs);
            let ggs = GraphStructure::from_edges(gs.num_graphs, &[], &(0..gs.num_graphs).collect::<Vec<_>>(), gs.num_graphs);
            let ps = tape.row_l2_normalize(head_s.project(tape, pooled_s, &ggs, train));
            let pt = tape.row_l2_normalize(head_t.project(tape, pooled_t, &ggs, train));
            Ok((ps, pt, None))
        }
    }
}

/// Contrastive representation distillation across the teacher and student
/// spaces: temperature-scaled softmax cross entropy where each student row
/// must retrieve its own teacher row among in-batch distractors.
#[allow(clippy::too_many_arguments)]
pub fn gcrd_loss(
    tape: &Tape,
    f_s: Var,
    f_t: Var,
    head_s: &BoundHead,
    head_t: &BoundHead,
    tau2: f64,
    gs: &GraphStructure,
    level: ContrastLevel,
    train: bool,
) -> Result<Var> {
    if tau2 <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau2 must be positive, got {tau2}")));
    }
    if f_s.rows < 2 {
        return Err(Error::InvalidArgument("gcrd requires at least 2 rows (no negatives otherwise)".into()));
    }
    let (ps, pt, mask) = contrast_features(tape, f_s, f_t, head_s, head_t, gs, level, train)?;
    let sims = tape.matmul(ps, tape.transpose(pt));
    let mut logits = tape.mul_scalar(sims, 1.0 / tau2);
    if let Some(m) = mask {
        logits = tape.add(logits, tape.constant(m));
    }
    let n = logits.rows;
    let ls = tape.row_log_softmax(logits);
    let eye = tape.constant(Mat::eye(n));
    let diag = tape.reduce_sum(tape.elementwise_mul(ls, eye));
    Ok(tape.mul_scalar(diag, -1.0 / n as f64))
}

/// Similarity matrix of the projected, normalized features; used for
/// retrieval diagnostics.
pub fn gcrd_similarity(
    tape: &Tape,
    f_s: Var,
    f_t: Var,
    head_s: &BoundHead,
    head_t: &BoundHead,
    gs: &GraphStructure,
    train: bool,
) -> Var {
    let ps = tape.row_l2_normalize(head_s.project(tape, f_s, gs, train));
    let pt = tape.row_l2_normalize(head_t.project(tape, f_t, gs, train));
    tape.matmul(ps, tape.transpose(pt))
}

/// Node-level CRD baseline: sigmoid critic on temperature-scaled cosine
/// similarity with within-batch negatives (no memory bank).
#[allow(clippy::too_many_arguments)]
pub fn crd_loss(
    tape: &Tape,
    f_s: Var,
    f_t: Var,
    head_s: &BoundHead,
    head_t: &BoundHead,
    tau2: f64,
    gs: &GraphStructure,
    train: bool,
) -> Result<Var> {
    if tau2 <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau2 must be positive, got {tau2}")));
    }
    let n = f_s.rows;
    if n < 2 {
        return Err(Error::InvalidArgument("crd requires at least 2 rows".into()));
    }
    let sims = gcrd_similarity(tape, f_s, f_t, head_s, head_t, gs, train);
    let scaled = tape.mul_scalar(sims, 1.0 / tau2);
    // -log sigmoid(s) = softplus(-s); -log(1 - sigmoid(s)) = softplus(s)
    let eye = tape.constant(Mat::eye(n));
    let pos = tape.elementwise_mul(tape.softplus(tape.mul_scalar(scaled, -1.0)), eye);
    let off = tape.constant(Mat::from_elem((n, n), 1.0) - Mat::eye(n));
    let neg = tape.elementwise_mul(tape.softplus(scaled), off);
    let pos_term = tape.mul_scalar(tape.reduce_sum(pos), 1.0 / n as f64);
    let neg_term = tape.mul_scalar(tape.reduce_sum(neg), 1.0 / (n * (n - 1)) as f64);
    Ok(tape.add(pos_term, neg_term))
}

/// (1 - alpha) sup + alpha tau1^2 kd + beta aux, with absent terms dropped.
/// When the method omits logit KD, alpha is treated as zero.
pub fn combined_loss(
    tape: &Tape,
    spec: &DistillSpec,
    sup: Var,
    kd: Option<Var>,
    aux: Option<Var>,
) -> Var {
    let alpha = if kd.is_some() { spec.alpha } else { 0.0 };
    let mut total = tape.mul_scalar(sup, 1.0 - alpha);
    if let Some(kd) = kd {
        total = tape.add(total, tape.mul_scalar(kd, alpha * spec.tau1 * spec.tau1));
    }
    if let Some(aux) = aux {
        total = tape.add(total, tape.mul_scalar(aux, spec.beta));
    }
    total
}
