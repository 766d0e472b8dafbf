//! Optimizers, supervised and distillation training loops, early stopping,
//! and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::data::{PreparedData, SplitIndices};
use crate::distill::{
    at_loss, combined_loss, crd_loss, fitnet_loss, gcrd_loss, gsp_loss, kd_loss, lsp_loss, Aux,
    DistillSpec, HeadKind, ProjectionHead,
};
use crate::error::{Error, Result};
use crate::gnn::{GraphStructure, Model, ModelSpec};
use crate::graph::{make_batch, Batch, BatchLabels, GraphLabel};
use crate::rng::{stream_rng, substream_rng, Stream};
use crate::simrep::EmbeddingSet;
use crate::tape::{row_softmax_mat, Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimSpec {
    pub kind: OptimKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            kind: OptimKind::Adam,
            lr: 1e-2,
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// First-order optimizer over a flat parameter list.
pub struct Optimizer {
    spec: OptimSpec,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u32,
}

impl Optimizer {
    pub fn new(spec: OptimSpec, params: &[&Mat]) -> Self {
        let m = params.iter().map(|p| Mat::zeros(p.raw_dim())).collect();
        let v = params.iter().map(|p| Mat::zeros(p.raw_dim())).collect();
        Optimizer { spec, m, v, t: 0 }
    }

    /// One update. `grads[i] = None` leaves parameter i untouched this step.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Option<Mat>]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let mut g = g.clone();
            if self.spec.weight_decay > 0.0 {
                g += &(&**p * self.spec.weight_decay);
            }
            match self.spec.kind {
                OptimKind::Sgd => {
                    **p -= &(&g * self.spec.lr);
                }
                OptimKind::Adam => {
                    let (b1, b2) = (self.spec.beta1, self.spec.beta2);
                    self.m[i] = &self.m[i] * b1 + &g * (1.0 - b1);
                    self.v[i] = &self.v[i] * b2 + &g.mapv(|x| x * x) * (1.0 - b2);
                    let mhat = &self.m[i] / (1.0 - b1.powi(self.t as i32));
                    let vhat = &self.v[i] / (1.0 - b2.powi(self.t as i32));
                    let upd = mhat / (vhat.mapv(f64::sqrt) + self.spec.eps);
                    **p -= &(upd * self.spec.lr);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSel {
    Train,
    Valid,
    Test,
}

fn sel_indices<'a>(split: &'a SplitIndices, sel: SplitSel) -> &'a [usize] {
    match sel {
        SplitSel::Train => &split.train,
        SplitSel::Valid => &split.valid,
        SplitSel::Test => &split.test,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.patience >= self.epochs {
            return Err(Error::InvalidArgument(format!(
                "patience {} must be < epochs {}",
                self.patience, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// ROC-AUC via the rank statistic, ties averaged.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = n as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return 0.5;
    }
    let rank_sum: f64 = (0..n).filter(|&k| labels[k] == 1).map(|k| ranks[k]).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

fn accuracy(logits: &Mat, labels: &[usize], idx: &[usize]) -> f64 {
    let correct = idx
        .iter()
        .filter(|&&i| {
            let row = logits.row(i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            argmax == labels[i]
        })
        .count();
    correct as f64 / idx.len().max(1) as f64
}

fn model_logits(model: &Model, batch: &Batch, gs: &GraphStructure) -> (Mat, Mat) {
    let tape = Tape::new();
    let tm = model.bind(&tape, false);
    let x = tape.constant(batch.x.clone());
    let (f, z) = tm.forward(x, gs, false, None);
    (tape.value(f), tape.value(z))
}

/// Task metric on a split: accuracy for node and multi-class graph tasks,
/// ROC-AUC for binary graph tasks.
pub fn evaluate(model: &Model, data: &PreparedData, sel: SplitSel) -> Result<f64> {
    match data {
        PreparedData::Node {
            batch,
            structure,
            split,
        } => {
            let (_, z) = model_logits(model, batch, structure);
            let BatchLabels::Node(labels) = &batch.y else {
                return Err(Error::InvalidArgument("node data without node labels".into()));
            };
            Ok(accuracy(&z, labels, sel_indices(split, sel)))
        }
        PreparedData::Graphs { graphs, split } => {
            let idx = sel_indices(split, sel);
            let members: Vec<&crate::graph::Graph> = idx.iter().map(|&i| &graphs[i]).collect();
            if members.is_empty() {
                return Err(Error::InvalidArgument("empty evaluation split".into()));
            }
            let batch = make_batch(&members)?;
            let gs = GraphStructure::from_batch(&batch);
            let (_, z) = model_logits(model, &batch, &gs);
            let BatchLabels::Graph(glabels) = &batch.y else {
                return Err(Error::InvalidArgument("graph data without graph labels".into()));
            };
            let labels: Vec<usize> = glabels
                .iter()
                .map(|l| match l {
                    GraphLabel::Class(c) => Ok(*c),
                    GraphLabel::Scalar(_) => Err(Error::InvalidArgument(
                        "scalar graph labels have no classification metric".into(),
                    )),
                })
                .collect::<Result<_>>()?;
            if batch.classes == 2 {
                let probs = row_softmax_mat(&z);
                let scores: Vec<f64> = (0..z.nrows()).map(|i| probs[[i, 1]]).collect();
                Ok(roc_auc(&scores, &labels))
            } else {
                let all: Vec<usize> = (0..z.nrows()).collect();
                Ok(accuracy(&z, &labels, &all))
            }
        }
    }
}

/// Cross-entropy of the rows `idx` of `z` against integer labels.
fn cross_entropy(tape: &Tape, z: Var, labels: &[usize], idx: &[usize], classes: usize) -> Var {
    let zsub = tape.gather_rows(z, idx);
    let ls = tape.row_log_softmax(zsub);
    let mut onehot = Mat::zeros((idx.len(), classes));
    for (k, &i) in idx.iter().enumerate() {
        onehot[[k, labels[i]]] = 1.0;
    }
    let picked = tape.elementwise_mul(ls, tape.constant(onehot));
    tape.mul_scalar(tape.reduce_sum(picked), -1.0 / idx.len() as f64)
}

fn batch_labels(batch: &Batch) -> Result<Vec<usize>> {
    match &batch.y {
        BatchLabels::Node(v) => Ok(v.clone()),
        BatchLabels::Graph(g) => g
            .iter()
            .map(|l| match l {
                GraphLabel::Class(c) => Ok(*c),
                GraphLabel::Scalar(_) => Err(Error::InvalidArgument(
                    "scalar graph labels are not supported by classification training".into(),
                )),
            })
            .collect(),
    }
}

struct EarlyStopper {
    best: f64,
    best_epoch: usize,
    since_best: usize,
    patience: usize,
    snapshot: Vec<(String, Mat)>,
}

impl EarlyStopper {
    fn new(patience: usize, initial: f64, params: &[(String, Mat)]) -> Self {
        EarlyStopper {
            best: initial,
            best_epoch: 0,
            since_best: 0,
            patience,
            snapshot: params.to_vec(),
        }
    }

    fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    /// Returns true when the metric improved and the snapshot was replaced,
    /// so callers can checkpoint auxiliary state in step.
    fn observe(&mut self, epoch: usize, metric: f64, params: &[(String, Mat)]) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.snapshot = params.to_vec();
            true
        } else {
            self.since_best += 1;
            false
        }
    }
}

/// Conventional supervised training with early stopping on the validation
/// metric. Deterministic given the seed.
pub fn train_supervised(
    mut spec: ModelSpec,
    data: &PreparedData,
    optim: &OptimSpec,
    tp: &TrainParams,
    seed: u64,
) -> Result<(Model, History)> {
    optim.validate()?;
    tp.validate()?;
    spec.seed = seed;
    let mut rng = stream_rng(seed, Stream::Init);
    let mut model = Model::init(spec, data.feature_dim(), &mut rng)?;
    let refs: Vec<&Mat> = model.params.iter().map(|(_, m)| m).collect();
    let mut opt = Optimizer::new(optim.clone(), &refs);
    let mut history = History::default();
    let init_metric = evaluate(&model, data, SplitSel::Valid)?;
    let mut stopper = EarlyStopper::new(tp.patience, init_metric, &model.params);
    history.records.push(EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        valid_metric: init_metric,
    });
    let mut dropout_rng = stream_rng(seed, Stream::Dropout);
    for epoch in 1..=tp.epochs {
        if stopper.should_stop() {
            break;
        }
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (batch, gs, train_idx) in train_batches(data, tp.batch_size, seed, epoch)? {
            let labels = batch_labels(&batch)?;
            let tape = Tape::new();
            let tm = model.bind(&tape, true);
            let x = tape.constant(batch.x.clone());
            let (_, z) = tm.forward(x, &gs, true, Some(&mut dropout_rng));
            let loss = cross_entropy(&tape, z, &labels, &train_idx, batch.classes);
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += lv;
            steps += 1;
            tape.backward(loss);
            let grads: Vec<Option<Mat>> = tm.vars.iter().map(|(_, v)| tape.grad(*v)).collect();
            let mut refs: Vec<&mut Mat> = model.params.iter_mut().map(|(_, m)| m).collect();
            opt.step(&mut refs, &grads);
        }
        let metric = evaluate(&model, data, SplitSel::Valid)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / steps.max(1) as f64,
            valid_metric: metric,
        });
        stopper.observe(epoch, metric, &model.params);
    }
    history.best_epoch = stopper.best_epoch;
    history.best_valid = stopper.best;
    model.params = stopper.snapshot;
    Ok((model, history))
}

/// Training batches for one epoch: the full merged batch for node tasks, or
/// shuffled minibatches of training graphs. The returned index list marks the
/// rows that carry supervision.
fn train_batches(
    data: &PreparedData,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<(Batch, GraphStructure, Vec<usize>)>> {
    match data {
        PreparedData::Node {
            batch,
            structure,
            split,
        } => Ok(vec![(batch.clone(), structure.clone(), split.train.clone())]),
        PreparedData::Graphs { graphs, split } => {
            use rand::seq::SliceRandom;
            let mut order = split.train.clone();
            let mut rng = substream_rng(seed, Stream::Shuffle, epoch as u64);
            order.shuffle(&mut rng);
            order
                .chunks(batch_size)
                .map(|chunk| {
                    let members: Vec<&crate::graph::Graph> = chunk.iter().map(|&i| &graphs[i]).collect();
                    let b = make_batch(&members)?;
                    let gs = GraphStructure::from_batch(&b);
                    let all: Vec<usize> = (0..b.num_graphs()).collect();
                    Ok((b, gs, all))
                })
                .collect()
        }
    }
}

/// Heads and cached teacher outputs for one distillation run.
struct DistillState {
    head_s: Option<ProjectionHead>,
    head_t: Option<ProjectionHead>,
}

/// Result of a distillation run: the student at its best validation epoch,
/// the training history, and the trained projection heads when the method
/// uses them.
pub struct DistillOutput {
    pub model: Model,
    pub history: History,
    pub head_s: Option<ProjectionHead>,
    pub head_t: Option<ProjectionHead>,
}

fn needs_heads(aux: Option<Aux>) -> bool {
    matches!(aux, Some(Aux::Fitnet | Aux::Crd | Aux::Gcrd))
}

/// Knowledge-distillation training of a student against a frozen teacher.
/// The teacher backbone never receives gradients; projection heads on both
/// sides are optimized jointly with the student.
pub fn distill(
    teacher: &Model,
    mut student_spec: ModelSpec,
    dspec: &DistillSpec,
    data: &PreparedData,
    optim: &OptimSpec,
    tp: &TrainParams,
    seed: u64,
) -> Result<DistillOutput> {
    dspec.validate()?;
    if dspec.method == crate::distill::Method::SUPERVISED {
        let (model, history) = train_supervised(student_spec, data, optim, tp, seed)?;
        return Ok(DistillOutput {
            model,
            history,
            head_s: None,
            head_t: None,
        });
    }
    optim.validate()?;
    tp.validate()?;
    student_spec.seed = seed;
    let mut rng = stream_rng(seed, Stream::Init);
    let mut model = Model::init(student_spec, data.feature_dim(), &mut rng)?;
    let d_s = model.spec.hidden;
    let d_t = teacher.spec.hidden;
    let mut state = DistillState {
        head_s: None,
        head_t: None,
    };
    if needs_heads(dspec.method.aux) {
        if dspec.head == HeadKind::Identity && d_s != d_t {
            return Err(Error::InvalidArgument(format!(
                "identity head requires equal feature widths, got student {d_s} vs teacher {d_t}"
            )));
        }
        let mut hrng = stream_rng(seed, Stream::HeadInit);
        state.head_s = Some(ProjectionHead::init(dspec.head, d_s, d_s, &mut hrng));
        state.head_t = Some(ProjectionHead::init(dspec.head, d_t, d_s, &mut hrng));
    }

    let opt_param_refs = |model: &Model, state: &DistillState| -> Vec<Mat> {
        let mut all: Vec<Mat> = model.params.iter().map(|(_, m)| m.clone()).collect();
        for h in [&state.head_s, &state.head_t].into_iter().flatten() {
            all.extend(h.params.iter().map(|(_, m)| m.clone()));
        }
        all
    };
    let init_shapes = opt_param_refs(&model, &state);
    let refs: Vec<&Mat> = init_shapes.iter().collect();
    let mut opt = Optimizer::new(optim.clone(), &refs);

    let mut history = History::default();
    let init_metric = evaluate(&model, data, SplitSel::Valid)?;
    let mut stopper = EarlyStopper::new(tp.patience, init_metric, &model.params);
    history.records.push(EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        valid_metric: init_metric,
    });
    // heads roll back together with the student so the returned pair is
    // consistent
    let mut head_snapshot = (state.head_s.clone(), state.head_t.clone());
    let mut dropout_rng = stream_rng(seed, Stream::Dropout);

    // node-level data has one fixed batch: cache the frozen teacher pass
    let teacher_cache: Option<(Mat, Mat)> = match data {
        PreparedData::Node {
            batch, structure, ..
        } => Some(teacher_forward(teacher, batch, structure)),
        PreparedData::Graphs { .. } => None,
    };

    let mut step_counter = 0u64;
    for epoch in 1..=tp.epochs {
        if stopper.should_stop() {
            break;
        }
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (batch, gs, train_idx) in train_batches(data, tp.batch_size, seed, epoch)? {
            let (f_t, z_t) = match &teacher_cache {
                Some(cached) => cached.clone(),
                None => teacher_forward(teacher, &batch, &gs),
            };
            let labels = batch_labels(&batch)?;
            let tape = Tape::new();
            let tm = model.bind(&tape, true);
            let x = tape.constant(batch.x.clone());
            let (f_s, z_s) = tm.forward(x, &gs, true, Some(&mut dropout_rng));
            let bound_s = state.head_s.as_ref().map(|h| h.bind(&tape, true));
            let bound_t = state.head_t.as_ref().map(|h| h.bind(&tape, true));

            let sup = cross_entropy(&tape, z_s, &labels, &train_idx, batch.classes);
            let kd = if dspec.method.kd {
                Some(kd_loss(&tape, z_s, &z_t, dspec.tau1)?)
            } else {
                None
            };
            let f_t_var = tape.constant(f_t);
            let aux = match dspec.method.aux {
                None => None,
                Some(Aux::Fitnet) => Some(fitnet_loss(
                    &tape,
                    f_s,
                    f_t_var,
                    bound_s.as_ref().unwrap(),
                    bound_t.as_ref().unwrap(),
                    &gs,
                    true,
                )),
                Some(Aux::At) => Some(at_loss(&tape, f_s, f_t_var)),
                Some(Aux::Lsp) => Some(lsp_loss(
                    &tape,
                    f_s,
                    f_t_var,
                    &batch.edges,
                    dspec.kernel,
                    dspec.lsp_kl_reverse,
                )),
                Some(Aux::Gsp) => {
                    let mut srng = substream_rng(seed, Stream::Subsample, step_counter);
                    Some(gsp_loss(
                        &tape,
                        f_s,
                        f_t_var,
                        dspec.kernel,
                        dspec.gsp_metric,
                        dspec.gsp_cap,
                        &mut srng,
                    )?)
                }
                Some(Aux::Gcrd) => Some(gcrd_loss(
                    &tape,
                    f_s,
                    f_t_var,
                    bound_s.as_ref().unwrap(),
                    bound_t.as_ref().unwrap(),
                    dspec.tau2,
                    &gs,
                    dspec.contrast_level,
                    true,
                )?),
                Some(Aux::Crd) => Some(crd_loss(
                    &tape,
                    f_s,
                    f_t_var,
                    bound_s.as_ref().unwrap(),
                    bound_t.as_ref().unwrap(),
                    dspec.tau2,
                    &gs,
                    true,
                )?),
            };
            let total = combined_loss(&tape, dspec, sup, kd, aux);
            let lv = tape.scalar(total);
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += lv;
            steps += 1;
            step_counter += 1;
            tape.backward(total);

            let mut grads: Vec<Option<Mat>> = tm.vars.iter().map(|(_, v)| tape.grad(*v)).collect();
            for bound in [&bound_s, &bound_t].into_iter().flatten() {
                grads.extend(bound.vars.iter().map(|(_, v)| tape.grad(*v)));
            }
            let mut refs: Vec<&mut Mat> = model.params.iter_mut().map(|(_, m)| m).collect();
            for h in [&mut state.head_s, &mut state.head_t].into_iter().flatten() {
                refs.extend(h.params.iter_mut().map(|(_, m)| m));
            }
            opt.step(&mut refs, &grads);
        }
        let metric = evaluate(&model, data, SplitSel::Valid)?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / steps.max(1) as f64,
            valid_metric: metric,
        });
        if stopper.observe(epoch, metric, &model.params) {
            head_snapshot = (state.head_s.clone(), state.head_t.clone());
        }
    }
    history.best_epoch = stopper.best_epoch;
    history.best_valid = stopper.best;
    model.params = stopper.snapshot;
    let (head_s, head_t) = head_snapshot;
    Ok(DistillOutput {
        model,
        history,
        head_s,
        head_t,
    })
}

/// Frozen evaluation-mode pass of the teacher: (penultimate F, logits Z).
pub fn teacher_forward(teacher: &Model, batch: &Batch, gs: &GraphStructure) -> (Mat, Mat) {
    model_logits(teacher, batch, gs)
}

/// Penultimate embeddings of the given split, with the edge list restricted
/// to the selected nodes (reindexed), for similarity analysis.
pub fn extract_embeddings(
    model: &Model,
    data: &PreparedData,
    sel: SplitSel,
    source: &str,
) -> Result<(EmbeddingSet, Vec<(usize, usize)>)> {
    match data {
        PreparedData::Node {
            batch,
            structure,
            split,
        } => {
            let (f, _) = model_logits(model, batch, structure);
            let idx = sel_indices(split, sel);
            let mut sub = Mat::zeros((idx.len(), f.ncols()));
            let mut ids = Vec::with_capacity(idx.len());
            let mut pos = std::collections::HashMap::new();
            for (k, &i) in idx.iter().enumerate() {
                sub.row_mut(k).assign(&f.row(i));
                ids.push(format!("n{i}"));
                pos.insert(i, k);
            }
            let edges: Vec<(usize, usize)> = batch
                .edges
                .iter()
                .filter_map(|&(s, d)| Some((*pos.get(&s)?, *pos.get(&d)?)))
                .collect();
            Ok((EmbeddingSet::new(sub, ids, source)?, edges))
        }
        PreparedData::Graphs { graphs, split } => {
            let idx = sel_indices(split, sel);
            let members: Vec<&crate::graph::Graph> = idx.iter().map(|&i| &graphs[i]).collect();
            let batch = make_batch(&members)?;
            let gs = GraphStructure::from_batch(&batch);
            let (f, _) = model_logits(model, &batch, &gs);
            let ids: Vec<String> = (0..batch.num_nodes())
                .map(|v| format!("{}:{}", batch.graph_ids[batch.node_to_graph[v]], v))
                .collect();
            Ok((EmbeddingSet::new(f, ids, source)?, batch.edges.clone()))
        }
    }
}
