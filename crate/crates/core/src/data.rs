//! Dataset assembly and train/valid/test splitting.
//!
//! Node-labelled graphs are merged into one batch and split over nodes
//! (transductive); graph-labelled datasets are split over graphs.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::gnn::{GraphStructure, Task};
use crate::graph::{make_batch, Batch, Graph, Labels, SplitMode, SplitSpec};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Disjoint, exhaustive partition of 0..n by the split fractions.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if n < 3 {
        return Err(Error::InvalidArgument(format!("cannot split {n} items three ways")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if spec.mode == SplitMode::Random {
        let mut rng = stream_rng(spec.seed, Stream::Split);
        order.shuffle(&mut rng);
    }
    let n_train = ((n as f64) * spec.train).round().max(1.0) as usize;
    let n_valid = ((n as f64) * spec.valid).round().max(1.0) as usize;
    let n_train = n_train.min(n - 2);
    let n_valid = n_valid.min(n - n_train - 1);
    Ok(SplitIndices {
        train: order[..n_train].to_vec(),
        valid: order[n_train..n_train + n_valid].to_vec(),
        test: order[n_train + n_valid..].to_vec(),
    })
}

/// A dataset ready for training.
#[derive(Debug, Clone)]
pub enum PreparedData {
    /// All graphs merged; the split indexes nodes of the merged batch.
    Node {
        batch: Batch,
        structure: GraphStructure,
        split: SplitIndices,
    },
    /// The split indexes whole graphs.
    Graphs { graphs: Vec<Graph>, split: SplitIndices },
}

impl PreparedData {
    pub fn task(&self) -> Task {
        match self {
            PreparedData::Node { .. } => Task::Node,
            PreparedData::Graphs { .. } => Task::Graph,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            PreparedData::Node { batch, .. } => batch.classes,
            PreparedData::Graphs { graphs, .. } => graphs.iter().map(|g| g.classes).max().unwrap_or(0),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            PreparedData::Node { batch, .. } => batch.x.ncols(),
            PreparedData::Graphs { graphs, .. } => graphs[0].feature_dim(),
        }
    }
}

pub fn prepare(graphs: Vec<Graph>, split: &SplitSpec) -> Result<PreparedData> {
    if graphs.is_empty() {
        return Err(Error::InvalidArgument("no graphs in dataset".into()));
    }
    let node_level = matches!(graphs[0].y, Labels::Node(_));
    if node_level {
        let refs: Vec<&Graph> = graphs.iter().collect();
        let batch = make_batch(&refs)?;
        let structure = GraphStructure::from_batch(&batch);
        let split = split_indices(batch.num_nodes(), split)?;
        Ok(PreparedData::Node {
            batch,
            structure,
            split,
        })
    } else {
        let split = split_indices(graphs.len(), split)?;
        Ok(PreparedData::Graphs { graphs, split })
    }
}
