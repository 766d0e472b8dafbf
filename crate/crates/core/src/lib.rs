//! Desk-scale knowledge distillation for graph neural networks.
//!
//! The crate covers the full pipeline: synthetic graph datasets, a tape-based
//! reverse-mode autodiff engine over dense matrices, GCN/GIN/GraphSAGE
//! models, the family of distillation objectives (logit KD, FitNet, AT, LSP,
//! GSP, CRD, G-CRD), representational-similarity analysis (CKA and Mantel
//! tests), and a multi-seed benchmark harness with ablation grids.

pub mod bench;
pub mod checks;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod gnn;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod rng;
pub mod simrep;
pub mod synth;
pub mod tape;
pub mod train;
