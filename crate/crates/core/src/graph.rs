//! Graph data model, text-format ingestion, and batching.
//!
//! Edges are stored directed; undirected inputs must list both directions.
//! Self-loops are not stored (symmetric normalization adds the identity
//! inside the GCN layer).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node labels (length n) or a single graph-level label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Node(Vec<usize>),
    Graph(GraphLabel),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GraphLabel {
    Class(usize),
    Scalar(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub id: String,
    pub n: usize,
    /// Directed (src, dst) pairs, each endpoint in [0, n).
    pub edges: Vec<(usize, usize)>,
    /// n x d_in node features.
    pub x: Array2<f64>,
    pub y: Labels,
    /// Number of label classes.
    pub classes: usize,
}

impl Graph {
    pub fn feature_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() != self.n {
            return Err(Error::InvalidArgument(format!(
                "graph {}: feature rows {} != node count {}",
                self.id,
                self.x.nrows(),
                self.n
            )));
        }
        let mut seen = HashSet::new();
        for &(s, d) in &self.edges {
            if s >= self.n || d >= self.n {
                return Err(Error::InvalidArgument(format!(
                    "graph {}: edge ({s}, {d}) endpoint out of range for n={}",
                    self.id, self.n
                )));
            }
            if !seen.insert((s, d)) {
                return Err(Error::InvalidArgument(format!(
                    "graph {}: duplicate edge ({s}, {d})",
                    self.id
                )));
            }
        }
        if let Labels::Node(v) = &self.y {
            if v.len() != self.n {
                return Err(Error::InvalidArgument(format!(
                    "graph {}: node label count {} != n {}",
                    self.id,
                    v.len(),
                    self.n
                )));
            }
        }
        Ok(())
    }
}

/// Concatenation of graphs with a node-to-graph map; the unit of training.
#[derive(Debug, Clone)]
pub struct Batch {
    pub graph_ids: Vec<String>,
    pub offsets: Vec<usize>,
    pub node_to_graph: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub x: Array2<f64>,
    pub y: BatchLabels,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchLabels {
    Node(Vec<usize>),
    Graph(Vec<GraphLabel>),
}

impl Batch {
    pub fn num_nodes(&self) -> usize {
        self.x.nrows()
    }

    pub fn num_graphs(&self) -> usize {
        self.graph_ids.len()
    }
}

/// Merge graphs into a single batch. Requires a non-empty list with uniform
/// feature width and label kind.
pub fn make_batch(graphs: &[&Graph]) -> Result<Batch> {
    if graphs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let d = graphs[0].feature_dim();
    let node_labelled = matches!(graphs[0].y, Labels::Node(_));
    let classes = graphs.iter().map(|g| g.classes).max().unwrap();
    let total: usize = graphs.iter().map(|g| g.n).sum();
    let mut x = Array2::zeros((total, d));
    let mut offsets = Vec::with_capacity(graphs.len());
    let mut node_to_graph = Vec::with_capacity(total);
    let mut edges = Vec::new();
    let mut node_labels = Vec::new();
    let mut graph_labels = Vec::new();
    let mut off = 0usize;
    for (gi, g) in graphs.iter().enumerate() {
        if g.feature_dim() != d {
            return Err(Error::InvalidArgument(format!(
                "mixed feature widths: {} vs {}",
                g.feature_dim(),
                d
            )));
        }
        match (&g.y, node_labelled) {
            (Labels::Node(v), true) => node_labels.extend_from_slice(v),
            (Labels::Graph(l), false) => graph_labels.push(*l),
            _ => return Err(Error::InvalidArgument("mixed label kinds in batch".into())),
        }
        offsets.push(off);
        for v in 0..g.n {
            x.row_mut(off + v).assign(&g.x.row(v));
            node_to_graph.push(gi);
        }
        for &(s, dst) in &g.edges {
            edges.push((off + s, off + dst));
        }
        off += g.n;
    }
    Ok(Batch {
        graph_ids: graphs.iter().map(|g| g.id.clone()).collect(),
        offsets,
        node_to_graph,
        edges,
        x,
        y: if node_labelled {
            BatchLabels::Node(node_labels)
        } else {
            BatchLabels::Graph(graph_labels)
        },
        classes,
    })
}

/// Fraction-based split with an explicit seed; see [`crate::data::split_indices`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: SplitMode,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    #[default]
    Random,
    /// Contiguous split in generation order; a stand-in for distribution shift.
    PlantedShift,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train <= 0.0 || self.valid <= 0.0 || self.test <= 0.0 {
            return Err(Error::InvalidArgument("split fractions must be positive".into()));
        }
        if (self.train + self.valid + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must sum to 1, got {}",
                self.train + self.valid + self.test
            )));
        }
        Ok(())
    }
}

// ---- text format ----

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Parse the one-file-per-graph text format.
pub fn load_graph(path: &Path) -> Result<Graph> {
    let text = std::fs::read_to_string(path)?;
    parse_graph(&text)
}

pub fn parse_graph(text: &str) -> Result<Graph> {
    let mut lines = text.lines().enumerate();
    let (hline, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 6 || toks[0] != "#graph" {
        return Err(parse_err(hline + 1, "malformed header: expected '#graph <id> nodes=<n> dim=<d> labels=<node|graph> classes=<C>'"));
    }
    let id = toks[1].to_string();
    let kv = |tok: &str, key: &str, line: usize| -> Result<String> {
        tok.strip_prefix(&format!("{key}="))
            .map(str::to_string)
            .ok_or_else(|| parse_err(line, format!("malformed header: expected {key}=<...>, got '{tok}'")))
    };
    let n: usize = kv(toks[2], "nodes", hline + 1)?
        .parse()
        .map_err(|_| parse_err(hline + 1, "malformed header: nodes is not an integer"))?;
    let d: usize = kv(toks[3], "dim", hline + 1)?
        .parse()
        .map_err(|_| parse_err(hline + 1, "malformed header: dim is not an integer"))?;
    let label_kind = kv(toks[4], "labels", hline + 1)?;
    let classes: usize = kv(toks[5], "classes", hline + 1)?
        .parse()
        .map_err(|_| parse_err(hline + 1, "malformed header: classes is not an integer"))?;
    if label_kind != "node" && label_kind != "graph" {
        return Err(parse_err(hline + 1, "malformed header: labels must be 'node' or 'graph'"));
    }

    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(i + 2, format!("feature row count mismatch: expected {n} rows")))?;
        if line.trim().starts_with('#') {
            return Err(parse_err(ln + 1, format!("feature row count mismatch: expected {n} rows, found {i}")));
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(ln + 1, "malformed feature value"))?;
        if vals.len() != d {
            return Err(parse_err(ln + 1, format!("expected {d} features, found {}", vals.len())));
        }
        for (j, v) in vals.into_iter().enumerate() {
            x[[i, j]] = v;
        }
    }

    let y = if label_kind == "node" {
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| parse_err(n + i + 2, "node label count mismatch"))?;
            let v: usize = line
                .trim()
                .parse()
                .map_err(|_| parse_err(ln + 1, "malformed node label"))?;
            if v >= classes {
                return Err(parse_err(ln + 1, format!("node label {v} out of range for {classes} classes")));
            }
            labels.push(v);
        }
        Labels::Node(labels)
    } else {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(n + 2, "missing graph label"))?;
        let t = line.trim();
        let label = if let Ok(c) = t.parse::<usize>() {
            if c >= classes {
                return Err(parse_err(ln + 1, format!("graph label {c} out of range for {classes} classes")));
            }
            GraphLabel::Class(c)
        } else {
            GraphLabel::Scalar(
                t.parse::<f64>()
                    .map_err(|_| parse_err(ln + 1, "malformed graph label"))?,
            )
        };
        Labels::Graph(label)
    };

    let (eline, emarker) = lines
        .next()
        .ok_or_else(|| parse_err(0, "missing '#edges' section"))?;
    if emarker.trim() != "#edges" {
        return Err(parse_err(eline + 1, format!("expected '#edges', got '{}'", emarker.trim())));
    }
    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    for (ln, line) in lines {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(parse_err(ln + 1, "malformed edge: expected 'src dst'"));
        }
        let s: usize = parts[0]
            .parse()
            .map_err(|_| parse_err(ln + 1, "malformed edge index"))?;
        let dst: usize = parts[1]
            .parse()
            .map_err(|_| parse_err(ln + 1, "malformed edge index"))?;
        if s >= n || dst >= n {
            return Err(parse_err(ln + 1, format!("edge endpoint out of range: ({s}, {dst}) with n={n}")));
        }
        if !seen.insert((s, dst)) {
            return Err(parse_err(ln + 1, format!("duplicate edge ({s}, {dst})")));
        }
        edges.push((s, dst));
    }

    let g = Graph {
        id,
        n,
        edges,
        x,
        y,
        classes,
    };
    g.validate()?;
    Ok(g)
}

/// Render a graph back into the text format read by [`load_graph`].
pub fn format_graph(g: &Graph) -> String {
    let label_kind = match g.y {
        Labels::Node(_) => "node",
        Labels::Graph(_) => "graph",
    };
    let mut out = String::new();
    writeln!(
        out,
        "#graph {} nodes={} dim={} labels={} classes={}",
        g.id,
        g.n,
        g.feature_dim(),
        label_kind,
        g.classes
    )
    .unwrap();
    for row in g.x.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    match &g.y {
        Labels::Node(v) => {
            for l in v {
                writeln!(out, "{l}").unwrap();
            }
        }
        Labels::Graph(GraphLabel::Class(c)) => writeln!(out, "{c}").unwrap(),
        Labels::Graph(GraphLabel::Scalar(s)) => writeln!(out, "{s:?}").unwrap(),
    }
    writeln!(out, "#edges").unwrap();
    for (s, d) in &g.edges {
        writeln!(out, "{s} {d}").unwrap();
    }
    out
}

pub fn save_graph(g: &Graph, path: &Path) -> Result<()> {
    std::fs::write(path, format_graph(g))?;
    Ok(())
}

/// Read a manifest: one graph file path per line, relative to the manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<Graph>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut graphs = Vec::new();
    for line in text.lines() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let p = base.join(t);
        graphs.push(load_graph(&p)?);
    }
    if graphs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "manifest {} lists no graphs",
            path.display()
        )));
    }
    Ok(graphs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn path3() -> String {
        "#graph p3 nodes=3 dim=2 labels=node classes=2\n\
         0.5 1.0\n1.5 2.0\n2.5 3.0\n\
         0\n1\n1\n\
         #edges\n0 1\n1 0\n1 2\n2 1\n"
            .to_string()
    }

    #[test]
    fn parses_path_graph() {
        let g = parse_graph(&path3()).unwrap();
        assert_eq!(g.n, 3);
        assert_eq!(g.edges.len(), 4);
        assert_eq!(g.feature_dim(), 2);
        assert_eq!(g.y, Labels::Node(vec![0, 1, 1]));
    }

    #[test]
    fn rejects_out_of_range_edge() {
        let text = path3().replace("0 1\n", "5 0\n");
        let err = parse_graph(&text).unwrap_err();
        assert!(err.to_string().contains("edge endpoint out of range"), "{err}");
    }

    #[test]
    fn rejects_feature_row_mismatch() {
        // a missing feature row makes the first label line parse as features
        let text = "#graph p nodes=3 dim=2 labels=node classes=2\n0.5 1.0\n1.5 2.0\n0\n1\n1\n#edges\n";
        let err = parse_graph(text).unwrap_err();
        assert!(err.to_string().contains("expected 2 features"), "{err}");
    }

    #[test]
    fn rejects_duplicate_edge() {
        let text = path3() + "0 1\n";
        let err = parse_graph(&text).unwrap_err();
        assert!(err.to_string().contains("duplicate edge"), "{err}");
    }

    #[test]
    fn round_trip_preserves_content() {
        let g = parse_graph(&path3()).unwrap();
        let g2 = parse_graph(&format_graph(&g)).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn batch_merges_with_offsets() {
        let g1 = Graph {
            id: "a".into(),
            n: 2,
            edges: vec![(0, 1), (1, 0)],
            x: array![[1.0], [2.0]],
            y: Labels::Node(vec![0, 1]),
            classes: 2,
        };
        let g2 = Graph {
            id: "b".into(),
            n: 3,
            edges: vec![(0, 2), (2, 0)],
            x: array![[3.0], [4.0], [5.0]],
            y: Labels::Node(vec![1, 0, 1]),
            classes: 2,
        };
        let b = make_batch(&[&g1, &g2]).unwrap();
        assert_eq!(b.num_nodes(), 5);
        assert_eq!(b.offsets, vec![0, 2]);
        assert_eq!(b.node_to_graph, vec![0, 0, 1, 1, 1]);
        assert!(b.edges.contains(&(2, 4)));
        // no cross-graph edges
        for &(s, d) in &b.edges {
            assert_eq!(b.node_to_graph[s], b.node_to_graph[d]);
        }
    }

    #[test]
    fn singleton_batch_is_identity() {
        let g = parse_graph(&path3()).unwrap();
        let b = make_batch(&[&g]).unwrap();
        assert_eq!(b.offsets, vec![0]);
        assert_eq!(b.edges, g.edges);
        assert_eq!(b.x, g.x);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let err = make_batch(&[]).unwrap_err();
        assert!(err.to_string().contains("empty batch"));
    }

    #[test]
    fn mixed_label_kinds_rejected() {
        let g1 = parse_graph(&path3()).unwrap();
        let mut g2 = g1.clone();
        g2.id = "q".into();
        g2.y = Labels::Graph(GraphLabel::Class(0));
        let err = make_batch(&[&g1, &g2]).unwrap_err();
        assert!(err.to_string().contains("mixed label kinds"));
    }
}
