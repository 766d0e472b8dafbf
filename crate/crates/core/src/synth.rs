//! Synthetic dataset generators: stochastic block model node-classification
//! graphs and small motif-labelled graphs for graph classification.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphLabel, Labels};
use crate::rng::{stream_rng, Stream};

/// Stochastic block model with one-hot block features plus Gaussian noise.
/// Node label = block id; both edge directions are emitted. p_in > p_out is
/// required (homophilous regime).
#[allow(clippy::too_many_arguments)]
pub fn synth_sbm(
    blocks: usize,
    nodes_per_block: usize,
    p_in: f64,
    p_out: f64,
    d_in: usize,
    noise: f64,
    seed: u64,
) -> Result<Graph> {
    if blocks == 0 || nodes_per_block == 0 || d_in == 0 {
        return Err(Error::InvalidArgument("blocks, nodes_per_block, d_in must be positive".into()));
    }
    if p_in <= p_out {
        return Err(Error::InvalidArgument(format!(
            "SBM requires p_in > p_out (homophilous regime), got p_in={p_in}, p_out={p_out}"
        )));
    }
    if noise < 0.0 {
        return Err(Error::InvalidArgument("noise must be non-negative".into()));
    }
    let n = blocks * nodes_per_block;
    let mut rng = stream_rng(seed, Stream::Synth);
    let block_of = |v: usize| v / nodes_per_block;

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block_of(u) == block_of(v) { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                edges.push((u, v));
                edges.push((v, u));
            }
        }
    }

    let mut x = Array2::zeros((n, d_in));
    for v in 0..n {
        let b = block_of(v);
        if b < d_in {
            x[[v, b]] = 1.0;
        }
        for j in 0..d_in {
            let z: f64 = rng.sample(StandardNormal);
            x[[v, j]] += noise * z;
        }
    }

    let labels: Vec<usize> = (0..n).map(block_of).collect();
    let g = Graph {
        id: format!("sbm_b{blocks}_npb{nodes_per_block}_s{seed}"),
        n,
        edges,
        x,
        y: Labels::Node(labels),
        classes: blocks,
    };
    g.validate()?;
    Ok(g)
}

/// Random connected small graphs for binary graph classification. The label
/// is a planted structural motif: class 1 graphs get a triangle with a
/// pendant (degree-1) node attached, class 0 graphs are triangle-free
/// (generated as random trees plus non-triangle chords).
pub fn synth_molgraphs(
    count: usize,
    min_n: usize,
    max_n: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<Graph>> {
    if min_n < 2 || min_n > max_n {
        return Err(Error::InvalidArgument(format!(
            "require 2 <= min_n <= max_n, got min_n={min_n}, max_n={max_n}"
        )));
    }
    if num_classes != 2 {
        return Err(Error::InvalidArgument("synth_molgraphs supports num_classes=2".into()));
    }
    let mut rng = stream_rng(seed, Stream::Synth);
    let mut graphs = Vec::with_capacity(count);
    for gi in 0..count {
        let n = rng.gen_range(min_n..=max_n);
        let class = gi % 2; // balanced by construction
        let mut und = tree_edges(n, &mut rng);
        if class == 1 && n >= 4 {
            // plant a triangle with a pendant: close the wedge 0-1-2 and
            // ensure node 3 hangs off the triangle
            und.insert((0, 1));
            und.insert((1, 2));
            und.insert((0, 2));
        } else {
            // add a few chords that skip >= 2 tree positions; on a path-ish
            // labelling this avoids accidental triangles only probabilistically,
            // so reject chords that would close one
            let extra = rng.gen_range(0..=(n / 4));
            for _ in 0..extra {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                if a == b {
                    continue;
                }
                let e = (a.min(b), a.max(b));
                if und.contains(&e) {
                    continue;
                }
                if !closes_triangle(&und, e) {
                    und.insert(e);
                }
            }
        }
        let mut edges = Vec::with_capacity(und.len() * 2);
        let mut sorted: Vec<_> = und.iter().copied().collect();
        sorted.sort_unstable();
        for (a, b) in sorted {
            edges.push((a, b));
            edges.push((b, a));
        }
        // degree as the single input feature, normalized
        let mut deg = vec![0.0f64; n];
        for &(s, _) in &edges {
            deg[s] += 1.0;
        }
        let mut x = Array2::zeros((n, 2));
        for v in 0..n {
            x[[v, 0]] = 1.0;
            x[[v, 1]] = deg[v] / n as f64;
        }
        let g = Graph {
            id: format!("mol_{seed}_{gi}"),
            n,
            edges,
            x,
            y: Labels::Graph(GraphLabel::Class(class)),
            classes: 2,
        };
        g.validate()?;
        graphs.push(g);
    }
    Ok(graphs)
}

fn tree_edges(n: usize, rng: &mut impl Rng) -> std::collections::BTreeSet<(usize, usize)> {
    // random attachment tree over a shuffled node order keeps it connected
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = std::collections::BTreeSet::new();
    for i in 1..n {
        let parent = order[rng.gen_range(0..i)];
        let child = order[i];
        edges.insert((parent.min(child), parent.max(child)));
    }
    edges
}

fn closes_triangle(und: &std::collections::BTreeSet<(usize, usize)>, e: (usize, usize)) -> bool {
    let nbrs = |v: usize| -> Vec<usize> {
        und.iter()
            .filter_map(|&(a, b)| {
                if a == v {
                    Some(b)
                } else if b == v {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    };
    let na = nbrs(e.0);
    let nb = nbrs(e.1);
    na.iter().any(|v| nb.contains(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extreme_probabilities_give_disjoint_cliques() {
        let g = synth_sbm(2, 4, 1.0, 0.0, 2, 0.0, 0).unwrap();
        assert_eq!(g.n, 8);
        // two 4-cliques, both directions: 2 * 4*3 = 24 directed edges
        assert_eq!(g.edges.len(), 24);
        assert_eq!(g.y, Labels::Node(vec![0, 0, 0, 0, 1, 1, 1, 1]));
        for &(s, d) in &g.edges {
            assert_eq!(s / 4, d / 4, "cross-block edge ({s},{d})");
        }
    }

    #[test]
    fn sbm_deterministic_given_seed() {
        let a = synth_sbm(3, 10, 0.5, 0.1, 4, 0.3, 42).unwrap();
        let b = synth_sbm(3, 10, 0.5, 0.1, 4, 0.3, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sbm_intra_block_edge_count_within_binomial_bounds() {
        let (blocks, npb, p_in) = (5usize, 100usize, 0.1f64);
        let g = synth_sbm(blocks, npb, p_in, 0.01, 4, 0.0, 7).unwrap();
        let intra = g
            .edges
            .iter()
            .filter(|&&(s, d)| s / npb == d / npb)
            .count() as f64;
        // directed count over unordered trials: trials = blocks * C(npb,2), each emits 2
        let trials = (blocks * npb * (npb - 1) / 2) as f64;
        let expected = 2.0 * trials * p_in;
        let sigma = 2.0 * (trials * p_in * (1.0 - p_in)).sqrt();
        assert!(
            (intra - expected).abs() < 5.0 * sigma,
            "intra={intra} expected={expected} sigma={sigma}"
        );
    }

    #[test]
    fn sbm_rejects_non_homophilous() {
        let err = synth_sbm(2, 4, 0.1, 0.5, 2, 0.0, 0).unwrap_err();
        assert!(err.to_string().contains("p_in > p_out"));
    }

    #[test]
    fn molgraphs_connected_and_sized() {
        let gs = synth_molgraphs(10, 5, 12, 2, 3).unwrap();
        assert_eq!(gs.len(), 10);
        for g in &gs {
            assert!(g.n >= 5 && g.n <= 12);
            assert!(is_connected(g), "graph {} not connected", g.id);
        }
    }

    #[test]
    fn molgraphs_deterministic() {
        let a = synth_molgraphs(5, 4, 8, 2, 11).unwrap();
        let b = synth_molgraphs(5, 4, 8, 2, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn molgraph_label_balance() {
        let gs = synth_molgraphs(1000, 5, 12, 2, 1).unwrap();
        let ones = gs
            .iter()
            .filter(|g| g.y == Labels::Graph(GraphLabel::Class(1)))
            .count() as f64
            / 1000.0;
        assert!((0.2..=0.8).contains(&ones), "class-1 frequency {ones}");
    }

    fn is_connected(g: &Graph) -> bool {
        let mut seen = vec![false; g.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(s, d) in &g.edges {
                if s == v && !seen[d] {
                    seen[d] = true;
                    stack.push(d);
                }
            }
        }
        seen.into_iter().all(|b| b)
    }
}
