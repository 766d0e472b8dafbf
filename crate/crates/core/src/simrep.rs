//! Representational similarity between embedding sets: linear CKA and
//! global/local Mantel tests over pairwise cosine distances.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// An n x d embedding matrix with node identifiers for alignment.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub f: Array2<f64>,
    pub node_ids: Vec<String>,
    pub source: String,
}

impl EmbeddingSet {
    pub fn new(f: Array2<f64>, node_ids: Vec<String>, source: impl Into<String>) -> Result<Self> {
        if f.nrows() != node_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "embedding rows {} != id count {}",
                f.nrows(),
                node_ids.len()
            )));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding contains non-finite entries".into()));
        }
        Ok(EmbeddingSet {
            f,
            node_ids,
            source: source.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.f.nrows()
    }
}

fn check_aligned(e1: &EmbeddingSet, e2: &EmbeddingSet) -> Result<()> {
    if e1.n() < 3 {
        return Err(Error::InvalidArgument(format!("need n >= 3, got {}", e1.n())));
    }
    if e1.node_ids != e2.node_ids {
        return Err(Error::InvalidArgument(format!(
            "embedding sets '{}' and '{}' have misaligned node ids",
            e1.source, e2.source
        )));
    }
    Ok(())
}

/// Linear CKA in [0, 1]: ||Y'X||_F^2 / (||X'X||_F ||Y'Y||_F) on
/// column-centered matrices. Returns 0 when either centered matrix is zero.
pub fn cka(e1: &EmbeddingSet, e2: &EmbeddingSet) -> Result<f64> {
    check_aligned(e1, e2)?;
    let x = center_columns(&e1.f);
    let y = center_columns(&e2.f);
    let cross = frob_sq(&y.t().dot(&x));
    let nx = frob_sq(&x.t().dot(&x)).sqrt();
    let ny = frob_sq(&y.t().dot(&y)).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    Ok(cross / (nx * ny))
}

fn center_columns(f: &Array2<f64>) -> Array2<f64> {
    let mean = f.mean_axis(Axis(0)).unwrap();
    f - &mean.insert_axis(Axis(0))
}

fn frob_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

fn cosine_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> Option<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(1.0 - a.dot(&b) / (na * nb))
}

/// Pearson correlation of two equal-length vectors; errors on a constant
/// vector (undefined correlation).
fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument(
            "constant distance vector: Pearson correlation undefined".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Distance vectors over a list of unordered node pairs, excluding (with a
/// warning) pairs where either set has a zero-norm row.
fn paired_distances(
    e1: &EmbeddingSet,
    e2: &EmbeddingSet,
    pairs: &[(usize, usize)],
) -> (Vec<f64>, Vec<f64>) {
    let mut d1 = Vec::with_capacity(pairs.len());
    let mut d2 = Vec::with_capacity(pairs.len());
    let mut skipped = 0usize;
    for &(i, j) in pairs {
        match (
            cosine_distance(e1.f.row(i), e1.f.row(j)),
            cosine_distance(e2.f.row(i), e2.f.row(j)),
        ) {
            (Some(a), Some(b)) => {
                d1.push(a);
                d2.push(b);
            }
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        eprintln!("warning: mantel skipped {skipped} pairs with zero-norm rows");
    }
    (d1, d2)
}

/// Pearson correlation of all strictly-upper-triangle pairwise cosine
/// distances of the two sets.
pub fn mantel_global(e1: &EmbeddingSet, e2: &EmbeddingSet) -> Result<f64> {
    check_aligned(e1, e2)?;
    let n = e1.n();
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push((i, j));
        }
    }
    let (d1, d2) = paired_distances(e1, e2, &pairs);
    pearson(&d1, &d2)
}

/// Mantel test restricted to cosine distances over the given edges, each
/// unordered pair counted once.
pub fn mantel_local(e1: &EmbeddingSet, e2: &EmbeddingSet, edges: &[(usize, usize)]) -> Result<f64> {
    check_aligned(e1, e2)?;
    let mut pairs: Vec<(usize, usize)> = edges
        .iter()
        .filter(|&&(s, d)| s != d)
        .map(|&(s, d)| (s.min(d), s.max(d)))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    if pairs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "mantel_local needs >= 3 distinct unordered pairs, got {}",
            pairs.len()
        )));
    }
    let (d1, d2) = paired_distances(e1, e2, &pairs);
    if d1.len() < 3 {
        return Err(Error::InvalidArgument("fewer than 3 usable pairs after exclusions".into()));
    }
    pearson(&d1, &d2)
}

/// One row of a similarity report: all three metrics for one student.
#[derive(Debug, Clone)]
pub struct SimilarityRow {
    pub student: String,
    pub cka: f64,
    pub mantel_global: f64,
    pub mantel_local: f64,
}

pub fn similarity_rows(
    teacher: &EmbeddingSet,
    students: &[EmbeddingSet],
    edges: &[(usize, usize)],
) -> Result<Vec<SimilarityRow>> {
    students
        .iter()
        .map(|s| {
            Ok(SimilarityRow {
                student: s.source.clone(),
                cka: cka(teacher, s)?,
                mantel_global: mantel_global(teacher, s)?,
                mantel_local: mantel_local(teacher, s, edges)?,
            })
        })
        .collect()
}

pub fn similarity_csv(rows: &[SimilarityRow]) -> String {
    let mut out = String::from("student,cka,mantel_global,mantel_local\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.student, r.cka, r.mantel_global, r.mantel_local
        ));
    }
    out
}

// ---- embedding export format: header "n d", then "node_id v1 .. vd" ----

pub fn format_embeddings(e: &EmbeddingSet) -> String {
    let mut out = format!("{} {}\n", e.n(), e.f.ncols());
    for (id, row) in e.node_ids.iter().zip(e.f.rows()) {
        out.push_str(id);
        for v in row {
            out.push_str(&format!(" {v:?}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(text: &str, source: &str) -> Result<EmbeddingSet> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty embedding file".into() })?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 2 {
        return Err(Error::Parse { line: 1, msg: "expected header 'n d'".into() });
    }
    let n: usize = toks[0].parse().map_err(|_| Error::Parse { line: 1, msg: "bad n".into() })?;
    let d: usize = toks[1].parse().map_err(|_| Error::Parse { line: 1, msg: "bad d".into() })?;
    let mut f = Array2::zeros((n, d));
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines.next().ok_or_else(|| Error::Parse {
            line: i + 2,
            msg: format!("expected {n} embedding rows"),
        })?;
        let mut toks = line.split_whitespace();
        let id = toks
            .next()
            .ok_or_else(|| Error::Parse { line: i + 2, msg: "missing node id".into() })?;
        ids.push(id.to_string());
        for j in 0..d {
            let t = toks.next().ok_or_else(|| Error::Parse {
                line: i + 2,
                msg: format!("expected {d} values"),
            })?;
            f[[i, j]] = t
                .parse()
                .map_err(|_| Error::Parse { line: i + 2, msg: format!("bad value '{t}'") })?;
        }
    }
    EmbeddingSet::new(f, ids, source)
}
