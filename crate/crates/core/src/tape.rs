//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records forward operations whenever any input requires a
//! gradient; [`Tape::backward`] replays the recorded rules in reverse and
//! accumulates gradients into every leaf created with `requires_grad`.
//! All values are 2-D row-major matrices; scalars are 1x1.

use std::cell::RefCell;

use ndarray::{concatenate, Array2, Axis};

/// Dense matrix of f64, the only runtime value type.
pub type Mat = Array2<f64>;

/// Handle to a tape node. Cheap to copy; only valid for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Var {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

type BackwardFn = Box<dyn Fn(&Mat) -> Vec<(usize, Mat)>>;

struct Node {
    value: Mat,
    needs_grad: bool,
    is_leaf: bool,
    backward: Option<BackwardFn>,
    grad: Option<Mat>,
}

/// Append-only operation record. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, needs_grad: bool, is_leaf: bool, backward: Option<BackwardFn>) -> Var {
        let (rows, cols) = (value.nrows(), value.ncols());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            needs_grad,
            is_leaf,
            backward,
            grad: None,
        });
        Var {
            id: nodes.len() - 1,
            rows,
            cols,
        }
    }

    /// Insert a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, requires_grad, true, None)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&self, value: Mat) -> Var {
        self.push(value, false, true, None)
    }

    pub fn scalar_const(&self, v: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), v))
    }

    /// Copy of the node's forward value.
    pub fn value(&self, v: Var) -> Mat {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        assert!(v.is_scalar(), "scalar() called on {}x{} tensor", v.rows, v.cols);
        self.nodes.borrow()[v.id].value[[0, 0]]
    }

    /// Gradient accumulated on `v` by the last `backward` call, if any.
    pub fn grad(&self, v: Var) -> Option<Mat> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].needs_grad
    }

    /// Cut the gradient flow: a fresh constant with the same value.
    pub fn detach(&self, v: Var) -> Var {
        let val = self.value(v);
        self.constant(val)
    }

    fn record(&self, value: Mat, parents: &[Var], backward: BackwardFn) -> Var {
        let needs = parents.iter().any(|p| self.needs(*p));
        if needs {
            self.push(value, true, false, Some(backward))
        } else {
            self.push(value, false, false, None)
        }
    }

    /// Reverse sweep from a scalar loss. Consumes the recorded rules; leaf
    /// gradients stay readable through [`Tape::grad`].
    pub fn backward(&self, loss: Var) {
        assert!(loss.is_scalar(), "backward requires a scalar loss, got {}x{}", loss.rows, loss.cols);
        assert!(!self.is_empty(), "backward on empty tape");
        {
            let mut nodes = self.nodes.borrow_mut();
            if !nodes[loss.id].needs_grad {
                return; // nothing requires grad anywhere upstream
            }
            nodes[loss.id].grad = Some(Mat::from_elem((1, 1), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let (grad, bw) = {
                let mut nodes = self.nodes.borrow_mut();
                let node = &mut nodes[id];
                if node.grad.is_none() || node.backward.is_none() {
                    continue;
                }
                (node.grad.clone().unwrap(), node.backward.take().unwrap())
            };
            let contributions = bw(&grad);
            let mut nodes = self.nodes.borrow_mut();
            for (pid, g) in contributions {
                let parent = &mut nodes[pid];
                if !parent.needs_grad {
                    continue;
                }
                match &mut parent.grad {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // non-leaf grads are scratch space; drop them
        let mut nodes = self.nodes.borrow_mut();
        for node in nodes.iter_mut() {
            if !node.is_leaf {
                node.grad = None;
            }
        }
    }

    // ---- forward ops ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul: {}x{} . {}x{}", a.rows, a.cols, b.rows, b.cols);
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.dot(&bv);
        self.record(out, &[a, b], Box::new(move |g| {
            vec![(a.id, g.dot(&bv.t())), (b.id, av.t().dot(g))]
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
        let out = self.value(a) + self.value(b);
        self.record(out, &[a, b], Box::new(move |g| {
            vec![(a.id, g.clone()), (b.id, g.clone())]
        }))
    }

    /// a + broadcast row vector b (1 x cols).
    pub fn add_row_bias(&self, a: Var, b: Var) -> Var {
        assert!(b.rows == 1 && b.cols == a.cols, "add_row_bias: bias 1x{} vs matrix {}x{}", b.cols, a.rows, a.cols);
        let out = self.value(a) + &self.value(b);
        self.record(out, &[a, b], Box::new(move |g| {
            let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
            vec![(a.id, g.clone()), (b.id, gb)]
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
        let out = self.value(a) - self.value(b);
        self.record(out, &[a, b], Box::new(move |g| {
            vec![(a.id, g.clone()), (b.id, -g)]
        }))
    }

    pub fn mul_scalar(&self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.record(out, &[a], Box::new(move |g| vec![(a.id, g * k)]))
    }

    pub fn elementwise_mul(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "elementwise_mul: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
        let (av, bv) = (self.value(a), self.value(b));
        let out = &av * &bv;
        self.record(out, &[a, b], Box::new(move |g| {
            vec![(a.id, g * &bv), (b.id, g * &av)]
        }))
    }

    /// out = s * a, with s a 1x1 tensor participating in differentiation.
    pub fn scale_by_scalar(&self, a: Var, s: Var) -> Var {
        assert!(s.is_scalar(), "scale_by_scalar: scale must be 1x1");
        let (av, sv) = (self.value(a), self.scalar(s));
        let out = &av * sv;
        self.record(out, &[a, s], Box::new(move |g| {
            let gs = (g * &av).sum();
            vec![(a.id, g * sv), (s.id, Mat::from_elem((1, 1), gs))]
        }))
    }

    /// Scale row k of `a` by the constant `coeffs[k]`.
    pub fn scale_rows_const(&self, a: Var, coeffs: &[f64]) -> Var {
        assert_eq!(coeffs.len(), a.rows, "scale_rows_const: {} coeffs for {} rows", coeffs.len(), a.rows);
        let mut out = self.value(a);
        for (k, mut row) in out.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|x| x * coeffs[k]);
        }
        let cs = coeffs.to_vec();
        self.record(out, &[a], Box::new(move |g| {
            let mut ga = g.clone();
            for (k, mut row) in ga.rows_mut().into_iter().enumerate() {
                row.mapv_inplace(|x| x * cs[k]);
            }
            vec![(a.id, ga)]
        }))
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.max(0.0));
        self.record(out, &[a], Box::new(move |g| {
            vec![(a.id, g * &av.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))]
        }))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let outc = out.clone();
        self.record(out, &[a], Box::new(move |g| vec![(a.id, g * &outc)]))
    }

    pub fn log(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(f64::ln);
        self.record(out, &[a], Box::new(move |g| vec![(a.id, g / &av)]))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).mapv(stable_sigmoid);
        let outc = out.clone();
        self.record(out, &[a], Box::new(move |g| {
            vec![(a.id, g * &outc.mapv(|s| s * (1.0 - s)))]
        }))
    }

    /// ln(1 + e^x), computed as max(x,0) + ln1p(e^{-|x|}).
    pub fn softplus(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.record(out, &[a], Box::new(move |g| {
            vec![(a.id, g * &av.mapv(stable_sigmoid))]
        }))
    }

    /// Elementwise integer power, deg >= 1.
    pub fn powi(&self, a: Var, deg: i32) -> Var {
        assert!(deg >= 1, "powi: degree must be >= 1");
        let av = self.value(a);
        let out = av.mapv(|x| x.powi(deg));
        self.record(out, &[a], Box::new(move |g| {
            vec![(a.id, g * &av.mapv(|x| deg as f64 * x.powi(deg - 1)))]
        }))
    }

    pub fn row_softmax(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = row_softmax_mat(&av);
        let outc = out.clone();
        self.record(out, &[a], Box::new(move |g| {
            // per row: s * (g - <g, s>)
            let dots = (g * &outc).sum_axis(Axis(1)).insert_axis(Axis(1));
            vec![(a.id, &outc * &(g - &dots))]
        }))
    }

    pub fn row_log_softmax(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = row_log_softmax_mat(&av);
        let soft = out.mapv(f64::exp);
        self.record(out, &[a], Box::new(move |g| {
            let rowsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
            vec![(a.id, g - &(&soft * &rowsum))]
        }))
    }

    /// Normalize each row to unit l2 norm; all-zero rows stay zero.
    pub fn row_l2_normalize(&self, a: Var) -> Var {
        let av = self.value(a);
        let norms: Vec<f64> = av
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let mut out = av.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            if norms[i] > 0.0 {
                row.mapv_inplace(|x| x / norms[i]);
            }
        }
        let outc = out.clone();
        self.record(out, &[a], Box::new(move |g| {
            let mut ga = Mat::zeros(g.raw_dim());
            for i in 0..g.nrows() {
                if norms[i] == 0.0 {
                    continue;
                }
                let y = outc.row(i);
                let gr = g.row(i);
                let dot = gr.dot(&y);
                for j in 0..g.ncols() {
                    ga[[i, j]] = (gr[j] - y[j] * dot) / norms[i];
                }
            }
            vec![(a.id, ga)]
        }))
    }

    pub fn row_sum(&self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let cols = a.cols;
        self.record(out, &[a], Box::new(move |g| {
            let mut ga = Mat::zeros((g.nrows(), cols));
            for i in 0..g.nrows() {
                ga.row_mut(i).fill(g[[i, 0]]);
            }
            vec![(a.id, ga)]
        }))
    }

    pub fn row_mean(&self, a: Var) -> Var {
        let s = self.row_sum(a);
        self.mul_scalar(s, 1.0 / a.cols as f64)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.record(out, &[a], Box::new(move |g| vec![(a.id, g.t().to_owned())]))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.rows, b.rows, "concat_cols: row mismatch {} vs {}", a.rows, b.rows);
        let out = concatenate![Axis(1), self.value(a), self.value(b)];
        let ac = a.cols;
        self.record(out, &[a, b], Box::new(move |g| {
            let ga = g.slice(ndarray::s![.., ..ac]).to_owned();
            let gb = g.slice(ndarray::s![.., ac..]).to_owned();
            vec![(a.id, ga), (b.id, gb)]
        }))
    }

    /// out[k] = a[index[k]] rowwise.
    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Var {
        for &i in index {
            assert!(i < a.rows, "gather_rows: index {} out of range for {} rows", i, a.rows);
        }
        let av = self.value(a);
        let mut out = Mat::zeros((index.len(), a.cols));
        for (k, &i) in index.iter().enumerate() {
            out.row_mut(k).assign(&av.row(i));
        }
        let idx = index.to_vec();
        let rows = a.rows;
        self.record(out, &[a], Box::new(move |g| {
            let mut ga = Mat::zeros((rows, g.ncols()));
            for (k, &i) in idx.iter().enumerate() {
                let mut r = ga.row_mut(i);
                r += &g.row(k);
            }
            vec![(a.id, ga)]
        }))
    }

    /// out[r] = sum of a rows k with index[k] == r; out has out_rows rows.
    pub fn scatter_sum(&self, a: Var, index: &[usize], out_rows: usize) -> Var {
        assert_eq!(index.len(), a.rows, "scatter_sum: index length {} vs {} rows", index.len(), a.rows);
        for &i in index {
            assert!(i < out_rows, "scatter_sum: index {} out of range for {} output rows", i, out_rows);
        }
        let av = self.value(a);
        let mut out = Mat::zeros((out_rows, a.cols));
        for (k, &r) in index.iter().enumerate() {
            let mut row = out.row_mut(r);
            row += &av.row(k);
        }
        let idx = index.to_vec();
        self.record(out, &[a], Box::new(move |g| {
            let mut ga = Mat::zeros((idx.len(), g.ncols()));
            for (k, &r) in idx.iter().enumerate() {
                ga.row_mut(k).assign(&g.row(r));
            }
            vec![(a.id, ga)]
        }))
    }

    /// Mean of rows per segment id; empty segments yield zero rows.
    pub fn segment_mean(&self, a: Var, segment_ids: &[usize], num_segments: usize) -> Var {
        assert_eq!(segment_ids.len(), a.rows, "segment_mean: ids length {} vs {} rows", segment_ids.len(), a.rows);
        let mut counts = vec![0usize; num_segments];
        for &s in segment_ids {
            assert!(s < num_segments, "segment_mean: segment {} out of range", s);
            counts[s] += 1;
        }
        let av = self.value(a);
        let mut out = Mat::zeros((num_segments, a.cols));
        for (k, &s) in segment_ids.iter().enumerate() {
            let mut row = out.row_mut(s);
            row += &av.row(k);
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                out.row_mut(s).mapv_inplace(|x| x / c as f64);
            }
        }
        let ids = segment_ids.to_vec();
        self.record(out, &[a], Box::new(move |g| {
            let mut ga = Mat::zeros((ids.len(), g.ncols()));
            for (k, &s) in ids.iter().enumerate() {
                let scale = 1.0 / counts[s] as f64;
                ga.row_mut(k).assign(&(&g.row(s) * scale));
            }
            vec![(a.id, ga)]
        }))
    }

    /// Log-softmax of a column vector within each segment.
    pub fn segment_log_softmax(&self, a: Var, segment_ids: &[usize], num_segments: usize) -> Var {
        assert_eq!(a.cols, 1, "segment_log_softmax: expects a column vector");
        assert_eq!(segment_ids.len(), a.rows, "segment_log_softmax: ids length mismatch");
        let av = self.value(a);
        let mut maxes = vec![f64::NEG_INFINITY; num_segments];
        for (k, &s) in segment_ids.iter().enumerate() {
            assert!(s < num_segments, "segment_log_softmax: segment {} out of range", s);
            maxes[s] = maxes[s].max(av[[k, 0]]);
        }
        let mut sums = vec![0.0f64; num_segments];
        for (k, &s) in segment_ids.iter().enumerate() {
            sums[s] += (av[[k, 0]] - maxes[s]).exp();
        }
        let mut out = Mat::zeros((a.rows, 1));
        for (k, &s) in segment_ids.iter().enumerate() {
            out[[k, 0]] = av[[k, 0]] - maxes[s] - sums[s].ln();
        }
        let soft = out.mapv(f64::exp);
        let ids = segment_ids.to_vec();
        self.record(out, &[a], Box::new(move |g| {
            let mut seg_g = vec![0.0f64; num_segments];
            for (k, &s) in ids.iter().enumerate() {
                seg_g[s] += g[[k, 0]];
            }
            let mut ga = Mat::zeros((ids.len(), 1));
            for (k, &s) in ids.iter().enumerate() {
                ga[[k, 0]] = g[[k, 0]] - soft[[k, 0]] * seg_g[s];
            }
            vec![(a.id, ga)]
        }))
    }

    /// Batch normalization over the row axis with the given statistics.
    /// `stats = None` uses the batch's own mean/variance (training mode) and
    /// differentiates through them; `Some((mean, var))` treats the statistics
    /// as constants (evaluation mode).
    pub fn batch_norm_rows(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Var {
        assert!(gamma.rows == 1 && gamma.cols == x.cols, "batch_norm_rows: gamma shape");
        assert!(beta.rows == 1 && beta.cols == x.cols, "batch_norm_rows: beta shape");
        let xv = self.value(x);
        let n = x.rows as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let m: Vec<f64> = xv.mean_axis(Axis(0)).unwrap().to_vec();
                let v: Vec<f64> = (0..x.cols)
                    .map(|j| xv.column(j).iter().map(|&a| (a - m[j]).powi(2)).sum::<f64>() / n)
                    .collect();
                (m, v)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for j in 0..x.cols {
            let (m, is) = (mean[j], inv_std[j]);
            xhat.column_mut(j).mapv_inplace(|a| (a - m) * is);
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = xhat.clone();
        for j in 0..x.cols {
            let (g_, b_) = (gv[[0, j]], bv[[0, j]]);
            out.column_mut(j).mapv_inplace(|a| a * g_ + b_);
        }
        let batch_stats = stats.is_none();
        self.record(out, &[x, gamma, beta], Box::new(move |g| {
            let dgamma = {
                let mut d = Mat::zeros((1, g.ncols()));
                for j in 0..g.ncols() {
                    d[[0, j]] = g.column(j).iter().zip(xhat.column(j)).map(|(a, b)| a * b).sum();
                }
                d
            };
            let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut dx = Mat::zeros(g.raw_dim());
            let rows = g.nrows() as f64;
            for j in 0..g.ncols() {
                let gcol = g.column(j);
                let scale = gv[[0, j]] * inv_std[j];
                if batch_stats {
                    let mean_g: f64 = gcol.sum() / rows;
                    let mean_gx: f64 = gcol.iter().zip(xhat.column(j)).map(|(a, b)| a * b).sum::<f64>() / rows;
                    for i in 0..g.nrows() {
                        dx[[i, j]] = scale * (gcol[i] - mean_g - xhat[[i, j]] * mean_gx);
                    }
                } else {
                    for i in 0..g.nrows() {
                        dx[[i, j]] = scale * gcol[i];
                    }
                }
            }
            vec![(x.id, dx), (gamma.id, dgamma), (beta.id, dbeta)]
        }))
    }

    /// Mean squared error over all entries, a scalar.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "mse: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
        let (av, bv) = (self.value(a), self.value(b));
        let diff = &av - &bv;
        let n = (a.rows * a.cols) as f64;
        let out = Mat::from_elem((1, 1), diff.mapv(|x| x * x).sum() / n);
        self.record(out, &[a, b], Box::new(move |g| {
            let scale = 2.0 * g[[0, 0]] / n;
            let d = &av - &bv;
            vec![(a.id, &d * scale), (b.id, &d * (-scale))]
        }))
    }

    pub fn reduce_sum(&self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        let shape = (a.rows, a.cols);
        self.record(out, &[a], Box::new(move |g| {
            vec![(a.id, Mat::from_elem(shape, g[[0, 0]]))]
        }))
    }

    pub fn reduce_mean(&self, a: Var) -> Var {
        let s = self.reduce_sum(a);
        self.mul_scalar(s, 1.0 / (a.rows * a.cols) as f64)
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row softmax with max subtraction, on plain values.
pub fn row_softmax_mat(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

/// Row log-softmax with max subtraction, on plain values.
pub fn row_log_softmax_mat(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
        row.mapv_inplace(|x| x - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn row_softmax_symmetric() {
        let t = Tape::new();
        let x = t.leaf(array![[0.0, 0.0]], false);
        let s = t.row_softmax(x);
        let v = t.value(s);
        assert_eq!(v, array![[0.5, 0.5]]);
    }

    #[test]
    fn scatter_sum_basic() {
        let t = Tape::new();
        let x = t.leaf(array![[1.0], [2.0], [3.0]], false);
        let s = t.scatter_sum(x, &[0, 0, 1], 2);
        assert_eq!(t.value(s), array![[3.0], [3.0]]);
    }

    #[test]
    fn row_l2_normalize_hand() {
        let t = Tape::new();
        let x = t.leaf(array![[3.0, 4.0]], false);
        let y = t.row_l2_normalize(x);
        let v = t.value(y);
        assert!((v[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((v[[0, 1]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn grad_of_reduce_sum_is_ones() {
        let t = Tape::new();
        let x = t.leaf(array![[1.0, -2.0], [0.5, 3.0]], true);
        let l = t.reduce_sum(x);
        t.backward(l);
        assert_eq!(t.grad(x).unwrap(), Mat::from_elem((2, 2), 1.0));
    }

    #[test]
    fn grad_of_mse_at_minimum_is_zero() {
        let t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]], true);
        let x0 = t.detach(x);
        let l = t.mse(x, x0);
        t.backward(l);
        assert_eq!(t.grad(x).unwrap(), Mat::zeros((1, 2)));
    }

    #[test]
    fn grad_of_softmax_row_sums_is_zero() {
        let t = Tape::new();
        let x = t.leaf(array![[0.3, -1.2, 2.0]], true);
        let s = t.row_softmax(x);
        let l = t.reduce_sum(s);
        t.backward(l);
        let g = t.grad(x).unwrap();
        for &v in g.iter() {
            assert!(v.abs() < 1e-12, "expected zero grad, got {v}");
        }
    }

    #[test]
    fn softmax_stable_for_large_inputs() {
        let t = Tape::new();
        let x = t.leaf(array![[1e4, -1e4, 0.0]], false);
        let s = t.value(t.row_softmax(x));
        let ls = t.value(t.row_log_softmax(x));
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(ls.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_norm_single_row_is_finite() {
        let t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0, 3.0]], true);
        let g = t.leaf(Mat::from_elem((1, 3), 1.0), true);
        let b = t.leaf(Mat::zeros((1, 3)), true);
        let y = t.batch_norm_rows(x, g, b, 1e-5, None);
        assert!(t.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    #[should_panic(expected = "backward requires a scalar loss")]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]], true);
        let y = t.relu(x);
        t.backward(y);
    }

    #[test]
    fn forward_values_deterministic() {
        let run = || {
            let t = Tape::new();
            let x = t.leaf(array![[0.1, 0.7], [-0.3, 0.2]], true);
            let w = t.leaf(array![[1.0, -1.0], [0.5, 2.0]], true);
            let h = t.relu(t.matmul(x, w));
            t.value(t.row_softmax(h))
        };
        assert_eq!(run(), run());
    }
}
