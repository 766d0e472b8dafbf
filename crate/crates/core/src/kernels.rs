//! Pairwise similarity kernels, in plain and differentiable form.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    /// Squared euclidean distance |f_i - f_j|^2.
    Euclidean,
    /// Dot product f_i . f_j.
    Linear,
    /// (f_i . f_j + c)^deg.
    Polynomial { c: f64, deg: i32 },
    /// exp(-|f_i - f_j|^2 / (2 sigma)).
    Rbf { sigma: f64 },
    /// Dot product of row-l2-normalized features.
    Cosine,
}

impl Kernel {
    pub fn validate(&self) -> crate::error::Result<()> {
        match *self {
            Kernel::Polynomial { deg, .. } if deg < 1 => Err(crate::error::Error::InvalidArgument(
                "polynomial kernel degree must be >= 1".into(),
            )),
            Kernel::Rbf { sigma } if sigma <= 0.0 => Err(crate::error::Error::InvalidArgument(
                "rbf bandwidth must be positive".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Kernel value for a single pair of feature vectors.
    pub fn apply(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Euclidean => sqdist(a, b),
            Kernel::Linear => dot(a, b),
            Kernel::Polynomial { c, deg } => (dot(a, b) + c).powi(deg),
            Kernel::Rbf { sigma } => (-sqdist(a, b) / (2.0 * sigma)).exp(),
            Kernel::Cosine => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(a, b) / (na * nb)
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Full n x n kernel matrix on plain values. Parallelized over rows when the
/// `parallel` feature is enabled; both paths produce identical results.
pub fn kernel_pairwise(f: &Array2<f64>, kernel: Kernel) -> Array2<f64> {
    #[cfg(feature = "parallel")]
    {
        kernel_pairwise_par(f, kernel)
    }
    #[cfg(not(feature = "parallel"))]
    {
        kernel_pairwise_seq(f, kernel)
    }
}

pub fn kernel_pairwise_seq(f: &Array2<f64>, kernel: Kernel) -> Array2<f64> {
    let n = f.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let ri = f.row(i);
        let ri = ri.as_slice().unwrap();
        for j in 0..n {
            let rj = f.row(j);
            out[[i, j]] = kernel.apply(ri, rj.as_slice().unwrap());
        }
    }
    out
}

#[cfg(feature = "parallel")]
pub fn kernel_pairwise_par(f: &Array2<f64>, kernel: Kernel) -> Array2<f64> {
    use rayon::prelude::*;
    let n = f.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ri = f.row(i);
            let ri = ri.as_slice().unwrap();
            (0..n)
                .map(|j| kernel.apply(ri, f.row(j).as_slice().unwrap()))
                .collect()
        })
        .collect();
    let mut out = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

/// Differentiable n x n pairwise kernel matrix on the tape.
pub fn pairwise_var(tape: &Tape, f: Var, kernel: Kernel) -> Var {
    match kernel {
        Kernel::Linear => {
            let ft = tape.transpose(f);
            tape.matmul(f, ft)
        }
        Kernel::Cosine => {
            let n = tape.row_l2_normalize(f);
            let nt = tape.transpose(n);
            tape.matmul(n, nt)
        }
        Kernel::Polynomial { c, deg } => {
            let gram = tape.matmul(f, tape.transpose(f));
            let shifted = tape.add(gram, tape.constant(Mat::from_elem((f.rows, f.rows), c)));
            tape.powi(shifted, deg)
        }
        Kernel::Euclidean => pairwise_sqdist_var(tape, f),
        Kernel::Rbf { sigma } => {
            let d = pairwise_sqdist_var(tape, f);
            tape.exp(tape.mul_scalar(d, -1.0 / (2.0 * sigma)))
        }
    }
}

/// |f_i|^2 + |f_j|^2 - 2 f_i.f_j as a differentiable matrix.
fn pairwise_sqdist_var(tape: &Tape, f: Var) -> Var {
    let n = f.rows;
    let gram = tape.matmul(f, tape.transpose(f));
    let sq = tape.row_sum(tape.elementwise_mul(f, f)); // n x 1
    let ones_row = tape.constant(Mat::from_elem((1, n), 1.0));
    let a = tape.matmul(sq, ones_row); // n x n, row norms down columns
    let sum = tape.add(a, tape.transpose(a));
    tape.sub(sum, tape.mul_scalar(gram, 2.0))
}

/// Differentiable edge-wise kernel values: column vector k with
/// k[e] = K(f[src_e], f[dst_e]).
pub fn edgewise_var(tape: &Tape, f: Var, srcs: &[usize], dsts: &[usize], kernel: Kernel) -> Var {
    let a = tape.gather_rows(f, srcs);
    let b = tape.gather_rows(f, dsts);
    match kernel {
        Kernel::Euclidean => {
            let d = tape.sub(a, b);
            tape.row_sum(tape.elementwise_mul(d, d))
        }
        Kernel::Linear => tape.row_sum(tape.elementwise_mul(a, b)),
        Kernel::Cosine => {
            let na = tape.row_l2_normalize(a);
            let nb = tape.row_l2_normalize(b);
            tape.row_sum(tape.elementwise_mul(na, nb))
        }
        Kernel::Polynomial { c, deg } => {
            let g = tape.row_sum(tape.elementwise_mul(a, b));
            let shifted = tape.add(g, tape.constant(Mat::from_elem((srcs.len(), 1), c)));
            tape.powi(shifted, deg)
        }
        Kernel::Rbf { sigma } => {
            let d = tape.sub(a, b);
            let sq = tape.row_sum(tape.elementwise_mul(d, d));
            tape.exp(tape.mul_scalar(sq, -1.0 / (2.0 * sigma)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kernel_point_values() {
        assert!((Kernel::Rbf { sigma: 1.0 }.apply(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(Kernel::Linear.apply(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(Kernel::Polynomial { c: 1.0, deg: 2 }.apply(&[1.0, 1.0], &[1.0, 1.0]), 9.0);
    }

    #[test]
    fn pairwise_var_matches_plain_all_kernels() {
        let f = array![
            [0.3, -1.2, 0.5],
            [1.0, 0.0, -0.7],
            [0.1, 0.9, 0.2],
            [-0.4, 0.6, 1.1]
        ];
        for k in [
            Kernel::Euclidean,
            Kernel::Linear,
            Kernel::Polynomial { c: 1.0, deg: 2 },
            Kernel::Rbf { sigma: 1.0 },
            Kernel::Cosine,
        ] {
            let tape = Tape::new();
            let v = pairwise_var(&tape, tape.constant(f.clone()), k);
            let plain = kernel_pairwise_seq(&f, k);
            let tv = tape.value(v);
            for i in 0..4 {
                for j in 0..4 {
                    assert!(
                        (tv[[i, j]] - plain[[i, j]]).abs() < 1e-10,
                        "{k:?} mismatch at ({i},{j}): {} vs {}",
                        tv[[i, j]],
                        plain[[i, j]]
                    );
                }
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential() {
        let f = Array2::from_shape_fn((23, 5), |(i, j)| ((i * 7 + j * 3) as f64).sin());
        for k in [Kernel::Euclidean, Kernel::Rbf { sigma: 0.5 }, Kernel::Cosine] {
            assert_eq!(kernel_pairwise_seq(&f, k), kernel_pairwise_par(&f, k));
        }
    }

    #[test]
    fn edgewise_matches_pointwise() {
        let f = array![[0.5, 1.0], [-0.2, 0.3], [1.5, -0.8]];
        let srcs = [0usize, 1, 2, 0];
        let dsts = [1usize, 2, 0, 2];
        for k in [
            Kernel::Euclidean,
            Kernel::Linear,
            Kernel::Polynomial { c: 0.5, deg: 3 },
            Kernel::Rbf { sigma: 2.0 },
            Kernel::Cosine,
        ] {
            let tape = Tape::new();
            let v = tape.value(edgewise_var(&tape, tape.constant(f.clone()), &srcs, &dsts, k));
            for (e, (&s, &d)) in srcs.iter().zip(&dsts).enumerate() {
                let expect = k.apply(f.row(s).as_slice().unwrap(), f.row(d).as_slice().unwrap());
                assert!((v[[e, 0]] - expect).abs() < 1e-12, "{k:?} edge {e}");
            }
        }
    }
}
