//! One-hidden-layer perceptrons, the only learned nonlinearity in the model.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::matrix::Matrix;

/// `y = relu(x W1ᵀ + b1) W2ᵀ + b2`, applied row-wise.
///
/// Generic over the storage so the same layout holds parameter values (`Mlp<Matrix>`)
/// and their handles on a tape (`Mlp<Var>`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> Mlp<T> {
    pub fn parts(&self) -> [(&'static str, &T); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn parts_mut(&mut self) -> [&mut T; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Mlp<U> {
        Mlp { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }
}

impl Mlp<Matrix> {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn init<R: Rng>(rng: &mut R, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp {
            w1: uniform(rng, d_hidden, d_in, 1.0 / (d_in as f64).sqrt()),
            b1: Matrix::zeros(1, d_hidden),
            w2: uniform(rng, d_out, d_hidden, 1.0 / (d_hidden as f64).sqrt()),
            b2: Matrix::zeros(1, d_out),
        }
    }

    /// Identity map on `d` dimensions (hidden width `2d`, `relu(x) - relu(-x) = x`).
    pub fn identity(d: usize) -> Self {
        let eye = Matrix::identity(d);
        let w1 = Matrix::vcat(&[&eye, &eye.scaled(-1.0)]);
        let w2 = Matrix::hcat(&[&eye, &eye.scaled(-1.0)]);
        Mlp { w1, b1: Matrix::zeros(1, 2 * d), w2, b2: Matrix::zeros(1, d) }
    }

    pub fn d_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.rows()
    }

    /// Plain evaluation of one input row.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let input = Matrix::row_vector(x.to_vec());
        let mut h = Matrix::zeros(1, self.w1.rows());
        crate::matrix::gemm(1.0, &input, false, &self.w1, true, 0.0, &mut h);
        for (v, b) in h.as_mut_slice().iter_mut().zip(self.b1.as_slice()) {
            *v = (*v + b).max(0.0);
        }
        let mut y = Matrix::zeros(1, self.w2.rows());
        crate::matrix::gemm(1.0, &h, false, &self.w2, true, 0.0, &mut y);
        y.as_slice().iter().zip(self.b2.as_slice()).map(|(v, b)| v + b).collect()
    }
}

pub(crate) fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..=scale))
}

/// Records the forward pass of `mlp` on every row of `x`.
pub fn mlp_forward(tape: &mut Tape, mlp: &Mlp<Var>, x: Var) -> Result<Var> {
    let h = tape.matmul_nt(x, mlp.w1)?;
    let h = tape.add_bias(h, mlp.b1)?;
    let h = tape.relu(h);
    let y = tape.matmul_nt(h, mlp.w2)?;
    tape.add_bias(y, mlp.b2)
}
