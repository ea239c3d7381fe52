use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Affine map `y = W x + b` with `W` stored as `[out x in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    weight: Matrix,
    bias: Vec<f64>,
}

/// Gradients produced by [`LinearLayer::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub input: Matrix,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(
                "LinearLayer::new",
                format!("bias of length {}", weight.rows()),
                format!("bias of length {}", bias.len()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Weights drawn from `N(0, (1/√in)²)`, biases zero.
    pub fn gaussian<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (in_dim.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Matrix::new(out_dim, in_dim, data).expect("sized"),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    /// Weight then bias, flattened row-major.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.weight.as_slice().to_vec();
        p.extend_from_slice(&self.bias);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(
                "LinearLayer::set_params",
                self.param_count(),
                params.len(),
            ));
        }
        let split = self.weight.as_slice().len();
        self.weight.as_mut_slice().copy_from_slice(&params[..split]);
        self.bias.copy_from_slice(&params[split..]);
        Ok(())
    }

    /// Row `i` of the output equals `W · x_i + b`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "linear_forward",
                format!("input with {} columns", self.in_dim()),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
        let mut out = x.matmul_t(&self.weight)?;
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// `dX = dY·W`, `dW = dYᵀ·X`, `db = Σ_rows dY`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<LinearGrads> {
        if x.cols() != self.in_dim() || dy.cols() != self.out_dim() || x.rows() != dy.rows() {
            return Err(Error::shape(
                "linear_backward",
                format!(
                    "X: Bx{}, dY: Bx{} with equal B",
                    self.in_dim(),
                    self.out_dim()
                ),
                format!(
                    "X: {}x{}, dY: {}x{}",
                    x.rows(),
                    x.cols(),
                    dy.rows(),
                    dy.cols()
                ),
            ));
        }
        Ok(LinearGrads {
            input: dy.matmul(&self.weight)?,
            weight: dy.t_matmul(x)?,
            bias: dy.column_sums(),
        })
    }
}

impl LinearGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut g = self.weight.as_slice().to_vec();
        g.extend_from_slice(&self.bias);
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_check;
    use crate::rng;

    #[test]
    fn identity_weight_passes_input_through() {
        let layer = LinearLayer::new(Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), x);
    }

    #[test]
    fn zero_weight_emits_bias() {
        let layer = LinearLayer::new(Matrix::zeros(1, 3), vec![3.0]).unwrap();
        let x = Matrix::from_rows(&[[1.0, -5.0, 2.0], [0.3, 0.2, 9.0]]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.as_slice(), &[3.0, 3.0]);
    }

    #[test]
    fn forward_matches_triple_loop() {
        let w = Matrix::from_rows(&[[1.0, 1.0], [1.0, -1.0]]).unwrap();
        let layer = LinearLayer::new(w, vec![0.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[2.0, 3.0]]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().as_slice(), &[5.0, -1.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let layer = LinearLayer::zeros(3, 2);
        assert!(layer.forward(&Matrix::zeros(1, 2)).is_err());
        assert!(layer
            .backward(&Matrix::zeros(1, 3), &Matrix::zeros(2, 2))
            .is_err());
        assert!(LinearLayer::new(Matrix::zeros(2, 2), vec![0.0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng::from_seed(1);
        let layer = LinearLayer::gaussian(3, 2, &mut r);
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let g = layer.backward(&x, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.weight.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weight_passes_gradient_through() {
        let layer = LinearLayer::new(Matrix::identity(3), vec![0.0; 3]).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3]]).unwrap();
        let dy = Matrix::from_rows(&[[1.5, -2.0, 0.25]]).unwrap();
        assert_eq!(layer.backward(&x, &dy).unwrap().input, dy);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // scalarized output: Σ c_ij · y_ij with fixed random c
        let mut r = rng::from_seed(3);
        let layer = LinearLayer::gaussian(2, 3, &mut r);
        let x = Matrix::from_rows(&[[0.3, -1.2], [2.0, 0.7], [-0.4, 0.1]]).unwrap();
        let c = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.2, -0.3], [0.9, -0.8, 0.4]])
            .unwrap();
        let scalar = |y: &Matrix| -> f64 {
            y.as_slice()
                .iter()
                .zip(c.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };

        let report = grad_check(
            |p| {
                let mut l = layer.clone();
                l.set_params(p).unwrap();
                let y = l.forward(&x).unwrap();
                (scalar(&y), l.backward(&x, &c).unwrap().flat())
            },
            &layer.params(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");

        let report = grad_check(
            |p| {
                let xm = Matrix::new(3, 2, p.to_vec()).unwrap();
                let y = layer.forward(&xm).unwrap();
                (
                    scalar(&y),
                    layer.backward(&xm, &c).unwrap().input.into_vec(),
                )
            },
            x.as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
