use rand::Rng;

use crate::autodiff::{join, Graph, Parameters, Tensor, Var};
use crate::error::{Error, Result};

/// Affine map over the last axis: `y = x · W + b`, with `W` stored as
/// `[d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::Config(format!(
                "linear weight must be a matrix, got {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[1]] {
                return Err(Error::shape("linear", weight.shape(), b.shape()));
            }
        }
        if !weight.is_finite() {
            return Err(Error::Config("linear weight has non-finite entries".into()));
        }
        Ok(Self { weight, bias })
    }

    /// Glorot-uniform weights and a zero bias.
    pub fn init(d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor::from_parts(vec![d_in, d_out], data),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Tensor::identity(d),
            bias: Some(Tensor::zeros(&[d])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, g.param(&self.weight))?;
        match &self.bias {
            Some(b) => g.add(y, g.param(b)),
            None => Ok(y),
        }
    }
}

impl Parameters for LinearParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(p: &LinearParams, x: &[f64]) -> Vec<f64> {
        let g = Graph::new();
        let xv = g.constant(Tensor::vector(x.to_vec()));
        let y = p.forward(&g, xv).unwrap();
        g.tensor(y).into_data()
    }

    #[test]
    fn identity_passes_through() {
        assert_eq!(apply(&LinearParams::identity(2), &[1.0, 2.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn bias_is_added() {
        let p = LinearParams::new(Tensor::identity(2), Some(Tensor::vector(vec![1.0, 1.0]))).unwrap();
        assert_eq!(apply(&p, &[1.0, 1.0]), vec![2.0, 2.0]);
    }

    #[test]
    fn hand_matmul() {
        let p = LinearParams::new(Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0]]), None).unwrap();
        assert_eq!(apply(&p, &[2.0, 3.0]), vec![11.0, 16.0]);
    }

    #[test]
    fn applies_over_leading_axes() {
        let p = LinearParams::new(Tensor::matrix(&[[1.0, 2.0], [3.0, 4.0]]), None).unwrap();
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1, 2], vec![2.0, 3.0, 1.0, 0.0]).unwrap());
        let y = p.forward(&g, x).unwrap();
        assert_eq!(g.shape(y), vec![2, 1, 2]);
        assert_eq!(g.value(y).data(), &[11.0, 16.0, 1.0, 2.0]);
    }

    #[test]
    fn rejects_mismatched_bias_and_input() {
        assert!(LinearParams::new(Tensor::zeros(&[2, 3]), Some(Tensor::zeros(&[2]))).is_err());
        let p = LinearParams::zeros(3, 2, true);
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 2]));
        assert!(p.forward(&g, x).is_err());
    }
}
