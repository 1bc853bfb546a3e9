use crate::autodiff::{join, Graph, Parameters, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_RMS_EPS: f64 = 1e-6;

/// `y_j = gain_j * x_j / sqrt(mean_k(x_k^2) + eps)` over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsNormParams {
    pub gain: Tensor,
    pub eps: f64,
}

impl RmsNormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::ones(&[d]),
            eps: DEFAULT_RMS_EPS,
        }
    }

    pub fn with_eps(d: usize, eps: f64) -> Self {
        Self {
            gain: Tensor::ones(&[d]),
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.numel()
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.last() != Some(&self.dim()) {
            return Err(Error::shape("rmsnorm", &shape, self.gain.shape()));
        }
        let sq = g.mul(x, x)?;
        let ms = g.mean_axis(sq, shape.len() - 1, true)?;
        let inv = g.rsqrt(g.add_scalar(ms, self.eps));
        let normed = g.mul(x, inv)?;
        g.mul(normed, g.param(&self.gain))
    }
}

impl Parameters for RmsNormParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gain"), &self.gain);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(x: &[f64], eps: f64) -> Vec<f64> {
        let p = RmsNormParams::with_eps(x.len(), eps);
        let g = Graph::new();
        let xv = g.constant(Tensor::vector(x.to_vec()));
        let y = p.forward(&g, xv).unwrap();
        g.tensor(y).into_data()
    }

    #[test]
    fn unit_rms_is_unchanged() {
        assert_eq!(norm(&[1.0, 1.0, 1.0, 1.0], 0.0), vec![1.0; 4]);
    }

    #[test]
    fn zero_vector_stays_zero() {
        assert_eq!(norm(&[0.0, 0.0], 1e-6), vec![0.0, 0.0]);
    }

    #[test]
    fn three_four() {
        let y = norm(&[3.0, 4.0], 0.0);
        assert!((y[0] - 0.84853).abs() < 1e-4);
        assert!((y[1] - 1.13137).abs() < 1e-4);
    }

    #[test]
    fn wrong_width_is_rejected() {
        let p = RmsNormParams::new(3);
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(p.forward(&g, x).is_err());
    }
}
