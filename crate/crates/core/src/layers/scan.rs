use rand::Rng;

use super::linear::LinearParams;
use crate::autodiff::{join, Graph, Parameters, Tensor, Var};
use crate::error::{Error, Result};

/// Gated state recurrence `h_t = (1 - g_t) h_{t-1} + g_t x_t` with
/// `g_t = sigmoid(gate(x_t))` computed per step and per channel.
///
/// `initial_state` is a fixed buffer (zeros by default) and is not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub gate: LinearParams,
    pub initial_state: Tensor,
}

impl SsmParams {
    pub fn new(gate: LinearParams) -> Result<Self> {
        if gate.d_in() != gate.d_out() {
            return Err(Error::Config(format!(
                "scan gate must map d -> d, got {} -> {}",
                gate.d_in(),
                gate.d_out()
            )));
        }
        let d = gate.d_out();
        Ok(Self {
            gate,
            initial_state: Tensor::zeros(&[d]),
        })
    }

    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            gate: LinearParams::init(d, d, true, rng),
            initial_state: Tensor::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.gate.d_out()
    }

    /// Returns every hidden state `[.., T, d]` for input `[.., T, d]`.
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() < 2 || shape[shape.len() - 1] != self.dim() {
            return Err(Error::shape("gated_scan", &shape, &[self.dim()]));
        }
        let gate = g.sigmoid(self.gate.forward(g, x)?);
        let h0 = g.constant(self.initial_state.clone());
        g.gated_scan(gate, x, h0)
    }
}

impl Parameters for SsmParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forced(d: usize, logit: f64) -> SsmParams {
        // zero weights: the gate is sigmoid(bias) regardless of the input
        let mut gate = LinearParams::zeros(d, d, true);
        gate.bias = Some(Tensor::full(&[d], logit));
        SsmParams::new(gate).unwrap()
    }

    fn run(p: &SsmParams, x: Tensor) -> Vec<f64> {
        let g = Graph::new();
        let xv = g.constant(x);
        let h = p.forward(&g, xv).unwrap();
        g.tensor(h).into_data()
    }

    #[test]
    fn open_gate_copies_input() {
        let x = Tensor::matrix(&[[0.5, -2.0], [1.5, 3.0], [-1.0, 0.25]]);
        let h = run(&forced(2, 800.0), x.clone());
        assert_eq!(h, x.data());
    }

    #[test]
    fn closed_gate_keeps_initial_state() {
        let x = Tensor::matrix(&[[0.5, -2.0], [1.5, 3.0]]);
        let h = run(&forced(2, -800.0), x);
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn half_gate_hand_recurrence() {
        let x = Tensor::matrix(&[[1.0], [1.0], [1.0]]);
        let h = run(&forced(1, 0.0), x);
        assert_eq!(h, vec![0.5, 0.75, 0.875]);
    }

    #[test]
    fn rejects_non_square_gate() {
        assert!(SsmParams::new(LinearParams::zeros(2, 3, true)).is_err());
    }
}
