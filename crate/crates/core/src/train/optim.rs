use crate::autodiff::{named_parameters, Gradients, Parameters, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// First and second moments, in parameter visiting order.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update. Parameters with no gradient are treated as having a zero
    /// gradient, so weight decay still applies to them.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &Gradients) {
        let current: Vec<Tensor> = named_parameters(params)
            .into_iter()
            .map(|(_, t)| grads.of(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        if self.m.len() != current.len() {
            self.m = current.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let (lr, wd, eps) = (self.learning_rate, self.weight_decay, self.eps);
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            let g = current[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = b1 * *mj + (1.0 - b1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pj -= lr * wd * *pj;
                *pj -= lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            }
            i += 1;
        });
    }
}
