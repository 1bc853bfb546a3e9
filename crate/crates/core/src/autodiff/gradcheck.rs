//! Central finite differences, the independent oracle for `backward`.

use super::graph::{Graph, Var};
use super::params::{named_parameters, Parameters};
use super::tensor::Tensor;
use crate::error::Result;

/// Below this magnitude the relative error is measured against a fixed
/// floor instead of the gradient itself.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    let err = (analytic - numeric).abs() / denom;
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

/// `(f(x + ε e_i) - f(x - ε e_i)) / 2ε` for every coordinate `i`.
pub fn finite_difference_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

fn perturb<P: Parameters>(p: &mut P, target: usize, elem: usize, delta: f64) {
    let mut i = 0;
    p.visit_mut("", &mut |_, t| {
        if i == target {
            t.data_mut()[elem] += delta;
        }
        i += 1;
    });
}

/// Finite-difference gradient of `f` over every tensor of a parameter tree,
/// in visiting order.
pub fn finite_difference_params<P: Parameters + Clone>(
    params: &P,
    eps: f64,
    f: impl Fn(&P) -> f64,
) -> Vec<(String, Tensor)> {
    let layout: Vec<(String, Vec<usize>)> = named_parameters(params)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    layout
        .into_iter()
        .enumerate()
        .map(|(pi, (name, shape))| {
            let n: usize = shape.iter().product();
            let mut grad = vec![0.0; n];
            for (ei, slot) in grad.iter_mut().enumerate() {
                // Fresh copies per probe: the base point never drifts.
                let mut plus = params.clone();
                perturb(&mut plus, pi, ei, eps);
                let mut minus = params.clone();
                perturb(&mut minus, pi, ei, -eps);
                *slot = (f(&plus) - f(&minus)) / (2.0 * eps);
            }
            (name, Tensor::from_parts(shape, grad))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: String,
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    pub fn merge(&mut self, other: GradCheck) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
    }
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }
}

/// Compares `backward` against central differences for a scalar loss built
/// by `loss` from `params`. The closure must bind parameters with
/// [`Graph::param`] so that their gradients can be recovered.
pub fn check_gradients<P: Parameters + Clone>(
    params: &P,
    eps: f64,
    loss: impl Fn(&Graph, &P) -> Result<Var>,
) -> Result<GradCheck> {
    let graph = Graph::new();
    let out = loss(&graph, params)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<(String, Tensor)> = named_parameters(params)
        .into_iter()
        .map(|(n, t)| {
            let g = grads.of(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            (n, g)
        })
        .collect();

    let eval = |p: &P| -> f64 {
        let g = Graph::no_grad();
        match loss(&g, p) {
            Ok(v) => g.value(v).item(),
            Err(_) => f64::NAN,
        }
    };
    let numeric = finite_difference_params(params, eps, eval);

    let mut report = GradCheck::default();
    for ((name, a), (_, n)) in analytic.iter().zip(&numeric) {
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let err = relative_error(av, nv);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}
