use rand::Rng;

use super::linear::LinearParams;
use crate::autodiff::{join, Graph, Parameters, Tensor, Var};
use crate::error::{Error, Result};

pub const GELU_SIGMOID_SLOPE: f64 = 1.702;
pub const DEFAULT_LOAD_BALANCE_COEFF: f64 = 0.01;

/// `x * sigmoid(1.702 x)`, a smooth GELU stand-in.
pub fn gelu(g: &Graph, x: Var) -> Var {
    let gate = g.sigmoid(g.scale(x, GELU_SIGMOID_SLOPE));
    g.mul(x, gate).expect("same-shape product")
}

/// Two-layer feed-forward expert `down(gelu(up(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub up: LinearParams,
    pub down: LinearParams,
}

impl ExpertParams {
    pub fn new(up: LinearParams, down: LinearParams) -> Result<Self> {
        if up.d_out() != down.d_in() || up.d_in() != down.d_out() {
            return Err(Error::Config(format!(
                "expert dims do not chain: {}->{} then {}->{}",
                up.d_in(),
                up.d_out(),
                down.d_in(),
                down.d_out()
            )));
        }
        Ok(Self { up, down })
    }

    pub fn init(d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: LinearParams::init(d, d_ff, true, rng),
            down: LinearParams::init(d_ff, d, true, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let h = gelu(g, self.up.forward(g, x)?);
        self.down.forward(g, h)
    }
}

impl Parameters for ExpertParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

/// Sparse mixture of experts with top-k routing.
///
/// Each token goes to the `top_k` experts with the largest router logits
/// (lower index first on ties); the gates are a softmax over the selected
/// logits only.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeParams {
    pub router: LinearParams,
    pub experts: Vec<ExpertParams>,
    pub top_k: usize,
    pub load_balance_coeff: f64,
}

pub struct MoeOutput {
    pub output: Var,
    /// `coeff * E * sum_e(fraction routed to e * mean router probability of e)`
    pub aux_loss: Var,
    /// Selected experts per token, in descending logit order.
    pub routes: Vec<Vec<usize>>,
}

impl MoeParams {
    pub fn new(router: LinearParams, experts: Vec<ExpertParams>, top_k: usize, load_balance_coeff: f64) -> Result<Self> {
        let e = experts.len();
        if e == 0 {
            return Err(Error::Config("mixture needs at least one expert".into()));
        }
        if top_k == 0 || top_k > e {
            return Err(Error::Config(format!("top_k {top_k} must lie in 1..={e}")));
        }
        if load_balance_coeff < 0.0 {
            return Err(Error::Config("load balance coefficient must be nonnegative".into()));
        }
        let d = router.d_in();
        if router.d_out() != e {
            return Err(Error::Config(format!("router emits {} logits for {e} experts", router.d_out())));
        }
        let d_ff = experts[0].up.d_out();
        if experts.iter().any(|x| x.up.d_in() != d || x.up.d_out() != d_ff) {
            return Err(Error::Config("experts must share input and hidden widths".into()));
        }
        Ok(Self {
            router,
            experts,
            top_k,
            load_balance_coeff,
        })
    }

    pub fn init(d: usize, d_ff: usize, n_experts: usize, top_k: usize, coeff: f64, rng: &mut impl Rng) -> Result<Self> {
        let router = LinearParams::init(d, n_experts, true, rng);
        let experts = (0..n_experts).map(|_| ExpertParams::init(d, d_ff, rng)).collect();
        Self::new(router, experts, top_k, coeff)
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.router.d_in()
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<MoeOutput> {
        let shape = g.shape(x);
        let d = self.dim();
        if shape.last() != Some(&d) {
            return Err(Error::shape("moe", &shape, &[d]));
        }
        if self.top_k == 0 || self.top_k > self.n_experts() {
            return Err(Error::Config(format!(
                "top_k {} exceeds {} experts",
                self.top_k,
                self.n_experts()
            )));
        }
        let n_tok = shape.iter().product::<usize>() / d;
        let (e, k) = (self.n_experts(), self.top_k);
        let flat = g.reshape(x, &[n_tok, d])?;
        let logits = self.router.forward(g, flat)?;
        let routes = g.value(logits).top_k_indices(k);

        let picked: Vec<usize> = routes
            .iter()
            .enumerate()
            .flat_map(|(n, r)| r.iter().map(move |&ex| n * e + ex))
            .collect();
        let gates = g.softmax(g.take(logits, picked, &[n_tok, k])?);

        let mut combined: Option<Var> = None;
        let mut counts = vec![0usize; e];
        for (ex, expert) in self.experts.iter().enumerate() {
            let mut rows = Vec::new();
            let mut gate_ix = Vec::new();
            for (n, r) in routes.iter().enumerate() {
                if let Some(slot) = r.iter().position(|&c| c == ex) {
                    rows.push(n);
                    gate_ix.push(n * k + slot);
                }
            }
            counts[ex] = rows.len();
            if rows.is_empty() {
                continue;
            }
            let xe = g.gather_rows(flat, &rows)?;
            let ye = expert.forward(g, xe)?;
            let ge = g.take(gates, gate_ix, &[rows.len(), 1])?;
            let weighted = g.mul(ye, ge)?;
            let placed = g.scatter_rows(weighted, rows, n_tok)?;
            combined = Some(match combined {
                Some(acc) => g.add(acc, placed)?,
                None => placed,
            });
        }
        let output = g.reshape(combined.expect("every token is routed"), &shape)?;

        let probs = g.softmax(logits);
        let mean_prob = g.mean_axis(probs, 0, false)?;
        let fraction = g.constant(Tensor::vector(
            counts.iter().map(|&c| c as f64 / n_tok as f64).collect(),
        ));
        let balance = g.sum(g.mul(mean_prob, fraction)?);
        let aux_loss = g.scale(balance, self.load_balance_coeff * e as f64);
        Ok(MoeOutput {
            output,
            aux_loss,
            routes,
        })
    }
}

impl Parameters for MoeParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.router.visit(&join(prefix, "router"), f);
        self.experts.visit(&join(prefix, "experts"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.router.visit_mut(&join(prefix, "router"), f);
        self.experts.visit_mut(&join(prefix, "experts"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::new(vec![t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_expert_is_the_bare_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let moe = MoeParams::init(4, 8, 1, 1, 0.01, &mut rng).unwrap();
        let x = tokens(&mut rng, 5, 4);
        let g = Graph::new();
        let xv = g.constant(x);
        let out = moe.forward(&g, xv).unwrap();
        let bare = moe.experts[0].forward(&g, xv).unwrap();
        let (a, b) = (g.value(out.output).clone(), g.value(bare).clone());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(g.value(out.aux_loss).item(), 0.01);
    }

    #[test]
    fn equal_logits_average_two_experts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut moe = MoeParams::init(3, 6, 2, 2, 0.0, &mut rng).unwrap();
        moe.router = LinearParams::zeros(3, 2, true);
        let x = tokens(&mut rng, 4, 3);
        let g = Graph::new();
        let xv = g.constant(x);
        let out = moe.forward(&g, xv).unwrap();
        let y0 = moe.experts[0].forward(&g, xv).unwrap();
        let y1 = moe.experts[1].forward(&g, xv).unwrap();
        let (o, a, b) = (g.value(out.output).clone(), g.value(y0).clone(), g.value(y1).clone());
        for i in 0..o.numel() {
            assert!((o.data()[i] - 0.5 * (a.data()[i] + b.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_logit_selects_expert_zero_with_unit_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut moe = MoeParams::init(3, 6, 2, 1, 0.0, &mut rng).unwrap();
        let mut router = LinearParams::zeros(3, 2, true);
        router.bias = Some(Tensor::vector(vec![2.0, -1.0]));
        moe.router = router;
        let x = tokens(&mut rng, 3, 3);
        let g = Graph::new();
        let xv = g.constant(x);
        let out = moe.forward(&g, xv).unwrap();
        assert!(out.routes.iter().all(|r| r == &[0]));
        let y0 = moe.experts[0].forward(&g, xv).unwrap();
        assert_eq!(*g.value(out.output), *g.value(y0));
    }

    #[test]
    fn top_k_beyond_expert_count_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(MoeParams::init(3, 6, 2, 3, 0.0, &mut rng).is_err());
        let mut moe = MoeParams::init(3, 6, 2, 2, 0.0, &mut rng).unwrap();
        moe.top_k = 5;
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(moe.forward(&g, x).is_err());
    }

    #[test]
    fn gelu_at_zero_and_large() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 50.0]));
        let y = gelu(&g, x);
        assert_eq!(g.value(y).data(), &[0.0, 50.0]);
    }
}
