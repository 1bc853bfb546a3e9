use rand::Rng;

use super::linear::LinearParams;
use crate::autodiff::{join, Graph, Parameters, Tensor, Var};
use crate::error::{Error, Result};

/// Multi-head scaled dot-product attention with separate query/key and
/// value sources and an output projection after the head concat.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: LinearParams,
    pub w_k: LinearParams,
    pub w_v: LinearParams,
    pub w_o: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(
        w_q: LinearParams,
        w_k: LinearParams,
        w_v: LinearParams,
        w_o: LinearParams,
        heads: usize,
    ) -> Result<Self> {
        let d = w_q.d_in();
        for p in [&w_q, &w_k, &w_v, &w_o] {
            if p.d_in() != d || p.d_out() != d {
                return Err(Error::Config(format!(
                    "attention projections must all be {d} -> {d}"
                )));
            }
        }
        check_heads(d, heads)?;
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
        })
    }

    pub fn init(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(Self {
            w_q: LinearParams::init(d, d, true, rng),
            w_k: LinearParams::init(d, d, true, rng),
            w_v: LinearParams::init(d, d, true, rng),
            w_o: LinearParams::init(d, d, true, rng),
            heads,
        })
    }

    /// All four projections set to the identity.
    pub fn identity(d: usize, heads: usize) -> Result<Self> {
        let id = LinearParams::identity(d);
        Self::new(id.clone(), id.clone(), id.clone(), id, heads)
    }

    pub fn dim(&self) -> usize {
        self.w_q.d_in()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// Queries and keys from `q_src`, values from `v_src`. Both `[.., T, d]`.
    pub fn cross(&self, g: &Graph, q_src: Var, v_src: Var) -> Result<Var> {
        Ok(self.cross_with_weights(g, q_src, v_src)?.0)
    }

    pub fn self_attend(&self, g: &Graph, x: Var) -> Result<Var> {
        self.cross(g, x, x)
    }

    /// Like [`cross`](Self::cross) but also returns the per-head attention
    /// weights, each `[.., T, T]`.
    pub fn cross_with_weights(&self, g: &Graph, q_src: Var, v_src: Var) -> Result<(Var, Vec<Var>)> {
        let (qs, vs) = (g.shape(q_src), g.shape(v_src));
        if qs != vs || qs.len() < 2 || qs[qs.len() - 1] != self.dim() {
            return Err(Error::shape("attention", &qs, &vs));
        }
        let q = self.w_q.forward(g, q_src)?;
        let k = self.w_k.forward(g, q_src)?;
        let v = self.w_v.forward(g, v_src)?;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.split(q, h * dk, dk)?,
                    g.split(k, h * dk, dk)?,
                    g.split(v, h * dk, dk)?,
                )
            };
            let scores = g.bmm(qh, g.transpose(kh)?)?;
            let w = g.softmax(g.scale(scores, scale));
            heads.push(g.bmm(w, vh)?);
            weights.push(w);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads)?
        };
        Ok((self.w_o.forward(g, joined)?, weights))
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} attention heads do not divide model width {d}"
        )));
    }
    Ok(())
}

impl Parameters for AttentionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.w_q.visit(&join(prefix, "w_q"), f);
        self.w_k.visit(&join(prefix, "w_k"), f);
        self.w_v.visit(&join(prefix, "w_v"), f);
        self.w_o.visit(&join(prefix, "w_o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.w_q.visit_mut(&join(prefix, "w_q"), f);
        self.w_k.visit_mut(&join(prefix, "w_k"), f);
        self.w_v.visit_mut(&join(prefix, "w_v"), f);
        self.w_o.visit_mut(&join(prefix, "w_o"), f);
    }
}
