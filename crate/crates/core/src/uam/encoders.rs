use rand::Rng;

use crate::autodiff::{join, Graph, Parameters, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{AttentionParams, LinearParams, MoeParams, SsmParams};

/// Scan states as attention values, raw input as queries and keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AmambaParams {
    pub ssm: SsmParams,
    pub attn: AttentionParams,
}

impl AmambaParams {
    pub fn new(ssm: SsmParams, attn: AttentionParams) -> Result<Self> {
        if ssm.dim() != attn.dim() {
            return Err(Error::Config(format!(
                "scan width {} differs from attention width {}",
                ssm.dim(),
                attn.dim()
            )));
        }
        Ok(Self { ssm, attn })
    }

    pub fn init(d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            ssm: SsmParams::init(d, rng),
            attn: AttentionParams::init(d, heads, rng)?,
        })
    }

    /// Output before the outer residual: `attn(q = x̄, k = x̄, v = h + x̄)`.
    pub fn mix(&self, g: &Graph, x_bar: Var) -> Result<Var> {
        let h = self.ssm.forward(g, x_bar)?;
        let values = g.add(h, x_bar)?;
        self.attn.cross(g, x_bar, values)
    }

    /// `x̄ + mix(x̄)` for an already normalized `x̄`.
    pub fn forward(&self, g: &Graph, x_bar: Var) -> Result<Var> {
        let mixed = self.mix(g, x_bar)?;
        g.add(x_bar, mixed)
    }
}

impl Parameters for AmambaParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ssm.visit(&join(prefix, "ssm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ssm.visit_mut(&join(prefix, "ssm"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
    }
}

/// Self-attention and scan outputs, concatenated, projected back to `d`,
/// then routed through a mixture of experts.
#[derive(Clone, Debug, PartialEq)]
pub struct AmambaMoeParams {
    pub self_attn: AttentionParams,
    pub ssm: SsmParams,
    /// `2d -> d`, reconciling the concat width with the residual.
    pub concat_proj: LinearParams,
    pub moe: MoeParams,
}

impl AmambaMoeParams {
    pub fn new(self_attn: AttentionParams, ssm: SsmParams, concat_proj: LinearParams, moe: MoeParams) -> Result<Self> {
        let d = self_attn.dim();
        if ssm.dim() != d || concat_proj.d_in() != 2 * d || concat_proj.d_out() != d || moe.dim() != d {
            return Err(Error::Config(format!(
                "Amamba-MoE sublayers disagree on width {d}"
            )));
        }
        Ok(Self {
            self_attn,
            ssm,
            concat_proj,
            moe,
        })
    }

    pub fn init(
        d: usize,
        heads: usize,
        d_ff: usize,
        n_experts: usize,
        top_k: usize,
        coeff: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: AttentionParams::init(d, heads, rng)?,
            ssm: SsmParams::init(d, rng),
            concat_proj: LinearParams::init(2 * d, d, true, rng),
            moe: MoeParams::init(d, d_ff, n_experts, top_k, coeff, rng)?,
        })
    }

    /// Returns `(moe(proj([attn(o); scan(o)]) + o) + o, aux_loss)`.
    pub fn forward(&self, g: &Graph, o_a: Var) -> Result<(Var, Var)> {
        let attended = self.self_attn.self_attend(g, o_a)?;
        let scanned = self.ssm.forward(g, o_a)?;
        let joined = g.concat(&[attended, scanned])?;
        let projected = self.concat_proj.forward(g, joined)?;
        let routed_in = g.add(projected, o_a)?;
        let moe = self.moe.forward(g, routed_in)?;
        Ok((g.add(moe.output, o_a)?, moe.aux_loss))
    }
}

impl Parameters for AmambaMoeParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.ssm.visit(&join(prefix, "ssm"), f);
        self.concat_proj.visit(&join(prefix, "concat_proj"), f);
        self.moe.visit(&join(prefix, "moe"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.ssm.visit_mut(&join(prefix, "ssm"), f);
        self.concat_proj.visit_mut(&join(prefix, "concat_proj"), f);
        self.moe.visit_mut(&join(prefix, "moe"), f);
    }
}
