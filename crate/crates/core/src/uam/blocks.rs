use rand::Rng;

use super::config::{ModelConfig, Variant};
use super::encoders::{AmambaMoeParams, AmambaParams};
use crate::autodiff::{join, Graph, Parameters, Tensor, Var};
use crate::error::Result;
use crate::layers::{AttentionParams, ExpertParams, MoeParams, RmsNormParams, SsmParams};

/// One normalization followed by Amamba and/or Amamba-MoE.
#[derive(Clone, Debug, PartialEq)]
pub struct UamBlockParams {
    pub norm: RmsNormParams,
    pub amamba: Option<AmambaParams>,
    pub amamba_moe: Option<AmambaMoeParams>,
}

impl UamBlockParams {
    /// Returns the block output and the summed auxiliary routing loss.
    pub fn forward(&self, g: &Graph, x: Var) -> Result<(Var, Option<Var>)> {
        let x_bar = self.norm.forward(g, x)?;
        let y = match &self.amamba {
            Some(a) => a.forward(g, x_bar)?,
            None => x_bar,
        };
        match &self.amamba_moe {
            Some(m) => {
                let (z, aux) = m.forward(g, y)?;
                Ok((z, Some(aux)))
            }
            None => Ok((y, None)),
        }
    }
}

impl Parameters for UamBlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.amamba.visit(&join(prefix, "amamba"), f);
        self.amamba_moe.visit(&join(prefix, "amamba_moe"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.amamba.visit_mut(&join(prefix, "amamba"), f);
        self.amamba_moe.visit_mut(&join(prefix, "amamba_moe"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SequenceMixer {
    Attention(AttentionParams),
    Scan(SsmParams),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ChannelMixer {
    Ffn(ExpertParams),
    Moe(MoeParams),
}

/// Pre-norm residual layer: `h = x + mix(norm(x))`, `out = h + chan(norm(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardLayer {
    pub mix_norm: RmsNormParams,
    pub mixer: SequenceMixer,
    pub channel_norm: RmsNormParams,
    pub channel: ChannelMixer,
}

impl StandardLayer {
    pub fn forward(&self, g: &Graph, x: Var) -> Result<(Var, Option<Var>)> {
        let normed = self.mix_norm.forward(g, x)?;
        let mixed = match &self.mixer {
            SequenceMixer::Attention(a) => a.self_attend(g, normed)?,
            SequenceMixer::Scan(s) => s.forward(g, normed)?,
        };
        let h = g.add(x, mixed)?;
        let normed = self.channel_norm.forward(g, h)?;
        let (out, aux) = match &self.channel {
            ChannelMixer::Ffn(e) => (e.forward(g, normed)?, None),
            ChannelMixer::Moe(m) => {
                let o = m.forward(g, normed)?;
                (o.output, Some(o.aux_loss))
            }
        };
        Ok((g.add(h, out)?, aux))
    }
}

impl Parameters for StandardLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.mix_norm.visit(&join(prefix, "mix_norm"), f);
        match &self.mixer {
            SequenceMixer::Attention(a) => a.visit(&join(prefix, "attn"), f),
            SequenceMixer::Scan(s) => s.visit(&join(prefix, "ssm"), f),
        }
        self.channel_norm.visit(&join(prefix, "channel_norm"), f);
        match &self.channel {
            ChannelMixer::Ffn(e) => e.visit(&join(prefix, "ffn"), f),
            ChannelMixer::Moe(m) => m.visit(&join(prefix, "moe"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.mix_norm.visit_mut(&join(prefix, "mix_norm"), f);
        match &mut self.mixer {
            SequenceMixer::Attention(a) => a.visit_mut(&join(prefix, "attn"), f),
            SequenceMixer::Scan(s) => s.visit_mut(&join(prefix, "ssm"), f),
        }
        self.channel_norm.visit_mut(&join(prefix, "channel_norm"), f);
        match &mut self.channel {
            ChannelMixer::Ffn(e) => e.visit_mut(&join(prefix, "ffn"), f),
            ChannelMixer::Moe(m) => m.visit_mut(&join(prefix, "moe"), f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Uam(UamBlockParams),
    /// Baseline blocks: one layer for Trans/Mamba families, two for Jamba.
    Standard(Vec<StandardLayer>),
}

impl Block {
    pub fn forward(&self, g: &Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        match self {
            Block::Uam(b) => {
                let (y, aux) = b.forward(g, x)?;
                Ok((y, aux.into_iter().collect()))
            }
            Block::Standard(layers) => {
                let mut h = x;
                let mut aux = Vec::new();
                for layer in layers {
                    let (next, a) = layer.forward(g, h)?;
                    h = next;
                    aux.extend(a);
                }
                Ok((h, aux))
            }
        }
    }

    /// Builds block `index` of a stack described by `cfg`.
    pub fn init(cfg: &ModelConfig, index: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let norm = || RmsNormParams::with_eps(d, cfg.rms_eps);
        let moe = |rng: &mut _| MoeParams::init(d, cfg.d_ff, cfg.n_experts, cfg.top_k, cfg.load_balance_coeff, rng);
        let amamba = |rng: &mut _| AmambaParams::init(d, cfg.heads, rng);
        let amamba_moe = |rng: &mut _| {
            AmambaMoeParams::init(
                d,
                cfg.heads,
                cfg.d_ff,
                cfg.n_experts,
                cfg.top_k,
                cfg.load_balance_coeff,
                rng,
            )
        };
        let layer = |attention: bool, with_moe: bool, rng: &mut _| -> Result<StandardLayer> {
            let mixer = if attention {
                SequenceMixer::Attention(AttentionParams::init(d, cfg.heads, rng)?)
            } else {
                SequenceMixer::Scan(SsmParams::init(d, rng))
            };
            let channel = if with_moe {
                ChannelMixer::Moe(moe(rng)?)
            } else {
                ChannelMixer::Ffn(ExpertParams::init(d, cfg.d_ff, rng))
            };
            Ok(StandardLayer {
                mix_norm: norm(),
                mixer,
                channel_norm: norm(),
                channel,
            })
        };
        Ok(match cfg.variant {
            Variant::Uam => Block::Uam(UamBlockParams {
                norm: norm(),
                amamba: Some(amamba(rng)?),
                amamba_moe: Some(amamba_moe(rng)?),
            }),
            Variant::UamL => Block::Uam(UamBlockParams {
                norm: norm(),
                amamba: Some(amamba(rng)?),
                amamba_moe: None,
            }),
            Variant::UamM => Block::Uam(UamBlockParams {
                norm: norm(),
                amamba: None,
                amamba_moe: Some(amamba_moe(rng)?),
            }),
            Variant::Trans => Block::Standard(vec![layer(true, false, rng)?]),
            Variant::TransM => Block::Standard(vec![layer(true, true, rng)?]),
            Variant::Mamba => Block::Standard(vec![layer(false, false, rng)?]),
            Variant::MambaM => Block::Standard(vec![layer(false, true, rng)?]),
            Variant::Jamba => {
                let attention = cfg.jamba_layout()[index];
                Block::Standard(vec![layer(attention, true, rng)?, layer(attention, true, rng)?])
            }
        })
    }
}

impl Parameters for Block {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            Block::Uam(b) => b.visit(prefix, f),
            Block::Standard(layers) => layers.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Block::Uam(b) => b.visit_mut(prefix, f),
            Block::Standard(layers) => layers.visit_mut(prefix, f),
        }
    }
}
