//! Closed-form parameter and FLOP counts. One multiply-accumulate is two
//! FLOPs; only matrix products are counted, and only the `top_k` active
//! experts contribute.

use super::config::{ModelConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub parameter_count: u64,
    /// Lift plus blocks, divided by the sequence length (exact).
    pub flops_per_token: u64,
    /// Lift, blocks and the classification head for one cell.
    pub flops_per_sequence: u64,
}

fn linear(d_in: u64, d_out: u64) -> u64 {
    d_in * d_out + d_out
}

struct Dims {
    d: u64,
    f: u64,
    e: u64,
    k: u64,
}

impl Dims {
    fn of(cfg: &ModelConfig) -> Self {
        Self {
            d: cfg.d_model as u64,
            f: cfg.d_ff as u64,
            e: cfg.n_experts as u64,
            k: cfg.top_k as u64,
        }
    }

    fn attention(&self) -> u64 {
        4 * linear(self.d, self.d)
    }

    fn scan(&self) -> u64 {
        linear(self.d, self.d)
    }

    fn ffn(&self) -> u64 {
        linear(self.d, self.f) + linear(self.f, self.d)
    }

    fn moe(&self) -> u64 {
        linear(self.d, self.e) + self.e * self.ffn()
    }

    fn amamba(&self) -> u64 {
        self.scan() + self.attention()
    }

    fn amamba_moe(&self) -> u64 {
        self.attention() + self.scan() + linear(2 * self.d, self.d) + self.moe()
    }

    fn standard_layer(&self, attention: bool, moe: bool) -> u64 {
        let mixer = if attention { self.attention() } else { self.scan() };
        let channel = if moe { self.moe() } else { self.ffn() };
        2 * self.d + mixer + channel
    }

    // FLOPs for a sequence of `t` tokens.

    fn attention_flops(&self, t: u64) -> u64 {
        // four projections, then scores and the weighted sum
        4 * 2 * t * self.d * self.d + 2 * t * t * self.d + 2 * t * t * self.d
    }

    fn scan_flops(&self, t: u64) -> u64 {
        2 * t * self.d * self.d
    }

    fn ffn_flops(&self, t: u64) -> u64 {
        2 * t * self.d * self.f * 2
    }

    fn moe_flops(&self, t: u64) -> u64 {
        2 * t * self.d * self.e + self.k * self.ffn_flops(t)
    }

    fn amamba_flops(&self, t: u64) -> u64 {
        self.scan_flops(t) + self.attention_flops(t)
    }

    fn amamba_moe_flops(&self, t: u64) -> u64 {
        self.attention_flops(t) + self.scan_flops(t) + 2 * t * 2 * self.d * self.d + self.moe_flops(t)
    }

    fn standard_layer_flops(&self, t: u64, attention: bool, moe: bool) -> u64 {
        let mixer = if attention {
            self.attention_flops(t)
        } else {
            self.scan_flops(t)
        };
        let channel = if moe { self.moe_flops(t) } else { self.ffn_flops(t) };
        mixer + channel
    }
}

/// Learnable scalars in one block of the stack.
pub fn block_parameter_count(cfg: &ModelConfig, index: usize) -> u64 {
    let x = Dims::of(cfg);
    match cfg.variant {
        Variant::Uam => x.d + x.amamba() + x.amamba_moe(),
        Variant::UamL => x.d + x.amamba(),
        Variant::UamM => x.d + x.amamba_moe(),
        Variant::Trans => x.standard_layer(true, false),
        Variant::TransM => x.standard_layer(true, true),
        Variant::Mamba => x.standard_layer(false, false),
        Variant::MambaM => x.standard_layer(false, true),
        Variant::Jamba => 2 * x.standard_layer(cfg.jamba_layout()[index], true),
    }
}

/// Matrix-product FLOPs of one block over `t` tokens.
pub fn block_flops(cfg: &ModelConfig, index: usize, t: u64) -> u64 {
    let x = Dims::of(cfg);
    match cfg.variant {
        Variant::Uam => x.amamba_flops(t) + x.amamba_moe_flops(t),
        Variant::UamL => x.amamba_flops(t),
        Variant::UamM => x.amamba_moe_flops(t),
        Variant::Trans => x.standard_layer_flops(t, true, false),
        Variant::TransM => x.standard_layer_flops(t, true, true),
        Variant::Mamba => x.standard_layer_flops(t, false, false),
        Variant::MambaM => x.standard_layer_flops(t, false, true),
        Variant::Jamba => 2 * x.standard_layer_flops(t, cfg.jamba_layout()[index], true),
    }
}

/// Whole classifier: input lift, every block, and the head.
pub fn count_parameters(cfg: &ModelConfig) -> u64 {
    let d = cfg.d_model as u64;
    let blocks: u64 = (0..cfg.n_blocks).map(|i| block_parameter_count(cfg, i)).sum();
    linear(cfg.token_chunk as u64, d) + blocks + linear(d, cfg.n_classes as u64)
}

/// FLOPs per token at sequence length `t`, head excluded.
pub fn count_flops(cfg: &ModelConfig, t: usize) -> u64 {
    let t = t.max(1) as u64;
    sequence_body_flops(cfg, t) / t
}

fn sequence_body_flops(cfg: &ModelConfig, t: u64) -> u64 {
    let lift = 2 * t * cfg.token_chunk as u64 * cfg.d_model as u64;
    lift + (0..cfg.n_blocks).map(|i| block_flops(cfg, i, t)).sum::<u64>()
}

pub fn cost_report(cfg: &ModelConfig, t: usize) -> CostReport {
    let t64 = t.max(1) as u64;
    let body = sequence_body_flops(cfg, t64);
    let head = 2 * cfg.d_model as u64 * cfg.n_classes as u64;
    CostReport {
        parameter_count: count_parameters(cfg),
        flops_per_token: body / t64,
        flops_per_sequence: body + head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn primitive_counts() {
        assert_eq!(linear(2, 3), 9);
        let x = Dims { d: 4, f: 8, e: 2, k: 1 };
        // matmul [1×d]·[d×d]
        assert_eq!(x.scan_flops(1), 2 * 16);
        // scores and weighted sum do not depend on heads
        let t = 5;
        assert_eq!(x.attention_flops(t) - 8 * t * 16, 4 * t * t * 4);
    }

    #[test]
    fn per_token_division_is_exact() {
        for v in Variant::ALL {
            for t in [1, 7, 106] {
                let c = cfg(v);
                assert_eq!(sequence_body_flops(&c, t) % t, 0, "{v} t={t}");
            }
        }
    }

    #[test]
    fn containment_orderings() {
        let p = |v| count_parameters(&cfg(v));
        assert!(p(Variant::Mamba) < p(Variant::Trans));
        assert!(p(Variant::UamM) < p(Variant::Uam));
        assert!(p(Variant::UamL) < p(Variant::Uam));
        assert!(p(Variant::Uam) < p(Variant::Jamba));
        assert!(p(Variant::Trans) < p(Variant::TransM));
    }

    #[test]
    fn uam_flops_below_jamba_when_experts_dominate() {
        // Short sequences and wide experts; cross-attention makes UAM the
        // heavier of the two once T grows.
        let c = ModelConfig {
            d_ff: 64,
            token_chunk: 53,
            ..ModelConfig::default()
        };
        let t = c.seq_len();
        assert_eq!(t, 2);
        assert!(count_flops(&c, t) < count_flops(&c.with_variant(Variant::Jamba), t));
        let long = ModelConfig::default();
        assert!(count_flops(&long, 106) > count_flops(&long.with_variant(Variant::Jamba), 106));
    }
}

/// `base` switched to `variant`, with `d_model` stepped by `heads` and
/// `d_ff = 2·d_model`, choosing the width whose parameter count lies
/// closest to `budget`.
pub fn match_parameter_budget(base: &ModelConfig, variant: Variant, budget: u64, max_d: usize) -> ModelConfig {
    let step = base.heads.max(1);
    (1..=max_d / step)
        .map(|i| ModelConfig {
            variant,
            d_model: i * step,
            d_ff: 2 * i * step,
            ..base.clone()
        })
        .min_by_key(|c| count_parameters(c).abs_diff(budget))
        .unwrap_or_else(|| base.with_variant(variant))
}
