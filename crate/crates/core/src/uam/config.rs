use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{DEFAULT_LOAD_BALANCE_COEFF, DEFAULT_RMS_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Uam,
    /// Amamba only.
    UamL,
    /// Amamba-MoE only.
    UamM,
    Trans,
    TransM,
    Mamba,
    MambaM,
    Jamba,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Trans,
        Variant::TransM,
        Variant::Mamba,
        Variant::MambaM,
        Variant::Jamba,
        Variant::UamL,
        Variant::UamM,
        Variant::Uam,
    ];

    /// The six rows of the efficiency comparison.
    pub const COST_TABLE: [Variant; 6] = [
        Variant::Trans,
        Variant::Mamba,
        Variant::Jamba,
        Variant::UamL,
        Variant::UamM,
        Variant::Uam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Uam => "UAM",
            Variant::UamL => "UAM-L",
            Variant::UamM => "UAM-M",
            Variant::Trans => "Trans",
            Variant::TransM => "Trans-M",
            Variant::Mamba => "Mamba",
            Variant::MambaM => "Mamba-M",
            Variant::Jamba => "Jamba",
        }
    }

    pub fn uses_moe(self) -> bool {
        !matches!(self, Variant::UamL | Variant::Trans | Variant::Mamba)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == lower)
            .ok_or_else(|| {
                let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub heads: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_ff: usize,
    pub variant: Variant,
    /// `(attention, scan)` block ratio for the Jamba baseline.
    pub jamba_attn_ratio: (usize, usize),
    pub token_chunk: usize,
    pub n_classes: usize,
    pub n_features: usize,
    pub load_balance_coeff: f64,
    /// Adds fixed sinusoidal positions after the input lift. Off by default.
    pub positional: bool,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_blocks: 4,
            heads: 4,
            n_experts: 4,
            top_k: 2,
            d_ff: 32,
            variant: Variant::Uam,
            jamba_attn_ratio: (1, 3),
            token_chunk: 1,
            n_classes: 2,
            n_features: 106,
            load_balance_coeff: DEFAULT_LOAD_BALANCE_COEFF,
            positional: false,
            rms_eps: DEFAULT_RMS_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_ff == 0 {
            return fail("d_model and d_ff must be positive".into());
        }
        if self.n_blocks == 0 {
            return fail("n_blocks must be at least 1".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("heads={} does not divide d_model={}", self.heads, self.d_model));
        }
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return fail(format!(
                "top_k={} must lie in 1..={} (n_experts)",
                self.top_k, self.n_experts
            ));
        }
        if self.token_chunk == 0 || self.n_features == 0 {
            return fail("token_chunk and n_features must be positive".into());
        }
        if self.n_classes < 2 {
            return fail(format!("n_classes={} must be at least 2", self.n_classes));
        }
        let (a, m) = self.jamba_attn_ratio;
        if a + m == 0 {
            return fail("jamba_attn_ratio must not be 0:0".into());
        }
        if !(self.load_balance_coeff >= 0.0 && self.load_balance_coeff.is_finite()) {
            return fail(format!("load_balance_coeff={} must be finite and >= 0", self.load_balance_coeff));
        }
        if !(self.rms_eps >= 0.0 && self.rms_eps.is_finite()) {
            return fail(format!("rms_eps={} must be finite and >= 0", self.rms_eps));
        }
        Ok(())
    }

    /// Number of tokens per cell, `ceil(F / token_chunk)`.
    pub fn seq_len(&self) -> usize {
        self.n_features.div_ceil(self.token_chunk)
    }

    /// For each block index, whether a Jamba stack puts attention there.
    pub fn jamba_layout(&self) -> Vec<bool> {
        jamba_layout(self.n_blocks, self.jamba_attn_ratio)
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.name().to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("heads", self.heads.to_string()),
            ("n_experts", self.n_experts.to_string()),
            ("top_k", self.top_k.to_string()),
            ("d_ff", self.d_ff.to_string()),
            (
                "jamba_attn_ratio",
                format!("{}:{}", self.jamba_attn_ratio.0, self.jamba_attn_ratio.1),
            ),
            ("token_chunk", self.token_chunk.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("n_features", self.n_features.to_string()),
            ("load_balance_coeff", format!("{:?}", self.load_balance_coeff)),
            ("positional", self.positional.to_string()),
            ("rms_eps", format!("{:?}", self.rms_eps)),
        ]
    }

    /// Inverse of [`ModelConfig::to_pairs`]; every key is required.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(pairs: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            pairs
                .get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("missing config key {key}")))
        }
        fn num<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = get(pairs, key)?;
            raw.parse()
                .map_err(|_| Error::Config(format!("bad value {raw:?} for {key}")))
        }
        let ratio = get(pairs, "jamba_attn_ratio")?;
        let jamba_attn_ratio = ratio
            .split_once(':')
            .and_then(|(a, m)| Some((a.parse().ok()?, m.parse().ok()?)))
            .ok_or_else(|| Error::Config(format!("bad jamba_attn_ratio {ratio:?}")))?;
        let cfg = Self {
            variant: get(pairs, "variant")?.parse()?,
            d_model: num(pairs, "d_model")?,
            n_blocks: num(pairs, "n_blocks")?,
            heads: num(pairs, "heads")?,
            n_experts: num(pairs, "n_experts")?,
            top_k: num(pairs, "top_k")?,
            d_ff: num(pairs, "d_ff")?,
            jamba_attn_ratio,
            token_chunk: num(pairs, "token_chunk")?,
            n_classes: num(pairs, "n_classes")?,
            n_features: num(pairs, "n_features")?,
            load_balance_coeff: num(pairs, "load_balance_coeff")?,
            positional: num(pairs, "positional")?,
            rms_eps: num(pairs, "rms_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `max(1, round(n·a/(a+m)))` attention blocks at indices
/// `floor((k + 0.5)·n / n_attn)`; a zero attention share gives none.
pub fn jamba_layout(n_blocks: usize, (attn, scan): (usize, usize)) -> Vec<bool> {
    let mut layout = vec![false; n_blocks];
    if attn == 0 || n_blocks == 0 {
        return layout;
    }
    let share = n_blocks as f64 * attn as f64 / (attn + scan) as f64;
    let n_attn = (share.round() as usize).clamp(1, n_blocks);
    for k in 0..n_attn {
        let idx = ((k as f64 + 0.5) * n_blocks as f64 / n_attn as f64).floor() as usize;
        layout[idx.min(n_blocks - 1)] = true;
    }
    layout
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("uam-m".parse::<Variant>().unwrap(), Variant::UamM);
        assert!("resnet".parse::<Variant>().is_err());
    }

    #[test]
    fn defaults_use_four_blocks() {
        let c = ModelConfig::default();
        assert_eq!(c.n_blocks, 4);
        c.validate().unwrap();
        assert_eq!(c.seq_len(), 106);
    }

    #[test]
    fn pairs_round_trip() {
        let c = ModelConfig {
            variant: Variant::Jamba,
            jamba_attn_ratio: (2, 5),
            load_balance_coeff: 0.1 + 0.2,
            ..ModelConfig::default()
        };
        let map = c.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        assert_eq!(ModelConfig::from_pairs(&map).unwrap(), c);
    }

    #[test]
    fn jamba_layout_spreads_attention() {
        assert_eq!(jamba_layout(4, (1, 3)), vec![false, false, true, false]);
        assert_eq!(jamba_layout(8, (1, 3)), vec![false, false, true, false, false, false, true, false]);
        assert_eq!(jamba_layout(2, (1, 7)), vec![false, true]);
        assert_eq!(jamba_layout(3, (1, 0)), vec![true; 3]);
        assert_eq!(jamba_layout(3, (0, 1)), vec![false; 3]);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let base = ModelConfig::default();
        for bad in [
            ModelConfig { heads: 3, ..base.clone() },
            ModelConfig { top_k: 5, ..base.clone() },
            ModelConfig { n_blocks: 0, ..base.clone() },
            ModelConfig { n_classes: 1, ..base.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
