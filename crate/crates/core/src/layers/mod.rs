//! Neural building blocks: projection, RMSNorm, the gated scan,
//! attention, feed-forward experts and top-k mixture-of-experts routing.

mod attention;
mod linear;
mod moe;
mod norm;
mod scan;

pub use attention::AttentionParams;
pub use linear::LinearParams;
pub use moe::{gelu, ExpertParams, MoeOutput, MoeParams, DEFAULT_LOAD_BALANCE_COEFF, GELU_SIGMOID_SLOPE};
pub use norm::{RmsNormParams, DEFAULT_RMS_EPS};
pub use scan::SsmParams;
