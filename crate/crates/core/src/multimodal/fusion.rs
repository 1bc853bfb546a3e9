use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{join, Graph, Parameters, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{gelu, LinearParams};

/// Side of the square pixel block each grid token covers.
pub const ENCODER_STRIDE: usize = 4;

/// `[H, W, C]` to `[P, stride²·C]`, grid cells in row-major order.
pub fn patchify(patch: &Tensor, stride: usize) -> Result<Tensor> {
    let sh = patch.shape();
    if sh.len() != 3 || sh[0] % stride != 0 || sh[1] % stride != 0 {
        return Err(Error::shape("patchify", sh, &[stride, stride, 0]));
    }
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let (gh, gw) = (h / stride, w / stride);
    let d = patch.data();
    let mut out = Vec::with_capacity(h * w * c);
    for gr in 0..gh {
        for gc in 0..gw {
            for r in gr * stride..(gr + 1) * stride {
                for col in gc * stride..(gc + 1) * stride {
                    out.extend_from_slice(&d[(r * w + col) * c..(r * w + col + 1) * c]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, stride * stride * c], out)
}

/// `encode(patch [H×W×C]) -> [P × d_img]`
pub trait ImageEncoderInterface {
    fn encode(&self, g: &Graph, patch: &Tensor) -> Result<Var>;
    fn d_img(&self) -> usize;
    /// `(rows, cols)` of the token grid for an `h × w` patch.
    fn grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h / ENCODER_STRIDE, w / ENCODER_STRIDE)
    }
}

/// Learned strided patch embedding followed by the expert nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConvEncoder {
    pub proj: LinearParams,
}

impl ToyConvEncoder {
    pub fn init(channels: usize, d_img: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: LinearParams::init(ENCODER_STRIDE * ENCODER_STRIDE * channels, d_img, true, rng),
        }
    }
}

impl ImageEncoderInterface for ToyConvEncoder {
    fn encode(&self, g: &Graph, patch: &Tensor) -> Result<Var> {
        let x = g.constant(patchify(patch, ENCODER_STRIDE)?);
        Ok(gelu(g, self.proj.forward(g, x)?))
    }

    fn d_img(&self) -> usize {
        self.proj.d_out()
    }
}

impl Parameters for ToyConvEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.proj.visit(&join(prefix, "proj"), f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.proj.visit_mut(&join(prefix, "proj"), f)
    }
}

/// Fixed random projection of each pixel block; nothing here trains.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenStub {
    pub weight: Tensor,
}

impl FrozenStub {
    pub fn new(channels: usize, d_img: usize, rng: &mut impl Rng) -> Self {
        let k = ENCODER_STRIDE * ENCODER_STRIDE * channels;
        let scale = 1.0 / (k as f64).sqrt();
        let data = (0..k * d_img)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Self {
            weight: Tensor::new(vec![k, d_img], data).expect("shape matches data"),
        }
    }
}

impl ImageEncoderInterface for FrozenStub {
    fn encode(&self, g: &Graph, patch: &Tensor) -> Result<Var> {
        let x = g.constant(patchify(patch, ENCODER_STRIDE)?);
        let w = g.constant(self.weight.clone());
        Ok(gelu(g, g.matmul(x, w)?))
    }

    fn d_img(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageEncoder {
    Toy(ToyConvEncoder),
    Frozen(FrozenStub),
}

impl ImageEncoderInterface for ImageEncoder {
    fn encode(&self, g: &Graph, patch: &Tensor) -> Result<Var> {
        match self {
            ImageEncoder::Toy(e) => e.encode(g, patch),
            ImageEncoder::Frozen(e) => e.encode(g, patch),
        }
    }

    fn d_img(&self) -> usize {
        match self {
            ImageEncoder::Toy(e) => e.d_img(),
            ImageEncoder::Frozen(e) => e.d_img(),
        }
    }
}

impl Parameters for ImageEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let ImageEncoder::Toy(e) = self {
            e.visit(prefix, f)
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let ImageEncoder::Toy(e) = self {
            e.visit_mut(prefix, f)
        }
    }
}

/// Two-layer perceptron `d_uam -> hidden -> d_img`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub hidden: LinearParams,
    pub out: LinearParams,
}

impl ProjectionParams {
    pub fn new(hidden: LinearParams, out: LinearParams) -> Result<Self> {
        if hidden.d_out() != out.d_in() {
            return Err(Error::shape(
                "projection",
                &[hidden.d_in(), hidden.d_out()],
                &[out.d_in(), out.d_out()],
            ));
        }
        Ok(Self { hidden, out })
    }

    pub fn init(d_uam: usize, hidden: usize, d_img: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: LinearParams::init(d_uam, hidden, true, rng),
            out: LinearParams::init(hidden, d_img, true, rng),
        }
    }

    pub fn d_img(&self) -> usize {
        self.out.d_out()
    }
}

impl Parameters for ProjectionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// `z_r = out(gelu(hidden(e_r)))`, row by row.
pub fn project_radiomics(g: &Graph, e_r: Var, p: &ProjectionParams) -> Result<Var> {
    let h = gelu(g, p.hidden.forward(g, e_r)?);
    p.out.forward(g, h)
}

/// Stacks radiomics rows above image rows: `[(L+P) × d]`.
pub fn fuse_embeddings(g: &Graph, z_r: Option<Var>, z_m: Var) -> Result<Var> {
    let Some(z_r) = z_r else {
        return Ok(z_m);
    };
    let (sr, sm) = (g.shape(z_r), g.shape(z_m));
    if sr.len() != 2 || sm.len() != 2 || sr[1] != sm[1] {
        return Err(Error::shape("fuse_embeddings", &sr, &sm));
    }
    if sr[0] == 0 {
        return Ok(z_m);
    }
    let stacked = g.concat(&[g.transpose(z_r)?, g.transpose(z_m)?])?;
    g.transpose(stacked)
}

/// Grid-token decoder: every image token, shifted by the prompt row,
/// attends over the radiomics rows; `[token; context]` then goes through a
/// small perceptron to one logit per grid cell, which is upsampled to the
/// patch by nearest neighbour.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub w_q: LinearParams,
    pub w_k: LinearParams,
    pub w_v: LinearParams,
    pub mlp_hidden: LinearParams,
    pub mlp_out: LinearParams,
}

impl DecoderParams {
    pub fn init(d_img: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_q: LinearParams::init(d_img, d_img, true, rng),
            w_k: LinearParams::init(d_img, d_img, true, rng),
            w_v: LinearParams::init(d_img, d_img, true, rng),
            mlp_hidden: LinearParams::init(2 * d_img, hidden, true, rng),
            mlp_out: LinearParams::init(hidden, 1, true, rng),
        }
    }

    pub fn zeros(d_img: usize, hidden: usize) -> Self {
        Self {
            w_q: LinearParams::zeros(d_img, d_img, true),
            w_k: LinearParams::zeros(d_img, d_img, true),
            w_v: LinearParams::zeros(d_img, d_img, true),
            mlp_hidden: LinearParams::zeros(2 * d_img, hidden, true),
            mlp_out: LinearParams::zeros(hidden, 1, true),
        }
    }

    pub fn d_img(&self) -> usize {
        self.w_q.d_in()
    }

    /// Pre-sigmoid `[H, W]` logits. `z_c` holds `n_radiomics` rows, then
    /// `grid.0·grid.1` image rows, then one prompt row.
    pub fn decode_logits(
        &self,
        g: &Graph,
        z_c: Var,
        n_radiomics: usize,
        grid: (usize, usize),
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let sh = g.shape(z_c);
        let p = grid.0 * grid.1;
        let d = self.d_img();
        if sh.len() != 2 || sh[0] != n_radiomics + p + 1 || sh[1] != d {
            return Err(Error::shape("decode_mask", &sh, &[n_radiomics + p + 1, d]));
        }
        let (h, w) = out_hw;
        if grid.0 == 0 || grid.1 == 0 || h % grid.0 != 0 || w % grid.1 != 0 {
            return Err(Error::Config(format!(
                "grid {}x{} does not tile a {h}x{w} mask",
                grid.0, grid.1
            )));
        }
        let rows = |range: std::ops::Range<usize>| g.gather_rows(z_c, &range.collect::<Vec<_>>());
        let image = rows(n_radiomics..n_radiomics + p)?;
        let prompt = g.reshape(rows(n_radiomics + p..n_radiomics + p + 1)?, &[d])?;
        let context = if n_radiomics == 0 {
            g.constant(Tensor::zeros(&[p, d]))
        } else {
            let radiomics = rows(0..n_radiomics)?;
            let q = self.w_q.forward(g, g.add(image, prompt)?)?;
            let k = self.w_k.forward(g, radiomics)?;
            let v = self.w_v.forward(g, radiomics)?;
            let scores = g.scale(g.matmul(q, g.transpose(k)?)?, 1.0 / (d as f64).sqrt());
            g.matmul(g.softmax(scores), v)?
        };
        let joined = g.concat(&[image, context])?;
        let hidden = gelu(g, self.mlp_hidden.forward(g, joined)?);
        let logits = self.mlp_out.forward(g, hidden)?;
        let (sy, sx) = (h / grid.0, w / grid.1);
        let index = (0..h * w).map(|i| (i / w / sy) * grid.1 + (i % w) / sx).collect();
        g.take(logits, index, &[h, w])
    }
}

impl Parameters for DecoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.w_q.visit(&join(prefix, "w_q"), f);
        self.w_k.visit(&join(prefix, "w_k"), f);
        self.w_v.visit(&join(prefix, "w_v"), f);
        self.mlp_hidden.visit(&join(prefix, "mlp_hidden"), f);
        self.mlp_out.visit(&join(prefix, "mlp_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.w_q.visit_mut(&join(prefix, "w_q"), f);
        self.w_k.visit_mut(&join(prefix, "w_k"), f);
        self.w_v.visit_mut(&join(prefix, "w_v"), f);
        self.mlp_hidden.visit_mut(&join(prefix, "mlp_hidden"), f);
        self.mlp_out.visit_mut(&join(prefix, "mlp_out"), f);
    }
}

/// Probability map `[H, W]` in `[0, 1]`.
pub fn decode_mask(
    g: &Graph,
    z_c: Var,
    decoder: &DecoderParams,
    n_radiomics: usize,
    grid: (usize, usize),
    out_hw: (usize, usize),
) -> Result<Var> {
    Ok(g.sigmoid(decoder.decode_logits(g, z_c, n_radiomics, grid, out_hw)?))
}
