use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{join, Graph, Parameters, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::LinearParams;
use crate::uam::{Block, ModelConfig};

/// Zero-pads `features` to a multiple of `token_chunk` and reshapes to
/// `[T, token_chunk]`, row-major.
pub fn tokenize_cell(features: &[f64], token_chunk: usize) -> Tensor {
    let chunk = token_chunk.max(1);
    let t = features.len().div_ceil(chunk).max(1);
    let mut data = features.to_vec();
    data.resize(t * chunk, 0.0);
    Tensor::from_parts(vec![t, chunk], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellTokenBatch {
    /// `[B, T, token_chunk]`
    pub tokens: Tensor,
    pub labels: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl CellTokenBatch {
    pub fn new<'a>(
        rows: impl IntoIterator<Item = &'a [f64]>,
        labels: Vec<usize>,
        token_chunk: usize,
        n_classes: usize,
    ) -> Result<Self> {
        let mut data = Vec::new();
        let mut t = None;
        let mut b = 0;
        for row in rows {
            let tok = tokenize_cell(row, token_chunk);
            let steps = tok.shape()[0];
            if *t.get_or_insert(steps) != steps {
                return Err(Error::Data(format!(
                    "cell {b} has {} features; earlier cells had a different count",
                    row.len()
                )));
            }
            data.extend_from_slice(tok.data());
            b += 1;
        }
        let t = t.ok_or_else(|| Error::Data("empty batch".into()))?;
        if labels.len() != b {
            return Err(Error::Data(format!("{b} cells but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Self {
            tokens: Tensor::new(vec![b, t, token_chunk.max(1)], data)?,
            labels,
            lengths: vec![t; b],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean over tokens, then a linear map to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub proj: LinearParams,
}

impl ClassifierHead {
    pub fn forward(&self, g: &Graph, pooled: Var) -> Result<Var> {
        self.proj.forward(g, pooled)
    }
}

impl Parameters for ClassifierHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.proj.visit(&join(prefix, "proj"), f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.proj.visit_mut(&join(prefix, "proj"), f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UamClassifier {
    pub config: ModelConfig,
    pub lift: LinearParams,
    pub blocks: Vec<Block>,
    pub head: ClassifierHead,
}

pub struct ClassifierOutput {
    /// `[B, d]` mean-pooled token embeddings.
    pub pooled: Var,
    /// `[B, n_classes]`
    pub logits: Var,
    /// Sum of every MoE auxiliary loss, if any MoE ran.
    pub aux_loss: Option<Var>,
}

impl UamClassifier {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let lift = LinearParams::init(config.token_chunk, d, true, rng);
        let blocks = (0..config.n_blocks)
            .map(|i| Block::init(config, i, rng))
            .collect::<Result<_>>()?;
        let head = ClassifierHead {
            proj: LinearParams::init(d, config.n_classes, true, rng),
        };
        Ok(Self {
            config: config.clone(),
            lift,
            blocks,
            head,
        })
    }

    /// Every learnable set to zero, gains included.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        let mut m = Self::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        m.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        Ok(m)
    }

    pub fn forward(&self, g: &Graph, tokens: &Tensor) -> Result<ClassifierOutput> {
        let shape = tokens.shape();
        if shape.len() != 3 || shape[2] != self.config.token_chunk {
            return Err(Error::shape(
                "classifier input",
                shape,
                &[0, self.config.seq_len(), self.config.token_chunk],
            ));
        }
        let x = g.constant(tokens.clone());
        let mut h = self.lift.forward(g, x)?;
        if self.config.positional {
            let pe = g.constant(sinusoidal_positions(shape[1], self.config.d_model));
            h = g.add(h, pe)?;
        }
        let mut aux: Option<Var> = None;
        for block in &self.blocks {
            let (next, losses) = block.forward(g, h)?;
            h = next;
            for l in losses {
                aux = Some(match aux {
                    Some(a) => g.add(a, l)?,
                    None => l,
                });
            }
        }
        let pooled = g.mean_axis(h, 1, false)?;
        let logits = self.head.forward(g, pooled)?;
        Ok(ClassifierOutput {
            pooled,
            logits,
            aux_loss: aux,
        })
    }

    pub fn forward_classify(&self, g: &Graph, batch: &CellTokenBatch) -> Result<(Var, Option<Var>)> {
        let out = self.forward(g, &batch.tokens)?;
        Ok((out.logits, out.aux_loss))
    }
}

impl Parameters for UamClassifier {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.lift.visit(&join(prefix, "lift"), f);
        self.blocks.visit(&join(prefix, "blocks"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.lift.visit_mut(&join(prefix, "lift"), f);
        self.blocks.visit_mut(&join(prefix, "blocks"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// `pe[t, 2i] = sin(t / 10000^(2i/d))`, `pe[t, 2i+1] = cos(..)`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for j in 0..d {
            let pair = (j / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            data[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![t, d], data)
}

/// Mean cross-entropy over the batch plus every auxiliary loss.
pub fn cross_entropy_loss(g: &Graph, logits: Var, labels: &[usize], aux_loss: Option<Var>) -> Result<Var> {
    let ce = g.cross_entropy(logits, labels)?;
    match aux_loss {
        Some(a) => g.add(ce, a),
        None => Ok(ce),
    }
}
