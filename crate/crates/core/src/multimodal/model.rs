use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fusion::{
    fuse_embeddings, project_radiomics, DecoderParams, FrozenStub, ImageEncoder, ImageEncoderInterface,
    ProjectionParams, ToyConvEncoder,
};
use super::metrics::{segmentation_metrics, SegMetrics};
use super::sample::{SegSample, PROMPT_DIM};
use crate::autodiff::{join, Graph, Parameters, Tensor, Var};
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::layers::LinearParams;
use crate::model::{CellTokenBatch, UamClassifier};
use crate::train::AdamW;
use crate::uam::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Toy,
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalConfig {
    pub backbone: ModelConfig,
    pub d_img: usize,
    pub projection_hidden: usize,
    pub decoder_hidden: usize,
    pub encoder: EncoderKind,
    /// False drops every radiomics row (`L = 0`) from the fused sequence.
    pub use_radiomics: bool,
    pub freeze_backbone: bool,
}

impl Default for MultimodalConfig {
    fn default() -> Self {
        Self {
            backbone: ModelConfig {
                n_features: 8,
                n_blocks: 2,
                ..ModelConfig::default()
            },
            d_img: 16,
            projection_hidden: 32,
            decoder_hidden: 32,
            encoder: EncoderKind::Toy,
            use_radiomics: true,
            freeze_backbone: false,
        }
    }
}

/// Everything outside the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHeads {
    pub projection: ProjectionParams,
    pub encoder: ImageEncoder,
    /// Maps the fixed prompt stub into image-embedding space.
    pub prompt: LinearParams,
    pub decoder: DecoderParams,
}

impl Parameters for FusionHeads {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.projection.visit(&join(prefix, "projection"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.prompt.visit(&join(prefix, "prompt"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.projection.visit_mut(&join(prefix, "projection"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.prompt.visit_mut(&join(prefix, "prompt"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalModel {
    pub config: MultimodalConfig,
    pub backbone: UamClassifier,
    pub heads: FusionHeads,
    pub standardizer: Standardizer,
}

pub struct SampleOutput {
    /// `[H, W]` pre-sigmoid mask logits.
    pub mask_logits: Var,
    /// `[L, n_classes]`, absent when radiomics are disabled.
    pub cell_logits: Option<Var>,
}

pub struct BatchOutput {
    pub samples: Vec<SampleOutput>,
    pub aux_loss: Option<Var>,
}

impl MultimodalModel {
    pub fn init(config: &MultimodalConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let bb = &config.backbone;
        if bb.n_classes != 2 {
            return Err(Error::Config("the multimodal path classifies cells as tumor/non-tumor".into()));
        }
        let backbone = UamClassifier::init(bb, rng)?;
        let encoder = match config.encoder {
            EncoderKind::Toy => ImageEncoder::Toy(ToyConvEncoder::init(1, config.d_img, rng)),
            EncoderKind::Frozen => ImageEncoder::Frozen(FrozenStub::new(1, config.d_img, rng)),
        };
        let heads = FusionHeads {
            projection: ProjectionParams::init(bb.d_model, config.projection_hidden, config.d_img, rng),
            encoder,
            prompt: LinearParams::init(PROMPT_DIM, config.d_img, true, rng),
            decoder: DecoderParams::init(config.d_img, config.decoder_hidden, rng),
        };
        Ok(Self {
            config: config.clone(),
            backbone,
            heads,
            standardizer: Standardizer::identity(bb.n_features),
        })
    }

    fn check_sample(&self, s: &SegSample) -> Result<()> {
        s.validate()?;
        if s.prompt_stub.len() != PROMPT_DIM {
            return Err(Error::Data(format!("prompt stub has {} values, expected {PROMPT_DIM}", s.prompt_stub.len())));
        }
        if let Some(f) = s.cell_features.iter().find(|f| f.len() != self.config.backbone.n_features) {
            return Err(Error::Data(format!(
                "cell has {} features, backbone expects {}",
                f.len(),
                self.config.backbone.n_features
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &Graph, samples: &[&SegSample]) -> Result<BatchOutput> {
        for s in samples {
            self.check_sample(s)?;
        }
        let total_cells: usize = samples.iter().map(|s| s.n_cells()).sum();
        let (pooled, cell_logits, aux) = if self.config.use_radiomics && total_cells > 0 {
            let rows: Vec<Vec<f64>> = samples
                .iter()
                .flat_map(|s| s.cell_features.iter())
                .map(|f| {
                    let mut f = f.clone();
                    self.standardizer.transform_row(&mut f);
                    f
                })
                .collect();
            let labels: Vec<usize> = samples.iter().flat_map(|s| s.cell_labels.iter().copied()).collect();
            let batch = CellTokenBatch::new(
                rows.iter().map(Vec::as_slice),
                labels,
                self.config.backbone.token_chunk,
                self.config.backbone.n_classes,
            )?;
            let out = self.backbone.forward(g, &batch.tokens)?;
            (Some(out.pooled), Some(out.logits), out.aux_loss)
        } else {
            (None, None, None)
        };

        let mut outputs = Vec::with_capacity(samples.len());
        let mut offset = 0;
        for s in samples {
            let l = if pooled.is_some() { s.n_cells() } else { 0 };
            let idx: Vec<usize> = (offset..offset + l).collect();
            offset += l;
            let z_r = match pooled {
                Some(p) if l > 0 => Some(project_radiomics(g, g.gather_rows(p, &idx)?, &self.heads.projection)?),
                _ => None,
            };
            let patch = Tensor::new(vec![s.height, s.width, 1], s.patch.clone())?;
            let z_m = self.heads.encoder.encode(g, &patch)?;
            let prompt_stub = g.constant(Tensor::new(vec![1, PROMPT_DIM], s.prompt_stub.clone())?);
            let prompt = self.heads.prompt.forward(g, prompt_stub)?;
            let image_and_prompt = fuse_embeddings(g, Some(z_m), prompt)?;
            let z_c = fuse_embeddings(g, z_r, image_and_prompt)?;
            let grid = self.heads.encoder.grid(s.height, s.width);
            let mask_logits = self
                .heads
                .decoder
                .decode_logits(g, z_c, l, grid, (s.height, s.width))?;
            let cell_logits = match cell_logits {
                Some(c) if l > 0 => Some(g.gather_rows(c, &idx)?),
                _ => None,
            };
            outputs.push(SampleOutput {
                mask_logits,
                cell_logits,
            });
        }
        Ok(BatchOutput {
            samples: outputs,
            aux_loss: aux,
        })
    }

    /// Mean pixel BCE over samples + mean cell cross-entropy + MoE aux.
    pub fn loss(&self, g: &Graph, samples: &[&SegSample]) -> Result<Var> {
        let out = self.forward(g, samples)?;
        let mut seg: Option<Var> = None;
        for (o, s) in out.samples.iter().zip(samples) {
            let target = Tensor::new(
                vec![s.height, s.width],
                s.gt_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )?;
            let l = g.bce_with_logits(o.mask_logits, &target)?;
            seg = Some(match seg {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        let seg = seg.ok_or_else(|| Error::Data("empty multimodal batch".into()))?;
        let mut loss = g.scale(seg, 1.0 / samples.len() as f64);
        let cells: Vec<Var> = out.samples.iter().filter_map(|o| o.cell_logits).collect();
        if !cells.is_empty() {
            let labels: Vec<usize> = samples
                .iter()
                .zip(&out.samples)
                .filter(|(_, o)| o.cell_logits.is_some())
                .flat_map(|(s, _)| s.cell_labels.iter().copied())
                .collect();
            let stacked = cells[1..].iter().try_fold(cells[0], |acc, &c| {
                let t = g.concat(&[g.transpose(acc)?, g.transpose(c)?])?;
                g.transpose(t)
            })?;
            loss = g.add(loss, g.cross_entropy(stacked, &labels)?)?;
        }
        if let Some(aux) = out.aux_loss {
            loss = g.add(loss, aux)?;
        }
        Ok(loss)
    }

    /// Probability maps, one `H·W` vector per sample.
    pub fn predict_masks(&self, samples: &[SegSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(8) {
            let g = Graph::no_grad();
            let refs: Vec<&SegSample> = chunk.iter().collect();
            let batch = self.forward(&g, &refs)?;
            for o in batch.samples {
                out.push(g.tensor(g.sigmoid(o.mask_logits)).into_data());
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, samples: &[SegSample]) -> Result<MultimodalReport> {
        let maps = self.predict_masks(samples)?;
        let per_sample = maps
            .iter()
            .zip(samples)
            .map(|(m, s)| segmentation_metrics(m, &s.gt_mask))
            .collect::<Result<Vec<_>>>()?;
        let mean = SegMetrics::mean(&per_sample).ok_or_else(|| Error::Data("no samples to evaluate".into()))?;

        let mut hits = 0;
        let mut total = 0;
        if self.config.use_radiomics {
            for chunk in samples.chunks(8) {
                let g = Graph::no_grad();
                let refs: Vec<&SegSample> = chunk.iter().collect();
                let batch = self.forward(&g, &refs)?;
                for (o, s) in batch.samples.iter().zip(chunk) {
                    if let Some(c) = o.cell_logits {
                        let logits = g.tensor(c);
                        for (row, &label) in logits.data().chunks(logits.last_dim()).zip(&s.cell_labels) {
                            hits += usize::from(crate::train::argmax(row) == label);
                            total += 1;
                        }
                    }
                }
            }
        }
        Ok(MultimodalReport {
            segmentation: mean,
            per_sample,
            cell_accuracy: (total > 0).then(|| hits as f64 / total as f64),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalReport {
    /// Mean over samples of each per-sample metric.
    pub segmentation: SegMetrics,
    pub per_sample: Vec<SegMetrics>,
    pub cell_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MultimodalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Fits the cell-feature standardizer on `samples`, then trains every part
/// jointly with one optimizer per parameter group. The backbone group is
/// skipped when frozen. Returns the loss of every batch.
pub fn train_multimodal(
    samples: &[SegSample],
    model: &mut MultimodalModel,
    cfg: &MultimodalTrainConfig,
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    model.standardizer = fit_cell_standardizer(samples, model.config.backbone.n_features)?;
    let mut head_opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut backbone_opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SegSample> = idx.iter().map(|&i| &samples[i]).collect();
            let g = Graph::new();
            let loss = model.loss(&g, &batch)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Data(format!("multimodal loss became {value} at epoch {epoch}")));
            }
            let grads = g.backward(loss)?;
            head_opt.step(&mut model.heads, &grads);
            if !model.config.freeze_backbone {
                backbone_opt.step(&mut model.backbone, &grads);
            }
            trace.push(value);
        }
    }
    Ok(trace)
}

fn fit_cell_standardizer(samples: &[SegSample], n_features: usize) -> Result<Standardizer> {
    let rows: Vec<&Vec<f64>> = samples.iter().flat_map(|s| s.cell_features.iter()).collect();
    if rows.is_empty() {
        return Ok(Standardizer::identity(n_features));
    }
    let data = crate::data::Dataset {
        feature_names: (0..n_features).map(|j| format!("f{j}")).collect(),
        vocab: crate::data::LabelVocab::from_classes(vec!["x".into()])?,
        records: rows
            .into_iter()
            .map(|f| crate::data::CellRecord {
                cell_id: String::new(),
                image_id: String::new(),
                individual_id: String::new(),
                label: 0,
                features: f.clone(),
            })
            .collect(),
        dropped: 0,
    };
    Standardizer::fit(&data)
}
