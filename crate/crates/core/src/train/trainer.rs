use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::MetricsReport;
use super::optim::AdamW;
use crate::autodiff::{Graph, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::LinearParams;
use crate::model::{cross_entropy_loss, CellTokenBatch, UamClassifier};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Evaluate every this many epochs; 0 disables intermediate metrics.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            seed: 0,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} is invalid", self.weight_decay)));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.learning_rate, self.weight_decay)
    }
}

/// Record order for `epoch`: a ChaCha stream keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn make_batch(data: &Dataset, idx: &[usize], token_chunk: usize) -> Result<CellTokenBatch> {
    CellTokenBatch::new(
        idx.iter().map(|&i| data.records[i].features.as_slice()),
        idx.iter().map(|&i| data.records[i].label).collect(),
        token_chunk,
        data.n_classes(),
    )
}

fn check_compatible(model: &UamClassifier, data: &Dataset) -> Result<()> {
    let cfg = &model.config;
    if data.n_features() != cfg.n_features {
        return Err(Error::Data(format!(
            "data has {} features, model expects {}",
            data.n_features(),
            cfg.n_features
        )));
    }
    if data.n_classes() != cfg.n_classes {
        return Err(Error::Data(format!(
            "data has {} classes, model expects {}",
            data.n_classes(),
            cfg.n_classes
        )));
    }
    Ok(())
}

/// One pass over `data` in the `(seed, epoch)` order. Returns the loss of
/// every batch.
pub fn train_epoch(
    model: &mut UamClassifier,
    opt: &mut AdamW,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_compatible(model, data)?;
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let mut losses = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
    for idx in order.chunks(cfg.batch_size) {
        let batch = make_batch(data, idx, model.config.token_chunk)?;
        let g = Graph::new();
        let (logits, aux) = model.forward_classify(&g, &batch)?;
        let loss = cross_entropy_loss(&g, logits, &batch.labels, aux)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Data(format!("loss became {value} at epoch {epoch}")));
        }
        let grads = g.backward(loss)?;
        opt.step(model, &grads);
        losses.push(value);
    }
    Ok(losses)
}

/// `cfg.epochs` epochs with a fresh optimizer. Returns the batch losses of
/// each epoch.
pub fn train_model(model: &mut UamClassifier, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
    let mut opt = cfg.optimizer();
    (0..cfg.epochs as u64)
        .map(|epoch| train_epoch(model, &mut opt, data, cfg, epoch))
        .collect()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Class probabilities for every record, in dataset order.
pub fn predict_proba(model: &UamClassifier, data: &Dataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    check_compatible(model, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = make_batch(data, chunk, model.config.token_chunk)?;
        let g = Graph::no_grad();
        let (logits, _) = model.forward_classify(&g, &batch)?;
        let logits = g.tensor(logits);
        out.extend(logits.data().chunks(logits.last_dim()).map(softmax_row));
    }
    Ok(out)
}

pub fn evaluate(model: &UamClassifier, data: &Dataset) -> Result<MetricsReport> {
    let probs = predict_proba(model, data, 256)?;
    MetricsReport::from_probabilities(&probs, &data.labels(), &data.vocab)
}

/// Multinomial logistic regression on raw (already standardized) features,
/// full-batch AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticBaseline {
    pub linear: LinearParams,
}

impl LogisticBaseline {
    pub fn fit(data: &Dataset, epochs: usize, learning_rate: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut linear = LinearParams::init(data.n_features(), data.n_classes(), true, &mut rng);
        let x = features_tensor(data)?;
        let labels = data.labels();
        let mut opt = AdamW::new(learning_rate, 0.0);
        for _ in 0..epochs {
            let g = Graph::new();
            let xv = g.constant(x.clone());
            let logits = linear.forward(&g, xv)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let grads = g.backward(loss)?;
            opt.step(&mut linear, &grads);
        }
        Ok(Self { linear })
    }

    pub fn predict_proba(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        let g = Graph::no_grad();
        let xv = g.constant(features_tensor(data)?);
        let logits = g.tensor(self.linear.forward(&g, xv)?);
        Ok(logits.data().chunks(logits.last_dim()).map(softmax_row).collect())
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<MetricsReport> {
        MetricsReport::from_probabilities(&self.predict_proba(data)?, &data.labels(), &data.vocab)
    }
}

fn features_tensor(data: &Dataset) -> Result<Tensor> {
    let f = data.n_features();
    let flat: Vec<f64> = data.records.iter().flat_map(|r| r.features.iter().copied()).collect();
    Tensor::new(vec![data.len(), f], flat)
}
