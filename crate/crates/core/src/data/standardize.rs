use super::csv_io::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature affine map `(x - mean) / std`, fit on training rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics of `data`; std floored at [`STD_FLOOR`].
    pub fn fit(data: &Dataset) -> Result<Self> {
        let f = data.n_features();
        if data.is_empty() {
            return Err(Error::Data("cannot fit a standardizer on zero rows".into()));
        }
        let n = data.len() as f64;
        let mut mean = vec![0.0; f];
        for r in &data.records {
            for (m, v) in mean.iter_mut().zip(&r.features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; f];
        for r in &data.records {
            for ((s, v), m) in var.iter_mut().zip(&r.features).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    /// The no-op map, for runs with standardization switched off.
    pub fn identity(n_features: usize) -> Self {
        Self {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0) && self.std.iter().all(|&s| s == 1.0)
    }

    pub fn transform_row(&self, row: &mut [f64]) {
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        if data.n_features() != self.mean.len() {
            return Err(Error::Data(format!(
                "standardizer fit on {} features, data has {}",
                self.mean.len(),
                data.n_features()
            )));
        }
        let mut out = data.clone();
        for r in &mut out.records {
            self.transform_row(&mut r.features);
        }
        Ok(out)
    }

    /// `[2, F]`: row 0 means, row 1 standard deviations.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.mean.clone();
        data.extend_from_slice(&self.std);
        Tensor::from_parts(vec![2, self.mean.len()], data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[0] != 2 {
            return Err(Error::Checkpoint(format!("standardizer tensor has shape {:?}", t.shape())));
        }
        let f = t.shape()[1];
        Ok(Self {
            mean: t.data()[..f].to_vec(),
            std: t.data()[f..].to_vec(),
        })
    }
}
