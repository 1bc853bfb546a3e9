use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::csv_io::{CellRecord, Dataset, LabelVocab};
use crate::error::{Error, Result};

/// Cells per synthetic image before a new image id starts.
pub const CELLS_PER_IMAGE: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_individuals: usize,
    pub cells_per_individual: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// 0 gives linearly separable classes; 1 leaves only the product signal.
    pub difficulty: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_individuals: 10,
            cells_per_individual: 100,
            n_features: 106,
            n_classes: 2,
            difficulty: 0.0,
            seed: 0,
        }
    }
}

/// Distance scale of the class means, in noise standard deviations.
const MEAN_RADIUS: f64 = 6.0;
/// Per-feature amplitude of the sign-product signal.
const PRODUCT_AMPLITUDE: f64 = 1.5;
const INDIVIDUAL_SHIFT: f64 = 0.3;

pub fn class_names(n_classes: usize) -> Vec<String> {
    if n_classes == 2 {
        vec!["non-tumor".into(), "tumor".into()]
    } else {
        let width = n_classes.to_string().len();
        (1..=n_classes).map(|c| format!("type{c:0width$}")).collect()
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class-conditional Gaussian cells with a nonlinear component.
///
/// Each class has a random mean direction (scaled by `1 - difficulty`) and
/// its own noise scale. On top of that, the two halves of the feature
/// vector each carry a random sign `s_a`, `s_b`, with `s_a·s_b` fixed by
/// the class parity and amplitude scaled by `difficulty`. That part has the
/// same per-feature mean in every class, so no linear model can use it.
/// Every feature then gets its own offset and scale spanning three decades.
pub fn synthesize_dataset(spec: &SynthSpec) -> Result<Dataset> {
    let SynthSpec {
        n_individuals,
        cells_per_individual,
        n_features: f,
        n_classes,
        difficulty,
        seed,
    } = *spec;
    if n_individuals == 0 || cells_per_individual == 0 || f == 0 || n_classes == 0 {
        return Err(Error::Config("synthetic dataset counts must all be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::Config(format!("difficulty {difficulty} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let z: Vec<f64> = (0..f).map(|_| normal(&mut rng)).collect();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            z.into_iter().map(|v| v / norm * MEAN_RADIUS).collect()
        })
        .collect();
    let noise: Vec<f64> = (0..n_classes).map(|_| rng.random_range(0.75..1.25)).collect();
    let scales: Vec<f64> = (0..f).map(|_| 10f64.powf(rng.random_range(-1.0..2.0))).collect();
    let offsets: Vec<f64> = (0..f).map(|_| rng.random_range(-5.0..5.0)).collect();
    let half = f / 2;

    let width = n_individuals.to_string().len().max(3);
    let mut records = Vec::with_capacity(n_individuals * cells_per_individual);
    for ind in 0..n_individuals {
        let individual_id = format!("ind{ind:0width$}");
        let shift: Vec<f64> = (0..f).map(|_| INDIVIDUAL_SHIFT * normal(&mut rng)).collect();
        for c in 0..cells_per_individual {
            let label = rng.random_range(0..n_classes);
            let s_a: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let s_b = if label % 2 == 1 { s_a } else { -s_a };
            let features = (0..f)
                .map(|j| {
                    let sign = if j < half { s_a } else { s_b };
                    let signal = (1.0 - difficulty) * means[label][j] + difficulty * PRODUCT_AMPLITUDE * sign;
                    let raw = signal + shift[j] + noise[label] * normal(&mut rng);
                    offsets[j] * scales[j] + raw * scales[j]
                })
                .collect();
            records.push(CellRecord {
                cell_id: format!("{individual_id}-c{c:05}"),
                image_id: format!("{individual_id}-img{:03}", c / CELLS_PER_IMAGE),
                individual_id: individual_id.clone(),
                label,
                features,
            });
        }
    }
    Ok(Dataset {
        feature_names: (1..=f).map(|j| format!("f{j:03}")).collect(),
        vocab: LabelVocab::from_classes(class_names(n_classes))?,
        records,
        dropped: 0,
    })
}
