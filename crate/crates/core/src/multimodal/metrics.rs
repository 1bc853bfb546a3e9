use crate::error::{Error, Result};

/// Probabilities at or above this value count as tumor.
pub const SEG_THRESHOLD: f64 = 0.5;

pub fn binarize(prob: &[f64]) -> Vec<bool> {
    prob.iter().map(|&p| p >= SEG_THRESHOLD).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegMetrics {
    /// Pixel precision of the tumor class.
    pub precision: f64,
    pub c_iou: f64,
    pub m_iou: f64,
    pub c_dice: f64,
    pub m_dice: f64,
}

impl SegMetrics {
    pub fn mean(all: &[SegMetrics]) -> Option<SegMetrics> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        let sum = |f: fn(&SegMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Some(SegMetrics {
            precision: sum(|m| m.precision),
            c_iou: sum(|m| m.c_iou),
            m_iou: sum(|m| m.m_iou),
            c_dice: sum(|m| m.c_dice),
            m_dice: sum(|m| m.m_dice),
        })
    }

    pub fn csv_header() -> &'static str {
        "precision,c_iou,m_iou,c_dice,m_dice"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.precision, self.c_iou, self.m_iou, self.c_dice, self.m_dice
        )
    }
}

/// `|P∩G| / |P∪G|`; an empty union scores 1 (both masks empty).
fn iou(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `2|P∩G| / (|P|+|G|)`, with the same empty convention as IoU.
fn dice(inter: usize, p: usize, g: usize) -> f64 {
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Metrics for one binary prediction against one binary ground truth.
pub fn segmentation_metrics_binary(pred: &[bool], gt: &[bool]) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::shape("segmentation_metrics", &[pred.len()], &[gt.len()]));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let tumor_iou = iou(tp, tp + fp + fn_);
    let back_iou = iou(tn, tn + fp + fn_);
    let tumor_dice = dice(tp, tp + fp, tp + fn_);
    let back_dice = dice(tn, tn + fn_, tn + fp);
    let precision = if tp + fp == 0 {
        if tp + fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    Ok(SegMetrics {
        precision,
        c_iou: tumor_iou,
        m_iou: (tumor_iou + back_iou) / 2.0,
        c_dice: tumor_dice,
        m_dice: (tumor_dice + back_dice) / 2.0,
    })
}

/// Binarizes `pred_prob` at [`SEG_THRESHOLD`] and scores it against `gt`.
pub fn segmentation_metrics(pred_prob: &[f64], gt: &[bool]) -> Result<SegMetrics> {
    segmentation_metrics_binary(&binarize(pred_prob), gt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellLabel {
    Tumor,
    NonTumor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellLabelOutcome {
    pub label: CellLabel,
    /// `None` when the cell mask is empty.
    pub coverage: Option<f64>,
}

/// Tumor iff strictly more than half of the cell lies inside the tumor
/// mask. An empty cell is non-tumor, with `coverage` left empty so callers
/// can warn.
pub fn cell_label_from_segmentation(cell_mask: &[bool], tumor_mask: &[bool]) -> Result<CellLabelOutcome> {
    if cell_mask.len() != tumor_mask.len() {
        return Err(Error::shape(
            "cell_label_from_segmentation",
            &[cell_mask.len()],
            &[tumor_mask.len()],
        ));
    }
    let area = cell_mask.iter().filter(|&&c| c).count();
    if area == 0 {
        return Ok(CellLabelOutcome {
            label: CellLabel::NonTumor,
            coverage: None,
        });
    }
    let covered = cell_mask.iter().zip(tumor_mask).filter(|(&c, &t)| c && t).count();
    // Integer form of covered/area > 1/2 avoids any rounding at the boundary.
    let label = if 2 * covered > area {
        CellLabel::Tumor
    } else {
        CellLabel::NonTumor
    };
    Ok(CellLabelOutcome {
        label,
        coverage: Some(covered as f64 / area as f64),
    })
}
