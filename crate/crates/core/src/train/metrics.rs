use std::fmt::Write as _;

use crate::data::LabelVocab;
use crate::error::{Error, Result};

/// Mann-Whitney U over `n_pos·n_neg`, ties counted one half, computed from
/// average ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data(format!(
            "AUC undefined: {n_pos} positive and {n_neg} negative examples"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("AUC undefined: NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; a tied run gets the mean of its positions, which is
    // always a multiple of one half and therefore exact.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum F1Kind {
    /// Binary F1 of the named positive class.
    Binary(String),
    Macro,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub f1_kind: F1Kind,
    /// Binary AUC for two classes, one-vs-rest macro otherwise.
    pub auc: Option<f64>,
    /// Positive-class-vs-rest AUC; equals `auc` for two classes.
    pub positive_vs_rest_auc: Option<f64>,
    /// Why an AUC is missing, when one is.
    pub auc_note: Option<String>,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    ratio(hits, labels.len())
}

/// `2PR/(P+R)`, zero when both are zero.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

impl MetricsReport {
    /// `probs[i]` is the class distribution predicted for example `i`.
    pub fn from_probabilities(probs: &[Vec<f64>], labels: &[usize], vocab: &LabelVocab) -> Result<Self> {
        let k = vocab.len();
        if probs.len() != labels.len() {
            return Err(Error::Data(format!("{} predictions, {} labels", probs.len(), labels.len())));
        }
        if probs.iter().any(|p| p.len() != k) || labels.iter().any(|&l| l >= k) {
            return Err(Error::Data(format!("predictions or labels outside {k} classes")));
        }
        let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let confusion = confusion_matrix(&preds, labels, k);
        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                ClassMetrics {
                    name: vocab.name(c).to_string(),
                    precision: ratio(tp, predicted),
                    recall: ratio(tp, support),
                    f1: f1_score(tp, predicted - tp, support - tp),
                    support,
                }
            })
            .collect();
        let trace: usize = (0..k).map(|c| confusion[c][c]).sum();
        let accuracy = ratio(trace, labels.len());

        let pos = vocab.positive_class();
        let (f1, f1_kind) = if k == 2 {
            (per_class[pos].f1, F1Kind::Binary(vocab.name(pos).to_string()))
        } else {
            (per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64, F1Kind::Macro)
        };

        let one_vs_rest = |c: usize| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let bin: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            roc_auc(&scores, &bin)
        };
        let mut notes = Vec::new();
        let positive_vs_rest_auc = match one_vs_rest(pos) {
            Ok(a) => Some(a),
            Err(e) => {
                notes.push(format!("{}: {e}", vocab.name(pos)));
                None
            }
        };
        let auc = if k == 2 {
            positive_vs_rest_auc
        } else {
            let mut defined = Vec::new();
            for c in 0..k {
                match one_vs_rest(c) {
                    Ok(a) => defined.push(a),
                    Err(e) if c != pos => notes.push(format!("{}: {e}", vocab.name(c))),
                    Err(_) => {}
                }
            }
            if defined.is_empty() {
                None
            } else {
                Some(defined.iter().sum::<f64>() / defined.len() as f64)
            }
        };
        Ok(Self {
            n: labels.len(),
            accuracy,
            f1,
            f1_kind,
            auc,
            positive_vs_rest_auc,
            auc_note: if notes.is_empty() { None } else { Some(notes.join("; ")) },
            per_class,
            confusion,
        })
    }

    pub fn f1_label(&self) -> String {
        match &self.f1_kind {
            F1Kind::Binary(name) => format!("binary(positive={name})"),
            F1Kind::Macro => "macro".into(),
        }
    }

    pub fn csv_header() -> &'static str {
        "n,accuracy,f1,f1_kind,auc,positive_vs_rest_auc"
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.n,
            self.accuracy,
            self.f1,
            self.f1_label(),
            opt(self.auc),
            opt(self.positive_vs_rest_auc)
        )
    }

    pub fn to_report(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map(|a| format!("{a:.6}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(s, "examples: {}", self.n);
        let _ = writeln!(s, "accuracy: {:.6}", self.accuracy);
        let _ = writeln!(s, "f1 [{}]: {:.6}", self.f1_label(), self.f1);
        let auc_kind = if self.per_class.len() == 2 { "binary" } else { "one-vs-rest macro" };
        let _ = writeln!(s, "auc [{auc_kind}]: {}", opt(self.auc));
        if self.per_class.len() > 2 {
            let _ = writeln!(s, "auc [positive vs rest]: {}", opt(self.positive_vs_rest_auc));
        }
        if let Some(note) = &self.auc_note {
            let _ = writeln!(s, "auc note: {note}");
        }
        let _ = writeln!(s, "per class (precision recall f1 support):");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "  {:<16} {:.6} {:.6} {:.6} {}",
                c.name, c.precision, c.recall, c.f1, c.support
            );
        }
        let _ = writeln!(s, "confusion (rows true, columns predicted):");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "  {}", cells.join(" "));
        }
        s
    }
}
