use serde::{Deserialize, Serialize};

use super::Labels;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MicroF1,
}

impl Metric {
    pub fn for_labels(labels: &Labels) -> Self {
        match labels {
            Labels::Single { .. } => Metric::Accuracy,
            Labels::Multi { .. } => Metric::MicroF1,
        }
    }
}

/// Argmax accuracy (single-label) or micro-F1 at logit 0, i.e. sigmoid 0.5
/// (multi-hot), over the rows in `rows`.
pub fn evaluate(logits: &Tensor, labels: &Labels, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Argument("empty evaluation mask".into()));
    }
    if logits.shape().len() != 2 || logits.cols() != labels.num_classes() {
        return Err(Error::dim(
            "evaluate",
            format!("logits {:?} for {} classes", logits.shape(), labels.num_classes()),
        ));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= logits.rows()) {
        return Err(Error::Index {
            op: "evaluate",
            index: bad,
            bound: logits.rows(),
        });
    }
    match labels {
        Labels::Single { index, .. } => {
            let correct = rows.iter().filter(|&&r| argmax(logits.row(r)) == index[r]).count();
            Ok(correct as f64 / rows.len() as f64)
        }
        Labels::Multi { targets } => {
            let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
            for &r in rows {
                for (&z, &t) in logits.row(r).iter().zip(targets.row(r)) {
                    match (z > 0.0, t > 0.5) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fnn += 1,
                        _ => {}
                    }
                }
            }
            let denom = 2 * tp + fp + fnn;
            Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
