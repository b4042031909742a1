use serde::{Deserialize, Serialize};

use super::NnError;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Multi-class hinge (SVM) loss; squared by default.
    Hinge { squared: bool },
    SoftmaxCrossEntropy,
}

fn check(scores: &DenseTensor, labels: &[usize]) -> Result<(usize, usize), NnError> {
    let &[batch, classes] = scores.shape().dims() else {
        return Err(NnError::Shape(format!("scores must be [batch, classes], got {}", scores.shape())));
    };
    if labels.len() != batch {
        return Err(NnError::Shape(format!("{} labels for batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(NnError::LabelOutOfRange { label: bad, classes });
    }
    Ok((batch, classes))
}

/// `mean_b sum_{j != y} max(0, 1 + s_j - s_y)^p` with `p = 2` when squared,
/// `p = 1` otherwise, and its (sub)gradient.
pub fn hinge_loss(scores: &DenseTensor, labels: &[usize], squared: bool) -> Result<(f64, Vec<f32>), NnError> {
    let (batch, classes) = check(scores, labels)?;
    let s = scores.data();
    let mut grad = vec![0.0f32; s.len()];
    let mut total = 0.0f64;
    let scale = 1.0 / batch.max(1) as f64;
    for b in 0..batch {
        let row = &s[b * classes..(b + 1) * classes];
        let g = &mut grad[b * classes..(b + 1) * classes];
        let y = labels[b];
        let mut gy = 0.0f64;
        for j in (0..classes).filter(|&j| j != y) {
            let margin = 1.0 + f64::from(row[j]) - f64::from(row[y]);
            if margin > 0.0 {
                let (loss, d) = if squared { (margin * margin, 2.0 * margin) } else { (margin, 1.0) };
                total += loss;
                g[j] = (d * scale) as f32;
                gy -= d * scale;
            }
        }
        g[y] = gy as f32;
    }
    Ok((total * scale, grad))
}

pub fn softmax_cross_entropy(scores: &DenseTensor, labels: &[usize]) -> Result<(f64, Vec<f32>), NnError> {
    let (batch, classes) = check(scores, labels)?;
    let s = scores.data();
    let mut grad = vec![0.0f32; s.len()];
    let mut total = 0.0f64;
    let scale = 1.0 / batch.max(1) as f64;
    for b in 0..batch {
        let row = &s[b * classes..(b + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
        let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - f64::from(row[labels[b]]);
        for (j, e) in exps.iter().enumerate() {
            let p = e / z - if j == labels[b] { 1.0 } else { 0.0 };
            grad[b * classes + j] = (p * scale) as f32;
        }
    }
    Ok((total * scale, grad))
}

impl LossKind {
    pub fn evaluate(self, scores: &DenseTensor, labels: &[usize]) -> Result<(f64, Vec<f32>), NnError> {
        match self {
            LossKind::Hinge { squared } => hinge_loss(scores, labels, squared),
            LossKind::SoftmaxCrossEntropy => softmax_cross_entropy(scores, labels),
        }
    }
}
