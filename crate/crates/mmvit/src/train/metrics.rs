//! Evaluation metrics: mean average precision for multilabel scoring
//! and top-1 accuracy for single-label, with documented tie rules.

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("scores and labels disagree: {msg}")]
    Shape { msg: String },
    #[error("no positive label anywhere; mAP is undefined")]
    NoPositives,
}

/// Evaluation summary. `per_class_ap` is `None` for classes with no
/// positive example (they are excluded from the mean, not counted as 0).
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub map: Option<f64>,
    pub top1: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    pub samples: usize,
}

impl EvalReport {
    /// The headline number, whichever task produced the report.
    pub fn metric(&self) -> f64 {
        self.map.or(self.top1).unwrap_or(0.0)
    }
}

/// Average precision for one class: rank by score descending (ties keep
/// original order), then average precision@k over the positive ranks k.
fn average_precision(scores: &[f32], positives: &[bool]) -> Option<f64> {
    let total: usize = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut hits = 0usize;
    let mut ap = 0.0f64;
    for (k, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            ap += hits as f64 / (k + 1) as f64;
        }
    }
    Some(ap / total as f64)
}

/// mAP over classes with at least one positive; `scores` and `labels`
/// are per-sample rows of equal width, labels 0/1.
pub fn mean_average_precision(
    scores: &[Vec<f32>],
    labels: &[Vec<f32>],
) -> Result<EvalReport, MetricsError> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(MetricsError::Shape {
            msg: format!("{} score rows vs {} label rows", scores.len(), labels.len()),
        });
    }
    let c = scores[0].len();
    for (i, (s, l)) in scores.iter().zip(labels).enumerate() {
        if s.len() != c || l.len() != c {
            return Err(MetricsError::Shape {
                msg: format!("row {i}: {} scores, {} labels, expected {c}", s.len(), l.len()),
            });
        }
    }
    let mut per_class = Vec::with_capacity(c);
    for class in 0..c {
        let col: Vec<f32> = scores.iter().map(|r| r[class]).collect();
        let pos: Vec<bool> = labels.iter().map(|r| r[class] > 0.5).collect();
        per_class.push(average_precision(&col, &pos));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(MetricsError::NoPositives);
    }
    Ok(EvalReport {
        map: Some(present.iter().sum::<f64>() / present.len() as f64),
        top1: None,
        per_class_ap: per_class,
        samples: scores.len(),
    })
}

/// Fraction of rows whose highest score sits at the label index; equal
/// scores resolve to the lowest index.
pub fn top1_accuracy(scores: &[Vec<f32>], labels: &[usize]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count();
    correct as f64 / scores.len() as f64
}
