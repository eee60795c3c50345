//! Inverse-frequency weighted sampling: each example's weight is the
//! sum of 1/freq(c) over its classes, so rare-class examples are drawn
//! more often and each class contributes comparable probability mass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("dataset index is empty")]
    Empty,
    #[error("sample {index} has no labels; its weight would be zero")]
    Unlabeled { index: usize },
    #[error("sample {index} references class {class}, but only {classes} classes exist")]
    ClassRange { index: usize, class: usize, classes: usize },
}

/// Per-class frequencies and per-sample draw weights for a label set.
#[derive(Debug)]
pub struct DatasetIndex {
    pub freq: Vec<u64>,
    pub weights: Vec<f64>,
}

impl DatasetIndex {
    pub fn new(labels: &[Vec<usize>], num_classes: usize) -> Result<Self, SamplerError> {
        if labels.is_empty() {
            return Err(SamplerError::Empty);
        }
        let mut freq = vec![0u64; num_classes];
        for (index, set) in labels.iter().enumerate() {
            if set.is_empty() {
                return Err(SamplerError::Unlabeled { index });
            }
            for &c in set {
                if c >= num_classes {
                    return Err(SamplerError::ClassRange { index, class: c, classes: num_classes });
                }
                freq[c] += 1;
            }
        }
        let weights = labels
            .iter()
            .map(|set| set.iter().map(|&c| 1.0 / freq[c] as f64).sum())
            .collect();
        Ok(DatasetIndex { freq, weights })
    }
}

/// `n` draws with replacement, probability proportional to weight.
pub fn weighted_sample(
    weights: &[f64],
    rng: &mut ChaCha8Rng,
    n: usize,
) -> Result<Vec<usize>, SamplerError> {
    if weights.is_empty() {
        return Err(SamplerError::Empty);
    }
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0f64;
    for &w in weights {
        acc += w;
        cumulative.push(acc);
    }
    let total = acc;
    let draws = (0..n)
        .map(|_| {
            let u = rng.gen_range(0.0..total);
            cumulative.partition_point(|&c| c <= u).min(weights.len() - 1)
        })
        .collect();
    Ok(draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn weight_formula_and_rare_class_dominance() {
        // freq: class 0 ×3, class 1 ×1. The sample holding the only
        // instance of class 1 carries weight 1/3 + 1/1.
        let labels = vec![vec![0], vec![0], vec![0, 1]];
        let idx = DatasetIndex::new(&labels, 2).unwrap();
        assert_eq!(idx.freq, vec![3, 1]);
        assert!((idx.weights[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((idx.weights[2] - (1.0 / 3.0 + 1.0)).abs() < 1e-12);
        assert!(idx.weights[2] > 3.0 * idx.weights[0]);
    }

    #[test]
    fn errors_are_specific() {
        assert!(matches!(DatasetIndex::new(&[], 2), Err(SamplerError::Empty)));
        assert!(matches!(
            DatasetIndex::new(&[vec![0], vec![]], 2),
            Err(SamplerError::Unlabeled { index: 1 })
        ));
        assert!(matches!(
            DatasetIndex::new(&[vec![5]], 2),
            Err(SamplerError::ClassRange { index: 0, class: 5, classes: 2 })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(weighted_sample(&[], &mut rng, 4), Err(SamplerError::Empty)));
    }

    #[test]
    fn balanced_single_label_classes_sample_uniformly() {
        // 4 classes × 5 samples each, single-label: all weights equal,
        // so over 10⁵ draws each class rate is 1/4 within 3σ of the
        // binomial standard error.
        let labels: Vec<Vec<usize>> = (0..20).map(|i| vec![i % 4]).collect();
        let idx = DatasetIndex::new(&labels, 4).unwrap();
        let w0 = idx.weights[0];
        assert!(idx.weights.iter().all(|&w| (w - w0).abs() < 1e-12));

        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = weighted_sample(&idx.weights, &mut rng, n).unwrap();
        let mut class_counts = [0usize; 4];
        for &i in &draws {
            class_counts[labels[i][0]] += 1;
        }
        let p = 0.25f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (c, &count) in class_counts.iter().enumerate() {
            let dev = (count as f64 - n as f64 * p).abs();
            assert!(dev < 3.0 * sigma, "class {c}: count {count}, deviation {dev:.1} > 3σ");
        }
    }

    #[test]
    fn skewed_weights_shift_the_empirical_rates() {
        // One sample with weight 9, three with 1: expect ~75% rate on
        // the heavy one over 10⁵ draws (3σ band).
        let weights = [9.0, 1.0, 1.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000usize;
        let draws = weighted_sample(&weights, &mut rng, n).unwrap();
        let heavy = draws.iter().filter(|&&i| i == 0).count();
        let p = 0.75f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((heavy as f64 - n as f64 * p).abs() < 3.0 * sigma);
    }

    #[test]
    fn draws_are_seed_deterministic() {
        let weights = [1.0, 2.0, 3.0];
        let a = weighted_sample(&weights, &mut ChaCha8Rng::seed_from_u64(9), 64).unwrap();
        let b = weighted_sample(&weights, &mut ChaCha8Rng::seed_from_u64(9), 64).unwrap();
        assert_eq!(a, b);
    }
}
