//! Training-time augmentations for log-mel spectrograms: mixup, the
//! temporal-cut audio cutmix, spectrogram masking, and random roll.
//! Every function is a deterministic map of (inputs, RNG state); the
//! batch driver partitions a batch 50/50 between mixup and cutmix.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::config::AugmentConfig;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("feature shapes differ: {a:?} vs {b:?}")]
    FeatureShape { a: Vec<usize>, b: Vec<usize> },
    #[error("label lengths differ: {a} vs {b}")]
    LabelLength { a: usize, b: usize },
    #[error("features must be rank 2 (time, freq), got {0:?}")]
    NotSpectrogram(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// One training example: (T, F) features plus a class-weight vector
/// (one-/multi-hot before mixing, soft after).
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub features: Tensor<f32>,
    pub label: Vec<f32>,
}

fn check_pair(a: &LabeledExample, b: &LabeledExample) -> Result<()> {
    if a.features.shape() != b.features.shape() {
        return Err(AugmentError::FeatureShape {
            a: a.features.shape().to_vec(),
            b: b.features.shape().to_vec(),
        });
    }
    if a.label.len() != b.label.len() {
        return Err(AugmentError::LabelLength { a: a.label.len(), b: b.label.len() });
    }
    Ok(())
}

/// λ ~ Beta(α, α).
pub fn draw_lambda(alpha: f64, rng: &mut ChaCha8Rng) -> f64 {
    Beta::new(alpha, alpha).expect("alpha > 0").sample(rng)
}

/// Elementwise blend: features λ·a + (1−λ)·b, labels likewise.
pub fn mixup(a: &LabeledExample, b: &LabeledExample, lambda: f64) -> Result<LabeledExample> {
    check_pair(a, b)?;
    let l = lambda as f32;
    let features = Tensor::from_vec(
        a.features.shape().to_vec(),
        a.features
            .data()
            .iter()
            .zip(b.features.data())
            .map(|(&x, &y)| l * x + (1.0 - l) * y)
            .collect(),
    )
    .expect("shape preserved");
    let label =
        a.label.iter().zip(&b.label).map(|(&x, &y)| l * x + (1.0 - l) * y).collect();
    Ok(LabeledExample { features, label })
}

/// Temporal-cut cutmix: replace a contiguous run of w = round((1−λ)·T)
/// whole frames of `a` by `b`'s frames at the same positions (a hard,
/// full-height cut — the frequency axis is never split). The label uses
/// the realized area: λ_eff = 1 − w/T.
pub fn audio_cutmix(
    a: &LabeledExample,
    b: &LabeledExample,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledExample> {
    check_pair(a, b)?;
    let shape = a.features.shape().to_vec();
    if shape.len() != 2 {
        return Err(AugmentError::NotSpectrogram(shape));
    }
    let (t_len, f_len) = (shape[0], shape[1]);
    let w = ((1.0 - lambda) * t_len as f64).round() as usize;
    let w = w.min(t_len);
    let t0 = rng.gen_range(0..=t_len - w);
    let mut data = a.features.data().to_vec();
    data[t0 * f_len..(t0 + w) * f_len]
        .copy_from_slice(&b.features.data()[t0 * f_len..(t0 + w) * f_len]);
    let lam_eff = 1.0 - w as f32 / t_len as f32;
    let label = a
        .label
        .iter()
        .zip(&b.label)
        .map(|(&x, &y)| lam_eff * x + (1.0 - lam_eff) * y)
        .collect();
    Ok(LabeledExample {
        features: Tensor::from_vec(shape, data).expect("shape preserved"),
        label,
    })
}

/// Realized mask rectangles, for inspection and previews.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecMask {
    /// (start frame, width) of the time mask.
    pub time: (usize, usize),
    /// (start bin, height) of the frequency mask.
    pub freq: (usize, usize),
}

/// One time mask (width ≤ max_time) and one frequency mask (height ≤
/// max_freq), widths and positions uniform, masked cells set to 0.
pub fn specaugment(
    s: &Tensor<f32>,
    max_time: usize,
    max_freq: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, SpecMask)> {
    let shape = s.shape().to_vec();
    if shape.len() != 2 {
        return Err(AugmentError::NotSpectrogram(shape));
    }
    let (t_len, f_len) = (shape[0], shape[1]);
    let tw = rng.gen_range(0..=max_time.min(t_len));
    let t0 = rng.gen_range(0..=t_len - tw);
    let fh = rng.gen_range(0..=max_freq.min(f_len));
    let f0 = rng.gen_range(0..=f_len - fh);
    let mut data = s.data().to_vec();
    for t in t0..t0 + tw {
        for cell in &mut data[t * f_len..(t + 1) * f_len] {
            *cell = 0.0;
        }
    }
    for row in data.chunks_exact_mut(f_len) {
        for cell in &mut row[f0..f0 + fh] {
            *cell = 0.0;
        }
    }
    let out = Tensor::from_vec(shape, data).expect("shape preserved");
    Ok((out, SpecMask { time: (t0, tw), freq: (f0, fh) }))
}

/// Circular shift along time: output frame i is input frame
/// (i − shift) mod T. The frequency axis is untouched.
pub fn random_roll(s: &Tensor<f32>, shift: usize) -> Result<Tensor<f32>> {
    let shape = s.shape().to_vec();
    if shape.len() != 2 {
        return Err(AugmentError::NotSpectrogram(shape));
    }
    let (t_len, f_len) = (shape[0], shape[1]);
    let shift = shift % t_len.max(1);
    let src = s.data();
    let mut data = vec![0.0f32; src.len()];
    for i in 0..t_len {
        let j = (i + t_len - shift) % t_len;
        data[i * f_len..(i + 1) * f_len].copy_from_slice(&src[j * f_len..(j + 1) * f_len]);
    }
    Ok(Tensor::from_vec(shape, data).expect("shape preserved"))
}

/// What the batch driver did to one sample, for logs and previews.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixEvent {
    Mixup { partner: usize, lambda: f64 },
    CutMix { partner: usize, lambda: f64 },
    /// Cutmix-half sample passed through (ablation or tiny batch).
    Untouched,
}

/// Batch driver: a seeded shuffle splits the batch in half; the first
/// half is mixup-ed, the second cutmix-ed (or, with `cutmix` off, left
/// as-is — the ablation condition), each against a uniformly drawn
/// partner from the whole original batch. Spectrogram masking and roll
/// run after mixing on every sample. Returns one [`MixEvent`] per
/// sample describing what was applied.
pub fn augment_batch(
    batch: &mut [LabeledExample],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MixEvent>> {
    if !cfg.enabled {
        return Ok(vec![MixEvent::Untouched; batch.len()]);
    }
    let n = batch.len();
    if n < 2 {
        eprintln!("augment: batch of {n}, mixing skipped");
        return Ok(vec![MixEvent::Untouched; n]);
    }
    let originals: Vec<LabeledExample> = batch.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let mixup_half: std::collections::HashSet<usize> = perm[..n / 2].iter().copied().collect();
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let lambda = draw_lambda(cfg.mixup_alpha, rng);
        if mixup_half.contains(&i) {
            batch[i] = mixup(&originals[i], &originals[j], lambda)?;
            events.push(MixEvent::Mixup { partner: j, lambda });
        } else if cfg.cutmix {
            batch[i] = audio_cutmix(&originals[i], &originals[j], lambda, rng)?;
            events.push(MixEvent::CutMix { partner: j, lambda });
        } else {
            events.push(MixEvent::Untouched);
        }
    }
    for ex in batch.iter_mut() {
        if cfg.specaug_max_time > 0 || cfg.specaug_max_freq > 0 {
            let (masked, _) =
                specaugment(&ex.features, cfg.specaug_max_time, cfg.specaug_max_freq, rng)?;
            ex.features = masked;
        }
        if cfg.roll {
            let t_len = ex.features.shape()[0];
            let shift = rng.gen_range(0..t_len);
            ex.features = random_roll(&ex.features, shift)?;
        }
    }
    Ok(events)
}
