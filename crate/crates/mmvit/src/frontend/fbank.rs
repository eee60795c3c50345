//! Log-mel filterbank features: 25 ms Hamming window, 10 ms shift,
//! magnitude-squared FFT, 128 triangular mel filters from 0 Hz to
//! Nyquist, natural log with an additive floor.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::tensor::Tensor;

use super::{FormatError, Result, Spectrogram, Waveform, LOG_FLOOR, N_MELS, SHIFT_MS, WINDOW_MS};

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

fn hamming(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .map(|v| v as f32)
        .collect()
}

/// Triangular mel filterbank over FFT power bins.
pub struct MelBank {
    /// Dense (n_mels, n_bins) weights.
    weights: Vec<f32>,
    n_bins: usize,
    /// Filter center frequencies in Hz.
    centers_hz: Vec<f64>,
}

impl MelBank {
    /// Filters span 0 Hz to Nyquist: n_mels+2 mel-equidistant edge
    /// points; filter j rises over [p_j, p_{j+1}] and falls over
    /// [p_{j+1}, p_{j+2}].
    pub fn new(n_mels: usize, n_fft: usize, sample_rate_hz: u32) -> MelBank {
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate_hz as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0f32; n_mels * n_bins];
        for j in 0..n_mels {
            let (lo, mid, hi) = (edges[j], edges[j + 1], edges[j + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate_hz as f64 / n_fft as f64;
                let w = if f >= lo && f < mid {
                    (f - lo) / (mid - lo)
                } else if f >= mid && f <= hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[j * n_bins + k] = w as f32;
            }
        }
        MelBank {
            weights,
            n_bins,
            centers_hz: edges[1..=n_mels].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Weighted sum of one power spectrum into mel energies.
    pub fn apply(&self, power: &[f32], out: &mut [f32]) {
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.weights[j * self.n_bins..(j + 1) * self.n_bins];
            let mut acc = 0.0f32;
            for (&w, &p) in row.iter().zip(power) {
                acc += w * p;
            }
            *o = acc;
        }
    }

    /// Total filter weight landing on each FFT bin.
    pub fn bin_totals(&self) -> Vec<f32> {
        let mut totals = vec![0.0f32; self.n_bins];
        for j in 0..self.weights.len() / self.n_bins {
            for (t, &w) in totals.iter_mut().zip(&self.weights[j * self.n_bins..]) {
                *t += w;
            }
        }
        totals
    }
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Frame count for a sample length: floor((len − win)/hop) + 1.
pub fn frame_count(len: usize, win: usize, hop: usize) -> Option<usize> {
    if len < win {
        None
    } else {
        Some((len - win) / hop + 1)
    }
}

/// Extract T × 128 log-mel features from a waveform at its own rate.
pub fn logmel_fbank(w: &Waveform) -> Result<Spectrogram> {
    let sr = w.sample_rate_hz as usize;
    let win = sr * WINDOW_MS as usize / 1000;
    let hop = sr * SHIFT_MS as usize / 1000;
    let t = frame_count(w.samples.len(), win, hop).ok_or(FormatError::TooShort {
        got: w.samples.len(),
        need: win,
    })?;
    let n_fft = next_pow2(win);
    let n_bins = n_fft / 2 + 1;
    let window = hamming(win);
    let bank = MelBank::new(N_MELS, n_fft, w.sample_rate_hz);

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0f32, 0.0); n_fft];
    let mut scratch = vec![Complex::new(0.0f32, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0f32; n_bins];
    let mut frames = vec![0.0f32; t * N_MELS];
    for fr in 0..t {
        let start = fr * hop;
        for i in 0..n_fft {
            buf[i] = if i < win {
                Complex::new(w.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        bank.apply(&power, &mut frames[fr * N_MELS..(fr + 1) * N_MELS]);
        for v in &mut frames[fr * N_MELS..(fr + 1) * N_MELS] {
            *v = (*v + LOG_FLOOR).ln();
        }
    }
    Ok(Spectrogram {
        frames: Tensor::from_vec(vec![t, N_MELS], frames).expect("length matches"),
    })
}
