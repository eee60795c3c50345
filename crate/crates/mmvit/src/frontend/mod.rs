//! Input decoding and feature extraction: raw bytes in, C×H×W float
//! arrays out. Everything here is a pure function; parsers work on byte
//! slices so they can be driven by files or by fuzzers alike.

pub mod fbank;
pub mod ntc;
pub mod ppm;
pub mod wav;

use crate::tensor::Tensor;

/// Canonical sample rate for the audio path. Inputs at other rates are
/// linearly resampled.
pub const SAMPLE_RATE_HZ: u32 = 16_000;
/// Analysis window and shift, in milliseconds.
pub const WINDOW_MS: u32 = 25;
pub const SHIFT_MS: u32 = 10;
/// Mel bands per frame.
pub const N_MELS: usize = 128;
/// Model-input frame count: smallest power of two that covers the 998
/// frames of a 10 s clip and divides cleanly through every scale stage.
pub const TARGET_FRAMES: usize = 1024;
/// Added to mel energies before the log so silence stays finite.
pub const LOG_FLOOR: f32 = 1e-10;

/// ImageNet-convention channel statistics used by the image path.
pub const IMAGE_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGE_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{format}: {msg} (at byte {offset})")]
    Malformed {
        format: &'static str,
        offset: usize,
        msg: String,
    },
    #[error("{format}: unsupported: {msg}")]
    Unsupported { format: &'static str, msg: String },
    #[error("audio too short: {got} samples, need at least {need} (one window)")]
    TooShort { got: usize, need: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

/// Decoded mono audio in [−1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    /// Linear resampling to `target_hz`; identity when rates match.
    pub fn resampled(&self, target_hz: u32) -> Waveform {
        if self.sample_rate_hz == target_hz || self.samples.len() < 2 {
            return Waveform {
                samples: self.samples.clone(),
                sample_rate_hz: target_hz,
            };
        }
        let ratio = target_hz as f64 / self.sample_rate_hz as f64;
        let new_len = ((self.samples.len() as f64) * ratio).round().max(1.0) as usize;
        let src = Tensor::<f32>::from_vec(vec![self.samples.len()], self.samples.clone())
            .expect("length matches");
        let out = src.interp_linear_1d(0, new_len).expect("positive extents");
        Waveform {
            samples: out.data().to_vec(),
            sample_rate_hz: target_hz,
        }
    }
}

/// T×F log-mel energies, time-major.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// Shape (T, N_MELS).
    pub frames: Tensor<f32>,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_mels(&self) -> usize {
        self.frames.shape()[1]
    }

    /// Zero-pad at the end or center-crop to exactly `target_t` frames.
    pub fn fit_length(&self, target_t: usize) -> Spectrogram {
        let (t, f) = (self.num_frames(), self.num_mels());
        if t == target_t {
            return self.clone();
        }
        let mut out = vec![0.0f32; target_t * f];
        if t < target_t {
            out[..t * f].copy_from_slice(self.frames.data());
        } else {
            let start = (t - target_t) / 2;
            out.copy_from_slice(&self.frames.data()[start * f..(start + target_t) * f]);
        }
        Spectrogram {
            frames: Tensor::from_vec(vec![target_t, f], out).expect("length matches"),
        }
    }
}

/// 3×H×W image, either raw [0,1] or channel-normalized.
#[derive(Debug, Clone)]
pub struct ImageInput {
    /// Shape (3, H, W).
    pub pixels: Tensor<f32>,
    pub normalized: bool,
}

impl ImageInput {
    /// Bilinear resize to (h, w). Identity resize is bit-exact.
    pub fn resized(&self, h: usize, w: usize) -> ImageInput {
        let pixels = self.pixels.interp_bilinear_2d(h, w).expect("rank 3 input");
        ImageInput { pixels, normalized: self.normalized }
    }

    /// Apply the per-channel mean/std normalization once.
    pub fn normalize(&self) -> ImageInput {
        if self.normalized {
            return self.clone();
        }
        let shape = self.pixels.shape().to_vec();
        let hw = shape[1] * shape[2];
        let mut data = self.pixels.data().to_vec();
        for c in 0..3 {
            let (m, s) = (IMAGE_MEAN[c], IMAGE_STD[c]);
            for v in &mut data[c * hw..(c + 1) * hw] {
                *v = (*v - m) / s;
            }
        }
        ImageInput {
            pixels: Tensor::from_vec(shape, data).expect("length matches"),
            normalized: true,
        }
    }
}

/// Decode a WAV file to a mono waveform at the canonical rate.
pub fn load_wav(path: &std::path::Path) -> Result<Waveform> {
    let bytes = std::fs::read(path)?;
    Ok(wav::parse_wav(&bytes)?.resampled(SAMPLE_RATE_HZ))
}

/// Decode a PPM or NTC image file, resize to (h, w), and normalize.
pub fn load_image(path: &std::path::Path, h: usize, w: usize) -> Result<ImageInput> {
    let bytes = std::fs::read(path)?;
    let img = if bytes.starts_with(b"NTC1") {
        let t = ntc::parse_ntc(&bytes)?;
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(FormatError::Unsupported {
                format: "ntc",
                msg: format!("expected a 3×H×W image tensor, got {:?}", t.shape()),
            });
        }
        ImageInput { pixels: t, normalized: false }
    } else {
        ppm::parse_ppm(&bytes)?
    };
    Ok(img.resized(h, w).normalize())
}
