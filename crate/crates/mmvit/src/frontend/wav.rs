//! RIFF/WAVE PCM16 reader. Deliberately strict: PCM only, 16-bit only,
//! 1–2 channels; anything else is refused rather than guessed at.

use super::{FormatError, Result, Waveform};

const FMT: &str = "wav";

fn err(offset: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Malformed { format: FMT, offset, msg: msg.into() }
}

fn take(bytes: &[u8], offset: usize, n: usize) -> Result<&[u8]> {
    bytes
        .get(offset..offset + n)
        .ok_or_else(|| err(offset, format!("truncated: wanted {n} bytes")))
}

fn u16_at(bytes: &[u8], offset: usize) -> Result<u16> {
    let b = take(bytes, offset, 2)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32> {
    let b = take(bytes, offset, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Decode a PCM16 WAV held in memory. Stereo is averaged to mono;
/// samples are scaled so −32768 → −1.0.
pub fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    if take(bytes, 0, 4)? != b"RIFF" {
        return Err(err(0, "missing RIFF magic"));
    }
    if take(bytes, 8, 4)? != b"WAVE" {
        return Err(err(8, "missing WAVE form type"));
    }

    let mut fmt: Option<(u16, u32)> = None; // (channels, sample_rate)
    let mut data: Option<(usize, usize)> = None; // (offset, len)
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = take(bytes, pos, 4)?;
        let size = u32_at(bytes, pos + 4)? as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(err(pos, format!("chunk {:?} overruns file", String::from_utf8_lossy(id))));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(err(body, format!("fmt chunk too small: {size} bytes")));
                }
                let audio_format = u16_at(bytes, body)?;
                let channels = u16_at(bytes, body + 2)?;
                let sample_rate = u32_at(bytes, body + 4)?;
                let bits = u16_at(bytes, body + 14)?;
                if audio_format != 1 {
                    return Err(FormatError::Unsupported {
                        format: FMT,
                        msg: format!("audio format {audio_format}, only PCM (1) supported"),
                    });
                }
                if bits != 16 {
                    return Err(FormatError::Unsupported {
                        format: FMT,
                        msg: format!("{bits}-bit samples, only 16-bit supported"),
                    });
                }
                if channels == 0 || channels > 2 {
                    return Err(FormatError::Unsupported {
                        format: FMT,
                        msg: format!("{channels} channels, only mono/stereo supported"),
                    });
                }
                if sample_rate == 0 {
                    return Err(err(body + 4, "zero sample rate"));
                }
                fmt = Some((channels, sample_rate));
            }
            b"data" => {
                data = Some((body, size));
            }
            _ => {} // skip LIST, fact, cue, …
        }
        // Chunks are word-aligned: odd sizes carry one pad byte.
        pos = body + size + (size & 1);
    }

    let (channels, sample_rate) = fmt.ok_or_else(|| err(12, "no fmt chunk"))?;
    let (off, len) = data.ok_or_else(|| err(12, "no data chunk"))?;
    let frame_bytes = 2 * channels as usize;
    if len % frame_bytes != 0 {
        return Err(err(off, format!("data length {len} not a multiple of frame size {frame_bytes}")));
    }
    let n = len / frame_bytes;
    let mut samples = Vec::with_capacity(n);
    let body = &bytes[off..off + len];
    match channels {
        1 => {
            for f in body.chunks_exact(2) {
                samples.push(i16::from_le_bytes([f[0], f[1]]) as f32 / 32768.0);
            }
        }
        _ => {
            for f in body.chunks_exact(4) {
                let l = i16::from_le_bytes([f[0], f[1]]) as f32;
                let r = i16::from_le_bytes([f[2], f[3]]) as f32;
                samples.push((l + r) / 2.0 / 32768.0);
            }
        }
    }
    Ok(Waveform { samples, sample_rate_hz: sample_rate })
}

/// Encode a mono waveform as PCM16 WAV (test and fixture helper).
pub fn encode_wav(samples: &[f32], sample_rate_hz: u32) -> Vec<u8> {
    encode_wav_channels(&[samples], sample_rate_hz)
}

/// Encode interleaved PCM16 from per-channel slices of equal length.
pub fn encode_wav_channels(channels: &[&[f32]], sample_rate_hz: u32) -> Vec<u8> {
    let ch = channels.len() as u16;
    let n = channels.first().map_or(0, |c| c.len());
    let data_len = (n * 2 * ch as usize) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&ch.to_le_bytes());
    out.extend_from_slice(&sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(sample_rate_hz * 2 * ch as u32).to_le_bytes());
    out.extend_from_slice(&(2 * ch).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for i in 0..n {
        for c in channels {
            let v = (c[i].clamp(-1.0, 1.0) * 32767.0).round() as i16;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}
