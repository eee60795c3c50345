//! Binary PPM (P6) decoder. Header tokens may be separated by arbitrary
//! whitespace and `#` comments per the netpbm grammar; only maxval 255
//! is accepted.

use crate::tensor::Tensor;

use super::{FormatError, ImageInput, Result};

const FMT: &str = "ppm";

fn err(offset: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Malformed { format: FMT, offset, msg: msg.into() }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Skip whitespace and comments, then read one decimal token.
    fn next_int(&mut self) -> Result<u64> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        let mut value: u64 = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as u64))
                .ok_or_else(|| err(start, "header number overflows"))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(err(start, "expected a decimal number"));
        }
        Ok(value)
    }
}

/// Decode a P6 image into (3, H, W) floats scaled to [0, 1].
pub fn parse_ppm(bytes: &[u8]) -> Result<ImageInput> {
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(err(0, "missing P6 magic"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let w = cur.next_int()? as usize;
    let h = cur.next_int()? as usize;
    let maxval = cur.next_int()?;
    if w == 0 || h == 0 {
        return Err(err(2, format!("degenerate size {w}×{h}")));
    }
    if maxval != 255 {
        return Err(FormatError::Unsupported {
            format: FMT,
            msg: format!("maxval {maxval}, only 255 supported"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(err(cur.pos, "expected whitespace before raster")),
    }
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| err(2, "image dimensions overflow"))?;
    let raster = bytes
        .get(cur.pos..cur.pos + need)
        .ok_or_else(|| err(cur.pos, format!("raster truncated: wanted {need} bytes")))?;
    // Interleaved RGB → planar (3, H, W).
    let mut data = vec![0.0f32; need];
    let hw = w * h;
    for (i, px) in raster.chunks_exact(3).enumerate() {
        data[i] = px[0] as f32 / 255.0;
        data[hw + i] = px[1] as f32 / 255.0;
        data[2 * hw + i] = px[2] as f32 / 255.0;
    }
    Ok(ImageInput {
        pixels: Tensor::from_vec(vec![3, h, w], data).expect("length matches"),
        normalized: false,
    })
}

/// Encode (3, H, W) floats in [0, 1] as P6 (test and fixture helper).
pub fn encode_ppm(img: &ImageInput) -> Vec<u8> {
    let shape = img.pixels.shape();
    let (h, w) = (shape[1], shape[2]);
    let hw = h * w;
    let d = img.pixels.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..hw {
        for c in 0..3 {
            out.push((d[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}
