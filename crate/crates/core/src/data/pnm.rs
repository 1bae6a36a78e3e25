//! Binary PGM (`P5`) and PPM (`P6`) images.
//!
//! Decoded images are `[3, H, W]` tensors in `[0, 1]`; grey images are
//! replicated to three channels. Both 8-bit and 16-bit (big-endian) samples
//! are read; output is always 8-bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parsed header fields and the offset of the first sample byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PnmHeader {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub maxval: usize,
    pub data_offset: usize,
}

fn header_token(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err("truncated header".into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(format!("expected a number at byte {start}"));
    }
    std::str::from_utf8(&bytes[start..*pos]).unwrap().parse().map_err(|e| format!("bad header number: {e}"))
}

pub fn parse_header(bytes: &[u8]) -> std::result::Result<PnmHeader, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM file (magic P5 or P6)".into()),
    };
    let mut pos = 2;
    let width = header_token(bytes, &mut pos)?;
    let height = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    Ok(PnmHeader { channels, width, height, maxval, data_offset: pos + 1 })
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let h = parse_header(bytes)?;
    let wide = h.maxval > 255;
    let bps = if wide { 2 } else { 1 };
    let plane = h.width * h.height;
    let need = plane * h.channels * bps;
    let raster = bytes
        .get(h.data_offset..h.data_offset + need)
        .ok_or_else(|| format!("raster holds {} of {need} bytes", bytes.len().saturating_sub(h.data_offset)))?;
    let max = h.maxval as f32;
    let mut out = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let src = if h.channels == 1 { p } else { p * 3 + c };
            let v = if wide { u16::from_be_bytes([raster[2 * src], raster[2 * src + 1]]) as usize } else { raster[src] as usize };
            if v > h.maxval {
                return Err(format!("sample {v} exceeds maxval {}", h.maxval));
            }
            out[c * plane + p] = v as f32 / max;
        }
    }
    Ok(Tensor::new([3, h.height, h.width], out).expect("sizes match"))
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Decode { path: path.to_path_buf(), reason })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit `P6` encoding of a `[3, H, W]` image.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::InvalidShape(format!("PPM needs [3, H, W], got {:?}", image.shape())));
    };
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..plane {
        out.extend((0..3).map(|c| quantize(d[c * plane + p])));
    }
    Ok(out)
}

/// 8-bit `P5` encoding of a `[1, H, W]` or `[H, W]` image.
pub fn encode_pgm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        s => return Err(Error::InvalidShape(format!("PGM needs [1, H, W], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}
