//! Binary PPM/PGM images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64, max: f64) -> u32 {
    (v.clamp(0.0, 1.0) * max).round() as u32
}

/// Encodes a `[1,3,H,W]` tensor in `[0,1]` as binary 8-bit PPM (P6).
pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::shape(format!("PPM needs [1,3,H,W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(quantize(t.at4(0, c, y, x), 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Encodes a `[.., H, W]` single map in `[0,1]` as binary PGM (P5) with the
/// given maxval (255 or 65535).
pub fn encode_pgm(t: &Tensor, maxval: u16) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape(format!("PGM needs a single map, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in t.data() {
        let q = quantize(v, maxval as f64);
        if maxval > 255 {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    Ok(out)
}

/// Encodes raw 8-bit gray levels as PGM.
pub fn encode_gray8(pixels: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!("{} gray levels for {width}x{height}", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Encodes raw interleaved 8-bit RGB as PPM.
pub fn encode_rgb8(pixels: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    if pixels.len() != 3 * width * height {
        return Err(Error::shape(format!("{} RGB bytes for {width}x{height}", pixels.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

struct Header {
    magic: String,
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_header(buf: &[u8], format: &'static str) -> Result<Header> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(format, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    let num = |s: &str| s.parse::<u32>().map_err(|_| Error::format(format, format!("bad header field {s:?}")));
    let maxval = num(&fields[3])?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(format, format!("maxval {maxval} out of range")));
    }
    Ok(Header {
        magic: fields[0].clone(),
        width: num(&fields[1])? as usize,
        height: num(&fields[2])? as usize,
        maxval,
        offset: pos + 1,
    })
}

fn samples(buf: &[u8], h: &Header, count: usize, format: &'static str) -> Result<Vec<f64>> {
    let wide = h.maxval > 255;
    let bytes = if wide { 2 * count } else { count };
    let payload = buf.get(h.offset..).unwrap_or(&[]);
    if payload.len() != bytes {
        return Err(Error::format(format, format!("payload has {} bytes, expected {bytes}", payload.len())));
    }
    let max = h.maxval as f64;
    Ok(if wide {
        payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / max).collect()
    } else {
        payload.iter().map(|&b| b as f64 / max).collect()
    })
}

/// Decodes a binary PPM into a `[1,3,H,W]` tensor in `[0,1]`.
pub fn decode_ppm(buf: &[u8]) -> Result<Tensor> {
    let h = parse_header(buf, "PPM")?;
    if h.magic != "P6" {
        return Err(Error::format("PPM", format!("unsupported magic {:?}", h.magic)));
    }
    let interleaved = samples(buf, &h, 3 * h.width * h.height, "PPM")?;
    let plane = h.width * h.height;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in interleaved.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c];
        }
    }
    Tensor::new(&[1, 3, h.height, h.width], data)
}

/// Decodes a binary PGM into a `[1,1,H,W]` tensor in `[0,1]`.
pub fn decode_pgm(buf: &[u8]) -> Result<Tensor> {
    let h = parse_header(buf, "PGM")?;
    if h.magic != "P5" {
        return Err(Error::format("PGM", format!("unsupported magic {:?}", h.magic)));
    }
    let data = samples(buf, &h, h.width * h.height, "PGM")?;
    Tensor::new(&[1, 1, h.height, h.width], data)
}

pub fn save_ppm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(t)?)?;
    Ok(())
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn save_pgm(path: impl AsRef<Path>, t: &Tensor, maxval: u16) -> Result<()> {
    fs::write(path, encode_pgm(t, maxval)?)?;
    Ok(())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}
