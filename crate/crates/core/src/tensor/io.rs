//! Binary tensor formats: PFM float maps and the `SCNT` container.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::array::Tensor;
use crate::error::{Error, Result};

pub const SCNT_MAGIC: &[u8; 4] = b"SCNT";
pub const SCNT_VERSION: u32 = 1;

/// Encodes a tensor as `SCNT` | version u32 | ndim u32 | dims u32... | f32 payload,
/// all little-endian.
pub fn write_scnt<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(SCNT_MAGIC)?;
    w.write_all(&SCNT_VERSION.to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::format("SCNT", format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.len() * 4);
    for &x in t.data() {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_scnt<R: Read>(mut r: R) -> Result<Tensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_scnt(&buf)
}

pub fn decode_scnt(buf: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_scnt_prefix(buf)?;
    if used != buf.len() {
        return Err(Error::format("SCNT", format!("{} trailing bytes after the record", buf.len() - used)));
    }
    Ok(t)
}

/// Decodes a concatenation of `SCNT` records, as written by repeated
/// [`write_scnt`] calls on one writer.
pub fn decode_scnt_stream(buf: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    let mut rest = buf;
    while !rest.is_empty() {
        let (t, used) = decode_scnt_prefix(rest)?;
        out.push(t);
        rest = &rest[used..];
    }
    Ok(out)
}

/// Decodes the record at the start of `buf`; returns it with its byte length.
fn decode_scnt_prefix(buf: &[u8]) -> Result<(Tensor, usize)> {
    let bad = |reason: &str| Error::format("SCNT", reason.to_string());
    if buf.len() < 12 || &buf[..4] != SCNT_MAGIC {
        return Err(bad("missing magic"));
    }
    let u32_at = |off: usize| -> Result<u32> {
        buf.get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| bad("truncated header"))
    };
    let version = u32_at(4)?;
    if version != SCNT_VERSION {
        return Err(Error::format("SCNT", format!("unsupported version {version}")));
    }
    let ndim = u32_at(8)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        shape.push(u32_at(12 + 4 * i)? as usize);
    }
    let start = 12 + 4 * ndim;
    let n: usize = shape.iter().product();
    let payload = &buf[start.min(buf.len())..];
    if payload.len() < 4 * n {
        return Err(Error::format("SCNT", format!("payload has {} bytes, expected {}", payload.len(), 4 * n)));
    }
    let data = payload[..4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((Tensor::new(&shape, data)?, start + 4 * n))
}

pub fn save_scnt(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::new();
    write_scnt(&mut bytes, t)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_scnt(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_scnt(&fs::read(path)?)
}

fn map_dims(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape(format!("PFM holds a single 2-D map, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// Grayscale PFM, little-endian (scale −1.0), rows stored bottom to top.
pub fn encode_pfm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = map_dims(t)?;
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for &v in &t.data()[y * w..(y + 1) * w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a grayscale PFM into a `[1, 1, H, W]` tensor.
pub fn decode_pfm(buf: &[u8]) -> Result<Tensor> {
    let bad = |reason: String| Error::format("PFM", reason);
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte ends the header
    if fields[0] != "Pf" {
        return Err(bad(format!("unsupported PFM type {:?}", fields[0])));
    }
    let w: usize = fields[1].parse().map_err(|_| bad(format!("bad width {:?}", fields[1])))?;
    let h: usize = fields[2].parse().map_err(|_| bad(format!("bad height {:?}", fields[2])))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad(format!("bad scale {:?}", fields[3])))?;
    let little = scale < 0.0;
    let payload = buf.get(pos..).unwrap_or(&[]);
    if payload.len() != 4 * w * h {
        return Err(bad(format!("payload has {} bytes, expected {}", payload.len(), 4 * w * h)));
    }
    let mut data = vec![0.0; w * h];
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let bytes: [u8; 4] = c.try_into().expect("4 bytes");
        let v = if little { f32::from_le_bytes(bytes) } else { f32::from_be_bytes(bytes) };
        let (row, col) = (i / w, i % w);
        data[(h - 1 - row) * w + col] = v as f64;
    }
    Tensor::new(&[1, 1, h, w], data)
}

pub fn save_pfm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_pfm(t)?)?;
    Ok(())
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pfm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scnt_header_layout() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut bytes = Vec::new();
        write_scnt(&mut bytes, &t).unwrap();
        assert_eq!(&bytes[..4], b"SCNT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 20 + 6 * 4);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1.0);
    }

    #[test]
    fn scnt_rejects_garbage() {
        assert!(decode_scnt(b"NOPE").is_err());
        let t = Tensor::zeros(&[4]);
        let mut bytes = Vec::new();
        write_scnt(&mut bytes, &t).unwrap();
        bytes.pop();
        assert!(decode_scnt(&bytes).is_err());
    }

    #[test]
    fn pfm_header_and_row_order() {
        let t = Tensor::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_pfm(&t).unwrap();
        let header = b"Pf\n3 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // bottom row first
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, 4.0);
    }

    proptest! {
        #[test]
        fn scnt_and_pfm_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f64> = (0..h * w).map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) as f64 / 1e6) as f32 as f64).collect();
            let t = Tensor::new(&[1, 1, h, w], data).unwrap();
            let mut bytes = Vec::new();
            write_scnt(&mut bytes, &t).unwrap();
            prop_assert_eq!(decode_scnt(&bytes).unwrap(), t.clone());
            prop_assert_eq!(decode_pfm(&encode_pfm(&t).unwrap()).unwrap(), t);
        }
    }
}
