//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::io::{Read, Write};
use std::path::Path;

use super::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Encode a `[3, H, W]` image; values are rounded and clamped to 0..=255.
pub fn write_ppm(image: &Tensor<f32>, mut out: impl Write) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("PPM needs a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            buf.push(to_byte(d[c * h * w + i]));
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn write_pgm(labels: &LabelMap, mut out: impl Write) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    buf.extend_from_slice(&labels.data);
    out.write_all(&buf)?;
    Ok(())
}

struct Header {
    width: usize,
    height: usize,
    payload_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::format(format!(
            "expected magic {}, found {found:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format("truncated header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("malformed header: expected a number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("malformed header: number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format("malformed header: missing separator before payload")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("zero image dimension"));
    }
    Ok(Header {
        width,
        height,
        payload_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format("image dimensions overflow"))?;
    let have = bytes.len() - header.payload_start;
    if have < need {
        return Err(Error::format(format!("truncated payload: {have} of {need} bytes")));
    }
    Ok(&bytes[header.payload_start..header.payload_start + need])
}

pub fn read_ppm(mut input: impl Read) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let h = parse_header(&bytes, b"P6")?;
    let px = payload(&bytes, &h, 3)?;
    let n = h.width * h.height;
    let mut data = vec![0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = px[3 * i + c] as f32;
        }
    }
    Tensor::new(vec![3, h.height, h.width], data)
}

pub fn read_pgm(mut input: impl Read) -> Result<LabelMap> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let h = parse_header(&bytes, b"P5")?;
    let px = payload(&bytes, &h, 1)?;
    LabelMap::new(h.height, h.width, px.to_vec())
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_ppm(image, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_ppm(std::fs::File::open(path)?)
}

pub fn save_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let mut buf = Vec::new();
    write_pgm(labels, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    read_pgm(std::fs::File::open(path)?)
}
