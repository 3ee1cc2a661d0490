//! Binary PPM (P6, maxval 255) image I/O and PGM (P5) emission for
//! analysis maps. Pixels map to [0, 1] floats in planar CHW order.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn parse_header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    // Tokens separated by whitespace; '#' starts a comment to end of line.
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0usize;
    while tokens.len() < count {
        match bytes.get(pos) {
            None => return Err(Error::Format("truncated PPM header".into())),
            Some(b'#') => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let start = pos;
                while pos < bytes.len()
                    && !bytes[pos].is_ascii_whitespace()
                    && bytes[pos] != b'#'
                {
                    pos += 1;
                }
                let tok = std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| Error::Format("non-ASCII PPM header".into()))?;
                let v: usize = tok
                    .parse()
                    .map_err(|_| Error::Format(format!("bad PPM header field '{tok}'")))?;
                tokens.push(v);
            }
        }
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => Ok((tokens, pos + 1)),
        _ => Err(Error::Format("missing separator after PPM header".into())),
    }
}

/// Load a binary P6 PPM as a (1, 3, h, w) tensor with values v / 255.
pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io_path("reading", path, e))?;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::Format(format!(
            "{}: not a binary P6 PPM",
            path.display()
        )));
    }
    let (fields, payload_at) = parse_header_tokens(&bytes[2..], 3)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::Format(format!(
            "{}: unsupported maxval {maxval} (only 255)",
            path.display()
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("{}: empty image", path.display())));
    }
    let payload = &bytes[2 + payload_at..];
    if payload.len() < 3 * w * h {
        return Err(Error::Format(format!(
            "{}: truncated payload ({} of {} bytes)",
            path.display(),
            payload.len(),
            3 * w * h
        )));
    }
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data[ch * h * w + y * w + x] = payload[3 * (y * w + x) + ch] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(vec![1, 3, h, w], data))
}

/// Save a (1, 3, h, w) or (3, h, w) tensor as binary P6; values are scaled
/// by 255, rounded to nearest and clamped.
pub fn save_ppm(t: &Tensor, path: &Path) -> Result<()> {
    let (h, w, data) = match t.shape() {
        [1, 3, h, w] | [3, h, w] => (*h, *w, t.data()),
        s => {
            return Err(Error::Usage(format!(
                "save_ppm expects (1,3,h,w) or (3,h,w), got {s:?}"
            )))
        }
    };
    let mut out = Vec::with_capacity(3 * h * w + 32);
    write!(out, "P6\n{w} {h}\n255\n").unwrap();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = (data[ch * h * w + y * w + x] * 255.0).round().clamp(0.0, 255.0);
                out.push(v as u8);
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io_path("writing", path, e))
}

/// Save a grayscale map as binary P5 (callers pre-scale to [0, 255]).
pub fn save_pgm(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    assert_eq!(values.len(), h * w);
    let mut out = Vec::with_capacity(h * w + 32);
    write!(out, "P5\n{w} {h}\n255\n").unwrap();
    for &v in values {
        out.push(v.round().clamp(0.0, 255.0) as u8);
    }
    std::fs::write(path, out).map_err(|e| Error::io_path("writing", path, e))
}
