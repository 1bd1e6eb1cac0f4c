//! On-disk rasters.
//!
//! Depth and mask rasters use `RasterFileV1`:
//!
//! ```text
//! GEOD 1 <H> <W>\n            ASCII header, single spaces, decimal sizes
//! H·W × f64 little-endian     row-major payload, nothing after it
//! ```
//!
//! Label rasters use the same layout with magic `GEOL` and one byte per
//! pixel (0 ground, 1 roof, 2 facade, 3 edge). Masks are also written as
//! binary PGM (`P5`, maxval 255) for viewing.

use geoalign_core::mgsf::{DepthMap, GeoMask};
use geoalign_core::scene::{Label, LabelMap};

use crate::error::CliError;

pub const DEPTH_MAGIC: &str = "GEOD";
pub const LABEL_MAGIC: &str = "GEOL";
pub const FORMAT_VERSION: u32 = 1;

fn header(magic: &str, h: usize, w: usize) -> Vec<u8> {
    format!("{magic} {FORMAT_VERSION} {h} {w}\n").into_bytes()
}

/// Splits off and checks the header, returning `(H, W, payload)`.
fn split_header<'a>(magic: &str, bytes: &'a [u8]) -> Result<(usize, usize, &'a [u8]), CliError> {
    let bad = |msg: String| CliError::Format(format!("{magic} raster: {msg}"));
    let end = bytes
        .iter()
        .take(64)
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not ASCII".into()))?;
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 4 || fields[0] != magic {
        return Err(bad(format!("expected header \"{magic} 1 <H> <W>\", got {line:?}")));
    }
    if fields[1] != FORMAT_VERSION.to_string() {
        return Err(bad(format!("unsupported version {}", fields[1])));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad dimension {s:?}")));
    let (h, w) = (dim(fields[2])?, dim(fields[3])?);
    if h == 0 || w == 0 {
        return Err(bad(format!("empty raster {h}×{w}")));
    }
    Ok((h, w, &bytes[end + 1..]))
}

pub fn encode_raster(h: usize, w: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), h * w, "raster payload length");
    let mut out = header(DEPTH_MAGIC, h, w);
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raster(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), CliError> {
    let (h, w, payload) = split_header(DEPTH_MAGIC, bytes)?;
    let expected = h.checked_mul(w).and_then(|n| n.checked_mul(8));
    if expected != Some(payload.len()) {
        return Err(CliError::Format(format!(
            "{DEPTH_MAGIC} raster: header declares {h}×{w} ({} bytes of payload), found {} bytes",
            h as u128 * w as u128 * 8,
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((h, w, values))
}

pub fn encode_depth(d: &DepthMap) -> Vec<u8> {
    encode_raster(d.height(), d.width(), d.values())
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap, CliError> {
    let (h, w, v) = decode_raster(bytes)?;
    DepthMap::new(h, w, v).map_err(|e| CliError::Format(format!("{DEPTH_MAGIC} raster: {e}")))
}

pub fn encode_labels(l: &LabelMap) -> Vec<u8> {
    let mut out = header(LABEL_MAGIC, l.height(), l.width());
    out.extend(l.codes());
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap, CliError> {
    let (h, w, payload) = split_header(LABEL_MAGIC, bytes)?;
    if h.checked_mul(w) != Some(payload.len()) {
        return Err(CliError::Format(format!(
            "{LABEL_MAGIC} raster: header declares {h}×{w}, found {} payload bytes",
            payload.len()
        )));
    }
    if let Some(i) = payload.iter().position(|&b| Label::from_code(b).is_none()) {
        return Err(CliError::Format(format!(
            "{LABEL_MAGIC} raster: byte {} at pixel {i} is not a label",
            payload[i]
        )));
    }
    LabelMap::from_codes(h, w, payload).map_err(|e| CliError::Format(e.to_string()))
}

/// Maps `[0, 1]` to `0..=255` by rounding; out-of-range values clamp.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(h: usize, w: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), h * w, "pgm payload length");
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    out
}

pub fn encode_mask_pgm(m: &GeoMask) -> Vec<u8> {
    encode_pgm(m.height(), m.width(), m.values())
}

/// Reads a `P5` file with maxval 255 back into `[0, 1]` values.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), CliError> {
    let bad = |msg: &str| CliError::Format(format!("pgm: {msg}"));
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if tokens[0] != "P5" {
        return Err(bad("only binary greymaps (P5) are supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    // exactly one whitespace byte separates header and raster
    let payload = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if payload.len() != w * h {
        return Err(bad("payload length does not match header"));
    }
    Ok((h, w, payload.iter().map(|&b| b as f64 / 255.0).collect()))
}
