//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::{CliError, CliResult};

pub fn ppm_bytes(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), w * h * 3);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn pgm_bytes(w: usize, h: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), w * h);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Parsed netpbm raster: `(width, height, channels, samples)`.
pub type Raster = (usize, usize, usize, Vec<u8>);

/// Reads a P5 or P6 file with maxval 255; `#` comments are allowed in the
/// header.
pub fn parse_netpbm(bytes: &[u8]) -> CliResult<Raster> {
    let bad = |m: &str| CliError::Validation(format!("netpbm: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
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
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h * channels {
        return Err(bad(&format!("expected {} samples, found {}", w * h * channels, data.len())));
    }
    Ok((w, h, channels, data.to_vec()))
}

pub fn read_netpbm(path: &Path) -> CliResult<Raster> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Validation(format!("reading {}: {e}", path.display())))?;
    parse_netpbm(&bytes)
}

/// Fixed colours for class labels, background black.
pub fn class_color(label: usize) -> [u8; 3] {
    const TABLE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [255, 225, 25],
        [145, 30, 180],
        [0, 130, 200],
        [60, 180, 75],
        [70, 240, 240],
        [245, 130, 48],
    ];
    TABLE[label % TABLE.len()]
}

/// Well-spread colours for arbitrary ids.
pub fn id_color(id: usize) -> [u8; 3] {
    let mut x = (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 29;
    [(x >> 8) as u8 | 0x20, (x >> 24) as u8 | 0x20, (x >> 40) as u8 | 0x20]
}

pub fn colorize(labels: impl IntoIterator<Item = usize>, color: impl Fn(usize) -> [u8; 3]) -> Vec<u8> {
    labels.into_iter().flat_map(color).collect()
}

/// Half-and-half blend of an RGB image with a colour layer.
pub fn blend(rgb: &[u8], layer: &[u8]) -> Vec<u8> {
    rgb.iter().zip(layer).map(|(&a, &b)| ((a as u16 + b as u16) / 2) as u8).collect()
}

/// Weights in `[0, 1]` as grey levels.
pub fn gray_levels(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|v| v as u8).collect();
        assert_eq!(parse_netpbm(&ppm_bytes(2, 3, &rgb)).unwrap(), (2, 3, 3, rgb));
        let g = vec![7u8, 8, 9, 10];
        assert_eq!(parse_netpbm(&pgm_bytes(4, 1, &g)).unwrap(), (4, 1, 1, g));
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2]);
        assert_eq!(parse_netpbm(&bytes).unwrap().3, vec![1, 2]);
        assert!(parse_netpbm(b"P3\n1 1\n255\n000").is_err());
        assert!(parse_netpbm(b"P5\n2 2\n255\n\x01").is_err());
        assert!(parse_netpbm(b"P5\n1 1\n65535\n\x01\x01").is_err());
    }

    #[test]
    fn gray_levels_clamp() {
        assert_eq!(gray_levels([-1.0, 0.0, 0.5, 1.0, 2.0]), vec![0, 0, 128, 255, 255]);
    }
}
