//! Binary portable pixmap (P6) encoding of `(3, h, w)` tensors in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "P6 pixmap",
        detail: detail.into(),
    }
}

/// Quantises to 8 bits with round-to-nearest.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("write_image", format!("expected (3, h, w), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    if d.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("image values must lie in [0, 1]"));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i] * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn skip_space_and_comments(buf: &[u8], pos: &mut usize) {
    while *pos < buf.len() {
        match buf[*pos] {
            b'#' => {
                while *pos < buf.len() && buf[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

fn header_int(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    skip_space_and_comments(buf, pos);
    let start = *pos;
    while *pos < buf.len() && buf[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&buf[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(format!("bad {what}")))
}

/// Decodes an 8-bit P6 pixmap into a `(3, h, w)` tensor scaled by `1/maxval`.
pub fn decode_ppm(buf: &[u8]) -> Result<Tensor> {
    if buf.len() < 2 || &buf[..2] != b"P6" {
        return Err(format_err("missing P6 magic"));
    }
    let mut pos = 2;
    let w = header_int(buf, &mut pos, "width")?;
    let h = header_int(buf, &mut pos, "height")?;
    let maxval = header_int(buf, &mut pos, "maxval")?;
    if w == 0 || h == 0 {
        return Err(format_err("zero-sized image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format_err(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(format_err("missing raster separator"));
    }
    pos += 1;
    let raster = &buf[pos..];
    if raster.len() < 3 * w * h {
        return Err(format_err(format!(
            "raster has {} bytes, need {}",
            raster.len(),
            3 * w * h
        )));
    }
    let scale = maxval as f64;
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let v = raster[3 * i + c] as usize;
            if v > maxval {
                return Err(format_err("sample exceeds maxval"));
            }
            data[c * h * w + i] = v as f64 / scale;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_ppm(image)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_round_trip_exactly() {
        let z = Tensor::zeros(vec![3, 4, 5]);
        assert_eq!(decode_ppm(&encode_ppm(&z).unwrap()).unwrap(), z);
    }

    #[test]
    fn header_is_canonical() {
        let bytes = encode_ppm(&Tensor::ones(vec![3, 2, 3])).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
    }

    #[test]
    fn linear_ramp_within_half_step() {
        // quantisation oracle: round-to-nearest error is at most 1/510
        let (h, w) = (4, 64);
        let n = h * w;
        let data: Vec<f64> = (0..3 * n).map(|i| (i % n) as f64 / (n - 1) as f64).collect();
        let x = Tensor::new(vec![3, h, w], data).unwrap();
        let y = decode_ppm(&encode_ppm(&x).unwrap()).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() <= 1.0 / 510.0 + 1e-12);
    }

    #[test]
    fn header_comments_and_small_maxval() {
        let mut bytes = b"P6 # comment\n1 1\n# another\n15\n".to_vec();
        bytes.extend([15, 0, 5]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 5.0 / 15.0]);
    }

    #[test]
    fn malformed_inputs_are_errors() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(encode_ppm(&Tensor::full(vec![3, 1, 1], 1.5)).is_err());
        assert!(encode_ppm(&Tensor::zeros(vec![1, 2, 2])).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/img.ppm");
        let x = Tensor::full(vec![3, 2, 2], 0.5);
        write_image(&p, &x).unwrap();
        let y = read_image(&p).unwrap();
        assert!(x.max_abs_diff(&y).unwrap() <= 1.0 / 255.0);
        assert!(read_image(&dir.path().join("missing.ppm")).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_error_bounded(vals in prop::collection::vec(0.0f64..=1.0, 3 * 6)) {
            let x = Tensor::new(vec![3, 2, 3], vals).unwrap();
            let y = decode_ppm(&encode_ppm(&x).unwrap()).unwrap();
            prop_assert!(x.max_abs_diff(&y).unwrap() <= 1.0 / 255.0 + 1e-12);
        }
    }
}
