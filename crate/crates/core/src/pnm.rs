//! Binary PPM (P6) images and PGM (P5) label masks, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::image::{Image, LabelMask};
use crate::scalar::Scalar;

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected magic {}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&bytes[..bytes.len().min(2)])
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed header: expected a decimal field".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header field out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("malformed header: missing separator before raster".into()));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported (8-bit only)")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

fn raster(bytes: &[u8], h: &Header, channels: usize) -> Result<Vec<u8>> {
    let n = h.width * h.height * channels;
    let data = &bytes[h.offset.min(bytes.len())..];
    if data.len() < n {
        return Err(Error::Format(format!("raster truncated: need {n} bytes, found {}", data.len())));
    }
    Ok(data[..n].to_vec())
}

pub fn encode_ppm<S: Scalar>(image: &Image<S>) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.data().iter().map(|v| (v.f64() * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn decode_ppm<S: Scalar>(bytes: &[u8]) -> Result<Image<S>> {
    let h = parse_header(bytes, b"P6")?;
    let max = h.maxval as f64;
    let data = raster(bytes, &h, 3)?.into_iter().map(|b| S::of(b as f64 / max)).collect();
    Image::new(h.height, h.width, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn encode_pgm(mask: &LabelMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.labels());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMask> {
    let h = parse_header(bytes, b"P5")?;
    LabelMask::new(h.height, h.width, raster(bytes, &h, 1)?)
}

pub fn read_ppm<S: Scalar>(path: &Path) -> Result<Image<S>> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_ppm<S: Scalar>(path: &Path, image: &Image<S>) -> Result<()> {
    write_atomic(path, &encode_ppm(image))
}

pub fn read_pgm(path: &Path) -> Result<LabelMask> {
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: &Path, mask: &LabelMask) -> Result<()> {
    write_atomic(path, &encode_pgm(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::IGNORE;

    #[test]
    fn mask_round_trip_is_exact() {
        let labels: Vec<u8> = (0..80).map(|i| if i % 7 == 0 { IGNORE } else { (i % 9) as u8 }).collect();
        let m = LabelMask::new(8, 10, labels).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&m)).unwrap(), m);
    }

    #[test]
    fn image_round_trip_is_quantized() {
        let data: Vec<f64> = (0..192).map(|i| i as f64 / 191.0).collect();
        let img = Image::new(8, 8, data).unwrap();
        let back: Image<f64> = decode_ppm(&encode_ppm(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let again: Image<f64> = decode_ppm(&encode_ppm(&back)).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn wrong_magic_and_sixteen_bit_rejected() {
        let m = LabelMask::filled(8, 8, 1);
        let mut bytes = encode_pgm(&m);
        assert!(matches!(decode_ppm::<f64>(&bytes), Err(Error::Format(_))));
        bytes[1] = b'6';
        assert!(matches!(decode_pgm(&bytes), Err(Error::Format(_))));
        let wide = b"P5\n8 8\n65535\n".to_vec();
        assert!(matches!(decode_pgm(&wide), Err(Error::Format(_))));
    }

    #[test]
    fn comments_and_truncation() {
        let mut bytes = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        bytes.extend([0, 1, 2]);
        assert!(matches!(decode_pgm(&bytes), Err(Error::Format(_))));
        bytes.push(IGNORE);
        assert_eq!(decode_pgm(&bytes).unwrap().labels(), &[0, 1, 2, IGNORE]);
    }
}
