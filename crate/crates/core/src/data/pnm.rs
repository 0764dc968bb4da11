//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Quantizes a value in `[0,1]` to a byte.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0
}

/// Encodes a `[3,H,W]` tensor as a P6 file body.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::Dimension(format!("PPM needs a [3,H,W] tensor, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::Dimension(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    for i in 0..plane {
        out.extend([to_byte(d[i]), to_byte(d[plane + i]), to_byte(d[2 * plane + i])]);
    }
    Ok(out)
}

/// Encodes a single-plane tensor (`[H,W]`, `[1,H,W]` or `[1,1,H,W]`) as P5,
/// scaling `[0,1]` to `0..=255`.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let dims = map.shape();
    let (h, w) = match dims {
        &[h, w] | &[1, h, w] | &[1, 1, h, w] => (h, w),
        s => return Err(Error::Dimension(format!("PGM needs a single plane, got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(map)?).map_err(|e| Error::io(path, e))
}

struct Header {
    width: usize,
    height: usize,
    body: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("missing {} magic", String::from_utf8_lossy(magic)));
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
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header number")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    Ok(Header { width, height, body: pos + 1 })
}

/// Decodes a P6 body into a `[3,H,W]` tensor with values in `[0,1]`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let hd = parse_header(bytes, b"P6")?;
    let plane = hd.width * hd.height;
    let body = &bytes[hd.body..];
    if body.len() < 3 * plane {
        return Err(format!("truncated pixel data: {} of {} bytes", body.len(), 3 * plane));
    }
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in body.chunks_exact(3).take(plane).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = from_byte(px[c]);
        }
    }
    Tensor::new([3, hd.height, hd.width], data).map_err(|e| e.to_string())
}

/// Decodes a P5 body into a `[1,H,W]` tensor with values in `[0,1]`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let hd = parse_header(bytes, b"P5")?;
    let plane = hd.width * hd.height;
    let body = &bytes[hd.body..];
    if body.len() < plane {
        return Err(format!("truncated pixel data: {} of {plane} bytes", body.len()));
    }
    let data = body[..plane].iter().map(|&b| from_byte(b)).collect();
    Tensor::new([1, hd.height, hd.width], data).map_err(|e| e.to_string())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|m| Error::load(path, m))
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|m| Error::load(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_on_quantized_values() {
        let img = Tensor::from_fn([3, 2, 3], |i| ((i * 41) % 256) as f64 / 255.0);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0, 255]);
        let t = decode_pgm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn bad_files_are_rejected() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00").unwrap_err().contains("truncated"));
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00").is_err());
    }

    #[test]
    fn pgm_scales_by_255() {
        let t = Tensor::new([1, 1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let bytes = encode_pgm(&t).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }
}
