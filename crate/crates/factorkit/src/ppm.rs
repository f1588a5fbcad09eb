//! Binary PPM (P6) ingestion: decodes an RGB image into a (1, 3, H, W)
//! tensor with values scaled to [0, 1].

use crate::tensor::Tensor;
use std::io::Read;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PpmError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a binary PPM (P6) file")]
    BadMagic,
    #[error("malformed PPM header: {0}")]
    BadHeader(String),
    #[error("unsupported max value {0} (only 8-bit samples, maxval <= 255)")]
    UnsupportedMaxval(u32),
    #[error("pixel payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

pub fn load_ppm(path: &Path) -> Result<Tensor, PpmError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_ppm(&bytes)
}

/// Decodes P6 bytes: `P6`, whitespace-separated width/height/maxval with
/// `#` comments, a single whitespace byte, then width*height RGB triples.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, PpmError> {
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(PpmError::BadMagic);
    }
    let mut pos = 2usize;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        *field = read_header_int(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(PpmError::BadHeader(format!("degenerate size {}x{}", width, height)));
    }
    if maxval == 0 || maxval > 255 {
        return Err(PpmError::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PpmError::BadHeader("missing separator before pixel data".to_string())),
    }

    let (w, h) = (width as usize, height as usize);
    let expected = w * h * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PpmError::Truncated { expected, found: payload.len() });
    }
    let scale = 1.0f32 / maxval as f32;
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * 3;
            for c in 0..3 {
                data[c * h * w + y * w + x] = payload[src + c] as f32 * scale;
            }
        }
    }
    Ok(Tensor::from_vec([1, 3, h, w], data))
}

fn read_header_int(bytes: &[u8], pos: &mut usize) -> Result<u32, PpmError> {
    // skip whitespace and '#' comments
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            Some(b) => {
                return Err(PpmError::BadHeader(format!("unexpected byte 0x{:02x} in header", b)))
            }
            None => return Err(PpmError::BadHeader("header ended early".to_string())),
        }
    }
    let mut value: u64 = 0;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value * 10 + (b - b'0') as u64;
        if value > u32::MAX as u64 {
            return Err(PpmError::BadHeader("header value overflows u32".to_string()));
        }
        *pos += 1;
    }
    Ok(value as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_a_2x1_image() {
        // red pixel then mid-green pixel
        let bytes: Vec<u8> = [b"P6\n2 1\n255\n".as_slice(), &[255, 0, 0, 0, 128, 0]].concat();
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.dims(), [1, 3, 1, 2]);
        assert_eq!(t.at(0, 0, 0, 0), 1.0);
        assert_eq!(t.at(0, 1, 0, 0), 0.0);
        assert!((t.at(0, 1, 0, 1) - 128.0 / 255.0).abs() < 1e-7);
        assert_eq!(t.at(0, 2, 0, 1), 0.0);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes: Vec<u8> =
            [b"P6\n# made by hand\n1 1\n# another\n255\n".as_slice(), &[10, 20, 30]].concat();
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.dims(), [1, 3, 1, 1]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes: Vec<u8> = [b"P6\n2 2\n255\n".as_slice(), &[1, 2, 3]].concat();
        assert!(matches!(decode_ppm(&bytes), Err(PpmError::Truncated { .. })));
    }

    #[test]
    fn p3_is_rejected() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n1 2 3"), Err(PpmError::BadMagic)));
    }
}
