//! Binary netpbm images (P5 grayscale, P6 RGB), 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Raw decoded netpbm raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Interleaved samples, row-major.
    pub pixels: Vec<u8>,
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Encode a 3-channel image with values in `[0, 1]` as P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!(
            "ppm needs 3 channels, got {}",
            image.shape()
        )));
    }
    let (h, w) = image.shape().spatial();
    let mut out = header("P6", w, h);
    out.reserve(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push(quantize(image.plane(c)[p]));
        }
    }
    Ok(out)
}

/// Encode a 1-channel image with values in `[0, 1]` as P5.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    if image.channels() != 1 {
        return Err(Error::Shape(format!(
            "pgm needs 1 channel, got {}",
            image.shape()
        )));
    }
    let (h, w) = image.shape().spatial();
    let mut out = header("P5", w, h);
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&b) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::PnmHeader(format!("expected {what} at byte {start}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::PnmHeader(format!("{what} out of range")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    let channels = match bytes.get(0..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::PnmHeader("magic is not P5 or P6".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    if !cur
        .bytes
        .get(2)
        .is_some_and(|b| b.is_ascii_whitespace() || *b == b'#')
    {
        return Err(Error::PnmHeader("missing whitespace after magic".into()));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::PnmHeader(format!("zero size {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::PnmHeader(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates maxval from the raster.
    if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::PnmHeader("missing whitespace after maxval".into()));
    }
    let start = cur.pos + 1;
    let len = width * height * channels;
    if bytes.len() != start + len {
        return Err(Error::PnmHeader(format!(
            "expected {len} raster bytes for {width}x{height}, found {}",
            bytes.len().saturating_sub(start)
        )));
    }
    Ok(Pnm {
        channels,
        width,
        height,
        pixels: bytes[start..].to_vec(),
    })
}

impl Pnm {
    /// Planar `[C, H, W]` tensor with samples scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        Tensor::from_fn(
            Shape::new(self.channels, self.height, self.width),
            |c, y, x| {
                let p = y * self.width + x;
                debug_assert!(p < n);
                self.pixels[p * self.channels + c] as f32 / 255.0
            },
        )
    }
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Pnm> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::PnmHeader(m) => Error::PnmHeader(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn read_expect(path: &Path, channels: usize) -> Result<Tensor> {
    let pnm = read_pnm(path)?;
    if pnm.channels != channels {
        return Err(Error::PnmHeader(format!(
            "{}: expected {channels} channel(s), found {}",
            path.display(),
            pnm.channels
        )));
    }
    Ok(pnm.to_tensor())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    read_expect(path.as_ref(), 3)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    read_expect(path.as_ref(), 1)
}

pub fn write_ppm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)?).map_err(|e| Error::io(path, e))
}

/// Write raw 8-bit samples as P5.
pub fn write_pgm_bytes(
    width: usize,
    height: usize,
    pixels: &[u8],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(pixels.len(), width * height);
    let mut out = header("P5", width, height);
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_ppm_size() {
        let img = Tensor::filled(Shape::new(3, 2, 2), 0.5);
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(bytes.len(), "P6\n2 2\n255\n".len() + 12);
    }

    #[test]
    fn quantized_round_trip_is_exact() {
        let img = Tensor::from_fn(Shape::new(3, 3, 4), |c, y, x| {
            ((c * 37 + y * 11 + x * 5) % 256) as f32 / 255.0
        });
        let back = decode_pnm(&encode_ppm(&img).unwrap()).unwrap().to_tensor();
        assert_eq!(back, img);
        let gray = img.slice_channels(1, 2).unwrap();
        let back = decode_pnm(&encode_pgm(&gray).unwrap()).unwrap().to_tensor();
        assert_eq!(back, gray);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let mut bytes = b"P5 # a comment\n# another\n 3\t1\n#c\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255]);
        let p = decode_pnm(&bytes).unwrap();
        assert_eq!((p.width, p.height, p.channels), (3, 1, 1));
        assert_eq!(p.pixels, vec![0, 128, 255]);
    }

    #[test]
    fn malformed_headers_are_named() {
        for bad in [
            &b"P3\n1 1\n255\n\x00"[..],
            b"P5\n1\n",
            b"P5\n1 1\n65535\n\x00\x00",
            b"P5\n2 2\n255\n\x00",
        ] {
            let err = decode_pnm(bad).unwrap_err();
            assert!(matches!(err, Error::PnmHeader(_)), "{err}");
        }
    }
}
