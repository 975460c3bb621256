//! 8-bit image files as `[3, H, W]` tensors in `[0, 1]`.
//!
//! Binary PPM (`P6`, maxval 255) is always available. PNG needs the `png`
//! feature. Grayscale maps are written as binary PGM (`P5`).

use std::fs;
use std::path::Path;

use drwkv::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: not a binary PPM (magic {found:?}, expected \"P6\")")]
    BadMagic { path: String, found: String },
    #[error("{path}: malformed header: {msg}")]
    MalformedHeader { path: String, msg: String },
    #[error("{path}: unsupported maxval {maxval}, only 255 is accepted")]
    UnsupportedMaxval { path: String, maxval: u64 },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("{path}: {msg}")]
    Unsupported { path: String, msg: String },
    #[error("expected a [3, H, W] image, got {0:?}")]
    Shape(Vec<usize>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a PPM (or PNG with the `png` feature) into `[3, H, W]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>, ImageError> {
    let path = path.as_ref();
    if is_png(path) {
        return read_png(path);
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes, &path.display().to_string())
}

/// Writes `[3, H, W]` values, clamped to `[0, 1]` and rounded half up to 8 bits.
pub fn write_image(img: &Tensor<f32>, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    if is_png(path) {
        return write_png(img, path);
    }
    fs::write(path, encode_ppm(img)?).map_err(io_err(path))
}

/// `v ∈ [0, 1] -> round_half_up(255 v)`.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (f64::from(v) * 255.0 + 0.5).floor() as u8
}

fn dims(img: &Tensor<f32>) -> Result<(usize, usize), ImageError> {
    match *img.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(ImageError::Shape(img.shape().to_vec())),
    }
}

/// Interleaves planar RGB into 8-bit samples.
fn to_rgb8(img: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let (h, w) = dims(img)?;
    let plane = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok((h, w, out))
}

fn from_rgb8(h: usize, w: usize, rgb: &[u8]) -> Tensor<f32> {
    let plane = h * w;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        f32::from(rgb[3 * p + c]) / 255.0
    })
}

pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>, ImageError> {
    let (h, w, rgb) = to_rgb8(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    Ok(out)
}

/// Header tokenizer: whitespace-separated fields, `#` comments to end of line.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64, String> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("missing {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("{what} out of range"))
    }
}

/// Decodes a binary PPM; `name` is only used in errors.
pub fn decode_ppm(bytes: &[u8], name: &str) -> Result<Tensor<f32>, ImageError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(ImageError::BadMagic {
            path: name.into(),
            found,
        });
    }
    let malformed = |msg: String| ImageError::MalformedHeader {
        path: name.into(),
        msg,
    };
    let mut hd = Header { bytes, pos: 2 };
    if !hd.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(malformed("no separator after magic".into()));
    }
    let w = hd.number("width").map_err(malformed)?;
    let h = hd.number("height").map_err(malformed)?;
    let maxval = hd.number("maxval").map_err(malformed)?;
    if w == 0 || h == 0 {
        return Err(malformed(format!("empty image {w}x{h}")));
    }
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval {
            path: name.into(),
            maxval,
        });
    }
    if !bytes.get(hd.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("no whitespace before payload".into()));
    }
    let payload = &bytes[hd.pos + 1..];
    let (w, h) = (w as usize, h as usize);
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| malformed(format!("extent {w}x{h} too large")))?;
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            path: name.into(),
            expected,
            found: payload.len(),
        });
    }
    Ok(from_rgb8(h, w, &payload[..expected]))
}

/// Writes a single-channel `[H, W]` map (row-major values in `[0, 1]`) as PGM.
pub fn write_pgm(values: &[f32], h: usize, w: usize, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    if values.len() != h * w {
        return Err(ImageError::Shape(vec![values.len(), h, w]));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    fs::write(path, out).map_err(io_err(path))
}

#[cfg(feature = "png")]
fn read_png(path: &Path) -> Result<Tensor<f32>, ImageError> {
    let img = image::open(path).map_err(|e| ImageError::Unsupported {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(from_rgb8(h, w, rgb.as_raw()))
}

#[cfg(feature = "png")]
fn write_png(img: &Tensor<f32>, path: &Path) -> Result<(), ImageError> {
    let (h, w, rgb) = to_rgb8(img)?;
    image::save_buffer(path, &rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8).map_err(|e| {
        ImageError::Unsupported {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    })
}

#[cfg(not(feature = "png"))]
fn read_png(path: &Path) -> Result<Tensor<f32>, ImageError> {
    Err(no_png(path))
}

#[cfg(not(feature = "png"))]
fn write_png(_: &Tensor<f32>, path: &Path) -> Result<(), ImageError> {
    Err(no_png(path))
}

#[cfg(not(feature = "png"))]
fn no_png(path: &Path) -> ImageError {
    ImageError::Unsupported {
        path: path.display().to_string(),
        msg: "PNG support is not compiled in (build with --features png)".into(),
    }
}
