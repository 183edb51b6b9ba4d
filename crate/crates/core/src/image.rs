//! Float images and 8-bit binary PGM (`P5`) / PPM (`P6`) files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, Tensor};

/// Channel-major `(channels, height, width)` float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if !(channels == 1 || channels == 3) || height == 0 || width == 0 {
            return Err(Error::BadImage(format!(
                "unsupported geometry {channels}x{height}x{width}"
            )));
        }
        if pixels.len() != channels * height * width || pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadImage("pixel buffer size or values invalid".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    /// Rec. 601 luma; grayscale images are returned unchanged.
    pub fn to_luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let pixels = (0..r.len()).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect();
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f64(vec![self.channels, self.height, self.width], self.pixels.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [c, h, w] = t.shape() else {
            return Err(Error::BadImage(format!("image tensor must be rank 3, got {:?}", t.shape())));
        };
        Self::new(*c, *h, *w, t.to_f64_vec())
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::BadImage(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("expected P5 or P6 magic")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(bad(format!("only 8-bit files are supported (maxval {maxval})")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("malformed header"));
    }
    let start = cur.pos + 1;
    let n = width * height * channels;
    let payload = bytes
        .get(start..start + n)
        .ok_or_else(|| bad(format!("truncated payload: need {n} bytes")))?;
    let mut pixels = vec![0.0; n];
    // interleaved RGB on disk, channel-major in memory
    let plane = width * height;
    for (i, &b) in payload.iter().enumerate() {
        let (px, c) = (i / channels, i % channels);
        pixels[c * plane + px] = b as f64 / 255.0;
    }
    Image::new(channels, height, width, pixels)
}

/// Maps `[0, 1]` to bytes with round-half-up, clamping out-of-range values.
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.width * img.height;
    for px in 0..plane {
        for c in 0..img.channels {
            let v = (img.pixels[c * plane + px] * 255.0 + 0.5).floor();
            out.push(v.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::BadImage(m) => Error::BadImage(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

/// Extensions accepted by [`load_image_file`].
pub const IMAGE_EXTENSIONS: [&str; 4] = ["pgm", "ppm", "pnm", "nvat"];

/// Reads an 8-bit PGM/PPM or a float `(C, H, W)` tensor, by extension.
pub fn load_image_file(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("nvat") => Image::from_tensor(&read_tensor(path)?),
        Some("pgm" | "ppm" | "pnm") => read_image(path),
        _ => Err(Error::BadImage(format!("{}: unknown image extension", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_white_pixel() {
        let img = decode_pnm(b"P5 1 1 255\n\xff").unwrap();
        assert_eq!(img.pixels, vec![1.0]);
        let two = decode_pnm(b"P5\n# comment\n2 2\n255\n\xff\x00\x80\x01").unwrap();
        assert_eq!(two.pixels[0], 1.0);
        assert_eq!(two.pixels[1], 0.0);
    }

    #[test]
    fn white_pixel_maps_to_one() {
        let img = decode_pnm(b"P5 2 2 255\n\xff\xff\xff\xff").unwrap();
        assert!(img.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn random_roundtrip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for channels in [1, 3] {
            let (w, h) = (7, 5);
            let mut bytes = format!("P{} {w} {h} 255\n", if channels == 1 { 5 } else { 6 }).into_bytes();
            bytes.extend((0..w * h * channels).map(|_| rng.random::<u8>()));
            let img = decode_pnm(&bytes).unwrap();
            let back = encode_pnm(&img);
            let payload = |b: &[u8]| b[b.len() - w * h * channels..].to_vec();
            assert_eq!(payload(&back), payload(&bytes));
            assert_eq!(decode_pnm(&back).unwrap(), img);
        }
    }

    #[test]
    fn truncated_p6_rejected() {
        let err = decode_pnm(b"P6 2 2 255\n\x00\x01\x02").unwrap_err();
        assert!(err.to_string().contains("bad image file"));
        assert!(decode_pnm(b"P3 2 2 255\n").is_err());
        assert!(decode_pnm(b"P5 2 2 65535\n\x00\x00\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn luma_weights() {
        let img = Image::new(3, 2, 2, [vec![1.0; 4], vec![0.0; 4], vec![0.0; 4]].concat()).unwrap();
        assert!(img.to_luma().pixels.iter().all(|&v| (v - 0.299).abs() < 1e-15));
    }
}
