//! Radial low-pass / high-pass decomposition of images in the 2-D Fourier
//! domain.
//!
//! The mask lives on the centered spectrum: bin `(u, v)` is kept by the
//! low-pass filter iff its distance from the zero-frequency bin is at most
//! `cutoff * min(H, W) / 2`. The high-pass mask is the exact complement,
//! so the two bands always sum back to the input.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_CUTOFF: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Low,
    High,
}

impl std::str::FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Band::Low),
            "high" => Ok(Band::High),
            other => Err(Error::Config(format!("band must be low or high, got {other}"))),
        }
    }
}

/// Binary low-pass mask over the centered frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialMask {
    pub height: usize,
    pub width: usize,
    pub cutoff: f64,
    /// Row-major, DC at `(height / 2, width / 2)`.
    pub mask: Vec<bool>,
}

/// Signed frequency of unshifted DFT index `k` on an axis of length `n`,
/// matching the centered layout with DC at `n / 2`.
fn signed_freq(k: usize, n: usize) -> i64 {
    ((k + n / 2) % n) as i64 - (n / 2) as i64
}

pub fn make_radial_mask(height: usize, width: usize, cutoff: f64) -> Result<RadialMask> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::Config(format!("cutoff ratio must be in (0, 1), got {cutoff}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Config("mask dims must be positive".into()));
    }
    let radius = cutoff * height.min(width) as f64 / 2.0;
    let (cy, cx) = ((height / 2) as f64, (width / 2) as f64);
    let mask = (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() <= radius
        })
        .collect();
    Ok(RadialMask {
        height,
        width,
        cutoff,
        mask,
    })
}

impl RadialMask {
    /// Mask value for an unshifted DFT bin.
    pub fn keeps(&self, u: usize, v: usize) -> bool {
        let y = (signed_freq(u, self.height) + (self.height / 2) as i64) as usize;
        let x = (signed_freq(v, self.width) + (self.width / 2) as i64) as usize;
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Unnormalized forward 2-D DFT of one real plane (row-major, unshifted).
pub fn spectrum(plane: &[f64], height: usize, width: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut buf, height, width, false);
    buf
}

fn fft2(buf: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for row in buf.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = buf[y * width + x];
        }
        col_fft.process(&mut col);
        for y in 0..height {
            buf[y * width + x] = col[y];
        }
    }
    if inverse {
        let scale = 1.0 / (height * width) as f64;
        buf.iter_mut().for_each(|c| *c *= scale);
    }
}

/// Keeps the low or high spatial-frequency band of every channel.
///
/// Output values are real parts of the inverse transform and are not
/// re-clamped to `[0, 1]`.
pub fn filter_image(img: &Image, cutoff: f64, band: Band) -> Result<Image> {
    if img.height < 2 || img.width < 2 {
        return Err(Error::BadImage(format!(
            "filtering needs at least 2x2 pixels, got {}x{}",
            img.height, img.width
        )));
    }
    let mask = make_radial_mask(img.height, img.width, cutoff)?;
    let (h, w) = (img.height, img.width);
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for c in 0..img.channels {
        let plane = img.plane(c);
        let mut buf = spectrum(plane, h, w);
        for u in 0..h {
            for v in 0..w {
                if mask.keeps(u, v) != (band == Band::Low) {
                    buf[u * w + v] = Complex64::new(0.0, 0.0);
                }
            }
        }
        fft2(&mut buf, h, w, true);
        let scale = plane.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let residue = buf.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
        if residue >= 1e-9 * scale {
            return Err(Error::BadImage(format!("imaginary residue {residue} after filtering")));
        }
        pixels.extend(buf.iter().map(|z| z.re));
    }
    Image::new(img.channels, h, w, pixels)
}

/// Natural-image-like texture with a `1/f^alpha` amplitude spectrum and
/// random phases, rescaled to the given mean and standard deviation.
pub fn pink_noise<R: Rng>(height: usize, width: usize, alpha: f64, mean: f64, std: f64, rng: &mut R) -> Vec<f64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); height * width];
    for u in 0..height {
        for v in 0..width {
            let (fy, fx) = (signed_freq(u, height) as f64, signed_freq(v, width) as f64);
            let f = (fy * fy + fx * fx).sqrt();
            if f == 0.0 {
                continue;
            }
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            buf[u * width + v] = Complex64::new(a, b) / f.powf(alpha);
        }
    }
    fft2(&mut buf, height, width, true);
    let re: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let m = re.iter().sum::<f64>() / re.len() as f64;
    let sd = (re.iter().map(|x| (x - m).powi(2)).sum::<f64>() / re.len() as f64).sqrt();
    re.iter().map(|x| mean + std * (x - m) / sd.max(1e-300)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(channels: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(channels, h, w, (0..channels * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn tiny_cutoff_keeps_only_dc() {
        let m = make_radial_mask(8, 8, 1e-6).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.mask[4 * 8 + 4]);
        assert!(m.keeps(0, 0));
    }

    #[test]
    fn near_one_cutoff_covers_inscribed_disc() {
        let m = make_radial_mask(8, 8, 0.999).unwrap();
        // enumerate integer offsets on the centered 8x8 grid directly
        let mut expect = 0;
        for dy in -4i32..4 {
            for dx in -4i32..4 {
                if ((dy * dy + dx * dx) as f64).sqrt() <= 0.999 * 4.0 {
                    expect += 1;
                }
            }
        }
        assert_eq!(m.count(), expect);
        assert_eq!(expect, 45);
    }

    #[test]
    fn mask_is_point_symmetric() {
        for (h, w, rho) in [(8, 8, 0.2), (9, 6, 0.5), (16, 12, 0.37)] {
            let m = make_radial_mask(h, w, rho).unwrap();
            for u in 0..h {
                for v in 0..w {
                    assert_eq!(m.keeps(u, v), m.keeps((h - u) % h, (w - v) % w));
                }
            }
        }
    }

    #[test]
    fn cutoff_out_of_range() {
        assert!(make_radial_mask(8, 8, 0.0).is_err());
        assert!(make_radial_mask(8, 8, 1.0).is_err());
    }

    #[test]
    fn constant_image_cases() {
        let img = Image::constant(1, 6, 5, 0.4).unwrap();
        let low = filter_image(&img, 0.2, Band::Low).unwrap();
        let high = filter_image(&img, 0.2, Band::High).unwrap();
        assert!(low.pixels.iter().all(|v| (v - 0.4).abs() < 1e-12));
        assert!(high.pixels.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn bands_are_complementary_and_idempotent() {
        for (c, h, w) in [(1, 16, 16), (3, 9, 12)] {
            let img = random_image(c, h, w, 7);
            let low = filter_image(&img, 0.2, Band::Low).unwrap();
            let high = filter_image(&img, 0.2, Band::High).unwrap();
            for i in 0..img.pixels.len() {
                assert!((low.pixels[i] + high.pixels[i] - img.pixels[i]).abs() < 1e-9);
            }
            let twice = filter_image(&low, 0.2, Band::Low).unwrap();
            for (a, b) in twice.pixels.iter().zip(&low.pixels) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fft_matches_naive_dft_and_parseval() {
        let img = random_image(1, 5, 6, 3);
        let s = spectrum(&img.pixels, 5, 6);
        for u in 0..5 {
            for v in 0..6 {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..5 {
                    for x in 0..6 {
                        let ang = -2.0 * std::f64::consts::PI * (u * y) as f64 / 5.0
                            - 2.0 * std::f64::consts::PI * (v * x) as f64 / 6.0;
                        acc += Complex64::from_polar(img.pixels[y * 6 + x], ang);
                    }
                }
                assert!((acc - s[u * 6 + v]).norm() < 1e-10);
            }
        }
        let energy: f64 = img.pixels.iter().map(|v| v * v).sum();
        let spec: f64 = s.iter().map(|z| z.norm_sqr()).sum::<f64>() / 30.0;
        assert!((energy - spec).abs() / energy < 1e-9);
    }

    #[test]
    fn pink_noise_has_requested_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = pink_noise(32, 32, 1.0, 0.5, 0.1, &mut rng);
        let m = img.iter().sum::<f64>() / img.len() as f64;
        let sd = (img.iter().map(|x| (x - m).powi(2)).sum::<f64>() / img.len() as f64).sqrt();
        assert!((m - 0.5).abs() < 1e-12 && (sd - 0.1).abs() < 1e-12);
    }

    #[test]
    fn low_band_dominates_natural_like_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let energy = |img: &Image| img.pixels.iter().map(|v| v * v).sum::<f64>();
        for _ in 0..100 {
            let px = pink_noise(32, 32, 1.0, 0.5, 0.2, &mut rng);
            let img = Image::new(1, 32, 32, px).unwrap();
            let lo = filter_image(&img, DEFAULT_CUTOFF, Band::Low).unwrap();
            let hi = filter_image(&img, DEFAULT_CUTOFF, Band::High).unwrap();
            assert!(energy(&lo) > energy(&hi));
        }
    }
}
