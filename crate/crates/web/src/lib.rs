//! Browser bindings for three interactive pieces of neurovis: radial
//! spatial-frequency filtering of a 1/f texture, the symmetric InfoNCE loss
//! as a function of temperature, and retrieval accuracy on a toy batch.
//!
//! The logic lives in [`ops`] so it can be tested natively; the exported
//! functions only convert errors for JavaScript.

use wasm_bindgen::prelude::*;

pub mod ops {
    use neurovis::contrastive::{infonce_from_similarity, similarity_matrix};
    use neurovis::freq::{filter_image, make_radial_mask, pink_noise, Band};
    use neurovis::image::Image;
    use neurovis::retrieval::topk_accuracy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub fn pink_image(size: usize, alpha: f64, seed: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        pink_noise(size, size, alpha, 0.5, 0.15, &mut rng)
    }

    pub fn filter_gray(pixels: &[f64], height: usize, width: usize, cutoff: f64, high: bool) -> Result<Vec<f64>, String> {
        let img = Image::new(1, height, width, pixels.to_vec()).map_err(|e| e.to_string())?;
        let band = if high { Band::High } else { Band::Low };
        filter_image(&img, cutoff, band).map(|f| f.pixels).map_err(|e| e.to_string())
    }

    /// 1 where the low band keeps a frequency, laid out with DC at the centre.
    pub fn radial_mask(height: usize, width: usize, cutoff: f64) -> Result<Vec<u8>, String> {
        let m = make_radial_mask(height, width, cutoff).map_err(|e| e.to_string())?;
        Ok(m.mask.iter().map(|&k| k as u8).collect())
    }

    fn unit_rows(mut v: Vec<f64>, d: usize) -> Vec<f64> {
        for row in v.chunks_exact_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    /// Matched unit embeddings where EEG is the image embedding plus noise.
    pub struct ToyBatch {
        pub batch: usize,
        pub similarity: Vec<f64>,
    }

    impl ToyBatch {
        pub fn new(batch: usize, dim: usize, noise: f64, seed: u32) -> Result<Self, String> {
            if batch == 0 || dim == 0 {
                return Err("batch and dim must be positive".into());
            }
            if !(noise >= 0.0) {
                return Err(format!("noise must be non-negative, got {noise}"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
            let z_i = unit_rows(draw(batch * dim), dim);
            let eps = draw(batch * dim);
            let z_e = unit_rows(z_i.iter().zip(&eps).map(|(a, e)| a + noise * e / (dim as f64).sqrt()).collect(), dim);
            let similarity = similarity_matrix(&z_e, &z_i, dim).map_err(|e| e.to_string())?;
            Ok(Self { batch, similarity })
        }

        pub fn loss(&self, tau: f64) -> Result<f64, String> {
            infonce_from_similarity(&self.similarity, self.batch, tau)
                .map(|(l, _, _)| l)
                .map_err(|e| e.to_string())
        }

        pub fn topk(&self, k: usize) -> Result<f64, String> {
            let truth: Vec<usize> = (0..self.batch).collect();
            topk_accuracy(&self.similarity, self.batch, &truth, k).map_err(|e| e.to_string())
        }
    }
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// Square grayscale 1/f texture with mean 0.5, row-major.
#[wasm_bindgen]
pub fn pink_image(size: usize, alpha: f64, seed: u32) -> Vec<f64> {
    ops::pink_image(size, alpha, seed)
}

#[wasm_bindgen]
pub fn filter_gray(pixels: &[f64], height: usize, width: usize, cutoff: f64, high: bool) -> Result<Vec<f64>, JsError> {
    ops::filter_gray(pixels, height, width, cutoff, high).map_err(js)
}

#[wasm_bindgen]
pub fn radial_mask(height: usize, width: usize, cutoff: f64) -> Result<Vec<u8>, JsError> {
    ops::radial_mask(height, width, cutoff).map_err(js)
}

#[wasm_bindgen]
pub struct ToyBatch(ops::ToyBatch);

#[wasm_bindgen]
impl ToyBatch {
    #[wasm_bindgen(constructor)]
    pub fn new(batch: usize, dim: usize, noise: f64, seed: u32) -> Result<ToyBatch, JsError> {
        ops::ToyBatch::new(batch, dim, noise, seed).map(ToyBatch).map_err(js)
    }

    /// Row-major `B x B` cosine similarities, EEG rows against image columns.
    pub fn similarity(&self) -> Vec<f64> {
        self.0.similarity.clone()
    }

    pub fn loss(&self, tau: f64) -> Result<f64, JsError> {
        self.0.loss(tau).map_err(js)
    }

    pub fn topk(&self, k: usize) -> Result<f64, JsError> {
        self.0.topk(k).map_err(js)
    }
}
