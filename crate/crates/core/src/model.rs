//! The trainable stack: a temporal-spatial convolutional EEG encoder, the
//! EEG projection head, the image-side fusion head, and a learnable
//! temperature, with analytic backward passes for the whole graph.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::infonce_from_similarity;
use crate::error::{Error, Result};
use crate::features::order_free_sum;
use crate::fusion::FusionHead;
use crate::par::par_map;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const INIT_TEMPERATURE: f64 = 0.07;
pub const MIN_TEMPERATURE: f64 = 0.01;
pub const MAX_TEMPERATURE: f64 = 100.0;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub samples: usize,
    pub temporal_filters: usize,
    pub temporal_kernel: usize,
    pub spatial_filters: usize,
    pub encoder_dim: usize,
    pub embed_dim: usize,
    /// Pooled dims of the fused image layers, in fusion order.
    pub block_dims: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 17,
            samples: 250,
            temporal_filters: 40,
            temporal_kernel: 25,
            spatial_filters: 40,
            encoder_dim: 128,
            embed_dim: 128,
            block_dims: vec![],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.samples,
            self.temporal_filters,
            self.temporal_kernel,
            self.spatial_filters,
            self.encoder_dim,
            self.embed_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dims must be positive: {self:?}")));
        }
        if self.temporal_kernel > self.samples {
            return Err(Error::KernelTooLong {
                kernel: self.temporal_kernel,
                signal: self.samples,
            });
        }
        if self.block_dims.is_empty() || self.block_dims.contains(&0) {
            return Err(Error::FusionDimensionMismatch(format!(
                "block dims {:?} must be non-empty and positive",
                self.block_dims
            )));
        }
        Ok(())
    }

    pub fn conv_len(&self) -> usize {
        self.samples - self.temporal_kernel + 1
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Temporal convolution shared across channels, a spatial convolution that
/// collapses channels, GELU, global temporal mean, then an affine head.
#[derive(Debug, Clone, PartialEq)]
pub struct EegEncoderParams {
    /// `F_t x k_t`
    pub temporal: Vec<f64>,
    /// `F_s x F_t x C`
    pub spatial: Vec<f64>,
    /// `d_enc x F_s`
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    pub channels: usize,
    pub temporal_filters: usize,
    pub temporal_kernel: usize,
    pub spatial_filters: usize,
    pub encoder_dim: usize,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    /// `F_t x C x T1`
    pub temporal_out: Vec<f64>,
    /// `F_s x T1`, pre-activation
    pub spatial_out: Vec<f64>,
    /// `F_s`
    pub pooled: Vec<f64>,
    pub output: Vec<f64>,
    pub conv_len: usize,
}

/// Mean over time of each row, invariant to the order of time positions.
pub fn temporal_mean_pool(activated: &[f64], rows: usize, len: usize) -> Vec<f64> {
    let mut buf = Vec::with_capacity(len);
    (0..rows)
        .map(|g| {
            buf.clear();
            buf.extend_from_slice(&activated[g * len..(g + 1) * len]);
            order_free_sum(&mut buf) / len as f64
        })
        .collect()
}

impl EegEncoderParams {
    pub fn forward(&self, x: &[f64], samples: usize) -> Result<EncoderCache> {
        let (c, ft, kt, fs) = (
            self.channels,
            self.temporal_filters,
            self.temporal_kernel,
            self.spatial_filters,
        );
        if x.len() != c * samples {
            return Err(Error::Shape(format!(
                "encoder expects {c} x {samples} input, got {} values",
                x.len()
            )));
        }
        if kt > samples {
            return Err(Error::KernelTooLong {
                kernel: kt,
                signal: samples,
            });
        }
        let t1 = samples - kt + 1;
        let mut a = vec![0.0; ft * c * t1];
        for f in 0..ft {
            let k = &self.temporal[f * kt..(f + 1) * kt];
            for ch in 0..c {
                let xr = &x[ch * samples..(ch + 1) * samples];
                let out = &mut a[(f * c + ch) * t1..(f * c + ch + 1) * t1];
                for (j, &kj) in k.iter().enumerate() {
                    for (o, &xv) in out.iter_mut().zip(&xr[j..j + t1]) {
                        *o += kj * xv;
                    }
                }
            }
        }
        let mut p = vec![0.0; fs * t1];
        for g in 0..fs {
            let out = &mut p[g * t1..(g + 1) * t1];
            for fc in 0..ft * c {
                let w = self.spatial[g * ft * c + fc];
                for (o, &av) in out.iter_mut().zip(&a[fc * t1..(fc + 1) * t1]) {
                    *o += w * av;
                }
            }
        }
        let activated: Vec<f64> = p.iter().map(|&v| gelu(v)).collect();
        let pooled = temporal_mean_pool(&activated, fs, t1);
        let output = self
            .head_w
            .chunks_exact(fs)
            .zip(&self.head_b)
            .map(|(row, b)| row.iter().zip(&pooled).map(|(w, m)| w * m).sum::<f64>() + b)
            .collect();
        Ok(EncoderCache {
            temporal_out: a,
            spatial_out: p,
            pooled,
            output,
            conv_len: t1,
        })
    }

    /// Accumulates parameter gradients given `d loss / d output`.
    pub fn backward(&self, x: &[f64], samples: usize, cache: &EncoderCache, d_out: &[f64], grads: &mut [Vec<f64>]) {
        let (c, ft, kt, fs) = (
            self.channels,
            self.temporal_filters,
            self.temporal_kernel,
            self.spatial_filters,
        );
        let t1 = cache.conv_len;
        let [g_temporal, g_spatial, g_head_w, g_head_b] = grads else {
            unreachable!("encoder has four parameter tensors")
        };
        let mut d_pooled = vec![0.0; fs];
        for (r, &g) in d_out.iter().enumerate() {
            g_head_b[r] += g;
            for k in 0..fs {
                g_head_w[r * fs + k] += g * cache.pooled[k];
                d_pooled[k] += g * self.head_w[r * fs + k];
            }
        }
        let inv_t1 = 1.0 / t1 as f64;
        let d_p: Vec<f64> = (0..fs * t1)
            .map(|i| d_pooled[i / t1] * inv_t1 * gelu_grad(cache.spatial_out[i]))
            .collect();
        let mut d_a = vec![0.0; ft * c * t1];
        for g in 0..fs {
            let dp = &d_p[g * t1..(g + 1) * t1];
            for fc in 0..ft * c {
                let av = &cache.temporal_out[fc * t1..(fc + 1) * t1];
                g_spatial[g * ft * c + fc] += dp.iter().zip(av).map(|(x, y)| x * y).sum::<f64>();
                let w = self.spatial[g * ft * c + fc];
                for (d, &v) in d_a[fc * t1..(fc + 1) * t1].iter_mut().zip(dp) {
                    *d += w * v;
                }
            }
        }
        for f in 0..ft {
            for ch in 0..c {
                let da = &d_a[(f * c + ch) * t1..(f * c + ch + 1) * t1];
                let xr = &x[ch * samples..(ch + 1) * samples];
                for j in 0..kt {
                    g_temporal[f * kt + j] += da.iter().zip(&xr[j..j + t1]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
}

fn uniform_fan_in(n: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Names of the trainable tensors, in gradient order.
pub const PARAM_NAMES: [&str; 9] = [
    "encoder.temporal",
    "encoder.spatial",
    "encoder.head_w",
    "encoder.head_b",
    "p_e.weight",
    "p_e.bias",
    "fusion.weight",
    "fusion.bias",
    "log_tau",
];

/// Parameters excluded from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with("bias") || name.ends_with("_b") || name == "log_tau")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub config: ModelConfig,
    pub encoder: EegEncoderParams,
    /// `d x d_enc`
    pub pe_w: Vec<f64>,
    pub pe_b: Vec<f64>,
    pub fusion: FusionHead,
    pub log_tau: f64,
}

/// Gradient tensors aligned with [`PARAM_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }
}

/// Loss of one batch with gradients for every parameter.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub grads: Gradients,
}

fn normalize(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    Ok((v.iter().map(|x| x / norm).collect(), norm))
}

/// Backprop through `z = y / |y|`.
fn normalize_backward(z: &[f64], norm: f64, dz: &[f64]) -> Vec<f64> {
    let dot: f64 = z.iter().zip(dz).map(|(a, b)| a * b).sum();
    z.iter().zip(dz).map(|(zi, g)| (g - zi * dot) / norm).collect()
}

struct EegForward {
    cache: EncoderCache,
    z: Vec<f64>,
    norm: f64,
}

struct ImageForward {
    z: Vec<f64>,
    norm: f64,
}

impl AlignmentModel {
    /// Deterministic fan-in uniform init, zero biases, temperature 0.07.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, ft, kt, fs, de, d) = (
            config.channels,
            config.temporal_filters,
            config.temporal_kernel,
            config.spatial_filters,
            config.encoder_dim,
            config.embed_dim,
        );
        let encoder = EegEncoderParams {
            temporal: uniform_fan_in(ft * kt, kt, &mut rng),
            spatial: uniform_fan_in(fs * ft * c, ft * c, &mut rng),
            head_w: uniform_fan_in(de * fs, fs, &mut rng),
            head_b: vec![0.0; de],
            channels: c,
            temporal_filters: ft,
            temporal_kernel: kt,
            spatial_filters: fs,
            encoder_dim: de,
        };
        let pe_w = uniform_fan_in(d * de, de, &mut rng);
        let fusion = FusionHead::init(config.block_dims.clone(), d, &mut rng)?;
        Ok(Self {
            encoder,
            pe_w,
            pe_b: vec![0.0; d],
            fusion,
            log_tau: INIT_TEMPERATURE.ln(),
            config,
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn clamp_temperature(&mut self) {
        self.log_tau = self.log_tau.clamp(MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    }

    pub fn eeg_encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encoder.forward(x, self.config.samples)?.output)
    }

    fn project_eeg(&self, h: &[f64]) -> Vec<f64> {
        let de = self.config.encoder_dim;
        self.pe_w
            .chunks_exact(de)
            .zip(&self.pe_b)
            .map(|(row, b)| row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    fn forward_eeg(&self, x: &[f64]) -> Result<EegForward> {
        let cache = self.encoder.forward(x, self.config.samples)?;
        let e = self.project_eeg(&cache.output);
        let (z, norm) = normalize(&e)?;
        Ok(EegForward { cache, z, norm })
    }

    fn split_blocks<'a>(&self, fused: &'a [f64]) -> Result<Vec<&'a [f64]>> {
        if fused.len() != self.fusion.cols() {
            return Err(Error::FusionDimensionMismatch(format!(
                "image vector has {} entries, head expects {}",
                fused.len(),
                self.fusion.cols()
            )));
        }
        let mut out = Vec::with_capacity(self.fusion.block_dims.len());
        let mut off = 0;
        for &d in &self.fusion.block_dims {
            out.push(&fused[off..off + d]);
            off += d;
        }
        Ok(out)
    }

    fn forward_image(&self, blocks: &[&[f64]]) -> Result<ImageForward> {
        let y = self.fusion.project_blockwise(blocks)?;
        let (z, norm) = normalize(&y)?;
        Ok(ImageForward { z, norm })
    }

    /// Unit-norm EEG embedding.
    pub fn embed_eeg(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_eeg(x)?.z)
    }

    /// Unit-norm image embedding from per-layer pooled vectors.
    pub fn embed_image(&self, pooled: &[&[f64]]) -> Result<Vec<f64>> {
        Ok(self.forward_image(pooled)?.z)
    }

    /// Same as [`embed_image`](Self::embed_image) for a concatenated vector.
    pub fn embed_image_fused(&self, fused: &[f64]) -> Result<Vec<f64>> {
        self.embed_image(&self.split_blocks(fused)?)
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients(self.param_slices().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            &self.encoder.temporal,
            &self.encoder.spatial,
            &self.encoder.head_w,
            &self.encoder.head_b,
            &self.pe_w,
            &self.pe_b,
            &self.fusion.weight,
            &self.fusion.bias,
            std::slice::from_ref(&self.log_tau),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.encoder.temporal,
            &mut self.encoder.spatial,
            &mut self.encoder.head_w,
            &mut self.encoder.head_b,
            &mut self.pe_w,
            &mut self.pe_b,
            &mut self.fusion.weight,
            &mut self.fusion.bias,
            std::slice::from_mut(&mut self.log_tau),
        ]
    }

    /// Symmetric InfoNCE loss of a matched batch and its gradient with
    /// respect to every parameter. `eeg[a]` pairs with `images[a]`
    /// (concatenated pooled layer vectors).
    pub fn loss_and_grad(&self, eeg: &[Vec<f64>], images: &[Vec<f64>]) -> Result<BatchOutcome> {
        let b = eeg.len();
        if b == 0 || images.len() != b {
            return Err(Error::Shape(format!("{b} EEG samples vs {} images", images.len())));
        }
        let d = self.config.embed_dim;
        let eeg_fwd = par_map(eeg, |x| self.forward_eeg(x)).into_iter().collect::<Result<Vec<_>>>()?;
        let img_fwd = par_map(images, |v| self.split_blocks(v).and_then(|bl| self.forward_image(&bl)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let z_e: Vec<f64> = eeg_fwd.iter().flat_map(|f| f.z.iter().copied()).collect();
        let z_i: Vec<f64> = img_fwd.iter().flat_map(|f| f.z.iter().copied()).collect();
        let s = crate::contrastive::similarity_matrix(&z_e, &z_i, d)?;
        let tau = self.tau();
        let (loss, d_s, d_tau) = infonce_from_similarity(&s, b, tau)?;

        let idx: Vec<usize> = (0..b).collect();
        let per_sample = par_map(&idx, |&a| {
            let mut g = self.zero_grads();
            let mut dz_e = vec![0.0; d];
            let mut dz_i = vec![0.0; d];
            for c in 0..b {
                let (w_row, w_col) = (d_s[a * b + c], d_s[c * b + a]);
                for k in 0..d {
                    dz_e[k] += w_row * z_i[c * d + k];
                    dz_i[k] += w_col * z_e[c * d + k];
                }
            }
            self.backward_eeg(&eeg[a], &eeg_fwd[a], &dz_e, &mut g);
            let blocks = self.split_blocks(&images[a]).expect("validated in forward");
            let dy = normalize_backward(&img_fwd[a].z, img_fwd[a].norm, &dz_i);
            let (head, rest) = g.0[6..8].split_at_mut(1);
            self.fusion.accumulate_grad(&blocks, &dy, &mut head[0], &mut rest[0]);
            g
        });
        let mut grads = self.zero_grads();
        for g in &per_sample {
            grads.add_assign(g);
        }
        grads.0[8][0] = d_tau * tau;
        Ok(BatchOutcome { loss, grads })
    }

    fn backward_eeg(&self, x: &[f64], fwd: &EegForward, dz: &[f64], g: &mut Gradients) {
        let de = self.config.encoder_dim;
        let d_e = normalize_backward(&fwd.z, fwd.norm, dz);
        let h = &fwd.cache.output;
        let mut d_h = vec![0.0; de];
        for (r, &ge) in d_e.iter().enumerate() {
            g.0[5][r] += ge;
            for k in 0..de {
                g.0[4][r * de + k] += ge * h[k];
                d_h[k] += ge * self.pe_w[r * de + k];
            }
        }
        self.encoder
            .backward(x, self.config.samples, &fwd.cache, &d_h, &mut g.0[0..4]);
    }

    /// Loss only, used by finite-difference checks and evaluation.
    pub fn loss(&self, eeg: &[Vec<f64>], images: &[Vec<f64>]) -> Result<f64> {
        let d = self.config.embed_dim;
        let mut z_e = Vec::with_capacity(eeg.len() * d);
        let mut z_i = Vec::with_capacity(eeg.len() * d);
        for (x, v) in eeg.iter().zip(images) {
            z_e.extend(self.embed_eeg(x)?);
            z_i.extend(self.embed_image_fused(v)?);
        }
        let s = crate::contrastive::similarity_matrix(&z_e, &z_i, d)?;
        Ok(infonce_from_similarity(&s, eeg.len(), self.tau())?.0)
    }

    /// Writes one tensor per parameter plus `model.json`.
    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let shapes = self.param_shapes();
        for ((name, data), shape) in PARAM_NAMES.iter().zip(self.param_slices()).zip(shapes) {
            let t = Tensor::from_f64(shape, data.to_vec())?;
            write_tensor(&t, dir.join(format!("{name}.nvat")))?;
        }
        let meta = serde_json::json!({ "model": self.config, "extra": extra });
        let p = dir.join("model.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&p, e))?;
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }

    /// Loads a checkpoint written by [`save`](Self::save), returning the
    /// extra metadata alongside the model.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let p = dir.join("model.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?;
        let config: ModelConfig =
            serde_json::from_value(meta["model"].clone()).map_err(|e| Error::json(&p, e))?;
        let mut model = Self::init(config, 0)?;
        let shapes = model.param_shapes();
        for ((name, slot), shape) in PARAM_NAMES.iter().zip(model.params_mut()).zip(shapes) {
            let t = read_tensor(dir.join(format!("{name}.nvat")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            slot.copy_from_slice(&t.to_f64_vec());
        }
        Ok((model, meta["extra"].clone()))
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let c = &self.config;
        vec![
            vec![c.temporal_filters, c.temporal_kernel],
            vec![c.spatial_filters, c.temporal_filters, c.channels],
            vec![c.encoder_dim, c.spatial_filters],
            vec![c.encoder_dim],
            vec![c.embed_dim, c.encoder_dim],
            vec![c.embed_dim],
            vec![c.embed_dim, self.fusion.cols()],
            vec![c.embed_dim],
            vec![],
        ]
    }
}
