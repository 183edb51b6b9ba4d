//! Linear-Gaussian synthetic datasets with a controllable per-layer
//! visibility.
//!
//! Every concept draws a latent `u ~ N(0, I)`. Layer `l` sees
//! `A_l (u * mask_l)` plus private noise scaled by `1 - w_l`; EEG carries
//! `sum_l w_l B_l (u * mask_l)` through fixed ERP-like spatiotemporal
//! templates, with fresh sensor noise per repetition. A frequency variant
//! instead plants the latent into smooth low-frequency image patterns over
//! a `1/f` background and exposes raw pixels as the only feature layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::eeg::EegEpochSet;
use crate::error::{Error, Result};
use crate::features::{LayerFeatureSet, LayerSpec, Topology};
use crate::freq::{filter_image, pink_noise, Band};
use crate::image::{load_image_file, Image, IMAGE_EXTENSIONS};
use crate::manifest::{BackboneEntry, DatasetManifest, FeatureFile, Split};
use crate::tensor::{write_tensor, Tensor};
use crate::training::{DataSource, SubjectEeg};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthLayer {
    pub index: usize,
    pub topology: Topology,
    pub dims: Vec<usize>,
    /// Visibility weight in `[0, 1]`.
    pub visibility: f64,
    /// Latent coordinates this layer carries; empty means all of them.
    #[serde(default)]
    pub support: Vec<usize>,
}

impl SynthLayer {
    fn spec(&self) -> LayerSpec {
        LayerSpec {
            index: self.index,
            topology: self.topology,
            dims: self.dims.clone(),
        }
    }

    /// Width of the per-position feature vector.
    fn width(&self) -> usize {
        match self.topology {
            Topology::ConvMap => self.dims[0],
            Topology::TokenSequence => self.dims[1],
        }
    }

    fn positions(&self) -> usize {
        match self.topology {
            Topology::ConvMap => self.dims[1] * self.dims[2],
            Topology::TokenSequence => self.dims[0],
        }
    }
}

/// Images carrying the latent in their low spatial frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrequencyVariant {
    pub height: usize,
    pub width: usize,
    /// Radius ratio of the planted patterns; keep it below the analysis cutoff.
    pub pattern_cutoff: f64,
    pub background_std: f64,
    pub background_alpha: f64,
    pub signal_std: f64,
}

impl Default for FrequencyVariant {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            pattern_cutoff: 0.15,
            background_std: 0.08,
            background_alpha: 1.0,
            signal_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub subjects: usize,
    pub channels: usize,
    pub samples: usize,
    pub n_repetitions: usize,
    pub sampling_rate_hz: f64,
    pub latent_dim: usize,
    pub layers: Vec<SynthLayer>,
    pub num_views: usize,
    /// Std of the per-view feature perturbation (views 2..K).
    pub view_noise: f64,
    /// Std of the layer-private noise at zero visibility.
    pub private_noise: f64,
    /// Std of the within-map jitter across spatial positions or tokens.
    pub position_noise: f64,
    /// Sensor noise relative to the unit-std EEG signal, per repetition.
    pub eeg_noise_sigma: f64,
    pub seed: u64,
    pub frequency: Option<FrequencyVariant>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let layers = (1..=5)
            .map(|index| SynthLayer {
                index,
                topology: Topology::ConvMap,
                dims: vec![16, 2, 2],
                visibility: if index == 3 { 1.0 } else { 0.0 },
                support: Vec::new(),
            })
            .collect();
        Self {
            n_train: 200,
            n_test: 50,
            subjects: 1,
            channels: 8,
            samples: 32,
            n_repetitions: 4,
            sampling_rate_hz: 100.0,
            latent_dim: 8,
            layers,
            num_views: 2,
            view_noise: 0.1,
            private_noise: 2.0,
            position_noise: 0.5,
            eeg_noise_sigma: 1.0,
            seed: 0,
            frequency: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.effective_layers().iter().map(|l| l.visibility).sum::<f64>() <= 0.0 {
            return Err(Error::Config("visibility weights must not all be zero".into()));
        }
        Ok(())
    }

    fn validate_shape(&self) -> Result<()> {
        let dims = [
            self.n_train,
            self.n_test,
            self.subjects,
            self.channels,
            self.samples,
            self.n_repetitions,
            self.latent_dim,
            self.num_views,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("synth counts and dims must be positive".into()));
        }
        let noise = [self.view_noise, self.private_noise, self.position_noise, self.eeg_noise_sigma];
        if noise.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if let Some(f) = &self.frequency {
            if f.height < 2 || f.width < 2 || !(f.pattern_cutoff > 0.0 && f.pattern_cutoff < 1.0) {
                return Err(Error::Config("frequency variant needs >= 2x2 images and cutoff in (0, 1)".into()));
            }
            return Ok(());
        }
        if self.layers.is_empty() {
            return Err(Error::Config("no synth layers".into()));
        }
        let mut seen = Vec::new();
        for l in &self.layers {
            l.spec().validate()?;
            if seen.contains(&l.index) {
                return Err(Error::Config(format!("duplicate layer index {}", l.index)));
            }
            seen.push(l.index);
            if !(0.0..=1.0).contains(&l.visibility) {
                return Err(Error::Config(format!("layer {} visibility outside [0, 1]", l.index)));
            }
            if l.support.iter().any(|&j| j >= self.latent_dim) {
                return Err(Error::Config(format!("layer {} support exceeds latent dim", l.index)));
            }
        }
        Ok(())
    }

    /// The frequency variant replaces the layer list with one pixel layer.
    fn effective_layers(&self) -> Vec<SynthLayer> {
        match &self.frequency {
            Some(f) => vec![SynthLayer {
                index: 1,
                topology: Topology::ConvMap,
                dims: vec![f.height * f.width, 1, 1],
                visibility: 1.0,
                support: Vec::new(),
            }],
            None => self.layers.clone(),
        }
    }

    fn concept_names(&self) -> Vec<String> {
        (0..self.n_train + self.n_test).map(|i| format!("c{i:04}")).collect()
    }
}

pub const SYNTH_BACKBONE: &str = "synth";
pub const PIXEL_BACKBONE: &str = "pixels";

#[derive(Debug, Clone)]
pub struct SynthData {
    pub config: SynthConfig,
    pub concepts: Vec<String>,
    pub eeg: Vec<EegEpochSet>,
    pub features: LayerFeatureSet,
    /// `images[concept][view]`, frequency variant only.
    pub images: Vec<Vec<Image>>,
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks_exact(v.len())
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn masked(u: &[f64], support: &[usize]) -> Vec<f64> {
    if support.is_empty() {
        return u.to_vec();
    }
    u.iter()
        .enumerate()
        .map(|(j, &x)| if support.contains(&j) { x } else { 0.0 })
        .collect()
}

fn support_size(support: &[usize], latent: usize) -> usize {
    if support.is_empty() {
        latent
    } else {
        support.len()
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    build(cfg, false)
}

/// Null oracle: the same generator with every visibility weight forced to
/// zero, so EEG carries sensor noise only.
pub fn generate_null(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate_shape()?;
    build(cfg, true)
}

fn build(cfg: &SynthConfig, null: bool) -> Result<SynthData> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_train + cfg.n_test;
    let k = cfg.latent_dim;
    let layers = cfg.effective_layers();
    let weight = |l: &SynthLayer| if null { 0.0 } else { l.visibility };

    let latents: Vec<Vec<f64>> = (0..n).map(|_| randn(&mut rng, k, 1.0)).collect();

    // EEG side: z = sum_l w_l B_l (u * mask_l), shared by all subjects
    let b_maps: Vec<Vec<f64>> = layers
        .iter()
        .map(|l| randn(&mut rng, k * k, 1.0 / (support_size(&l.support, k) as f64).sqrt()))
        .collect();
    let sources: Vec<Vec<f64>> = latents
        .iter()
        .map(|u| {
            let mut z = vec![0.0; k];
            for (l, b) in layers.iter().zip(&b_maps) {
                let w = weight(l);
                if w == 0.0 {
                    continue;
                }
                for (zi, v) in z.iter_mut().zip(matvec(b, &masked(u, &l.support))) {
                    *zi += w * v;
                }
            }
            z
        })
        .collect();
    let mut eeg = Vec::with_capacity(cfg.subjects);
    for _ in 0..cfg.subjects {
        eeg.push(subject_eeg(cfg, &sources, &mut rng)?);
    }

    let (features, images) = match &cfg.frequency {
        None => (layer_features(cfg, &layers, &latents, &mut rng)?, Vec::new()),
        Some(f) => {
            let images = planted_images(cfg, f, &latents, &mut rng)?;
            (pixel_features(PIXEL_BACKBONE, &images)?, images)
        }
    };
    Ok(SynthData {
        config: cfg.clone(),
        concepts: cfg.concept_names(),
        eeg,
        features,
        images,
    })
}

/// ERP-like templates: a spatial pattern times a Gaussian bump at a
/// component-specific latency, rescaled so the clean signal has unit std.
fn subject_eeg(cfg: &SynthConfig, sources: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<EegEpochSet> {
    let (c, t, k) = (cfg.channels, cfg.samples, cfg.latent_dim);
    let spatial: Vec<Vec<f64>> = (0..k).map(|_| randn(rng, c, 1.0)).collect();
    let width = (t as f64 / 10.0).max(1.0);
    let temporal: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let centre = rng.random_range(0.2..0.8) * t as f64;
            (0..t)
                .map(|s| (-(s as f64 - centre).powi(2) / (2.0 * width * width)).exp())
                .collect()
        })
        .collect();
    let clean: Vec<Vec<f64>> = sources
        .iter()
        .map(|z| {
            let mut x = vec![0.0; c * t];
            for j in 0..k {
                for ch in 0..c {
                    let a = z[j] * spatial[j][ch];
                    for s in 0..t {
                        x[ch * t + s] += a * temporal[j][s];
                    }
                }
            }
            x
        })
        .collect();
    let total = (sources.len() * c * t) as f64;
    let ms = clean.iter().flatten().map(|v| v * v).sum::<f64>() / total;
    let scale = if ms > 0.0 { 1.0 / ms.sqrt() } else { 0.0 };
    let mut data = Vec::with_capacity(sources.len() * cfg.n_repetitions * c * t);
    for x in &clean {
        for _ in 0..cfg.n_repetitions {
            let noise = randn(rng, c * t, cfg.eeg_noise_sigma);
            data.extend(x.iter().zip(noise).map(|(v, e)| scale * v + e));
        }
    }
    EegEpochSet::new(data, [sources.len(), cfg.n_repetitions, c, t], cfg.sampling_rate_hz, 0)
}

fn layer_features(
    cfg: &SynthConfig,
    layers: &[SynthLayer],
    latents: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<LayerFeatureSet> {
    let k = cfg.latent_dim;
    let mut features = BTreeMap::new();
    for l in layers {
        let p = l.width();
        let a = randn(rng, p * k, 1.0 / (support_size(&l.support, k) as f64).sqrt());
        let private = (1.0 - l.visibility) * cfg.private_noise;
        let base: Vec<Vec<f64>> = latents
            .iter()
            .map(|u| {
                let v = matvec(&a, &masked(u, &l.support));
                let e = randn(rng, p, private);
                v.iter().zip(e).map(|(x, y)| x + y).collect()
            })
            .collect();
        for view in 1..=cfg.num_views {
            let mut data = Vec::with_capacity(latents.len() * p * l.positions());
            for v in &base {
                let jitter = if view == 1 {
                    vec![0.0; p]
                } else {
                    randn(rng, p, cfg.view_noise)
                };
                let pos = randn(rng, p * l.positions(), cfg.position_noise);
                match l.topology {
                    // (C, H, W): channel-major
                    Topology::ConvMap => {
                        for ch in 0..p {
                            for s in 0..l.positions() {
                                data.push(v[ch] + jitter[ch] + pos[ch * l.positions() + s]);
                            }
                        }
                    }
                    Topology::TokenSequence => {
                        for r in 0..l.positions() {
                            for ch in 0..p {
                                data.push(v[ch] + jitter[ch] + pos[r * p + ch]);
                            }
                        }
                    }
                }
            }
            let mut shape = vec![latents.len()];
            shape.extend_from_slice(&l.dims);
            features.insert((l.index, view), Tensor::from_f64(shape, data)?);
        }
    }
    let set = LayerFeatureSet {
        backbone_name: SYNTH_BACKBONE.into(),
        layers: layers.iter().map(SynthLayer::spec).collect(),
        features,
        num_views: cfg.num_views,
    };
    set.validate()?;
    Ok(set)
}

fn planted_images(
    cfg: &SynthConfig,
    f: &FrequencyVariant,
    latents: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Image>>> {
    let (h, w) = (f.height, f.width);
    let patterns: Vec<Vec<f64>> = (0..cfg.latent_dim)
        .map(|_| {
            let white = Image::new(1, h, w, randn(rng, h * w, 1.0))?;
            let mut p = filter_image(&white, f.pattern_cutoff, Band::Low)?.pixels;
            let m = p.iter().sum::<f64>() / p.len() as f64;
            let sd = (p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / p.len() as f64).sqrt();
            p.iter_mut().for_each(|x| *x = (*x - m) / sd.max(1e-300));
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let amp = f.signal_std / (cfg.latent_dim as f64).sqrt();
    latents
        .iter()
        .map(|u| {
            let mut base = pink_noise(h, w, f.background_alpha, 0.5, f.background_std, rng);
            for (uj, p) in u.iter().zip(&patterns) {
                for (b, x) in base.iter_mut().zip(p) {
                    *b += amp * uj * x;
                }
            }
            (1..=cfg.num_views)
                .map(|view| {
                    let mut px = base.clone();
                    if view > 1 {
                        for (x, e) in px.iter_mut().zip(randn(rng, h * w, cfg.view_noise * f.signal_std)) {
                            *x += e;
                        }
                    }
                    Image::new(1, h, w, px)
                })
                .collect()
        })
        .collect()
}

/// Raw pixels as a single `(C*H*W, 1, 1)` conv-map layer, indexed 1.
/// `images[concept][view]`; every image must share one geometry.
pub fn pixel_features(backbone: &str, images: &[Vec<Image>]) -> Result<LayerFeatureSet> {
    let first = images
        .first()
        .and_then(|v| v.first())
        .ok_or_else(|| Error::Config("no images".into()))?;
    let views = images[0].len();
    let len = first.pixels.len();
    let mut features = BTreeMap::new();
    for view in 0..views {
        let mut data = Vec::with_capacity(images.len() * len);
        for per_concept in images {
            let img = per_concept
                .get(view)
                .ok_or_else(|| Error::DanglingReference(format!("view {} missing", view + 1)))?;
            if img.pixels.len() != len {
                return Err(Error::Shape("images differ in geometry".into()));
            }
            data.extend_from_slice(&img.pixels);
        }
        features.insert((1, view + 1), Tensor::from_f64(vec![images.len(), len, 1, 1], data)?);
    }
    let set = LayerFeatureSet {
        backbone_name: backbone.into(),
        layers: vec![LayerSpec {
            index: 1,
            topology: Topology::ConvMap,
            dims: vec![len, 1, 1],
        }],
        features,
        num_views: views,
    };
    set.validate()?;
    Ok(set)
}

pub fn subject_name(i: usize) -> String {
    format!("sub-{:02}", i + 1)
}

/// File name of one synthetic image view.
pub fn image_file_name(concept: &str, view: usize) -> String {
    format!("{concept}.v{view}.nvat")
}

/// Rebuilds `manifest` around raw-pixel features of the images in
/// `images_dir` (named `<concept>.v<k>.<ext>`, views counted from 1) and
/// writes the result to `out_dir/manifest.json`. EEG paths are made
/// absolute so the new manifest can live anywhere.
pub fn pixel_manifest(manifest: &DatasetManifest, images_dir: &Path, out_dir: &Path) -> Result<DatasetManifest> {
    let find = |concept: &str, view: usize| {
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| images_dir.join(format!("{concept}.v{view}.{ext}")))
            .find(|p| p.is_file())
    };
    let first = manifest
        .concepts
        .first()
        .ok_or_else(|| Error::BadManifest("no concepts".into()))?;
    let views = (1..).take_while(|&v| find(first, v).is_some()).count();
    if views == 0 {
        return Err(Error::DanglingReference(format!(
            "no image for concept {first} under {}",
            images_dir.display()
        )));
    }
    let images = manifest
        .concepts
        .iter()
        .map(|c| {
            (1..=views)
                .map(|v| {
                    let p = find(c, v)
                        .ok_or_else(|| Error::DanglingReference(format!("image {c} view {v} missing")))?;
                    load_image_file(p)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let set = pixel_features(PIXEL_BACKBONE, &images)?;
    let feat_dir = PathBuf::from("features").join(PIXEL_BACKBONE);
    fs::create_dir_all(out_dir.join(&feat_dir)).map_err(|e| Error::io(out_dir, e))?;
    let mut feature_files = Vec::new();
    for ((layer, view), t) in &set.features {
        let rel = feat_dir.join(format!("layer{layer:02}_view{view}.nvat"));
        write_tensor(t, out_dir.join(&rel))?;
        feature_files.push(FeatureFile {
            backbone: PIXEL_BACKBONE.into(),
            layer: *layer,
            view: *view,
            path: rel,
        });
    }
    let absolute = |p: &Path| {
        let r = manifest.resolve(p);
        fs::canonicalize(&r).map_err(|e| Error::io(&r, e))
    };
    let out = DatasetManifest {
        eeg_files: manifest
            .eeg_files
            .iter()
            .map(|(s, p)| Ok((s.clone(), absolute(p)?)))
            .collect::<Result<_>>()?,
        backbones: BTreeMap::from([(PIXEL_BACKBONE.to_string(), BackboneEntry { layers: set.layers.clone() })]),
        feature_files,
        num_views: views,
        base_dir: out_dir.to_path_buf(),
        ..manifest.clone()
    };
    out.save(out_dir.join("manifest.json"))?;
    out.validate()?;
    Ok(out)
}

impl SynthData {
    /// In-memory equivalent of writing the dataset and loading its manifest.
    pub fn source(&self) -> Result<DataSource> {
        let n_train = self.config.n_train;
        let subjects = self
            .eeg
            .iter()
            .enumerate()
            .map(|(i, e)| SubjectEeg::new(subject_name(i), e.clone()))
            .collect();
        Ok(DataSource {
            concepts: self.concepts.clone(),
            train_rows: (0..n_train).collect(),
            test_rows: (n_train..self.concepts.len()).collect(),
            subjects: Arc::new(subjects),
            features: Arc::new(self.features.clone()),
        })
    }

    /// Writes tensors, images (frequency variant) and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mkdir(&dir.join("eeg"))?;
        let backbone = self.features.backbone_name.clone();
        let feat_dir = PathBuf::from("features").join(&backbone);
        mkdir(&dir.join(&feat_dir))?;

        let mut eeg_files = BTreeMap::new();
        for (i, e) in self.eeg.iter().enumerate() {
            let name = subject_name(i);
            e.save(&dir.join("eeg").join(&name), &self.concepts)?;
            eeg_files.insert(name.clone(), PathBuf::from("eeg").join(format!("{name}.nvat")));
        }
        let mut feature_files = Vec::new();
        for ((layer, view), t) in &self.features.features {
            let rel = feat_dir.join(format!("layer{layer:02}_view{view}.nvat"));
            write_tensor(t, dir.join(&rel))?;
            feature_files.push(FeatureFile {
                backbone: backbone.clone(),
                layer: *layer,
                view: *view,
                path: rel,
            });
        }
        if !self.images.is_empty() {
            mkdir(&dir.join("images"))?;
            for (concept, views) in self.concepts.iter().zip(&self.images) {
                for (v, img) in views.iter().enumerate() {
                    write_tensor(&img.to_tensor()?, dir.join("images").join(image_file_name(concept, v + 1)))?;
                }
            }
        }
        let n_train = self.config.n_train;
        let manifest = DatasetManifest {
            subjects: (0..self.eeg.len()).map(subject_name).collect(),
            concepts: self.concepts.clone(),
            split: Split {
                train: self.concepts[..n_train].to_vec(),
                test: self.concepts[n_train..].to_vec(),
            },
            eeg_files,
            backbones: BTreeMap::from([(
                backbone,
                BackboneEntry {
                    layers: self.features.layers.clone(),
                },
            )]),
            feature_files,
            num_views: self.features.num_views,
            sampling_rate_hz: self.config.sampling_rate_hz,
            base_dir: dir.to_path_buf(),
        };
        manifest.save(dir.join("manifest.json"))?;
        Ok(manifest)
    }
}
