//! Multi-layer visual features and the pooling strategies that turn a
//! layer activation into one alignment-ready vector per image.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// `(C, H, W)` activation map.
    #[serde(alias = "conv")]
    ConvMap,
    /// `(N + 1, D)` token sequence with the CLS token in row 0.
    #[serde(alias = "token")]
    TokenSequence,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::ConvMap => "conv-map",
            Topology::TokenSequence => "token-sequence",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    Mean,
    Max,
    Cls,
}

impl PoolingMode {
    pub fn valid_for(self, topology: Topology) -> bool {
        matches!(
            (self, topology),
            (PoolingMode::Mean, _)
                | (PoolingMode::Max, Topology::ConvMap)
                | (PoolingMode::Cls, Topology::TokenSequence)
        )
    }

    /// Modes a layer sweep trains for a given topology.
    pub fn sweep_modes(topology: Topology) -> [PoolingMode; 2] {
        match topology {
            Topology::ConvMap => [PoolingMode::Mean, PoolingMode::Max],
            Topology::TokenSequence => [PoolingMode::Mean, PoolingMode::Cls],
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::Mean => "mean",
            PoolingMode::Max => "max",
            PoolingMode::Cls => "cls",
        })
    }
}

impl std::str::FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolingMode::Mean),
            "max" => Ok(PoolingMode::Max),
            "cls" => Ok(PoolingMode::Cls),
            other => Err(Error::Config(format!("unknown pooling mode {other}"))),
        }
    }
}

/// Pooling mode per topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingChoice {
    pub conv: PoolingMode,
    pub token: PoolingMode,
}

impl Default for PoolingChoice {
    fn default() -> Self {
        Self {
            conv: PoolingMode::Mean,
            token: PoolingMode::Mean,
        }
    }
}

impl PoolingChoice {
    pub fn for_topology(&self, topology: Topology) -> PoolingMode {
        match topology {
            Topology::ConvMap => self.conv,
            Topology::TokenSequence => self.token,
        }
    }

    pub fn uniform(mode: PoolingMode) -> Self {
        match mode {
            PoolingMode::Max => Self {
                conv: PoolingMode::Max,
                token: PoolingMode::Mean,
            },
            PoolingMode::Cls => Self {
                conv: PoolingMode::Mean,
                token: PoolingMode::Cls,
            },
            PoolingMode::Mean => Self::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub topology: Topology,
    /// `[C, H, W]` for conv maps, `[N + 1, D]` for token sequences.
    pub dims: Vec<usize>,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let rank = match self.topology {
            Topology::ConvMap => 3,
            Topology::TokenSequence => 2,
        };
        if self.dims.len() != rank || self.dims.contains(&0) {
            return Err(Error::BadManifest(format!(
                "layer {} ({}) has invalid dims {:?}",
                self.index, self.topology, self.dims
            )));
        }
        if self.topology == Topology::TokenSequence && self.dims[0] < 2 {
            return Err(Error::BadManifest(format!(
                "token layer {} needs a CLS row and at least one patch token",
                self.index
            )));
        }
        Ok(())
    }

    /// Length of the pooled vector.
    pub fn pooled_dim(&self) -> usize {
        match self.topology {
            Topology::ConvMap => self.dims[0],
            Topology::TokenSequence => self.dims[1],
        }
    }

    pub fn per_image_len(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Sum whose result does not depend on the order of `values`.
///
/// Values are sorted with a total order before accumulation, so any
/// permutation of the input produces bitwise the same sum.
pub(crate) fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

/// Pools a single image's activation `f` (no batch axis).
pub fn pool_features(f: &Tensor, topology: Topology, mode: PoolingMode) -> Result<Tensor> {
    if !mode.valid_for(topology) {
        return Err(Error::InvalidPoolingMode {
            mode: mode.to_string(),
            topology: topology.to_string(),
        });
    }
    let data = f.to_f64_vec();
    let out = match topology {
        Topology::ConvMap => {
            let [c, h, w] = f.shape() else {
                return Err(Error::Shape(format!(
                    "conv map must be rank 3, got {:?}",
                    f.shape()
                )));
            };
            pool_conv(&data, *c, h * w, mode)
        }
        Topology::TokenSequence => {
            let [n, d] = f.shape() else {
                return Err(Error::Shape(format!(
                    "token sequence must be rank 2, got {:?}",
                    f.shape()
                )));
            };
            if *n < 2 && mode == PoolingMode::Mean {
                return Err(Error::Shape("token mean needs at least one patch token".into()));
            }
            pool_tokens(&data, *n, *d, mode)
        }
    };
    let len = out.len();
    Tensor::from_f64(vec![len], out)
}

fn pool_conv(data: &[f64], channels: usize, positions: usize, mode: PoolingMode) -> Vec<f64> {
    let mut buf = Vec::with_capacity(positions);
    (0..channels)
        .map(|ch| {
            let plane = &data[ch * positions..(ch + 1) * positions];
            match mode {
                PoolingMode::Max => plane.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                _ => {
                    buf.clear();
                    buf.extend_from_slice(plane);
                    order_free_sum(&mut buf) / positions as f64
                }
            }
        })
        .collect()
}

fn pool_tokens(data: &[f64], tokens: usize, dim: usize, mode: PoolingMode) -> Vec<f64> {
    match mode {
        PoolingMode::Cls => data[..dim].to_vec(),
        _ => {
            let patches = tokens - 1;
            let mut buf = Vec::with_capacity(patches);
            (0..dim)
                .map(|j| {
                    buf.clear();
                    buf.extend((1..tokens).map(|t| data[t * dim + j]));
                    order_free_sum(&mut buf) / patches as f64
                })
                .collect()
        }
    }
}

/// Per-image, per-layer, per-view activations of one backbone.
#[derive(Debug, Clone)]
pub struct LayerFeatureSet {
    pub backbone_name: String,
    pub layers: Vec<LayerSpec>,
    /// `(layer index, view)` with views counted from 1. Each tensor holds
    /// all images: `(n, C, H, W)` or `(n, N + 1, D)`.
    pub features: BTreeMap<(usize, usize), Tensor>,
    pub num_views: usize,
}

/// Pooled vectors of one layer for every view and image.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledLayer {
    pub layer: usize,
    pub dim: usize,
    /// `views[k]` is row-major `n_images x dim` for view `k + 1`.
    pub views: Vec<Vec<f64>>,
}

impl PooledLayer {
    pub fn vector(&self, view: usize, image: usize) -> &[f64] {
        &self.views[view][image * self.dim..(image + 1) * self.dim]
    }

    pub fn n_images(&self) -> usize {
        self.views.first().map_or(0, |v| v.len() / self.dim)
    }
}

impl LayerFeatureSet {
    pub fn layer(&self, index: usize) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.index == index)
    }

    pub fn n_images(&self) -> usize {
        self.features.values().next().map_or(0, |t| t.shape()[0])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_images();
        for spec in &self.layers {
            spec.validate()?;
            for view in 1..=self.num_views {
                let t = self.features.get(&(spec.index, view)).ok_or_else(|| {
                    Error::DanglingReference(format!(
                        "{}: layer {} view {view} missing",
                        self.backbone_name, spec.index
                    ))
                })?;
                let mut expect = vec![n];
                expect.extend_from_slice(&spec.dims);
                if t.shape() != expect.as_slice() {
                    return Err(Error::Shape(format!(
                        "{} layer {} view {view}: expected {expect:?}, got {:?}",
                        self.backbone_name,
                        spec.index,
                        t.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Pools the requested layers in the order given.
    pub fn select_layers(&self, indices: &[usize], pooling: PoolingChoice) -> Result<Vec<PooledLayer>> {
        if indices.is_empty() {
            return Err(Error::Config("no layers selected".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "layer indices must be strictly increasing, got {indices:?}"
            )));
        }
        indices
            .iter()
            .map(|&index| {
                let spec = self.layer(index).ok_or(Error::UnknownLayer(index))?;
                let mode = pooling.for_topology(spec.topology);
                let views = (1..=self.num_views)
                    .map(|view| {
                        let t = self
                            .features
                            .get(&(index, view))
                            .ok_or(Error::UnknownLayer(index))?;
                        pool_batch(t, spec, mode)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PooledLayer {
                    layer: index,
                    dim: spec.pooled_dim(),
                    views,
                })
            })
            .collect()
    }
}

/// Pools every image of a batched layer tensor into a flat `n x dim` buffer.
pub fn pool_batch(t: &Tensor, spec: &LayerSpec, mode: PoolingMode) -> Result<Vec<f64>> {
    if !mode.valid_for(spec.topology) {
        return Err(Error::InvalidPoolingMode {
            mode: mode.to_string(),
            topology: spec.topology.to_string(),
        });
    }
    let data = t.to_f64_vec();
    let per = spec.per_image_len();
    if t.shape().len() != spec.dims.len() + 1 || t.shape()[1..] != spec.dims[..] {
        return Err(Error::Shape(format!(
            "layer {}: tensor {:?} does not match dims {:?}",
            spec.index,
            t.shape(),
            spec.dims
        )));
    }
    let mut out = Vec::with_capacity(t.shape()[0] * spec.pooled_dim());
    for img in data.chunks_exact(per) {
        let v = match spec.topology {
            Topology::ConvMap => pool_conv(img, spec.dims[0], spec.dims[1] * spec.dims[2], mode),
            Topology::TokenSequence => pool_tokens(img, spec.dims[0], spec.dims[1], mode),
        };
        out.extend(v);
    }
    Ok(out)
}

/// Default layer choices: for a conv backbone with four stages the middle
/// choice is stage 3 and the pair is {3, final}; for token backbones the
/// pair sits near `L/2` and `3L/4`.
pub fn default_layers(layers: &[LayerSpec]) -> Vec<usize> {
    let mut idx: Vec<usize> = layers.iter().map(|l| l.index).collect();
    idx.sort_unstable();
    let Some(&last) = idx.last() else {
        return Vec::new();
    };
    let n = idx.len();
    let pick = |frac_num: usize, frac_den: usize| idx[((n * frac_num).div_ceil(frac_den)).clamp(1, n) - 1];
    let conv = layers.iter().all(|l| l.topology == Topology::ConvMap);
    let mut out = if conv {
        vec![pick(3, 4), last]
    } else {
        vec![pick(1, 2), pick(3, 4)]
    };
    out.dedup();
    out
}
