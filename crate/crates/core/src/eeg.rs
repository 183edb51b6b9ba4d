//! EEG preprocessing: epoching with baseline correction, decimation,
//! multivariate noise normalization, repetition averaging and the
//! training-time noise augmentation.
//!
//! The chain always runs in the order segment, baseline, decimate, MVNN,
//! average.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Epoched EEG laid out as `(concepts, repetitions, channels, samples)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EegEpochSet {
    pub data: Vec<f64>,
    pub n_concepts: usize,
    pub n_repetitions: usize,
    pub channels: usize,
    pub samples: usize,
    pub sampling_rate_hz: f64,
    /// Pre-stimulus samples used as the baseline reference.
    pub baseline_samples: usize,
}

/// JSON sidecar stored next to an epoch tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSidecar {
    pub sampling_rate_hz: f64,
    pub baseline_samples: usize,
    #[serde(default)]
    pub concepts: Vec<String>,
}

impl EegEpochSet {
    pub fn new(
        data: Vec<f64>,
        dims: [usize; 4],
        sampling_rate_hz: f64,
        baseline_samples: usize,
    ) -> Result<Self> {
        let [n_concepts, n_repetitions, channels, samples] = dims;
        if dims.contains(&0) {
            return Err(Error::Shape(format!("epoch set dims must be >= 1, got {dims:?}")));
        }
        if !(sampling_rate_hz > 0.0) {
            return Err(Error::Config("sampling rate must be positive".into()));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "epoch data has {} values for dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            n_concepts,
            n_repetitions,
            channels,
            samples,
            sampling_rate_hz,
            baseline_samples,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n_concepts, self.n_repetitions, self.channels, self.samples]
    }

    pub fn epoch_len(&self) -> usize {
        self.channels * self.samples
    }

    pub fn n_epochs(&self) -> usize {
        self.n_concepts * self.n_repetitions
    }

    /// `(channels, samples)` slice of one repetition of one concept.
    pub fn epoch(&self, concept: usize, repetition: usize) -> &[f64] {
        let start = (concept * self.n_repetitions + repetition) * self.epoch_len();
        &self.data[start..start + self.epoch_len()]
    }

    /// Mean over all repetitions of one concept.
    pub fn averaged_epoch(&self, concept: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.epoch_len()];
        for r in 0..self.n_repetitions {
            for (o, &x) in out.iter_mut().zip(self.epoch(concept, r)) {
                *o += x;
            }
        }
        let inv = 1.0 / self.n_repetitions as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        out
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_f64(self.dims().to_vec(), self.data.clone())
    }

    pub fn from_tensor(t: &Tensor, sampling_rate_hz: f64, baseline_samples: usize) -> Result<Self> {
        let dims: [usize; 4] = t
            .shape()
            .try_into()
            .map_err(|_| Error::Shape(format!("EEG tensor must be rank 4, got {:?}", t.shape())))?;
        Self::new(t.to_f64_vec(), dims, sampling_rate_hz, baseline_samples)
    }

    /// Writes `<stem>.nvat` and the `<stem>.json` sidecar.
    pub fn save(&self, stem: &Path, concepts: &[String]) -> Result<()> {
        write_tensor(&self.to_tensor()?, stem_file(stem, "nvat"))?;
        let side = EpochSidecar {
            sampling_rate_hz: self.sampling_rate_hz,
            baseline_samples: self.baseline_samples,
            concepts: concepts.to_vec(),
        };
        let p = stem_file(stem, "json");
        let json = serde_json::to_string_pretty(&side).map_err(|e| Error::json(&p, e))?;
        fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))
    }

    pub fn load(stem: &Path) -> Result<(Self, EpochSidecar)> {
        let p = stem_file(stem, "json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let side: EpochSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?;
        let t = read_tensor(stem_file(stem, "nvat"))?;
        let set = Self::from_tensor(&t, side.sampling_rate_hz, side.baseline_samples)?;
        Ok((set, side))
    }
}

/// `<stem>.<ext>`, keeping any dots already in the stem.
pub fn stem_file(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    s.into()
}

/// Cuts one epoch per onset from a `(channels, samples)` recording.
///
/// Each epoch keeps the `post_samples` after the onset, minus the
/// per-channel mean of the `pre_samples` before it. The result has one
/// repetition per onset; use [`group_by_concept`] to fold repetitions.
pub fn segment_and_baseline(
    raw: &Tensor,
    onsets: &[usize],
    pre_samples: usize,
    post_samples: usize,
    sampling_rate_hz: f64,
) -> Result<EegEpochSet> {
    let [channels, len] = raw.shape() else {
        return Err(Error::Shape(format!(
            "raw recording must be (channels, samples), got {:?}",
            raw.shape()
        )));
    };
    let (channels, len) = (*channels, *len);
    if onsets.is_empty() || post_samples == 0 {
        return Err(Error::Config("need at least one onset and one post-stimulus sample".into()));
    }
    let x = raw.to_f64_vec();
    let mut data = Vec::with_capacity(onsets.len() * channels * post_samples);
    for &onset in onsets {
        if onset < pre_samples || onset + post_samples > len {
            return Err(Error::EpochOutOfBounds {
                onset,
                pre: pre_samples,
                post: post_samples,
                len,
            });
        }
        for c in 0..channels {
            let row = &x[c * len..(c + 1) * len];
            let baseline = if pre_samples == 0 {
                0.0
            } else {
                row[onset - pre_samples..onset].iter().sum::<f64>() / pre_samples as f64
            };
            data.extend(row[onset..onset + post_samples].iter().map(|v| v - baseline));
        }
    }
    EegEpochSet::new(
        data,
        [onsets.len(), 1, channels, post_samples],
        sampling_rate_hz,
        pre_samples,
    )
}

/// Folds single-repetition epochs into `(concepts, repetitions, ...)`.
///
/// Concepts are ordered by first appearance; every concept must occur the
/// same number of times.
pub fn group_by_concept(e: &EegEpochSet, labels: &[String]) -> Result<(EegEpochSet, Vec<String>)> {
    if e.n_repetitions != 1 || labels.len() != e.n_concepts {
        return Err(Error::Shape(format!(
            "expected {} labels for single-repetition epochs",
            e.n_concepts
        )));
    }
    let mut order: Vec<String> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match order.iter().position(|o| o == l) {
            Some(k) => members[k].push(i),
            None => {
                order.push(l.clone());
                members.push(vec![i]);
            }
        }
    }
    let reps = members[0].len();
    if members.iter().any(|m| m.len() != reps) {
        return Err(Error::BadGroupSize {
            group: reps,
            repetitions: labels.len(),
        });
    }
    let mut data = Vec::with_capacity(e.data.len());
    for m in &members {
        for &i in m {
            data.extend_from_slice(e.epoch(i, 0));
        }
    }
    let set = EegEpochSet::new(
        data,
        [order.len(), reps, e.channels, e.samples],
        e.sampling_rate_hz,
        e.baseline_samples,
    )?;
    Ok((set, order))
}

/// Block-mean decimation along time.
pub fn decimate(e: &EegEpochSet, factor: usize) -> Result<EegEpochSet> {
    if factor == 0 || e.samples % factor != 0 {
        return Err(Error::BadDecimationFactor {
            factor,
            samples: e.samples,
        });
    }
    let out_t = e.samples / factor;
    let inv = 1.0 / factor as f64;
    let data = e
        .data
        .chunks_exact(factor)
        .map(|block| block.iter().sum::<f64>() * inv)
        .collect();
    EegEpochSet::new(
        data,
        [e.n_concepts, e.n_repetitions, e.channels, out_t],
        e.sampling_rate_hz / factor as f64,
        e.baseline_samples / factor,
    )
}

/// Symmetric `C x C` whitening matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningOperator {
    pub matrix: Vec<f64>,
    pub channels: usize,
    pub shrinkage: f64,
    pub epsilon: f64,
}

impl WhiteningOperator {
    pub fn identity(channels: usize) -> Self {
        let mut matrix = vec![0.0; channels * channels];
        (0..channels).for_each(|i| matrix[i * channels + i] = 1.0);
        Self {
            matrix,
            channels,
            shrinkage: 0.0,
            epsilon: 0.0,
        }
    }

    pub fn from_matrix(matrix: Vec<f64>, channels: usize) -> Result<Self> {
        if matrix.len() != channels * channels {
            return Err(Error::Shape("whitening matrix must be square".into()));
        }
        Ok(Self {
            matrix,
            channels,
            shrinkage: 0.0,
            epsilon: 0.0,
        })
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = DMatrix::from_row_slice(self.channels, self.channels, &self.matrix);
        SymmetricEigen::new(m).eigenvalues.iter().copied().collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let c = self.channels;
        (0..c).all(|i| (0..c).all(|j| (self.matrix[i * c + j] - self.matrix[j * c + i]).abs() <= tol))
    }
}

/// Channel covariance estimated per time point across all epochs, then
/// averaged over time. Row-major `C x C`.
pub fn noise_covariance(e: &EegEpochSet) -> Result<Vec<f64>> {
    let n = e.n_epochs();
    if n < 2 || n * e.samples < e.channels {
        return Err(Error::DegenerateCovariance(format!(
            "{n} epochs x {} samples cannot estimate {} channels",
            e.samples, e.channels
        )));
    }
    let (c, t_len) = (e.channels, e.samples);
    let mut cov = vec![0.0; c * c];
    let mut centered = vec![0.0; n * c];
    for t in 0..t_len {
        let mut mean = vec![0.0; c];
        for ep in 0..n {
            let base = ep * c * t_len;
            for ch in 0..c {
                let v = e.data[base + ch * t_len + t];
                centered[ep * c + ch] = v;
                mean[ch] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for ep in 0..n {
            for ch in 0..c {
                centered[ep * c + ch] -= mean[ch];
            }
        }
        for i in 0..c {
            for j in i..c {
                let s: f64 = (0..n).map(|ep| centered[ep * c + i] * centered[ep * c + j]).sum();
                cov[i * c + j] += s / (n - 1) as f64;
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = cov[i * c + j] / t_len as f64;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateCovariance("non-finite covariance".into()));
    }
    Ok(cov)
}

/// `((1 - s) cov + s tr(cov)/C I + eps I)^(-1/2)` by symmetric
/// eigendecomposition, eigenvalues clamped below at `eps`.
pub fn whitening_from_covariance(
    cov: &[f64],
    channels: usize,
    shrinkage: f64,
    epsilon: f64,
) -> Result<WhiteningOperator> {
    if !(0.0..=1.0).contains(&shrinkage) || !(epsilon >= 0.0) {
        return Err(Error::Config(format!(
            "shrinkage must be in [0,1] and epsilon >= 0 (got {shrinkage}, {epsilon})"
        )));
    }
    if cov.len() != channels * channels || cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateCovariance("non-finite or misshapen covariance".into()));
    }
    let c = channels;
    let mean_var = (0..c).map(|i| cov[i * c + i]).sum::<f64>() / c as f64;
    let mut m = DMatrix::from_row_slice(c, c, cov);
    m *= 1.0 - shrinkage;
    for i in 0..c {
        m[(i, i)] += shrinkage * mean_var + epsilon;
    }
    let eig = SymmetricEigen::new(m);
    let mut inv_sqrt = Vec::with_capacity(c);
    for &l in eig.eigenvalues.iter() {
        let l = l.max(epsilon);
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::DegenerateCovariance(format!("eigenvalue {l} not positive")));
        }
        inv_sqrt.push(1.0 / l.sqrt());
    }
    let v = &eig.eigenvectors;
    let mut matrix = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let s: f64 = (0..c).map(|k| v[(i, k)] * inv_sqrt[k] * v[(j, k)]).sum();
            matrix[i * c + j] = s;
            matrix[j * c + i] = s;
        }
    }
    Ok(WhiteningOperator {
        matrix,
        channels,
        shrinkage,
        epsilon,
    })
}

pub fn mvnn_fit(e: &EegEpochSet, shrinkage: f64, epsilon: f64) -> Result<WhiteningOperator> {
    let cov = noise_covariance(e)?;
    whitening_from_covariance(&cov, e.channels, shrinkage, epsilon)
}

/// Multiplies every time slice by the whitening matrix.
pub fn mvnn_apply(e: &EegEpochSet, w: &WhiteningOperator) -> Result<EegEpochSet> {
    if w.channels != e.channels {
        return Err(Error::ChannelMismatch {
            operator: w.channels,
            data: e.channels,
        });
    }
    let (c, t_len) = (e.channels, e.samples);
    let mut data = vec![0.0; e.data.len()];
    for (src, dst) in e.data.chunks_exact(c * t_len).zip(data.chunks_exact_mut(c * t_len)) {
        for i in 0..c {
            let out = &mut dst[i * t_len..(i + 1) * t_len];
            for k in 0..c {
                let wik = w.matrix[i * c + k];
                if wik == 0.0 {
                    continue;
                }
                for (o, &x) in out.iter_mut().zip(&src[k * t_len..(k + 1) * t_len]) {
                    *o += wik * x;
                }
            }
        }
    }
    EegEpochSet::new(data, e.dims(), e.sampling_rate_hz, e.baseline_samples)
}

/// Averages consecutive groups of `group_size` repetitions.
pub fn average_repetitions(e: &EegEpochSet, group_size: usize) -> Result<EegEpochSet> {
    if group_size == 0 || e.n_repetitions % group_size != 0 {
        return Err(Error::BadGroupSize {
            group: group_size,
            repetitions: e.n_repetitions,
        });
    }
    let groups = e.n_repetitions / group_size;
    let len = e.epoch_len();
    let inv = 1.0 / group_size as f64;
    let mut data = Vec::with_capacity(e.n_concepts * groups * len);
    for concept in 0..e.n_concepts {
        for g in 0..groups {
            let mut acc = vec![0.0; len];
            for r in g * group_size..(g + 1) * group_size {
                for (a, &x) in acc.iter_mut().zip(e.epoch(concept, r)) {
                    *a += x;
                }
            }
            data.extend(acc.into_iter().map(|a| a * inv));
        }
    }
    EegEpochSet::new(
        data,
        [e.n_concepts, groups, e.channels, e.samples],
        e.sampling_rate_hz,
        e.baseline_samples,
    )
}

/// Adds zero-mean Gaussian noise whose per-channel std is
/// `noise_sigma_rel` times that channel's empirical std.
pub fn augment_eeg(x: &[f64], channels: usize, samples: usize, noise_sigma_rel: f64, seed: u64) -> Vec<f64> {
    debug_assert_eq!(x.len(), channels * samples);
    if noise_sigma_rel <= 0.0 {
        return x.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.to_vec();
    for c in 0..channels {
        let row = &mut out[c * samples..(c + 1) * samples];
        let mean = row.iter().sum::<f64>() / samples as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / samples as f64;
        let sigma = noise_sigma_rel * var.sqrt();
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    }
    out
}
