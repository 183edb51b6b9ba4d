//! JSON dataset manifests binding EEG tensors to per-layer feature tensors.
//!
//! Every path is explicit and relative to the manifest's directory (or
//! absolute). Row `i` of every EEG and feature tensor belongs to
//! `concepts[i]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{LayerFeatureSet, LayerSpec};
use crate::tensor::{read_tensor, read_tensor_header};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneEntry {
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFile {
    pub backbone: String,
    pub layer: usize,
    pub view: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<String>,
    pub concepts: Vec<String>,
    pub split: Split,
    /// subject -> `(n_concepts, n_repetitions, channels, samples)` tensor
    pub eeg_files: BTreeMap<String, PathBuf>,
    pub backbones: BTreeMap<String, BackboneEntry>,
    pub feature_files: Vec<FeatureFile>,
    pub num_views: usize,
    pub sampling_rate_hz: f64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn concept_index(&self) -> BTreeMap<&str, usize> {
        self.concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect()
    }

    /// Row indices (into `concepts`) of the train split, in split order.
    pub fn train_rows(&self) -> Vec<usize> {
        self.rows(&self.split.train)
    }

    pub fn test_rows(&self) -> Vec<usize> {
        self.rows(&self.split.test)
    }

    fn rows(&self, names: &[String]) -> Vec<usize> {
        let idx = self.concept_index();
        names.iter().map(|c| idx[c.as_str()]).collect()
    }

    pub fn feature_path(&self, backbone: &str, layer: usize, view: usize) -> Option<PathBuf> {
        self.feature_files
            .iter()
            .find(|f| f.backbone == backbone && f.layer == layer && f.view == view)
            .map(|f| self.resolve(&f.path))
    }

    /// Name of the backbone used when none is requested.
    pub fn default_backbone(&self) -> Option<&str> {
        self.backbones.keys().next().map(String::as_str)
    }

    /// Checks every invariant, including the shapes of referenced files.
    pub fn validate(&self) -> Result<()> {
        if self.num_views == 0 {
            return Err(Error::BadManifest("num_views must be >= 1".into()));
        }
        if !(self.sampling_rate_hz > 0.0 && self.sampling_rate_hz.is_finite()) {
            return Err(Error::BadManifest("sampling_rate_hz must be positive".into()));
        }
        if self.concepts.is_empty() {
            return Err(Error::BadManifest("no concepts".into()));
        }
        let known: BTreeSet<&str> = self.concepts.iter().map(String::as_str).collect();
        if known.len() != self.concepts.len() {
            return Err(Error::BadManifest("duplicate concept ids".into()));
        }
        let train: BTreeSet<&str> = self.split.train.iter().map(String::as_str).collect();
        for c in &self.split.test {
            if train.contains(c.as_str()) {
                return Err(Error::SplitLeak(c.clone()));
            }
        }
        for c in self.split.train.iter().chain(&self.split.test) {
            if !known.contains(c.as_str()) {
                return Err(Error::BadManifest(format!("split names unknown concept {c}")));
            }
        }
        let n = self.concepts.len();

        let mut eeg_shape: Option<Vec<usize>> = None;
        for subject in &self.subjects {
            let rel = self
                .eeg_files
                .get(subject)
                .ok_or_else(|| Error::DanglingReference(format!("no EEG file for subject {subject}")))?;
            let path = self.resolve(rel);
            if !path.is_file() {
                return Err(Error::DanglingReference(format!("{}", path.display())));
            }
            let h = read_tensor_header(&path)?;
            if h.shape.len() != 4 || h.shape[0] != n {
                return Err(Error::Shape(format!(
                    "EEG file {} has shape {:?}, expected ({n}, reps, channels, samples)",
                    path.display(),
                    h.shape
                )));
            }
            match &eeg_shape {
                Some(s) if s[2..] != h.shape[2..] => {
                    return Err(Error::Shape(format!(
                        "subjects disagree on channel/sample counts: {:?} vs {:?}",
                        s, h.shape
                    )))
                }
                _ => eeg_shape = Some(h.shape),
            }
        }

        for (name, entry) in &self.backbones {
            for spec in &entry.layers {
                spec.validate()?;
                for view in 1..=self.num_views {
                    let path = self.feature_path(name, spec.index, view).ok_or_else(|| {
                        Error::DanglingReference(format!(
                            "backbone {name} layer {} view {view} not listed",
                            spec.index
                        ))
                    })?;
                    if !path.is_file() {
                        return Err(Error::DanglingReference(format!("{}", path.display())));
                    }
                    let h = read_tensor_header(&path)?;
                    let mut expect = vec![n];
                    expect.extend_from_slice(&spec.dims);
                    if h.shape != expect {
                        return Err(Error::Shape(format!(
                            "{}: expected {expect:?}, got {:?}",
                            path.display(),
                            h.shape
                        )));
                    }
                }
            }
        }
        for f in &self.feature_files {
            let declared = self
                .backbones
                .get(&f.backbone)
                .is_some_and(|b| b.layers.iter().any(|l| l.index == f.layer));
            if !declared || f.view == 0 || f.view > self.num_views {
                return Err(Error::DanglingReference(format!(
                    "feature file {} refers to undeclared backbone/layer/view",
                    f.path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn load_features(&self, backbone: &str) -> Result<LayerFeatureSet> {
        let entry = self
            .backbones
            .get(backbone)
            .ok_or_else(|| Error::Config(format!("unknown backbone {backbone}")))?;
        let mut features = BTreeMap::new();
        for spec in &entry.layers {
            for view in 1..=self.num_views {
                let path = self.feature_path(backbone, spec.index, view).ok_or_else(|| {
                    Error::DanglingReference(format!("{backbone} layer {} view {view}", spec.index))
                })?;
                features.insert((spec.index, view), read_tensor(&path)?);
            }
        }
        let set = LayerFeatureSet {
            backbone_name: backbone.to_string(),
            layers: entry.layers.clone(),
            features,
            num_views: self.num_views,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Parses and eagerly validates a manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate()?;
    Ok(m)
}
