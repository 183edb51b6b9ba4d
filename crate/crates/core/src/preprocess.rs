//! The fixed preprocessing chain from a continuous recording to
//! per-concept epochs: segment and baseline, decimate, whiten, average.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eeg::{average_repetitions, decimate, group_by_concept, mvnn_apply, mvnn_fit, segment_and_baseline, EegEpochSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MVNN_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub pre_ms: f64,
    pub post_ms: f64,
    pub decimate: usize,
    /// `None` skips whitening.
    pub mvnn_shrinkage: Option<f64>,
    /// `None` keeps every repetition.
    pub avg_group: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            pre_ms: 200.0,
            post_ms: 1000.0,
            decimate: 1,
            mvnn_shrinkage: Some(0.1),
            avg_group: None,
        }
    }
}

/// Stimulus onsets of a recording, as written next to the raw tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventList {
    pub sampling_rate_hz: f64,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    /// Sample index of stimulus onset.
    pub onset: usize,
    pub concept: String,
}

impl EventList {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

fn ms_to_samples(ms: f64, fs: f64) -> Result<usize> {
    let n = ms * fs / 1000.0;
    if !(n >= 0.0 && n.is_finite()) {
        return Err(Error::Config(format!("window of {ms} ms is invalid")));
    }
    Ok(n.round() as usize)
}

/// Runs the chain and returns epochs with their concept order.
pub fn preprocess(raw: &Tensor, events: &EventList, cfg: &PreprocessConfig) -> Result<(EegEpochSet, Vec<String>)> {
    let fs = events.sampling_rate_hz;
    if !(fs > 0.0) {
        return Err(Error::Config("sampling rate must be positive".into()));
    }
    let pre = ms_to_samples(cfg.pre_ms, fs)?;
    let post = ms_to_samples(cfg.post_ms, fs)?;
    let onsets: Vec<usize> = events.events.iter().map(|e| e.onset).collect();
    let labels: Vec<String> = events.events.iter().map(|e| e.concept.clone()).collect();
    let epochs = segment_and_baseline(raw, &onsets, pre, post, fs)?;
    let (mut e, concepts) = group_by_concept(&epochs, &labels)?;
    if cfg.decimate != 1 {
        e = decimate(&e, cfg.decimate)?;
    }
    if let Some(s) = cfg.mvnn_shrinkage {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Config(format!("shrinkage {s} outside [0, 1]")));
        }
        let w = mvnn_fit(&e, s, MVNN_EPSILON)?;
        e = mvnn_apply(&e, &w)?;
    }
    if let Some(g) = cfg.avg_group {
        e = average_repetitions(&e, g)?;
    }
    Ok((e, concepts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn recording(channels: usize, len: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_f64(vec![channels, len], (0..channels * len).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    fn events(n_concepts: usize, reps: usize) -> EventList {
        let mut events = Vec::new();
        for r in 0..reps {
            for c in 0..n_concepts {
                events.push(Event {
                    onset: 300 + 150 * (r * n_concepts + c),
                    concept: format!("k{c}"),
                });
            }
        }
        EventList {
            sampling_rate_hz: 1000.0,
            events,
        }
    }

    #[test]
    fn chain_shapes() {
        let raw = recording(3, 300 + 150 * 12 + 200, 1);
        let cfg = PreprocessConfig {
            pre_ms: 50.0,
            post_ms: 100.0,
            decimate: 4,
            mvnn_shrinkage: Some(0.1),
            avg_group: Some(2),
        };
        let (e, concepts) = preprocess(&raw, &events(3, 4), &cfg).unwrap();
        assert_eq!(concepts, vec!["k0", "k1", "k2"]);
        assert_eq!(e.dims(), [3, 2, 3, 25]);
        assert_eq!(e.sampling_rate_hz, 250.0);
    }

    #[test]
    fn skipping_steps_matches_plain_segmentation() {
        let raw = recording(2, 300 + 150 * 4 + 200, 2);
        let cfg = PreprocessConfig {
            pre_ms: 20.0,
            post_ms: 80.0,
            decimate: 1,
            mvnn_shrinkage: None,
            avg_group: None,
        };
        let ev = events(2, 2);
        let (e, _) = preprocess(&raw, &ev, &cfg).unwrap();
        let onsets: Vec<usize> = ev.events.iter().map(|e| e.onset).collect();
        let plain = segment_and_baseline(&raw, &onsets, 20, 80, 1000.0).unwrap();
        // concept k0 repetition 1 is the third onset
        assert_eq!(e.epoch(0, 1), plain.epoch(2, 0));
    }

    #[test]
    fn bad_decimation_propagates() {
        let raw = recording(2, 2000, 3);
        let cfg = PreprocessConfig {
            post_ms: 99.0,
            decimate: 4,
            ..PreprocessConfig::default()
        };
        let err = preprocess(&raw, &events(2, 2), &cfg).unwrap_err();
        assert!(err.to_string().contains("bad decimation factor"));
    }
}
