//! Zero-shot retrieval over held-out concepts and the layer / pair sweeps
//! built on it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{PoolingChoice, PoolingMode};
use crate::model::AlignmentModel;
use crate::par::par_map;
use crate::tensor::Tensor;
use crate::training::{train, DataSource, Dataset, TrainConfig};

/// 1-based rank of column `truth` in `row`: entries strictly larger, or
/// equal with a smaller column index, rank ahead of it.
pub fn rank_of(row: &[f64], truth: usize) -> usize {
    let s = row[truth];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < truth))
        .count()
}

/// Fraction of rows of the `n x m` matrix whose true column ranks within
/// the top `k`.
pub fn topk_accuracy(sim: &[f64], m: usize, truth: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > m {
        return Err(Error::Config(format!("k = {k} is outside 1..={m}")));
    }
    check_matrix(sim, m, truth)?;
    let hits = sim
        .chunks_exact(m)
        .zip(truth)
        .filter(|(row, &t)| rank_of(row, t) <= k)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

fn check_matrix(sim: &[f64], m: usize, truth: &[usize]) -> Result<()> {
    if m == 0 || truth.is_empty() || sim.len() != truth.len() * m {
        return Err(Error::Shape(format!(
            "similarity has {} entries for {} rows of width {m}",
            sim.len(),
            truth.len()
        )));
    }
    if let Some(t) = truth.iter().find(|&&t| t >= m) {
        return Err(Error::Shape(format!("true index {t} outside {m} columns")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub n_way: usize,
    pub top1: f64,
    /// Top-`min(5, n_way)` accuracy.
    pub top5: f64,
    /// `n_test x n_way`
    pub similarity: Tensor,
    pub per_item_ranks: Vec<usize>,
}

impl RetrievalReport {
    pub fn from_similarity(sim: Vec<f64>, m: usize, truth: &[usize]) -> Result<Self> {
        check_matrix(&sim, m, truth)?;
        let ranks: Vec<usize> = sim.chunks_exact(m).zip(truth).map(|(r, &t)| rank_of(r, t)).collect();
        let n = truth.len() as f64;
        let top1 = ranks.iter().filter(|&&r| r == 1).count() as f64 / n;
        let top5 = ranks.iter().filter(|&&r| r <= 5.min(m)).count() as f64 / n;
        Ok(Self {
            n_way: m,
            top1,
            top5,
            similarity: Tensor::from_f64(vec![truth.len(), m], sim)?,
            per_item_ranks: ranks,
        })
    }
}

/// Test-split retrieval for one subject: repetition-averaged EEG against
/// view 1 of every test image.
pub fn evaluate(model: &AlignmentModel, ds: &Dataset, subject: usize) -> Result<RetrievalReport> {
    evaluate_reps(model, ds, subject, None)
}

/// As [`evaluate`], averaging only the first `reps` test repetitions when
/// given.
pub fn evaluate_reps(model: &AlignmentModel, ds: &Dataset, subject: usize, reps: Option<usize>) -> Result<RetrievalReport> {
    let s = ds
        .subjects
        .get(subject)
        .ok_or_else(|| Error::Config(format!("subject index {subject} out of range")))?;
    let rows = &ds.test_rows;
    if rows.is_empty() {
        return Err(Error::BadManifest("empty test split".into()));
    }
    let available = s.epochs.n_repetitions;
    if let Some(n) = reps {
        if n == 0 || n > available {
            return Err(Error::Config(format!(
                "cannot average {n} test repetitions, subject {} has {available}",
                s.name
            )));
        }
    }
    let eeg = |r: usize| match reps {
        Some(n) if n < available => {
            let len = s.epochs.epoch_len();
            let mut acc = vec![0.0; len];
            for k in 0..n {
                acc.iter_mut().zip(s.epochs.epoch(r, k)).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= n as f64);
            acc
        }
        _ => s.averaged[r].clone(),
    };
    let z_e = par_map(rows, |&r| model.embed_eeg(&eeg(r)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let z_i = par_map(rows, |&r| model.embed_image_fused(&ds.image_vector(1, r)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let sim: Vec<f64> = z_e
        .iter()
        .flat_map(|e| z_i.iter().map(move |i| e.iter().zip(i).map(|(a, b)| a * b).sum::<f64>()))
        .collect();
    let truth: Vec<usize> = (0..rows.len()).collect();
    RetrievalReport::from_similarity(sim, rows.len(), &truth)
}

/// One report per subject, in dataset order.
pub fn evaluate_all(model: &AlignmentModel, ds: &Dataset, reps: Option<usize>) -> Result<Vec<(String, RetrievalReport)>> {
    (0..ds.subjects.len())
        .map(|i| Ok((ds.subjects[i].name.clone(), evaluate_reps(model, ds, i, reps)?)))
        .collect()
}

fn mean_scores(reports: &[(String, RetrievalReport)]) -> (f64, f64) {
    let n = reports.len() as f64;
    (
        reports.iter().map(|(_, r)| r.top1).sum::<f64>() / n,
        reports.iter().map(|(_, r)| r.top5).sum::<f64>() / n,
    )
}

/// Trains on the given layers and returns subject-averaged top-1 / top-5.
pub fn train_and_score(src: &DataSource, cfg: &TrainConfig, layers: &[usize], pooling: PoolingChoice) -> Result<(f64, f64)> {
    let ds = src.dataset(layers, pooling)?;
    let run = train(&ds, cfg, None)?;
    Ok(mean_scores(&evaluate_all(&run.model, &ds, None)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    pub layer: usize,
    pub pooling: PoolingMode,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub layer_a: usize,
    pub layer_b: usize,
    pub top1: f64,
    pub top5: f64,
}

/// One model per (layer, pooling mode valid for its topology), all with the
/// same seed.
pub fn sweep_layers(src: &DataSource, cfg: &TrainConfig, layers: &[usize]) -> Result<Vec<LayerRow>> {
    let mut jobs = Vec::new();
    for &l in layers {
        let spec = src.features.layer(l).ok_or(Error::UnknownLayer(l))?;
        for mode in PoolingMode::sweep_modes(spec.topology) {
            jobs.push((l, mode));
        }
    }
    par_map(&jobs, |&(layer, mode)| {
        let (top1, top5) = train_and_score(src, cfg, &[layer], PoolingChoice::uniform(mode))?;
        Ok(LayerRow {
            layer,
            pooling: mode,
            top1,
            top5,
        })
    })
    .into_iter()
    .collect()
}

/// Singletons on the diagonal plus one fused model per unordered pair.
pub fn sweep_pairs(src: &DataSource, cfg: &TrainConfig, layers: &[usize]) -> Result<Vec<PairRow>> {
    if layers.len() < 2 {
        return Err(Error::Config("pair sweep needs at least two layers".into()));
    }
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut jobs = Vec::new();
    for (i, &a) in sorted.iter().enumerate() {
        for &b in &sorted[i..] {
            jobs.push((a, b));
        }
    }
    par_map(&jobs, |&(a, b)| {
        let chosen: Vec<usize> = if a == b { vec![a] } else { vec![a, b] };
        let (top1, top5) = train_and_score(src, cfg, &chosen, cfg.pooling)?;
        Ok(PairRow {
            layer_a: a,
            layer_b: b,
            top1,
            top5,
        })
    })
    .into_iter()
    .collect()
}

fn write_csv(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_eval_csv(rows: &[(String, RetrievalReport)], path: &Path) -> Result<()> {
    let mut s = String::from("subject,top1,top5\n");
    for (subject, r) in rows {
        let _ = writeln!(s, "{subject},{},{}", r.top1, r.top5);
    }
    write_csv(path, s)
}

pub fn write_layers_csv(rows: &[LayerRow], path: &Path) -> Result<()> {
    let mut s = String::from("layer,pooling,top1,top5\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.layer, r.pooling, r.top1, r.top5);
    }
    write_csv(path, s)
}

pub fn write_pairs_csv(rows: &[PairRow], path: &Path) -> Result<()> {
    let mut s = String::from("layer_a,layer_b,top1,top5\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.layer_a, r.layer_b, r.top1, r.top5);
    }
    write_csv(path, s)
}
