//! Symmetric InfoNCE over a batch of matched EEG/image embeddings.

use crate::error::{Error, Result};

/// `S[a][b] = <z_e[a], z_i[b]>`, row-major `B x B`. Inputs are row-major
/// `B x d`.
pub fn similarity_matrix(z_e: &[f64], z_i: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || z_e.len() % d != 0 || z_i.len() % d != 0 {
        return Err(Error::Shape(format!(
            "embedding buffers ({}, {}) are not multiples of d = {d}",
            z_e.len(),
            z_i.len()
        )));
    }
    let (n, m) = (z_e.len() / d, z_i.len() / d);
    let mut s = Vec::with_capacity(n * m);
    for a in z_e.chunks_exact(d) {
        for b in z_i.chunks_exact(d) {
            s.push(a.iter().zip(b).map(|(x, y)| x * y).sum());
        }
    }
    Ok(s)
}

/// Loss value and gradients of the symmetric InfoNCE objective.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub d_z_e: Vec<f64>,
    pub d_z_i: Vec<f64>,
    /// d loss / d tau
    pub d_tau: f64,
    pub similarity: Vec<f64>,
}

/// Matched batch: row `a` of `z_e` and row `a` of `z_i` are the positive
/// pair, all other rows are negatives.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub z_e: &'a [f64],
    pub z_i: &'a [f64],
    pub d: usize,
    pub concept_ids: &'a [usize],
}

impl Batch<'_> {
    pub fn size(&self) -> usize {
        self.concept_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.size();
        if b == 0 || self.z_e.len() != b * self.d || self.z_i.len() != b * self.d {
            return Err(Error::Shape(format!(
                "batch of {b} concepts with d = {} does not match embedding buffers",
                self.d
            )));
        }
        let mut ids = self.concept_ids.to_vec();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate concept in batch".into()));
        }
        for row in self.z_e.chunks_exact(self.d).chain(self.z_i.chunks_exact(self.d)) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Shape(format!("embedding row norm {norm} is not 1")));
            }
        }
        Ok(())
    }
}

fn log_softmax_diag_terms(g: &[f64], b: usize, by_row: bool) -> (f64, Vec<f64>) {
    // returns (sum of log-softmax diagonal entries, softmax probabilities laid out as g)
    let mut probs = vec![0.0; b * b];
    let mut total = 0.0;
    for i in 0..b {
        let at = |j: usize| if by_row { i * b + j } else { j * b + i };
        let max = (0..b).map(|j| g[at(j)]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..b).map(|j| (g[at(j)] - max).exp()).sum();
        let log_z = max + sum.ln();
        total += g[at(i)] - log_z;
        for j in 0..b {
            probs[at(j)] = (g[at(j)] - log_z).exp();
        }
    }
    (total, probs)
}

/// Loss and gradients for similarities already computed as `S`.
pub fn infonce_from_similarity(s: &[f64], b: usize, tau: f64) -> Result<(f64, Vec<f64>, f64)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let g: Vec<f64> = s.iter().map(|x| x / tau).collect();
    let (row_sum, row_p) = log_softmax_diag_terms(&g, b, true);
    let (col_sum, col_p) = log_softmax_diag_terms(&g, b, false);
    let loss = -(row_sum + col_sum) / (2.0 * b as f64);
    let scale = 1.0 / (2.0 * b as f64);
    let mut d_g = vec![0.0; b * b];
    for a in 0..b {
        for c in 0..b {
            let delta = if a == c { 2.0 } else { 0.0 };
            d_g[a * b + c] = scale * (row_p[a * b + c] + col_p[a * b + c] - delta);
        }
    }
    let d_s: Vec<f64> = d_g.iter().map(|x| x / tau).collect();
    let d_tau = -d_g.iter().zip(&g).map(|(dg, gv)| dg * gv).sum::<f64>() / tau;
    Ok((loss.max(0.0), d_s, d_tau))
}

pub fn infonce(batch: &Batch<'_>, tau: f64) -> Result<InfoNceOutput> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    batch.validate()?;
    let (b, d) = (batch.size(), batch.d);
    let s = similarity_matrix(batch.z_e, batch.z_i, d)?;
    let (loss, d_s, d_tau) = infonce_from_similarity(&s, b, tau)?;
    let mut d_z_e = vec![0.0; b * d];
    let mut d_z_i = vec![0.0; b * d];
    for a in 0..b {
        for c in 0..b {
            let w = d_s[a * b + c];
            if w == 0.0 {
                continue;
            }
            for k in 0..d {
                d_z_e[a * d + k] += w * batch.z_i[c * d + k];
                d_z_i[c * d + k] += w * batch.z_e[a * d + k];
            }
        }
    }
    Ok(InfoNceOutput {
        loss,
        d_z_e,
        d_z_i,
        d_tau,
        similarity: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_rows(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..b * d).map(|_| StandardNormal.sample(rng)).collect();
        for row in v.chunks_exact_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    fn naive_loss(s: &[f64], b: usize, tau: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..b {
            let row: f64 = (0..b).map(|j| (s[i * b + j] / tau).exp()).sum();
            let col: f64 = (0..b).map(|j| (s[j * b + i] / tau).exp()).sum();
            total += (s[i * b + i] / tau).exp().ln() - row.ln();
            total += (s[i * b + i] / tau).exp().ln() - col.ln();
        }
        -total / (2.0 * b as f64)
    }

    #[test]
    fn similarity_examples() {
        let e = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(similarity_matrix(&e, &e, 2).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        let neg = [-1.0, 0.0, 0.0, -1.0];
        assert_eq!(similarity_matrix(&e, &neg, 2).unwrap()[0], -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = unit_rows(3, 5, &mut rng);
        let b = unit_rows(3, 5, &mut rng);
        let s = similarity_matrix(&a, &b, 5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..5 {
                    dot += a[i * 5 + k] * b[j * 5 + k];
                }
                assert!((s[i * 3 + j] - dot).abs() < 1e-12);
            }
        }
        assert!(similarity_matrix(&a, &b, 4).is_err());
    }

    #[test]
    fn closed_forms() {
        let (l1, _, _) = infonce_from_similarity(&[0.3], 1, 0.5).unwrap();
        assert_eq!(l1, 0.0);
        let (l2, _, _) = infonce_from_similarity(&[1.0, 0.0, 0.0, 1.0], 2, 1.0).unwrap();
        assert!((l2 - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l2 - 0.31326).abs() < 1e-5);
        for tau in [0.05, 1.0, 7.0] {
            let (lu, _, _) = infonce_from_similarity(&[0.4; 25], 5, tau).unwrap();
            assert!((lu - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_temperature() {
        let err = infonce_from_similarity(&[1.0], 1, 0.0).unwrap_err();
        assert!(err.to_string().contains("invalid temperature"));
        assert!(infonce_from_similarity(&[1.0], 1, -1.0).is_err());
    }

    #[test]
    fn duplicate_concepts_rejected() {
        let z = [1.0, 0.0, 0.0, 1.0];
        let batch = Batch {
            z_e: &z,
            z_i: &z,
            d: 2,
            concept_ids: &[4, 4],
        };
        assert!(infonce(&batch, 1.0).is_err());
    }

    #[test]
    fn matches_naive_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, d) = (6, 4);
        let ze = unit_rows(b, d, &mut rng);
        let zi = unit_rows(b, d, &mut rng);
        let ids: Vec<usize> = (0..b).collect();
        let fwd = infonce(&Batch { z_e: &ze, z_i: &zi, d, concept_ids: &ids }, 0.3).unwrap();
        let rev = infonce(&Batch { z_e: &zi, z_i: &ze, d, concept_ids: &ids }, 0.3).unwrap();
        assert!((fwd.loss - naive_loss(&fwd.similarity, b, 0.3)).abs() < 1e-12);
        assert!((fwd.loss - rev.loss).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let b = 2 + trial % 7;
            let d = 3 + trial % 13;
            let tau = 0.05 + 0.1 * (trial % 5) as f64;
            let ze = unit_rows(b, d, &mut rng);
            let zi = unit_rows(b, d, &mut rng);
            // loss as a free function of unconstrained embedding entries
            let loss = |ze: &[f64], zi: &[f64], tau: f64| {
                let s = similarity_matrix(ze, zi, d).unwrap();
                naive_loss(&s, b, tau)
            };
            let ids: Vec<usize> = (0..b).collect();
            let out = infonce(&Batch { z_e: &ze, z_i: &zi, d, concept_ids: &ids }, tau).unwrap();
            let h = 1e-5;
            let check = |analytic: f64, fd: f64| {
                let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
                assert!(err < 1e-5, "analytic {analytic} fd {fd}");
            };
            for k in 0..b * d {
                let (mut p, mut m) = (ze.clone(), ze.clone());
                p[k] += h;
                m[k] -= h;
                check(out.d_z_e[k], (loss(&p, &zi, tau) - loss(&m, &zi, tau)) / (2.0 * h));
                let (mut p, mut m) = (zi.clone(), zi.clone());
                p[k] += h;
                m[k] -= h;
                check(out.d_z_i[k], (loss(&ze, &p, tau) - loss(&ze, &m, tau)) / (2.0 * h));
            }
            let th = 1e-6;
            check(out.d_tau, (loss(&ze, &zi, tau + th) - loss(&ze, &zi, tau - th)) / (2.0 * th));
        }
    }

    #[test]
    fn small_step_does_not_increase_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, d) = (5, 6);
        let ids: Vec<usize> = (0..b).collect();
        for _ in 0..100 {
            let ze = unit_rows(b, d, &mut rng);
            let zi = unit_rows(b, d, &mut rng);
            let out = infonce(&Batch { z_e: &ze, z_i: &zi, d, concept_ids: &ids }, 0.5).unwrap();
            let step = 1e-3;
            let ze2: Vec<f64> = ze.iter().zip(&out.d_z_e).map(|(z, g)| z - step * g).collect();
            let zi2: Vec<f64> = zi.iter().zip(&out.d_z_i).map(|(z, g)| z - step * g).collect();
            let s2 = similarity_matrix(&ze2, &zi2, d).unwrap();
            let (l2, _, _) = infonce_from_similarity(&s2, b, 0.5).unwrap();
            assert!(l2 <= out.loss + 1e-15);
        }
    }

    #[test]
    fn stable_at_low_temperature() {
        let s = [1.0, -1.0, -1.0, 1.0];
        let (l, ds, dt) = infonce_from_similarity(&s, 2, 0.01).unwrap();
        assert!(l.is_finite() && dt.is_finite() && ds.iter().all(|x| x.is_finite()));
        assert!(l < 1e-50);
    }
}
