//! Hierarchically complementary fusion: pooled layer vectors are
//! concatenated and mapped into the shared space by one linear map whose
//! weight matrix splits into per-layer column blocks.

use rand::Rng;

use crate::error::{Error, Result};

/// Image-side projection `W_F v + b` with `W_F = [W_1 ... W_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    /// Row-major `d x sum(block_dims)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub block_dims: Vec<usize>,
    pub d: usize,
}

/// Concatenates vectors in order.
pub fn fuse_concat(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    if vectors.is_empty() {
        return Err(Error::NothingToFuse);
    }
    Ok(vectors.concat())
}

impl FusionHead {
    pub fn new(weight: Vec<f64>, bias: Vec<f64>, block_dims: Vec<usize>) -> Result<Self> {
        let d = bias.len();
        let cols: usize = block_dims.iter().sum();
        if block_dims.is_empty() || block_dims.contains(&0) || d == 0 || weight.len() != d * cols {
            return Err(Error::FusionDimensionMismatch(format!(
                "weight of {} entries cannot be {d} x {cols} (blocks {block_dims:?})",
                weight.len()
            )));
        }
        Ok(Self {
            weight,
            bias,
            block_dims,
            d,
        })
    }

    /// Fan-in uniform weights in `[-1/sqrt(cols), 1/sqrt(cols)]`, zero bias.
    pub fn init<R: Rng>(block_dims: Vec<usize>, d: usize, rng: &mut R) -> Result<Self> {
        let cols: usize = block_dims.iter().sum();
        let bound = 1.0 / (cols.max(1) as f64).sqrt();
        let weight = (0..d * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(weight, vec![0.0; d], block_dims)
    }

    pub fn cols(&self) -> usize {
        self.block_dims.iter().sum()
    }

    /// Column offset of block `i`.
    pub fn block_offset(&self, i: usize) -> usize {
        self.block_dims[..i].iter().sum()
    }

    /// `W_F v_fuse + b`.
    pub fn project(&self, v_fuse: &[f64]) -> Result<Vec<f64>> {
        let cols = self.cols();
        if v_fuse.len() != cols {
            return Err(Error::FusionDimensionMismatch(format!(
                "input has {} entries, head expects {cols}",
                v_fuse.len()
            )));
        }
        Ok(self
            .weight
            .chunks_exact(cols)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(v_fuse).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect())
    }

    /// `sum_i W_i v_i + b`, never materializing the concatenation.
    pub fn project_blockwise(&self, vectors: &[&[f64]]) -> Result<Vec<f64>> {
        if vectors.len() != self.block_dims.len()
            || vectors.iter().zip(&self.block_dims).any(|(v, &d)| v.len() != d)
        {
            return Err(Error::FusionDimensionMismatch(format!(
                "got blocks {:?}, head expects {:?}",
                vectors.iter().map(|v| v.len()).collect::<Vec<_>>(),
                self.block_dims
            )));
        }
        let cols = self.cols();
        let mut out = self.bias.clone();
        let mut offset = 0;
        for (v, &di) in vectors.iter().zip(&self.block_dims) {
            for (r, o) in out.iter_mut().enumerate() {
                let row = &self.weight[r * cols + offset..r * cols + offset + di];
                *o += row.iter().zip(v.iter()).map(|(w, x)| w * x).sum::<f64>();
            }
            offset += di;
        }
        Ok(out)
    }

    /// Accumulates `dL/dW_F += dy v^T` block by block and `dL/db += dy`.
    pub fn accumulate_grad(&self, vectors: &[&[f64]], dy: &[f64], dweight: &mut [f64], dbias: &mut [f64]) {
        let cols = self.cols();
        for (r, &g) in dy.iter().enumerate() {
            dbias[r] += g;
            let mut offset = 0;
            for v in vectors {
                let row = &mut dweight[r * cols + offset..r * cols + offset + v.len()];
                for (w, &x) in row.iter_mut().zip(v.iter()) {
                    *w += g * x;
                }
                offset += v.len();
            }
        }
    }

    /// Zeroes block `i`, removing that layer's contribution.
    pub fn null_block(&mut self, i: usize) {
        let cols = self.cols();
        let (off, di) = (self.block_offset(i), self.block_dims[i]);
        for r in 0..self.d {
            self.weight[r * cols + off..r * cols + off + di].fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn concat_in_order() {
        assert_eq!(fuse_concat(&[&[1.0, 2.0], &[3.0]]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(fuse_concat(&[&[3.0], &[1.0, 2.0]]).unwrap(), vec![3.0, 1.0, 2.0]);
        assert_eq!(fuse_concat(&[&[4.0, 5.0]]).unwrap(), vec![4.0, 5.0]);
        let err = fuse_concat(&[]).unwrap_err();
        assert!(err.to_string().contains("nothing to fuse"));
    }

    #[test]
    fn project_examples() {
        let id = FusionHead::new(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], vec![2]).unwrap();
        assert_eq!(id.project(&[3.0, -4.0]).unwrap(), vec![3.0, -4.0]);
        let h = FusionHead::new(vec![1.0, 0.0, 0.0, 2.0], vec![1.0, 1.0], vec![2]).unwrap();
        assert_eq!(h.project(&[3.0, 4.0]).unwrap(), vec![4.0, 9.0]);
        let z = FusionHead::new(vec![0.0; 4], vec![0.5, -1.0], vec![2]).unwrap();
        assert_eq!(z.project(&[3.0, 4.0]).unwrap(), vec![0.5, -1.0]);
        let err = h.project(&[1.0]).unwrap_err();
        assert!(err.to_string().contains("fusion dimension mismatch"));
    }

    #[test]
    fn blockwise_matches_concat_and_nulling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut h = FusionHead::init(vec![3, 2], 4, &mut rng).unwrap();
        h.bias = vec![0.1, -0.2, 0.3, 0.0];
        let a = [1.0, -2.0, 0.5];
        let b = [0.25, 4.0];
        let fused = fuse_concat(&[&a, &b]).unwrap();
        let x = h.project(&fused).unwrap();
        let y = h.project_blockwise(&[&a, &b]).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
        h.null_block(1);
        let y1 = h.project_blockwise(&[&a, &b]).unwrap();
        let y2 = h.project_blockwise(&[&a, &[-7.0, 9.0]]).unwrap();
        assert_eq!(y1, y2);
        assert!(h.project_blockwise(&[&a]).is_err());
        assert!(h.project_blockwise(&[&b, &a]).is_err());
    }

    #[test]
    fn single_block_equals_project() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = FusionHead::init(vec![3], 2, &mut rng).unwrap();
        let v = [0.3, 0.2, -0.9];
        assert_eq!(h.project(&v).unwrap(), h.project_blockwise(&[&v]).unwrap());
    }

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = FusionHead::init(vec![16, 9], 8, &mut rng).unwrap();
        assert!(h.weight.iter().all(|w| w.abs() <= 0.2));
        assert!(h.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut h = FusionHead::init(vec![2, 2], 3, &mut rng).unwrap();
        h.bias = vec![1.0, 2.0, 3.0];
        let u = [0.5, -1.0, 2.0, 0.1];
        let v = [1.5, 0.2, -0.3, 0.7];
        let (alpha, beta) = (0.7, -1.3);
        let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = h.project(&mix).unwrap();
        let pu = h.project(&u).unwrap();
        let pv = h.project(&v).unwrap();
        for r in 0..3 {
            let rhs = alpha * (pu[r] - h.bias[r]) + beta * (pv[r] - h.bias[r]) + h.bias[r];
            assert!((lhs[r] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradient_is_outer_product_and_matches_fd() {
        // scalar loss = c . (W v + b)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = FusionHead::init(vec![2, 3], 2, &mut rng).unwrap();
        let a = [0.4, -1.1];
        let b = [2.0, 0.3, -0.6];
        let c = [0.9, -0.35];
        let loss = |h: &FusionHead| -> f64 {
            let y = h.project_blockwise(&[&a, &b]).unwrap();
            y.iter().zip(&c).map(|(p, q)| p * q).sum()
        };
        let mut dw = vec![0.0; h.weight.len()];
        let mut db = vec![0.0; 2];
        h.accumulate_grad(&[&a, &b], &c, &mut dw, &mut db);
        let eps = 1e-6;
        for i in 0..h.weight.len() {
            let mut hp = h.clone();
            hp.weight[i] += eps;
            let mut hm = h.clone();
            hm.weight[i] -= eps;
            let fd = (loss(&hp) - loss(&hm)) / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-8);
        }
        // block 0 gradient rows are c_r * a
        assert_eq!(&dw[0..2], &[c[0] * a[0], c[0] * a[1]]);
        assert_eq!(db, c.to_vec());
    }
}
