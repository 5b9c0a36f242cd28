//! Periodic patch extraction `P: R^{n1×n2} → R^{K×M}` and its adjoint.
//!
//! Column `l·n1 + k` holds the `p × p` patch with top-left corner `(k, l)`,
//! vectorized column-major (row offset `a`, column offset `b` go to entry
//! `b·p + a`). Indices wrap around the image edges, so every pixel lies in
//! exactly `p²` patches and `P*P = p² I`.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub p: usize,
    pub n1: usize,
    pub n2: usize,
}

impl PatchConfig {
    pub fn new(p: usize, n1: usize, n2: usize) -> Result<Self> {
        if p == 0 || p > n1.min(n2) {
            return Err(Error::InvalidParameter(format!("patch size {p} must lie in 1..={}", n1.min(n2))));
        }
        Ok(Self { p, n1, n2 })
    }

    /// Atoms per patch, `K = p²`.
    pub fn k(&self) -> usize {
        self.p * self.p
    }

    /// Number of patches, `M = n1·n2`.
    pub fn m(&self) -> usize {
        self.n1 * self.n2
    }
}

/// Extracts all wrap-around patches of `img`, scaled by `scale`.
pub fn patch_extract_scaled(img: ArrayView2<f64>, cfg: &PatchConfig, scale: f64) -> DMatrix<f64> {
    let (n1, n2, p) = (cfg.n1, cfg.n2, cfg.p);
    assert_eq!(img.dim(), (n1, n2), "image does not match patch config");
    let mut out = DMatrix::zeros(cfg.k(), cfg.m());
    for l in 0..n2 {
        for k in 0..n1 {
            let mut col = out.column_mut(l * n1 + k);
            for b in 0..p {
                let j = (l + b) % n2;
                for a in 0..p {
                    col[b * p + a] = scale * img[[(k + a) % n1, j]];
                }
            }
        }
    }
    out
}

pub fn patch_extract(img: ArrayView2<f64>, cfg: &PatchConfig) -> DMatrix<f64> {
    patch_extract_scaled(img, cfg, 1.0)
}

/// `P* Y`, scaled by `scale`: every patch entry is added back to its pixel.
pub fn patch_adjoint_scaled(y: &DMatrix<f64>, cfg: &PatchConfig, scale: f64) -> Array2<f64> {
    let (n1, n2, p) = (cfg.n1, cfg.n2, cfg.p);
    assert_eq!(y.shape(), (cfg.k(), cfg.m()), "patch matrix does not match config");
    let mut out = Array2::zeros((n1, n2));
    for l in 0..n2 {
        for k in 0..n1 {
            let col = y.column(l * n1 + k);
            for b in 0..p {
                let j = (l + b) % n2;
                for a in 0..p {
                    out[[(k + a) % n1, j]] += scale * col[b * p + a];
                }
            }
        }
    }
    out
}

pub fn patch_adjoint(y: &DMatrix<f64>, cfg: &PatchConfig) -> Array2<f64> {
    patch_adjoint_scaled(y, cfg, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn p1_is_a_permutation() {
        let img = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let cfg = PatchConfig::new(1, 3, 4).unwrap();
        let y = patch_extract(img.view(), &cfg);
        let mut entries: Vec<f64> = y.iter().copied().collect();
        entries.sort_by(f64::total_cmp);
        assert_eq!(entries, (0..12).map(|v| v as f64).collect::<Vec<_>>());
        assert_eq!(y[(0, 1)], img[[1, 0]]);
    }

    #[test]
    fn constant_image() {
        let img = Array2::from_elem((5, 5), 3.5);
        let y = patch_extract(img.view(), &PatchConfig::new(3, 5, 5).unwrap());
        assert!(y.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn ramp_matches_index_oracle() {
        let img = Array2::from_shape_fn((4, 4), |(i, j)| (10 * i + j) as f64);
        let cfg = PatchConfig::new(2, 4, 4).unwrap();
        let y = patch_extract(img.view(), &cfg);
        for l in 0..4 {
            for k in 0..4 {
                let col = l * 4 + k;
                assert_eq!(y[(0, col)], img[[k, l]]);
                assert_eq!(y[(1, col)], img[[(k + 1) % 4, l]]);
                assert_eq!(y[(2, col)], img[[k, (l + 1) % 4]]);
                assert_eq!(y[(3, col)], img[[(k + 1) % 4, (l + 1) % 4]]);
            }
        }
    }

    #[test]
    fn adjoint_identity_and_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = PatchConfig::new(2, 6, 6).unwrap();
        let x = Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(4, 36, |_, _| rng.random_range(-1.0..1.0));
        let lhs = patch_extract(x.view(), &cfg).dot(&y);
        let rhs: f64 = (&x * &patch_adjoint(&y, &cfg)).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));

        let back = patch_adjoint(&patch_extract(x.view(), &cfg), &cfg);
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
        assert!(patch_adjoint(&DMatrix::zeros(4, 36), &cfg).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_oversized_patches() {
        assert!(PatchConfig::new(5, 4, 8).is_err());
        assert!(PatchConfig::new(0, 4, 8).is_err());
    }
}
