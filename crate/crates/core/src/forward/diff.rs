//! Forward-difference gradient with zero (Dirichlet) padding, its negative
//! adjoint `div_h` and the Laplacian `laplace_h = div_h ∘ grad_h`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// `(∂₁x, ∂₂x)` stacked as a `(2, n1, n2)` array; values past the last index are 0.
pub fn grad_h(img: ArrayView2<f64>, h: f64) -> Array3<f64> {
    let (n1, n2) = img.dim();
    let mut g = Array3::zeros((2, n1, n2));
    for i in 0..n1 {
        for j in 0..n2 {
            let x = img[[i, j]];
            let down = if i + 1 < n1 { img[[i + 1, j]] } else { 0.0 };
            let right = if j + 1 < n2 { img[[i, j + 1]] } else { 0.0 };
            g[[0, i, j]] = (down - x) / h;
            g[[1, i, j]] = (right - x) / h;
        }
    }
    g
}

/// `div_h = -grad_hᵀ`.
pub fn div_h(v: ArrayView3<f64>, h: f64) -> Array2<f64> {
    let (_, n1, n2) = v.dim();
    let mut out = Array2::zeros((n1, n2));
    for i in 0..n1 {
        for j in 0..n2 {
            let up = if i > 0 { v[[0, i - 1, j]] } else { 0.0 };
            let left = if j > 0 { v[[1, i, j - 1]] } else { 0.0 };
            out[[i, j]] = (v[[0, i, j]] - up + v[[1, i, j]] - left) / h;
        }
    }
    out
}

pub fn laplace_h(img: ArrayView2<f64>, h: f64) -> Array2<f64> {
    div_h(grad_h(img, h).view(), h)
}

/// `grad_hᵀ grad_h x`, evaluated directly as a 5-point stencil.
pub fn grad_normal(img: ArrayView2<f64>, h: f64) -> Array2<f64> {
    let (n1, n2) = img.dim();
    let inv = 1.0 / (h * h);
    Array2::from_shape_fn((n1, n2), |(i, j)| {
        let x = img[[i, j]];
        // vertical: difference at i (with i+1 or the zero pad) and at i-1
        let mut acc = x - if i + 1 < n1 { img[[i + 1, j]] } else { 0.0 };
        if i > 0 {
            acc += x - img[[i - 1, j]];
        }
        acc += x - if j + 1 < n2 { img[[i, j + 1]] } else { 0.0 };
        if j > 0 {
            acc += x - img[[i, j - 1]];
        }
        acc * inv
    })
}

/// Diagonal of `grad_hᵀ grad_h` at pixel `(i, j)`.
pub fn grad_normal_diag(i: usize, j: usize, h: f64) -> f64 {
    (2.0 + (i > 0) as u8 as f64 + (j > 0) as u8 as f64) / (h * h)
}
