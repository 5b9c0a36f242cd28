//! Piecewise-constant head-like phantom.
//!
//! Seven regions, painted back to front: a low-density surround, a scalp ring,
//! a cortical ring, the white-matter core, two ventricles and one lesion.
//! Geometry and tissue values are jittered by the seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forward::ParameterImage;

/// Upper end of the relaxation-time scale used by the phantom, in ms.
pub const T_MAX: f64 = 250.0;

/// Upper end of the proton-density scale.
pub const RHO_MAX: f64 = 110.0;

/// An ellipse in pixel coordinates filled with one tissue value.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    pub name: &'static str,
    /// Center `(row, col)`.
    pub center: (f64, f64),
    /// Semi-axes `(row, col)` before rotation.
    pub axes: (f64, f64),
    /// Rotation in radians.
    pub angle: f64,
    /// `(ρ, T1, T2)`.
    pub value: [f64; 3],
}

impl Ellipse {
    pub fn contains(&self, i: f64, j: f64) -> bool {
        let (di, dj) = (i - self.center.0, j - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let a = c * di + s * dj;
        let b = -s * di + c * dj;
        (a / self.axes.0).powi(2) + (b / self.axes.1).powi(2) <= 1.0
    }
}

/// Shapes that generated a phantom; label 0 is the background.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomDescriptor {
    pub background: [f64; 3],
    pub shapes: Vec<Ellipse>,
}

impl PhantomDescriptor {
    /// Number of connected regions the shapes produce, background included.
    pub fn region_count(&self) -> usize {
        self.shapes.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub truth: ParameterImage,
    /// Region label per pixel: 0 for the background, `s + 1` for shape `s`.
    pub labels: Array2<u8>,
    pub descriptor: PhantomDescriptor,
    pub seed: u64,
}

/// (name, center, semi-axes as fractions of the image size, value)
const LAYOUT: [(&str, (f64, f64), (f64, f64), [f64; 3]); 6] = [
    ("scalp", (0.5, 0.5), (0.46, 0.39), [70.0, 90.0, 60.0]),
    ("cortex", (0.5, 0.5), (0.37, 0.30), [85.0, 160.0, 110.0]),
    ("white", (0.5, 0.5), (0.26, 0.20), [65.0, 110.0, 75.0]),
    ("ventricle_l", (0.45, 0.43), (0.08, 0.035), [100.0, 240.0, 200.0]),
    ("ventricle_r", (0.45, 0.57), (0.08, 0.035), [100.0, 240.0, 200.0]),
    ("lesion", (0.65, 0.55), (0.045, 0.045), [75.0, 200.0, 150.0]),
];

const BACKGROUND: [f64; 3] = [10.0, 30.0, 15.0];

/// Deterministic phantom of size `n1 × n2`. The region structure is resolved
/// for sizes of about 32 pixels and up.
pub fn make_phantom(n1: usize, n2: usize, seed: u64) -> Result<Phantom> {
    if n1 < 8 || n2 < 8 {
        return Err(Error::InvalidParameter(format!("phantom needs at least 8×8 pixels, got {n1}×{n2}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (f1, f2) = (n1 as f64, n2 as f64);
    let jitter_value = |v: [f64; 3], rng: &mut ChaCha8Rng| -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let cap = if c == 0 { RHO_MAX } else { T_MAX };
            out[c] = (v[c] * (1.0 + rng.random_range(-0.05..0.05))).min(cap);
        }
        out
    };
    let background = jitter_value(BACKGROUND, &mut rng);
    let head_shift = (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
    let head_angle: f64 = rng.random_range(-0.08..0.08);
    let mut shapes = Vec::with_capacity(LAYOUT.len());
    for (idx, &(name, center, axes, value)) in LAYOUT.iter().enumerate() {
        let scale = 1.0 + rng.random_range(-0.03..0.03);
        // the three nested rings share the head's center and rotation
        let (shift, angle) = if idx < 3 {
            (head_shift, head_angle)
        } else {
            ((head_shift.0 + rng.random_range(-0.01..0.01), head_shift.1 + rng.random_range(-0.01..0.01)), head_angle)
        };
        let value = jitter_value(value, &mut rng);
        // rotate small structures together with the head about its center
        let (dc0, dc1) = (center.0 - 0.5, center.1 - 0.5);
        let (s, c) = head_angle.sin_cos();
        let rc = (0.5 + c * dc0 - s * dc1, 0.5 + s * dc0 + c * dc1);
        shapes.push(Ellipse {
            name,
            center: ((rc.0 + shift.0) * f1 - 0.5, (rc.1 + shift.1) * f2 - 0.5),
            axes: (axes.0 * scale * f1, axes.1 * scale * f2),
            angle,
            value,
        });
    }
    let mut labels = Array2::<u8>::zeros((n1, n2));
    for ((i, j), l) in labels.indexed_iter_mut() {
        for (s, e) in shapes.iter().enumerate() {
            if e.contains(i as f64, j as f64) {
                *l = s as u8 + 1;
            }
        }
    }
    let truth = ParameterImage::from_fn(n1, n2, |i, j| match labels[[i, j]] {
        0 => background,
        s => shapes[s as usize - 1].value,
    });
    Ok(Phantom { truth, labels, descriptor: PhantomDescriptor { background, shapes }, seed })
}

/// Number of 4-connected components of equal label.
pub fn connected_components(labels: &Array2<u8>) -> usize {
    let (n1, n2) = labels.dim();
    let mut seen = Array2::<bool>::default((n1, n2));
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..n1 * n2 {
        let (si, sj) = (start / n2, start % n2);
        if seen[[si, sj]] {
            continue;
        }
        count += 1;
        let label = labels[[si, sj]];
        seen[[si, sj]] = true;
        stack.push((si, sj));
        while let Some((i, j)) = stack.pop() {
            let mut visit = |a: usize, b: usize| {
                if !seen[[a, b]] && labels[[a, b]] == label {
                    seen[[a, b]] = true;
                    stack.push((a, b));
                }
            };
            if i > 0 {
                visit(i - 1, j);
            }
            if i + 1 < n1 {
                visit(i + 1, j);
            }
            if j > 0 {
                visit(i, j - 1);
            }
            if j + 1 < n2 {
                visit(i, j + 1);
            }
        }
    }
    count
}
