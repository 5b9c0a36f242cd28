//! Discrete forward operator `F_d = A ∘ Π_d` and the linear operators used by
//! the reconstruction: masked Fourier sampling, patch extraction and finite
//! differences.
//!
//! Parameter images are stored channel-first as `(3, n1, n2)` arrays with
//! channels `(ρ, T1, T2)`; image stacks and k-space data as `(L, n1, n2)`.

mod diff;
mod fourier;
mod patches;

pub use diff::{div_h, grad_h, grad_normal, grad_normal_diag, laplace_h};
pub use fourier::{apply_a, apply_a_adjoint, Fft2, KSpaceData, LineAxis, SamplingMaskSet};
pub use patches::{patch_adjoint, patch_adjoint_scaled, patch_extract, patch_extract_scaled, PatchConfig};

use ndarray::{Array3, ArrayView2, ArrayViewMut2, Axis};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::bloch::{self, PulseSequence, TissueParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Rho,
    T1,
    T2,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Rho, Channel::T1, Channel::T2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Rho => "rho",
            Channel::T1 => "t1",
            Channel::T2 => "t2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown channel `{s}`")))
    }
}

/// Three-channel parameter map `u = (ρ, T1, T2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterImage {
    data: Array3<f64>,
}

impl ParameterImage {
    pub fn zeros(n1: usize, n2: usize) -> Self {
        Self { data: Array3::zeros((3, n1, n2)) }
    }

    pub fn constant(n1: usize, n2: usize, value: [f64; 3]) -> Self {
        Self { data: Array3::from_shape_fn((3, n1, n2), |(c, _, _)| value[c]) }
    }

    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        let (c, n1, n2) = data.dim();
        if c != 3 || n1 == 0 || n2 == 0 {
            return Err(Error::Shape(format!("parameter image must be (3, n1, n2), got {:?}", data.dim())));
        }
        Ok(Self { data: data.as_standard_layout().into_owned() })
    }

    pub fn from_fn(n1: usize, n2: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::zeros(n1, n2);
        for i in 0..n1 {
            for j in 0..n2 {
                img.set_pixel(i, j, f(i, j));
            }
        }
        img
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, n1, n2) = self.data.dim();
        (n1, n2)
    }

    pub fn num_pixels(&self) -> usize {
        let (n1, n2) = self.dims();
        n1 * n2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    pub fn channel(&self, c: Channel) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), c.index())
    }

    pub fn channel_mut(&mut self, c: Channel) -> ArrayViewMut2<'_, f64> {
        self.data.index_axis_mut(Axis(0), c.index())
    }

    /// Contiguous storage of one channel, row-major over `(n1, n2)`.
    pub fn channel_slice(&self, c: Channel) -> &[f64] {
        let n = self.num_pixels();
        &self.data.as_slice().expect("standard layout")[c.index() * n..(c.index() + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.data.as_slice_mut().expect("standard layout")
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        [self.data[[0, i, j]], self.data[[1, i, j]], self.data[[2, i, j]]]
    }

    pub fn set_pixel(&mut self, i: usize, j: usize, v: [f64; 3]) {
        for (c, x) in v.into_iter().enumerate() {
            self.data[[c, i, j]] = x;
        }
    }

    /// Pixel by flat row-major index.
    pub fn pixel_flat(&self, p: usize) -> [f64; 3] {
        let n = self.num_pixels();
        let s = self.as_slice();
        [s[p], s[n + p], s[2 * n + p]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParameterImage) -> f64 {
        self.as_slice().iter().zip(other.as_slice()).map(|(a, b)| a * b).sum()
    }

    pub fn sub(&self, other: &ParameterImage) -> ParameterImage {
        ParameterImage { data: &self.data - &other.data }
    }

    pub fn add(&self, other: &ParameterImage) -> ParameterImage {
        ParameterImage { data: &self.data + &other.data }
    }

    /// `self += a · x`.
    pub fn axpy(&mut self, a: f64, x: &ParameterImage) {
        self.data.scaled_add(a, &x.data);
    }

    pub fn scale(&mut self, a: f64) {
        self.data.mapv_inplace(|v| v * a);
    }
}

/// Channel-wise box `U_ad = {lower ≤ u ≤ upper}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdmissibleBox {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl Default for AdmissibleBox {
    fn default() -> Self {
        Self { lower: [0.0; 3], upper: [110.0, 300.0, 300.0] }
    }
}

impl AdmissibleBox {
    pub fn new(lower: [f64; 3], upper: [f64; 3]) -> Result<Self> {
        if (0..3).any(|c| !(lower[c] <= upper[c]) || !lower[c].is_finite() || !upper[c].is_finite()) {
            return Err(Error::InvalidParameter(format!("invalid box {lower:?} .. {upper:?}")));
        }
        Ok(Self { lower, upper })
    }

    pub fn project(&self, u: &mut ParameterImage) {
        for c in 0..3 {
            let (lo, hi) = (self.lower[c], self.upper[c]);
            u.data.index_axis_mut(Axis(0), c).mapv_inplace(|v| v.clamp(lo, hi));
        }
    }

    pub fn contains(&self, u: &ParameterImage, slack: f64) -> bool {
        (0..3).all(|c| {
            let (lo, hi) = (self.lower[c] - slack, self.upper[c] + slack);
            u.data.index_axis(Axis(0), c).iter().all(|&v| v >= lo && v <= hi)
        })
    }

    pub fn midpoint(&self, n1: usize, n2: usize) -> ParameterImage {
        ParameterImage::constant(n1, n2, std::array::from_fn(|c| 0.5 * (self.lower[c] + self.upper[c])))
    }
}

/// Pointwise signal map `π: R³ → C^L` with its Jacobian.
pub trait SignalModel: Sync {
    fn len(&self) -> usize;

    fn signal_into(&self, u: [f64; 3], out: &mut [Complex64]);

    /// Writes `π(u)` and the rows `(∂_ρ, ∂_T1, ∂_T2) π(u)_l`.
    fn signal_and_jacobian_into(&self, u: [f64; 3], sig: &mut [Complex64], jac: &mut [[Complex64; 3]]);
}

impl SignalModel for PulseSequence {
    fn len(&self) -> usize {
        PulseSequence::len(self)
    }

    fn signal_into(&self, u: [f64; 3], out: &mut [Complex64]) {
        let traj = bloch::simulate_magnetization(u[1], u[2], self);
        for (z, m) in out.iter_mut().zip(&traj.m) {
            *z = Complex64::new(u[0] * m[0], u[0] * m[1]);
        }
    }

    fn signal_and_jacobian_into(&self, u: [f64; 3], sig: &mut [Complex64], jac: &mut [[Complex64; 3]]) {
        bloch::signal_and_jacobian_into(TissueParams::from_array(u), self, sig, jac);
    }
}

/// Linear stand-in `π(u) = u` (L = 3), useful for testing the solver on a
/// problem whose Gauss–Newton step is exact.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentitySignal;

impl SignalModel for IdentitySignal {
    fn len(&self) -> usize {
        3
    }

    fn signal_into(&self, u: [f64; 3], out: &mut [Complex64]) {
        for c in 0..3 {
            out[c] = Complex64::new(u[c], 0.0);
        }
    }

    fn signal_and_jacobian_into(&self, u: [f64; 3], sig: &mut [Complex64], jac: &mut [[Complex64; 3]]) {
        self.signal_into(u, sig);
        for (l, row) in jac.iter_mut().enumerate() {
            *row = [Complex64::default(); 3];
            row[l] = Complex64::new(1.0, 0.0);
        }
    }
}

/// Scatters pixel-major rows `(pixel, l)` into an `(L, n1, n2)` stack.
fn pixel_major_to_stack(buf: &[Complex64], len: usize, n1: usize, n2: usize) -> Array3<Complex64> {
    Array3::from_shape_fn((len, n1, n2), |(l, i, j)| buf[(i * n2 + j) * len + l])
}

/// `Π_d(u)`: the signal of every pixel, as an `(L, n1, n2)` stack.
pub fn bloch_image<S: SignalModel + ?Sized>(u: &ParameterImage, model: &S) -> Array3<Complex64> {
    let (n1, n2) = u.dims();
    let len = model.len();
    let mut buf = vec![Complex64::default(); n1 * n2 * len];
    buf.par_chunks_mut(len).enumerate().for_each(|(p, out)| {
        model.signal_into(u.pixel_flat(p), out);
    });
    pixel_major_to_stack(&buf, len, n1, n2)
}

/// `F_d(u) = A Π_d(u)`.
pub fn forward<S: SignalModel + ?Sized>(u: &ParameterImage, model: &S, masks: &SamplingMaskSet) -> Result<KSpaceData> {
    apply_a(&bloch_image(u, model), masks)
}

/// `Π_d(u)` together with the per-pixel Jacobians `π'(u_ij)` and Gram blocks
/// `Re(π'* π')`, evaluated once per linearization point.
#[derive(Clone, Debug)]
pub struct Linearization {
    n1: usize,
    n2: usize,
    len: usize,
    signal: Array3<Complex64>,
    jac: Vec<[Complex64; 3]>,
    gram: Vec<[[f64; 3]; 3]>,
}

impl Linearization {
    pub fn new<S: SignalModel + ?Sized>(u: &ParameterImage, model: &S) -> Self {
        let (n1, n2) = u.dims();
        let len = model.len();
        let npix = n1 * n2;
        let mut sig = vec![Complex64::default(); npix * len];
        let mut jac = vec![[Complex64::default(); 3]; npix * len];
        sig.par_chunks_mut(len)
            .zip(jac.par_chunks_mut(len))
            .enumerate()
            .for_each(|(p, (s, j))| model.signal_and_jacobian_into(u.pixel_flat(p), s, j));
        let gram = jac
            .par_chunks(len)
            .map(|rows| {
                let mut g = [[0.0; 3]; 3];
                for row in rows {
                    for a in 0..3 {
                        for b in 0..3 {
                            g[a][b] += (row[a].conj() * row[b]).re;
                        }
                    }
                }
                g
            })
            .collect();
        Self { n1, n2, len, signal: pixel_major_to_stack(&sig, len, n1, n2), jac, gram }
    }

    pub fn signal(&self) -> &Array3<Complex64> {
        &self.signal
    }

    /// `Re(π'(u_p)* π'(u_p))` for flat pixel index `p`.
    pub fn gram(&self, p: usize) -> &[[f64; 3]; 3] {
        &self.gram[p]
    }

    pub fn jacobian_rows(&self, p: usize) -> &[[Complex64; 3]] {
        &self.jac[p * self.len..(p + 1) * self.len]
    }

    fn check(&self, h: &ParameterImage) -> Result<()> {
        if h.dims() != (self.n1, self.n2) {
            return Err(Error::Shape(format!("direction {:?} vs linearization {:?}", h.dims(), (self.n1, self.n2))));
        }
        Ok(())
    }

    /// `Π_d'(u) h` as an `(L, n1, n2)` stack.
    pub fn pi_jvp(&self, h: &ParameterImage) -> Result<Array3<Complex64>> {
        self.check(h)?;
        let len = self.len;
        let mut buf = vec![Complex64::default(); self.n1 * self.n2 * len];
        buf.par_chunks_mut(len).enumerate().for_each(|(p, out)| {
            let hp = h.pixel_flat(p);
            for (z, row) in out.iter_mut().zip(self.jacobian_rows(p)) {
                *z = row[0] * hp[0] + row[1] * hp[1] + row[2] * hp[2];
            }
        });
        Ok(pixel_major_to_stack(&buf, len, self.n1, self.n2))
    }

    /// `F_d'(u) h = A Π_d'(u) h`.
    pub fn jvp(&self, h: &ParameterImage, masks: &SamplingMaskSet) -> Result<KSpaceData> {
        apply_a(&self.pi_jvp(h)?, masks)
    }

    /// `Re(Π_d'(u)* y)` for an image-domain stack `y`.
    pub fn pi_vjp(&self, y: &Array3<Complex64>) -> Result<ParameterImage> {
        if y.dim() != (self.len, self.n1, self.n2) {
            return Err(Error::Shape(format!(
                "stack {:?} vs linearization {:?}",
                y.dim(),
                (self.len, self.n1, self.n2)
            )));
        }
        let npix = self.n1 * self.n2;
        let y = y.as_standard_layout();
        let ys = y.as_slice().expect("standard layout");
        let vals: Vec<[f64; 3]> = (0..npix)
            .into_par_iter()
            .map(|p| {
                let mut acc = [0.0; 3];
                for (l, row) in self.jacobian_rows(p).iter().enumerate() {
                    let z = ys[l * npix + p];
                    for c in 0..3 {
                        acc[c] += (row[c].conj() * z).re;
                    }
                }
                acc
            })
            .collect();
        let mut out = ParameterImage::zeros(self.n1, self.n2);
        let s = out.as_slice_mut();
        for (p, v) in vals.iter().enumerate() {
            for c in 0..3 {
                s[c * npix + p] = v[c];
            }
        }
        Ok(out)
    }

    /// `F_d'(u)* w = Re(Π_d'(u)* A* w)`.
    pub fn vjp(&self, w: &KSpaceData) -> Result<ParameterImage> {
        self.pi_vjp(&apply_a_adjoint(w)?)
    }

    /// Hessian surrogate `(1/r) Re(π'* π')` applied pixel by pixel.
    pub fn approx_normal_apply(&self, h: &ParameterImage, r: f64) -> Result<ParameterImage> {
        if !(r >= 1.0) {
            return Err(Error::InvalidParameter(format!("undersampling factor {r} must be at least 1")));
        }
        self.check(h)?;
        let npix = self.n1 * self.n2;
        let mut out = ParameterImage::zeros(self.n1, self.n2);
        let hs = h.as_slice();
        let s = out.as_slice_mut();
        for p in 0..npix {
            let g = &self.gram[p];
            for a in 0..3 {
                s[a * npix + p] = (g[a][0] * hs[p] + g[a][1] * hs[npix + p] + g[a][2] * hs[2 * npix + p]) / r;
            }
        }
        Ok(out)
    }
}

pub fn forward_jvp<S: SignalModel + ?Sized>(
    u: &ParameterImage,
    h: &ParameterImage,
    model: &S,
    masks: &SamplingMaskSet,
) -> Result<KSpaceData> {
    Linearization::new(u, model).jvp(h, masks)
}

pub fn forward_vjp<S: SignalModel + ?Sized>(u: &ParameterImage, w: &KSpaceData, model: &S) -> Result<ParameterImage> {
    let (n1, n2) = u.dims();
    if w.data.dim() != (model.len(), n1, n2) {
        return Err(Error::Shape(format!("data {:?} vs image {:?} with L = {}", w.data.dim(), (n1, n2), model.len())));
    }
    Linearization::new(u, model).vjp(w)
}

pub fn approx_normal_apply<S: SignalModel + ?Sized>(
    u: &ParameterImage,
    h: &ParameterImage,
    model: &S,
    r: f64,
) -> Result<ParameterImage> {
    if !(r >= 1.0) {
        return Err(Error::InvalidParameter(format!("undersampling factor {r} must be at least 1")));
    }
    Linearization::new(u, model).approx_normal_apply(h, r)
}
