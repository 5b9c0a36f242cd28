//! Cartesian sampling masks and the masked, orthonormal per-slice 2D DFT.

use std::sync::Arc;

use ndarray::Array3;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Which spectrum index a Cartesian line runs along.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LineAxis {
    /// Lines are rows of the spectrum: row `i` is either fully sampled or not.
    #[default]
    Rows,
    Columns,
}

impl LineAxis {
    pub fn name(self) -> &'static str {
        match self {
            LineAxis::Rows => "rows",
            LineAxis::Columns => "columns",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rows" => Ok(LineAxis::Rows),
            "columns" => Ok(LineAxis::Columns),
            _ => Err(Error::Config(format!("unknown line axis `{s}`"))),
        }
    }
}

/// One binary mask per time step, stored as an `(L, n1, n2)` array.
///
/// Frequencies use natural (unshifted) DFT ordering: index 0 is DC.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMaskSet {
    masks: Array3<bool>,
    r: usize,
    offset: usize,
    axis: LineAxis,
}

impl SamplingMaskSet {
    /// Equidistant line masks. With `s = (offset + t) mod r`, time step `t`
    /// samples the `⌈n/r⌉` lines `s, s + r, s + 2r, …` taken modulo the number
    /// of lines `n`, so each mask is the previous one shifted by one line and
    /// the pattern repeats with period `r`.
    pub fn cartesian(n1: usize, n2: usize, len: usize, r: usize, offset: usize, axis: LineAxis) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidParameter("undersampling factor must be at least 1".into()));
        }
        if n1 == 0 || n2 == 0 || len == 0 {
            return Err(Error::InvalidParameter("mask dimensions must be positive".into()));
        }
        let offset = offset % r;
        let n = match axis {
            LineAxis::Rows => n1,
            LineAxis::Columns => n2,
        } as i64;
        let masks = Array3::from_shape_fn((len, n1, n2), |(t, i, j)| {
            let line = match axis {
                LineAxis::Rows => i,
                LineAxis::Columns => j,
            } as i64;
            let s = ((offset + t) % r) as i64;
            ((line - s).rem_euclid(n) as usize).is_multiple_of(r)
        });
        Ok(Self { masks, r, offset, axis })
    }

    pub fn full(n1: usize, n2: usize, len: usize) -> Self {
        Self::cartesian(n1, n2, len, 1, 0, LineAxis::Rows).expect("valid full mask")
    }

    /// Arbitrary masks; `r` is recorded as metadata for the Hessian surrogate.
    pub fn from_array(masks: Array3<bool>, r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidParameter("undersampling factor must be at least 1".into()));
        }
        Ok(Self { masks, r, offset: 0, axis: LineAxis::Rows })
    }

    /// Arbitrary masks together with the metadata of a Cartesian pattern.
    pub fn from_parts(masks: Array3<bool>, r: usize, offset: usize, axis: LineAxis) -> Result<Self> {
        let mut m = Self::from_array(masks, r)?;
        m.offset = offset;
        m.axis = axis;
        Ok(m)
    }

    pub fn masks(&self) -> &Array3<bool> {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, n1, n2) = self.masks.dim();
        (n1, n2)
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn axis(&self) -> LineAxis {
        self.axis
    }

    pub fn sampled_count(&self, t: usize) -> usize {
        self.masks.index_axis(ndarray::Axis(0), t).iter().filter(|&&b| b).count()
    }

    pub fn total_sampled(&self) -> usize {
        self.masks.iter().filter(|&&b| b).count()
    }
}

/// Frequency data on an `(L, n1, n2)` grid, zero outside the masks.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    pub data: Array3<Complex64>,
    pub masks: SamplingMaskSet,
}

impl KSpaceData {
    pub fn new(data: Array3<Complex64>, masks: SamplingMaskSet) -> Result<Self> {
        if data.dim() != masks.masks().dim() {
            return Err(Error::Shape(format!("k-space data {:?} vs masks {:?}", data.dim(), masks.masks().dim())));
        }
        Ok(Self { data, masks })
    }

    pub fn zeros(masks: SamplingMaskSet) -> Self {
        Self { data: Array3::zeros(masks.masks().dim()), masks }
    }

    /// Real inner product `Re Σ conj(a) b`.
    pub fn dot(&self, other: &KSpaceData) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a.conj() * b).re).sum()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Zeroes every entry outside the masks.
    pub fn apply_mask(&mut self) {
        for (z, &m) in self.data.iter_mut().zip(self.masks.masks().iter()) {
            if !m {
                *z = Complex64::default();
            }
        }
    }
}

/// Planned orthonormal 2D DFT on `n1 × n2` row-major slices.
#[derive(Clone)]
pub struct Fft2 {
    n1: usize,
    n2: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(n1: usize, n2: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n1,
            n2,
            row_fwd: planner.plan_fft_forward(n2),
            col_fwd: planner.plan_fft_forward(n1),
            row_inv: planner.plan_fft_inverse(n2),
            col_inv: planner.plan_fft_inverse(n1),
        }
    }

    pub fn forward(&self, slice: &mut [Complex64]) {
        self.run(slice, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, slice: &mut [Complex64]) {
        self.run(slice, &self.row_inv, &self.col_inv);
    }

    fn run(&self, slice: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        let (n1, n2) = (self.n1, self.n2);
        debug_assert_eq!(slice.len(), n1 * n2);
        rows.process(slice);
        let mut col = vec![Complex64::default(); n1];
        for j in 0..n2 {
            for i in 0..n1 {
                col[i] = slice[i * n2 + j];
            }
            cols.process(&mut col);
            for i in 0..n1 {
                slice[i * n2 + j] = col[i];
            }
        }
        let scale = 1.0 / ((n1 * n2) as f64).sqrt();
        slice.iter_mut().for_each(|z| *z *= scale);
    }
}

fn check_dims(dim: (usize, usize, usize), masks: &SamplingMaskSet) -> Result<()> {
    if dim != masks.masks().dim() {
        return Err(Error::Shape(format!("image stack {dim:?} vs masks {:?}", masks.masks().dim())));
    }
    Ok(())
}

/// `A y`: per-slice orthonormal DFT followed by the slice's mask.
pub fn apply_a(y: &Array3<Complex64>, masks: &SamplingMaskSet) -> Result<KSpaceData> {
    check_dims(y.dim(), masks)?;
    let (_, n1, n2) = y.dim();
    let fft = Fft2::new(n1, n2);
    let mut data = y.as_standard_layout().into_owned();
    let slices = data.as_slice_mut().expect("standard layout");
    let mask = masks.masks().as_standard_layout();
    let mask = mask.as_slice().expect("standard layout");
    slices.par_chunks_mut(n1 * n2).zip(mask.par_chunks(n1 * n2)).for_each(|(s, m)| {
        fft.forward(s);
        for (z, &keep) in s.iter_mut().zip(m) {
            if !keep {
                *z = Complex64::default();
            }
        }
    });
    Ok(KSpaceData { data, masks: masks.clone() })
}

/// `A* f`: mask, then per-slice inverse orthonormal DFT.
pub fn apply_a_adjoint(f: &KSpaceData) -> Result<Array3<Complex64>> {
    check_dims(f.data.dim(), &f.masks)?;
    let (_, n1, n2) = f.data.dim();
    let fft = Fft2::new(n1, n2);
    let mut data = f.data.as_standard_layout().into_owned();
    let mask = f.masks.masks().as_standard_layout();
    let mask = mask.as_slice().expect("standard layout");
    data.as_slice_mut().expect("standard layout").par_chunks_mut(n1 * n2).zip(mask.par_chunks(n1 * n2)).for_each(
        |(s, m)| {
            for (z, &keep) in s.iter_mut().zip(m) {
                if !keep {
                    *z = Complex64::default();
                }
            }
            fft.inverse(s);
        },
    );
    Ok(data)
}
