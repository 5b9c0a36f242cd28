//! Time-discrete Bloch dynamics for an inversion-recovery SSFP style sequence.
//!
//! The magnetization of a voxel evolves as
//!
//! ```text
//! m_{k+1} = E_k(T1, T2) R(α_k) m_k + b_k(T1),      m_0 = (0, 0, m0)
//! ```
//!
//! with the relaxation matrix `E_k = diag(e^{-TR_k/T2}, e^{-TR_k/T2}, e^{-TR_k/T1})`
//! and recovery offset `b_k = (1 - e^{-TR_k/T1}) (0, 0, m_eq)`. Relaxation times
//! are projected onto `[0, ∞)` before evaluation and `e^{-TR/0}` is taken as its
//! limit 0, which makes `E_k` and `b_k` smooth everywhere.
//!
//! Convention: `m_k` (k = 1..L) is the state after the k-th RF pulse *and* the
//! subsequent relaxation over `TR_k`. The measured signal of a voxel with
//! proton density ρ at time k is `ρ (m_k,x + i m_k,y)`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{fmt_f64, KeyValues};
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Per-voxel tissue parameters: relative proton density and relaxation times (ms).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TissueParams {
    pub rho: f64,
    pub t1: f64,
    pub t2: f64,
}

impl TissueParams {
    pub fn new(rho: f64, t1: f64, t2: f64) -> Self {
        Self { rho, t1, t2 }
    }

    pub fn to_array(self) -> Vec3 {
        [self.rho, self.t1, self.t2]
    }

    pub fn from_array(u: Vec3) -> Self {
        Self::new(u[0], u[1], u[2])
    }
}

/// Axis of the RF rotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RotationAxis {
    #[default]
    X,
    Y,
}

impl RotationAxis {
    fn name(self) -> &'static str {
        match self {
            RotationAxis::X => "x",
            RotationAxis::Y => "y",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(RotationAxis::X),
            "y" | "Y" => Ok(RotationAxis::Y),
            _ => Err(Error::Config(format!("unknown RF axis `{s}`"))),
        }
    }
}

/// Acquisition protocol: repetition times, flip angles and initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct PulseSequence {
    tr: Vec<f64>,
    flip_deg: Vec<f64>,
    m0: f64,
    m_eq: f64,
    seed: Option<u64>,
    axis: RotationAxis,
    rotations: Vec<Mat3>,
}

impl PulseSequence {
    /// Builds a sequence from repetition times (ms) and flip angles in degrees.
    pub fn from_degrees(tr: Vec<f64>, flip_deg: Vec<f64>, m0: f64, m_eq: f64) -> Result<Self> {
        if tr.is_empty() {
            return Err(Error::InvalidParameter("sequence length must be positive".into()));
        }
        if tr.len() != flip_deg.len() {
            return Err(Error::InvalidParameter(format!(
                "{} repetition times but {} flip angles",
                tr.len(),
                flip_deg.len()
            )));
        }
        if let Some(bad) = tr.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidParameter(format!("repetition time {bad} is not positive")));
        }
        if flip_deg.iter().any(|a| !a.is_finite()) || !m0.is_finite() || !m_eq.is_finite() {
            return Err(Error::InvalidParameter("non-finite sequence parameter".into()));
        }
        let mut seq = Self { tr, flip_deg, m0, m_eq, seed: None, axis: RotationAxis::X, rotations: Vec::new() };
        seq.rebuild_rotations();
        Ok(seq)
    }

    /// Builds a sequence from repetition times (ms) and flip angles in radians.
    pub fn new(tr: Vec<f64>, flip: Vec<f64>, m0: f64, m_eq: f64) -> Result<Self> {
        Self::from_degrees(tr, flip.into_iter().map(f64::to_degrees).collect(), m0, m_eq)
    }

    /// Pseudo-random fingerprinting schedule: an inversion pulse followed by
    /// flip angles drawn from [10°, 70°] and repetition times from [11, 16] ms.
    pub fn default_mrf(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidParameter("sequence length must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tr = Vec::with_capacity(len);
        let mut flip = Vec::with_capacity(len);
        for k in 0..len {
            flip.push(if k == 0 { 180.0 } else { rng.random_range(10.0..70.0) });
            tr.push(rng.random_range(11.0..16.0));
        }
        let mut seq = Self::from_degrees(tr, flip, 1.0, 1.0)?;
        seq.seed = Some(seed);
        Ok(seq)
    }

    pub fn with_axis(mut self, axis: RotationAxis) -> Self {
        self.axis = axis;
        self.rebuild_rotations();
        self
    }

    fn rebuild_rotations(&mut self) {
        self.rotations = self.flip_deg.iter().map(|a| rotation_about(self.axis, a.to_radians())).collect();
    }

    pub fn len(&self) -> usize {
        self.tr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tr.is_empty()
    }

    pub fn tr(&self) -> &[f64] {
        &self.tr
    }

    pub fn flip_deg(&self) -> &[f64] {
        &self.flip_deg
    }

    pub fn flip_rad(&self) -> Vec<f64> {
        self.flip_deg.iter().map(|a| a.to_radians()).collect()
    }

    pub fn m0(&self) -> f64 {
        self.m0
    }

    pub fn m_eq(&self) -> f64 {
        self.m_eq
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn axis(&self) -> RotationAxis {
        self.axis
    }

    /// Reads `seq.*` keys. Explicit `tr`/`flip_deg` lists take precedence;
    /// otherwise the default schedule is generated from `L` and `seed`.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let len: Option<usize> = kv.take("seq.L")?;
        let tr: Option<Vec<f64>> = kv.take_list("seq.tr")?;
        let flip: Option<Vec<f64>> = kv.take_list("seq.flip_deg")?;
        let m0: Option<f64> = kv.take("seq.m0")?;
        let m_eq: Option<f64> = kv.take("seq.m_eq")?;
        let seed: Option<u64> = kv.take("seq.seed")?;
        let axis = match kv.take_raw("seq.rf_axis") {
            Some(s) => RotationAxis::parse(&s)?,
            None => RotationAxis::X,
        };
        let mut seq = match (tr, flip) {
            (Some(tr), Some(flip)) => {
                if let Some(l) = len {
                    if l != tr.len() {
                        return Err(Error::Config(format!("seq.L = {l} but {} repetition times given", tr.len())));
                    }
                }
                let mut s = Self::from_degrees(tr, flip, 1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
                s.seed = seed;
                s
            }
            (None, None) => {
                let l = len.ok_or_else(|| Error::Config("seq.L is required".into()))?;
                Self::default_mrf(l, seed.unwrap_or(0)).map_err(|e| Error::Config(e.to_string()))?
            }
            _ => return Err(Error::Config("seq.tr and seq.flip_deg must be given together".into())),
        };
        if let Some(m0) = m0 {
            seq.m0 = m0;
        }
        if let Some(m_eq) = m_eq {
            seq.m_eq = m_eq;
        }
        Ok(seq.with_axis(axis))
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("seq.L", self.len().to_string());
        kv.set_list("seq.tr", &self.tr.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>());
        kv.set_list("seq.flip_deg", &self.flip_deg.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>());
        kv.set("seq.m0", fmt_f64(self.m0));
        kv.set("seq.m_eq", fmt_f64(self.m_eq));
        if let Some(seed) = self.seed {
            kv.set("seq.seed", seed.to_string());
        }
        kv.set("seq.rf_axis", self.axis.name());
    }
}

/// Stacked magnetization states `m_1 .. m_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnetizationTrajectory {
    pub m: Vec<Vec3>,
}

impl MagnetizationTrajectory {
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn max_norm(&self) -> f64 {
        self.m.iter().map(norm3).fold(0.0, f64::max)
    }
}

fn norm3(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `e^{-tr/t}` extended continuously by 0 at `t <= 0`.
#[inline]
fn decay(t: f64, tr: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        (-tr / t).exp()
    }
}

/// Derivative of [`decay`] with respect to `t`; its limit 0 at `t <= 0`.
#[inline]
fn decay_dt(t: f64, tr: f64) -> f64 {
    if t <= 0.0 || t.is_infinite() {
        0.0
    } else {
        tr / (t * t) * (-tr / t).exp()
    }
}

/// Relaxation matrix `diag(e^{-tr/t2}, e^{-tr/t2}, e^{-tr/t1})`.
pub fn relax_matrix(t1: f64, t2: f64, tr: f64) -> Mat3 {
    let e1 = decay(t1.max(0.0), tr);
    let e2 = decay(t2.max(0.0), tr);
    [[e2, 0.0, 0.0], [0.0, e2, 0.0], [0.0, 0.0, e1]]
}

/// Longitudinal recovery offset `(0, 0, 1 - e^{-tr/t1})` for unit equilibrium.
pub fn relax_offset(t1: f64, tr: f64) -> Vec3 {
    [0.0, 0.0, 1.0 - decay(t1.max(0.0), tr)]
}

/// RF rotation about the x-axis. Maps `(0, 0, 1)` to `(0, sin α, cos α)`.
pub fn rotation(alpha: f64) -> Mat3 {
    rotation_about(RotationAxis::X, alpha)
}

pub fn rotation_about(axis: RotationAxis, alpha: f64) -> Mat3 {
    let (s, c) = alpha.sin_cos();
    match axis {
        RotationAxis::X => [[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]],
        RotationAxis::Y => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
    }
}

#[inline]
fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Runs the discrete recursion and returns `m_1 .. m_L`.
pub fn simulate_magnetization(t1: f64, t2: f64, seq: &PulseSequence) -> MagnetizationTrajectory {
    let (t1, t2) = (t1.max(0.0), t2.max(0.0));
    let mut m = [0.0, 0.0, seq.m0];
    let mut out = Vec::with_capacity(seq.len());
    for (rot, &tr) in seq.rotations.iter().zip(&seq.tr) {
        let v = mat_vec(rot, &m);
        let e1 = decay(t1, tr);
        let e2 = decay(t2, tr);
        m = [e2 * v[0], e2 * v[1], e1 * v[2] + (1.0 - e1) * seq.m_eq];
        out.push(m);
    }
    MagnetizationTrajectory { m: out }
}

/// Magnetization together with its partial derivatives in T1 and T2.
#[derive(Clone, Debug)]
pub struct TrajectoryWithSensitivity {
    pub m: Vec<Vec3>,
    pub dm_dt1: Vec<Vec3>,
    pub dm_dt2: Vec<Vec3>,
}

/// Forward recursion carrying `(m_k, ∂m_k/∂T1, ∂m_k/∂T2)` jointly:
/// `m'_{k+1} = E'_k R m_k + E_k R m'_k + b'_k`.
pub fn simulate_with_sensitivity(t1: f64, t2: f64, seq: &PulseSequence) -> TrajectoryWithSensitivity {
    let (t1, t2) = (t1.max(0.0), t2.max(0.0));
    let l = seq.len();
    let mut out = TrajectoryWithSensitivity {
        m: Vec::with_capacity(l),
        dm_dt1: Vec::with_capacity(l),
        dm_dt2: Vec::with_capacity(l),
    };
    let mut m = [0.0, 0.0, seq.m0];
    let mut d1 = [0.0; 3];
    let mut d2 = [0.0; 3];
    for (rot, &tr) in seq.rotations.iter().zip(&seq.tr) {
        let e1 = decay(t1, tr);
        let e2 = decay(t2, tr);
        let de1 = decay_dt(t1, tr);
        let de2 = decay_dt(t2, tr);
        let v = mat_vec(rot, &m);
        let w1 = mat_vec(rot, &d1);
        let w2 = mat_vec(rot, &d2);
        m = [e2 * v[0], e2 * v[1], e1 * v[2] + (1.0 - e1) * seq.m_eq];
        d1 = [e2 * w1[0], e2 * w1[1], de1 * v[2] + e1 * w1[2] - de1 * seq.m_eq];
        d2 = [de2 * v[0] + e2 * w2[0], de2 * v[1] + e2 * w2[1], e1 * w2[2]];
        out.m.push(m);
        out.dm_dt1.push(d1);
        out.dm_dt2.push(d2);
    }
    out
}

/// Pointwise signal map `π(u)_k = ρ (m_k,x + i m_k,y)`.
pub fn signal(u: TissueParams, seq: &PulseSequence) -> Vec<Complex64> {
    simulate_magnetization(u.t1, u.t2, seq).m.iter().map(|m| Complex64::new(u.rho * m[0], u.rho * m[1])).collect()
}

/// Analytic Jacobian of [`signal`]: row k holds `(∂/∂ρ, ∂/∂T1, ∂/∂T2)` of `π(u)_k`.
pub fn signal_jacobian(u: TissueParams, seq: &PulseSequence) -> Vec<[Complex64; 3]> {
    let mut sig = vec![Complex64::default(); seq.len()];
    let mut jac = vec![[Complex64::default(); 3]; seq.len()];
    signal_and_jacobian_into(u, seq, &mut sig, &mut jac);
    jac
}

/// Signal and Jacobian in one recursion, written into caller-provided buffers.
pub fn signal_and_jacobian_into(
    u: TissueParams,
    seq: &PulseSequence,
    sig: &mut [Complex64],
    jac: &mut [[Complex64; 3]],
) {
    let traj = simulate_with_sensitivity(u.t1, u.t2, seq);
    for k in 0..seq.len() {
        let m = traj.m[k];
        let d1 = traj.dm_dt1[k];
        let d2 = traj.dm_dt2[k];
        let m12 = Complex64::new(m[0], m[1]);
        sig[k] = m12 * u.rho;
        jac[k] = [m12, Complex64::new(u.rho * d1[0], u.rho * d1[1]), Complex64::new(u.rho * d2[0], u.rho * d2[1])];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use std::f64::consts::PI;

    /// Taylor series of exp, summed until terms vanish; independent of `f64::exp`.
    fn exp_series(x: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 1..60 {
            term *= x / n as f64;
            sum += term;
        }
        sum
    }

    fn seq2() -> PulseSequence {
        PulseSequence::new(vec![10.0, 10.0], vec![PI / 2.0, PI / 2.0], 1.0, 1.0).unwrap()
    }

    #[test]
    fn relax_matrix_limits_and_values() {
        let e = relax_matrix(f64::INFINITY, 10.0, 5.0);
        assert_eq!(e[2][2], 1.0);
        assert_eq!(relax_matrix(0.0, 0.0, 10.0), [[0.0; 3]; 3]);
        let e = relax_matrix(250.0, 250.0, 12.5);
        let want = exp_series(-0.05);
        for i in 0..3 {
            assert!((e[i][i] - want).abs() < 1e-15);
        }
        assert!((want - 0.951229).abs() < 1e-6);
        // negative inputs project onto 0
        assert_eq!(relax_matrix(-3.0, -1.0, 10.0), relax_matrix(0.0, 0.0, 10.0));
    }

    #[test]
    fn relax_offset_values() {
        assert_eq!(relax_offset(0.0, 5.0), [0.0, 0.0, 1.0]);
        assert_eq!(relax_offset(f64::INFINITY, 5.0), [0.0, 0.0, 0.0]);
        let b = relax_offset(100.0, 10.0);
        assert!((b[2] - (1.0 - exp_series(-0.1))).abs() < 1e-15);
    }

    #[test]
    fn extension_is_continuous_at_zero() {
        for t in [1e-1, 1e-2, 1e-3, 1e-6] {
            let e = relax_matrix(t, t, 10.0);
            let b = relax_offset(t, 10.0);
            assert!(e[0][0] < 1e-40 && e[2][2] < 1e-40);
            assert!((b[2] - 1.0).abs() < 1e-40);
        }
    }

    #[test]
    fn rotation_cases() {
        let id = rotation(0.0);
        assert_eq!(id, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let r = rotation(PI);
        let want = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - want[i][j]).abs() < 1e-15);
            }
        }
        let v = mat_vec(&rotation(PI / 2.0), &[0.0, 0.0, 1.0]);
        let (s, c) = (PI / 2.0).sin_cos();
        assert!((v[0]).abs() < 1e-15 && (v[1] - s).abs() < 1e-15 && (v[2] - c).abs() < 1e-15);
        assert!((v[1] - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn rotation_is_orthogonal(alpha in -10.0f64..10.0, y in any::<bool>()) {
            let axis = if y { RotationAxis::Y } else { RotationAxis::X };
            let r = rotation_about(axis, alpha);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn no_excitation_relaxes_to_equilibrium() {
        let seq = PulseSequence::new(vec![50.0; 40], vec![0.0; 40], 1.0, 1.0).unwrap();
        let traj = simulate_magnetization(100.0, 50.0, &seq);
        for m in &traj.m {
            assert_eq!(m[0], 0.0);
            assert_eq!(m[1], 0.0);
            assert!((m[2] - 1.0).abs() < 1e-12);
        }
        let seq = PulseSequence::new(vec![50.0; 40], vec![0.0; 40], -1.0, 1.0).unwrap();
        let traj = simulate_magnetization(100.0, 50.0, &seq);
        let z: Vec<f64> = traj.m.iter().map(|m| m[2]).collect();
        assert!(z.windows(2).all(|w| w[1] > w[0]));
        assert!((z[39] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn instant_relaxation_sits_at_offset() {
        let seq = PulseSequence::default_mrf(12, 3).unwrap();
        let traj = simulate_magnetization(0.0, 0.0, &seq);
        for m in &traj.m {
            assert_eq!(*m, [0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn two_step_matches_hand_unrolled_recursion() {
        let traj = simulate_magnetization(100.0, 50.0, &seq2());
        let e1 = exp_series(-0.1);
        let e2 = exp_series(-0.2);
        let m1 = [0.0, e2, 1.0 - e1];
        let m2 = [0.0, e2 * (1.0 - e1), 1.0 - e1 - e1 * e2];
        for i in 0..3 {
            assert!((traj.m[0][i] - m1[i]).abs() < 1e-14, "m1[{i}]");
            assert!((traj.m[1][i] - m2[i]).abs() < 1e-14, "m2[{i}]");
        }
    }

    #[test]
    fn signal_scales_with_rho_and_vanishes_at_zero() {
        let seq = PulseSequence::default_mrf(20, 1).unwrap();
        assert!(signal(TissueParams::new(0.0, 80.0, 40.0), &seq).iter().all(|z| z.norm() == 0.0));
        let s1 = signal(TissueParams::new(1.0, 80.0, 40.0), &seq);
        let s2 = signal(TissueParams::new(2.0, 80.0, 40.0), &seq);
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(*b, *a * 2.0);
        }
    }

    #[test]
    fn signal_composes_trajectory_extraction() {
        let seq = PulseSequence::default_mrf(30, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let u = TissueParams::new(
                rng.random_range(0.0..110.0),
                rng.random_range(0.0..300.0),
                rng.random_range(0.0..300.0),
            );
            let traj = simulate_magnetization(u.t1, u.t2, &seq);
            let s = signal(u, &seq);
            for (z, m) in s.iter().zip(&traj.m) {
                assert_eq!(*z, Complex64::new(u.rho * m[0], u.rho * m[1]));
            }
        }
    }

    #[test]
    fn jacobian_at_zero_density() {
        let seq = PulseSequence::default_mrf(25, 2).unwrap();
        let u = TissueParams::new(0.0, 120.0, 70.0);
        let jac = signal_jacobian(u, &seq);
        let traj = simulate_magnetization(u.t1, u.t2, &seq);
        for (row, m) in jac.iter().zip(&traj.m) {
            assert_eq!(row[0], Complex64::new(m[0], m[1]));
            assert_eq!(row[1].norm(), 0.0);
            assert_eq!(row[2].norm(), 0.0);
        }
    }

    fn fd_column(u: TissueParams, seq: &PulseSequence, col: usize, h: f64, central: bool) -> Vec<Complex64> {
        let shift = |d: f64| {
            let mut a = u.to_array();
            a[col] += d;
            signal(TissueParams::from_array(a), seq)
        };
        let plus = shift(h);
        if central {
            let minus = shift(-h);
            plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * h)).collect()
        } else {
            let base = signal(u, seq);
            plus.iter().zip(&base).map(|(p, b)| (p - b) / h).collect()
        }
    }

    fn rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn jacobian_matches_central_differences_symmetric_case() {
        // symmetric sequence, t1 == t2
        let tr = vec![12.0, 14.0, 12.0, 14.0, 12.0, 14.0, 12.0];
        let flip: Vec<f64> =
            [180.0, 30.0, 50.0, 60.0, 50.0, 30.0, 180.0].iter().map(|d: &f64| d.to_radians()).collect();
        let seq = PulseSequence::new(tr, flip, 1.0, 1.0).unwrap();
        let u = TissueParams::new(60.0, 90.0, 90.0);
        let jac = signal_jacobian(u, &seq);
        for col in 0..3 {
            let analytic: Vec<Complex64> = jac.iter().map(|r| r[col]).collect();
            let fd = fd_column(u, &seq, col, 1e-4, true);
            assert!(rel_err(&analytic, &fd) < 1e-6, "column {col}");
        }
    }

    #[test]
    fn jacobian_one_sided_at_boundary() {
        let seq = PulseSequence::default_mrf(30, 4).unwrap();
        for u in [TissueParams::new(50.0, 0.0, 80.0), TissueParams::new(50.0, 80.0, 0.0)] {
            let jac = signal_jacobian(u, &seq);
            for col in 1..3 {
                let analytic: Vec<Complex64> = jac.iter().map(|r| r[col]).collect();
                let fd = fd_column(u, &seq, col, 1e-4, false);
                let err: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
                assert!(err < 1e-4, "column {col}: {err}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn jacobian_matches_finite_differences(
            rho in 1.0f64..110.0, t1 in 20.0f64..290.0, t2 in 20.0f64..290.0, seed in 0u64..1000
        ) {
            let seq = PulseSequence::default_mrf(40, seed).unwrap();
            let u = TissueParams::new(rho, t1, t2);
            let jac = signal_jacobian(u, &seq);
            for col in 0..3 {
                let analytic: Vec<Complex64> = jac.iter().map(|r| r[col]).collect();
                let fd = fd_column(u, &seq, col, 1e-4, true);
                prop_assert!(rel_err(&analytic, &fd) < 1e-6);
            }
        }

        #[test]
        fn trajectory_is_bounded(t1 in -50.0f64..1e4, t2 in -50.0f64..1e4, seed in 0u64..500, len in 1usize..60) {
            let seq = PulseSequence::default_mrf(len, seed).unwrap();
            let traj = simulate_magnetization(t1, t2, &seq);
            let t1p = t1.max(0.0);
            let growth = seq.tr().iter().map(|&tr| (1.0 - decay(t1p, tr)).abs()).fold(0.0, f64::max);
            let bound = seq.m0().abs() + len as f64 * growth * seq.m_eq().abs();
            prop_assert!(traj.max_norm() <= bound + 1e-12);
        }
    }

    #[test]
    fn sensitivities_stay_bounded_over_random_draws() {
        // one constant per sequence, estimated on a coarse grid, then checked on random draws
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for s in 0..5 {
            let seq = PulseSequence::default_mrf(50, s).unwrap();
            let mut cap = 0.0f64;
            for i in 0..60 {
                for j in 0..60 {
                    let tr = simulate_with_sensitivity(i as f64 * 5.0, j as f64 * 5.0, &seq);
                    for k in 0..seq.len() {
                        cap = cap.max(norm3(&tr.m[k])).max(norm3(&tr.dm_dt1[k])).max(norm3(&tr.dm_dt2[k]));
                    }
                }
            }
            let cap = 2.0 * cap;
            for _ in 0..2000 {
                let tr = simulate_with_sensitivity(rng.random_range(-10.0..1e4), rng.random_range(-10.0..1e4), &seq);
                for k in 0..seq.len() {
                    assert!(norm3(&tr.m[k]) <= cap);
                    assert!(norm3(&tr.dm_dt1[k]) <= cap && norm3(&tr.dm_dt2[k]) <= cap);
                }
            }
        }
    }

    #[test]
    fn lipschitz_ratio_stays_bounded() {
        let seq = PulseSequence::default_mrf(30, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut ratios = Vec::new();
        for scale in [1e-1, 1e-3, 1e-5] {
            let mut worst = 0.0f64;
            for _ in 0..300 {
                let a = [rng.random_range(0.0..110.0), rng.random_range(0.0..300.0), rng.random_range(0.0..300.0)];
                let d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let b = [a[0] + scale * d[0], a[1] + scale * d[1], a[2] + scale * d[2]];
                let sa = signal(TissueParams::from_array(a), &seq);
                let sb = signal(TissueParams::from_array(b), &seq);
                let num: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
                let den = scale * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                worst = worst.max(num / den);
            }
            ratios.push(worst);
        }
        // ratios must not blow up as pairs approach each other
        assert!(ratios[2] <= 2.0 * ratios[0] + 1.0, "{ratios:?}");
    }

    #[test]
    fn sequence_validation_and_kv_round_trip() {
        assert!(PulseSequence::new(vec![], vec![], 1.0, 1.0).is_err());
        assert!(PulseSequence::new(vec![1.0, 2.0], vec![0.1], 1.0, 1.0).is_err());
        assert!(PulseSequence::new(vec![1.0, -2.0], vec![0.1, 0.2], 1.0, 1.0).is_err());

        let seq = PulseSequence::default_mrf(17, 42).unwrap();
        assert_eq!(seq.flip_deg()[0], 180.0);
        assert!(seq.flip_deg()[1..].iter().all(|&a| (10.0..70.0).contains(&a)));
        assert!(seq.tr().iter().all(|&t| (11.0..16.0).contains(&t)));
        let mut kv = KeyValues::new();
        seq.to_kv(&mut kv);
        let mut parsed = KeyValues::parse(&kv.to_text()).unwrap();
        let back = PulseSequence::from_kv(&mut parsed).unwrap();
        parsed.finish().unwrap();
        assert_eq!(back, seq);

        let mut only_seed = KeyValues::parse("seq.L = 17\nseq.seed = 42").unwrap();
        assert_eq!(PulseSequence::from_kv(&mut only_seed).unwrap(), seq);
        let mut missing = KeyValues::parse("seq.seed = 42").unwrap();
        assert!(PulseSequence::from_kv(&mut missing).is_err());
    }
}
