//! Nested alternating minimization of
//!
//! ```text
//! J_d(u, D, C) = 𝔥²/2 ‖F_d(u) − f‖² + α/2 ‖∇u‖²_{U1}
//!              + Σ_j [ λʲ/2 ‖P(u_j/M_j) − D_j C_j‖² + β_j ‖C_j‖₁ ] + I_{U_ad}(u)
//! ```
//!
//! Each outer iteration runs one dictionary-learning z-step per channel on
//! `½‖DC − P(u_j/M_j)‖² + (β_j/λʲ)‖C‖₁` (so that the z-step decreases `J_d`
//! exactly) to the tolerance `η_k = η₀ (k+1)^{−γ}`, followed by a damped
//! Gauss–Newton u-step: a box-constrained QP with damping `λ_k = λ₀ τ^j`,
//! increased until the descent test passes.

mod config;
mod qp;
mod trace;

pub use config::{Preset, SolverConfig};
pub use qp::{solve_box_qp, QpOperator, QpOptions, QpSolution};
pub use trace::{
    descent_holds, diagnose, envelope_constant, read_trace, read_trace_file, stationarity_estimate,
    stationarity_residuals, write_trace, write_trace_file, Check, TraceRow,
};

use nalgebra::{DMatrix, Matrix3, Vector3};
use ndarray::Array3;
use rayon::prelude::*;

use crate::dictlearn::{self, DescentCertificate, DictLearnParams};
use crate::error::{Error, Result};
use crate::forward::{
    apply_a, grad_h, grad_normal_diag, patch_adjoint_scaled, patch_extract_scaled, Channel, KSpaceData, Linearization,
    ParameterImage, PatchConfig, SignalModel,
};

/// Algorithm variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Inner dictionary learning run to the tolerance `η_k`.
    Nested,
    /// A single inner sweep per outer iteration.
    OneStep,
    /// No dictionary term (`λʲ = 0`), fixed budget of `lm_iters` iterations.
    Lm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Nested, Variant::OneStep, Variant::Lm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nested => "nested",
            Variant::OneStep => "one-step",
            Variant::Lm => "lm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected nested, one-step or lm)")))
    }
}

/// Iterate `(u, D, C)` with one dictionary and code matrix per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub u: ParameterImage,
    pub d: [DMatrix<f64>; 3],
    pub c: [DMatrix<f64>; 3],
}

impl SolverState {
    /// Box midpoint, identity dictionaries and zero codes.
    pub fn initial(cfg: &SolverConfig, n1: usize, n2: usize) -> Result<Self> {
        Self::with_image(cfg, cfg.bounds.midpoint(n1, n2))
    }

    pub fn with_image(cfg: &SolverConfig, u: ParameterImage) -> Result<Self> {
        let (n1, n2) = u.dims();
        let patch = PatchConfig::new(cfg.p, n1, n2)?;
        let (k, m) = (patch.k(), patch.m());
        Ok(Self {
            u,
            d: std::array::from_fn(|_| DMatrix::identity(k, k)),
            c: std::array::from_fn(|_| DMatrix::zeros(k, m)),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Both outer step norms fell below `(ε₁, ε₂)`.
    Converged,
    /// The iteration budget was exhausted.
    MaxOuter,
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub state: SolverState,
    pub trace: Vec<TraceRow>,
    pub stop: StopReason,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveParts {
    pub data: f64,
    pub grad: f64,
    pub dict: [f64; 3],
    pub total: f64,
}

/// `‖u‖_U = (Σ_j 𝔥²/M_j² ‖u_j‖²)^{1/2}`.
pub fn scaled_norm_u(u: &ParameterImage, cfg: &SolverConfig) -> f64 {
    let w = cfg.norm_weights();
    Channel::ALL
        .iter()
        .map(|&c| w[c.index()] * u.channel_slice(c).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// `‖v‖_{U1}` for per-channel gradient fields of shape `(2, n1, n2)`.
pub fn scaled_norm_u1(v: &[Array3<f64>; 3], cfg: &SolverConfig) -> f64 {
    let w = cfg.norm_weights();
    (0..3).map(|c| w[c] * v[c].iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// `‖∇u‖²_{U1}`.
pub fn scaled_grad_norm_sq(u: &ParameterImage, cfg: &SolverConfig) -> f64 {
    let w = cfg.norm_weights();
    Channel::ALL.iter().map(|&c| w[c.index()] * grad_h(u.channel(c), cfg.h).iter().map(|x| x * x).sum::<f64>()).sum()
}

/// `‖Δ‖²_U + ‖∇Δ‖²_{U1}`, the step measure of the descent test.
pub fn step_norm_sq(delta: &ParameterImage, cfg: &SolverConfig) -> f64 {
    let n = scaled_norm_u(delta, cfg);
    n * n + scaled_grad_norm_sq(delta, cfg)
}

fn patch_data(u: &ParameterImage, c: Channel, patch: &PatchConfig, cfg: &SolverConfig) -> DMatrix<f64> {
    patch_extract_scaled(u.channel(c), patch, 1.0 / cfg.m_scale[c.index()])
}

/// Dictionary term of channel `j`, evaluated as `λʲ g_j` with the inner objective
/// `g_j = ½‖DC − X‖² + (β_j/λʲ)‖C‖₁` so that it matches the z-step bit for bit.
fn dict_term(x: &DMatrix<f64>, d: &DMatrix<f64>, c: &DMatrix<f64>, lambda: f64, beta: f64) -> f64 {
    if lambda > 0.0 {
        lambda * dictlearn::dict_objective(x, d, c, beta / lambda)
    } else {
        beta * c.iter().map(|v| v.abs()).sum::<f64>()
    }
}

fn check_problem<S: SignalModel + ?Sized>(u: &ParameterImage, data: &KSpaceData, model: &S) -> Result<()> {
    let (n1, n2) = u.dims();
    if data.data.dim() != (model.len(), n1, n2) {
        return Err(Error::Shape(format!(
            "data {:?} does not match image {n1}×{n2} with L = {}",
            data.data.dim(),
            model.len()
        )));
    }
    Ok(())
}

/// All terms of `J_d`; `total` is `+∞` outside the box.
pub fn objective_parts<S: SignalModel + ?Sized>(
    u: &ParameterImage,
    d: &[DMatrix<f64>; 3],
    c: &[DMatrix<f64>; 3],
    data: &KSpaceData,
    model: &S,
    cfg: &SolverConfig,
) -> Result<ObjectiveParts> {
    check_problem(u, data, model)?;
    let (n1, n2) = u.dims();
    let patch = PatchConfig::new(cfg.p, n1, n2)?;
    let fu = crate::forward::forward(u, model, &data.masks)?;
    let misfit: f64 = fu.data.iter().zip(data.data.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
    let data_term = 0.5 * cfg.h * cfg.h * misfit;
    let grad = 0.5 * cfg.alpha * scaled_grad_norm_sq(u, cfg);
    let dict_vec: Vec<f64> = Channel::ALL
        .par_iter()
        .map(|&ch| {
            let j = ch.index();
            dict_term(&patch_data(u, ch, &patch, cfg), &d[j], &c[j], cfg.lambda[j], cfg.beta[j])
        })
        .collect();
    let dict = [dict_vec[0], dict_vec[1], dict_vec[2]];
    let mut total = data_term + grad + dict[0] + dict[1] + dict[2];
    if !cfg.bounds.contains(u, 1e-12) {
        total = f64::INFINITY;
    }
    Ok(ObjectiveParts { data: data_term, grad, dict, total })
}

pub fn objective_jd<S: SignalModel + ?Sized>(
    u: &ParameterImage,
    d: &[DMatrix<f64>; 3],
    c: &[DMatrix<f64>; 3],
    data: &KSpaceData,
    model: &S,
    cfg: &SolverConfig,
) -> Result<f64> {
    Ok(objective_parts(u, d, c, data, model, cfg)?.total)
}

/// `out += s · ∇ᵀ∇ x` on one row-major channel.
fn add_grad_normal(x: &[f64], n1: usize, n2: usize, h: f64, s: f64, out: &mut [f64]) {
    let k = s / (h * h);
    for i in 0..n1 {
        for j in 0..n2 {
            let p = i * n2 + j;
            let v = x[p];
            let mut acc = v - if i + 1 < n1 { x[p + n2] } else { 0.0 };
            if i > 0 {
                acc += v - x[p - n2];
            }
            acc += v - if j + 1 < n2 { x[p + 1] } else { 0.0 };
            if j > 0 {
                acc += v - x[p - 1];
            }
            out[p] += k * acc;
        }
    }
}

/// Hessian of the u-subproblem in the step `Δ = u − u_k`:
/// `(𝔥²/r) Re(π'*π') + (λ_k + α) W ∇ᵀ∇ + λ_k W + diag(λʲ p²/M_j²)`.
struct UHessian<'a> {
    lin: &'a Linearization,
    n1: usize,
    n2: usize,
    h: f64,
    data_scale: f64,
    grad_scale: [f64; 3],
    diag_scale: [f64; 3],
}

impl<'a> UHessian<'a> {
    fn new(lin: &'a Linearization, n1: usize, n2: usize, cfg: &SolverConfig, r: f64, lambda_k: f64) -> Self {
        let w = cfg.norm_weights();
        let p2 = (cfg.p * cfg.p) as f64;
        Self {
            lin,
            n1,
            n2,
            h: cfg.h,
            data_scale: cfg.h * cfg.h / r,
            grad_scale: std::array::from_fn(|c| (lambda_k + cfg.alpha) * w[c]),
            diag_scale: std::array::from_fn(|c| {
                lambda_k * w[c] + cfg.lambda[c] * p2 / (cfg.m_scale[c] * cfg.m_scale[c])
            }),
        }
    }

    fn block(&self, p: usize) -> Matrix3<f64> {
        let g = self.lin.gram(p);
        let (i, j) = (p / self.n2, p % self.n2);
        let lap = grad_normal_diag(i, j, self.h);
        Matrix3::from_fn(|a, b| {
            let mut v = self.data_scale * g[a][b];
            if a == b {
                v += self.grad_scale[a] * lap + self.diag_scale[a];
            }
            v
        })
    }
}

impl QpOperator for UHessian<'_> {
    fn dim(&self) -> usize {
        3 * self.n1 * self.n2
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let npix = self.n1 * self.n2;
        out.par_chunks_mut(npix).enumerate().for_each(|(c, o)| {
            let xc = &x[c * npix..(c + 1) * npix];
            for p in 0..npix {
                let g = self.lin.gram(p);
                o[p] = self.data_scale * (g[c][0] * x[p] + g[c][1] * x[npix + p] + g[c][2] * x[2 * npix + p])
                    + self.diag_scale[c] * xc[p];
            }
            add_grad_normal(xc, self.n1, self.n2, self.h, self.grad_scale[c], o);
        });
    }

    fn precondition(&self, r: &[f64], free: &[bool], z: &mut [f64]) {
        let npix = self.n1 * self.n2;
        let solved: Vec<[f64; 3]> = (0..npix)
            .into_par_iter()
            .map(|p| {
                let idx = [p, npix + p, 2 * npix + p];
                let mut m = self.block(p);
                let mut rhs = Vector3::zeros();
                for a in 0..3 {
                    if free[idx[a]] {
                        rhs[a] = r[idx[a]];
                    } else {
                        for b in 0..3 {
                            m[(a, b)] = 0.0;
                            m[(b, a)] = 0.0;
                        }
                        m[(a, a)] = 1.0;
                    }
                }
                match m.cholesky() {
                    Some(ch) => {
                        let s = ch.solve(&rhs);
                        [s[0], s[1], s[2]]
                    }
                    None => std::array::from_fn(|a| if m[(a, a)] > 0.0 { rhs[a] / m[(a, a)] } else { rhs[a] }),
                }
            })
            .collect();
        for (p, s) in solved.iter().enumerate() {
            for a in 0..3 {
                z[a * npix + p] = if free[a * npix + p] { s[a] } else { 0.0 };
            }
        }
    }
}

/// Everything of the u-subproblem that does not depend on `λ_k`.
struct ULinearModel {
    lin: Linearization,
    /// Gradient of the model at `Δ = 0`.
    b: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    r: f64,
}

impl ULinearModel {
    fn new<S: SignalModel + ?Sized>(
        u_k: &ParameterImage,
        d: &[DMatrix<f64>; 3],
        c: &[DMatrix<f64>; 3],
        data: &KSpaceData,
        model: &S,
        cfg: &SolverConfig,
    ) -> Result<Self> {
        check_problem(u_k, data, model)?;
        let (n1, n2) = u_k.dims();
        let npix = n1 * n2;
        let patch = PatchConfig::new(cfg.p, n1, n2)?;
        let r = cfg.r.unwrap_or(data.masks.r() as f64);
        if !(r >= 1.0) {
            return Err(Error::InvalidParameter(format!("undersampling factor {r} must be at least 1")));
        }
        let lin = Linearization::new(u_k, model);
        let mut residual = apply_a(lin.signal(), &data.masks)?;
        residual.data.zip_mut_with(&data.data, |a, b| *a -= b);
        let mut grad = lin.vjp(&residual)?;
        grad.scale(cfg.h * cfg.h);
        let w = cfg.norm_weights();
        let mut b = grad.as_slice().to_vec();
        let patch_terms: Vec<Vec<f64>> = Channel::ALL
            .par_iter()
            .map(|&ch| {
                let j = ch.index();
                let mut out = vec![0.0; npix];
                add_grad_normal(u_k.channel_slice(ch), n1, n2, cfg.h, cfg.alpha * w[j], &mut out);
                if cfg.lambda[j] > 0.0 {
                    let x = patch_data(u_k, ch, &patch, cfg);
                    let res = x - &d[j] * &c[j];
                    let back = patch_adjoint_scaled(&res, &patch, cfg.lambda[j] / cfg.m_scale[j]);
                    for (o, v) in out.iter_mut().zip(back.iter()) {
                        *o += v;
                    }
                }
                out
            })
            .collect();
        for (j, t) in patch_terms.iter().enumerate() {
            for (o, v) in b[j * npix..(j + 1) * npix].iter_mut().zip(t) {
                *o += v;
            }
        }
        let us = u_k.as_slice();
        let lo: Vec<f64> = (0..3 * npix).map(|i| cfg.bounds.lower[i / npix] - us[i]).collect();
        let hi: Vec<f64> = (0..3 * npix).map(|i| cfg.bounds.upper[i / npix] - us[i]).collect();
        Ok(Self { lin, b, lo, hi, r })
    }

    fn solve(&self, u_k: &ParameterImage, lambda_k: f64, cfg: &SolverConfig) -> Result<(ParameterImage, usize)> {
        let (n1, n2) = u_k.dims();
        let op = UHessian::new(&self.lin, n1, n2, cfg, self.r, lambda_k);
        let sol =
            solve_box_qp(&op, &self.b, &self.lo, &self.hi, QpOptions { tol: cfg.tol_qp, max_iters: cfg.max_qp_iters })?;
        let mut u = u_k.clone();
        for (v, dv) in u.as_slice_mut().iter_mut().zip(&sol.x) {
            *v += dv;
        }
        cfg.bounds.project(&mut u);
        Ok((u, sol.iterations))
    }
}

/// Solves the box-constrained u-subproblem for a fixed damping `λ_k`.
pub fn u_subproblem<S: SignalModel + ?Sized>(
    u_k: &ParameterImage,
    d: &[DMatrix<f64>; 3],
    c: &[DMatrix<f64>; 3],
    data: &KSpaceData,
    model: &S,
    lambda_k: f64,
    cfg: &SolverConfig,
) -> Result<ParameterImage> {
    let m = ULinearModel::new(u_k, d, c, data, model, cfg)?;
    Ok(m.solve(u_k, lambda_k, cfg)?.0)
}

#[derive(Clone, Debug)]
pub struct BacktrackResult {
    pub u: ParameterImage,
    pub lambda_k: f64,
    pub trials: usize,
    pub qp_iters: usize,
    pub parts: ObjectiveParts,
    pub step_u_sq: f64,
}

fn backtrack_with<S: SignalModel + ?Sized>(
    lm: &ULinearModel,
    u_k: &ParameterImage,
    j_pre: &ObjectiveParts,
    d: &[DMatrix<f64>; 3],
    c: &[DMatrix<f64>; 3],
    data: &KSpaceData,
    model: &S,
    cfg: &SolverConfig,
) -> Result<BacktrackResult> {
    let mut lambda_k = cfg.lambda0;
    for trial in 1..=cfg.bt_cap {
        let (u, qp_iters) = lm.solve(u_k, lambda_k, cfg)?;
        if u == *u_k {
            return Ok(BacktrackResult { u, lambda_k, trials: trial, qp_iters, parts: *j_pre, step_u_sq: 0.0 });
        }
        let step_u_sq = step_norm_sq(&u.sub(u_k), cfg);
        let parts = objective_parts(&u, d, c, data, model, cfg)?;
        log::trace!("backtracking trial {trial}: lambda {lambda_k:.3e}, J {:.6e} vs {:.6e}", parts.total, j_pre.total);
        if descent_holds(parts.total, j_pre.total, cfg.sigma_bt, lambda_k, step_u_sq) {
            return Ok(BacktrackResult { u, lambda_k, trials: trial, qp_iters, parts, step_u_sq });
        }
        lambda_k *= cfg.tau;
    }
    Err(Error::BacktrackingFailed { trials: cfg.bt_cap, lambda: lambda_k / cfg.tau })
}

/// Damping search `λ_k = λ₀ τ^j` until the descent test holds.
pub fn backtrack_u<S: SignalModel + ?Sized>(
    u_k: &ParameterImage,
    d: &[DMatrix<f64>; 3],
    c: &[DMatrix<f64>; 3],
    data: &KSpaceData,
    model: &S,
    cfg: &SolverConfig,
) -> Result<BacktrackResult> {
    let lm = ULinearModel::new(u_k, d, c, data, model, cfg)?;
    let j_pre = objective_parts(u_k, d, c, data, model, cfg)?;
    backtrack_with(&lm, u_k, &j_pre, d, c, data, model, cfg)
}

/// Result of the per-channel dictionary-learning step.
#[derive(Clone, Debug)]
pub struct ZStep {
    pub d: [DMatrix<f64>; 3],
    pub c: [DMatrix<f64>; 3],
    /// `None` for channels with `λʲ = 0`, which are left untouched.
    pub certificates: [Option<DescentCertificate>; 3],
    pub eta: f64,
}

/// Inner tolerance `η_k = η₀ (k+1)^{−γ}`.
pub fn inner_tolerance(eta0: f64, k: usize, gamma: f64) -> f64 {
    eta0 * ((k + 1) as f64).powf(-gamma)
}

/// Runs dictionary learning per channel on `X_j = P(u_j/M_j)`, warm-started
/// from `(D_j, C_j)`, with at most `inner_cap` sweeps.
pub fn z_step(
    u: &ParameterImage,
    d: &[DMatrix<f64>; 3],
    c: &[DMatrix<f64>; 3],
    eta: f64,
    inner_cap: usize,
    cfg: &SolverConfig,
) -> Result<ZStep> {
    let (n1, n2) = u.dims();
    let patch = PatchConfig::new(cfg.p, n1, n2)?;
    let results: Vec<Result<(DMatrix<f64>, DMatrix<f64>, Option<DescentCertificate>)>> = Channel::ALL
        .par_iter()
        .map(|&ch| {
            let j = ch.index();
            if cfg.lambda[j] == 0.0 {
                return Ok((d[j].clone(), c[j].clone(), None));
            }
            let x = patch_data(u, ch, &patch, cfg);
            let params = DictLearnParams {
                beta: cfg.beta[j] / cfg.lambda[j],
                lambda_d: cfg.lambda_d,
                lambda_c: cfg.lambda_c,
                eta,
                max_iters: inner_cap,
            };
            let out = dictlearn::dict_learn(&x, &d[j], &c[j], &params)?;
            if out.certificate.final_objective() > out.certificate.initial_objective {
                // rounding-level increase near stationarity: keep the previous pair
                log::debug!("z-step on {} rejected: objective did not decrease", ch.name());
                return Ok((d[j].clone(), c[j].clone(), Some(out.certificate)));
            }
            Ok((out.d, out.c, Some(out.certificate)))
        })
        .collect();
    let mut ds = Vec::with_capacity(3);
    let mut cs = Vec::with_capacity(3);
    let mut certs = Vec::with_capacity(3);
    for r in results {
        let (dj, cj, cert) = r?;
        ds.push(dj);
        cs.push(cj);
        certs.push(cert);
    }
    let to3 = |v: Vec<DMatrix<f64>>| -> [DMatrix<f64>; 3] { v.try_into().expect("three channels") };
    let certificates: [Option<DescentCertificate>; 3] = certs.try_into().expect("three channels");
    Ok(ZStep { d: to3(ds), c: to3(cs), certificates, eta })
}

fn initial_eta0(state: &SolverState, cfg: &SolverConfig) -> f64 {
    cfg.eta0.unwrap_or_else(|| {
        (0..3).map(|j| (state.c[j].norm_squared() + state.d[j].norm_squared()).sqrt()).fold(0.0, f64::max)
    })
}

fn row_from_parts(k: usize, parts: &ObjectiveParts) -> TraceRow {
    TraceRow {
        k,
        objective: parts.total,
        data_term: parts.data,
        grad_term: parts.grad,
        dict_rho: parts.dict[0],
        dict_t1: parts.dict[1],
        dict_t2: parts.dict[2],
        ..Default::default()
    }
}

/// Generic outer loop; `inner_cap` bounds the sweeps of each z-step.
pub fn solve<S: SignalModel + ?Sized>(
    data: &KSpaceData,
    model: &S,
    cfg: &SolverConfig,
    init: SolverState,
    inner_cap: usize,
    max_outer: usize,
) -> Result<SolveOutput> {
    cfg.validate()?;
    let mut state = init;
    check_problem(&state.u, data, model)?;
    if !state.u.is_finite() || !cfg.bounds.contains(&state.u, 0.0) {
        return Err(Error::InvalidParameter("initial image must lie in the admissible box".into()));
    }
    let patch = PatchConfig::new(cfg.p, state.u.dims().0, state.u.dims().1)?;
    for j in 0..3 {
        if state.d[j].shape() != (patch.k(), patch.k()) || state.c[j].shape() != (patch.k(), patch.m()) {
            return Err(Error::Shape(format!("initial dictionary/codes of channel {j} do not match p = {}", cfg.p)));
        }
    }
    let eta0 = initial_eta0(&state, cfg);
    let sigma1 = cfg.lambda_d.min(cfg.lambda_c);
    let mut parts = objective_parts(&state.u, &state.d, &state.c, data, model, cfg)?;
    let mut trace =
        vec![TraceRow { sigma_bt: cfg.sigma_bt, sigma1, cert_ok: 1, sigma2_ok: 1, ..row_from_parts(0, &parts) }];
    let mut stop = StopReason::MaxOuter;
    for k in 0..max_outer {
        let eta = inner_tolerance(eta0, k, cfg.gamma);
        let z = z_step(&state.u, &state.d, &state.c, eta, inner_cap, cfg)?;
        let step_z_sq: f64 =
            (0..3).map(|j| (&z.d[j] - &state.d[j]).norm_squared() + (&z.c[j] - &state.c[j]).norm_squared()).sum();
        let j_pre = if step_z_sq == 0.0 { parts } else { objective_parts(&state.u, &z.d, &z.c, data, model, cfg)? };
        let lm = ULinearModel::new(&state.u, &z.d, &z.c, data, model, cfg)?;
        let bt = backtrack_with(&lm, &state.u, &j_pre, &z.d, &z.c, data, model, cfg)?;

        let mut row = row_from_parts(k + 1, &bt.parts);
        row.objective_pre_u = j_pre.total;
        row.lambda_k = bt.lambda_k;
        row.bt_trials = bt.trials;
        row.qp_iters = bt.qp_iters;
        row.step_u_sq = bt.step_u_sq;
        row.step_z_sq = step_z_sq;
        row.eta = eta;
        row.sigma_bt = cfg.sigma_bt;
        row.sigma1 = sigma1;
        let mut cert_ok = true;
        let mut sigma2_ok = true;
        let mut inner = [0usize; 3];
        let mut gdrop = [0.0; 3];
        let mut path = [0.0; 3];
        for (j, cert) in z.certificates.iter().enumerate() {
            if let Some(cert) = cert {
                inner[j] = cert.iterations();
                gdrop[j] = cert.objective_drop();
                path[j] = cert.path_length_sq();
                row.last_inner_sq += cert.last_step_sq();
                cert_ok &= cert.all_sufficient_decrease() && cert.all_residual_bounds_data();
                sigma2_ok &= cert.all_residual_bounds();
            }
        }
        [row.inner_rho, row.inner_t1, row.inner_t2] = inner;
        [row.gdrop_rho, row.gdrop_t1, row.gdrop_t2] = gdrop;
        [row.path_rho, row.path_t1, row.path_t2] = path;
        row.cert_ok = cert_ok as u8;
        row.sigma2_ok = sigma2_ok as u8;
        log::debug!(
            "outer {:>3}: J {:.6e} (data {:.4e}) lambda_k {:.1e} trials {} inner {:?} step_u² {:.3e} step_z² {:.3e}",
            k + 1,
            row.objective,
            row.data_term,
            row.lambda_k,
            row.bt_trials,
            inner,
            row.step_u_sq,
            row.step_z_sq
        );
        trace.push(row);

        state = SolverState { u: bt.u, d: z.d, c: z.c };
        parts = bt.parts;
        if bt.step_u_sq < cfg.eps1 * cfg.eps1 && step_z_sq < cfg.eps2 * cfg.eps2 {
            stop = StopReason::Converged;
            break;
        }
    }
    Ok(SolveOutput { state, trace, stop })
}

/// Nested variant: inner loop runs to `η_k` (capped at `max_inner` sweeps).
pub fn nested_solve<S: SignalModel + ?Sized>(
    data: &KSpaceData,
    model: &S,
    cfg: &SolverConfig,
    init: Option<SolverState>,
) -> Result<SolveOutput> {
    let (n1, n2) = (data.data.dim().1, data.data.dim().2);
    let init = match init {
        Some(s) => s,
        None => SolverState::initial(cfg, n1, n2)?,
    };
    solve(data, model, cfg, init, cfg.max_inner, cfg.max_outer)
}

/// One inner sweep per outer iteration.
pub fn one_step_solve<S: SignalModel + ?Sized>(
    data: &KSpaceData,
    model: &S,
    cfg: &SolverConfig,
    init: Option<SolverState>,
) -> Result<SolveOutput> {
    let (n1, n2) = (data.data.dim().1, data.data.dim().2);
    let init = match init {
        Some(s) => s,
        None => SolverState::initial(cfg, n1, n2)?,
    };
    solve(data, model, cfg, init, 1, cfg.max_outer)
}

/// Levenberg–Marquardt without the dictionary term, `lm_iters` outer iterations.
pub fn vanilla_lm_solve<S: SignalModel + ?Sized>(
    data: &KSpaceData,
    model: &S,
    cfg: &SolverConfig,
    init: Option<SolverState>,
) -> Result<SolveOutput> {
    let cfg = SolverConfig { lambda: [0.0; 3], ..cfg.clone() };
    let (n1, n2) = (data.data.dim().1, data.data.dim().2);
    let init = match init {
        Some(s) => s,
        None => SolverState::initial(&cfg, n1, n2)?,
    };
    solve(data, model, &cfg, init, cfg.max_inner, cfg.lm_iters)
}

pub fn run_variant<S: SignalModel + ?Sized>(
    variant: Variant,
    data: &KSpaceData,
    model: &S,
    cfg: &SolverConfig,
    init: Option<SolverState>,
) -> Result<SolveOutput> {
    match variant {
        Variant::Nested => nested_solve(data, model, cfg, init),
        Variant::OneStep => one_step_solve(data, model, cfg, init),
        Variant::Lm => vanilla_lm_solve(data, model, cfg, init),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bloch::PulseSequence;
    use crate::forward::{IdentitySignal, LineAxis, SamplingMaskSet};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> SolverConfig {
        SolverConfig {
            p: 2,
            lambda: [3.0, 2.0, 1.5],
            beta: [0.05; 3],
            alpha: 0.3,
            m_scale: [10.0, 20.0, 30.0],
            bounds: crate::forward::AdmissibleBox::new([-1e6; 3], [1e6; 3]).unwrap(),
            tol_qp: 1e-13,
            ..SolverConfig::default()
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, n1: usize, n2: usize) -> ParameterImage {
        ParameterImage::from_fn(n1, n2, |_, _| {
            [rng.random_range(20.0..90.0), rng.random_range(40.0..250.0), rng.random_range(20.0..200.0)]
        })
    }

    fn random_state(rng: &mut ChaCha8Rng, cfg: &SolverConfig, u: ParameterImage) -> SolverState {
        let mut s = SolverState::with_image(cfg, u).unwrap();
        for j in 0..3 {
            let a = DMatrix::from_fn(s.d[j].nrows(), s.d[j].ncols(), |_, _| rng.random_range(-1.0..1.0));
            s.d[j] = a.qr().q();
            s.c[j] = DMatrix::from_fn(s.c[j].nrows(), s.c[j].ncols(), |_, _| rng.random_range(-0.5..0.5));
        }
        s
    }

    /// `Q(Δ) = J_d(u_k + Δ) + λ_k/2 N(Δ)` evaluated without any solver code.
    fn model_value(st: &SolverState, delta: &[f64], data: &KSpaceData, cfg: &SolverConfig, lambda_k: f64) -> f64 {
        let mut du = ParameterImage::zeros(st.u.dims().0, st.u.dims().1);
        du.as_slice_mut().copy_from_slice(delta);
        let j = objective_jd(&st.u.add(&du), &st.d, &st.c, data, &IdentitySignal, cfg).unwrap();
        j + 0.5 * lambda_k * step_norm_sq(&du, cfg)
    }

    #[test]
    fn linear_subproblem_matches_dense_quadratic() {
        // π = identity and r = 1 make the model exact, so the QP minimizer is
        // the minimizer of the assembled quadratic
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n1, n2) = (4, 4);
        let cfg = SolverConfig { r: Some(1.0), ..small_cfg() };
        let truth = random_image(&mut rng, n1, n2);
        let masks = SamplingMaskSet::full(n1, n2, 3);
        let mut data = crate::forward::forward(&truth, &IdentitySignal, &masks).unwrap();
        data.data.mapv_inplace(|z| {
            z + num_complex::Complex64::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))
        });
        let u0 = random_image(&mut rng, n1, n2);
        let st = random_state(&mut rng, &cfg, u0);
        let lambda_k = 0.7;

        let n = 3 * n1 * n2;
        let s = 1.0;
        let q0 = model_value(&st, &vec![0.0; n], &data, &cfg, lambda_k);
        let unit = |i: usize, k: usize| {
            let mut v = vec![0.0; n];
            v[i] += s;
            v[k] += s;
            v
        };
        let single: Vec<f64> = (0..n)
            .map(|i| {
                let mut v = vec![0.0; n];
                v[i] = s;
                model_value(&st, &v, &data, &cfg, lambda_k)
            })
            .collect();
        let minus: Vec<f64> = (0..n)
            .map(|i| {
                let mut v = vec![0.0; n];
                v[i] = -s;
                model_value(&st, &v, &data, &cfg, lambda_k)
            })
            .collect();
        let h = DMatrix::from_fn(n, n, |i, k| {
            if i == k {
                (single[i] - 2.0 * q0 + minus[i]) / (s * s)
            } else {
                (model_value(&st, &unit(i, k), &data, &cfg, lambda_k) - single[i] - single[k] + q0) / (s * s)
            }
        });
        let g = DVector::from_fn(n, |i, _| (single[i] - minus[i]) / (2.0 * s));
        let want = h.lu().solve(&(-g)).unwrap();

        let got = u_subproblem(&st.u, &st.d, &st.c, &data, &IdentitySignal, lambda_k, &cfg).unwrap();
        let delta = got.sub(&st.u);
        let scale = want.amax();
        for (a, b) in delta.as_slice().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-6 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn hessian_matches_jacobian_products_for_bloch_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n1, n2) = (4, 6);
        let cfg = SolverConfig { h: 0.7, ..small_cfg() };
        let seq = PulseSequence::default_mrf(5, 3).unwrap();
        let u = random_image(&mut rng, n1, n2);
        let lin = Linearization::new(&u, &seq);
        let lambda_k = 2.5;
        let op = UHessian::new(&lin, n1, n2, &cfg, 1.0, lambda_k);
        let masks = SamplingMaskSet::full(n1, n2, 5);
        let n = 3 * n1 * n2;
        let mk = |rng: &mut ChaCha8Rng| {
            let mut x = ParameterImage::zeros(n1, n2);
            x.as_slice_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            x
        };
        let (x, y) = (mk(&mut rng), mk(&mut rng));
        let mut hy = vec![0.0; n];
        op.apply(y.as_slice(), &mut hy);
        let got: f64 = x.as_slice().iter().zip(&hy).map(|(a, b)| a * b).sum();

        let data_part = cfg.h * cfg.h * lin.jvp(&x, &masks).unwrap().dot(&lin.jvp(&y, &masks).unwrap());
        let damp = 0.25 * (step_norm_sq(&x.add(&y), &cfg) - step_norm_sq(&x.sub(&y), &cfg));
        let grad = 0.25 * (scaled_grad_norm_sq(&x.add(&y), &cfg) - scaled_grad_norm_sq(&x.sub(&y), &cfg));
        let dict: f64 = Channel::ALL
            .iter()
            .map(|&c| {
                let j = c.index();
                let xy: f64 = x.channel_slice(c).iter().zip(y.channel_slice(c)).map(|(a, b)| a * b).sum();
                cfg.lambda[j] * (cfg.p * cfg.p) as f64 / (cfg.m_scale[j] * cfg.m_scale[j]) * xy
            })
            .sum();
        let want = data_part + lambda_k * damp + cfg.alpha * grad + dict;
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn heavy_damping_barely_moves() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n1, n2) = (6, 6);
        let cfg = small_cfg();
        let seq = PulseSequence::default_mrf(6, 1).unwrap();
        let masks = SamplingMaskSet::cartesian(n1, n2, 6, 2, 0, LineAxis::Rows).unwrap();
        let data = crate::forward::forward(&random_image(&mut rng, n1, n2), &seq, &masks).unwrap();
        let u0 = random_image(&mut rng, n1, n2);
        let st = random_state(&mut rng, &cfg, u0);
        let small = u_subproblem(&st.u, &st.d, &st.c, &data, &seq, 1.0, &cfg).unwrap().sub(&st.u);
        let big = u_subproblem(&st.u, &st.d, &st.c, &data, &seq, 1e8, &cfg).unwrap().sub(&st.u);
        let (ns, nb) = (step_norm_sq(&small, &cfg).sqrt(), step_norm_sq(&big, &cfg).sqrt());
        assert!(nb < 1e-4 * ns, "{nb} vs {ns}");
    }

    #[test]
    fn subproblem_respects_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n1, n2) = (6, 6);
        let cfg = SolverConfig {
            bounds: crate::forward::AdmissibleBox::new([30.0, 50.0, 40.0], [60.0, 150.0, 120.0]).unwrap(),
            ..small_cfg()
        };
        let seq = PulseSequence::default_mrf(6, 1).unwrap();
        let masks = SamplingMaskSet::full(n1, n2, 6);
        let data = crate::forward::forward(&random_image(&mut rng, n1, n2), &seq, &masks).unwrap();
        let st = SolverState::initial(&cfg, n1, n2).unwrap();
        let u = u_subproblem(&st.u, &st.d, &st.c, &data, &seq, 1e-3, &cfg).unwrap();
        assert!(cfg.bounds.contains(&u, 0.0));
    }

    fn desk_problem(seed: u64) -> (KSpaceData, PulseSequence, SolverConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n1, n2) = (8, 8);
        let seq = PulseSequence::default_mrf(8, seed).unwrap();
        let masks = SamplingMaskSet::cartesian(n1, n2, 8, 2, 0, LineAxis::Rows).unwrap();
        let data = crate::forward::forward(&random_image(&mut rng, n1, n2), &seq, &masks).unwrap();
        let cfg =
            SolverConfig { p: 4, max_outer: 6, lm_iters: 6, max_inner: 10, beta: [0.5; 3], ..SolverConfig::default() };
        (data, seq, cfg)
    }

    #[test]
    fn trace_is_monotone_and_each_step_passes_descent_test() {
        let (data, seq, cfg) = desk_problem(21);
        for variant in Variant::ALL {
            let out = run_variant(variant, &data, &seq, &cfg, None).unwrap();
            assert!(out.trace.len() >= 2);
            for w in out.trace.windows(2) {
                let (prev, row) = (&w[0], &w[1]);
                assert!(row.objective_pre_u <= prev.objective, "{variant:?} z-step increased J");
                assert!(descent_holds(row.objective, row.objective_pre_u, row.sigma_bt, row.lambda_k, row.step_u_sq));
                assert!(row.objective <= prev.objective);
            }
            let last = out.trace.last().unwrap();
            let j =
                objective_jd(&out.state.u, &out.state.d, &out.state.c, &data, &seq, &cfg_for(variant, &cfg)).unwrap();
            assert_eq!(j, last.objective);
        }
    }

    fn cfg_for(variant: Variant, cfg: &SolverConfig) -> SolverConfig {
        match variant {
            Variant::Lm => SolverConfig { lambda: [0.0; 3], ..cfg.clone() },
            _ => cfg.clone(),
        }
    }

    #[test]
    fn one_step_uses_single_sweep() {
        let (data, seq, cfg) = desk_problem(4);
        let out = one_step_solve(&data, &seq, &cfg, None).unwrap();
        for row in &out.trace[1..] {
            assert!(row.inner().iter().all(|&n| n == 1));
        }
    }

    #[test]
    fn nested_without_dictionary_equals_vanilla_lm() {
        let (data, seq, cfg) = desk_problem(3);
        let cfg = SolverConfig { lambda: [0.0; 3], beta: [0.0; 3], max_outer: 5, lm_iters: 5, ..cfg };
        let a = nested_solve(&data, &seq, &cfg, None).unwrap();
        let b = vanilla_lm_solve(&data, &seq, &cfg, None).unwrap();
        assert_eq!(a.state.u, b.state.u);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn exact_data_at_truth_stops_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n1, n2) = (6, 6);
        let seq = PulseSequence::default_mrf(6, 2).unwrap();
        let truth = random_image(&mut rng, n1, n2);
        let masks = SamplingMaskSet::full(n1, n2, 6);
        let data = crate::forward::forward(&truth, &seq, &masks).unwrap();
        let cfg = SolverConfig { alpha: 0.0, p: 2, ..SolverConfig::default() };
        let init = SolverState::with_image(&cfg, truth.clone()).unwrap();
        let out = vanilla_lm_solve(&data, &seq, &cfg, Some(init)).unwrap();
        assert_eq!(out.stop, StopReason::Converged);
        assert_eq!(out.trace.len(), 2);
        assert_eq!(out.state.u, truth);
    }

    #[test]
    fn rejects_start_outside_box_and_mismatched_data() {
        let (data, seq, cfg) = desk_problem(1);
        let mut st = SolverState::initial(&cfg, 8, 8).unwrap();
        st.u.as_slice_mut()[0] = -1.0;
        assert!(nested_solve(&data, &seq, &cfg, Some(st)).is_err());
        let short = PulseSequence::default_mrf(5, 1).unwrap();
        assert!(matches!(nested_solve(&data, &short, &cfg, None), Err(Error::Shape(_))));
    }

    #[test]
    fn inner_tolerance_schedule() {
        assert_eq!(inner_tolerance(8.0, 0, 0.75), 8.0);
        assert!((inner_tolerance(8.0, 15, 0.75) - 1.0).abs() < 1e-12);
        assert_eq!(Variant::parse("one-step").unwrap(), Variant::OneStep);
        assert!(Variant::parse("gd").is_err());
    }
}
