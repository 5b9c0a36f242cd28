//! Orthogonal dictionary learning by alternating proximal updates.
//!
//! For patch data `X` (K×M) the inner problem is
//!
//! ```text
//! min_{D ∈ O_K, C}  g(D, C) = ½‖DC − X‖²_F + β‖C‖₁
//! ```
//!
//! Each sweep solves two proximal subproblems in closed form:
//! `D⁺ = UVᵀ` from the SVD `UΣVᵀ = X Cᵀ + λ_D D`, then
//! `C⁺ = soft((D⁺ᵀX + λ_C C)/(1 + λ_C), β/(1 + λ_C))`.
//! Every run returns a [`DescentCertificate`] that records, per sweep, the
//! sufficient-decrease test with `σ₁ = min(λ_D, λ_C)` and the subgradient
//! residual test with `σ₂ = max(sup‖C_n‖_F, λ_C, λ_D)`. That constant does
//! not bound the residual when soft-thresholding leaves `‖C‖_F` well below
//! `‖X‖₂`, so the certificate also carries the test with
//! `σ₂ˣ = max(σ₂, √((‖X‖₂ + λ_C)² + λ_D²))`, which always holds: the code
//! block of the residual is at most `λ_C‖ΔC‖` and the dictionary block at
//! most `‖X‖₂‖ΔC‖ + λ_D‖ΔD‖`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

pub type Dictionary = DMatrix<f64>;
pub type SparseCodes = DMatrix<f64>;

/// Accepted deviation of `DᵀD` from the identity before `update_codes` refuses `D`.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DictLearnParams {
    pub beta: f64,
    pub lambda_d: f64,
    pub lambda_c: f64,
    pub eta: f64,
    pub max_iters: usize,
}

impl DictLearnParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.lambda_d > 0.0) || !(self.lambda_c > 0.0) || !(self.eta > 0.0) {
            return Err(Error::InvalidParameter(format!("invalid dictionary-learning parameters {self:?}")));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Entrywise `sign(x)·max(|x| − τ, 0)`.
pub fn soft_threshold(x: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("threshold {tau} must be positive")));
    }
    Ok(x.map(|v| soft_scalar(v, tau)))
}

#[inline]
fn soft_scalar(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// `‖DᵀD − I‖_F`.
pub fn orthogonality_defect(d: &DMatrix<f64>) -> f64 {
    let mut g = d.transpose() * d;
    for i in 0..g.nrows().min(g.ncols()) {
        g[(i, i)] -= 1.0;
    }
    g.norm()
}

fn check_shapes(x: &DMatrix<f64>, d: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<()> {
    let k = x.nrows();
    if d.shape() != (k, k) || c.shape() != x.shape() {
        return Err(Error::Shape(format!("X {:?}, D {:?}, C {:?}", x.shape(), d.shape(), c.shape())));
    }
    Ok(())
}

/// `argmin_{D ∈ O_K} ½‖DC − X‖² + (λ_D/2)‖D − D_prev‖²`.
pub fn update_dictionary(
    x: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d_prev: &DMatrix<f64>,
    lambda_d: f64,
) -> Result<Dictionary> {
    check_shapes(x, d_prev, c)?;
    let b = x * c.transpose() + d_prev * lambda_d;
    if !b.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite input to the dictionary update".into()));
    }
    polar_factor(&b)
}

/// Orthogonal factor `UVᵀ` of `UΣVᵀ = B`.
///
/// Well-conditioned `B` uses the scaled Newton iteration
/// `X ← (γX + X⁻ᵀ/γ)/2`, which does not care about clustered singular values.
/// Otherwise the SVDs of faer and nalgebra are tried in turn. A candidate is
/// accepted once `QᵀB` is symmetric to rounding; failing that, the most
/// symmetric one is returned.
fn polar_factor(b: &DMatrix<f64>) -> Result<Dictionary> {
    let tol = 1e-12 * (1.0 + b.norm()) * (b.nrows() as f64).sqrt();
    let asym = |q: &DMatrix<f64>| {
        let h = q.transpose() * b;
        (&h - h.transpose()).norm()
    };
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    let candidates: [&dyn Fn() -> Option<DMatrix<f64>>; 3] = [&|| newton_polar(b), &|| faer_polar(b), &|| {
        let svd = nalgebra::SVD::try_new(b.clone(), true, true, f64::EPSILON, 0)?;
        Some(svd.u? * svd.v_t?)
    }];
    for cand in candidates {
        if let Some(q) = cand() {
            let a = asym(&q);
            if a <= tol && orthogonality_defect(&q) < 1e-12 {
                return Ok(q);
            }
            if best.as_ref().is_none_or(|(ba, _)| a < *ba) {
                best = Some((a, q));
            }
        }
    }
    best.map(|(_, q)| q).ok_or_else(|| Error::Numeric("no SVD converged in the dictionary update".into()))
}

fn faer_polar(b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let svd = to_faer(b).svd().ok()?;
    let q = svd.U() * svd.V().transpose();
    Some(DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| q[(i, j)]))
}

fn newton_polar(b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let k = b.nrows() as f64;
    let mut x = b.clone();
    let mut scaled = true;
    for _ in 0..100 {
        let inv = x.clone().try_inverse()?;
        let (nx, ni) = (x.norm(), inv.norm());
        if !(nx * ni < 1e6) {
            return None;
        }
        let g = if scaled { (ni / nx).sqrt() } else { 1.0 };
        let next = (&x * g + inv.transpose() / g) * 0.5;
        let diff = (&next - &x).norm();
        x = next;
        if diff <= 1e-3 * k.sqrt() {
            scaled = false;
        }
        if diff <= 1e-14 * k.sqrt() {
            return Some(x);
        }
    }
    None
}

/// `argmin_C ½‖DC − X‖² + (λ_C/2)‖C − C_prev‖² + β‖C‖₁` for orthogonal `D`.
pub fn update_codes(
    x: &DMatrix<f64>,
    d: &DMatrix<f64>,
    c_prev: &DMatrix<f64>,
    beta: f64,
    lambda_c: f64,
) -> Result<SparseCodes> {
    check_shapes(x, d, c_prev)?;
    if !(beta >= 0.0) || !(lambda_c >= 0.0) {
        return Err(Error::InvalidParameter(format!("beta {beta} and lambda_C {lambda_c} must be non-negative")));
    }
    let defect = orthogonality_defect(d);
    if !(defect < ORTHOGONALITY_TOL) {
        return Err(Error::InvalidParameter(format!("dictionary is not orthogonal (‖DᵀD − I‖ = {defect:.3e})")));
    }
    let y = (d.transpose() * x + c_prev * lambda_c) / (1.0 + lambda_c);
    if beta == 0.0 {
        return Ok(y);
    }
    soft_threshold(&y, beta / (1.0 + lambda_c))
}

/// `½‖DC − X‖²_F + β‖C‖₁`.
pub fn dict_objective(x: &DMatrix<f64>, d: &DMatrix<f64>, c: &DMatrix<f64>, beta: f64) -> f64 {
    0.5 * (d * c - x).norm_squared() + beta * c.iter().map(|v| v.abs()).sum::<f64>()
}

/// Norm of the minimal-norm element of `∂g(D, C)` (with the `O_K` constraint).
///
/// D-part: distance of `∇_D f = (DC − X)Cᵀ` to the normal cone `{DS : S = Sᵀ}`,
/// i.e. `‖skew(Dᵀ∇_D f)‖_F`. C-part: the minimal-norm subgradient of the ℓ1 term
/// shifted by `∇_C f = Dᵀ(DC − X)`.
pub fn subgradient_residual(x: &DMatrix<f64>, d: &DMatrix<f64>, c: &DMatrix<f64>, beta: f64) -> f64 {
    let r = d * c - x;
    let s = d.transpose() * (&r * c.transpose());
    let skew = (&s - s.transpose()) * 0.5;
    let gc = d.transpose() * r;
    let c_part: f64 = gc
        .iter()
        .zip(c.iter())
        .map(|(&g, &cv)| {
            let v = if cv > 0.0 {
                g + beta
            } else if cv < 0.0 {
                g - beta
            } else {
                (g.abs() - beta).max(0.0)
            };
            v * v
        })
        .sum();
    (skew.norm_squared() + c_part).sqrt()
}

fn to_faer(x: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)])
}

/// Largest singular value.
pub fn spectral_norm(x: &DMatrix<f64>) -> Result<f64> {
    let s = to_faer(x).singular_values().map_err(|e| Error::Numeric(format!("singular values failed: {e:?}")))?;
    Ok(s.into_iter().fold(0.0, f64::max))
}

/// One row per sweep of [`dict_learn`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRecord {
    pub sweep: usize,
    pub objective: f64,
    pub step_d_sq: f64,
    pub step_c_sq: f64,
    pub sufficient_decrease: bool,
    pub residual: f64,
    pub sigma2: f64,
    pub residual_bound: bool,
    pub sigma2_data: f64,
    pub residual_bound_data: bool,
}

/// Per-run evidence that the iterates form a descent sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DescentCertificate {
    pub sigma1: f64,
    pub initial_objective: f64,
    pub eta: f64,
    pub sweeps: Vec<SweepRecord>,
    pub converged: bool,
    pub hit_max_iters: bool,
}

impl DescentCertificate {
    pub fn iterations(&self) -> usize {
        self.sweeps.len()
    }

    pub fn final_objective(&self) -> f64 {
        self.sweeps.last().map_or(self.initial_objective, |s| s.objective)
    }

    /// `g(z⁰) − g(z^{n_k})`.
    pub fn objective_drop(&self) -> f64 {
        self.initial_objective - self.final_objective()
    }

    /// `Σ_n ‖z^n − z^{n−1}‖²`.
    pub fn path_length_sq(&self) -> f64 {
        self.sweeps.iter().map(|s| s.step_d_sq + s.step_c_sq).sum()
    }

    /// Squared norm of the last step, `‖z^{n_k} − z^{n_k−1}‖²`.
    pub fn last_step_sq(&self) -> f64 {
        self.sweeps.last().map_or(0.0, |s| s.step_d_sq + s.step_c_sq)
    }

    pub fn all_sufficient_decrease(&self) -> bool {
        self.sweeps.iter().all(|s| s.sufficient_decrease)
    }

    pub fn all_residual_bounds(&self) -> bool {
        self.sweeps.iter().all(|s| s.residual_bound)
    }

    pub fn all_residual_bounds_data(&self) -> bool {
        self.sweeps.iter().all(|s| s.residual_bound_data)
    }

    /// Step-count bound `2(g(z⁰) − g(z^{n_k}))/(σ₁ η²)`.
    pub fn complexity_bound(&self) -> f64 {
        2.0 * self.objective_drop() / (self.sigma1 * self.eta * self.eta)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for s in &self.sweeps {
            wtr.serialize(s)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DictLearnOutput {
    pub d: Dictionary,
    pub c: SparseCodes,
    pub certificate: DescentCertificate,
}

/// Alternates the two closed-form updates until
/// `‖D_n − D_{n−1}‖² + ‖C_n − C_{n−1}‖² ≤ η²` or `max_iters` sweeps.
pub fn dict_learn(
    x: &DMatrix<f64>,
    d0: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    params: &DictLearnParams,
) -> Result<DictLearnOutput> {
    params.validate()?;
    check_shapes(x, d0, c0)?;
    let defect = orthogonality_defect(d0);
    if !(defect < ORTHOGONALITY_TOL) {
        return Err(Error::InvalidParameter(format!("initial dictionary is not orthogonal ({defect:.3e})")));
    }
    let sigma1 = params.lambda_d.min(params.lambda_c);
    let mut d = d0.clone();
    let mut c = c0.clone();
    let mut obj = dict_objective(x, &d, &c, params.beta);
    let mut sup_c = c.norm();
    let x_spec = spectral_norm(x)?;
    let tol = 1e-9 * (1.0 + x.norm());
    let mut cert = DescentCertificate {
        sigma1,
        initial_objective: obj,
        eta: params.eta,
        sweeps: Vec::new(),
        converged: false,
        hit_max_iters: false,
    };
    loop {
        let d_new = update_dictionary(x, &c, &d, params.lambda_d)?;
        let c_new = update_codes(x, &d_new, &c, params.beta, params.lambda_c)?;
        let step_d_sq = (&d_new - &d).norm_squared();
        let step_c_sq = (&c_new - &c).norm_squared();
        let step_sq = step_d_sq + step_c_sq;
        let obj_new = dict_objective(x, &d_new, &c_new, params.beta);
        if !obj_new.is_finite() {
            return Err(Error::Numeric("dictionary objective became non-finite".into()));
        }
        let slack = 1e-11 * obj.abs().max(1.0);
        let sufficient_decrease = obj_new <= obj - 0.5 * sigma1 * step_sq + slack;
        sup_c = sup_c.max(c_new.norm());
        let sigma2 = sup_c.max(params.lambda_c).max(params.lambda_d);
        let residual = subgradient_residual(x, &d_new, &c_new, params.beta);
        let residual_bound = residual <= sigma2 * step_sq.sqrt() + tol;
        let sigma2_data = sigma2.max((x_spec + params.lambda_c).hypot(params.lambda_d));
        let residual_bound_data = residual <= sigma2_data * step_sq.sqrt() + tol;
        cert.sweeps.push(SweepRecord {
            sweep: cert.sweeps.len() + 1,
            objective: obj_new,
            step_d_sq,
            step_c_sq,
            sufficient_decrease,
            residual,
            sigma2,
            residual_bound,
            sigma2_data,
            residual_bound_data,
        });
        d = d_new;
        c = c_new;
        obj = obj_new;
        if step_sq <= params.eta * params.eta {
            cert.converged = true;
            break;
        }
        if cert.sweeps.len() >= params.max_iters {
            cert.hit_max_iters = true;
            break;
        }
    }
    Ok(DictLearnOutput { d, c, certificate: cert })
}
