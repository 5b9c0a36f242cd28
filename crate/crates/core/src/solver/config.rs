//! Solver hyperparameters, presets and their `solver.*` config keys.

use crate::config::{fmt_f64, KeyValues};
use crate::error::{Error, Result};
use crate::forward::AdmissibleBox;

/// Named parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 256×256, L = 100, 16× undersampling.
    Paper16x,
    /// 256×256, L = 100, 32× undersampling.
    Paper32x,
    /// 64×64, L = 20, 8× undersampling; the default test target.
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper16x => "paper16x",
            Preset::Paper32x => "paper32x",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper16x" => Ok(Preset::Paper16x),
            "paper32x" => Ok(Preset::Paper32x),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected paper16x, paper32x or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Weight of the gradient penalty `α/2 ‖∇u‖²_{U1}`.
    pub alpha: f64,
    /// Per-channel dictionary weights `λʲ`.
    pub lambda: [f64; 3],
    /// Per-channel sparsity weights `β_j`.
    pub beta: [f64; 3],
    /// Norm and patch scalings `(M₁, M₂, M₃)`.
    pub m_scale: [f64; 3],
    pub lambda0: f64,
    pub tau: f64,
    pub sigma_bt: f64,
    pub gamma: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub max_outer: usize,
    pub bounds: AdmissibleBox,
    /// Undersampling factor of the Hessian surrogate; `None` takes it from the data.
    pub r: Option<f64>,
    /// Mesh size `𝔥`.
    pub h: f64,
    /// Patch side length (`K = p²`).
    pub p: usize,
    pub lambda_d: f64,
    pub lambda_c: f64,
    /// Inner tolerance scale; `None` uses `√(‖C₀‖² + ‖D₀‖²)`.
    pub eta0: Option<f64>,
    pub tol_qp: f64,
    pub max_qp_iters: usize,
    pub max_inner: usize,
    pub bt_cap: usize,
    pub lm_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper16x)
    }
}

impl SolverConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            alpha: 1e-3,
            lambda: [45.0; 3],
            beta: [0.0045; 3],
            m_scale: [100.0, 260.0, 260.0],
            lambda0: 1.0,
            tau: 8.0,
            sigma_bt: 0.5,
            gamma: 0.75,
            eps1: 1e-4,
            eps2: 1e-4,
            max_outer: 100,
            bounds: AdmissibleBox::default(),
            r: None,
            h: 1.0,
            p: 8,
            lambda_d: 1.0,
            lambda_c: 1.0,
            eta0: None,
            tol_qp: 1e-8,
            max_qp_iters: 5000,
            max_inner: 50,
            bt_cap: 40,
            lm_iters: 100,
        };
        match preset {
            Preset::Paper16x => base,
            Preset::Paper32x => Self { lambda: [50.0; 3], beta: [0.0095; 3], ..base },
            Preset::Desk => Self { alpha: 1e-3, lambda: [5.0; 3], beta: [1.0; 3], max_outer: 40, lm_iters: 40, ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.tau > 1.0) {
            return bad(format!("solver.tau = {} must exceed 1", self.tau));
        }
        if !(self.sigma_bt > 0.0 && self.sigma_bt < 1.0) {
            return bad(format!("solver.sigma_BT = {} must lie in (0, 1)", self.sigma_bt));
        }
        if !(self.alpha >= 0.0) || self.lambda.iter().any(|&v| !(v >= 0.0)) || self.beta.iter().any(|&v| !(v >= 0.0)) {
            return bad("solver.alpha, solver.lambda and solver.beta must be non-negative".into());
        }
        if self.m_scale.iter().any(|&v| !(v > 0.0)) {
            return bad("solver.M entries must be positive".into());
        }
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("gamma", self.gamma),
            ("eps1", self.eps1),
            ("eps2", self.eps2),
            ("h", self.h),
            ("lambda_D", self.lambda_d),
            ("lambda_C", self.lambda_c),
            ("tol_qp", self.tol_qp),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("solver.{name} = {v} must be positive"));
            }
        }
        if let Some(r) = self.r {
            if !(r >= 1.0) {
                return bad(format!("solver.r = {r} must be at least 1"));
            }
        }
        if let Some(e) = self.eta0 {
            if !(e > 0.0) {
                return bad(format!("solver.eta0 = {e} must be positive"));
            }
        }
        if self.p == 0 || self.max_qp_iters == 0 || self.max_inner == 0 || self.bt_cap == 0 {
            return bad("solver.p, max_qp_iters, max_inner and bt_cap must be positive".into());
        }
        AdmissibleBox::new(self.bounds.lower, self.bounds.upper).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Overrides fields from `solver.*` keys, consuming them.
    pub fn apply_kv(&mut self, kv: &mut KeyValues) -> Result<()> {
        macro_rules! scalar {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.take($key)? {
                    $field = v;
                }
            };
        }
        macro_rules! triple {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.take_triple($key)? {
                    $field = v;
                }
            };
        }
        scalar!("solver.alpha", self.alpha);
        triple!("solver.lambda", self.lambda);
        triple!("solver.beta", self.beta);
        triple!("solver.M", self.m_scale);
        scalar!("solver.lambda0", self.lambda0);
        scalar!("solver.tau", self.tau);
        scalar!("solver.sigma_BT", self.sigma_bt);
        scalar!("solver.gamma", self.gamma);
        scalar!("solver.eps1", self.eps1);
        scalar!("solver.eps2", self.eps2);
        scalar!("solver.max_outer", self.max_outer);
        triple!("solver.lower", self.bounds.lower);
        triple!("solver.upper", self.bounds.upper);
        if let Some(v) = kv.take_raw("solver.r") {
            self.r = parse_optional(&v, "solver.r")?;
        }
        scalar!("solver.h", self.h);
        scalar!("solver.p", self.p);
        scalar!("solver.lambda_D", self.lambda_d);
        scalar!("solver.lambda_C", self.lambda_c);
        if let Some(v) = kv.take_raw("solver.eta0") {
            self.eta0 = parse_optional(&v, "solver.eta0")?;
        }
        scalar!("solver.tol_qp", self.tol_qp);
        scalar!("solver.max_qp_iters", self.max_qp_iters);
        scalar!("solver.max_inner", self.max_inner);
        scalar!("solver.bt_cap", self.bt_cap);
        scalar!("solver.lm_iters", self.lm_iters);
        self.validate()
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        let triple = |v: [f64; 3]| v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>();
        let opt = |v: Option<f64>| v.map_or_else(|| "auto".to_string(), fmt_f64);
        kv.set("solver.alpha", fmt_f64(self.alpha));
        kv.set_list("solver.lambda", &triple(self.lambda));
        kv.set_list("solver.beta", &triple(self.beta));
        kv.set_list("solver.M", &triple(self.m_scale));
        kv.set("solver.lambda0", fmt_f64(self.lambda0));
        kv.set("solver.tau", fmt_f64(self.tau));
        kv.set("solver.sigma_BT", fmt_f64(self.sigma_bt));
        kv.set("solver.gamma", fmt_f64(self.gamma));
        kv.set("solver.eps1", fmt_f64(self.eps1));
        kv.set("solver.eps2", fmt_f64(self.eps2));
        kv.set("solver.max_outer", self.max_outer.to_string());
        kv.set_list("solver.lower", &triple(self.bounds.lower));
        kv.set_list("solver.upper", &triple(self.bounds.upper));
        kv.set("solver.r", opt(self.r));
        kv.set("solver.h", fmt_f64(self.h));
        kv.set("solver.p", self.p.to_string());
        kv.set("solver.lambda_D", fmt_f64(self.lambda_d));
        kv.set("solver.lambda_C", fmt_f64(self.lambda_c));
        kv.set("solver.eta0", opt(self.eta0));
        kv.set("solver.tol_qp", fmt_f64(self.tol_qp));
        kv.set("solver.max_qp_iters", self.max_qp_iters.to_string());
        kv.set("solver.max_inner", self.max_inner.to_string());
        kv.set("solver.bt_cap", self.bt_cap.to_string());
        kv.set("solver.lm_iters", self.lm_iters.to_string());
    }

    /// Weights `𝔥²/M_c²` of the scaled norms.
    pub fn norm_weights(&self) -> [f64; 3] {
        std::array::from_fn(|c| self.h * self.h / (self.m_scale[c] * self.m_scale[c]))
    }
}

fn parse_optional(v: &str, key: &str) -> Result<Option<f64>> {
    if v == "auto" {
        return Ok(None);
    }
    v.parse().map(Some).map_err(|_| Error::Config(format!("bad value for `{key}`: `{v}`")))
}
