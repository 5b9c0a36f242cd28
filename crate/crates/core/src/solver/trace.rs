//! Per-iteration trace of the outer loop and its CSV form.
//!
//! Column order of `trace_<variant>.csv` (one row per outer iteration; row 0
//! is the starting point and carries zeros in the step columns):
//!
//! | column | meaning |
//! |---|---|
//! | `k` | outer iteration index |
//! | `objective` | `J_d(u_k, D_k, C_k)` |
//! | `data_term` | `𝔥²/2 ‖F_d(u_k) − f‖²` |
//! | `grad_term` | `α/2 ‖∇u_k‖²_{U1}` |
//! | `dict_rho`, `dict_t1`, `dict_t2` | per-channel dictionary terms of `J_d` |
//! | `objective_pre_u` | `J_d(u_{k−1}, D_k, C_k)`, after the z-step and before the u-step |
//! | `lambda_k` | accepted damping parameter |
//! | `bt_trials` | number of damping values tried |
//! | `qp_iters` | operator applications of the accepted QP solve |
//! | `step_u_sq` | `‖u_k − u_{k−1}‖²_U + ‖∇(u_k − u_{k−1})‖²_{U1}` |
//! | `step_z_sq` | `Σ_j ‖ΔD_j‖² + ‖ΔC_j‖²` over the z-step |
//! | `eta` | inner tolerance `η` used in the z-step |
//! | `sigma_bt` | descent constant of the backtracking test |
//! | `sigma1` | inner sufficient-decrease constant `min(λ_D, λ_C)` |
//! | `inner_rho`, `inner_t1`, `inner_t2` | inner sweeps `n_k` per channel |
//! | `gdrop_rho`, `gdrop_t1`, `gdrop_t2` | drop of the inner objective `g_k(z_k) − g_k(z_{k+1})` |
//! | `path_rho`, `path_t1`, `path_t2` | `Σ_n ‖z^n − z^{n−1}‖²` over the inner sweeps |
//! | `last_inner_sq` | sum over channels of the squared last inner step |
//! | `cert_ok` | 1 if every inner sweep passed sufficient decrease and the residual test with `σ₂ˣ` |
//! | `sigma2_ok` | 1 if the residual test also held with `σ₂ = max(sup‖C‖_F, λ_C, λ_D)` |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub objective: f64,
    pub data_term: f64,
    pub grad_term: f64,
    pub dict_rho: f64,
    pub dict_t1: f64,
    pub dict_t2: f64,
    pub objective_pre_u: f64,
    pub lambda_k: f64,
    pub bt_trials: usize,
    pub qp_iters: usize,
    pub step_u_sq: f64,
    pub step_z_sq: f64,
    pub eta: f64,
    pub sigma_bt: f64,
    pub sigma1: f64,
    pub inner_rho: usize,
    pub inner_t1: usize,
    pub inner_t2: usize,
    pub gdrop_rho: f64,
    pub gdrop_t1: f64,
    pub gdrop_t2: f64,
    pub path_rho: f64,
    pub path_t1: f64,
    pub path_t2: f64,
    pub last_inner_sq: f64,
    pub cert_ok: u8,
    pub sigma2_ok: u8,
}

impl TraceRow {
    pub fn inner(&self) -> [usize; 3] {
        [self.inner_rho, self.inner_t1, self.inner_t2]
    }

    pub fn gdrop(&self) -> [f64; 3] {
        [self.gdrop_rho, self.gdrop_t1, self.gdrop_t2]
    }

    pub fn path(&self) -> [f64; 3] {
        [self.path_rho, self.path_t1, self.path_t2]
    }

    /// Step-count bound `2 Δg / (σ₁ η²)` per channel.
    pub fn complexity_bound(&self) -> [f64; 3] {
        self.gdrop().map(|g| 2.0 * g / (self.sigma1 * self.eta * self.eta))
    }
}

/// The backtracking acceptance test, shared by the solver and the diagnostics.
pub fn descent_holds(j_new: f64, j_pre: f64, sigma_bt: f64, lambda_k: f64, step_u_sq: f64) -> bool {
    j_new <= j_pre - 0.5 * sigma_bt * lambda_k * step_u_sq
}

pub fn write_trace<W: std::io::Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_trace_file(rows: &[TraceRow], path: &Path) -> Result<()> {
    write_trace(rows, std::fs::File::create(path)?)
}

pub fn read_trace<R: std::io::Read>(r: R) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<TraceRow>, _>>()?;
    Ok(rows)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRow>> {
    let f =
        std::fs::File::open(path).map_err(|e| Error::Config(format!("cannot open trace {}: {e}", path.display())))?;
    read_trace(f)
}

/// Per-iteration stationarity surrogate: scaled u-step, z-step and last inner step.
pub fn stationarity_residuals(trace: &[TraceRow]) -> Vec<f64> {
    trace.iter().skip(1).map(|r| r.step_u_sq.sqrt() + r.step_z_sq.sqrt() + r.last_inner_sq.sqrt()).collect()
}

/// Running minimum of [`stationarity_residuals`], the quantity bounded by
/// `C √((J₀ − J_N + Σ η_k²)/N)`.
pub fn stationarity_estimate(trace: &[TraceRow]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    stationarity_residuals(trace)
        .into_iter()
        .map(|r| {
            best = best.min(r);
            best
        })
        .collect()
}

/// Smallest `C` with `min_{k≤N} res_k ≤ C √((J₀ − J_N + Σ_{k≤N} η_k²)/N)` for all `N`.
pub fn envelope_constant(trace: &[TraceRow]) -> f64 {
    let est = stationarity_estimate(trace);
    let j0 = trace.first().map_or(0.0, |r| r.objective);
    let mut eta_sum = 0.0;
    let mut c: f64 = 0.0;
    for (n, (row, m)) in trace.iter().skip(1).zip(&est).enumerate() {
        eta_sum += row.eta * row.eta;
        let scale = ((j0 - row.objective + eta_sum) / (n + 1) as f64).max(0.0).sqrt();
        if scale > 0.0 {
            c = c.max(m / scale);
        }
    }
    c
}

/// Outcome of one trace invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Iteration index `k` of the first violating row.
    pub violation: Option<usize>,
    pub detail: String,
}

impl Check {
    fn from_first_violation(name: &'static str, rows: &[TraceRow], bad: impl Fn(usize, &TraceRow) -> bool) -> Self {
        let violation = rows.iter().enumerate().skip(1).find(|&(i, r)| bad(i, r)).map(|(_, r)| r.k);
        Check { name, passed: violation.is_none(), violation, detail: String::new() }
    }
}

/// Checks a saved trace: monotone objective, the backtracking descent test at
/// every accepted step, non-increase over each z-step, the inner descent
/// certificates, the inner step-count bound and the sublinear envelope.
pub fn diagnose(trace: &[TraceRow]) -> Result<Vec<Check>> {
    if trace.is_empty() {
        return Err(Error::Config("empty trace".into()));
    }
    let mut checks = vec![
        Check::from_first_violation("monotone_objective", trace, |i, r| !(r.objective <= trace[i - 1].objective)),
        Check::from_first_violation("descent_condition", trace, |_, r| {
            !descent_holds(r.objective, r.objective_pre_u, r.sigma_bt, r.lambda_k, r.step_u_sq)
        }),
        Check::from_first_violation("z_step_decrease", trace, |i, r| !(r.objective_pre_u <= trace[i - 1].objective)),
        Check::from_first_violation("inner_certificates", trace, |_, r| r.cert_ok != 1),
        Check::from_first_violation("inner_step_bound", trace, |_, r| {
            let bound = r.complexity_bound();
            r.inner().iter().zip(bound).any(|(&n, b)| n > 0 && n as f64 > b)
        }),
    ];
    let est = stationarity_estimate(trace);
    let c = envelope_constant(trace);
    let mut env = Check::from_first_violation("sublinear_envelope", trace, |i, _| i >= 2 && est[i - 1] > est[i - 2]);
    env.passed &= c.is_finite();
    env.detail = format!("C = {c:.4e}");
    checks.push(env);
    for ch in &mut checks {
        if ch.detail.is_empty() {
            ch.detail = match ch.violation {
                Some(k) => format!("first violation at k = {k}"),
                None => format!("{} rows", trace.len()),
            };
        }
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let rows: Vec<TraceRow> = (0..3)
            .map(|k| TraceRow {
                k,
                objective: 1.0 / (k as f64 + 3.0),
                eta: 0.1 * k as f64,
                cert_ok: 1,
                ..Default::default()
            })
            .collect();
        let mut buf = Vec::new();
        write_trace(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,objective,data_term,grad_term,dict_rho"));
        assert_eq!(read_trace(&buf[..]).unwrap(), rows);
    }

    fn good_trace() -> Vec<TraceRow> {
        (0..6)
            .map(|k| {
                let j = 10.0 / (k as f64 + 1.0);
                TraceRow {
                    k,
                    objective: j,
                    objective_pre_u: if k == 0 { 0.0 } else { j + 0.1 },
                    lambda_k: 1.0,
                    sigma_bt: 0.5,
                    sigma1: 1.0,
                    step_u_sq: if k == 0 { 0.0 } else { 0.1 },
                    eta: 1.0,
                    cert_ok: 1,
                    ..Default::default()
                }
            })
            .collect()
    }

    #[test]
    fn diagnose_accepts_valid_and_locates_corruption() {
        let rows = good_trace();
        assert!(diagnose(&rows).unwrap().iter().all(|c| c.passed));
        let mut bad = rows.clone();
        bad[3].objective = 100.0;
        let checks = diagnose(&bad).unwrap();
        let mono = checks.iter().find(|c| c.name == "monotone_objective").unwrap();
        assert_eq!((mono.passed, mono.violation), (false, Some(3)));
        assert!(matches!(diagnose(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn estimate_is_running_minimum() {
        let rows: Vec<TraceRow> = [0.0, 4.0, 1.0, 9.0, 0.25]
            .iter()
            .enumerate()
            .map(|(k, &s)| TraceRow { k, step_u_sq: s, objective: 10.0 - k as f64, ..Default::default() })
            .collect();
        assert_eq!(stationarity_estimate(&rows), vec![2.0, 1.0, 1.0, 0.5]);
        assert!(envelope_constant(&rows) > 0.0);
    }
}
