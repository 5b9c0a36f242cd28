//! Box-constrained convex QP `min ½xᵀHx + bᵀx  s.t. lo ≤ x ≤ hi`, solved by
//! gradient projection alternated with preconditioned conjugate gradients on
//! the current face.
//!
//! Each round takes one projected-gradient search (which updates the active
//! set, possibly by many variables at once) and then runs PCG on the
//! variables strictly inside the box. A PCG step that would leave the box is
//! replaced by a projected search along its direction. Termination is measured
//! by the norm of the projected gradient relative to its value at the start.

use crate::error::{Error, Result};

pub trait QpOperator {
    fn dim(&self) -> usize;

    /// `out = H x`.
    fn apply(&self, x: &[f64], out: &mut [f64]);

    /// `z ≈ H_FF⁻¹ r` on the free set; entries with `free[i] == false` must be 0.
    fn precondition(&self, r: &[f64], free: &[bool], z: &mut [f64]);
}

#[derive(Clone, Copy, Debug)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iters: usize,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Number of operator applications.
    pub iterations: usize,
    /// Final projected-gradient norm relative to the initial one.
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn projected_gradient(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64], out: &mut [f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        out[i] = if (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0) { 0.0 } else { g[i] };
        s += out[i] * out[i];
    }
    s.sqrt()
}

struct Work<'a, O: QpOperator> {
    op: &'a O,
    lo: &'a [f64],
    hi: &'a [f64],
    iterations: usize,
    max_iters: usize,
    pg0: f64,
    trial: Vec<f64>,
    step: Vec<f64>,
    h_step: Vec<f64>,
}

impl<O: QpOperator> Work<'_, O> {
    fn apply(&mut self, x: &[f64], out: &mut [f64]) {
        self.op.apply(x, out);
        self.iterations += 1;
    }

    /// Projected search `x ← P(x + t d)` with `t = t0, t0/2, …` until the model
    /// decreases sufficiently. Returns false if no decrease was found.
    fn projected_search(&mut self, x: &mut [f64], g: &mut [f64], d: &[f64], t0: f64) -> bool {
        let n = x.len();
        let mut t = t0;
        for _ in 0..60 {
            for i in 0..n {
                self.trial[i] = (x[i] + t * d[i]).clamp(self.lo[i], self.hi[i]);
                self.step[i] = self.trial[i] - x[i];
            }
            let lin = dot(g, &self.step);
            if !(lin < 0.0) {
                t *= 0.5;
                continue;
            }
            let step = std::mem::take(&mut self.step);
            let mut h_step = std::mem::take(&mut self.h_step);
            self.apply(&step, &mut h_step);
            let dq = lin + 0.5 * dot(&step, &h_step);
            let ok = dq <= 0.01 * lin;
            if ok {
                x.copy_from_slice(&self.trial);
                for i in 0..n {
                    g[i] += h_step[i];
                }
            }
            self.step = step;
            self.h_step = h_step;
            if ok {
                return true;
            }
            t *= 0.5;
        }
        false
    }

    fn check_budget(&self, pg: f64) -> Result<()> {
        if self.iterations >= self.max_iters {
            return Err(Error::QpNotConverged { iterations: self.iterations, residual: pg / self.pg0 });
        }
        Ok(())
    }
}

/// Solves the QP starting from the projection of 0 onto the box.
pub fn solve_box_qp<O: QpOperator>(op: &O, b: &[f64], lo: &[f64], hi: &[f64], opts: QpOptions) -> Result<QpSolution> {
    let n = op.dim();
    if b.len() != n || lo.len() != n || hi.len() != n {
        return Err(Error::Shape(format!("QP of dimension {n} with vectors {}, {}, {}", b.len(), lo.len(), hi.len())));
    }
    if (0..n).any(|i| !(lo[i] <= hi[i])) {
        return Err(Error::InvalidParameter("QP box is empty".into()));
    }
    let mut w = Work {
        op,
        lo,
        hi,
        iterations: 0,
        max_iters: opts.max_iters,
        pg0: 1.0,
        trial: vec![0.0; n],
        step: vec![0.0; n],
        h_step: vec![0.0; n],
    };
    let mut x: Vec<f64> = (0..n).map(|i| 0.0f64.clamp(lo[i], hi[i])).collect();
    let mut g = vec![0.0; n];
    w.apply(&x, &mut g);
    for i in 0..n {
        g[i] += b[i];
    }
    let mut pgv = vec![0.0; n];
    let pg0 = projected_gradient(&x, &g, lo, hi, &mut pgv);
    if pg0 == 0.0 {
        return Ok(QpSolution { x, iterations: w.iterations, residual: 0.0 });
    }
    if !pg0.is_finite() {
        return Err(Error::Numeric("non-finite QP gradient".into()));
    }
    w.pg0 = pg0;
    let target = opts.tol * pg0;

    let mut free = vec![false; n];
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut hp = vec![0.0; n];
    let mut neg = vec![0.0; n];
    loop {
        let pg = projected_gradient(&x, &g, lo, hi, &mut pgv);
        if pg <= target {
            return Ok(QpSolution { x, iterations: w.iterations, residual: pg / pg0 });
        }
        w.check_budget(pg)?;

        // gradient projection along the preconditioned projected gradient
        for i in 0..n {
            free[i] = pgv[i] != 0.0;
            r[i] = -pgv[i];
        }
        op.precondition(&r, &free, &mut z);
        if !(dot(&z, &r) > 0.0) {
            z.copy_from_slice(&r);
        }
        w.apply(&z, &mut hp);
        let curv = dot(&z, &hp);
        if !(curv > 0.0) {
            return Err(Error::Numeric(format!("QP operator is not positive definite (dᵀHd = {curv:e})")));
        }
        let t0 = dot(&z, &r) / curv;
        if !w.projected_search(&mut x, &mut g, &z, t0) {
            // fall back to the plain projected gradient
            neg.copy_from_slice(&r);
            let pg_sq = dot(&r, &r);
            w.apply(&neg, &mut hp);
            let t1 = pg_sq / dot(&neg, &hp);
            if !w.projected_search(&mut x, &mut g, &neg, t1) {
                let pg = projected_gradient(&x, &g, lo, hi, &mut pgv);
                return Err(Error::QpNotConverged { iterations: w.iterations, residual: pg / pg0 });
            }
        }

        // PCG on the face of the variables strictly inside the box
        for i in 0..n {
            free[i] = x[i] > lo[i] && x[i] < hi[i];
            r[i] = if free[i] { -g[i] } else { 0.0 };
        }
        let r0 = dot(&r, &r).sqrt();
        if r0 == 0.0 {
            continue;
        }
        op.precondition(&r, &free, &mut z);
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);
        loop {
            let pg = projected_gradient(&x, &g, lo, hi, &mut pgv);
            if pg <= target {
                break;
            }
            w.check_budget(pg)?;
            w.apply(&p, &mut hp);
            let curv = dot(&p, &hp);
            if !(curv > 0.0) {
                if rz == 0.0 {
                    break;
                }
                return Err(Error::Numeric(format!("QP operator is not positive definite (pᵀHp = {curv:e})")));
            }
            let step = rz / curv;
            let mut max_step = f64::INFINITY;
            for i in 0..n {
                if p[i] > 0.0 {
                    max_step = max_step.min((hi[i] - x[i]) / p[i]);
                } else if p[i] < 0.0 {
                    max_step = max_step.min((lo[i] - x[i]) / p[i]);
                }
            }
            if step > max_step {
                // leaving the face: projected search along p, then re-identify
                w.projected_search(&mut x, &mut g, &p, step);
                break;
            }
            for i in 0..n {
                x[i] += step * p[i];
                g[i] += step * hp[i];
                if free[i] {
                    r[i] -= step * hp[i];
                }
            }
            // face residual small relative to both the global target and the
            // start of this face: leave to the projection step
            let rn = dot(&r, &r).sqrt();
            if rn <= target || rn <= 1e-3 * r0 && pg_outside_face(&x, &g, lo, hi, &free) > rn {
                break;
            }
            op.precondition(&r, &free, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        // refresh the gradient to avoid drift from the incremental updates
        w.apply(&x, &mut g);
        for i in 0..n {
            g[i] += b[i];
        }
    }
}

/// Projected-gradient norm on the variables held at a bound.
fn pg_outside_face(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64], free: &[bool]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        if !free[i] && !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)) {
            s += g[i] * g[i];
        }
    }
    s.sqrt()
}
