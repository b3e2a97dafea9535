//! Partial Legendre transform.
//!
//! Momenta exist only for the canonical sector: p_i = dL/dqd_i. Canonical
//! velocities are recovered from the momenta by Newton iteration with the
//! canonical Hessian block as Jacobian; the partial Hamiltonian H0 and the
//! additional Hamiltonians H_alpha are then evaluated with the solved
//! velocities substituted. Phase-space derivatives propagate through the
//! solve by implicit differentiation (the velocity response solves a linear
//! system with the same Hessian block), so they are exact up to the Newton
//! tolerance — finite differences are kept only as a test oracle.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::Binding;
use crate::linalg::{Lu, Mat};
use crate::model::{LagrangianSystem, Partition};

/// Point of the reduced phase space.
///
/// `q_c`/`p` hold the canonical sector in permuted slot order, `q_nc` the
/// noncanonical coordinates. `qd_nc` is optional: absent in the nondynamical
/// regime (evaluators then use zeros; condition checks confirm the choice is
/// immaterial). `p_nc` exists only for extended-space constraint analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub t: f64,
    pub q_c: Vec<f64>,
    pub p: Vec<f64>,
    pub q_nc: Vec<f64>,
    pub qd_nc: Option<Vec<f64>>,
    pub p_nc: Option<Vec<f64>>,
}

impl PhasePoint {
    pub fn new(t: f64, q_c: Vec<f64>, p: Vec<f64>, q_nc: Vec<f64>) -> Self {
        debug_assert_eq!(q_c.len(), p.len());
        PhasePoint { t, q_c, p, q_nc, qd_nc: None, p_nc: None }
    }

    pub fn with_qd_nc(mut self, qd_nc: Vec<f64>) -> Self {
        debug_assert_eq!(qd_nc.len(), self.q_nc.len());
        self.qd_nc = Some(qd_nc);
        self
    }

    pub fn with_p_nc(mut self, p_nc: Vec<f64>) -> Self {
        debug_assert_eq!(p_nc.len(), self.q_nc.len());
        self.p_nc = Some(p_nc);
        self
    }

    pub fn qd_nc_or_zero(&self) -> Vec<f64> {
        self.qd_nc.clone().unwrap_or_else(|| vec![0.0; self.q_nc.len()])
    }
}

/// Which Hamiltonian of the bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ham {
    H0,
    /// Additional Hamiltonian for noncanonical slot `a` (0-based).
    Alpha(usize),
}

/// Gradient of a Hamiltonian on the reduced space, indexed by permuted slots.
#[derive(Debug, Clone)]
pub struct HamGrad {
    pub value: f64,
    pub d_dq_c: Vec<f64>,
    pub d_dp: Vec<f64>,
    pub d_dq_nc: Vec<f64>,
    pub d_dqd_nc: Vec<f64>,
    pub d_dt: f64,
}

/// Newton settings for the velocity solve.
#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings { tol: 1e-12, max_iter: 50 }
    }
}

/// Numeric evaluators for H0 and H_alpha over one system + partition.
#[derive(Debug, Clone)]
pub struct HamiltonianBundle {
    pub sys: Arc<LagrangianSystem>,
    pub partition: Partition,
    pub newton: NewtonSettings,
    pub pivot_tol: f64,
}

/// Everything evaluated at one converged phase point.
pub struct Frame {
    /// Solved canonical velocities, permuted slot order.
    pub v: Vec<f64>,
    /// Full original-order binding with the solved velocities substituted.
    pub binding: Binding,
    w: Mat,
    w_cc_lu: Option<Lu>,
    dl_dqd: Vec<f64>,
    dl_dq: Vec<f64>,
    dl_dt: f64,
    d2_qd_q: Mat,
    d2_qd_t: Vec<f64>,
    l_value: f64,
}

/// Gradients for H0 and every H_alpha at one point, sharing one solve.
pub struct GradBundle {
    pub v: Vec<f64>,
    pub h0: HamGrad,
    pub h_alpha: Vec<HamGrad>,
}

impl HamiltonianBundle {
    pub fn new(sys: Arc<LagrangianSystem>, partition: Partition, pivot_tol: f64) -> Self {
        HamiltonianBundle { sys, partition, newton: NewtonSettings::default(), pivot_tol }
    }

    fn assemble_binding(&self, x: &PhasePoint, v: &[f64]) -> Binding {
        let part = &self.partition;
        let q = part.to_original(&x.q_c, &x.q_nc);
        let qd_nc = x.qd_nc_or_zero();
        let mut qd = vec![0.0; part.n];
        for (i, &vi) in v.iter().enumerate() {
            qd[part.canonical(i)] = vi;
        }
        for (a, &ua) in qd_nc.iter().enumerate() {
            qd[part.noncanonical(a)] = ua;
        }
        Binding::new(x.t, q, qd)
    }

    /// Newton iteration on dL/dqd_i(v) = p_i with the canonical Hessian
    /// block as Jacobian.
    pub fn solve_canonical_velocities(
        &self,
        x: &PhasePoint,
        guess: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let part = &self.partition;
        let n_p = part.n_p;
        if n_p == 0 {
            return Ok(vec![]);
        }
        let mut v: Vec<f64> = match guess {
            Some(g) => g.to_vec(),
            None => vec![0.0; n_p],
        };
        let mut residual = f64::INFINITY;
        for _ in 0..self.newton.max_iter {
            let binding = self.assemble_binding(x, &v);
            let mut f = vec![0.0; n_p];
            for i in 0..n_p {
                f[i] = self.sys.eval(&self.sys.dl_dqd[part.canonical(i)], &binding)? - x.p[i];
            }
            residual = f.iter().fold(0.0_f64, |m, &fi| m.max(fi.abs()));
            if residual <= self.newton.tol {
                return Ok(v);
            }
            let mut jac = Mat::zeros(n_p, n_p);
            for i in 0..n_p {
                for j in 0..n_p {
                    jac.set(
                        i,
                        j,
                        self.sys
                            .eval(&self.sys.w[part.canonical(i)][part.canonical(j)], &binding)?,
                    );
                }
            }
            let lu = Lu::factor(&jac, self.pivot_tol)?;
            let neg_f: Vec<f64> = f.iter().map(|&fi| -fi).collect();
            let delta = lu.solve(&neg_f);
            for (vi, di) in v.iter_mut().zip(&delta) {
                *vi += di;
            }
        }
        Err(Error::NoConvergence { iterations: self.newton.max_iter, residual })
    }

    /// Solve the velocities and evaluate every derivative table once.
    pub fn frame(&self, x: &PhasePoint, guess: Option<&[f64]>) -> Result<Frame> {
        let part = &self.partition;
        let n = part.n;
        let v = self.solve_canonical_velocities(x, guess)?;
        let binding = self.assemble_binding(x, &v);
        let mut w = Mat::zeros(n, n);
        let mut d2_qd_q = Mat::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                w.set(a, b, self.sys.eval(&self.sys.w[a][b], &binding)?);
                d2_qd_q.set(a, b, self.sys.eval(&self.sys.d2l_dqd_dq[a][b], &binding)?);
            }
        }
        let dl_dqd: Vec<f64> = (0..n)
            .map(|a| self.sys.eval(&self.sys.dl_dqd[a], &binding))
            .collect::<Result<_>>()?;
        let dl_dq: Vec<f64> = (0..n)
            .map(|a| self.sys.eval(&self.sys.dl_dq[a], &binding))
            .collect::<Result<_>>()?;
        let d2_qd_t: Vec<f64> = (0..n)
            .map(|a| self.sys.eval(&self.sys.d2l_dqd_dt[a], &binding))
            .collect::<Result<_>>()?;
        let dl_dt = self.sys.eval(&self.sys.dl_dt, &binding)?;
        let l_value = self.sys.eval(&self.sys.lagrangian, &binding)?;
        let w_cc_lu = if part.n_p > 0 {
            let mut cc = Mat::zeros(part.n_p, part.n_p);
            for i in 0..part.n_p {
                for j in 0..part.n_p {
                    cc.set(i, j, w.at(part.canonical(i), part.canonical(j)));
                }
            }
            Some(Lu::factor(&cc, self.pivot_tol)?)
        } else {
            None
        };
        Ok(Frame { v, binding, w, w_cc_lu, dl_dqd, dl_dq, dl_dt, d2_qd_q, d2_qd_t, l_value })
    }

    fn h0_of(&self, frame: &Frame, x: &PhasePoint) -> f64 {
        let part = &self.partition;
        let qd_nc = x.qd_nc_or_zero();
        let mut h0 = -frame.l_value;
        for i in 0..part.n_p {
            h0 += x.p[i] * frame.v[i];
        }
        for (a, &ua) in qd_nc.iter().enumerate() {
            h0 += frame.dl_dqd[part.noncanonical(a)] * ua;
        }
        h0
    }

    fn h_alpha_of(&self, frame: &Frame) -> Vec<f64> {
        let part = &self.partition;
        (0..part.n_nc())
            .map(|a| -frame.dl_dqd[part.noncanonical(a)])
            .collect()
    }

    /// H0 = p_i qd_i + (dL/dqd_alpha) qd_alpha - L with solved velocities.
    pub fn eval_h0(&self, x: &PhasePoint) -> Result<f64> {
        let frame = self.frame(x, None)?;
        Ok(self.h0_of(&frame, x))
    }

    /// H_alpha = -dL/dqd_alpha with solved velocities.
    pub fn eval_h_alpha(&self, x: &PhasePoint) -> Result<Vec<f64>> {
        let frame = self.frame(x, None)?;
        Ok(self.h_alpha_of(&frame))
    }

    /// H0 and H_alpha together (one solve).
    pub fn eval_all(&self, x: &PhasePoint) -> Result<(f64, Vec<f64>)> {
        let frame = self.frame(x, None)?;
        Ok((self.h0_of(&frame, x), self.h_alpha_of(&frame)))
    }

    /// Velocity response to a unit perturbation yielding the column `rhs` on
    /// the right-hand side of W_cc dv = rhs.
    fn response(&self, frame: &Frame, rhs: &[f64]) -> Vec<f64> {
        match &frame.w_cc_lu {
            Some(lu) => lu.solve(rhs),
            None => vec![],
        }
    }

    /// S_R(dv) = sum_i W[R][canonical_i] dv_i, the chain contribution of the
    /// velocity response to any row R of the derivative tables.
    fn chain(&self, frame: &Frame, orig_row: usize, dv: &[f64]) -> f64 {
        let part = &self.partition;
        dv.iter()
            .enumerate()
            .map(|(i, &dvi)| frame.w.at(orig_row, part.canonical(i)) * dvi)
            .sum()
    }

    /// Gradients of H0 and every H_alpha at `x`.
    pub fn grads_all(&self, x: &PhasePoint) -> Result<GradBundle> {
        let frame = self.frame(x, None)?;
        self.grads_from_frame(&frame, x)
    }

    /// As [`grads_all`](Self::grads_all) with a warm-start guess.
    pub fn grads_all_warm(&self, x: &PhasePoint, guess: Option<&[f64]>) -> Result<GradBundle> {
        let frame = self.frame(x, guess)?;
        self.grads_from_frame(&frame, x)
    }

    /// Gradients from an already solved frame.
    pub fn grads_from_frame(&self, frame: &Frame, x: &PhasePoint) -> Result<GradBundle> {
        let part = &self.partition;
        let n_p = part.n_p;
        let n_nc = part.n_nc();
        let qd_nc = x.qd_nc_or_zero();

        // velocity responses: columns of dv/dp, dv/dq_B, dv/dt, dv/du_beta
        let mut dv_dp: Vec<Vec<f64>> = Vec::with_capacity(n_p);
        for j in 0..n_p {
            let mut e = vec![0.0; n_p];
            e[j] = 1.0;
            dv_dp.push(self.response(frame, &e));
        }
        let neg_col = |col: Vec<f64>| -> Vec<f64> { col.into_iter().map(|v| -v).collect() };
        let mut dv_dq: Vec<Vec<f64>> = Vec::with_capacity(part.n);
        for b in 0..part.n {
            let col: Vec<f64> = (0..n_p)
                .map(|i| frame.d2_qd_q.at(part.canonical(i), b))
                .collect();
            dv_dq.push(self.response(frame, &neg_col(col)));
        }
        let dt_col: Vec<f64> = (0..n_p).map(|i| frame.d2_qd_t[part.canonical(i)]).collect();
        let dv_dt = self.response(frame, &neg_col(dt_col));
        let mut dv_du: Vec<Vec<f64>> = Vec::with_capacity(n_nc);
        for b in 0..n_nc {
            let col: Vec<f64> = (0..n_p)
                .map(|i| frame.w.at(part.canonical(i), part.noncanonical(b)))
                .collect();
            dv_du.push(self.response(frame, &neg_col(col)));
        }

        // H0 gradient
        let h0_value = self.h0_of(frame, x);
        let nc_weight = |dv: &[f64], explicit: &dyn Fn(usize) -> f64| -> f64 {
            // sum_alpha u_alpha (explicit_alpha + chain_alpha(dv))
            qd_nc
                .iter()
                .enumerate()
                .map(|(a, &ua)| {
                    let row = part.noncanonical(a);
                    ua * (explicit(row) + self.chain(frame, row, dv))
                })
                .sum()
        };
        let h0 = HamGrad {
            value: h0_value,
            d_dp: (0..n_p)
                .map(|j| frame.v[j] + nc_weight(&dv_dp[j], &|_| 0.0))
                .collect(),
            d_dq_c: (0..n_p)
                .map(|j| {
                    let b = part.canonical(j);
                    -frame.dl_dq[b] + nc_weight(&dv_dq[b], &|row| frame.d2_qd_q.at(row, b))
                })
                .collect(),
            d_dq_nc: (0..n_nc)
                .map(|a| {
                    let b = part.noncanonical(a);
                    -frame.dl_dq[b] + nc_weight(&dv_dq[b], &|row| frame.d2_qd_q.at(row, b))
                })
                .collect(),
            d_dqd_nc: (0..n_nc)
                .map(|b| {
                    nc_weight(&dv_du[b], &|row| frame.w.at(row, part.noncanonical(b)))
                })
                .collect(),
            d_dt: -frame.dl_dt + nc_weight(&dv_dt, &|row| frame.d2_qd_t[row]),
        };

        // H_alpha gradients
        let h_alpha: Vec<HamGrad> = (0..n_nc)
            .map(|a| {
                let row = part.noncanonical(a);
                HamGrad {
                    value: -frame.dl_dqd[row],
                    d_dp: (0..n_p).map(|j| -self.chain(frame, row, &dv_dp[j])).collect(),
                    d_dq_c: (0..n_p)
                        .map(|j| {
                            let b = part.canonical(j);
                            -(frame.d2_qd_q.at(row, b) + self.chain(frame, row, &dv_dq[b]))
                        })
                        .collect(),
                    d_dq_nc: (0..n_nc)
                        .map(|aa| {
                            let b = part.noncanonical(aa);
                            -(frame.d2_qd_q.at(row, b) + self.chain(frame, row, &dv_dq[b]))
                        })
                        .collect(),
                    d_dqd_nc: (0..n_nc)
                        .map(|b| {
                            -(frame.w.at(row, part.noncanonical(b))
                                + self.chain(frame, row, &dv_du[b]))
                        })
                        .collect(),
                    d_dt: -(frame.d2_qd_t[row] + self.chain(frame, row, &dv_dt)),
                }
            })
            .collect();

        Ok(GradBundle { v: frame.v.clone(), h0, h_alpha })
    }

    /// Gradient of one Hamiltonian.
    pub fn grad(&self, x: &PhasePoint, which: Ham) -> Result<HamGrad> {
        let mut bundle = self.grads_all(x)?;
        Ok(match which {
            Ham::H0 => bundle.h0,
            Ham::Alpha(a) => bundle.h_alpha.swap_remove(a),
        })
    }

    /// Solve the full second-order equations for the accelerations at `x`
    /// (velocity-dependent regime): W a = dL/dq - d2L/dqd dq · qd - d2L/dqd dt.
    ///
    /// Returns the solved canonical velocities, the noncanonical
    /// accelerations in slot order, and the linear-solve residual. Requires
    /// an invertible full Hessian.
    pub fn lagrangian_accelerations(
        &self,
        x: &PhasePoint,
        guess: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let frame = self.frame(x, guess)?;
        self.accelerations_from_frame(&frame)
    }

    /// As [`lagrangian_accelerations`](Self::lagrangian_accelerations) on an
    /// already solved frame.
    pub fn accelerations_from_frame(&self, frame: &Frame) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let part = &self.partition;
        let n = part.n;
        let mut rhs = vec![0.0; n];
        for a in 0..n {
            let mut v = frame.dl_dq[a] - frame.d2_qd_t[a];
            for b in 0..n {
                v -= frame.d2_qd_q.at(a, b) * frame.binding.qd[b];
            }
            rhs[a] = v;
        }
        let lu = Lu::factor(&frame.w, self.pivot_tol)?;
        let accel = lu.solve(&rhs);
        let mut residual = 0.0_f64;
        for a in 0..n {
            let mut v = -rhs[a];
            for b in 0..n {
                v += frame.w.at(a, b) * accel[b];
            }
            residual = residual.max(v.abs());
        }
        let a_nc = (0..part.n_nc())
            .map(|s| accel[part.noncanonical(s)])
            .collect();
        Ok((frame.v.clone(), a_nc, residual))
    }

    /// Max deviation of (H0, H_alpha) between two fixed noncanonical
    /// velocity assignments; zero (to rounding) in the nondynamical regime.
    pub fn condition42_deviation(&self, x: &PhasePoint) -> Result<f64> {
        let n_nc = self.partition.n_nc();
        if n_nc == 0 {
            return Ok(0.0);
        }
        let probe = |offsets: Vec<f64>| -> Result<(f64, Vec<f64>)> {
            let mut y = x.clone();
            y.qd_nc = Some(offsets);
            self.eval_all(&y)
        };
        let u1: Vec<f64> = (0..n_nc).map(|a| 0.731 - 0.170 * a as f64).collect();
        let u2: Vec<f64> = (0..n_nc).map(|a| -0.413 + 0.229 * a as f64).collect();
        let (h0_1, ha_1) = probe(u1)?;
        let (h0_2, ha_2) = probe(u2)?;
        let mut dev = (h0_1 - h0_2).abs();
        for (a, b) in ha_1.iter().zip(&ha_2) {
            dev = dev.max((a - b).abs());
        }
        Ok(dev)
    }

    /// Error unless the Hamiltonians are independent of the noncanonical
    /// velocities at `x` (agreement below `tol`).
    pub fn require_nondynamical(&self, x: &PhasePoint, tol: f64) -> Result<()> {
        let dev = self.condition42_deviation(x)?;
        if dev > tol {
            return Err(Error::Condition42Violation { deviation: dev });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{analyze_hessian, default_probes, parse_model, DEFAULT_SEED, PIVOT_TOL};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn bundle_for(text: &str, n_p: Option<usize>) -> HamiltonianBundle {
        let sys = Arc::new(parse_model(text).unwrap());
        let probes = default_probes(sys.n, DEFAULT_SEED);
        let part = analyze_hessian(&sys, &probes, PIVOT_TOL, n_p).unwrap();
        HamiltonianBundle::new(sys, part, PIVOT_TOL)
    }

    const OSC1: &str = "name = osc1\ncoords = q1\nlagrangian = qd1^2/2 - q1^2/2";
    const OSC2: &str =
        "name = osc2\ncoords = q1, q2\nlagrangian = (qd1^2 + qd2^2)/2 - q1^2/2 - 2*q2^2";
    const FIRSTORDER: &str =
        "name = firstorder\ncoords = q1, q2\nlagrangian = q2*qd1 - 0.5*(q1^2 + q2^2)";
    const GAUGE1: &str = "name = gauge1\ncoords = q1, q2\nlagrangian = (qd1 - q2)^2/2";

    #[test]
    fn linear_momenta_invert_in_one_step() {
        let b = bundle_for(OSC1, None);
        let x = PhasePoint::new(0.0, vec![0.0], vec![0.7], vec![]);
        let v = b.solve_canonical_velocities(&x, None).unwrap();
        assert_eq!(v, vec![0.7]);
    }

    #[test]
    fn gauge_model_velocity_recovery() {
        // p1 = qd1 - q2, so p1 = 0.5, q2 = 0.2 gives qd1 = 0.7
        let b = bundle_for(GAUGE1, None);
        let x = PhasePoint::new(0.0, vec![0.0], vec![0.5], vec![0.2]);
        let v = b.solve_canonical_velocities(&x, None).unwrap();
        assert!((v[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn empty_canonical_sector() {
        let b = bundle_for(FIRSTORDER, None);
        let x = PhasePoint::new(0.0, vec![], vec![], vec![1.0, 2.0]);
        assert!(b.solve_canonical_velocities(&x, None).unwrap().is_empty());
    }

    #[test]
    fn h0_of_oscillator() {
        let b = bundle_for(OSC1, None);
        let x = PhasePoint::new(0.0, vec![1.0], vec![1.0], vec![]);
        assert!((b.eval_h0(&x).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn h0_and_h_alpha_of_first_order_model() {
        // hand Legendre at n_p = 0: H0 = (q1^2 + q2^2)/2, H = (-q2, 0)
        let b = bundle_for(FIRSTORDER, None);
        let x = PhasePoint::new(0.0, vec![], vec![], vec![1.0, 2.0]);
        let (h0, ha) = b.eval_all(&x).unwrap();
        assert!((h0 - 2.5).abs() < 1e-14);
        assert!((ha[0] - (-2.0)).abs() < 1e-14);
        assert!(ha[1].abs() < 1e-14);
    }

    #[test]
    fn h0_and_h2_of_gauge_model() {
        // hand Legendre on the q1 sector: H0 = p1^2/2 + p1 q2, H2 = 0
        let b = bundle_for(GAUGE1, None);
        let x = PhasePoint::new(0.0, vec![0.0], vec![0.5], vec![0.2]);
        let (h0, ha) = b.eval_all(&x).unwrap();
        assert!((h0 - 0.225).abs() < 1e-14);
        assert!(ha[0].abs() < 1e-14);
    }

    #[test]
    fn grad_examples() {
        let b = bundle_for(OSC1, None);
        let x = PhasePoint::new(0.0, vec![0.3], vec![0.7], vec![]);
        let g = b.grad(&x, Ham::H0).unwrap();
        assert!((g.d_dp[0] - 0.7).abs() < 1e-12);
        assert!((g.d_dq_c[0] - 0.3).abs() < 1e-12);

        let b = bundle_for(GAUGE1, None);
        let x = PhasePoint::new(0.0, vec![0.1], vec![0.5], vec![0.2]);
        let g = b.grad(&x, Ham::H0).unwrap();
        assert!((g.d_dq_nc[0] - 0.5).abs() < 1e-12); // dH0/dq2 = p1

        let b = bundle_for(FIRSTORDER, None);
        let x = PhasePoint::new(0.0, vec![], vec![], vec![1.0, 2.0]);
        let g = b.grad(&x, Ham::Alpha(0)).unwrap();
        assert!((g.d_dq_nc[1] - (-1.0)).abs() < 1e-12); // dH1/dq2 = -1
    }

    /// Central-difference oracle over phase-point slots.
    fn fd_check(b: &HamiltonianBundle, x: &PhasePoint, which: Ham) {
        let eval = |y: &PhasePoint| -> f64 {
            match which {
                Ham::H0 => b.eval_h0(y).unwrap(),
                Ham::Alpha(a) => b.eval_h_alpha(y).unwrap()[a],
            }
        };
        let g = b.grad(x, which).unwrap();
        let check = |analytic: f64, plus: PhasePoint, minus: PhasePoint, h: f64, what: &str| {
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() <= 1e-6 * (1.0 + analytic.abs()),
                "{what}: analytic {analytic}, numeric {numeric}"
            );
        };
        for j in 0..x.q_c.len() {
            let h = 1e-6 * (1.0 + x.q_c[j].abs());
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.q_c[j] += h;
            minus.q_c[j] -= h;
            check(g.d_dq_c[j], plus, minus, h, "d/dq_c");
            let h = 1e-6 * (1.0 + x.p[j].abs());
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.p[j] += h;
            minus.p[j] -= h;
            check(g.d_dp[j], plus, minus, h, "d/dp");
        }
        for a in 0..x.q_nc.len() {
            let h = 1e-6 * (1.0 + x.q_nc[a].abs());
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.q_nc[a] += h;
            minus.q_nc[a] -= h;
            check(g.d_dq_nc[a], plus, minus, h, "d/dq_nc");
            let u = x.qd_nc_or_zero();
            let h = 1e-6 * (1.0 + u[a].abs());
            let mut up = u.clone();
            let mut um = u.clone();
            up[a] += h;
            um[a] -= h;
            let plus = x.clone().with_qd_nc(up);
            let minus = x.clone().with_qd_nc(um);
            check(g.d_dqd_nc[a], plus, minus, h, "d/dqd_nc");
        }
        let h = 1e-6 * (1.0 + x.t.abs());
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.t += h;
        minus.t -= h;
        check(g.d_dt, plus, minus, h, "d/dt");
    }

    #[test]
    fn gradients_match_finite_differences_nonlinear_regular() {
        // regular nonlinear model run at n_p = 1: Hamiltonians genuinely
        // depend on the leftover velocity, exercising every chain term
        let text = "name = nl\ncoords = q1, q2\nlagrangian = qd1^2/2 + qd1^4/4 + qd1*qd2 + qd2^2 + sin(t)*q1 - q1*q2";
        let b = bundle_for(text, Some(1));
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..12 {
            let x = PhasePoint::new(
                rng.gen_range(-0.5..0.5),
                vec![rng.gen_range(-0.8..0.8)],
                vec![rng.gen_range(-0.8..0.8)],
                vec![rng.gen_range(-0.8..0.8)],
            )
            .with_qd_nc(vec![rng.gen_range(-0.8..0.8)]);
            fd_check(&b, &x, Ham::H0);
            fd_check(&b, &x, Ham::Alpha(0));
        }
    }

    #[test]
    fn gradients_match_finite_differences_singular() {
        let b = bundle_for(GAUGE1, None);
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..12 {
            let x = PhasePoint::new(
                rng.gen_range(-0.5..0.5),
                vec![rng.gen_range(-0.8..0.8)],
                vec![rng.gen_range(-0.8..0.8)],
                vec![rng.gen_range(-0.8..0.8)],
            );
            fd_check(&b, &x, Ham::H0);
            fd_check(&b, &x, Ham::Alpha(0));
        }
    }

    #[test]
    fn envelope_identity() {
        // dH0/dp_i equals the solved canonical velocity at 100 random points
        let b2 = bundle_for(OSC2, None);
        let bg = bundle_for(GAUGE1, None);
        let mut rng = StdRng::seed_from_u64(9);
        for k in 0..100 {
            let (b, x) = if k % 2 == 0 {
                (
                    &b2,
                    PhasePoint::new(
                        rng.gen_range(-1.0..1.0),
                        vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                        vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                        vec![],
                    ),
                )
            } else {
                (
                    &bg,
                    PhasePoint::new(
                        rng.gen_range(-1.0..1.0),
                        vec![rng.gen_range(-1.0..1.0)],
                        vec![rng.gen_range(-1.0..1.0)],
                        vec![rng.gen_range(-1.0..1.0)],
                    ),
                )
            };
            let v = b.solve_canonical_velocities(&x, None).unwrap();
            let g = b.grad(&x, Ham::H0).unwrap();
            for (gi, vi) in g.d_dp.iter().zip(&v) {
                assert!((gi - vi).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn full_reduction_limit_matches_total_hamiltonian() {
        // n_p = n: H0 coincides with p·qd - L, i.e. the full Hamiltonian
        let b = bundle_for(OSC2, None);
        assert_eq!(b.partition.n_p, 2);
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..50 {
            let q1 = rng.gen_range(-1.0..1.0);
            let q2 = rng.gen_range(-1.0..1.0);
            let p1 = rng.gen_range(-1.0..1.0);
            let p2 = rng.gen_range(-1.0..1.0);
            let x = PhasePoint::new(0.0, vec![q1, q2], vec![p1, p2], vec![]);
            let h0 = b.eval_h0(&x).unwrap();
            let expect = (p1 * p1 + p2 * p2) / 2.0 + q1 * q1 / 2.0 + 2.0 * q2 * q2;
            assert!((h0 - expect).abs() <= 1e-10);
        }
    }

    #[test]
    fn lagrangian_limit_identity() {
        // n_p = 0: H0 + H_beta qd_beta = -L at the supplied velocities
        let bf = bundle_for(FIRSTORDER, None);
        let bo = bundle_for(OSC1, Some(0));
        let mut rng = StdRng::seed_from_u64(11);
        for k in 0..50 {
            if k % 2 == 0 {
                let q = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let u = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let x = PhasePoint::new(0.3, vec![], vec![], q.clone()).with_qd_nc(u.clone());
                let (h0, ha) = bf.eval_all(&x).unwrap();
                let lhs = h0 + ha[0] * u[0] + ha[1] * u[1];
                let l = bf.sys.eval(&bf.sys.lagrangian, &Binding::new(0.3, q, u)).unwrap();
                assert!((lhs + l).abs() <= 1e-10);
            } else {
                let q = vec![rng.gen_range(-1.0..1.0)];
                let u = vec![rng.gen_range(-1.0..1.0)];
                let x = PhasePoint::new(0.0, vec![], vec![], q.clone()).with_qd_nc(u.clone());
                let (h0, ha) = bo.eval_all(&x).unwrap();
                let l = bo
                    .sys
                    .eval(&bo.sys.lagrangian, &Binding::new(0.0, q, u.clone()))
                    .unwrap();
                assert!((h0 + ha[0] * u[0] + l).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn condition42_detection() {
        // singular models at n_p = rank: independent of noncanonical velocities
        let b = bundle_for(FIRSTORDER, None);
        let x = PhasePoint::new(0.0, vec![], vec![], vec![0.4, -0.6]);
        assert!(b.condition42_deviation(&x).unwrap() <= 1e-12);
        b.require_nondynamical(&x, 1e-9).unwrap();

        let b = bundle_for(GAUGE1, None);
        let x = PhasePoint::new(0.0, vec![0.1], vec![0.2], vec![0.3]);
        assert!(b.condition42_deviation(&x).unwrap() <= 1e-12);

        // regular model at reduced n_p: violated
        let b = bundle_for(OSC2, Some(1));
        let x = PhasePoint::new(0.0, vec![0.1], vec![0.2], vec![0.3]);
        assert!(matches!(
            b.require_nondynamical(&x, 1e-9),
            Err(Error::Condition42Violation { .. })
        ));
    }

    #[test]
    fn newton_no_convergence_reports_residual() {
        let b = bundle_for(OSC1, None);
        let mut b = b;
        b.newton.max_iter = 0;
        let x = PhasePoint::new(0.0, vec![0.0], vec![0.7], vec![]);
        assert!(matches!(
            b.solve_canonical_velocities(&x, None),
            Err(Error::NoConvergence { .. })
        ));
    }
}
