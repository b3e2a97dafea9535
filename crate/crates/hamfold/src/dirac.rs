//! Origin of constraints: extend the phase space with momenta for the
//! noncanonical coordinates and the familiar constrained picture reappears.
//!
//! Each extra momentum brings one primary constraint phi_a = p_a + H_a = 0.
//! Evolution is generated by the total Hamiltonian H0 + v^a phi_a with
//! multipliers fixed by constraint preservation, and that consistency system
//! is the same linear system F qd = G the reduced formalism solves — the
//! module verifies the identification numerically, along with the agreement
//! of the nongauge bracket with the Dirac bracket on the surface.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::brackets::{
    bracket_nongauge, build_fg_frame, poisson_full_of, random_observable, FGSystem,
    GaugeDecomposition, HamiltonianFn, PhaseDims, PhaseFunction, PhaseGradient,
};
use crate::dynamics::{solve_velocities, SingularKind};
use crate::error::{Error, Result};
use crate::legendre::{Ham, HamiltonianBundle, PhasePoint};
use crate::linalg::{rank_complete_pivot, Lu, Mat};

/// Primary constraint phi_a = P_a + H_a over the extended phase space.
pub struct ConstraintFn<'a> {
    pub bundle: &'a HamiltonianBundle,
    pub index: usize,
}

impl PhaseFunction for ConstraintFn<'_> {
    fn value_at(&self, x: &PhasePoint) -> Result<f64> {
        let p_nc = x.p_nc.as_ref().ok_or_else(|| {
            Error::Config("constraint evaluation needs extended momenta".into())
        })?;
        Ok(p_nc[self.index] + self.bundle.eval_h_alpha(x)?[self.index])
    }

    fn gradient_at(&self, x: &PhasePoint) -> Result<PhaseGradient> {
        let p_nc = x.p_nc.as_ref().ok_or_else(|| {
            Error::Config("constraint evaluation needs extended momenta".into())
        })?;
        let g = self.bundle.grad(x, Ham::Alpha(self.index))?;
        let n_nc = self.bundle.partition.n_nc();
        let mut d_dp_nc = vec![0.0; n_nc];
        d_dp_nc[self.index] = 1.0;
        Ok(PhaseGradient {
            value: p_nc[self.index] + g.value,
            d_dq_c: g.d_dq_c,
            d_dp: g.d_dp,
            d_dq_nc: g.d_dq_nc,
            d_dp_nc,
            d_dt: g.d_dt,
        })
    }
}

/// The set of primary constraints of a model, one per noncanonical slot.
pub struct ConstraintSet<'a> {
    pub bundle: &'a HamiltonianBundle,
    pub kind: SingularKind,
}

impl<'a> ConstraintSet<'a> {
    pub fn len(&self) -> usize {
        self.bundle.partition.n_nc()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn phi(&self, a: usize) -> ConstraintFn<'a> {
        ConstraintFn { bundle: self.bundle, index: a }
    }

    /// Values of every constraint at an extended point.
    pub fn values(&self, x: &PhasePoint) -> Result<Vec<f64>> {
        let p_nc = x.p_nc.as_ref().ok_or_else(|| {
            Error::Config("constraint evaluation needs extended momenta".into())
        })?;
        let h = self.bundle.eval_h_alpha(x)?;
        Ok(p_nc.iter().zip(&h).map(|(p, h)| p + h).collect())
    }

    pub fn max_abs(&self, x: &PhasePoint) -> Result<f64> {
        Ok(self
            .values(x)?
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs())))
    }
}

/// Build the constraint set; the classification kind is inherited from the
/// reduced dynamics.
pub fn build_constraints<'a>(
    bundle: &'a HamiltonianBundle,
    kind: SingularKind,
) -> ConstraintSet<'a> {
    ConstraintSet { bundle, kind }
}

/// Place a reduced phase point on the constraint surface exactly by setting
/// P_a = -H_a.
pub fn lift_on_surface(bundle: &HamiltonianBundle, x: &PhasePoint) -> Result<PhasePoint> {
    let h = bundle.eval_h_alpha(x)?;
    Ok(x.clone().with_p_nc(h.iter().map(|v| -v).collect()))
}

/// Total Hamiltonian H0 + v^a phi_a with fixed multiplier values.
pub struct TotalHamiltonian<'a> {
    pub bundle: &'a HamiltonianBundle,
    pub v: Vec<f64>,
}

impl PhaseFunction for TotalHamiltonian<'_> {
    fn value_at(&self, x: &PhasePoint) -> Result<f64> {
        let cs = ConstraintSet { bundle: self.bundle, kind: SingularKind::Nongauge };
        let phi = cs.values(x)?;
        Ok(self.bundle.eval_h0(x)?
            + self.v.iter().zip(&phi).map(|(v, p)| v * p).sum::<f64>())
    }

    fn gradient_at(&self, x: &PhasePoint) -> Result<PhaseGradient> {
        let h0 = HamiltonianFn::h0(self.bundle).gradient_at(x)?;
        let mut out = h0;
        for (a, &va) in self.v.iter().enumerate() {
            let g = ConstraintFn { bundle: self.bundle, index: a }.gradient_at(x)?;
            out.value += va * g.value;
            for i in 0..out.d_dq_c.len() {
                out.d_dq_c[i] += va * g.d_dq_c[i];
                out.d_dp[i] += va * g.d_dp[i];
            }
            for k in 0..out.d_dq_nc.len() {
                out.d_dq_nc[k] += va * g.d_dq_nc[k];
                out.d_dp_nc[k] += va * g.d_dp_nc[k];
            }
            out.d_dt += va * g.d_dt;
        }
        Ok(out)
    }
}

/// Assembled constraint-preservation system at one on-surface point.
pub struct ConsistencySystem {
    /// {phi_a, phi_b}_full.
    pub f_full: Mat,
    /// -dphi_a/dt - {phi_a, H0}_full.
    pub g_full: Vec<f64>,
    pub r_f: usize,
    /// Multipliers with the arbitrary components set to zero.
    pub v: Vec<f64>,
    /// Number of arbitrary multiplier components.
    pub free: usize,
}

/// Build and solve the consistency condition d phi_a / dt = 0 for the
/// multipliers. Off-surface points are rejected; a relation independent of
/// the multipliers halts the analysis as a higher-stage constraint.
pub fn consistency_system(
    cs: &ConstraintSet<'_>,
    x: &PhasePoint,
) -> Result<ConsistencySystem> {
    let max_phi = cs.max_abs(x)?;
    if max_phi > 1e-8 {
        return Err(Error::OffSurface { max_phi });
    }
    let bundle = cs.bundle;
    let dim = cs.len();
    let grads: Vec<PhaseGradient> = (0..dim)
        .map(|a| cs.phi(a).gradient_at(x))
        .collect::<Result<_>>()?;
    let h0 = HamiltonianFn::h0(bundle).gradient_at(x)?;
    let mut f_full = Mat::zeros(dim, dim);
    for a in 0..dim {
        for b in 0..dim {
            f_full.set(a, b, poisson_full_of(&grads[a], &grads[b]));
        }
    }
    let g_full: Vec<f64> = (0..dim)
        .map(|a| -grads[a].d_dt - poisson_full_of(&grads[a], &h0))
        .collect();
    let r_f = rank_complete_pivot(&f_full, bundle.pivot_tol);
    let fg = FGSystem { f: f_full.clone(), g: g_full.clone(), r_f, dim };
    let v = if r_f == dim {
        solve_velocities(&fg, None, &[], bundle.pivot_tol)?
    } else {
        let decomp = GaugeDecomposition::build(&fg, None, bundle.pivot_tol)?;
        let zeros = vec![0.0; dim - r_f];
        match solve_velocities(&fg, Some(&decomp), &zeros, bundle.pivot_tol) {
            Ok(v) => v,
            Err(Error::InconsistentSystem { residual }) => {
                return Err(Error::HigherStageConstraint {
                    detail: format!(
                        "consistency row independent of the multipliers (residual {residual:.3e})"
                    ),
                })
            }
            Err(e) => return Err(e),
        }
    };
    Ok(ConsistencySystem { f_full, g_full, r_f, v, free: dim - r_f })
}

/// Numeric comparison of the reduced and extended constructions.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EquivalenceReport {
    /// max |F_ab - {phi_a, phi_b}_full| over sampled on-surface points.
    pub f_residual: f64,
    /// max |G_a - (-dphi_a/dt - {phi_a, H0}_full)| over the samples.
    pub g_residual: f64,
    /// Nongauge-vs-Dirac bracket agreement (full-rank case only).
    pub dirac_bracket_residual: Option<f64>,
    pub points: usize,
    pub observable_pairs: usize,
}

/// Sample random on-surface points and verify that the reduced F and G
/// reproduce the full-bracket consistency data, and (for the full-rank case)
/// that the nongauge bracket agrees with the Dirac bracket on reduced
/// observables.
pub fn verify_equivalence(
    bundle: &HamiltonianBundle,
    kind: SingularKind,
    n_points: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    let part = &bundle.partition;
    let mut rng = StdRng::seed_from_u64(seed);
    let cs = build_constraints(bundle, kind);
    let mut f_residual = 0.0_f64;
    let mut g_residual = 0.0_f64;
    let sample = |rng: &mut StdRng| -> PhasePoint {
        PhasePoint::new(
            0.0,
            (0..part.n_p).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..part.n_p).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..part.n_nc()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    };
    for _ in 0..n_points {
        let x = lift_on_surface(bundle, &sample(&mut rng))?;
        let frame = build_fg_frame(bundle, &x, None)?;
        let dim = cs.len();
        let grads: Vec<PhaseGradient> = (0..dim)
            .map(|a| cs.phi(a).gradient_at(&x))
            .collect::<Result<_>>()?;
        let h0 = HamiltonianFn::h0(bundle).gradient_at(&x)?;
        for a in 0..dim {
            for b in 0..dim {
                let full = poisson_full_of(&grads[a], &grads[b]);
                f_residual = f_residual.max((frame.fg.f.at(a, b) - full).abs());
            }
            let full_g = -grads[a].d_dt - poisson_full_of(&grads[a], &h0);
            g_residual = g_residual.max((frame.fg.g[a] - full_g).abs());
        }
    }

    let dirac_bracket_residual = if kind == SingularKind::Nongauge && cs.len() > 0 {
        let dims = PhaseDims { n_p: part.n_p, n_nc: part.n_nc(), extended: false };
        let mut worst = 0.0_f64;
        for _ in 0..n_pairs {
            let x = lift_on_surface(bundle, &sample(&mut rng))?;
            let a = random_observable(&mut rng, dims);
            let b = random_observable(&mut rng, dims);
            let fg = build_fg_frame(bundle, &x, None)?.fg;
            let nongauge = bracket_nongauge(&a, &b, &x, &fg, bundle)?;
            // Dirac bracket on the extended space
            let dim = cs.len();
            let grads: Vec<PhaseGradient> = (0..dim)
                .map(|k| cs.phi(k).gradient_at(&x))
                .collect::<Result<_>>()?;
            let mut f_full = Mat::zeros(dim, dim);
            for i in 0..dim {
                for j in 0..dim {
                    f_full.set(i, j, poisson_full_of(&grads[i], &grads[j]));
                }
            }
            let f_inv = Lu::factor(&f_full, bundle.pivot_tol)?.inverse();
            let ga = a.gradient_at(&x)?;
            let gb = b.gradient_at(&x)?;
            let mut dirac = poisson_full_of(&ga, &gb);
            for i in 0..dim {
                for j in 0..dim {
                    dirac -= poisson_full_of(&ga, &grads[i])
                        * f_inv.at(i, j)
                        * poisson_full_of(&grads[j], &gb);
                }
            }
            worst = worst.max((nongauge - dirac).abs());
        }
        Some(worst)
    } else {
        None
    };

    Ok(EquivalenceReport {
        f_residual,
        g_residual,
        dirac_bracket_residual,
        points: n_points,
        observable_pairs: n_pairs,
    })
}

/// Extended-space trajectory under the total Hamiltonian.
#[derive(Debug, Clone)]
pub struct ExtendedTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhasePoint>,
    /// max |phi_a| over the whole run.
    pub max_constraint_drift: f64,
}

/// Integrate the full-bracket equations generated by the total Hamiltonian,
/// with multipliers re-solved from the consistency system at every stage.
pub fn integrate_total(
    cs: &ConstraintSet<'_>,
    ic: &PhasePoint,
    t1: f64,
    dt: f64,
) -> Result<ExtendedTrajectory> {
    let bundle = cs.bundle;
    let part = &bundle.partition;
    let (n_p, n_nc) = (part.n_p, part.n_nc());
    if ic.p_nc.is_none() {
        return Err(Error::Config("extended integration needs initial extra momenta".into()));
    }
    let pack = |x: &PhasePoint| -> Vec<f64> {
        let mut y = Vec::with_capacity(2 * n_p + 2 * n_nc);
        y.extend_from_slice(&x.q_c);
        y.extend_from_slice(&x.p);
        y.extend_from_slice(&x.q_nc);
        y.extend(x.p_nc.clone().unwrap());
        y
    };
    let unpack = |t: f64, y: &[f64]| -> PhasePoint {
        PhasePoint::new(
            t,
            y[..n_p].to_vec(),
            y[n_p..2 * n_p].to_vec(),
            y[2 * n_p..2 * n_p + n_nc].to_vec(),
        )
        .with_p_nc(y[2 * n_p + n_nc..].to_vec())
    };
    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let x = unpack(t, y);
        let sys = consistency_system(cs, &x)?;
        let total = TotalHamiltonian { bundle, v: sys.v.clone() };
        let g = total.gradient_at(&x)?;
        let mut dy = Vec::with_capacity(y.len());
        dy.extend(g.d_dp.iter().copied());
        dy.extend(g.d_dq_c.iter().map(|v| -v));
        dy.extend(g.d_dp_nc.iter().copied());
        dy.extend(g.d_dq_nc.iter().map(|v| -v));
        Ok(dy)
    };
    let span = t1 - ic.t;
    let steps = (span / dt).round().max(1.0) as usize;
    let h = span / steps as f64;
    let mut y = pack(ic);
    let mut t = ic.t;
    let mut times = vec![t];
    let mut states = vec![ic.clone()];
    let mut drift = cs.max_abs(ic)?;
    for _ in 0..steps {
        let k1 = rhs(t, &y)?;
        let mk = |k: &[f64], s: f64| -> Vec<f64> {
            y.iter().zip(k).map(|(a, b)| a + s * b).collect()
        };
        let k2 = rhs(t + h / 2.0, &mk(&k1, h / 2.0))?;
        let k3 = rhs(t + h / 2.0, &mk(&k2, h / 2.0))?;
        let k4 = rhs(t + h, &mk(&k3, h))?;
        y = y
            .iter()
            .enumerate()
            .map(|(i, &yi)| yi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        t += h;
        let x = unpack(t, &y);
        drift = drift.max(cs.max_abs(&x)?);
        times.push(t);
        states.push(x);
    }
    Ok(ExtendedTrajectory { times, states, max_constraint_drift: drift })
}

/// Count of primary constraints arising from an over-extended momenta map:
/// n_p minus the rank of the canonical rows of the Hessian at probe states.
pub fn over_extension_constraint_count(
    bundle: &HamiltonianBundle,
    probes: &[crate::expr::Binding],
) -> Result<usize> {
    let part = &bundle.partition;
    let mut ranks = Vec::new();
    for at in probes {
        let w = bundle.sys.hessian_at(at)?;
        let mut rows = Mat::zeros(part.n_p, part.n);
        for i in 0..part.n_p {
            for b in 0..part.n {
                rows.set(i, b, w.at(part.canonical(i), b));
            }
        }
        ranks.push(rank_complete_pivot(&rows, bundle.pivot_tol));
    }
    let r = ranks.first().copied().unwrap_or(0);
    if ranks.iter().any(|&x| x != r) {
        return Err(Error::RankVariation {
            details: format!("momenta-map ranks across probes: {ranks:?}"),
        });
    }
    Ok(part.n_p - r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{classify, default_phase_probes, integrate, Method};
    use crate::model::{analyze_hessian, default_probes, parse_model, DEFAULT_SEED, PIVOT_TOL};
    use std::sync::Arc;

    fn bundle_for(text: &str, n_p: Option<usize>) -> HamiltonianBundle {
        let sys = Arc::new(parse_model(text).unwrap());
        let probes = default_probes(sys.n, DEFAULT_SEED);
        let part = analyze_hessian(&sys, &probes, PIVOT_TOL, n_p).unwrap();
        HamiltonianBundle::new(sys, part, PIVOT_TOL)
    }

    const OSC2: &str =
        "name = osc2\ncoords = q1, q2\nlagrangian = (qd1^2 + qd2^2)/2 - q1^2/2 - 2*q2^2";
    const FIRSTORDER: &str =
        "name = firstorder\ncoords = q1, q2\nlagrangian = q2*qd1 - 0.5*(q1^2 + q2^2)";
    const GAUGE1: &str = "name = gauge1\ncoords = q1, q2\nlagrangian = (qd1 - q2)^2/2";
    const ROTGAUGE: &str = "name = rotgauge\ncoords = q1, q2, q3\nlagrangian = (qd1 - q3*q2)^2/2 + (qd2 + q3*q1)^2/2";

    #[test]
    fn constraint_values() {
        // gauge1: phi = p2 (H2 = 0)
        let b = bundle_for(GAUGE1, None);
        let cs = build_constraints(&b, SingularKind::AbelianLimit);
        assert_eq!(cs.len(), 1);
        let x = PhasePoint::new(0.0, vec![0.1], vec![0.4], vec![0.3]).with_p_nc(vec![0.25]);
        assert!((cs.values(&x).unwrap()[0] - 0.25).abs() < 1e-14);

        // firstorder: phi1 = p1 - q2, phi2 = p2
        let b = bundle_for(FIRSTORDER, None);
        let cs = build_constraints(&b, SingularKind::Nongauge);
        assert_eq!(cs.len(), 2);
        let x = PhasePoint::new(0.0, vec![], vec![], vec![1.0, 2.0]).with_p_nc(vec![0.5, 0.7]);
        let phi = cs.values(&x).unwrap();
        assert!((phi[0] - (0.5 - 2.0)).abs() < 1e-14);
        assert!((phi[1] - 0.7).abs() < 1e-14);

        // regular model: no constraints
        let b = bundle_for(OSC2, None);
        let cs = build_constraints(&b, SingularKind::Nongauge);
        assert!(cs.is_empty());
    }

    #[test]
    fn total_hamiltonian_value() {
        let b = bundle_for(FIRSTORDER, None);
        let x = PhasePoint::new(0.0, vec![], vec![], vec![1.0, 2.0]).with_p_nc(vec![0.6, 0.1]);
        let total = TotalHamiltonian { bundle: &b, v: vec![0.5, -0.3] };
        // H0 + v1 (p1 - q2) + v2 p2 = 2.5 + 0.5*(0.6-2.0) - 0.3*0.1
        let expect = 2.5 + 0.5 * (0.6 - 2.0) - 0.3 * 0.1;
        assert!((total.value_at(&x).unwrap() - expect).abs() < 1e-14);

        let zero = TotalHamiltonian { bundle: &b, v: vec![0.0, 0.0] };
        assert!((zero.value_at(&x).unwrap() - 2.5).abs() < 1e-14);
    }

    #[test]
    fn consistency_matches_reduced_velocities() {
        let b = bundle_for(FIRSTORDER, None);
        let cs = build_constraints(&b, SingularKind::Nongauge);
        let x = lift_on_surface(&b, &PhasePoint::new(0.0, vec![], vec![], vec![1.0, 2.0])).unwrap();
        let sys = consistency_system(&cs, &x).unwrap();
        assert_eq!(sys.free, 0);
        assert!((sys.v[0] - 2.0).abs() < 1e-12);
        assert!((sys.v[1] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn gauge_multiplier_freedom_and_higher_stage() {
        let b = bundle_for(GAUGE1, None);
        let cs = build_constraints(&b, SingularKind::AbelianLimit);
        // p1 = 0: multiplier free
        let x = PhasePoint::new(0.0, vec![0.2], vec![0.0], vec![0.5]).with_p_nc(vec![0.0]);
        let sys = consistency_system(&cs, &x).unwrap();
        assert_eq!(sys.free, 1);
        assert_eq!(sys.v, vec![0.0]);

        // p1 != 0 on the surface phi = p2 = 0: relation independent of v
        let x = PhasePoint::new(0.0, vec![0.2], vec![0.3], vec![0.5]).with_p_nc(vec![0.0]);
        assert!(matches!(
            consistency_system(&cs, &x),
            Err(Error::HigherStageConstraint { .. })
        ));

        // off-surface rejection
        let x = PhasePoint::new(0.0, vec![0.2], vec![0.0], vec![0.5]).with_p_nc(vec![0.4]);
        assert!(matches!(consistency_system(&cs, &x), Err(Error::OffSurface { .. })));
    }

    #[test]
    fn equivalence_on_first_order_model() {
        let b = bundle_for(FIRSTORDER, None);
        let report = verify_equivalence(&b, SingularKind::Nongauge, 100, 50, 42).unwrap();
        assert!(report.f_residual <= 1e-9, "{report:?}");
        assert!(report.g_residual <= 1e-9, "{report:?}");
        assert!(report.dirac_bracket_residual.unwrap() <= 1e-8, "{report:?}");
    }

    #[test]
    fn equivalence_on_gauge_model() {
        let b = bundle_for(GAUGE1, None);
        let report = verify_equivalence(&b, SingularKind::AbelianLimit, 100, 0, 42).unwrap();
        assert!(report.f_residual <= 1e-9, "{report:?}");
        assert!(report.g_residual <= 1e-9, "{report:?}");
        assert!(report.dirac_bracket_residual.is_none());
    }

    #[test]
    fn constraints_preserved_and_projection_matches_reduced_dynamics() {
        let b = bundle_for(FIRSTORDER, None);
        let cs = build_constraints(&b, SingularKind::Nongauge);
        let reduced_ic = PhasePoint::new(0.0, vec![], vec![], vec![1.0, 0.0]);
        let ic = lift_on_surface(&b, &reduced_ic).unwrap();
        let ext = integrate_total(&cs, &ic, 10.0, 1e-3).unwrap();
        assert!(ext.max_constraint_drift <= 1e-6, "drift {}", ext.max_constraint_drift);

        let probes = default_phase_probes(&b, 6, DEFAULT_SEED);
        let class = classify(&b, &probes, PIVOT_TOL).unwrap();
        let red = integrate(&b, &class, &reduced_ic, 10.0, 1e-3, Method::Rk4, &[]).unwrap();
        let a = ext.states.last().unwrap();
        let r = red.last_state();
        for (x, y) in a.q_nc.iter().zip(&r.q_nc) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn over_extension_counts() {
        // one extra momentum on rotgauge: exactly one constraint
        let b = bundle_for(ROTGAUGE, Some(3));
        let probes = default_probes(3, DEFAULT_SEED);
        assert_eq!(over_extension_constraint_count(&b, &probes).unwrap(), 1);

        // firstorder admits one or two extra momenta
        let b = bundle_for(FIRSTORDER, Some(1));
        let probes = default_probes(2, DEFAULT_SEED);
        assert_eq!(over_extension_constraint_count(&b, &probes).unwrap(), 1);
        let b = bundle_for(FIRSTORDER, Some(2));
        assert_eq!(over_extension_constraint_count(&b, &probes).unwrap(), 2);

        // no over-extension: no constraints
        let b = bundle_for(GAUGE1, None);
        let probes = default_probes(2, DEFAULT_SEED);
        assert_eq!(over_extension_constraint_count(&b, &probes).unwrap(), 0);
    }
}
