//! Equations of motion: classification by the rank of F, noncanonical
//! velocity solution, time stepping, residual verification of the
//! second-order noncanonical equation, and independent reference
//! integrators (Euler–Lagrange and full Hamilton flow) used as oracles.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::brackets::{build_fg_frame, FGSystem, GaugeDecomposition};
use crate::error::{Error, Result};
use crate::expr::Binding;
use crate::legendre::{GradBundle, HamiltonianBundle, PhasePoint};
use crate::linalg::{Lu, Mat};
use crate::model::LagrangianSystem;

/// Consistency tolerance for the dependent rows of the velocity system:
/// one order looser than the integration tolerance so accumulated drift
/// does not raise false inconsistencies.
pub const CONSISTENCY_TOL: f64 = 1e-6;

/// Kind of singular theory, decided by the rank of the antisymmetric F.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SingularKind {
    /// F has full rank: all noncanonical velocities are determined.
    Nongauge,
    /// F is rank-deficient: some velocities stay arbitrary gauge parameters.
    Gauge,
    /// F vanishes identically: every noncanonical velocity is a gauge
    /// parameter and consistency demands G = 0.
    AbelianLimit,
}

/// How the noncanonical sector evolves.
#[derive(Debug, Clone, PartialEq)]
pub enum Classification {
    /// Hamiltonians independent of the noncanonical velocities: the
    /// noncanonical system is algebraic, F qd = G.
    Algebraic {
        kind: SingularKind,
        r_f: usize,
        /// Arbitrary velocity components (gauge parameters): dim - r_f.
        gauge_params: usize,
        /// Slot order fixing the nonsingular block of F for the whole run.
        block_order: Vec<usize>,
    },
    /// Hamiltonians depend on the noncanonical velocities: those velocities
    /// become extra state and evolve by the second-order equation.
    VelocityExtended,
}

impl Classification {
    pub fn kind_label(&self) -> &'static str {
        match self {
            Classification::Algebraic { kind: SingularKind::Nongauge, .. } => "nongauge",
            Classification::Algebraic { kind: SingularKind::Gauge, .. } => "gauge",
            Classification::Algebraic { kind: SingularKind::AbelianLimit, .. } => "abelian-limit",
            Classification::VelocityExtended => "velocity-extended",
        }
    }

    pub fn gauge_params(&self) -> usize {
        match self {
            Classification::Algebraic { gauge_params, .. } => *gauge_params,
            Classification::VelocityExtended => 0,
        }
    }

    pub fn r_f(&self) -> usize {
        match self {
            Classification::Algebraic { r_f, .. } => *r_f,
            Classification::VelocityExtended => 0,
        }
    }
}

/// Random phase points for probing, uniform in [-1, 1] per slot, times
/// alternating between 0 and 0.37.
pub fn default_phase_probes(bundle: &HamiltonianBundle, count: usize, seed: u64) -> Vec<PhasePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let part = &bundle.partition;
    (0..count)
        .map(|k| {
            let t = if k % 2 == 0 { 0.0 } else { 0.37 };
            PhasePoint::new(
                t,
                (0..part.n_p).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..part.n_p).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..part.n_nc()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
        })
        .collect()
}

/// Classify the dynamics at a set of probe points.
///
/// If the Hamiltonians depend on the noncanonical velocities anywhere, the
/// regime is velocity-extended. Otherwise F is built at every probe; its
/// rank must not vary, and the kind follows from the rank: full rank is
/// nongauge, identically zero F is the abelian limit, anything between is
/// gauge. For the gauge case a block order is fixed here and reused for the
/// whole run.
pub fn classify(
    bundle: &HamiltonianBundle,
    probes: &[PhasePoint],
    pivot_tol: f64,
) -> Result<Classification> {
    let dim = bundle.partition.n_nc();
    for x in probes {
        if bundle.condition42_deviation(x)? > 1e-9 {
            return Ok(Classification::VelocityExtended);
        }
    }
    let mut systems: Vec<FGSystem> = Vec::with_capacity(probes.len());
    for x in probes {
        systems.push(build_fg_frame(bundle, x, None)?.fg);
    }
    let r_f = systems.first().map_or(0, |s| s.r_f);
    if systems.iter().any(|s| s.r_f != r_f) {
        let ranks: Vec<usize> = systems.iter().map(|s| s.r_f).collect();
        return Err(Error::RankVariation {
            details: format!("F ranks across probes: {ranks:?}"),
        });
    }
    let max_f = systems.iter().map(|s| s.f.max_abs()).fold(0.0, f64::max);
    let kind = if r_f == dim {
        SingularKind::Nongauge
    } else if max_f <= pivot_tol {
        SingularKind::AbelianLimit
    } else {
        SingularKind::Gauge
    };
    let block_order = if r_f < dim && r_f > 0 {
        let mats: Vec<Mat> = systems.iter().map(|s| s.f.clone()).collect();
        let (head, _) = crate::linalg::best_principal_minor(&mats, r_f);
        let mut order = head;
        for i in 0..dim {
            if !order.contains(&i) {
                order.push(i);
            }
        }
        order
    } else {
        (0..dim).collect()
    };
    Ok(Classification::Algebraic { kind, r_f, gauge_params: dim - r_f, block_order })
}

/// Solve F qd = G for the noncanonical velocities.
///
/// Full rank: direct solve. Deficient rank: the dependent components are the
/// caller-supplied gauge input (default zeros is the gauge condition), the
/// independent block is solved, and the dependent-row consistency residual
/// must stay below [`CONSISTENCY_TOL`].
pub fn solve_velocities(
    fg: &FGSystem,
    decomp: Option<&GaugeDecomposition>,
    gauge_input: &[f64],
    pivot_tol: f64,
) -> Result<Vec<f64>> {
    if fg.r_f == fg.dim {
        if fg.dim == 0 {
            return Ok(vec![]);
        }
        let lu = Lu::factor(&fg.f, pivot_tol)?;
        return Ok(lu.solve(&fg.g));
    }
    let decomp = decomp.ok_or(Error::MissingDecomposition)?;
    if gauge_input.len() != fg.dim - fg.r_f {
        return Err(Error::Config(format!(
            "gauge input length {} does not match the {} arbitrary velocities",
            gauge_input.len(),
            fg.dim - fg.r_f
        )));
    }
    if decomp.g_relation_residual > CONSISTENCY_TOL {
        return Err(Error::InconsistentSystem { residual: decomp.g_relation_residual });
    }
    let r_f = decomp.r_f;
    let mut qd = vec![0.0; fg.dim];
    for (a, &u) in gauge_input.iter().enumerate() {
        qd[decomp.order[r_f + a]] = u;
    }
    for i in 0..r_f {
        let mut v = 0.0;
        for j in 0..r_f {
            // G_1 minus the coupling into the dependent block
            let mut rhs = fg.g[decomp.order[j]];
            for (a, &u) in gauge_input.iter().enumerate() {
                rhs -= fg.f.at(decomp.order[j], decomp.order[r_f + a]) * u;
            }
            v += decomp.f11_inv.at(i, j) * rhs;
        }
        qd[decomp.order[i]] = v;
    }
    Ok(qd)
}

/// Right-hand sides of the first-order system at one phase point.
pub struct StepRhs {
    pub dq_c: Vec<f64>,
    pub dp: Vec<f64>,
    /// Noncanonical velocities (algebraic regime: solved; extended: state).
    pub qd_nc: Vec<f64>,
    /// Noncanonical accelerations (extended regime only).
    pub du: Vec<f64>,
    pub diag: StepDiag,
    /// Canonical velocities, for warm starts.
    pub v: Vec<f64>,
}

/// Per-point diagnostics recorded along a trajectory.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepDiag {
    pub h0: f64,
    pub eom_residual: f64,
    pub r_f: usize,
    pub consistency_residual: f64,
}

fn algebraic_rhs(
    bundle: &HamiltonianBundle,
    class: &Classification,
    gauge_input: &[f64],
    x: &PhasePoint,
    guess: Option<&[f64]>,
) -> Result<StepRhs> {
    let Classification::Algebraic { r_f, block_order, .. } = class else {
        return Err(Error::Internal("algebraic_rhs called in extended regime".into()));
    };
    let frame = build_fg_frame(bundle, x, guess)?;
    let fg = &frame.fg;
    let grads: &GradBundle = &frame.grads;
    if fg.r_f != *r_f {
        return Err(Error::RankVariation {
            details: format!("r_F changed from {} to {} along the run", r_f, fg.r_f),
        });
    }
    let (qd_nc, consistency) = if fg.r_f == fg.dim {
        let qd = solve_velocities(fg, None, &[], bundle.pivot_tol)?;
        // residual of the solved linear system
        let mut res = 0.0_f64;
        for a in 0..fg.dim {
            let mut v = -fg.g[a];
            for b in 0..fg.dim {
                v += fg.f.at(a, b) * qd[b];
            }
            res = res.max(v.abs());
        }
        (qd, res)
    } else {
        let decomp = GaugeDecomposition::build(fg, Some(block_order), bundle.pivot_tol)?;
        let residual = decomp.g_relation_residual;
        let qd = solve_velocities(fg, Some(&decomp), gauge_input, bundle.pivot_tol)?;
        (qd, residual)
    };
    let n_p = bundle.partition.n_p;
    let mut dq_c = vec![0.0; n_p];
    let mut dp = vec![0.0; n_p];
    for i in 0..n_p {
        let mut dq = grads.h0.d_dp[i];
        let mut dpi = -grads.h0.d_dq_c[i];
        for (b, u) in qd_nc.iter().enumerate() {
            dq += grads.h_alpha[b].d_dp[i] * u;
            dpi -= grads.h_alpha[b].d_dq_c[i] * u;
        }
        dq_c[i] = dq;
        dp[i] = dpi;
    }
    Ok(StepRhs {
        dq_c,
        dp,
        qd_nc,
        du: vec![],
        diag: StepDiag {
            h0: grads.h0.value,
            eom_residual: consistency,
            r_f: fg.r_f,
            consistency_residual: consistency,
        },
        v: grads.v.clone(),
    })
}

fn extended_rhs(
    bundle: &HamiltonianBundle,
    x: &PhasePoint,
    guess: Option<&[f64]>,
) -> Result<StepRhs> {
    let u = x.qd_nc_or_zero();
    let frame = bundle.frame(x, guess)?;
    let grads = bundle.grads_from_frame(&frame, x)?;
    let (v, du, residual) = bundle.accelerations_from_frame(&frame)?;
    let n_p = bundle.partition.n_p;
    let mut dq_c = vec![0.0; n_p];
    let mut dp = vec![0.0; n_p];
    for i in 0..n_p {
        let mut dq = grads.h0.d_dp[i];
        let mut dpi = -grads.h0.d_dq_c[i];
        for (b, ub) in u.iter().enumerate() {
            dq += grads.h_alpha[b].d_dp[i] * ub;
            dpi -= grads.h_alpha[b].d_dq_c[i] * ub;
        }
        dq_c[i] = dq;
        dp[i] = dpi;
    }
    Ok(StepRhs {
        dq_c,
        dp,
        qd_nc: u,
        du,
        diag: StepDiag {
            h0: grads.h0.value,
            eom_residual: residual,
            r_f: 0,
            consistency_residual: 0.0,
        },
        v,
    })
}

/// Assemble the right-hand sides of the equations of motion at `x`.
pub fn step_rhs(
    bundle: &HamiltonianBundle,
    class: &Classification,
    gauge_input: &[f64],
    x: &PhasePoint,
) -> Result<StepRhs> {
    match class {
        Classification::Algebraic { .. } => algebraic_rhs(bundle, class, gauge_input, x, None),
        Classification::VelocityExtended => extended_rhs(bundle, x, None),
    }
}

/// Time-stepping method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Rk4,
    Rk45,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rk4" => Ok(Method::Rk4),
            "rk45" => Ok(Method::Rk45),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Time series of phase points with per-step diagnostics. A mid-run failure
/// truncates the trajectory and is attached rather than discarding the
/// computed prefix.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhasePoint>,
    pub diagnostics: Vec<StepDiag>,
    pub failure: Option<String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &PhasePoint {
        self.states.last().expect("trajectory holds at least the initial state")
    }

    /// Max |H0(t) - H0(0)| over the recorded steps.
    pub fn h0_drift(&self) -> f64 {
        let Some(first) = self.diagnostics.first() else {
            return 0.0;
        };
        self.diagnostics
            .iter()
            .map(|d| (d.h0 - first.h0).abs())
            .fold(0.0, f64::max)
    }
}

struct StateLayout {
    n_p: usize,
    n_nc: usize,
    extended: bool,
}

impl StateLayout {
    fn dim(&self) -> usize {
        2 * self.n_p + self.n_nc + if self.extended { self.n_nc } else { 0 }
    }

    fn pack(&self, x: &PhasePoint) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.dim());
        y.extend_from_slice(&x.q_c);
        y.extend_from_slice(&x.p);
        y.extend_from_slice(&x.q_nc);
        if self.extended {
            y.extend(x.qd_nc_or_zero());
        }
        y
    }

    fn unpack(&self, t: f64, y: &[f64]) -> PhasePoint {
        let (n_p, n_nc) = (self.n_p, self.n_nc);
        let mut x = PhasePoint::new(
            t,
            y[..n_p].to_vec(),
            y[n_p..2 * n_p].to_vec(),
            y[2 * n_p..2 * n_p + n_nc].to_vec(),
        );
        if self.extended {
            x = x.with_qd_nc(y[2 * n_p + n_nc..].to_vec());
        }
        x
    }

    fn deriv(&self, rhs: &StepRhs) -> Vec<f64> {
        let mut dy = Vec::with_capacity(self.dim());
        dy.extend_from_slice(&rhs.dq_c);
        dy.extend_from_slice(&rhs.dp);
        dy.extend_from_slice(&rhs.qd_nc);
        if self.extended {
            dy.extend_from_slice(&rhs.du);
        }
        dy
    }
}

/// Integrate the equations of motion from `ic` to `t1`.
///
/// RK4 uses a uniform step (the requested dt rounded so the interval divides
/// evenly); RK45 is the embedded Fehlberg pair with relative tolerance 1e-8.
/// F and G are rebuilt at every stage. The gauge input is a constant vector
/// assigned to the arbitrary velocity components (zeros = gauge condition).
pub fn integrate(
    bundle: &HamiltonianBundle,
    class: &Classification,
    ic: &PhasePoint,
    t1: f64,
    dt: f64,
    method: Method,
    gauge_input: &[f64],
) -> Result<Trajectory> {
    if dt <= 0.0 {
        return Err(Error::Config("dt must be positive".into()));
    }
    if t1 <= ic.t {
        return Err(Error::Config("t1 must exceed the initial time".into()));
    }
    // initial-condition consistency for rank-deficient systems
    if let Classification::Algebraic { r_f, block_order, .. } = class {
        let dim = bundle.partition.n_nc();
        if *r_f < dim {
            let frame = build_fg_frame(bundle, ic, None)?;
            let decomp = GaugeDecomposition::build(&frame.fg, Some(block_order), bundle.pivot_tol)?;
            if decomp.g_relation_residual > CONSISTENCY_TOL {
                return Err(Error::InitialCondition {
                    detail: format!(
                        "dependent-row residual {:.3e} exceeds {CONSISTENCY_TOL:.0e} at the initial point",
                        decomp.g_relation_residual
                    ),
                });
            }
        }
        let expected = dim - r_f;
        if gauge_input.len() != expected {
            return Err(Error::Config(format!(
                "gauge input has {} components, expected {}",
                gauge_input.len(),
                expected
            )));
        }
    }

    let layout = StateLayout {
        n_p: bundle.partition.n_p,
        n_nc: bundle.partition.n_nc(),
        extended: matches!(class, Classification::VelocityExtended),
    };
    let mut warm: Option<Vec<f64>> = None;
    let mut eval = |t: f64, y: &[f64], warm: &mut Option<Vec<f64>>| -> Result<(Vec<f64>, StepRhs)> {
        let x = layout.unpack(t, y);
        let rhs = match class {
            Classification::Algebraic { .. } => {
                algebraic_rhs(bundle, class, gauge_input, &x, warm.as_deref())?
            }
            Classification::VelocityExtended => extended_rhs(bundle, &x, warm.as_deref())?,
        };
        *warm = Some(rhs.v.clone());
        Ok((layout.deriv(&rhs), rhs))
    };

    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut diagnostics = Vec::new();
    let mut failure = None;
    let mut record = |t: f64, y: &[f64], rhs: &StepRhs| {
        let mut x = layout.unpack(t, y);
        // keep the solved velocities with the state for diagnostics
        if !layout.extended {
            x = x.with_qd_nc(rhs.qd_nc.clone());
        }
        times.push(t);
        states.push(x);
        diagnostics.push(rhs.diag.clone());
    };

    let mut y = layout.pack(ic);
    match method {
        Method::Rk4 => {
            let span = t1 - ic.t;
            let steps = (span / dt).round().max(1.0) as usize;
            let h = span / steps as f64;
            let mut t = ic.t;
            for _ in 0..steps {
                let k1 = match eval(t, &y, &mut warm) {
                    Ok((dy, rhs)) => {
                        record(t, &y, &rhs);
                        dy
                    }
                    Err(e) => {
                        failure = Some(e.to_string());
                        break;
                    }
                };
                let stage = |y0: &[f64], k: &[f64], s: f64| -> Vec<f64> {
                    y0.iter().zip(k).map(|(a, b)| a + s * b).collect()
                };
                let result = (|| -> Result<Vec<f64>> {
                    let (k2, _) = eval(t + h / 2.0, &stage(&y, &k1, h / 2.0), &mut warm)?;
                    let (k3, _) = eval(t + h / 2.0, &stage(&y, &k2, h / 2.0), &mut warm)?;
                    let (k4, _) = eval(t + h, &stage(&y, &k3, h), &mut warm)?;
                    Ok(y.iter()
                        .enumerate()
                        .map(|(i, &yi)| yi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                        .collect())
                })();
                match result {
                    Ok(next) => {
                        y = next;
                        t += h;
                    }
                    Err(e) => {
                        failure = Some(e.to_string());
                        break;
                    }
                }
            }
            if failure.is_none() {
                match eval(t1, &y, &mut warm) {
                    Ok((_, rhs)) => record(t1, &y, &rhs),
                    Err(e) => failure = Some(e.to_string()),
                }
            }
        }
        Method::Rk45 => {
            let rtol = 1e-8;
            let atol = 1e-8;
            let mut t = ic.t;
            let mut h = dt.min(t1 - t);
            let a: [&[f64]; 5] = [
                &[0.25],
                &[3.0 / 32.0, 9.0 / 32.0],
                &[1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0],
                &[439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0],
                &[-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
            ];
            let c = [0.0, 0.25, 0.375, 12.0 / 13.0, 1.0, 0.5];
            let b5 = [16.0 / 135.0, 0.0, 6656.0 / 12825.0, 28561.0 / 56430.0, -9.0 / 50.0, 2.0 / 55.0];
            let b4 = [25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -0.2, 0.0];
            'outer: while t < t1 - 1e-14 * t1.abs().max(1.0) {
                h = h.min(t1 - t);
                let (k1, rhs1) = match eval(t, &y, &mut warm) {
                    Ok(v) => v,
                    Err(e) => {
                        failure = Some(e.to_string());
                        break;
                    }
                };
                loop {
                    let mut ks: Vec<Vec<f64>> = vec![k1.clone()];
                    for s in 0..5 {
                        let mut ys = y.clone();
                        for (j, &aj) in a[s].iter().enumerate() {
                            for (yi, kj) in ys.iter_mut().zip(&ks[j]) {
                                *yi += h * aj * kj;
                            }
                        }
                        match eval(t + c[s + 1] * h, &ys, &mut warm) {
                            Ok((k, _)) => ks.push(k),
                            Err(e) => {
                                failure = Some(e.to_string());
                                break 'outer;
                            }
                        }
                    }
                    let mut y5 = y.clone();
                    let mut y4 = y.clone();
                    for (s, k) in ks.iter().enumerate() {
                        for i in 0..y.len() {
                            y5[i] += h * b5[s] * k[i];
                            y4[i] += h * b4[s] * k[i];
                        }
                    }
                    let mut err = 0.0_f64;
                    for i in 0..y.len() {
                        let sc = atol + rtol * y[i].abs().max(y5[i].abs());
                        err = err.max((y5[i] - y4[i]).abs() / sc);
                    }
                    if err <= 1.0 {
                        record(t, &y, &rhs1);
                        y = y5;
                        t += h;
                        let grow = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
                        h *= grow.clamp(0.2, 5.0);
                        break;
                    }
                    h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0).min(0.5);
                    if h < 1e-14 {
                        failure = Some("adaptive step collapsed below 1e-14".to_string());
                        break 'outer;
                    }
                }
            }
            if failure.is_none() {
                match eval(t1, &y, &mut warm) {
                    Ok((_, rhs)) => record(t1, &y, &rhs),
                    Err(e) => failure = Some(e.to_string()),
                }
            }
        }
    }
    Ok(Trajectory { times, states, diagnostics, failure })
}

/// Residual of the second-order noncanonical equation along a trajectory.
///
/// Accelerations and total time derivatives come from central differences on
/// the stored states (interior points only), all Hamiltonian derivatives
/// from the analytic gradients. Returns max |LHS - RHS| per interior point.
pub fn residual_second_order(
    bundle: &HamiltonianBundle,
    times: &[f64],
    states: &[PhasePoint],
) -> Result<Vec<f64>> {
    if times.len() < 3 {
        return Err(Error::TrajectoryTooShort { len: times.len() });
    }
    let n_nc = bundle.partition.n_nc();
    let n_p = bundle.partition.n_p;
    if n_nc == 0 {
        return Ok(vec![0.0; times.len() - 2]);
    }
    // g_alpha = dH0/du_alpha + sum_beta dH_beta/du_alpha u_beta
    let g_vec = |grads: &GradBundle, u: &[f64]| -> Vec<f64> {
        (0..n_nc)
            .map(|alpha| {
                let mut v = grads.h0.d_dqd_nc[alpha];
                for (beta, ub) in u.iter().enumerate() {
                    v += grads.h_alpha[beta].d_dqd_nc[alpha] * ub;
                }
                v
            })
            .collect()
    };
    let mut out = Vec::with_capacity(times.len() - 2);
    for k in 1..times.len() - 1 {
        let span = times[k + 1] - times[k - 1];
        let u_prev = states[k - 1].qd_nc_or_zero();
        let u_next = states[k + 1].qd_nc_or_zero();
        let u_here = states[k].qd_nc_or_zero();
        let grads_prev = bundle.grads_all(&states[k - 1])?;
        let grads_next = bundle.grads_all(&states[k + 1])?;
        let grads = bundle.grads_all(&states[k])?;
        let g_prev = g_vec(&grads_prev, &u_prev);
        let g_next = g_vec(&grads_next, &u_next);
        let mut worst = 0.0_f64;
        for alpha in 0..n_nc {
            // LHS: dH_alpha/du_beta * udd_beta + d/dt(g_alpha)
            let mut lhs = 0.0;
            for beta in 0..n_nc {
                let udd = (u_next[beta] - u_prev[beta]) / span;
                lhs += grads.h_alpha[alpha].d_dqd_nc[beta] * udd;
            }
            lhs += (g_next[alpha] - g_prev[alpha]) / span;
            // RHS: (dH_beta/dq_alpha - dH_alpha/dq_beta + {H_beta, H_alpha}) u_beta
            //      + dH0/dq_alpha - dH_alpha/dt + {H0, H_alpha}
            let mut rhs = 0.0;
            for (beta, ub) in u_here.iter().enumerate() {
                let ga = &grads.h_alpha[alpha];
                let gb = &grads.h_alpha[beta];
                let mut bracket = 0.0;
                for i in 0..n_p {
                    bracket += gb.d_dq_c[i] * ga.d_dp[i] - ga.d_dq_c[i] * gb.d_dp[i];
                }
                rhs += (ga.d_dq_nc[beta].mul_add(-1.0, gb.d_dq_nc[alpha]) + bracket) * ub;
            }
            let ga = &grads.h_alpha[alpha];
            let g0 = &grads.h0;
            let mut bracket = 0.0;
            for i in 0..n_p {
                bracket += g0.d_dq_c[i] * ga.d_dp[i] - ga.d_dq_c[i] * g0.d_dp[i];
            }
            rhs += g0.d_dq_nc[alpha] - ga.d_dt + bracket;
            worst = worst.max((lhs - rhs).abs());
        }
        out.push(worst);
    }
    Ok(out)
}

/// Wrap Lagrangian states (q, qd) as phase points of the bundle's partition,
/// with momenta from the momenta map.
pub fn phase_points_from_lagrangian(
    bundle: &HamiltonianBundle,
    times: &[f64],
    states: &[(Vec<f64>, Vec<f64>)],
) -> Result<Vec<PhasePoint>> {
    let part = &bundle.partition;
    times
        .iter()
        .zip(states)
        .map(|(&t, (q, qd))| {
            let binding = Binding::new(t, q.clone(), qd.clone());
            let p: Vec<f64> = (0..part.n_p)
                .map(|i| bundle.sys.eval(&bundle.sys.dl_dqd[part.canonical(i)], &binding))
                .collect::<Result<_>>()?;
            let (q_c, q_nc) = part.from_original(q);
            let qd_nc: Vec<f64> = (0..part.n_nc())
                .map(|a| qd[part.noncanonical(a)])
                .collect();
            Ok(PhasePoint::new(t, q_c, p, q_nc).with_qd_nc(qd_nc))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reference integrators: independent oracles sharing only the expression
// evaluator with the formalism path.
// ---------------------------------------------------------------------------

/// Hand-derived first-order reduction of the Euler–Lagrange equations for a
/// singular model, shipped with the model library.
#[derive(Clone, Copy)]
pub struct ReducedEl {
    pub state_dim: usize,
    pub init: fn(q: &[f64], qd: &[f64]) -> Vec<f64>,
    pub rhs: fn(t: f64, s: &[f64]) -> Vec<f64>,
    /// Recover (q, qd) from the reduced state.
    pub extract: fn(t: f64, s: &[f64]) -> (Vec<f64>, Vec<f64>),
}

impl std::fmt::Debug for ReducedEl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReducedEl").field("state_dim", &self.state_dim).finish()
    }
}

/// Configuration-space trajectory from a reference integrator.
#[derive(Debug, Clone)]
pub struct LagrangianTrajectory {
    pub times: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub qd: Vec<Vec<f64>>,
}

fn rk4_fixed(
    t0: f64,
    t1: f64,
    dt: f64,
    y0: Vec<f64>,
    mut f: impl FnMut(f64, &[f64]) -> Result<Vec<f64>>,
    mut visit: impl FnMut(f64, &[f64]),
) -> Result<()> {
    let span = t1 - t0;
    let steps = (span / dt).round().max(1.0) as usize;
    let h = span / steps as f64;
    let mut y = y0;
    let mut t = t0;
    visit(t, &y);
    for _ in 0..steps {
        let k1 = f(t, &y)?;
        let mk = |k: &[f64], s: f64| -> Vec<f64> {
            y.iter().zip(k).map(|(a, b)| a + s * b).collect()
        };
        let k2 = f(t + h / 2.0, &mk(&k1, h / 2.0))?;
        let k3 = f(t + h / 2.0, &mk(&k2, h / 2.0))?;
        let k4 = f(t + h, &mk(&k3, h))?;
        y = y
            .iter()
            .enumerate()
            .map(|(i, &yi)| yi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        t += h;
        visit(t, &y);
    }
    Ok(())
}

/// Integrate the Euler–Lagrange equations: W qdd = dL/dq - d2L/dqd dq qd
/// - d2L/dqd dt, solved directly for the accelerations. Singular Hessians
/// require a library-provided reduction.
pub fn reference_euler_lagrange(
    sys: &LagrangianSystem,
    q0: &[f64],
    qd0: &[f64],
    t1: f64,
    dt: f64,
    reduced: Option<&ReducedEl>,
    pivot_tol: f64,
) -> Result<LagrangianTrajectory> {
    let n = sys.n;
    let mut out = LagrangianTrajectory { times: vec![], q: vec![], qd: vec![] };
    if let Some(red) = reduced {
        let s0 = (red.init)(q0, qd0);
        let extract = red.extract;
        let rhs = red.rhs;
        rk4_fixed(
            0.0,
            t1,
            dt,
            s0,
            |t, s| Ok(rhs(t, s)),
            |t, s| {
                let (q, qd) = extract(t, s);
                out.times.push(t);
                out.q.push(q);
                out.qd.push(qd);
            },
        )?;
        return Ok(out);
    }
    let mut y0 = q0.to_vec();
    y0.extend_from_slice(qd0);
    rk4_fixed(
        0.0,
        t1,
        dt,
        y0,
        |t, y| {
            let binding = Binding::new(t, y[..n].to_vec(), y[n..].to_vec());
            let mut w = Mat::zeros(n, n);
            let mut rhs = vec![0.0; n];
            for a in 0..n {
                for b in 0..n {
                    w.set(a, b, sys.eval(&sys.w[a][b], &binding)?);
                }
                let mut v =
                    sys.eval(&sys.dl_dq[a], &binding)? - sys.eval(&sys.d2l_dqd_dt[a], &binding)?;
                for b in 0..n {
                    v -= sys.eval(&sys.d2l_dqd_dq[a][b], &binding)? * binding.qd[b];
                }
                rhs[a] = v;
            }
            let accel = Lu::factor(&w, pivot_tol)?.solve(&rhs);
            let mut dy = y[n..].to_vec();
            dy.extend(accel);
            Ok(dy)
        },
        |t, y| {
            out.times.push(t);
            out.q.push(y[..n].to_vec());
            out.qd.push(y[n..].to_vec());
        },
    )?;
    Ok(out)
}

/// Full-space Hamilton trajectory (q_A, p_A).
#[derive(Debug, Clone)]
pub struct FullHamiltonTrajectory {
    pub times: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
}

/// Integrate the full Hamilton equations with every coordinate carrying a
/// momentum. Self-contained Newton inversion of the full momenta map, so the
/// only shared code with the formalism path is the expression evaluator.
pub fn reference_full_hamilton(
    sys: &LagrangianSystem,
    q0: &[f64],
    p0: &[f64],
    t1: f64,
    dt: f64,
    pivot_tol: f64,
) -> Result<FullHamiltonTrajectory> {
    let n = sys.n;
    let mut out = FullHamiltonTrajectory { times: vec![], q: vec![], p: vec![] };
    let mut y0 = q0.to_vec();
    y0.extend_from_slice(p0);
    let mut warm = vec![0.0; n];
    rk4_fixed(
        0.0,
        t1,
        dt,
        y0,
        |t, y| {
            let q = &y[..n];
            let p = &y[n..];
            // invert p = dL/dqd for all velocities
            let mut v = warm.clone();
            let mut converged = false;
            for _ in 0..50 {
                let binding = Binding::new(t, q.to_vec(), v.clone());
                let mut f = vec![0.0; n];
                for a in 0..n {
                    f[a] = sys.eval(&sys.dl_dqd[a], &binding)? - p[a];
                }
                let res = f.iter().fold(0.0_f64, |m, &x| m.max(x.abs()));
                if res <= 1e-12 {
                    converged = true;
                    break;
                }
                let mut w = Mat::zeros(n, n);
                for a in 0..n {
                    for b in 0..n {
                        w.set(a, b, sys.eval(&sys.w[a][b], &binding)?);
                    }
                }
                let lu = Lu::factor(&w, pivot_tol)?;
                let neg: Vec<f64> = f.iter().map(|&x| -x).collect();
                let delta = lu.solve(&neg);
                for (vi, di) in v.iter_mut().zip(&delta) {
                    *vi += di;
                }
            }
            if !converged {
                return Err(Error::NoConvergence { iterations: 50, residual: f64::NAN });
            }
            warm = v.clone();
            let binding = Binding::new(t, q.to_vec(), v.clone());
            let mut dy = v.clone();
            for a in 0..n {
                dy.push(sys.eval(&sys.dl_dq[a], &binding)?);
            }
            Ok(dy)
        },
        |t, y| {
            out.times.push(t);
            out.q.push(y[..n].to_vec());
            out.p.push(y[n..].to_vec());
        },
    )?;
    Ok(out)
}
