//! Multi-time dynamics: the noncanonical coordinates become additional time
//! parameters, each with its own Hamiltonian, and trajectories are driven
//! along paths in time space. Integrability of the pair structure is a
//! diagnostic, not a gate: exploring its failure is part of the point.

use crate::brackets::{poisson_of, Observable, PhaseFunction};
use crate::error::{Error, Result};
use crate::legendre::{Ham, HamiltonianBundle, PhasePoint};

/// One Hamiltonian of a multi-time system.
pub enum MtHamiltonian {
    FromModel { bundle: HamiltonianBundle, which: Ham },
    Closed(Observable),
}

impl PhaseFunction for MtHamiltonian {
    fn value_at(&self, x: &PhasePoint) -> Result<f64> {
        match self {
            MtHamiltonian::FromModel { bundle, which } => match which {
                Ham::H0 => bundle.eval_h0(x),
                Ham::Alpha(a) => Ok(bundle.eval_h_alpha(x)?[*a]),
            },
            MtHamiltonian::Closed(obs) => obs.value_at(x),
        }
    }

    fn gradient_at(&self, x: &PhasePoint) -> Result<crate::brackets::PhaseGradient> {
        match self {
            MtHamiltonian::FromModel { bundle, which } => {
                let g = bundle.grad(x, *which)?;
                Ok(crate::brackets::PhaseGradient {
                    value: g.value,
                    d_dq_c: g.d_dq_c,
                    d_dp: g.d_dp,
                    d_dq_nc: g.d_dq_nc,
                    d_dp_nc: vec![0.0; bundle.partition.n_nc()],
                    d_dt: g.d_dt,
                })
            }
            MtHamiltonian::Closed(obs) => obs.gradient_at(x),
        }
    }
}

/// A system with m+1 times tau^mu and one Hamiltonian per time, over a
/// canonical phase space of dimension 2 n_p.
///
/// Phase points carry tau^0 in `t` and tau^1..tau^m in `q_nc`.
pub struct MultiTimeSystem {
    pub n_p: usize,
    pub m: usize,
    hams: Vec<MtHamiltonian>,
}

impl MultiTimeSystem {
    /// Reinterpret a nondynamical model: extra times are the noncanonical
    /// coordinates and their Hamiltonians the additional Hamiltonians.
    pub fn from_model(bundle: &HamiltonianBundle, probes: &[PhasePoint]) -> Result<Self> {
        for x in probes {
            bundle.require_nondynamical(x, 1e-9)?;
        }
        let m = bundle.partition.n_nc();
        let n_p = bundle.partition.n_p;
        let mut hams = vec![MtHamiltonian::FromModel { bundle: bundle.clone(), which: Ham::H0 }];
        for a in 0..m {
            hams.push(MtHamiltonian::FromModel { bundle: bundle.clone(), which: Ham::Alpha(a) });
        }
        Ok(MultiTimeSystem { n_p, m, hams })
    }

    /// Hand-built system from closed-form Hamiltonians (index mu = 0..=m).
    pub fn from_observables(n_p: usize, hams: Vec<Observable>) -> Result<Self> {
        if hams.is_empty() {
            return Err(Error::Config("need at least one Hamiltonian".into()));
        }
        let m = hams.len() - 1;
        Ok(MultiTimeSystem { n_p, m, hams: hams.into_iter().map(MtHamiltonian::Closed).collect() })
    }

    /// True when no canonical pairs remain (dynamics is trivial).
    pub fn degenerate(&self) -> bool {
        self.n_p == 0
    }

    pub fn hamiltonian(&self, mu: usize) -> &MtHamiltonian {
        &self.hams[mu]
    }

    /// Max over probes and index pairs of the zero-curvature residual
    /// | dH_mu/dtau_nu - dH_nu/dtau_mu + {H_mu, H_nu} |.
    pub fn check_integrability(&self, probes: &[PhasePoint]) -> Result<f64> {
        let mut worst = 0.0_f64;
        for x in probes {
            let grads: Vec<crate::brackets::PhaseGradient> = self
                .hams
                .iter()
                .map(|h| h.gradient_at(x))
                .collect::<Result<_>>()?;
            let d_dtau = |g: &crate::brackets::PhaseGradient, nu: usize| -> f64 {
                if nu == 0 {
                    g.d_dt
                } else {
                    g.d_dq_nc[nu - 1]
                }
            };
            for mu in 0..=self.m {
                for nu in (mu + 1)..=self.m {
                    let r = d_dtau(&grads[mu], nu) - d_dtau(&grads[nu], mu)
                        + poisson_of(&grads[mu], &grads[nu]);
                    worst = worst.max(r.abs());
                }
            }
        }
        Ok(worst)
    }
}

/// Piecewise-linear path in time space: ordered waypoints of length m+1
/// with tau^0 nondecreasing and consecutive waypoints distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePath {
    pub waypoints: Vec<Vec<f64>>,
}

impl TimePath {
    pub fn new(waypoints: Vec<Vec<f64>>) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::Config("path needs at least one waypoint".into()));
        }
        let dim = waypoints[0].len();
        for w in &waypoints {
            if w.len() != dim {
                return Err(Error::Config("waypoints differ in dimension".into()));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("non-finite waypoint".into()));
            }
        }
        for pair in waypoints.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::Config("consecutive waypoints coincide".into()));
            }
            if pair[1][0] < pair[0][0] {
                return Err(Error::Config("tau^0 must be nondecreasing".into()));
            }
        }
        Ok(TimePath { waypoints })
    }

    /// Parse lines of comma-separated reals.
    pub fn parse(text: &str) -> Result<Self> {
        let mut waypoints = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(k) => &raw[..k],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let w: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| Error::ModelFormat {
                        line: lineno + 1,
                        msg: format!("bad number `{}`", s.trim()),
                    })
                })
                .collect::<Result<_>>()?;
            waypoints.push(w);
        }
        TimePath::new(waypoints)
    }

    pub fn dim(&self) -> usize {
        self.waypoints[0].len()
    }
}

/// Trace of a path integration.
#[derive(Debug, Clone)]
pub struct PathTrace {
    /// Phase points along the path (tau packed as t / q_nc).
    pub points: Vec<PhasePoint>,
    pub endpoint_q: Vec<f64>,
    pub endpoint_p: Vec<f64>,
}

/// Integrate dq_i = {q_i, H_mu} dtau^mu, dp_i = {p_i, H_mu} dtau^mu along a
/// piecewise-linear path by RK4 in arclength with step `dt`.
pub fn integrate_path(
    sys: &MultiTimeSystem,
    ic_q: &[f64],
    ic_p: &[f64],
    path: &TimePath,
    dt: f64,
) -> Result<PathTrace> {
    if path.dim() != sys.m + 1 {
        return Err(Error::Config(format!(
            "path dimension {} does not match {} times",
            path.dim(),
            sys.m + 1
        )));
    }
    if dt <= 0.0 {
        return Err(Error::Config("dt must be positive".into()));
    }
    let n_p = sys.n_p;
    let point_at = |tau: &[f64], q: &[f64], p: &[f64]| -> PhasePoint {
        PhasePoint::new(tau[0], q.to_vec(), p.to_vec(), tau[1..].to_vec())
    };
    let mut q = ic_q.to_vec();
    let mut p = ic_p.to_vec();
    let mut points = vec![point_at(&path.waypoints[0], &q, &p)];
    for seg in path.waypoints.windows(2) {
        let (w0, w1) = (&seg[0], &seg[1]);
        let delta: Vec<f64> = w1.iter().zip(w0).map(|(a, b)| a - b).collect();
        let len = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        let u: Vec<f64> = delta.iter().map(|d| d / len).collect();
        let steps = (len / dt).ceil().max(1.0) as usize;
        let h = len / steps as f64;
        // dy/ds at arclength s along the segment
        let rhs = |s: f64, y: &[f64]| -> Result<Vec<f64>> {
            let tau: Vec<f64> = w0.iter().zip(&u).map(|(a, ui)| a + ui * s).collect();
            let x = point_at(&tau, &y[..n_p], &y[n_p..]);
            let mut dy = vec![0.0; 2 * n_p];
            for (mu, ham) in sys.hams.iter().enumerate() {
                if u[mu] == 0.0 {
                    continue;
                }
                let g = ham.gradient_at(&x)?;
                for i in 0..n_p {
                    dy[i] += g.d_dp[i] * u[mu];
                    dy[n_p + i] -= g.d_dq_c[i] * u[mu];
                }
            }
            Ok(dy)
        };
        let mut y: Vec<f64> = q.iter().chain(p.iter()).copied().collect();
        let mut s = 0.0;
        for _ in 0..steps {
            let k1 = rhs(s, &y)?;
            let mk = |k: &[f64], step: f64| -> Vec<f64> {
                y.iter().zip(k).map(|(a, b)| a + step * b).collect()
            };
            let k2 = rhs(s + h / 2.0, &mk(&k1, h / 2.0))?;
            let k3 = rhs(s + h / 2.0, &mk(&k2, h / 2.0))?;
            let k4 = rhs(s + h, &mk(&k3, h))?;
            y = y
                .iter()
                .enumerate()
                .map(|(i, &yi)| yi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect();
            s += h;
            let tau: Vec<f64> = w0.iter().zip(&u).map(|(a, ui)| a + ui * s).collect();
            points.push(point_at(&tau, &y[..n_p], &y[n_p..]));
        }
        q = y[..n_p].to_vec();
        p = y[n_p..].to_vec();
    }
    Ok(PathTrace { points, endpoint_q: q, endpoint_p: p })
}
