//! Built-in model library with the facts the selftest gate checks against:
//! expected Hessian rank, expected classification, and hand-derived reduced
//! Euler–Lagrange oracles for the singular entries.

use std::sync::Arc;

use crate::dynamics::{classify, default_phase_probes, Classification, ReducedEl};
use crate::error::{Error, Result};
use crate::legendre::HamiltonianBundle;
use crate::model::{analyze_hessian, default_probes, parse_model, LagrangianSystem, PIVOT_TOL};

pub struct LibraryEntry {
    pub name: &'static str,
    pub source: &'static str,
    pub expected_r_w: usize,
    /// Classification label at the default n_p = rank.
    pub expected_kind: &'static str,
    pub reduced_el: Option<ReducedEl>,
    pub summary: &'static str,
}

// firstorder: EL gives qd1 = q2, qd2 = -q1 directly (no accelerations).
fn firstorder_el() -> ReducedEl {
    ReducedEl {
        state_dim: 2,
        init: |q, _qd| q.to_vec(),
        rhs: |_t, s| vec![s[1], -s[0]],
        extract: |_t, s| (s.to_vec(), vec![s[1], -s[0]]),
    }
}

// gauge1: the q2 equation enforces qd1 = q2; q2 itself is a gauge degree,
// held constant (the zero gauge condition).
fn gauge1_el() -> ReducedEl {
    ReducedEl {
        state_dim: 2,
        init: |q, _qd| q.to_vec(),
        rhs: |_t, s| vec![s[1], 0.0],
        extract: |_t, s| (s.to_vec(), vec![s[1], 0.0]),
    }
}

// rotgauge with the zero gauge condition (qd3 = 0): second order in q1, q2.
// State (q1, q2, q3, u1, u2).
fn rotgauge_el() -> ReducedEl {
    ReducedEl {
        state_dim: 5,
        init: |q, qd| vec![q[0], q[1], q[2], qd[0], qd[1]],
        rhs: |_t, s| {
            let (q1, q2, q3, u1, u2) = (s[0], s[1], s[2], s[3], s[4]);
            vec![
                u1,
                u2,
                0.0,
                2.0 * q3 * u2 + q3 * q3 * q1,
                -2.0 * q3 * u1 + q3 * q3 * q2,
            ]
        },
        extract: |_t, s| (vec![s[0], s[1], s[2]], vec![s[3], s[4], 0.0]),
    }
}

/// The shipped models.
pub fn library() -> Vec<LibraryEntry> {
    vec![
        LibraryEntry {
            name: "osc1",
            source: "name = osc1\ncoords = q1\nlagrangian = qd1^2/2 - q1^2/2",
            expected_r_w: 1,
            expected_kind: "nongauge",
            reduced_el: None,
            summary: "harmonic oscillator, one degree of freedom, regular",
        },
        LibraryEntry {
            name: "osc2",
            source: "name = osc2\ncoords = q1, q2\nlagrangian = (qd1^2 + qd2^2)/2 - q1^2/2 - 2*q2^2",
            expected_r_w: 2,
            expected_kind: "nongauge",
            reduced_el: None,
            summary: "two uncoupled oscillators with distinct frequencies, regular",
        },
        LibraryEntry {
            name: "firstorder",
            source: "name = firstorder\ncoords = q1, q2\nlagrangian = q2*qd1 - 0.5*(q1^2 + q2^2)",
            expected_r_w: 0,
            expected_kind: "nongauge",
            reduced_el: Some(firstorder_el()),
            summary: "first-order Lagrangian, zero Hessian rank, invertible F",
        },
        LibraryEntry {
            name: "gauge1",
            source: "name = gauge1\ncoords = q1, q2\nlagrangian = (qd1 - q2)^2/2",
            expected_r_w: 1,
            expected_kind: "abelian-limit",
            reduced_el: Some(gauge1_el()),
            summary: "one gauge degree of freedom, F identically zero",
        },
        LibraryEntry {
            name: "rotgauge",
            source: "name = rotgauge\ncoords = q1, q2, q3\nlagrangian = (qd1 - q3*q2)^2/2 + (qd2 + q3*q1)^2/2",
            expected_r_w: 2,
            expected_kind: "abelian-limit",
            reduced_el: Some(rotgauge_el()),
            summary: "rotational coupling through a velocity-less multiplier coordinate",
        },
        LibraryEntry {
            name: "forced",
            source: "name = forced\ncoords = q1\nlagrangian = qd1^2/2 - q1*sin(t)",
            expected_r_w: 1,
            expected_kind: "nongauge",
            reduced_el: None,
            summary: "driven oscillator with explicit time dependence",
        },
    ]
}

pub fn find(name: &str) -> Option<LibraryEntry> {
    library().into_iter().find(|e| e.name == name)
}

/// A model assembled for analysis: system, bundle, classification.
pub struct Assembled {
    pub sys: Arc<LagrangianSystem>,
    pub bundle: HamiltonianBundle,
    pub classification: Classification,
    pub reduced_el: Option<ReducedEl>,
}

/// Resolve a library name or model-file path, analyze the Hessian, and
/// classify the dynamics.
pub fn assemble(
    model: &str,
    n_p: Option<usize>,
    seed: u64,
    pivot_tol: f64,
) -> Result<Assembled> {
    let (sys, reduced_el) = match find(model) {
        Some(entry) => (Arc::new(parse_model(entry.source)?), entry.reduced_el),
        None => {
            let path = std::path::Path::new(model);
            if !path.exists() {
                return Err(Error::Config(format!(
                    "`{model}` is neither a library model nor an existing file"
                )));
            }
            (crate::model::load_model(path)?, None)
        }
    };
    let probes = default_probes(sys.n, seed);
    let partition = analyze_hessian(&sys, &probes, pivot_tol, n_p)?;
    let bundle = HamiltonianBundle::new(Arc::clone(&sys), partition, pivot_tol);
    let phase_probes = default_phase_probes(&bundle, 8, seed);
    let classification = classify(&bundle, &phase_probes, pivot_tol)?;
    Ok(Assembled { sys, bundle, classification, reduced_el })
}

/// Convenience for tests and the selftest: assemble a library entry with
/// defaults.
pub fn assemble_default(name: &str) -> Result<Assembled> {
    assemble(name, None, crate::model::DEFAULT_SEED, PIVOT_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_ships_expected_entries() {
        let lib = library();
        assert!(lib.len() >= 6);
        for name in ["osc1", "osc2", "firstorder", "gauge1", "rotgauge", "forced"] {
            assert!(lib.iter().any(|e| e.name == name), "missing {name}");
        }
    }

    #[test]
    fn expected_facts_hold() {
        for entry in library() {
            let a = assemble_default(entry.name).unwrap();
            assert_eq!(
                a.bundle.partition.r_w, entry.expected_r_w,
                "rank of {}",
                entry.name
            );
            assert_eq!(
                a.classification.kind_label(),
                entry.expected_kind,
                "classification of {}",
                entry.name
            );
        }
    }

    #[test]
    fn rotgauge_rank_is_two() {
        // oracle: Hessian diag(1, 1, 0)
        let a = assemble_default("rotgauge").unwrap();
        assert_eq!(a.bundle.partition.r_w, 2);
        assert_eq!(a.classification.gauge_params(), 1);
    }

    #[test]
    fn forced_model_is_time_dependent() {
        let a = assemble_default("forced").unwrap();
        assert!(!a.sys.time_independent());
        let b = assemble_default("osc1").unwrap();
        assert!(b.sys.time_independent());
    }

    #[test]
    fn assemble_rejects_unknown_model() {
        assert!(matches!(
            assemble("nonexistent", None, 42, PIVOT_TOL),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reduced_el_oracles_satisfy_their_equations() {
        // firstorder reduction solves the EL system exactly: qd1 = q2 and
        // qd2 = -q1 give a circle
        let red = firstorder_el();
        let s = vec![1.0, 0.0];
        let ds = (red.rhs)(0.0, &s);
        assert_eq!(ds, vec![0.0, -1.0]);

        // rotgauge reduction preserves the multiplier equation
        // q2 qd1 - q1 qd2 + q3 (q1^2 + q2^2)... expressed as G = 0 in
        // momenta; spot-check the derivative of the constraint is zero
        let red = rotgauge_el();
        let s = vec![1.0, 0.5, 0.3, 0.2, 0.1];
        let constraint = |s: &[f64]| {
            let (q1, q2, q3, u1, u2) = (s[0], s[1], s[2], s[3], s[4]);
            let p1 = u1 - q3 * q2;
            let p2 = u2 + q3 * q1;
            q2 * p1 - q1 * p2
        };
        // advance one small RK4 step and check the constraint is conserved
        let mut state = s.clone();
        // start on the constraint surface: pick u2 so the constraint is 0
        // q2(u1 - q3 q2) = q1(u2 + q3 q1) => u2 = q2(u1 - q3 q2)/q1 - q3 q1
        state[4] = 0.5 * (0.2 - 0.3 * 0.5) / 1.0 - 0.3 * 1.0;
        assert!(constraint(&state).abs() < 1e-15);
        let h = 1e-3;
        for _ in 0..100 {
            let k1 = (red.rhs)(0.0, &state);
            let mk = |k: &Vec<f64>, f: f64| -> Vec<f64> {
                state.iter().zip(k).map(|(a, b)| a + f * b).collect()
            };
            let k2 = (red.rhs)(0.0, &mk(&k1, h / 2.0));
            let k3 = (red.rhs)(0.0, &mk(&k2, h / 2.0));
            let k4 = (red.rhs)(0.0, &mk(&k3, h));
            state = state
                .iter()
                .enumerate()
                .map(|(i, &x)| x + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect();
        }
        assert!(constraint(&state).abs() < 1e-10, "constraint {}", constraint(&state));
    }
}
