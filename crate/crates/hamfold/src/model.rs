//! Lagrangian systems: model files, symbolic derivative tables, Hessian rank
//! analysis, and the canonical/noncanonical coordinate partition.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::expr::{self, Binding, Expr};
use crate::linalg::{best_principal_minor, rank_complete_pivot, Mat};

/// Default pivot tolerance: separates exact structural zeros from O(1)
/// entries across ~9 orders of magnitude in double precision.
pub const PIVOT_TOL: f64 = 1e-9;

/// Default probe count and RNG seed for numeric rank decisions.
pub const DEFAULT_PROBES: usize = 8;
pub const DEFAULT_SEED: u64 = 42;

/// A parsed Lagrangian with every symbolic derivative the formalism needs.
///
/// Coordinate labels come from the model file; position in `coord_labels`
/// defines the index A. All derivative tables are indexed by that position.
#[derive(Debug, Clone)]
pub struct LagrangianSystem {
    pub name: String,
    pub n: usize,
    pub coord_labels: Vec<String>,
    pub lagrangian: Expr,
    /// dL/dq_A
    pub dl_dq: Vec<Expr>,
    /// dL/dqd_A
    pub dl_dqd: Vec<Expr>,
    /// dL/dt
    pub dl_dt: Expr,
    /// Hessian W[A][B] = d2L/dqd_A dqd_B
    pub w: Vec<Vec<Expr>>,
    /// d2L/dqd_A dq_B
    pub d2l_dqd_dq: Vec<Vec<Expr>>,
    /// d2L/dqd_A dt
    pub d2l_dqd_dt: Vec<Expr>,
    resolver: HashMap<String, Slot>,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Time,
    Coord(usize),
    Velocity(usize),
}

impl LagrangianSystem {
    pub fn new(name: &str, coord_labels: Vec<String>, lagrangian: Expr) -> Result<Self> {
        let n = coord_labels.len();
        let mut resolver = HashMap::new();
        resolver.insert("t".to_string(), Slot::Time);
        for (a, label) in coord_labels.iter().enumerate() {
            let digits = &label[1..];
            resolver.insert(label.clone(), Slot::Coord(a));
            resolver.insert(format!("qd{digits}"), Slot::Velocity(a));
        }
        // every symbol in the Lagrangian must be declared
        for sym in lagrangian.symbols() {
            if !resolver.contains_key(&sym) {
                return Err(Error::DimensionMismatch { symbol: sym });
            }
        }
        let vel_label = |a: usize| format!("qd{}", &coord_labels[a][1..]);
        let dl_dq: Vec<Expr> = (0..n)
            .map(|a| expr::differentiate(&lagrangian, &coord_labels[a]))
            .collect();
        let dl_dqd: Vec<Expr> = (0..n)
            .map(|a| expr::differentiate(&lagrangian, &vel_label(a)))
            .collect();
        let dl_dt = expr::differentiate(&lagrangian, "t");
        let w: Vec<Vec<Expr>> = (0..n)
            .map(|a| {
                (0..n)
                    .map(|b| expr::differentiate(&dl_dqd[a], &vel_label(b)))
                    .collect()
            })
            .collect();
        let d2l_dqd_dq: Vec<Vec<Expr>> = (0..n)
            .map(|a| {
                (0..n)
                    .map(|b| expr::differentiate(&dl_dqd[a], &coord_labels[b]))
                    .collect()
            })
            .collect();
        let d2l_dqd_dt: Vec<Expr> = (0..n)
            .map(|a| expr::differentiate(&dl_dqd[a], "t"))
            .collect();
        Ok(LagrangianSystem {
            name: name.to_string(),
            n,
            coord_labels,
            lagrangian,
            dl_dq,
            dl_dqd,
            dl_dt,
            w,
            d2l_dqd_dq,
            d2l_dqd_dt,
            resolver,
        })
    }

    /// Evaluate any of the stored expressions at a binding indexed by
    /// coordinate position (not by textual label).
    pub fn eval(&self, e: &Expr, at: &Binding) -> Result<f64> {
        expr::evaluate_with(e, &|name| match self.resolver.get(name) {
            Some(Slot::Time) => Some(at.t),
            Some(Slot::Coord(a)) => at.q.get(*a).copied(),
            Some(Slot::Velocity(a)) => at.qd.get(*a).copied(),
            None => None,
        })
    }

    /// Numeric Hessian at a binding.
    pub fn hessian_at(&self, at: &Binding) -> Result<Mat> {
        let mut m = Mat::zeros(self.n, self.n);
        for a in 0..self.n {
            for b in 0..self.n {
                m.set(a, b, self.eval(&self.w[a][b], at)?);
            }
        }
        Ok(m)
    }

    /// True when the Lagrangian has no explicit time dependence.
    pub fn time_independent(&self) -> bool {
        self.dl_dt.is_zero()
    }
}

/// Canonical/noncanonical split of the coordinates after Hessian analysis.
///
/// `perm[slot]` is the original coordinate index occupying the permuted slot;
/// slots `0..n_p` form the canonical sector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub n: usize,
    pub r_w: usize,
    pub n_p: usize,
    pub perm: Vec<usize>,
}

impl Partition {
    pub fn n_nc(&self) -> usize {
        self.n - self.n_p
    }

    /// Original coordinate index of canonical slot `i`.
    pub fn canonical(&self, i: usize) -> usize {
        self.perm[i]
    }

    /// Original coordinate index of noncanonical slot `a`.
    pub fn noncanonical(&self, a: usize) -> usize {
        self.perm[self.n_p + a]
    }

    /// Permuted slot of an original coordinate index.
    pub fn slot_of(&self, original: usize) -> usize {
        self.perm.iter().position(|&x| x == original).unwrap()
    }

    /// Scatter a permuted coordinate vector back to original order.
    pub fn to_original(&self, q_c: &[f64], q_nc: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, &v) in q_c.iter().enumerate() {
            out[self.canonical(i)] = v;
        }
        for (a, &v) in q_nc.iter().enumerate() {
            out[self.noncanonical(a)] = v;
        }
        out
    }

    /// Split an original-order coordinate vector into (canonical, noncanonical).
    pub fn from_original(&self, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let q_c = (0..self.n_p).map(|i| q[self.canonical(i)]).collect();
        let q_nc = (0..self.n_nc()).map(|a| q[self.noncanonical(a)]).collect();
        (q_c, q_nc)
    }
}

/// Default probe states: coordinates and velocities uniform in [-1, 1],
/// times alternating between 0 and 0.37, seeded for reproducibility.
pub fn default_probes(n: usize, seed: u64) -> Vec<Binding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..DEFAULT_PROBES)
        .map(|k| {
            let t = if k % 2 == 0 { 0.0 } else { 0.37 };
            let q = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let qd = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Binding::new(t, q, qd)
        })
        .collect()
}

/// Rank the Hessian at the probe states and build the coordinate partition.
///
/// Rank is decided numerically with the complete-pivot policy; a rank that
/// varies across probes is an error (the construction assumes a fixed rank).
/// The permutation places a principal minor that stays nonsingular at every
/// probe in the upper-left corner. `n_p` defaults to the rank; larger values
/// are allowed for the constraint-origin demonstration, and smaller values
/// are accepted for regular systems when a nonsingular minor of that size
/// exists.
pub fn analyze_hessian(
    sys: &LagrangianSystem,
    probes: &[Binding],
    pivot_tol: f64,
    n_p_override: Option<usize>,
) -> Result<Partition> {
    if probes.is_empty() {
        return Err(Error::Config("probe list is empty".into()));
    }
    let mut mats: Vec<Mat> = Vec::new();
    for probe in probes {
        match sys.hessian_at(probe) {
            Ok(m) => mats.push(m),
            Err(Error::EvalDomain { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if mats.is_empty() {
        return Err(Error::AllProbesDegenerate);
    }
    let ranks: Vec<usize> = mats
        .iter()
        .map(|m| rank_complete_pivot(m, pivot_tol))
        .collect();
    let r_w = ranks[0];
    if ranks.iter().any(|&r| r != r_w) {
        return Err(Error::RankVariation {
            details: format!("hessian ranks across probes: {ranks:?}"),
        });
    }
    let n_p = n_p_override.unwrap_or(r_w);
    if n_p > sys.n {
        return Err(Error::Config(format!(
            "n_p = {n_p} exceeds configuration dimension {}",
            sys.n
        )));
    }

    // choose the canonical block: the principal minor of size min(n_p, r_w)
    // with the best worst-case |det| over probes
    let minor_size = n_p.min(r_w);
    let (mut head, score) = best_principal_minor(&mats, minor_size);
    if minor_size > 0 {
        let scale = mats.iter().map(Mat::max_abs).fold(0.0, f64::max);
        if score <= pivot_tol * scale.max(1.0) {
            return Err(Error::PartitionUnavailable {
                size: minor_size,
                best_det: score,
            });
        }
    }
    // over-extension: pad the canonical sector with the lowest unused indices
    while head.len() < n_p {
        let next = (0..sys.n).find(|i| !head.contains(i)).unwrap();
        head.push(next);
    }
    let mut perm = head.clone();
    for i in 0..sys.n {
        if !perm.contains(&i) {
            perm.push(i);
        }
    }
    let partition = Partition { n: sys.n, r_w, n_p, perm };

    // degeneracy condition: at n_p = r_w the noncanonical Hessian block must
    // vanish at every usable probe
    if n_p == r_w {
        let scale = mats.iter().map(Mat::max_abs).fold(0.0, f64::max).max(1.0);
        for m in &mats {
            for a in 0..partition.n_nc() {
                for b in 0..partition.n_nc() {
                    let v = m.at(partition.noncanonical(a), partition.noncanonical(b));
                    if v.abs() > pivot_tol * scale {
                        return Err(Error::Internal(format!(
                            "noncanonical Hessian block entry {v:.3e} nonzero with n_p = rank"
                        )));
                    }
                }
            }
        }
    }
    Ok(partition)
}

/// Parse the line-oriented model file format:
///
/// ```text
/// name = osc1
/// coords = q1, q2        # order defines the index A
/// lagrangian = qd1^2/2 - q1^2/2
/// ```
pub fn parse_model(text: &str) -> Result<LagrangianSystem> {
    let mut name: Option<String> = None;
    let mut coords: Option<Vec<String>> = None;
    let mut lagrangian_src: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(k) => &raw[..k],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::ModelFormat {
            line: lineno + 1,
            msg: "expected `key = value`".into(),
        })?;
        let key = key.trim();
        let value = value.trim().to_string();
        let slot = match key {
            "name" => &mut name,
            "coords" => {
                let labels: Vec<String> =
                    value.split(',').map(|s| s.trim().to_string()).collect();
                for label in &labels {
                    let ok = label.starts_with('q')
                        && label.len() > 1
                        && label[1..].bytes().all(|b| b.is_ascii_digit())
                        && !label[1..].starts_with('0');
                    if !ok {
                        return Err(Error::ModelFormat {
                            line: lineno + 1,
                            msg: format!("invalid coordinate label `{label}`"),
                        });
                    }
                }
                let mut seen = labels.clone();
                seen.sort();
                seen.dedup();
                if seen.len() != labels.len() {
                    return Err(Error::ModelFormat {
                        line: lineno + 1,
                        msg: "duplicate coordinate label".into(),
                    });
                }
                if coords.replace(labels).is_some() {
                    return Err(Error::ModelFormat {
                        line: lineno + 1,
                        msg: "duplicate `coords` key".into(),
                    });
                }
                continue;
            }
            "lagrangian" => &mut lagrangian_src,
            other => {
                return Err(Error::ModelFormat {
                    line: lineno + 1,
                    msg: format!("unknown key `{other}`"),
                })
            }
        };
        if slot.replace(value).is_some() {
            return Err(Error::ModelFormat {
                line: lineno + 1,
                msg: format!("duplicate `{key}` key"),
            });
        }
    }
    let name = name.ok_or_else(|| Error::ModelFormat { line: 0, msg: "missing `name`".into() })?;
    let coords =
        coords.ok_or_else(|| Error::ModelFormat { line: 0, msg: "missing `coords`".into() })?;
    let src = lagrangian_src
        .ok_or_else(|| Error::ModelFormat { line: 0, msg: "missing `lagrangian`".into() })?;
    let lagrangian = expr::parse(&src)?;
    LagrangianSystem::new(&name, coords, lagrangian)
}

/// Load a model from a file path.
pub fn load_model(path: &std::path::Path) -> Result<Arc<LagrangianSystem>> {
    let text = std::fs::read_to_string(path)?;
    Ok(Arc::new(parse_model(&text)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(text: &str) -> LagrangianSystem {
        parse_model(text).unwrap()
    }

    const OSC1: &str = "name = osc1\ncoords = q1\nlagrangian = qd1^2/2 - q1^2/2";
    const FIRSTORDER: &str =
        "name = firstorder\ncoords = q1, q2\nlagrangian = q2*qd1 - 0.5*(q1^2 + q2^2)";
    const GAUGE1: &str = "name = gauge1\ncoords = q1, q2\nlagrangian = (qd1 - q2)^2/2";

    #[test]
    fn oscillator_has_full_rank() {
        let sys = model(OSC1);
        let probes = default_probes(sys.n, DEFAULT_SEED);
        let part = analyze_hessian(&sys, &probes, PIVOT_TOL, None).unwrap();
        assert_eq!(part.r_w, 1);
        assert_eq!(part.n_p, 1);
        assert_eq!(part.perm, vec![0]);
    }

    #[test]
    fn first_order_model_has_rank_zero() {
        // oracle: all second velocity-derivatives of q2*qd1 - V(q) vanish
        let sys = model(FIRSTORDER);
        for a in 0..2 {
            for b in 0..2 {
                assert!(sys.w[a][b].is_zero(), "W[{a}][{b}] = {}", sys.w[a][b]);
            }
        }
        let probes = default_probes(sys.n, DEFAULT_SEED);
        let part = analyze_hessian(&sys, &probes, PIVOT_TOL, None).unwrap();
        assert_eq!(part.r_w, 0);
        assert_eq!(part.n_p, 0);
        assert_eq!(part.n_nc(), 2);
    }

    #[test]
    fn gauge_model_partition() {
        // oracle: Hessian of (qd1 - q2)^2/2 is diag(1, 0)
        let sys = model(GAUGE1);
        let at = Binding::new(0.0, vec![0.3, -0.2], vec![0.5, 0.9]);
        let w = sys.hessian_at(&at).unwrap();
        assert_eq!(w.at(0, 0), 1.0);
        assert_eq!(w.at(0, 1), 0.0);
        assert_eq!(w.at(1, 1), 0.0);

        let probes = default_probes(sys.n, DEFAULT_SEED);
        let part = analyze_hessian(&sys, &probes, PIVOT_TOL, None).unwrap();
        assert_eq!(part.r_w, 1);
        assert_eq!(part.canonical(0), 0);
        assert_eq!(part.noncanonical(0), 1);
    }

    #[test]
    fn hessian_is_symmetric_at_random_bindings() {
        let sys = model("name = m\ncoords = q1, q2\nlagrangian = qd1*qd2*q1 + sin(q2)*qd1^2");
        let probes = default_probes(sys.n, 3);
        for at in &probes {
            let w = sys.hessian_at(at).unwrap();
            for a in 0..2 {
                for b in 0..2 {
                    assert!((w.at(a, b) - w.at(b, a)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = parse_model("name = bad\ncoords = q1, q2\nlagrangian = qd3^2/2").unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { symbol } if symbol == "qd3"));
    }

    #[test]
    fn model_file_validation() {
        assert!(parse_model("coords = q1\nlagrangian = q1").is_err()); // missing name
        assert!(parse_model("name = x\nname = y\ncoords = q1\nlagrangian = q1").is_err());
        assert!(parse_model("name = x\ncoords = q1, q1\nlagrangian = q1").is_err());
        assert!(parse_model("name = x\ncoords = p1\nlagrangian = 1").is_err());
        // comments and blank lines are fine
        let sys = model("# header\nname = ok\n\ncoords = q1 # one coordinate\nlagrangian = qd1^2/2");
        assert_eq!(sys.n, 1);
    }

    #[test]
    fn relabeled_coordinates_keep_their_meaning() {
        // coords listed as q2, q1: index A=0 is labelled q2
        let sys = model("name = swapped\ncoords = q2, q1\nlagrangian = q1*qd2");
        // dL/dqd2 = q1; slot of qd2 is A=0, slot of q1 is A=1
        let at = Binding::new(0.0, vec![9.0, 4.0], vec![1.0, 2.0]);
        // q2 -> q[0] = 9, q1 -> q[1] = 4, qd2 -> qd[0] = 1
        assert_eq!(sys.eval(&sys.lagrangian, &at).unwrap(), 4.0);
        assert_eq!(sys.eval(&sys.dl_dqd[0], &at).unwrap(), 4.0);
        assert_eq!(sys.eval(&sys.dl_dqd[1], &at).unwrap(), 0.0);
    }

    #[test]
    fn over_extension_pads_canonical_sector() {
        let sys = model(GAUGE1);
        let probes = default_probes(sys.n, DEFAULT_SEED);
        let part = analyze_hessian(&sys, &probes, PIVOT_TOL, Some(2)).unwrap();
        assert_eq!(part.r_w, 1);
        assert_eq!(part.n_p, 2);
        assert_eq!(part.n_nc(), 0);
    }

    #[test]
    fn partition_round_trip() {
        let part = Partition { n: 3, r_w: 2, n_p: 2, perm: vec![2, 0, 1] };
        let q = vec![10.0, 20.0, 30.0];
        let (q_c, q_nc) = part.from_original(&q);
        assert_eq!(q_c, vec![30.0, 10.0]);
        assert_eq!(q_nc, vec![20.0]);
        assert_eq!(part.to_original(&q_c, &q_nc), q);
    }
}
