//! Bracket structures on the reduced phase space.
//!
//! The reduced Poisson bracket sums over canonical pairs only. On top of it
//! sit the D_alpha operator, the antisymmetric F tensor with its source
//! vector G, and the two deformed brackets that generate time evolution for
//! singular systems: the nongauge bracket (F invertible) and the gauge
//! bracket (summing over a nonsingular block of F). A property checker
//! measures antisymmetry, bilinearity, Leibniz, and Jacobi residuals on
//! random polynomial observables.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::expr::{self, Expr};
use crate::legendre::{Ham, HamiltonianBundle, PhasePoint};
use crate::linalg::{rank_complete_pivot, Lu, Mat};

/// Value and phase-space gradient of a scalar function at one point.
#[derive(Debug, Clone)]
pub struct PhaseGradient {
    pub value: f64,
    pub d_dq_c: Vec<f64>,
    pub d_dp: Vec<f64>,
    pub d_dq_nc: Vec<f64>,
    /// Derivatives w.r.t. extended momenta; zero for reduced-space functions.
    pub d_dp_nc: Vec<f64>,
    pub d_dt: f64,
}

/// Scalar function on the (possibly extended) phase space.
pub trait PhaseFunction {
    fn value_at(&self, x: &PhasePoint) -> Result<f64>;
    fn gradient_at(&self, x: &PhasePoint) -> Result<PhaseGradient>;
    /// Marks the time-evolution generator: D_alpha then carries the
    /// -dH_alpha/dt term.
    fn is_evolution_generator(&self) -> bool {
        false
    }
}

/// Dimensions of the active phase space an observable may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseDims {
    pub n_p: usize,
    pub n_nc: usize,
    /// Extended momenta P<a> admitted (constraint analysis).
    pub extended: bool,
}

/// Closed-form observable: an expression over `t`, `q<i>`, `p<i>`, `Q<a>`
/// and, on the extended space, `P<a>`, with precomputed symbolic partials.
#[derive(Debug, Clone)]
pub struct Observable {
    pub expr: Expr,
    dims: PhaseDims,
    d_dq_c: Vec<Expr>,
    d_dp: Vec<Expr>,
    d_dq_nc: Vec<Expr>,
    d_dp_nc: Vec<Expr>,
    d_dt: Expr,
}

fn resolve_phase(x: &PhasePoint, name: &str) -> Option<f64> {
    if name == "t" {
        return Some(x.t);
    }
    let idx: usize = name[1..].parse().ok()?;
    let k = idx.checked_sub(1)?;
    match name.as_bytes()[0] {
        b'q' => x.q_c.get(k).copied(),
        b'p' => x.p.get(k).copied(),
        b'Q' => x.q_nc.get(k).copied(),
        b'P' => x.p_nc.as_ref()?.get(k).copied(),
        _ => None,
    }
}

impl Observable {
    /// Build from an expression, validating the symbol space.
    pub fn new(e: Expr, dims: PhaseDims) -> Result<Self> {
        for sym in e.symbols() {
            let ok = if sym == "t" {
                true
            } else if !expr::is_phase_symbol(&sym) {
                false
            } else {
                let idx: usize = sym[1..].parse().unwrap_or(0);
                match sym.as_bytes()[0] {
                    b'q' | b'p' => idx >= 1 && idx <= dims.n_p,
                    b'Q' => idx >= 1 && idx <= dims.n_nc,
                    b'P' => dims.extended && idx >= 1 && idx <= dims.n_nc,
                    _ => false,
                }
            };
            if !ok {
                return Err(Error::SymbolSpaceMismatch { symbol: sym });
            }
        }
        let d_dq_c = (1..=dims.n_p)
            .map(|i| expr::differentiate(&e, &format!("q{i}")))
            .collect();
        let d_dp = (1..=dims.n_p)
            .map(|i| expr::differentiate(&e, &format!("p{i}")))
            .collect();
        let d_dq_nc = (1..=dims.n_nc)
            .map(|a| expr::differentiate(&e, &format!("Q{a}")))
            .collect();
        let d_dp_nc = (1..=dims.n_nc)
            .map(|a| expr::differentiate(&e, &format!("P{a}")))
            .collect();
        let d_dt = expr::differentiate(&e, "t");
        Ok(Observable { expr: e, dims, d_dq_c, d_dp, d_dq_nc, d_dp_nc, d_dt })
    }

    /// Parse an observable from text, e.g. `"q1*p1 + Q1^2"`.
    pub fn parse(src: &str, dims: PhaseDims) -> Result<Self> {
        Observable::new(expr::parse_phase(src)?, dims)
    }

    pub fn dims(&self) -> PhaseDims {
        self.dims
    }

    /// Pointwise product observable.
    pub fn product(&self, other: &Observable) -> Result<Observable> {
        Observable::new(
            expr::mul(vec![self.expr.clone(), other.expr.clone()]),
            self.dims,
        )
    }

    /// a*self + other.
    pub fn linear_combination(&self, a: f64, other: &Observable) -> Result<Observable> {
        Observable::new(
            expr::add(vec![
                expr::mul(vec![Expr::Const(a), self.expr.clone()]),
                other.expr.clone(),
            ]),
            self.dims,
        )
    }
}

impl PhaseFunction for Observable {
    fn value_at(&self, x: &PhasePoint) -> Result<f64> {
        expr::evaluate_with(&self.expr, &|name| resolve_phase(x, name))
    }

    fn gradient_at(&self, x: &PhasePoint) -> Result<PhaseGradient> {
        let ev = |e: &Expr| expr::evaluate_with(e, &|name| resolve_phase(x, name));
        Ok(PhaseGradient {
            value: ev(&self.expr)?,
            d_dq_c: self.d_dq_c.iter().map(ev).collect::<Result<_>>()?,
            d_dp: self.d_dp.iter().map(ev).collect::<Result<_>>()?,
            d_dq_nc: self.d_dq_nc.iter().map(ev).collect::<Result<_>>()?,
            d_dp_nc: self.d_dp_nc.iter().map(ev).collect::<Result<_>>()?,
            d_dt: ev(&self.d_dt)?,
        })
    }
}

/// One of the bundle's Hamiltonians viewed as a phase function.
pub struct HamiltonianFn<'a> {
    pub bundle: &'a HamiltonianBundle,
    pub which: Ham,
    pub generator: bool,
}

impl<'a> HamiltonianFn<'a> {
    pub fn h0(bundle: &'a HamiltonianBundle) -> Self {
        HamiltonianFn { bundle, which: Ham::H0, generator: false }
    }

    /// H0 flagged as the time-evolution generator (D_alpha picks up the
    /// time-derivative term, reproducing the G vector).
    pub fn h0_generator(bundle: &'a HamiltonianBundle) -> Self {
        HamiltonianFn { bundle, which: Ham::H0, generator: true }
    }

    pub fn alpha(bundle: &'a HamiltonianBundle, a: usize) -> Self {
        HamiltonianFn { bundle, which: Ham::Alpha(a), generator: false }
    }
}

impl PhaseFunction for HamiltonianFn<'_> {
    fn value_at(&self, x: &PhasePoint) -> Result<f64> {
        match self.which {
            Ham::H0 => self.bundle.eval_h0(x),
            Ham::Alpha(a) => Ok(self.bundle.eval_h_alpha(x)?[a]),
        }
    }

    fn gradient_at(&self, x: &PhasePoint) -> Result<PhaseGradient> {
        let g = self.bundle.grad(x, self.which)?;
        let n_nc = self.bundle.partition.n_nc();
        Ok(PhaseGradient {
            value: g.value,
            d_dq_c: g.d_dq_c,
            d_dp: g.d_dp,
            d_dq_nc: g.d_dq_nc,
            d_dp_nc: vec![0.0; n_nc],
            d_dt: g.d_dt,
        })
    }

    fn is_evolution_generator(&self) -> bool {
        self.generator
    }
}

/// Numeric phase function: values from a closure, gradients by central
/// differences with step h·(1 + |coordinate|). Used for nested brackets.
pub struct NumericFn<F: Fn(&PhasePoint) -> Result<f64>> {
    pub f: F,
    pub h: f64,
}

impl<F: Fn(&PhasePoint) -> Result<f64>> PhaseFunction for NumericFn<F> {
    fn value_at(&self, x: &PhasePoint) -> Result<f64> {
        (self.f)(x)
    }

    fn gradient_at(&self, x: &PhasePoint) -> Result<PhaseGradient> {
        let fd = |plus: &PhasePoint, minus: &PhasePoint, h: f64| -> Result<f64> {
            Ok(((self.f)(plus)? - (self.f)(minus)?) / (2.0 * h))
        };
        let mut d_dq_c = vec![0.0; x.q_c.len()];
        for i in 0..x.q_c.len() {
            let h = self.h * (1.0 + x.q_c[i].abs());
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.q_c[i] += h;
            minus.q_c[i] -= h;
            d_dq_c[i] = fd(&plus, &minus, h)?;
        }
        let mut d_dp = vec![0.0; x.p.len()];
        for i in 0..x.p.len() {
            let h = self.h * (1.0 + x.p[i].abs());
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.p[i] += h;
            minus.p[i] -= h;
            d_dp[i] = fd(&plus, &minus, h)?;
        }
        let mut d_dq_nc = vec![0.0; x.q_nc.len()];
        for a in 0..x.q_nc.len() {
            let h = self.h * (1.0 + x.q_nc[a].abs());
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.q_nc[a] += h;
            minus.q_nc[a] -= h;
            d_dq_nc[a] = fd(&plus, &minus, h)?;
        }
        let mut d_dp_nc = vec![0.0; x.q_nc.len()];
        if let Some(p_nc) = &x.p_nc {
            for a in 0..p_nc.len() {
                let h = self.h * (1.0 + p_nc[a].abs());
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus.p_nc.as_mut().unwrap()[a] += h;
                minus.p_nc.as_mut().unwrap()[a] -= h;
                d_dp_nc[a] = fd(&plus, &minus, h)?;
            }
        }
        let ht = self.h * (1.0 + x.t.abs());
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.t += ht;
        minus.t -= ht;
        let d_dt = fd(&plus, &minus, ht)?;
        Ok(PhaseGradient { value: (self.f)(x)?, d_dq_c, d_dp, d_dq_nc, d_dp_nc, d_dt })
    }
}

/// Reduced Poisson bracket of two gradients: sum over canonical pairs.
pub fn poisson_of(a: &PhaseGradient, b: &PhaseGradient) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.d_dq_c.len() {
        acc += a.d_dq_c[i] * b.d_dp[i] - b.d_dq_c[i] * a.d_dp[i];
    }
    acc
}

/// Full Poisson bracket over the extended space: canonical pairs plus
/// (Q_a, P_a) pairs.
pub fn poisson_full_of(a: &PhaseGradient, b: &PhaseGradient) -> f64 {
    let mut acc = poisson_of(a, b);
    for k in 0..a.d_dq_nc.len() {
        acc += a.d_dq_nc[k] * b.d_dp_nc[k] - b.d_dq_nc[k] * a.d_dp_nc[k];
    }
    acc
}

/// Reduced Poisson bracket {A, B} at a point. Zero when n_p = 0.
pub fn poisson_reduced(a: &dyn PhaseFunction, b: &dyn PhaseFunction, x: &PhasePoint) -> Result<f64> {
    Ok(poisson_of(&a.gradient_at(x)?, &b.gradient_at(x)?))
}

/// D_alpha A = dA/dq_alpha + {A, H_alpha}, minus dH_alpha/dt when A is the
/// evolution generator; D_alpha H0 is the G vector.
pub fn d_alpha(
    a: &dyn PhaseFunction,
    alpha: usize,
    x: &PhasePoint,
    bundle: &HamiltonianBundle,
) -> Result<f64> {
    let ga = a.gradient_at(x)?;
    let gh = bundle.grad(x, Ham::Alpha(alpha))?;
    let gh = PhaseGradient {
        value: gh.value,
        d_dq_c: gh.d_dq_c,
        d_dp: gh.d_dp,
        d_dq_nc: gh.d_dq_nc,
        d_dp_nc: vec![0.0; bundle.partition.n_nc()],
        d_dt: gh.d_dt,
    };
    let mut v = ga.d_dq_nc[alpha] + poisson_of(&ga, &gh);
    if a.is_evolution_generator() {
        v -= gh.d_dt;
    }
    Ok(v)
}

/// The antisymmetric tensor F and source vector G at one phase point.
#[derive(Debug, Clone)]
pub struct FGSystem {
    pub f: Mat,
    pub g: Vec<f64>,
    pub r_f: usize,
    pub dim: usize,
}

impl FGSystem {
    /// Inverse of F; fails when rank-deficient.
    pub fn f_inverse(&self, pivot_tol: f64) -> Result<Mat> {
        if self.r_f < self.dim {
            return Err(Error::SingularF { r_f: self.r_f, dim: self.dim });
        }
        Ok(Lu::factor(&self.f, pivot_tol)?.inverse())
    }
}

/// F/G tensors together with the gradient bundle they were built from.
pub struct FgFrame {
    pub fg: FGSystem,
    pub grads: crate::legendre::GradBundle,
}

/// Assemble F_ab = dH_a/dq_b - dH_b/dq_a + {H_a, H_b} and
/// G_a = dH0/dq_a - dH_a/dt + {H0, H_a} from the Hamiltonian gradients.
///
/// Requires the nondynamical regime; each entry pair is computed
/// independently and antisymmetry is asserted to 1e-12.
pub fn build_fg(bundle: &HamiltonianBundle, x: &PhasePoint) -> Result<FGSystem> {
    Ok(build_fg_frame(bundle, x, None)?.fg)
}

/// [`build_fg`] with a warm-start velocity guess, returning the gradients
/// as well so trajectory stepping shares one solve.
pub fn build_fg_frame(
    bundle: &HamiltonianBundle,
    x: &PhasePoint,
    guess: Option<&[f64]>,
) -> Result<FgFrame> {
    bundle.require_nondynamical(x, 1e-9)?;
    let dim = bundle.partition.n_nc();
    let grads = bundle.grads_all_warm(x, guess)?;
    let mut f = Mat::zeros(dim, dim);
    for a in 0..dim {
        for b in 0..dim {
            let ga = &grads.h_alpha[a];
            let gb = &grads.h_alpha[b];
            let mut bracket = 0.0;
            for i in 0..bundle.partition.n_p {
                bracket += ga.d_dq_c[i] * gb.d_dp[i] - gb.d_dq_c[i] * ga.d_dp[i];
            }
            f.set(a, b, ga.d_dq_nc[b] - gb.d_dq_nc[a] + bracket);
        }
    }
    let defect = f.antisymmetry_defect();
    if defect > 1e-12 {
        return Err(Error::Internal(format!(
            "F tensor antisymmetry defect {defect:.3e}"
        )));
    }
    let g: Vec<f64> = (0..dim)
        .map(|a| {
            let gh = &grads.h_alpha[a];
            let g0 = &grads.h0;
            let mut bracket = 0.0;
            for i in 0..bundle.partition.n_p {
                bracket += g0.d_dq_c[i] * gh.d_dp[i] - gh.d_dq_c[i] * g0.d_dp[i];
            }
            g0.d_dq_nc[a] - gh.d_dt + bracket
        })
        .collect();
    let r_f = rank_complete_pivot(&f, bundle.pivot_tol);
    Ok(FgFrame { fg: FGSystem { f, g, r_f, dim }, grads })
}

/// D_alpha of a function for every alpha, sharing one gradient bundle.
fn d_alpha_all(
    a: &dyn PhaseFunction,
    x: &PhasePoint,
    bundle: &HamiltonianBundle,
) -> Result<Vec<f64>> {
    let ga = a.gradient_at(x)?;
    let grads = bundle.grads_all(x)?;
    let n_p = bundle.partition.n_p;
    Ok((0..bundle.partition.n_nc())
        .map(|alpha| {
            let gh = &grads.h_alpha[alpha];
            let mut bracket = 0.0;
            for i in 0..n_p {
                bracket += ga.d_dq_c[i] * gh.d_dp[i] - gh.d_dq_c[i] * ga.d_dp[i];
            }
            let mut v = ga.d_dq_nc[alpha] + bracket;
            if a.is_evolution_generator() {
                v -= gh.d_dt;
            }
            v
        })
        .collect())
}

/// Nongauge bracket {A,B} + D_a A · F̄^{ab} · D_b B; requires full-rank F.
pub fn bracket_nongauge(
    a: &dyn PhaseFunction,
    b: &dyn PhaseFunction,
    x: &PhasePoint,
    fg: &FGSystem,
    bundle: &HamiltonianBundle,
) -> Result<f64> {
    let f_inv = fg.f_inverse(bundle.pivot_tol)?;
    let da = d_alpha_all(a, x, bundle)?;
    let db = d_alpha_all(b, x, bundle)?;
    let mut v = poisson_reduced(a, b, x)?;
    for alpha in 0..fg.dim {
        for beta in 0..fg.dim {
            v += da[alpha] * f_inv.at(alpha, beta) * db[beta];
        }
    }
    Ok(v)
}

/// Index split for a rank-deficient F: `order` permutes the noncanonical
/// slots so a nonsingular r_F x r_F minor sits top-left, and `lambda` maps
/// the independent rows onto the dependent ones.
#[derive(Debug, Clone)]
pub struct GaugeDecomposition {
    pub order: Vec<usize>,
    pub r_f: usize,
    /// lambda[dependent][independent]
    pub lambda: Mat,
    pub f11_inv: Mat,
    /// Residual of the dependent-row relation for F (zero by construction
    /// for the defining columns, measured on the complementary block).
    pub f_relation_residual: f64,
    /// Residual |G_dep - lambda G_indep|, infinity norm.
    pub g_relation_residual: f64,
}

impl GaugeDecomposition {
    /// Build with a caller-fixed slot order (first r_f entries must index a
    /// nonsingular minor); pass `None` to search for one.
    pub fn build(fg: &FGSystem, order: Option<&[usize]>, pivot_tol: f64) -> Result<Self> {
        let r_f = fg.r_f;
        let dim = fg.dim;
        let order: Vec<usize> = match order {
            Some(o) => o.to_vec(),
            None => {
                let (head, _) = crate::linalg::best_principal_minor(&[fg.f.clone()], r_f);
                let mut o = head;
                for i in 0..dim {
                    if !o.contains(&i) {
                        o.push(i);
                    }
                }
                o
            }
        };
        let block = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| -> Mat {
            let mut m = Mat::zeros(rows.len(), cols.len());
            for (i, ri) in rows.clone().enumerate() {
                for (j, cj) in cols.clone().enumerate() {
                    m.set(i, j, fg.f.at(order[ri], order[cj]));
                }
            }
            m
        };
        let f11 = block(0..r_f, 0..r_f);
        let f11_inv = if r_f > 0 {
            Lu::factor(&f11, pivot_tol)?.inverse()
        } else {
            Mat::zeros(0, 0)
        };
        let n_dep = dim - r_f;
        // lambda = F_21 * inv(F_11)
        let f21 = block(r_f..dim, 0..r_f);
        let mut lambda = Mat::zeros(n_dep, r_f);
        for i in 0..n_dep {
            for j in 0..r_f {
                let mut v = 0.0;
                for k in 0..r_f {
                    v += f21.at(i, k) * f11_inv.at(k, j);
                }
                lambda.set(i, j, v);
            }
        }
        // residual of F_22 = lambda * F_12 (the dependent-column relation)
        let f12 = block(0..r_f, r_f..dim);
        let f22 = block(r_f..dim, r_f..dim);
        let mut f_rel = 0.0_f64;
        for i in 0..n_dep {
            for j in 0..n_dep {
                let mut v = 0.0;
                for k in 0..r_f {
                    v += lambda.at(i, k) * f12.at(k, j);
                }
                f_rel = f_rel.max((f22.at(i, j) - v).abs());
            }
        }
        // residual of G_2 = lambda * G_1
        let mut g_rel = 0.0_f64;
        for i in 0..n_dep {
            let mut v = 0.0;
            for k in 0..r_f {
                v += lambda.at(i, k) * fg.g[order[k]];
            }
            g_rel = g_rel.max((fg.g[order[r_f + i]] - v).abs());
        }
        Ok(GaugeDecomposition {
            order,
            r_f,
            lambda,
            f11_inv,
            f_relation_residual: f_rel,
            g_relation_residual: g_rel,
        })
    }
}

/// Gauge bracket: {A,B} plus the correction summed over the independent
/// block indices only.
pub fn bracket_gauge(
    a: &dyn PhaseFunction,
    b: &dyn PhaseFunction,
    x: &PhasePoint,
    fg: &FGSystem,
    decomp: &GaugeDecomposition,
    bundle: &HamiltonianBundle,
) -> Result<f64> {
    if decomp.order.len() != fg.dim {
        return Err(Error::MissingDecomposition);
    }
    let da = d_alpha_all(a, x, bundle)?;
    let db = d_alpha_all(b, x, bundle)?;
    let mut v = poisson_reduced(a, b, x)?;
    for i in 0..decomp.r_f {
        for j in 0..decomp.r_f {
            v += da[decomp.order[i]] * decomp.f11_inv.at(i, j) * db[decomp.order[j]];
        }
    }
    Ok(v)
}

/// Which bracket the axiom checker exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BracketKind {
    Reduced,
    Nongauge,
    Gauge,
}

/// Max residuals of the bracket axioms over random degree-<=2 polynomial
/// observables. Nested brackets for Jacobi are formed by finite differences.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AxiomReport {
    pub antisymmetry: f64,
    pub bilinearity: f64,
    pub leibniz: f64,
    pub jacobi: f64,
    pub points: usize,
    pub triples: usize,
}

/// Random polynomial of degree <= 2 in the phase variables.
pub(crate) fn random_observable(rng: &mut StdRng, dims: PhaseDims) -> Observable {
    let mut vars: Vec<Expr> = Vec::new();
    for i in 1..=dims.n_p {
        vars.push(Expr::sym(&format!("q{i}")));
        vars.push(Expr::sym(&format!("p{i}")));
    }
    for a in 1..=dims.n_nc {
        vars.push(Expr::sym(&format!("Q{a}")));
    }
    let mut terms = vec![Expr::Const(rng.gen_range(-1.0..1.0))];
    for v in &vars {
        if rng.gen_bool(0.6) {
            terms.push(expr::mul(vec![Expr::Const(rng.gen_range(-1.0..1.0)), v.clone()]));
        }
    }
    for i in 0..vars.len() {
        for j in i..vars.len() {
            if rng.gen_bool(0.3) {
                terms.push(expr::mul(vec![
                    Expr::Const(rng.gen_range(-1.0..1.0)),
                    vars[i].clone(),
                    vars[j].clone(),
                ]));
            }
        }
    }
    Observable::new(expr::add(terms), dims).expect("generated symbols are in range")
}

fn random_point(rng: &mut StdRng, dims: PhaseDims) -> PhasePoint {
    PhasePoint::new(
        0.0,
        (0..dims.n_p).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..dims.n_p).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..dims.n_nc).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// Run the axiom suite for one bracket kind over a model bundle.
pub fn check_bracket_axioms(
    kind: BracketKind,
    bundle: &HamiltonianBundle,
    n_points: usize,
    n_triples: usize,
    seed: u64,
) -> Result<AxiomReport> {
    let dims = PhaseDims {
        n_p: bundle.partition.n_p,
        n_nc: bundle.partition.n_nc(),
        extended: false,
    };
    let mut rng = StdRng::seed_from_u64(seed);
    let decomp = match kind {
        BracketKind::Gauge => {
            let probe = random_point(&mut rng, dims);
            let fg = build_fg(bundle, &probe)?;
            Some(GaugeDecomposition::build(&fg, None, bundle.pivot_tol)?)
        }
        _ => None,
    };
    let bracket = |a: &dyn PhaseFunction, b: &dyn PhaseFunction, x: &PhasePoint| -> Result<f64> {
        match kind {
            BracketKind::Reduced => poisson_reduced(a, b, x),
            BracketKind::Nongauge => {
                let fg = build_fg(bundle, x)?;
                bracket_nongauge(a, b, x, &fg, bundle)
            }
            BracketKind::Gauge => {
                let fg = build_fg(bundle, x)?;
                bracket_gauge(a, b, x, &fg, decomp.as_ref().unwrap(), bundle)
            }
        }
    };

    let mut antisymmetry = 0.0_f64;
    let mut bilinearity = 0.0_f64;
    let mut leibniz = 0.0_f64;
    for _ in 0..n_points {
        let x = random_point(&mut rng, dims);
        let a = random_observable(&mut rng, dims);
        let b = random_observable(&mut rng, dims);
        let c = random_observable(&mut rng, dims);
        let ab = bracket(&a, &b, &x)?;
        let ba = bracket(&b, &a, &x)?;
        antisymmetry = antisymmetry.max((ab + ba).abs());
        antisymmetry = antisymmetry.max(bracket(&a, &a, &x)?.abs());
        // {sA + B, C} = s{A,C} + {B,C}
        let s = rng.gen_range(-2.0..2.0);
        let combo = a.linear_combination(s, &b)?;
        let lhs = bracket(&combo, &c, &x)?;
        let rhs = s * bracket(&a, &c, &x)? + bracket(&b, &c, &x)?;
        bilinearity = bilinearity.max((lhs - rhs).abs());
        // {A, BC} = B{A,C} + {A,B}C
        let bc = b.product(&c)?;
        let lhs = bracket(&a, &bc, &x)?;
        let rhs = b.value_at(&x)? * bracket(&a, &c, &x)? + ab * c.value_at(&x)?;
        leibniz = leibniz.max((lhs - rhs).abs());
    }

    let mut jacobi = 0.0_f64;
    for _ in 0..n_triples {
        let x = random_point(&mut rng, dims);
        let a = random_observable(&mut rng, dims);
        let b = random_observable(&mut rng, dims);
        let c = random_observable(&mut rng, dims);
        let nested = |f: &Observable, g: &Observable, outer: &Observable| -> Result<f64> {
            let inner = NumericFn { f: |y: &PhasePoint| bracket(f, g, y), h: 1e-4 };
            bracket(outer, &inner, &x)
        };
        let term1 = nested(&b, &c, &a)?;
        let term2 = nested(&c, &a, &b)?;
        let term3 = nested(&a, &b, &c)?;
        jacobi = jacobi.max((term1 + term2 + term3).abs());
    }

    Ok(AxiomReport {
        antisymmetry,
        bilinearity,
        leibniz,
        jacobi,
        points: n_points,
        triples: n_triples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn dims_of(b: &HamiltonianBundle) -> PhaseDims {
        PhaseDims { n_p: b.partition.n_p, n_nc: b.partition.n_nc(), extended: false }
    }

    #[test]
    fn canonical_pair_brackets() {
        let b = bundle_for(OSC2, None);
        let dims = dims_of(&b);
        let q1 = Observable::parse("q1", dims).unwrap();
        let p1 = Observable::parse("p1", dims).unwrap();
        let x = PhasePoint::new(0.0, vec![0.2, -0.4], vec![0.5, 0.1], vec![]);
        assert_eq!(poisson_reduced(&q1, &p1, &x).unwrap(), 1.0);
        assert_eq!(poisson_reduced(&q1, &q1, &x).unwrap(), 0.0);
    }

    #[test]
    fn empty_canonical_sector_bracket_vanishes() {
        let b = bundle_for(FIRSTORDER, None);
        let dims = dims_of(&b);
        let a = Observable::parse("Q1^2 + Q2", dims).unwrap();
        let c = Observable::parse("Q1*Q2", dims).unwrap();
        let x = PhasePoint::new(0.0, vec![], vec![], vec![1.0, 2.0]);
        assert_eq!(poisson_reduced(&a, &c, &x).unwrap(), 0.0);
    }

    #[test]
    fn symbol_space_validation() {
        let dims = PhaseDims { n_p: 1, n_nc: 1, extended: false };
        assert!(Observable::parse("q1*p1 + Q1", dims).is_ok());
        assert!(matches!(
            Observable::parse("q2", dims),
            Err(Error::SymbolSpaceMismatch { .. })
        ));
        assert!(matches!(
            Observable::parse("P1", dims),
            Err(Error::SymbolSpaceMismatch { .. })
        ));
        let ext = PhaseDims { n_p: 1, n_nc: 1, extended: true };
        assert!(Observable::parse("P1", ext).is_ok());
    }

    #[test]
    fn d_alpha_reproduces_g_vector() {
        // firstorder: G_1 = dH0/dq1 = q1 (bracket term vanishes at n_p = 0)
        let b = bundle_for(FIRSTORDER, None);
        let x = PhasePoint::new(0.0, vec![], vec![], vec![1.0, 2.0]);
        let h0 = HamiltonianFn::h0_generator(&b);
        assert!((d_alpha(&h0, 0, &x, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((d_alpha(&h0, 1, &x, &b).unwrap() - 2.0).abs() < 1e-12);

        // gauge1: G_2 = p1
        let b = bundle_for(GAUGE1, None);
        let x = PhasePoint::new(0.0, vec![0.3], vec![0.7], vec![0.2]);
        let h0 = HamiltonianFn::h0_generator(&b);
        assert!((d_alpha(&h0, 0, &x, &b).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn d_alpha_of_unrelated_observable_vanishes() {
        // A independent of q_alpha with H_alpha = 0
        let b = bundle_for(GAUGE1, None);
        let dims = dims_of(&b);
        let a = Observable::parse("q1^2", dims).unwrap();
        let x = PhasePoint::new(0.0, vec![0.3], vec![0.7], vec![0.2]);
        assert_eq!(d_alpha(&a, 0, &x, &b).unwrap(), 0.0);
    }

    #[test]
    fn fg_of_first_order_model() {
        let b = bundle_for(FIRSTORDER, None);
        let x = PhasePoint::new(0.0, vec![], vec![], vec![1.0, 2.0]);
        let fg = build_fg(&b, &x).unwrap();
        assert_eq!(fg.dim, 2);
        assert_eq!(fg.r_f, 2);
        assert!((fg.f.at(0, 1) - (-1.0)).abs() <= 1e-12);
        assert!((fg.f.at(1, 0) - 1.0).abs() <= 1e-12);
        assert!(fg.f.at(0, 0).abs() <= 1e-12);
        assert!((fg.g[0] - 1.0).abs() <= 1e-12);
        assert!((fg.g[1] - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn fg_of_gauge_model_and_empty_sector() {
        let b = bundle_for(GAUGE1, None);
        let x = PhasePoint::new(0.0, vec![0.1], vec![0.4], vec![0.3]);
        let fg = build_fg(&b, &x).unwrap();
        assert_eq!(fg.dim, 1);
        assert_eq!(fg.r_f, 0);
        assert_eq!(fg.f.at(0, 0), 0.0);
        assert!((fg.g[0] - 0.4).abs() <= 1e-12);

        let b = bundle_for(OSC2, None);
        let x = PhasePoint::new(0.0, vec![0.1, 0.2], vec![0.4, 0.5], vec![]);
        let fg = build_fg(&b, &x).unwrap();
        assert_eq!(fg.dim, 0);
        assert_eq!(fg.r_f, 0);
    }

    #[test]
    fn g_vector_matches_independent_d_alpha_route() {
        let b = bundle_for(FIRSTORDER, None);
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let x = PhasePoint::new(
                0.0,
                vec![],
                vec![],
                vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            );
            let fg = build_fg(&b, &x).unwrap();
            let h0 = HamiltonianFn::h0_generator(&b);
            for a in 0..2 {
                let via_d = d_alpha(&h0, a, &x, &b).unwrap();
                assert!((fg.g[a] - via_d).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn nongauge_bracket_of_noncanonical_coordinates() {
        // {Q1, Q2}_nongauge = Fbar^{12} = 1 for the first-order model
        let b = bundle_for(FIRSTORDER, None);
        let dims = dims_of(&b);
        let x = PhasePoint::new(0.0, vec![], vec![], vec![1.0, 2.0]);
        let fg = build_fg(&b, &x).unwrap();
        let q1 = Observable::parse("Q1", dims).unwrap();
        let q2 = Observable::parse("Q2", dims).unwrap();
        let v = bracket_nongauge(&q1, &q2, &x, &fg, &b).unwrap();
        assert!((v - 1.0).abs() <= 1e-12);

        // constant second argument and self-bracket
        let k = Observable::parse("3", dims).unwrap();
        assert_eq!(bracket_nongauge(&q1, &k, &x, &fg, &b).unwrap(), 0.0);
        assert_eq!(bracket_nongauge(&q1, &q1, &x, &fg, &b).unwrap(), 0.0);
    }

    #[test]
    fn nongauge_bracket_requires_full_rank() {
        let b = bundle_for(GAUGE1, None);
        let dims = dims_of(&b);
        let x = PhasePoint::new(0.0, vec![0.1], vec![0.4], vec![0.3]);
        let fg = build_fg(&b, &x).unwrap();
        let a = Observable::parse("q1", dims).unwrap();
        assert!(matches!(
            bracket_nongauge(&a, &a, &x, &fg, &b),
            Err(Error::SingularF { r_f: 0, dim: 1 })
        ));
    }

    #[test]
    fn gauge_bracket_reduces_to_poisson_when_f_vanishes() {
        let b = bundle_for(GAUGE1, None);
        let dims = dims_of(&b);
        let x = PhasePoint::new(0.0, vec![0.1], vec![0.4], vec![0.3]);
        let fg = build_fg(&b, &x).unwrap();
        let decomp = GaugeDecomposition::build(&fg, None, b.pivot_tol).unwrap();
        let q1 = Observable::parse("q1", dims).unwrap();
        let p1 = Observable::parse("p1", dims).unwrap();
        let v = bracket_gauge(&q1, &p1, &x, &fg, &decomp, &b).unwrap();
        assert_eq!(v, 1.0);
        let a = Observable::parse("q1*p1 + Q1^2", dims).unwrap();
        assert_eq!(bracket_gauge(&a, &a, &x, &fg, &decomp, &b).unwrap(), 0.0);
    }

    #[test]
    fn gauge_decomposition_on_synthetic_rank_two_f() {
        // dim 3, rank 2: third row is a combination of the first two
        let mut fg = FGSystem { f: Mat::zeros(3, 3), g: vec![0.0; 3], r_f: 0, dim: 3 };
        // basis block: F_01 = 2; dependent row 2 = 0.5*row0 + (-1)*row1
        let rows = [
            [0.0, 2.0, -1.0],
            [-2.0, 0.0, 0.5],
            [1.0, -0.5, 0.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                fg.f.set(i, j, rows[i][j]);
            }
        }
        assert!(fg.f.antisymmetry_defect() <= 1e-12);
        fg.r_f = rank_complete_pivot(&fg.f, 1e-9);
        assert_eq!(fg.r_f, 2);
        // consistent G: G_2 = lambda G_[0,1]
        fg.g = vec![1.0, 4.0, 0.0];
        let d0 = GaugeDecomposition::build(&fg, None, 1e-9).unwrap();
        // fix G_dep so the relation holds exactly
        let dep_slot = d0.order[2];
        let mut g_dep = 0.0;
        for k in 0..2 {
            g_dep += d0.lambda.at(0, k) * fg.g[d0.order[k]];
        }
        fg.g[dep_slot] = g_dep;
        let d = GaugeDecomposition::build(&fg, Some(&d0.order), 1e-9).unwrap();
        assert!(d.f_relation_residual <= 1e-12);
        assert!(d.g_relation_residual <= 1e-12);
    }

    #[test]
    fn reduced_axioms_on_regular_model() {
        let b = bundle_for(OSC2, None);
        let report = check_bracket_axioms(BracketKind::Reduced, &b, 100, 10, 42).unwrap();
        assert!(report.antisymmetry <= 1e-8, "{report:?}");
        assert!(report.bilinearity <= 1e-8, "{report:?}");
        assert!(report.leibniz <= 1e-8, "{report:?}");
        assert!(report.jacobi <= 1e-5, "{report:?}");
    }

    #[test]
    fn nongauge_axioms_on_first_order_model() {
        // oracle: for this model the nongauge bracket equals the canonical
        // bracket in (Q1, Q2), so all axioms hold analytically
        let b = bundle_for(FIRSTORDER, None);
        let report = check_bracket_axioms(BracketKind::Nongauge, &b, 100, 50, 42).unwrap();
        assert!(report.antisymmetry <= 1e-12, "{report:?}");
        assert!(report.bilinearity <= 1e-10, "{report:?}");
        assert!(report.leibniz <= 1e-8, "{report:?}");
        assert!(report.jacobi <= 1e-5, "{report:?}");
    }
}
