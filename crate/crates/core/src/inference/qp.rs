//! The inner gap problem for one bin and one candidate count `c`.
//!
//! With RNN states fixed, gap `g_i` has density `N(μ_i, σ_i)`. Measured
//! from the last decoded event (the anchor), the bin is
//! `[offset, offset + Δ)`. Exactly `c` events land in it when
//!
//! ```text
//! g_1 >= offset                       (c >= 1)
//! g_1 + ... + g_c     <= offset + Δ   (c >= 1)
//! g_1 + ... + g_{c+1} >= offset + Δ + ε
//! g_i >= ε
//! ```
//!
//! Maximizing `Σ log N(g_i; μ_i, σ_i)` is a diagonal convex QP. Only
//! `g_1..g_{c+1}` are free; later gaps sit at their means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::GaussianParams;

/// Relative size of ε (strict-inequality margin and minimum gap) w.r.t. Δ.
pub const BOUNDARY_EPS: f64 = 1e-6;

/// Fixed per-step output of the mode rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapState {
    /// Distribution of the gap from the previous event, in seconds.
    pub gap: GaussianParams,
    /// Mode mark of the event this gap leads to.
    pub mark: u32,
}

/// Everything needed to decode one bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinProblem {
    pub states: Vec<GapState>,
    /// Bin start minus the anchor time; non-negative.
    pub offset: f64,
    /// Bin width Δ.
    pub width: f64,
    /// Count prior `(ν_b, ρ_b)`.
    pub count_prior: GaussianParams,
    pub cmax: usize,
}

impl BinProblem {
    pub fn epsilon(&self) -> f64 {
        BOUNDARY_EPS * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::InvalidGrid(format!("bin width must be positive, got {}", self.width)));
        }
        if !self.offset.is_finite() || self.offset < 0.0 {
            return Err(Error::Infeasible(format!(
                "anchor lies {} after the bin start; the previous event must precede the bin",
                -self.offset
            )));
        }
        if self.cmax == 0 {
            return Err(Error::Contract("cmax must be at least 1".into()));
        }
        if self.states.len() < self.cmax {
            return Err(Error::Contract(format!("{} states for cmax = {}", self.states.len(), self.cmax)));
        }
        if let Some(s) = self.states.iter().find(|s| !(s.gap.std > 0.0) || !s.gap.mean.is_finite()) {
            return Err(Error::Domain(format!("invalid gap distribution {:?}", s.gap)));
        }
        Ok(())
    }

    /// `Σ log N(g_i; μ_i, σ_i)` over all states.
    pub fn log_likelihood(&self, gaps: &[f64]) -> f64 {
        self.states.iter().zip(gaps).map(|(s, &g)| s.gap.log_density(g)).sum()
    }

    /// Constant part of the objective: every gap at its mean.
    pub fn unconstrained_optimum(&self) -> f64 {
        self.states.iter().map(|s| s.gap.log_density(s.gap.mean)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    /// `g_i >= ε`.
    MinGap(usize),
    /// First event not before the bin start.
    FirstInBin,
    /// The `c`-th event not after the bin end.
    LastInBin,
    /// The `(c+1)`-th event after the bin end.
    Overflow,
}

/// `coeffs · g >= rhs` over the free variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

impl Constraint {
    pub fn value(&self, g: &[f64]) -> f64 {
        self.coeffs.iter().zip(g).map(|(a, x)| a * x).sum()
    }

    pub fn slack(&self, g: &[f64]) -> f64 {
        self.value(g) - self.rhs
    }
}

/// Number of free gap variables for count `c`.
pub fn num_free(problem: &BinProblem, c: usize) -> usize {
    (c + 1).min(problem.states.len())
}

/// The linear constraints that force exactly `c` events into the bin.
pub fn constraints_for(problem: &BinProblem, c: usize) -> Vec<Constraint> {
    let n = num_free(problem, c);
    let (o, d, eps) = (problem.offset, problem.width, problem.epsilon());
    let prefix = |k: usize, sign: f64| -> Vec<f64> { (0..n).map(|i| if i < k { sign } else { 0.0 }).collect() };
    let mut out: Vec<Constraint> = (0..n)
        .map(|i| Constraint {
            kind: ConstraintKind::MinGap(i),
            coeffs: (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect(),
            rhs: eps,
        })
        .collect();
    if c >= 1 {
        out.push(Constraint { kind: ConstraintKind::FirstInBin, coeffs: prefix(1, 1.0), rhs: o });
        out.push(Constraint { kind: ConstraintKind::LastInBin, coeffs: prefix(c, -1.0), rhs: -(o + d) });
    }
    if c < n {
        out.push(Constraint { kind: ConstraintKind::Overflow, coeffs: prefix(c + 1, 1.0), rhs: o + d + eps });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    /// The unconstrained optimum (all gaps at their means) is feasible.
    Unconstrained,
    /// One aggregate constraint active, solved by equality projection.
    ClosedForm,
    ActiveSet,
    /// Dual coordinate ascent, used when the active-set iteration stalls.
    DualFallback,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            QpStatus::Unconstrained => "unconstrained",
            QpStatus::ClosedForm => "closed_form",
            QpStatus::ActiveSet => "active_set",
            QpStatus::DualFallback => "dual_fallback",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub count: usize,
    /// One gap per state; entries past the free variables equal `μ_i`.
    pub gaps: Vec<f64>,
    /// `M_c`, the maximized gap log-likelihood.
    pub objective: f64,
    pub constraints: Vec<Constraint>,
    /// One non-negative multiplier per constraint.
    pub multipliers: Vec<f64>,
    pub status: QpStatus,
}

impl QpSolution {
    pub fn free(&self) -> &[f64] {
        &self.gaps[..self.constraints.first().map_or(0, |c| c.coeffs.len())]
    }
}

/// Solves the gap QP for candidate count `c`.
pub fn solve_gap_qp(problem: &BinProblem, c: usize) -> Result<QpSolution> {
    problem.validate()?;
    if c > problem.cmax {
        return Err(Error::Contract(format!("count {c} exceeds cmax = {}", problem.cmax)));
    }
    let eps = problem.epsilon();
    if c as f64 * eps > problem.width {
        return Err(Error::Infeasible(format!("{c} events with minimum gap {eps} do not fit in the bin")));
    }
    let n = num_free(problem, c);
    let constraints = constraints_for(problem, c);
    let mu: Vec<f64> = problem.states[..n].iter().map(|s| s.gap.mean).collect();
    let var: Vec<f64> = problem.states[..n].iter().map(|s| s.gap.std * s.gap.std).collect();
    let tol = 1e-12 * (problem.offset + problem.width).max(1.0);

    let (free, multipliers, status) = match closed_form(&mu, &var, &constraints, tol) {
        Some((g, l, s)) => (g, l, s),
        None => {
            let start = feasible_start(problem, c, n);
            match active_set(&mu, &var, &constraints, start, tol) {
                Some((g, l)) => (g, l, QpStatus::ActiveSet),
                None => {
                    log::debug!("active set stalled for c={c}; using dual coordinate ascent");
                    let (g, l) = hildreth(&mu, &var, &constraints, tol);
                    (g, l, QpStatus::DualFallback)
                }
            }
        }
    };
    let mut gaps: Vec<f64> = problem.states.iter().map(|s| s.gap.mean).collect();
    gaps[..n].copy_from_slice(&free);
    let objective = problem.log_likelihood(&gaps);
    Ok(QpSolution { count: c, gaps, objective, constraints, multipliers, status })
}

fn is_feasible(g: &[f64], constraints: &[Constraint], tol: f64) -> bool {
    constraints.iter().all(|k| k.slack(g) >= -tol)
}

/// Unconstrained optimum, or projection onto one aggregate constraint.
fn closed_form(mu: &[f64], var: &[f64], constraints: &[Constraint], tol: f64) -> Option<(Vec<f64>, Vec<f64>, QpStatus)> {
    let m = constraints.len();
    if is_feasible(mu, constraints, tol) {
        return Some((mu.to_vec(), vec![0.0; m], QpStatus::Unconstrained));
    }
    let violated: Vec<usize> = (0..m).filter(|&k| constraints[k].slack(mu) < -tol).collect();
    if violated.len() != 1 {
        return None;
    }
    let k = violated[0];
    if !matches!(constraints[k].kind, ConstraintKind::LastInBin | ConstraintKind::Overflow) {
        return None;
    }
    let a = &constraints[k].coeffs;
    let ada: f64 = a.iter().zip(var).map(|(a, v)| a * a * v).sum();
    let lambda = -constraints[k].slack(mu) / ada;
    let g: Vec<f64> = mu.iter().zip(var).zip(a).map(|((m, v), a)| m + v * a * lambda).collect();
    if lambda < 0.0 || !is_feasible(&g, constraints, tol) {
        return None;
    }
    let mut l = vec![0.0; m];
    l[k] = lambda;
    Some((g, l, QpStatus::ClosedForm))
}

/// Evenly spaced interior point of the feasible set.
fn feasible_start(problem: &BinProblem, c: usize, n: usize) -> Vec<f64> {
    let (o, d, eps) = (problem.offset, problem.width, problem.epsilon());
    if c == 0 {
        return vec![o + d + 2.0 * eps];
    }
    let h = d / (c + 1) as f64;
    let mut g = vec![h; n];
    g[0] = o + h;
    if n > c {
        g[c] = h + 2.0 * eps;
    }
    g
}

/// Solves `K x = rhs` for small dense symmetric `K` by Gaussian elimination
/// with partial pivoting.
fn solve_dense(mut k: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    let scale = k.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| k[a][col].abs().total_cmp(&k[b][col].abs()))?;
        if k[piv][col].abs() < 1e-13 * scale {
            return None;
        }
        k.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..n {
            let f = k[r][col] / k[col][col];
            if f != 0.0 {
                for j in col..n {
                    k[r][j] -= f * k[col][j];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|j| k[r][j] * x[j]).sum();
        x[r] = (rhs[r] - s) / k[r][r];
    }
    Some(x)
}

/// Minimizer of `½ Σ (g_i - μ_i)² / var_i` on `{a_k · g = b_k, k ∈ W}`,
/// with the multipliers of the working constraints.
fn project(mu: &[f64], var: &[f64], constraints: &[Constraint], working: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
    if working.is_empty() {
        return Some((mu.to_vec(), Vec::new()));
    }
    let gram: Vec<Vec<f64>> = working
        .iter()
        .map(|&i| {
            working
                .iter()
                .map(|&j| {
                    let (a, b) = (&constraints[i].coeffs, &constraints[j].coeffs);
                    a.iter().zip(b).zip(var).map(|((x, y), v)| x * y * v).sum()
                })
                .collect()
        })
        .collect();
    let rhs: Vec<f64> = working.iter().map(|&i| -constraints[i].slack(mu)).collect();
    let lambda = solve_dense(gram, rhs)?;
    let mut g = mu.to_vec();
    for (l, &k) in lambda.iter().zip(working) {
        for (i, a) in constraints[k].coeffs.iter().enumerate() {
            g[i] += var[i] * a * l;
        }
    }
    Some((g, lambda))
}

/// Primal active-set method started from a feasible point.
fn active_set(
    mu: &[f64],
    var: &[f64],
    constraints: &[Constraint],
    mut g: Vec<f64>,
    tol: f64,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let m = constraints.len();
    let mut working: Vec<usize> = Vec::new();
    let max_iter = 20 * (m + g.len()) + 100;
    for _ in 0..max_iter {
        let (target, lambda) = project(mu, var, constraints, &working)?;
        let p: Vec<f64> = target.iter().zip(&g).map(|(t, x)| t - x).collect();
        let p_norm = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if p_norm <= tol {
            let (worst, lmin) = lambda
                .iter()
                .enumerate()
                .fold((usize::MAX, 0.0f64), |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc });
            let scale = lambda.iter().fold(1e-12f64, |a, l| a.max(l.abs()));
            if worst == usize::MAX || lmin >= -1e-10 * scale {
                let mut all = vec![0.0; m];
                for (l, &k) in lambda.iter().zip(&working) {
                    all[k] = l.max(0.0);
                }
                return Some((target, all));
            }
            working.remove(worst);
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for (k, con) in constraints.iter().enumerate() {
            if working.contains(&k) {
                continue;
            }
            let ap = con.value(&p);
            if ap < -1e-14 * p_norm.max(1.0) {
                let step = (-con.slack(&g) / ap).max(0.0);
                if step < alpha {
                    alpha = step;
                    blocking = Some(k);
                }
            }
        }
        for (x, d) in g.iter_mut().zip(&p) {
            *x += alpha * d;
        }
        if let Some(k) = blocking {
            working.push(k);
        }
    }
    None
}

/// Hildreth's dual coordinate ascent; slow but unconditionally convergent.
fn hildreth(mu: &[f64], var: &[f64], constraints: &[Constraint], tol: f64) -> (Vec<f64>, Vec<f64>) {
    let m = constraints.len();
    let mut lambda = vec![0.0; m];
    let mut g = mu.to_vec();
    let norms: Vec<f64> = constraints
        .iter()
        .map(|c| c.coeffs.iter().zip(var).map(|(a, v)| a * a * v).sum())
        .collect();
    for _ in 0..200_000 {
        let mut change = 0.0f64;
        for k in 0..m {
            let step = -constraints[k].slack(&g) / norms[k];
            let new = (lambda[k] + step).max(0.0);
            let d = new - lambda[k];
            if d != 0.0 {
                for (i, a) in constraints[k].coeffs.iter().enumerate() {
                    g[i] += var[i] * a * d;
                }
                lambda[k] = new;
                change = change.max(d.abs() * norms[k].sqrt());
            }
        }
        if change < tol * 1e-3 {
            break;
        }
    }
    (g, lambda)
}
