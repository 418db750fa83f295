//! Classical sparse reconstruction: the thresholding iteration, nonnegative
//! ℓ1 (proximal gradient), iteratively reweighted ℓ1, and the guided weighted
//! ℓ1 problem.

use alloc::vec;
use alloc::vec::Vec;
use core::time::Duration;

use num_traits::Float;

use crate::error::{invalid, mismatch, Result};
use crate::geometry::{Direction, DirectionSet, Dictionary};
use crate::linalg::{cholesky_solve, dot, norm2, Matrix};

/// Thresholding operator applied after each linear update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threshold {
    /// Thresholded ReLU: `a` if `a ≥ λ`, else 0.
    Hard,
    /// Nonnegative shrinkage `max(a − λ, 0)`.
    Soft,
}

#[inline]
pub fn hard_threshold(a: f64, lambda: f64) -> f64 {
    if a >= lambda {
        a
    } else {
        0.0
    }
}

#[inline]
pub fn soft_threshold_nonneg(a: f64, lambda: f64) -> f64 {
    let v = a - lambda;
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// One thresholding iteration `h_λ(W·y + S·f)`.
pub fn iterative_step(
    f: &[f64],
    y: &[f64],
    w: &Matrix,
    s: &Matrix,
    lambda: f64,
    mode: Threshold,
) -> Result<Vec<f64>> {
    if w.cols() != y.len() || w.rows() != s.rows() || s.cols() != f.len() {
        return Err(mismatch!(
            "W is {}×{}, S is {}×{}, y has {}, f has {}",
            w.rows(),
            w.cols(),
            s.rows(),
            s.cols(),
            y.len(),
            f.len()
        ));
    }
    if !(lambda >= 0.0) {
        return Err(invalid!("threshold must be nonnegative (got {lambda})"));
    }
    let mut a = w.mul_vec(y);
    for (ai, srow) in a.iter_mut().zip((0..s.rows()).map(|r| s.row(r))) {
        *ai += dot(srow, f);
    }
    let h = match mode {
        Threshold::Hard => hard_threshold,
        Threshold::Soft => soft_threshold_nonneg,
    };
    a.iter_mut().for_each(|v| *v = h(*v, lambda));
    Ok(a)
}

/// Observation `y`, dictionary `G` and regularization `β`.
#[derive(Debug, Clone, Copy)]
pub struct SparseProblem<'a> {
    pub dictionary: &'a Dictionary,
    pub y: &'a [f64],
    pub beta: f64,
}

impl<'a> SparseProblem<'a> {
    pub fn new(dictionary: &'a Dictionary, y: &'a [f64], beta: f64) -> Result<Self> {
        if y.len() != dictionary.k() {
            return Err(mismatch!("signal has {} values, dictionary has {} rows", y.len(), dictionary.k()));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(invalid!("β must be finite and nonnegative (got {beta})"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("signal contains non-finite values"));
        }
        Ok(Self { dictionary, y, beta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub max_iter: usize,
    /// Stop when `‖fᵏ⁺¹ − fᵏ‖ / ‖fᵏ⁺¹‖` falls below this.
    pub tol: f64,
    /// Every this many accepted iterations, try to certify the support of
    /// the current iterate with an exact reduced solve (0 disables).
    pub certify_every: usize,
    /// Finish an uncertified run with an exact active-set solve.
    pub exact_finish: bool,
    pub record_history: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            certify_every: 20,
            exact_finish: true,
            record_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub solution: Vec<f64>,
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
    /// The solution satisfies the optimality conditions to rounding
    /// (found by the reduced or active-set solve).
    pub exact: bool,
    /// Largest violation of the nonnegative-ℓ1 optimality conditions.
    pub kkt_residual: f64,
    /// Objective of every accepted iterate, when requested.
    pub objective_history: Vec<f64>,
    /// Per-atom weights of the last solve (reweighted solver only).
    pub weights: Option<Vec<f64>>,
    pub wall_time: Option<Duration>,
}

/// Per-atom ℓ1 weights favoring atoms close to guiding directions.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceWeights {
    pub weights: Vec<f64>,
    pub guides: Vec<Direction>,
    pub alpha: f64,
}

impl GuidanceWeights {
    pub fn unit(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
            guides: Vec::new(),
            alpha: 0.0,
        }
    }
}

/// `Cᵢ = (1 − α·maxₚ|vᵢ·uₚ|) / min_q (1 − α·maxₚ|v_q·uₚ|)`.
pub fn compute_guidance_weights(
    basis: &DirectionSet,
    guides: &[Direction],
    alpha: f64,
) -> Result<GuidanceWeights> {
    if guides.is_empty() {
        return Err(invalid!("guidance needs at least one guiding direction"));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid!("α must lie in [0, 1) (got {alpha})"));
    }
    let raw: Vec<f64> = basis
        .iter()
        .map(|v| {
            let closeness = guides.iter().map(|u| v.abs_cos(u)).fold(0.0, f64::max);
            1.0 - alpha * closeness
        })
        .collect();
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(GuidanceWeights {
        weights: raw.iter().map(|r| r / min).collect(),
        guides: guides.to_vec(),
        alpha,
    })
}

/// Nonnegative ℓ1 baseline: `min ‖Gf − y‖² + β‖f‖₁` s.t. `f ≥ 0`.
pub fn solve_nn_l1(problem: &SparseProblem<'_>, settings: &SolverSettings) -> Result<SolverReport> {
    let thresholds = vec![problem.beta; problem.dictionary.n()];
    Ok(timed(|| penalized_nnls(problem, &thresholds, None, settings)))
}

/// Guided problem `min ‖Gf − y‖² + β‖Cf‖₁` s.t. `f ≥ 0`, C diagonal.
pub fn solve_weighted_l1(
    problem: &SparseProblem<'_>,
    weights: &GuidanceWeights,
    settings: &SolverSettings,
) -> Result<SolverReport> {
    let thresholds = scaled_thresholds(problem, &weights.weights)?;
    Ok(timed(|| penalized_nnls(problem, &thresholds, None, settings)))
}

fn scaled_thresholds(problem: &SparseProblem<'_>, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != problem.dictionary.n() {
        return Err(mismatch!("{} weights for {} atoms", weights.len(), problem.dictionary.n()));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(invalid!("ℓ1 weights must be finite and nonnegative"));
    }
    Ok(weights.iter().map(|w| problem.beta * w).collect())
}

/// Iteratively reweighted nonnegative ℓ1. Round 1 uses unit weights; round
/// `r` uses `1/(fᵢ + ε)` from round `r − 1` and warm-starts from it.
pub fn solve_reweighted_l1(
    problem: &SparseProblem<'_>,
    rounds: usize,
    epsilon: f64,
    settings: &SolverSettings,
) -> Result<SolverReport> {
    if rounds == 0 {
        return Err(invalid!("reweighting needs at least one round"));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid!("ε must be positive (got {epsilon})"));
    }
    Ok(timed(|| {
        let n = problem.dictionary.n();
        let mut weights = vec![1.0; n];
        let mut report = penalized_nnls(problem, &vec![problem.beta; n], None, settings);
        let mut iterations = report.iterations;
        for _ in 1..rounds {
            weights = report.solution.iter().map(|f| 1.0 / (f + epsilon)).collect();
            let thresholds: Vec<f64> = weights.iter().map(|w| problem.beta * w).collect();
            report = penalized_nnls(problem, &thresholds, Some(&report.solution), settings);
            iterations += report.iterations;
        }
        report.iterations = iterations;
        report.weights = Some(weights);
        report
    }))
}

#[cfg(feature = "std")]
fn timed(run: impl FnOnce() -> SolverReport) -> SolverReport {
    let start = std::time::Instant::now();
    let mut report = run();
    report.wall_time = Some(start.elapsed());
    report
}

#[cfg(not(feature = "std"))]
fn timed(run: impl FnOnce() -> SolverReport) -> SolverReport {
    run()
}

/// `‖Gf − y‖² + Σ tᵢfᵢ` given the residual `Gf − y`.
#[inline]
fn objective(residual: &[f64], thresholds: &[f64], f: &[f64]) -> f64 {
    dot(residual, residual) + dot(thresholds, f)
}

/// Largest violation of the optimality conditions of
/// `min ‖Gf − y‖² + Σ tᵢfᵢ, f ≥ 0`: with `gᵢ = 2[Gᵀ(Gf − y)]ᵢ + tᵢ`,
/// `|gᵢ|` where `fᵢ > 0` and `max(−gᵢ, 0)` where `fᵢ = 0`.
pub fn kkt_residual(g: &Matrix, y: &[f64], thresholds: &[f64], f: &[f64]) -> f64 {
    let mut r = g.mul_vec(f);
    r.iter_mut().zip(y).for_each(|(ri, yi)| *ri -= yi);
    let grad = g.tr_mul_vec(&r);
    grad.iter()
        .zip(thresholds)
        .zip(f)
        .map(|((gi, ti), fi)| {
            let v = 2.0 * gi + ti;
            if *fi > 0.0 {
                Float::abs(v)
            } else {
                Float::max(-v, 0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Monotone accelerated proximal gradient for
/// `min ‖Gf − y‖² + Σ tᵢfᵢ` s.t. `f ≥ 0`, step `1/L` with `L = λmax(2GᵀG)`.
///
/// A candidate that does not decrease the objective resets the momentum and
/// is replaced by a plain proximal step from the current iterate, so the
/// accepted objective sequence never increases.
fn penalized_nnls(
    problem: &SparseProblem<'_>,
    thresholds: &[f64],
    warm: Option<&[f64]>,
    settings: &SolverSettings,
) -> SolverReport {
    let g = problem.dictionary.matrix();
    let y = problem.y;
    let (k, n) = (g.rows(), g.cols());
    let lipschitz = problem.dictionary.lipschitz();
    let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 0.0 };

    let mut x = warm.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut gx = g.mul_vec(&x);
    let mut residual: Vec<f64> = gx.iter().zip(y).map(|(a, b)| a - b).collect();
    let mut obj_x = objective(&residual, thresholds, &x);

    let mut point = x.clone();
    let mut g_point = gx.clone();
    let mut momentum = false;
    let mut t = 1.0;

    let mut x_prev = vec![0.0; n];
    let mut gx_prev = vec![0.0; k];
    let mut grad = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut gz = vec![0.0; k];

    let mut history = Vec::new();
    if settings.record_history {
        history.push(obj_x);
    }
    let mut converged = false;
    let mut exact = false;
    let mut iterations = 0;
    while iterations < settings.max_iter {
        iterations += 1;
        residual
            .iter_mut()
            .zip(&g_point)
            .zip(y)
            .for_each(|((r, gp), yi)| *r = gp - yi);
        g.tr_mul_vec_into(&residual, &mut grad);
        for i in 0..n {
            z[i] = soft_threshold_nonneg(point[i] - step * 2.0 * grad[i], step * thresholds[i]);
        }
        g.mul_vec_into(&z, &mut gz);
        residual
            .iter_mut()
            .zip(&gz)
            .zip(y)
            .for_each(|((r, gzi), yi)| *r = gzi - yi);
        let obj_z = objective(&residual, thresholds, &z);
        if obj_z > obj_x {
            if momentum {
                momentum = false;
                t = 1.0;
                point.copy_from_slice(&x);
                g_point.copy_from_slice(&gx);
                continue;
            }
            // A plain proximal step can only fail to descend through rounding.
            converged = true;
            break;
        }
        core::mem::swap(&mut x_prev, &mut x);
        core::mem::swap(&mut gx_prev, &mut gx);
        x.copy_from_slice(&z);
        gx.copy_from_slice(&gz);
        obj_x = obj_z;
        if settings.record_history {
            history.push(obj_x);
        }
        if settings.certify_every > 0 && iterations % settings.certify_every == 0 {
            if let Some((f, obj)) = certify_support(g, y, thresholds, &x) {
                if obj <= obj_x {
                    x = f;
                    obj_x = obj;
                    exact = true;
                    if settings.record_history {
                        history.push(obj_x);
                    }
                    break;
                }
            }
        }

        let mut change = 0.0;
        for i in 0..n {
            let d = x[i] - x_prev[i];
            change += d * d;
        }
        let change = Float::sqrt(change);
        let size = norm2(&x);
        if change <= settings.tol * size || (size == 0.0 && change == 0.0) {
            converged = true;
            break;
        }

        let t_next = (1.0 + Float::sqrt(1.0 + 4.0 * t * t)) / 2.0;
        let m = (t - 1.0) / t_next;
        t = t_next;
        momentum = m > 0.0;
        for i in 0..n {
            point[i] = x[i] + m * (x[i] - x_prev[i]);
        }
        for r in 0..k {
            g_point[r] = gx[r] + m * (gx[r] - gx_prev[r]);
        }
    }

    if !exact && settings.exact_finish {
        if let Some((f, obj)) = certify_support(g, y, thresholds, &x).or_else(|| active_set(g, y, thresholds)) {
            if obj <= obj_x {
                x = f;
                obj_x = obj;
                exact = true;
                if settings.record_history {
                    history.push(obj_x);
                }
            }
        }
    }

    SolverReport {
        kkt_residual: kkt_residual(g, y, thresholds, &x),
        solution: x,
        iterations,
        objective: obj_x,
        converged: converged || exact,
        exact,
        objective_history: history,
        weights: None,
        wall_time: None,
    }
}

/// Optimality tolerance of the exact stages, on `2Gᵀ(Gf − y) + t`.
const EXACT_TOL: f64 = 1e-9;

/// Minimizer of the problem restricted to `support` (unconstrained in sign),
/// or `None` when the reduced Gram matrix is singular.
fn reduced_solve(g: &Matrix, y: &[f64], thresholds: &[f64], support: &[usize]) -> Option<Vec<f64>> {
    let m = support.len();
    let k = g.rows();
    let mut q = vec![0.0; m * m];
    let mut d = vec![0.0; m];
    for r in 0..k {
        let row = g.row(r);
        for (a, &i) in support.iter().enumerate() {
            let gi = row[i];
            d[a] += gi * y[r];
            for (b, &j) in support.iter().enumerate().take(a + 1) {
                q[a * m + b] += gi * row[j];
            }
        }
    }
    for a in 0..m {
        d[a] -= 0.5 * thresholds[support[a]];
        for b in 0..a {
            q[b * m + a] = q[a * m + b];
        }
    }
    cholesky_solve(&q, m, &d)
}

fn scatter(n: usize, support: &[usize], values: &[f64]) -> Vec<f64> {
    let mut f = vec![0.0; n];
    for (&i, &v) in support.iter().zip(values) {
        f[i] = v;
    }
    f
}

fn full_objective(g: &Matrix, y: &[f64], thresholds: &[f64], f: &[f64]) -> f64 {
    let mut r = g.mul_vec(f);
    r.iter_mut().zip(y).for_each(|(ri, yi)| *ri -= yi);
    objective(&r, thresholds, f)
}

/// Solves the problem restricted to the positive entries of `x` and returns
/// the result with its objective if it is feasible and optimal for the full
/// problem.
/// Entries below a fraction of the largest one are also tried as zeros,
/// since proximal iterates approach a zero only slowly.
fn certify_support(g: &Matrix, y: &[f64], thresholds: &[f64], x: &[f64]) -> Option<(Vec<f64>, f64)> {
    let largest = x.iter().copied().fold(0.0, f64::max);
    let mut tried: Option<usize> = None;
    for rel in [0.0, 1e-4, 1e-2] {
        let support: Vec<usize> = (0..x.len()).filter(|&i| x[i] > rel * largest).collect();
        if tried == Some(support.len()) || support.len() > g.rows() {
            continue;
        }
        tried = Some(support.len());
        let Some(z) = reduced_solve(g, y, thresholds, &support) else {
            continue;
        };
        if z.iter().any(|&v| !(v > 0.0)) {
            continue;
        }
        let f = scatter(x.len(), &support, &z);
        if kkt_residual(g, y, thresholds, &f) <= EXACT_TOL {
            let obj = full_objective(g, y, thresholds, &f);
            return Some((f, obj));
        }
    }
    None
}

/// Lawson–Hanson active-set method on the penalized problem, started from
/// zero. `None` if it stalls on a singular subproblem.
fn active_set(g: &Matrix, y: &[f64], thresholds: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = g.cols();
    let mut x = vec![0.0; n];
    let mut passive: Vec<usize> = Vec::new();
    // Atoms that were dropped again right after entering; skipped until the
    // iterate changes.
    let mut rejected: Vec<usize> = Vec::new();
    let mut residual = vec![0.0; g.rows()];
    let mut w = vec![0.0; n];
    for _ in 0..4 * n {
        // w = Gᵀ(y − Gx) − t/2, half the negative gradient
        g.mul_vec_into(&x, &mut residual);
        residual.iter_mut().zip(y).for_each(|(r, yi)| *r = yi - *r);
        g.tr_mul_vec_into(&residual, &mut w);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            let wi = w[i] - 0.5 * thresholds[i];
            if wi > 0.5 * EXACT_TOL
                && !passive.contains(&i)
                && !rejected.contains(&i)
                && best.is_none_or(|(_, b)| wi > b)
            {
                best = Some((i, wi));
            }
        }
        let Some((j, _)) = best else {
            let obj = full_objective(g, y, thresholds, &x);
            return Some((x, obj));
        };
        passive.push(j);
        let mut first = true;
        loop {
            let z = reduced_solve(g, y, thresholds, &passive)?;
            if z.iter().all(|&v| v > 0.0) {
                x = scatter(n, &passive, &z);
                rejected.clear();
                break;
            }
            let mut alpha = 1.0;
            let mut block = None;
            for (a, &i) in passive.iter().enumerate() {
                if z[a] <= 0.0 {
                    let den = x[i] - z[a];
                    let ratio = if den > 0.0 { x[i] / den } else { 0.0 };
                    if block.is_none() || ratio < alpha {
                        alpha = ratio;
                        block = Some(i);
                    }
                }
            }
            let block = block.expect("some entry is nonpositive");
            if first && block == j && x[j] == 0.0 {
                passive.pop();
                rejected.push(j);
                break;
            }
            first = false;
            for (a, &i) in passive.iter().enumerate() {
                x[i] += alpha * (z[a] - x[i]);
            }
            x[block] = 0.0;
            passive.retain(|&i| x[i] > 0.0);
            for i in 0..n {
                if !passive.contains(&i) {
                    x[i] = 0.0;
                }
            }
            rejected.clear();
            if passive.is_empty() {
                break;
            }
        }
    }
    None
}
