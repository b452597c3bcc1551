//! Bounded Levenberg-Marquardt for weighted least squares.

use nalgebra::{DMatrix, DVector};

pub const MAX_ITERATIONS: usize = 200;
pub const STEP_TOLERANCE: f64 = 1e-8;
/// Relative χ² decrease below which an accepted step ends the search; it only
/// matters in flat valleys where the step criterion is never met.
pub const COST_TOLERANCE: f64 = 1e-10;
const LAMBDA_START: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e20;

pub(crate) trait Model {
    fn n_params(&self) -> usize;
    fn value(&self, x: f64, p: &[f64]) -> f64;
    /// Writes ∂f/∂p into `out`.
    fn gradient(&self, x: f64, p: &[f64], out: &mut [f64]);
    /// Per-parameter scale against which step sizes are judged.
    fn step_scale(&self, p: &[f64], out: &mut [f64]);
}

pub(crate) struct Problem<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub weight: &'a [f64],
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub params: Vec<f64>,
    pub chi2: f64,
    pub iterations: usize,
    /// Jᵀ W J at the solution.
    pub information: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Stalled {
    pub params: Vec<f64>,
    pub iterations: usize,
}

fn clamp(p: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in p.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

fn chi2<M: Model>(m: &M, pr: &Problem, p: &[f64]) -> f64 {
    pr.x.iter()
        .zip(pr.y)
        .zip(pr.weight)
        .map(|((&x, &y), &w)| {
            let r = y - m.value(x, p);
            w * r * r
        })
        .sum()
}

/// Returns (JᵀWJ, JᵀW r).
fn normal_equations<M: Model>(m: &M, pr: &Problem, p: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.n_params();
    let mut jtj = DMatrix::<f64>::zeros(n, n);
    let mut jtr = DVector::<f64>::zeros(n);
    let mut g = vec![0.0; n];
    for ((&x, &y), &w) in pr.x.iter().zip(pr.y).zip(pr.weight) {
        m.gradient(x, p, &mut g);
        let r = y - m.value(x, p);
        for i in 0..n {
            let wgi = w * g[i];
            jtr[i] += wgi * r;
            for j in 0..=i {
                jtj[(i, j)] += wgi * g[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            jtj[(j, i)] = jtj[(i, j)];
        }
    }
    (jtj, jtr)
}

pub(crate) fn information<M: Model>(m: &M, pr: &Problem, p: &[f64]) -> DMatrix<f64> {
    normal_equations(m, pr, p).0
}

pub(crate) fn solve<M: Model>(m: &M, pr: &Problem, start: &[f64]) -> Result<Solution, Stalled> {
    let n = m.n_params();
    let mut p = start.to_vec();
    clamp(&mut p, &pr.lower, &pr.upper);
    let mut cost = chi2(m, pr, &p);
    let mut lambda = LAMBDA_START;
    let mut scale = vec![0.0; n];
    let mut iterations = 0;
    let (mut jtj, mut jtr) = normal_equations(m, pr, &p);
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut a = jtj.clone();
        let mut rhs = jtr.clone();
        for i in 0..n {
            let d = jtj[(i, i)];
            a[(i, i)] = d + lambda * if d > 0.0 { d } else { 1.0 };
        }
        // Parameters pinned at a bound by the descent direction are frozen.
        for i in 0..n {
            let pinned = (p[i] <= pr.lower[i] && jtr[i] < 0.0) || (p[i] >= pr.upper[i] && jtr[i] > 0.0);
            if pinned {
                for j in 0..n {
                    a[(i, j)] = 0.0;
                    a[(j, i)] = 0.0;
                }
                a[(i, i)] = 1.0;
                rhs[i] = 0.0;
            }
        }
        let step = match a.cholesky() {
            Some(c) => c.solve(&rhs),
            None => {
                lambda *= 10.0;
                if lambda > LAMBDA_MAX {
                    break;
                }
                continue;
            }
        };
        let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        clamp(&mut trial, &pr.lower, &pr.upper);
        m.step_scale(&p, &mut scale);
        let rel = p
            .iter()
            .zip(&trial)
            .zip(&scale)
            .map(|((a, b), s)| (b - a).abs() / s)
            .fold(0.0, f64::max);
        let trial_cost = chi2(m, pr, &trial);
        if trial_cost <= cost {
            let gain = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
            p = trial;
            cost = trial_cost;
            lambda = (lambda / 10.0).max(1e-12);
            if rel < STEP_TOLERANCE || (gain < COST_TOLERANCE && cost > 0.0) {
                return Ok(finish(m, pr, p, cost, iterations));
            }
            (jtj, jtr) = normal_equations(m, pr, &p);
        } else {
            if rel < STEP_TOLERANCE {
                return Ok(finish(m, pr, p, cost, iterations));
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                return Ok(finish(m, pr, p, cost, iterations));
            }
        }
    }
    Err(Stalled { params: p, iterations })
}

fn finish<M: Model>(m: &M, pr: &Problem, params: Vec<f64>, chi2: f64, iterations: usize) -> Solution {
    let information = information(m, pr, &params);
    Solution { params, chi2, iterations, information }
}

/// Inverse of the information matrix. Directions the data do not constrain
/// get infinite variance.
pub(crate) fn covariance(info: &DMatrix<f64>) -> DMatrix<f64> {
    let n = info.nrows();
    if let Some(c) = info.clone().cholesky() {
        return c.inverse();
    }
    let dead: Vec<bool> = (0..n).map(|i| info[(i, i)].is_nan() || info[(i, i)] <= 0.0).collect();
    let mut cov = info.clone().pseudo_inverse(1e-12).unwrap_or_else(|_| DMatrix::zeros(n, n));
    for i in 0..n {
        if dead[i] {
            cov[(i, i)] = f64::INFINITY;
        }
    }
    cov
}
