//! Direct minimization of the primal weight problem, used as a test oracle.
//!
//! Control weights are written as `ω_i = n·v_i` with `v` on the simplex, so
//! the problem becomes `min_v κ Σ v log v + ½‖Φ_c'v − m‖²` with `κ = ζ²/n`
//! and `m` the treated mean of φ. Iterates follow entropic proximal
//! gradient steps: a gradient step on the quadratic, the entropy term
//! handled exactly, and renormalization onto the simplex.

use nalgebra::DMatrix;

use super::{check_design, BalanceSolution, SolverOptions};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// The reference solver refuses larger problems.
pub const PRIMAL_MAX_UNITS: usize = 200;

/// Stationarity spread at which iterations stop.
const PRIMAL_TOL: f64 = 1e-11;

/// Iterations without a new smallest stationarity spread before giving up.
const PRIMAL_STALL: usize = 5000;

/// `(ζ²/n)·Pn ω log ω + ½‖imbalance‖²` over control weights (treated entries ignored).
pub fn primal_objective(weights: &[f64], features: &DMatrix<f64>, treated: &[bool], zeta: f64) -> f64 {
    let n = features.nrows();
    let nf = n as f64;
    let n1 = treated.iter().filter(|&&d| d).count() as f64;
    let entropy: f64 = weights
        .iter()
        .zip(treated)
        .filter(|(&w, &d)| !d && w > 0.0)
        .map(|(&w, _)| w * w.ln())
        .sum::<f64>()
        / nf;
    let imbalance_sq: f64 = (0..features.ncols())
        .map(|j| {
            let v: f64 = (0..n)
                .map(|i| {
                    if treated[i] {
                        -features[(i, j)] / n1
                    } else {
                        weights[i] * features[(i, j)] / nf
                    }
                })
                .sum();
            v * v
        })
        .sum();
    zeta * zeta / nf * entropy + 0.5 * imbalance_sq
}

struct SimplexProblem {
    /// Control rows of φ, `n0 × p`.
    phi: DMatrix<f64>,
    target: Vec<f64>,
    kappa: f64,
}

impl SimplexProblem {
    fn residual(&self, v: &[f64]) -> Vec<f64> {
        let p = self.phi.ncols();
        (0..p)
            .map(|j| v.iter().enumerate().map(|(i, vi)| vi * self.phi[(i, j)]).sum::<f64>() - self.target[j])
            .collect()
    }

    fn curvature(&self, d: &[f64]) -> f64 {
        (0..self.phi.ncols())
            .map(|j| d.iter().enumerate().map(|(i, di)| di * self.phi[(i, j)]).sum::<f64>().powi(2))
            .sum::<f64>()
            / 2.0
    }

    fn smooth_grad(&self, v: &[f64]) -> Vec<f64> {
        let r = self.residual(v);
        (0..v.len())
            .map(|i| (0..r.len()).map(|j| self.phi[(i, j)] * r[j]).sum())
            .collect()
    }

    /// `max − min` of `κ log v_i + ∂g/∂v_i`; zero exactly at the optimum.
    fn stationarity(&self, v: &[f64], grad: &[f64]) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (x, g) in v.iter().zip(grad) {
            let s = self.kappa * x.ln() + g;
            lo = lo.min(s);
            hi = hi.max(s);
        }
        hi - lo
    }

    fn prox_step(&self, v: &[f64], grad: &[f64], eta: f64) -> Vec<f64> {
        let denom = 1.0 + eta * self.kappa;
        let logs: Vec<f64> = v.iter().zip(grad).map(|(x, g)| (x.ln() - eta * g) / denom).collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|x| *x /= total);
        out
    }
}

/// `(1+r)·ln(1+r) − r`, accurate for small `r`.
fn bregman_entropy(r: f64) -> f64 {
    if r.abs() < 1e-4 {
        r * r * (0.5 - r * (1.0 / 6.0 - r * (1.0 / 12.0 - r / 20.0)))
    } else {
        (1.0 + r) * r.ln_1p() - r
    }
}

/// KL divergence between points of the simplex, summed termwise without cancellation.
fn kl(x: &[f64], v: &[f64]) -> f64 {
    x.iter().zip(v).map(|(a, b)| b * bregman_entropy(a / b - 1.0)).sum()
}

/// Solve the primal problem directly (n ≤ [`PRIMAL_MAX_UNITS`]).
///
/// With ζ = 0 the entropy coefficient is `opts.primal_entropy_floor`.
/// The returned `beta` is read off the optimality condition
/// `β = −imbalance / κ`; `kkt_residual` is the stationarity spread.
pub fn solve_primal_reference(
    features: &FeatureMatrix,
    treated: &[bool],
    zeta: f64,
    opts: &SolverOptions,
) -> Result<BalanceSolution> {
    let n = features.n();
    if n > PRIMAL_MAX_UNITS {
        return Err(Error::Range(format!("primal reference is capped at {PRIMAL_MAX_UNITS} units, got {n}")));
    }
    let pi_bar = check_design(n, treated, zeta)?;
    let values = features.values();
    let p = features.p();
    let controls: Vec<usize> = (0..n).filter(|&i| !treated[i]).collect();
    let n1 = treated.iter().filter(|&&d| d).count() as f64;
    let target: Vec<f64> = (0..p)
        .map(|j| (0..n).filter(|&i| treated[i]).map(|i| values[(i, j)]).sum::<f64>() / n1)
        .collect();
    let kappa = if zeta > 0.0 { zeta * zeta / n as f64 } else { opts.primal_entropy_floor };
    let problem = SimplexProblem { phi: values.select_rows(controls.iter()), target, kappa };

    let n0 = controls.len();
    let mut v = vec![1.0 / n0 as f64; n0];
    let mut best = (f64::INFINITY, v.clone());
    let mut eta = 1.0;
    let mut iterations = 0;
    let mut spread = f64::INFINITY;
    let mut stalled = 0;

    while iterations < opts.primal_max_iter {
        let grad = problem.smooth_grad(&v);
        spread = problem.stationarity(&v, &grad);
        if spread < best.0 {
            best = (spread, v.clone());
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= PRIMAL_STALL {
                break;
            }
        }
        if spread <= PRIMAL_TOL {
            break;
        }
        eta *= 2.0;
        // g is quadratic, so its Bregman gap is ½‖Φ'(x − v)‖² exactly.
        let next = loop {
            let x = problem.prox_step(&v, &grad, eta);
            let diff: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - b).collect();
            let gap = problem.curvature(&diff);
            if gap <= kl(&x, &v) / eta || eta < 1e-12 {
                break x;
            }
            eta *= 0.5;
        };
        v = next;
        iterations += 1;
    }

    let (spread, v) = if spread <= best.0 { (spread, v) } else { best };
    let mut weights = vec![0.0; n];
    for (k, &i) in controls.iter().enumerate() {
        weights[i] = n as f64 * v[k];
    }
    let imbalance = problem.residual(&v);
    let beta: Vec<f64> = imbalance.iter().map(|r| -r / kappa).collect();
    let alpha = controls
        .iter()
        .map(|&i| {
            let idx: f64 = (0..p).map(|j| values[(i, j)] * beta[j]).sum();
            (pi_bar * weights[i]).ln() - idx
        })
        .sum::<f64>()
        / n0 as f64;

    Ok(BalanceSolution {
        alpha,
        beta,
        weights,
        imbalance,
        zeta,
        kkt_residual: spread,
        iterations,
        converged: spread <= PRIMAL_TOL,
        hessian_regularized: false,
    })
}
