//! Synthetic control weights as entropy balancing, solved through the dual.
//!
//! The weights minimize `(ζ²/n)·Pn ω log ω + ½‖Pn ω(1−D)φ − Pn (D/π̄)φ‖²`
//! subject to `ω ≥ 0`, `Pn ω(1−D) = 1`. The dual minimizes
//!
//! ```text
//! G(α, β) = Pn[(1−D) exp(α + φ'β)] − Pn[D (α + φ'β)] + (π̄ζ²/2n)‖β‖²
//! ```
//!
//! and the control weights are `ω_i = exp(α + φ_i'β) / π̄`. At the optimum
//! the imbalance equals `−(ζ²/n)β`.

mod newton;
mod primal;

pub(crate) use newton::TiltObjective;
pub use primal::{primal_objective, solve_primal_reference, PRIMAL_MAX_UNITS};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Gradient sup-norm at which Newton stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Entropy coefficient the primal reference uses when ζ = 0.
    pub primal_entropy_floor: f64,
    pub primal_max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 200, primal_entropy_floor: 1e-8, primal_max_iter: 2_000_000 }
    }
}

/// Fitted dual coefficients and the weights they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSolution {
    pub alpha: f64,
    pub beta: Vec<f64>,
    /// One per unit; zero on treated units.
    pub weights: Vec<f64>,
    /// `Pn ω(1−D)φ − Pn (D/π̄)φ`.
    pub imbalance: Vec<f64>,
    pub zeta: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the Newton system needed the fallback ridge.
    #[serde(default)]
    pub hessian_regularized: bool,
}

impl BalanceSolution {
    pub fn imbalance_norm(&self) -> f64 {
        self.imbalance.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `Pn ω(1−D)`; 1 at any optimum.
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `Pn[(1−D)exp(θ̂) − D]`.
    pub intercept_residual: f64,
    /// `Pn[(1−D)exp(θ̂) − D]φ_j + (π̄ζ²/n)β_j`.
    pub feature_residuals: Vec<f64>,
}

impl KktReport {
    pub fn max_abs(&self) -> f64 {
        self.feature_residuals
            .iter()
            .fold(self.intercept_residual.abs(), |m, r| m.max(r.abs()))
    }
}

fn group_multipliers(treated: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let control = treated.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
    let treat = treated.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
    (control, treat)
}

fn check_design(n_rows: usize, treated: &[bool], zeta: f64) -> Result<f64> {
    if treated.len() != n_rows {
        return Err(Error::Shape(format!("{n_rows} feature rows, {} treatment flags", treated.len())));
    }
    if !(zeta >= 0.0 && zeta.is_finite()) {
        return Err(Error::Range(format!("zeta = {zeta} must be finite and ≥ 0")));
    }
    let n1 = treated.iter().filter(|&&d| d).count();
    if n1 == 0 {
        return Err(Error::EmptyCohort("no treated units".into()));
    }
    if n1 == n_rows {
        return Err(Error::EmptyCohort("no control units".into()));
    }
    Ok(n1 as f64 / n_rows as f64)
}

/// Weights, imbalance and the sup-norm gradient for given dual coefficients.
pub(crate) fn assemble_solution(
    features: &DMatrix<f64>,
    treated: &[bool],
    zeta: f64,
    alpha: f64,
    beta: &[f64],
) -> BalanceSolution {
    let n = features.nrows();
    let pi_bar = treated.iter().filter(|&&d| d).count() as f64 / n as f64;
    let beta_v = DVector::from_column_slice(beta);
    let index = features * &beta_v;
    let weights: Vec<f64> = (0..n)
        .map(|i| if treated[i] { 0.0 } else { (alpha + index[i]).exp() / pi_bar })
        .collect();
    let p = features.ncols();
    let imbalance: Vec<f64> = (0..p)
        .map(|j| {
            let col = features.column(j);
            (0..n)
                .map(|i| if treated[i] { -col[i] / pi_bar } else { weights[i] * col[i] })
                .sum::<f64>()
                / n as f64
        })
        .collect();
    let mut solution = BalanceSolution {
        alpha,
        beta: beta.to_vec(),
        weights,
        imbalance,
        zeta,
        kkt_residual: 0.0,
        iterations: 0,
        converged: false,
        hessian_regularized: false,
    };
    solution.kkt_residual = kkt_from_matrix(&solution, features, treated).max_abs();
    solution
}

fn kkt_from_matrix(solution: &BalanceSolution, features: &DMatrix<f64>, treated: &[bool]) -> KktReport {
    let n = features.nrows();
    let nf = n as f64;
    let pi_bar = treated.iter().filter(|&&d| d).count() as f64 / nf;
    let beta = DVector::from_column_slice(&solution.beta);
    let theta = features * &beta;
    let resid: Vec<f64> = (0..n)
        .map(|i| if treated[i] { -1.0 } else { (solution.alpha + theta[i]).exp() })
        .collect();
    let intercept_residual = resid.iter().sum::<f64>() / nf;
    let ridge = pi_bar * solution.zeta * solution.zeta / nf;
    let feature_residuals = (0..features.ncols())
        .map(|j| {
            let col = features.column(j);
            resid.iter().zip(col.iter()).map(|(r, x)| r * x).sum::<f64>() / nf + ridge * solution.beta[j]
        })
        .collect();
    KktReport { intercept_residual, feature_residuals }
}

/// Solve the balancing dual on a raw `n × p` matrix; `p = 0` fits the intercept only.
pub fn solve_dual_matrix(
    features: &DMatrix<f64>,
    treated: &[bool],
    zeta: f64,
    opts: &SolverOptions,
) -> Result<BalanceSolution> {
    let pi_bar = check_design(features.nrows(), treated, zeta)?;
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("features must be finite".into()));
    }
    let n = features.nrows() as f64;
    let p = features.ncols();
    let (control, treat) = group_multipliers(treated);
    let penalized = vec![true; p];
    let objective = TiltObjective {
        design: features,
        exp_mult: &control,
        lin_mult: &treat,
        ridge: pi_bar * zeta * zeta / n,
        penalized: &penalized,
    };
    let mut start = DVector::zeros(p + 1);
    start[0] = (pi_bar / (1.0 - pi_bar)).ln();
    let fit = objective.minimize(start, opts.tol, opts.max_iter)?;

    let beta: Vec<f64> = fit.coef.iter().skip(1).copied().collect();
    let mut solution = assemble_solution(features, treated, zeta, fit.coef[0], &beta);
    solution.kkt_residual = fit.grad_sup;
    solution.iterations = fit.iterations;
    solution.converged = fit.converged;
    solution.hessian_regularized = fit.regularized;
    if !fit.converged {
        return Err(Error::Convergence {
            iterations: fit.iterations,
            residual: fit.grad_sup,
            best: Some(Box::new(solution)),
        });
    }
    Ok(solution)
}

/// Fit synthetic control weights for the given features.
pub fn solve_dual(
    features: &FeatureMatrix,
    treated: &[bool],
    zeta: f64,
    opts: &SolverOptions,
) -> Result<BalanceSolution> {
    solve_dual_matrix(features.values(), treated, zeta, opts)
}

/// Value of the balancing dual at `(α, β)`; `+∞` outside the exponent guard.
pub fn dual_objective(features: &DMatrix<f64>, treated: &[bool], zeta: f64, alpha: f64, beta: &[f64]) -> Result<f64> {
    let pi_bar = check_design(features.nrows(), treated, zeta)?;
    if beta.len() != features.ncols() {
        return Err(Error::Shape(format!("{} coefficients for {} features", beta.len(), features.ncols())));
    }
    let (control, treat) = group_multipliers(treated);
    let penalized = vec![true; beta.len()];
    let objective = TiltObjective {
        design: features,
        exp_mult: &control,
        lin_mult: &treat,
        ridge: pi_bar * zeta * zeta / features.nrows() as f64,
        penalized: &penalized,
    };
    let mut coef = DVector::zeros(beta.len() + 1);
    coef[0] = alpha;
    coef.rows_mut(1, beta.len()).copy_from_slice(beta);
    Ok(objective.value(&coef))
}

/// First-order conditions of the dual, recomputed from `(α, β)`.
pub fn kkt_report(solution: &BalanceSolution, features: &FeatureMatrix, treated: &[bool]) -> Result<KktReport> {
    if features.p() != solution.beta.len() || features.n() != treated.len() {
        return Err(Error::Shape(format!(
            "solution has {} coefficients, features are {}×{}, {} flags",
            solution.beta.len(),
            features.n(),
            features.p(),
            treated.len()
        )));
    }
    Ok(kkt_from_matrix(solution, features.values(), treated))
}

/// Weights `n/n0` on controls: the uniform (difference-in-means) comparison.
pub fn uniform_weights(treated: &[bool]) -> Vec<f64> {
    let n = treated.len() as f64;
    let n0 = treated.iter().filter(|&&d| !d).count() as f64;
    treated.iter().map(|&d| if d { 0.0 } else { n / n0 }).collect()
}
