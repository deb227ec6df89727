//! Damped Newton for exponential-tilting objectives
//!
//! ```text
//! G(α, β) = Pn[a_i exp(α + x_i'β)] − Pn[b_i (α + x_i'β)] + (c/2) Σ_{j penalized} β_j²
//! ```
//!
//! With `a = 1 − D`, `b = D` and `c = π̄ζ²/n` this is the balancing dual; with
//! `a = 1 − π`, `b = π` it is the population ℓ-loss projection of the log-odds.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest admissible |α + x'β| at an accepted iterate.
pub const EXPONENT_LIMIT: f64 = 700.0;

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;
/// Newton decrement below which the full step is taken without a line search;
/// objective differences at this scale are below f64 resolution.
const QUADRATIC_REGION: f64 = 1e-14;
/// Rows per block of the derivative accumulation.
const BLOCK_ROWS: usize = 8192;

pub(crate) struct TiltObjective<'a> {
    /// `n × q` regressors, intercept excluded.
    pub design: &'a DMatrix<f64>,
    pub exp_mult: &'a [f64],
    pub lin_mult: &'a [f64],
    pub ridge: f64,
    /// Per regressor; unpenalized columns carry no ridge.
    pub penalized: &'a [bool],
}

#[derive(Debug, Clone)]
pub(crate) struct TiltFit {
    /// `(α, β_1..β_q)`.
    pub coef: DVector<f64>,
    pub grad_sup: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cholesky needed the fallback ridge at some iteration.
    pub regularized: bool,
}

impl TiltObjective<'_> {
    fn n(&self) -> usize {
        self.design.nrows()
    }

    /// Linear index `α + Xβ`.
    pub fn index(&self, coef: &DVector<f64>) -> DVector<f64> {
        let q = self.design.ncols();
        let mut s = if q > 0 {
            self.design * coef.rows(1, q)
        } else {
            DVector::zeros(self.n())
        };
        s.add_scalar_mut(coef[0]);
        s
    }

    fn penalty(&self, coef: &DVector<f64>) -> f64 {
        self.penalized
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(|(j, _)| coef[j + 1].powi(2))
            .sum::<f64>()
            * self.ridge
            / 2.0
    }

    /// Objective value; `+∞` when the index leaves the exponent guard.
    pub fn value(&self, coef: &DVector<f64>) -> f64 {
        let s = self.index(coef);
        if s.iter().any(|v| v.abs() > EXPONENT_LIMIT || !v.is_finite()) {
            return f64::INFINITY;
        }
        let n = self.n() as f64;
        let sum: f64 = s
            .iter()
            .zip(self.exp_mult.iter().zip(self.lin_mult))
            .map(|(&si, (&a, &b))| a * si.exp() - b * si)
            .sum();
        sum / n + self.penalty(coef)
    }

    /// Unscaled gradient and Hessian sums over rows `start..start+len`.
    fn block_sums(&self, s: &DVector<f64>, start: usize, len: usize) -> (DVector<f64>, DMatrix<f64>) {
        let q = self.design.ncols();
        let rows = self.design.rows(start, len);
        let tilt = DVector::from_iterator(
            len,
            (start..start + len).map(|i| self.exp_mult[i] * s[i].exp()),
        );
        let resid = DVector::from_iterator(len, (0..len).map(|k| tilt[k] - self.lin_mult[start + k]));

        let mut grad = DVector::zeros(q + 1);
        grad[0] = resid.sum();
        let mut hess = DMatrix::zeros(q + 1, q + 1);
        hess[(0, 0)] = tilt.sum();
        if q > 0 {
            grad.rows_mut(1, q).copy_from(&rows.tr_mul(&resid));
            let cross = rows.tr_mul(&tilt);
            let mut scaled = rows.into_owned();
            for mut col in scaled.column_iter_mut() {
                col.component_mul_assign(&tilt);
            }
            hess.view_mut((1, 1), (q, q)).copy_from(&rows.tr_mul(&scaled));
            hess.view_mut((1, 0), (q, 1)).copy_from(&cross);
            hess.view_mut((0, 1), (1, q)).copy_from(&cross.transpose());
        }
        (grad, hess)
    }

    /// Gradient and Hessian at `coef`, given its index `s`. Large designs are
    /// accumulated over fixed row blocks in parallel and summed in block
    /// order, so the result does not depend on the thread count.
    fn derivatives(&self, coef: &DVector<f64>, s: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n();
        let q = self.design.ncols();
        let blocks: Vec<(usize, usize)> =
            (0..n).step_by(BLOCK_ROWS).map(|start| (start, BLOCK_ROWS.min(n - start))).collect();
        let parts: Vec<(DVector<f64>, DMatrix<f64>)> = if blocks.len() > 1 {
            blocks.par_iter().map(|&(start, len)| self.block_sums(s, start, len)).collect()
        } else {
            blocks.iter().map(|&(start, len)| self.block_sums(s, start, len)).collect()
        };
        let mut grad = DVector::zeros(q + 1);
        let mut hess = DMatrix::zeros(q + 1, q + 1);
        for (g, h) in parts {
            grad += g;
            hess += h;
        }
        let inv_n = 1.0 / n as f64;
        grad *= inv_n;
        hess *= inv_n;
        for j in 0..q {
            if self.penalized[j] {
                grad[j + 1] += self.ridge * coef[j + 1];
                hess[(j + 1, j + 1)] += self.ridge;
            }
        }
        (grad, hess)
    }

    #[cfg(test)]
    pub fn gradient(&self, coef: &DVector<f64>) -> DVector<f64> {
        let s = self.index(coef);
        self.derivatives(coef, &s).0
    }

    pub fn minimize(&self, start: DVector<f64>, tol: f64, max_iter: usize) -> Result<TiltFit> {
        let mut coef = start;
        let mut value = self.value(&coef);
        if !value.is_finite() {
            return Err(Error::Overflow(self.index(&coef).amax()));
        }
        let mut best = TiltFit {
            coef: coef.clone(),
            grad_sup: f64::INFINITY,
            iterations: 0,
            converged: false,
            regularized: false,
        };
        let mut regularized = false;
        // Largest index of a trial point rejected by the exponent guard.
        let mut overflow_seen: Option<f64> = None;

        for iter in 0..=max_iter {
            let s = self.index(&coef);
            let (grad, hess) = self.derivatives(&coef, &s);
            let grad_sup = grad.amax();
            if grad_sup < best.grad_sup {
                best = TiltFit {
                    coef: coef.clone(),
                    grad_sup,
                    iterations: iter,
                    converged: false,
                    regularized,
                };
            }
            if grad_sup <= tol {
                best.converged = true;
                best.iterations = iter;
                best.regularized = regularized;
                return Ok(best);
            }
            if iter == max_iter {
                break;
            }

            let (step, used_ridge) = newton_direction(&hess, &grad);
            regularized |= used_ridge;
            let slope = grad.dot(&step);
            if slope >= 0.0 {
                // Direction lost descent to rounding; nothing left to gain.
                break;
            }

            if -slope < QUADRATIC_REGION {
                let trial = &coef + &step;
                let v = self.value(&trial);
                if v.is_finite() {
                    coef = trial;
                    value = v;
                    continue;
                }
            }

            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACKS {
                let trial = &coef + &step * t;
                let v = self.value(&trial);
                if v == f64::INFINITY {
                    overflow_seen = Some(self.index(&trial).amax());
                }
                if v <= value + ARMIJO_C * t * slope {
                    coef = trial;
                    value = v;
                    accepted = true;
                    break;
                }
                t *= BACKTRACK;
            }
            if !accepted {
                break;
            }
        }

        if let Some(magnitude) = overflow_seen {
            return Err(Error::Overflow(magnitude));
        }
        best.regularized = regularized;
        Ok(best)
    }
}

/// Solve `H d = −g`, adding `1e-10·trace(H)·I` (growing tenfold) when Cholesky fails.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> (DVector<f64>, bool) {
    if let Some(chol) = hess.clone().cholesky() {
        return (-chol.solve(grad), false);
    }
    let trace = hess.trace().max(f64::MIN_POSITIVE);
    let mut lambda = 1e-10 * trace;
    loop {
        let mut h = hess.clone();
        for j in 0..h.nrows() {
            h[(j, j)] += lambda;
        }
        if let Some(chol) = h.cholesky() {
            return (-chol.solve(grad), true);
        }
        lambda *= 10.0;
    }
}
