//! Theoretical objects computed numerically: the effective number of
//! periods `T_e`, the population projections θ̃, θ̃^μ, μ̃ behind the bias
//! term, and the first-order noise terms of the estimator expansion.
//!
//! Population objects are expectations; they are realized on a large
//! simulated population with ℓ(x) = e^{−x} + x − 1 as loss, which after
//! multiplying by π becomes the exponential-tilting objective with
//! multipliers `1 − π` and `π`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balancer::TiltObjective;
use crate::dgp::{factor_design, simulate, DgpKind, DgpSpec, LogOdds, SimulatedPanel};
use crate::error::{Error, Result};
use crate::features::FeatureRecipe;
use crate::stats::{mean, sd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeMethod {
    ClosedFormTwoWay,
    SvdBound,
    MonteCarloProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectivePeriods {
    pub t_e: f64,
    /// `min_f ‖f − μ‖²` (or its bound) `= 1 / T_e`.
    pub approx_error2: f64,
    pub method: TeMethod,
}

impl EffectivePeriods {
    fn from_error(approx_error2: f64, method: TeMethod) -> Self {
        let t_e = if approx_error2 > 0.0 { 1.0 / approx_error2 } else { f64::INFINITY };
        Self { t_e, approx_error2, method }
    }
}

/// Two-way model with iid shocks: `1/T_e = σ²V[η] / (V[η]·T0 + σ²)`.
pub fn effective_periods_two_way(v_eta: f64, sigma2: f64, t0: usize) -> Result<EffectivePeriods> {
    if !(v_eta >= 0.0) || !(sigma2 >= 0.0) || t0 == 0 {
        return Err(Error::Range(format!("V[η] = {v_eta}, σ² = {sigma2}, t0 = {t0}")));
    }
    let denom = v_eta * t0 as f64 + sigma2;
    let err = if denom > 0.0 { sigma2 * v_eta / denom } else { 0.0 };
    Ok(EffectivePeriods::from_error(err, TeMethod::ClosedFormTwoWay))
}

/// Ridge bound `σ²·Σ_j ξ_j²/(d_j² + σ²)` with `ξ = U'ψ_next`, plus the part of
/// `ψ_next` outside the column space of `Ψ`, which no combination explains.
pub fn effective_periods_svd(psi: &DMatrix<f64>, psi_next: &DVector<f64>, sigma_op: f64) -> Result<EffectivePeriods> {
    if psi.nrows() != psi_next.len() {
        return Err(Error::Shape(format!("Ψ has {} rows, ψ_next has {}", psi.nrows(), psi_next.len())));
    }
    if !(sigma_op >= 0.0) {
        return Err(Error::Range(format!("‖Σ‖_op = {sigma_op}")));
    }
    let total = psi_next.norm_squared();
    if psi.ncols() == 0 || psi.iter().all(|v| *v == 0.0) {
        return Ok(EffectivePeriods::from_error(total, TeMethod::SvdBound));
    }
    let svd = psi.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let top = svd.singular_values.max();
    let mut explained = 0.0;
    let mut err = 0.0;
    for (j, &d) in svd.singular_values.iter().enumerate() {
        if d <= top * 1e-13 {
            continue;
        }
        let xi = u.column(j).dot(psi_next);
        explained += xi * xi;
        let denom = d * d + sigma_op;
        err += sigma_op * xi * xi / denom;
    }
    err += (total - explained).max(0.0);
    Ok(EffectivePeriods::from_error(err, TeMethod::SvdBound))
}

/// Largest eigenvalue of the `t × t` stationary AR(1) covariance.
pub fn ar1_operator_norm(sigma2_innov: f64, rho: f64, t: usize) -> f64 {
    let var = sigma2_innov / (1.0 - rho * rho);
    let cov = DMatrix::from_fn(t, t, |i, j| var * rho.powi((i as i32 - j as i32).abs()));
    cov.symmetric_eigen().eigenvalues.max()
}

/// Growing number of factors (`d = T0`, `σ²(j) = T0·j^{−κ}`): the SVD bound
/// for a freshly drawn factor design.
pub fn growing_factor_effective_periods(t0: usize, kappa: f64, sigma_op: f64, seed: u64) -> Result<EffectivePeriods> {
    let spec = DgpSpec { kind: DgpKind::InteractiveFE, t0, f_dim: t0, kappa, ..DgpSpec::default() };
    let design = factor_design(&spec, seed)?;
    let pre = design.psi.columns(0, t0).into_owned();
    let next = design.psi.column(t0).into_owned();
    effective_periods_svd(&pre, &next, sigma_op)
}

/// Least squares `y ~ [1, X]` with optional weights; returns `(α, β)`.
fn weighted_least_squares(x: &DMatrix<f64>, y: &[f64], w: Option<&[f64]>) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    let mut design = DMatrix::from_element(n, p + 1, 1.0);
    design.columns_mut(1, p).copy_from(x);
    let yv = DVector::from_column_slice(y);
    let (gram, rhs) = match w {
        None => (design.tr_mul(&design), design.tr_mul(&yv)),
        Some(w) => {
            let wv = DVector::from_column_slice(w);
            let mut scaled = design.clone();
            for mut col in scaled.column_iter_mut() {
                col.component_mul_assign(&wv);
            }
            (design.tr_mul(&scaled), scaled.tr_mul(&yv))
        }
    };
    gram.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Rank("projection design is rank deficient".into()))
}

/// `min_f E(f − μ)²` over `span{1, Y_1..Y_t0}` on a simulated population.
pub fn effective_periods_projection(sim: &SimulatedPanel) -> Result<EffectivePeriods> {
    let x = sim.panel.pre_block();
    let coef = weighted_least_squares(&x, &sim.latent.mu, None)?;
    let fitted = fitted_values(&x, &coef);
    let err = mean(&fitted.iter().zip(&sim.latent.mu).map(|(f, m)| (m - f).powi(2)).collect::<Vec<_>>());
    Ok(EffectivePeriods::from_error(err, TeMethod::MonteCarloProjection))
}

fn fitted_values(x: &DMatrix<f64>, coef: &DVector<f64>) -> Vec<f64> {
    let p = x.ncols();
    let mut s = x * coef.rows(1, p);
    s.add_scalar_mut(coef[0]);
    s.iter().copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UMoments {
    pub mean: f64,
    pub sd: f64,
    pub mean_abs: f64,
    /// Mean of `π·|u|/E[π]`, the weighting that enters the noise terms.
    pub weighted_mean_abs: f64,
}

/// Population projections fitted on a simulated population.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationFit {
    /// `(α, β)` of θ̃ over `span{1, F}`.
    pub theta_tilde: Vec<f64>,
    /// `(α, β, β_μ)` of θ̃^μ over `span{1, F, μ}`.
    pub theta_tilde_mu: Vec<f64>,
    pub beta_mu: f64,
    /// `(α, β)` of μ̃ over `span{1, F}`.
    pub mu_tilde: Vec<f64>,
    pub u_moments: UMoments,
    pub bias: f64,
    pub sample_size: usize,
    pub pi_mean: f64,
    pub zeta: f64,
    pub n_experiment: usize,
    pub recipe: FeatureRecipe,
    pub centers: Vec<f64>,
    pub scales: Vec<f64>,
    /// Largest first-order-condition residual over the three fits.
    pub foc_residual: f64,
    pub log_odds: LogOdds,
}

/// Values of θ̃, θ̃^μ and μ̃ on a panel's units.
#[derive(Debug, Clone)]
pub struct Projections {
    pub theta_tilde: Vec<f64>,
    pub theta_tilde_mu: Vec<f64>,
    pub mu_tilde: Vec<f64>,
}

impl PopulationFit {
    fn features(&self, sim: &SimulatedPanel) -> Result<DMatrix<f64>> {
        let raw = FeatureRecipe { standardize: false, ..self.recipe.clone() }.build(&sim.panel)?;
        let mut x = raw.values().clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.centers[j]);
            col /= self.scales[j];
        }
        Ok(x)
    }

    pub fn evaluate(&self, sim: &SimulatedPanel) -> Result<Projections> {
        let x = self.features(sim)?;
        if x.ncols() + 1 != self.theta_tilde.len() {
            return Err(Error::Shape(format!(
                "fit has {} coefficients, panel gives {} features",
                self.theta_tilde.len() - 1,
                x.ncols()
            )));
        }
        let theta_tilde = fitted_values(&x, &DVector::from_column_slice(&self.theta_tilde));
        let p = x.ncols();
        let base = fitted_values(&x, &DVector::from_column_slice(&self.theta_tilde_mu[..=p]));
        let theta_tilde_mu = base.iter().zip(&sim.latent.mu).map(|(b, m)| b + self.beta_mu * m).collect();
        let mu_tilde = fitted_values(&x, &DVector::from_column_slice(&self.mu_tilde));
        Ok(Projections { theta_tilde, theta_tilde_mu, mu_tilde })
    }
}

/// `Pn π e^{θ̃^μ−θ}/E[π] · (θ̃ − θ̃^μ)(μ − μ̃)`.
/// Signed so that it enters `τ̂ − τ` with a plus: the control-minus-treated
/// gap carries `(θ̃ − θ̃^μ)`, the estimator error the opposite.
fn bias_average(sim: &SimulatedPanel, proj: &Projections, pi_mean: f64) -> f64 {
    let l = &sim.latent;
    let terms: Vec<f64> = (0..sim.panel.n())
        .map(|i| {
            let tilt = l.pi[i] * (proj.theta_tilde_mu[i] - l.theta[i]).exp() / pi_mean;
            tilt * (proj.theta_tilde_mu[i] - proj.theta_tilde[i]) * (l.mu[i] - proj.mu_tilde[i])
        })
        .collect();
    mean(&terms)
}

fn tilt_fit(
    design: &DMatrix<f64>,
    exp_mult: &[f64],
    lin_mult: &[f64],
    ridge: f64,
    penalized: &[bool],
) -> Result<(DVector<f64>, f64)> {
    let objective = TiltObjective { design, exp_mult, lin_mult, ridge, penalized };
    let total_a: f64 = exp_mult.iter().sum();
    let total_b: f64 = lin_mult.iter().sum();
    let mut start = DVector::zeros(design.ncols() + 1);
    start[0] = (total_b / total_a).ln();
    let fit = objective.minimize(start, 1e-10, 200)?;
    if !fit.converged {
        return Err(Error::Convergence { iterations: fit.iterations, residual: fit.grad_sup, best: None });
    }
    Ok((fit.coef, fit.grad_sup))
}

/// Fit θ̃, θ̃^μ and μ̃ on a population of `population_n` units drawn from `spec`.
///
/// The ridge on feature coefficients is `E[π]ζ²/n_experiment`: the
/// penalty belongs to the experiment the objects describe, not to the
/// simulated population.
pub fn fit_population_objects(
    spec: &DgpSpec,
    recipe: &FeatureRecipe,
    zeta: f64,
    n_experiment: usize,
    population_n: usize,
    seed: u64,
) -> Result<PopulationFit> {
    if n_experiment == 0 || !(zeta >= 0.0) {
        return Err(Error::Range(format!("ζ = {zeta}, n = {n_experiment}")));
    }
    let sim = simulate(&DgpSpec { n: population_n, ..spec.clone() }, seed)?;
    let raw = FeatureRecipe { standardize: false, ..recipe.clone() }.build(&sim.panel)?;
    let p = raw.p();
    let (centers, scales) = if recipe.standardize {
        let s = raw.standardize();
        (s.centers().to_vec(), s.scales().to_vec())
    } else {
        (vec![0.0; p], vec![1.0; p])
    };
    let mut x = raw.values().clone();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        col.add_scalar_mut(-centers[j]);
        col /= scales[j];
    }

    let pi = &sim.latent.pi;
    let one_minus: Vec<f64> = pi.iter().map(|p| 1.0 - p).collect();
    let pi_mean = mean(pi);
    let ridge = pi_mean * zeta * zeta / n_experiment as f64;

    let (theta_tilde, g1) = tilt_fit(&x, &one_minus, pi, ridge, &vec![true; p])?;

    let mut with_mu = DMatrix::zeros(population_n, p + 1);
    with_mu.columns_mut(0, p).copy_from(&x);
    with_mu.set_column(p, &DVector::from_column_slice(&sim.latent.mu));
    let mut penalized = vec![true; p];
    penalized.push(false);
    let (theta_tilde_mu, g2) = tilt_fit(&with_mu, &one_minus, pi, ridge, &penalized)?;
    let beta_mu = theta_tilde_mu[p + 1];
    if !beta_mu.is_finite() {
        return Err(Error::Convergence { iterations: 0, residual: f64::NAN, best: None });
    }

    let index_mu = fitted_values(&with_mu, &theta_tilde_mu);
    let tilt: Vec<f64> = (0..population_n).map(|i| pi[i] * (index_mu[i] - sim.latent.theta[i]).exp()).collect();
    let mu_tilde = weighted_least_squares(&x, &sim.latent.mu, Some(&tilt))?;

    let mu_fit = fitted_values(&x, &mu_tilde);
    let mut g3: f64 = 0.0;
    for j in 0..=p {
        let v: f64 = (0..population_n)
            .map(|i| {
                let xj = if j == 0 { 1.0 } else { x[(i, j - 1)] };
                tilt[i] * (sim.latent.mu[i] - mu_fit[i]) * xj
            })
            .sum::<f64>()
            / population_n as f64;
        g3 = g3.max(v.abs());
    }

    let mut fit = PopulationFit {
        theta_tilde: theta_tilde.iter().copied().collect(),
        theta_tilde_mu: theta_tilde_mu.iter().copied().collect(),
        beta_mu,
        mu_tilde: mu_tilde.iter().copied().collect(),
        u_moments: UMoments { mean: 0.0, sd: 0.0, mean_abs: 0.0, weighted_mean_abs: 0.0 },
        bias: 0.0,
        sample_size: population_n,
        pi_mean,
        zeta,
        n_experiment,
        recipe: recipe.clone(),
        centers,
        scales,
        foc_residual: g1.max(g2).max(g3),
        log_odds: spec.log_odds,
    };
    let proj = fit.evaluate(&sim)?;
    let u = u_values(&sim, &proj);
    fit.u_moments = UMoments {
        mean: mean(&u),
        sd: sd(&u),
        mean_abs: mean(&u.iter().map(|v| v.abs()).collect::<Vec<_>>()),
        weighted_mean_abs: mean(&u.iter().zip(pi).map(|(v, p)| p * v.abs() / pi_mean).collect::<Vec<_>>()),
    };
    fit.bias = bias_average(&sim, &proj, pi_mean);
    Ok(fit)
}

fn u_values(sim: &SimulatedPanel, proj: &Projections) -> Vec<f64> {
    proj.theta_tilde_mu.iter().zip(&sim.latent.theta).map(|(a, t)| (a - t).exp() - 1.0).collect()
}

/// The bias term averaged over the units of a realized sample.
pub fn sample_bias(sim: &SimulatedPanel, fit: &PopulationFit) -> Result<f64> {
    let proj = fit.evaluate(sim)?;
    Ok(bias_average(sim, &proj, fit.pi_mean))
}

/// `(Pn (D−π)/(1−π)·(πu+1)/E[π]·ε, −Pn πu/E[π]·ε)` with `ε = Y_{t0+1}(0) − μ`,
/// so that `τ̂ − τ ≈ bias + first + second`.
pub fn oracle_noise_terms(sim: &SimulatedPanel, fit: &PopulationFit) -> Result<(f64, f64)> {
    let proj = fit.evaluate(sim)?;
    let u = u_values(sim, &proj);
    let l = &sim.latent;
    let n = sim.panel.n() as f64;
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..sim.panel.n() {
        let eps = l.y0_post[(i, 0)] - l.mu[i];
        let d = if sim.panel.treated()[i] { 1.0 } else { 0.0 };
        let pu = l.pi[i] * u[i];
        first += (d - l.pi[i]) / (1.0 - l.pi[i]) * (pu + 1.0) / fit.pi_mean * eps;
        second -= pu / fit.pi_mean * eps;
    }
    Ok((first / n, second / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `min_c ‖b − Ψc‖² + σ²‖c‖²` by a dense solve.
    fn ridge_value(psi: &DMatrix<f64>, b: &DVector<f64>, sigma2: f64) -> f64 {
        let m = psi.ncols();
        let gram = psi.tr_mul(psi) + DMatrix::identity(m, m) * sigma2;
        let c = gram.cholesky().unwrap().solve(&psi.tr_mul(b));
        (b - psi * &c).norm_squared() + sigma2 * c.norm_squared()
    }

    #[test]
    fn two_way_closed_form() {
        let te = effective_periods_two_way(1.0, 1.0, 8).unwrap();
        assert!((te.approx_error2 - 1.0 / 9.0).abs() < 1e-15);
        assert!((te.t_e - 9.0).abs() < 1e-12);
        assert!(effective_periods_two_way(1.0, 0.0, 8).unwrap().t_e.is_infinite());
        assert_eq!(effective_periods_two_way(0.0, 1.0, 8).unwrap().approx_error2, 0.0);
    }

    #[test]
    fn svd_bound_matches_dense_ridge() {
        let psi = DMatrix::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 * 1.3).sin());
        let b = DVector::from_vec(vec![0.4, -1.0, 0.7]);
        for sigma2 in [0.1, 1.0, 3.0] {
            let te = effective_periods_svd(&psi, &b, sigma2).unwrap();
            assert!((te.approx_error2 - ridge_value(&psi, &b, sigma2)).abs() < 1e-10);
        }
        // more factors than periods: part of ψ_next is unexplained
        let tall = DMatrix::from_fn(4, 2, |i, j| ((i + 3 * j) as f64).cos());
        let b = DVector::from_vec(vec![1.0, 0.5, -0.3, 0.2]);
        let te = effective_periods_svd(&tall, &b, 0.5).unwrap();
        assert!((te.approx_error2 - ridge_value(&tall, &b, 0.5)).abs() < 1e-10);
    }

    #[test]
    fn svd_bound_special_cases() {
        let exact = effective_periods_svd(&DMatrix::from_element(1, 1, 1.0), &DVector::from_element(1, 1.0), 0.0).unwrap();
        assert_eq!(exact.approx_error2, 0.0);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let none = effective_periods_svd(&DMatrix::zeros(2, 3), &b, 1.0).unwrap();
        assert_eq!(none.approx_error2, 5.0);
        let psi = DMatrix::from_element(1, 7, 1.5);
        let rank1 = effective_periods_svd(&psi, &DVector::from_element(1, 1.5), 0.8).unwrap();
        let expected = 0.8 * 2.25 / (2.25 * 7.0 + 0.8);
        assert!((rank1.approx_error2 - expected).abs() < 1e-12);
    }

    #[test]
    fn weak_factor_keeps_t_e_bounded() {
        // second factor is switched on only in the last pretreatment period
        let t0 = 40;
        let psi = DMatrix::from_fn(2, t0, |i, t| if i == 0 { 1.0 } else if t == t0 - 1 { 1.0 } else { 0.0 });
        let next = DVector::from_vec(vec![1.0, 1.0]);
        let sigma2 = 1.0;
        let te = effective_periods_svd(&psi, &next, sigma2).unwrap();
        assert!(te.approx_error2 >= sigma2 / (1.0 + sigma2) - 1e-12);
    }

    #[test]
    fn projection_matches_closed_form_for_iid_shocks() {
        let spec = DgpSpec { n: 100_000, rho: 0.0, t0: 6, ..DgpSpec::default() };
        let sim = simulate(&spec, 4).unwrap();
        let mc = effective_periods_projection(&sim).unwrap();
        let cf = effective_periods_two_way(1.0, 1.0, 6).unwrap();
        assert!((mc.approx_error2 / cf.approx_error2 - 1.0).abs() < 0.03, "{mc:?}");
    }

    #[test]
    fn ar1_norm_of_white_noise_is_its_variance() {
        assert!((ar1_operator_norm(2.0, 0.0, 5) - 2.0).abs() < 1e-12);
        // bounded by the spectral density peak σ²/(1−ρ)²
        let norm = ar1_operator_norm(1.0, 0.5, 50);
        assert!(norm < 4.0 && norm > 3.9, "{norm}");
    }

    #[test]
    fn constant_log_odds_gives_zero_bias() {
        // θ independent of everything in the panel: the constant is in the span
        let spec = DgpSpec {
            beta_ar_t0: 0.0,
            beta_ar_t0m1: 0.0,
            sigma_eta2: 1.0,
            sigma_nu2: 1e-12,
            ..DgpSpec::default()
        };
        let mut spec = spec;
        spec.kind = DgpKind::TwoWayRW;
        spec.beta_rw_t0 = 0.0;
        let fit = fit_population_objects(&spec, &FeatureRecipe::lags(), 1.0, 400, 20_000, 2).unwrap();
        assert!(fit.bias.abs() < 1e-8, "bias {}", fit.bias);
        assert!(fit.theta_tilde.iter().skip(1).all(|b| b.abs() < 1e-6));
        assert!(fit.beta_mu.abs() < 1e-6);
    }

    #[test]
    fn population_fit_satisfies_its_conditions() {
        let fit = fit_population_objects(&DgpSpec::default(), &FeatureRecipe::lags(), 1.0, 400, 30_000, 8).unwrap();
        assert!(fit.foc_residual < 1e-6, "foc {}", fit.foc_residual);
        assert!(fit.beta_mu.is_finite());
    }

    #[test]
    fn noise_terms_vanish_without_shocks() {
        let spec = DgpSpec { n: 300, ..DgpSpec::default() };
        let fit = fit_population_objects(&spec, &FeatureRecipe::lags(), 1.0, 300, 20_000, 1).unwrap();
        let mut sim = simulate(&spec, 77).unwrap();
        for i in 0..sim.panel.n() {
            sim.latent.y0_post[(i, 0)] = sim.latent.mu[i];
        }
        assert_eq!(oracle_noise_terms(&sim, &fit).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn bias_tracks_the_weighted_gap_in_mu() {
        // θ̃ tilts controls toward the treated; what it misses of μ is
        // E[π(1 − e^{θ̃−θ})μ]/E[π], which the bias term linearizes
        let spec = DgpSpec { n: 40_000, ..DgpSpec::default() };
        let fit = fit_population_objects(&spec, &FeatureRecipe::lags(), 1.0, 400, 40_000, 3).unwrap();
        let sim = simulate(&spec, 12).unwrap();
        let proj = fit.evaluate(&sim).unwrap();
        let l = &sim.latent;
        let gap: Vec<f64> = (0..spec.n)
            .map(|i| l.pi[i] * (1.0 - (proj.theta_tilde[i] - l.theta[i]).exp()) * l.mu[i])
            .collect();
        let gap = mean(&gap) / mean(&l.pi);
        let bias = sample_bias(&sim, &fit).unwrap();
        assert!(bias > 0.0, "selection on high μ biases the estimate upward: {bias}");
        assert!((bias - gap).abs() < 0.25 * gap.abs(), "bias {bias} gap {gap}");
    }
}
