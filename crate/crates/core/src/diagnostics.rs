//! Balance and validity checks: the weighted gap in unit autocorrelation and
//! the placebo exercise that moves the adoption date two periods earlier.

use serde::{Deserialize, Serialize};

use crate::balancer::{uniform_weights, BalanceSolution, SolverOptions};
use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::estimators::{sc_estimate, twfe_event_study, weighted_contrast, EstimatorTag, EventStudyResult};
use crate::features::{unit_autocorrelation, FeatureRecipe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Uniform,
    Sc,
}

impl WeightKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightKind::Uniform => "uniform",
            WeightKind::Sc => "sc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceDiagnostic {
    /// Raw `Pn(D/π̄)ρ̂_i − Pn ω(1−D)ρ̂_i`; normalization happens across simulations.
    pub rho_hat: f64,
    pub weight_kind: WeightKind,
    /// Units whose pretreatment series has no variance (ρ̂_i set to 0).
    pub n_degenerate: usize,
}

/// Treated-minus-control gap in lag-1 autocorrelation over the pretreatment
/// periods, with uniform control weights or fitted ones.
pub fn autocorr_imbalance(data: &PanelDataset, weights: Option<&BalanceSolution>) -> Result<BalanceDiagnostic> {
    if data.t0() < 3 {
        return Err(Error::Range(format!("t0 = {} < 3 leaves no autocorrelation", data.t0())));
    }
    let rho = unit_autocorrelation(data, data.t0())?;
    let (omega, weight_kind) = match weights {
        Some(sol) => {
            if sol.weights.len() != data.n() {
                return Err(Error::Shape(format!("{} weights for {} units", sol.weights.len(), data.n())));
            }
            (sol.weights.clone(), WeightKind::Sc)
        }
        None => (uniform_weights(data.treated()), WeightKind::Uniform),
    };
    let values: Vec<f64> = rho.values().column(0).iter().copied().collect();
    Ok(BalanceDiagnostic {
        rho_hat: weighted_contrast(&values, data.treated(), &omega),
        weight_kind,
        n_degenerate: rho.degenerate_units(),
    })
}

/// Placebo paths for both estimators at the shifted horizons 0 and 1
/// (periods `t0 − 1` and `t0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboResult {
    pub sc: EventStudyResult,
    pub twfe: EventStudyResult,
    pub zeta: f64,
}

fn keep_placebo_horizons(mut es: EventStudyResult) -> EventStudyResult {
    let (horizons, tau): (Vec<i64>, Vec<f64>) =
        es.horizons.iter().zip(&es.tau).filter(|(k, _)| **k >= 0).map(|(k, t)| (*k, *t)).unzip();
    es.horizons = horizons;
    es.tau = tau;
    es.placebo = true;
    es
}

/// Pretend adoption happened at `t0 − 1`: fit on periods `1..=t0−2` and read
/// effects at `t0 − 1` and `t0`. Post-treatment periods are never used.
pub fn placebo_shift(
    data: &PanelDataset,
    recipe: &FeatureRecipe,
    zeta: f64,
    opts: &SolverOptions,
) -> Result<PlaceboResult> {
    let t0 = data.t0();
    if t0 < 4 {
        return Err(Error::Range(format!("t0 = {t0} < 4 is too short for a placebo shift")));
    }
    let shifted = data.truncate(t0, t0 - 2)?;
    let est = sc_estimate(&shifted, recipe, zeta, opts)?;
    let sc = keep_placebo_horizons(EventStudyResult {
        horizons: est.horizons,
        tau: est.tau_hat,
        estimator: EstimatorTag::Sc,
        normalization: format!("placebo adoption at period {}", t0 - 1),
        placebo: true,
    });
    let mut twfe = keep_placebo_horizons(twfe_event_study(&shifted)?);
    twfe.normalization = format!("placebo adoption at period {}; k = -1 omitted", t0 - 1);
    Ok(PlaceboResult { sc, twfe, zeta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn identical_groups_have_no_gap() {
        let y = DMatrix::from_fn(6, 7, |_, t| ((t * t) as f64 * 0.3).sin());
        let data = PanelDataset::from_matrix(y, vec![true, false, true, false, false, false], 5).unwrap();
        let d = autocorr_imbalance(&data, None).unwrap();
        assert!(d.rho_hat.abs() < 1e-12);
        assert_eq!(d.weight_kind, WeightKind::Uniform);
    }

    #[test]
    fn gap_uses_the_given_weights() {
        let y = DMatrix::from_row_slice(3, 5, &[
            1.0, 2.0, 3.0, 4.0, 0.0, //
            1.0, -1.0, 1.0, -1.0, 0.0, //
            1.0, 2.0, 1.0, 2.0, 0.0,
        ]);
        let data = PanelDataset::from_matrix(y, vec![true, false, false], 4).unwrap();
        let rho = |s: &[f64]| crate::features::lag1_autocorrelation(s).unwrap();
        let r = [rho(&[1.0, 2.0, 3.0, 4.0]), rho(&[1.0, -1.0, 1.0, -1.0]), rho(&[1.0, 2.0, 1.0, 2.0])];
        let uniform = autocorr_imbalance(&data, None).unwrap();
        assert!((uniform.rho_hat - (r[0] - (r[1] + r[2]) / 2.0)).abs() < 1e-12);
        let sol = BalanceSolution {
            alpha: 0.0,
            beta: vec![],
            weights: vec![0.0, 3.0, 0.0],
            imbalance: vec![],
            zeta: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
            converged: true,
            hessian_regularized: false,
        };
        let sc = autocorr_imbalance(&data, Some(&sol)).unwrap();
        assert!((sc.rho_hat - (r[0] - r[1])).abs() < 1e-12);
    }

    #[test]
    fn short_panels_are_rejected() {
        let y = DMatrix::from_fn(4, 3, |i, t| (i + t) as f64);
        let data = PanelDataset::from_matrix(y, vec![true, false, false, false], 2).unwrap();
        assert!(matches!(autocorr_imbalance(&data, None), Err(Error::Range(_))));
        let y = DMatrix::from_fn(4, 5, |i, t| (i * t) as f64);
        let data = PanelDataset::from_matrix(y, vec![true, false, false, false], 3).unwrap();
        assert!(matches!(
            placebo_shift(&data, &FeatureRecipe::lags(), 1.0, &SolverOptions::default()),
            Err(Error::Range(_))
        ));
    }

    fn noiseless(n: usize) -> PanelDataset {
        let treated: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let y = DMatrix::from_fn(n, 9, |i, t| (i as f64 * 0.77).sin() + (t as f64 * 0.4).cos());
        PanelDataset::from_matrix(y, treated, 6).unwrap()
    }

    #[test]
    fn noiseless_two_way_placebo_is_zero() {
        let data = noiseless(30);
        let res = placebo_shift(&data, &FeatureRecipe::lags(), 0.0, &SolverOptions::default()).unwrap();
        assert_eq!(res.sc.horizons, vec![0, 1]);
        assert!(res.sc.placebo && res.twfe.placebo);
        assert!(res.sc.tau.iter().all(|t| t.abs() < 1e-6), "{:?}", res.sc.tau);
        assert!(res.twfe.tau.iter().all(|t| t.abs() < 1e-8));
    }

    #[test]
    fn placebo_ignores_post_periods() {
        let data = noiseless(30);
        let mut y = data.outcomes().clone();
        for i in 0..30 {
            for t in 6..9 {
                y[(i, t)] += 100.0 * i as f64;
            }
        }
        let perturbed = data.with_outcomes(y).unwrap();
        let opts = SolverOptions::default();
        let a = placebo_shift(&data, &FeatureRecipe::lags(), 1.0, &opts).unwrap();
        let b = placebo_shift(&perturbed, &FeatureRecipe::lags(), 1.0, &opts).unwrap();
        assert_eq!(a, b);
    }
}
