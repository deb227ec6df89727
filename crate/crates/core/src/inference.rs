//! Uncertainty for the synthetic control effect: a unit-level bootstrap that
//! re-solves the weights in every replicate, and plug-in variances.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::balancer::SolverOptions;
use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::estimators::sc_estimate;
use crate::features::FeatureRecipe;
use crate::rng::stream_rng;
use crate::stats::{quantile_nearest_rank, sd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub b_boot: usize,
    pub level: f64,
    pub seed: u64,
    pub horizon: i64,
    /// Resample treated and control units separately, keeping n1 fixed.
    pub stratified: bool,
    /// Report `point ± z·se` instead of percentile endpoints.
    pub normal_ci: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { b_boot: 1000, level: 0.9, seed: 0, horizon: 0, stratified: false, normal_ci: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub horizon: i64,
    pub b_boot: usize,
    /// Replicates without treated or without control units.
    pub skipped: usize,
    /// Replicates whose weight fit failed.
    pub failed: usize,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

/// Share of unusable replicates above which the bootstrap is abandoned.
const MAX_SKIP_SHARE: f64 = 0.2;
const WARN_SKIP_SHARE: f64 = 0.05;

fn resample(data: &PanelDataset, rng: &mut impl Rng, stratified: bool) -> Vec<usize> {
    let n = data.n();
    if !stratified {
        return (0..n).map(|_| rng.random_range(0..n)).collect();
    }
    let (treated, control): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| data.treated()[i]);
    let mut rows: Vec<usize> = (0..treated.len()).map(|_| treated[rng.random_range(0..treated.len())]).collect();
    rows.extend((0..control.len()).map(|_| control[rng.random_range(0..control.len())]));
    rows
}

enum Replicate {
    Estimate(f64),
    Skipped,
    Failed,
}

/// Unit bootstrap of the synthetic control effect at `cfg.horizon`.
///
/// Replicate `r` draws from ChaCha stream `r` of `cfg.seed`, so the result
/// does not depend on how replicates are scheduled.
pub fn bootstrap_sc(
    data: &PanelDataset,
    recipe: &FeatureRecipe,
    zeta: f64,
    opts: &SolverOptions,
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if cfg.b_boot < 100 {
        return Err(Error::Range(format!("b_boot = {} < 100", cfg.b_boot)));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::Range(format!("level = {} outside (0, 1)", cfg.level)));
    }
    let point = sc_estimate(data, recipe, zeta, opts)?
        .at(cfg.horizon)
        .ok_or_else(|| Error::Range(format!("horizon {} is not in the panel", cfg.horizon)))?;

    let replicates: Vec<Replicate> = (0..cfg.b_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(cfg.seed, r as u64);
            let rows = resample(data, &mut rng, cfg.stratified);
            let n1 = rows.iter().filter(|&&i| data.treated()[i]).count();
            if n1 == 0 || n1 == rows.len() {
                return Replicate::Skipped;
            }
            let boot = match data.select_units(&rows) {
                Ok(b) => b,
                Err(_) => return Replicate::Skipped,
            };
            match sc_estimate(&boot, recipe, zeta, opts) {
                Ok(est) => est.at(cfg.horizon).map_or(Replicate::Failed, Replicate::Estimate),
                Err(_) => Replicate::Failed,
            }
        })
        .collect();

    let mut estimates = Vec::with_capacity(cfg.b_boot);
    let (mut skipped, mut failed) = (0, 0);
    for r in replicates {
        match r {
            Replicate::Estimate(v) => estimates.push(v),
            Replicate::Skipped => skipped += 1,
            Replicate::Failed => failed += 1,
        }
    }
    let unusable = (skipped + failed) as f64 / cfg.b_boot as f64;
    if unusable > MAX_SKIP_SHARE || estimates.len() < 2 {
        return Err(Error::DegenerateDesign(format!(
            "{skipped} skipped and {failed} failed of {} bootstrap replicates",
            cfg.b_boot
        )));
    }
    let warning = (unusable >= WARN_SKIP_SHARE)
        .then(|| format!("{skipped} skipped and {failed} failed of {} replicates", cfg.b_boot));

    let se = sd(&estimates);
    let alpha = (1.0 - cfg.level) / 2.0;
    let (ci_low, ci_high, method) = if cfg.normal_ci {
        let z = Normal::standard().inverse_cdf(1.0 - alpha);
        (point - z * se, point + z * se, "normal")
    } else {
        (
            quantile_nearest_rank(&estimates, alpha),
            quantile_nearest_rank(&estimates, 1.0 - alpha),
            "percentile",
        )
    };
    Ok(BootstrapResult {
        point,
        se,
        ci_low,
        ci_high,
        level: cfg.level,
        horizon: cfg.horizon,
        b_boot: cfg.b_boot,
        skipped,
        failed,
        method: method.into(),
        warning,
    })
}

/// Variance of τ̂ under a vanishing treated share: `mean(r²) / (π̄ n)`, with
/// `r` the residuals of the treated units.
pub fn plugin_variance_van(data: &PanelDataset, residuals: &[f64]) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::EmptyCohort("no treated residuals".into()));
    }
    if residuals.len() != data.n_treated() {
        return Err(Error::Shape(format!(
            "{} residuals for {} treated units",
            residuals.len(),
            data.n_treated()
        )));
    }
    let ms = residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
    Ok(ms / (data.pi_bar() * data.n() as f64))
}

/// Variance of τ̂ under a constant treated share: `mean(V[ε]/(1−π)) / (π̄ n)`
/// over treated units.
pub fn plugin_variance_as(data: &PanelDataset, shock_variance: &[f64], pi: &[f64]) -> Result<f64> {
    if shock_variance.is_empty() {
        return Err(Error::EmptyCohort("no treated units".into()));
    }
    if shock_variance.len() != data.n_treated() || pi.len() != shock_variance.len() {
        return Err(Error::Shape("one variance and one propensity per treated unit".into()));
    }
    if pi.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Range("propensities must lie in (0, 1)".into()));
    }
    let m = shock_variance.iter().zip(pi).map(|(v, p)| v / (1.0 - p)).sum::<f64>() / pi.len() as f64;
    Ok(m / (data.pi_bar() * data.n() as f64))
}
