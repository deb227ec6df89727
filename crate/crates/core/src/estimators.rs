//! Treatment-effect paths: synthetic control, the two-way fixed effects
//! event study, and the per-period estimator for staggered adoption.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balancer::{solve_dual, BalanceSolution, SolverOptions};
use crate::data::{EstimateResult, PanelDataset};
use crate::error::{Error, Result};
use crate::features::FeatureRecipe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorTag {
    Sc,
    Twfe,
}

impl EstimatorTag {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorTag::Sc => "sc",
            EstimatorTag::Twfe => "twfe",
        }
    }
}

impl std::str::FromStr for EstimatorTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sc" | "SC" => Ok(Self::Sc),
            "twfe" | "TWFE" => Ok(Self::Twfe),
            other => Err(Error::Parse(format!("unknown estimator {other:?}"))),
        }
    }
}

/// Effects by event time `k = t − t0 − 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStudyResult {
    pub horizons: Vec<i64>,
    pub tau: Vec<f64>,
    pub estimator: EstimatorTag,
    pub normalization: String,
    #[serde(default)]
    pub placebo: bool,
}

impl EventStudyResult {
    pub fn at(&self, k: i64) -> Option<f64> {
        self.horizons.iter().position(|&h| h == k).map(|i| self.tau[i])
    }

    /// Entries with `k ≥ 0`.
    pub fn post(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.horizons.iter().copied().zip(self.tau.iter().copied()).filter(|(k, _)| *k >= 0)
    }
}

/// `Pn (D/π̄) y − Pn ω(1−D) y` for one column.
pub fn weighted_contrast(y: &[f64], treated: &[bool], weights: &[f64]) -> f64 {
    let n = y.len() as f64;
    let n1 = treated.iter().filter(|&&d| d).count() as f64;
    let mut treated_mean = 0.0;
    let mut control = 0.0;
    for ((&yi, &d), &w) in y.iter().zip(treated).zip(weights) {
        if d {
            treated_mean += yi / n1;
        } else {
            control += w * yi / n;
        }
    }
    treated_mean - control
}

/// Apply fitted weights to every period, pre and post.
pub fn sc_effect_path(data: &PanelDataset, weights: &BalanceSolution) -> Result<EventStudyResult> {
    if weights.weights.len() != data.n() {
        return Err(Error::Shape(format!(
            "{} weights for {} units",
            weights.weights.len(),
            data.n()
        )));
    }
    let mut horizons = Vec::with_capacity(data.periods());
    let mut tau = Vec::with_capacity(data.periods());
    for t in 1..=data.periods() {
        let y = data.period(t);
        horizons.push(data.event_time(t));
        tau.push(weighted_contrast(y.as_slice(), data.treated(), &weights.weights));
    }
    Ok(EventStudyResult {
        horizons,
        tau,
        estimator: EstimatorTag::Sc,
        normalization: "none; pretreatment horizons are the placebo path".into(),
        placebo: false,
    })
}

/// Features, weights and effect path in one call.
pub fn sc_estimate(
    data: &PanelDataset,
    recipe: &FeatureRecipe,
    zeta: f64,
    opts: &SolverOptions,
) -> Result<EstimateResult> {
    let phi = recipe.build(data)?;
    let solution = solve_dual(&phi, data.treated(), zeta, opts)?;
    let path = sc_effect_path(data, &solution)?;
    Ok(EstimateResult {
        horizons: path.horizons,
        tau_hat: path.tau,
        n1: data.n_treated(),
        pi_bar: data.pi_bar(),
        weights: Some(solution),
    })
}

const DEMEAN_TOL: f64 = 1e-12;
const DEMEAN_MAX_SWEEPS: usize = 1000;

/// Two-way within transformation by alternating row/column demeaning.
fn demean_two_way(mut x: DMatrix<f64>) -> DMatrix<f64> {
    for _ in 0..DEMEAN_MAX_SWEEPS {
        let mut change: f64 = 0.0;
        for mut row in x.row_iter_mut() {
            let m = row.mean();
            change = change.max(m.abs());
            row.add_scalar_mut(-m);
        }
        for mut col in x.column_iter_mut() {
            let m = col.mean();
            change = change.max(m.abs());
            col.add_scalar_mut(-m);
        }
        if change < DEMEAN_TOL {
            break;
        }
    }
    x
}

/// OLS with unit and period fixed effects and event-time dummies for every `k ≠ −1`.
pub fn twfe_event_study(data: &PanelDataset) -> Result<EventStudyResult> {
    let n = data.n();
    let periods = data.periods();
    let y = demean_two_way(data.outcomes().clone());
    let dummy_periods: Vec<usize> = (1..=periods).filter(|&t| t != data.t0()).collect();
    let dummies: Vec<DMatrix<f64>> = dummy_periods
        .iter()
        .map(|&t| {
            let raw = DMatrix::from_fn(n, periods, |i, j| {
                if data.treated()[i] && j + 1 == t {
                    1.0
                } else {
                    0.0
                }
            });
            demean_two_way(raw)
        })
        .collect();

    let q = dummies.len();
    let mut gram = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    for a in 0..q {
        rhs[a] = dummies[a].dot(&y);
        for b in a..q {
            let v = dummies[a].dot(&dummies[b]);
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let eig = gram.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.amax();
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max_ev > 0.0) || min_ev <= 1e-12 * max_ev {
        return Err(Error::Rank(format!(
            "event-time dummies are collinear after demeaning (eigenvalues {min_ev:.3e}..{max_ev:.3e})"
        )));
    }
    let coef = gram
        .cholesky()
        .ok_or_else(|| Error::Rank("dummy Gram matrix is not positive definite".into()))?
        .solve(&rhs);

    Ok(EventStudyResult {
        horizons: dummy_periods.iter().map(|&t| data.event_time(t)).collect(),
        tau: coef.iter().copied().collect(),
        estimator: EstimatorTag::Twfe,
        normalization: "k = -1 omitted".into(),
        placebo: false,
    })
}

/// Outcomes with an absorbing adoption indicator `W_{it}`.
#[derive(Debug, Clone)]
pub struct StaggeredPanel {
    pub unit_ids: Vec<String>,
    pub outcomes: DMatrix<f64>,
    adoption: Vec<Vec<bool>>,
}

impl StaggeredPanel {
    /// `adoption[i][t-1]` is `W_{i,t}`; must be non-decreasing in `t`.
    pub fn new(unit_ids: Vec<String>, outcomes: DMatrix<f64>, adoption: Vec<Vec<bool>>) -> Result<Self> {
        let (n, periods) = outcomes.shape();
        if unit_ids.len() != n || adoption.len() != n || adoption.iter().any(|w| w.len() != periods) {
            return Err(Error::Shape("adoption matrix must match the outcome matrix".into()));
        }
        for (i, w) in adoption.iter().enumerate() {
            if w.windows(2).any(|p| p[0] && !p[1]) {
                return Err(Error::Consistency(format!(
                    "unit {:?} leaves treatment; adoption must be absorbing",
                    unit_ids[i]
                )));
            }
        }
        if outcomes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("outcome matrix has non-finite cells".into()));
        }
        Ok(Self { unit_ids, outcomes, adoption })
    }

    /// Build from per-unit adoption dates (`None` = never treated).
    pub fn from_adoption_dates(outcomes: DMatrix<f64>, dates: &[Option<usize>]) -> Result<Self> {
        let periods = outcomes.ncols();
        let adoption = dates
            .iter()
            .map(|d| (1..=periods).map(|t| d.is_some_and(|a| t >= a)).collect())
            .collect();
        let ids = (1..=outcomes.nrows()).map(|i| format!("u{i}")).collect();
        Self::new(ids, outcomes, adoption)
    }

    pub fn adopted(&self, unit: usize, t: usize) -> bool {
        self.adoption[unit][t - 1]
    }

    pub fn periods(&self) -> usize {
        self.outcomes.ncols()
    }
}

/// Contemporaneous effect for units adopting at period `t`, using not-yet-treated controls.
pub fn staggered_tau_t(
    panel: &StaggeredPanel,
    t: usize,
    zeta: f64,
    recipe: &FeatureRecipe,
    opts: &SolverOptions,
) -> Result<EstimateResult> {
    if t < 3 || t > panel.periods() {
        return Err(Error::Range(format!(
            "period {t} needs at least two earlier periods and must be ≤ {}",
            panel.periods()
        )));
    }
    let at_risk: Vec<usize> = (0..panel.outcomes.nrows()).filter(|&i| !panel.adopted(i, t - 1)).collect();
    let treated: Vec<bool> = at_risk.iter().map(|&i| panel.adopted(i, t)).collect();
    if !treated.iter().any(|&d| d) {
        return Err(Error::EmptyCohort(format!("no unit adopts at period {t}")));
    }
    if treated.iter().all(|&d| d) {
        return Err(Error::EmptyCohort(format!("no not-yet-treated control at period {t}")));
    }
    let outcomes = panel.outcomes.select_rows(at_risk.iter()).columns(0, t).into_owned();
    let ids = at_risk.iter().map(|&i| panel.unit_ids[i].clone()).collect();
    let data = PanelDataset::new(ids, outcomes, treated, t - 1)?;
    let phi = recipe.build(&data)?;
    let solution = solve_dual(&phi, data.treated(), zeta, opts)?;
    let y = data.period(t);
    let tau = weighted_contrast(y.as_slice(), data.treated(), &solution.weights);
    Ok(EstimateResult {
        horizons: vec![0],
        tau_hat: vec![tau],
        n1: data.n_treated(),
        pi_bar: data.pi_bar(),
        weights: Some(solution),
    })
}
