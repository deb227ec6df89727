//! Simulation designs: two-way models with AR(1) or random-walk shocks, their
//! 50/50 mixture, and interactive fixed effects with a polynomially decaying
//! singular-value profile. Every latent quantity is kept for oracle use.
//!
//! Draws are keyed by `(seed, unit)`: unit `i` reads its own ChaCha stream in
//! the fixed order η, ν, assignment uniform, then ε period by period, so
//! enlarging `n` extends a panel without reshuffling existing units.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DgpKind {
    TwoWayAR,
    TwoWayRW,
    Mixture,
    InteractiveFE,
}

/// How the misspecification draw ν enters the reported log-odds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogOdds {
    /// θ includes the unit's realized ν; π = logistic(θ).
    #[default]
    IncludeNu,
    /// π = E_ν[logistic(index + ν)], the propensity given outcomes and η only.
    IntegrateNu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub t0: usize,
    /// Post-treatment periods after the first, so the panel has `t0 + k_post + 1` periods.
    pub k_post: usize,
    /// Effect slope: treated units gain `tau·(t − t0 − 1)` in post periods.
    pub tau: f64,
    pub sigma_eta2: f64,
    pub rho: f64,
    pub sigma_ar2: f64,
    pub sigma_rw2: f64,
    pub beta_ar_t0: f64,
    pub beta_ar_t0m1: f64,
    pub beta_rw_t0: f64,
    pub sigma_nu2: f64,
    /// Time effects; empty means zero.
    pub lambda: Vec<f64>,
    pub kappa: f64,
    pub f_dim: usize,
    /// Idiosyncratic variance of the factor design.
    pub sigma_eps2: f64,
    /// Selection on the last pretreatment shock in the factor design.
    pub beta_ife_t0: f64,
    pub log_odds: LogOdds,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            kind: DgpKind::TwoWayAR,
            n: 400,
            t0: 8,
            k_post: 5,
            tau: 1.0,
            sigma_eta2: 1.0,
            rho: 0.5,
            sigma_ar2: 1.0,
            sigma_rw2: 0.125,
            beta_ar_t0: 0.5,
            beta_ar_t0m1: 0.25,
            beta_rw_t0: 0.1,
            sigma_nu2: 0.25,
            lambda: Vec::new(),
            kappa: 4.0,
            f_dim: 1,
            sigma_eps2: 1.0,
            beta_ife_t0: 0.5,
            log_odds: LogOdds::IncludeNu,
        }
    }
}

impl DgpSpec {
    pub fn with_kind(kind: DgpKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn periods(&self) -> usize {
        self.t0 + self.k_post + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.n < 2 {
            return bad(format!("n = {} is too small", self.n));
        }
        if self.t0 < 2 {
            return bad(format!("t0 = {} needs at least 2 pretreatment periods", self.t0));
        }
        let variances = [
            ("sigma_eta2", self.sigma_eta2),
            ("sigma_ar2", self.sigma_ar2),
            ("sigma_rw2", self.sigma_rw2),
            ("sigma_nu2", self.sigma_nu2),
            ("sigma_eps2", self.sigma_eps2),
        ];
        for (name, v) in variances {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if self.kind == DgpKind::TwoWayAR || self.kind == DgpKind::Mixture {
            if !(self.rho.abs() < 1.0) {
                return bad(format!("|rho| = {} must be < 1", self.rho.abs()));
            }
        }
        if self.kind == DgpKind::InteractiveFE {
            if !(self.kappa > 1.0) {
                return bad(format!("kappa = {} must exceed 1", self.kappa));
            }
            if self.f_dim == 0 {
                return bad("f_dim must be positive".into());
            }
            if self.f_dim > self.t0 {
                return Err(Error::Range(format!("f_dim = {} exceeds t0 = {}", self.f_dim, self.t0)));
            }
        }
        if !self.lambda.is_empty() && self.lambda.len() != self.periods() {
            return bad(format!("lambda has {} entries for {} periods", self.lambda.len(), self.periods()));
        }
        let coefs = [self.tau, self.beta_ar_t0, self.beta_ar_t0m1, self.beta_rw_t0, self.beta_ife_t0];
        if coefs.iter().any(|c| !c.is_finite()) {
            return bad("coefficients must be finite".into());
        }
        Ok(())
    }

    fn lambda_at(&self, t: usize) -> f64 {
        self.lambda.get(t - 1).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Ar,
    Rw,
    Factor,
}

/// Unobserved quantities behind a simulated panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Latent {
    /// `n × d` loadings (d = 1 outside the factor design).
    pub eta: DMatrix<f64>,
    /// `n × T` shocks.
    pub eps: DMatrix<f64>,
    pub nu: Vec<f64>,
    /// Assignment index without ν.
    pub index: Vec<f64>,
    pub theta: Vec<f64>,
    pub pi: Vec<f64>,
    /// `E[Y_{t0+1}(0) | η, Y_1..Y_t0]`.
    pub mu: Vec<f64>,
    /// `n × (k_post+1)` untreated potential outcomes in post periods.
    pub y0_post: DMatrix<f64>,
    pub component: Vec<Component>,
}

#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: PanelDataset,
    pub latent: Latent,
    pub spec: DgpSpec,
}

impl SimulatedPanel {
    /// True effect at event time `k ≥ 0`.
    pub fn true_effect(&self, k: i64) -> f64 {
        if k < 0 {
            0.0
        } else {
            self.spec.tau * k as f64
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Nodes and weights for `E[g(Z)]`, `Z ~ N(0,1)`, by Golub–Welsch.
pub fn gauss_hermite(m: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(m, m, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

struct Marginalizer {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    sd: f64,
}

impl Marginalizer {
    fn new(sigma2: f64) -> Self {
        let (nodes, weights) = gauss_hermite(64);
        Self { nodes, weights, sd: sigma2.sqrt() }
    }

    fn propensity(&self, index: f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * logistic(index + self.sd * z))
            .sum()
    }
}

fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sd * z
}

/// Stream reserved for design-level draws (factor matrices).
const DESIGN_STREAM: u64 = u64::MAX;

struct UnitDraw {
    eta: Vec<f64>,
    nu: f64,
    uniform: f64,
    eps: Vec<f64>,
    index: f64,
    mu_shock: f64,
    component: Component,
}

fn draw_two_way(spec: &DgpSpec, rng: &mut ChaCha8Rng, component: Component) -> UnitDraw {
    let periods = spec.periods();
    let eta = normal(rng, spec.sigma_eta2.sqrt());
    let nu = normal(rng, spec.sigma_nu2.sqrt());
    let uniform: f64 = rng.random();
    let mut eps = Vec::with_capacity(periods);
    let t0 = spec.t0;
    let (index, mu_shock) = match component {
        Component::Ar => {
            let mut prev = normal(rng, (spec.sigma_ar2 / (1.0 - spec.rho * spec.rho)).sqrt());
            eps.push(prev);
            for _ in 1..periods {
                prev = spec.rho * prev + normal(rng, spec.sigma_ar2.sqrt());
                eps.push(prev);
            }
            let index = eta + spec.beta_ar_t0 * eps[t0 - 1] + spec.beta_ar_t0m1 * eps[t0 - 2];
            (index, spec.rho * eps[t0 - 1])
        }
        Component::Rw => {
            let mut level = 0.0;
            for _ in 0..periods {
                level += normal(rng, spec.sigma_rw2.sqrt());
                eps.push(level);
            }
            (spec.beta_rw_t0 * eps[t0 - 1], eps[t0 - 1])
        }
        Component::Factor => unreachable!(),
    };
    UnitDraw { eta: vec![eta], nu, uniform, eps, index, mu_shock, component }
}

/// Factor loadings `Ψ` (d × T) over all periods, and the selection loading.
pub struct FactorDesign {
    pub psi: DMatrix<f64>,
    pub alpha: DVector<f64>,
}

fn random_orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| normal(rng, 1.0));
    g.qr().q()
}

/// `Ψ = U diag(σ) V'` over the pretreatment block with `σ(j) = √T0·j^{−κ/2}`
/// and first right singular vector constant; `ψ_{T0+1} = α = Uξ`, `ξ_j = j^{−κ/2}`.
pub fn factor_design(spec: &DgpSpec, seed: u64) -> Result<FactorDesign> {
    let d = spec.f_dim;
    let t0 = spec.t0;
    if d > t0 {
        return Err(Error::Range(format!("f_dim = {d} exceeds t0 = {t0}")));
    }
    let mut rng = stream_rng(seed, DESIGN_STREAM);
    let u = if d == 1 {
        DMatrix::from_element(1, 1, 1.0)
    } else {
        random_orthogonal(&mut rng, d, d)
    };
    let mut v = DMatrix::zeros(t0, d);
    v.column_mut(0).fill(1.0 / (t0 as f64).sqrt());
    if d > 1 {
        // complete the constant vector to an orthonormal set with random directions
        let mut basis = DMatrix::from_fn(t0, d, |_, _| normal(&mut rng, 1.0));
        basis.column_mut(0).copy_from(&v.column(0));
        let q = basis.qr().q();
        for j in 1..d {
            let col = q.column(j);
            v.column_mut(j).copy_from(&col);
        }
    }
    let half = spec.kappa / 2.0;
    let sigma: Vec<f64> = (1..=d).map(|j| (t0 as f64).sqrt() * (j as f64).powf(-half)).collect();
    let xi = DVector::from_iterator(d, (1..=d).map(|j| (j as f64).powf(-half)));
    let scaled = DMatrix::from_fn(d, d, |i, j| u[(i, j)] * sigma[j]);
    let pre = &scaled * v.transpose();
    let next = &u * &xi;
    let periods = spec.periods();
    let mut psi = DMatrix::zeros(d, periods);
    psi.columns_mut(0, t0).copy_from(&pre);
    for t in t0..periods {
        psi.column_mut(t).copy_from(&next);
    }
    Ok(FactorDesign { psi, alpha: next })
}

fn draw_factor(spec: &DgpSpec, design: &FactorDesign, rng: &mut ChaCha8Rng) -> UnitDraw {
    let d = spec.f_dim;
    let eta: Vec<f64> = (0..d).map(|_| normal(rng, 1.0)).collect();
    let nu = normal(rng, spec.sigma_nu2.sqrt());
    let uniform: f64 = rng.random();
    let sd = spec.sigma_eps2.sqrt();
    let eps: Vec<f64> = (0..spec.periods()).map(|_| normal(rng, sd)).collect();
    let loading: f64 = eta.iter().zip(design.alpha.iter()).map(|(e, a)| e * a).sum();
    let index = loading + spec.beta_ife_t0 * eps[spec.t0 - 1];
    UnitDraw { eta, nu, uniform, eps, index, mu_shock: 0.0, component: Component::Factor }
}

/// Simulate any design; the factor design is routed to [`simulate_interactive`].
pub fn simulate(spec: &DgpSpec, seed: u64) -> Result<SimulatedPanel> {
    spec.validate()?;
    if spec.kind == DgpKind::InteractiveFE {
        return simulate_interactive(spec, seed);
    }
    let draws: Vec<UnitDraw> = (0..spec.n)
        .map(|i| {
            let component = match spec.kind {
                DgpKind::TwoWayAR => Component::Ar,
                DgpKind::TwoWayRW => Component::Rw,
                _ if i % 2 == 0 => Component::Ar,
                _ => Component::Rw,
            };
            draw_two_way(spec, &mut stream_rng(seed, i as u64), component)
        })
        .collect();
    assemble(spec, draws, |u, t| u.eta[0] + spec.lambda_at(t) + u.eps[t - 1], |u| {
        u.eta[0] + spec.lambda_at(spec.t0 + 1) + u.mu_shock
    })
}

/// Interactive fixed effects `Y_it(0) = η_i'ψ_t + λ_t + ε_it`.
pub fn simulate_interactive(spec: &DgpSpec, seed: u64) -> Result<SimulatedPanel> {
    if spec.kind != DgpKind::InteractiveFE {
        return Err(Error::Validation(format!("{:?} is not the factor design", spec.kind)));
    }
    spec.validate()?;
    let design = factor_design(spec, seed)?;
    let draws: Vec<UnitDraw> = (0..spec.n)
        .map(|i| draw_factor(spec, &design, &mut stream_rng(seed, i as u64)))
        .collect();
    let loading = |u: &UnitDraw, t: usize| -> f64 {
        u.eta.iter().enumerate().map(|(j, e)| e * design.psi[(j, t - 1)]).sum()
    };
    assemble(
        spec,
        draws,
        |u, t| loading(u, t) + spec.lambda_at(t) + u.eps[t - 1],
        |u| loading(u, spec.t0 + 1) + spec.lambda_at(spec.t0 + 1),
    )
}

fn assemble(
    spec: &DgpSpec,
    draws: Vec<UnitDraw>,
    y0: impl Fn(&UnitDraw, usize) -> f64,
    mu: impl Fn(&UnitDraw) -> f64,
) -> Result<SimulatedPanel> {
    let n = spec.n;
    let periods = spec.periods();
    let marginal = (spec.log_odds == LogOdds::IntegrateNu).then(|| Marginalizer::new(spec.sigma_nu2));
    let d = draws[0].eta.len();

    let mut eta = DMatrix::zeros(n, d);
    let mut eps = DMatrix::zeros(n, periods);
    let mut outcomes = DMatrix::zeros(n, periods);
    let mut y0_post = DMatrix::zeros(n, spec.k_post + 1);
    let mut treated = Vec::with_capacity(n);
    let mut latent_theta = Vec::with_capacity(n);
    let mut latent_pi = Vec::with_capacity(n);
    for (i, u) in draws.iter().enumerate() {
        let p_draw = logistic(u.index + u.nu);
        let d_i = u.uniform < p_draw;
        treated.push(d_i);
        let (theta, pi) = match &marginal {
            None => (u.index + u.nu, p_draw),
            Some(m) => {
                let p = m.propensity(u.index);
                (logit(p), p)
            }
        };
        latent_theta.push(theta);
        latent_pi.push(pi);
        for j in 0..d {
            eta[(i, j)] = u.eta[j];
        }
        for t in 1..=periods {
            eps[(i, t - 1)] = u.eps[t - 1];
            let base = y0(u, t);
            let k = t as i64 - spec.t0 as i64 - 1;
            if k >= 0 {
                y0_post[(i, k as usize)] = base;
            }
            let effect = if d_i && k >= 0 { spec.tau * k as f64 } else { 0.0 };
            outcomes[(i, t - 1)] = base + effect;
        }
    }
    let panel = PanelDataset::from_matrix(outcomes, treated, spec.t0)?;
    let latent = Latent {
        eta,
        eps,
        nu: draws.iter().map(|u| u.nu).collect(),
        index: draws.iter().map(|u| u.index).collect(),
        theta: latent_theta,
        pi: latent_pi,
        mu: draws.iter().map(&mu).collect(),
        y0_post,
        component: draws.iter().map(|u| u.component).collect(),
    };
    Ok(SimulatedPanel { panel, latent, spec: spec.clone() })
}
