//! Replication engine: B independent simulate → estimate → diagnose runs,
//! aggregated into means, SDs and nearest-rank 5%/95% quantiles.
//!
//! Replication `r` is simulated from `derive_seed(seed, r)` and results are
//! reduced in replication order, so a study is reproducible from
//! `(spec, pipeline, B, seed)` whatever the number of worker threads.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balancer::{solve_dual, SolverOptions};
use crate::dgp::{simulate, DgpSpec};
use crate::diagnostics::{autocorr_imbalance, placebo_shift};
use crate::error::{Error, Result};
use crate::estimators::{sc_effect_path, twfe_event_study};
use crate::features::FeatureRecipe;
use crate::inference::{bootstrap_sc, BootstrapConfig};
use crate::rng::derive_seed;
use crate::stats::{mean, quantile_nearest_rank, sd};
use crate::theory::{fit_population_objects, oracle_noise_terms, sample_bias, PopulationFit};

/// Largest share of failed replications a study tolerates.
const MAX_FAILURE_RATE: f64 = 0.05;

/// Population objects for the expansion-residual check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub population_n: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { population_n: 200_000 }
    }
}

/// What each replication computes after simulating a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub recipe: FeatureRecipe,
    pub zeta: f64,
    pub solver: SolverOptions,
    pub twfe: bool,
    /// Autocorrelation imbalance with uniform and fitted weights.
    pub diagnostics: bool,
    pub placebo: bool,
    pub oracle: Option<OracleConfig>,
    /// Per-replication bootstrap; its seed is derived from the replication seed.
    pub bootstrap: Option<BootstrapConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            recipe: FeatureRecipe::lags(),
            zeta: 1.0,
            solver: SolverOptions::default(),
            twfe: true,
            diagnostics: true,
            placebo: false,
            oracle: None,
            bootstrap: None,
        }
    }
}

/// Summary of one statistic across replications.
///
/// `estimator` names the series (`sc`, `twfe`, `rho_uniform`, ...); horizons
/// are event times, absent for scalar diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub estimator: String,
    pub horizon: Option<i64>,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q95: f64,
    /// True effect at the horizon for estimator paths; 0 otherwise.
    pub truth: f64,
    pub share_positive: f64,
    pub count: usize,
}

impl McCell {
    fn from_values(estimator: &str, horizon: Option<i64>, values: &[f64], truth: f64) -> Self {
        Self {
            estimator: estimator.into(),
            horizon,
            mean: mean(values),
            sd: sd(values),
            q05: quantile_nearest_rank(values, 0.05),
            q95: quantile_nearest_rank(values, 0.95),
            truth,
            share_positive: values.iter().filter(|v| **v > 0.0).count() as f64 / values.len() as f64,
            count: values.len(),
        }
    }

    pub fn bias(&self) -> f64 {
        self.mean - self.truth
    }

    /// Monte Carlo standard error of the mean.
    pub fn mc_se(&self) -> f64 {
        self.sd / (self.count as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub b: usize,
    pub seed: u64,
    pub failures: usize,
    pub failure_rate: f64,
    /// SHA-256 of the canonical JSON of `{spec, pipeline}`.
    pub spec_hash: String,
    pub cells: Vec<McCell>,
    pub version: String,
}

impl McSummary {
    pub fn cell(&self, estimator: &str, horizon: Option<i64>) -> Option<&McCell> {
        self.cells.iter().find(|c| c.estimator == estimator && c.horizon == horizon)
    }

    pub fn series(&self, estimator: &str) -> impl Iterator<Item = &McCell> + '_ {
        let name = estimator.to_string();
        self.cells.iter().filter(move |c| c.estimator == name)
    }

    /// Parse a summary written by [`emit_summary`].
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut meta = BTreeMap::new();
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            if let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Parse(format!("missing header field {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Parse(format!("header field {k}"))) };

        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let mut cells: Vec<McCell> = Vec::new();
        for row in reader.deserialize::<CsvRow>() {
            let row = row.map_err(|e| Error::Parse(e.to_string()))?;
            let idx = match cells.iter().position(|c| c.estimator == row.estimator && c.horizon == row.horizon) {
                Some(i) => i,
                None => {
                    cells.push(McCell {
                        estimator: row.estimator.clone(),
                        horizon: row.horizon,
                        mean: f64::NAN,
                        sd: f64::NAN,
                        q05: f64::NAN,
                        q95: f64::NAN,
                        truth: 0.0,
                        share_positive: f64::NAN,
                        count: 0,
                    });
                    cells.len() - 1
                }
            };
            let c = &mut cells[idx];
            match row.statistic.as_str() {
                "mean" => c.mean = row.value,
                "sd" => c.sd = row.value,
                "q05" => c.q05 = row.value,
                "q95" => c.q95 = row.value,
                "truth" => c.truth = row.value,
                "share_positive" => c.share_positive = row.value,
                "count" => c.count = row.value as usize,
                other => return Err(Error::Parse(format!("unknown statistic {other:?}"))),
            }
        }
        Ok(Self {
            b: num("b")? as usize,
            seed: get("seed")?.parse().map_err(|_| Error::Parse("header field seed".into()))?,
            failures: num("failures")? as usize,
            failure_rate: num("failure_rate")?,
            spec_hash: get("spec_hash")?,
            cells,
            version: get("version")?,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    estimator: String,
    horizon: Option<i64>,
    statistic: String,
    value: f64,
}

/// Hex SHA-256 of the compact JSON form of `value`. Struct fields serialize
/// in declaration order, so equal configs hash equally.
pub fn digest<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

pub fn spec_hash(spec: &DgpSpec, pipeline: &PipelineConfig) -> Result<String> {
    digest(&serde_json::json!({ "spec": spec, "pipeline": pipeline }))
}

/// Everything one replication produces.
#[derive(Debug, Clone, Default)]
struct Replication {
    series: Vec<(String, i64, f64, f64)>,
    scalars: Vec<(String, f64)>,
}

impl Replication {
    fn path(&mut self, name: &str, horizons: &[i64], values: &[f64], truth: impl Fn(i64) -> f64) {
        for (k, v) in horizons.iter().zip(values) {
            self.series.push((name.into(), *k, *v, truth(*k)));
        }
    }
}

/// Failures that exclude a replication instead of aborting the study.
fn is_replication_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Convergence { .. } | Error::Overflow(_) | Error::Rank(_) | Error::DegenerateDesign(_) | Error::EmptyCohort(_)
    )
}

fn replicate(spec: &DgpSpec, cfg: &PipelineConfig, oracle: Option<&PopulationFit>, seed: u64) -> Result<Replication> {
    let sim = simulate(spec, seed)?;
    let data = &sim.panel;
    let mut out = Replication::default();

    let phi = cfg.recipe.build(data)?;
    let weights = solve_dual(&phi, data.treated(), cfg.zeta, &cfg.solver)?;
    let sc = sc_effect_path(data, &weights)?;
    out.path("sc", &sc.horizons, &sc.tau, |k| sim.true_effect(k));

    if cfg.twfe {
        let tw = twfe_event_study(data)?;
        out.path("twfe", &tw.horizons, &tw.tau, |k| sim.true_effect(k));
    }
    if cfg.diagnostics {
        out.scalars.push(("rho_uniform".into(), autocorr_imbalance(data, None)?.rho_hat));
        out.scalars.push(("rho_sc".into(), autocorr_imbalance(data, Some(&weights))?.rho_hat));
    }
    if cfg.placebo {
        let p = placebo_shift(data, &cfg.recipe, cfg.zeta, &cfg.solver)?;
        out.path("placebo_sc", &p.sc.horizons, &p.sc.tau, |_| 0.0);
        out.path("placebo_twfe", &p.twfe.horizons, &p.twfe.tau, |_| 0.0);
    }
    if let Some(fit) = oracle {
        let tau0 = sc.at(0).ok_or_else(|| Error::Range("no horizon 0".into()))?;
        let bias = sample_bias(&sim, fit)?;
        let (noise, noise_u) = oracle_noise_terms(&sim, fit)?;
        let root_n = (data.n() as f64).sqrt();
        out.scalars.push(("oracle_bias".into(), bias));
        out.scalars.push(("oracle_noise".into(), root_n * (noise + noise_u)));
        out.scalars.push(("oracle_residual".into(), root_n * (tau0 - sim.true_effect(0) - bias - noise - noise_u)));
    }
    if let Some(boot) = &cfg.bootstrap {
        let bcfg = BootstrapConfig { seed: derive_seed(seed, 1), ..boot.clone() };
        let res = bootstrap_sc(data, &cfg.recipe, cfg.zeta, &cfg.solver, &bcfg)?;
        let truth = sim.true_effect(bcfg.horizon);
        let covered = res.ci_low <= truth && truth <= res.ci_high;
        out.scalars.push(("boot_covered".into(), if covered { 1.0 } else { 0.0 }));
        out.scalars.push(("boot_se".into(), res.se));
        out.scalars.push(("boot_width".into(), res.ci_high - res.ci_low));
    }
    Ok(out)
}

/// Scalars that are divided by their cross-replication SD before summarizing.
const NORMALIZED: [&str; 2] = ["rho_uniform", "rho_sc"];

/// Run `b` replications of `pipeline` on panels drawn from `spec`.
pub fn run_study(spec: &DgpSpec, pipeline: &PipelineConfig, b: usize, seed: u64) -> Result<McSummary> {
    if b < 2 {
        return Err(Error::Range(format!("B = {b} < 2")));
    }
    spec.validate()?;
    let oracle = match &pipeline.oracle {
        Some(o) => Some(fit_population_objects(
            spec,
            &pipeline.recipe,
            pipeline.zeta,
            spec.n,
            o.population_n,
            derive_seed(seed, u64::MAX),
        )?),
        None => None,
    };

    let runs: Vec<Result<Replication>> = (0..b)
        .into_par_iter()
        .map(|r| replicate(spec, pipeline, oracle.as_ref(), derive_seed(seed, r as u64)))
        .collect();

    let mut ok = Vec::with_capacity(b);
    let mut failures = 0;
    for run in runs {
        match run {
            Ok(rep) => ok.push(rep),
            Err(e) if is_replication_failure(&e) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    let failure_rate = failures as f64 / b as f64;
    if failure_rate > MAX_FAILURE_RATE || ok.len() < 2 {
        return Err(Error::Study(format!("{failures} of {b} replications failed")));
    }

    // keyed in first-seen order so output follows the pipeline's layout
    let mut order: Vec<(String, Option<i64>)> = Vec::new();
    let mut values: BTreeMap<(String, Option<i64>), (Vec<f64>, f64)> = BTreeMap::new();
    for rep in &ok {
        let entries = rep
            .series
            .iter()
            .map(|(name, k, v, truth)| ((name.clone(), Some(*k)), *v, *truth))
            .chain(rep.scalars.iter().map(|(name, v)| ((name.clone(), None), *v, 0.0)));
        for (key, v, truth) in entries {
            let slot = values.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (Vec::new(), truth)
            });
            slot.0.push(v);
        }
    }
    let cells = order
        .iter()
        .map(|key| {
            let (vals, truth) = &values[key];
            if NORMALIZED.contains(&key.0.as_str()) {
                let scale = sd(vals);
                let scaled: Vec<f64> =
                    vals.iter().map(|v| if scale > 0.0 { v / scale } else { 0.0 }).collect();
                McCell::from_values(&key.0, key.1, &scaled, 0.0)
            } else {
                McCell::from_values(&key.0, key.1, vals, *truth)
            }
        })
        .collect();

    Ok(McSummary {
        b,
        seed,
        failures,
        failure_rate,
        spec_hash: spec_hash(spec, pipeline)?,
        cells,
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

/// Write the long-format CSV (`estimator,horizon,statistic,value` after a
/// `#`-prefixed provenance header) and a JSON mirror next to it.
///
/// Returns the path of the JSON mirror.
pub fn emit_summary(
    summary: &McSummary,
    spec: &DgpSpec,
    pipeline: &PipelineConfig,
    path: impl AsRef<Path>,
) -> Result<PathBuf> {
    let path = path.as_ref();
    let mut text = String::new();
    for (k, v) in [
        ("b", summary.b.to_string()),
        ("seed", summary.seed.to_string()),
        ("failures", summary.failures.to_string()),
        ("failure_rate", summary.failure_rate.to_string()),
        ("spec_hash", summary.spec_hash.clone()),
        ("version", summary.version.clone()),
    ] {
        text.push_str(&format!("# {k}={v}\n"));
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    for c in &summary.cells {
        for (statistic, value) in [
            ("mean", c.mean),
            ("sd", c.sd),
            ("q05", c.q05),
            ("q95", c.q95),
            ("truth", c.truth),
            ("share_positive", c.share_positive),
            ("count", c.count as f64),
        ] {
            writer
                .serialize(CsvRow { estimator: c.estimator.clone(), horizon: c.horizon, statistic: statistic.into(), value })
                .map_err(|e| Error::Parse(e.to_string()))?;
        }
    }
    let body = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    text.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
    fs::write(path, text)?;

    let json_path = path.with_extension("json");
    let mirror = serde_json::json!({ "summary": summary, "spec": spec, "pipeline": pipeline });
    fs::write(&json_path, serde_json::to_string_pretty(&mirror)?)?;
    Ok(json_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::DgpKind;

    fn small() -> DgpSpec {
        DgpSpec { n: 120, t0: 6, k_post: 2, ..DgpSpec::with_kind(DgpKind::TwoWayRW) }
    }

    #[test]
    fn rerun_is_exact() {
        let cfg = PipelineConfig { placebo: true, ..PipelineConfig::default() };
        let a = run_study(&small(), &cfg, 6, 11).unwrap();
        let b = run_study(&small(), &cfg, 6, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.failures, 0);
        assert!(a.cells.iter().all(|c| c.q05 <= c.q95));
    }

    #[test]
    fn thread_count_does_not_matter() {
        let cfg = PipelineConfig::default();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| run_study(&small(), &cfg, 8, 5)).unwrap();
        let b = four.install(|| run_study(&small(), &cfg, 8, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalized_diagnostics_have_unit_sd() {
        let s = run_study(&small(), &PipelineConfig::default(), 10, 2).unwrap();
        for name in NORMALIZED {
            let c = s.cell(name, None).unwrap();
            assert!((c.sd - 1.0).abs() < 1e-12, "{name}: {}", c.sd);
        }
    }

    #[test]
    fn paths_carry_the_true_effect() {
        let s = run_study(&small(), &PipelineConfig::default(), 3, 1).unwrap();
        let spec = small();
        for c in s.series("sc") {
            let k = c.horizon.unwrap();
            assert_eq!(c.truth, if k >= 0 { spec.tau * k as f64 } else { 0.0 });
        }
        assert!(s.cell("twfe", Some(-1)).is_none());
        assert!(s.cell("sc", Some(-1)).is_some());
    }

    #[test]
    fn b_below_two_is_rejected() {
        assert!(matches!(run_study(&small(), &PipelineConfig::default(), 1, 0), Err(Error::Range(_))));
    }

    #[test]
    fn csv_round_trip() {
        let spec = small();
        let cfg = PipelineConfig::default();
        let s = run_study(&spec, &cfg, 4, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mc.csv");
        let json = emit_summary(&s, &spec, &cfg, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains(&s.spec_hash));
        assert!(fs::read_to_string(json).unwrap().contains(&s.spec_hash));
        let back = McSummary::from_csv(&path).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn hash_tracks_the_config() {
        let spec = small();
        let a = spec_hash(&spec, &PipelineConfig::default()).unwrap();
        let b = spec_hash(&spec, &PipelineConfig { zeta: 2.0, ..PipelineConfig::default() }).unwrap();
        assert_eq!(a.len(), 64);
        assert_ne!(a, b);
    }
}
