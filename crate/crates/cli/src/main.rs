//! `synthbal` command-line front end.
//!
//! Every subcommand resolves its configuration the same way: the optional
//! `--config` JSON is read first, a `--spec` file (where accepted) replaces the
//! `spec` object, and explicit flags override both. The effective config is
//! echoed on stderr and embedded in the output together with the seed, a
//! digest of the config and the tool version, so that any run can be
//! repeated with `--config` pointing at its echoed config.
//!
//! Exit codes: 0 on success, 1 on a domain error (stderr starts with
//! `error:<tag>`), 2 on a usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use synthbal::balancer::{solve_dual, SolverOptions};
use synthbal::data::{load_panel_csv, write_panel_csv, PanelDataset};
use synthbal::dgp::{factor_design, simulate, DgpKind, DgpSpec, LogOdds};
use synthbal::diagnostics::{autocorr_imbalance, placebo_shift};
use synthbal::estimators::{sc_effect_path, sc_estimate, twfe_event_study};
use synthbal::features::FeatureRecipe;
use synthbal::inference::{bootstrap_sc, BootstrapConfig};
use synthbal::montecarlo::{digest, emit_summary, run_study, OracleConfig, PipelineConfig};
use synthbal::theory::{
    ar1_operator_norm, effective_periods_projection, effective_periods_svd, effective_periods_two_way,
    fit_population_objects, growing_factor_effective_periods, EffectivePeriods,
};
use synthbal::Error;

#[derive(Parser)]
#[command(name = "synthbal", version, about = "Synthetic control weights by entropy balancing, with simulators and diagnostics")]
struct Cli {
    /// Worker threads (default: available parallelism, or RAYON_NUM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a panel from a data-generating process.
    Simulate(SimulateArgs),
    /// Synthetic control estimate of the effect path, optionally with a bootstrap.
    Estimate(EstimateArgs),
    /// Event-study path from synthetic control or two-way fixed effects.
    EventStudy(EventStudyArgs),
    /// Treated-minus-control gap in pretreatment autocorrelation.
    Diagnose(DiagnoseArgs),
    /// Shift the adoption date two periods earlier and re-estimate.
    Placebo(PlaceboArgs),
    /// Effective number of periods over a grid of pretreatment lengths.
    EffectivePeriods(EffectivePeriodsArgs),
    /// Monte Carlo study of the estimators and diagnostics.
    Montecarlo(MontecarloArgs),
    /// Population projections, bias term and residual moments for a design.
    Oracle(OracleArgs),
}

#[derive(Args, Serialize)]
struct SpecFlags {
    /// DgpSpec JSON file.
    #[arg(long)]
    #[serde(skip)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t0: Option<usize>,
    #[arg(long)]
    k_post: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    f_dim: Option<usize>,
    #[arg(long, value_enum)]
    log_odds: Option<LogOddsArg>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
enum KindArg {
    #[serde(rename = "TwoWayAR")]
    Ar,
    #[serde(rename = "TwoWayRW")]
    Rw,
    #[serde(rename = "Mixture")]
    Mixture,
    #[serde(rename = "InteractiveFE")]
    Ife,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum LogOddsArg {
    IncludeNu,
    IntegrateNu,
}

#[derive(Args, Serialize)]
struct FitFlags {
    #[arg(long)]
    zeta: Option<f64>,
    /// Feature shorthand: `lags`, `autocorr`, `autocorr:8`, comma separated.
    #[arg(long)]
    features: Option<String>,
    /// Standardize feature columns before balancing.
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Long-format panel CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file for the latent draws (η, ν, π, μ, ...).
    #[arg(long)]
    latent: Option<PathBuf>,
}

#[derive(Args)]
struct InputFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Long-format panel CSV (`unit,time,outcome,treated`).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    t0: Option<usize>,
    #[command(flatten)]
    fit: FitFlags,
    /// Output JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: InputFlags,
    /// Number of bootstrap replicates; no bootstrap when absent.
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    horizon: Option<i64>,
    #[arg(long)]
    stratified: bool,
    #[arg(long)]
    normal_ci: bool,
}

#[derive(Args)]
struct EventStudyArgs {
    #[command(flatten)]
    common: InputFlags,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum EstimatorArg {
    Sc,
    Twfe,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: InputFlags,
    #[arg(long, value_enum)]
    weights: Option<WeightsArg>,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum WeightsArg {
    Sc,
    Uniform,
}

#[derive(Args)]
struct PlaceboArgs {
    #[command(flatten)]
    common: InputFlags,
}

#[derive(Args)]
struct EffectivePeriodsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecFlags,
    /// Comma-separated pretreatment lengths.
    #[arg(long)]
    t0_grid: Option<String>,
    /// Use `d = T0` factors with polynomially decaying strength.
    #[arg(long)]
    grow_factors: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Population size for designs without a closed form.
    #[arg(long)]
    population_n: Option<usize>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MontecarloArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecFlags,
    #[command(flatten)]
    fit: FitFlags,
    #[arg(long = "B", alias = "b")]
    b: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    placebo: bool,
    /// Skip the two-way fixed effects event study.
    #[arg(long)]
    no_twfe: bool,
    /// Fit population objects of this size and record the expansion residual.
    #[arg(long)]
    oracle_population: Option<usize>,
    /// Bootstrap replicates per replication (coverage study).
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Summary CSV; a JSON mirror is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecFlags,
    #[command(flatten)]
    fit: FitFlags,
    /// Sample size of the experiment the ridge refers to (default: spec n).
    #[arg(long)]
    n_experiment: Option<usize>,
    #[arg(long)]
    population_n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure of a run: usage problems exit with 2, domain errors with 1.
enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Usage(msg.into()))
}

// ---------- config resolution ----------

fn read_json(path: &Path) -> Outcome<Value> {
    let text = fs::read_to_string(path).map_err(Error::from)?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

/// Recursively overlay `top` on `base`; nulls in `top` never override.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                if v.is_null() {
                    continue;
                }
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, without_nulls(v));
                    }
                }
            }
        }
        (b, t) => {
            if !t.is_null() {
                *b = t;
            }
        }
    }
}

fn without_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            Value::Object(m.into_iter().filter(|(_, x)| !x.is_null()).map(|(k, x)| (k, without_nulls(x))).collect())
        }
        other => other,
    }
}

fn load_config(path: Option<&PathBuf>) -> Outcome<Value> {
    match path {
        Some(p) => {
            let v = read_json(p)?;
            if !v.is_object() {
                return usage(format!("config {} is not a JSON object", p.display()));
            }
            Ok(v)
        }
        None => Ok(Value::Object(Map::new())),
    }
}

fn finish<T: DeserializeOwned>(value: Value) -> Outcome<T> {
    serde_json::from_value(value).map_err(|e| Failure::Usage(format!("invalid configuration: {e}")))
}

fn flag_true(on: bool) -> Value {
    if on {
        Value::Bool(true)
    } else {
        Value::Null
    }
}

fn apply_spec(cfg: &mut Value, flags: &SpecFlags) -> Outcome<()> {
    if let Some(path) = &flags.spec {
        let spec = read_json(path)?;
        merge(cfg, json!({ "spec": spec }));
    }
    let overrides = serde_json::to_value(flags).map_err(Error::from)?;
    merge(cfg, json!({ "spec": overrides }));
    Ok(())
}

fn recipe_value(fit: &FitFlags) -> Outcome<Value> {
    let mut recipe = match &fit.features {
        Some(s) => serde_json::to_value(FeatureRecipe::parse_list(s)?).map_err(Error::from)?,
        None => Value::Null,
    };
    if fit.standardize {
        if recipe.is_null() {
            recipe = json!({});
        }
        recipe["standardize"] = Value::Bool(true);
    }
    Ok(recipe)
}

fn fit_overrides(fit: &FitFlags) -> Outcome<Value> {
    Ok(json!({
        "zeta": fit.zeta,
        "recipe": recipe_value(fit)?,
        "solver": { "tol": fit.tol, "max_iter": fit.max_iter },
    }))
}

/// Seed, digest and version attached to every output.
#[derive(Serialize)]
struct Provenance<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    seed: Option<u64>,
    config_digest: String,
    config: &'a C,
}

fn provenance<C: Serialize>(config: &C, seed: Option<u64>) -> Outcome<Provenance<'_, C>> {
    let p = Provenance {
        tool: "synthbal",
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_digest: digest(config)?,
        config,
    };
    eprintln!("config {}", serde_json::to_string(config).map_err(Error::from)?);
    Ok(p)
}

fn write_json(out: Option<&PathBuf>, value: &impl Serialize) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    match out {
        Some(p) => fs::write(p, text + "\n").map_err(Error::from)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn write_text(out: Option<&PathBuf>, text: &str) -> Outcome<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(Error::from)?,
        None => print!("{text}"),
    }
    Ok(())
}

// ---------- subcommands ----------

#[derive(Serialize, Deserialize)]
struct SimulateConfig {
    #[serde(default)]
    spec: DgpSpec,
    seed: Option<u64>,
    out: Option<PathBuf>,
    latent: Option<PathBuf>,
}

fn cmd_simulate(a: SimulateArgs) -> Outcome<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    apply_spec(&mut cfg, &a.spec)?;
    merge(&mut cfg, json!({ "seed": a.seed, "out": a.out, "latent": a.latent }));
    let cfg: SimulateConfig = finish(cfg)?;
    let Some(seed) = cfg.seed else { return usage("simulate needs --seed") };
    let Some(out) = cfg.out.clone() else { return usage("simulate needs --out") };
    let prov = provenance(&cfg, Some(seed))?;
    let sim = simulate(&cfg.spec, seed)?;
    write_panel_csv(&sim.panel, &out)?;
    if let Some(path) = &cfg.latent {
        write_json(Some(path), &json!({ "provenance": prov, "latent": sim.latent }))?;
    }
    write_json(
        None,
        &json!({
            "provenance": prov,
            "n": sim.panel.n(),
            "n_treated": sim.panel.n_treated(),
            "periods": sim.panel.periods(),
            "t0": sim.panel.t0(),
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct InputConfig {
    input: Option<PathBuf>,
    t0: Option<usize>,
    #[serde(default = "default_zeta")]
    zeta: f64,
    #[serde(default)]
    recipe: FeatureRecipe,
    #[serde(default)]
    solver: SolverOptions,
    out: Option<PathBuf>,
}

fn default_zeta() -> f64 {
    1.0
}

fn input_overrides(c: &InputFlags) -> Outcome<Value> {
    let mut v = fit_overrides(&c.fit)?;
    merge(&mut v, json!({ "input": c.input, "t0": c.t0, "out": c.out }));
    Ok(v)
}

fn load_input(cfg: &InputConfig) -> Outcome<PanelDataset> {
    let Some(input) = &cfg.input else { return usage("--input is required") };
    let Some(t0) = cfg.t0 else { return usage("--t0 is required") };
    Ok(load_panel_csv(input, t0)?)
}

#[derive(Serialize, Deserialize)]
struct EstimateConfig {
    #[serde(flatten)]
    input: InputConfig,
    bootstrap: Option<BootstrapConfig>,
}

fn cmd_estimate(a: EstimateArgs) -> Outcome<()> {
    let mut cfg = load_config(a.common.config.as_ref())?;
    merge(&mut cfg, input_overrides(&a.common)?);
    if a.bootstrap.is_some() || cfg.get("bootstrap").is_some_and(|b| !b.is_null()) {
        merge(&mut cfg, json!({ "bootstrap": {} }));
        merge(
            &mut cfg,
            json!({ "bootstrap": {
                "b_boot": a.bootstrap,
                "level": a.level,
                "seed": a.seed,
                "horizon": a.horizon,
                "stratified": flag_true(a.stratified),
                "normal_ci": flag_true(a.normal_ci),
            }}),
        );
        if cfg["bootstrap"].get("seed").is_none() {
            return usage("the bootstrap needs --seed");
        }
    }
    let cfg: EstimateConfig = finish(cfg)?;
    let data = load_input(&cfg.input)?;
    let seed = cfg.bootstrap.as_ref().map(|b| b.seed);
    let prov = provenance(&cfg, seed)?;
    let c = &cfg.input;
    let result = sc_estimate(&data, &c.recipe, c.zeta, &c.solver)?;
    if let Some(sol) = &result.weights {
        if sol.hessian_regularized {
            eprintln!("warning: Hessian was regularized; a feature may have no variance");
        }
    }
    let boot = match &cfg.bootstrap {
        Some(b) => {
            let r = bootstrap_sc(&data, &c.recipe, c.zeta, &c.solver, b)?;
            if let Some(w) = &r.warning {
                eprintln!("warning: {w}");
            }
            Some(r)
        }
        None => None,
    };
    write_json(
        c.out.as_ref(),
        &json!({
            "provenance": prov,
            "zeta": c.zeta,
            "horizons": result.horizons,
            "tau_hat": result.tau_hat,
            "n1": result.n1,
            "pi_bar": result.pi_bar,
            "weights": result.weights,
            "bootstrap": boot,
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct EventStudyConfig {
    #[serde(flatten)]
    input: InputConfig,
    #[serde(default = "default_estimator")]
    estimator: EstimatorArg,
}

fn default_estimator() -> EstimatorArg {
    EstimatorArg::Sc
}

fn cmd_event_study(a: EventStudyArgs) -> Outcome<()> {
    let mut cfg = load_config(a.common.config.as_ref())?;
    merge(&mut cfg, input_overrides(&a.common)?);
    merge(&mut cfg, json!({ "estimator": a.estimator }));
    let cfg: EventStudyConfig = finish(cfg)?;
    let data = load_input(&cfg.input)?;
    let prov = provenance(&cfg, None)?;
    let c = &cfg.input;
    let es = match cfg.estimator {
        EstimatorArg::Twfe => twfe_event_study(&data)?,
        EstimatorArg::Sc => {
            let phi = c.recipe.build(&data)?;
            sc_effect_path(&data, &solve_dual(&phi, data.treated(), c.zeta, &c.solver)?)?
        }
    };
    write_json(c.out.as_ref(), &json!({ "provenance": prov, "zeta": c.zeta, "event_study": es }))
}

#[derive(Serialize, Deserialize)]
struct DiagnoseConfig {
    #[serde(flatten)]
    input: InputConfig,
    #[serde(default = "default_weights")]
    weights: WeightsArg,
}

fn default_weights() -> WeightsArg {
    WeightsArg::Sc
}

fn cmd_diagnose(a: DiagnoseArgs) -> Outcome<()> {
    let mut cfg = load_config(a.common.config.as_ref())?;
    merge(&mut cfg, input_overrides(&a.common)?);
    merge(&mut cfg, json!({ "weights": a.weights }));
    let cfg: DiagnoseConfig = finish(cfg)?;
    let data = load_input(&cfg.input)?;
    let prov = provenance(&cfg, None)?;
    let c = &cfg.input;
    let diag = match cfg.weights {
        WeightsArg::Uniform => autocorr_imbalance(&data, None)?,
        WeightsArg::Sc => {
            let phi = c.recipe.build(&data)?;
            let sol = solve_dual(&phi, data.treated(), c.zeta, &c.solver)?;
            autocorr_imbalance(&data, Some(&sol))?
        }
    };
    if diag.n_degenerate > 0 {
        eprintln!("warning: {} units have constant pretreatment outcomes (ρ̂ set to 0)", diag.n_degenerate);
    }
    write_json(c.out.as_ref(), &json!({ "provenance": prov, "zeta": c.zeta, "diagnostic": diag }))
}

fn cmd_placebo(a: PlaceboArgs) -> Outcome<()> {
    let mut cfg = load_config(a.common.config.as_ref())?;
    merge(&mut cfg, input_overrides(&a.common)?);
    let cfg: InputConfig = finish(cfg)?;
    let data = load_input(&cfg)?;
    let prov = provenance(&cfg, None)?;
    let res = placebo_shift(&data, &cfg.recipe, cfg.zeta, &cfg.solver)?;
    write_json(cfg.out.as_ref(), &json!({ "provenance": prov, "placebo": res }))
}

#[derive(Serialize, Deserialize)]
struct EffectivePeriodsConfig {
    #[serde(default)]
    spec: DgpSpec,
    t0_grid: Option<Vec<usize>>,
    #[serde(default)]
    grow_factors: bool,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_population")]
    population_n: usize,
    out: Option<PathBuf>,
}

fn default_population() -> usize {
    100_000
}

fn parse_grid(s: &str) -> Outcome<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<usize>().map_err(|_| Failure::Usage(format!("bad --t0-grid entry {x:?}"))))
        .collect()
}

fn effective_periods_at(cfg: &EffectivePeriodsConfig, t0: usize) -> synthbal::Result<EffectivePeriods> {
    let spec = DgpSpec { t0, ..cfg.spec.clone() };
    match spec.kind {
        DgpKind::InteractiveFE if cfg.grow_factors => {
            growing_factor_effective_periods(t0, spec.kappa, spec.sigma_eps2, cfg.seed)
        }
        DgpKind::InteractiveFE => {
            let design = factor_design(&spec, cfg.seed)?;
            let pre = design.psi.columns(0, t0).into_owned();
            let next = design.psi.column(t0).into_owned();
            effective_periods_svd(&pre, &next, spec.sigma_eps2)
        }
        DgpKind::TwoWayAR => {
            let sigma = ar1_operator_norm(spec.sigma_ar2, spec.rho, t0);
            effective_periods_two_way(spec.sigma_eta2, sigma, t0)
        }
        _ => effective_periods_projection(&simulate(&DgpSpec { n: cfg.population_n, ..spec }, cfg.seed)?),
    }
}

fn cmd_effective_periods(a: EffectivePeriodsArgs) -> Outcome<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    apply_spec(&mut cfg, &a.spec)?;
    let grid = match &a.t0_grid {
        Some(g) => Some(parse_grid(g)?),
        None => None,
    };
    merge(
        &mut cfg,
        json!({
            "t0_grid": grid,
            "grow_factors": flag_true(a.grow_factors),
            "seed": a.seed,
            "population_n": a.population_n,
            "out": a.out,
        }),
    );
    let cfg: EffectivePeriodsConfig = finish(cfg)?;
    let Some(grid) = cfg.t0_grid.clone() else { return usage("effective-periods needs --t0-grid") };
    provenance(&cfg, Some(cfg.seed))?;
    let mut text = String::from("t0,t_e,bound\n");
    for t0 in grid {
        let te = effective_periods_at(&cfg, t0)?;
        text.push_str(&format!("{t0},{},{}\n", te.t_e, te.approx_error2));
    }
    write_text(cfg.out.as_ref(), &text)
}

#[derive(Serialize, Deserialize)]
struct MontecarloConfig {
    #[serde(default)]
    spec: DgpSpec,
    #[serde(default)]
    pipeline: PipelineConfig,
    #[serde(default = "default_b")]
    b: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

fn default_b() -> usize {
    200
}

fn cmd_montecarlo(a: MontecarloArgs) -> Outcome<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    apply_spec(&mut cfg, &a.spec)?;
    let mut pipeline = fit_overrides(&a.fit)?;
    merge(
        &mut pipeline,
        json!({
            "placebo": flag_true(a.placebo),
            "twfe": if a.no_twfe { Value::Bool(false) } else { Value::Null },
        }),
    );
    if let Some(pop) = a.oracle_population {
        pipeline["oracle"] = serde_json::to_value(OracleConfig { population_n: pop }).map_err(Error::from)?;
    }
    if let Some(b_boot) = a.bootstrap {
        pipeline["bootstrap"] = json!({ "b_boot": b_boot });
    }
    merge(&mut cfg, json!({ "pipeline": pipeline, "b": a.b, "seed": a.seed, "out": a.out }));
    let cfg: MontecarloConfig = finish(cfg)?;
    let Some(seed) = cfg.seed else { return usage("montecarlo needs --seed") };
    let prov = provenance(&cfg, Some(seed))?;
    let summary = run_study(&cfg.spec, &cfg.pipeline, cfg.b, seed)?;
    let mirror = match &cfg.out {
        Some(path) => Some(emit_summary(&summary, &cfg.spec, &cfg.pipeline, path)?),
        None => None,
    };
    if summary.failures > 0 {
        eprintln!("warning: {} of {} replications failed and were excluded", summary.failures, summary.b);
    }
    let cells: Vec<Value> = summary
        .cells
        .iter()
        .map(|c| {
            json!({
                "estimator": c.estimator, "horizon": c.horizon, "mean": c.mean, "sd": c.sd,
                "q05": c.q05, "q95": c.q95, "bias": c.bias(),
            })
        })
        .collect();
    write_json(
        None,
        &json!({
            "provenance": prov,
            "spec_hash": summary.spec_hash,
            "failures": summary.failures,
            "json_mirror": mirror,
            "cells": cells,
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct OracleConfigFile {
    #[serde(default)]
    spec: DgpSpec,
    #[serde(default = "default_zeta")]
    zeta: f64,
    #[serde(default)]
    recipe: FeatureRecipe,
    n_experiment: Option<usize>,
    #[serde(default = "default_oracle_population")]
    population_n: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

fn default_oracle_population() -> usize {
    200_000
}

fn cmd_oracle(a: OracleArgs) -> Outcome<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    apply_spec(&mut cfg, &a.spec)?;
    merge(
        &mut cfg,
        json!({
            "zeta": a.fit.zeta,
            "recipe": recipe_value(&a.fit)?,
            "n_experiment": a.n_experiment,
            "population_n": a.population_n,
            "seed": a.seed,
            "out": a.out,
        }),
    );
    let cfg: OracleConfigFile = finish(cfg)?;
    let Some(seed) = cfg.seed else { return usage("oracle needs --seed") };
    let prov = provenance(&cfg, Some(seed))?;
    let n_exp = cfg.n_experiment.unwrap_or(cfg.spec.n);
    let fit = fit_population_objects(&cfg.spec, &cfg.recipe, cfg.zeta, n_exp, cfg.population_n, seed)?;
    let te = simulate(&DgpSpec { n: cfg.population_n, ..cfg.spec.clone() }, seed)
        .and_then(|s| effective_periods_projection(&s))?;
    if cfg.spec.log_odds == LogOdds::IncludeNu {
        eprintln!("note: log-odds include ν, which no pretreatment feature spans; u will not be near 0");
    }
    write_json(cfg.out.as_ref(), &json!({ "provenance": prov, "fit": fit, "effective_periods": te }))
}

fn run(cli: Cli) -> Outcome<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return usage("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::EventStudy(a) => cmd_event_study(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Placebo(a) => cmd_placebo(a),
        Command::EffectivePeriods(a) => cmd_effective_periods(a),
        Command::Montecarlo(a) => cmd_montecarlo(a),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error:{} {e}", e.tag());
            ExitCode::from(1)
        }
    }
}
