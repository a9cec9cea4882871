//! Command-line front end: a JSON run configuration plus flag overrides.
//!
//! Everything read from the configuration is validated before any model is
//! fitted or spawned. Validation failures exit with code 2, failures during
//! computation with code 1.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::aggregate::{
    aggregate_squared_cs, cohort_attributions, disaggregation_residual, export_panel, mean_attribution,
    model_attributions, variance_shapley, GlobalAttribution,
};
use crate::audit::{abs_realism_split, bs_realism_split, realism_curve, RealismSettings, SplitAttribution};
use crate::dataset::{load_column, load_csv, Dataset, Schema};
use crate::error::Error;
use crate::games::{Method, EXACT_CAP};
use crate::model::{fit_linear, fit_logistic, ExternalCommand, ModelAdapter};
use crate::par;
use crate::shapley::{
    anchored_cube, anova_cube, anova_with_probabilities, shapley_effects_independent, shapley_exact,
    shapley_from_anchored, Attribution, CubeFunction, Engine,
};
use crate::similarity::{SimilarityRule, SimilarityRules};
use crate::subset::Subset;

#[derive(Debug, Parser)]
#[command(name = "cohort-shapley", version, about = "Cohort, baseline and variance Shapley importance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-subject attributions.
    Local(CommonArgs),
    /// Variance Shapley and its per-subject disaggregation.
    Global(CommonArgs),
    /// Realism rates and realistic/unrealistic attribution splits.
    Audit(CommonArgs),
    /// Anchored and ANOVA decompositions of a 2^d value table.
    Cube(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Data CSV (overrides the configuration).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// cs, cs2, bs, bs2, abs, abs2 or var.
    #[arg(long)]
    pub method: Option<String>,
    /// exact or mc.
    #[arg(long)]
    pub engine: Option<String>,
    /// Permutations for the mc engine.
    #[arg(long)]
    pub permutations: Option<usize>,
    /// Seed for the mc engine and the realism audit.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `all` or a comma-separated list of 1-based subject numbers.
    #[arg(long, alias = "target")]
    pub targets: Option<String>,
    /// `external:<command>`.
    #[arg(long)]
    pub model: Option<String>,
}

/// Failure classes, mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    All(AllKeyword),
    One(usize),
    List(Vec<usize>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllKeyword {
    All,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum BaselineSpec {
    Mean(MeanKeyword),
    Point(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanKeyword {
    Mean,
}

/// Where `f` comes from.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Linear {
        coefficients: Vec<f64>,
        intercept: f64,
    },
    Logistic {
        coefficients: Vec<f64>,
        intercept: f64,
    },
    External {
        command: CommandSpec,
        #[serde(default)]
        workers: Option<usize>,
    },
    /// Logistic regression fitted to a label column of the data file.
    FitLogistic {
        label_column: String,
        #[serde(default)]
        iterations: Option<usize>,
    },
    /// Least squares fitted to a response column of the data file.
    FitLinear { response_column: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum CommandSpec {
    Line(String),
    Argv(Vec<String>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EngineSpec {
    Exact,
    Mc {
        #[serde(default)]
        permutations: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSpec {
    #[serde(default)]
    pub thresholds: Option<Vec<f64>>,
    #[serde(default)]
    pub holdout_fractions: Option<Vec<f64>>,
    #[serde(default)]
    pub runs: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub samples: Option<usize>,
    /// 1-based subjects whose attributions are split by realism.
    #[serde(default)]
    pub split_targets: Vec<usize>,
    /// `bs` (default) or `abs`.
    #[serde(default)]
    pub split_method: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeSpec {
    /// `g(e_u)` indexed by the bitmask of `u`.
    pub values: Vec<f64>,
    /// Bernoulli parameters; every coordinate defaults to 1/2.
    #[serde(default)]
    pub probabilities: Option<Vec<f64>>,
    /// Explicit corner weights; must factor over coordinates.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

/// The JSON run configuration. Relative paths are resolved against the
/// configuration file's directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<Schema>,
    /// Column name to rule; unlisted columns use identity.
    #[serde(default)]
    pub rules: Map<String, Value>,
    #[serde(default)]
    pub prediction_column: Option<String>,
    /// CSV with a header and one prediction column, row-aligned with the data.
    #[serde(default)]
    pub predictions_file: Option<PathBuf>,
    #[serde(default)]
    pub predictions_file_column: Option<String>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub targets: Option<TargetSpec>,
    #[serde(default)]
    pub baseline: Option<BaselineSpec>,
    #[serde(default)]
    pub engine: Option<EngineSpec>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Write the n x d squared-CS matrix in `global`.
    #[serde(default)]
    pub per_subject: bool,
    #[serde(default)]
    pub audit: Option<AuditSpec>,
    #[serde(default)]
    pub cube: Option<CubeSpec>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.predictions_file, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Everything a command needs, validated.
struct Resolved {
    data_path: PathBuf,
    ds: Dataset,
    rules: Vec<SimilarityRule>,
    method: Method,
    engine: Engine,
    targets: Option<Vec<usize>>,
    all_targets: bool,
    baseline: Option<BaselineSpec>,
    model: Option<ModelSpec>,
    out: PathBuf,
}

fn parse_targets(s: &str) -> CliResult<TargetSpec> {
    if s.trim() == "all" {
        return Ok(TargetSpec::All(AllKeyword::All));
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| config_err(format!("bad target `{p}`"))))
        .collect::<CliResult<Vec<_>>>()
        .map(TargetSpec::List)
}

fn merge(args: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(m) = &args.method {
        cfg.method = Some(m.clone());
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    if let Some(t) = args.threads {
        cfg.threads = Some(t);
    }
    if let Some(t) = &args.targets {
        cfg.targets = Some(parse_targets(t)?);
    }
    if let Some(m) = &args.model {
        let cmd = m
            .strip_prefix("external:")
            .ok_or_else(|| config_err(format!("--model expects external:<command>, got `{m}`")))?;
        cfg.model = Some(ModelSpec::External {
            command: CommandSpec::Line(cmd.to_string()),
            workers: None,
        });
    }
    let mut engine = cfg.engine.clone();
    match args.engine.as_deref() {
        None => {}
        Some("exact") => engine = Some(EngineSpec::Exact),
        Some("mc") => {
            if !matches!(engine, Some(EngineSpec::Mc { .. })) {
                engine = Some(EngineSpec::Mc {
                    permutations: None,
                    seed: None,
                });
            }
        }
        Some(other) => return Err(config_err(format!("unknown engine `{other}` (exact or mc)"))),
    }
    if args.permutations.is_some() || args.seed.is_some() {
        match &mut engine {
            Some(EngineSpec::Mc { permutations, seed }) => {
                if args.permutations.is_some() {
                    *permutations = args.permutations;
                }
                if args.seed.is_some() {
                    *seed = args.seed;
                }
            }
            _ if args.permutations.is_some() => {
                return Err(config_err("--permutations needs --engine mc"));
            }
            _ => {}
        }
    }
    cfg.engine = engine;
    if let (Some(seed), Some(a)) = (args.seed, cfg.audit.as_mut()) {
        a.seed = Some(seed);
    }
    Ok(cfg)
}

fn resolve(cfg: &RunConfig, default_method: Method, need_data: bool) -> CliResult<Option<Resolved>> {
    let Some(data_path) = cfg.data.clone() else {
        if need_data {
            return Err(config_err("no data file (set `data` or --data)"));
        }
        return Ok(None);
    };
    let schema = cfg
        .schema
        .clone()
        .ok_or_else(|| config_err("configuration needs a `schema` (column name to kind)"))?;
    let mut ds = load_csv(&data_path, schema.columns(), cfg.prediction_column.as_deref()).map_err(config_err)?;
    if let Some(p) = &cfg.predictions_file {
        if ds.has_predictions() {
            return Err(config_err("set either prediction_column or predictions_file, not both"));
        }
        let col = cfg.predictions_file_column.as_deref().unwrap_or("prediction");
        let y = load_column(p, col).map_err(config_err)?;
        ds = ds.attach_predictions(y).map_err(config_err)?;
    }

    let names = ds.names();
    if let Some(unknown) = cfg.rules.keys().find(|k| !names.contains(k)) {
        return Err(config_err(format!("rule for unknown column `{unknown}`")));
    }
    let rules: Vec<SimilarityRule> = names
        .iter()
        .map(|n| match cfg.rules.get(n) {
            None => Ok(SimilarityRule::Identity),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| config_err(format!("rule for `{n}`: {e}"))),
        })
        .collect::<CliResult<_>>()?;
    SimilarityRules::resolve(&rules, &ds).map_err(config_err)?;

    let method = match &cfg.method {
        Some(m) => m.parse::<Method>().map_err(config_err)?,
        None => default_method,
    };
    let d = ds.d();
    let engine = match &cfg.engine {
        None | Some(EngineSpec::Exact) => {
            if d > EXACT_CAP {
                return Err(config_err(format!(
                    "exact engine supports at most {EXACT_CAP} features (data has {d}); use --engine mc"
                )));
            }
            Engine::Exact
        }
        Some(EngineSpec::Mc { permutations, seed }) => {
            let permutations = permutations.unwrap_or_else(|| Engine::default_permutations(d));
            if permutations < 2 {
                return Err(config_err("mc engine needs at least 2 permutations"));
            }
            Engine::Permutation {
                permutations,
                seed: seed.unwrap_or(0),
            }
        }
    };
    let (targets, all_targets) = match &cfg.targets {
        None => (None, false),
        Some(TargetSpec::All(_)) => (Some((0..ds.n()).collect()), true),
        Some(TargetSpec::One(t)) => (Some(vec![*t]), false),
        Some(TargetSpec::List(ts)) => (Some(ts.clone()), false),
    };
    let targets = match targets {
        Some(ts) if !all_targets => {
            if let Some(bad) = ts.iter().find(|&&t| t == 0 || t > ds.n()) {
                return Err(config_err(format!("target {bad} outside 1..={}", ds.n())));
            }
            Some(ts.into_iter().map(|t| t - 1).collect())
        }
        other => other,
    };
    if let Some(BaselineSpec::Point(p)) = &cfg.baseline {
        if p.len() != d {
            return Err(config_err(format!("baseline has {} values, data has {d} columns", p.len())));
        }
    }
    if let Some(ModelSpec::Linear { coefficients, .. } | ModelSpec::Logistic { coefficients, .. }) = &cfg.model {
        if coefficients.len() != d {
            return Err(config_err(format!(
                "model has {} coefficients, data has {d} columns",
                coefficients.len()
            )));
        }
    }
    if let Some(ModelSpec::External { command, .. }) = &cfg.model {
        let empty = match command {
            CommandSpec::Line(s) => s.trim().is_empty(),
            CommandSpec::Argv(v) => v.is_empty(),
        };
        if empty {
            return Err(config_err("external model command is empty"));
        }
    }
    Ok(Some(Resolved {
        data_path,
        ds,
        rules,
        method,
        engine,
        targets,
        all_targets,
        baseline: cfg.baseline.clone(),
        model: cfg.model.clone(),
        out: cfg.out.clone().unwrap_or_else(|| PathBuf::from("out")),
    }))
}

/// Builds the predictor; fitting reads the label column from the data file.
fn build_model(spec: &ModelSpec, r: &Resolved) -> CliResult<ModelAdapter> {
    Ok(match spec {
        ModelSpec::Linear {
            coefficients,
            intercept,
        } => ModelAdapter::Linear {
            coefficients: coefficients.clone(),
            intercept: *intercept,
        },
        ModelSpec::Logistic {
            coefficients,
            intercept,
        } => ModelAdapter::Logistic {
            coefficients: coefficients.clone(),
            intercept: *intercept,
        },
        ModelSpec::External { command, workers } => {
            let mut cmd = match command {
                CommandSpec::Line(s) => ExternalCommand::parse(s).map_err(config_err)?,
                CommandSpec::Argv(v) => ExternalCommand::new(v.clone()),
            };
            cmd.workers = workers.unwrap_or(1).max(1);
            ModelAdapter::External(cmd)
        }
        ModelSpec::FitLogistic {
            label_column,
            iterations,
        } => {
            let labels = load_column(&r.data_path, label_column).map_err(config_err)?;
            let t0 = Instant::now();
            let m = fit_logistic(&r.ds, &labels, iterations.unwrap_or(100), 1e-10)?;
            info!("fit logistic: {:.3}s", t0.elapsed().as_secs_f64());
            m
        }
        ModelSpec::FitLinear { response_column } => {
            let y = load_column(&r.data_path, response_column).map_err(config_err)?;
            fit_linear(&r.ds, &y)?
        }
    })
}

fn engine_json(e: Engine) -> Value {
    match e {
        Engine::Exact => json!({"kind": "exact"}),
        Engine::Permutation { permutations, seed } => {
            json!({"kind": "mc", "permutations": permutations, "seed": seed})
        }
    }
}

fn named(names: &[String], v: &[f64]) -> Value {
    Value::Object(names.iter().cloned().zip(v.iter().map(|x| json!(x))).collect())
}

/// JSON form of an attribution; subjects are 1-based.
pub fn attribution_json(a: &Attribution, names: &[String]) -> Value {
    let mut m = Map::new();
    m.insert("method".into(), json!(a.method.as_str()));
    if let Some(t) = a.target {
        m.insert("target".into(), json!(t + 1));
    }
    m.insert("phi".into(), named(names, &a.phi));
    m.insert("total".into(), json!(a.total));
    if let Some(se) = &a.stderr {
        m.insert("stderr".into(), named(names, se));
    }
    if let Some(p) = a.permutations_used {
        m.insert("permutations".into(), json!(p));
    }
    Value::Object(m)
}

fn global_json(g: &GlobalAttribution, names: &[String]) -> Value {
    let mut m = Map::new();
    m.insert("method".into(), json!(g.method.as_str()));
    m.insert("phi".into(), named(names, &g.phi_var));
    m.insert("total".into(), json!(g.total_variance));
    if let Some(se) = &g.stderr {
        m.insert("stderr".into(), named(names, se));
    }
    if let Some(p) = g.permutations_used {
        m.insert("permutations".into(), json!(p));
    }
    Value::Object(m)
}

fn split_json(s: &SplitAttribution, names: &[String]) -> Value {
    json!({
        "method": s.method.as_str(),
        "target": s.target.map(|t| t + 1),
        "phi": named(names, &s.phi),
        "total": s.total,
        "phi_realistic": named(names, &s.phi_realistic),
        "phi_unrealistic": named(names, &s.phi_unrealistic),
        "unrealistic_share": s.unrealistic_share(),
    })
}

fn write_json(path: &Path, v: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Runtime(e.into()))
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.into()))
}

fn create_file(path: &Path) -> CliResult<fs::File> {
    fs::File::create(path).map_err(|e| CliError::Runtime(e.into()))
}

fn timed<T>(phase: &str, f: impl FnOnce() -> T) -> T {
    let t0 = Instant::now();
    let v = f();
    info!("{phase}: {:.3}s", t0.elapsed().as_secs_f64());
    v
}

/// Predictions for cohort methods: attached, or from the configured model.
fn ensure_predictions(r: &mut Resolved, model: Option<&ModelAdapter>) -> CliResult<()> {
    if r.ds.has_predictions() {
        return Ok(());
    }
    let model = model.ok_or_else(|| {
        config_err("cohort methods need predictions: set prediction_column, predictions_file or a model")
    })?;
    let y = timed("predict rows", || model.predict_dataset(&r.ds))?;
    r.ds = r.ds.clone().attach_predictions(y)?;
    Ok(())
}

fn baseline_point(r: &Resolved) -> Vec<f64> {
    match &r.baseline {
        Some(BaselineSpec::Point(p)) => p.clone(),
        _ => r.ds.column_means(),
    }
}

pub fn cmd_local(args: &CommonArgs) -> CliResult<()> {
    let cfg = merge(args)?;
    let mut r = resolve(&cfg, Method::Cs, true)?.expect("data required");
    let method = r.method;
    if matches!(method, Method::Var | Method::Table) {
        return Err(config_err(format!("method {method} is not a local method; use `global`")));
    }
    if method.needs_model() && r.model.is_none() {
        return Err(config_err(format!("method {method} needs a model")));
    }
    let targets = r
        .targets
        .clone()
        .ok_or_else(|| config_err("set targets (`all` or a list of subject numbers)"))?;
    let model = r.model.clone().map(|m| build_model(&m, &r)).transpose()?;
    let rules = SimilarityRules::resolve(&r.rules, &r.ds)?;
    let names = r.ds.names();

    let attrs = if method.needs_model() {
        let model = model.as_ref().expect("checked");
        let baseline = baseline_point(&r);
        timed("attributions", || {
            model_attributions(&r.ds, model, method, &targets, Some(&baseline), r.engine)
        })?
    } else {
        ensure_predictions(&mut r, model.as_ref())?;
        timed("attributions", || {
            cohort_attributions(&r.ds, &rules, &targets, method == Method::Cs2, r.engine)
        })?
    };

    create_out(&r.out)?;
    let doc = json!({
        "engine": engine_json(r.engine),
        "attributions": attrs.iter().map(|a| attribution_json(a, &names)).collect::<Vec<_>>(),
    });
    write_json(&r.out.join("attributions.json"), &doc)?;
    if r.all_targets {
        let predictions = match (r.ds.has_predictions(), &model) {
            (true, _) => r.ds.predictions()?.to_vec(),
            (false, Some(m)) => m.predict_dataset(&r.ds)?,
            (false, None) => unreachable!("cohort methods attach predictions"),
        };
        let panel = export_panel(&r.ds, &attrs, &predictions)?;
        panel.write_csv(create_file(&r.out.join("panel.csv"))?)?;
        if method == Method::Cs {
            let residual = mean_attribution(&attrs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            println!("mean unsquared CS over subjects: max |.| = {residual:e}");
        }
    }
    for a in attrs.iter().take(5) {
        println!("{}", serde_json::to_string(&attribution_json(a, &names)).map_err(Error::from)?);
    }
    if attrs.len() > 5 {
        println!("... {} attributions in {}", attrs.len(), r.out.join("attributions.json").display());
    }
    Ok(())
}

pub fn cmd_global(args: &CommonArgs) -> CliResult<()> {
    let mut cfg = merge(args)?;
    // a local method in a shared configuration file does not apply here
    cfg.method = args.method.clone();
    let mut r = resolve(&cfg, Method::Var, true)?.expect("data required");
    if !matches!(r.method, Method::Var | Method::Cs2) {
        return Err(config_err(format!("global computes variance Shapley; method {} not supported", r.method)));
    }
    let model = r.model.clone().map(|m| build_model(&m, &r)).transpose()?;
    ensure_predictions(&mut r, model.as_ref())?;
    let rules = SimilarityRules::resolve(&r.rules, &r.ds)?;
    let names = r.ds.names();

    let direct = timed("variance shapley", || variance_shapley(&r.ds, &rules, r.engine))?;
    let aggregated = timed("squared cohort sweep", || {
        aggregate_squared_cs(&r.ds, &rules, r.engine, cfg.per_subject)
    })?;
    let residual = disaggregation_residual(&direct, &aggregated);

    create_out(&r.out)?;
    let mut doc = global_json(&direct, &names);
    if let Value::Object(m) = &mut doc {
        m.insert("engine".into(), engine_json(r.engine));
        m.insert("aggregated_cs2".into(), global_json(&aggregated, &names));
        m.insert("disaggregation_residual".into(), json!(residual));
    }
    write_json(&r.out.join("global.json"), &doc)?;
    if let Some(rows) = &aggregated.per_subject {
        let mut w = csv::Writer::from_writer(create_file(&r.out.join("per_subject.csv"))?);
        let mut header = vec!["subject".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header).map_err(Error::from)?;
        for (t, row) in rows.iter().enumerate() {
            let mut rec = vec![(t + 1).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(Error::from)?;
        }
        w.flush().map_err(Error::from)?;
    }
    println!("{}", serde_json::to_string(&global_json(&direct, &names)).map_err(Error::from)?);
    println!("disaggregation residual: {residual:e}");
    Ok(())
}

pub fn cmd_audit(args: &CommonArgs) -> CliResult<()> {
    let cfg = merge(args)?;
    let r = resolve(&cfg, Method::Bs, true)?.expect("data required");
    let spec = cfg.audit.clone().unwrap_or_default();
    let defaults = RealismSettings::default();
    let settings = RealismSettings {
        thresholds: spec.thresholds.clone().unwrap_or(defaults.thresholds),
        holdout_fractions: spec.holdout_fractions.clone().unwrap_or(defaults.holdout_fractions),
        runs: spec.runs.unwrap_or(defaults.runs),
        seed: spec.seed.or(args.seed).unwrap_or(defaults.seed),
        samples: spec.samples,
    };
    if settings.runs == 0 {
        return Err(config_err("audit.runs must be at least 1"));
    }
    if let Some(f) = settings.holdout_fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(config_err(format!("holdout fraction {f} must lie in (0, 1)")));
    }
    if let Some(s) = settings.thresholds.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(config_err(format!("threshold scale {s} must be non-negative")));
    }
    let split_method = match spec.split_method.as_deref() {
        None | Some("bs") => Method::Bs,
        Some("abs") => Method::Abs,
        Some(other) => return Err(config_err(format!("split_method must be bs or abs, got `{other}`"))),
    };
    if let Some(bad) = spec.split_targets.iter().find(|&&t| t == 0 || t > r.ds.n()) {
        return Err(config_err(format!("split target {bad} outside 1..={}", r.ds.n())));
    }
    if !spec.split_targets.is_empty() && r.model.is_none() {
        return Err(config_err("split_targets need a model"));
    }

    let report = timed("realism curve", || realism_curve(&r.ds, &r.rules, &settings))?;
    create_out(&r.out)?;
    report.write_csv(create_file(&r.out.join("realism.csv"))?)?;
    for (s, th) in report.thresholds.iter().enumerate() {
        println!(
            "threshold {th}: marginal {:.4}, holdout {:?}",
            report.marginal_rates[s],
            report.holdout_rates[s].iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
    }

    if let (Some(spec_model), false) = (&r.model, spec.split_targets.is_empty()) {
        let model = build_model(spec_model, &r)?;
        let rules = SimilarityRules::resolve(&r.rules, &r.ds)?;
        let names = r.ds.names();
        let baseline = baseline_point(&r);
        let splits = timed("realism splits", || {
            spec.split_targets
                .iter()
                .map(|&t| match split_method {
                    Method::Abs => abs_realism_split(&r.ds, t - 1, &model, &rules, r.engine),
                    _ => bs_realism_split(&r.ds, t - 1, &baseline, &model, &rules, r.engine),
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        let doc = json!({
            "engine": engine_json(r.engine),
            "splits": splits.iter().map(|s| split_json(s, &names)).collect::<Vec<_>>(),
        });
        write_json(&r.out.join("splits.json"), &doc)?;
        for s in &splits {
            println!(
                "subject {}: unrealistic share {:.4}",
                s.target.map_or(0, |t| t + 1),
                s.unrealistic_share()
            );
        }
    }
    Ok(())
}

pub fn cmd_cube(args: &CommonArgs) -> CliResult<()> {
    let cfg = merge(args)?;
    let spec = cfg.cube.clone().ok_or_else(|| config_err("configuration needs a `cube` section"))?;
    let len = spec.values.len();
    if len < 2 || !len.is_power_of_two() {
        return Err(config_err(format!("cube values must have 2^d entries (d >= 1), got {len}")));
    }
    let d = len.trailing_zeros() as usize;
    let g = CubeFunction::new(d, spec.values.clone()).map_err(config_err)?;
    let anova = match (&spec.probabilities, &spec.weights) {
        (Some(_), Some(_)) => return Err(config_err("set probabilities or weights, not both")),
        (None, Some(w)) => anova_cube(&g, w).map_err(config_err)?,
        (p, None) => {
            let p = p.clone().unwrap_or_else(|| vec![0.5; d]);
            if p.len() != d || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(config_err(format!("need {d} probabilities in [0, 1]")));
            }
            anova_with_probabilities(&g, &p)
        }
    };
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));

    let dec = anchored_cube(&g);
    let via_components = shapley_from_anchored(&dec);
    let via_lattice = shapley_exact(&g.as_game()?)?;
    let discrepancy = via_components
        .phi
        .iter()
        .zip(&via_lattice.phi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let effects = shapley_effects_independent(&anova);
    let subset_label = |s: usize| {
        Subset(s as u64)
            .iter()
            .map(|j| (j + 1).to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let table = |v: &[f64]| -> Value {
        Value::Object((0..v.len()).map(|s| (format!("{{{}}}", subset_label(s)), json!(v[s]))).collect())
    };
    let doc = json!({
        "d": d,
        "anchored_components": table(dec.components()),
        "shapley_anchored": via_components.phi,
        "shapley_lattice": via_lattice.phi,
        "max_discrepancy": discrepancy,
        "anova": {
            "probabilities": anova.probabilities(),
            "mean": anova.mean(),
            "sigma2": table(anova.sigma2()),
            "total_variance": anova.total_variance(),
            "shapley_effects": effects.phi,
        },
    });
    create_out(&out)?;
    write_json(&out.join("cube.json"), &doc)?;
    println!("shapley (anchored): {:?}", via_components.phi);
    println!("shapley (lattice):  {:?}", via_lattice.phi);
    println!("max discrepancy: {discrepancy:e}");
    println!("shapley effects: {:?}", effects.phi);
    Ok(())
}

/// Parses nothing; dispatches an already parsed command line.
pub fn run(cli: &Cli) -> CliResult<()> {
    let args = match &cli.command {
        Command::Local(a) | Command::Global(a) | Command::Audit(a) | Command::Cube(a) => a,
    };
    let threads = match args.threads {
        Some(t) => Some(t),
        None => match &args.config {
            Some(p) => RunConfig::load(p)?.threads,
            None => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(config_err("--threads must be at least 1"));
        }
        par::init_threads(t).map_err(config_err)?;
    }
    info!("workers: {}", par::current_num_threads());
    let t0 = Instant::now();
    let result = match &cli.command {
        Command::Local(a) => cmd_local(a),
        Command::Global(a) => cmd_global(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Cube(a) => cmd_cube(a),
    };
    info!("total: {:.3}s", t0.elapsed().as_secs_f64());
    result
}
