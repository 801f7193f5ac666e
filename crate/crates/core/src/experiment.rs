//! Config-driven experiment runner behind the `mildpos` binary.
//!
//! A run reads a TOML config, applies dotted `key=value` overrides,
//! validates everything up front, executes one experiment and writes a JSON
//! manifest plus CSV series into the output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::coefficients::{estimate_a3_constant, CoefficientModel, CurveSampler, DriftKind, ModeFunction};
use crate::error::{Error, Result};
use crate::function_space::{Grid, GridFunction};
use crate::hjm::{
    bond_curve, build_model, positivity_report, simulate_forward_rates, BuiltModel, Classification, HjmDrift,
    HjmModelSpec, RefinementRow,
};
use crate::operators::OperatorSuite;
use crate::regularization::{
    brezis_strauss_check, ito_deterministic_study, ito_stochastic_study, jensen_check, ConvexFn, MonotoneGraph,
};
use crate::solver::{Scheme, Simulation, SolverConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_BLOW_UP: i32 = 3;
pub const EXIT_ASSERT: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Hjm,
    CheckA3,
    OperatorTests,
    LambdaStudy,
    ItoCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n_nodes: usize,
    pub x_max: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub dt: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub clip_negative: bool,
    /// Overrides the sampled constant for the supermartingale statistic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supermartingale_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialCurve {
    Constant {
        value: f64,
    },
    /// `level + amplitude·e^{−rate·x}`
    ExpBlend {
        level: f64,
        amplitude: f64,
        rate: f64,
    },
    /// `x − shift`
    Linear {
        shift: f64,
    },
    Tabulated {
        values: Vec<f64>,
        tail: f64,
    },
}

impl InitialCurve {
    pub fn build(&self, grid: &Arc<Grid>) -> Result<GridFunction> {
        let g = Arc::clone(grid);
        match *self {
            InitialCurve::Constant { value } => GridFunction::from_fn(g, |_| value),
            InitialCurve::ExpBlend { level, amplitude, rate } => {
                let f = move |x: f64| level + amplitude * (-rate * x).exp();
                GridFunction::from_fn(g, f)
            }
            InitialCurve::Linear { shift } => GridFunction::from_fn(g, |x| x - shift),
            InitialCurve::Tabulated { ref values, tail } => GridFunction::new(g, values.clone(), tail),
        }
    }
}

impl Default for InitialCurve {
    fn default() -> Self {
        InitialCurve::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub modes: Vec<ModeFunction>,
    /// Defaults to the HJM drift for `hjm` runs and zero otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftKind>,
    #[serde(default = "default_true")]
    pub alpha_in_drift: bool,
    #[serde(default)]
    pub initial_curve: InitialCurve,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub seed: u64,
    pub n_paths: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default)]
    pub snapshot_stride: usize,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
    /// Also write one row per path and time step.
    #[serde(default)]
    pub per_path: bool,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv, OutputFormat::Json]
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: default_directory(),
            snapshot_stride: 0,
            formats: default_formats(),
            per_path: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct A3Section {
    #[serde(default = "default_a3_samples")]
    pub samples: usize,
    #[serde(default = "default_a3_tol")]
    pub tol: f64,
}

fn default_a3_samples() -> usize {
    200
}

fn default_a3_tol() -> f64 {
    crate::coefficients::DEFAULT_A3_TOL
}

impl Default for A3Section {
    fn default() -> Self {
        A3Section {
            samples: default_a3_samples(),
            tol: default_a3_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksSection {
    #[serde(default = "default_500")]
    pub submarkov: usize,
    #[serde(default = "default_500")]
    pub l1_contraction: usize,
    #[serde(default = "default_1000")]
    pub brezis_strauss: usize,
    #[serde(default = "default_1000")]
    pub jensen: usize,
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
}

fn default_500() -> usize {
    500
}

fn default_1000() -> usize {
    1000
}

fn default_lambda_min() -> f64 {
    1e-3
}

fn default_lambda_max() -> f64 {
    10.0
}

impl Default for ChecksSection {
    fn default() -> Self {
        ChecksSection {
            submarkov: 500,
            l1_contraction: 500,
            brezis_strauss: 1000,
            jensen: 1000,
            lambda_min: default_lambda_min(),
            lambda_max: default_lambda_max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSection {
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItoSection {
    #[serde(default = "default_ito_n")]
    pub n: u32,
    #[serde(default = "default_ito_dts")]
    pub dts: Vec<f64>,
    /// Constant drift of the deterministic case.
    #[serde(default = "default_ito_drift")]
    pub drift: f64,
    /// Constant diffusion of the stochastic case.
    #[serde(default = "default_ito_sigma")]
    pub sigma: f64,
    #[serde(default = "default_ito_n_det")]
    pub n_deterministic: u32,
}

fn default_ito_n() -> u32 {
    1000
}

fn default_ito_n_det() -> u32 {
    10
}

fn default_ito_dts() -> Vec<f64> {
    vec![1e-2, 5e-3, 2.5e-3]
}

fn default_ito_drift() -> f64 {
    -0.5
}

fn default_ito_sigma() -> f64 {
    1.0
}

impl Default for ItoSection {
    fn default() -> Self {
        ItoSection {
            n: default_ito_n(),
            dts: default_ito_dts(),
            drift: default_ito_drift(),
            sigma: default_ito_sigma(),
            n_deterministic: default_ito_n_det(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementSection {
    pub dts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub grid: GridSection,
    pub time: TimeSection,
    #[serde(default)]
    pub model: ModelSection,
    pub noise: NoiseSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub a3: A3Section,
    #[serde(default)]
    pub checks: ChecksSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_study: Option<LambdaSection>,
    #[serde(default)]
    pub ito: ItoSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefinementSection>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub key: String,
    pub message: String,
}

impl Diagnostic {
    fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.key.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.key, self.message)
        }
    }
}

/// Sets `path` (dotted) in a TOML table, creating intermediate tables.
fn set_dotted(root: &mut toml::Table, path: &str, value: toml::Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("invalid key path `{path}`"));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| format!("`{part}` in `{path}` is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Parses config text and applies `key=value` overrides. Parse failures
/// come back as diagnostics.
pub fn parse_config(text: &str, overrides: &[String]) -> std::result::Result<ExperimentConfig, Vec<Diagnostic>> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| vec![Diagnostic::new("", e.to_string().trim().to_string())])?;
    let mut diags = Vec::new();
    for ov in overrides {
        match ov.split_once('=') {
            Some((k, v)) => {
                if let Err(m) = set_dotted(&mut table, k.trim(), parse_override_value(v.trim())) {
                    diags.push(Diagnostic::new(k.trim(), m));
                }
            }
            None => diags.push(Diagnostic::new(ov.clone(), "override must have the form key=value")),
        }
    }
    if !diags.is_empty() {
        return Err(diags);
    }
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let message = e
            .inner()
            .to_string()
            .lines()
            .next()
            .unwrap_or_default()
            .trim()
            .to_string();
        vec![Diagnostic::new(key_of(&path, &message), message)]
    })
}

/// Key path of a deserialization error; a missing field is reported at
/// the field itself rather than its parent table.
fn key_of(path: &str, message: &str) -> String {
    let missing = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next());
    match (missing, path) {
        (Some(field), "." | "") => field.to_string(),
        (Some(field), parent) => format!("{parent}.{field}"),
        (None, ".") => String::new(),
        (None, p) => p.to_string(),
    }
}

pub fn load_config(path: &Path, overrides: &[String]) -> std::result::Result<ExperimentConfig, Vec<Diagnostic>> {
    let text = fs::read_to_string(path)
        .map_err(|e| vec![Diagnostic::new("", format!("cannot read {}: {e}", path.display()))])?;
    parse_config(&text, overrides)
}

/// Reads and fully validates a config file without running it.
pub fn validate_file(path: &Path) -> Result<Vec<Diagnostic>> {
    let text = fs::read_to_string(path)?;
    Ok(match parse_config(&text, &[]) {
        Ok(cfg) => validate(&cfg),
        Err(d) => d,
    })
}

fn positive(diags: &mut Vec<Diagnostic>, key: &str, v: f64) {
    if !(v.is_finite() && v > 0.0) {
        diags.push(Diagnostic::new(key, format!("must be positive and finite, got {v}")));
    }
}

/// Every constraint violation in `cfg`, keyed by its config path.
pub fn validate(cfg: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut d = Vec::new();
    if cfg.grid.n_nodes < 2 {
        d.push(Diagnostic::new(
            "grid.n_nodes",
            format!("need at least 2 nodes, got {}", cfg.grid.n_nodes),
        ));
    }
    positive(&mut d, "grid.x_max", cfg.grid.x_max);
    positive(&mut d, "grid.alpha", cfg.grid.alpha);
    positive(&mut d, "time.dt", cfg.time.dt);
    positive(&mut d, "time.T", cfg.time.t_final);
    if let Some(l) = cfg.time.lambda {
        positive(&mut d, "time.lambda", l);
    }
    if let Some(c) = cfg.time.supermartingale_c {
        if !(c.is_finite() && c >= 0.0) {
            d.push(Diagnostic::new(
                "time.supermartingale_c",
                format!("must be ≥ 0, got {c}"),
            ));
        }
    }
    if cfg.noise.n_paths == 0 {
        d.push(Diagnostic::new("noise.n_paths", "need at least one path"));
    }
    if cfg.a3.samples == 0 {
        d.push(Diagnostic::new("a3.samples", "need at least one sample"));
    }
    if cfg.output.formats.is_empty() {
        d.push(Diagnostic::new("output.formats", "no output format selected"));
    }

    let grid = if d.iter().any(|x| x.key.starts_with("grid.")) {
        None
    } else {
        Grid::uniform(cfg.grid.n_nodes, cfg.grid.x_max, cfg.grid.alpha)
            .ok()
            .map(Arc::new)
    };
    let n_nodes = cfg.grid.n_nodes;

    for (i, mode) in cfg.model.modes.iter().enumerate() {
        if let Err(e) = mode.validate(n_nodes) {
            d.push(Diagnostic::new(format!("model.modes[{i}]"), e.to_string()));
        }
    }
    match &cfg.model.drift {
        Some(DriftKind::Hjm) if cfg.model.modes.is_empty() => {
            d.push(Diagnostic::new("model.drift", "hjm drift needs at least one mode"))
        }
        Some(DriftKind::Tabulated { values }) if values.len() != n_nodes => d.push(Diagnostic::new(
            "model.drift.values",
            format!("expected {n_nodes} values, got {}", values.len()),
        )),
        Some(DriftKind::LinearDecay { c }) if !c.is_finite() => {
            d.push(Diagnostic::new("model.drift.c", "must be finite"))
        }
        _ => {}
    }
    if cfg.experiment == ExperimentKind::Hjm && cfg.model.modes.is_empty() && cfg.model.drift.is_none() {
        d.push(Diagnostic::new(
            "model.modes",
            "hjm runs need at least one mode or an explicit drift",
        ));
    }

    if let Some(grid) = &grid {
        let h = grid.spacing();
        if cfg.time.dt.is_finite() && cfg.time.dt > 0.0 {
            let k = (cfg.time.dt / h).round();
            if k < 1.0 || (k * h - cfg.time.dt).abs() > 1e-9 * cfg.time.dt {
                d.push(Diagnostic::new(
                    "time.dt",
                    format!(
                        "dt = {} is not an integer multiple of the grid spacing h = {h}",
                        cfg.time.dt
                    ),
                ));
            }
            if cfg.time.t_final.is_finite() && cfg.time.t_final > 0.0 {
                let s = (cfg.time.t_final / cfg.time.dt).round();
                if s < 1.0 || (s * cfg.time.dt - cfg.time.t_final).abs() > 1e-9 * cfg.time.t_final {
                    d.push(Diagnostic::new(
                        "time.T",
                        format!("T = {} is not a multiple of dt = {}", cfg.time.t_final, cfg.time.dt),
                    ));
                }
            }
        }
        match cfg.model.initial_curve.build(grid) {
            Ok(u0) => {
                if cfg.experiment == ExperimentKind::Hjm && u0.min_value() < 0.0 {
                    d.push(Diagnostic::new(
                        "model.initial_curve",
                        "forward-rate runs need a nonnegative initial curve",
                    ));
                }
            }
            Err(e) => d.push(Diagnostic::new("model.initial_curve", e.to_string())),
        }
        if let Some(r) = &cfg.refinement {
            for (i, &dt) in r.dts.iter().enumerate() {
                let k = (dt / h).round();
                if !(dt.is_finite() && dt > 0.0) || k < 1.0 || (k * h - dt).abs() > 1e-9 * dt {
                    d.push(Diagnostic::new(
                        format!("refinement.dts[{i}]"),
                        format!("dt = {dt} is not a positive multiple of h = {h}"),
                    ));
                }
            }
        }
    }

    match (&cfg.experiment, &cfg.lambda_study) {
        (ExperimentKind::LambdaStudy, None) => d.push(Diagnostic::new("lambda_study", "missing section")),
        (_, Some(ls)) => {
            if ls.lambdas.is_empty() {
                d.push(Diagnostic::new("lambda_study.lambdas", "need at least one λ"));
            }
            if ls.lambdas.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
                d.push(Diagnostic::new("lambda_study.lambdas", "λ values must be positive"));
            }
            if ls.lambdas.windows(2).any(|w| w[1] > w[0]) {
                d.push(Diagnostic::new(
                    "lambda_study.lambdas",
                    "λ values must be non-increasing",
                ));
            }
        }
        _ => {}
    }
    if cfg.ito.n == 0 || cfg.ito.n_deterministic == 0 {
        d.push(Diagnostic::new("ito.n", "g_n index must be at least 1"));
    }
    if cfg.ito.dts.is_empty() || cfg.ito.dts.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
        d.push(Diagnostic::new("ito.dts", "need positive step sizes"));
    }
    if cfg.checks.lambda_min <= 0.0 || cfg.checks.lambda_max < cfg.checks.lambda_min {
        d.push(Diagnostic::new("checks.lambda_min", "need 0 < lambda_min ≤ lambda_max"));
    }
    d
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `output.directory`.
    pub out_dir: Option<PathBuf>,
    pub assert: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub out_dir: PathBuf,
    pub manifest: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
struct Assertion {
    name: String,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Artifacts {
    files: BTreeMap<String, String>,
    manifest: serde_json::Map<String, serde_json::Value>,
    assertions: Vec<Assertion>,
}

impl Artifacts {
    fn csv(&mut self, name: impl Into<String>, body: String) {
        self.files.insert(name.into(), body);
    }

    fn set(&mut self, key: &str, value: serde_json::Value) {
        self.manifest.insert(key.to_string(), value);
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        self.assertions.push(Assertion {
            name: name.to_string(),
            pass,
            detail,
        });
    }
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Executes a validated config and writes its artifacts.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> RunOutcome {
    let started = Instant::now();
    let out_dir = opts.out_dir.clone().unwrap_or_else(|| cfg.output.directory.clone());
    let mut manifest = serde_json::Map::new();
    manifest.insert("experiment".into(), json!(cfg.experiment));
    manifest.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    manifest.insert(
        "config".into(),
        serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
    );
    manifest.insert("seed".into(), json!(cfg.noise.seed));
    manifest.insert("n_paths".into(), json!(cfg.noise.n_paths));

    let diags = validate(cfg);
    let mut artifacts = Artifacts::default();
    let (mut exit_code, errors): (i32, Vec<String>) = if !diags.is_empty() {
        manifest.insert("diagnostics".into(), json!(diags));
        (EXIT_VALIDATION, diags.iter().map(|d| d.to_string()).collect())
    } else {
        match execute(cfg, &mut artifacts) {
            Ok(()) => (EXIT_OK, Vec::new()),
            Err(e @ Error::BlowUp { .. }) => (EXIT_BLOW_UP, vec![e.to_string()]),
            Err(
                e @ (Error::NonConformingStep(_) | Error::Domain { .. } | Error::InvalidModel(_) | Error::Config(_)),
            ) => (EXIT_VALIDATION, vec![e.to_string()]),
            Err(e) => (EXIT_FAILURE, vec![e.to_string()]),
        }
    };
    for (k, v) in std::mem::take(&mut artifacts.manifest) {
        manifest.insert(k, v);
    }
    if exit_code == EXIT_OK && opts.assert && artifacts.assertions.iter().any(|a| !a.pass) {
        exit_code = EXIT_ASSERT;
    }
    manifest.insert("assertions".into(), json!(artifacts.assertions));
    manifest.insert("errors".into(), json!(errors));
    manifest.insert("status".into(), json!(if errors.is_empty() { "ok" } else { "error" }));
    manifest.insert("exit_code".into(), json!(exit_code));

    let write_csv = cfg.output.formats.contains(&OutputFormat::Csv);
    let file_names: Vec<String> = if write_csv {
        artifacts.files.keys().cloned().collect()
    } else {
        Vec::new()
    };
    manifest.insert("artifacts".into(), json!(file_names));
    manifest.insert("wall_time_seconds".into(), json!(started.elapsed().as_secs_f64()));
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    manifest.insert("timestamp_unix".into(), json!(stamp));
    let manifest = serde_json::Value::Object(manifest);

    let written = fs::create_dir_all(&out_dir).and_then(|()| {
        if write_csv {
            for (name, body) in &artifacts.files {
                fs::write(out_dir.join(name), body)?;
            }
        }
        // The manifest carries errors and diagnostics, so it is always written.
        let text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        fs::write(out_dir.join("manifest.json"), text + "\n")
    });
    if let Err(e) = written {
        eprintln!("failed to write artifacts to {}: {e}", out_dir.display());
        if exit_code == EXIT_OK {
            exit_code = EXIT_FAILURE;
        }
    }
    RunOutcome {
        exit_code,
        out_dir,
        manifest,
    }
}

fn execute(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let grid = Arc::new(Grid::uniform(cfg.grid.n_nodes, cfg.grid.x_max, cfg.grid.alpha)?);
    match cfg.experiment {
        ExperimentKind::Simulate | ExperimentKind::Hjm => run_forward(cfg, &grid, art),
        ExperimentKind::CheckA3 => run_check_a3(cfg, &grid, art),
        ExperimentKind::OperatorTests => run_operator_tests(cfg, &grid, art),
        ExperimentKind::LambdaStudy => run_lambda_study(cfg, &grid, art),
        ExperimentKind::ItoCheck => run_ito(cfg, art),
    }
}

fn spec_for(cfg: &ExperimentConfig, grid: &Arc<Grid>) -> Result<HjmModelSpec> {
    let u0 = cfg.model.initial_curve.build(grid)?;
    let default_drift = if cfg.experiment == ExperimentKind::Hjm {
        DriftKind::Hjm
    } else {
        DriftKind::Zero
    };
    let drift = match cfg.model.drift.clone().unwrap_or(default_drift) {
        DriftKind::Hjm => HjmDrift::NoArbitrage,
        other => HjmDrift::Custom(other),
    };
    let mut spec = HjmModelSpec::new(u0, cfg.model.modes.clone());
    spec.drift = drift;
    spec.alpha_in_drift = cfg.model.alpha_in_drift;
    Ok(spec)
}

fn solver_config(cfg: &ExperimentConfig, built: &BuiltModel, dt: f64) -> SolverConfig {
    SolverConfig {
        dt,
        t_final: cfg.time.t_final,
        scheme: cfg.time.scheme,
        lambda: cfg.time.lambda,
        clip_negative: cfg.time.clip_negative,
        snapshot_stride: cfg.output.snapshot_stride,
        supermartingale_c: cfg.time.supermartingale_c.unwrap_or_else(|| built.supermartingale_c()),
    }
}

fn run_forward(cfg: &ExperimentConfig, grid: &Arc<Grid>, art: &mut Artifacts) -> Result<()> {
    let spec = spec_for(cfg, grid)?;
    let built = build_model(&spec, cfg.a3.samples, cfg.noise.seed)?;
    let solver = solver_config(cfg, &built, cfg.time.dt);
    let run = simulate_forward_rates(&built, &spec.initial_curve, cfg.noise.n_paths, &solver, cfg.noise.seed)?;

    let mut refinement = Vec::new();
    if let Some(r) = &cfg.refinement {
        for &dt in &r.dts {
            let mut c = solver_config(cfg, &built, dt);
            c.snapshot_stride = 0;
            let sim = Simulation::new(built.suite.clone(), built.model.clone(), c.clone())?;
            let paths = sim.simulate_ensemble(&spec.initial_curve, cfg.noise.n_paths, cfg.noise.seed)?;
            let s = crate::solver::ensemble_stats(&paths, c.supermartingale_c)?;
            refinement.push(RefinementRow {
                dt,
                neg_energy_mean: *s.neg_energy_mean.last().unwrap_or(&0.0),
            });
        }
    }
    let verdict = positivity_report(&built.a3, &run.summary, &refinement);

    let s = &run.summary;
    let mut csv = String::from(
        "t,neg_energy_mean,neg_energy_p95,min_value_min,supermartingale_mean,frac_below_1e-6,frac_below_1e-3,frac_below_1e-2\n",
    );
    for j in 0..s.times.len() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            num(s.times[j]),
            num(s.neg_energy_mean[j]),
            num(s.neg_energy_p95[j]),
            num(s.min_value_min[j]),
            num(s.supermartingale_mean[j]),
            num(s.frac_below[0].1[j]),
            num(s.frac_below[1].1[j]),
            num(s.frac_below[2].1[j]),
        );
    }
    art.csv("ensemble.csv", csv);

    let mut snapshot_times = Vec::new();
    for (k, band) in run.bands.iter().enumerate() {
        let mut c = String::from("x,u_mean,u_p5,u_p95\n");
        for i in 0..band.x.len() {
            let _ = writeln!(
                c,
                "{},{},{},{}",
                num(band.x[i]),
                num(band.mean[i]),
                num(band.p5[i]),
                num(band.p95[i])
            );
        }
        art.csv(format!("curve_{k:04}.csv"), c);
        snapshot_times.push(json!({"index": k, "t": band.t, "h_alpha_mean": band.h_alpha_mean}));
    }
    if cfg.experiment == ExperimentKind::Hjm {
        if let Some(last) = run.bands.last() {
            let mean_curve = GridFunction::new(Arc::clone(grid), last.mean.clone(), *last.mean.last().unwrap_or(&0.0))?;
            let bonds = bond_curve(&mean_curve);
            let mut c = String::from("x,price\n");
            for (x, p) in bonds.maturities.iter().zip(&bonds.prices) {
                let _ = writeln!(c, "{},{}", num(*x), num(*p));
            }
            art.csv("bonds.csv", c);
        }
    }
    if cfg.output.per_path {
        let mut c = String::from("path,t,neg_energy,min_value,supermartingale_stat,short_rate\n");
        let sim = Simulation::new(
            built.suite.clone(),
            built.model.clone(),
            SolverConfig {
                snapshot_stride: 0,
                ..solver.clone()
            },
        )?;
        let paths = sim.simulate_ensemble(&spec.initial_curve, cfg.noise.n_paths, cfg.noise.seed)?;
        for p in &paths {
            for j in 0..p.times.len() {
                let _ = writeln!(
                    c,
                    "{},{},{},{},{},{}",
                    p.stream_id,
                    num(p.times[j]),
                    num(p.neg_energy[j]),
                    num(p.min_value[j]),
                    num(p.supermartingale_stat[j]),
                    num(p.short_rate[j])
                );
            }
        }
        art.csv("paths.csv", c);
    }

    let expected = if built.a3.satisfied() {
        Classification::ConsistentWithTheorem
    } else {
        Classification::CounterexampleRegime
    };
    art.check(
        "verdict",
        verdict.classification == expected,
        format!("classification {:?}, expected {:?}", verdict.classification, expected),
    );
    art.set("a3", json!(built.a3));
    art.set("verdict", json!(verdict));
    art.set("supermartingale_c", json!(solver.supermartingale_c));
    art.set(
        "diagnostics",
        json!({
            "snapshots": snapshot_times,
            "short_rate_negative_final": s.short_rate_negative.last(),
            "clipped": s.any_clipped,
        }),
    );
    Ok(())
}

fn run_check_a3(cfg: &ExperimentConfig, grid: &Arc<Grid>, art: &mut Artifacts) -> Result<()> {
    let spec = spec_for(cfg, grid)?;
    let drift = match &spec.drift {
        HjmDrift::NoArbitrage => DriftKind::Hjm,
        HjmDrift::Custom(k) => k.clone(),
    };
    let alpha_correction = if spec.alpha_in_drift { spec.alpha } else { 0.0 };
    let model = CoefficientModel::new(Arc::clone(grid), spec.modes.clone(), drift, alpha_correction)?;
    let report = estimate_a3_constant(&model, &CurveSampler::new(cfg.noise.seed), cfg.a3.samples, cfg.a3.tol)?;
    art.check("a3", report.satisfied(), format!("{} violations", report.violations));
    art.set("a3", json!(report));
    Ok(())
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        (rng.gen_range(lo.ln()..hi.ln())).exp()
    }
}

fn run_operator_tests(cfg: &ExperimentConfig, grid: &Arc<Grid>, art: &mut Artifacts) -> Result<()> {
    let suite = OperatorSuite::new(Arc::clone(grid));
    let sampler = CurveSampler::new(cfg.noise.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed);
    let (lo, hi) = (cfg.checks.lambda_min, cfg.checks.lambda_max);
    let mut csv = String::from("check,index,lambda,lhs,rhs,pass\n");
    let mut failures = BTreeMap::<&str, usize>::new();
    let mut record = |csv: &mut String, name: &'static str, i: usize, lambda: f64, lhs: f64, rhs: f64, pass: bool| {
        let _ = writeln!(csv, "{name},{i},{},{},{},{pass}", num(lambda), num(lhs), num(rhs));
        *failures.entry(name).or_default() += (!pass) as usize;
    };
    let mut idx = 0u64;
    for i in 0..cfg.checks.submarkov {
        let lambda = log_uniform(&mut rng, lo, hi);
        let r = suite.check_submarkov(lambda, &sampler.unit_profile(grid, idx))?;
        idx += 1;
        record(&mut csv, "submarkov", i, lambda, r.min, r.max, r.pass);
    }
    for i in 0..cfg.checks.l1_contraction {
        let lambda = log_uniform(&mut rng, lo, hi);
        let f = sampler.signed_curve(grid, idx);
        let g = sampler.signed_curve(grid, idx + 1);
        idx += 2;
        let r = suite.check_l1_contraction(lambda, &f, &g)?;
        record(&mut csv, "l1-contraction", i, lambda, r.lhs, r.rhs, r.pass);
    }
    let graphs = [
        MonotoneGraph::Identity,
        MonotoneGraph::Tanh { k: 2.0 },
        MonotoneGraph::ClippedLinear { cap: 0.5 },
        MonotoneGraph::SignSmoothed { eps: 0.05 },
    ];
    for i in 0..cfg.checks.brezis_strauss {
        let lambda = log_uniform(&mut rng, lo, hi);
        let v = sampler.signed_curve(grid, idx);
        idx += 1;
        let r = brezis_strauss_check(&suite, lambda, &v, graphs[i % graphs.len()])?;
        record(&mut csv, "brezis-strauss", i, lambda, r.pairing, 0.0, r.pass);
    }
    let convex = [ConvexFn::Square, ConvexFn::Abs, ConvexFn::SmoothedHinge { delta: 0.1 }];
    for i in 0..cfg.checks.jensen {
        let lambda = log_uniform(&mut rng, lo, hi);
        let v = sampler.signed_curve(grid, idx);
        idx += 1;
        let r = jensen_check(&suite, lambda, &v, convex[i % convex.len()])?;
        record(
            &mut csv,
            "jensen-left",
            i,
            lambda,
            r.of_resolvent,
            r.resolvent_of,
            r.pass_left,
        );
        record(
            &mut csv,
            "jensen-right",
            i,
            lambda,
            r.resolvent_of,
            r.plain,
            r.pass_right,
        );
    }
    art.csv("operator_checks.csv", csv);
    for (name, n) in &failures {
        art.check(name, *n == 0, format!("{n} failures"));
    }
    art.set("diagnostics", json!({ "failures": failures }));
    Ok(())
}

fn run_lambda_study(cfg: &ExperimentConfig, grid: &Arc<Grid>, art: &mut Artifacts) -> Result<()> {
    let spec = spec_for(cfg, grid)?;
    let built = build_model(&spec, cfg.a3.samples, cfg.noise.seed)?;
    let mut solver = solver_config(cfg, &built, cfg.time.dt);
    solver.lambda = None;
    let sim = Simulation::new(built.suite.clone(), built.model.clone(), solver)?;
    let lambdas = &cfg
        .lambda_study
        .as_ref()
        .ok_or_else(|| Error::Config("missing [lambda_study] section".into()))?
        .lambdas;
    let study = sim.lambda_convergence_study(&spec.initial_curve, lambdas, cfg.noise.n_paths, cfg.noise.seed)?;
    let mut csv = String::from("lambda,path,distance\n");
    let mut summary = String::from("lambda,mean_distance\n");
    for row in &study.rows {
        let _ = writeln!(summary, "{},{}", num(row.lambda), num(row.mean));
        for (p, d) in row.distances.iter().enumerate() {
            let _ = writeln!(csv, "{},{p},{}", num(row.lambda), num(*d));
        }
    }
    art.csv("lambda_study.csv", summary);
    art.csv("lambda_study_paths.csv", csv);
    let decreasing = study.rows.windows(2).all(|w| w[1].mean < w[0].mean);
    art.check(
        "lambda-decreasing",
        decreasing,
        "mean sup-distance strictly decreasing in λ".into(),
    );
    art.set("a3", json!(built.a3));
    art.set("diagnostics", json!({ "lambda_study": study.rows.iter().map(|r| json!({"lambda": r.lambda, "mean": r.mean})).collect::<Vec<_>>() }));
    Ok(())
}

fn order_between(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1 / b.1).ln() / (a.0 / b.0).ln()
}

fn run_ito(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let grid = Arc::new(Grid::uniform(cfg.grid.n_nodes, cfg.grid.x_max, cfg.grid.alpha)?);
    let v0 = cfg.model.initial_curve.build(&grid)?;
    let det = ito_deterministic_study(
        cfg.ito.n_deterministic,
        &v0,
        cfg.ito.drift,
        &cfg.ito.dts,
        cfg.time.t_final,
    )?;
    let sto = ito_stochastic_study(
        cfg.ito.n,
        cfg.ito.sigma,
        cfg.grid.alpha,
        &cfg.ito.dts,
        cfg.time.t_final,
        cfg.noise.n_paths,
        cfg.noise.seed,
    )?;
    let mut csv = String::from("case,dt,residual\n");
    for (dt, r) in &det {
        let _ = writeln!(csv, "deterministic,{},{}", num(*dt), num(*r));
    }
    for (dt, r) in &sto {
        let _ = writeln!(csv, "stochastic,{},{}", num(*dt), num(*r));
    }
    art.csv("ito.csv", csv);
    let orders: Vec<f64> = det.windows(2).map(|w| order_between(w[0], w[1])).collect();
    let min_order = orders.iter().copied().fold(f64::INFINITY, f64::min);
    art.check(
        "ito-deterministic-order",
        min_order >= 0.9,
        format!("observed orders {orders:?}"),
    );
    let decreasing = sto.windows(2).all(|w| w[1].1 < w[0].1);
    art.check(
        "ito-stochastic-decreasing",
        decreasing,
        format!("mean residuals {sto:?}"),
    );
    art.set(
        "diagnostics",
        json!({ "deterministic": det, "stochastic": sto, "orders": orders }),
    );
    Ok(())
}
