//! Command-line front end: data ingestion, subcommands and output files.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::covariate::{
    CovariateModel, CovariateObservation, Dataset, Distribution, ErrorKind, ErrorModel, RuleConfig, Subject, Theta,
};
use crate::em::{qple_fit, EmConfig, FitResult, NullSpacePolicy};
use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::kernel::{Block, BlockKind, Kernel, SsAnova};
use crate::quadrature::{multivariate_rule, Independent, Method, Univariate};
use crate::sim::{self, Case, ErrorSpec, Estimator, SimConfig, Tuning};
use crate::solver::RepresenterModel;
use crate::tuning::{lambda_grid, select_lambda, Criterion};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "qple", version, about = "Penalized likelihood regression with uncertain covariates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for grid points and replicates.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit at one smoothing parameter.
    Fit(FitArgs),
    /// Select the smoothing parameter over a grid.
    Tune(TuneArgs),
    /// Run a simulation comparison.
    Simulate(SimulateArgs),
    /// Print a quadrature rule.
    Quad(QuadArgs),
    /// Evaluate a saved model.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV with header `y,x1,...,xd`; `NA` marks a missing coordinate.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON mapping subject index (or "default") to an observation spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// `binomial:k` or `poisson`.
    #[arg(long, default_value = "binomial:1")]
    pub family: String,
    /// `cubic`, `tps`, `rbf:h` or `ssanova:<terms>`; defaults by dimension.
    #[arg(long)]
    pub kernel: Option<String>,
    /// `gauss` or `grid`.
    #[arg(long, default_value = "gauss")]
    pub quadrature: String,
    /// Quadrature nodes per coordinate.
    #[arg(long, default_value_t = 7)]
    pub nodes: usize,
    /// Reaction to a failed null-space check: `error`, `warn` or `skip`.
    #[arg(long, default_value = "error")]
    pub null_space: String,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub lambda: f64,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `lo:hi:count` in log10 units.
    #[arg(long, default_value = "-8:1:40", allow_hyphen_values = true)]
    pub lambda_grid: String,
    /// `gacv`, `rangacv`, `loocv` or `tkl`.
    #[arg(long, default_value = "rangacv")]
    pub criterion: String,
    /// Perturbation replicates for `rangacv`.
    #[arg(long, default_value_t = 5)]
    pub replicates: usize,
    #[arg(long)]
    pub sigma_perturb: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV `x1,...,xd,f` with the true natural parameter, for `tkl`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// `i`, `ii`, `iii`, `franke_binomial` or `franke_poisson`.
    #[arg(long, default_value = "i")]
    pub scenario: String,
    /// Number of simulated datasets.
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    /// Subjects per dataset; defaults by scenario.
    #[arg(long)]
    pub n: Option<usize>,
    /// `none`, `normal:sigma` or `uniform:delta`; defaults by scenario.
    #[arg(long)]
    pub error: Option<String>,
    /// Treat the error scale as known (`true`) or estimate it (`false`).
    #[arg(long)]
    pub error_known: Option<bool>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda_grid: Option<String>,
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long, default_value = "gauss")]
    pub quadrature: String,
    #[arg(long, default_value_t = 7)]
    pub nodes: usize,
    /// Comma-separated subset of `full,qple,naive`.
    #[arg(long, default_value = "full,qple,naive")]
    pub methods: String,
    /// Comma-separated subset of `tkl,rangacv`.
    #[arg(long, default_value = "tkl")]
    pub tuning: String,
    /// Perturbation replicates for `rangacv`.
    #[arg(long, default_value_t = 5)]
    pub replicates: usize,
    #[arg(long)]
    pub sigma_perturb: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuadArgs {
    /// One per coordinate: `normal:mean:sd`, `uniform:lo:hi` or
    /// `discrete:v1,v2,...:p1,p2,...`.
    #[arg(long, required = true, allow_hyphen_values = true)]
    pub dist: Vec<String>,
    #[arg(long, default_value_t = 7)]
    pub nodes: usize,
    #[arg(long, default_value = "gauss")]
    pub quadrature: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model JSON written by `fit` or `tune`.
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with header `x1,...,xd`.
    #[arg(long)]
    pub points: Option<PathBuf>,
    /// A single point as comma-separated coordinates; may repeat.
    #[arg(long, allow_hyphen_values = true)]
    pub at: Vec<String>,
}

/// Saved fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub model: RepresenterModel,
    pub theta: Theta,
    pub em_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub rule_updates: usize,
    pub warnings: Vec<String>,
}

impl ModelFile {
    pub fn from_fit(fit: &FitResult) -> Self {
        ModelFile {
            version: MODEL_VERSION,
            model: fit.model.clone(),
            theta: fit.theta.clone(),
            em_trace: fit.em_trace.clone(),
            converged: fit.converged,
            iterations: fit.iterations,
            rule_updates: fit.rule_updates,
            warnings: fit.warnings.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: ModelFile = serde_json::from_str(&read_to_string(path)?)?;
        if m.version != MODEL_VERSION {
            return Err(Error::Usage(format!("unsupported model version {}", m.version)));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Values {
    One(f64),
    Many(Vec<f64>),
}

impl Values {
    fn expand(&self, d: usize, what: &str) -> std::result::Result<Vec<f64>, String> {
        match self {
            Values::One(v) => Ok(vec![*v; d]),
            Values::Many(v) if v.len() == d => Ok(v.clone()),
            Values::Many(v) => Err(format!("{what} has {} entries for {d} coordinates", v.len())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Points {
    Flat(Vec<f64>),
    Nested(Vec<Vec<f64>>),
}

fn default_known() -> bool {
    true
}

/// Observation spec for one subject in the sidecar file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ObservationSpec {
    Exact,
    NormalError {
        sigma: Values,
        #[serde(default = "default_known")]
        known: bool,
    },
    UniformError {
        delta: Values,
        #[serde(default = "default_known")]
        known: bool,
    },
    Discrete {
        values: Points,
        probs: Vec<f64>,
    },
    Normal {
        mean: Values,
        sd: Values,
    },
    MissingModel {
        model: String,
        #[serde(default)]
        regressors: Vec<usize>,
        #[serde(default)]
        normal: Vec<usize>,
        #[serde(default)]
        binary: Vec<usize>,
    },
}

/// Parsed sidecar: a default spec plus per-subject overrides.
#[derive(Debug, Clone, Default)]
pub struct Sidecar {
    pub default: Option<ObservationSpec>,
    pub subjects: BTreeMap<usize, ObservationSpec>,
}

impl Sidecar {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(text)?;
        let mut out = Sidecar::default();
        for (key, value) in raw {
            let spec: ObservationSpec = serde_json::from_value(value)
                .map_err(|e| Error::Usage(format!("invalid observation spec for key '{key}': {e}")))?;
            if key == "default" {
                out.default = Some(spec);
            } else {
                let i = key.parse::<usize>().map_err(|_| {
                    Error::Usage(format!("sidecar key '{key}' is neither a subject index nor \"default\""))
                })?;
                out.subjects.insert(i, spec);
            }
        }
        Ok(out)
    }

    fn get(&self, i: usize) -> ObservationSpec {
        self.subjects.get(&i).or(self.default.as_ref()).cloned().unwrap_or(ObservationSpec::Exact)
    }
}

fn expected_schema(d: Option<usize>) -> String {
    match d {
        Some(d) => format!("expected header y,{}", (1..=d).map(|k| format!("x{k}")).collect::<Vec<_>>().join(",")),
        None => "expected header y,x1,...,xd with d >= 1".into(),
    }
}

fn check_header(header: &csv::StringRecord, leading_y: bool) -> Result<usize> {
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let skip = usize::from(leading_y);
    let d = names.len().saturating_sub(skip);
    let ok = d >= 1
        && (!leading_y || names[0] == "y")
        && names[skip..].iter().enumerate().all(|(k, n)| *n == format!("x{}", k + 1));
    if !ok {
        let want = if leading_y { expected_schema(None) } else { "expected header x1,...,xd with d >= 1".into() };
        return Err(Error::Ingest { row: 1, message: format!("malformed header '{}': {want}", names.join(",")) });
    }
    Ok(d)
}

fn parse_cell(s: &str, line: usize, column: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s == "NA" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Ingest { row: line, message: format!("column {column}: cannot parse '{s}' as a number") })
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes())
}

fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_string(&mut s)?;
    Ok(s)
}

/// Builds a dataset from CSV text and optional sidecar JSON text. Row numbers
/// in errors are file line numbers; the header is line 1.
pub fn ingest_str(data: &str, sidecar: Option<&str>) -> Result<Dataset> {
    let sidecar = match sidecar {
        Some(t) => Sidecar::parse(t)?,
        None => Sidecar::default(),
    };
    let mut rdr = csv_reader(data);
    let d = check_header(rdr.headers()?, true)?;
    let mut subjects = Vec::new();
    let mut error_model: Option<(ErrorModel, usize)> = None;
    let mut covariate_model: Option<CovariateModel> = None;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Ingest { row: line, message: e.to_string() })?;
        if rec.len() != d + 1 {
            return Err(Error::Ingest {
                row: line,
                message: format!("{} fields, {}", rec.len(), expected_schema(Some(d))),
            });
        }
        let y = parse_cell(&rec[0], line, "y")?
            .ok_or_else(|| Error::Ingest { row: line, message: "response y is NA".into() })?;
        let x: Vec<Option<f64>> =
            (0..d).map(|k| parse_cell(&rec[k + 1], line, &format!("x{}", k + 1))).collect::<Result<_>>()?;
        let bad = |message: String| Error::Ingest { row: line, message: format!("subject {i}: {message}") };
        let complete = || -> Result<Vec<f64>> {
            x.iter().map(|v| v.ok_or_else(|| bad("NA present without a missing_model spec".into()))).collect()
        };
        let spec = sidecar.get(i);
        let obs = match &spec {
            ObservationSpec::Exact => CovariateObservation::Exact(complete()?),
            ObservationSpec::NormalError { sigma: s, known } | ObservationSpec::UniformError { delta: s, known } => {
                let kind = match spec {
                    ObservationSpec::NormalError { .. } => ErrorKind::Normal,
                    _ => ErrorKind::Uniform,
                };
                let scale = s.expand(d, "error scale").map_err(bad)?;
                let model = ErrorModel { kind, scale, known: *known };
                model.validate().map_err(|e| bad(e.to_string()))?;
                match &error_model {
                    Some((m, first)) if *m != model => {
                        return Err(bad(format!(
                            "error spec differs from the one given for subject {first}; all noisy subjects share one error law"
                        )));
                    }
                    Some(_) => {}
                    None => error_model = Some((model, i)),
                }
                CovariateObservation::NoisyPoint(complete()?)
            }
            ObservationSpec::Discrete { values, probs } => {
                let values: Vec<Vec<f64>> = match values {
                    Points::Flat(v) if d == 1 => v.iter().map(|&t| vec![t]).collect(),
                    Points::Flat(_) => return Err(bad(format!("discrete values must be {d}-vectors"))),
                    Points::Nested(v) => v.clone(),
                };
                if values.is_empty() || values.len() != probs.len() || values.iter().any(|v| v.len() != d) {
                    return Err(bad("discrete spec needs matching values and probs of the data dimension".into()));
                }
                if probs.iter().any(|p| !(*p > 0.0)) {
                    return Err(bad("discrete probabilities must be positive".into()));
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(bad(format!("discrete probabilities sum to {s}, not 1")));
                }
                CovariateObservation::Discrete { values, probs: probs.clone() }
            }
            ObservationSpec::Normal { mean, sd } => {
                let mean = mean.expand(d, "mean").map_err(bad)?;
                let sd = sd.expand(d, "sd").map_err(bad)?;
                let marginals: Vec<Univariate> =
                    mean.iter().zip(&sd).map(|(&mean, &sd)| Univariate::Normal { mean, sd }).collect();
                for m in &marginals {
                    m.validate().map_err(|e| bad(e.to_string()))?;
                }
                CovariateObservation::Distributional(Distribution::Independent(marginals))
            }
            ObservationSpec::MissingModel { model, regressors, normal, binary } => {
                let m = match model.as_str() {
                    "normal_chain" => CovariateModel::normal_chain(d),
                    "custom" => CovariateModel {
                        regressors: regressors.clone(),
                        normal: normal.clone(),
                        binary: binary.clone(),
                    },
                    other => {
                        return Err(bad(format!("unknown missing model '{other}', expected normal_chain or custom")))
                    }
                };
                m.validate(d).map_err(|e| bad(e.to_string()))?;
                match &covariate_model {
                    Some(prev) if *prev != m => {
                        return Err(bad("all subjects must share one missing-data model".into()));
                    }
                    Some(_) => {}
                    None => covariate_model = Some(m),
                }
                CovariateObservation::PartiallyMissing(x.clone())
            }
        };
        subjects.push(Subject { y, obs });
    }
    if subjects.is_empty() {
        return Err(Error::Ingest { row: 2, message: "no data rows".into() });
    }
    if let Some(&k) = sidecar.subjects.keys().find(|&&k| k >= subjects.len()) {
        return Err(Error::Usage(format!("sidecar refers to subject {k} but the data has {} rows", subjects.len())));
    }
    Dataset::new(subjects, error_model.map(|(m, _)| m), covariate_model)
}

pub fn ingest(data: &Path, sidecar: Option<&Path>) -> Result<Dataset> {
    let text = read_to_string(data)?;
    let side = sidecar.map(read_to_string).transpose()?;
    ingest_str(&text, side.as_deref())
}

/// Reads a CSV of points with header `x1,...,xd` followed by `extra`
/// trailing columns.
fn read_points(path: &Path, extra: &[&str]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let text = read_to_string(path)?;
    let mut rdr = csv_reader(&text);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    let split = names.len().saturating_sub(extra.len());
    if names[split..] != *extra {
        return Err(Error::Ingest {
            row: 1,
            message: format!(
                "malformed header '{}': expected x1,...,xd{}",
                names.join(","),
                extra.iter().map(|e| format!(",{e}")).collect::<String>()
            ),
        });
    }
    let x_header: csv::StringRecord = names[..split].iter().collect();
    let d = check_header(&x_header, false)?;
    let mut xs = Vec::new();
    let mut rest = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Ingest { row: line, message: e.to_string() })?;
        let vals: Vec<f64> = rec
            .iter()
            .enumerate()
            .map(|(k, s)| {
                parse_cell(s, line, names.get(k).copied().unwrap_or("?"))?
                    .ok_or_else(|| Error::Ingest { row: line, message: "NA is not allowed here".into() })
            })
            .collect::<Result<_>>()?;
        if vals.len() != names.len() {
            return Err(Error::Ingest { row: line, message: format!("expected {} fields", names.len()) });
        }
        xs.push(vals[..d].to_vec());
        rest.push(vals[d..].to_vec());
    }
    Ok((xs, rest))
}

/// Parses a kernel description. SS-ANOVA terms are joined by `+` and refer
/// to coordinates as `x1..xd`: `cubic(x1)`, `tensor(x1,x2)`, `tps(x1,x2)`,
/// `rbf:h(x1,x2)` and `linear(x1)`; `*w` after a smooth term sets its weight.
pub fn parse_kernel(s: &str) -> Result<Kernel> {
    let s = s.trim();
    let usage = |m: String| Error::Usage(m);
    let kernel = match s {
        "cubic" => Kernel::CubicSpline,
        "tps" => Kernel::ThinPlate,
        _ if s.starts_with("rbf:") => Kernel::Gaussian { bandwidth: parse_num(&s[4..], "rbf bandwidth")? },
        _ if s.starts_with("ssanova:") => {
            let mut blocks = Vec::new();
            let mut linear = Vec::new();
            for term in s[8..].split('+') {
                let term = term.trim();
                let (body, theta) = match term.rsplit_once('*') {
                    Some((b, w)) => (b.trim(), parse_num(w, "term weight")?),
                    None => (term, 1.0),
                };
                let open = body.find('(').ok_or_else(|| usage(format!("kernel term '{term}' lacks '(coords)'")))?;
                let inner = body[open + 1..]
                    .strip_suffix(')')
                    .ok_or_else(|| usage(format!("kernel term '{term}' lacks a closing ')'")))?;
                let coords: Vec<usize> = inner
                    .split(',')
                    .map(|c| {
                        c.trim()
                            .strip_prefix('x')
                            .and_then(|k| k.parse::<usize>().ok())
                            .filter(|&k| k >= 1)
                            .map(|k| k - 1)
                            .ok_or_else(|| usage(format!("kernel term '{term}': coordinates are written x1..xd")))
                    })
                    .collect::<Result<_>>()?;
                let name = &body[..open];
                let kind = match name {
                    "linear" => {
                        linear.extend(coords);
                        continue;
                    }
                    "cubic" => BlockKind::Cubic,
                    "tensor" => BlockKind::CubicTensor,
                    "tps" => BlockKind::ThinPlate,
                    _ if name.starts_with("rbf:") => {
                        BlockKind::Gaussian { bandwidth: parse_num(&name[4..], "rbf bandwidth")? }
                    }
                    _ => return Err(usage(format!("unknown kernel term '{name}'"))),
                };
                blocks.push(Block { kind, coords, theta });
            }
            Kernel::SsAnova(SsAnova { blocks, linear })
        }
        _ => return Err(usage(format!("unknown kernel '{s}', expected cubic, tps, rbf:h or ssanova:<terms>"))),
    };
    kernel.validate().map_err(|e| usage(e.to_string()))?;
    Ok(kernel)
}

fn parse_num(s: &str, what: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Usage(format!("invalid {what} '{s}'")))
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(|t| t.trim().parse()).collect()
}

/// Parses `lo:hi:count`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Usage(format!("lambda grid '{s}' must be lo:hi:count")));
    }
    let count =
        parts[2].trim().parse::<usize>().map_err(|_| Error::Usage(format!("invalid grid count '{}'", parts[2])))?;
    lambda_grid(parse_num(parts[0], "grid end")?, parse_num(parts[1], "grid end")?, count)
}

/// Parses `normal:mean:sd`, `uniform:lo:hi` or `discrete:v1,..:p1,..`.
pub fn parse_dist(s: &str) -> Result<Univariate> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums = |t: &str| -> Result<Vec<f64>> { t.split(',').map(|v| parse_num(v, "number")).collect() };
    let dist = match parts.as_slice() {
        ["normal", m, sd] => Univariate::Normal { mean: parse_num(m, "mean")?, sd: parse_num(sd, "sd")? },
        ["uniform", a, b] => Univariate::Uniform { lo: parse_num(a, "lower end")?, hi: parse_num(b, "upper end")? },
        ["discrete", v, p] => Univariate::Discrete { values: nums(v)?, probs: nums(p)? },
        _ => {
            return Err(Error::Usage(format!(
                "invalid distribution '{s}', expected normal:mean:sd, uniform:lo:hi or discrete:values:probs"
            )))
        }
    };
    dist.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(dist)
}

fn parse_null_space(s: &str) -> Result<NullSpacePolicy> {
    match s {
        "error" => Ok(NullSpacePolicy::Error),
        "warn" => Ok(NullSpacePolicy::Warn),
        "skip" => Ok(NullSpacePolicy::Skip),
        _ => Err(Error::Usage(format!("unknown null-space policy '{s}', expected error, warn or skip"))),
    }
}

fn parse_error_spec(s: &str) -> Result<ErrorSpec> {
    match s.split(':').collect::<Vec<_>>().as_slice() {
        ["none"] => Ok(ErrorSpec::None),
        ["normal", v] => Ok(ErrorSpec::Normal { sigma: parse_num(v, "sigma")? }),
        ["uniform", v] => Ok(ErrorSpec::Uniform { delta: parse_num(v, "delta")? }),
        _ => Err(Error::Usage(format!("invalid error '{s}', expected none, normal:sigma or uniform:delta"))),
    }
}

fn rule_config(nodes: usize, method: &str) -> Result<RuleConfig> {
    if nodes == 0 {
        return Err(Error::Usage("--nodes must be at least 1".into()));
    }
    Ok(RuleConfig { nodes, method: method.parse::<Method>()? })
}

/// Everything `fit` and `tune` need besides the data.
struct Setup {
    family: Family,
    kernel: Option<Kernel>,
    em: EmConfig,
}

impl Setup {
    fn new(a: &DataArgs) -> Result<Self> {
        let family: Family = a.family.parse()?;
        let kernel = a.kernel.as_deref().map(parse_kernel).transpose()?;
        let em = EmConfig {
            rules: rule_config(a.nodes, &a.quadrature)?,
            max_iter: a.max_iter,
            null_space: parse_null_space(&a.null_space)?,
            ..Default::default()
        };
        Ok(Setup { family, kernel, em })
    }

    fn kernel_for(&self, d: usize) -> Result<Kernel> {
        let k = match &self.kernel {
            Some(k) => k.clone(),
            None => match d {
                1 => Kernel::CubicSpline,
                2 => Kernel::ThinPlate,
                _ => return Err(Error::Usage(format!("no default kernel for {d} covariates; pass --kernel"))),
            },
        };
        if let Some(kd) = k.dim() {
            if kd > d {
                return Err(Error::Usage(format!("kernel uses {kd} covariates but the data has {d}")));
            }
        }
        Ok(k)
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn x_header(d: usize) -> String {
    (1..=d).map(|k| format!("x{k}")).collect::<Vec<_>>().join(",")
}

/// Evaluation grid over the covariate range of the model.
pub fn evaluation_grid(model: &RepresenterModel) -> Vec<Vec<f64>> {
    let d = model.scaling.lo.len();
    let per = match d {
        1 => 101,
        2 => 21,
        _ => 6,
    };
    let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
    for k in 0..d {
        let (lo, hi) = (model.scaling.lo[k], model.scaling.hi[k]);
        pts = pts
            .into_iter()
            .flat_map(|p| {
                (0..per).map(move |j| {
                    let mut q = p.clone();
                    q.push(lo + (hi - lo) * j as f64 / (per - 1) as f64);
                    q
                })
            })
            .collect();
    }
    pts
}

/// CSV `x1..xd,f,mean` of the model at `pts`.
pub fn evaluation_csv(model: &RepresenterModel, pts: &[Vec<f64>]) -> Result<String> {
    let (f, mu) = model.evaluate(pts)?;
    let d = model.scaling.lo.len();
    let mut s = format!("{},f,mean\n", x_header(d));
    for ((p, f), m) in pts.iter().zip(&f).zip(&mu) {
        let xs: Vec<String> = p.iter().map(|&v| fmt_f(v)).collect();
        writeln!(s, "{},{},{}", xs.join(","), fmt_f(*f), fmt_f(*m)).expect("string write");
    }
    Ok(s)
}

fn write_fit(out: &Path, fit: &FitResult) -> Result<()> {
    let file = ModelFile::from_fit(fit);
    fs::write(out.join("model.json"), serde_json::to_string_pretty(&file)? + "\n")?;
    let grid = evaluation_grid(&fit.model);
    fs::write(out.join("grid.csv"), evaluation_csv(&fit.model, &grid)?)?;
    Ok(())
}

fn run_fit(a: &FitArgs) -> Result<()> {
    let setup = Setup::new(&a.data)?;
    if !(a.lambda > 0.0 && a.lambda.is_finite()) {
        return Err(Error::Usage(format!("--lambda must be positive, got {}", a.lambda)));
    }
    let ds = ingest(&a.data.data, a.data.spec.as_deref())?;
    let kernel = setup.kernel_for(ds.dim)?;
    let fit = qple_fit(&ds, setup.family, &kernel, a.lambda, &setup.em, None)?;
    fs::create_dir_all(&a.data.out)?;
    write_fit(&a.data.out, &fit)?;
    println!(
        "lambda={} converged={} iterations={} objective={}",
        fmt_f(fit.lambda),
        fit.converged,
        fit.iterations,
        fmt_f(*fit.em_trace.last().unwrap_or(&f64::NAN))
    );
    Ok(())
}

fn run_tune(a: &TuneArgs) -> Result<()> {
    let setup = Setup::new(&a.data)?;
    let grid = parse_grid(&a.lambda_grid)?;
    if a.criterion == "tkl" && a.truth.is_none() {
        return Err(Error::Usage("--criterion tkl requires --truth".into()));
    }
    if a.criterion == "rangacv" && a.replicates == 0 {
        return Err(Error::Usage("--replicates must be at least 1".into()));
    }
    let ds = ingest(&a.data.data, a.data.spec.as_deref())?;
    let criterion = match a.criterion.as_str() {
        "gacv" => Criterion::Gacv,
        "rangacv" => Criterion::RanGacv { replicates: a.replicates, sigma: a.sigma_perturb, seed: a.seed },
        "loocv" => Criterion::Loocv,
        "tkl" => {
            let (x, rest) = read_points(a.truth.as_deref().expect("checked above"), &["f"])?;
            if x.first().is_some_and(|p| p.len() != ds.dim) {
                return Err(Error::Usage(format!("truth file dimension differs from the data ({})", ds.dim)));
            }
            Criterion::Tkl { x, truth: rest.into_iter().map(|r| r[0]).collect() }
        }
        other => {
            return Err(Error::Usage(format!("unknown criterion '{other}', expected gacv, rangacv, loocv or tkl")))
        }
    };
    let kernel = setup.kernel_for(ds.dim)?;
    let res = select_lambda(&ds, setup.family, &kernel, &grid, &criterion, &setup.em)?;
    fs::create_dir_all(&a.data.out)?;
    let mut curve = String::from("lambda,value\n");
    for (l, v) in res.grid.iter().zip(&res.values) {
        let v = v.map_or_else(|| "NA".to_string(), fmt_f);
        writeln!(curve, "{},{v}", fmt_f(*l)).expect("string write");
    }
    fs::write(a.data.out.join("criterion.csv"), curve)?;
    write_fit(&a.data.out, &res.fit)?;
    println!("criterion={} lambda={} index={}", criterion.name(), fmt_f(res.lambda), res.index);
    Ok(())
}

fn run_simulate(a: &SimulateArgs) -> Result<()> {
    let case: Case = a.scenario.parse()?;
    let mut cfg = SimConfig::for_case(case);
    cfg.replicates = a.runs;
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(e) = &a.error {
        cfg.error = parse_error_spec(e)?;
    }
    if let Some(k) = a.error_known {
        cfg.error_known = k;
    }
    if let Some(g) = &a.lambda_grid {
        cfg.grid = parse_grid(g)?;
    }
    if let Some(k) = &a.kernel {
        cfg.kernel = parse_kernel(k)?;
    }
    cfg.em.rules = rule_config(a.nodes, &a.quadrature)?;
    cfg.estimators = parse_list::<Estimator>(&a.methods)?;
    cfg.tunings = parse_list::<Tuning>(&a.tuning)?;
    if cfg.estimators.is_empty() || cfg.tunings.is_empty() {
        return Err(Error::Usage("at least one method and one tuning are required".into()));
    }
    if cfg.tunings.contains(&Tuning::RanGacv) && a.replicates == 0 {
        return Err(Error::Usage("--replicates must be at least 1".into()));
    }
    cfg.rangacv_replicates = a.replicates;
    cfg.sigma_perturb = a.sigma_perturb;
    cfg.seed = a.seed;
    let (rows, infos) = sim::run_comparison(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let mut table = String::from("replicate,method,tuning,lambda_selected,tkl\n");
    for r in &rows {
        writeln!(table, "{},{},{},{},{}", r.replicate, r.method, r.tuning, fmt_f(r.lambda_selected), fmt_f(r.tkl))
            .expect("string write");
    }
    fs::write(a.out.join("comparison.csv"), table)?;
    let mut summary = String::from("method,tuning,min,q1,median,q3,max,mean\n");
    for s in sim::summarize(&rows) {
        writeln!(
            summary,
            "{},{},{},{},{},{},{},{}",
            s.method,
            s.tuning,
            fmt_f(s.min),
            fmt_f(s.q1),
            fmt_f(s.median),
            fmt_f(s.q3),
            fmt_f(s.max),
            fmt_f(s.mean)
        )
        .expect("string write");
    }
    print!("{summary}");
    fs::write(a.out.join("summary.csv"), summary)?;
    if case.missingness_threshold().is_some() {
        let mean = infos.iter().map(|i| i.incomplete as f64).sum::<f64>() / infos.len() as f64;
        println!("mean incomplete subjects: {mean}");
    }
    Ok(())
}

fn run_quad(a: &QuadArgs) -> Result<()> {
    let rc = rule_config(a.nodes, &a.quadrature)?;
    let marginals: Vec<Univariate> = a.dist.iter().map(|s| parse_dist(s)).collect::<Result<_>>()?;
    let d = marginals.len();
    let rule = multivariate_rule(&Independent(marginals), &vec![rc.nodes; d], rc.method)?;
    let mut s = format!("{},weight\n", x_header(d));
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        let xs: Vec<String> = x.iter().map(|&v| fmt_f(v)).collect();
        writeln!(s, "{},{}", xs.join(","), fmt_f(*w)).expect("string write");
    }
    print!("{s}");
    Ok(())
}

fn run_evaluate(a: &EvaluateArgs) -> Result<()> {
    let file = ModelFile::load(&a.model)?;
    let d = file.model.scaling.lo.len();
    let mut pts = match &a.points {
        Some(p) => read_points(p, &[])?.0,
        None => Vec::new(),
    };
    for s in &a.at {
        pts.push(s.split(',').map(|v| parse_num(v, "coordinate")).collect::<Result<_>>()?);
    }
    if pts.is_empty() {
        return Err(Error::Usage("evaluate needs --points or --at".into()));
    }
    if let Some(p) = pts.iter().find(|p| p.len() != d) {
        return Err(Error::Usage(format!("point {p:?} has {} coordinates, the model expects {d}", p.len())));
    }
    print!("{}", evaluation_csv(&file.model, &pts)?);
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot configure {j} worker threads: {e}")))?;
    }
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Tune(a) => run_tune(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Quad(a) => run_quad(a),
        Command::Evaluate(a) => run_evaluate(a),
    }
}

fn one_line(s: &str) -> String {
    s.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

/// Parses arguments, runs the command and returns the process exit code.
/// Failures print one line `error[kind]: message` to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return 0;
            }
            let msg = e.render().to_string();
            let msg = msg.strip_prefix("error: ").unwrap_or(&msg);
            eprintln!("error[usage]: {}", one_line(msg));
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}
