//! Simulation designs: test functions, data generation, covariate
//! contamination, and the Full / QPLE / Naive comparison.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::index;
use rand::Rng;
use rand::RngCore;
use rand_distr::{Binomial, Distribution, Normal, Poisson, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariate::{CovariateModel, CovariateObservation, Dataset, ErrorKind, ErrorModel, Subject};
use crate::em::{EmConfig, NullSpacePolicy};
use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::kernel::Kernel;
use crate::rng;
use crate::tuning::{fit_path, tkl, Criterion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    I,
    Ii,
    Iii,
    FrankeBinomial,
    FrankePoisson,
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i" => Ok(Case::I),
            "ii" => Ok(Case::Ii),
            "iii" => Ok(Case::Iii),
            "franke_binomial" => Ok(Case::FrankeBinomial),
            "franke_poisson" => Ok(Case::FrankePoisson),
            _ => Err(Error::Usage(format!(
                "unknown scenario '{s}', expected i, ii, iii, franke_binomial or franke_poisson"
            ))),
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Case::I => "i",
            Case::Ii => "ii",
            Case::Iii => "iii",
            Case::FrankeBinomial => "franke_binomial",
            Case::FrankePoisson => "franke_poisson",
        })
    }
}

/// Franke's principal test function on the unit square.
pub fn franke(x1: f64, x2: f64) -> f64 {
    let a = 9.0 * x1;
    let b = 9.0 * x2;
    0.75 * (-((a - 2.0).powi(2) + (b - 2.0).powi(2)) / 4.0).exp()
        + 0.75 * (-((a + 1.0).powi(2) / 49.0 + (b + 1.0).powi(2) / 10.0)).exp()
        + 0.5 * (-((a - 7.0).powi(2) + (b - 3.0).powi(2)) / 4.0).exp()
        - 0.2 * (-((a - 4.0).powi(2) + (b - 7.0).powi(2))).exp()
}

impl Case {
    pub fn dim(&self) -> usize {
        match self {
            Case::FrankeBinomial | Case::FrankePoisson => 2,
            _ => 1,
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Case::I => Family::Binomial { trials: 2 },
            Case::FrankeBinomial => Family::Binomial { trials: 5 },
            _ => Family::Poisson,
        }
    }

    /// Success probability (binomial cases) or Poisson mean at `x`.
    pub fn test_function(&self, x: &[f64]) -> f64 {
        match self {
            Case::I => 0.63 * x[0] * (2.0 * std::f64::consts::PI * x[0]).cos() + 0.36,
            Case::Ii => 16.0 * (-18.0 * (x[0] - 0.4).powi(2)).exp() - 5.0 * (-7.0 * (x[0] - 0.5).powi(2)).exp() + 5.0,
            Case::Iii => {
                let t = x[0];
                1e6 * t.powi(11) * (1.0 - t).powi(6) + 1e4 * t.powi(3) * (1.0 - t).powi(10) + 2.0
            }
            Case::FrankeBinomial => (franke(x[0], x[1]) + 0.198) / 1.24,
            Case::FrankePoisson => 15.0 * franke(x[0], x[1]) + 3.0,
        }
    }

    /// True natural parameter at `x`.
    pub fn truth(&self, x: &[f64]) -> Result<f64> {
        let v = self.test_function(x);
        match self.family() {
            Family::Binomial { trials } => self.family().link(v * trials as f64),
            Family::Poisson => self.family().link(v),
        }
    }

    /// Responses above this trigger covariate deletion.
    pub fn missingness_threshold(&self) -> Option<f64> {
        match self {
            Case::FrankeBinomial => Some(3.0),
            Case::FrankePoisson => Some(10.0),
            _ => None,
        }
    }

    pub fn default_kernel(&self) -> Kernel {
        if self.dim() == 2 {
            Kernel::ThinPlate
        } else {
            Kernel::CubicSpline
        }
    }
}

/// Exactly observed sample drawn from a case.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub case: Case,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Sample {
    pub fn dataset(&self) -> Result<Dataset> {
        let subjects = self
            .x
            .iter()
            .zip(&self.y)
            .map(|(x, &y)| Subject { y, obs: CovariateObservation::Exact(x.clone()) })
            .collect();
        Dataset::new(subjects, None, None)
    }

    pub fn truth(&self) -> Result<Vec<f64>> {
        self.x.iter().map(|x| self.case.truth(x)).collect()
    }
}

/// `n` draws with `X` uniform on the unit cube.
pub fn generate(case: Case, n: usize, rng: &mut impl Rng) -> Result<Sample> {
    if n == 0 {
        return Err(Error::Domain("sample size must be positive".into()));
    }
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: Vec<f64> = (0..case.dim()).map(|_| unit.sample(rng)).collect();
        let v = case.test_function(&xi);
        let yi = match case.family() {
            Family::Binomial { trials } => Binomial::new(u64::from(trials), v)
                .map_err(|e| Error::Domain(format!("binomial probability {v}: {e}")))?
                .sample(rng) as f64,
            Family::Poisson => {
                Poisson::new(v).map_err(|e| Error::Domain(format!("poisson mean {v}: {e}")))?.sample(rng)
            }
        };
        x.push(xi);
        y.push(yi);
    }
    Ok(Sample { case, x, y })
}

/// Deterministic sample for `seed`.
pub fn generate_dataset(case: Case, n: usize, seed: u64) -> Result<Sample> {
    generate(case, n, &mut rng::stream(seed, "data", &[]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorSpec {
    None,
    Normal { sigma: f64 },
    Uniform { delta: f64 },
}

impl ErrorSpec {
    pub fn variance(&self) -> f64 {
        match *self {
            ErrorSpec::None => 0.0,
            ErrorSpec::Normal { sigma } => sigma * sigma,
            ErrorSpec::Uniform { delta } => delta * delta / 3.0,
        }
    }

    /// Error variance over the variance of a uniform covariate.
    pub fn noise_to_signal(&self) -> f64 {
        self.variance() * 12.0
    }
}

/// Keeps `exact` randomly chosen subjects exact and adds error to the rest.
/// Returns the contaminated dataset, the naive version that treats the
/// contaminated values as exact, and warnings.
pub fn apply_measurement_error(
    sample: &Sample,
    spec: ErrorSpec,
    exact: usize,
    known: bool,
    rng: &mut impl Rng,
) -> Result<(Dataset, Dataset, Vec<String>)> {
    let n = sample.x.len();
    if exact > n {
        return Err(Error::Contract(format!("{exact} exact subjects requested from {n}")));
    }
    let keep: Vec<bool> = {
        let mut k = vec![false; n];
        for i in index::sample(rng, n, exact) {
            k[i] = true;
        }
        k
    };
    let (kind, scale) = match spec {
        ErrorSpec::Normal { sigma } if sigma > 0.0 => (ErrorKind::Normal, sigma),
        ErrorSpec::Uniform { delta } if delta > 0.0 => (ErrorKind::Uniform, delta),
        _ => {
            let msg = "zero measurement error: every subject is exact".to_string();
            warn!("{msg}");
            let ds = sample.dataset()?;
            return Ok((ds.clone(), ds, vec![msg]));
        }
    };
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let uniform = Uniform::new_inclusive(-scale, scale).expect("valid range");
    let dim = sample.case.dim();
    let mut subjects = Vec::with_capacity(n);
    let mut naive = Vec::with_capacity(n);
    for i in 0..n {
        let x = &sample.x[i];
        let y = sample.y[i];
        if keep[i] {
            subjects.push(Subject { y, obs: CovariateObservation::Exact(x.clone()) });
            naive.push(Subject { y, obs: CovariateObservation::Exact(x.clone()) });
        } else {
            let xe: Vec<f64> = x
                .iter()
                .map(|v| {
                    v + match kind {
                        ErrorKind::Normal => normal.sample(rng),
                        ErrorKind::Uniform => uniform.sample(rng),
                    }
                })
                .collect();
            subjects.push(Subject { y, obs: CovariateObservation::NoisyPoint(xe.clone()) });
            naive.push(Subject { y, obs: CovariateObservation::Exact(xe) });
        }
    }
    let em = ErrorModel { kind, scale: vec![scale; dim], known };
    Ok((Dataset::new(subjects, Some(em), None)?, Dataset::new(naive, None, None)?, Vec::new()))
}

/// Deletes `x1`, `x2` or both (equal probability) for subjects whose
/// response exceeds the case's threshold. Returns the incomplete dataset
/// with a bivariate normal covariate model, the complete-case dataset, and
/// the number of incomplete subjects.
pub fn apply_missingness(sample: &Sample, rng: &mut impl Rng) -> Result<(Dataset, Dataset, usize)> {
    let threshold = sample
        .case
        .missingness_threshold()
        .ok_or_else(|| Error::Contract(format!("case {} has no missingness mechanism", sample.case)))?;
    let mut subjects = Vec::with_capacity(sample.x.len());
    let mut complete = Vec::new();
    let mut incomplete = 0;
    for (x, &y) in sample.x.iter().zip(&sample.y) {
        if y > threshold {
            let action = rng.random_range(0..3);
            let masked = vec![
                if action == 0 || action == 2 { None } else { Some(x[0]) },
                if action == 1 || action == 2 { None } else { Some(x[1]) },
            ];
            subjects.push(Subject { y, obs: CovariateObservation::PartiallyMissing(masked) });
            incomplete += 1;
        } else {
            subjects.push(Subject { y, obs: CovariateObservation::Exact(x.clone()) });
            complete.push(Subject { y, obs: CovariateObservation::Exact(x.clone()) });
        }
    }
    let model = if incomplete > 0 { Some(CovariateModel::normal_chain(2)) } else { None };
    Ok((Dataset::new(subjects, None, model)?, Dataset::new(complete, None, None)?, incomplete))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Full,
    Qple,
    Naive,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Full => "full",
            Estimator::Qple => "qple",
            Estimator::Naive => "naive",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Estimator::Full),
            "qple" => Ok(Estimator::Qple),
            "naive" => Ok(Estimator::Naive),
            _ => Err(Error::Usage(format!("unknown method '{s}', expected full, qple or naive"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tuning {
    Tkl,
    RanGacv,
}

impl fmt::Display for Tuning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tuning::Tkl => "tkl",
            Tuning::RanGacv => "rangacv",
        })
    }
}

impl FromStr for Tuning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tkl" => Ok(Tuning::Tkl),
            "rangacv" => Ok(Tuning::RanGacv),
            _ => Err(Error::Usage(format!("unknown tuning '{s}', expected tkl or rangacv"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub case: Case,
    pub n: usize,
    pub error: ErrorSpec,
    pub error_known: bool,
    /// Subjects kept error free in the measurement-error designs.
    pub exact: usize,
    pub replicates: usize,
    pub grid: Vec<f64>,
    pub estimators: Vec<Estimator>,
    pub tunings: Vec<Tuning>,
    pub kernel: Kernel,
    pub em: EmConfig,
    pub rangacv_replicates: usize,
    pub sigma_perturb: Option<f64>,
    pub seed: u64,
}

impl SimConfig {
    /// Settings mirroring the published designs, with 20 replicates.
    pub fn for_case(case: Case) -> Self {
        let (n, error, known) = match case {
            Case::I => (101, ErrorSpec::Normal { sigma: 0.145 }, true),
            Case::Ii => (101, ErrorSpec::Uniform { delta: (0.3f64 / 4.0).sqrt() }, false),
            Case::Iii => (101, ErrorSpec::Normal { sigma: (0.25f64 / 12.0).sqrt() }, false),
            Case::FrankeBinomial | Case::FrankePoisson => (300, ErrorSpec::None, true),
        };
        SimConfig {
            case,
            n,
            error,
            error_known: known,
            exact: 5,
            replicates: 20,
            grid: crate::tuning::lambda_grid(-8.0, 1.0, 40).expect("valid grid"),
            estimators: vec![Estimator::Full, Estimator::Qple, Estimator::Naive],
            tunings: vec![Tuning::Tkl],
            kernel: case.default_kernel(),
            em: EmConfig { null_space: NullSpacePolicy::Warn, f_tol: 1e-4, ..Default::default() },
            rangacv_replicates: 5,
            sigma_perturb: None,
            seed: 0,
        }
    }
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub replicate: usize,
    pub method: Estimator,
    pub tuning: Tuning,
    pub lambda_selected: f64,
    pub tkl: f64,
}

/// Replicate-level byproducts other than the table rows.
#[derive(Debug, Clone, Default)]
pub struct ReplicateInfo {
    pub incomplete: usize,
    pub warnings: Vec<String>,
}

/// Datasets for every estimator of one replicate.
fn replicate_data(cfg: &SimConfig, rep: usize) -> Result<(Sample, Vec<(Estimator, Dataset)>, ReplicateInfo)> {
    let sample = generate(cfg.case, cfg.n, &mut rng::stream(cfg.seed, "data", &[rep as u64]))?;
    let mut info = ReplicateInfo::default();
    let (qple, naive) = if cfg.case.missingness_threshold().is_some() {
        let (q, nv, k) = apply_missingness(&sample, &mut rng::stream(cfg.seed, "missing", &[rep as u64]))?;
        info.incomplete = k;
        (q, nv)
    } else {
        let (q, nv, w) = apply_measurement_error(
            &sample,
            cfg.error,
            cfg.exact,
            cfg.error_known,
            &mut rng::stream(cfg.seed, "error", &[rep as u64]),
        )?;
        info.warnings.extend(w);
        (q, nv)
    };
    let full = sample.dataset()?;
    let sets = cfg
        .estimators
        .iter()
        .map(|&e| {
            let ds = match e {
                Estimator::Full => full.clone(),
                Estimator::Qple => qple.clone(),
                Estimator::Naive => naive.clone(),
            };
            (e, ds)
        })
        .collect();
    Ok((sample, sets, info))
}

fn run_replicate(cfg: &SimConfig, rep: usize) -> Result<(Vec<ComparisonRow>, ReplicateInfo)> {
    let (sample, sets, mut info) = replicate_data(cfg, rep)?;
    let truth = sample.truth()?;
    let family = cfg.case.family();
    let mut rows = Vec::new();
    for (ei, (est, ds)) in sets.into_iter().enumerate() {
        let (fits, w) = fit_path(&ds, family, &cfg.kernel, &cfg.grid, &cfg.em);
        info.warnings.extend(w.into_iter().map(|m| format!("replicate {rep} {est}: {m}")));
        for &tuning in &cfg.tunings {
            let criterion = match tuning {
                Tuning::Tkl => Criterion::Tkl { x: sample.x.clone(), truth: truth.clone() },
                Tuning::RanGacv => Criterion::RanGacv {
                    replicates: cfg.rangacv_replicates,
                    sigma: cfg.sigma_perturb,
                    seed: rng::stream(cfg.seed, "rangacv-seed", &[rep as u64, ei as u64]).next_u64(),
                },
            };
            let values: Vec<Option<f64>> = fits
                .iter()
                .map(|f| f.as_ref().and_then(|f| criterion.evaluate(f, &cfg.em).ok().map(|v| v.0)))
                .collect();
            // ties go to the larger lambda
            let mut order: Vec<usize> = (0..cfg.grid.len()).collect();
            order.sort_by(|&a, &b| cfg.grid[b].total_cmp(&cfg.grid[a]));
            let mut best: Option<usize> = None;
            for &k in &order {
                if let Some(v) = values[k].filter(|v| v.is_finite()) {
                    if best.is_none_or(|b| v < values[b].unwrap()) {
                        best = Some(k);
                    }
                }
            }
            let Some(k) = best else {
                return Err(Error::Numeric(format!("replicate {rep} {est}: no lambda could be evaluated by {tuning}")));
            };
            let model = &fits[k].as_ref().expect("evaluated fit").model;
            rows.push(ComparisonRow {
                replicate: rep,
                method: est,
                tuning,
                lambda_selected: cfg.grid[k],
                tkl: tkl(model, &sample.x, &truth)?,
            });
        }
    }
    Ok((rows, info))
}

/// Runs every replicate (concurrently) and returns the rows in replicate,
/// method, tuning order.
pub fn run_comparison(cfg: &SimConfig) -> Result<(Vec<ComparisonRow>, Vec<ReplicateInfo>)> {
    if cfg.replicates == 0 {
        return Err(Error::Usage("at least one replicate is required".into()));
    }
    let out: Vec<Result<(Vec<ComparisonRow>, ReplicateInfo)>> =
        (0..cfg.replicates).into_par_iter().map(|r| run_replicate(cfg, r)).collect();
    let mut rows = Vec::new();
    let mut infos = Vec::new();
    for o in out {
        let (r, i) = o?;
        rows.extend(r);
        infos.push(i);
    }
    Ok((rows, infos))
}

/// Five-number summary plus mean of the TKL values of one method/tuning.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub method: Estimator,
    pub tuning: Tuning,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(rows: &[ComparisonRow]) -> Vec<Summary> {
    let mut keys: Vec<(Estimator, Tuning)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.method, r.tuning)) {
            keys.push((r.method, r.tuning));
        }
    }
    keys.into_iter()
        .map(|(m, t)| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.method == m && r.tuning == t).map(|r| r.tkl).collect();
            v.sort_by(f64::total_cmp);
            Summary {
                method: m,
                tuning: t,
                min: v[0],
                q1: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q3: quantile(&v, 0.75),
                max: v[v.len() - 1],
                mean: v.iter().sum::<f64>() / v.len() as f64,
            }
        })
        .collect()
}
