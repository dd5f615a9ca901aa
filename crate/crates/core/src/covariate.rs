//! Per-subject covariate observations and their quadrature rules.
//!
//! Every subject is resolved to a discrete distribution over covariate
//! vectors. Error-contaminated points use one shared rule for the error law,
//! shifted to each observed point; partially missing vectors use the
//! conditional law of the missing coordinates under a parametric covariate
//! model. Both models carry nuisance parameters that EM re-estimates.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{self, Independent, Method, MvNormal, QuadratureRule, Univariate};

/// Bound on logistic coefficients once separation is detected.
pub const LOGISTIC_CAP: f64 = 30.0;

#[derive(Debug, Clone)]
pub enum Distribution {
    Independent(Vec<Univariate>),
    MvNormal { mean: Vec<f64>, cov: DMatrix<f64> },
}

impl Distribution {
    pub fn dim(&self) -> usize {
        match self {
            Distribution::Independent(v) => v.len(),
            Distribution::MvNormal { mean, .. } => mean.len(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Distribution::Independent(v) => v.iter().map(|u| u.mean()).collect(),
            Distribution::MvNormal { mean, .. } => mean.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum CovariateObservation {
    Exact(Vec<f64>),
    Discrete {
        values: Vec<Vec<f64>>,
        probs: Vec<f64>,
    },
    Distributional(Distribution),
    /// Observed `x + u` with `u` drawn from the dataset's error model.
    NoisyPoint(Vec<f64>),
    /// Observed coordinates with `None` for the missing ones; the dataset's
    /// covariate model supplies the conditional law.
    PartiallyMissing(Vec<Option<f64>>),
}

impl CovariateObservation {
    pub fn dim(&self) -> usize {
        match self {
            CovariateObservation::Exact(x) | CovariateObservation::NoisyPoint(x) => x.len(),
            CovariateObservation::Discrete { values, .. } => values.first().map_or(0, |v| v.len()),
            CovariateObservation::Distributional(d) => d.dim(),
            CovariateObservation::PartiallyMissing(x) => x.len(),
        }
    }

    /// Observed coordinate values, used to size the covariate rescaling.
    pub fn observed_values(&self) -> Vec<Vec<Option<f64>>> {
        match self {
            CovariateObservation::Exact(x) | CovariateObservation::NoisyPoint(x) => {
                vec![x.iter().map(|&v| Some(v)).collect()]
            }
            CovariateObservation::Discrete { values, .. } => {
                values.iter().map(|x| x.iter().map(|&v| Some(v)).collect()).collect()
            }
            CovariateObservation::Distributional(_) => Vec::new(),
            CovariateObservation::PartiallyMissing(x) => vec![x.clone()],
        }
    }

    pub fn is_exact(&self) -> bool {
        match self {
            CovariateObservation::Exact(_) => true,
            CovariateObservation::PartiallyMissing(x) => x.iter().all(|v| v.is_some()),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// `u_k ~ N(0, sigma_k^2)`.
    Normal,
    /// `u_k ~ U[-delta_k, delta_k]`.
    Uniform,
}

/// Zero-mean additive error shared by all noisy subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    pub kind: ErrorKind,
    /// Standard deviation (normal) or half-width (uniform) per coordinate;
    /// the starting value when the scale is estimated.
    pub scale: Vec<f64>,
    pub known: bool,
}

impl ErrorModel {
    pub fn validate(&self) -> Result<()> {
        if self.scale.is_empty() || self.scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!(
                "error scale must be positive per coordinate, got {:?}; use exact covariates for error-free data",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn variance(&self, scale: &[f64]) -> Vec<f64> {
        scale
            .iter()
            .map(|s| match self.kind {
                ErrorKind::Normal => s * s,
                ErrorKind::Uniform => s * s / 3.0,
            })
            .collect()
    }
}

/// Rule for the error law itself; noisy subjects use `x_err - z_j`.
pub fn error_rule(kind: ErrorKind, scale: &[f64], nodes: usize, method: Method) -> Result<QuadratureRule> {
    let marginals = scale
        .iter()
        .map(|&s| match kind {
            ErrorKind::Normal => Univariate::Normal { mean: 0.0, sd: s },
            ErrorKind::Uniform => Univariate::Uniform { lo: -s, hi: s },
        })
        .collect::<Vec<_>>();
    quadrature::multivariate_rule(&Independent(marginals), &vec![nodes; scale.len()], method)
}

/// Nodes `x_err - z_j` with the error rule's weights.
pub fn shifted_rule(x_err: &[f64], err: &QuadratureRule) -> QuadratureRule {
    QuadratureRule {
        nodes: err.nodes.iter().map(|z| x_err.iter().zip(z).map(|(x, u)| x - u).collect()).collect(),
        weights: err.weights.clone(),
    }
}

/// Missing-data model: a normal block whose mean is linear in always
/// observed regressors, then binary coordinates with logistic conditionals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateModel {
    pub regressors: Vec<usize>,
    pub normal: Vec<usize>,
    pub binary: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateParams {
    /// `(1 + |regressors|) x |normal|`: column `k` holds the intercept and
    /// slopes of the mean of normal coordinate `k`.
    pub mean_coef: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    /// For binary coordinate `k`: coefficients on
    /// `[1, regressors, normal coordinates, binaries before k]`.
    pub logistic: Vec<DVector<f64>>,
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

impl CovariateModel {
    /// Model with every coordinate in the normal block and nothing else.
    pub fn normal_chain(dim: usize) -> Self {
        CovariateModel { regressors: Vec::new(), normal: (0..dim).collect(), binary: Vec::new() }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let mut all: Vec<usize> = self.regressors.iter().chain(&self.normal).chain(&self.binary).copied().collect();
        all.sort_unstable();
        let n = all.len();
        all.dedup();
        if all.len() != n || all.iter().any(|&c| c >= dim) {
            return Err(Error::Contract(format!(
                "covariate model coordinates must be distinct and below {dim}: {self:?}"
            )));
        }
        Ok(())
    }

    fn regressor_row(&self, x: &[f64]) -> Vec<f64> {
        std::iter::once(1.0).chain(self.regressors.iter().map(|&c| x[c])).collect()
    }

    fn logistic_row(&self, x: &[f64], k: usize) -> DVector<f64> {
        let v: Vec<f64> = std::iter::once(1.0)
            .chain(self.regressors.iter().map(|&c| x[c]))
            .chain(self.normal.iter().map(|&c| x[c]))
            .chain(self.binary[..k].iter().map(|&c| x[c]))
            .collect();
        DVector::from_vec(v)
    }

    /// Conditional rule for the missing coordinates given the observed ones.
    pub fn conditional_rule(
        &self,
        x: &[Option<f64>],
        theta: &CovariateParams,
        nodes: usize,
        method: Method,
    ) -> Result<QuadratureRule> {
        for (c, v) in x.iter().enumerate() {
            let modeled = self.normal.contains(&c) || self.binary.contains(&c);
            if v.is_none() && !modeled {
                return Err(Error::Contract(format!(
                    "coordinate x{} is missing but the covariate model does not describe it",
                    c + 1
                )));
            }
        }
        let base: Vec<f64> = x.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let r = DVector::from_vec(self.regressor_row(&base));
        let mu = theta.mean_coef.transpose() * r;
        let obs: Vec<usize> = (0..self.normal.len()).filter(|&k| x[self.normal[k]].is_some()).collect();
        let mis: Vec<usize> = (0..self.normal.len()).filter(|&k| x[self.normal[k]].is_none()).collect();

        let mut rule = if mis.is_empty() {
            QuadratureRule::point(base.clone())
        } else {
            let pick = |rows: &[usize], cols: &[usize]| {
                DMatrix::from_fn(rows.len(), cols.len(), |i, j| theta.cov[(rows[i], cols[j])])
            };
            let s_uu = pick(&mis, &mis);
            let (cmean, ccov) = if obs.is_empty() {
                (DVector::from_fn(mis.len(), |i, _| mu[mis[i]]), s_uu)
            } else {
                let s_oo = pick(&obs, &obs);
                let s_uo = pick(&mis, &obs);
                let chol = s_oo.cholesky().ok_or_else(|| {
                    Error::DegenerateNuisance("observed block of the covariate covariance is singular".into())
                })?;
                let resid = DVector::from_fn(obs.len(), |i, _| base[self.normal[obs[i]]] - mu[obs[i]]);
                let shift = &s_uo * chol.solve(&resid);
                let cm = DVector::from_fn(mis.len(), |i, _| mu[mis[i]] + shift[i]);
                let cc = s_uu - &s_uo * chol.solve(&s_uo.transpose());
                (cm, (&cc + cc.transpose()) * 0.5)
            };
            let mvn = MvNormal::new(cmean.iter().copied().collect(), ccov)
                .map_err(|e| Error::DegenerateNuisance(format!("conditional covariate law: {e}")))?;
            let sub = quadrature::multivariate_rule(&mvn, &vec![nodes; mis.len()], method)?;
            let full_nodes = sub
                .nodes
                .iter()
                .map(|z| {
                    let mut v = base.clone();
                    for (k, &m) in mis.iter().enumerate() {
                        v[self.normal[m]] = z[k];
                    }
                    v
                })
                .collect();
            QuadratureRule { nodes: full_nodes, weights: sub.weights }
        };

        for (k, &c) in self.binary.iter().enumerate() {
            let beta = &theta.logistic[k];
            let mut nodes_out = Vec::with_capacity(rule.len() * 2);
            let mut weights_out = Vec::with_capacity(rule.len() * 2);
            for (z, w) in rule.nodes.iter().zip(&rule.weights) {
                let p1 = sigmoid(beta.dot(&self.logistic_row(z, k)));
                match x[c] {
                    Some(b) => {
                        nodes_out.push(z.clone());
                        weights_out.push(w * if b > 0.5 { p1 } else { 1.0 - p1 });
                    }
                    None => {
                        for (b, p) in [(0.0, 1.0 - p1), (1.0, p1)] {
                            if p > 0.0 {
                                let mut v = z.clone();
                                v[c] = b;
                                nodes_out.push(v);
                                weights_out.push(w * p);
                            }
                        }
                    }
                }
            }
            rule = QuadratureRule { nodes: nodes_out, weights: weights_out };
        }
        QuadratureRule::new(rule.nodes, rule.weights)
    }

    /// Weighted maximum likelihood over `(node, weight)` pairs. Returns the
    /// parameters and any warnings raised by the logistic block.
    pub fn weighted_mle(&self, points: &[(&[f64], f64)]) -> Result<(CovariateParams, Vec<String>)> {
        let total: f64 = points.iter().map(|p| p.1).sum();
        let pr = 1 + self.regressors.len();
        let q = self.normal.len();
        if !(total > (pr + q) as f64) {
            return Err(Error::DegenerateNuisance(format!(
                "covariate model needs more than {} effective observations, have {total}",
                pr + q
            )));
        }
        let mut rtr = DMatrix::zeros(pr, pr);
        let mut rtx = DMatrix::zeros(pr, q);
        for &(x, w) in points {
            let r = DVector::from_vec(self.regressor_row(x));
            let xn = DVector::from_fn(q, |k, _| x[self.normal[k]]);
            rtr += &r * r.transpose() * w;
            rtx += &r * xn.transpose() * w;
        }
        let mean_coef = rtr
            .cholesky()
            .ok_or_else(|| Error::DegenerateNuisance("regressor design of the covariate model is singular".into()))?
            .solve(&rtx);
        let mut cov = DMatrix::zeros(q, q);
        for &(x, w) in points {
            let r = DVector::from_vec(self.regressor_row(x));
            let e = DVector::from_fn(q, |k, _| x[self.normal[k]]) - mean_coef.transpose() * r;
            cov += &e * e.transpose() * w;
        }
        cov /= total;
        if q > 0 && cov.clone().cholesky().is_none() {
            return Err(Error::DegenerateNuisance(format!("estimated covariate covariance is singular: {cov}")));
        }
        let mut warnings = Vec::new();
        let mut logistic = Vec::with_capacity(self.binary.len());
        for (k, &c) in self.binary.iter().enumerate() {
            let design: Vec<(DVector<f64>, f64, f64)> =
                points.iter().map(|&(x, w)| (self.logistic_row(x, k), x[c], w)).collect();
            let (beta, capped) = weighted_logistic(&design)?;
            if capped {
                let msg = format!("logistic model for x{} is separable; coefficients capped at {LOGISTIC_CAP}", c + 1);
                warn!("{msg}");
                warnings.push(msg);
            }
            logistic.push(beta);
        }
        Ok((CovariateParams { mean_coef, cov, logistic }, warnings))
    }

    /// Weighted log-likelihood of the model at `theta`.
    pub fn log_likelihood(&self, theta: &CovariateParams, points: &[(&[f64], f64)]) -> f64 {
        let q = self.normal.len();
        let chol = theta.cov.clone().cholesky();
        let mut ll = 0.0;
        for &(x, w) in points {
            if let Some(ch) = &chol {
                let r = DVector::from_vec(self.regressor_row(x));
                let e = DVector::from_fn(q, |k, _| x[self.normal[k]]) - theta.mean_coef.transpose() * r;
                let quad = e.dot(&ch.solve(&e));
                let logdet = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                ll += w * (-0.5 * (quad + logdet + q as f64 * (2.0 * std::f64::consts::PI).ln()));
            }
            for (k, &c) in self.binary.iter().enumerate() {
                let t = theta.logistic[k].dot(&self.logistic_row(x, k));
                ll += w * (x[c] * t - crate::expfam::softplus(t));
            }
        }
        ll
    }
}

/// Weighted logistic regression by Newton-Raphson. Returns the coefficients
/// and whether they had to be capped because the likelihood has no finite
/// maximizer.
pub fn weighted_logistic(data: &[(DVector<f64>, f64, f64)]) -> Result<(DVector<f64>, bool)> {
    let p = data.first().map_or(0, |d| d.0.len());
    let mut beta = DVector::zeros(p);
    let loglik = |b: &DVector<f64>| -> f64 {
        data.iter()
            .map(|(x, y, w)| {
                let t = b.dot(x);
                w * (y * t - crate::expfam::softplus(t))
            })
            .sum()
    };
    let mut ll = loglik(&beta);
    for _ in 0..100 {
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for (x, y, w) in data {
            let mu = sigmoid(beta.dot(x));
            grad += x * (w * (y - mu));
            hess += x * x.transpose() * (w * mu * (1.0 - mu));
        }
        if grad.amax() < 1e-10 {
            return Ok((beta, false));
        }
        let step = match (&hess + DMatrix::identity(p, p) * 1e-12 * (1.0 + hess.amax())).cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut t = 1.0;
        let mut next = &beta + &step * t;
        let mut next_ll = loglik(&next);
        while next_ll < ll && t > 1e-10 {
            t *= 0.5;
            next = &beta + &step * t;
            next_ll = loglik(&next);
        }
        let gain = next_ll - ll;
        beta = next;
        ll = next_ll;
        if beta.amax() > LOGISTIC_CAP {
            beta.iter_mut().for_each(|b| *b = b.clamp(-LOGISTIC_CAP, LOGISTIC_CAP));
            return Ok((beta, true));
        }
        if gain.abs() < 1e-14 * (1.0 + ll.abs()) {
            return Ok((beta, false));
        }
    }
    Ok((beta, false))
}

/// Nuisance parameters shared by all subjects.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Theta {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error_scale: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub covariate: Option<CovariateParams>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleConfig {
    pub nodes: usize,
    pub method: Method,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig { nodes: 7, method: Method::Gauss }
    }
}

#[derive(Debug, Clone)]
pub struct Subject {
    pub y: f64,
    pub obs: CovariateObservation,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    pub dim: usize,
    pub error_model: Option<ErrorModel>,
    pub covariate_model: Option<CovariateModel>,
}

impl Dataset {
    pub fn new(
        subjects: Vec<Subject>,
        error_model: Option<ErrorModel>,
        covariate_model: Option<CovariateModel>,
    ) -> Result<Self> {
        let dim = subjects.first().map_or(0, |s| s.obs.dim());
        let ds = Dataset { subjects, dim, error_model, covariate_model };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::Contract("dataset has no subjects".into()));
        }
        for (i, s) in self.subjects.iter().enumerate() {
            if s.obs.dim() != self.dim {
                return Err(Error::Contract(format!(
                    "subject {i} has {} coordinates, expected {}",
                    s.obs.dim(),
                    self.dim
                )));
            }
            if !s.y.is_finite() {
                return Err(Error::Domain(format!("subject {i} has a non-finite response")));
            }
            match &s.obs {
                CovariateObservation::NoisyPoint(_) if self.error_model.is_none() => {
                    return Err(Error::Contract(format!("subject {i} is noisy but no error model is given")));
                }
                CovariateObservation::PartiallyMissing(x)
                    if self.covariate_model.is_none() && x.iter().any(|v| v.is_none()) =>
                {
                    return Err(Error::Contract(format!(
                        "subject {i} has missing coordinates but no covariate model is given"
                    )));
                }
                CovariateObservation::PartiallyMissing(x) if x.is_empty() => {
                    return Err(Error::Contract(format!("subject {i} has an empty covariate vector")));
                }
                _ => {}
            }
        }
        if let Some(e) = &self.error_model {
            e.validate()?;
            if e.scale.len() != self.dim {
                return Err(Error::Contract(format!(
                    "error model has {} scales for {} coordinates",
                    e.scale.len(),
                    self.dim
                )));
            }
        }
        if let Some(m) = &self.covariate_model {
            m.validate(self.dim)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn responses(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.y).collect()
    }

    pub fn has_noisy(&self) -> bool {
        self.subjects.iter().any(|s| matches!(s.obs, CovariateObservation::NoisyPoint(_)))
    }

    pub fn has_missing(&self) -> bool {
        self.subjects.iter().any(|s| match &s.obs {
            CovariateObservation::PartiallyMissing(x) => x.iter().any(|v| v.is_none()),
            _ => false,
        })
    }

    /// True when some nuisance parameter is re-estimated and the rules move.
    pub fn estimates_theta(&self) -> bool {
        (self.has_noisy() && self.error_model.as_ref().is_some_and(|e| !e.known)) || self.has_missing()
    }

    /// Starting nuisance values: the supplied error scale and the
    /// complete-case fit of the covariate model.
    pub fn initial_theta(&self) -> Result<Theta> {
        let error_scale = if self.has_noisy() { self.error_model.as_ref().map(|e| e.scale.clone()) } else { None };
        let covariate = match (&self.covariate_model, self.has_missing()) {
            (Some(model), true) => {
                let complete: Vec<Vec<f64>> = self
                    .subjects
                    .iter()
                    .filter(|s| s.obs.is_exact())
                    .map(|s| match &s.obs {
                        CovariateObservation::Exact(x) => x.clone(),
                        CovariateObservation::PartiallyMissing(x) => x.iter().map(|v| v.unwrap()).collect(),
                        _ => unreachable!(),
                    })
                    .collect();
                let pts: Vec<(&[f64], f64)> = complete.iter().map(|x| (x.as_slice(), 1.0)).collect();
                let (params, _) = model.weighted_mle(&pts)?;
                Some(params)
            }
            _ => None,
        };
        Ok(Theta { error_scale, covariate })
    }

    /// Rules for every subject at the nuisance value `theta`.
    pub fn rules(&self, theta: &Theta, cfg: &RuleConfig) -> Result<Vec<QuadratureRule>> {
        let err = match (&self.error_model, &theta.error_scale) {
            (Some(e), Some(scale)) if self.has_noisy() => Some(error_rule(e.kind, scale, cfg.nodes, cfg.method)?),
            _ => None,
        };
        (0..self.len()).map(|i| self.rule_with(i, theta, cfg, err.as_ref())).collect()
    }

    pub fn rule_for_subject(&self, i: usize, theta: &Theta, cfg: &RuleConfig) -> Result<QuadratureRule> {
        let err = match (&self.subjects[i].obs, &self.error_model, &theta.error_scale) {
            (CovariateObservation::NoisyPoint(_), Some(e), Some(scale)) => {
                Some(error_rule(e.kind, scale, cfg.nodes, cfg.method)?)
            }
            _ => None,
        };
        self.rule_with(i, theta, cfg, err.as_ref())
    }

    fn rule_with(
        &self,
        i: usize,
        theta: &Theta,
        cfg: &RuleConfig,
        err: Option<&QuadratureRule>,
    ) -> Result<QuadratureRule> {
        let tag = |e: Error| match e {
            Error::RuleConstruction(m) => Error::RuleConstruction(format!("subject {i}: {m}")),
            Error::DegenerateNuisance(m) => Error::DegenerateNuisance(format!("subject {i}: {m}")),
            other => other,
        };
        match &self.subjects[i].obs {
            CovariateObservation::Exact(x) => Ok(QuadratureRule::point(x.clone())),
            CovariateObservation::Discrete { values, probs } => {
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Domain(format!("subject {i}: probabilities sum to {s}, not 1")));
                }
                QuadratureRule::new(values.clone(), probs.clone()).map_err(tag)
            }
            CovariateObservation::Distributional(d) => match d {
                Distribution::Independent(m) => {
                    quadrature::multivariate_rule(&Independent(m.clone()), &vec![cfg.nodes; m.len()], cfg.method)
                }
                Distribution::MvNormal { mean, cov } => quadrature::multivariate_rule(
                    &MvNormal::new(mean.clone(), cov.clone())?,
                    &vec![cfg.nodes; mean.len()],
                    cfg.method,
                ),
            }
            .map_err(tag),
            CovariateObservation::NoisyPoint(x) => {
                let err = err.ok_or_else(|| Error::Contract(format!("subject {i}: error scale not available")))?;
                Ok(shifted_rule(x, err))
            }
            CovariateObservation::PartiallyMissing(x) => {
                if x.iter().all(|v| v.is_some()) {
                    return Ok(QuadratureRule::point(x.iter().map(|v| v.unwrap()).collect()));
                }
                let model = self.covariate_model.as_ref().expect("validated");
                let params = theta
                    .covariate
                    .as_ref()
                    .ok_or_else(|| Error::Contract(format!("subject {i}: covariate model parameters not available")))?;
                model.conditional_rule(x, params, cfg.nodes, cfg.method).map_err(tag)
            }
        }
    }
}

/// Error-scale update from the final E-step weights: the weighted second
/// moment of `x_err - node` over noisy subjects, per coordinate.
///
/// `subjects` yields `(x_err, rule, weights)` for every noisy subject.
pub fn update_theta_measurement_error<'a>(
    kind: ErrorKind,
    subjects: impl IntoIterator<Item = (&'a [f64], &'a QuadratureRule, &'a [f64])>,
) -> Result<Vec<f64>> {
    let mut count = 0usize;
    let mut m2: Vec<f64> = Vec::new();
    for (x, rule, w) in subjects {
        if m2.is_empty() {
            m2 = vec![0.0; x.len()];
        }
        count += 1;
        for (z, wj) in rule.nodes.iter().zip(w) {
            for k in 0..x.len() {
                let u = x[k] - z[k];
                m2[k] += wj * u * u;
            }
        }
    }
    if count == 0 {
        return Err(Error::Contract("error scale is unidentifiable without noisy subjects".into()));
    }
    m2.iter()
        .map(|s| {
            let v = s / count as f64;
            if !(v > 1e-14) {
                return Err(Error::DegenerateNuisance(format!("estimated error variance collapsed to {v:e}")));
            }
            Ok(match kind {
                ErrorKind::Normal => v.sqrt(),
                ErrorKind::Uniform => (3.0 * v).sqrt(),
            })
        })
        .collect()
}
