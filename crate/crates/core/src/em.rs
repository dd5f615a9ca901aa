//! Quadrature EM for the penalized likelihood with uncertain covariates.
//!
//! Each subject's covariate is replaced by a discrete rule `(z_ij, pi_ij)`.
//! The E-step turns the rule into posterior weights given the response and
//! the current fit; the M-step is a weighted penalized likelihood over all
//! nodes. When the rules depend on nuisance parameters (unknown error scale,
//! covariate model for missing data), those are re-estimated from the same
//! weights and the rules are rebuilt between iterations.

use log::{debug, warn};
use nalgebra::DVector;

use crate::covariate::{update_theta_measurement_error, CovariateObservation, Dataset, RuleConfig, Theta};
use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::kernel::Kernel;
use crate::quadrature::QuadratureRule;
use crate::solver::{
    null_space_diagnostic, Design, NullSpaceCheck, Problem, RepresenterModel, Scaling, Solution, WarmStart,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullSpacePolicy {
    Error,
    Warn,
    Skip,
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub rules: RuleConfig,
    pub max_iter: usize,
    /// Relative change of the observed objective.
    pub obj_tol: f64,
    /// Largest change of the fitted values at the nodes.
    pub f_tol: f64,
    pub null_space: NullSpacePolicy,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            rules: RuleConfig::default(),
            max_iter: 100,
            obj_tol: 1e-6,
            f_tol: 1e-5,
            null_space: NullSpacePolicy::Error,
        }
    }
}

/// Log-likelihood of `y` at natural parameter `t`, including the base
/// measure when `y` is a valid response.
fn node_loglik(family: Family, y: f64, t: f64) -> f64 {
    let base = if family.in_support(y) { family.log_base(y).unwrap_or(0.0) } else { 0.0 };
    family.loglik_kernel(y, t) + base
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn estep_block(family: Family, y: &[f64], f: &[f64], pi: &[f64], out: &mut [f64]) {
    let logs: Vec<f64> = (0..f.len())
        .map(|j| if pi[j] > 0.0 { pi[j].ln() + family.loglik_kernel(y[j], f[j]) } else { f64::NEG_INFINITY })
        .collect();
    let lse = log_sum_exp(&logs);
    for j in 0..f.len() {
        out[j] = (logs[j] - lse).exp();
    }
}

/// Posterior weights of one subject's nodes given its response `y` and the
/// fitted values `f` at the nodes.
pub fn estep_weights(family: Family, y: f64, f: &[f64], pi: &[f64]) -> Result<Vec<f64>> {
    if f.len() != pi.len() || f.is_empty() {
        return Err(Error::Contract(format!("{} fitted values for {} rule weights", f.len(), pi.len())));
    }
    if pi.iter().any(|p| !(*p >= 0.0)) || !(pi.iter().sum::<f64>() > 0.0) {
        return Err(Error::Domain("rule weights must be non-negative with a positive sum".into()));
    }
    let mut out = vec![0.0; f.len()];
    estep_block(family, &vec![y; f.len()], f, pi, &mut out);
    Ok(out)
}

/// Node-level data of one fit: design, per-node responses and rule weights.
#[derive(Debug, Clone)]
pub struct Layout {
    pub design: Design,
    pub y: DVector<f64>,
    pub pi: DVector<f64>,
}

impl Layout {
    pub fn new(kernel: &Kernel, rules: &[QuadratureRule], scaling: &Scaling, y: &[f64]) -> Result<Self> {
        let design = Design::from_rules(kernel, rules, scaling)?;
        let mut yn = Vec::with_capacity(design.n_nodes());
        let mut pi = Vec::with_capacity(design.n_nodes());
        for (r, &yi) in rules.iter().zip(y) {
            yn.extend(std::iter::repeat_n(yi, r.len()));
            pi.extend_from_slice(&r.weights);
        }
        Ok(Layout { design, y: DVector::from_vec(yn), pi: DVector::from_vec(pi) })
    }

    pub fn single_nodes(&self) -> bool {
        (0..self.design.n_subjects()).all(|i| self.design.block_size(i) == 1)
    }

    /// E-step weights at `f`; inactive subjects get zero weight.
    pub fn estep(&self, family: Family, f: &DVector<f64>, active: Option<&[bool]>) -> DVector<f64> {
        let mut w = DVector::zeros(f.len());
        for i in 0..self.design.n_subjects() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            let r = self.design.range(i);
            estep_block(
                family,
                &self.y.as_slice()[r.clone()],
                &f.as_slice()[r.clone()],
                &self.pi.as_slice()[r.clone()],
                &mut w.as_mut_slice()[r],
            );
        }
        w
    }

    /// `-(1/n) sum_i log sum_j pi_ij p(y_ij | f_ij)` over active subjects.
    pub fn observed_data_term(&self, family: Family, f: &DVector<f64>, n: f64, active: Option<&[bool]>) -> f64 {
        let mut s = 0.0;
        for i in 0..self.design.n_subjects() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            let logs: Vec<f64> = self
                .design
                .range(i)
                .map(|j| {
                    if self.pi[j] > 0.0 {
                        self.pi[j].ln() + node_loglik(family, self.y[j], f[j])
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            s += log_sum_exp(&logs);
        }
        -s / n
    }
}

/// EM at fixed rules.
#[derive(Debug, Clone)]
pub struct FixedRuleFit {
    pub solution: Solution,
    /// E-step weights at the final fit.
    pub weights: DVector<f64>,
    /// Observed penalized objective after every M-step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs EM with the rules held fixed. `active` masks subjects out of the
/// likelihood (the denominator stays `n`).
#[allow(clippy::too_many_arguments)]
pub fn em_fixed(
    layout: &Layout,
    family: Family,
    lambda: f64,
    n: f64,
    active: Option<&[bool]>,
    warm: WarmStart<'_>,
    cfg: &EmConfig,
) -> Result<FixedRuleFit> {
    let design = &layout.design;
    let mut f = match warm {
        WarmStart::Cold => DVector::zeros(design.n_nodes()),
        WarmStart::Coefficients { d, c } => &design.s * d + &design.k * c,
        WarmStart::FittedValues(f) => f.clone(),
    };
    let mut coef: Option<(DVector<f64>, DVector<f64>)> = match warm {
        WarmStart::Coefficients { d, c } => Some((d.clone(), c.clone())),
        _ => None,
    };
    let cold = matches!(warm, WarmStart::Cold);
    let single = layout.single_nodes();
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    let mut last: Option<Solution> = None;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iter.max(1) {
        iterations = it;
        let w = layout.estep(family, &f, active);
        let problem = Problem { design, family, y: &layout.y, w: &w, lambda, n };
        let start = match (&coef, cold && it == 1) {
            (Some((d, c)), _) => WarmStart::Coefficients { d, c },
            (None, true) => WarmStart::Cold,
            (None, false) => WarmStart::FittedValues(&f),
        };
        let sol = problem.solve(start)?;
        let pen = sol.c.dot(&(&design.k * &sol.c));
        let obj = layout.observed_data_term(family, &sol.f, n, active) + 0.5 * lambda * pen;
        let df = (&sol.f - &f).amax();
        trace.push(obj);
        debug!("em {it}: objective {obj:.15e} max change {df:.3e}");
        f = sol.f.clone();
        coef = Some((sol.d.clone(), sol.c.clone()));
        last = Some(sol);
        if single || ((prev - obj).abs() <= cfg.obj_tol * obj.abs().max(1.0) && df < cfg.f_tol) {
            converged = true;
            break;
        }
        prev = obj;
    }
    let solution = last.expect("at least one iteration");
    let weights = layout.estep(family, &solution.f, active);
    Ok(FixedRuleFit { solution, weights, trace, iterations, converged })
}

/// Fitted model together with everything the tuning criteria need.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: RepresenterModel,
    pub theta: Theta,
    /// Observed penalized objective: the starting fit, then after every
    /// M-step.
    pub em_trace: Vec<f64>,
    /// Number of times the rules were rebuilt from new nuisance values.
    pub rule_updates: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Final rules in original covariate units.
    pub rules: Vec<QuadratureRule>,
    pub layout: Layout,
    pub solution: Solution,
    /// E-step weights at the fit.
    pub weights: DVector<f64>,
    pub family: Family,
    pub lambda: f64,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn n(&self) -> usize {
        self.layout.design.n_subjects()
    }

    /// Fitted values at the nodes.
    pub fn f(&self) -> &DVector<f64> {
        &self.solution.f
    }
}

/// Validates a fitting request before any computation.
pub fn check_inputs(ds: &Dataset, family: Family, kernel: &Kernel, lambda: f64) -> Result<()> {
    ds.validate()?;
    kernel.validate()?;
    if let Some(d) = kernel.dim() {
        if d > ds.dim {
            return Err(Error::Contract(format!("kernel uses {d} coordinates, data has {}", ds.dim)));
        }
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    for (i, s) in ds.subjects.iter().enumerate() {
        if !family.in_support(s.y) {
            return Err(Error::Domain(format!("subject {i}: response {} is not valid for {family}", s.y)));
        }
    }
    Ok(())
}

/// Covariate rescaling spanning the observed values and the starting rules.
pub fn fit_scaling(ds: &Dataset, rules: &[QuadratureRule], kernel: &Kernel) -> Scaling {
    let observed: Vec<Vec<f64>> = ds
        .subjects
        .iter()
        .flat_map(|s| s.obs.observed_values())
        .map(|v| v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
        .collect();
    let pts =
        observed.iter().map(|v| v.as_slice()).chain(rules.iter().flat_map(|r| r.nodes.iter().map(|z| z.as_slice())));
    Scaling::from_points(ds.dim, pts, kernel.unit_domain())
}

fn check_null_space(
    ds: &Dataset,
    family: Family,
    kernel: &Kernel,
    scaling: &Scaling,
    policy: NullSpacePolicy,
    warnings: &mut Vec<String>,
) -> Result<()> {
    if policy == NullSpacePolicy::Skip {
        return Ok(());
    }
    let mut pts = Vec::new();
    let mut ys = Vec::new();
    for s in &ds.subjects {
        let x = match &s.obs {
            CovariateObservation::Exact(x) => x.clone(),
            CovariateObservation::PartiallyMissing(x) if x.iter().all(|v| v.is_some()) => {
                x.iter().map(|v| v.unwrap()).collect()
            }
            _ => continue,
        };
        pts.push(scaling.apply(&x));
        ys.push(s.y);
    }
    let s = kernel.null_matrix(&pts);
    match null_space_diagnostic(family, &s, &ys) {
        Ok(NullSpaceCheck::Passed { .. }) => Ok(()),
        Ok(NullSpaceCheck::Inconclusive(msg)) => {
            let msg = format!("null-space check skipped: {msg}");
            warn!("{msg}");
            warnings.push(msg);
            Ok(())
        }
        Err(e) if policy == NullSpacePolicy::Warn => {
            let msg = e.to_string();
            warn!("{msg}");
            warnings.push(msg);
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// New nuisance values from E-step weights at the current rules.
fn update_theta(
    ds: &Dataset,
    rules: &[QuadratureRule],
    layout: &Layout,
    weights: &DVector<f64>,
    theta: &Theta,
    warnings: &mut Vec<String>,
) -> Result<Theta> {
    let mut next = theta.clone();
    if let (Some(em), true) = (&ds.error_model, ds.has_noisy()) {
        if !em.known {
            let noisy = ds.subjects.iter().enumerate().filter_map(|(i, s)| match &s.obs {
                CovariateObservation::NoisyPoint(x) => {
                    Some((x.as_slice(), &rules[i], &weights.as_slice()[layout.design.range(i)]))
                }
                _ => None,
            });
            next.error_scale = Some(update_theta_measurement_error(em.kind, noisy)?);
        }
    }
    if let (Some(model), true) = (&ds.covariate_model, ds.has_missing()) {
        let mut pts: Vec<(&[f64], f64)> = Vec::new();
        for (i, s) in ds.subjects.iter().enumerate() {
            if matches!(s.obs, CovariateObservation::Exact(_) | CovariateObservation::PartiallyMissing(_)) {
                for (j, z) in layout.design.range(i).zip(&rules[i].nodes) {
                    pts.push((z.as_slice(), weights[j]));
                }
            }
        }
        let (params, w) = model.weighted_mle(&pts)?;
        for m in w {
            if !warnings.contains(&m) {
                warnings.push(m);
            }
        }
        next.covariate = Some(params);
    }
    Ok(next)
}

fn theta_change(a: &Theta, b: &Theta) -> f64 {
    let mut d: f64 = 0.0;
    if let (Some(x), Some(y)) = (&a.error_scale, &b.error_scale) {
        for (u, v) in x.iter().zip(y) {
            d = d.max((u - v).abs() / v.abs().max(1e-12));
        }
    }
    if let (Some(x), Some(y)) = (&a.covariate, &b.covariate) {
        let scale = 1.0 + y.cov.amax().sqrt() + y.mean_coef.amax();
        d = d.max((&x.mean_coef - &y.mean_coef).amax() / scale);
        d = d.max((&x.cov - &y.cov).amax() / (scale * scale));
        for (u, v) in x.logistic.iter().zip(&y.logistic) {
            d = d.max((u - v).amax() / (1.0 + v.amax()));
        }
    }
    d
}

/// Fit with every covariate collapsed to the mean of its starting rule.
pub fn naive_fit(
    ds: &Dataset,
    family: Family,
    kernel: &Kernel,
    lambda: f64,
    scaling: &Scaling,
    rules: &[QuadratureRule],
) -> Result<(RepresenterModel, Solution)> {
    let means: Vec<QuadratureRule> = rules.iter().map(|r| QuadratureRule::point(r.mean())).collect();
    let layout = Layout::new(kernel, &means, scaling, &ds.responses())?;
    let w = DVector::from_element(ds.len(), 1.0);
    let sol = Problem { design: &layout.design, family, y: &layout.y, w: &w, lambda, n: ds.len() as f64 }
        .solve(WarmStart::Cold)?;
    let model = RepresenterModel::new(family, kernel.clone(), lambda, scaling.clone(), &layout.design, &sol);
    Ok((model, sol))
}

/// Penalized likelihood fit by quadrature EM. `warm` supplies a previous
/// fit (typically at a neighbouring `lambda`) to start from.
pub fn qple_fit(
    ds: &Dataset,
    family: Family,
    kernel: &Kernel,
    lambda: f64,
    cfg: &EmConfig,
    warm: Option<&FitResult>,
) -> Result<FitResult> {
    check_inputs(ds, family, kernel, lambda)?;
    let n = ds.len() as f64;
    let y = ds.responses();
    let mut warnings = Vec::new();
    let mut theta = match warm {
        Some(w) => w.theta.clone(),
        None => ds.initial_theta()?,
    };
    let mut rules = ds.rules(&theta, &cfg.rules)?;
    let scaling = match warm {
        Some(w) => w.model.scaling.clone(),
        None => fit_scaling(ds, &rules, kernel),
    };
    if warm.is_none() {
        check_null_space(ds, family, kernel, &scaling, cfg.null_space, &mut warnings)?;
    }
    let mut layout = Layout::new(kernel, &rules, &scaling, &y)?;

    let (f0, pen0) = match warm {
        Some(w) => (w.model.evaluate_scaled(&layout.design.nodes)?, w.model.penalty()?),
        None => {
            let (naive, _) = naive_fit(ds, family, kernel, lambda, &scaling, &rules)?;
            (naive.evaluate_scaled(&layout.design.nodes)?, naive.penalty()?)
        }
    };
    let mut em_trace = vec![layout.observed_data_term(family, &f0, n, None) + 0.5 * lambda * pen0];
    let mut iterations = 0;
    let mut rule_updates = 0;
    let mut f = f0;

    if ds.estimates_theta() {
        let mut coef: Option<(DVector<f64>, DVector<f64>)> = None;
        let mut prev = em_trace[0];
        for it in 1..=cfg.max_iter {
            iterations = it;
            let w = layout.estep(family, &f, None);
            let problem = Problem { design: &layout.design, family, y: &layout.y, w: &w, lambda, n };
            let sol = match &coef {
                Some((d, c)) => problem.solve(WarmStart::Coefficients { d, c })?,
                None => problem.solve(WarmStart::FittedValues(&f))?,
            };
            let pen = sol.c.dot(&(&layout.design.k * &sol.c));
            let obj = layout.observed_data_term(family, &sol.f, n, None) + 0.5 * lambda * pen;
            em_trace.push(obj);
            let df = (&sol.f - &f).amax();

            let w = layout.estep(family, &sol.f, None);
            let next = update_theta(ds, &rules, &layout, &w, &theta, &mut warnings)?;
            let dtheta = theta_change(&next, &theta);
            let model = RepresenterModel::new(family, kernel.clone(), lambda, scaling.clone(), &layout.design, &sol);
            theta = next;
            rules = ds.rules(&theta, &cfg.rules)?;
            layout = Layout::new(kernel, &rules, &scaling, &y)?;
            rule_updates += 1;
            f = model.evaluate_scaled(&layout.design.nodes)?;
            let obj_new = layout.observed_data_term(family, &f, n, None) + 0.5 * lambda * pen;
            debug!("nuisance step {it}: objective {obj:.12e} (old rules) {obj_new:.12e} (new rules), theta change {dtheta:.3e}");
            // coefficients only carry over when the node set is unchanged
            coef = None;
            if (prev - obj).abs() <= cfg.obj_tol * obj.abs().max(1.0) && df < cfg.f_tol && dtheta < cfg.obj_tol.sqrt() {
                break;
            }
            prev = obj;
        }
    }
    let fixed = em_fixed(&layout, family, lambda, n, None, WarmStart::FittedValues(&f), cfg)?;
    iterations += fixed.iterations;
    em_trace.extend_from_slice(&fixed.trace);
    if !fixed.converged {
        let msg = format!("EM stopped after {} iterations without meeting the tolerance", cfg.max_iter);
        warn!("{msg}");
        warnings.push(msg);
    }
    let model = RepresenterModel::new(family, kernel.clone(), lambda, scaling, &layout.design, &fixed.solution);
    Ok(FitResult {
        model,
        theta,
        em_trace,
        rule_updates,
        converged: fixed.converged,
        iterations,
        rules,
        layout,
        solution: fixed.solution,
        weights: fixed.weights,
        family,
        lambda,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariate::Distribution;
    use crate::covariate::{ErrorKind, ErrorModel, Subject};
    use crate::quadrature::{Method, Univariate};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn estep_matches_hand_computation() {
        let w = estep_weights(Family::Poisson, 1.0, &[0.0, 3f64.ln()], &[0.5, 0.5]).unwrap();
        // weights proportional to exp(f - e^f): e^-1 and 3 e^-3
        let a = (-1f64).exp();
        let b = 3.0 * (-3f64).exp();
        assert!((w[0] - a / (a + b)).abs() < 1e-14);
        assert!((w[0] - 0.7112).abs() < 1e-4);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(estep_weights(Family::Poisson, 1.0, &[0.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn estep_survives_extreme_fits() {
        let w = estep_weights(Family::Poisson, 50.0, &[-700.0, 5.0, 8.0], &[0.2, 0.3, 0.5]).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    fn discrete_dataset(rng: &mut ChaCha8Rng, n: usize, family: Family) -> Dataset {
        let subjects = (0..n)
            .map(|_| {
                let m = rng.random_range(1..=4);
                let values: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.random::<f64>()]).collect();
                let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
                let t: f64 = raw.iter().sum();
                let y = match family {
                    Family::Poisson => rng.random_range(0..5) as f64,
                    Family::Binomial { trials } => rng.random_range(0..=trials) as f64,
                };
                Subject {
                    y,
                    obs: CovariateObservation::Discrete { values, probs: raw.iter().map(|r| r / t).collect() },
                }
            })
            .collect();
        Dataset::new(subjects, None, None).unwrap()
    }

    #[test]
    fn trace_is_non_increasing_for_fixed_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..10 {
            let fam = if case % 2 == 0 { Family::Poisson } else { Family::Binomial { trials: 2 } };
            let ds = discrete_dataset(&mut rng, 12, fam);
            let cfg = EmConfig { null_space: NullSpacePolicy::Skip, ..Default::default() };
            let fit = qple_fit(&ds, fam, &Kernel::CubicSpline, 1e-3, &cfg, None).unwrap();
            for w in fit.em_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", fit.em_trace);
            }
            assert!(fit.converged);
        }
    }

    #[test]
    fn all_exact_is_one_penalized_fit() {
        let xs = [0.05, 0.2, 0.4, 0.55, 0.7, 0.9];
        let ys = [0.0, 1.0, 1.0, 3.0, 2.0, 4.0];
        let subjects =
            xs.iter().zip(ys).map(|(&x, y)| Subject { y, obs: CovariateObservation::Exact(vec![x]) }).collect();
        let ds = Dataset::new(subjects, None, None).unwrap();
        let fit = qple_fit(&ds, Family::Poisson, &Kernel::CubicSpline, 1e-2, &EmConfig::default(), None).unwrap();
        assert_eq!(fit.em_trace.len(), 2);
        assert_eq!(fit.rule_updates, 0);
        assert!(fit.weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn unknown_error_scale_is_reestimated() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let normal = rand_distr::Normal::new(0.0, 0.1).unwrap();
        let mut subjects = Vec::new();
        let poisson = |l: f64, rng: &mut ChaCha8Rng| rng.sample(rand_distr::Poisson::new(l).unwrap());
        for i in 0..150 {
            let x: f64 = rng.random();
            let y = poisson((2.0 + 1.5 * (2.0 * std::f64::consts::PI * x).sin()).exp(), &mut rng);
            let obs = if i % 3 == 0 {
                CovariateObservation::Exact(vec![x])
            } else {
                CovariateObservation::NoisyPoint(vec![x + rng.sample(normal)])
            };
            subjects.push(Subject { y, obs });
        }
        let em = ErrorModel { kind: ErrorKind::Normal, scale: vec![0.2], known: false };
        let ds = Dataset::new(subjects, Some(em), None).unwrap();
        let cfg = EmConfig {
            rules: RuleConfig { nodes: 5, method: Method::Gauss },
            max_iter: 30,
            null_space: NullSpacePolicy::Warn,
            ..Default::default()
        };
        let fit = qple_fit(&ds, Family::Poisson, &Kernel::CubicSpline, 1e-4, &cfg, None).unwrap();
        assert!(fit.rule_updates > 0);
        let s = fit.theta.error_scale.as_ref().unwrap()[0];
        assert!(s > 0.05 && s < 0.15, "{s}");
        for i in 0..ds.len() {
            let r = fit.layout.design.range(i);
            assert!((fit.weights.rows(r.start, r.len()).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distributional_subjects_fit() {
        let subjects = (0..10)
            .map(|i| {
                let m = i as f64 / 10.0 + 0.05;
                Subject {
                    y: (i % 3) as f64,
                    obs: CovariateObservation::Distributional(Distribution::Independent(vec![Univariate::Normal {
                        mean: m,
                        sd: 0.03,
                    }])),
                }
            })
            .collect();
        let ds = Dataset::new(subjects, None, None).unwrap();
        let cfg = EmConfig { null_space: NullSpacePolicy::Skip, ..Default::default() };
        let fit = qple_fit(&ds, Family::Poisson, &Kernel::CubicSpline, 1e-2, &cfg, None).unwrap();
        assert_eq!(fit.layout.design.n_nodes(), 70);
        let (f, _) = fit.model.evaluate(&[vec![0.5]]).unwrap();
        assert!(f[0].is_finite());
    }
}
