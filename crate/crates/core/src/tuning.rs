//! Smoothing-parameter selection: observed likelihood, exact
//! leave-out-one-subject CV, GACV with exact or randomized traces, and the
//! Kullback-Leibler oracle.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::covariate::Dataset;
use crate::em::{check_inputs, em_fixed, qple_fit, EmConfig, FitResult, Layout};
use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::kernel::Kernel;
use crate::rng;
use crate::solver::{influence_blocks, InfluenceBlocks, RepresenterModel, WarmStart};

fn log_sum_exp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Response of subject `i`.
fn response(fit: &FitResult, i: usize) -> f64 {
    fit.layout.y[fit.layout.design.offsets[i]]
}

/// `-(1/n) sum_i log sum_j pi_ij exp{y_i f(z_ij) - b(f(z_ij))}`.
pub fn obs(fit: &FitResult) -> f64 {
    let design = &fit.layout.design;
    let f = fit.f();
    let fam = fit.family;
    let mut s = 0.0;
    for i in 0..design.n_subjects() {
        let y = response(fit, i);
        s += log_sum_exp(design.range(i).map(|j| {
            let p = fit.layout.pi[j];
            if p > 0.0 {
                p.ln() + fam.loglik_kernel(y, f[j])
            } else {
                f64::NEG_INFINITY
            }
        }));
    }
    -s / design.n_subjects() as f64
}

/// `d_ij = w_ij [(y_i - mu_ij)(f_ij - sum_k w_ik f_ik) + 1]`.
pub fn d_weights(fit: &FitResult, i: usize) -> Vec<f64> {
    let r = fit.layout.design.range(i);
    let f = fit.f();
    let w = &fit.weights;
    let y = response(fit, i);
    let fbar: f64 = r.clone().map(|j| w[j] * f[j]).sum();
    r.map(|j| w[j] * ((y - fit.family.mean_unchecked(f[j])) * (f[j] - fbar) + 1.0)).collect()
}

/// Exchangeable replacement `(delta - gamma) I + gamma e e'` of an
/// `m x m` diagonal block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizedAverage {
    pub delta: f64,
    pub gamma: f64,
    pub m: usize,
}

impl GeneralizedAverage {
    /// From the total trace and the total off-diagonal mass of all diagonal
    /// blocks of a matrix with `n` blocks.
    pub fn from_sums(trace: f64, offdiag: f64, n: usize, m: usize) -> Self {
        let nm = (n * m) as f64;
        let gamma = if m > 1 { offdiag / (nm * (m - 1) as f64) } else { 0.0 };
        GeneralizedAverage { delta: trace / nm, gamma, m }
    }

    /// Averages for every block size present in `blocks`.
    pub fn of_blocks(blocks: &[DMatrix<f64>]) -> Vec<Self> {
        let (tr, off) = block_sums(blocks.iter());
        blocks.iter().map(|b| Self::from_sums(tr, off, blocks.len(), b.nrows())).collect()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m, |s, t| if s == t { self.delta } else { self.gamma })
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        let a = self.delta - self.gamma;
        let b = self.delta + (self.m as f64 - 1.0) * self.gamma;
        let scale = self.delta.abs().max(self.gamma.abs()).max(f64::MIN_POSITIVE);
        if !(a.abs() > 1e-13 * scale && b.abs() > 1e-13 * scale) {
            return Err(Error::Numeric(format!(
                "generalized average is singular (delta = {}, gamma = {})",
                self.delta, self.gamma
            )));
        }
        let c = self.gamma / (a * b);
        Ok(DMatrix::from_fn(self.m, self.m, |s, t| if s == t { 1.0 / a - c } else { -c }))
    }
}

fn block_sums<'a>(blocks: impl Iterator<Item = &'a DMatrix<f64>>) -> (f64, f64) {
    let mut tr = 0.0;
    let mut off = 0.0;
    for b in blocks {
        let t = b.trace();
        tr += t;
        off += b.sum() - t;
    }
    (tr, off)
}

/// Influence blocks at a fit.
pub fn fit_influence(fit: &FitResult) -> Result<InfluenceBlocks> {
    influence_blocks(&fit.layout.design, fit.family, &fit.layout.y, &fit.weights, fit.f(), fit.lambda, fit.n() as f64)
}

/// `(1/n) sum_i y_i d_i' Gbar_ii^-1 Hbar_ii (y_i - mu_i)` given the trace and
/// off-diagonal sums of the `H` and `G` blocks.
fn trace_term(fit: &FitResult, h: (f64, f64), g: (f64, f64)) -> Result<f64> {
    let n = fit.n();
    let f = fit.f();
    let mut total = 0.0;
    for i in 0..n {
        let r = fit.layout.design.range(i);
        let m = r.len();
        let hbar = GeneralizedAverage::from_sums(h.0, h.1, n, m).matrix();
        let ginv = GeneralizedAverage::from_sums(g.0, g.1, n, m)
            .inverse()
            .map_err(|e| Error::Numeric(format!("subject {i}: {e}")))?;
        let y = response(fit, i);
        let res = DVector::from_iterator(m, r.map(|j| y - fit.family.mean_unchecked(f[j])));
        let v = ginv * (hbar * res);
        let d = DVector::from_vec(d_weights(fit, i));
        total += y * d.dot(&v);
    }
    Ok(total / n as f64)
}

/// GACV with exact influence blocks.
pub fn gacv(fit: &FitResult, blocks: &InfluenceBlocks) -> Result<f64> {
    let ns = blocks.n_subjects();
    let h = block_sums((0..ns).map(|i| blocks.h_block(i)).collect::<Vec<_>>().iter());
    let g = block_sums((0..ns).map(|i| blocks.g_block(i)).collect::<Vec<_>>().iter());
    Ok(obs(fit) + trace_term(fit, h, g)?)
}

/// EM settings for refits that must resolve small differences in `f`.
pub fn tight_config(cfg: &EmConfig, f_tol: f64) -> EmConfig {
    EmConfig { obj_tol: 1e-15, f_tol: cfg.f_tol.min(f_tol), max_iter: cfg.max_iter.max(500), ..cfg.clone() }
}

/// Refit at the fitted rules with per-node responses `y + e`, starting from
/// the fit itself.
pub fn perturbed_refit(fit: &FitResult, e: &DVector<f64>, cfg: &EmConfig) -> Result<DVector<f64>> {
    let layout = Layout { y: &fit.layout.y + e, ..fit.layout.clone() };
    let sol = &fit.solution;
    let refit = em_fixed(
        &layout,
        fit.family,
        fit.lambda,
        fit.n() as f64,
        None,
        WarmStart::Coefficients { d: &sol.d, c: &sol.c },
        cfg,
    )?;
    Ok(refit.solution.f)
}

/// Default perturbation scale: one percent of the response standard
/// deviation.
pub fn default_sigma(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    if sd > 0.0 {
        0.01 * sd
    } else {
        0.01
    }
}

#[derive(Debug, Clone)]
pub struct RanGacv {
    pub value: f64,
    pub replicates_used: usize,
    pub warnings: Vec<String>,
}

/// Randomized GACV averaged over `replicates` perturbation pairs drawn from
/// the stream `(seed, "rangacv", r)`, so every grid point sees the same draws.
pub fn rangacv(fit: &FitResult, replicates: usize, sigma: f64, seed: u64, cfg: &EmConfig) -> Result<RanGacv> {
    if replicates == 0 {
        return Err(Error::Contract("ranGACV needs at least one replicate".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("perturbation scale must be positive, got {sigma}")));
    }
    let design = &fit.layout.design;
    let nn = design.n_nodes();
    let normal = Normal::new(0.0, sigma).expect("positive scale");
    let w = DVector::from_fn(nn, |j, _| fit.family.variance_unchecked(fit.f()[j]));
    let tight = tight_config(cfg, 1e-4 * sigma);
    let s2 = sigma * sigma;
    let mut sum = 0.0;
    let mut used = 0;
    let mut warnings = Vec::new();
    for r in 0..replicates {
        let mut rng = rng::stream(seed, "rangacv", &[r as u64]);
        let eps = DVector::from_fn(nn, |_, _| normal.sample(&mut rng));
        let mut ebar = DVector::zeros(nn);
        for i in 0..design.n_subjects() {
            let rg = design.range(i);
            let s = eps.rows(rg.start, rg.len()).sum() / (rg.len() as f64).sqrt();
            ebar.rows_mut(rg.start, rg.len()).fill(s);
        }
        let refits = perturbed_refit(fit, &eps, &tight).and_then(|a| Ok((a, perturbed_refit(fit, &ebar, &tight)?)));
        let (fe, fb) = match refits {
            Ok(v) => v,
            Err(e) => {
                let msg = format!("ranGACV replicate {r} dropped: {e}");
                warn!("{msg}");
                warnings.push(msg);
                continue;
            }
        };
        let de = fe - fit.f();
        let db = fb - fit.f();
        let qh = eps.dot(&de);
        let qhb = ebar.dot(&db);
        let qg = eps.dot(&eps) - eps.dot(&w.component_mul(&de));
        let qgb = ebar.dot(&ebar) - ebar.dot(&w.component_mul(&db));
        sum += trace_term(fit, (qh / s2, (qhb - qh) / s2), (qg / s2, (qgb - qg) / s2))?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Numeric("every ranGACV replicate failed to refit".into()));
    }
    Ok(RanGacv { value: obs(fit) + sum / used as f64, replicates_used: used, warnings })
}

/// Leave-out-one-subject fit: the same rules and nuisance values with
/// subject `i` removed from the likelihood. Returns fitted values at all
/// nodes.
pub fn leave_one_out(fit: &FitResult, i: usize, cfg: &EmConfig) -> Result<DVector<f64>> {
    let mut active = vec![true; fit.n()];
    active[i] = false;
    let sol = &fit.solution;
    let out = em_fixed(
        &fit.layout,
        fit.family,
        fit.lambda,
        fit.n() as f64,
        Some(&active),
        WarmStart::Coefficients { d: &sol.d, c: &sol.c },
        cfg,
    )?;
    Ok(out.solution.f)
}

/// Exact leave-out-one-subject cross validation.
pub fn exact_loocv(fit: &FitResult, cfg: &EmConfig) -> Result<f64> {
    let n = fit.n();
    if n < 2 {
        return Err(Error::Contract("leave-one-out needs at least two subjects".into()));
    }
    let f = fit.f();
    let mut total = 0.0;
    for i in 0..n {
        let f_loo = leave_one_out(fit, i, cfg)?;
        let w_loo = fit.layout.estep(fit.family, &f_loo, None);
        let y = response(fit, i);
        let diff: f64 = fit.layout.design.range(i).map(|j| fit.weights[j] * f[j] - w_loo[j] * f_loo[j]).sum();
        total += y * diff;
    }
    Ok(obs(fit) + total / n as f64)
}

/// Mean Kullback-Leibler distance from the true laws (natural parameters
/// `truth` at the true covariates `x`) to the fitted ones.
pub fn tkl(model: &RepresenterModel, x: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    if x.len() != truth.len() || x.is_empty() {
        return Err(Error::Contract(format!("{} covariates for {} true values", x.len(), truth.len())));
    }
    let (fhat, _) = model.evaluate(x)?;
    Ok(truth.iter().zip(&fhat).map(|(&t, &f)| model.family.kl(t, f)).sum::<f64>() / x.len() as f64)
}

/// `count` values with log10 evenly spaced on `[lo, hi]`.
pub fn lambda_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if count == 0 || !(lo.is_finite() && hi.is_finite()) || (count > 1 && hi <= lo) {
        return Err(Error::Usage(format!("invalid lambda grid {lo}:{hi}:{count}")));
    }
    if count == 1 {
        return Ok(vec![10f64.powf(lo)]);
    }
    Ok((0..count).map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / (count - 1) as f64)).collect())
}

#[derive(Debug, Clone)]
pub enum Criterion {
    Gacv,
    RanGacv {
        replicates: usize,
        sigma: Option<f64>,
        seed: u64,
    },
    Loocv,
    /// Needs the true covariates and the true natural parameter there.
    Tkl {
        x: Vec<Vec<f64>>,
        truth: Vec<f64>,
    },
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Gacv => "gacv",
            Criterion::RanGacv { .. } => "rangacv",
            Criterion::Loocv => "loocv",
            Criterion::Tkl { .. } => "tkl",
        }
    }

    /// Criterion value at one fit.
    pub fn evaluate(&self, fit: &FitResult, cfg: &EmConfig) -> Result<(f64, Vec<String>)> {
        match self {
            Criterion::Gacv => Ok((gacv(fit, &fit_influence(fit)?)?, Vec::new())),
            Criterion::RanGacv { replicates, sigma, seed } => {
                let ys: Vec<f64> = (0..fit.n()).map(|i| response(fit, i)).collect();
                let s = sigma.unwrap_or_else(|| default_sigma(&ys));
                let r = rangacv(fit, *replicates, s, *seed, cfg)?;
                Ok((r.value, r.warnings))
            }
            Criterion::Loocv => Ok((exact_loocv(fit, cfg)?, Vec::new())),
            Criterion::Tkl { x, truth } => Ok((tkl(&fit.model, x, truth)?, Vec::new())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub grid: Vec<f64>,
    /// Criterion value per grid point; `None` where the fit or the
    /// criterion failed.
    pub values: Vec<Option<f64>>,
    pub index: usize,
    pub lambda: f64,
    pub fit: FitResult,
    pub warnings: Vec<String>,
}

/// Fits along the grid from the largest `lambda` down, each fit warm
/// started from the previous one.
pub fn fit_path(
    ds: &Dataset,
    family: Family,
    kernel: &Kernel,
    grid: &[f64],
    cfg: &EmConfig,
) -> (Vec<Option<FitResult>>, Vec<String>) {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let mut fits: Vec<Option<FitResult>> = vec![None; grid.len()];
    let mut warnings = Vec::new();
    let mut prev: Option<usize> = None;
    for &k in &order {
        let warm = prev.and_then(|p| fits[p].as_ref());
        match qple_fit(ds, family, kernel, grid[k], cfg, warm) {
            Ok(f) => {
                for w in &f.warnings {
                    if !warnings.contains(w) {
                        warnings.push(w.clone());
                    }
                }
                fits[k] = Some(f);
                prev = Some(k);
            }
            Err(e) => {
                let msg = format!("lambda = {:.4e} skipped: {e}", grid[k]);
                warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    (fits, warnings)
}

/// Grid search. Ties go to the larger `lambda`.
pub fn select_lambda(
    ds: &Dataset,
    family: Family,
    kernel: &Kernel,
    grid: &[f64],
    criterion: &Criterion,
    cfg: &EmConfig,
) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(Error::Usage("empty lambda grid".into()));
    }
    for &l in grid {
        check_inputs(ds, family, kernel, l)?;
    }
    let (mut fits, mut warnings) = fit_path(ds, family, kernel, grid, cfg);
    let evaluated: Vec<(Option<f64>, Vec<String>)> = fits
        .par_iter()
        .enumerate()
        .map(|(k, fit)| match fit {
            None => (None, Vec::new()),
            Some(fit) => match criterion.evaluate(fit, cfg) {
                Ok((v, w)) if v.is_finite() => (Some(v), w),
                Ok((v, w)) => (None, [w, vec![format!("lambda = {:.4e}: criterion is {v}", grid[k])]].concat()),
                Err(e) => (None, vec![format!("lambda = {:.4e}: {} failed: {e}", grid[k], criterion.name())]),
            },
        })
        .collect();
    let mut values = Vec::with_capacity(grid.len());
    for (v, w) in evaluated {
        for m in w {
            warn!("{m}");
            warnings.push(m);
        }
        values.push(v);
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let mut best: Option<usize> = None;
    for &k in &order {
        if let Some(v) = values[k] {
            if best.is_none_or(|b| v < values[b].unwrap()) {
                best = Some(k);
            }
        }
    }
    let index = best.ok_or_else(|| Error::Numeric(format!("{} failed at every grid point", criterion.name())))?;
    if grid.len() > 1 && (index == order[0] || index == order[order.len() - 1]) {
        let msg = format!("selected lambda = {:.4e} is on the grid boundary", grid[index]);
        warn!("{msg}");
        warnings.push(msg);
    }
    let fit = fits[index].take().expect("selected fit exists");
    Ok(TuneResult { grid: grid.to_vec(), values, index, lambda: grid[index], fit, warnings })
}
