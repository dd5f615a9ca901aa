//! Quadrature rules for covariate distributions.
//!
//! Gaussian rules come from the eigen-decomposition of the Jacobi matrix of
//! the three-term recurrence (Golub-Welsch). Normal and uniform laws use the
//! closed-form Hermite and Legendre recurrences; a user supplied density gets
//! its recurrence from the modified Chebyshev algorithm with shifted Legendre
//! polynomials as the reference basis, which stays well conditioned where raw
//! power moments do not.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_GAUSS_NODES: usize = 20;

/// Nodes and positive weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Validates, merges duplicate nodes and renormalizes the weights.
    pub fn new(nodes: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.len() != weights.len() {
            return Err(Error::RuleConstruction(format!("{} nodes with {} weights", nodes.len(), weights.len())));
        }
        let dim = nodes[0].len();
        if nodes.iter().any(|z| z.len() != dim || z.iter().any(|v| !v.is_finite())) {
            return Err(Error::RuleConstruction("nodes must be finite and share one dimension".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::RuleConstruction(format!("weights must be positive, got {weights:?}")));
        }
        let mut merged_nodes: Vec<Vec<f64>> = Vec::with_capacity(nodes.len());
        let mut merged_weights: Vec<f64> = Vec::with_capacity(nodes.len());
        for (z, w) in nodes.into_iter().zip(weights) {
            match merged_nodes.iter().position(|u| same_node(u, &z)) {
                Some(k) => merged_weights[k] += w,
                None => {
                    merged_nodes.push(z);
                    merged_weights.push(w);
                }
            }
        }
        let total: f64 = merged_weights.iter().sum();
        merged_weights.iter_mut().for_each(|w| *w /= total);
        Ok(QuadratureRule { nodes: merged_nodes, weights: merged_weights })
    }

    /// One-node rule for an exactly observed covariate.
    pub fn point(x: Vec<f64>) -> Self {
        QuadratureRule { nodes: vec![x], weights: vec![1.0] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].len()
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(z, w)| w * f(z)).sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (z, w) in self.nodes.iter().zip(&self.weights) {
            for (a, b) in m.iter_mut().zip(z) {
                *a += w * b;
            }
        }
        m
    }
}

fn same_node(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs())))
}

/// Density supplied as a function, with its support and first two moments.
#[derive(Clone)]
pub struct CustomDensity {
    pub density: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub support: (f64, f64),
    pub mean: f64,
    pub sd: f64,
}

impl fmt::Debug for CustomDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomDensity")
            .field("support", &self.support)
            .field("mean", &self.mean)
            .field("sd", &self.sd)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum Univariate {
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
    Discrete { values: Vec<f64>, probs: Vec<f64> },
    Custom(CustomDensity),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Gauss,
    Grid,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss" => Ok(Method::Gauss),
            "grid" => Ok(Method::Grid),
            _ => Err(Error::Usage(format!("unknown quadrature method '{s}', expected gauss or grid"))),
        }
    }
}

impl Univariate {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::RuleConstruction(m));
        match self {
            Univariate::Normal { mean, sd } => {
                if !mean.is_finite() || !(*sd > 0.0 && sd.is_finite()) {
                    return bad(format!("normal needs finite mean and sd > 0, got ({mean}, {sd})"));
                }
            }
            Univariate::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return bad(format!("uniform needs lo < hi, got [{lo}, {hi}]"));
                }
            }
            Univariate::Discrete { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return bad("discrete law needs matching non-empty values and probs".into());
                }
                if probs.iter().any(|p| !(*p > 0.0)) || values.iter().any(|v| !v.is_finite()) {
                    return bad("discrete probabilities must be positive and values finite".into());
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return bad(format!("discrete probabilities sum to {s}, not 1"));
                }
            }
            Univariate::Custom(c) => {
                let (a, b) = c.support;
                if !(a < b) || !c.mean.is_finite() || !(c.sd > 0.0 && c.sd.is_finite()) {
                    return bad(format!("custom density with invalid support/moments: {c:?}"));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self {
            Univariate::Normal { mean, .. } => *mean,
            Univariate::Uniform { lo, hi } => 0.5 * (lo + hi),
            Univariate::Discrete { values, probs } => values.iter().zip(probs).map(|(v, p)| v * p).sum(),
            Univariate::Custom(c) => c.mean,
        }
    }

    fn density(&self, x: f64) -> Option<f64> {
        match self {
            Univariate::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                Some((-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt()))
            }
            Univariate::Uniform { lo, hi } => Some(if x >= *lo && x <= *hi { 1.0 / (hi - lo) } else { 0.0 }),
            Univariate::Discrete { .. } => None,
            Univariate::Custom(c) => Some((c.density)(x)),
        }
    }

    /// Finite interval used by grid rules: infinite sides become mean +- 3 sd.
    fn grid_interval(&self) -> (f64, f64) {
        match self {
            Univariate::Normal { mean, sd } => (mean - 3.0 * sd, mean + 3.0 * sd),
            Univariate::Uniform { lo, hi } => (*lo, *hi),
            Univariate::Custom(c) => truncate(c, 3.0),
            Univariate::Discrete { .. } => unreachable!("grid rule on a discrete law"),
        }
    }
}

fn truncate(c: &CustomDensity, k: f64) -> (f64, f64) {
    let (a, b) = c.support;
    let a = if a.is_finite() { a } else { c.mean - k * c.sd };
    let b = if b.is_finite() { b } else { c.mean + k * c.sd };
    (a, b)
}

/// Rule from a symmetric tridiagonal Jacobi matrix with diagonal `alpha` and
/// squared off-diagonal `beta[1..]`; `beta[0]` is the total mass.
fn golub_welsch(alpha: &[f64], beta: &[f64]) -> Result<QuadratureRule> {
    let m = alpha.len();
    let mut j = DMatrix::zeros(m, m);
    for k in 0..m {
        j[(k, k)] = alpha[k];
        if k + 1 < m {
            let off = beta[k + 1].sqrt();
            j[(k, k + 1)] = off;
            j[(k + 1, k)] = off;
        }
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..m).map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pairs.iter().any(|&(_, w)| !(w > 0.0)) {
        return Err(Error::RuleConstruction(format!(
            "jacobi matrix produced non-positive weights (alpha={alpha:?}, beta={beta:?})"
        )));
    }
    QuadratureRule::new(pairs.iter().map(|p| vec![p.0]).collect(), pairs.iter().map(|p| p.1).collect())
}

fn legendre_recurrence(lo: f64, hi: f64, m: usize) -> (Vec<f64>, Vec<f64>) {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let alpha = vec![c; m];
    let beta = (0..m)
        .map(|k| {
            if k == 0 {
                1.0
            } else {
                let k = k as f64;
                h * h * k * k / (4.0 * k * k - 1.0)
            }
        })
        .collect();
    (alpha, beta)
}

fn check_nodes(m: usize) -> Result<()> {
    if m == 0 || m > MAX_GAUSS_NODES {
        return Err(Error::Contract(format!("node count must be in 1..={MAX_GAUSS_NODES}, got {m}")));
    }
    Ok(())
}

/// `m`-node Gaussian rule, exact for polynomials of degree `2m - 1`.
pub fn gauss_rule(dist: &Univariate, m: usize) -> Result<QuadratureRule> {
    check_nodes(m)?;
    dist.validate()?;
    match dist {
        Univariate::Normal { mean, sd } => {
            let alpha = vec![*mean; m];
            let beta: Vec<f64> = (0..m).map(|k| if k == 0 { 1.0 } else { k as f64 * sd * sd }).collect();
            golub_welsch(&alpha, &beta)
        }
        Univariate::Uniform { lo, hi } => {
            let (alpha, beta) = legendre_recurrence(*lo, *hi, m);
            golub_welsch(&alpha, &beta)
        }
        Univariate::Discrete { values, probs } => {
            let full = QuadratureRule::new(values.iter().map(|&v| vec![v]).collect(), probs.clone())?;
            if m >= full.len() {
                return Ok(full);
            }
            let xs: Vec<f64> = full.nodes.iter().map(|z| z[0]).collect();
            let (alpha, beta) = stieltjes(&xs, &full.weights, m)?;
            golub_welsch(&alpha, &beta)
        }
        Univariate::Custom(c) => {
            let (a, b) = truncate(c, 10.0);
            let (alpha, beta) = modified_chebyshev(&*c.density, a, b, m)?;
            golub_welsch(&alpha, &beta)
        }
    }
}

/// Discretized Stieltjes procedure for a finite discrete measure.
fn stieltjes(x: &[f64], w: &[f64], m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let mut alpha = vec![0.0; m];
    let mut beta = vec![0.0; m];
    let mut p_prev = vec![0.0; n];
    let mut p = vec![1.0; n];
    let mut norm_prev = 1.0;
    for k in 0..m {
        let norm: f64 = (0..n).map(|i| w[i] * p[i] * p[i]).sum();
        if !(norm > 0.0) {
            return Err(Error::RuleConstruction(format!("stieltjes norm vanished at degree {k}")));
        }
        alpha[k] = (0..n).map(|i| w[i] * x[i] * p[i] * p[i]).sum::<f64>() / norm;
        beta[k] = if k == 0 { norm } else { norm / norm_prev };
        let next: Vec<f64> =
            (0..n).map(|i| (x[i] - alpha[k]) * p[i] - if k == 0 { 0.0 } else { beta[k] * p_prev[i] }).collect();
        p_prev = std::mem::replace(&mut p, next);
        norm_prev = norm;
    }
    Ok((alpha, beta))
}

/// Composite Gauss-Legendre nodes and weights on `[a, b]`.
fn composite_legendre(a: f64, b: f64, panels: usize) -> Vec<(f64, f64)> {
    let (alpha, beta) = legendre_recurrence(-1.0, 1.0, MAX_GAUSS_NODES);
    let base = golub_welsch(&alpha, &beta).expect("legendre rule");
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * base.len());
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (z, w) in base.nodes.iter().zip(&base.weights) {
            // base weights sum to one, so the panel length is the scale
            out.push((lo + 0.5 * h * (z[0] + 1.0), w * h));
        }
    }
    out
}

/// Recurrence coefficients of the density on `[a, b]` from modified moments
/// against monic shifted Legendre polynomials.
fn modified_chebyshev(density: &dyn Fn(f64) -> f64, a: f64, b: f64, m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ra, rb) = legendre_recurrence(a, b, 2 * m);
    let pts = composite_legendre(a, b, 200);
    let mut nu = vec![0.0; 2 * m];
    for &(x, w) in &pts {
        let fx = density(x);
        if !fx.is_finite() || fx < 0.0 {
            return Err(Error::RuleConstruction(format!("density is {fx} at {x}")));
        }
        let mut p_prev = 0.0;
        let mut p = 1.0;
        for l in 0..2 * m {
            nu[l] += w * fx * p;
            let next = (x - ra[l]) * p - if l == 0 { 0.0 } else { rb[l] * p_prev };
            p_prev = p;
            p = next;
        }
    }
    if !(nu[0] > 0.0) {
        return Err(Error::RuleConstruction("density integrates to zero on its support".into()));
    }
    let mut alpha = vec![0.0; m];
    let mut beta = vec![0.0; m];
    alpha[0] = ra[0] + nu[1] / nu[0];
    beta[0] = nu[0];
    let mut sig_prev2 = vec![0.0; 2 * m];
    let mut sig_prev = nu.clone();
    for k in 1..m {
        let mut sig = vec![0.0; 2 * m];
        for l in k..2 * m - k {
            sig[l] = sig_prev[l + 1] - (alpha[k - 1] - ra[l]) * sig_prev[l] - beta[k - 1] * sig_prev2[l]
                + rb[l] * sig_prev[l - 1];
        }
        if !(sig[k] > 0.0) || !sig[k].is_finite() {
            return Err(Error::RuleConstruction(format!(
                "modified moment recursion broke down at degree {k} (sigma = {:e}); \
                 try fewer nodes",
                sig[k]
            )));
        }
        alpha[k] = ra[k] + sig[k + 1] / sig[k] - sig_prev[k] / sig_prev[k - 1];
        beta[k] = sig[k] / sig_prev[k - 1];
        sig_prev2 = std::mem::replace(&mut sig_prev, sig);
    }
    Ok((alpha, beta))
}

/// `m` equally spaced nodes with weights proportional to the density.
pub fn grid_rule(dist: &Univariate, m: usize) -> Result<QuadratureRule> {
    if m == 0 {
        return Err(Error::Contract("grid rule needs at least one node".into()));
    }
    dist.validate()?;
    if matches!(dist, Univariate::Discrete { .. }) {
        return Err(Error::Contract("grid rule requires a distribution with a density".into()));
    }
    let (a, b) = dist.grid_interval();
    let xs: Vec<f64> =
        if m == 1 { vec![0.5 * (a + b)] } else { (0..m).map(|k| a + (b - a) * k as f64 / (m - 1) as f64).collect() };
    let dens: Vec<f64> = xs.iter().map(|&x| dist.density(x).unwrap_or(0.0)).collect();
    let keep: Vec<usize> = (0..m).filter(|&k| dens[k] > 0.0 && dens[k].is_finite()).collect();
    if keep.is_empty() {
        return Err(Error::RuleConstruction(format!("density vanishes at every grid node on [{a}, {b}]")));
    }
    QuadratureRule::new(keep.iter().map(|&k| vec![xs[k]]).collect(), keep.iter().map(|&k| dens[k]).collect())
}

pub fn univariate_rule(dist: &Univariate, m: usize, method: Method) -> Result<QuadratureRule> {
    match (method, dist) {
        (_, Univariate::Discrete { .. }) => gauss_rule(dist, m),
        (Method::Gauss, _) => gauss_rule(dist, m),
        (Method::Grid, _) => grid_rule(dist, m),
    }
}

/// Joint law written as a chain of one-dimensional conditionals.
pub trait ConditionalChain {
    fn dim(&self) -> usize;
    /// Law of coordinate `k` given the values of coordinates `0..k`.
    fn conditional(&self, k: usize, prefix: &[f64]) -> Result<Univariate>;
}

/// Multivariate normal via its Cholesky factor: `x = mu + L z`.
#[derive(Debug, Clone)]
pub struct MvNormal {
    mean: Vec<f64>,
    chol: DMatrix<f64>,
}

impl MvNormal {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Contract(format!("covariance must be {d}x{d}")));
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::RuleConstruction("covariance matrix is not positive definite".into()))?
            .l();
        if chol.diagonal().iter().any(|v| !(*v > 1e-12 * chol.amax())) {
            return Err(Error::RuleConstruction("covariance matrix is numerically singular".into()));
        }
        Ok(MvNormal { mean, chol })
    }
}

impl ConditionalChain for MvNormal {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn conditional(&self, k: usize, prefix: &[f64]) -> Result<Univariate> {
        let mut z = vec![0.0; k];
        for j in 0..k {
            let mut r = prefix[j] - self.mean[j];
            for (l, zl) in z.iter().enumerate().take(j) {
                r -= self.chol[(j, l)] * zl;
            }
            z[j] = r / self.chol[(j, j)];
        }
        let shift: f64 = (0..k).map(|j| self.chol[(k, j)] * z[j]).sum();
        Ok(Univariate::Normal { mean: self.mean[k] + shift, sd: self.chol[(k, k)] })
    }
}

/// Independent coordinates.
#[derive(Debug, Clone)]
pub struct Independent(pub Vec<Univariate>);

impl ConditionalChain for Independent {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn conditional(&self, k: usize, _prefix: &[f64]) -> Result<Univariate> {
        Ok(self.0[k].clone())
    }
}

/// Conditional chain given by a closure.
pub struct FnChain<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(usize, &[f64]) -> Result<Univariate>> ConditionalChain for FnChain<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn conditional(&self, k: usize, prefix: &[f64]) -> Result<Univariate> {
        (self.f)(k, prefix)
    }
}

/// Product-form rule built coordinate by coordinate: each partial node is
/// extended by the conditional rule of the next coordinate and the weights
/// multiply.
pub fn multivariate_rule(
    joint: &dyn ConditionalChain,
    nodes_per_dim: &[usize],
    method: Method,
) -> Result<QuadratureRule> {
    let d = joint.dim();
    if nodes_per_dim.len() != d {
        return Err(Error::Contract(format!(
            "nodes_per_dim has {} entries for a {d}-dimensional law",
            nodes_per_dim.len()
        )));
    }
    let mut nodes: Vec<Vec<f64>> = vec![Vec::new()];
    let mut weights = vec![1.0];
    for k in 0..d {
        let mut next_nodes = Vec::new();
        let mut next_weights = Vec::new();
        for (z, w) in nodes.iter().zip(&weights) {
            let rule = univariate_rule(&joint.conditional(k, z)?, nodes_per_dim[k], method)?;
            for (u, v) in rule.nodes.iter().zip(&rule.weights) {
                let mut node = z.clone();
                node.push(u[0]);
                next_nodes.push(node);
                next_weights.push(w * v);
            }
        }
        nodes = next_nodes;
        weights = next_weights;
    }
    QuadratureRule::new(nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn normal_moment(mu: f64, sd: f64, p: u32) -> f64 {
        let mut m = vec![1.0, mu];
        for k in 2..=p as usize {
            m.push(mu * m[k - 1] + (k - 1) as f64 * sd * sd * m[k - 2]);
        }
        m[p as usize]
    }

    fn uniform_moment(a: f64, b: f64, p: u32) -> f64 {
        let q = p as i32 + 1;
        (b.powi(q) - a.powi(q)) / (q as f64 * (b - a))
    }

    fn check_exact(rule: &QuadratureRule, m: usize, moment: impl Fn(u32) -> f64) {
        for p in 0..(2 * m) as u32 {
            let q = rule.integrate(|z| z[0].powi(p as i32));
            let e = moment(p);
            assert!((q - e).abs() <= 1e-8 * (1.0 + e.abs()), "m={m} p={p}: {q} vs {e}");
        }
    }

    #[test]
    fn two_point_rules() {
        let r = gauss_rule(&Univariate::Normal { mean: 0.0, sd: 1.0 }, 2).unwrap();
        assert_relative_eq!(r.nodes[0][0], -1.0, epsilon = 1e-14);
        assert_relative_eq!(r.nodes[1][0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(r.weights[0], 0.5, epsilon = 1e-14);
        let r = gauss_rule(&Univariate::Uniform { lo: 0.0, hi: 1.0 }, 2).unwrap();
        let off = 1.0 / (2.0 * 3f64.sqrt());
        assert_relative_eq!(r.nodes[0][0], 0.5 - off, epsilon = 1e-14);
        assert_relative_eq!(r.nodes[1][0], 0.5 + off, epsilon = 1e-14);
        assert_relative_eq!(r.weights[1], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn one_point_rule_is_the_mean() {
        for d in [
            Univariate::Normal { mean: 0.7, sd: 2.0 },
            Univariate::Uniform { lo: -1.0, hi: 3.0 },
            Univariate::Discrete { values: vec![0.0, 1.0, 5.0], probs: vec![0.2, 0.3, 0.5] },
        ] {
            let r = gauss_rule(&d, 1).unwrap();
            assert_eq!(r.len(), 1);
            assert_relative_eq!(r.nodes[0][0], d.mean(), epsilon = 1e-13);
            assert_eq!(r.weights[0], 1.0);
        }
    }

    #[test]
    fn polynomial_exactness_closed_form_families() {
        for m in 1..=8 {
            let r = gauss_rule(&Univariate::Normal { mean: 0.3, sd: 1.7 }, m).unwrap();
            check_exact(&r, m, |p| normal_moment(0.3, 1.7, p));
            let r = gauss_rule(&Univariate::Uniform { lo: -0.5, hi: 2.0 }, m).unwrap();
            check_exact(&r, m, |p| uniform_moment(-0.5, 2.0, p));
        }
    }

    #[test]
    fn custom_density_matches_closed_form() {
        // triangular density on [0, 1]: 2x
        let tri = CustomDensity {
            density: Arc::new(|x: f64| if (0.0..=1.0).contains(&x) { 2.0 * x } else { 0.0 }),
            support: (0.0, 1.0),
            mean: 2.0 / 3.0,
            sd: (1.0f64 / 18.0).sqrt(),
        };
        for m in 1..=8 {
            let r = gauss_rule(&Univariate::Custom(tri.clone()), m).unwrap();
            check_exact(&r, m, |p| 2.0 / (p as f64 + 2.0));
        }
        // a normal density passed as a callback reproduces the closed form
        let nd = CustomDensity {
            density: Arc::new(|x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()),
            support: (f64::NEG_INFINITY, f64::INFINITY),
            mean: 0.0,
            sd: 1.0,
        };
        let r = gauss_rule(&Univariate::Custom(nd), 5).unwrap();
        let exact = gauss_rule(&Univariate::Normal { mean: 0.0, sd: 1.0 }, 5).unwrap();
        for (a, b) in r.nodes.iter().zip(&exact.nodes) {
            assert!((a[0] - b[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn discrete_rules() {
        let d = Univariate::Discrete { values: vec![1.0, 2.0, 2.0, 4.0], probs: vec![0.1, 0.2, 0.3, 0.4] };
        let full = gauss_rule(&d, 5).unwrap();
        assert_eq!(full.len(), 3);
        assert_relative_eq!(full.weights[1], 0.5, epsilon = 1e-15);
        let two = gauss_rule(&d, 2).unwrap();
        let mom = |p: i32| 0.1 + 0.5 * 2f64.powi(p) + 0.4 * 4f64.powi(p);
        for p in 0..4 {
            assert_relative_eq!(two.integrate(|z| z[0].powi(p)), mom(p), epsilon = 1e-12);
        }
    }

    #[test]
    fn grid_rules() {
        let r = grid_rule(&Univariate::Normal { mean: 0.0, sd: 1.0 }, 3).unwrap();
        let phi3 = (-4.5f64).exp();
        let s = 1.0 + 2.0 * phi3;
        assert_eq!(r.nodes, vec![vec![-3.0], vec![0.0], vec![3.0]]);
        assert_relative_eq!(r.weights[0], phi3 / s, epsilon = 1e-15);
        assert_relative_eq!(r.weights[1], 1.0 / s, epsilon = 1e-15);
        assert!((r.weights[0] - 0.01087).abs() < 1e-5);
        let r = grid_rule(&Univariate::Uniform { lo: 0.0, hi: 1.0 }, 5).unwrap();
        assert!(r.weights.iter().all(|w| (w - 0.2).abs() < 1e-15));
        let disc = Univariate::Discrete { values: vec![0.0], probs: vec![1.0] };
        assert!(matches!(grid_rule(&disc, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(gauss_rule(&Univariate::Normal { mean: 0.0, sd: 0.0 }, 3).is_err());
        assert!(gauss_rule(&Univariate::Normal { mean: 0.0, sd: 1.0 }, 21).is_err());
        assert!(gauss_rule(&Univariate::Normal { mean: 0.0, sd: 1.0 }, 0).is_err());
        let bad = Univariate::Discrete { values: vec![0.0, 1.0], probs: vec![0.5, 0.6] };
        assert!(gauss_rule(&bad, 1).is_err());
    }

    #[test]
    fn multivariate_products() {
        let n01 = Univariate::Normal { mean: 0.0, sd: 1.0 };
        let ind = Independent(vec![n01.clone(), n01.clone()]);
        let r = multivariate_rule(&ind, &[2, 2], Method::Gauss).unwrap();
        assert_eq!(r.len(), 4);
        for (z, w) in r.nodes.iter().zip(&r.weights) {
            assert!((z[0].abs() - 1.0).abs() < 1e-14 && (z[1].abs() - 1.0).abs() < 1e-14);
            assert_relative_eq!(*w, 0.25, epsilon = 1e-14);
        }
        let one = multivariate_rule(&Independent(vec![n01.clone()]), &[3], Method::Gauss).unwrap();
        let base = gauss_rule(&n01, 3).unwrap();
        assert_eq!(one.nodes, base.nodes);
        for (a, b) in one.weights.iter().zip(&base.weights) {
            assert_relative_eq!(*a, *b, epsilon = 1e-15);
        }
        assert!(matches!(multivariate_rule(&ind, &[2], Method::Gauss), Err(Error::Contract(_))));
    }

    #[test]
    fn correlated_normal_shifts_conditional_means() {
        let rho = 0.5;
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let mvn = MvNormal::new(vec![0.0, 0.0], cov).unwrap();
        let r = multivariate_rule(&mvn, &[2, 2], Method::Gauss).unwrap();
        assert_eq!(r.len(), 4);
        let cond_sd = (1.0 - rho * rho).sqrt();
        for (z, w) in r.nodes.iter().zip(&r.weights) {
            assert_relative_eq!(*w, 0.25, epsilon = 1e-14);
            let off = z[1] - rho * z[0];
            assert!((off.abs() - cond_sd).abs() < 1e-12);
        }
        // second moments of the joint law are reproduced
        assert_relative_eq!(r.integrate(|z| z[0] * z[1]), rho, epsilon = 1e-12);
        assert_relative_eq!(r.integrate(|z| z[1] * z[1]), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rule_invariants_hold() {
        let rule = QuadratureRule::new(vec![vec![0.0], vec![1.0], vec![0.0]], vec![1.0, 2.0, 1.0]).unwrap();
        assert_eq!(rule.len(), 2);
        assert_relative_eq!(rule.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(QuadratureRule::new(vec![vec![0.0]], vec![0.0]).is_err());
    }
}
