//! M-step solver for the weighted complete-data penalized likelihood, and
//! the influence-matrix blocks used by the tuning criteria.
//!
//! The fitted function is `f = S d + K c` over all quadrature nodes. The
//! objective minimized by [`Problem::solve`] is
//!
//! ```text
//! -(1/n) sum_ij w_ij (y_ij f_ij - b(f_ij)) + (lambda/2) c' K c
//! ```
//!
//! with per-node responses `y_ij` (normally the subject response repeated).
//! Each Newton step is solved in the symmetric saddle form
//! `[D K D + lambda I, D S; (D S)', 0] [a; d] = [D z; 0]`, `c = D a`, where
//! `D^2 = diag(w b''(f) / n)` and `z` is the working response. The
//! constraint `S'c = 0` keeps the penalty well defined for conditionally
//! positive definite kernels.

use std::ops::Range;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::kernel::Kernel;
use crate::linalg::{lu_solve, Cholesky};
use crate::quadrature::QuadratureRule;

const MAX_NEWTON: usize = 50;
const MAX_HALVINGS: usize = 30;
/// Newton stops once the full step moves the fitted values by less than
/// this, relative to their size.
const STEP_TOL: f64 = 1e-12;
const ARMIJO: f64 = 1e-4;
/// Fitted values beyond this magnitude mean the likelihood is being pushed
/// along an unpenalized direction.
const DIVERGENCE_BOUND: f64 = 200.0;

/// Affine map of each covariate coordinate onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Clamp mapped values into `[0, 1]` (kernels defined on the unit cube).
    pub clamp: bool,
}

impl Scaling {
    pub fn identity(dim: usize) -> Self {
        Scaling { lo: vec![0.0; dim], hi: vec![1.0; dim], clamp: false }
    }

    /// Range of the given coordinate values; missing entries are ignored.
    pub fn from_points<'a>(dim: usize, points: impl IntoIterator<Item = &'a [f64]>, clamp: bool) -> Self {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in points {
            for k in 0..dim {
                if p[k].is_finite() {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
        }
        for k in 0..dim {
            if !lo[k].is_finite() {
                lo[k] = 0.0;
                hi[k] = 1.0;
            } else if hi[k] - lo[k] < 1e-12 * (1.0 + lo[k].abs()) {
                lo[k] -= 0.5;
                hi[k] += 0.5;
            }
        }
        Scaling { lo, hi, clamp }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(k, &v)| {
                let t = (v - self.lo[k]) / (self.hi[k] - self.lo[k]);
                if self.clamp {
                    t.clamp(0.0, 1.0)
                } else {
                    t
                }
            })
            .collect()
    }
}

/// Node layout and kernel matrices for one set of quadrature rules.
#[derive(Debug, Clone)]
pub struct Design {
    /// Nodes in the rescaled coordinates the kernel sees.
    pub nodes: Vec<Vec<f64>>,
    /// Subject `i` owns nodes `offsets[i]..offsets[i + 1]`.
    pub offsets: Vec<usize>,
    pub k: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

impl Design {
    pub fn new(kernel: &Kernel, nodes: Vec<Vec<f64>>, offsets: Vec<usize>) -> Result<Self> {
        if offsets.first() != Some(&0)
            || offsets.last() != Some(&nodes.len())
            || offsets.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Contract("node offsets must partition the node list into non-empty blocks".into()));
        }
        let k = kernel.gram(&nodes)?;
        let s = kernel.null_basis(&nodes)?;
        Ok(Design { nodes, offsets, k, s })
    }

    /// Design from per-subject rules given in original units.
    pub fn from_rules(kernel: &Kernel, rules: &[QuadratureRule], scaling: &Scaling) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut offsets = vec![0];
        for r in rules {
            nodes.extend(r.nodes.iter().map(|z| scaling.apply(z)));
            offsets.push(nodes.len());
        }
        Design::new(kernel, nodes, offsets)
    }

    pub fn n_subjects(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn range(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn block_size(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }
}

/// Where Newton starts.
#[derive(Debug, Clone, Copy)]
pub enum WarmStart<'a> {
    Cold,
    Coefficients {
        d: &'a DVector<f64>,
        c: &'a DVector<f64>,
    },
    /// Fitted values at the design nodes, e.g. from a fit on another node
    /// set; the first step is an undamped reweighted least-squares step.
    FittedValues(&'a DVector<f64>),
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub d: DVector<f64>,
    pub c: DVector<f64>,
    pub f: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// One weighted complete-data penalized likelihood.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub design: &'a Design,
    pub family: Family,
    /// Response at every node.
    pub y: &'a DVector<f64>,
    /// Non-negative weight at every node.
    pub w: &'a DVector<f64>,
    pub lambda: f64,
    /// Denominator of the likelihood term (the number of subjects, kept
    /// fixed when subjects are left out).
    pub n: f64,
}

impl Problem<'_> {
    fn validate(&self) -> Result<()> {
        let nn = self.design.n_nodes();
        if self.y.len() != nn || self.w.len() != nn {
            return Err(Error::Contract(format!(
                "{} nodes but {} responses and {} weights",
                nn,
                self.y.len(),
                self.w.len()
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.w.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Contract("weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn data_term(&self, f: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for j in 0..f.len() {
            if self.w[j] > 0.0 {
                s += self.w[j] * self.family.loglik_kernel(self.y[j], f[j]);
            }
        }
        -s / self.n
    }

    pub fn fitted(&self, d: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
        &self.design.s * d + &self.design.k * c
    }

    pub fn objective(&self, d: &DVector<f64>, c: &DVector<f64>) -> f64 {
        let f = self.fitted(d, c);
        self.data_term(&f) + 0.5 * self.lambda * c.dot(&(&self.design.k * c))
    }

    /// `-(1/n) w (y - b'(f))`, the derivative of the data term in `f`.
    fn score(&self, f: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(f.len(), |j, _| -self.w[j] * (self.y[j] - self.family.mean_unchecked(f[j])) / self.n)
    }

    /// Gradient in `(d, c)`.
    pub fn gradient(&self, d: &DVector<f64>, c: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let g = self.score(&self.fitted(d, c));
        let gd = self.design.s.transpose() * &g;
        let gc = &self.design.k * (g + c * self.lambda);
        (gd, gc)
    }

    /// Newton target `(d, c)` from the quadratic model at `f`.
    fn newton_target(&self, f: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let nn = f.len();
        let p = self.design.s.ncols();
        let mut dv = DVector::zeros(nn);
        let mut dz = DVector::zeros(nn);
        for j in 0..nn {
            let v = self.family.variance_unchecked(f[j]);
            if self.w[j] > 0.0 && v > 0.0 {
                let sw = (self.w[j] / self.n).sqrt();
                let sv = v.sqrt();
                dv[j] = sw * sv;
                dz[j] = dv[j] * f[j] + sw * (self.y[j] - self.family.mean_unchecked(f[j])) / sv;
            }
        }
        let ds = DMatrix::from_fn(nn, p, |i, k| dv[i] * self.design.s[(i, k)]);
        let qr = ds.qr();
        let r = qr.r();
        let rmax = r.diagonal().amax();
        if r.diagonal().iter().any(|x| !(x.abs() > 1e-10 * rmax.max(1e-300))) {
            return Err(Error::NullSpaceCondition(
                "weighted null-space design is rank deficient; the unpenalized part is not identified".into(),
            ));
        }
        let mut m = DMatrix::from_fn(nn, nn, |i, j| dv[i] * self.design.k[(i, j)] * dv[j]);
        for j in 0..nn {
            m[(j, j)] += self.lambda;
        }
        qr.q_tr_mul(&mut m);
        let mut m = m.transpose();
        qr.q_tr_mul(&mut m);
        let mut rhs = dz;
        qr.q_tr_mul(&mut rhs);
        let a22 = m.view((p, p), (nn - p, nn - p)).clone_owned();
        let alpha =
            if nn > p { Cholesky::new(a22)?.solve(&rhs.rows(p, nn - p).clone_owned()) } else { DVector::zeros(0) };
        let top = rhs.rows(0, p) - m.view((0, p), (p, nn - p)) * &alpha;
        let d = r
            .solve_upper_triangular(&top)
            .ok_or_else(|| Error::NullSpaceCondition("singular triangular factor".into()))?;
        // a = Q [0; alpha]; apply Q through the transpose of Q' on the identity
        let mut qt = DMatrix::identity(nn, nn);
        qr.q_tr_mul(&mut qt);
        let a = qt.rows(p, nn - p).transpose() * alpha;
        let c = a.component_mul(&dv);
        Ok((d, c))
    }

    pub fn solve(&self, warm: WarmStart<'_>) -> Result<Solution> {
        self.validate()?;
        let nn = self.design.n_nodes();
        let p = self.design.s.ncols();
        let k = &self.design.k;
        let (mut d, mut c) = match warm {
            WarmStart::Cold => (DVector::zeros(p), DVector::zeros(nn)),
            WarmStart::Coefficients { d, c } => {
                if d.len() != p || c.len() != nn {
                    return Err(Error::Contract("warm-start coefficients do not match the design".into()));
                }
                (d.clone(), c.clone())
            }
            WarmStart::FittedValues(f0) => {
                if f0.len() != nn {
                    return Err(Error::Contract("warm-start fitted values do not match the design".into()));
                }
                let (d1, c1) = self.newton_target(f0)?;
                let cold = self.data_term(&DVector::zeros(nn));
                let obj = self.objective(&d1, &c1);
                if obj.is_finite() && obj <= cold {
                    (d1, c1)
                } else {
                    (DVector::zeros(p), DVector::zeros(nn))
                }
            }
        };
        let mut kc = k * &c;
        let mut f = &self.design.s * &d + &kc;
        let mut obj = self.data_term(&f) + 0.5 * self.lambda * c.dot(&kc);
        let mut gnorm = f64::INFINITY;
        for it in 0..=MAX_NEWTON {
            let g = self.score(&f);
            let gd = self.design.s.transpose() * &g;
            let gc = k * (&g + &c * self.lambda);
            gnorm = (gd.norm_squared() + gc.norm_squared()).sqrt();
            if it == MAX_NEWTON {
                break;
            }
            let (dt, ct) = self.newton_target(&f)?;
            let delta_d = &dt - &d;
            let delta_c = &ct - &c;
            let k_dc = k * &delta_c;
            let delta_f = &self.design.s * &delta_d + &k_dc;
            if delta_f.amax() <= STEP_TOL * (1.0 + f.amax()) {
                let kc = k * &ct;
                let f = &self.design.s * &dt + &kc;
                let objective = self.data_term(&f) + 0.5 * self.lambda * ct.dot(&kc);
                return Ok(Solution { d: dt, c: ct, f, objective, iterations: it + 1, gradient_norm: gnorm });
            }
            let slope = g.dot(&delta_f) + self.lambda * kc.dot(&delta_c);
            let pen0 = c.dot(&kc);
            let pen1 = 2.0 * c.dot(&k_dc);
            let pen2 = delta_c.dot(&k_dc);
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let ft = &f + &delta_f * t;
                let o = self.data_term(&ft) + 0.5 * self.lambda * (pen0 + t * pen1 + t * t * pen2);
                if o.is_finite() && o <= obj + ARMIJO * t * slope.min(0.0) {
                    accepted = Some((ft, o));
                    break;
                }
                t *= 0.5;
            }
            let Some((ft, o)) = accepted else {
                let step = delta_f.amax();
                if step <= 1e-9 * (1.0 + f.amax()) || slope.abs() <= 1e-14 * (1.0 + obj.abs()) {
                    // already at the numerical optimum
                    return Ok(Solution { d, c, f, objective: obj, iterations: it, gradient_norm: gnorm });
                }
                return Err(Error::Solver {
                    iterations: it,
                    message: format!(
                        "line search failed after {MAX_HALVINGS} halvings (objective {obj:.12e}, gradient norm {gnorm:.3e})"
                    ),
                });
            };
            let moved = t * delta_f.amax();
            d += &delta_d * t;
            c += &delta_c * t;
            kc += &k_dc * t;
            f = ft;
            debug!("newton {it}: objective {o:.15e} step {t} max change {moved:.3e}");
            let decrease = obj - o;
            obj = o;
            if f.amax() > DIVERGENCE_BOUND || d.amax() > 1e3 * DIVERGENCE_BOUND {
                return Err(Error::NullSpaceCondition(format!(
                    "fitted values diverge (max |f| = {:.3e}); the likelihood has no finite maximizer in the null space",
                    f.amax()
                )));
            }
            if moved <= 1e-11 * (1.0 + f.amax()) && decrease <= 1e-15 * (1.0 + obj.abs()) {
                return Ok(Solution { d, c, f, objective: obj, iterations: it + 1, gradient_norm: gnorm });
            }
        }
        Err(Error::Solver {
            iterations: MAX_NEWTON,
            message: format!("no convergence (objective {obj:.12e}, gradient norm {gnorm:.3e})"),
        })
    }
}

/// Result of the null-space identifiability check on exactly observed
/// subjects.
#[derive(Debug, Clone, PartialEq)]
pub enum NullSpaceCheck {
    Passed {
        coefficients: Vec<f64>,
    },
    /// Not enough exactly observed subjects to decide.
    Inconclusive(String),
}

/// Fits the unpenalized model `f = S d` to the exactly observed subjects.
/// A likelihood without a finite maximizer there (separation, all responses
/// on the boundary) makes the penalized problem ill-posed.
pub fn null_space_diagnostic(family: Family, s: &DMatrix<f64>, y: &[f64]) -> Result<NullSpaceCheck> {
    let (n, p) = s.shape();
    if n == 0 {
        return Ok(NullSpaceCheck::Inconclusive("no exactly observed subjects".into()));
    }
    if n < p || s.clone().singular_values().min() <= 1e-10 * s.amax() {
        return Ok(NullSpaceCheck::Inconclusive(format!(
            "{n} exactly observed subjects do not span the {p}-dimensional null space"
        )));
    }
    let loglik = |d: &DVector<f64>| -> f64 {
        let f = s * d;
        (0..n).map(|i| family.loglik_kernel(y[i], f[i])).sum()
    };
    let mut d = DVector::zeros(p);
    let mut ll = loglik(&d);
    for _ in 0..100 {
        let f = s * &d;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            let row = s.row(i).transpose();
            grad += &row * (y[i] - family.mean_unchecked(f[i]));
            hess += &row * row.transpose() * family.variance_unchecked(f[i]);
        }
        let Some(ch) = hess.cholesky() else {
            break;
        };
        let step = ch.solve(&grad);
        let mut t = 1.0;
        let mut next = &d + &step;
        let mut next_ll = loglik(&next);
        while !(next_ll >= ll) && t > 1e-12 {
            t *= 0.5;
            next = &d + &step * t;
            next_ll = loglik(&next);
        }
        let gain = next_ll - ll;
        d = next;
        ll = next_ll;
        let fmax = (s * &d).amax();
        if d.norm() > 1e3 || fmax > 25.0 {
            return Err(Error::NullSpaceCondition(format!(
                "the unpenalized model has no finite maximizer on the exactly observed subjects \
                 (|d| = {:.3e}, max |f| = {fmax:.1}); the penalized estimate does not exist",
                d.norm()
            )));
        }
        if gain.abs() <= 1e-12 * (1.0 + ll.abs()) && (step.amax() * t) < 1e-8 {
            return Ok(NullSpaceCheck::Passed { coefficients: d.iter().copied().collect() });
        }
    }
    Err(Error::NullSpaceCondition(
        "unpenalized fit on the exactly observed subjects did not converge in 100 steps".into(),
    ))
}

/// Finite-dimensional fitted function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresenterModel {
    pub family: Family,
    pub kernel: Kernel,
    pub lambda: f64,
    pub scaling: Scaling,
    /// Kernel centers in rescaled coordinates.
    pub nodes: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub c: Vec<f64>,
}

impl RepresenterModel {
    pub fn new(family: Family, kernel: Kernel, lambda: f64, scaling: Scaling, design: &Design, sol: &Solution) -> Self {
        RepresenterModel {
            family,
            kernel,
            lambda,
            scaling,
            nodes: design.nodes.clone(),
            d: sol.d.iter().copied().collect(),
            c: sol.c.iter().copied().collect(),
        }
    }

    /// `f(x)` at points already in rescaled coordinates.
    pub fn evaluate_scaled(&self, pts: &[Vec<f64>]) -> Result<DVector<f64>> {
        let s = self.kernel.null_matrix(pts);
        let kx = self.kernel.cross_gram(pts, &self.nodes)?;
        Ok(s * DVector::from_column_slice(&self.d) + kx * DVector::from_column_slice(&self.c))
    }

    /// Fitted natural parameter and mean response at points in original units.
    pub fn evaluate(&self, pts: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| self.scaling.apply(p)).collect();
        let f = self.evaluate_scaled(&scaled)?;
        let mu = f.iter().map(|&t| self.family.mean(t)).collect::<Result<Vec<_>>>()?;
        Ok((f.iter().copied().collect(), mu))
    }

    /// Roughness `c' K c`.
    pub fn penalty(&self) -> Result<f64> {
        let c = DVector::from_column_slice(&self.c);
        Ok(c.dot(&(self.kernel.gram(&self.nodes)? * &c)))
    }
}

/// Per-subject blocks of the second derivatives of the observed-data
/// likelihood at the fit, and the influence matrix `H = d f / d y`.
#[derive(Debug, Clone)]
pub struct InfluenceBlocks {
    pub offsets: Vec<usize>,
    /// `b''(f)` at every node.
    pub w: DVector<f64>,
    /// Block `i` holds `d^2 L / d f_s d y_t` for the nodes of subject `i`.
    pub b: Vec<DMatrix<f64>>,
    /// Block `i` holds `d^2 L / d f_s d f_t` for the nodes of subject `i`.
    pub d: Vec<DMatrix<f64>>,
    /// Full influence matrix over all nodes.
    pub h: DMatrix<f64>,
}

impl InfluenceBlocks {
    pub fn n_subjects(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn h_block(&self, i: usize) -> DMatrix<f64> {
        let (a, m) = (self.offsets[i], self.offsets[i + 1] - self.offsets[i]);
        self.h.view((a, a), (m, m)).clone_owned()
    }

    /// `I - H_ii W_i`.
    pub fn g_block(&self, i: usize) -> DMatrix<f64> {
        let (a, m) = (self.offsets[i], self.offsets[i + 1] - self.offsets[i]);
        let mut g = -self.h_block(i);
        for t in 0..m {
            for s in 0..m {
                g[(s, t)] *= self.w[a + t];
            }
            g[(t, t)] += 1.0;
        }
        g
    }
}

/// Influence blocks at a converged fit. `weights` are the final E-step
/// weights and `f` the fitted values at the design nodes.
pub fn influence_blocks(
    design: &Design,
    family: Family,
    y: &DVector<f64>,
    weights: &DVector<f64>,
    f: &DVector<f64>,
    lambda: f64,
    n: f64,
) -> Result<InfluenceBlocks> {
    let nn = design.n_nodes();
    let p = design.s.ncols();
    let ns = design.n_subjects();
    let mut bblocks = Vec::with_capacity(ns);
    let mut dblocks = Vec::with_capacity(ns);
    let mut bfull = DMatrix::zeros(nn, nn);
    let mut dfull = DMatrix::zeros(nn, nn);
    let wvar = DVector::from_fn(nn, |j, _| family.variance_unchecked(f[j]));
    for i in 0..ns {
        let r = design.range(i);
        let m = r.len();
        let a = r.start;
        let res: Vec<f64> = r.clone().map(|j| y[j] - family.mean_unchecked(f[j])).collect();
        let w: Vec<f64> = r.clone().map(|j| weights[j]).collect();
        let mut db = DMatrix::zeros(m, m);
        let mut bb = DMatrix::zeros(m, m);
        for s in 0..m {
            for t in 0..m {
                let delta = if s == t { 1.0 } else { 0.0 };
                db[(s, t)] = w[s] * wvar[a + s] * delta - w[s] * (delta - w[t]) * res[s] * res[t];
                bb[(s, t)] = -w[s] * delta - w[s] * (delta - w[t]) * f[a + t] * res[s];
            }
        }
        dfull.view_mut((a, a), (m, m)).copy_from(&db);
        bfull.view_mut((a, a), (m, m)).copy_from(&bb);
        dblocks.push(db);
        bblocks.push(bb);
    }
    // f = X theta with X = [S, K Q2] and Q2 spanning {c : S'c = 0}
    let qr = design.s.clone().qr();
    let mut qtk = design.k.clone();
    qr.q_tr_mul(&mut qtk);
    let kq2 = qtk.rows(p, nn - p).transpose();
    let mut x = DMatrix::zeros(nn, nn);
    x.view_mut((0, 0), (nn, p)).copy_from(&design.s);
    x.view_mut((0, p), (nn, nn - p)).copy_from(&kq2);
    let mut qtkq = qtk.transpose();
    qr.q_tr_mul(&mut qtkq);
    let mut a = x.transpose() * &dfull * &x;
    let pen = qtkq.view((p, p), (nn - p, nn - p)) * (n * lambda);
    let mut sub = a.view_mut((p, p), (nn - p, nn - p));
    sub += pen;
    let a = (&a + a.transpose()) * 0.5;
    let rhs = x.transpose() * &bfull;
    let sol = match lu_solve(a.clone(), &rhs) {
        Ok(s) if s.iter().all(|v| v.is_finite()) => s,
        _ => {
            let jitter = 1e-10 * a.trace().abs() / nn as f64;
            lu_solve(a + DMatrix::identity(nn, nn) * jitter, &rhs)?
        }
    };
    let h = -(x * sol);
    Ok(InfluenceBlocks { offsets: design.offsets.clone(), w: wvar, b: bblocks, d: dblocks, h })
}
