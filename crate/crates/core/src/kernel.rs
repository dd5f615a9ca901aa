//! Reproducing kernels, null-space bases and Gram assembly.
//!
//! All kernels act on covariates that were rescaled to the unit cube. The
//! cubic smoothing-spline kernel is the Bernoulli-polynomial reproducing kernel
//! of the second-order Sobolev space on `[0, 1]` with null space
//! `{1, x - 1/2}`; the thin-plate kernel is `r^2 log r` in two dimensions with
//! null space `{1, x1, x2}`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    CubicSpline,
    ThinPlate,
    Gaussian { bandwidth: f64 },
    SsAnova(SsAnova),
}

/// Tensor-sum kernel `sum_b theta_b K_b` with a parametric part made of the
/// constant and a set of linear main effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsAnova {
    pub blocks: Vec<Block>,
    /// Coordinates whose centered linear term `x - 1/2` joins the null space.
    pub linear: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    pub coords: Vec<usize>,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Smooth main effect on one coordinate.
    Cubic,
    /// Product of cubic smooth parts over the listed coordinates (interaction).
    CubicTensor,
    /// Thin-plate kernel on two coordinates.
    ThinPlate,
    Gaussian {
        bandwidth: f64,
    },
}

#[inline]
fn k1(x: f64) -> f64 {
    x - 0.5
}

#[inline]
fn k2(x: f64) -> f64 {
    let a = k1(x);
    (a * a - 1.0 / 12.0) / 2.0
}

#[inline]
fn k4(x: f64) -> f64 {
    let a = k1(x);
    let a2 = a * a;
    (a2 * a2 - a2 / 2.0 + 7.0 / 240.0) / 24.0
}

/// Smooth-part reproducing kernel of the cubic spline on `[0, 1]`.
#[inline]
pub fn cubic_rk(s: f64, t: f64) -> f64 {
    k2(s) * k2(t) - k4((s - t).abs())
}

/// Radial function `r^2 log r` with the removable singularity at zero.
#[inline]
pub fn tps_radial(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

#[inline]
fn tps_eval(s: &[f64], t: &[f64]) -> f64 {
    let dx = s[0] - t[0];
    let dy = s[1] - t[1];
    let r2 = dx * dx + dy * dy;
    if r2 == 0.0 {
        0.0
    } else {
        // r^2 log r = r^2 log(r^2) / 2
        0.5 * r2 * r2.ln()
    }
}

#[inline]
fn gaussian_eval(s: &[f64], t: &[f64], h: f64) -> f64 {
    let d2: f64 = s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * h * h)).exp()
}

impl BlockKind {
    fn eval(&self, coords: &[usize], s: &[f64], t: &[f64]) -> f64 {
        match *self {
            BlockKind::Cubic => cubic_rk(s[coords[0]], t[coords[0]]),
            BlockKind::CubicTensor => coords.iter().map(|&c| cubic_rk(s[c], t[c])).product(),
            BlockKind::ThinPlate => tps_eval(&[s[coords[0]], s[coords[1]]], &[t[coords[0]], t[coords[1]]]),
            BlockKind::Gaussian { bandwidth } => {
                let d2: f64 = coords.iter().map(|&c| (s[c] - t[c]) * (s[c] - t[c])).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
        }
    }

    fn needs_unit_interval(&self) -> bool {
        matches!(self, BlockKind::Cubic | BlockKind::CubicTensor)
    }
}

impl SsAnova {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Contract("ss-anova kernel needs at least one block".into()));
        }
        for b in &self.blocks {
            if !(b.theta > 0.0 && b.theta.is_finite()) {
                return Err(Error::Domain(format!("block weight must be positive, got {}", b.theta)));
            }
            let want = match b.kind {
                BlockKind::Cubic => Some(1),
                BlockKind::ThinPlate => Some(2),
                _ => None,
            };
            if b.coords.is_empty() || want.is_some_and(|w| w != b.coords.len()) {
                return Err(Error::Contract(format!(
                    "block {:?} has an invalid coordinate list {:?}",
                    b.kind, b.coords
                )));
            }
            if let BlockKind::Gaussian { bandwidth } = b.kind {
                if !(bandwidth > 0.0) {
                    return Err(Error::Domain("gaussian bandwidth must be positive".into()));
                }
            }
        }
        Ok(())
    }

    fn max_coord(&self) -> usize {
        self.blocks.iter().flat_map(|b| b.coords.iter()).chain(self.linear.iter()).copied().max().unwrap_or(0)
    }

    fn linear_terms(&self) -> Vec<usize> {
        let mut v = self.linear.clone();
        v.sort_unstable();
        v.dedup();
        v
    }
}

impl Kernel {
    /// Number of covariate coordinates the kernel expects, when fixed.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Kernel::CubicSpline => Some(1),
            Kernel::ThinPlate => Some(2),
            Kernel::Gaussian { .. } => None,
            Kernel::SsAnova(a) => Some(a.max_coord() + 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::Gaussian { bandwidth } if !(*bandwidth > 0.0 && bandwidth.is_finite()) => {
                Err(Error::Domain(format!("gaussian bandwidth must be positive, got {bandwidth}")))
            }
            Kernel::SsAnova(a) => a.validate(),
            _ => Ok(()),
        }
    }

    /// Kernel value without domain checks.
    #[inline]
    pub fn eval(&self, s: &[f64], t: &[f64]) -> f64 {
        match self {
            Kernel::CubicSpline => cubic_rk(s[0], t[0]),
            Kernel::ThinPlate => tps_eval(s, t),
            Kernel::Gaussian { bandwidth } => gaussian_eval(s, t, *bandwidth),
            Kernel::SsAnova(a) => a.blocks.iter().map(|b| b.theta * b.kind.eval(&b.coords, s, t)).sum(),
        }
    }

    /// True when some coordinate must lie in `[0, 1]`.
    pub fn unit_domain(&self) -> bool {
        match self {
            Kernel::CubicSpline => true,
            Kernel::SsAnova(a) => !a.linear.is_empty() || a.blocks.iter().any(|b| b.kind.needs_unit_interval()),
            _ => false,
        }
    }

    pub fn check_point(&self, p: &[f64]) -> Result<()> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite covariate {p:?}")));
        }
        if let Some(d) = self.dim() {
            if p.len() < d {
                return Err(Error::Domain(format!("kernel needs {d} coordinates, point has {}", p.len())));
            }
        }
        let unit = |v: f64| (-UNIT_TOL..=1.0 + UNIT_TOL).contains(&v);
        match self {
            Kernel::CubicSpline if !unit(p[0]) => {
                Err(Error::Domain(format!("cubic spline covariate {} outside [0, 1]", p[0])))
            }
            Kernel::SsAnova(a) => {
                for b in a.blocks.iter().filter(|b| b.kind.needs_unit_interval()) {
                    for &c in &b.coords {
                        if !unit(p[c]) {
                            return Err(Error::Domain(format!(
                                "cubic spline covariate x{} = {} outside [0, 1]",
                                c + 1,
                                p[c]
                            )));
                        }
                    }
                }
                for &c in &a.linear {
                    if !unit(p[c]) {
                        return Err(Error::Domain(format!("covariate x{} = {} outside [0, 1]", c + 1, p[c])));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn check_points(&self, pts: &[Vec<f64>]) -> Result<()> {
        pts.iter().try_for_each(|p| self.check_point(p))
    }

    /// Symmetric Gram matrix `K(p_i, p_j)`.
    pub fn gram(&self, pts: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        self.check_points(pts)?;
        let n = pts.len();
        let mut g = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = self.eval(&pts[i], &pts[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(g)
    }

    /// Cross matrix with rows indexed by `a` and columns by `b`.
    pub fn cross_gram(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        self.check_points(a)?;
        self.check_points(b)?;
        Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(&a[i], &b[j])))
    }

    pub fn null_dim(&self) -> usize {
        match self {
            Kernel::CubicSpline => 2,
            Kernel::ThinPlate => 3,
            Kernel::Gaussian { .. } => 1,
            Kernel::SsAnova(a) => 1 + a.linear_terms().len(),
        }
    }

    /// Values of the null-space basis functions at one point.
    pub fn null_row(&self, p: &[f64]) -> Vec<f64> {
        match self {
            Kernel::CubicSpline => vec![1.0, k1(p[0])],
            Kernel::ThinPlate => vec![1.0, p[0], p[1]],
            Kernel::Gaussian { .. } => vec![1.0],
            Kernel::SsAnova(a) => {
                let mut row = vec![1.0];
                row.extend(a.linear_terms().into_iter().map(|c| k1(p[c])));
                row
            }
        }
    }

    /// Null-space design matrix without a rank check (used for evaluation).
    pub fn null_matrix(&self, pts: &[Vec<f64>]) -> DMatrix<f64> {
        let m = self.null_dim();
        let mut s = DMatrix::zeros(pts.len(), m);
        for (i, p) in pts.iter().enumerate() {
            for (j, v) in self.null_row(p).into_iter().enumerate() {
                s[(i, j)] = v;
            }
        }
        s
    }

    /// Null-space design matrix; rank deficiency is a degenerate design.
    pub fn null_basis(&self, pts: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        self.check_points(pts)?;
        let s = self.null_matrix(pts);
        if s.nrows() < s.ncols() {
            return Err(Error::DegenerateDesign(format!(
                "{} points cannot determine a {}-dimensional null space",
                s.nrows(),
                s.ncols()
            )));
        }
        let sv = s.clone().singular_values();
        let max = sv.max();
        let min = sv.min();
        if !(min > 1e-10 * max.max(1.0)) {
            return Err(Error::DegenerateDesign(format!(
                "null-space basis is rank deficient (singular values {min:e} .. {max:e})"
            )));
        }
        Ok(s)
    }
}

/// `sum_b theta_b * gram(points restricted to block b)`.
pub fn ssanova_gram(pts: &[Vec<f64>], blocks: &[Block], thetas: &[f64]) -> Result<DMatrix<f64>> {
    if blocks.len() != thetas.len() {
        return Err(Error::Contract(format!("{} blocks but {} block weights", blocks.len(), thetas.len())));
    }
    let blocks: Vec<Block> = blocks.iter().zip(thetas).map(|(b, &theta)| Block { theta, ..b.clone() }).collect();
    Kernel::SsAnova(SsAnova { blocks, linear: Vec::new() }).gram(pts)
}
