//! Cost families with analytic derivatives, the c-exponential maps and the
//! pointwise fields built from them (the matrix A, the density ratio B, the
//! boundary function G and its p-gradient β), plus checkers for the
//! structural conditions on a cost/domain pair.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DensityField, DomainSpec, GridDomain};
use crate::linalg;

/// Newton settings for the c-exponential map.
pub const EXP_MAX_ITER: usize = 50;
pub const EXP_TOL: f64 = 1e-12;

/// Smooth perturbations η of the quadratic cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    Zero,
    /// a·⟨x, y⟩
    Bilinear { a: f64 },
    /// a·|y|²
    YSquared { a: f64 },
    /// eps·Σ_i sin(x_i) sin(y_i)
    SinSin { eps: f64 },
}

impl Perturbation {
    fn derivatives(&self, x: &DVector<f64>, y: &DVector<f64>) -> DerivativeBundle {
        let n = x.len();
        let mut b = DerivativeBundle::zeros(n);
        match *self {
            Perturbation::Zero => {}
            Perturbation::Bilinear { a } => {
                b.value = a * x.dot(y);
                b.grad_x = y * a;
                b.grad_y = x * a;
                b.dxy = DMatrix::identity(n, n) * a;
            }
            Perturbation::YSquared { a } => {
                b.value = a * y.norm_squared();
                b.grad_y = y * (2.0 * a);
                b.dyy = DMatrix::identity(n, n) * (2.0 * a);
            }
            Perturbation::SinSin { eps } => {
                for i in 0..n {
                    let (sx, cx) = x[i].sin_cos();
                    let (sy, cy) = y[i].sin_cos();
                    b.value += eps * sx * sy;
                    b.grad_x[i] = eps * cx * sy;
                    b.grad_y[i] = eps * sx * cy;
                    b.dxx[(i, i)] = -eps * sx * sy;
                    b.dyy[(i, i)] = -eps * sx * sy;
                    b.dxy[(i, i)] = eps * cx * cy;
                }
            }
        }
        b
    }

    /// ∇_x η(x, y).
    pub fn grad_x(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.derivatives(x, y).grad_x
    }

    /// ∇_y η(x, y).
    pub fn grad_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.derivatives(x, y).grad_y
    }
}

/// Value and derivatives of a cost through second order at one point pair.
/// `dxy[(i, j)]` is ∂²c/∂x_i∂y_j.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBundle {
    pub value: f64,
    pub grad_x: DVector<f64>,
    pub grad_y: DVector<f64>,
    pub dxx: DMatrix<f64>,
    pub dxy: DMatrix<f64>,
    pub dyy: DMatrix<f64>,
}

impl DerivativeBundle {
    fn zeros(n: usize) -> Self {
        Self {
            value: 0.0,
            grad_x: DVector::zeros(n),
            grad_y: DVector::zeros(n),
            dxx: DMatrix::zeros(n, n),
            dxy: DMatrix::zeros(n, n),
            dyy: DMatrix::zeros(n, n),
        }
    }

    fn add_scaled(&mut self, other: &DerivativeBundle, s: f64) {
        self.value += s * other.value;
        self.grad_x += &other.grad_x * s;
        self.grad_y += &other.grad_y * s;
        self.dxx += &other.dxx * s;
        self.dxy += &other.dxy * s;
        self.dyy += &other.dyy * s;
    }

    fn swapped(self) -> Self {
        Self {
            value: self.value,
            grad_x: self.grad_y,
            grad_y: self.grad_x,
            dxx: self.dyy,
            dxy: self.dxy.transpose(),
            dyy: self.dxx,
        }
    }
}

/// A cost function c(x, y) with analytic derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum CostModel {
    /// ½|x − y|²
    Quadratic,
    /// (1/p)|x − y|^p, evaluated only where |x − y| ≥ `min_separation`.
    Power { p: f64, min_separation: f64 },
    /// ½|x − y|² + η(x, y)
    PerturbedQuadratic(Perturbation),
    /// (1 − s)·base + s·target, the homotopy between two costs.
    Blend {
        s: f64,
        base: Box<CostModel>,
        target: Box<CostModel>,
    },
    /// The cost with its arguments exchanged: (a, b) ↦ c(b, a).
    Swapped(Box<CostModel>),
    /// −Σ_i x_i (y_i − center_i)², even in y about `center`. It violates the
    /// twist condition and exists to exercise the checkers.
    FoldedY { center: Vec<f64> },
}

impl CostModel {
    pub fn power(p: f64) -> Result<Self> {
        if !(p > 1.0 && p.is_finite()) {
            return Err(Error::Config(format!("power cost needs p > 1, got {p}")));
        }
        Ok(CostModel::Power {
            p,
            min_separation: 1e-6,
        })
    }

    pub fn blend(base: CostModel, target: CostModel, s: f64) -> Self {
        CostModel::Blend {
            s,
            base: Box::new(base),
            target: Box::new(target),
        }
    }

    pub fn swapped(&self) -> Self {
        match self {
            CostModel::Swapped(inner) => (**inner).clone(),
            other => CostModel::Swapped(Box::new(other.clone())),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            CostModel::Quadratic => "quadratic",
            CostModel::Power { .. } => "power_p",
            CostModel::PerturbedQuadratic(_) => "perturbed_quadratic",
            CostModel::Blend { .. } => "blend",
            CostModel::Swapped(_) => "swapped",
            CostModel::FoldedY { .. } => "folded_y",
        }
    }

    /// True when D²_x c is independent of y (so A does not depend on p).
    pub fn is_quadratic(&self) -> bool {
        match self {
            CostModel::Quadratic => true,
            CostModel::PerturbedQuadratic(Perturbation::Zero) => true,
            CostModel::Power { p, .. } => *p == 2.0,
            CostModel::Swapped(inner) => inner.is_quadratic(),
            CostModel::Blend { base, target, .. } => base.is_quadratic() && target.is_quadratic(),
            _ => false,
        }
    }

    pub fn derivatives(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DerivativeBundle> {
        let n = x.len();
        if y.len() != n {
            return Err(Error::Dimension(format!(
                "cost arguments have {} and {} components",
                n,
                y.len()
            )));
        }
        match self {
            CostModel::Quadratic => Ok(quadratic_bundle(x, y)),
            CostModel::Power { p, min_separation } => {
                let d = x - y;
                let r = d.norm();
                if r < *min_separation {
                    return Err(Error::Separation {
                        dist: r,
                        guard: *min_separation,
                    });
                }
                let rp2 = r.powf(p - 2.0);
                let hess = DMatrix::identity(n, n) * rp2 + &d * d.transpose() * ((p - 2.0) * rp2 / (r * r));
                let g = &d * rp2;
                Ok(DerivativeBundle {
                    value: r.powf(*p) / p,
                    grad_y: -&g,
                    grad_x: g,
                    dxy: -&hess,
                    dyy: hess.clone(),
                    dxx: hess,
                })
            }
            CostModel::PerturbedQuadratic(eta) => {
                let mut b = quadratic_bundle(x, y);
                b.add_scaled(&eta.derivatives(x, y), 1.0);
                Ok(b)
            }
            CostModel::Blend { s, base, target } => {
                let mut b = base.derivatives(x, y)?;
                let t = target.derivatives(x, y)?;
                let mut out = DerivativeBundle::zeros(n);
                out.add_scaled(&b, 1.0 - s);
                out.add_scaled(&t, *s);
                b = out;
                Ok(b)
            }
            CostModel::Swapped(inner) => Ok(inner.derivatives(y, x)?.swapped()),
            CostModel::FoldedY { center } => {
                if center.len() != n {
                    return Err(Error::Dimension("folded cost center has the wrong dimension".into()));
                }
                let mut b = DerivativeBundle::zeros(n);
                for i in 0..n {
                    let e = y[i] - center[i];
                    b.value -= x[i] * e * e;
                    b.grad_x[i] = -e * e;
                    b.grad_y[i] = -2.0 * x[i] * e;
                    b.dxy[(i, i)] = -2.0 * e;
                    b.dyy[(i, i)] = -2.0 * x[i];
                }
                Ok(b)
            }
        }
    }

    pub fn value(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        match self {
            CostModel::Quadratic => Ok(0.5 * (x - y).norm_squared()),
            _ => Ok(self.derivatives(x, y)?.value),
        }
    }

    pub fn grad_x(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.derivatives(x, y)?.grad_x)
    }

    pub fn grad_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.derivatives(x, y)?.grad_y)
    }

    /// Starting point for the exponential-map Newton iteration. Exact for the
    /// quadratic and power families.
    pub fn default_guess(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        match self {
            CostModel::Power { p: e, .. } => {
                let np = p.norm();
                if np == 0.0 {
                    // the root sits on the excluded diagonal; step off it
                    let mut y = x.clone();
                    y[0] += 1.0;
                    y
                } else {
                    x + p * np.powf(1.0 / (e - 1.0) - 1.0)
                }
            }
            CostModel::Swapped(inner) => inner.default_guess(x, p),
            _ => x + p,
        }
    }

    /// ∂/∂y_ℓ of D²_x c, one matrix per ℓ, by central differences.
    pub fn dxx_by_y(&self, x: &DVector<f64>, y: &DVector<f64>, step: f64) -> Result<Vec<DMatrix<f64>>> {
        (0..y.len())
            .map(|l| {
                let mut yp = y.clone();
                yp[l] += step;
                let mut ym = y.clone();
                ym[l] -= step;
                Ok((self.derivatives(x, &yp)?.dxx - self.derivatives(x, &ym)?.dxx) / (2.0 * step))
            })
            .collect()
    }

    /// ∂/∂x_ℓ of D²_y c, one matrix per ℓ, by central differences.
    pub fn dyy_by_x(&self, x: &DVector<f64>, y: &DVector<f64>, step: f64) -> Result<Vec<DMatrix<f64>>> {
        (0..x.len())
            .map(|l| {
                let mut xp = x.clone();
                xp[l] += step;
                let mut xm = x.clone();
                xm[l] -= step;
                Ok((self.derivatives(&xp, y)?.dyy - self.derivatives(&xm, y)?.dyy) / (2.0 * step))
            })
            .collect()
    }
}

fn quadratic_bundle(x: &DVector<f64>, y: &DVector<f64>) -> DerivativeBundle {
    let n = x.len();
    let d = x - y;
    DerivativeBundle {
        value: 0.5 * d.norm_squared(),
        grad_y: -&d,
        grad_x: d,
        dxx: DMatrix::identity(n, n),
        dxy: -DMatrix::identity(n, n),
        dyy: DMatrix::identity(n, n),
    }
}

/// Solution of −∇_x c(x, y) = p.
#[derive(Debug, Clone)]
pub struct CExpResult {
    pub y: DVector<f64>,
    /// dy/dp = −(D²_{xy} c(x, y))⁻¹
    pub jacobian: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Set when y lies outside the admissible neighborhood of the target.
    pub out_of_range: bool,
}

/// c-exponential map: the y solving −∇_x c(x, y) = p, by damped Newton.
pub fn c_exp(
    cost: &CostModel,
    x: &DVector<f64>,
    p: &DVector<f64>,
    guess: Option<&DVector<f64>>,
) -> Result<CExpResult> {
    let start = guess.cloned().unwrap_or_else(|| cost.default_guess(x, p));
    match newton_exp(cost, x, p, start) {
        Ok(r) => Ok(r),
        Err(e @ Error::Degenerate { .. }) => Err(e),
        Err(first) => {
            if guess.is_none() {
                return Err(first);
            }
            newton_exp(cost, x, p, cost.default_guess(x, p)).map_err(|_| first)
        }
    }
}

/// Mirror of [`c_exp`]: the x solving −∇_y c(x, y) = q.
pub fn c_exp_star(
    cost: &CostModel,
    y: &DVector<f64>,
    q: &DVector<f64>,
    guess: Option<&DVector<f64>>,
) -> Result<CExpResult> {
    c_exp(&cost.swapped(), y, q, guess)
}

/// [`c_exp`] restricted to the neighborhood of `target`: a root outside it
/// is rejected and the solve re-seeded from the target center. If that also
/// lands outside, the result comes back flagged.
pub fn c_exp_within(
    cost: &CostModel,
    x: &DVector<f64>,
    p: &DVector<f64>,
    guess: Option<&DVector<f64>>,
    target: &DomainSpec,
) -> Result<CExpResult> {
    let mut r = c_exp(cost, x, p, guess)?;
    if target.in_neighborhood(&r.y) {
        return Ok(r);
    }
    let center = target.center_vec();
    if let Ok(alt) = newton_exp(cost, x, p, center) {
        if target.in_neighborhood(&alt.y) {
            return Ok(alt);
        }
    }
    r.out_of_range = true;
    Ok(r)
}

fn exp_residual(cost: &CostModel, x: &DVector<f64>, y: &DVector<f64>, p: &DVector<f64>) -> Result<(DerivativeBundle, DVector<f64>)> {
    let b = cost.derivatives(x, y)?;
    let f = -&b.grad_x - p;
    Ok((b, f))
}

fn newton_exp(cost: &CostModel, x: &DVector<f64>, p: &DVector<f64>, start: DVector<f64>) -> Result<CExpResult> {
    let tol = EXP_TOL * p.norm().max(1.0);
    let mut y = start;
    let (mut bundle, mut f) = exp_residual(cost, x, &y, p)?;
    let mut res = f.norm();
    let mut iterations = 0;
    let mut polished = false;
    loop {
        if res <= tol && (polished || res == 0.0) {
            break;
        }
        if iterations >= EXP_MAX_ITER {
            if res <= tol {
                break;
            }
            return Err(Error::NewtonFailed {
                best: y,
                residual: res,
                iterations,
            });
        }
        if res <= tol {
            polished = true;
        }
        let jac = -&bundle.dxy;
        let inv = checked_inverse(&jac, x, &y)?;
        let delta = -(&inv * &f);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &y + &delta * alpha;
            if let Ok((tb, tf)) = exp_residual(cost, x, &trial, p) {
                let tr = tf.norm();
                if tr < res || (polished && tr <= res) {
                    y = trial;
                    bundle = tb;
                    f = tf;
                    res = tr;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        iterations += 1;
        if !accepted {
            if res <= tol {
                break;
            }
            return Err(Error::NewtonFailed {
                best: y,
                residual: res,
                iterations,
            });
        }
    }
    let inv = checked_inverse(&bundle.dxy, x, &y)?;
    Ok(CExpResult {
        jacobian: -inv,
        y,
        iterations,
        residual: res,
        out_of_range: false,
    })
}

fn checked_inverse(m: &DMatrix<f64>, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let scale = m.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let d = linalg::det(m);
    if scale == 0.0 || d.abs() <= 1e-13 * scale.powi(n as i32) {
        return Err(Error::Degenerate {
            x: x.iter().copied().collect(),
            y: y.iter().copied().collect(),
        });
    }
    linalg::inverse(m).ok_or_else(|| Error::Degenerate {
        x: x.iter().copied().collect(),
        y: y.iter().copied().collect(),
    })
}

/// A(x, p) = −D²_x c(x, exp_x(p)), symmetrized.
pub fn a_matrix(cost: &CostModel, x: &DVector<f64>, p: &DVector<f64>) -> Result<DMatrix<f64>> {
    let e = c_exp(cost, x, p, None)?;
    a_at(cost, x, &e.y)
}

/// −D²_x c(x, y) for a known image point y.
pub fn a_at(cost: &CostModel, x: &DVector<f64>, y: &DVector<f64>) -> Result<DMatrix<f64>> {
    let mut a = -cost.derivatives(x, y)?.dxx;
    linalg::symmetrize(&mut a);
    Ok(a)
}

/// B(x, p) = |det D²_{xy} c(x, y)|·ρ(x)/ρ*(y) with y = exp_x(p).
pub fn b_value(
    cost: &CostModel,
    rho: &DensityField,
    rho_star: &DensityField,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<f64> {
    let e = c_exp(cost, x, p, None)?;
    let d = linalg::det(&cost.derivatives(x, &e.y)?.dxy).abs();
    Ok(d * rho.eval(x)? / rho_star.eval(&e.y)?)
}

/// G(x, p) = h*(exp_x(p)) and β = ∇_p G = (dy/dp)ᵀ ∇h*.
pub fn g_and_beta(
    cost: &CostModel,
    target: &DomainSpec,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let e = c_exp(cost, x, p, None)?;
    g_beta_from(&e, target)
}

pub fn g_beta_from(e: &CExpResult, target: &DomainSpec) -> Result<(f64, DVector<f64>)> {
    let (g, grad) = target.defining_function(&e.y)?;
    Ok((g, e.jacobian.transpose() * grad))
}

/// Outcome of the injectivity scan for y ↦ −∇_x c(x, y) and x ↦ −∇_y c(x, y).
#[derive(Debug, Clone, Serialize)]
pub struct BitwistReport {
    /// Smallest distance between the images of two distinct nodes.
    pub min_separation: f64,
    /// Smallest ratio |image difference| / |node difference|.
    pub min_ratio: f64,
    pub violations: usize,
    pub pairs_checked: usize,
    pub passes: bool,
}

const BITWIST_RATIO_FLOOR: f64 = 1e-8;
const MAX_CHECK_POINTS: usize = 48;

fn strided(indices: Vec<usize>, max: usize) -> Vec<usize> {
    if indices.len() <= max {
        return indices;
    }
    let stride = indices.len().div_ceil(max);
    indices.into_iter().step_by(stride).collect()
}

pub fn check_bitwist(cost: &CostModel, source: &GridDomain, target: &GridDomain) -> Result<BitwistReport> {
    let mut report = BitwistReport {
        min_separation: f64::INFINITY,
        min_ratio: f64::INFINITY,
        violations: 0,
        pairs_checked: 0,
        passes: true,
    };
    let src_all = source.active_indices();
    let tgt_all = target.active_indices();
    // y ↦ −∇_x c(x, y) for fixed x
    for &i in &strided(src_all.clone(), MAX_CHECK_POINTS) {
        let x = &source.nodes[i];
        let pts: Vec<&DVector<f64>> = tgt_all.iter().map(|&j| &target.nodes[j]).collect();
        let images = pts
            .iter()
            .map(|y| Ok(-cost.grad_x(x, y)?))
            .collect::<Result<Vec<_>>>()?;
        scan_pairs(&pts, &images, &mut report);
    }
    // x ↦ −∇_y c(x, y) for fixed y
    for &j in &strided(tgt_all, MAX_CHECK_POINTS) {
        let y = &target.nodes[j];
        let pts: Vec<&DVector<f64>> = src_all.iter().map(|&i| &source.nodes[i]).collect();
        let images = pts
            .iter()
            .map(|x| Ok(-cost.grad_y(x, y)?))
            .collect::<Result<Vec<_>>>()?;
        scan_pairs(&pts, &images, &mut report);
    }
    report.passes = report.violations == 0;
    Ok(report)
}

fn scan_pairs(pts: &[&DVector<f64>], images: &[DVector<f64>], report: &mut BitwistReport) {
    for a in 0..pts.len() {
        for b in (a + 1)..pts.len() {
            let dq = (&images[a] - &images[b]).norm();
            let dy = (pts[a] - pts[b]).norm();
            let ratio = dq / dy;
            report.min_separation = report.min_separation.min(dq);
            report.min_ratio = report.min_ratio.min(ratio);
            report.pairs_checked += 1;
            if ratio < BITWIST_RATIO_FLOOR {
                report.violations += 1;
            }
        }
    }
}

/// Worst value of the monotonicity pairings for a perturbation η.
#[derive(Debug, Clone, Serialize)]
pub struct AntiMonotoneReport {
    pub worst: f64,
    pub pairs_checked: usize,
    pub passes: bool,
}

/// Checks ⟨−∇_xη(x,y₂) + ∇_xη(x,y₁), y₂ − y₁⟩ ≥ 0 over node pairs, and the
/// same statement with the roles of x and y exchanged.
pub fn check_anti_monotone(eta: &Perturbation, source: &GridDomain, target: &GridDomain) -> AntiMonotoneReport {
    let mut worst = f64::INFINITY;
    let mut pairs = 0usize;
    let src_all = source.active_indices();
    let tgt_all = target.active_indices();
    for &i in &strided(src_all.clone(), MAX_CHECK_POINTS) {
        let x = &source.nodes[i];
        let grads: Vec<DVector<f64>> = tgt_all.iter().map(|&j| eta.grad_x(x, &target.nodes[j])).collect();
        for a in 0..tgt_all.len() {
            for b in (a + 1)..tgt_all.len() {
                let dy = &target.nodes[tgt_all[b]] - &target.nodes[tgt_all[a]];
                let v = (-&grads[b] + &grads[a]).dot(&dy);
                worst = worst.min(v);
                pairs += 1;
            }
        }
    }
    for &j in &strided(tgt_all, MAX_CHECK_POINTS) {
        let y = &target.nodes[j];
        let grads: Vec<DVector<f64>> = src_all.iter().map(|&i| eta.grad_y(&source.nodes[i], y)).collect();
        for a in 0..src_all.len() {
            for b in (a + 1)..src_all.len() {
                let dx = &source.nodes[src_all[b]] - &source.nodes[src_all[a]];
                let v = (-&grads[b] + &grads[a]).dot(&dx);
                worst = worst.min(v);
                pairs += 1;
            }
        }
    }
    AntiMonotoneReport {
        worst,
        pairs_checked: pairs,
        passes: worst >= 0.0,
    }
}

/// Minimal values δ, δ* of the domain and target convexity forms.
/// One-dimensional domains have no tangent directions; both are then +∞.
#[derive(Debug, Clone, Serialize)]
pub struct ConvexityReport {
    #[serde(serialize_with = "crate::serialize_inf_as_null")]
    pub delta: f64,
    #[serde(serialize_with = "crate::serialize_inf_as_null")]
    pub delta_star: f64,
    pub boundary_samples: usize,
}

pub fn check_domain_convexity(cost: &CostModel, source: &GridDomain, target: &GridDomain) -> Result<ConvexityReport> {
    if source.dim() == 1 {
        return Ok(ConvexityReport {
            delta: f64::INFINITY,
            delta_star: f64::INFINITY,
            boundary_samples: 0,
        });
    }
    let count = 4 * source.dims[0];
    let src_pts: Vec<DVector<f64>> = strided(source.active_indices(), 64)
        .into_iter()
        .map(|i| source.nodes[i].clone())
        .collect();
    let tgt_pts: Vec<DVector<f64>> = strided(target.active_indices(), 64)
        .into_iter()
        .map(|j| target.nodes[j].clone())
        .collect();
    let step_x = 1e-4 * source.spec.diameter();
    let step_y = 1e-4 * target.spec.diameter();

    // [D²h(x) − Σ c_{ij,ℓ} (C⁻¹)_{ℓk} ν_k] τ^i τ^j, C = D²_{xy} c
    let mut delta = f64::INFINITY;
    let src_samples = source.spec.boundary_samples(count);
    for (xb, nu) in &src_samples {
        let shape = source.spec.boundary_shape_operator(xb);
        for tau in tangents(nu) {
            for y in &tgt_pts {
                let c = cost.derivatives(xb, y)?;
                let inv = checked_inverse(&c.dxy, xb, y)?;
                let third = cost.dxx_by_y(xb, y, step_y)?;
                let w = &inv * nu; // w_ℓ = (C⁻¹)_{ℓk} ν_k
                let mut corr = DMatrix::zeros(nu.len(), nu.len());
                for (l, m) in third.iter().enumerate() {
                    corr += m * w[l];
                }
                let q = (tau.transpose() * (&shape - corr) * &tau)[(0, 0)];
                delta = delta.min(q);
            }
        }
    }

    // [D²h*(y) − Σ (C⁻¹)_{kℓ} c_{ℓ,ij} ν*_k] τ^i τ^j
    let mut delta_star = f64::INFINITY;
    for (yb, nu) in &target.spec.boundary_samples(count) {
        let shape = target.spec.boundary_shape_operator(yb);
        for tau in tangents(nu) {
            for x in &src_pts {
                let c = cost.derivatives(x, yb)?;
                let inv = checked_inverse(&c.dxy, x, yb)?;
                let third = cost.dyy_by_x(x, yb, step_x)?;
                let w = inv.transpose() * nu; // w_ℓ = (C⁻¹)_{kℓ} ν*_k
                let mut corr = DMatrix::zeros(nu.len(), nu.len());
                for (l, m) in third.iter().enumerate() {
                    corr += m * w[l];
                }
                let q = (tau.transpose() * (&shape - corr) * &tau)[(0, 0)];
                delta_star = delta_star.min(q);
            }
        }
    }
    Ok(ConvexityReport {
        delta,
        delta_star,
        boundary_samples: src_samples.len(),
    })
}

/// Unit tangents at a boundary point with outward normal ν. In 2D the single
/// rotated normal; in higher dimensions an orthonormal basis of ν^⊥.
fn tangents(nu: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = nu.len();
    if n == 2 {
        return vec![DVector::from_vec(vec![-nu[1], nu[0]])];
    }
    let mut out: Vec<DVector<f64>> = Vec::new();
    for k in 0..n {
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        let mut v = &e - nu * nu.dot(&e);
        for t in &out {
            v -= t * t.dot(&v);
        }
        let norm = v.norm();
        if norm > 1e-8 {
            out.push(v / norm);
        }
        if out.len() == n - 1 {
            break;
        }
    }
    out
}
