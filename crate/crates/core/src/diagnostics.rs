//! MTW tensor and σ_MTW estimate, blow-up dichotomy thresholds and monitor,
//! the polynomial p_σ(s) = s − σsⁿ − C, and coefficients of the linearized
//! operator.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{self, CostModel};
use crate::error::{Error, Result};
use crate::flow::{PotentialState, Problem};
use crate::geometry::GridDomain;
use crate::linalg;

fn a_in_range(cost: &CostModel, x: &DVector<f64>, p: &DVector<f64>) -> Result<DMatrix<f64>> {
    cost::a_matrix(cost, x, p).map_err(|e| Error::Range(format!("A(x, p) unavailable at p = {:?}: {e}", p.as_slice())))
}

/// D²_{p_i p_j} A_{kl}(x, p) Vⁱ Vʲ ηᵏ ηˡ. The fourth-order tensor is built
/// once by central differences in p (coarse displacement `step`, one
/// Richardson extrapolation) and then contracted, so the result is exactly
/// multilinear in V and η up to rounding.
pub fn mtw_tensor_with_step(
    cost: &CostModel,
    x: &DVector<f64>,
    p: &DVector<f64>,
    v: &DVector<f64>,
    eta: &DVector<f64>,
    step: f64,
) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::Dimension("the MTW tensor needs n ≥ 2".into()));
    }
    let t = PTensor::build(cost, x, p, step)?;
    Ok(t.contract(v.as_slice(), eta.as_slice()))
}

/// [`mtw_tensor_with_step`] with step 1e-3·max(1, |p|).
pub fn mtw_tensor(cost: &CostModel, x: &DVector<f64>, p: &DVector<f64>, v: &DVector<f64>, eta: &DVector<f64>) -> Result<f64> {
    mtw_tensor_with_step(cost, x, p, v, eta, 1e-3 * p.norm().max(1.0))
}

/// T_{ijkl} = ∂²A_{kl}/∂p_i∂p_j at one (x, p), Richardson-extrapolated.
struct PTensor {
    n: usize,
    t: Vec<f64>,
}

impl PTensor {
    fn build(cost: &CostModel, x: &DVector<f64>, p: &DVector<f64>, step: f64) -> Result<Self> {
        let n = p.len();
        let at = |shift: &[(usize, f64)]| -> Result<DMatrix<f64>> {
            let mut q = p.clone();
            for &(k, s) in shift {
                q[k] += s;
            }
            a_in_range(cost, x, &q)
        };
        let a0 = at(&[])?;
        let level = |d: f64| -> Result<Vec<DMatrix<f64>>> {
            let mut out = vec![DMatrix::zeros(n, n); n * n];
            for i in 0..n {
                out[i * n + i] = (at(&[(i, d)])? - &a0 * 2.0 + at(&[(i, -d)])?) / (d * d);
                for j in (i + 1)..n {
                    let m = (at(&[(i, d), (j, d)])? - at(&[(i, d), (j, -d)])? - at(&[(i, -d), (j, d)])?
                        + at(&[(i, -d), (j, -d)])?)
                        / (4.0 * d * d);
                    out[i * n + j] = m.clone();
                    out[j * n + i] = m;
                }
            }
            Ok(out)
        };
        let coarse = level(step)?;
        let fine = level(0.5 * step)?;
        let mut t = vec![0.0; n * n * n * n];
        for ij in 0..n * n {
            let m = (&fine[ij] * 4.0 - &coarse[ij]) / 3.0;
            for k in 0..n {
                for l in 0..n {
                    t[(ij * n + k) * n + l] = m[(k, l)];
                }
            }
        }
        Ok(Self { n, t })
    }

    fn contract(&self, v: &[f64], eta: &[f64]) -> f64 {
        let n = self.n;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        s += self.t[((i * n + j) * n + k) * n + l] * v[i] * v[j] * eta[k] * eta[l];
                    }
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtwConfig {
    /// Angular sweep resolution for the orthogonal pair (V, η).
    pub directions: usize,
    /// Cap on source nodes and on target nodes sampled (strided).
    pub max_points: usize,
    /// Random angular refinements around the running minimum.
    pub refinements: usize,
}

impl Default for MtwConfig {
    fn default() -> Self {
        Self {
            directions: 64,
            max_points: 20,
            refinements: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MtwWitness {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub v: Vec<f64>,
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MtwEstimate {
    pub sigma: f64,
    pub min_value: f64,
    pub witness: MtwWitness,
    pub samples: usize,
    /// (x, p) pairs skipped because the stencil left the admissible range.
    pub skipped: usize,
    pub fd_step: f64,
}

fn strided(indices: Vec<usize>, cap: usize) -> Vec<usize> {
    if indices.len() <= cap {
        return indices;
    }
    let stride = indices.len() as f64 / cap as f64;
    (0..cap).map(|k| indices[(k as f64 * stride) as usize]).collect()
}

fn orthogonal_pair(theta: f64) -> ([f64; 2], [f64; 2]) {
    let (s, c) = theta.sin_cos();
    let v = [c, s];
    let eta = [-s, c];
    assert!((v[0] * eta[0] + v[1] * eta[1]).abs() <= 1e-12);
    (v, eta)
}

/// Lower-bound estimate of σ_MTW: minimizes the MTW tensor over sampled
/// source nodes x, covectors p = −∇_x c(x, y) for sampled target nodes y,
/// and orthogonal unit pairs (V, η).
pub fn estimate_sigma_mtw(
    cost: &CostModel,
    source: &GridDomain,
    target: &GridDomain,
    config: &MtwConfig,
    seed: u64,
) -> Result<MtwEstimate> {
    if source.dim() != 2 || target.dim() != 2 {
        return Err(Error::Dimension("σ_MTW estimation is implemented for n = 2".into()));
    }
    if config.directions == 0 || config.max_points == 0 {
        return Err(Error::Config("mtw.directions and mtw.max_points must be at least 1".into()));
    }
    let xs = strided(source.active_indices(), config.max_points);
    let ys = strided(target.active_indices(), config.max_points);
    let mut pairs = Vec::new();
    for &i in &xs {
        for &j in &ys {
            let x = &source.nodes[i];
            if let Ok(g) = cost.grad_x(x, &target.nodes[j]) {
                pairs.push((x.clone(), -g));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Sampling("no admissible (x, p) samples".into()));
    }
    let mut diam: f64 = 0.0;
    for a in &pairs {
        for b in &pairs {
            diam = diam.max((&a.1 - &b.1).norm());
        }
    }
    let step = 1e-3 * if diam > 0.0 { diam } else { 1.0 };

    let mut best = f64::INFINITY;
    let mut witness = None;
    let mut samples = 0;
    let mut skipped = 0;
    let mut tensors = Vec::with_capacity(pairs.len());
    for (x, p) in &pairs {
        let t = match PTensor::build(cost, x, p, step) {
            Ok(t) => t,
            Err(Error::Range(msg)) => {
                log::debug!("skipping MTW sample: {msg}");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        for k in 0..config.directions {
            let theta = std::f64::consts::PI * k as f64 / config.directions as f64;
            let (v, eta) = orthogonal_pair(theta);
            let val = t.contract(&v, &eta);
            samples += 1;
            if val < best {
                best = val;
                witness = Some((tensors.len(), theta));
            }
        }
        tensors.push((x, p, t));
    }
    let Some((wi, mut wtheta)) = witness else {
        return Err(Error::Sampling("every sample left the admissible range".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut width = std::f64::consts::PI / config.directions as f64;
    for _ in 0..config.refinements {
        let theta = wtheta + width * rng.random_range(-1.0..1.0);
        let (v, eta) = orthogonal_pair(theta);
        let val = tensors[wi].2.contract(&v, &eta);
        samples += 1;
        if val < best {
            best = val;
            wtheta = theta;
        } else {
            width *= 0.97;
        }
    }
    let (x, p, _) = &tensors[wi];
    let (v, eta) = orthogonal_pair(wtheta);
    Ok(MtwEstimate {
        sigma: (-best).max(0.0),
        min_value: best,
        witness: MtwWitness {
            x: x.iter().copied().collect(),
            p: p.iter().copied().collect(),
            v: v.to_vec(),
            eta: eta.to_vec(),
        },
        samples,
        skipped,
        fd_step: step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DichotomyThresholds {
    pub n: usize,
    pub sigma: f64,
    #[serde(serialize_with = "crate::serialize_inf_as_null")]
    pub safe_bound: f64,
    #[serde(serialize_with = "crate::serialize_inf_as_null")]
    pub blowup_bound: f64,
}

impl DichotomyThresholds {
    pub fn is_finite(&self) -> bool {
        self.blowup_bound.is_finite()
    }
}

/// blowup = (1/n)(1/(nσ))^{1/(n−1)} and safe = blowup/2.
pub fn dichotomy_thresholds(n: usize, sigma: f64) -> Result<DichotomyThresholds> {
    if n < 2 {
        return Err(Error::Dimension(format!("dichotomy thresholds need n ≥ 2, got {n}")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    let blowup = if sigma == 0.0 {
        f64::INFINITY
    } else {
        let nf = n as f64;
        (1.0 / nf) * (1.0 / (nf * sigma)).powf(1.0 / (nf - 1.0))
    };
    Ok(DichotomyThresholds {
        n,
        sigma,
        safe_bound: blowup / 2.0,
        blowup_bound: blowup,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorVerdict {
    Pass,
    Warn,
    Breach,
}

pub fn classify(omega: f64, thresholds: &DichotomyThresholds) -> MonitorVerdict {
    if omega >= thresholds.blowup_bound {
        MonitorVerdict::Breach
    } else if omega <= thresholds.safe_bound {
        MonitorVerdict::Pass
    } else {
        MonitorVerdict::Warn
    }
}

/// Update the running maximum ω of ‖W‖ and classify it. Without finite
/// thresholds the monitor always passes.
pub fn monitor_dichotomy(
    state: &PotentialState,
    thresholds: Option<&DichotomyThresholds>,
    omega: f64,
) -> (f64, MonitorVerdict) {
    let omega = omega.max(state.max_w_norm());
    match thresholds {
        Some(t) if t.is_finite() => (omega, classify(omega, t)),
        _ => (omega, MonitorVerdict::Pass),
    }
}

/// Initial-data check max‖W‖ ≤ (1/(4n))(1/(nσ))^{1/(n−1)}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InitialOmegaCheck {
    pub max_w_norm: f64,
    #[serde(serialize_with = "crate::serialize_inf_as_null")]
    pub bound: f64,
    pub holds: bool,
}

pub fn initial_omega_check(max_w_norm: f64, thresholds: &DichotomyThresholds) -> InitialOmegaCheck {
    let bound = thresholds.blowup_bound / 4.0;
    InitialOmegaCheck {
        max_w_norm,
        bound,
        holds: max_w_norm <= bound,
    }
}

/// p_σ(s) = s − σsⁿ − C
pub fn poly_value(n: usize, sigma: f64, c: f64, s: f64) -> f64 {
    s - sigma * s.powi(n as i32) - c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolyCertificates {
    pub p_at_zero: f64,
    pub p_at_critical: f64,
    /// A point beyond which p_σ < 0, and the value there.
    pub large_s: f64,
    pub p_at_large: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolyBounds {
    /// s1 < nC/(n−1); at C = 0 the comparison is s1 ≤ 0.
    pub s1_below: bool,
    /// s2 ≥ (1/(nσ))^{1/(n−1)}
    pub s2_above: bool,
    /// p_σ(ŝ) ≥ (2n−1)C
    pub critical_value: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolyAnalysis {
    pub n: usize,
    pub sigma: f64,
    pub c: f64,
    pub s_hat: f64,
    /// (s1, s2) with s1 < ŝ < s2, absent when p_σ(ŝ) ≤ 0.
    pub roots: Option<(f64, f64)>,
    pub assumption: bool,
    pub certificates: PolyCertificates,
    /// Evaluated only when the assumption flag holds.
    pub bounds: Option<PolyBounds>,
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return if f(lo).abs() <= f(hi).abs() { lo } else { hi };
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

pub fn analyze_polynomial(n: usize, sigma: f64, c: f64) -> Result<PolyAnalysis> {
    if n < 2 {
        return Err(Error::Dimension(format!("the polynomial analysis needs n ≥ 2, got {n}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) || !(c >= 0.0 && c.is_finite()) {
        return Err(Error::Config("analyze_polynomial needs σ > 0 and C ≥ 0".into()));
    }
    let nf = n as f64;
    let e = 1.0 / (nf - 1.0);
    let s_hat = (1.0 / (nf * sigma)).powf(e);
    let p = |s: f64| poly_value(n, sigma, c, s);
    let large_s = (2.0 / sigma).powf(e) + c;
    let certificates = PolyCertificates {
        p_at_zero: p(0.0),
        p_at_critical: p(s_hat),
        large_s,
        p_at_large: p(large_s),
    };
    let roots = if c == 0.0 {
        Some((0.0, (1.0 / sigma).powf(e)))
    } else if certificates.p_at_critical > 0.0 {
        Some((bisect(p, 0.0, s_hat), bisect(p, s_hat, large_s)))
    } else {
        None
    };
    let assumption = 1.0 / (nf * sigma) >= (2.0 * nf * nf * c / (nf - 1.0)).powf(nf - 1.0);
    let bounds = match (assumption, roots) {
        (true, Some((s1, s2))) => Some(PolyBounds {
            s1_below: if c == 0.0 { s1 <= 0.0 } else { s1 < nf * c / (nf - 1.0) },
            s2_above: s2 >= s_hat,
            critical_value: certificates.p_at_critical >= (2.0 * nf - 1.0) * c,
        }),
        (true, None) => Some(PolyBounds {
            s1_below: false,
            s2_above: false,
            critical_value: certificates.p_at_critical >= (2.0 * nf - 1.0) * c,
        }),
        _ => None,
    };
    Ok(PolyAnalysis {
        n,
        sigma,
        c,
        s_hat,
        roots,
        assumption,
        certificates,
        bounds,
    })
}

/// Coefficients of 𝓛θ = w^{ij}(θ_ij − D_{p_k}A_ij θ_k) − D_{p_k}(log B) θ_k
/// at one interior node.
#[derive(Debug, Clone)]
pub struct LinearCoeffs {
    /// W⁻¹
    pub w_inv: DMatrix<f64>,
    /// w^{ij} D_{p_k} A_ij
    pub drift: DVector<f64>,
    /// D_p log B
    pub dlog_b: DVector<f64>,
}

/// Per-node coefficients of the linearized operator (None off the interior
/// and at flagged nodes). D_p derivatives by central differences.
pub fn linearized_coeffs(problem: &Problem, state: &PotentialState) -> Result<Vec<Option<LinearCoeffs>>> {
    let grid = &state.grid;
    let n = grid.dim();
    let mut out = vec![None; grid.len()];
    for i in grid.interior_indices() {
        if state.flagged.contains(&i) {
            continue;
        }
        let w_inv = linalg::inverse(&state.w[i])
            .filter(|_| linalg::min_eigenvalue(&state.w[i]) > 0.0)
            .ok_or(Error::Positivity {
                node: i,
                min_eig: linalg::min_eigenvalue(&state.w[i]),
            })?;
        let x = &grid.nodes[i];
        let p = &state.grad[i];
        let d = 1e-5 * p.norm().max(1.0);
        let mut drift = DVector::zeros(n);
        let mut dlog_b = DVector::zeros(n);
        for k in 0..n {
            let mut pp = p.clone();
            pp[k] += d;
            let mut pm = p.clone();
            pm[k] -= d;
            let da = (cost::a_matrix(&problem.cost, x, &pp)? - cost::a_matrix(&problem.cost, x, &pm)?) / (2.0 * d);
            drift[k] = w_inv.component_mul(&da).sum();
            let lb = |q: &DVector<f64>| -> Result<f64> {
                Ok(cost::b_value(&problem.cost, &problem.rho, &problem.rho_star, x, q)?.ln())
            };
            dlog_b[k] = (lb(&pp)? - lb(&pm)?) / (2.0 * d);
        }
        out[i] = Some(LinearCoeffs { w_inv, drift, dlog_b });
    }
    Ok(out)
}

/// 𝓛θ at interior nodes for a nodal field θ, using the problem's stencils.
pub fn apply_linearized(problem: &Problem, coeffs: &[Option<LinearCoeffs>], theta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; theta.len()];
    for (i, c) in coeffs.iter().enumerate() {
        let Some(c) = c else { continue };
        let g = problem.stencils.gradient_at(theta, i);
        let h = problem.stencils.hessian_at(theta, i);
        out[i] = c.w_inv.component_mul(&h).sum() - c.drift.dot(&g) - c.dlog_b.dot(&g);
    }
    out
}
