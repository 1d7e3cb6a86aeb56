//! Discretization of the parabolic flow
//!
//!   u̇ = log det(D²u − A(x, ∇u)) − log B(x, ∇u)  in Ω,
//!   G(x, ∇u) = 0                                 on ∂Ω,
//!
//! with explicit Euler in time and a Newton solve for the boundary values
//! after every step.
//!
//! A potential is stored as an analytic quadratic base plus a nodal
//! deviation. Derivatives of the base are exact, so a potential that equals
//! its base (an affine seed, say) is differentiated without rounding noise.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::{self, CExpResult, CostModel};
use crate::diagnostics::{self, DichotomyThresholds, MonitorVerdict};
use crate::error::{Error, Result};
use crate::geometry::{DensityField, DomainSpec, GridDomain, NodeClass};
use crate::linalg;
use crate::spline::CubicSpline;
use crate::stencil::Stencils;

/// Everything a flow needs besides the potential: the cost, both grids with
/// their densities, and the difference stencils on the source grid.
#[derive(Debug, Clone)]
pub struct Problem {
    pub cost: CostModel,
    pub rho: DensityField,
    pub rho_star: DensityField,
    pub stencils: Arc<Stencils>,
}

impl Problem {
    pub fn new(cost: CostModel, rho: DensityField, rho_star: DensityField) -> Result<Self> {
        if rho.grid.dim() != rho_star.grid.dim() {
            return Err(Error::Dimension("source and target dimensions differ".into()));
        }
        let stencils = Arc::new(Stencils::new(&rho.grid)?);
        Ok(Self {
            cost,
            rho,
            rho_star,
            stencils,
        })
    }

    pub fn with_cost(&self, cost: CostModel) -> Self {
        Self {
            cost,
            ..self.clone()
        }
    }

    pub fn source(&self) -> &Arc<GridDomain> {
        &self.rho.grid
    }

    pub fn target(&self) -> &Arc<GridDomain> {
        &self.rho_star.grid
    }

    pub fn target_spec(&self) -> &DomainSpec {
        &self.rho_star.grid.spec
    }

    /// The point at which node `idx` is evaluated: its boundary projection for
    /// boundary nodes, the lattice position otherwise.
    pub fn eval_point(&self, idx: usize) -> &DVector<f64> {
        let g = self.source();
        g.boundary_points[idx].as_ref().unwrap_or(&g.nodes[idx])
    }

    /// The dual problem: cost with swapped arguments, roles of the domains
    /// and densities exchanged.
    pub fn dual(&self) -> Result<Self> {
        Self::new(self.cost.swapped(), self.rho_star.clone(), self.rho.clone())
    }
}

/// ½ xᵀMx + b·x + k
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBase {
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
    pub k: f64,
}

impl QuadraticBase {
    pub fn zero(n: usize) -> Self {
        Self {
            m: DMatrix::zeros(n, n),
            b: DVector::zeros(n),
            k: 0.0,
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.m * x)) + self.b.dot(x) + self.k
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.m * x + &self.b
    }
}

/// A potential on the source grid at time t, with its derived fields.
#[derive(Debug, Clone)]
pub struct PotentialState {
    pub grid: Arc<GridDomain>,
    pub base: QuadraticBase,
    /// Nodal deviation from the base; u = base + v.
    pub v: Vec<f64>,
    pub t: f64,
    /// ∇u at every active node (at the boundary projection for boundary nodes).
    pub grad: Vec<DVector<f64>>,
    /// D²u at interior nodes.
    pub hess: Vec<DMatrix<f64>>,
    /// W = D²u − A at interior nodes.
    pub w: Vec<DMatrix<f64>>,
    /// exp_x(∇u(x)) at active nodes, None where the solve failed.
    pub image: Vec<Option<DVector<f64>>>,
    /// dy/dp of the exponential map at active nodes.
    pub jacobian: Vec<Option<DMatrix<f64>>>,
    pub log_b: Vec<f64>,
    /// u̇ at interior nodes; NaN where W is not positive definite.
    pub rate: Vec<f64>,
    /// G at boundary nodes.
    pub g: Vec<f64>,
    pub beta: Vec<Option<DVector<f64>>>,
    pub min_eig: f64,
    pub min_eig_node: usize,
    /// Nodes where the exponential map failed; their rate is frozen at zero.
    pub flagged: Vec<usize>,
    /// Nodes whose image left the admissible target neighborhood.
    pub out_of_range: usize,
}

impl PotentialState {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn u_at(&self, idx: usize) -> f64 {
        self.base.value(&self.grid.nodes[idx]) + self.v[idx]
    }

    /// u at every node (exterior nodes included, where it is meaningless).
    pub fn u_values(&self) -> Vec<f64> {
        (0..self.grid.len()).map(|i| self.u_at(i)).collect()
    }

    /// Quadrature mean of u over the source domain.
    pub fn mean(&self) -> f64 {
        let total = self.grid.total_weight();
        let s: f64 = (0..self.grid.len())
            .filter(|&i| self.grid.weights[i] > 0.0)
            .map(|i| self.grid.weights[i] * self.u_at(i))
            .sum();
        s / total
    }

    /// Same state with the constant shifted so that ∫u = 0. Derived fields
    /// do not depend on the constant and are kept.
    pub fn zero_mean(&self) -> Self {
        let mut out = self.clone();
        out.base.k -= self.mean();
        out
    }

    /// Largest |u̇| over interior nodes.
    pub fn residual_sup(&self) -> f64 {
        self.grid
            .interior_indices()
            .iter()
            .map(|&i| self.rate[i].abs())
            .fold(0.0, f64::max)
    }

    /// Largest deviation of u̇ from its quadrature mean over interior nodes.
    /// A spatially constant rate only shifts u and leaves the map unchanged.
    pub fn residual_spread(&self) -> f64 {
        let interior = self.grid.interior_indices();
        let wsum: f64 = interior.iter().map(|&i| self.grid.weights[i]).sum();
        let mean: f64 = interior.iter().map(|&i| self.grid.weights[i] * self.rate[i]).sum::<f64>() / wsum;
        interior
            .iter()
            .map(|&i| (self.rate[i] - mean).abs())
            .fold(0.0, f64::max)
    }

    /// Largest |G| over boundary nodes.
    pub fn boundary_residual(&self) -> f64 {
        self.grid
            .boundary_indices()
            .iter()
            .map(|&i| self.g[i].abs())
            .fold(0.0, f64::max)
    }

    /// Largest operator norm of W over interior nodes.
    pub fn max_w_norm(&self) -> f64 {
        self.grid
            .interior_indices()
            .iter()
            .filter(|i| !self.flagged.contains(i))
            .map(|&i| linalg::sym_operator_norm(&self.w[i]))
            .fold(0.0, f64::max)
    }

    /// |Σ (det W/B − 1)·weight| / volume over interior nodes.
    pub fn mass_balance_error(&self) -> f64 {
        let mut acc = 0.0;
        for i in self.grid.interior_indices() {
            if self.flagged.contains(&i) {
                continue;
            }
            let ratio = (linalg::det(&self.w[i]).ln() - self.log_b[i]).exp();
            acc += (ratio - 1.0) * self.grid.weights[i];
        }
        acc.abs() / self.grid.spec.volume()
    }
}

/// Build a state from a base and nodal deviation, filling all cached fields.
/// `warm` supplies previous images as Newton starting points.
pub fn assemble_state(
    problem: &Problem,
    base: QuadraticBase,
    v: Vec<f64>,
    t: f64,
    warm: Option<&[Option<DVector<f64>>]>,
) -> Result<PotentialState> {
    let grid = problem.source().clone();
    let n = grid.dim();
    let len = grid.len();
    let target = problem.target_spec();
    let mut state = PotentialState {
        grid: grid.clone(),
        base,
        v,
        t,
        grad: vec![DVector::zeros(n); len],
        hess: vec![DMatrix::zeros(n, n); len],
        w: vec![DMatrix::zeros(n, n); len],
        image: vec![None; len],
        jacobian: vec![None; len],
        log_b: vec![0.0; len],
        rate: vec![0.0; len],
        g: vec![0.0; len],
        beta: vec![None; len],
        min_eig: f64::INFINITY,
        min_eig_node: 0,
        flagged: Vec::new(),
        out_of_range: 0,
    };
    let active = grid.active_indices();
    for &idx in &active {
        let x = problem.eval_point(idx);
        let p = state.base.gradient(x) + problem.stencils.gradient_at(&state.v, idx);
        let guess = warm.and_then(|w| w[idx].as_ref());
        let e = match cost::c_exp_within(&problem.cost, x, &p, guess, target) {
            Ok(e) => e,
            Err(err) => {
                log::debug!("exponential map failed at node {idx}: {err}");
                state.flagged.push(idx);
                state.grad[idx] = p;
                continue;
            }
        };
        if e.out_of_range {
            state.out_of_range += 1;
        }
        match grid.class[idx] {
            NodeClass::Interior => {
                let bundle = problem.cost.derivatives(x, &e.y)?;
                let hess = &state.base.m + problem.stencils.hessian_at(&state.v, idx);
                let mut w = &hess + &bundle.dxx;
                linalg::symmetrize(&mut w);
                let rho_y = problem.rho_star.eval(&e.y)?;
                let log_b = linalg::det(&bundle.dxy).abs().ln() + problem.rho.values[idx].ln() - rho_y.ln();
                let lam = linalg::min_eigenvalue(&w);
                if lam < state.min_eig {
                    state.min_eig = lam;
                    state.min_eig_node = idx;
                }
                state.rate[idx] = if lam > 0.0 {
                    linalg::det(&w).ln() - log_b
                } else {
                    f64::NAN
                };
                state.log_b[idx] = log_b;
                state.hess[idx] = hess;
                state.w[idx] = w;
            }
            NodeClass::Boundary => {
                let (g, beta) = cost::g_beta_from(&e, target)?;
                state.g[idx] = g;
                state.beta[idx] = Some(beta);
            }
            NodeClass::Exterior => unreachable!(),
        }
        state.grad[idx] = p;
        state.jacobian[idx] = Some(e.jacobian);
        state.image[idx] = Some(e.y);
    }
    if state.flagged.len() as f64 > 0.01 * active.len() as f64 {
        return Err(Error::Assembly {
            flagged: state.flagged.len(),
            total: active.len(),
        });
    }
    for &idx in &state.flagged {
        if grid.class[idx] == NodeClass::Interior {
            state.w[idx] = DMatrix::identity(n, n);
            state.rate[idx] = 0.0;
        } else {
            state.g[idx] = f64::NAN;
        }
    }
    Ok(state)
}

/// u̇ at every node (zero off the interior).
pub fn residual(state: &PotentialState) -> Result<Vec<f64>> {
    if !(state.min_eig > 0.0) {
        return Err(Error::Positivity {
            node: state.min_eig_node,
            min_eig: state.min_eig,
        });
    }
    Ok(state.rate.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// κ in dt = κ·h²/(2·max tr W⁻¹)
    pub dt_safety: f64,
    /// Convergence threshold on the spatial spread of u̇.
    pub tolerance: f64,
    pub max_steps: usize,
    pub boundary_tol: f64,
    pub boundary_max_iter: usize,
    /// Accepted states keep min eig W at or above this floor.
    pub eps_pd: f64,
    /// Report a row every this many steps.
    pub cadence: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dt_safety: 0.5,
            tolerance: 1e-9,
            max_steps: 400_000,
            boundary_tol: 1e-12,
            boundary_max_iter: 30,
            eps_pd: 1e-10,
            cadence: 500,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_safety > 0.0 && self.dt_safety <= 1.0) {
            return Err(Error::Config("flow.dt_safety must lie in (0, 1]".into()));
        }
        if !(self.tolerance > 0.0 && self.boundary_tol > 0.0 && self.eps_pd > 0.0) {
            return Err(Error::Config("flow tolerances must be positive".into()));
        }
        if self.cadence == 0 || self.boundary_max_iter == 0 {
            return Err(Error::Config("flow.cadence and flow.boundary_max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Evaluation of G and β at every boundary node for a candidate deviation.
pub(crate) struct BoundaryEval {
    pub g: Vec<f64>,
    pub beta: Vec<DVector<f64>>,
    pub images: Vec<DVector<f64>>,
}

pub(crate) fn eval_boundary(
    problem: &Problem,
    base: &QuadraticBase,
    v: &[f64],
    nodes: &[usize],
    warm: &[Option<DVector<f64>>],
) -> Result<BoundaryEval> {
    let grid = problem.source();
    let target = problem.target_spec();
    let mut out = BoundaryEval {
        g: Vec::with_capacity(nodes.len()),
        beta: Vec::with_capacity(nodes.len()),
        images: Vec::with_capacity(nodes.len()),
    };
    for (slot, &idx) in nodes.iter().enumerate() {
        let x = problem.eval_point(idx);
        let p = base.gradient(x) + problem.stencils.gradient_at(v, idx);
        let e: CExpResult = cost::c_exp_within(&problem.cost, x, &p, warm[slot].as_ref(), target)?;
        let (g, beta) = cost::g_beta_from(&e, target)?;
        let nu = grid.normals[idx].as_ref().expect("boundary normal");
        let obl = beta.dot(nu);
        if !(obl > 0.0) {
            return Err(Error::Obliqueness { node: idx, value: obl });
        }
        out.g.push(g);
        out.beta.push(beta);
        out.images.push(e.y);
    }
    Ok(out)
}

/// Outcome of a boundary solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryStats {
    pub newton_steps: usize,
    pub residual: f64,
}

/// Adjust the boundary values of `v` so that G(x, ∇u) = 0 at every boundary
/// node. All boundary unknowns are updated together by damped Newton; the
/// interior values stay fixed, so only the outward one-sided part of each
/// boundary gradient moves.
pub fn enforce_boundary(
    problem: &Problem,
    base: &QuadraticBase,
    v: &mut [f64],
    config: &FlowConfig,
    warm: Option<&[Option<DVector<f64>>]>,
) -> Result<BoundaryStats> {
    let grid = problem.source();
    let nodes = grid.boundary_indices();
    let nb = nodes.len();
    let mut slot_of = vec![usize::MAX; grid.len()];
    for (s, &i) in nodes.iter().enumerate() {
        slot_of[i] = s;
    }
    let mut starts: Vec<Option<DVector<f64>>> = nodes
        .iter()
        .map(|&i| warm.and_then(|w| w[i].clone()))
        .collect();
    let mut ev = eval_boundary(problem, base, v, &nodes, &starts)?;
    let sup = |g: &[f64]| g.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    let mut res = sup(&ev.g);
    let mut steps = 0;
    while res > config.boundary_tol {
        if steps >= config.boundary_max_iter {
            return Err(Error::Boundary {
                residual: res,
                sweeps: steps,
            });
        }
        let mut jac = DMatrix::zeros(nb, nb);
        for (row, &idx) in nodes.iter().enumerate() {
            let st = problem.stencils.gradient[idx].as_ref().expect("boundary stencil");
            for (k, c) in &st.terms {
                let col = slot_of[*k];
                if col != usize::MAX {
                    jac[(row, col)] += ev.beta[row].dot(c);
                }
            }
        }
        let rhs = -DVector::from_column_slice(&ev.g);
        let delta = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::LinearSolve("boundary Newton system is singular".into()))?;
        let saved: Vec<f64> = nodes.iter().map(|&i| v[i]).collect();
        starts = ev.images.iter().cloned().map(Some).collect();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            for (s, &i) in nodes.iter().enumerate() {
                v[i] = saved[s] + alpha * delta[s];
            }
            if let Ok(trial) = eval_boundary(problem, base, v, &nodes, &starts) {
                let r = sup(&trial.g);
                if r < res {
                    accepted = Some((trial, r));
                    break;
                }
            }
            alpha *= 0.5;
        }
        steps += 1;
        match accepted {
            Some((trial, r)) => {
                ev = trial;
                res = r;
            }
            None => {
                for (s, &i) in nodes.iter().enumerate() {
                    v[i] = saved[s];
                }
                return Err(Error::Boundary {
                    residual: res,
                    sweeps: steps,
                });
            }
        }
    }
    Ok(BoundaryStats {
        newton_steps: steps,
        residual: res,
    })
}

/// One accepted explicit Euler step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: PotentialState,
    pub dt: f64,
    pub rejections: usize,
    pub boundary: BoundaryStats,
}

/// Time step from the stability heuristic: κ·h²/(2·max tr W⁻¹).
pub fn stable_dt(state: &PotentialState, kappa: f64) -> f64 {
    let h = state.grid.min_node_distance();
    let mut max_tr: f64 = 0.0;
    for i in state.grid.interior_indices() {
        if state.flagged.contains(&i) {
            continue;
        }
        let tr = match linalg::inverse(&state.w[i]) {
            Some(inv) => inv.trace(),
            None => f64::INFINITY,
        };
        max_tr = max_tr.max(tr);
    }
    kappa * h * h / (2.0 * max_tr)
}

pub fn step(problem: &Problem, state: &PotentialState, config: &FlowConfig) -> Result<StepOutcome> {
    let rate = residual(state)?;
    let mut dt = stable_dt(state, config.dt_safety);
    let interior = state.grid.interior_indices();
    for rejections in 0..10 {
        let mut v = state.v.clone();
        for &i in &interior {
            v[i] += dt * rate[i];
        }
        let attempt = enforce_boundary(problem, &state.base, &mut v, config, Some(&state.image)).and_then(|b| {
            assemble_state(problem, state.base.clone(), v, state.t + dt, Some(&state.image)).map(|s| (s, b))
        });
        match attempt {
            Ok((next, boundary)) if next.min_eig >= config.eps_pd => {
                return Ok(StepOutcome {
                    state: next,
                    dt,
                    rejections,
                    boundary,
                })
            }
            Ok((next, _)) => {
                log::debug!("step rejected: min eig W = {:.3e} at node {}", next.min_eig, next.min_eig_node);
            }
            Err(e) => log::debug!("step rejected: {e}"),
        }
        dt *= 0.5;
    }
    Err(Error::StepFailure { rejections: 10 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Converged,
    DichotomyBreach,
    StepFailure,
    MaxSteps,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowRow {
    pub step: usize,
    pub t: f64,
    /// ‖u̇‖_∞
    pub residual: f64,
    /// ‖u̇ − mean u̇‖_∞
    pub spread: f64,
    pub omega: f64,
    pub mass_err: f64,
    pub min_eig: f64,
    pub mean_u: f64,
}

#[derive(Debug, Clone)]
pub struct FlowReport {
    pub rows: Vec<FlowRow>,
    pub verdict: Verdict,
    pub steps: usize,
    pub omega: f64,
    pub monitor: Option<MonitorVerdict>,
    pub final_state: PotentialState,
}

fn row(state: &PotentialState, step: usize, omega: f64) -> FlowRow {
    FlowRow {
        step,
        t: state.t,
        residual: state.residual_sup(),
        spread: state.residual_spread(),
        omega,
        mass_err: state.mass_balance_error(),
        min_eig: state.min_eig,
        mean_u: state.mean(),
    }
}

/// Iterate [`step`] until the spread of u̇ drops below tolerance, the
/// dichotomy monitor reports a breach, a step fails, or the step budget runs
/// out.
pub fn run_flow(
    problem: &Problem,
    initial: PotentialState,
    config: &FlowConfig,
    thresholds: Option<&DichotomyThresholds>,
) -> Result<FlowReport> {
    config.validate()?;
    residual(&initial)?;
    let mut state = initial;
    let mut omega = 0.0;
    let mut monitor = None;
    let mut rows = Vec::new();
    let mut steps = 0;
    let verdict = loop {
        let (om, mv) = diagnostics::monitor_dichotomy(&state, thresholds, omega);
        omega = om;
        if thresholds.is_some() {
            monitor = Some(mv);
        }
        if steps == 0 || steps % config.cadence == 0 {
            rows.push(row(&state, steps, omega));
        }
        if state.residual_spread() < config.tolerance {
            break Verdict::Converged;
        }
        if mv == MonitorVerdict::Breach {
            break Verdict::DichotomyBreach;
        }
        if steps >= config.max_steps {
            break Verdict::MaxSteps;
        }
        match step(problem, &state, config) {
            Ok(out) => {
                state = out.state;
                steps += 1;
            }
            Err(Error::StepFailure { rejections }) => {
                log::warn!("step {steps} failed after {rejections} rejections");
                break Verdict::StepFailure;
            }
            Err(e) => return Err(e),
        }
    };
    if rows.last().map(|r| r.step) != Some(steps) {
        rows.push(row(&state, steps, omega));
    }
    log::info!(
        "flow finished: {:?} after {} steps, t = {:.4}, spread = {:.3e}",
        verdict,
        steps,
        state.t,
        state.residual_spread()
    );
    Ok(FlowReport {
        rows,
        verdict,
        steps,
        omega,
        monitor,
        final_state: state,
    })
}

/// Images of the nodes under the transport map with injectivity and
/// containment audits.
#[derive(Debug, Clone, Serialize)]
pub struct TransportMapReport {
    #[serde(skip)]
    pub map: Vec<Option<DVector<f64>>>,
    /// Smallest image distance between two non-adjacent nodes.
    pub min_separation: f64,
    pub collisions: usize,
    pub injective: bool,
    /// Largest h*(T(x)) over nodes.
    pub containment: f64,
    pub contained: bool,
    /// 1D only: images strictly increasing node to node.
    pub monotone: Option<bool>,
    pub out_of_range: usize,
}

pub fn transport_map(problem: &Problem, state: &PotentialState) -> Result<TransportMapReport> {
    let grid = &state.grid;
    let target = problem.target_spec();
    let h_star = problem.target().h();
    let eps_inj = 1e-3 * h_star;
    let active = grid.active_indices();
    let mut containment = f64::NEG_INFINITY;
    for &i in &active {
        if let Some(y) = &state.image[i] {
            containment = containment.max(target.signed_distance(y));
        }
    }
    let mut min_sep = f64::INFINITY;
    let mut collisions = 0;
    let mi: Vec<Vec<usize>> = active.iter().map(|&i| grid.multi_index(i)).collect();
    for a in 0..active.len() {
        let Some(ya) = &state.image[active[a]] else { continue };
        for b in (a + 1)..active.len() {
            let Some(yb) = &state.image[active[b]] else { continue };
            let adjacent = mi[a].iter().zip(&mi[b]).all(|(p, q)| p.abs_diff(*q) <= 1);
            if adjacent {
                continue;
            }
            let d = (ya - yb).norm();
            min_sep = min_sep.min(d);
            if d < eps_inj {
                collisions += 1;
            }
        }
    }
    let monotone = (grid.dim() == 1).then(|| {
        let ys: Vec<f64> = active
            .iter()
            .filter_map(|&i| state.image[i].as_ref().map(|y| y[0]))
            .collect();
        ys.len() == active.len() && ys.windows(2).all(|w| w[1] > w[0])
    });
    Ok(TransportMapReport {
        map: state.image.clone(),
        min_separation: min_sep,
        collisions,
        injective: collisions == 0 && state.flagged.is_empty(),
        containment,
        contained: containment <= 2.0 * h_star,
        monotone,
        out_of_range: state.out_of_range,
    })
}

enum DualModel {
    /// 1D: u is replaced by its clamped cubic spline S and the map by
    /// x ↦ exp_x(S'(x)), which keeps u* smooth between nodes.
    Spline {
        spline: CubicSpline,
        /// Images of the knots.
        images: Vec<f64>,
        lo: f64,
        hi: f64,
    },
    /// Local quadratic model of u around each interior node.
    Local {
        centers: Vec<LocalCenter>,
    },
}

struct LocalCenter {
    x: DVector<f64>,
    image: DVector<f64>,
    u: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    /// dT/dx at the node.
    dmap: DMatrix<f64>,
}

/// The dual potential u*(y) = −c(x, y) − u(x) with x the preimage of y.
pub struct DualPotential {
    cost: CostModel,
    model: DualModel,
    reach: f64,
    /// u* at target nodes reachable by the map.
    pub values: Vec<Option<f64>>,
    pub unreachable: usize,
}

impl DualPotential {
    /// Preimage of y under the map and u*(y).
    pub fn eval(&self, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        match &self.model {
            DualModel::Spline { spline, images, lo, hi } => {
                // nearest knot image, lowest index on ties
                let mut best = 0;
                for (k, t) in images.iter().enumerate() {
                    if (t - y[0]).abs() < (images[best] - y[0]).abs() {
                        best = k;
                    }
                }
                let mut x = spline.knots()[best];
                let scale = (hi - lo).abs().max(1.0);
                for _ in 0..60 {
                    let (_, d1, d2) = spline.eval(x);
                    let xv = DVector::from_element(1, x);
                    let e = cost::c_exp(&self.cost, &xv, &DVector::from_element(1, d1), None)?;
                    let dxx = self.cost.derivatives(&xv, &e.y)?.dxx[(0, 0)];
                    let slope = e.jacobian[(0, 0)] * (d2 + dxx);
                    let step = (e.y[0] - y[0]) / slope;
                    x = (x - step).clamp(*lo, *hi);
                    if step.abs() <= 1e-15 * scale {
                        break;
                    }
                }
                let xv = DVector::from_element(1, x);
                let ux = spline.eval(x).0;
                Ok((xv.clone(), -self.cost.value(&xv, y)? - ux))
            }
            DualModel::Local { centers } => {
                let best = nearest_center(centers, y);
                self.eval_local(&centers[best], y)
            }
        }
    }

    fn eval_local(&self, c: &LocalCenter, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let mut x = if (&c.image - y).norm() == 0.0 {
            c.x.clone()
        } else {
            match linalg::inverse(&c.dmap) {
                Some(inv) => &c.x + inv * (y - &c.image),
                None => c.x.clone(),
            }
        };
        for _ in 0..30 {
            let b = self.cost.derivatives(&x, y)?;
            let f = -&b.grad_x - &c.grad - &c.hess * (&x - &c.x);
            if f.norm() <= 1e-13 * (1.0 + c.grad.norm()) {
                break;
            }
            let jac = -(&b.dxx + &c.hess);
            let Some(inv) = linalg::inverse(&jac) else { break };
            x -= inv * f;
        }
        let d = &x - &c.x;
        let ux = c.u + c.grad.dot(&d) + 0.5 * d.dot(&(&c.hess * &d));
        Ok((x.clone(), -self.cost.value(&x, y)? - ux))
    }

    /// Gradient of u* by fourth-order central differences with step `e`.
    /// The local model is held at the center nearest `y` for all stencil
    /// points.
    pub fn gradient_fd(&self, y: &DVector<f64>, e: f64) -> Result<DVector<f64>> {
        let n = y.len();
        let fixed = match &self.model {
            DualModel::Local { centers } => Some(&centers[nearest_center(centers, y)]),
            DualModel::Spline { .. } => None,
        };
        let mut g = DVector::zeros(n);
        for k in 0..n {
            let at = |s: f64| -> Result<f64> {
                let mut z = y.clone();
                z[k] += s * e;
                Ok(match fixed {
                    Some(c) => self.eval_local(c, &z)?.1,
                    None => self.eval(&z)?.1,
                })
            };
            g[k] = (-at(2.0)? + 8.0 * at(1.0)? - 8.0 * at(-1.0)? + at(-2.0)?) / (12.0 * e);
        }
        Ok(g)
    }

    /// Distance within which a target node counts as reached by the map.
    pub fn reach(&self) -> f64 {
        self.reach
    }
}

fn nearest_center(centers: &[LocalCenter], y: &DVector<f64>) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = (&c.image - y).norm();
        if d < bd {
            bd = d;
            best = k;
        }
    }
    best
}

/// Fraction of target nodes allowed to be unreachable before erroring.
const COVERAGE_TOLERANCE: f64 = 0.05;

pub fn dual_potential(problem: &Problem, state: &PotentialState) -> Result<DualPotential> {
    let grid = &state.grid;
    let tgrid = problem.target();
    let h_star = tgrid.h();
    let (model, reach) = if grid.dim() == 1 {
        let active = grid.active_indices();
        let xs: Vec<f64> = active.iter().map(|&i| grid.nodes[i][0]).collect();
        let us: Vec<f64> = active.iter().map(|&i| state.u_at(i)).collect();
        let first = active[0];
        let last = *active.last().expect("nonempty grid");
        let spline = CubicSpline::clamped(&xs, &us, state.grad[first][0], state.grad[last][0]);
        let mut images = Vec::with_capacity(xs.len());
        for &x in &xs {
            let (_, d1, _) = spline.eval(x);
            let e = cost::c_exp(&problem.cost, &DVector::from_element(1, x), &DVector::from_element(1, d1), None)?;
            images.push(e.y[0]);
        }
        let h = grid.h();
        (
            DualModel::Spline {
                spline,
                images,
                lo: xs[0] - h,
                hi: xs[xs.len() - 1] + h,
            },
            2.0 * h_star,
        )
    } else {
        let mut centers = Vec::new();
        let mut max_stretch: f64 = 1.0;
        for i in grid.interior_indices() {
            let (Some(y), Some(j)) = (&state.image[i], &state.jacobian[i]) else {
                continue;
            };
            let dmap = j * &state.w[i];
            max_stretch = max_stretch.max(dmap.norm());
            centers.push(LocalCenter {
                x: grid.nodes[i].clone(),
                image: y.clone(),
                u: state.u_at(i),
                grad: state.grad[i].clone(),
                hess: state.hess[i].clone(),
                dmap,
            });
        }
        if centers.is_empty() {
            return Err(Error::Coverage {
                unreachable: tgrid.active_indices().len(),
                total: tgrid.active_indices().len(),
            });
        }
        (DualModel::Local { centers }, 2.0 * grid.h().max(h_star) * max_stretch)
    };
    let mut dual = DualPotential {
        cost: problem.cost.clone(),
        model,
        reach,
        values: vec![None; tgrid.len()],
        unreachable: 0,
    };
    let tactive = tgrid.active_indices();
    for &j in &tactive {
        let y = &tgrid.nodes[j];
        if !dual.reaches(y) {
            dual.unreachable += 1;
            continue;
        }
        dual.values[j] = Some(dual.eval(y)?.1);
    }
    if dual.unreachable as f64 > COVERAGE_TOLERANCE * tactive.len() as f64 {
        return Err(Error::Coverage {
            unreachable: dual.unreachable,
            total: tactive.len(),
        });
    }
    Ok(dual)
}

impl DualPotential {
    fn reaches(&self, y: &DVector<f64>) -> bool {
        match &self.model {
            DualModel::Spline { images, .. } => {
                let lo = images.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = images.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                y[0] >= lo - self.reach && y[0] <= hi + self.reach
            }
            DualModel::Local { centers } => centers.iter().any(|c| (&c.image - y).norm() <= self.reach),
        }
    }
}

/// Duality checks for a converged state.
#[derive(Debug, Clone, Serialize)]
pub struct DualityAudit {
    /// max |u(x) + u*(T(x)) + c(x, T(x))| over active source nodes.
    pub identity: f64,
    /// max |∇u*(y) + ∇_y c(T⁻¹y, y)| over reachable target nodes.
    pub gradient: Option<f64>,
    /// ‖u̇*‖_∞ of the dual flow residual at the dual potential (1D only).
    pub dual_residual: Option<f64>,
    pub unreachable: usize,
}

pub fn duality_audit(problem: &Problem, dual: &DualPotential) -> Result<DualityAudit> {
    let mut identity: f64 = 0.0;
    match &dual.model {
        DualModel::Spline { spline, images, .. } => {
            for (k, &x) in spline.knots().iter().enumerate() {
                let xv = DVector::from_element(1, x);
                let y = DVector::from_element(1, images[k]);
                let (_, ustar) = dual.eval(&y)?;
                let u = spline.eval(x).0;
                identity = identity.max((u + ustar + problem.cost.value(&xv, &y)?).abs());
            }
        }
        DualModel::Local { centers } => {
            for c in centers {
                let (_, ustar) = dual.eval(&c.image)?;
                identity = identity.max((c.u + ustar + problem.cost.value(&c.x, &c.image)?).abs());
            }
        }
    }
    let tgrid = problem.target();
    let e = 1e-3 * tgrid.h();
    let mut gradient: f64 = 0.0;
    for j in tgrid.active_indices() {
        if dual.values[j].is_none() {
            continue;
        }
        let y = &tgrid.nodes[j];
        let (x, _) = dual.eval(y)?;
        let g = dual.gradient_fd(y, e)?;
        gradient = gradient.max((g + problem.cost.grad_y(&x, y)?).norm());
    }
    let dual_residual = dual_flow_residual(problem, dual)?;
    Ok(DualityAudit {
        identity,
        gradient: Some(gradient),
        dual_residual: Some(dual_residual),
        unreachable: dual.unreachable,
    })
}

/// ‖u̇*‖_∞ of the dual flow (cost with swapped arguments, domains and
/// densities exchanged) evaluated at the dual potential. Unreachable target
/// nodes are filled by evaluating the model there anyway.
pub fn dual_flow_residual(problem: &Problem, dual: &DualPotential) -> Result<f64> {
    let dp = problem.dual()?;
    let tgrid = dp.source().clone();
    let mut v = vec![0.0; tgrid.len()];
    for j in tgrid.active_indices() {
        v[j] = match dual.values[j] {
            Some(val) => val,
            None => dual.eval(&tgrid.nodes[j])?.1,
        };
    }
    let n = tgrid.dim();
    let state = assemble_state(&dp, QuadraticBase::zero(n), v, 0.0, None)?;
    residual(&state)?;
    Ok(state.residual_sup())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, DomainSpec};

    fn translation_problem(res: usize) -> Problem {
        let src = Arc::new(build_grid(&DomainSpec::interval(0.0, 1.0), res).unwrap());
        let tgt = Arc::new(build_grid(&DomainSpec::interval(2.0, 3.0), res).unwrap());
        let rho = DensityField::from_fn(src, |_| 1.0).unwrap();
        let rho_star = DensityField::from_fn(tgt, |_| 1.0).unwrap();
        Problem::new(CostModel::Quadratic, rho, rho_star).unwrap()
    }

    fn affine(n: usize, slope: f64) -> QuadraticBase {
        let mut b = QuadraticBase::zero(n);
        b.b = DVector::from_element(n, slope);
        b
    }

    #[test]
    fn affine_potential_fields() {
        let pb = translation_problem(11);
        let s = assemble_state(&pb, affine(1, 2.0), vec![0.0; 11], 0.0, None).unwrap();
        for i in s.grid.interior_indices() {
            assert_eq!(s.grad[i][0], 2.0);
            assert_eq!(s.hess[i][(0, 0)], 0.0);
            assert_eq!(s.w[i][(0, 0)], 1.0);
            assert_eq!(s.rate[i], 0.0);
        }
        assert_eq!(s.boundary_residual(), 0.0);
    }

    #[test]
    fn quadratic_potential_gives_m_plus_identity() {
        let spec = DomainSpec::disc([0.0, 0.0], 1.0);
        let src = Arc::new(build_grid(&spec, 9).unwrap());
        let rho = DensityField::from_fn(src.clone(), |_| 1.0).unwrap();
        let pb = Problem::new(CostModel::Quadratic, rho.clone(), rho).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        // put the quadratic entirely in the nodal values
        let v: Vec<f64> = src.nodes.iter().map(|x| 0.5 * x.dot(&(&m * x))).collect();
        let s = assemble_state(&pb, QuadraticBase::zero(2), v, 0.0, None).unwrap();
        for i in src.interior_indices() {
            assert!((&s.w[i] - (&m + DMatrix::identity(2, 2))).norm() < 1e-12);
            assert_eq!(s.w[i], s.w[i].transpose());
        }
    }

    #[test]
    fn dt_formula() {
        let pb = translation_problem(11);
        let mut s = assemble_state(&pb, affine(1, 2.0), vec![0.0; 11], 0.0, None).unwrap();
        for i in s.grid.interior_indices() {
            s.w[i] = DMatrix::from_element(1, 1, 0.5);
        }
        let dt = stable_dt(&s, 0.5);
        assert!((dt - 0.00125).abs() < 1e-15);
    }

    #[test]
    fn boundary_newton_matches_endpoints() {
        let pb = translation_problem(9);
        let mut v = vec![0.0; 9];
        // a potential with the wrong endpoint slopes
        for (i, x) in pb.source().nodes.iter().enumerate() {
            v[i] = 0.3 * x[0] * x[0];
        }
        let base = affine(1, 2.0);
        let cfg = FlowConfig::default();
        let stats = enforce_boundary(&pb, &base, &mut v, &cfg, None).unwrap();
        assert!(stats.newton_steps >= 1);
        let s = assemble_state(&pb, base.clone(), v.clone(), 0.0, None).unwrap();
        assert!(s.boundary_residual() <= cfg.boundary_tol);
        assert!((s.image[0].as_ref().unwrap()[0] - 2.0).abs() < 1e-12);
        assert!((s.image[8].as_ref().unwrap()[0] - 3.0).abs() < 1e-12);
        // a second call is a no-op
        let mut v2 = v.clone();
        let stats = enforce_boundary(&pb, &base, &mut v2, &cfg, None).unwrap();
        assert_eq!(stats.newton_steps, 0);
        assert_eq!(v2, v);
    }

    #[test]
    fn steady_state_is_a_fixed_point() {
        let pb = translation_problem(64);
        let s = assemble_state(&pb, affine(1, 2.0), vec![0.0; 64], 0.0, None).unwrap();
        assert!(s.residual_sup() <= 1e-12);
        let out = step(&pb, &s, &FlowConfig::default()).unwrap();
        for i in 0..64 {
            assert!((out.state.u_at(i) - s.u_at(i)).abs() <= 1e-12);
        }
    }

    #[test]
    fn max_steps_zero_stops_immediately() {
        let pb = translation_problem(16);
        let mut v = vec![0.0; 16];
        for (i, x) in pb.source().nodes.iter().enumerate() {
            v[i] = 0.1 * (3.0 * x[0]).sin();
        }
        let base = affine(1, 2.0);
        let cfg = FlowConfig {
            max_steps: 0,
            ..FlowConfig::default()
        };
        enforce_boundary(&pb, &base, &mut v, &cfg, None).unwrap();
        let s = assemble_state(&pb, base, v, 0.0, None).unwrap();
        let rep = run_flow(&pb, s, &cfg, None).unwrap();
        assert_eq!(rep.verdict, Verdict::MaxSteps);
        assert_eq!(rep.rows.len(), 1);
    }

    #[test]
    fn transport_map_of_translation() {
        let pb = translation_problem(12);
        let s = assemble_state(&pb, affine(1, 2.0), vec![0.0; 12], 0.0, None).unwrap();
        let rep = transport_map(&pb, &s).unwrap();
        assert!(rep.injective && rep.contained && rep.monotone == Some(true));
        for (i, x) in s.grid.nodes.iter().enumerate() {
            assert_eq!(rep.map[i].as_ref().unwrap()[0], x[0] + 2.0);
        }
    }

    #[test]
    fn translation_dual_potential() {
        let pb = translation_problem(17);
        let s = assemble_state(&pb, affine(1, 2.0), vec![0.0; 17], 0.0, None).unwrap();
        let dual = dual_potential(&pb, &s).unwrap();
        let audit = duality_audit(&pb, &dual).unwrap();
        assert!(audit.identity <= 1e-12);
        assert!(audit.gradient.unwrap() <= 1e-6);
        assert!(audit.dual_residual.unwrap() <= 1e-9);
        assert_eq!(audit.unreachable, 0);
    }
}
