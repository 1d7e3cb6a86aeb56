//! Admissible initial data: the steady state for a reference cost c₀, and
//! its continuation along c_s = (1 − s)c₀ + s·c to the cost of interest.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::flow::{self, FlowConfig, FlowReport, PotentialState, Problem, QuadraticBase, Verdict};
use crate::geometry::{DomainKind, DomainSpec, NodeClass};

/// u(x) = ½xᵀ(D − I)x + b·x for the affine bijection T(x) = Dx + b taking
/// the source shape onto the target shape, D diagonal and positive. Only
/// meaningful for the quadratic cost.
pub fn affine_seed(source: &DomainSpec, target: &DomainSpec) -> Result<QuadraticBase> {
    use DomainKind::*;
    let n = source.dim();
    let compatible = matches!(
        (source.kind, target.kind),
        (Interval, Interval) | (Box, Box) | (Disc | Ellipse, Disc | Ellipse)
    );
    if !compatible || n != target.dim() {
        return Err(Error::Config(format!(
            "no affine bijection from {:?} onto {:?}",
            source.kind, target.kind
        )));
    }
    let d: Vec<f64> = (0..n)
        .map(|k| target.half_extents[k] / source.half_extents[k])
        .collect();
    let mut base = QuadraticBase::zero(n);
    for k in 0..n {
        base.m[(k, k)] = d[k] - 1.0;
        base.b[k] = target.center[k] - d[k] * source.center[k];
    }
    Ok(base)
}

/// A converged zero-mean steady state with the flow that produced it.
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub state: PotentialState,
    pub report: FlowReport,
}

/// Steady state for the problem's cost. A quadratic cost is flowed from the
/// affine seed; any other cost is first reached by continuation from the
/// quadratic steady state. The result is shifted to zero mean.
pub fn solve_steady(problem: &Problem, flow_config: &FlowConfig, cont: &ContinuationConfig) -> Result<SteadyState> {
    let initial = if problem.cost.is_quadratic() {
        let base = affine_seed(&problem.source().spec, problem.target_spec())?;
        let mut v = vec![0.0; problem.source().len()];
        flow::enforce_boundary(problem, &base, &mut v, flow_config, None)?;
        flow::assemble_state(problem, base, v, 0.0, None)?
    } else {
        let quad = problem.with_cost(CostModel::Quadratic);
        let q = solve_steady(&quad, flow_config, cont)?;
        continuation_initial_data(problem, &CostModel::Quadratic, &q.state, cont)?.state
    };
    let report = flow::run_flow(problem, initial, flow_config, None)?;
    if report.verdict != Verdict::Converged {
        return Err(Error::Flow(format!(
            "steady solve ended with verdict {:?} after {} steps (spread {:.3e})",
            report.verdict,
            report.steps,
            report.final_state.residual_spread()
        )));
    }
    let state = report.final_state.zero_mean();
    Ok(SteadyState { state, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationConfig {
    /// Number of homotopy steps S; chosen from the cost distance when absent.
    pub steps: Option<usize>,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Relative residual allowed in each linear solve.
    pub linear_tol: f64,
    /// Keep ∫u = 0; otherwise ∫u is held at its value for u₀.
    pub zero_mean: bool,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            steps: None,
            newton_tol: 1e-11,
            newton_max_iter: 20,
            linear_tol: 1e-9,
            zero_mean: true,
        }
    }
}

impl ContinuationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == Some(0) {
            return Err(Error::Config("continuation.steps must be at least 1".into()));
        }
        if !(self.newton_tol > 0.0 && self.linear_tol > 0.0) || self.newton_max_iter == 0 {
            return Err(Error::Config("continuation tolerances and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationReport {
    pub steps: usize,
    pub proxy: f64,
    pub s_values: Vec<f64>,
    pub newton_steps: Vec<usize>,
    /// Multiplier of the augmented system: Δ(u − u₀) = λ at interior nodes.
    pub lambda: f64,
    pub max_g: f64,
    /// Largest |∫φ| over Newton corrections.
    pub max_correction_mean: f64,
}

#[derive(Debug, Clone)]
pub struct ContinuationResult {
    pub state: PotentialState,
    pub report: ContinuationReport,
}

/// Sampled C² distance between two costs: the largest entry of the
/// difference in ∇_x c, D²_xx c, D²_xy c and D²_yy c over pairs (x, T₀(x)).
pub fn cost_distance_proxy(c0: &CostModel, c: &CostModel, u0: &PotentialState) -> Result<f64> {
    let mut proxy: f64 = 0.0;
    for i in u0.grid.active_indices() {
        let Some(y) = &u0.image[i] else { continue };
        let x = &u0.grid.nodes[i];
        let a = c0.derivatives(x, y)?;
        let b = c.derivatives(x, y)?;
        let d = [
            (&a.grad_x - &b.grad_x).amax(),
            (&a.dxx - &b.dxx).amax(),
            (&a.dxy - &b.dxy).amax(),
            (&a.dyy - &b.dyy).amax(),
        ];
        proxy = d.iter().fold(proxy, |m, v| m.max(*v));
    }
    Ok(proxy)
}

/// Φ(c, u) = (Δ_h(u − u₀) at interior nodes, G^c(x, ∇u) at boundary nodes),
/// as a full nodal vector (zero at exterior nodes). `u` and `u₀` share the
/// quadratic base, which cancels in the Laplacian.
pub fn phi(problem: &Problem, base: &QuadraticBase, v: &[f64], v0: &[f64]) -> Result<Vec<f64>> {
    let grid = problem.source();
    let diff: Vec<f64> = v.iter().zip(v0).map(|(a, b)| a - b).collect();
    let mut out = vec![0.0; grid.len()];
    for i in grid.interior_indices() {
        out[i] = problem.stencils.laplacian_at(&diff, i);
    }
    let nodes = grid.boundary_indices();
    let ev = flow::eval_boundary(problem, base, v, &nodes, &vec![None; nodes.len()])?;
    for (s, &i) in nodes.iter().enumerate() {
        out[i] = ev.g[s];
    }
    Ok(out)
}

/// D_uΦ(c, u)φ = (Δ_h φ, ⟨β^{c,u}, ∇_h φ⟩).
pub fn dphi(problem: &Problem, base: &QuadraticBase, v: &[f64], direction: &[f64]) -> Result<Vec<f64>> {
    let grid = problem.source();
    let mut out = vec![0.0; grid.len()];
    for i in grid.interior_indices() {
        out[i] = problem.stencils.laplacian_at(direction, i);
    }
    let nodes = grid.boundary_indices();
    let ev = flow::eval_boundary(problem, base, v, &nodes, &vec![None; nodes.len()])?;
    for (s, &i) in nodes.iter().enumerate() {
        out[i] = ev.beta[s].dot(&problem.stencils.gradient_at(direction, i));
    }
    Ok(out)
}

/// Square system for one homotopy stage: unknowns are the nodal deviation
/// at active nodes plus λ; rows are Δ_h(v − v₀) − λ at interior nodes,
/// G at boundary nodes and the quadrature mean of u.
struct Stage<'a> {
    problem: &'a Problem,
    base: &'a QuadraticBase,
    v0: &'a [f64],
    active: Vec<usize>,
    pos: Vec<usize>,
    boundary: Vec<usize>,
    mean_target: f64,
}

impl<'a> Stage<'a> {
    fn new(problem: &'a Problem, base: &'a QuadraticBase, v0: &'a [f64], mean_target: f64) -> Self {
        let grid = problem.source();
        let active = grid.active_indices();
        let mut pos = vec![usize::MAX; grid.len()];
        for (r, &i) in active.iter().enumerate() {
            pos[i] = r;
        }
        Self {
            problem,
            base,
            v0,
            active,
            pos,
            boundary: grid.boundary_indices(),
            mean_target,
        }
    }

    fn size(&self) -> usize {
        self.active.len() + 1
    }

    fn mean_of(&self, v: &[f64]) -> f64 {
        let g = self.problem.source();
        let s: f64 = self
            .active
            .iter()
            .map(|&i| g.weights[i] * (self.base.value(&g.nodes[i]) + v[i]))
            .sum();
        s / g.total_weight()
    }

    fn residual(&self, v: &[f64], lambda: f64) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
        let grid = self.problem.source();
        let ev = flow::eval_boundary(self.problem, self.base, v, &self.boundary, &vec![None; self.boundary.len()])?;
        let diff: Vec<f64> = v.iter().zip(self.v0).map(|(a, b)| a - b).collect();
        let mut f = DVector::zeros(self.size());
        for (r, &i) in self.active.iter().enumerate() {
            if grid.class[i] == NodeClass::Interior {
                f[r] = self.problem.stencils.laplacian_at(&diff, i) - lambda;
            }
        }
        for (s, &i) in self.boundary.iter().enumerate() {
            f[self.pos[i]] = ev.g[s];
        }
        f[self.active.len()] = self.mean_of(v) - self.mean_target;
        Ok((f, ev.beta))
    }

    fn jacobian(&self, beta: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let grid = self.problem.source();
        let m = self.size();
        let mut j = DMatrix::zeros(m, m);
        for (r, &i) in self.active.iter().enumerate() {
            if grid.class[i] == NodeClass::Interior {
                for (k, c) in self.problem.stencils.laplacian_terms(i) {
                    j[(r, self.pos[k])] += c;
                }
                j[(r, m - 1)] = -1.0;
            }
        }
        for (s, &i) in self.boundary.iter().enumerate() {
            let r = self.pos[i];
            let st = self.problem.stencils.gradient[i].as_ref().expect("boundary stencil");
            for (k, c) in &st.terms {
                j[(r, self.pos[*k])] += beta[s].dot(c);
            }
        }
        let total = grid.total_weight();
        for (c, &i) in self.active.iter().enumerate() {
            j[(m - 1, c)] = grid.weights[i] / total;
        }
        Ok(j)
    }
}

/// Newton solve of one stage from `v`. Returns the number of Newton steps
/// and the largest |mean| of a correction.
fn newton_stage(stage: &Stage, v: &mut [f64], lambda: &mut f64, config: &ContinuationConfig) -> Result<(usize, f64)> {
    let grid = stage.problem.source();
    let (mut f, mut beta) = stage.residual(v, *lambda)?;
    let mut res = f.amax();
    let mut steps = 0;
    let mut max_mean: f64 = 0.0;
    while res > config.newton_tol {
        if steps >= config.newton_max_iter {
            return Err(Error::Flow(format!("Newton did not converge: residual {res:.3e} after {steps} steps")));
        }
        let j = stage.jacobian(&beta)?;
        let delta = j
            .clone()
            .lu()
            .solve(&(-&f))
            .ok_or_else(|| Error::LinearSolve("continuation Newton system is singular".into()))?;
        let lin = (&j * &delta + &f).amax();
        if lin > config.linear_tol * res.max(1.0) {
            return Err(Error::LinearSolve(format!("linear residual {lin:.3e} exceeds tolerance")));
        }
        let total = grid.total_weight();
        let corr_mean: f64 = stage
            .active
            .iter()
            .enumerate()
            .map(|(r, &i)| grid.weights[i] * delta[r])
            .sum::<f64>()
            / total;
        max_mean = max_mean.max(corr_mean.abs());
        let saved: Vec<f64> = stage.active.iter().map(|&i| v[i]).collect();
        let saved_lambda = *lambda;
        let m = stage.size();
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            for (r, &i) in stage.active.iter().enumerate() {
                v[i] = saved[r] + alpha * delta[r];
            }
            *lambda = saved_lambda + alpha * delta[m - 1];
            if let Ok((tf, tb)) = stage.residual(v, *lambda) {
                let tr = tf.amax();
                if tr < res {
                    f = tf;
                    beta = tb;
                    res = tr;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        steps += 1;
        if !accepted {
            for (r, &i) in stage.active.iter().enumerate() {
                v[i] = saved[r];
            }
            *lambda = saved_lambda;
            return Err(Error::Flow(format!("line search failed at residual {res:.3e}")));
        }
    }
    Ok((steps, max_mean))
}

/// Continue the steady state `u0` of cost `c0` to the problem's cost through
/// S homotopy stages, solving Φ(c_s, u) = 0 by Newton at each stage.
pub fn continuation_initial_data(
    problem: &Problem,
    c0: &CostModel,
    u0: &PotentialState,
    config: &ContinuationConfig,
) -> Result<ContinuationResult> {
    config.validate()?;
    let proxy = cost_distance_proxy(c0, &problem.cost, u0)?;
    let steps = config
        .steps
        .unwrap_or_else(|| ((proxy / 0.05).ceil() as usize).max(4));
    let base = u0.base.clone();
    let v0 = u0.v.clone();
    let mean_target = if config.zero_mean { 0.0 } else { u0.mean() };
    let mut v = v0.clone();
    let mut lambda = 0.0;
    let mut s_values = Vec::with_capacity(steps);
    let mut newton_steps = Vec::with_capacity(steps);
    let mut max_correction_mean: f64 = 0.0;
    let mut last_good = 0.0;
    for k in 1..=steps {
        let s = k as f64 / steps as f64;
        let cost = if k == steps {
            problem.cost.clone()
        } else {
            CostModel::blend(c0.clone(), problem.cost.clone(), s)
        };
        let stage_problem = problem.with_cost(cost);
        let stage = Stage::new(&stage_problem, &base, &v0, mean_target);
        match newton_stage(&stage, &mut v, &mut lambda, config) {
            Ok((n, m)) => {
                log::debug!("continuation s = {s:.4}: {n} Newton steps");
                newton_steps.push(n);
                max_correction_mean = max_correction_mean.max(m);
                s_values.push(s);
                last_good = s;
            }
            Err(e @ Error::Obliqueness { .. }) => return Err(e),
            Err(e) => {
                return Err(Error::Continuation {
                    last_good_s: last_good,
                    failed_s: s,
                    reason: e.to_string(),
                })
            }
        }
    }
    let state = flow::assemble_state(problem, base, v, 0.0, Some(&u0.image)).map_err(|e| Error::Continuation {
        last_good_s: last_good,
        failed_s: 1.0,
        reason: e.to_string(),
    })?;
    let report = ContinuationReport {
        steps,
        proxy,
        s_values,
        newton_steps,
        lambda,
        max_g: state.boundary_residual(),
        max_correction_mean,
    };
    Ok(ContinuationResult { state, report })
}

/// Largest |G| accepted by [`check_ic`].
pub const IC_G_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct IcReport {
    pub max_g: f64,
    pub min_eig: f64,
    /// Largest h*(T(x)) over active nodes.
    pub containment: f64,
    pub containment_limit: f64,
    /// Smallest u(x) − (−c(x, y₀) + c(x₀, y₀) + u(x₀)) over sampled pairs.
    pub strictness_min: f64,
    /// Smallest margin divided by |x − x₀|².
    pub strictness_ratio_min: f64,
    pub strictness_violations: usize,
    pub pairs_checked: usize,
    pub pass: bool,
}

/// Audit of initial data: boundary condition, positivity of W, containment
/// of the image, and strict c-convexity on node pairs (all pairs when there
/// are at most `max_pairs`, otherwise a seeded random sample).
pub fn check_ic(problem: &Problem, state: &PotentialState, max_pairs: usize, seed: u64) -> Result<IcReport> {
    let grid = &state.grid;
    let target = problem.target_spec();
    let active = grid.active_indices();
    let containment = active
        .iter()
        .filter_map(|&i| state.image[i].as_ref())
        .map(|y| target.signed_distance(y))
        .fold(f64::NEG_INFINITY, f64::max);
    let containment_limit = 2.0 * problem.target().h();
    // T(x₀) is attached to the point where ∇u was evaluated, so supports are
    // only anchored at nodes that sit on that point.
    let anchors: Vec<usize> = active
        .iter()
        .copied()
        .filter(|&i| (problem.eval_point(i) - &grid.nodes[i]).norm() <= 1e-12)
        .collect();
    let (n, m) = (active.len(), anchors.len());
    let pairs: Vec<(usize, usize)> = if n * m <= max_pairs {
        active
            .iter()
            .flat_map(|&a| anchors.iter().map(move |&b| (a, b)))
            .filter(|(a, b)| a != b)
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(max_pairs);
        while out.len() < max_pairs {
            let a = active[rng.random_range(0..n)];
            let b = anchors[rng.random_range(0..m)];
            if a != b {
                out.push((a, b));
            }
        }
        out
    };
    let mut strictness_min = f64::INFINITY;
    let mut ratio_min = f64::INFINITY;
    let mut violations = 0;
    for &(x, x0) in &pairs {
        let Some(y0) = &state.image[x0] else { continue };
        let (px, p0) = (&grid.nodes[x], &grid.nodes[x0]);
        let margin = state.u_at(x) + problem.cost.value(px, y0)? - problem.cost.value(p0, y0)? - state.u_at(x0);
        strictness_min = strictness_min.min(margin);
        ratio_min = ratio_min.min(margin / (px - p0).norm_squared());
        if !(margin > 0.0) {
            violations += 1;
        }
    }
    let max_g = state.boundary_residual();
    let pass = max_g <= IC_G_TOL
        && state.min_eig > 0.0
        && state.flagged.is_empty()
        && containment <= containment_limit
        && violations == 0;
    Ok(IcReport {
        max_g,
        min_eig: state.min_eig,
        containment,
        containment_limit,
        strictness_min,
        strictness_ratio_min: ratio_min,
        strictness_violations: violations,
        pairs_checked: pairs.len(),
        pass,
    })
}
