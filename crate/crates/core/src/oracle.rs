//! Reference solutions for validating flow output: the 1D monotone
//! rearrangement and an exact small discrete transport problem.

use nalgebra::DVector;
use serde::Serialize;

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::flow::{DualPotential, PotentialState};
use crate::geometry::{DensityField, GridDomain};

/// Cumulative trapezoid sums of nodal density values over the active nodes
/// of a 1D grid, normalized to end at 1. Returns (positions, densities, cdf).
fn trapezoid_cdf(rho: &DensityField) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let g = &rho.grid;
    let active = g.active_indices();
    let xs: Vec<f64> = active.iter().map(|&i| g.nodes[i][0]).collect();
    let vals: Vec<f64> = active.iter().map(|&i| rho.values[i]).collect();
    let mut cdf = vec![0.0; xs.len()];
    for k in 1..xs.len() {
        cdf[k] = cdf[k - 1] + 0.5 * (vals[k] + vals[k - 1]) * (xs[k] - xs[k - 1]);
    }
    let total = cdf[cdf.len() - 1];
    for c in &mut cdf {
        *c /= total;
    }
    let dens = vals.iter().map(|v| v / total).collect();
    (xs, dens, cdf)
}

/// Inverse of the piecewise-quadratic CDF of a piecewise-linear density.
fn invert_cdf(ys: &[f64], dens: &[f64], cdf: &[f64], level: f64) -> f64 {
    let last = ys.len() - 1;
    if level <= 0.0 {
        return ys[0];
    }
    if level >= cdf[last] {
        return ys[last];
    }
    let j = cdf.partition_point(|&c| c <= level).saturating_sub(1).min(last - 1);
    let h = ys[j + 1] - ys[j];
    let (a, b) = (dens[j], dens[j + 1]);
    let r = level - cdf[j];
    // a·t + (b − a)t²/(2h) = r, solved in the cancellation-free form
    let k = (b - a) / (2.0 * h);
    let disc = (a * a + 4.0 * k * r).max(0.0);
    let t = 2.0 * r / (a + disc.sqrt());
    ys[j] + t.clamp(0.0, h)
}

/// T = F*⁻¹ ∘ F at the active source nodes, where F and F* are the trapezoid
/// CDFs of the nodal densities. Requires ∂²c/∂x∂y < 0 on the product grid,
/// the condition under which the increasing map is optimal.
pub fn monotone_rearrangement_1d(cost: &CostModel, rho: &DensityField, rho_star: &DensityField) -> Result<Vec<Option<f64>>> {
    let (src, tgt) = (&rho.grid, &rho_star.grid);
    if src.dim() != 1 || tgt.dim() != 1 {
        return Err(Error::Dimension("monotone rearrangement is one-dimensional".into()));
    }
    for &i in &src.active_indices() {
        for &j in &tgt.active_indices() {
            let d = cost.derivatives(&src.nodes[i], &tgt.nodes[j])?.dxy[(0, 0)];
            if !(d < 0.0) {
                return Err(Error::OracleInapplicable(format!(
                    "c_xy = {d:e} ≥ 0 at ({}, {})",
                    src.nodes[i][0], tgt.nodes[j][0]
                )));
            }
        }
    }
    let (_, _, f) = trapezoid_cdf(rho);
    let (ys, dens, fs) = trapezoid_cdf(rho_star);
    let mut out = vec![None; src.len()];
    for (k, &i) in src.active_indices().iter().enumerate() {
        out[i] = Some(invert_cdf(&ys, &dens, &fs, f[k]));
    }
    Ok(out)
}

/// Default cap on source × target pairs for [`discrete_kantorovich`].
pub const DEFAULT_PAIR_CAP: usize = 64 * 64;

#[derive(Debug, Clone, Serialize)]
pub struct CouplingPlan {
    /// (source grid index, target grid index, mass) with mass > 0.
    pub entries: Vec<PlanEntry>,
    /// Source masses indexed like `source_nodes`.
    pub source_mass: Vec<f64>,
    pub target_mass: Vec<f64>,
    pub source_nodes: Vec<usize>,
    pub target_nodes: Vec<usize>,
    pub cost: f64,
}

impl CouplingPlan {
    /// Largest deviation of row and column sums from the marginals.
    pub fn marginal_error(&self) -> f64 {
        let mut rows = vec![0.0; self.source_nodes.len()];
        let mut cols = vec![0.0; self.target_nodes.len()];
        let spos = |i: usize| self.source_nodes.iter().position(|&k| k == i).expect("source node");
        let tpos = |j: usize| self.target_nodes.iter().position(|&k| k == j).expect("target node");
        for &(i, j, m) in &self.entries {
            rows[spos(i)] += m;
            cols[tpos(j)] += m;
        }
        let r = rows.iter().zip(&self.source_mass).map(|(a, b)| (a - b).abs());
        let c = cols.iter().zip(&self.target_mass).map(|(a, b)| (a - b).abs());
        r.chain(c).fold(0.0, f64::max)
    }
}

/// (source index, target index, mass).
pub type PlanEntry = (usize, usize, f64);

/// Exact optimal coupling between point masses by successive shortest paths
/// on the transportation network (Dijkstra with node potentials). Masses are
/// normalized to total 1 on both sides.
pub fn transport_points(
    cost: &CostModel,
    xs: &[DVector<f64>],
    a: &[f64],
    ys: &[DVector<f64>],
    b: &[f64],
    cap: usize,
) -> Result<(Vec<PlanEntry>, f64)> {
    let (m, k) = (xs.len(), ys.len());
    if m == 0 || k == 0 {
        return Err(Error::Size("empty marginal".into()));
    }
    if m * k > cap {
        return Err(Error::Size(format!("{m} × {k} pairs exceed the cap of {cap}")));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if !(sa > 0.0 && sb > 0.0) || a.iter().chain(b).any(|&v| !(v >= 0.0)) {
        return Err(Error::Density("marginals must be non-negative with positive mass".into()));
    }
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            c[i * k + j] = cost.value(&xs[i], &ys[j])?;
        }
    }
    let mut supply: Vec<f64> = a.iter().map(|v| v / sa).collect();
    let mut demand: Vec<f64> = b.iter().map(|v| v / sb).collect();
    let mut flow = vec![0.0; m * k];
    let eps = 1e-14;
    // potentials: sources 0..m, targets m..m+k; reduced cost c + π_s − π_t ≥ 0
    let mut pot = vec![0.0; m + k];
    for j in 0..k {
        pot[m + j] = (0..m).map(|i| c[i * k + j]).fold(f64::INFINITY, f64::min);
    }
    loop {
        let remaining: f64 = demand.iter().sum();
        if remaining <= eps || supply.iter().all(|&s| s <= eps) {
            break;
        }
        // dense Dijkstra from every source with supply left
        let mut dist = vec![f64::INFINITY; m + k];
        let mut prev = vec![usize::MAX; m + k];
        let mut done = vec![false; m + k];
        for i in 0..m {
            if supply[i] > eps {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            for v in 0..m + k {
                if !done[v] && dist[v].is_finite() && (u == usize::MAX || dist[v] < dist[u]) {
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < m {
                for j in 0..k {
                    let t = m + j;
                    let rc = (c[u * k + j] + pot[u] - pot[t]).max(0.0);
                    if dist[u] + rc < dist[t] {
                        dist[t] = dist[u] + rc;
                        prev[t] = u;
                    }
                }
            } else {
                let j = u - m;
                for i in 0..m {
                    if flow[i * k + j] > eps {
                        let rc = (-c[i * k + j] + pot[u] - pot[i]).max(0.0);
                        if dist[u] + rc < dist[i] {
                            dist[i] = dist[u] + rc;
                            prev[i] = u;
                        }
                    }
                }
            }
        }
        let mut best = usize::MAX;
        for j in 0..k {
            let t = m + j;
            if demand[j] > eps && dist[t].is_finite() && (best == usize::MAX || dist[t] < dist[best]) {
                best = t;
            }
        }
        if best == usize::MAX {
            return Err(Error::Flow("transport network became disconnected".into()));
        }
        let dmax = dist[best];
        for v in 0..m + k {
            pot[v] += dist[v].min(dmax);
        }
        // bottleneck along the path
        let mut amount = demand[best - m];
        let mut v = best;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= m {
                amount = amount.min(flow[v * k + (u - m)]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);
        supply[v] -= amount;
        demand[best - m] -= amount;
        let mut v = best;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < m {
                flow[u * k + (v - m)] += amount;
            } else {
                flow[v * k + (u - m)] -= amount;
            }
            v = u;
        }
    }
    let mut entries = Vec::new();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..k {
            let f = flow[i * k + j];
            if f > eps {
                entries.push((i, j, f));
                total += f * c[i * k + j];
            }
        }
    }
    Ok((entries, total))
}

/// Optimal coupling between the quadrature masses ρ·w and ρ*·w* at the
/// active nodes of the two grids.
pub fn discrete_kantorovich(cost: &CostModel, rho: &DensityField, rho_star: &DensityField, cap: usize) -> Result<CouplingPlan> {
    let masses = |d: &DensityField| -> (Vec<usize>, Vec<f64>) {
        let g = &d.grid;
        let nodes = g.active_indices();
        let m: Vec<f64> = nodes.iter().map(|&i| d.values[i] * g.weights[i]).collect();
        let total: f64 = m.iter().sum();
        (nodes, m.into_iter().map(|v| v / total).collect())
    };
    let (sn, sm) = masses(rho);
    let (tn, tm) = masses(rho_star);
    let xs: Vec<DVector<f64>> = sn.iter().map(|&i| rho.grid.nodes[i].clone()).collect();
    let ys: Vec<DVector<f64>> = tn.iter().map(|&j| rho_star.grid.nodes[j].clone()).collect();
    let (raw, total) = transport_points(cost, &xs, &sm, &ys, &tm, cap)?;
    Ok(CouplingPlan {
        entries: raw.into_iter().map(|(i, j, f)| (sn[i], tn[j], f)).collect(),
        source_mass: sm,
        target_mass: tm,
        source_nodes: sn,
        target_nodes: tn,
        cost: total,
    })
}

/// Number of support pairs (x, y), (x', y') with
/// c(x, y) + c(x', y') > c(x, y') + c(x', y) + tol.
pub fn two_swap_violations(cost: &CostModel, plan: &CouplingPlan, source: &GridDomain, target: &GridDomain, tol: f64) -> Result<usize> {
    let mut count = 0;
    let e = &plan.entries;
    for a in 0..e.len() {
        for b in (a + 1)..e.len() {
            let (x, y) = (&source.nodes[e[a].0], &target.nodes[e[a].1]);
            let (x2, y2) = (&source.nodes[e[b].0], &target.nodes[e[b].1]);
            let here = cost.value(x, y)? + cost.value(x2, y2)?;
            let swapped = cost.value(x, y2)? + cost.value(x2, y)?;
            if here > swapped + tol {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// A flow result in the form the comparison needs: u at source nodes, the
/// map at source nodes and u* at target nodes.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub u: Vec<f64>,
    pub map: Vec<Option<DVector<f64>>>,
    pub ustar: Vec<Option<f64>>,
}

impl Candidate {
    pub fn from_flow(state: &PotentialState, dual: &DualPotential) -> Self {
        Self {
            u: state.u_values(),
            map: state.image.clone(),
            ustar: dual.values.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityMetrics {
    /// min of u(x) + u*(y) + c(x, y) over all reachable node pairs.
    pub min_slack: f64,
    /// max |u + u* + c| over the plan support.
    pub support_gap: Option<f64>,
    /// max |u(x) + u*(T(x)) + c(x, T(x))| with u* interpolated.
    pub map_gap: f64,
    pub tol: f64,
    pub pairs_checked: usize,
    pub passes: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleMetrics {
    pub map_deviation: Option<f64>,
    pub map_tol: f64,
    pub flow_cost: f64,
    pub lp_cost: Option<f64>,
    pub cost_gap: Option<f64>,
    pub cost_tol: f64,
    pub duality: DualityMetrics,
    pub passes: bool,
}

/// Compare a flow result with the oracles. Tolerances: map within 2h, cost
/// gap within 5h (relative), duality slack within h, with h the source grid
/// spacing.
pub fn compare_to_oracle(
    cost: &CostModel,
    rho: &DensityField,
    rho_star: &DensityField,
    candidate: &Candidate,
    oracle_map: Option<&[Option<f64>]>,
    plan: Option<&CouplingPlan>,
) -> Result<OracleMetrics> {
    let (src, tgt) = (&rho.grid, &rho_star.grid);
    if candidate.u.len() != src.len() || candidate.map.len() != src.len() || candidate.ustar.len() != tgt.len() {
        return Err(Error::Config("candidate does not match the grids".into()));
    }
    let h = src.h();
    let active = src.active_indices();
    let map_deviation = match oracle_map {
        Some(om) => {
            if om.len() != src.len() {
                return Err(Error::Config("oracle map does not match the source grid".into()));
            }
            let mut worst: f64 = 0.0;
            for &i in &active {
                match (&candidate.map[i], om[i]) {
                    (Some(t), Some(o)) => worst = worst.max((t[0] - o).abs()),
                    _ => worst = f64::INFINITY,
                }
            }
            Some(worst)
        }
        None => None,
    };
    let mass: Vec<f64> = active.iter().map(|&i| rho.values[i] * src.weights[i]).collect();
    let total: f64 = mass.iter().sum();
    let mut flow_cost = 0.0;
    for (k, &i) in active.iter().enumerate() {
        let y = candidate.map[i]
            .as_ref()
            .ok_or_else(|| Error::Flow(format!("no image at source node {i}")))?;
        flow_cost += mass[k] / total * cost.value(&src.nodes[i], y)?;
    }
    let lp_cost = plan.map(|p| p.cost);
    let cost_gap = lp_cost.map(|l| (flow_cost - l).abs() / l.abs().max(f64::MIN_POSITIVE));

    let tol = h;
    let mut min_slack = f64::INFINITY;
    let mut pairs = 0;
    for &i in &active {
        for j in tgt.active_indices() {
            let Some(us) = candidate.ustar[j] else { continue };
            let s = candidate.u[i] + us + cost.value(&src.nodes[i], &tgt.nodes[j])?;
            min_slack = min_slack.min(s);
            pairs += 1;
        }
    }
    let support_gap = match plan {
        Some(p) => {
            let mut worst: f64 = 0.0;
            for &(i, j, _) in &p.entries {
                if let Some(us) = candidate.ustar[j] {
                    worst = worst.max((candidate.u[i] + us + cost.value(&src.nodes[i], &tgt.nodes[j])?).abs());
                }
            }
            Some(worst)
        }
        None => None,
    };
    let filled: Vec<f64> = candidate.ustar.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let mut map_gap: f64 = 0.0;
    for &i in &active {
        let Some(y) = &candidate.map[i] else { continue };
        let us = tgt.interpolate(&filled, y);
        let g = candidate.u[i] + us + cost.value(&src.nodes[i], y)?;
        map_gap = if g.is_nan() { f64::INFINITY } else { map_gap.max(g.abs()) };
    }
    let duality_passes = min_slack >= -tol && support_gap.is_none_or(|g| g <= tol) && map_gap <= tol;
    let duality = DualityMetrics {
        min_slack,
        support_gap,
        map_gap,
        tol,
        pairs_checked: pairs,
        passes: duality_passes,
    };
    let map_tol = 2.0 * h;
    let cost_tol = 5.0 * h;
    let passes = map_deviation.is_none_or(|d| d <= map_tol) && cost_gap.is_none_or(|g| g <= cost_tol) && duality.passes;
    Ok(OracleMetrics {
        map_deviation,
        map_tol,
        flow_cost,
        lp_cost,
        cost_gap,
        cost_tol,
        duality,
        passes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::geometry::{build_grid, DomainSpec};

    fn field(spec: DomainSpec, res: usize, f: impl Fn(f64) -> f64) -> DensityField {
        let g = Arc::new(build_grid(&spec, res).unwrap());
        DensityField::from_fn(g, |x| f(x[0])).unwrap()
    }

    #[test]
    fn rearrangement_examples() {
        let q = CostModel::Quadratic;
        let rho = field(DomainSpec::interval(0.0, 1.0), 17, |_| 1.0);
        let t = monotone_rearrangement_1d(&q, &rho, &field(DomainSpec::interval(2.0, 3.0), 17, |_| 1.0)).unwrap();
        for (i, x) in rho.grid.nodes.iter().enumerate() {
            assert!((t[i].unwrap() - (x[0] + 2.0)).abs() < 1e-14);
        }
        let t = monotone_rearrangement_1d(&q, &rho, &field(DomainSpec::interval(2.0, 4.0), 17, |_| 1.0)).unwrap();
        for (i, x) in rho.grid.nodes.iter().enumerate() {
            assert!((t[i].unwrap() - (2.0 * x[0] + 2.0)).abs() < 1e-14);
        }
        // linear target density ∝ y − 1: F*(y) = ((y − 1)² − 1)/3, so T(x) = 1 + √(1 + 3x)
        let t = monotone_rearrangement_1d(&q, &rho, &field(DomainSpec::interval(2.0, 3.0), 9, |y| y - 1.0)).unwrap();
        for (i, x) in rho.grid.nodes.iter().enumerate() {
            assert!((t[i].unwrap() - (1.0 + (1.0 + 3.0 * x[0]).sqrt())).abs() < 1e-8);
        }
    }

    #[test]
    fn rearrangement_guard() {
        let folded = CostModel::FoldedY { center: vec![2.5] };
        let rho = field(DomainSpec::interval(0.0, 1.0), 9, |_| 1.0);
        let rs = field(DomainSpec::interval(2.0, 3.0), 9, |_| 1.0);
        assert!(matches!(monotone_rearrangement_1d(&folded, &rho, &rs), Err(Error::OracleInapplicable(_))));
    }

    #[test]
    fn two_point_matching() {
        let p = |v: f64| DVector::from_element(1, v);
        let (plan, cost) = transport_points(
            &CostModel::Quadratic,
            &[p(0.0), p(1.0)],
            &[1.0, 1.0],
            &[p(2.0), p(3.0)],
            &[1.0, 1.0],
            DEFAULT_PAIR_CAP,
        )
        .unwrap();
        assert_eq!(plan.len(), 2);
        assert!(plan.iter().all(|&(i, j, m)| i == j && (m - 0.5).abs() < 1e-15));
        assert!((cost - 2.0).abs() < 1e-15);
        let (plan, cost) = transport_points(&CostModel::Quadratic, &[p(0.3)], &[2.0], &[p(1.0)], &[5.0], 4).unwrap();
        assert_eq!(plan, vec![(0, 0, 1.0)]);
        assert!((cost - 0.245).abs() < 1e-15);
        assert!(matches!(
            transport_points(&CostModel::Quadratic, &vec![p(0.0); 3], &[1.0; 3], &vec![p(1.0); 3], &[1.0; 3], 8),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn power_plan_is_a_staircase() {
        let rho = field(DomainSpec::interval(0.0, 1.0), 8, |_| 1.0);
        let rs = field(DomainSpec::interval(2.0, 3.0), 8, |_| 1.0);
        let c = CostModel::power(2.1).unwrap();
        let plan = discrete_kantorovich(&c, &rho, &rs, DEFAULT_PAIR_CAP).unwrap();
        assert!(plan.marginal_error() <= 1e-10);
        assert_eq!(two_swap_violations(&c, &plan, &rho.grid, &rs.grid, 1e-12).unwrap(), 0);
        let mut e = plan.entries.clone();
        e.sort_by_key(|t| (t.0, t.1));
        assert!(e.windows(2).all(|w| w[1].1 >= w[0].1));
    }
}
