//! Linear difference stencils on a [`GridDomain`].
//!
//! Interior nodes use centered first and second differences. At a boundary
//! node a quadratic is fitted by weighted least squares through the node value
//! and the interior nodes of its 5^n block (7^n at corners); the gradient of that quadratic
//! is evaluated at the node's projection onto the true boundary. In 1D this
//! reduces to the one-sided three-point formula. Every gradient is therefore
//! a fixed linear combination of nodal values, stored per node.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{GridDomain, NodeClass};

/// ∇u at one node as Σ_k coefficient_k · u[index_k].
#[derive(Debug, Clone)]
pub struct GradientStencil {
    pub terms: Vec<(usize, DVector<f64>)>,
}

impl GradientStencil {
    pub fn apply(&self, u: &[f64]) -> DVector<f64> {
        let n = self.terms.first().map(|t| t.1.len()).unwrap_or(0);
        let mut g = DVector::zeros(n);
        for (k, c) in &self.terms {
            g.axpy(u[*k], c, 1.0);
        }
        g
    }

    /// Coefficient vector multiplying u[idx], zero if absent.
    pub fn coefficient(&self, idx: usize) -> Option<&DVector<f64>> {
        self.terms.iter().find(|(k, _)| *k == idx).map(|(_, c)| c)
    }
}

#[derive(Debug, Clone)]
pub struct Stencils {
    /// One gradient stencil per active node (None for exterior nodes).
    pub gradient: Vec<Option<GradientStencil>>,
    /// Neighbor indices at offset −1/+1 per axis, interior nodes only.
    axis_neighbors: Vec<Option<Vec<(usize, usize)>>>,
    /// Diagonal neighbors (++, +−, −+, −−) for each axis pair i<j.
    diag_neighbors: Vec<Option<Vec<[usize; 4]>>>,
    spacing: Vec<f64>,
}

impl Stencils {
    pub fn new(grid: &GridDomain) -> Result<Self> {
        let n = grid.dim();
        let len = grid.len();
        let mut gradient = vec![None; len];
        let mut axis_neighbors = vec![None; len];
        let mut diag_neighbors = vec![None; len];
        for idx in 0..len {
            match grid.class[idx] {
                NodeClass::Exterior => {}
                NodeClass::Interior => {
                    let mut axes = Vec::with_capacity(n);
                    let mut terms = Vec::with_capacity(2 * n);
                    for k in 0..n {
                        let mut off = vec![0isize; n];
                        off[k] = -1;
                        let lo = grid.offset(idx, &off).ok_or_else(missing)?;
                        off[k] = 1;
                        let hi = grid.offset(idx, &off).ok_or_else(missing)?;
                        axes.push((lo, hi));
                        let mut c = DVector::zeros(n);
                        c[k] = 0.5 / grid.spacing[k];
                        terms.push((hi, c.clone()));
                        terms.push((lo, -c));
                    }
                    let mut diags = Vec::new();
                    for i in 0..n {
                        for j in (i + 1)..n {
                            let mut quad = [0usize; 4];
                            for (slot, (si, sj)) in [(1, 1), (1, -1), (-1, 1), (-1, -1)].iter().enumerate() {
                                let mut off = vec![0isize; n];
                                off[i] = *si;
                                off[j] = *sj;
                                quad[slot] = grid.offset(idx, &off).ok_or_else(missing)?;
                            }
                            diags.push(quad);
                        }
                    }
                    for (lo, hi) in &axes {
                        if !grid.is_active(*lo) || !grid.is_active(*hi) {
                            return Err(missing());
                        }
                    }
                    gradient[idx] = Some(GradientStencil { terms });
                    axis_neighbors[idx] = Some(axes);
                    diag_neighbors[idx] = Some(diags);
                }
                NodeClass::Boundary => {
                    gradient[idx] = Some(boundary_stencil(grid, idx)?);
                }
            }
        }
        Ok(Self {
            gradient,
            axis_neighbors,
            diag_neighbors,
            spacing: grid.spacing.clone(),
        })
    }

    pub fn gradient_at(&self, u: &[f64], idx: usize) -> DVector<f64> {
        self.gradient[idx]
            .as_ref()
            .map(|s| s.apply(u))
            .unwrap_or_else(|| DVector::zeros(self.spacing.len()))
    }

    /// Centered Hessian at an interior node. Exact on quadratics.
    pub fn hessian_at(&self, u: &[f64], idx: usize) -> DMatrix<f64> {
        let n = self.spacing.len();
        let mut h = DMatrix::zeros(n, n);
        let (Some(axes), Some(diags)) = (&self.axis_neighbors[idx], &self.diag_neighbors[idx]) else {
            return h;
        };
        for (k, (lo, hi)) in axes.iter().enumerate() {
            h[(k, k)] = (u[*hi] - 2.0 * u[idx] + u[*lo]) / (self.spacing[k] * self.spacing[k]);
        }
        let mut slot = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                let [pp, pm, mp, mm] = diags[slot];
                let v = (u[pp] - u[pm] - u[mp] + u[mm]) / (4.0 * self.spacing[i] * self.spacing[j]);
                h[(i, j)] = v;
                h[(j, i)] = v;
                slot += 1;
            }
        }
        h
    }

    /// Five-point (or three-point in 1D) Laplacian at an interior node, as
    /// (index, coefficient) pairs.
    pub fn laplacian_terms(&self, idx: usize) -> Vec<(usize, f64)> {
        let Some(axes) = &self.axis_neighbors[idx] else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(1 + 2 * axes.len());
        let mut center = 0.0;
        for (k, (lo, hi)) in axes.iter().enumerate() {
            let w = 1.0 / (self.spacing[k] * self.spacing[k]);
            out.push((*lo, w));
            out.push((*hi, w));
            center -= 2.0 * w;
        }
        out.push((idx, center));
        out
    }

    pub fn laplacian_at(&self, u: &[f64], idx: usize) -> f64 {
        self.laplacian_terms(idx).iter().map(|(k, c)| c * u[*k]).sum()
    }
}

fn missing() -> Error {
    Error::Config("interior node is missing a stencil neighbor".into())
}

/// Weighted least-squares quadratic through the boundary node value and the
/// interior nodes around it, with weights 1/|d|², differentiated at the
/// boundary projection. Other boundary nodes are left out so that each
/// boundary gradient moves with its own node value only.
fn boundary_stencil(grid: &GridDomain, idx: usize) -> Result<GradientStencil> {
    let n = grid.dim();
    let x0 = &grid.nodes[idx];
    let target = grid.boundary_points[idx].as_ref().unwrap_or(x0);
    let shift = target - x0;
    let h = grid.h();

    let block_neighbors = |radius: isize| {
        let width = (2 * radius + 1) as usize;
        let mut out = Vec::new();
        for code in 0..width.pow(n as u32) {
            let mut c = code;
            let mut off = Vec::with_capacity(n);
            for _ in 0..n {
                off.push((c % width) as isize - radius);
                c /= width;
            }
            if let Some(j) = grid.offset(idx, &off) {
                if grid.class[j] == NodeClass::Interior {
                    out.push(j);
                }
            }
        }
        out
    };

    let quad_terms = n * (n + 1) / 2;
    // quadratic fit on the 5^n block, then the 7^n block, then linear
    for (quadratic, radius) in [(true, 2), (true, 3), (false, 2)] {
        let unknowns = if quadratic { n + quad_terms } else { n };
        let neighbors = block_neighbors(radius);
        if neighbors.len() < unknowns {
            continue;
        }
        let m = neighbors.len();
        let mut r = DMatrix::zeros(m, unknowns);
        let mut w = DVector::zeros(m);
        for (row, &j) in neighbors.iter().enumerate() {
            // scale offsets by h so the normal matrix is well conditioned
            let d = (&grid.nodes[j] - x0) / h;
            for k in 0..n {
                r[(row, k)] = d[k];
            }
            if quadratic {
                let mut col = n;
                for a in 0..n {
                    for b in a..n {
                        r[(row, col)] = if a == b { 0.5 * d[a] * d[a] } else { d[a] * d[b] };
                        col += 1;
                    }
                }
            }
            w[row] = 1.0 / d.norm_squared();
        }
        let rtw = r.transpose() * DMatrix::from_diagonal(&w);
        let normal = &rtw * &r;
        let eig = crate::linalg::sym_eigenvalues(&normal);
        let (lo, hi) = (eig[0], eig[eig.len() - 1]);
        if !(lo > 1e-10 * hi) {
            continue;
        }
        let Some(inv) = normal.try_inverse() else {
            continue;
        };
        let k = inv * rtw; // unknowns × m, maps (u_j − u_0) to fit coefficients
        let e = &shift / h;
        let mut terms: Vec<(usize, DVector<f64>)> = Vec::with_capacity(m + 1);
        let mut center = DVector::zeros(n);
        for (col, &j) in neighbors.iter().enumerate() {
            let mut c = DVector::zeros(n);
            for a in 0..n {
                c[a] = k[(a, col)];
            }
            if quadratic {
                // gradient of the fitted quadratic at the shifted point
                let mut q = n;
                for a in 0..n {
                    for b in a..n {
                        let coef = k[(q, col)];
                        if a == b {
                            c[a] += coef * e[a];
                        } else {
                            c[a] += coef * e[b];
                            c[b] += coef * e[a];
                        }
                        q += 1;
                    }
                }
            }
            c /= h;
            center -= &c;
            terms.push((j, c));
        }
        terms.push((idx, center));
        return Ok(GradientStencil { terms });
    }
    Err(Error::Config(format!(
        "boundary node {idx} has too few active neighbors for a gradient stencil"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, DomainSpec};

    #[test]
    fn one_dimensional_boundary_is_three_point() {
        let g = build_grid(&DomainSpec::interval(0.0, 1.0), 5).unwrap();
        let s = Stencils::new(&g).unwrap();
        let st = s.gradient[0].as_ref().unwrap();
        let h = 0.25;
        assert!((st.coefficient(0).unwrap()[0] + 1.5 / h).abs() < 1e-12);
        assert!((st.coefficient(1).unwrap()[0] - 2.0 / h).abs() < 1e-12);
        assert!((st.coefficient(2).unwrap()[0] + 0.5 / h).abs() < 1e-12);
    }

    #[test]
    fn quadratics_are_reproduced_exactly() {
        for spec in [
            DomainSpec::disc([0.3, -0.2], 1.0),
            DomainSpec::ellipse([0.0, 0.0], [1.5, 0.8]),
            DomainSpec::rect([0.0, 0.0], [1.0, 0.5]),
        ] {
            let g = build_grid(&spec, 13).unwrap();
            let s = Stencils::new(&g).unwrap();
            let f = |p: &DVector<f64>| 0.7 * p[0] * p[0] - 0.3 * p[0] * p[1] + 1.1 * p[1] * p[1] + 2.0 * p[0] - p[1] + 0.5;
            let grad = |p: &DVector<f64>| DVector::from_vec(vec![1.4 * p[0] - 0.3 * p[1] + 2.0, -0.3 * p[0] + 2.2 * p[1] - 1.0]);
            let u: Vec<f64> = g.nodes.iter().map(f).collect();
            for i in g.active_indices() {
                let at = g.boundary_points[i].as_ref().unwrap_or(&g.nodes[i]);
                let err = (s.gradient_at(&u, i) - grad(at)).norm();
                assert!(err < 1e-9, "node {i}: {err}");
            }
            for i in g.interior_indices() {
                let h = s.hessian_at(&u, i);
                let expect = DMatrix::from_row_slice(2, 2, &[1.4, -0.3, -0.3, 2.2]);
                assert!((h - expect).norm() < 1e-9);
            }
        }
    }
}
