//! Bounded source/target domains, their lattice discretizations, signed-distance
//! defining functions and density fields.
//!
//! Every domain is discretized on a uniform lattice spanning its bounding box.
//! A lattice node is `Interior` when it lies strictly inside the domain,
//! `Boundary` when it is not inside but touches an interior node through the
//! 3^n stencil, and `Exterior` otherwise. Exterior nodes stay in the arrays so
//! that all fields share one layout, but they carry zero quadrature weight and
//! are never updated. Boundary nodes keep their lattice position for all
//! difference stencils; their nearest point on the true boundary and the
//! outward normal there are stored alongside.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Interval,
    Box,
    Disc,
    Ellipse,
}

/// A bounded domain: an interval, an axis-aligned box, a disc or an
/// axis-aligned ellipse. `margin` is the radius r₀ of the closed neighborhood
/// in which c-exponential images of this domain are still accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub center: Vec<f64>,
    pub half_extents: Vec<f64>,
    #[serde(default)]
    pub margin: f64,
}

impl DomainSpec {
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self {
            kind: DomainKind::Interval,
            center: vec![0.5 * (lo + hi)],
            half_extents: vec![0.5 * (hi - lo)],
            margin: 0.0,
        }
    }

    pub fn rect(center: [f64; 2], half_extents: [f64; 2]) -> Self {
        Self {
            kind: DomainKind::Box,
            center: center.to_vec(),
            half_extents: half_extents.to_vec(),
            margin: 0.0,
        }
    }

    pub fn disc(center: [f64; 2], radius: f64) -> Self {
        Self {
            kind: DomainKind::Disc,
            center: center.to_vec(),
            half_extents: vec![radius, radius],
            margin: 0.0,
        }
    }

    pub fn ellipse(center: [f64; 2], semi_axes: [f64; 2]) -> Self {
        Self {
            kind: DomainKind::Ellipse,
            center: center.to_vec(),
            half_extents: semi_axes.to_vec(),
            margin: 0.0,
        }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.center)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.center.len();
        if n == 0 {
            return Err(Error::Config("domain has dimension 0".into()));
        }
        if self.half_extents.len() != n {
            return Err(Error::Config(format!(
                "domain center has {} components but half_extents has {}",
                n,
                self.half_extents.len()
            )));
        }
        if self.half_extents.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Config("half_extents must be strictly positive".into()));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config("margin must be a finite non-negative number".into()));
        }
        match self.kind {
            DomainKind::Interval if n != 1 => {
                Err(Error::Config("interval domains are one-dimensional".into()))
            }
            DomainKind::Disc | DomainKind::Ellipse if n != 2 => {
                Err(Error::Config("disc and ellipse domains are two-dimensional".into()))
            }
            DomainKind::Disc if self.half_extents[0] != self.half_extents[1] => {
                Err(Error::Config("disc needs equal half_extents".into()))
            }
            _ => Ok(()),
        }
    }

    /// Lebesgue measure of the domain.
    pub fn volume(&self) -> f64 {
        match self.kind {
            DomainKind::Interval | DomainKind::Box => {
                self.half_extents.iter().map(|a| 2.0 * a).product()
            }
            DomainKind::Disc | DomainKind::Ellipse => {
                std::f64::consts::PI * self.half_extents[0] * self.half_extents[1]
            }
        }
    }

    /// Measure of the boundary (point count in 1D, perimeter in 2D).
    pub fn surface_measure(&self) -> f64 {
        match self.kind {
            DomainKind::Interval => 2.0,
            DomainKind::Box => {
                let n = self.dim();
                (0..n)
                    .map(|k| {
                        2.0 * (0..n)
                            .filter(|&j| j != k)
                            .map(|j| 2.0 * self.half_extents[j])
                            .product::<f64>()
                    })
                    .sum()
            }
            DomainKind::Disc => 2.0 * std::f64::consts::PI * self.half_extents[0],
            DomainKind::Ellipse => {
                // Ramanujan's second approximation
                let (a, b) = (self.half_extents[0], self.half_extents[1]);
                let hh = ((a - b) / (a + b)).powi(2);
                std::f64::consts::PI * (a + b) * (1.0 + 3.0 * hh / (10.0 + (4.0 - 3.0 * hh).sqrt()))
            }
        }
    }

    pub fn diameter(&self) -> f64 {
        match self.kind {
            DomainKind::Interval | DomainKind::Box => {
                2.0 * self.half_extents.iter().map(|a| a * a).sum::<f64>().sqrt()
            }
            DomainKind::Disc | DomainKind::Ellipse => {
                2.0 * self.half_extents.iter().copied().fold(0.0, f64::max)
            }
        }
    }

    /// Signed distance to the boundary, negative inside.
    pub fn signed_distance(&self, x: &DVector<f64>) -> f64 {
        match self.kind {
            DomainKind::Interval | DomainKind::Box => self.box_distance(x).0,
            DomainKind::Disc => (x - self.center_vec()).norm() - self.half_extents[0],
            DomainKind::Ellipse => self.ellipse_nearest(x).1,
        }
    }

    /// Signed distance and its gradient. Ties between equidistant faces of an
    /// interval or box resolve to the lower face of the first tied axis; the
    /// gradient is undefined at the center of a disc or ellipse.
    pub fn defining_function(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has {} components, domain has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        match self.kind {
            DomainKind::Interval | DomainKind::Box => Ok(self.box_distance(x)),
            DomainKind::Disc => {
                let d = x - self.center_vec();
                let r = d.norm();
                if r == 0.0 {
                    return Err(Error::Evaluation(
                        "defining function gradient requested at the disc center".into(),
                    ));
                }
                Ok((r - self.half_extents[0], d / r))
            }
            DomainKind::Ellipse => {
                let local = x - self.center_vec();
                if local.norm() == 0.0 {
                    return Err(Error::Evaluation(
                        "defining function gradient requested at the ellipse center".into(),
                    ));
                }
                let (nearest, h) = self.ellipse_nearest(x);
                let diff = x - &nearest;
                let dn = diff.norm();
                let scale = self.half_extents[0].max(self.half_extents[1]);
                let grad = if dn <= 1e-13 * scale {
                    self.ellipse_normal(&nearest)
                } else if h > 0.0 {
                    diff / dn
                } else {
                    -diff / dn
                };
                Ok((h, grad))
            }
        }
    }

    fn box_distance(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let n = self.dim();
        let q: Vec<f64> = (0..n)
            .map(|i| (x[i] - self.center[i]).abs() - self.half_extents[i])
            .collect();
        let sign = |i: usize| if x[i] - self.center[i] > 0.0 { 1.0 } else { -1.0 };
        let outside = q.iter().any(|&v| v > 0.0);
        let mut grad = DVector::zeros(n);
        if outside {
            let pos: Vec<f64> = q.iter().map(|&v| v.max(0.0)).collect();
            let h = pos.iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..n {
                grad[i] = pos[i] * sign(i) / h;
            }
            (h, grad)
        } else {
            let mut k = 0;
            for i in 1..n {
                if q[i] > q[k] {
                    k = i;
                }
            }
            grad[k] = sign(k);
            (q[k], grad)
        }
    }

    /// Nearest boundary point of the ellipse and the signed distance to it.
    fn ellipse_nearest(&self, x: &DVector<f64>) -> (DVector<f64>, f64) {
        let (a, b) = (self.half_extents[0], self.half_extents[1]);
        let (u, v) = (x[0] - self.center[0], x[1] - self.center[1]);
        // work with the major axis first and in the first quadrant
        let swap = b > a;
        let (e0, e1, y0, y1) = if swap {
            (b, a, v.abs(), u.abs())
        } else {
            (a, b, u.abs(), v.abs())
        };
        let (x0, x1) = nearest_on_ellipse_quadrant(e0, e1, y0, y1);
        let dist = ((x0 - y0).powi(2) + (x1 - y1).powi(2)).sqrt();
        let (mut p0, mut p1) = if swap { (x1, x0) } else { (x0, x1) };
        if u < 0.0 {
            p0 = -p0;
        }
        if v < 0.0 {
            p1 = -p1;
        }
        let inside = (u / a).powi(2) + (v / b).powi(2) < 1.0;
        let nearest = DVector::from_vec(vec![p0 + self.center[0], p1 + self.center[1]]);
        (nearest, if inside { -dist } else { dist })
    }

    fn ellipse_normal(&self, p: &DVector<f64>) -> DVector<f64> {
        let (a, b) = (self.half_extents[0], self.half_extents[1]);
        let g = DVector::from_vec(vec![
            (p[0] - self.center[0]) / (a * a),
            (p[1] - self.center[1]) / (b * b),
        ]);
        let n = g.norm();
        g / n
    }

    /// Nearest point on the boundary.
    pub fn project_to_boundary(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            DomainKind::Ellipse => self.ellipse_nearest(x).0,
            DomainKind::Disc => {
                let c = self.center_vec();
                let d = x - &c;
                let r = d.norm();
                if r == 0.0 {
                    let mut e = DVector::zeros(2);
                    e[0] = self.half_extents[0];
                    return c + e;
                }
                c + d * (self.half_extents[0] / r)
            }
            DomainKind::Interval | DomainKind::Box => {
                let (h, g) = self.box_distance(x);
                if h > 0.0 {
                    // clamp into the box
                    DVector::from_iterator(
                        x.len(),
                        (0..x.len()).map(|i| {
                            x[i].clamp(
                                self.center[i] - self.half_extents[i],
                                self.center[i] + self.half_extents[i],
                            )
                        }),
                    )
                } else {
                    x - g * h
                }
            }
        }
    }

    /// Outward unit normal at a boundary point. For box corners the normal is
    /// the normalized sum of the active face normals.
    pub fn normal_at(&self, p: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            DomainKind::Disc => {
                let d = p - self.center_vec();
                let r = d.norm();
                d / r
            }
            DomainKind::Ellipse => self.ellipse_normal(p),
            DomainKind::Interval | DomainKind::Box => {
                let n = self.dim();
                let scale = self.half_extents.iter().copied().fold(0.0, f64::max);
                let mut g = DVector::zeros(n);
                for i in 0..n {
                    let q = (p[i] - self.center[i]).abs() - self.half_extents[i];
                    if q.abs() <= 1e-12 * scale || q > 0.0 {
                        g[i] = if p[i] > self.center[i] { 1.0 } else { -1.0 };
                    }
                }
                let nn = g.norm();
                if nn == 0.0 {
                    self.box_distance(p).1
                } else {
                    g / nn
                }
            }
        }
    }

    /// Second fundamental form of the boundary at a boundary point: the
    /// Hessian of the signed distance there (the derivative of the normal
    /// field), which vanishes in the normal direction.
    pub fn boundary_shape_operator(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        match self.kind {
            DomainKind::Interval | DomainKind::Box => DMatrix::zeros(n, n),
            DomainKind::Disc => {
                let nu = self.normal_at(p);
                (DMatrix::identity(2, 2) - &nu * nu.transpose()) / self.half_extents[0]
            }
            DomainKind::Ellipse => {
                let (a, b) = (self.half_extents[0], self.half_extents[1]);
                let (u, v) = (p[0] - self.center[0], p[1] - self.center[1]);
                // curvature of x²/a²+y²/b²=1 at (u, v)
                let gx = u / (a * a);
                let gy = v / (b * b);
                let gnorm = (gx * gx + gy * gy).sqrt();
                let kappa = 1.0 / (a * a * b * b * gnorm.powi(3));
                let tau = DVector::from_vec(vec![-gy / gnorm, gx / gnorm]);
                &tau * tau.transpose() * kappa
            }
        }
    }

    /// Points on the boundary with their outward normals. Box corners are
    /// skipped since the boundary is not smooth there.
    pub fn boundary_samples(&self, count: usize) -> Vec<(DVector<f64>, DVector<f64>)> {
        let count = count.max(4);
        match self.kind {
            DomainKind::Interval => {
                let lo = DVector::from_element(1, self.center[0] - self.half_extents[0]);
                let hi = DVector::from_element(1, self.center[0] + self.half_extents[0]);
                vec![
                    (lo, DVector::from_element(1, -1.0)),
                    (hi, DVector::from_element(1, 1.0)),
                ]
            }
            DomainKind::Disc | DomainKind::Ellipse => (0..count)
                .map(|k| {
                    let t = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                    let p = DVector::from_vec(vec![
                        self.center[0] + self.half_extents[0] * t.cos(),
                        self.center[1] + self.half_extents[1] * t.sin(),
                    ]);
                    let nu = self.normal_at(&p);
                    (p, nu)
                })
                .collect(),
            DomainKind::Box => {
                let n = self.dim();
                let per_face = (count / (2 * n)).max(2);
                let mut out = Vec::new();
                for axis in 0..n {
                    for side in [-1.0, 1.0] {
                        for k in 0..per_face {
                            let mut p = self.center_vec();
                            p[axis] += side * self.half_extents[axis];
                            // interior points of the face along the remaining axes
                            let frac = (k as f64 + 0.5) / per_face as f64;
                            for j in 0..n {
                                if j != axis {
                                    p[j] += (2.0 * frac - 1.0) * self.half_extents[j];
                                }
                            }
                            let mut nu = DVector::zeros(n);
                            nu[axis] = side;
                            out.push((p, nu));
                        }
                    }
                }
                out
            }
        }
    }

    /// True when `y` lies in the closed neighborhood of radius `margin`.
    pub fn in_neighborhood(&self, y: &DVector<f64>) -> bool {
        self.signed_distance(y) <= self.margin + 1e-12 * self.diameter()
    }
}

/// Closest point of the ellipse (x/e0)²+(y/e1)²=1, e0 ≥ e1, to (y0, y1) with
/// y0, y1 ≥ 0. Robust bisection on the Lagrange multiplier.
fn nearest_on_ellipse_quadrant(e0: f64, e1: f64, y0: f64, y1: f64) -> (f64, f64) {
    if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g0 = z0 * z0 + z1 * z1 - 1.0;
            if g0 == 0.0 {
                return (y0, y1);
            }
            let r0 = (e0 / e1).powi(2);
            let g = |s: f64| (r0 * z0 / (s + r0)).powi(2) + (z1 / (s + 1.0)).powi(2) - 1.0;
            let mut lo = z1 - 1.0;
            let mut hi = if g0 < 0.0 { 0.0 } else { (r0 * r0 * z0 * z0 + z1 * z1).sqrt() - 1.0 };
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid == lo || mid == hi {
                    break;
                }
                if g(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let s = 0.5 * (lo + hi);
            (r0 * y0 / (s + r0), y1 / (s + 1.0))
        } else {
            (0.0, e1)
        }
    } else {
        let denom = e0 * e0 - e1 * e1;
        if denom > 0.0 && y0 < denom / e0 {
            let x0 = e0 * e0 * y0 / denom;
            let x1 = e1 * (1.0 - (x0 / e0).powi(2)).max(0.0).sqrt();
            (x0, x1)
        } else {
            (e0, 0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeClass {
    Interior,
    Boundary,
    Exterior,
}

/// Uniform lattice over the bounding box of a domain.
#[derive(Debug, Clone)]
pub struct GridDomain {
    pub spec: DomainSpec,
    /// Nodes per axis; axis 0 varies fastest in the flat index.
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub nodes: Vec<DVector<f64>>,
    pub class: Vec<NodeClass>,
    /// Outward unit normal at the boundary projection of each boundary node.
    pub normals: Vec<Option<DVector<f64>>>,
    /// Nearest point on the true boundary, for boundary nodes.
    pub boundary_points: Vec<Option<DVector<f64>>>,
    pub weights: Vec<f64>,
}

impl GridDomain {
    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest lattice spacing.
    pub fn h(&self) -> f64 {
        self.spacing.iter().copied().fold(0.0, f64::max)
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.dims.len());
        for &d in &self.dims {
            out.push(idx % d);
            idx /= d;
        }
        out
    }

    pub fn flat_index(&self, mi: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (k, &i) in mi.iter().enumerate() {
            idx += i * stride;
            stride *= self.dims[k];
        }
        idx
    }

    /// Node at lattice offset `offset` from `idx`, if it exists.
    pub fn offset(&self, idx: usize, offset: &[isize]) -> Option<usize> {
        let mi = self.multi_index(idx);
        let mut out = Vec::with_capacity(mi.len());
        for (k, (&i, &o)) in mi.iter().zip(offset).enumerate() {
            let j = i as isize + o;
            if j < 0 || j >= self.dims[k] as isize {
                return None;
            }
            out.push(j as usize);
        }
        Some(self.flat_index(&out))
    }

    pub fn is_active(&self, idx: usize) -> bool {
        self.class[idx] != NodeClass::Exterior
    }

    pub fn interior_indices(&self) -> Vec<usize> {
        self.indices_of(NodeClass::Interior)
    }

    pub fn boundary_indices(&self) -> Vec<usize> {
        self.indices_of(NodeClass::Boundary)
    }

    /// Interior and boundary nodes, in index order.
    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_active(i)).collect()
    }

    fn indices_of(&self, class: NodeClass) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.class[i] == class).collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Quadrature of a nodal field over the domain.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(values)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, v)| w * v)
            .sum()
    }

    /// Smallest distance between two distinct active nodes.
    pub fn min_node_distance(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Locate `y` in the lattice: lower cell corner index per axis and the
    /// fractional offset within the cell, with `y` clamped to the box.
    pub fn locate(&self, y: &DVector<f64>) -> (Vec<usize>, Vec<f64>) {
        let n = self.dim();
        let mut cell = Vec::with_capacity(n);
        let mut frac = Vec::with_capacity(n);
        for k in 0..n {
            let t = ((y[k] - self.origin[k]) / self.spacing[k]).clamp(0.0, (self.dims[k] - 1) as f64);
            let i = (t.floor() as usize).min(self.dims[k] - 2);
            cell.push(i);
            frac.push(t - i as f64);
        }
        (cell, frac)
    }

    /// Multilinear interpolation of a nodal field (defined at every lattice
    /// node) at `y`, clamped to the bounding box.
    pub fn interpolate(&self, values: &[f64], y: &DVector<f64>) -> f64 {
        let n = self.dim();
        let (cell, frac) = self.locate(y);
        let mut acc = 0.0;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut mi = cell.clone();
            for k in 0..n {
                if corner >> k & 1 == 1 {
                    mi[k] += 1;
                    w *= frac[k];
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            if w != 0.0 {
                acc += w * values[self.flat_index(&mi)];
            }
        }
        acc
    }
}

/// Discretize `spec` with `resolution` nodes per axis across its bounding box.
pub fn build_grid(spec: &DomainSpec, resolution: usize) -> Result<GridDomain> {
    spec.validate()?;
    if resolution < 4 {
        return Err(Error::Config(format!(
            "resolution {resolution} is below the minimum of 4 nodes per axis"
        )));
    }
    let n = spec.dim();
    let dims = vec![resolution; n];
    let spacing: Vec<f64> = spec
        .half_extents
        .iter()
        .map(|a| 2.0 * a / (resolution - 1) as f64)
        .collect();
    let origin: Vec<f64> = (0..n).map(|k| spec.center[k] - spec.half_extents[k]).collect();
    let total: usize = dims.iter().product();

    let mut grid = GridDomain {
        spec: spec.clone(),
        dims,
        spacing,
        origin,
        nodes: Vec::with_capacity(total),
        class: vec![NodeClass::Exterior; total],
        normals: vec![None; total],
        boundary_points: vec![None; total],
        weights: vec![0.0; total],
    };
    for idx in 0..total {
        let mi = grid.multi_index(idx);
        let p = DVector::from_iterator(
            n,
            (0..n).map(|k| {
                // snap the last node exactly onto the far face
                if mi[k] == resolution - 1 {
                    grid.spec.center[k] + grid.spec.half_extents[k]
                } else {
                    grid.origin[k] + mi[k] as f64 * grid.spacing[k]
                }
            }),
        );
        grid.nodes.push(p);
    }

    let tol = 1e-12 * spec.diameter();
    let inside: Vec<bool> = grid
        .nodes
        .iter()
        .map(|p| spec.signed_distance(p) < -tol)
        .collect();
    for idx in 0..total {
        if inside[idx] {
            grid.class[idx] = NodeClass::Interior;
        }
    }
    let offsets = stencil_offsets(n);
    for idx in 0..total {
        if inside[idx] {
            continue;
        }
        let touches = offsets
            .iter()
            .filter_map(|o| grid.offset(idx, o))
            .any(|j| inside[j]);
        if touches {
            grid.class[idx] = NodeClass::Boundary;
        }
    }
    if !grid.class.contains(&NodeClass::Interior) {
        return Err(Error::Config(format!(
            "resolution {resolution} leaves no interior node"
        )));
    }

    for idx in 0..total {
        if grid.class[idx] == NodeClass::Boundary {
            let bp = spec.project_to_boundary(&grid.nodes[idx]);
            grid.normals[idx] = Some(spec.normal_at(&bp));
            grid.boundary_points[idx] = Some(bp);
        }
    }
    grid.weights = dual_cell_weights(&grid);
    Ok(grid)
}

/// All offsets in {-1,0,1}^n except the zero offset.
pub fn stencil_offsets(n: usize) -> Vec<Vec<isize>> {
    let mut out = Vec::new();
    let count = 3usize.pow(n as u32);
    for code in 0..count {
        let mut c = code;
        let mut o = Vec::with_capacity(n);
        for _ in 0..n {
            o.push((c % 3) as isize - 1);
            c /= 3;
        }
        if o.iter().any(|&v| v != 0) {
            out.push(o);
        }
    }
    out
}

/// Measure of (dual cell ∩ domain) for every active node. Exact for intervals
/// and boxes (the trapezoid rule); sub-sampled for curved boundaries.
fn dual_cell_weights(grid: &GridDomain) -> Vec<f64> {
    let spec = &grid.spec;
    let n = grid.dim();
    let mut weights = vec![0.0; grid.len()];
    for idx in 0..grid.len() {
        if !grid.is_active(idx) {
            continue;
        }
        let p = &grid.nodes[idx];
        let lo: Vec<f64> = (0..n).map(|k| p[k] - 0.5 * grid.spacing[k]).collect();
        let hi: Vec<f64> = (0..n).map(|k| p[k] + 0.5 * grid.spacing[k]).collect();
        weights[idx] = match spec.kind {
            DomainKind::Interval | DomainKind::Box => (0..n)
                .map(|k| {
                    let a = lo[k].max(spec.center[k] - spec.half_extents[k]);
                    let b = hi[k].min(spec.center[k] + spec.half_extents[k]);
                    (b - a).max(0.0)
                })
                .product(),
            DomainKind::Disc | DomainKind::Ellipse => {
                let corners_inside = (0..4).all(|c| {
                    let q = DVector::from_vec(vec![
                        if c & 1 == 1 { hi[0] } else { lo[0] },
                        if c & 2 == 2 { hi[1] } else { lo[1] },
                    ]);
                    spec.signed_distance(&q) <= 0.0
                });
                let cell = grid.spacing[0] * grid.spacing[1];
                if corners_inside {
                    // convex domain: the whole cell is inside
                    cell
                } else {
                    const SUB: usize = 24;
                    let mut hits = 0usize;
                    for a in 0..SUB {
                        for b in 0..SUB {
                            let q = DVector::from_vec(vec![
                                lo[0] + (a as f64 + 0.5) / SUB as f64 * grid.spacing[0],
                                lo[1] + (b as f64 + 0.5) / SUB as f64 * grid.spacing[1],
                            ]);
                            if spec.signed_distance(&q) < 0.0 {
                                hits += 1;
                            }
                        }
                    }
                    cell * hits as f64 / (SUB * SUB) as f64
                }
            }
        };
    }
    weights
}

/// Analytic density families, evaluated at lattice nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    Constant { value: f64 },
    /// base + slope · (x − domain center)
    Affine { base: f64, slope: Vec<f64> },
    /// base + amplitude · Π_k cos(frequency · π · (x_k − c_k) / a_k)
    Cosine {
        base: f64,
        amplitude: f64,
        frequency: f64,
    },
    /// One row per lattice node in index order: coordinates then value.
    Csv { path: String },
}

impl Default for DensitySpec {
    fn default() -> Self {
        DensitySpec::Constant { value: 1.0 }
    }
}

/// Nodal density values on a grid, with their lower bound λ (so that
/// λ ≤ ρ ≤ 1/λ) and discrete mass.
#[derive(Debug, Clone)]
pub struct DensityField {
    pub grid: Arc<GridDomain>,
    /// Values at every lattice node (exterior nodes carry extrapolated values
    /// so that interpolation near the boundary stays well defined).
    pub values: Vec<f64>,
    pub lambda: f64,
    pub mass: f64,
}

impl DensityField {
    pub fn from_fn(grid: Arc<GridDomain>, f: impl Fn(&DVector<f64>) -> f64) -> Result<Self> {
        let values: Vec<f64> = grid.nodes.iter().map(&f).collect();
        Self::from_values(grid, values)
    }

    pub fn from_values(grid: Arc<GridDomain>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Density(format!(
                "{} density values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        let active = grid.active_indices();
        let mut lambda = f64::INFINITY;
        for &i in &active {
            let v = values[i];
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Density(format!(
                    "density {v} at node {i} violates the positive lower bound"
                )));
            }
            lambda = lambda.min(v).min(1.0 / v);
        }
        let mass = grid.integrate(&values);
        if !(mass > 0.0) {
            return Err(Error::Config("density has zero mass".into()));
        }
        Ok(Self {
            grid,
            values,
            lambda,
            mass,
        })
    }

    pub fn from_spec(grid: Arc<GridDomain>, spec: &DensitySpec) -> Result<Self> {
        let center = grid.spec.center_vec();
        let half = grid.spec.half_extents.clone();
        match spec {
            DensitySpec::Constant { value } => Self::from_fn(grid, |_| *value),
            DensitySpec::Affine { base, slope } => {
                if slope.len() != center.len() {
                    return Err(Error::Config("density slope has the wrong dimension".into()));
                }
                let s = DVector::from_column_slice(slope);
                Self::from_fn(grid, |x| base + s.dot(&(x - &center)))
            }
            DensitySpec::Cosine {
                base,
                amplitude,
                frequency,
            } => Self::from_fn(grid, |x| {
                let prod: f64 = (0..x.len())
                    .map(|k| (frequency * std::f64::consts::PI * (x[k] - center[k]) / half[k]).cos())
                    .product();
                base + amplitude * prod
            }),
            DensitySpec::Csv { path } => {
                let values = read_density_csv(&grid, path)?;
                Self::from_values(grid, values)
            }
        }
    }

    /// Density at an arbitrary point: multilinear interpolation, clamped to
    /// [λ, 1/λ].
    pub fn eval(&self, y: &DVector<f64>) -> Result<f64> {
        let v = self.grid.interpolate(&self.values, y);
        if !(v > 0.0) {
            return Err(Error::Density(format!(
                "interpolated density {v} is not positive at {:?}",
                y.as_slice()
            )));
        }
        Ok(v.clamp(self.lambda, 1.0 / self.lambda))
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::from_values(
            self.grid.clone(),
            self.values.iter().map(|v| v * factor).collect(),
        )
    }
}

fn read_density_csv(grid: &GridDomain, path: &str) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let n = grid.dim();
    let mut values = Vec::with_capacity(grid.len());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != n + 1 {
            return Err(Error::Config(format!(
                "density csv row {row} has {} columns, expected {}",
                rec.len(),
                n + 1
            )));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("density csv row {row}: {e}")))
        };
        if row >= grid.len() {
            return Err(Error::Config("density csv has more rows than grid nodes".into()));
        }
        for k in 0..n {
            let c = parse(&rec[k])?;
            if (c - grid.nodes[row][k]).abs() > 1e-9 * (1.0 + c.abs()) {
                return Err(Error::Config(format!(
                    "density csv row {row} coordinate {k} = {c} does not match the grid"
                )));
            }
        }
        values.push(parse(&rec[n])?);
    }
    if values.len() != grid.len() {
        return Err(Error::Config(format!(
            "density csv has {} rows, grid has {} nodes",
            values.len(),
            grid.len()
        )));
    }
    Ok(values)
}

/// Rescale the target density by one constant so both discrete masses agree.
/// Returns the source unchanged; a scale within a few ulps of one is treated
/// as exactly one, which makes the operation idempotent.
pub fn normalize_densities(
    rho: &DensityField,
    rho_star: &DensityField,
) -> Result<(DensityField, DensityField)> {
    if !(rho.mass > 0.0) || !(rho_star.mass > 0.0) {
        return Err(Error::Config("zero mass density".into()));
    }
    let scale = rho.mass / rho_star.mass;
    if (scale - 1.0).abs() <= 8.0 * f64::EPSILON {
        return Ok((rho.clone(), rho_star.clone()));
    }
    Ok((rho.clone(), rho_star.scaled(scale)?))
}
