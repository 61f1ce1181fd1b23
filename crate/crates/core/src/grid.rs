//! Discrete spherical cap and the calculus on it.
//!
//! The cap `C_θ = {ξ : |ξ − cosθ·e| = 1, ξ_{n+1} ≥ 0}` with `e = −E_{n+1}` is
//! covered by geodesic polar coordinates about its apex `(0, …, 0, 1 − cosθ)`:
//!
//! * `n = 2`: `ξ = (sinρ cosφ, sinρ sinφ, cosρ − cosθ)`, `ρ ∈ (0, θ]`;
//! * `n = 1`: `ξ = (sinα, cosα − cosθ)`, `α ∈ [−θ, θ]`.
//!
//! Radial nodes are cell-centred, `ρ_j = (j + ½)Δρ`, so no node sits on the
//! pole and the boundary `ρ = θ` falls half a cell beyond the last ring. One
//! ghost ring past the boundary carries the Robin condition; across the pole
//! the stencil reads the innermost ring rotated by π.
//!
//! Tensor and vector components are taken in the orthonormal frame
//! `e_ρ = ∂_ρ`, `e_φ = (1/sinρ)∂_φ` (`e_α = ∂_α` when `n = 1`). They are
//! coordinate-dependent; only invariants such as determinants and
//! eigenvalues are frame-free.

use std::f64::consts::{FRAC_PI_2, PI};

use thiserror::Error;

use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("contact angle {0} outside (0, π/2)")]
    InvalidTheta(f64),
    #[error("surface dimension {0} not supported (expected 1 or 2)")]
    InvalidDimension(usize),
    #[error("resolution too low: {what} = {got}, need at least {min}")]
    ResolutionTooLow {
        what: &'static str,
        got: usize,
        min: usize,
    },
    #[error("azimuthal node count {0} must be even (pole stencil pairs opposite nodes)")]
    OddAzimuthalCount(usize),
    #[error("field has {got} values, grid has {expected} nodes")]
    FieldLength { expected: usize, got: usize },
    #[error("stencil at node {0} reaches the ghost layer but the field has none")]
    MissingGhosts(usize),
}

pub const MIN_RADIAL_NODES: usize = 8;
pub const MIN_AZIMUTHAL_NODES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridNode {
    /// Geodesic distance from the apex (`n = 2`) or signed arc coordinate `α`
    /// (`n = 1`).
    pub rho: f64,
    /// Azimuth; zero when `n = 1`.
    pub phi: f64,
    /// Ambient coordinates; only the first `n + 1` entries are meaningful.
    pub xi: [f64; 3],
}

/// A point of `∂C_θ` together with the ghost and interior values that
/// straddle it.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPoint {
    pub xi: [f64; 3],
    /// Outward unit co-normal of `∂C_θ` in `C_θ`, as an ambient vector.
    pub mu: [f64; 3],
    pub ghost: usize,
    /// Interior nodes along the normal line, nearest first.
    pub ray: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct CapGrid {
    theta: f64,
    dim: usize,
    n_rho: usize,
    n_phi: usize,
    d_rho: f64,
    d_phi: f64,
    nodes: Vec<GridNode>,
    weights: Vec<f64>,
    boundary: Vec<BoundaryPoint>,
    ring_sin: Vec<f64>,
    ring_cot: Vec<f64>,
}

/// Where a stencil point reads its value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Loc {
    Node(usize),
    Ghost(usize),
}

/// Linear stencil for gradient and covariant Hessian at one node.
/// Hessian coefficients are stored as `[H_11, H_12, H_22]`.
#[derive(Debug, Clone)]
pub(crate) struct Stencil {
    pub len: usize,
    pub locs: [Loc; 9],
    pub hess: [[f64; 3]; 9],
    pub grad: [[f64; 2]; 9],
}

impl Stencil {
    fn new() -> Self {
        Self {
            len: 0,
            locs: [Loc::Node(0); 9],
            hess: [[0.0; 3]; 9],
            grad: [[0.0; 2]; 9],
        }
    }

    fn push(&mut self, loc: Loc, hess: [f64; 3], grad: [f64; 2]) {
        self.locs[self.len] = loc;
        self.hess[self.len] = hess;
        self.grad[self.len] = grad;
        self.len += 1;
    }
}

/// Corrections to the midpoint rule at each end of a cell-centred axis:
/// `(Δ²/24)(g'(b) − g'(a))` with `g'` from a one-sided quadratic through the
/// three outermost nodes. Brings the rule to fourth order.
const END_CORRECTION: [f64; 3] = [2.0 / 24.0, -3.0 / 24.0, 1.0 / 24.0];

/// Offsets (in cell widths, along the outward co-normal) of the ghost and
/// the interior nodes used by the Robin closure.
const CLOSURE_POINTS: [f64; 4] = [0.5, -0.5, -1.5, -2.5];

pub fn build_grid(
    theta: f64,
    dim: usize,
    n_rho: usize,
    n_phi: usize,
) -> Result<CapGrid, GridError> {
    if !(theta > 0.0 && theta < FRAC_PI_2) {
        return Err(GridError::InvalidTheta(theta));
    }
    if dim != 1 && dim != 2 {
        return Err(GridError::InvalidDimension(dim));
    }
    if n_rho < MIN_RADIAL_NODES {
        return Err(GridError::ResolutionTooLow {
            what: "n_rho",
            got: n_rho,
            min: MIN_RADIAL_NODES,
        });
    }
    let n_phi = if dim == 1 { 1 } else { n_phi };
    if dim == 2 {
        if n_phi < MIN_AZIMUTHAL_NODES {
            return Err(GridError::ResolutionTooLow {
                what: "n_phi",
                got: n_phi,
                min: MIN_AZIMUTHAL_NODES,
            });
        }
        if n_phi % 2 != 0 {
            return Err(GridError::OddAzimuthalCount(n_phi));
        }
    }

    let ct = theta.cos();
    let mut end_coef = vec![1.0; n_rho];
    for (m, c) in END_CORRECTION.iter().enumerate() {
        end_coef[m] += c;
        end_coef[n_rho - 1 - m] += c;
    }

    let mut nodes = Vec::with_capacity(n_rho * n_phi);
    let mut weights = Vec::with_capacity(n_rho * n_phi);
    let mut boundary = Vec::new();
    let (d_rho, d_phi, ring_sin, ring_cot);

    if dim == 2 {
        d_rho = theta / n_rho as f64;
        d_phi = 2.0 * PI / n_phi as f64;
        let rhos: Vec<f64> = (0..n_rho).map(|j| (j as f64 + 0.5) * d_rho).collect();
        ring_sin = rhos.iter().map(|r| r.sin()).collect::<Vec<_>>();
        ring_cot = rhos.iter().map(|r| r.cos() / r.sin()).collect::<Vec<_>>();
        for (j, &rho) in rhos.iter().enumerate() {
            let (sr, cr) = rho.sin_cos();
            for k in 0..n_phi {
                let phi = k as f64 * d_phi;
                let (sp, cp) = phi.sin_cos();
                nodes.push(GridNode {
                    rho,
                    phi,
                    xi: [sr * cp, sr * sp, cr - ct],
                });
                weights.push(end_coef[j] * sr * d_rho * d_phi);
            }
        }
        let st = theta.sin();
        for k in 0..n_phi {
            let phi = k as f64 * d_phi;
            let (sp, cp) = phi.sin_cos();
            let ray = [
                (n_rho - 1) * n_phi + k,
                (n_rho - 2) * n_phi + k,
                (n_rho - 3) * n_phi + k,
            ];
            boundary.push(BoundaryPoint {
                xi: [st * cp, st * sp, 0.0],
                mu: [ct * cp, ct * sp, -st],
                ghost: k,
                ray,
            });
        }
    } else {
        d_rho = 2.0 * theta / n_rho as f64;
        d_phi = 0.0;
        ring_sin = Vec::new();
        ring_cot = Vec::new();
        for j in 0..n_rho {
            let alpha = -theta + (j as f64 + 0.5) * d_rho;
            let (sa, ca) = alpha.sin_cos();
            nodes.push(GridNode {
                rho: alpha,
                phi: 0.0,
                xi: [sa, ca - ct, 0.0],
            });
            weights.push(end_coef[j] * d_rho);
        }
        let st = theta.sin();
        boundary.push(BoundaryPoint {
            xi: [-st, 0.0, 0.0],
            mu: [-ct, -st, 0.0],
            ghost: 0,
            ray: [0, 1, 2],
        });
        boundary.push(BoundaryPoint {
            xi: [st, 0.0, 0.0],
            mu: [ct, -st, 0.0],
            ghost: 1,
            ray: [n_rho - 1, n_rho - 2, n_rho - 3],
        });
    }

    Ok(CapGrid {
        theta,
        dim,
        n_rho,
        n_phi,
        d_rho,
        d_phi,
        nodes,
        weights,
        boundary,
        ring_sin,
        ring_cot,
    })
}

impl CapGrid {
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_rho(&self) -> usize {
        self.n_rho
    }
    pub fn n_phi(&self) -> usize {
        self.n_phi
    }
    /// Radial (or arc) spacing.
    pub fn d_rho(&self) -> f64 {
        self.d_rho
    }
    pub fn d_phi(&self) -> f64 {
        self.d_phi
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn nodes(&self) -> &[GridNode] {
        &self.nodes
    }
    pub fn node(&self, i: usize) -> &GridNode {
        &self.nodes[i]
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn boundary(&self) -> &[BoundaryPoint] {
        &self.boundary
    }
    pub fn ghost_count(&self) -> usize {
        self.boundary.len()
    }

    /// Ambient coordinates `ξ ∈ ℝ^{n+1}` of node `i`.
    pub fn ambient(&self, i: usize) -> &[f64] {
        &self.nodes[i].xi[..self.dim + 1]
    }

    /// Closed-form area of `C_θ`.
    pub fn cap_area(&self) -> f64 {
        match self.dim {
            2 => 2.0 * PI * (1.0 - self.theta.cos()),
            _ => 2.0 * self.theta,
        }
    }

    pub fn index(&self, j: usize, k: usize) -> usize {
        j * self.n_phi + k
    }

    /// Orthonormal tangent frame at node `i` as ambient vectors
    /// (`e_ρ`, `e_φ`); `e_φ` is zero when `n = 1`.
    pub fn frame(&self, i: usize) -> ([f64; 3], [f64; 3]) {
        let nd = &self.nodes[i];
        frame_at(self.dim, nd.rho, nd.phi)
    }

    /// Unit normal of the unit cap at node `i`, `ν = ξ − cosθ·e`.
    pub fn normal(&self, i: usize) -> [f64; 3] {
        let mut nu = self.nodes[i].xi;
        nu[self.dim] += self.theta.cos();
        nu
    }

    fn loc(&self, j: isize, k: isize) -> Loc {
        let n_phi = self.n_phi as isize;
        let wrap = |k: isize| (k.rem_euclid(n_phi)) as usize;
        if self.dim == 1 {
            return if j < 0 {
                Loc::Ghost(0)
            } else if j >= self.n_rho as isize {
                Loc::Ghost(1)
            } else {
                Loc::Node(j as usize)
            };
        }
        if j < 0 {
            // (−ρ, φ) is the same point as (ρ, φ + π)
            Loc::Node(self.index((-j - 1) as usize, wrap(k + n_phi / 2)))
        } else if j >= self.n_rho as isize {
            Loc::Ghost(wrap(k))
        } else {
            Loc::Node(self.index(j as usize, wrap(k)))
        }
    }

    pub(crate) fn stencil(&self, i: usize) -> Stencil {
        let mut st = Stencil::new();
        let a = self.d_rho;
        if self.dim == 1 {
            let j = i as isize;
            st.push(
                self.loc(j - 1, 0),
                [1.0 / (a * a), 0.0, 0.0],
                [-0.5 / a, 0.0],
            );
            st.push(self.loc(j, 0), [-2.0 / (a * a), 0.0, 0.0], [0.0, 0.0]);
            st.push(
                self.loc(j + 1, 0),
                [1.0 / (a * a), 0.0, 0.0],
                [0.5 / a, 0.0],
            );
            return st;
        }
        let j = (i / self.n_phi) as isize;
        let k = (i % self.n_phi) as isize;
        let b = self.d_phi;
        let s = self.ring_sin[j as usize];
        let c = self.ring_cot[j as usize];
        let ab4 = 1.0 / (4.0 * a * b * s);
        let bs2 = 1.0 / (b * b * s * s);
        // H_ρρ = ∂²_ρ
        // H_ρφ = (∂_ρ∂_φ − cotρ ∂_φ)/sinρ
        // H_φφ = ∂²_φ/sin²ρ + cotρ ∂_ρ
        st.push(
            self.loc(j, k),
            [-2.0 / (a * a), 0.0, -2.0 * bs2],
            [0.0, 0.0],
        );
        st.push(
            self.loc(j + 1, k),
            [1.0 / (a * a), 0.0, c / (2.0 * a)],
            [0.5 / a, 0.0],
        );
        st.push(
            self.loc(j - 1, k),
            [1.0 / (a * a), 0.0, -c / (2.0 * a)],
            [-0.5 / a, 0.0],
        );
        st.push(
            self.loc(j, k + 1),
            [0.0, -c / (2.0 * b * s), bs2],
            [0.0, 0.5 / (b * s)],
        );
        st.push(
            self.loc(j, k - 1),
            [0.0, c / (2.0 * b * s), bs2],
            [0.0, -0.5 / (b * s)],
        );
        st.push(self.loc(j + 1, k + 1), [0.0, ab4, 0.0], [0.0, 0.0]);
        st.push(self.loc(j + 1, k - 1), [0.0, -ab4, 0.0], [0.0, 0.0]);
        st.push(self.loc(j - 1, k + 1), [0.0, -ab4, 0.0], [0.0, 0.0]);
        st.push(self.loc(j - 1, k - 1), [0.0, ab4, 0.0], [0.0, 0.0]);
        st
    }

    /// Weights `w` with `ghost = Σ w_m · field[ray[m]]` realizing the Robin
    /// condition `∇_μ u = coeff·u` at the boundary. The cubic through the
    /// ghost and three interior nodes is required to satisfy the condition at
    /// the boundary point, which keeps the ghost error at `O(Δ⁴)` and the
    /// Hessian on the last ring second-order accurate.
    pub fn robin_weights(&self, coeff: f64) -> [f64; 3] {
        let (val, der) = lagrange_weights(&CLOSURE_POINTS, 0.0);
        let a: Vec<f64> = (0..4)
            .map(|m| der[m] / self.d_rho - coeff * val[m])
            .collect();
        [-a[1] / a[0], -a[2] / a[0], -a[3] / a[0]]
    }

    /// Boundary value and outward co-normal derivative of a ghost-filled field
    /// at boundary point `b`, from the centred pair (last node, ghost).
    pub fn boundary_trace(&self, field: &ScalarField, b: usize) -> Result<(f64, f64), GridError> {
        let bp = &self.boundary[b];
        let ghosts = field
            .ghosts
            .as_ref()
            .ok_or(GridError::MissingGhosts(bp.ray[0]))?;
        let g = ghosts[bp.ghost];
        let h = field.values[bp.ray[0]];
        Ok((0.5 * (g + h), (g - h) / self.d_rho))
    }

    /// Boundary value and co-normal derivative from interior nodes only
    /// (one-sided quadratic), independent of any ghost fill.
    pub fn boundary_trace_interior(&self, field: &ScalarField, b: usize) -> (f64, f64) {
        let bp = &self.boundary[b];
        let (val, der) = lagrange_weights(&CLOSURE_POINTS[1..], 0.0);
        let mut v = 0.0;
        let mut d = 0.0;
        for m in 0..3 {
            let y = field.values[bp.ray[m]];
            v += val[m] * y;
            d += der[m] * y;
        }
        (v, d / self.d_rho)
    }

    fn check_len(&self, field: &ScalarField) -> Result<(), GridError> {
        if field.values.len() != self.len() {
            return Err(GridError::FieldLength {
                expected: self.len(),
                got: field.values.len(),
            });
        }
        Ok(())
    }
}

pub(crate) fn frame_at(dim: usize, rho: f64, phi: f64) -> ([f64; 3], [f64; 3]) {
    let (sr, cr) = rho.sin_cos();
    if dim == 1 {
        return ([cr, -sr, 0.0], [0.0; 3]);
    }
    let (sp, cp) = phi.sin_cos();
    ([cr * cp, cr * sp, -sr], [-sp, cp, 0.0])
}

/// Lagrange interpolation weights (value and first derivative) at `x` for
/// the given abscissae.
pub fn lagrange_weights(points: &[f64], x: f64) -> (Vec<f64>, Vec<f64>) {
    let n = points.len();
    let mut val = vec![0.0; n];
    let mut der = vec![0.0; n];
    for i in 0..n {
        let mut denom = 1.0;
        for m in 0..n {
            if m != i {
                denom *= points[i] - points[m];
            }
        }
        let mut prod = 1.0;
        for m in 0..n {
            if m != i {
                prod *= x - points[m];
            }
        }
        val[i] = prod / denom;
        let mut d = 0.0;
        for l in 0..n {
            if l == i {
                continue;
            }
            let mut p = 1.0;
            for m in 0..n {
                if m != i && m != l {
                    p *= x - points[m];
                }
            }
            d += p;
        }
        der[i] = d / denom;
    }
    (val, der)
}

/// Nodal values on a [`CapGrid`], optionally with a filled ghost layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    values: Vec<f64>,
    ghosts: Option<Vec<f64>>,
}

impl ScalarField {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            ghosts: None,
        }
    }

    pub fn from_fn(grid: &CapGrid, f: impl Fn(&GridNode) -> f64 + Sync + Send) -> Self {
        let nodes = grid.nodes();
        Self::new(par::map_nodes(nodes.len(), |i| f(&nodes[i])))
    }

    pub fn constant(grid: &CapGrid, c: f64) -> Self {
        Self::new(vec![c; grid.len()])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn ghosts(&self) -> Option<&[f64]> {
        self.ghosts.as_deref()
    }
    pub fn has_ghosts(&self) -> bool {
        self.ghosts.is_some()
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Interior-only copy; any ghost layer is dropped.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| c * v).collect(),
            ghosts: self
                .ghosts
                .as_ref()
                .map(|g| g.iter().map(|v| c * v).collect()),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[inline]
    pub(crate) fn at(&self, loc: Loc) -> Option<f64> {
        match loc {
            Loc::Node(i) => Some(self.values[i]),
            Loc::Ghost(g) => self.ghosts.as_ref().map(|v| v[g]),
        }
    }
}

/// Per-node symmetric `n × n` tensors stored as `[T_11, T_12, T_22]`
/// (only `T_11` is used when `n = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct SymTensorField {
    dim: usize,
    comps: Vec<[f64; 3]>,
}

impl SymTensorField {
    pub fn new(dim: usize, comps: Vec<[f64; 3]>) -> Self {
        Self { dim, comps }
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.comps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }
    pub fn components(&self) -> &[[f64; 3]] {
        &self.comps
    }
    pub fn get(&self, i: usize) -> [f64; 3] {
        self.comps[i]
    }

    /// Entry `(r, c)` of the matrix at node `i`, zero-based.
    pub fn entry(&self, i: usize, r: usize, c: usize) -> f64 {
        let t = &self.comps[i];
        match (r, c) {
            (0, 0) => t[0],
            (1, 1) => t[2],
            _ => t[1],
        }
    }

    pub fn det(&self, i: usize) -> f64 {
        let t = &self.comps[i];
        if self.dim == 1 {
            t[0]
        } else {
            t[0] * t[2] - t[1] * t[1]
        }
    }

    pub fn trace(&self, i: usize) -> f64 {
        let t = &self.comps[i];
        if self.dim == 1 {
            t[0]
        } else {
            t[0] + t[2]
        }
    }

    /// Eigenvalues in ascending order (closed form).
    pub fn eigenvalues(&self, i: usize) -> [f64; 2] {
        let t = &self.comps[i];
        if self.dim == 1 {
            return [t[0], t[0]];
        }
        let m = 0.5 * (t[0] + t[2]);
        let r = (0.5 * (t[0] - t[2])).hypot(t[1]);
        [m - r, m + r]
    }

    pub fn add_identity_scaled(&mut self, field: &ScalarField) {
        for (t, &v) in self.comps.iter_mut().zip(field.values()) {
            t[0] += v;
            if self.dim == 2 {
                t[2] += v;
            }
        }
    }

    /// Largest entry-wise deviation from `c·I` over all nodes.
    pub fn max_dev_from_scaled_identity(&self, c: f64) -> f64 {
        self.comps
            .iter()
            .map(|t| {
                let d0 = (t[0] - c).abs();
                if self.dim == 1 {
                    d0
                } else {
                    d0.max(t[1].abs()).max((t[2] - c).abs())
                }
            })
            .fold(0.0, f64::max)
    }
}

/// `ℓ(ξ) = sin²θ + cosθ⟨ξ, e⟩` with `e = −E_{n+1}`.
pub fn ell_field(grid: &CapGrid) -> ScalarField {
    let th = grid.theta();
    let (st, ct) = th.sin_cos();
    let top = grid.dim();
    ScalarField::from_fn(grid, move |nd| st * st - ct * nd.xi[top])
}

/// Returns a copy of `field` with one ghost layer beyond `∂C_θ` chosen so that
/// `∇_μ u = coeff·u` holds at the boundary.
pub fn fill_robin_ghosts(grid: &CapGrid, field: &ScalarField, coeff: f64) -> ScalarField {
    let w = grid.robin_weights(coeff);
    let ghosts = grid
        .boundary()
        .iter()
        .map(|bp| (0..3).map(|m| w[m] * field.values[bp.ray[m]]).sum())
        .collect();
    ScalarField {
        values: field.values.clone(),
        ghosts: Some(ghosts),
    }
}

/// Frame components of `∇u` at one node. Fails only if the stencil needs a
/// ghost value the field does not carry.
pub fn gradient_at(grid: &CapGrid, field: &ScalarField, i: usize) -> Result<[f64; 2], GridError> {
    let st = grid.stencil(i);
    let mut g = [0.0; 2];
    for p in 0..st.len {
        let v = field.at(st.locs[p]).ok_or(GridError::MissingGhosts(i))?;
        g[0] += st.grad[p][0] * v;
        g[1] += st.grad[p][1] * v;
    }
    Ok(g)
}

pub fn gradient(grid: &CapGrid, field: &ScalarField) -> Result<Vec<[f64; 2]>, GridError> {
    grid.check_len(field)?;
    if !field.has_ghosts() {
        return Err(GridError::MissingGhosts(grid.boundary()[0].ray[0]));
    }
    par::map_nodes(grid.len(), |i| gradient_at(grid, field, i))
        .into_iter()
        .collect()
}

pub fn hessian_at(grid: &CapGrid, field: &ScalarField, i: usize) -> Result<[f64; 3], GridError> {
    let st = grid.stencil(i);
    let mut h = [0.0; 3];
    for p in 0..st.len {
        let v = field.at(st.locs[p]).ok_or(GridError::MissingGhosts(i))?;
        for c in 0..3 {
            h[c] += st.hess[p][c] * v;
        }
    }
    Ok(h)
}

/// Frame components of the spherical covariant Hessian `∇²u`.
pub fn covariant_hessian(grid: &CapGrid, field: &ScalarField) -> Result<SymTensorField, GridError> {
    grid.check_len(field)?;
    if !field.has_ghosts() {
        return Err(GridError::MissingGhosts(grid.boundary()[0].ray[0]));
    }
    let comps = par::map_nodes(grid.len(), |i| hessian_at(grid, field, i))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SymTensorField::new(grid.dim(), comps))
}

/// Defect of the Ricci identity `u_{kij} = u_{ijk} + u_k δ_ij − u_j δ_ki`
/// for third covariant derivatives built by differencing the discrete
/// Hessian. Returns `(node, max_{ijk} |defect|)` on the rings whose
/// stencils stay clear of both the pole and the ghost layer (`n = 2` only).
pub fn commutator_defect(
    grid: &CapGrid,
    field: &ScalarField,
) -> Result<Vec<(usize, f64)>, GridError> {
    grid.check_len(field)?;
    if grid.dim() != 2 {
        return Err(GridError::InvalidDimension(grid.dim()));
    }
    let (nr, np) = (grid.n_rho(), grid.n_phi());
    let inner = |j: usize| j + 2 < nr;
    let hess: Vec<Option<[f64; 3]>> = par::map_nodes(grid.len(), |i| {
        inner(i / np)
            .then(|| hessian_at(grid, field, i).ok())
            .flatten()
    });
    let (a, b) = (grid.d_rho(), grid.d_phi());
    let rings: Vec<usize> = (2..nr.saturating_sub(3)).collect();
    let out = par::map_nodes(rings.len() * np, |q| {
        let (j, k) = (rings[q / np], q % np);
        let i = grid.index(j, k);
        let get =
            |jj: usize, kk: usize| hess[grid.index(jj, kk % np)].ok_or(GridError::MissingGhosts(i));
        let h = get(j, k)?;
        let (hn, hs) = (get(j + 1, k)?, get(j - 1, k)?);
        let (he, hw) = (get(j, k + 1)?, get(j, k + np - 1)?);
        let g = gradient_at(grid, field, i)?;
        let s = grid.ring_sin[j];
        let c = grid.ring_cot[j];
        // t[i][j][k] = u_{ij;k} in the frame e_ρ, e_φ
        let mut t = [[[0.0; 2]; 2]; 2];
        let full = |m: [f64; 3]| [[m[0], m[1]], [m[1], m[2]]];
        let (hm, dr, dp) = (
            full(h),
            full(sub(hn, hs, 2.0 * a)),
            full(sub(he, hw, 2.0 * b * s)),
        );
        for r in 0..2 {
            for q in 0..2 {
                t[r][q][0] = dr[r][q];
            }
        }
        // ∇_{e_φ} e_ρ = cotρ e_φ, ∇_{e_φ} e_φ = −cotρ e_ρ
        t[0][0][1] = dp[0][0] - 2.0 * c * hm[0][1];
        t[0][1][1] = dp[0][1] + c * (hm[0][0] - hm[1][1]);
        t[1][0][1] = t[0][1][1];
        t[1][1][1] = dp[1][1] + 2.0 * c * hm[0][1];
        let delta = |x: usize, y: usize| if x == y { 1.0 } else { 0.0 };
        let mut worst = 0.0f64;
        for kk in 0..2 {
            for ii in 0..2 {
                for jj in 0..2 {
                    let d = t[kk][ii][jj] - t[ii][jj][kk] - g[kk] * delta(ii, jj)
                        + g[jj] * delta(kk, ii);
                    worst = worst.max(d.abs());
                }
            }
        }
        Ok((i, worst))
    });
    out.into_iter().collect()
}

fn sub(p: [f64; 3], m: [f64; 3], d: f64) -> [f64; 3] {
    [(p[0] - m[0]) / d, (p[1] - m[1]) / d, (p[2] - m[2]) / d]
}

/// Quadrature `Σ w_i u_i` over the cap. Summed sequentially in node order.
pub fn integrate(grid: &CapGrid, field: &ScalarField) -> f64 {
    integrate_values(grid, field.values())
}

pub fn integrate_values(grid: &CapGrid, values: &[f64]) -> f64 {
    grid.weights().iter().zip(values).map(|(w, v)| w * v).sum()
}

/// Apex value: the innermost ring averaged (`n = 2`), or the centre of the
/// arc (`n = 1`).
pub fn apex_value(grid: &CapGrid, field: &ScalarField) -> f64 {
    let v = field.values();
    if grid.dim() == 2 {
        v[..grid.n_phi()].iter().sum::<f64>() / grid.n_phi() as f64
    } else {
        let n = grid.n_rho();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

/// Cubic resampling of a ghost-filled field onto another grid of the same cap
/// (periodic in azimuth, pole reflection and ghost values radially).
pub fn resample(
    src: &CapGrid,
    field: &ScalarField,
    dst: &CapGrid,
) -> Result<ScalarField, GridError> {
    src.check_len(field)?;
    if src.dim() != dst.dim() || (src.theta() - dst.theta()).abs() > 1e-14 {
        return Err(GridError::FieldLength {
            expected: src.len(),
            got: dst.len(),
        });
    }
    let ghosts = field
        .ghosts()
        .ok_or(GridError::MissingGhosts(src.boundary()[0].ray[0]))?;
    let n_rho = src.n_rho() as isize;
    let value = |j: isize, k: isize| -> f64 {
        match src.loc(j, k) {
            Loc::Node(i) => field.values[i],
            Loc::Ghost(g) => ghosts[g],
        }
    };
    // radial (or arc) coordinate in units of cells, measured so node j sits at j
    let radial = |r: f64| -> f64 {
        if src.dim() == 2 {
            r / src.d_rho() - 0.5
        } else {
            (r + src.theta()) / src.d_rho() - 0.5
        }
    };
    let lo_limit: isize = if src.dim() == 2 { -2 } else { -1 };
    let window = |x: f64| -> (isize, [f64; 4]) {
        let mut j0 = x.floor() as isize - 1;
        j0 = j0.clamp(lo_limit, n_rho - 3);
        let pts: Vec<f64> = (0..4).map(|m| (j0 + m) as f64).collect();
        let (w, _) = lagrange_weights(&pts, x);
        (j0, [w[0], w[1], w[2], w[3]])
    };
    let out = par::map_nodes(dst.len(), |i| {
        let nd = dst.node(i);
        let (j0, wr) = window(radial(nd.rho));
        if src.dim() == 1 {
            return (0..4).map(|m| wr[m] * value(j0 + m as isize, 0)).sum();
        }
        let y = nd.phi / src.d_phi();
        let k0 = y.floor() as isize - 1;
        let pts: Vec<f64> = (0..4).map(|m| (k0 + m) as f64).collect();
        let (wp, _) = lagrange_weights(&pts, y);
        let mut acc = 0.0;
        for (mk, wk) in wp.iter().enumerate() {
            let mut col = 0.0;
            for (mj, wj) in wr.iter().enumerate() {
                col += wj * value(j0 + mj as isize, k0 + mk as isize);
            }
            acc += wk * col;
        }
        acc
    });
    Ok(ScalarField::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_3;

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(
            build_grid(1.6, 2, 64, 128).unwrap_err(),
            GridError::InvalidTheta(1.6)
        );
        assert!(matches!(
            build_grid(0.0, 2, 64, 128),
            Err(GridError::InvalidTheta(_))
        ));
        assert!(matches!(
            build_grid(1.0, 3, 64, 128),
            Err(GridError::InvalidDimension(3))
        ));
        assert!(matches!(
            build_grid(1.0, 2, 4, 128),
            Err(GridError::ResolutionTooLow { .. })
        ));
        assert!(matches!(
            build_grid(1.0, 2, 16, 4),
            Err(GridError::ResolutionTooLow { .. })
        ));
        assert!(matches!(
            build_grid(1.0, 2, 16, 9),
            Err(GridError::OddAzimuthalCount(9))
        ));
        assert!(build_grid(1.0, 1, 16, 1).is_ok());
    }

    #[test]
    fn nodes_lie_on_the_cap() {
        for (dim, np) in [(1, 1), (2, 16)] {
            let g = build_grid(FRAC_PI_3, dim, 16, np).unwrap();
            let c = g.theta().cos();
            for i in 0..g.len() {
                let x = g.ambient(i);
                let mut r2 = 0.0;
                for (a, v) in x.iter().enumerate() {
                    let shifted = if a == dim { v + c } else { *v };
                    r2 += shifted * shifted;
                }
                assert!((r2.sqrt() - 1.0).abs() < 1e-12);
                assert!(x[dim] >= 0.0);
            }
            for bp in g.boundary() {
                assert!(bp.xi[dim].abs() < 1e-12);
            }
        }
        let g = build_grid(FRAC_PI_3, 2, 64, 128).unwrap();
        assert_eq!(g.len(), 64 * 128);
    }

    #[test]
    fn weights_sum_to_cap_area() {
        let g = build_grid(FRAC_PI_3, 2, 64, 128).unwrap();
        let s: f64 = g.weights().iter().sum();
        assert_relative_eq!(s, PI, max_relative = 1e-7);
        let g = build_grid(FRAC_PI_3, 1, 100, 1).unwrap();
        let s: f64 = g.weights().iter().sum();
        assert_relative_eq!(s, 2.0 * FRAC_PI_3, max_relative = 1e-14);
    }

    #[test]
    fn ell_matches_polar_reduction() {
        for th in [0.3, FRAC_PI_3, 1.4] {
            let g = build_grid(th, 2, 16, 16).unwrap();
            let ell = ell_field(&g);
            for (i, nd) in g.nodes().iter().enumerate() {
                assert!((ell.values()[i] - (1.0 - th.cos() * nd.rho.cos())).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn closure_weights_for_neumann_reproduce_constants() {
        let g = build_grid(0.7, 2, 16, 16).unwrap();
        let w = g.robin_weights(0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn missing_ghosts_are_reported() {
        let g = build_grid(0.7, 1, 16, 1).unwrap();
        let f = ScalarField::constant(&g, 1.0);
        assert!(matches!(gradient(&g, &f), Err(GridError::MissingGhosts(_))));
        assert!(matches!(
            covariant_hessian(&g, &f),
            Err(GridError::MissingGhosts(_))
        ));
        // interior stencils do not need the ghost layer
        assert_eq!(gradient_at(&g, &f, 5).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn eigenvalues_closed_form() {
        let t = SymTensorField::new(2, vec![[2.0, 1.0, 2.0], [1.0, 0.0, 2.0]]);
        assert_eq!(t.eigenvalues(0), [1.0, 3.0]);
        assert_eq!(t.eigenvalues(1), [1.0, 2.0]);
        assert_eq!(t.det(0), 3.0);
    }
}
