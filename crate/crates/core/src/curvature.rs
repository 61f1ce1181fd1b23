//! Second fundamental form, Gauss curvature and principal radii of the
//! hypersurface with capillary support function `h`, and its reconstruction
//! through the inverse capillary Gauss map `X = h·ν + ∇h`.

use std::io::{self, Write};

use thiserror::Error;

use crate::grid::{self, CapGrid, GridError, ScalarField, SymTensorField};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurvatureError {
    #[error("support function is not positive at node {node} (h = {value})")]
    NonPositive { node: usize, value: f64 },
    #[error("support function is not strictly convex at node {node} (min radius {radius})")]
    NonConvex { node: usize, radius: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone)]
pub struct CurvatureBundle {
    pub b: SymTensorField,
    pub detb: ScalarField,
    /// `1/det b`; `NaN` wherever `det b ≤ 0`.
    pub gauss_k: ScalarField,
    /// Principal radii (eigenvalues of `b`), ascending.
    pub radii: Vec<[f64; 2]>,
    pub convex: bool,
}

impl CurvatureBundle {
    pub fn from_tensor(b: SymTensorField) -> Self {
        let n = b.len();
        let detb: Vec<f64> = (0..n).map(|i| b.det(i)).collect();
        let radii: Vec<[f64; 2]> = (0..n).map(|i| b.eigenvalues(i)).collect();
        let gauss_k = detb
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d } else { f64::NAN })
            .collect();
        let convex = radii.iter().all(|r| r[0] > 0.0);
        Self {
            b,
            detb: ScalarField::new(detb),
            gauss_k: ScalarField::new(gauss_k),
            radii,
            convex,
        }
    }

    pub fn min_radius(&self) -> f64 {
        self.radii
            .iter()
            .map(|r| r[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_radius(&self) -> f64 {
        self.radii
            .iter()
            .map(|r| r[1])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// First node whose smallest radius is not positive.
    pub fn first_nonconvex(&self) -> Option<(usize, f64)> {
        self.radii
            .iter()
            .enumerate()
            .find(|(_, r)| !(r[0] > 0.0))
            .map(|(i, r)| (i, r[0]))
    }

    pub fn require_convex(&self) -> Result<(), CurvatureError> {
        match self.first_nonconvex() {
            Some((node, radius)) => Err(CurvatureError::NonConvex { node, radius }),
            None => Ok(()),
        }
    }
}

pub(crate) fn check_positive(h: &ScalarField) -> Result<(), CurvatureError> {
    match h.values().iter().position(|&v| !(v > 0.0)) {
        Some(node) => Err(CurvatureError::NonPositive {
            node,
            value: h.values()[node],
        }),
        None => Ok(()),
    }
}

/// `h` with its Robin ghosts `∇_μh = cotθ·h` filled.
pub fn robin_filled(grid: &CapGrid, h: &ScalarField) -> ScalarField {
    let t = grid.theta();
    grid::fill_robin_ghosts(grid, h, t.cos() / t.sin())
}

/// `b = ∇²h + h·I` in the orthonormal frame.
pub fn second_fundamental_form(
    grid: &CapGrid,
    h: &ScalarField,
) -> Result<SymTensorField, CurvatureError> {
    check_positive(h)?;
    let filled = robin_filled(grid, h);
    let mut b = grid::covariant_hessian(grid, &filled)?;
    b.add_identity_scaled(h);
    Ok(b)
}

/// Full curvature data; non-convexity is reported through `convex`.
pub fn curvature_bundle(
    grid: &CapGrid,
    h: &ScalarField,
) -> Result<CurvatureBundle, CurvatureError> {
    Ok(CurvatureBundle::from_tensor(second_fundamental_form(
        grid, h,
    )?))
}

/// Density `ℓ·det b` of the capillary area measure.
pub fn area_measure_density(
    grid: &CapGrid,
    h: &ScalarField,
) -> Result<ScalarField, CurvatureError> {
    let bundle = curvature_bundle(grid, h)?;
    bundle.require_convex()?;
    let ell = grid::ell_field(grid);
    Ok(ScalarField::new(
        ell.values()
            .iter()
            .zip(bundle.detb.values())
            .map(|(l, d)| l * d)
            .collect(),
    ))
}

/// Reconstructed hypersurface. Vertices are ambient points of `ℝ³`; for
/// `n = 1` the curve lies in the x–z plane.
#[derive(Debug, Clone)]
pub struct EmbeddedMesh {
    pub dim: usize,
    pub vertices: Vec<[f64; 3]>,
    /// Outward-oriented polygons (`n = 2` only), closed by a bottom face.
    pub faces: Vec<Vec<usize>>,
    /// Polylines: the boundary ring (`n = 2`), or the curve followed by its
    /// base segment (`n = 1`).
    pub lines: Vec<Vec<usize>>,
    /// Indices of the vertices that sit on `∂C_θ`.
    pub boundary: Vec<usize>,
}

fn axpy(out: &mut [f64; 3], a: f64, x: &[f64; 3]) {
    for c in 0..3 {
        out[c] += a * x[c];
    }
}

fn to_xz(dim: usize, p: [f64; 3]) -> [f64; 3] {
    if dim == 1 {
        [p[0], 0.0, p[1]]
    } else {
        p
    }
}

/// `X = h·ν + ∇h` at every node, at the apex and on `∂C_θ`.
pub fn embed(grid: &CapGrid, h: &ScalarField) -> Result<EmbeddedMesh, CurvatureError> {
    let bundle = curvature_bundle(grid, h)?;
    bundle.require_convex()?;
    let filled = robin_filled(grid, h);
    let grad = grid::gradient(grid, &filled)?;
    let dim = grid.dim();
    let mut vertices: Vec<[f64; 3]> = par::map_nodes(grid.len(), |i| {
        let (er, ep) = grid.frame(i);
        let mut x = [0.0; 3];
        axpy(&mut x, h.values()[i], &grid.normal(i));
        axpy(&mut x, grad[i][0], &er);
        axpy(&mut x, grad[i][1], &ep);
        to_xz(dim, x)
    });

    // boundary points: trace value and co-normal derivative from the ghosts
    let ct = grid.theta().cos();
    let traces: Vec<(f64, f64)> = (0..grid.boundary().len())
        .map(|b| grid.boundary_trace(&filled, b))
        .collect::<Result<_, _>>()?;
    let mut boundary_pts = Vec::with_capacity(traces.len());
    for (b, bp) in grid.boundary().iter().enumerate() {
        let (hb, dmu) = traces[b];
        let mut nu = bp.xi;
        nu[dim] += ct;
        let mut x = [0.0; 3];
        axpy(&mut x, hb, &nu);
        axpy(&mut x, dmu, &bp.mu);
        if dim == 2 {
            // tangential derivative along the boundary circle of radius sinθ
            let m = traces.len();
            let dphi = (traces[(b + 1) % m].0 - traces[(b + m - 1) % m].0)
                / (2.0 * grid.d_phi() * grid.theta().sin());
            let phi = b as f64 * grid.d_phi();
            axpy(&mut x, dphi, &[-phi.sin(), phi.cos(), 0.0]);
        }
        boundary_pts.push(to_xz(dim, x));
    }

    let mut faces = Vec::new();
    let mut lines = Vec::new();
    let boundary: Vec<usize>;
    if dim == 2 {
        let (nr, np) = (grid.n_rho(), grid.n_phi());
        let apex = vertices.len();
        let mut a = [0.0; 3];
        for v in &vertices[..np] {
            axpy(&mut a, 1.0 / np as f64, v);
        }
        vertices.push(a);
        let first_b = vertices.len();
        vertices.extend_from_slice(&boundary_pts);
        boundary = (first_b..first_b + np).collect();
        let ring = |j: usize, k: usize| {
            if j == nr {
                first_b + k % np
            } else {
                grid.index(j, k % np)
            }
        };
        for k in 0..np {
            faces.push(vec![apex, ring(0, k), ring(0, k + 1)]);
        }
        for j in 0..nr {
            for k in 0..np {
                faces.push(vec![
                    ring(j, k),
                    ring(j + 1, k),
                    ring(j + 1, k + 1),
                    ring(j, k + 1),
                ]);
            }
        }
        faces.push(boundary.iter().rev().copied().collect());
        let mut ring_line = boundary.clone();
        ring_line.push(first_b);
        lines.push(ring_line);
    } else {
        let n = vertices.len();
        vertices.push(boundary_pts[0]);
        vertices.push(boundary_pts[1]);
        boundary = vec![n, n + 1];
        let mut curve = vec![n];
        curve.extend(0..n);
        curve.push(n + 1);
        lines.push(curve);
        lines.push(vec![n + 1, n]);
    }
    Ok(EmbeddedMesh {
        dim,
        vertices,
        faces,
        lines,
        boundary,
    })
}

impl EmbeddedMesh {
    /// Signed volume enclosed by the faces (`n = 2`) or signed area enclosed
    /// by the curve and its base (`n = 1`), positive for the outward
    /// orientation produced by [`embed`].
    pub fn enclosed_volume(&self) -> f64 {
        if self.dim == 1 {
            let curve = &self.lines[0];
            let mut twice = 0.0;
            for w in 0..curve.len() {
                let p = self.vertices[curve[w]];
                let q = self.vertices[curve[(w + 1) % curve.len()]];
                twice += p[0] * q[2] - q[0] * p[2];
            }
            // traversed left to right over the top: clockwise in (x, z)
            return -0.5 * twice;
        }
        let mut six = 0.0;
        for f in &self.faces {
            let a = self.vertices[f[0]];
            for w in 1..f.len() - 1 {
                let b = self.vertices[f[w]];
                let c = self.vertices[f[w + 1]];
                six += a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0])
                    + a[2] * (b[0] * c[1] - b[1] * c[0]);
            }
        }
        six / 6.0
    }

    pub fn write_obj<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# capillary hypersurface, n = {}", self.dim)?;
        for v in &self.vertices {
            writeln!(w, "v {:.12e} {:.12e} {:.12e}", v[0], v[1], v[2])?;
        }
        for f in &self.faces {
            write!(w, "f")?;
            for i in f {
                write!(w, " {}", i + 1)?;
            }
            writeln!(w)?;
        }
        for l in &self.lines {
            write!(w, "l")?;
            for i in l {
                write!(w, " {}", i + 1)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, ell_field};
    use std::f64::consts::FRAC_PI_3;

    #[test]
    fn bundle_from_small_tensors() {
        let b = SymTensorField::new(2, vec![[2.0, 0.0, 2.0], [1.0, 0.0, 2.0], [2.0, 1.0, 2.0]]);
        let cb = CurvatureBundle::from_tensor(b);
        assert_eq!(cb.gauss_k.values(), &[0.25, 0.5, 1.0 / 3.0]);
        assert_eq!(cb.radii[1], [1.0, 2.0]);
        assert_eq!(cb.radii[2], [1.0, 3.0]);
        assert!(cb.convex);
    }

    #[test]
    fn degenerate_tensor_flags_nonconvex() {
        let g = build_grid(FRAC_PI_3, 2, 32, 32).unwrap();
        // cos ρ restricts a linear function: b vanishes away from the
        // boundary ring, where the Robin fill does not match its derivative
        let h = ScalarField::from_fn(&g, |nd| nd.rho.cos());
        let cb = curvature_bundle(&g, &h).unwrap();
        let interior = (g.n_rho() - 4) * g.n_phi();
        let worst = cb.b.components()[..interior]
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-3, "{worst}");
        assert!(cb.min_radius() < 1e-3);
        let h = ScalarField::from_fn(&g, |nd| nd.rho.cos() - 0.1 * (nd.rho * 3.0).sin());
        let cb = curvature_bundle(&g, &h).unwrap();
        assert!(!cb.convex);
        assert!(cb.gauss_k.values().iter().any(|k| k.is_nan()));
        assert!(matches!(
            embed(&g, &h),
            Err(CurvatureError::NonConvex { .. })
        ));
    }

    #[test]
    fn rejects_nonpositive_support() {
        let g = build_grid(FRAC_PI_3, 1, 16, 1).unwrap();
        let h = ScalarField::constant(&g, -1.0);
        assert!(matches!(
            curvature_bundle(&g, &h),
            Err(CurvatureError::NonPositive { node: 0, .. })
        ));
    }

    #[test]
    fn cap_embeds_onto_sphere() {
        for dim in [1, 2] {
            let g = build_grid(FRAC_PI_3, dim, 64, 128).unwrap();
            let r = 2.0;
            let h = ell_field(&g).scaled(r);
            let mesh = embed(&g, &h).unwrap();
            let c = g.theta().cos();
            let z = 2;
            for v in &mesh.vertices {
                let d = (v[0] * v[0] + v[1] * v[1] + (v[z] + r * c).powi(2)).sqrt();
                assert!((d - r).abs() < 1e-3, "{d}");
            }
            for &b in &mesh.boundary {
                assert!(mesh.vertices[b][z].abs() < 1e-3);
            }
        }
    }

    #[test]
    fn obj_counts() {
        let g = build_grid(FRAC_PI_3, 2, 8, 8).unwrap();
        let mesh = embed(&g, &ell_field(&g)).unwrap();
        let mut buf = Vec::new();
        mesh.write_obj(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().filter(|l| l.starts_with("v ")).count(),
            64 + 1 + 8
        );
        assert_eq!(
            text.lines().filter(|l| l.starts_with("f ")).count(),
            8 + 64 + 1
        );
        assert_eq!(text.lines().filter(|l| l.starts_with("l ")).count(), 1);
    }
}
