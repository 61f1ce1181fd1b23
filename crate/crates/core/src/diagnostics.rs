//! Quantities tracked along the flow: enclosed volume, the functional
//! `J = ∫ f Φ(ξ, h/ℓ) ℓ − V`, its dissipation, the a priori bound monitors,
//! and an independent ODE oracle for the cap family `h = u(t)·ℓ`.

use serde::Serialize;
use thiserror::Error;

use crate::curvature::{self, CurvatureBundle, CurvatureError};
use crate::grid::{self, CapGrid, ScalarField};
use crate::orlicz::{self, OrliczError, OrliczFunction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Curvature(#[from] CurvatureError),
    #[error(transparent)]
    Orlicz(#[from] OrliczError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("oracle needs a weight that does not depend on xi")]
    DependsOnXi,
    #[error("invalid oracle input: {0}")]
    InvalidInput(String),
    #[error("u left (0, inf) at t = {t} (u = {u})")]
    LeftDomain { t: f64, u: f64 },
    #[error("step size underflow at t = {0}")]
    StepUnderflow(f64),
    #[error(transparent)]
    Orlicz(#[from] OrliczError),
}

/// `V = 1/(n+1) ∫ h·det b` from an already computed bundle. Nodes with
/// `det b ≤ 0` poison the sum (`NaN`).
pub fn volume_from(grid: &CapGrid, h: &ScalarField, bundle: &CurvatureBundle) -> f64 {
    let vals: Vec<f64> = h
        .values()
        .iter()
        .zip(bundle.detb.values())
        .map(|(&hi, &d)| if d > 0.0 { hi * d } else { f64::NAN })
        .collect();
    grid::integrate_values(grid, &vals) / (grid.dim() + 1) as f64
}

pub fn volume(grid: &CapGrid, h: &ScalarField) -> Result<f64, CurvatureError> {
    let bundle = curvature::curvature_bundle(grid, h)?;
    bundle.require_convex()?;
    Ok(volume_from(grid, h, &bundle))
}

/// `∫ f·Φ(ξ, h/ℓ)·ℓ`.
pub fn potential_term(
    grid: &CapGrid,
    ell: &ScalarField,
    h: &ScalarField,
    f: &ScalarField,
    phi: &OrliczFunction,
) -> Result<f64, OrliczError> {
    let mut vals = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let l = ell.values()[i];
        let u = h.values()[i] / l;
        vals.push(f.values()[i] * phi.primitive(grid.ambient(i), u)? * l);
    }
    Ok(grid::integrate_values(grid, &vals))
}

pub fn functional_j_from(
    grid: &CapGrid,
    ell: &ScalarField,
    h: &ScalarField,
    f: &ScalarField,
    phi: &OrliczFunction,
    bundle: &CurvatureBundle,
) -> Result<f64, OrliczError> {
    Ok(potential_term(grid, ell, h, f, phi)? - volume_from(grid, h, bundle))
}

pub fn functional_j(
    grid: &CapGrid,
    h: &ScalarField,
    f: &ScalarField,
    phi: &OrliczFunction,
) -> Result<f64, DiagnosticsError> {
    let bundle = curvature::curvature_bundle(grid, h)?;
    bundle.require_convex()?;
    let ell = grid::ell_field(grid);
    Ok(functional_j_from(grid, &ell, h, f, phi, &bundle)?)
}

/// `−∫ (h/K)(fK/φ − 1)²`, written as `−∫ h·D·(f/(Dφ) − 1)²` with `D = det b`.
pub fn dissipation_from(
    grid: &CapGrid,
    ell: &ScalarField,
    h: &ScalarField,
    f: &ScalarField,
    phi: &OrliczFunction,
    bundle: &CurvatureBundle,
) -> Result<f64, OrliczError> {
    let mut vals = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let hi = h.values()[i];
        let d = bundle.detb.values()[i];
        if !(d > 0.0) {
            vals.push(f64::NAN);
            continue;
        }
        let p = phi.eval(grid.ambient(i), hi / ell.values()[i])?;
        let g = f.values()[i] / (d * p) - 1.0;
        vals.push(hi * d * g * g);
    }
    Ok(-grid::integrate_values(grid, &vals))
}

pub fn dissipation(
    grid: &CapGrid,
    h: &ScalarField,
    f: &ScalarField,
    phi: &OrliczFunction,
) -> Result<f64, DiagnosticsError> {
    let bundle = curvature::curvature_bundle(grid, h)?;
    bundle.require_convex()?;
    let ell = grid::ell_field(grid);
    Ok(dissipation_from(grid, &ell, h, f, phi, &bundle)?)
}

/// One row of `timeseries.csv`; field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub dt: f64,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "V")]
    pub v: f64,
    #[serde(rename = "dJdt_numeric")]
    pub djdt_numeric: f64,
    pub dissipation: f64,
    pub min_h: f64,
    pub max_h: f64,
    pub min_u: f64,
    pub max_u: f64,
    #[serde(rename = "min_K")]
    pub min_k: f64,
    #[serde(rename = "max_K")]
    pub max_k: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    pub grad_bound_slack: f64,
    pub residual_inf: f64,
    pub boundary_robin_defect: f64,
}

pub const ROW_COLUMNS: [&str; 17] = [
    "t",
    "dt",
    "J",
    "V",
    "dJdt_numeric",
    "dissipation",
    "min_h",
    "max_h",
    "min_u",
    "max_u",
    "min_K",
    "max_K",
    "min_radius",
    "max_radius",
    "grad_bound_slack",
    "residual_inf",
    "boundary_robin_defect",
];

/// `(1+cot²θ)(max h)² − max(|∇h|² + h²)`, both maxima taken over the
/// closed cap: the nodes and the boundary traces (value and co-normal
/// derivative from the ghost pair, tangential derivative along the boundary
/// circle). Non-negative when the gradient bound holds.
pub fn gradient_bound_slack(grid: &CapGrid, h: &ScalarField) -> Result<f64, CurvatureError> {
    let filled = curvature::robin_filled(grid, h);
    let grad = grid::gradient(grid, &filled)?;
    let mut p = grad
        .iter()
        .zip(h.values())
        .map(|(g, &v)| g[0] * g[0] + g[1] * g[1] + v * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut h_max = h.max();
    let nb = grid.boundary().len();
    let traces = (0..nb)
        .map(|b| grid.boundary_trace(&filled, b))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CurvatureError::Grid)?;
    let t = grid.theta();
    for (b, &(v, dmu)) in traces.iter().enumerate() {
        let dt = if grid.dim() == 2 {
            (traces[(b + 1) % nb].0 - traces[(b + nb - 1) % nb].0) / (2.0 * grid.d_phi() * t.sin())
        } else {
            0.0
        };
        p = p.max(dmu * dmu + dt * dt + v * v);
        h_max = h_max.max(v);
    }
    let cot = t.cos() / t.sin();
    Ok((1.0 + cot * cot) * h_max.powi(2) - p)
}

/// `max |∇_μh − cotθ·h|` over `∂C_θ`, from interior nodes only.
pub fn boundary_robin_defect(grid: &CapGrid, h: &ScalarField) -> f64 {
    let t = grid.theta();
    let cot = t.cos() / t.sin();
    (0..grid.boundary().len())
        .map(|b| {
            let (v, d) = grid.boundary_trace_interior(h, b);
            (d - cot * v).abs()
        })
        .fold(0.0, f64::max)
}

/// Levels used by the `h/ℓ` bound: the proof's lower and upper barriers,
/// located on the sampled proxy. `None` when the proxy has no such level;
/// the corresponding bound is then vacuous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BarrierLevels {
    pub s_minus: Option<f64>,
    pub s_plus: Option<f64>,
}

pub const LEVEL_SCAN: [f64; 2] = [1e-6, 1e6];

pub fn barrier_levels(grid: &CapGrid, f: &ScalarField, phi: &OrliczFunction) -> BarrierLevels {
    BarrierLevels {
        s_minus: orlicz::lower_barrier_level(phi, grid, f, LEVEL_SCAN[0], LEVEL_SCAN[1]),
        s_plus: orlicz::upper_barrier_level(phi, grid, f, LEVEL_SCAN[0], LEVEL_SCAN[1]),
    }
}

/// Slack of each monitored inequality (non-negative when it holds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonitorRecord {
    /// `min u − (min(min u₀, s⁻) − tol)`.
    pub lower_u_slack: f64,
    /// `(max(max u₀, s⁺) + tol) − max u`.
    pub upper_u_slack: f64,
    pub grad_slack: f64,
    /// Distance of `K` and the radii inside `[ε, 1/ε]` (negative if outside).
    pub band_slack: f64,
    pub min_radius: f64,
}

impl MonitorRecord {
    pub fn all_hold(&self) -> bool {
        self.lower_u_slack >= 0.0
            && self.upper_u_slack >= 0.0
            && self.grad_slack >= 0.0
            && self.band_slack >= 0.0
            && self.min_radius > 0.0
    }
}

pub const MONITOR_TOL: f64 = 1e-6;

/// Reference values fixed at the start of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonitorBaseline {
    pub min_u0: f64,
    pub max_u0: f64,
    pub levels: BarrierLevels,
    /// Run-level band parameter for `K` and the radii.
    pub epsilon: f64,
}

fn band_epsilon(bundle: &CurvatureBundle) -> f64 {
    let k = &bundle.gauss_k;
    let e = bundle
        .min_radius()
        .min(1.0 / bundle.max_radius())
        .min(k.min())
        .min(1.0 / k.max());
    0.5 * e
}

impl MonitorBaseline {
    pub fn new(
        grid: &CapGrid,
        ell: &ScalarField,
        h: &ScalarField,
        bundle: &CurvatureBundle,
        levels: BarrierLevels,
    ) -> Self {
        let (lo, hi) = u_range(ell, h);
        Self {
            min_u0: lo,
            max_u0: hi,
            levels,
            epsilon: if grid.is_empty() {
                0.0
            } else {
                band_epsilon(bundle)
            },
        }
    }
}

pub fn u_range(ell: &ScalarField, h: &ScalarField) -> (f64, f64) {
    h.values()
        .iter()
        .zip(ell.values())
        .map(|(a, b)| a / b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), u| {
            (lo.min(u), hi.max(u))
        })
}

pub fn bound_monitors(
    grid: &CapGrid,
    ell: &ScalarField,
    h: &ScalarField,
    bundle: &CurvatureBundle,
    base: &MonitorBaseline,
) -> Result<MonitorRecord, CurvatureError> {
    let (lo, hi) = u_range(ell, h);
    let lower = base.min_u0.min(base.levels.s_minus.unwrap_or(0.0)) - MONITOR_TOL;
    let upper = base.max_u0.max(base.levels.s_plus.unwrap_or(f64::INFINITY)) + MONITOR_TOL;
    let eps = base.epsilon;
    let k = &bundle.gauss_k;
    let band = [
        bundle.min_radius() - eps,
        1.0 / eps - bundle.max_radius(),
        k.min() - eps,
        1.0 / eps - k.max(),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    Ok(MonitorRecord {
        lower_u_slack: lo - lower,
        upper_u_slack: upper - hi,
        grad_slack: gradient_bound_slack(grid, h)? + MONITOR_TOL,
        band_slack: if band.is_nan() {
            f64::NEG_INFINITY
        } else {
            band
        },
        min_radius: bundle.min_radius(),
    })
}

/// Closed-form solution of `u′ = u(1 − f₀u)`.
pub fn logistic_exact(u0: f64, f0: f64, t: f64) -> f64 {
    let e = t.exp();
    u0 * e / (1.0 + f0 * u0 * (e - 1.0))
}

const ORACLE_TOL: f64 = 1e-12;

/// Integrates `u′ = u(1 − f₀·u^{−n}/φ(u))` to time `t` with an embedded
/// Dormand–Prince 5(4) pair at tolerance `1e−12`.
pub fn cap_ode_oracle(
    u0: f64,
    f0: f64,
    phi: &OrliczFunction,
    n: usize,
    t: f64,
) -> Result<f64, OracleError> {
    if phi.depends_on_xi() {
        return Err(OracleError::DependsOnXi);
    }
    if !(u0 > 0.0 && u0.is_finite()) || !(f0 > 0.0) || !(t >= 0.0) || !(n == 1 || n == 2) {
        return Err(OracleError::InvalidInput(format!(
            "u0 = {u0}, f0 = {f0}, n = {n}, t = {t}"
        )));
    }
    let xi: [f64; 0] = [];
    let rhs = |u: f64| -> Result<f64, OracleError> {
        if !(u > 0.0 && u.is_finite()) {
            return Err(OracleError::LeftDomain { t: f64::NAN, u });
        }
        Ok(u * (1.0 - f0 * u.powi(-(n as i32)) / phi.eval(&xi, u)?))
    };
    dormand_prince(rhs, u0, t, ORACLE_TOL)
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn dormand_prince<F>(rhs: F, u0: f64, t_end: f64, tol: f64) -> Result<f64, OracleError>
where
    F: Fn(f64) -> Result<f64, OracleError>,
{
    let mut t = 0.0;
    let mut u = u0;
    let mut h = (t_end * 1e-3).clamp(1e-8, 1e-2);
    let at = |t: f64, e: OracleError| match e {
        OracleError::LeftDomain { u, .. } => OracleError::LeftDomain { t, u },
        other => other,
    };
    while t < t_end {
        h = h.min(t_end - t);
        if h < 1e-14 * t_end.max(1.0) {
            return Err(OracleError::StepUnderflow(t));
        }
        let mut k = [0.0; 7];
        let mut ok = true;
        for s in 0..7 {
            let mut y = u;
            for (a, kk) in DP_A[s].iter().zip(k.iter()).take(s) {
                y += h * a * kk;
            }
            match rhs(y) {
                Ok(v) => k[s] = v,
                Err(OracleError::LeftDomain { .. }) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(at(t + DP_C[s] * h, e)),
            }
        }
        if !ok {
            h *= 0.25;
            continue;
        }
        let u5 = u + h * (0..7).map(|s| DP_B5[s] * k[s]).sum::<f64>();
        let u4 = u + h * (0..7).map(|s| DP_B4[s] * k[s]).sum::<f64>();
        let sc = tol + tol * u.abs().max(u5.abs());
        let err = (u5 - u4).abs() / sc;
        if err <= 1.0 {
            t += h;
            u = u5;
            if !(u > 0.0 && u.is_finite()) {
                return Err(OracleError::LeftDomain { t, u });
            }
        }
        let fac = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= fac;
    }
    Ok(u)
}
