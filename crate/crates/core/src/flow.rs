//! The scalar capillary Gauss curvature flow
//!
//! ```text
//! ∂_t h = −f·h·K/φ(ξ, h/ℓ) + h   in C_θ,     ∇_μh = cotθ·h   on ∂C_θ,
//! ```
//!
//! its stationary residual `φ(ξ, h/ℓ)·det b − f`, an adaptive time stepper,
//! and the run loop.
//!
//! The stepper is linearly implicit Euler, `(I − Δt·J)δ = Δt·F(h)` with the
//! Jacobian `J = ∂F/∂h` assembled from the same stencil as the curvature,
//! combined with step doubling: one full step and two half steps give an
//! error estimate, and their Richardson combination (second order) is kept.
//! Candidates are accepted only when the estimate is within tolerance, `h`
//! stays positive, `b` stays positive definite, and `J` does not increase
//! beyond the monotonicity tolerance; otherwise `Δt` is halved.

use std::collections::BTreeMap;
use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvature::{self, CurvatureBundle, CurvatureError};
use crate::diagnostics::{self, BarrierLevels, DiagnosticsRow, MonitorBaseline, MonitorRecord};
use crate::expr::{self, EvalError, ParseError, PointEnv};
use crate::grid::{self, CapGrid, GridError, Loc, ScalarField};
use crate::orlicz::{self, ConditionReport, OrliczError, OrliczFunction};
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid configuration: {field}: {message}")]
    InvalidField {
        field: &'static str,
        message: String,
    },
    #[error("invalid initial data: {0}")]
    InvalidInitial(String),
    #[error("f: {0}")]
    ParseF(ParseError),
    #[error("f at node {node}: {source}")]
    EvalF {
        node: usize,
        #[source]
        source: EvalError,
    },
    #[error("f is not positive at node {node} (f = {value})")]
    NonPositiveF { node: usize, value: f64 },
    #[error("h0 mode: {0}")]
    ParseMode(ParseError),
    #[error("h0 mode at node {node}: {source}")]
    EvalMode {
        node: usize,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Curvature(#[from] CurvatureError),
    #[error(transparent)]
    Orlicz(#[from] OrliczError),
    #[error("time step fell below dt_min = {dt_min} at t = {t}: {reason}")]
    Breakdown { t: f64, dt_min: f64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PhiSpec {
    Power { p: f64 },
    Expr { src: String },
}

/// `h0 = scale·ℓ·(1 + amplitude·mode(ξ))`. `mode` is an expression in
/// `x1 … x{n+1}` and `theta`, or `"random"` for a seeded combination of
/// `x_{n+1}²`, `x1·x_{n+1}²` (and `x2·x_{n+1}²` when `n = 2`), each of which
/// has vanishing co-normal derivative on `∂C_θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub mode: Option<String>,
}

fn default_scale() -> f64 {
    1.0
}

impl Default for InitialSpec {
    fn default() -> Self {
        Self {
            scale: 1.0,
            amplitude: 0.0,
            mode: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierSpec {
    #[serde(default = "default_s_lo")]
    pub s_lo: f64,
    #[serde(default = "default_s_hi")]
    pub s_hi: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_s_lo() -> f64 {
    1e-3
}
fn default_s_hi() -> f64 {
    1e3
}
fn default_samples() -> usize {
    16
}

impl Default for BarrierSpec {
    fn default() -> Self {
        Self {
            s_lo: default_s_lo(),
            s_hi: default_s_hi(),
            samples: default_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub theta: f64,
    pub n: usize,
    pub n_rho: usize,
    pub n_phi: usize,
    pub phi: PhiSpec,
    pub f: String,
    pub h0: InitialSpec,
    pub t_max: f64,
    pub tol_residual: f64,
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub safety: f64,
    /// Per-step tolerance on the step-doubling error estimate.
    pub step_tol: f64,
    /// Stop with status horizon after this many accepted steps.
    pub max_steps: Option<usize>,
    /// A diagnostics row every `cadence` accepted steps.
    pub cadence: usize,
    /// A field snapshot every `snapshot_every` accepted steps (0: final only).
    pub snapshot_every: usize,
    pub monitors: bool,
    pub seed: u64,
    pub barrier: BarrierSpec,
}

impl FlowConfig {
    /// Configuration with the documented defaults for everything but the
    /// problem data.
    pub fn new(theta: f64, n: usize, n_rho: usize, n_phi: usize, phi: PhiSpec, f: &str) -> Self {
        Self {
            theta,
            n,
            n_rho,
            n_phi: if n == 1 { 1 } else { n_phi },
            phi,
            f: f.to_string(),
            h0: InitialSpec::default(),
            t_max: 10.0,
            tol_residual: 1e-6,
            dt_init: 1e-3,
            dt_min: 1e-10,
            dt_max: 0.5,
            safety: 0.9,
            step_tol: 1e-6,
            max_steps: None,
            cadence: 1,
            snapshot_every: 0,
            monitors: true,
            seed: 0,
            barrier: BarrierSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let bad =
            |field: &'static str, message: String| Err(FlowError::InvalidField { field, message });
        if !(self.tol_residual > 0.0) {
            return bad(
                "tol_residual",
                format!("{} must be positive", self.tol_residual),
            );
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad(
                "t_max",
                format!("{} must be positive and finite", self.t_max),
            );
        }
        if !(self.dt_min > 0.0 && self.dt_min < self.dt_init && self.dt_init <= self.dt_max) {
            return bad(
                "dt_init",
                format!(
                    "need 0 < dt_min < dt_init <= dt_max, got {} / {} / {}",
                    self.dt_min, self.dt_init, self.dt_max
                ),
            );
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return bad("safety", format!("{} must lie in (0, 1]", self.safety));
        }
        if !(self.step_tol > 0.0) {
            return bad("step_tol", format!("{} must be positive", self.step_tol));
        }
        if self.cadence == 0 {
            return bad("output.cadence", "must be at least 1".into());
        }
        if !(self.h0.scale > 0.0 && self.h0.scale.is_finite()) {
            return bad("h0.scale", format!("{} must be positive", self.h0.scale));
        }
        if !self.h0.amplitude.is_finite() {
            return bad("h0.amplitude", "must be finite".into());
        }
        let b = &self.barrier;
        if !(b.s_lo > 0.0 && b.s_lo < b.s_hi) || b.samples == 0 {
            return bad(
                "barrier",
                format!(
                    "needs 0 < s_lo < s_hi and samples >= 1, got {} / {} / {}",
                    b.s_lo, b.s_hi, b.samples
                ),
            );
        }
        Ok(())
    }
}

/// Linear map `h ↦ ∇²h` with the Robin ghosts expanded into interior
/// weights: row `i` lists `(m, [c_11, c_12, c_22])`.
#[derive(Debug, Clone)]
pub struct HessianOperator {
    rows: Vec<Vec<(usize, [f64; 3])>>,
}

impl HessianOperator {
    pub fn new(grid: &CapGrid, robin_coeff: f64) -> Self {
        let w = grid.robin_weights(robin_coeff);
        let rows = par::map_nodes(grid.len(), |i| {
            let st = grid.stencil(i);
            let mut row: Vec<(usize, [f64; 3])> = Vec::with_capacity(12);
            let mut add = |m: usize, c: [f64; 3], s: f64| {
                if let Some(e) = row.iter_mut().find(|e| e.0 == m) {
                    for q in 0..3 {
                        e.1[q] += s * c[q];
                    }
                } else {
                    row.push((m, [s * c[0], s * c[1], s * c[2]]));
                }
            };
            for p in 0..st.len {
                match st.locs[p] {
                    Loc::Node(m) => add(m, st.hess[p], 1.0),
                    Loc::Ghost(gi) => {
                        let ray = grid.boundary()[gi].ray;
                        for r in 0..3 {
                            add(ray[r], st.hess[p], w[r]);
                        }
                    }
                }
            }
            row.sort_by_key(|e| e.0);
            row
        });
        Self { rows }
    }

    pub fn row(&self, i: usize) -> &[(usize, [f64; 3])] {
        &self.rows[i]
    }

    pub fn apply(&self, h: &[f64]) -> Vec<[f64; 3]> {
        par::map_nodes(self.rows.len(), |i| {
            let mut out = [0.0; 3];
            for (m, c) in &self.rows[i] {
                for q in 0..3 {
                    out[q] += c[q] * h[*m];
                }
            }
            out
        })
    }
}

/// Problem data shared by every step: grid, `f`, `φ`, `ℓ`.
#[derive(Debug, Clone)]
pub struct FlowProblem {
    pub grid: CapGrid,
    pub f: ScalarField,
    pub phi: OrliczFunction,
    pub ell: ScalarField,
    hess: HessianOperator,
}

pub fn build_phi(spec: &PhiSpec, grid: &CapGrid) -> Result<OrliczFunction, OrliczError> {
    match spec {
        PhiSpec::Power { p } => orlicz::make_power(*p),
        PhiSpec::Expr { src } => orlicz::make_from_expr(src, grid),
    }
}

/// Evaluates `f` at every node; it must be positive.
pub fn build_f(src: &str, grid: &CapGrid) -> Result<ScalarField, FlowError> {
    let e = expr::parse(src).map_err(FlowError::ParseF)?;
    let mut vals = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let env = PointEnv {
            xi: grid.ambient(i),
            theta: grid.theta(),
            s: None,
        };
        let v = expr::evaluate(&e, &env).map_err(|source| FlowError::EvalF { node: i, source })?;
        if !(v > 0.0) {
            return Err(FlowError::NonPositiveF { node: i, value: v });
        }
        vals.push(v);
    }
    Ok(ScalarField::new(vals))
}

impl FlowProblem {
    pub fn new(grid: CapGrid, f: ScalarField, phi: OrliczFunction) -> Result<Self, FlowError> {
        if f.len() != grid.len() {
            return Err(GridError::FieldLength {
                expected: grid.len(),
                got: f.len(),
            }
            .into());
        }
        let ell = grid::ell_field(&grid);
        let t = grid.theta();
        let hess = HessianOperator::new(&grid, t.cos() / t.sin());
        Ok(Self {
            grid,
            f,
            phi,
            ell,
            hess,
        })
    }

    pub fn from_config(cfg: &FlowConfig) -> Result<Self, FlowError> {
        let grid = grid::build_grid(cfg.theta, cfg.n, cfg.n_rho, cfg.n_phi)?;
        let f = build_f(&cfg.f, &grid)?;
        let phi = build_phi(&cfg.phi, &grid)?;
        Self::new(grid, f, phi)
    }

    pub fn hessian_operator(&self) -> &HessianOperator {
        &self.hess
    }

    /// `h0` from its specification; validated for positivity and convexity.
    pub fn initial_h(&self, spec: &InitialSpec, seed: u64) -> Result<ScalarField, FlowError> {
        let g = &self.grid;
        let mode: Vec<f64> = match spec.mode.as_deref() {
            None => vec![0.0; g.len()],
            Some("random") => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let top = g.dim();
                let count = g.dim() + 1;
                let c: Vec<f64> = (0..count).map(|_| rng.random_range(-1.0..1.0)).collect();
                (0..g.len())
                    .map(|i| {
                        let x = g.ambient(i);
                        let z2 = x[top] * x[top];
                        let mut v = c[0] * z2 + c[1] * x[0] * z2;
                        if g.dim() == 2 {
                            v += c[2] * x[1] * z2;
                        }
                        v
                    })
                    .collect()
            }
            Some(src) => {
                let e = expr::parse(src).map_err(FlowError::ParseMode)?;
                let mut vals = Vec::with_capacity(g.len());
                for i in 0..g.len() {
                    let env = PointEnv {
                        xi: g.ambient(i),
                        theta: g.theta(),
                        s: None,
                    };
                    vals.push(
                        expr::evaluate(&e, &env)
                            .map_err(|source| FlowError::EvalMode { node: i, source })?,
                    );
                }
                vals
            }
        };
        let h = ScalarField::new(
            self.ell
                .values()
                .iter()
                .zip(&mode)
                .map(|(l, m)| spec.scale * l * (1.0 + spec.amplitude * m))
                .collect(),
        );
        if let Some(i) = h.values().iter().position(|&v| !(v > 0.0)) {
            return Err(FlowError::InvalidInitial(format!(
                "h0 = {} at node {i} is not positive",
                h.values()[i]
            )));
        }
        let bundle = curvature::curvature_bundle(g, &h)?;
        if let Some((i, r)) = bundle.first_nonconvex() {
            return Err(FlowError::InvalidInitial(format!(
                "h0 is not strictly convex at node {i} (min radius {r})"
            )));
        }
        Ok(h)
    }

    /// Curvature, `φ(ξ, h/ℓ)`, the flow velocity and the stationary
    /// residual at `h`. Fails on non-positive or non-convex `h`.
    pub fn evaluate(&self, h: &ScalarField) -> Result<Evaluation, FlowError> {
        evaluate_with(&self.grid, &self.ell, &self.f, &self.phi, h)
    }

    pub fn condition_report(&self, b: &BarrierSpec) -> ConditionReport {
        orlicz::check_barrier_condition(&self.phi, &self.grid, &self.f, b.s_lo, b.s_hi, b.samples)
    }
}

/// Everything the stepper and the diagnostics need at one state.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub bundle: CurvatureBundle,
    pub phi: Vec<f64>,
    pub velocity: Vec<f64>,
    pub residual: Vec<f64>,
}

fn evaluate_with(
    grid: &CapGrid,
    ell: &ScalarField,
    f: &ScalarField,
    phi: &OrliczFunction,
    h: &ScalarField,
) -> Result<Evaluation, FlowError> {
    let bundle = curvature::curvature_bundle(grid, h)?;
    bundle.require_convex()?;
    let pv: Vec<Result<f64, OrliczError>> = par::map_nodes(grid.len(), |i| {
        phi.eval(grid.ambient(i), h.values()[i] / ell.values()[i])
    });
    let pv = pv.into_iter().collect::<Result<Vec<f64>, _>>()?;
    let hv = h.values();
    let fv = f.values();
    let dv = bundle.detb.values();
    let velocity = (0..grid.len())
        .map(|i| -fv[i] * hv[i] / (dv[i] * pv[i]) + hv[i])
        .collect();
    let residual = (0..grid.len()).map(|i| pv[i] * dv[i] - fv[i]).collect();
    Ok(Evaluation {
        bundle,
        phi: pv,
        velocity,
        residual,
    })
}

/// `−f·h·K/φ(ξ, h/ℓ) + h`.
pub fn rhs(
    grid: &CapGrid,
    h: &ScalarField,
    f: &ScalarField,
    phi: &OrliczFunction,
) -> Result<ScalarField, FlowError> {
    let ell = grid::ell_field(grid);
    Ok(ScalarField::new(
        evaluate_with(grid, &ell, f, phi, h)?.velocity,
    ))
}

#[derive(Debug, Clone)]
pub struct Residual {
    pub field: ScalarField,
    pub max_norm: f64,
    /// `(∫ r²)^{1/2}` by the grid quadrature.
    pub l2_norm: f64,
}

fn residual_norms(grid: &CapGrid, r: Vec<f64>) -> Residual {
    let max_norm = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sq: Vec<f64> = r.iter().map(|v| v * v).collect();
    let l2_norm = grid::integrate_values(grid, &sq).sqrt();
    Residual {
        field: ScalarField::new(r),
        max_norm,
        l2_norm,
    }
}

/// `φ(ξ, h/ℓ)·det b − f` and its norms.
pub fn stationary_residual(
    grid: &CapGrid,
    h: &ScalarField,
    f: &ScalarField,
    phi: &OrliczFunction,
) -> Result<Residual, FlowError> {
    let ell = grid::ell_field(grid);
    let ev = evaluate_with(grid, &ell, f, phi, h)?;
    Ok(residual_norms(grid, ev.residual))
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub h: ScalarField,
    pub eval: Evaluation,
    /// `J` at this state.
    pub j: f64,
    pub dt_last: f64,
    pub rejects: usize,
    pub steps: usize,
}

impl FlowState {
    pub fn bundle(&self) -> &CurvatureBundle {
        &self.eval.bundle
    }
}

/// Why a candidate step was turned down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    ErrorEstimate,
    NonPositive,
    NonConvex,
    FunctionalIncrease,
    SingularSystem,
}

pub const J_TOLERANCE: f64 = 1e-8;

/// Sparse Jacobian pattern with its symbolic LU, fixed for a problem.
struct JacobianPattern {
    n: usize,
    /// Column indices per row (sorted, diagonal included).
    cols: Vec<Vec<usize>>,
    symbolic: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    lu: SymbolicLu<usize>,
}

impl JacobianPattern {
    fn new(op: &HessianOperator, n: usize) -> Result<Self, FlowError> {
        let mut cols = Vec::with_capacity(n);
        let mut pairs = Vec::new();
        for i in 0..n {
            let mut c: Vec<usize> = op.row(i).iter().map(|e| e.0).collect();
            if !c.contains(&i) {
                c.push(i);
            }
            c.sort_unstable();
            for &m in &c {
                pairs.push(Pair { row: i, col: m });
            }
            cols.push(c);
        }
        let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(n, n, &pairs)
            .map_err(|e| FlowError::InvalidConfig(format!("jacobian pattern: {e:?}")))?;
        let lu = SymbolicLu::try_new(symbolic.as_ref())
            .map_err(|e| FlowError::InvalidConfig(format!("symbolic factorization: {e:?}")))?;
        Ok(Self {
            n,
            cols,
            symbolic,
            argsort,
            lu,
        })
    }
}

/// Jacobian values in pattern order (row by row).
fn jacobian_values(
    p: &FlowProblem,
    pat: &JacobianPattern,
    h: &ScalarField,
    ev: &Evaluation,
) -> Result<Vec<f64>, FlowError> {
    let g = &p.grid;
    let dim = g.dim();
    let rows: Vec<Result<Vec<f64>, OrliczError>> = par::map_nodes(pat.n, |i| {
        let hi = h.values()[i];
        let li = p.ell.values()[i];
        let fi = p.f.values()[i];
        let b = ev.bundle.b.get(i);
        let d = ev.bundle.detb.values()[i];
        let ph = ev.phi[i];
        let psi = 1.0 / ph;
        let dpsi = -p.phi.deriv_s(g.ambient(i), hi / li)? / (ph * ph);
        let diag = psi / d + hi * dpsi / (li * d);
        let coef = hi * psi / (d * d);
        let op = p.hess.row(i);
        let mut out = Vec::with_capacity(pat.cols[i].len());
        for &m in &pat.cols[i] {
            let mut db = op
                .iter()
                .find(|e| e.0 == m)
                .map(|e| e.1)
                .unwrap_or([0.0; 3]);
            let delta = if m == i { 1.0 } else { 0.0 };
            db[0] += delta;
            db[2] += delta;
            let dd = if dim == 1 {
                db[0]
            } else {
                b[2] * db[0] + b[0] * db[2] - 2.0 * b[1] * db[1]
            };
            out.push(-fi * (delta * diag - coef * dd) + delta);
        }
        Ok(out)
    });
    let mut vals = Vec::new();
    for r in rows {
        vals.extend(r?);
    }
    Ok(vals)
}

struct Factorization {
    lu: Lu<usize, f64>,
}

impl Factorization {
    /// LU of `I − γ·J`.
    fn new(pat: &JacobianPattern, jac: &[f64], gamma: f64) -> Option<Self> {
        let mut vals = Vec::with_capacity(jac.len());
        let mut k = 0;
        for (i, cols) in pat.cols.iter().enumerate() {
            for &m in cols {
                let id = if m == i { 1.0 } else { 0.0 };
                vals.push(id - gamma * jac[k]);
                k += 1;
            }
        }
        let mat = SparseColMat::new_from_argsort(pat.symbolic.clone(), &pat.argsort, &vals).ok()?;
        let lu = Lu::try_new_with_symbolic(pat.lu.clone(), mat.as_ref()).ok()?;
        Some(Self { lu })
    }

    fn solve(&self, rhs: &[f64]) -> Option<Vec<f64>> {
        let mut x = Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        self.lu.solve_in_place(x.as_mut());
        let out: Vec<f64> = (0..rhs.len()).map(|i| x[(i, 0)]).collect();
        out.iter().all(|v| v.is_finite()).then_some(out)
    }
}

/// Adaptive stepper; keeps the proposed step size and the counters between
/// calls.
pub struct Stepper<'a> {
    problem: &'a FlowProblem,
    pattern: JacobianPattern,
    dt: f64,
    dt_min: f64,
    dt_max: f64,
    safety: f64,
    step_tol: f64,
    pub warnings: Vec<String>,
    pub reject_log: Vec<(f64, RejectReason)>,
    /// Accepted increases of `J` within tolerance (discretization noise).
    pub small_j_increases: usize,
}

impl<'a> Stepper<'a> {
    pub fn new(problem: &'a FlowProblem, cfg: &FlowConfig) -> Result<Self, FlowError> {
        Ok(Self {
            pattern: JacobianPattern::new(&problem.hess, problem.grid.len())?,
            problem,
            dt: cfg.dt_init,
            dt_min: cfg.dt_min,
            dt_max: cfg.dt_max,
            safety: cfg.safety,
            step_tol: cfg.step_tol,
            warnings: Vec::new(),
            reject_log: Vec::new(),
            small_j_increases: 0,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn initial_state(&self, h: ScalarField) -> Result<FlowState, FlowError> {
        let eval = self.problem.evaluate(&h)?;
        let j = self.functional(&h, &eval)?;
        Ok(FlowState {
            t: 0.0,
            h,
            eval,
            j,
            dt_last: 0.0,
            rejects: 0,
            steps: 0,
        })
    }

    fn functional(&self, h: &ScalarField, ev: &Evaluation) -> Result<f64, FlowError> {
        let p = self.problem;
        Ok(diagnostics::functional_j_from(
            &p.grid, &p.ell, h, &p.f, &p.phi, &ev.bundle,
        )?)
    }

    /// One accepted step, never past `t_end`.
    pub fn step(&mut self, state: &FlowState, t_end: f64) -> Result<FlowState, FlowError> {
        let p = self.problem;
        let h0 = state.h.values();
        let f0 = &state.eval.velocity;
        let jac = jacobian_values(p, &self.pattern, &state.h, &state.eval)?;
        let mut rejects = 0;
        loop {
            let remaining = t_end - state.t;
            let clamped = self.dt >= remaining;
            let dt = if clamped { remaining } else { self.dt };
            let reject = |me: &mut Self, why: RejectReason| -> Result<(), FlowError> {
                me.reject_log.push((state.t, why));
                if me.dt * 0.5 < me.dt_min {
                    return Err(FlowError::Breakdown {
                        t: state.t,
                        dt_min: me.dt_min,
                        reason: format!("{why:?}"),
                    });
                }
                me.dt = dt.min(me.dt) * 0.5;
                Ok(())
            };

            let (Some(full), Some(half)) = (
                Factorization::new(&self.pattern, &jac, dt),
                Factorization::new(&self.pattern, &jac, 0.5 * dt),
            ) else {
                rejects += 1;
                reject(self, RejectReason::SingularSystem)?;
                continue;
            };
            let scaled = |v: &[f64], c: f64| v.iter().map(|x| c * x).collect::<Vec<_>>();
            let add =
                |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();

            let Some(d1) = full.solve(&scaled(f0, dt)) else {
                rejects += 1;
                reject(self, RejectReason::SingularSystem)?;
                continue;
            };
            let y1 = add(h0, &d1);
            let Some(da) = half.solve(&scaled(f0, 0.5 * dt)) else {
                rejects += 1;
                reject(self, RejectReason::SingularSystem)?;
                continue;
            };
            let ya = ScalarField::new(add(h0, &da));
            let mid = match p.evaluate(&ya) {
                Ok(ev) => ev,
                Err(FlowError::Curvature(CurvatureError::NonPositive { .. })) => {
                    rejects += 1;
                    reject(self, RejectReason::NonPositive)?;
                    continue;
                }
                Err(FlowError::Curvature(CurvatureError::NonConvex { .. })) => {
                    rejects += 1;
                    reject(self, RejectReason::NonConvex)?;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let Some(db) = half.solve(&scaled(&mid.velocity, 0.5 * dt)) else {
                rejects += 1;
                reject(self, RejectReason::SingularSystem)?;
                continue;
            };
            let yb = add(ya.values(), &db);
            let err = yb
                .iter()
                .zip(&y1)
                .map(|(b, a)| (b - a).abs() / (1.0 + b.abs()))
                .fold(0.0f64, f64::max);
            let limit = self.safety * self.step_tol;
            if !(err <= limit) {
                rejects += 1;
                reject(self, RejectReason::ErrorEstimate)?;
                continue;
            }
            let y: Vec<f64> = yb.iter().zip(&y1).map(|(b, a)| 2.0 * b - a).collect();
            if y.iter().any(|v| !(*v > 0.0)) {
                rejects += 1;
                reject(self, RejectReason::NonPositive)?;
                continue;
            }
            let h_new = ScalarField::new(y);
            let ev = match p.evaluate(&h_new) {
                Ok(ev) => ev,
                Err(FlowError::Curvature(CurvatureError::NonConvex { .. })) => {
                    rejects += 1;
                    reject(self, RejectReason::NonConvex)?;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let j = self.functional(&h_new, &ev)?;
            let allowance = J_TOLERANCE * (1.0 + state.j.abs());
            if j > state.j + allowance {
                if self.dt * 0.5 >= self.dt_min {
                    rejects += 1;
                    reject(self, RejectReason::FunctionalIncrease)?;
                    continue;
                }
                self.warnings.push(format!(
                    "J increased by {:.3e} at t = {:.6} with dt at its minimum",
                    j - state.j,
                    state.t + dt
                ));
            } else if j > state.j {
                self.small_j_increases += 1;
            }

            let fac = if err == 0.0 {
                2.0
            } else {
                (limit / err).sqrt().clamp(0.2, 2.0)
            };
            let proposed = (dt * fac).min(self.dt_max);
            self.dt = if clamped {
                self.dt.max(proposed)
            } else {
                proposed
            };
            return Ok(FlowState {
                t: if clamped { t_end } else { state.t + dt },
                h: h_new,
                eval: ev,
                j,
                dt_last: dt,
                rejects: state.rejects + rejects,
                steps: state.steps + 1,
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Converged,
    Horizon,
    /// Horizon reached with the residual stalled while `J` still decreases.
    Oscillating,
    Breakdown,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::Horizon => "horizon",
            RunStatus::Oscillating => "oscillating",
            RunStatus::Breakdown => "breakdown",
        }
    }
}

/// Per accepted step, for the monotonicity and dissipation checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub dt: f64,
    pub j: f64,
    pub dissipation: f64,
    pub residual_inf: f64,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub step: usize,
    pub t: f64,
    pub h: ScalarField,
    pub gauss_k: ScalarField,
    pub residual: ScalarField,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub status: RunStatus,
    pub t_final: f64,
    pub steps: usize,
    pub rejects: usize,
    pub reject_reasons: BTreeMap<RejectReason, usize>,
    /// Accepted steps on which `J` rose, but within tolerance.
    pub small_j_increases: usize,
    pub rows: Vec<DiagnosticsRow>,
    pub monitors: Vec<MonitorRecord>,
    pub baseline: MonitorBaseline,
    pub history: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
    pub condition: ConditionReport,
    pub warnings: Vec<String>,
    pub residual_inf: f64,
    pub residual_l2: f64,
    pub final_h: ScalarField,
    pub breakdown: Option<String>,
    pub wall_time: f64,
}

/// Builds the diagnostics row of `state`; `prev` is the previously
/// accepted state (for the finite-difference `dJ/dt`).
pub fn diagnostics_row(
    p: &FlowProblem,
    state: &FlowState,
    prev: Option<(f64, f64)>,
) -> Result<DiagnosticsRow, FlowError> {
    let g = &p.grid;
    let b = state.bundle();
    let (min_u, max_u) = diagnostics::u_range(&p.ell, &state.h);
    let dissipation = diagnostics::dissipation_from(g, &p.ell, &state.h, &p.f, &p.phi, b)?;
    let residual_inf = state
        .eval
        .residual
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let djdt = match prev {
        Some((t0, j0)) if state.t > t0 => (state.j - j0) / (state.t - t0),
        _ => f64::NAN,
    };
    Ok(DiagnosticsRow {
        t: state.t,
        dt: state.dt_last,
        j: state.j,
        v: diagnostics::volume_from(g, &state.h, b),
        djdt_numeric: djdt,
        dissipation,
        min_h: state.h.min(),
        max_h: state.h.max(),
        min_u,
        max_u,
        min_k: b.gauss_k.min(),
        max_k: b.gauss_k.max(),
        min_radius: b.min_radius(),
        max_radius: b.max_radius(),
        grad_bound_slack: diagnostics::gradient_bound_slack(g, &state.h)?,
        residual_inf,
        boundary_robin_defect: diagnostics::boundary_robin_defect(g, &state.h),
    })
}

/// Fraction of the horizon inspected for a stalled residual.
const STALL_WINDOW: f64 = 0.2;
/// The residual counts as flat when it stays within this factor (either
/// way) over the window.
const STALL_FACTOR: f64 = 0.9;

fn stalled(history: &[StepRecord], t_final: f64) -> bool {
    let Some(last) = history.last() else {
        return false;
    };
    let t0 = t_final * (1.0 - STALL_WINDOW);
    let Some(first) = history.iter().find(|r| r.t >= t0) else {
        return false;
    };
    let ratio = last.residual_inf / first.residual_inf;
    ratio > STALL_FACTOR && ratio < 1.0 / STALL_FACTOR && last.j < first.j
}

fn snapshot(state: &FlowState) -> Snapshot {
    Snapshot {
        step: state.steps,
        t: state.t,
        h: state.h.clone(),
        gauss_k: state.bundle().gauss_k.clone(),
        residual: ScalarField::new(state.eval.residual.clone()),
    }
}

/// Runs the flow from the configured initial data until the residual drops
/// below `tol_residual`, the horizon `t_max`, or a breakdown.
pub fn run(cfg: &FlowConfig) -> Result<RunReport, FlowError> {
    cfg.validate()?;
    let problem = FlowProblem::from_config(cfg)?;
    let h0 = problem.initial_h(&cfg.h0, cfg.seed)?;
    run_problem(&problem, h0, cfg)
}

pub fn run_problem(
    problem: &FlowProblem,
    h0: ScalarField,
    cfg: &FlowConfig,
) -> Result<RunReport, FlowError> {
    cfg.validate()?;
    let clock = Instant::now();
    let g = &problem.grid;
    let condition = problem.condition_report(&cfg.barrier);
    let mut warnings = Vec::new();
    if !condition.passes {
        warnings.push(format!(
            "barrier condition fails on the sampled range (margin_low = {:.3e}, margin_high = {:.3e}); no convergence guarantee",
            condition.margin_low, condition.margin_high
        ));
    }
    let levels = if cfg.monitors {
        diagnostics::barrier_levels(g, &problem.f, &problem.phi)
    } else {
        BarrierLevels {
            s_minus: None,
            s_plus: None,
        }
    };

    let mut stepper = Stepper::new(problem, cfg)?;
    let mut state = stepper.initial_state(h0)?;
    let baseline = MonitorBaseline::new(g, &problem.ell, &state.h, state.bundle(), levels);
    let dissip = |s: &FlowState| {
        diagnostics::dissipation_from(g, &problem.ell, &s.h, &problem.f, &problem.phi, s.bundle())
    };
    let res_inf = |s: &FlowState| s.eval.residual.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut history = vec![StepRecord {
        t: 0.0,
        dt: 0.0,
        j: state.j,
        dissipation: dissip(&state)?,
        residual_inf: res_inf(&state),
    }];
    let mut rows = Vec::new();
    let mut monitors = Vec::new();
    let mut snapshots = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    let mut breakdown = None;
    let record = |state: &FlowState,
                  prev: Option<(f64, f64)>,
                  rows: &mut Vec<DiagnosticsRow>,
                  monitors: &mut Vec<MonitorRecord>|
     -> Result<(), FlowError> {
        rows.push(diagnostics_row(problem, state, prev)?);
        if cfg.monitors {
            monitors.push(diagnostics::bound_monitors(
                g,
                &problem.ell,
                &state.h,
                state.bundle(),
                &baseline,
            )?);
        }
        Ok(())
    };

    let status = loop {
        if res_inf(&state) <= cfg.tol_residual {
            break RunStatus::Converged;
        }
        if state.t >= cfg.t_max || cfg.max_steps.is_some_and(|m| state.steps >= m) {
            break if stalled(&history, state.t) {
                RunStatus::Oscillating
            } else {
                RunStatus::Horizon
            };
        }
        let next = match stepper.step(&state, cfg.t_max) {
            Ok(s) => s,
            Err(FlowError::Breakdown { t, dt_min, reason }) => {
                breakdown = Some(format!("dt below {dt_min} at t = {t} ({reason})"));
                break RunStatus::Breakdown;
            }
            Err(e) => return Err(e),
        };
        prev = Some((state.t, state.j));
        state = next;
        history.push(StepRecord {
            t: state.t,
            dt: state.dt_last,
            j: state.j,
            dissipation: dissip(&state)?,
            residual_inf: res_inf(&state),
        });
        if state.steps % cfg.cadence == 0 {
            record(&state, prev, &mut rows, &mut monitors)?;
        }
        if cfg.snapshot_every > 0 && state.steps % cfg.snapshot_every == 0 {
            snapshots.push(snapshot(&state));
        }
    };
    if rows.is_empty() || state.steps % cfg.cadence != 0 {
        record(&state, prev, &mut rows, &mut monitors)?;
    }
    if snapshots.last().map(|s| s.step) != Some(state.steps) {
        snapshots.push(snapshot(&state));
    }
    warnings.append(&mut stepper.warnings);
    let mut reject_reasons = BTreeMap::new();
    for (_, why) in &stepper.reject_log {
        *reject_reasons.entry(*why).or_insert(0) += 1;
    }
    let residual = residual_norms(g, state.eval.residual.clone());
    Ok(RunReport {
        status,
        t_final: state.t,
        steps: state.steps,
        rejects: state.rejects,
        reject_reasons,
        small_j_increases: stepper.small_j_increases,
        rows,
        monitors,
        baseline,
        history,
        snapshots,
        condition,
        warnings,
        residual_inf: residual.max_norm,
        residual_l2: residual.l2_norm,
        final_h: state.h,
        breakdown,
        wall_time: clock.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, ell_field};
    use crate::orlicz::make_power;
    use std::f64::consts::{FRAC_PI_3, FRAC_PI_4};

    fn problem(theta: f64, n: usize, nr: usize, np: usize, p: f64, f: &str) -> FlowProblem {
        let g = build_grid(theta, n, nr, np).unwrap();
        let f = build_f(f, &g).unwrap();
        FlowProblem::new(g, f, make_power(p).unwrap()).unwrap()
    }

    #[test]
    fn rhs_examples() {
        let p = problem(FRAC_PI_3, 2, 32, 64, 3.0, "1");
        let v = rhs(&p.grid, &p.ell, &p.f, &p.phi).unwrap();
        assert!(v.values().iter().all(|x| x.abs() < 1e-3));

        let p = problem(FRAC_PI_4, 1, 200, 1, 3.0, "1");
        let h = p.ell.scaled(0.5);
        let v = rhs(&p.grid, &h, &p.f, &p.phi).unwrap();
        for (a, l) in v.values().iter().zip(p.ell.values()) {
            assert!((a - 0.25 * l).abs() < 1e-4);
        }

        // matched cap: f = φ(r)·r^n with r = 2, p = 2, n = 2
        let r: f64 = 2.0;
        let p = problem(
            FRAC_PI_3,
            2,
            32,
            64,
            2.0,
            &format!("{}", r.powf(-1.0) * r * r),
        );
        let v = rhs(&p.grid, &p.ell.scaled(r), &p.f, &p.phi).unwrap();
        assert!(v.values().iter().all(|x| x.abs() < 2e-3));
    }

    #[test]
    fn residual_examples() {
        let p = problem(FRAC_PI_3, 2, 32, 64, 1.0, "2");
        let r = stationary_residual(&p.grid, &p.ell, &p.f, &p.phi).unwrap();
        assert!(r.field.values().iter().all(|v| (v + 1.0).abs() < 1e-3));
        // h = rℓ, φ = s^{1−p}, f = r^{n+1−p}
        let p = problem(FRAC_PI_3, 2, 32, 64, 1.5, &format!("{}", 0.7f64.powf(1.5)));
        let r = stationary_residual(&p.grid, &p.ell.scaled(0.7), &p.f, &p.phi).unwrap();
        assert!(r.max_norm < 1e-3);
    }

    #[test]
    fn hessian_operator_matches_ghost_stencil() {
        use rand::{Rng, SeedableRng};
        for (n, np) in [(1, 1), (2, 16)] {
            let g = build_grid(0.9, n, 16, np).unwrap();
            let t = g.theta();
            let op = HessianOperator::new(&g, t.cos() / t.sin());
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let h = ScalarField::new((0..g.len()).map(|_| rng.random_range(0.5..1.5)).collect());
            let a = op.apply(h.values());
            let b = grid::covariant_hessian(&g, &curvature::robin_filled(&g, &h)).unwrap();
            for i in 0..g.len() {
                for q in 0..3 {
                    assert!((a[i][q] - b.get(i)[q]).abs() < 1e-12 * (1.0 + a[i][q].abs()));
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = problem(0.9, 2, 10, 12, 3.0, "1 + 0.3*x3");
        let h = p
            .initial_h(
                &InitialSpec {
                    scale: 0.8,
                    amplitude: 0.2,
                    mode: Some("random".into()),
                },
                5,
            )
            .unwrap();
        let ev = p.evaluate(&h).unwrap();
        let pat = JacobianPattern::new(&p.hess, p.grid.len()).unwrap();
        let jac = jacobian_values(&p, &pat, &h, &ev).unwrap();
        let eps = 1e-6;
        let mut k = 0;
        for i in 0..p.grid.len() {
            for &m in &pat.cols[i] {
                let at = |d: f64| {
                    let mut hv = h.values().to_vec();
                    hv[m] += d;
                    p.evaluate(&ScalarField::new(hv)).unwrap().velocity[i]
                };
                // fourth-order central difference; the apex rows are stiff
                let fd =
                    (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
                assert!(
                    (fd - jac[k]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "row {i} col {m}: {fd} vs {}",
                    jac[k]
                );
                k += 1;
            }
        }
    }

    #[test]
    fn one_step_tracks_logistic() {
        let mut cfg = FlowConfig::new(FRAC_PI_4, 1, 200, 1, PhiSpec::Power { p: 3.0 }, "1");
        cfg.dt_init = 0.01;
        let p = FlowProblem::from_config(&cfg).unwrap();
        let mut st = Stepper::new(&p, &cfg).unwrap();
        let s0 = st.initial_state(p.ell.scaled(0.5)).unwrap();
        let s1 = st.step(&s0, 1.0).unwrap();
        let exact = diagnostics::logistic_exact(0.5, 1.0, s1.t);
        let u = diagnostics::u_range(&p.ell, &s1.h);
        assert!(
            (u.0 - exact).abs() < 1e-6 && (u.1 - exact).abs() < 1e-6,
            "{u:?} vs {exact}"
        );
    }

    #[test]
    fn huge_first_step_is_rejected() {
        let mut cfg = FlowConfig::new(FRAC_PI_3, 2, 16, 32, PhiSpec::Power { p: 2.0 }, "1");
        cfg.dt_init = 0.5;
        cfg.dt_max = 0.5;
        cfg.step_tol = 1e-8;
        cfg.h0 = InitialSpec {
            scale: 1.0,
            amplitude: 0.3,
            mode: Some("random".into()),
        };
        let p = FlowProblem::from_config(&cfg).unwrap();
        let h0 = p.initial_h(&cfg.h0, 1).unwrap();
        let mut st = Stepper::new(&p, &cfg).unwrap();
        let s0 = st.initial_state(h0).unwrap();
        let s1 = st.step(&s0, 10.0).unwrap();
        assert!(s1.rejects > 0);
        assert!(s1.dt_last < 0.5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = FlowConfig::new(FRAC_PI_3, 2, 16, 32, PhiSpec::Power { p: 2.0 }, "1");
        assert!(cfg.validate().is_ok());
        cfg.dt_min = 1.0;
        assert!(matches!(
            cfg.validate(),
            Err(FlowError::InvalidField { .. })
        ));
        let cfg = FlowConfig::new(FRAC_PI_3, 2, 16, 32, PhiSpec::Power { p: 2.0 }, "x3 - 1");
        assert!(matches!(
            FlowProblem::from_config(&cfg),
            Err(FlowError::NonPositiveF { .. })
        ));
    }

    #[test]
    fn ell_is_the_unit_stationary_cap() {
        let g = build_grid(FRAC_PI_3, 2, 16, 32).unwrap();
        let f = ScalarField::constant(&g, 1.0);
        let r = stationary_residual(&g, &ell_field(&g), &f, &make_power(3.0).unwrap()).unwrap();
        assert!(r.max_norm < 2e-3);
    }
}
