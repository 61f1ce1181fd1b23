//! The Orlicz weight `φ(ξ, s)`, its `s`-derivative, the primitive
//! `Φ(ξ, t) = ∫₀ᵗ 1/φ(ξ, s) ds`, and the finite-sample barrier check.

use thiserror::Error;

use crate::expr::{self, EvalError, Expr, ParseError, PointEnv};
use crate::grid::{CapGrid, ScalarField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrliczError {
    #[error("power exponent p = 0 has no primitive vanishing at 0")]
    ZeroExponent,
    #[error("non-finite power exponent {0}")]
    NonFiniteExponent(f64),
    #[error("phi expression: {0}")]
    Parse(#[from] ParseError),
    #[error("phi evaluation at s = {s}: {source}")]
    Eval {
        s: f64,
        #[source]
        source: EvalError,
    },
    #[error("phi = {value} is not positive at xi = {xi:?}, s = {s}")]
    NonPositive { xi: Vec<f64>, s: f64, value: f64 },
    #[error("phi argument s = {0} is not positive")]
    NonPositiveArgument(f64),
    #[error("primitive quadrature did not converge on [0, {0}]")]
    Quadrature(f64),
}

#[derive(Debug, Clone)]
pub enum PhiKind {
    Power { p: f64 },
    Expr { src: String, expr: Expr },
}

#[derive(Debug, Clone)]
pub struct OrliczFunction {
    kind: PhiKind,
    theta: f64,
}

/// Log-spaced positivity sampling range for expression weights.
const SAMPLE_S_MIN: f64 = 1e-4;
const SAMPLE_S_MAX: f64 = 1e4;
const SAMPLE_S_COUNT: usize = 33;

const PRIMITIVE_RTOL: f64 = 1e-10;

pub fn make_power(p: f64) -> Result<OrliczFunction, OrliczError> {
    if !p.is_finite() {
        return Err(OrliczError::NonFiniteExponent(p));
    }
    if p == 0.0 {
        return Err(OrliczError::ZeroExponent);
    }
    Ok(OrliczFunction {
        kind: PhiKind::Power { p },
        theta: f64::NAN,
    })
}

/// Parses `src` and checks `φ > 0` at every grid node for log-spaced
/// `s ∈ [1e−4, 1e4]`.
pub fn make_from_expr(src: &str, grid: &CapGrid) -> Result<OrliczFunction, OrliczError> {
    let expr = expr::parse(src)?;
    let phi = OrliczFunction {
        kind: PhiKind::Expr {
            src: src.to_string(),
            expr,
        },
        theta: grid.theta(),
    };
    let ratio = (SAMPLE_S_MAX / SAMPLE_S_MIN).ln();
    let ss: Vec<f64> = (0..SAMPLE_S_COUNT)
        .map(|m| SAMPLE_S_MIN * (ratio * m as f64 / (SAMPLE_S_COUNT - 1) as f64).exp())
        .collect();
    let nodes = if phi.depends_on_xi() { grid.len() } else { 1 };
    for i in 0..nodes {
        for &s in &ss {
            match phi.eval(grid.ambient(i), s) {
                // overflow at the ends of the range is not a sign violation
                Err(OrliczError::Eval {
                    source: EvalError::NonFinite { .. },
                    ..
                }) => {}
                other => {
                    other?;
                }
            }
        }
    }
    Ok(phi)
}

impl OrliczFunction {
    pub fn kind(&self) -> &PhiKind {
        &self.kind
    }

    pub fn power_exponent(&self) -> Option<f64> {
        match self.kind {
            PhiKind::Power { p } => Some(p),
            PhiKind::Expr { .. } => None,
        }
    }

    /// True if the expression mentions any coordinate `x1, x2, …`.
    pub fn depends_on_xi(&self) -> bool {
        match &self.kind {
            PhiKind::Power { .. } => false,
            PhiKind::Expr { expr, .. } => expr.variables().iter().any(|v| {
                v.strip_prefix('x')
                    .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            }),
        }
    }

    fn raw(&self, xi: &[f64], s: f64) -> Result<f64, OrliczError> {
        match &self.kind {
            PhiKind::Power { p } => Ok(s.powf(1.0 - p)),
            PhiKind::Expr { expr, .. } => {
                let env = PointEnv {
                    xi,
                    theta: self.theta,
                    s: Some(s),
                };
                expr::evaluate(expr, &env).map_err(|source| OrliczError::Eval { s, source })
            }
        }
    }

    /// `φ(ξ, s)`; fails for `s ≤ 0` or a non-positive value.
    pub fn eval(&self, xi: &[f64], s: f64) -> Result<f64, OrliczError> {
        if !(s > 0.0) {
            return Err(OrliczError::NonPositiveArgument(s));
        }
        let v = self.raw(xi, s)?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(OrliczError::NonPositive {
                xi: xi.to_vec(),
                s,
                value: v,
            })
        }
    }

    /// `ψ = 1/φ`.
    pub fn reciprocal(&self, xi: &[f64], s: f64) -> Result<f64, OrliczError> {
        Ok(1.0 / self.eval(xi, s)?)
    }

    /// `∂_s φ(ξ, s)`: analytic for the power kind, central difference otherwise.
    pub fn deriv_s(&self, xi: &[f64], s: f64) -> Result<f64, OrliczError> {
        match self.kind {
            PhiKind::Power { p } => {
                if !(s > 0.0) {
                    return Err(OrliczError::NonPositiveArgument(s));
                }
                Ok((1.0 - p) * s.powf(-p))
            }
            PhiKind::Expr { .. } => self.deriv_s_fd(xi, s),
        }
    }

    /// Central difference with step `1e−6·max(1, s)`, kept inside `(0, ∞)`.
    pub fn deriv_s_fd(&self, xi: &[f64], s: f64) -> Result<f64, OrliczError> {
        let d = (1e-6 * s.max(1.0)).min(0.5 * s);
        Ok((self.eval(xi, s + d)? - self.eval(xi, s - d)?) / (2.0 * d))
    }

    /// `Φ(ξ, t)`: `t^p/p` for the power kind, adaptive quadrature otherwise.
    pub fn primitive(&self, xi: &[f64], t: f64) -> Result<f64, OrliczError> {
        match self.kind {
            PhiKind::Power { p } => {
                if t < 0.0 {
                    return Err(OrliczError::NonPositiveArgument(t));
                }
                Ok(t.powf(p) / p)
            }
            PhiKind::Expr { .. } => self.primitive_quadrature(xi, t),
        }
    }

    /// Adaptive Simpson on `[t·1e−14, t]` to relative `1e−10`. Available for
    /// every kind so the two paths can be compared.
    pub fn primitive_quadrature(&self, xi: &[f64], t: f64) -> Result<f64, OrliczError> {
        if t < 0.0 {
            return Err(OrliczError::NonPositiveArgument(t));
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        let g = |s: f64| self.reciprocal(xi, s);
        adaptive_simpson(&g, t * 1e-14, t, PRIMITIVE_RTOL).ok_or(OrliczError::Quadrature(t))?
    }
}

fn adaptive_simpson<F>(g: &F, a: f64, b: f64, rtol: f64) -> Option<Result<f64, OrliczError>>
where
    F: Fn(f64) -> Result<f64, OrliczError>,
{
    struct Ctx<'a, F> {
        g: &'a F,
        err: Option<OrliczError>,
        evals: usize,
    }
    fn call<F: Fn(f64) -> Result<f64, OrliczError>>(c: &mut Ctx<'_, F>, x: f64) -> f64 {
        c.evals += 1;
        match (c.g)(x) {
            Ok(v) => v,
            Err(e) => {
                c.err.get_or_insert(e);
                f64::NAN
            }
        }
    }
    #[allow(clippy::too_many_arguments)]
    fn rec<F: Fn(f64) -> Result<f64, OrliczError>>(
        c: &mut Ctx<'_, F>,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Option<f64> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = call(c, lm);
        let frm = call(c, rm);
        if c.err.is_some() {
            return Some(f64::NAN);
        }
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if delta.abs() <= 15.0 * tol {
            return Some(left + right + delta / 15.0);
        }
        if depth == 0 || c.evals > 2_000_000 {
            return None;
        }
        Some(
            rec(c, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
                + rec(c, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?,
        )
    }

    let mut c = Ctx {
        g,
        err: None,
        evals: 0,
    };
    let fa = call(&mut c, a);
    let fm = call(&mut c, 0.5 * (a + b));
    let fb = call(&mut c, b);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    // a coarse pass fixes the absolute tolerance from the integral's size
    let coarse = rec(&mut c, a, b, fa, fm, fb, whole, whole.abs() * 1e-4, 40)?;
    if let Some(e) = c.err.take() {
        return Some(Err(e));
    }
    let tol = (coarse.abs() * rtol).max(f64::MIN_POSITIVE);
    let v = rec(&mut c, a, b, fa, fm, fb, whole, tol, 60)?;
    Some(match c.err {
        Some(e) => Err(e),
        None => Ok(v),
    })
}

/// Finite-sample stand-in for the barrier condition
/// `limsup_{s→∞} φs^n < f < liminf_{s→0⁺} φs^n`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ConditionReport {
    pub passes: bool,
    /// `min φ(ξ,s)s^n − max f` over the low band.
    pub margin_low: f64,
    /// `min f − max φ(ξ,s)s^n` over the high band.
    pub margin_high: f64,
    pub low_band: [f64; 2],
    pub high_band: [f64; 2],
    pub samples: usize,
    pub nodes: usize,
}

fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lo];
    }
    let r = (hi / lo).ln();
    (0..count)
        .map(|m| lo * (r * m as f64 / (count - 1) as f64).exp())
        .collect()
}

/// `φ(ξ, s)s^n` at node `i`; evaluation failures count as `NaN`.
fn barrier_product(phi: &OrliczFunction, grid: &CapGrid, i: usize, s: f64) -> f64 {
    phi.eval(grid.ambient(i), s)
        .map(|v| v * s.powi(grid.dim() as i32))
        .unwrap_or(f64::NAN)
}

/// Samples `φs^n` on `samples` log-spaced values in `[s_lo/100, s_lo]` and
/// `[s_hi, 100·s_hi]` at every node. A `NaN` product fails the check.
pub fn check_barrier_condition(
    phi: &OrliczFunction,
    grid: &CapGrid,
    f: &ScalarField,
    s_lo: f64,
    s_hi: f64,
    samples: usize,
) -> ConditionReport {
    let low = log_spaced(s_lo / 100.0, s_lo, samples);
    let high = log_spaced(s_hi, 100.0 * s_hi, samples);
    let mut low_min = f64::INFINITY;
    let mut high_max = f64::NEG_INFINITY;
    let mut poisoned = false;
    for i in 0..grid.len() {
        for &s in &low {
            let v = barrier_product(phi, grid, i, s);
            poisoned |= v.is_nan();
            low_min = low_min.min(v);
        }
        for &s in &high {
            let v = barrier_product(phi, grid, i, s);
            poisoned |= v.is_nan();
            high_max = high_max.max(v);
        }
    }
    let margin_low = low_min - f.max();
    let margin_high = f.min() - high_max;
    ConditionReport {
        passes: !poisoned && margin_low > 0.0 && margin_high > 0.0,
        margin_low,
        margin_high,
        low_band: [s_lo / 100.0, s_lo],
        high_band: [s_hi, 100.0 * s_hi],
        samples,
        nodes: grid.len(),
    }
}

/// Largest `s` such that `min_ξ φ(ξ,σ)σ^n ≥ max f` for every sampled
/// `σ < s`, or `None` if it already fails at `s_min`. Found by a log-spaced
/// scan over `[s_min, s_max]` followed by bisection on the first crossing.
pub fn lower_barrier_level(
    phi: &OrliczFunction,
    grid: &CapGrid,
    f: &ScalarField,
    s_min: f64,
    s_max: f64,
) -> Option<f64> {
    let fmax = f.max();
    let ok = |s: f64| (0..grid.len()).all(|i| barrier_product(phi, grid, i, s) >= fmax);
    locate_crossing(ok, s_min, s_max)
}

/// Smallest `s` such that `max_ξ φ(ξ,σ)σ^n ≤ min f` for every sampled
/// `σ > s`; the mirror image of [`lower_barrier_level`].
pub fn upper_barrier_level(
    phi: &OrliczFunction,
    grid: &CapGrid,
    f: &ScalarField,
    s_min: f64,
    s_max: f64,
) -> Option<f64> {
    let fmin = f.min();
    let ok = |s: f64| (0..grid.len()).all(|i| barrier_product(phi, grid, i, s) <= fmin);
    // scan from the top: substitute s -> s_min·s_max/s
    let flip = |s: f64| s_min * s_max / s;
    locate_crossing(|s| ok(flip(s)), s_min, s_max).map(flip)
}

const SCAN_POINTS: usize = 200;

fn locate_crossing(ok: impl Fn(f64) -> bool, s_min: f64, s_max: f64) -> Option<f64> {
    let grid = log_spaced(s_min, s_max, SCAN_POINTS);
    if !ok(grid[0]) {
        return None;
    }
    let Some(k) = grid.iter().position(|&s| !ok(s)) else {
        return Some(s_max);
    };
    let (mut lo, mut hi) = (grid[k - 1], grid[k]);
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use approx::assert_relative_eq;

    #[test]
    fn power_kind_values() {
        let phi = make_power(3.0).unwrap();
        let xi = [0.0, 0.0, 0.5];
        assert_eq!(phi.eval(&xi, 2.0).unwrap(), 0.25);
        assert_relative_eq!(
            phi.primitive(&xi, 1.0).unwrap(),
            1.0 / 3.0,
            max_relative = 1e-15
        );
        assert_eq!(phi.deriv_s(&xi, 2.0).unwrap(), -0.25);
        assert_eq!(phi.primitive(&xi, 0.0).unwrap(), 0.0);
        assert_eq!(make_power(0.0).unwrap_err(), OrliczError::ZeroExponent);
        assert!(phi.eval(&xi, 0.0).is_err());
    }

    #[test]
    fn expression_kind_primitive_and_rejection() {
        let g = build_grid(1.0, 2, 8, 8).unwrap();
        let phi = make_from_expr("exp(s)*s^(-2)", &g).unwrap();
        let exact = 2.0 - 5.0 / std::f64::consts::E;
        assert_relative_eq!(
            phi.primitive(&[0.0, 0.0, 0.1], 1.0).unwrap(),
            exact,
            max_relative = 1e-9
        );
        assert!(!phi.depends_on_xi());
        assert!(matches!(
            make_from_expr("-s", &g),
            Err(OrliczError::NonPositive { .. })
        ));
        assert!(matches!(
            make_from_expr("s*(", &g),
            Err(OrliczError::Parse(_))
        ));
        assert!(make_from_expr("1 + 0.1*x3", &g).unwrap().depends_on_xi());
    }

    #[test]
    fn expression_matches_power() {
        use rand::{Rng, SeedableRng};
        let g = build_grid(1.0, 2, 8, 8).unwrap();
        let a = make_from_expr("s^(-2)", &g).unwrap();
        let b = make_power(3.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let i = rng.random_range(0..g.len());
            let s = 10f64.powf(rng.random_range(-2.0..2.0));
            let xi = g.ambient(i);
            assert_relative_eq!(
                a.eval(xi, s).unwrap(),
                b.eval(xi, s).unwrap(),
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn barrier_examples() {
        let g1 = build_grid(std::f64::consts::FRAC_PI_3, 1, 16, 1).unwrap();
        let one = ScalarField::constant(&g1, 1.0);
        let r = check_barrier_condition(&make_power(3.0).unwrap(), &g1, &one, 1e-3, 1e3, 16);
        assert!(r.passes);
        assert_relative_eq!(r.margin_low, 999.0, max_relative = 1e-9);
        let r = check_barrier_condition(&make_power(1.0).unwrap(), &g1, &one, 1e-3, 1e3, 16);
        assert!(!r.passes);
        assert!(r.margin_high < 0.0);

        let g2 = build_grid(std::f64::consts::FRAC_PI_3, 2, 8, 8).unwrap();
        let f = ScalarField::from_fn(&g2, |nd| 1.0 + 0.3 * nd.xi[2]);
        let r = check_barrier_condition(&make_power(3.0).unwrap(), &g2, &f, 1e-3, 1e3, 16);
        assert!(!r.passes);
        assert!(r.margin_low < -0.1);
        // min f over nodes sits just above 1, the value φs² takes everywhere
        assert!(r.margin_high >= 0.0 && r.margin_high < 0.05);
    }

    #[test]
    fn barrier_levels_for_power_weight() {
        // n = 1, p = 3: φs = 1/s, f ≡ 2 ⇒ crossing at s = 1/2 from both sides
        let g = build_grid(0.8, 1, 16, 1).unwrap();
        let f = ScalarField::constant(&g, 2.0);
        let phi = make_power(3.0).unwrap();
        let lo = lower_barrier_level(&phi, &g, &f, 1e-6, 1e6).unwrap();
        let hi = upper_barrier_level(&phi, &g, &f, 1e-6, 1e6).unwrap();
        assert_relative_eq!(lo, 0.5, max_relative = 1e-9);
        assert_relative_eq!(hi, 0.5, max_relative = 1e-9);
        // p = 1: φs = s never dominates at small s
        assert!(lower_barrier_level(&make_power(1.0).unwrap(), &g, &f, 1e-6, 1e6).is_none());
    }
}
