//! Closed-form and deterministic numerical quantities: the Lambert-W root of
//! the Gamma conjecture, the corner constants, the Lyapunov generator check
//! and the Itô identity of the gap functional.

use std::f64::consts::{LN_2, PI};

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::model::SystemKind;
use crate::scalar::Real;
use crate::systems::RankTriple;

/// Principal branch of the Lambert W function on `[−1/e, ∞)` by Halley iteration.
pub fn lambert_w0<T: Real>(x: T) -> Result<T> {
    let e_inv = (-T::one()).exp();
    if !(x >= -e_inv) {
        return invalid(format!("lambert_w0 is undefined below -1/e, got {x}"));
    }
    if x == T::zero() {
        return Ok(T::zero());
    }
    let one = T::one();
    let two = one + one;
    let mut w = if x < T::lit(-0.25) {
        let p = (two * (T::lit(std::f64::consts::E) * x + one)).sqrt();
        -one + p - p * p / T::lit(3.0)
    } else if x < T::lit(3.0) {
        (one + x).ln() * T::lit(0.8)
    } else {
        let l = x.ln();
        l - l.ln()
    };
    for _ in 0..64 {
        let ew = w.exp();
        let f = w * ew - x;
        if f == T::zero() {
            break;
        }
        let wp1 = w + one;
        let step = f / (ew * wp1 - (w + two) * f / (two * wp1));
        let next = w - step;
        let done = (next - w).abs() <= T::epsilon() * (T::one() + next.abs());
        w = next;
        if done {
            break;
        }
    }
    Ok(w)
}

/// Root of `2u·ln(u/(u−1)) = 3·ln 2` with its Lambert-W cross-check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LambertU {
    pub u: f64,
    /// `2u·ln(u/(u−1)) − 3·ln 2` at `u`.
    pub residual: f64,
    /// `3ln2 / (3ln2 + 2·W(−3ln2/(4√2)))`.
    pub closed_form: f64,
    /// `(u/(u−1))^(2u/3)`, equal to 2 at the root.
    pub moment_identity: f64,
}

impl LambertU {
    /// Gamma shape `2u/3`.
    pub fn shape(&self) -> f64 {
        2.0 * self.u / 3.0
    }

    /// Gamma rate `λu`.
    pub fn rate(&self, lambda: f64) -> f64 {
        lambda * self.u
    }
}

fn u_equation(u: f64) -> f64 {
    2.0 * u * (u / (u - 1.0)).ln() - 3.0 * LN_2
}

/// Solves for `u` by bisection on `(1 + 1e−9, 64)` and checks the Lambert-W form.
pub fn lambert_u() -> Result<LambertU> {
    let (mut lo, mut hi) = (1.0 + 1e-9, 64.0);
    // the left side decreases from +inf towards 2 < 3 ln 2
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if u_equation(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let u = 0.5 * (lo + hi);
    let c = 3.0 * LN_2;
    let w = lambert_w0(-c / (4.0 * 2f64.sqrt()))?;
    let closed_form = c / (c + 2.0 * w);
    if (closed_form - u).abs() > 1e-10 {
        return Err(Error::InvalidParameter(format!(
            "Lambert-W form {closed_form} disagrees with bisection root {u}"
        )));
    }
    Ok(LambertU {
        u,
        residual: u_equation(u),
        closed_form,
        moment_identity: (u / (u - 1.0)).powf(2.0 * u / 3.0),
    })
}

/// Constants of the corner analysis for the middle-ballistic system with equal drifts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CornerConstants<T> {
    pub theta1: T,
    pub alpha: T,
    /// Index `α/2` of the stable subordinator.
    pub kappa_index: T,
    pub c0: T,
}

pub fn corner_constants<T: Real>() -> CornerConstants<T> {
    let theta1 = T::lit(0.5).atan();
    let alpha = T::lit(2.0 / PI) * T::lit(4.0 / 3.0).atan();
    let two = T::lit(2.0);
    let c = CornerConstants {
        theta1,
        alpha,
        kappa_index: alpha / two,
        c0: two / alpha + two * alpha - T::lit(4.0),
    };
    assert!(c.alpha > T::lit(0.5) && c.alpha < T::lit(2.0 / 3.0));
    assert!(c.c0 > T::zero());
    c
}

/// `[𝒜V]/V` for `V = exp(√(g² + gh + h²))`.
pub fn generator_ratio<T: Real>(lambda: [T; 2], g: T, h: T) -> T {
    let q = g * g + g * h + h * h;
    let r = q.sqrt();
    let d2 = (g - h) * (g - h);
    let c8 = T::lit(8.0);
    (T::one() - T::lit(1.5) * (lambda[0] * g + lambda[1] * h)) / (T::lit(2.0) * r) + d2 / (c8 * q)
        - d2 / (c8 * q * r)
}

/// Outcome of [`lyapunov_drift_check`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyapunovReport {
    pub kappa: f64,
    pub a: f64,
    pub b: f64,
    pub epsilon: f64,
    pub nodes: usize,
    pub violations: usize,
    /// Largest value of `[𝒜V] + κV − b·1{g+h ≤ a}`, divided by `V`.
    pub max_violation: f64,
    pub worst_node: Option<[f64; 2]>,
}

impl LyapunovReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Checks `[𝒜V] ≤ −κV + b·1{g+h ≤ a}` on a `resolution × resolution` grid of
/// `{g, h ≥ 0, ε ≤ g+h ≤ 4a}` with `κ = (3/4)·min λ`.
///
/// Inequalities are compared after division by `V`, so large arguments do not overflow.
pub fn lyapunov_drift_check(
    lambda: [f64; 2],
    epsilon: f64,
    a: f64,
    resolution: usize,
) -> Result<LyapunovReport> {
    if !(lambda[0] > 0.0 && lambda[1] > 0.0) {
        return invalid("lyapunov_drift_check requires positive lambda");
    }
    if !(epsilon > 0.0 && a > epsilon) || resolution < 2 {
        return invalid("lyapunov_drift_check requires 0 < epsilon < a and resolution >= 2");
    }
    let kappa = 0.75 * lambda[0].min(lambda[1]);
    let top = 4.0 * a;
    let step = top / (resolution - 1) as f64;
    let nodes: Vec<[f64; 2]> = (0..resolution)
        .flat_map(|i| (0..resolution).map(move |j| [i as f64 * step, j as f64 * step]))
        .filter(|[g, h]| {
            let s = g + h;
            s >= epsilon && s <= top * (1.0 + 1e-12)
        })
        .collect();
    let ln_b = nodes
        .iter()
        .filter(|[g, h]| g + h <= a)
        .map(|[g, h]| {
            let r = (g * g + g * h + h * h).sqrt();
            r + (0.125 + 0.5 / r).ln()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let mut rep = LyapunovReport {
        kappa,
        a,
        b: ln_b.exp(),
        epsilon,
        nodes: nodes.len(),
        violations: 0,
        max_violation: f64::NEG_INFINITY,
        worst_node: None,
    };
    for &[g, h] in &nodes {
        let r = (g * g + g * h + h * h).sqrt();
        let allowance = if g + h <= a { (ln_b - r).exp() } else { 0.0 };
        let excess = generator_ratio(lambda, g, h) + kappa - allowance;
        if excess > 0.0 {
            rep.violations += 1;
        }
        if excess > rep.max_violation {
            rep.max_violation = excess;
            rep.worst_node = Some([g, h]);
        }
    }
    Ok(rep)
}

/// Lyapunov check with the default trapezoid `a = 8/κ`, `ε = 1e−3·a`, 200×200 grid.
pub fn lyapunov_drift_check_default(lambda: [f64; 2]) -> Result<LyapunovReport> {
    let kappa = 0.75 * lambda[0].min(lambda[1]);
    let a = 8.0 / kappa;
    lyapunov_drift_check(lambda, 1e-3 * a, a, 200)
}

/// Sufficient statistics of the residual of the Itô identity for the gap
/// functional and of its regression on the regulator increments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ItoAccumulator {
    pub n: u64,
    pub sum_r: f64,
    pub sum_r2: f64,
    pub max_abs_r: f64,
    pub s_aa: f64,
    pub s_ag: f64,
    pub s_gg: f64,
    pub s_ra: f64,
    pub s_rg: f64,
    pub dt: f64,
}

/// Functional, drift and noise of the Itô identity for one system.
#[derive(Clone, Copy, Debug)]
pub struct ItoForm {
    /// `F = g² + c·gh + d·h²`.
    c: f64,
    d: f64,
    /// Drift `1 − (p1·λ1·g + p2·λ2·h)`.
    p: [f64; 2],
    /// Noise coefficient `n1·g + n2·h`.
    noise: [f64; 2],
    lambda: [f64; 2],
}

impl ItoForm {
    pub fn new(kind: SystemKind, lambda: [f64; 2]) -> Result<Self> {
        match kind {
            SystemKind::MiddleDiffusive => Ok(ItoForm {
                c: 1.0,
                d: 1.0,
                p: [1.5, 1.5],
                noise: [-1.0, 1.0],
                lambda,
            }),
            SystemKind::SkewElastic => Ok(ItoForm {
                c: 3.0,
                d: 3.0,
                p: [0.5, 1.5],
                noise: [1.0, 3.0],
                lambda,
            }),
            SystemKind::MiddleBallistic => {
                invalid("the Itô identity check applies to the one-noise systems")
            }
        }
    }

    #[inline]
    pub fn functional(&self, g: f64, h: f64) -> f64 {
        g * g + self.c * g * h + self.d * h * h
    }

    /// Residual of one step from `(g, h)` to `(g1, h1)` with Brownian increment `dw`.
    #[inline]
    pub fn residual(&self, g: f64, h: f64, g1: f64, h1: f64, dw: f64, dt: f64) -> f64 {
        let drift = 1.0 - (self.p[0] * self.lambda[0] * g + self.p[1] * self.lambda[1] * h);
        let noise = self.noise[0] * g + self.noise[1] * h;
        self.functional(g1, h1) - self.functional(g, h) - drift * dt - noise * dw
    }
}

impl ItoAccumulator {
    pub fn new(dt: f64) -> Self {
        ItoAccumulator {
            dt,
            ..Default::default()
        }
    }

    #[inline]
    pub fn push(&mut self, r: f64, da: f64, dg: f64) {
        self.n += 1;
        self.sum_r += r;
        self.sum_r2 += r * r;
        self.max_abs_r = self.max_abs_r.max(r.abs());
        self.s_aa += da * da;
        self.s_ag += da * dg;
        self.s_gg += dg * dg;
        self.s_ra += r * da;
        self.s_rg += r * dg;
    }

    pub fn merge(&mut self, o: &ItoAccumulator) {
        self.n += o.n;
        self.sum_r += o.sum_r;
        self.sum_r2 += o.sum_r2;
        self.max_abs_r = self.max_abs_r.max(o.max_abs_r);
        self.s_aa += o.s_aa;
        self.s_ag += o.s_ag;
        self.s_gg += o.s_gg;
        self.s_ra += o.s_ra;
        self.s_rg += o.s_rg;
    }

    /// Least squares fit of the residuals on `(ΔA, ΔΓ)` without intercept.
    pub fn report(&self) -> ItoReport {
        let n = self.n as f64;
        let det = self.s_aa * self.s_gg - self.s_ag * self.s_ag;
        let (coef, se) = if det > 0.0 && self.n > 2 {
            let inv = [
                [self.s_gg / det, -self.s_ag / det],
                [-self.s_ag / det, self.s_aa / det],
            ];
            let b = [
                inv[0][0] * self.s_ra + inv[0][1] * self.s_rg,
                inv[1][0] * self.s_ra + inv[1][1] * self.s_rg,
            ];
            let rss = (self.sum_r2 - b[0] * self.s_ra - b[1] * self.s_rg).max(0.0);
            let s2 = rss / (n - 2.0);
            (b, [(s2 * inv[0][0]).sqrt(), (s2 * inv[1][1]).sqrt()])
        } else {
            ([0.0; 2], [f64::NAN; 2])
        };
        ItoReport {
            steps: self.n,
            mean_residual: self.sum_r / n,
            mean_residual_over_dt: self.sum_r / n / self.dt,
            max_abs_residual: self.max_abs_r,
            coef,
            se,
            z: [coef[0] / se[0], coef[1] / se[1]],
        }
    }
}

/// Residual summary of the Itô identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ItoReport {
    pub steps: u64,
    pub mean_residual: f64,
    pub mean_residual_over_dt: f64,
    pub max_abs_residual: f64,
    /// Regression coefficients on `(ΔA, ΔΓ)`.
    pub coef: [f64; 2],
    pub se: [f64; 2],
    pub z: [f64; 2],
}

/// Pathwise residual of the Itô identity for the gap functional along a run.
pub fn ito_drift_identity_check<T: Real>(ranks: &RankTriple<T>, lambda: [f64; 2]) -> Result<ItoReport> {
    let form = ItoForm::new(ranks.kind, lambda)?;
    let f = |x: T| x.to_f64().unwrap_or(f64::NAN);
    let dt = f(ranks.grid().dt);
    let (g, h) = (&ranks.gaps.g.values, &ranks.gaps.h.values);
    let (a, gm) = (&ranks.regulators.a.values, &ranks.regulators.gamma.values);
    let w = &ranks.brownian[0].values;
    let mut acc = ItoAccumulator::new(dt);
    for k in 0..g.len() - 1 {
        let r = form.residual(f(g[k]), f(h[k]), f(g[k + 1]), f(h[k + 1]), f(w[k + 1] - w[k]), dt);
        acc.push(r, f(a[k + 1] - a[k]), f(gm[k + 1] - gm[k]));
    }
    Ok(acc.report())
}
