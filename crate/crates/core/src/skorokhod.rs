//! Discrete Skorokhod reflection: the one-dimensional folding map and the
//! coupled two-regulator system solved by Picard iteration.

use crate::error::{Error, Result};
use crate::model::{ReflectionSpec, SamplePath};
use crate::scalar::Real;

/// Regulators (A, Γ).
#[derive(Clone, Debug, PartialEq)]
pub struct RegulatorPair<T> {
    pub a: SamplePath<T>,
    pub gamma: SamplePath<T>,
}

/// Gaps (G, H) = (R1 − R2, R2 − R3).
#[derive(Clone, Debug, PartialEq)]
pub struct GapPair<T> {
    pub g: SamplePath<T>,
    pub h: SamplePath<T>,
}

/// Result of [`solve_coupled_regulators`].
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledSolution<T> {
    pub regulators: RegulatorPair<T>,
    pub gaps: GapPair<T>,
    pub iterations: usize,
    /// Sup-norm change of (A, Γ) after each iteration.
    pub changes: Vec<T>,
}

/// Folds `u` at zero: `L = max_{j≤k} (−U_j)⁺`, `G = U + L`.
pub fn reflect_1d<T: Real>(u: &SamplePath<T>) -> Result<(SamplePath<T>, SamplePath<T>)> {
    let (g, l) = reflect_1d_values(&u.values)?;
    Ok((
        SamplePath { grid: u.grid, values: g },
        SamplePath { grid: u.grid, values: l },
    ))
}

/// Slice form of [`reflect_1d`], returning `(G, L)`.
pub fn reflect_1d_values<T: Real>(u: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    match u.first() {
        None => return Err(Error::InvalidPath("empty path".into())),
        Some(&u0) if !(u0 >= T::zero()) => {
            return Err(Error::InvalidPath(format!("reflect_1d requires U(0) >= 0, got {u0}")))
        }
        _ => {}
    }
    let mut l = Vec::with_capacity(u.len());
    let mut g = Vec::with_capacity(u.len());
    let mut run = T::zero();
    for &x in u {
        if -x > run {
            run = -x;
            g.push(T::zero());
        } else {
            g.push(x + run);
        }
        l.push(run);
    }
    Ok((g, l))
}

/// Exact one-step solver of the coupled reflection problem.
///
/// Given the previous regulator values and the current free terms
/// `u = −g0 − z1(t_k)`, `v = −h0 − z2(t_k)`, it returns the unique solution of
/// `A = max(A⁻, u + q12·Γ)`, `Γ = max(Γ⁻, v + q21·A)`.
#[derive(Clone, Copy, Debug)]
pub struct RegulatorStepper<T> {
    q12: T,
    q21: T,
    det: T,
    pub a: T,
    pub gamma: T,
}

impl<T: Real> RegulatorStepper<T> {
    pub fn new(q12: T, q21: T) -> Self {
        RegulatorStepper {
            q12,
            q21,
            det: T::one() - q12 * q21,
            a: T::zero(),
            gamma: T::zero(),
        }
    }

    #[inline]
    pub fn step(&mut self, u: T, v: T) -> (T, T) {
        let a1 = self.a.max(u + self.q12 * self.gamma);
        let g1 = self.gamma.max(v + self.q21 * a1);
        if u + self.q12 * g1 <= a1 {
            self.a = a1;
            self.gamma = g1;
        } else {
            self.a = (u + self.q12 * v) / self.det;
            self.gamma = (v + self.q21 * u) / self.det;
        }
        (self.a, self.gamma)
    }
}

fn gap<T: Real>(free: T, coupled: T, own: T) -> T {
    (own - free - coupled).max(T::zero())
}

fn check_inputs<T: Real>(z1: &SamplePath<T>, z2: &SamplePath<T>, g0: T, h0: T, tol: T) -> Result<()> {
    if z1.grid != z2.grid || z1.len() != z2.len() {
        return Err(Error::InvalidPath("z1 and z2 must share a grid".into()));
    }
    if !(g0 > T::zero() && h0 > T::zero()) {
        return Err(Error::InvalidParameter("initial gaps must be positive".into()));
    }
    if !(tol > T::zero()) {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    Ok(())
}

fn assemble<T: Real>(
    spec: &ReflectionSpec<T>,
    z1: &SamplePath<T>,
    z2: &SamplePath<T>,
    g0: T,
    h0: T,
    a: Vec<T>,
    gm: Vec<T>,
) -> (RegulatorPair<T>, GapPair<T>) {
    let (q12, q21) = (spec.q12(), spec.q21());
    let g = (0..a.len())
        .map(|k| gap(-g0 - z1.values[k], q12 * gm[k], a[k]))
        .collect();
    let h = (0..a.len())
        .map(|k| gap(-h0 - z2.values[k], q21 * a[k], gm[k]))
        .collect();
    let grid = z1.grid;
    (
        RegulatorPair {
            a: SamplePath { grid, values: a },
            gamma: SamplePath { grid, values: gm },
        },
        GapPair {
            g: SamplePath { grid, values: g },
            h: SamplePath { grid, values: h },
        },
    )
}

/// Picard (Jacobi) iteration for the coupled regulators, started at zero.
///
/// Gaps are `G = g0 + z1 − q12·Γ + A` and `H = h0 + z2 − q21·A + Γ`; values
/// below zero at round-off level are clamped to zero.
pub fn solve_coupled_regulators<T: Real>(
    spec: &ReflectionSpec<T>,
    z1: &SamplePath<T>,
    z2: &SamplePath<T>,
    g0: T,
    h0: T,
    tol: T,
    max_iter: usize,
) -> Result<CoupledSolution<T>> {
    check_inputs(z1, z2, g0, h0, tol)?;
    let n = z1.len();
    let (q12, q21) = (spec.q12(), spec.q21());
    let u: Vec<T> = z1.values.iter().map(|&z| -g0 - z).collect();
    let v: Vec<T> = z2.values.iter().map(|&z| -h0 - z).collect();
    let mut a = vec![T::zero(); n];
    let mut gm = vec![T::zero(); n];
    let mut next_a = vec![T::zero(); n];
    let mut next_g = vec![T::zero(); n];
    let mut changes = Vec::new();
    for iter in 1..=max_iter {
        let (mut ra, mut rg) = (T::zero(), T::zero());
        let mut change = T::zero();
        for k in 0..n {
            ra = ra.max(u[k] + q12 * gm[k]);
            rg = rg.max(v[k] + q21 * a[k]);
            change = change.max((ra - a[k]).abs()).max((rg - gm[k]).abs());
            next_a[k] = ra;
            next_g[k] = rg;
        }
        std::mem::swap(&mut a, &mut next_a);
        std::mem::swap(&mut gm, &mut next_g);
        changes.push(change);
        if change < tol {
            let (regulators, gaps) = assemble(spec, z1, z2, g0, h0, a, gm);
            return Ok(CoupledSolution {
                regulators,
                gaps,
                iterations: iter,
                changes,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        last_change: changes.last().map_or(f64::NAN, |c| c.to_f64().unwrap_or(f64::NAN)),
    })
}

/// Solves the same system step by step with [`RegulatorStepper`]; exact up to round-off.
pub fn solve_coupled_regulators_stepwise<T: Real>(
    spec: &ReflectionSpec<T>,
    z1: &SamplePath<T>,
    z2: &SamplePath<T>,
    g0: T,
    h0: T,
) -> Result<(RegulatorPair<T>, GapPair<T>)> {
    check_inputs(z1, z2, g0, h0, T::one())?;
    let mut stepper = RegulatorStepper::new(spec.q12(), spec.q21());
    let (a, gm): (Vec<T>, Vec<T>) = z1
        .values
        .iter()
        .zip(&z2.values)
        .map(|(&x, &y)| stepper.step(-g0 - x, -h0 - y))
        .unzip();
    Ok(assemble(spec, z1, z2, g0, h0, a, gm))
}

/// Violation counts of the discrete local-time identification.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IdentificationReport {
    /// Indices where A increases while G > tol.
    pub a_off_zero: usize,
    /// Indices where Γ increases while H > tol.
    pub gamma_off_zero: usize,
    /// Indices where A increases with H ≤ tol, or Γ increases with G ≤ tol.
    pub simultaneous: usize,
    pub a_increases: usize,
    pub gamma_increases: usize,
}

impl IdentificationReport {
    pub fn flat_ok(&self) -> bool {
        self.a_off_zero == 0 && self.gamma_off_zero == 0
    }
}

/// Checks that each regulator grows only where its gap vanishes and, when
/// `separation` is set, never while the other gap vanishes too.
pub fn local_time_identification_check<T: Real>(
    reg: &RegulatorPair<T>,
    gaps: &GapPair<T>,
    tol: T,
    separation: bool,
) -> IdentificationReport {
    let mut rep = IdentificationReport::default();
    for k in 1..reg.a.len() {
        let (g, h) = (gaps.g.values[k], gaps.h.values[k]);
        if reg.a.values[k] > reg.a.values[k - 1] {
            rep.a_increases += 1;
            rep.a_off_zero += usize::from(g > tol);
            rep.simultaneous += usize::from(separation && h <= tol);
        }
        if reg.gamma.values[k] > reg.gamma.values[k - 1] {
            rep.gamma_increases += 1;
            rep.gamma_off_zero += usize::from(h > tol);
            rep.simultaneous += usize::from(separation && g <= tol);
        }
    }
    rep
}
