//! Domain types, the catalog of the three reflection systems, and parameter validation.

use std::fmt;
use std::ops::Neg;
use std::str::FromStr;

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

/// Ordered field used for the exact parts of the model algebra.
///
/// Implemented by the floating point types and by exact rationals, so the
/// reflection algebra can be checked without rounding.
pub trait Field: Num + Copy + Neg<Output = Self> + PartialOrd {}

impl<T: Num + Copy + Neg<Output = T> + PartialOrd> Field for T {}

fn half<T: Field>() -> T {
    T::one() / (T::one() + T::one())
}

fn negative_part<T: Field>(x: T) -> T {
    if x < T::zero() {
        -x
    } else {
        T::zero()
    }
}

/// The three competing three-particle systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    /// Leader and laggard ballistic, middle particle diffusive.
    MiddleDiffusive,
    /// Leader and laggard diffusive, middle particle ballistic.
    MiddleBallistic,
    /// Middle particle diffusive with the 1:3 skew collision split.
    SkewElastic,
}

/// Coefficients of the regulators entering each rank: rank `k` receives
/// `a[k]·A + gamma[k]·Γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTimeSplit<T> {
    pub a: [T; 3],
    pub gamma: [T; 3],
}

impl SystemKind {
    pub const ALL: [SystemKind; 3] = [
        SystemKind::MiddleDiffusive,
        SystemKind::MiddleBallistic,
        SystemKind::SkewElastic,
    ];

    /// Number of independent driving Brownian motions.
    pub fn brownian_count(self) -> usize {
        match self {
            SystemKind::MiddleBallistic => 2,
            _ => 1,
        }
    }

    /// Index of the driving Brownian motion carried by `rank` (0-based), if any.
    pub fn noise_of_rank(self, rank: usize) -> Option<usize> {
        match (self, rank) {
            (SystemKind::MiddleBallistic, 0) => Some(0),
            (SystemKind::MiddleBallistic, 2) => Some(1),
            (SystemKind::MiddleBallistic, _) => None,
            (_, 1) => Some(0),
            _ => None,
        }
    }

    /// Off-diagonal entries `(q12, q21)` of Q.
    pub fn coupling<T: Field>(self) -> (T, T) {
        let h = half::<T>();
        match self {
            SystemKind::SkewElastic => (T::one() + h, h),
            _ => (h, h),
        }
    }

    pub fn split<T: Field>(self) -> LocalTimeSplit<T> {
        let h = half::<T>();
        let z = T::zero();
        match self {
            SystemKind::SkewElastic => LocalTimeSplit {
                a: [h, -h, z],
                gamma: [z, T::one() + h, h],
            },
            _ => LocalTimeSplit {
                a: [h, -h, z],
                gamma: [z, h, -h],
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::MiddleDiffusive => "middle-diffusive",
            SystemKind::MiddleBallistic => "middle-ballistic",
            SystemKind::SkewElastic => "skew-elastic",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "middlediffusive" | "md" | "diffusive" => Ok(SystemKind::MiddleDiffusive),
            "middleballistic" | "mb" | "ballistic" => Ok(SystemKind::MiddleBallistic),
            "skewelastic" | "se" | "skew" => Ok(SystemKind::SkewElastic),
            _ => invalid(format!("unknown system '{s}'")),
        }
    }
}

/// Drift rates assigned to ranks 1 (leader), 2 (middle) and 3 (laggard).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec<T> {
    pub delta: [T; 3],
}

impl<T: Copy> DriftSpec<T> {
    /// Unchecked constructor, usable with exact scalar types.
    pub const fn from_array(delta: [T; 3]) -> Self {
        DriftSpec { delta }
    }
}

impl<T: Field> DriftSpec<T> {
    /// Gap drift `m = (δ1 − δ2, δ2 − δ3)`.
    pub fn gap_drift(&self) -> [T; 2] {
        let [d1, d2, d3] = self.delta;
        [d1 - d2, d2 - d3]
    }

    /// Drifts `(−λ/2, 0, λ/2)`, the symmetric case with common rate `λ`.
    pub fn symmetric(lambda: T) -> Self {
        let h = half::<T>() * lambda;
        DriftSpec::from_array([-h, T::zero(), h])
    }

    /// True when `δ2 − δ1 = δ3 − δ2 > 0`.
    pub fn is_symmetric(&self) -> bool {
        let [d1, d2, d3] = self.delta;
        d2 - d1 == d3 - d2 && d2 > d1
    }
}

impl<T: Real> DriftSpec<T> {
    pub fn new(delta: [T; 3]) -> Result<Self> {
        if delta.iter().any(|d| !d.is_finite()) {
            return invalid("drifts must be finite");
        }
        Ok(DriftSpec { delta })
    }

    /// Symmetric-case rate `λ` when `δ2 − δ1` and `δ3 − δ2` agree to `tol`.
    pub fn symmetric_rate(&self, tol: T) -> Option<T> {
        let [d1, d2, d3] = self.delta;
        let (l, r) = (d2 - d1, d3 - d2);
        ((l - r).abs() <= tol && l > T::zero()).then(|| l + r)
    }
}

/// Initial positions, strictly ordered `x1 > x2 > x3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialPositions<T> {
    pub x: [T; 3],
}

impl<T: Real> InitialPositions<T> {
    pub fn new(x: [T; 3]) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return invalid("initial positions must be finite");
        }
        if !(x[0] > x[1] && x[1] > x[2]) {
            return invalid(format!(
                "initial positions must satisfy x1 > x2 > x3, got ({}, {}, {})",
                x[0], x[1], x[2]
            ));
        }
        Ok(InitialPositions { x })
    }

    /// Initial gaps `(x1 − x2, x2 − x3)`.
    pub fn gaps(&self) -> (T, T) {
        (self.x[0] - self.x[1], self.x[1] - self.x[2])
    }
}

/// Reflection data of one system: Q, R = I − Q, covariance C, drift m and λ = −R⁻¹m.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReflectionSpec<T> {
    pub kind: SystemKind,
    pub q: [[T; 2]; 2],
    pub r: [[T; 2]; 2],
    pub c: [[T; 2]; 2],
    pub m: [T; 2],
    pub lambda: [T; 2],
}

impl<T: Field> ReflectionSpec<T> {
    pub fn q12(&self) -> T {
        self.q[0][1]
    }

    pub fn q21(&self) -> T {
        self.q[1][0]
    }

    /// Square of the spectral radius of Q, which is `q12·q21` for a hollow 2×2 matrix.
    pub fn spectral_radius_squared(&self) -> T {
        self.q12() * self.q21()
    }

    /// True when R + Rᵀ = 2C.
    pub fn is_skew_symmetric(&self) -> bool {
        let two = T::one() + T::one();
        (0..2).all(|i| (0..2).all(|j| self.r[i][j] + self.r[j][i] == two * self.c[i][j]))
    }
}

impl<T: Real> ReflectionSpec<T> {
    pub fn spectral_radius(&self) -> T {
        self.spectral_radius_squared().sqrt()
    }
}

/// Builds the reflection data of `kind` for the given drifts.
pub fn reflection_spec<T: Field>(kind: SystemKind, drifts: &DriftSpec<T>) -> ReflectionSpec<T> {
    let (q12, q21) = kind.coupling::<T>();
    let (o, z) = (T::one(), T::zero());
    let c = match kind {
        SystemKind::MiddleBallistic => [[o, z], [z, o]],
        _ => [[o, -o], [-o, o]],
    };
    ReflectionSpec {
        kind,
        q: [[z, q12], [q21, z]],
        r: [[o, -q12], [-q21, o]],
        c,
        m: drifts.gap_drift(),
        lambda: lambda_closed_form(kind, drifts),
    }
}

/// λ from the per-system closed forms.
pub fn lambda_closed_form<T: Field>(kind: SystemKind, drifts: &DriftSpec<T>) -> [T; 2] {
    let [d1, d2, d3] = drifts.delta;
    let one = T::one();
    let two = one + one;
    let three = two + one;
    match kind {
        SystemKind::SkewElastic => [
            two * (three * d3 - two * d1 - d2),
            two * (two * d3 - d1 - d2),
        ],
        _ => {
            let c = two / three;
            [c * (d2 + d3 - two * d1), c * (two * d3 - d1 - d2)]
        }
    }
}

/// λ = −R⁻¹m by explicit 2×2 inversion of R = [[1, −q12], [−q21, 1]].
pub fn lambda_by_inversion<T: Field>(q12: T, q21: T, m: [T; 2]) -> [T; 2] {
    let det = T::one() - q12 * q21;
    [-(m[0] + q12 * m[1]) / det, -(q21 * m[0] + m[1]) / det]
}

/// Outcome of [`stationarity_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stationarity<T> {
    pub holds: bool,
    /// Left-hand sides of the two inequalities, each required to be positive.
    pub margins: [T; 2],
    /// Human-readable form of the first violated inequality.
    pub violated: Option<&'static str>,
}

/// Positive-recurrence condition of the gap process.
pub fn stationarity_check<T: Field>(kind: SystemKind, drifts: &DriftSpec<T>) -> Stationarity<T> {
    let [d1, d2, d3] = drifts.delta;
    let two = T::one() + T::one();
    let (margins, labels) = match kind {
        SystemKind::MiddleDiffusive => (
            [
                two * (d3 - d2) + negative_part(d1 - d2),
                two * (d2 - d1) + negative_part(d2 - d3),
            ],
            [
                "2(d3-d2) + (d1-d2)^- > 0",
                "2(d2-d1) + (d2-d3)^- > 0",
            ],
        ),
        SystemKind::SkewElastic => {
            let three = two + T::one();
            (
                [three * d3 - two * d1 - d2, two * d3 - d1 - d2],
                ["3 d3 > 2 d1 + d2", "2 d3 > d1 + d2"],
            )
        }
        SystemKind::MiddleBallistic => (
            lambda_closed_form(kind, drifts),
            ["lambda1 > 0", "lambda2 > 0"],
        ),
    };
    let violated = (0..2).find(|&i| margins[i] <= T::zero()).map(|i| labels[i]);
    Stationarity {
        holds: violated.is_none(),
        margins,
        violated,
    }
}

/// Uniform time grid `t_k = k·dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<T> {
    pub dt: T,
    pub n_steps: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(dt: T, n_steps: usize) -> Result<Self> {
        if !(dt > T::zero() && dt.is_finite()) {
            return invalid("dt must be positive and finite");
        }
        if n_steps == 0 {
            return invalid("n_steps must be at least 1");
        }
        Ok(TimeGrid { dt, n_steps })
    }

    /// Grid covering `[0, horizon]` with the largest step count not exceeding it.
    pub fn with_horizon(dt: T, horizon: T) -> Result<Self> {
        let n = (horizon / dt + T::lit(1e-9)).floor().to_usize().unwrap_or(0);
        Self::new(dt, n)
    }

    pub fn time(&self, k: usize) -> T {
        T::from_usize(k).expect("index fits") * self.dt
    }

    pub fn horizon(&self) -> T {
        self.time(self.n_steps)
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Scalar function of time sampled on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePath<T> {
    pub grid: TimeGrid<T>,
    pub values: Vec<T>,
}

impl<T: Real> SamplePath<T> {
    pub fn new(grid: TimeGrid<T>, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidPath(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        Ok(SamplePath { grid, values })
    }

    pub fn from_fn(grid: TimeGrid<T>, f: impl Fn(T) -> T) -> Self {
        let values = (0..grid.len()).map(|k| f(grid.time(k))).collect();
        SamplePath { grid, values }
    }

    pub fn zeros(grid: TimeGrid<T>) -> Self {
        SamplePath {
            grid,
            values: vec![T::zero(); grid.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last(&self) -> T {
        *self.values.last().expect("nonempty path")
    }

    pub fn sup_distance(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }
}

/// Full configuration of one replication.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig<T> {
    pub system: SystemKind,
    pub drifts: DriftSpec<T>,
    pub x0: InitialPositions<T>,
    pub grid: TimeGrid<T>,
    pub seed: u64,
    pub replication: u64,
    pub picard_tol: T,
    /// Corner threshold η.
    pub eta: T,
    /// Excursion threshold ε.
    pub epsilon: T,
    pub max_iter: usize,
}

impl<T: Real> SimConfig<T> {
    /// Configuration with defaults `η = 3√dt`, `ε = 10η`, tolerance `1e−10`, 200 iterations.
    pub fn new(
        system: SystemKind,
        drifts: DriftSpec<T>,
        x0: InitialPositions<T>,
        grid: TimeGrid<T>,
    ) -> Self {
        let eta = T::lit(3.0) * grid.dt.sqrt();
        SimConfig {
            system,
            drifts,
            x0,
            grid,
            seed: 0,
            replication: 0,
            picard_tol: T::lit(1e-10),
            eta,
            epsilon: T::lit(10.0) * eta,
            max_iter: 200,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_replication(mut self, replication: u64) -> Self {
        self.replication = replication;
        self
    }

    pub fn with_eta(mut self, eta: T) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_epsilon(mut self, epsilon: T) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_picard_tol(mut self, tol: T) -> Self {
        self.picard_tol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        InitialPositions::new(self.x0.x)?;
        DriftSpec::new(self.drifts.delta)?;
        TimeGrid::new(self.grid.dt, self.grid.n_steps)?;
        if !(self.picard_tol > T::zero()) {
            return invalid("picard_tol must be positive");
        }
        if !(self.eta > T::zero()) {
            return invalid("eta must be positive");
        }
        if !(self.epsilon > self.picard_tol) {
            return invalid("epsilon must exceed picard_tol");
        }
        if self.max_iter == 0 {
            return invalid("max_iter must be positive");
        }
        Ok(())
    }

    pub fn reflection(&self) -> ReflectionSpec<T> {
        reflection_spec(self.system, &self.drifts)
    }
}
