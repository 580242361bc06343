//! Rank construction for the three systems, collision detection, and the
//! excursion unfolding of ranks into names.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{SamplePath, SimConfig, SystemKind, TimeGrid};
use crate::scalar::Real;
use crate::skorokhod::{solve_coupled_regulators, GapPair, RegulatorPair, RegulatorStepper};

/// Generator of the Brownian increments of one replication.
pub fn path_rng(seed: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * replication);
    rng
}

/// Generator of the unfolding coins; independent of [`path_rng`].
pub fn coin_rng(seed: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * replication + 1);
    rng
}

/// Signed coefficients of the Brownian components in the drivers `(z1, z2)`.
fn driver_coefficients<T: Real>(kind: SystemKind) -> [[T; 2]; 2] {
    let mut c = [[T::zero(); 2]; 2];
    for (gap, (upper, lower)) in [(0, 1), (1, 2)].into_iter().enumerate() {
        if let Some(i) = kind.noise_of_rank(upper) {
            c[gap][i] += T::one();
        }
        if let Some(i) = kind.noise_of_rank(lower) {
            c[gap][i] -= T::one();
        }
    }
    c
}

/// Ranked paths with the regulators, gaps and driving Brownian motions that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTriple<T> {
    pub kind: SystemKind,
    pub r: [SamplePath<T>; 3],
    pub regulators: RegulatorPair<T>,
    pub gaps: GapPair<T>,
    /// `W` for the one-noise systems, `(W1, W3)` for the middle-ballistic system.
    pub brownian: Vec<SamplePath<T>>,
    pub iterations: usize,
    /// Tolerance used for zero tests on the gaps.
    pub tol: T,
}

impl<T: Real> RankTriple<T> {
    pub fn grid(&self) -> TimeGrid<T> {
        self.r[0].grid
    }
}

/// Samples the driving Brownian paths of `config`.
pub fn sample_brownian<T: Real>(config: &SimConfig<T>) -> Vec<SamplePath<T>>
where
    StandardNormal: Distribution<T>,
{
    let grid = config.grid;
    let nb = config.system.brownian_count();
    let sd = grid.dt.sqrt();
    let mut rng = path_rng(config.seed, config.replication);
    let mut paths: Vec<Vec<T>> = (0..nb)
        .map(|_| {
            let mut v = Vec::with_capacity(grid.len());
            v.push(T::zero());
            v
        })
        .collect();
    for k in 1..grid.len() {
        for p in paths.iter_mut() {
            let z: T = StandardNormal.sample(&mut rng);
            let prev = p[k - 1];
            p.push(prev + sd * z);
        }
    }
    paths
        .into_iter()
        .map(|values| SamplePath { grid, values })
        .collect()
}

/// Drivers `(z1, z2)` built from the gap drift and the Brownian paths.
pub fn drivers<T: Real>(
    kind: SystemKind,
    m: [T; 2],
    brownian: &[SamplePath<T>],
) -> (SamplePath<T>, SamplePath<T>) {
    let grid = brownian[0].grid;
    let c = driver_coefficients::<T>(kind);
    let build = |j: usize| {
        let values = (0..grid.len())
            .map(|k| {
                let noise = brownian
                    .iter()
                    .enumerate()
                    .fold(T::zero(), |s, (i, w)| s + c[j][i] * w.values[k]);
                m[j] * grid.time(k) + noise
            })
            .collect();
        SamplePath { grid, values }
    };
    (build(0), build(1))
}

/// Leader rank `R1 = x1 + δ1·t + noise + split·(A, Γ)`; the other ranks follow from the gaps.
fn leader<T: Real>(kind: SystemKind, x1: T, d1: T, t: T, noise: T, a: T, gamma: T) -> T {
    let s = kind.split::<T>();
    x1 + d1 * t + noise + s.a[0] * a + s.gamma[0] * gamma
}

/// Builds ranks from the leader path and the gaps, so that ordering is exact.
pub fn assemble_ranks<T: Real>(
    config: &SimConfig<T>,
    regulators: RegulatorPair<T>,
    gaps: GapPair<T>,
    brownian: Vec<SamplePath<T>>,
    iterations: usize,
    tol: T,
) -> RankTriple<T> {
    let grid = config.grid;
    let kind = config.system;
    let n = grid.len();
    let mut r = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for k in 0..n {
        let noise = kind
            .noise_of_rank(0)
            .map_or(T::zero(), |i| brownian[i].values[k]);
        let r1 = leader(
            kind,
            config.x0.x[0],
            config.drifts.delta[0],
            grid.time(k),
            noise,
            regulators.a.values[k],
            regulators.gamma.values[k],
        );
        let r2 = r1 - gaps.g.values[k];
        let r3 = r2 - gaps.h.values[k];
        r[0].push(r1);
        r[1].push(r2);
        r[2].push(r3);
    }
    let [r1, r2, r3] = r;
    RankTriple {
        kind,
        r: [
            SamplePath { grid, values: r1 },
            SamplePath { grid, values: r2 },
            SamplePath { grid, values: r3 },
        ],
        regulators,
        gaps,
        brownian,
        iterations,
        tol,
    }
}

/// Effective Picard tolerance `tol·(1 + scale)` with `scale` the sup of the drivers.
pub fn scaled_tolerance<T: Real>(tol: T, z1: &SamplePath<T>, z2: &SamplePath<T>) -> T {
    let scale = z1
        .values
        .iter()
        .chain(&z2.values)
        .fold(T::zero(), |m, v| m.max(v.abs()));
    tol * (T::one() + scale)
}

/// Samples the Brownian drivers of `config`, solves the coupled regulators and assembles the ranks.
pub fn simulate_ranks<T: Real>(config: &SimConfig<T>) -> Result<RankTriple<T>>
where
    StandardNormal: Distribution<T>,
{
    config.validate()?;
    let spec = config.reflection();
    let brownian = sample_brownian(config);
    let (z1, z2) = drivers(config.system, spec.m, &brownian);
    let (g0, h0) = config.x0.gaps();
    let tol = scaled_tolerance(config.picard_tol, &z1, &z2);
    let sol = solve_coupled_regulators(&spec, &z1, &z2, g0, h0, tol, config.max_iter)?;
    Ok(assemble_ranks(
        config,
        sol.regulators,
        sol.gaps,
        brownian,
        sol.iterations,
        tol,
    ))
}

/// State of a [`RankStream`] at grid index `k`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepState<T> {
    pub k: usize,
    pub t: T,
    pub g: T,
    pub h: T,
    pub a: T,
    pub gamma: T,
    /// Regulator increments over `(t_{k−1}, t_k]`.
    pub da: T,
    pub dgamma: T,
    pub r: [T; 3],
    /// Brownian values at `t_k`.
    pub noise: [T; 2],
    /// Brownian increments over `(t_{k−1}, t_k]`.
    pub dnoise: [T; 2],
}

/// Streaming simulation of one replication, one grid step at a time.
///
/// Uses the same random stream as [`sample_brownian`] and solves the coupled
/// regulators exactly at each step, so no path storage is needed.
pub struct RankStream<T> {
    kind: SystemKind,
    x1: T,
    d1: T,
    g0: T,
    h0: T,
    m: [T; 2],
    q12: T,
    q21: T,
    coef: [[T; 2]; 2],
    dt: T,
    sd: T,
    n_steps: usize,
    nb: usize,
    rng: ChaCha8Rng,
    stepper: RegulatorStepper<T>,
    state: StepState<T>,
}

impl<T: Real> RankStream<T>
where
    StandardNormal: Distribution<T>,
{
    pub fn new(config: &SimConfig<T>) -> Result<Self> {
        config.validate()?;
        let spec = config.reflection();
        let (g0, h0) = config.x0.gaps();
        let state = StepState {
            g: g0,
            h: h0,
            r: config.x0.x,
            ..StepState::default()
        };
        Ok(RankStream {
            kind: config.system,
            x1: config.x0.x[0],
            d1: config.drifts.delta[0],
            g0,
            h0,
            m: spec.m,
            q12: spec.q12(),
            q21: spec.q21(),
            coef: driver_coefficients(config.system),
            dt: config.grid.dt,
            sd: config.grid.dt.sqrt(),
            n_steps: config.grid.n_steps,
            nb: config.system.brownian_count(),
            rng: path_rng(config.seed, config.replication),
            stepper: RegulatorStepper::new(spec.q12(), spec.q21()),
            state,
        })
    }

    pub fn state(&self) -> &StepState<T> {
        &self.state
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    /// Advances one step; returns `None` after the last grid index.
    #[inline]
    pub fn advance(&mut self) -> Option<&StepState<T>> {
        if self.state.k >= self.n_steps {
            return None;
        }
        let s = &mut self.state;
        s.k += 1;
        s.t = T::from_usize(s.k).expect("index fits") * self.dt;
        for i in 0..self.nb {
            let z: T = StandardNormal.sample(&mut self.rng);
            let d = self.sd * z;
            s.dnoise[i] = d;
            s.noise[i] += d;
        }
        let z1 = self.m[0] * s.t + self.coef[0][0] * s.noise[0] + self.coef[0][1] * s.noise[1];
        let z2 = self.m[1] * s.t + self.coef[1][0] * s.noise[0] + self.coef[1][1] * s.noise[1];
        let (u, v) = (-self.g0 - z1, -self.h0 - z2);
        let (a0, g0) = (self.stepper.a, self.stepper.gamma);
        let (a, gamma) = self.stepper.step(u, v);
        let (q12, q21) = (self.q12, self.q21);
        s.da = a - a0;
        s.dgamma = gamma - g0;
        s.a = a;
        s.gamma = gamma;
        s.g = (a - u - q12 * gamma).max(T::zero());
        s.h = (gamma - v - q21 * a).max(T::zero());
        let noise = self.kind.noise_of_rank(0).map_or(T::zero(), |i| s.noise[i]);
        let r1 = leader(self.kind, self.x1, self.d1, s.t, noise, a, gamma);
        let r2 = r1 - s.g;
        s.r = [r1, r2, r2 - s.h];
        Some(&self.state)
    }
}

/// Collision statistics of one run.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct CollisionReport<T> {
    /// First index with G + H ≤ η.
    pub first_triple_collision: Option<usize>,
    /// Indices with G ≤ η.
    pub g_collisions: usize,
    /// Indices with H ≤ η.
    pub h_collisions: usize,
    /// Indices with G + H ≤ η.
    pub corner_visits: usize,
    pub min_sum: T,
}

/// Streaming accumulator behind [`detect_collisions`].
#[derive(Clone, Copy, Debug)]
pub struct CollisionTracker<T> {
    eta: T,
    pub report: CollisionReport<T>,
}

impl<T: Real> CollisionTracker<T> {
    pub fn new(eta: T) -> Self {
        CollisionTracker {
            eta,
            report: CollisionReport {
                first_triple_collision: None,
                g_collisions: 0,
                h_collisions: 0,
                corner_visits: 0,
                min_sum: T::infinity(),
            },
        }
    }

    #[inline]
    pub fn push(&mut self, k: usize, g: T, h: T) {
        let r = &mut self.report;
        let s = g + h;
        r.min_sum = r.min_sum.min(s);
        r.g_collisions += usize::from(g <= self.eta);
        r.h_collisions += usize::from(h <= self.eta);
        if s <= self.eta {
            r.corner_visits += 1;
            r.first_triple_collision.get_or_insert(k);
        }
    }
}

/// Scans the gaps for collisions at resolution `eta`.
pub fn detect_collisions<T: Real>(ranks: &RankTriple<T>, eta: T) -> Result<CollisionReport<T>> {
    if !(eta > T::zero()) {
        return Err(Error::InvalidParameter("eta must be positive".into()));
    }
    let mut tr = CollisionTracker::new(eta);
    for (k, (&g, &h)) in ranks.gaps.g.values.iter().zip(&ranks.gaps.h.values).enumerate() {
        tr.push(k, g, h);
    }
    Ok(tr.report)
}

/// Assignment of names to ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Permutation {
    /// `rank_of[i]` is the (0-based) rank occupied by name `i`.
    pub rank_of: [u8; 3],
}

impl Default for Permutation {
    fn default() -> Self {
        Permutation { rank_of: [0, 1, 2] }
    }
}

impl Permutation {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn name_at(&self, rank: usize) -> usize {
        self.rank_of
            .iter()
            .position(|&r| r as usize == rank)
            .expect("valid permutation")
    }

    /// Exchanges the names occupying two ranks.
    pub fn swap_ranks(&mut self, r1: usize, r2: usize) {
        let (a, b) = (self.name_at(r1), self.name_at(r2));
        self.rank_of.swap(a, b);
    }

    /// 0/1 matrix with entry `(i, k)` set when name `i` occupies rank `k`.
    pub fn matrix(&self) -> [[u8; 3]; 3] {
        let mut m = [[0; 3]; 3];
        for (i, &k) in self.rank_of.iter().enumerate() {
            m[i][k as usize] = 1;
        }
        m
    }

    pub fn is_valid(&self) -> bool {
        let mut seen = [false; 3];
        for &k in &self.rank_of {
            if k > 2 || seen[k as usize] {
                return false;
            }
            seen[k as usize] = true;
        }
        true
    }
}

/// Swap drawn at an excursion start.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transposition {
    /// Names in ranks 1 and 2 exchanged.
    P12,
    /// Names in ranks 2 and 3 exchanged.
    P23,
}

/// State machine of the ε-unfolding.
#[derive(Clone, Debug)]
pub struct Unfolder<T> {
    eps: T,
    tol: T,
    searching: bool,
    last_g_zero: Option<usize>,
    last_h_zero: Option<usize>,
    pub perm: Permutation,
    pub excursions: usize,
    pub swaps: usize,
}

impl<T: Real> Unfolder<T> {
    pub fn new(eps: T, tol: T) -> Result<Self> {
        if !(eps > tol) {
            return Err(Error::InvalidParameter(format!(
                "epsilon ({eps}) must exceed the zero tolerance ({tol})"
            )));
        }
        Ok(Unfolder {
            eps,
            tol,
            searching: true,
            last_g_zero: None,
            last_h_zero: None,
            perm: Permutation::identity(),
            excursions: 0,
            swaps: 0,
        })
    }

    /// Processes index `k`; returns the swap applied there, if any.
    #[inline]
    pub fn push<R: Rng>(&mut self, k: usize, g: T, h: T, coins: &mut R) -> Option<Transposition> {
        if g <= self.tol {
            self.last_g_zero = Some(k);
        }
        if h <= self.tol {
            self.last_h_zero = Some(k);
        }
        let low = g.min(h);
        if !self.searching {
            if low <= self.tol {
                self.searching = true;
            }
            return None;
        }
        if low < self.eps {
            return None;
        }
        self.searching = false;
        self.excursions += 1;
        let t = match (self.last_g_zero, self.last_h_zero) {
            (Some(a), Some(b)) if a == b => return None,
            (Some(a), b) if b.is_none_or(|b| a > b) => Transposition::P12,
            (_, Some(_)) => Transposition::P23,
            _ => return None,
        };
        if !coins.random_bool(0.5) {
            return None;
        }
        match t {
            Transposition::P12 => self.perm.swap_ranks(0, 1),
            Transposition::P23 => self.perm.swap_ranks(1, 2),
        }
        self.swaps += 1;
        Some(t)
    }
}

/// Unfolded name paths.
#[derive(Clone, Debug, PartialEq)]
pub struct NameTriple<T> {
    pub kind: SystemKind,
    pub x: [SamplePath<T>; 3],
    pub z_path: Vec<Permutation>,
    pub b: [SamplePath<T>; 3],
    /// Indices where the assignment changed.
    pub swap_indices: Vec<usize>,
}

/// Reconstructs name paths from ranks with the ε-approximate unfolding.
pub fn unfold_names<T: Real, R: Rng>(
    ranks: &RankTriple<T>,
    epsilon: T,
    rng: &mut R,
) -> Result<NameTriple<T>> {
    if ranks.kind == SystemKind::SkewElastic {
        return Err(Error::InvalidParameter(
            "names are not constructed for the skew-elastic system".into(),
        ));
    }
    let mut un = Unfolder::new(epsilon, ranks.tol)?;
    let grid = ranks.grid();
    let n = grid.len();
    let mut x = [vec![], vec![], vec![]];
    let mut b = [vec![T::zero()], vec![T::zero()], vec![T::zero()]];
    let mut z_path = Vec::with_capacity(n);
    let mut swap_indices = vec![];
    for k in 0..n {
        if un
            .push(k, ranks.gaps.g.values[k], ranks.gaps.h.values[k], rng)
            .is_some()
        {
            swap_indices.push(k);
        }
        let p = un.perm;
        for i in 0..3 {
            x[i].push(ranks.r[p.rank_of[i] as usize].values[k]);
        }
        if k + 1 < n {
            for i in 0..3 {
                let inc = ranks
                    .kind
                    .noise_of_rank(p.rank_of[i] as usize)
                    .map_or(T::zero(), |j| {
                        ranks.brownian[j].values[k + 1] - ranks.brownian[j].values[k]
                    });
                let prev = b[i][k];
                b[i].push(prev + inc);
            }
        }
        z_path.push(p);
    }
    let wrap = |v: Vec<T>| SamplePath { grid, values: v };
    let [x1, x2, x3] = x;
    let [b1, b2, b3] = b;
    Ok(NameTriple {
        kind: ranks.kind,
        x: [wrap(x1), wrap(x2), wrap(x3)],
        z_path,
        b: [wrap(b1), wrap(b2), wrap(b3)],
        swap_indices,
    })
}

/// z-scores of the reconstructed Brownian motions.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct BrownianReport {
    /// Number of noisy increments of each name.
    pub noisy_steps: [usize; 3],
    /// `(QV − n·dt)/(dt·√(2n))` per name.
    pub qv_z: [f64; 3],
    /// Lag-1 autocorrelation of the noisy increments times `√n`, per name.
    pub lag1_z: [f64; 3],
    /// Pairwise increment correlation times `√N` for pairs (1,2), (1,3), (2,3).
    pub pair_z: [f64; 3],
}

impl BrownianReport {
    pub fn max_abs_z(&self) -> f64 {
        self.qv_z
            .iter()
            .chain(&self.lag1_z)
            .chain(&self.pair_z)
            .fold(0.0, |m, z| m.max(z.abs()))
    }
}

/// Checks quadratic variation and increment correlations of the reconstructed `B_i`.
pub fn verify_recovered_brownians<T: Real>(names: &NameTriple<T>, grid: TimeGrid<T>) -> BrownianReport {
    let dt = grid.dt.to_f64().unwrap_or(f64::NAN);
    let n = names.b[0].len();
    let noisy = |i: usize, k: usize| {
        names
            .kind
            .noise_of_rank(names.z_path[k].rank_of[i] as usize)
            .is_some()
    };
    let inc = |i: usize, k: usize| {
        (names.b[i].values[k + 1] - names.b[i].values[k])
            .to_f64()
            .unwrap_or(f64::NAN)
    };
    let mut rep = BrownianReport {
        noisy_steps: [0; 3],
        qv_z: [0.0; 3],
        lag1_z: [0.0; 3],
        pair_z: [0.0; 3],
    };
    for i in 0..3 {
        let xs: Vec<f64> = (0..n - 1).filter(|&k| noisy(i, k)).map(|k| inc(i, k)).collect();
        let m = xs.len();
        rep.noisy_steps[i] = m;
        if m < 2 {
            continue;
        }
        let qv: f64 = xs.iter().map(|x| x * x).sum();
        rep.qv_z[i] = (qv - m as f64 * dt) / (dt * (2.0 * m as f64).sqrt());
        let lag: f64 = xs.windows(2).map(|w| w[0] * w[1]).sum();
        rep.lag1_z[i] = lag / qv * (m as f64).sqrt();
    }
    for (slot, (i, j)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
        let (mut sxy, mut sxx, mut syy, mut both) = (0.0, 0.0, 0.0, 0usize);
        for k in 0..n - 1 {
            if noisy(i, k) && noisy(j, k) {
                let (x, y) = (inc(i, k), inc(j, k));
                sxy += x * y;
                sxx += x * x;
                syy += y * y;
                both += 1;
            }
        }
        if both > 1 && sxx > 0.0 && syy > 0.0 {
            rep.pair_z[slot] = sxy / (sxx * syy).sqrt() * (both as f64).sqrt();
        }
    }
    rep
}
