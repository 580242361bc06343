//! Monte Carlo estimators and goodness-of-fit tests.
//!
//! Long runs are summarised on the fly by [`summarize_replication`], which
//! drives a [`RankStream`] and feeds every accumulator one grid step at a
//! time; the ensemble estimators then work on the per-replication summaries.
//! Stationary quantities use the window after the burn-in fraction of the
//! horizon, and standard errors come from the spread across replications.

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Gamma};
use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::analysis::{corner_constants, lambert_u, ItoAccumulator, ItoForm, ItoReport};
use crate::error::{invalid, Error, Result};
use crate::model::{reflection_spec, stationarity_check, DriftSpec, SamplePath, SimConfig, SystemKind};
use crate::systems::{coin_rng, CollisionReport, CollisionTracker, NameTriple, RankStream, RankTriple, Unfolder};

// ---------------------------------------------------------------------------
// elementary statistics

/// Mean with its standard error over independent replications.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
    pub ci95: [f64; 2],
}

impl MeanSe {
    pub fn from_values(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            f64::NAN
        };
        MeanSe {
            mean,
            se,
            n,
            ci95: [mean - 1.96 * se, mean + 1.96 * se],
        }
    }

    /// `(mean − target)/se`.
    pub fn z(&self, target: f64) -> f64 {
        (self.mean - target) / self.se
    }

    pub fn rel_err(&self, target: f64) -> f64 {
        ((self.mean - target) / target).abs()
    }
}

/// One-sample Kolmogorov–Smirnov distance against a continuous CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// 95% critical value of the one-sample KS distance for `n` samples (Stephens' form).
pub fn ks_critical_95(n: usize) -> f64 {
    let s = (n as f64).sqrt();
    1.358 / (s + 0.12 + 0.11 / s)
}

/// Integrated autocorrelation time of a series sampled every `interval`.
///
/// Autocorrelations are summed up to the first non-positive lag.
pub fn autocorrelation_time(series: &[f64], interval: f64) -> f64 {
    let n = series.len();
    if n < 4 {
        return interval;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let var = c.iter().map(|x| x * x).sum::<f64>() / n as f64;
    if var == 0.0 {
        return interval;
    }
    let mut tau = 1.0;
    for lag in 1..n / 4 {
        let rho = c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>()
            / (n as f64 * var);
        if rho <= 0.0 {
            break;
        }
        tau += 2.0 * rho;
    }
    tau * interval
}

/// Fixed-width histogram.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn centers(&self) -> Vec<f64> {
        (0..self.density.len())
            .map(|i| self.lo + (i as f64 + 0.5) * self.width)
            .collect()
    }
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

/// Density histogram on `[0, max]` with the Freedman–Diaconis bin width.
pub fn freedman_diaconis(samples: &[f64]) -> Result<Histogram> {
    if samples.len() < 4 {
        return Err(Error::InsufficientSamples("histogram needs at least 4 samples".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let iqr = quantile(&xs, 0.75) - quantile(&xs, 0.25);
    let max = *xs.last().expect("nonempty");
    let mut width = 2.0 * iqr / (xs.len() as f64).cbrt();
    if !(width > 0.0) {
        width = (max.max(1e-12)) / 10.0;
    }
    let bins = ((max / width).ceil() as usize).clamp(1, 100_000);
    let mut counts = vec![0usize; bins];
    for &x in &xs {
        counts[((x / width) as usize).min(bins - 1)] += 1;
    }
    let norm = xs.len() as f64 * width;
    Ok(Histogram {
        lo: 0.0,
        width,
        density: counts.into_iter().map(|c| c as f64 / norm).collect(),
    })
}

fn pearson(xs: &[[f64; 2]]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = xs.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0] / n, b + p[1] / n));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for p in xs {
        sxy += (p[0] - mx) * (p[1] - my);
        sxx += (p[0] - mx).powi(2);
        syy += (p[1] - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

// ---------------------------------------------------------------------------
// streaming accumulators shared by path-based and streaming estimators

/// Counts downcrossings of `[level, level + u]`.
#[derive(Clone, Copy, Debug)]
pub struct DowncrossingCounter {
    level: f64,
    u: f64,
    armed: bool,
    pub count: u64,
}

impl DowncrossingCounter {
    pub fn new(level: f64, u: f64) -> Self {
        DowncrossingCounter {
            level,
            u,
            armed: false,
            count: 0,
        }
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        if x >= self.level + self.u {
            self.armed = true;
        } else if self.armed && x <= self.level {
            self.armed = false;
            self.count += 1;
        }
    }

    /// `u · count`.
    pub fn estimate(&self) -> f64 {
        self.u * self.count as f64
    }
}

/// Rescaled number of downcrossings of `[level, level + u]` by `path`.
pub fn downcrossing_local_time(path: &SamplePath<f64>, level: f64, u: f64) -> Result<f64> {
    if !(u > 0.0) {
        return invalid("downcrossing width u must be positive");
    }
    let mut c = DowncrossingCounter::new(level, u);
    path.values.iter().for_each(|&x| c.push(x));
    Ok(c.estimate())
}

/// Occupation functional of the corner `φ(ρ, θ) < ε` for several `ε`.
#[derive(Clone, Debug)]
pub struct CornerOccupation {
    alpha: f64,
    theta1: f64,
    eps: Vec<f64>,
    pub sums: Vec<f64>,
}

impl CornerOccupation {
    pub fn new(eps: Vec<f64>) -> Self {
        let c = corner_constants::<f64>();
        CornerOccupation {
            alpha: c.alpha,
            theta1: c.theta1,
            sums: vec![0.0; eps.len()],
            eps,
        }
    }

    /// Skips the trigonometry unless `ρ^α` is below the largest threshold.
    #[inline]
    pub fn push(&mut self, g: f64, h: f64, dt: f64) {
        let rho = g.hypot(h);
        let ra = rho.powf(self.alpha);
        let cos_min = 2.0 / 5f64.sqrt();
        if self.eps.iter().all(|&e| ra * cos_min >= e) {
            return;
        }
        let theta = h.atan2(g);
        let cos = (self.alpha * theta - self.theta1).cos();
        let phi = ra * cos;
        let w = cos.powf(2.0 / self.alpha - 2.0) * dt;
        for (s, &e) in self.sums.iter_mut().zip(&self.eps) {
            if phi < e {
                *s += w;
            }
        }
    }

    /// `(α(2−α)/2)·ε^(1−2/α)·Σ cos(αθ−θ1)^(2/α−2)·1{φ<ε}·dt` per `ε`.
    pub fn estimates(&self) -> Vec<f64> {
        let a = self.alpha;
        self.eps
            .iter()
            .zip(&self.sums)
            .map(|(&e, &s)| a * (2.0 - a) / 2.0 * e.powf(1.0 - 2.0 / a) * s)
            .collect()
    }
}

/// Corner occupation estimates of a middle-ballistic run with equal drifts.
pub fn corner_occupation_estimate(
    ranks: &RankTriple<f64>,
    drifts: &DriftSpec<f64>,
    epsilon_seq: &[f64],
) -> Result<Vec<f64>> {
    let [d1, d2, d3] = drifts.delta;
    if ranks.kind != SystemKind::MiddleBallistic || d1 != d2 || d2 != d3 {
        return invalid("corner occupation needs the middle-ballistic system with equal drifts");
    }
    let dt = ranks.grid().dt;
    let mut acc = CornerOccupation::new(epsilon_seq.to_vec());
    let (g, h) = (&ranks.gaps.g.values, &ranks.gaps.h.values);
    for k in 1..g.len() {
        acc.push(g[k], h[k], dt);
    }
    Ok(acc.estimates())
}

/// Time spent by each name in each rank from a starting index on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct OccupancyCounter {
    pub counts: [[u64; 3]; 3],
}

impl OccupancyCounter {
    #[inline]
    pub fn push(&mut self, rank_of: [u8; 3]) {
        for (i, &k) in rank_of.iter().enumerate() {
            self.counts[i][k as usize] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts[0].iter().sum()
    }

    pub fn merge(&mut self, o: &OccupancyCounter) {
        for i in 0..3 {
            for k in 0..3 {
                self.counts[i][k] += o.counts[i][k];
            }
        }
    }

    pub fn fractions(&self) -> [[f64; 3]; 3] {
        let n = self.total().max(1) as f64;
        let mut f = [[0.0; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                f[i][k] = self.counts[i][k] as f64 / n;
            }
        }
        f
    }
}

/// Fraction of grid indices `≥ after_index` spent by name `i` in rank `k`.
pub fn occupancy_fractions<T>(names: &NameTriple<T>, after_index: usize) -> [[f64; 3]; 3] {
    let mut c = OccupancyCounter::default();
    names.z_path.iter().skip(after_index).for_each(|p| c.push(p.rank_of));
    c.fractions()
}

// ---------------------------------------------------------------------------
// per-replication summaries

/// What [`summarize_replication`] records.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationOptions {
    /// Fraction of the horizon discarded before stationary estimation.
    pub burn_in: f64,
    /// Points `(α1, α2)` of the joint Laplace transform.
    pub laplace_points: Vec<[f64; 2]>,
    /// Arguments of the boundary Laplace transforms.
    pub boundary_alphas: Vec<f64>,
    /// Evaluate the joint Laplace transform every this many steps.
    pub laplace_stride: usize,
    /// Time between recorded `(G, H)` samples in the stationary window; `0` records none.
    pub record_interval: f64,
    pub ito: bool,
    /// Excursion thresholds of the unfoldings run alongside the path.
    pub unfold_epsilons: Vec<f64>,
    /// Widths `u` of the downcrossing counters of `G + H` at level 0.
    pub downcrossing_widths: Vec<f64>,
    pub corner_epsilons: Vec<f64>,
    /// Stop the run at the first triple collision.
    pub stop_at_collision: bool,
}

impl Default for ReplicationOptions {
    fn default() -> Self {
        ReplicationOptions {
            burn_in: 0.5,
            laplace_points: vec![],
            boundary_alphas: vec![0.0],
            laplace_stride: 1,
            record_interval: 0.0,
            ito: false,
            unfold_epsilons: vec![],
            downcrossing_widths: vec![],
            corner_epsilons: vec![],
            stop_at_collision: false,
        }
    }
}

impl ReplicationOptions {
    /// Adds the Laplace points needed by the functional equation at `(α1, α2)`,
    /// with the diagonal points and matching boundary arguments.
    pub fn with_functional_points(mut self, points: &[[f64; 2]]) -> Self {
        for &[a1, a2] in points {
            for p in [[a1, a2], [a1, a1], [a2, a2], [a1, 0.0], [a2, 0.0]] {
                if !self.laplace_points.contains(&p) {
                    self.laplace_points.push(p);
                }
            }
            for a in [a1, a2] {
                if !self.boundary_alphas.contains(&a) {
                    self.boundary_alphas.push(a);
                }
            }
        }
        self
    }
}

/// Unfolding outcome for one excursion threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OccupancyResult {
    pub epsilon: f64,
    /// Occupancy from the first triple collision on.
    pub after_collision: OccupancyCounter,
    pub swaps: usize,
    pub excursions: usize,
}

/// Per-run estimates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationSummary {
    pub replication: u64,
    pub horizon: f64,
    pub steps: usize,
    /// `(A(T)/T, Γ(T)/T)`.
    pub lambda_hat: [f64; 2],
    pub regulators: [f64; 2],
    /// Length of the stationary window.
    pub window: f64,
    /// Regulator increments over the stationary window.
    pub window_regulators: [f64; 2],
    /// Window averages of `G`, `H`, `G + H`.
    pub gap_means: [f64; 3],
    pub collision: CollisionReport<f64>,
    pub first_collision_time: Option<f64>,
    /// Minimum over `t > 0` of `½(A+Γ) − (x3 − x1 + (δ3 − δ1)t)`.
    pub min_lga_margin: f64,
    pub occupancy: Vec<OccupancyResult>,
    /// `((α1, α2), π̂(α1, α2))`.
    pub laplace: Vec<([f64; 2], f64)>,
    /// `(α, [ν̂1(α), ν̂2(α)])`.
    pub boundary_laplace: Vec<(f64, [f64; 2])>,
    pub record_interval: f64,
    /// `(G, H)` every `record_interval` in the window.
    pub samples: Vec<[f64; 2]>,
    pub ito: Option<ItoAccumulator>,
    /// Downcrossing counts of `G + H` at level 0 per width.
    pub downcrossings: Vec<u64>,
    pub corner_occupation: Vec<f64>,
}

impl ReplicationSummary {
    pub fn laplace_at(&self, a1: f64, a2: f64) -> Option<f64> {
        self.laplace.iter().find(|(p, _)| *p == [a1, a2]).map(|(_, v)| *v)
    }

    pub fn boundary_at(&self, a: f64) -> Option<[f64; 2]> {
        self.boundary_laplace.iter().find(|(x, _)| *x == a).map(|(_, v)| *v)
    }
}

/// Runs one replication through a [`RankStream`] and summarises it.
pub fn summarize_replication(config: &SimConfig<f64>, opts: &ReplicationOptions) -> Result<ReplicationSummary> {
    if !(0.0..1.0).contains(&opts.burn_in) {
        return invalid("burn_in must lie in [0, 1)");
    }
    let spec = reflection_spec(config.system, &config.drifts);
    let mut stream = RankStream::new(config)?;
    let dt = config.grid.dt;
    let n = config.grid.n_steps;
    let burn = ((n as f64) * opts.burn_in).floor() as usize;
    let window = (n - burn) as f64 * dt;
    let record_every = if opts.record_interval > 0.0 {
        ((opts.record_interval / dt).round() as usize).max(1)
    } else {
        0
    };
    let stride = opts.laplace_stride.max(1);
    let [x1, _, x3] = config.x0.x;
    let [d1, _, d3] = config.drifts.delta;

    let mut collisions = CollisionTracker::new(config.eta);
    collisions.push(0, stream.state().g, stream.state().h);
    let mut unfolders: Vec<(Unfolder<f64>, rand_chacha::ChaCha8Rng, OccupancyCounter)> = opts
        .unfold_epsilons
        .iter()
        .map(|&e| {
            Ok((
                Unfolder::new(e, config.picard_tol)?,
                coin_rng(config.seed, config.replication),
                OccupancyCounter::default(),
            ))
        })
        .collect::<Result<_>>()?;
    if !unfolders.is_empty() && config.system == SystemKind::SkewElastic {
        return invalid("names are not constructed for the skew-elastic system");
    }
    for (un, rng, _) in unfolders.iter_mut() {
        un.push(0, stream.state().g, stream.state().h, rng);
    }
    let ito_form = if opts.ito {
        Some(ItoForm::new(config.system, spec.lambda)?)
    } else {
        None
    };
    let mut ito = ItoAccumulator::new(dt);
    let mut dcs: Vec<DowncrossingCounter> = opts
        .downcrossing_widths
        .iter()
        .map(|&u| DowncrossingCounter::new(0.0, u))
        .collect();
    for d in dcs.iter_mut() {
        d.push(stream.state().g + stream.state().h);
    }
    let mut corner = CornerOccupation::new(opts.corner_epsilons.clone());

    let mut sum_gh = [0.0f64; 3];
    let mut lap_sums = vec![0.0f64; opts.laplace_points.len()];
    let mut lap_count = 0u64;
    let mut bnd_sums = vec![[0.0f64; 2]; opts.boundary_alphas.len()];
    let mut samples = Vec::new();
    let mut reg_at_burn = [0.0f64; 2];
    let mut min_lga = f64::INFINITY;
    let (mut g_prev, mut h_prev) = (stream.state().g, stream.state().h);

    while let Some(s) = stream.advance() {
        let k = s.k;
        let (g, h) = (s.g, s.h);
        collisions.push(k, g, h);
        let lga = 0.5 * (s.a + s.gamma) - (x3 - x1 + (d3 - d1) * s.t);
        min_lga = min_lga.min(lga);
        if let Some(form) = &ito_form {
            let r = form.residual(g_prev, h_prev, g, h, s.dnoise[0], dt);
            ito.push(r, s.da, s.dgamma);
        }
        for d in dcs.iter_mut() {
            d.push(g + h);
        }
        if !opts.corner_epsilons.is_empty() {
            corner.push(g, h, dt);
        }
        if !unfolders.is_empty() {
            let after = collisions.report.first_triple_collision.is_some();
            for (un, rng, occ) in unfolders.iter_mut() {
                un.push(k, g, h, rng);
                if after {
                    occ.push(un.perm.rank_of);
                }
            }
        }
        if k == burn {
            reg_at_burn = [s.a, s.gamma];
        }
        if k > burn {
            sum_gh[0] += g;
            sum_gh[1] += h;
            sum_gh[2] += g + h;
            if (k - burn) % stride == 0 {
                lap_count += 1;
                for (acc, p) in lap_sums.iter_mut().zip(&opts.laplace_points) {
                    *acc += (-p[0] * g - p[1] * h).exp();
                }
            }
            if s.da > 0.0 || s.dgamma > 0.0 {
                for (acc, &al) in bnd_sums.iter_mut().zip(&opts.boundary_alphas) {
                    acc[0] += (-al * h).exp() * s.da;
                    acc[1] += (-al * g).exp() * s.dgamma;
                }
            }
            if record_every > 0 && (k - burn) % record_every == 0 {
                samples.push([g, h]);
            }
        }
        g_prev = g;
        h_prev = h;
        if opts.stop_at_collision && collisions.report.first_triple_collision.is_some() {
            break;
        }
    }
    let s = *stream.state();
    let steps = s.k;
    let horizon = steps as f64 * dt;
    let win_steps = steps.saturating_sub(burn).max(1) as f64;
    let scale = 2.0 / window;
    Ok(ReplicationSummary {
        replication: config.replication,
        horizon,
        steps,
        lambda_hat: [s.a / horizon, s.gamma / horizon],
        regulators: [s.a, s.gamma],
        window,
        window_regulators: [s.a - reg_at_burn[0], s.gamma - reg_at_burn[1]],
        gap_means: sum_gh.map(|x| x / win_steps),
        collision: collisions.report,
        first_collision_time: collisions.report.first_triple_collision.map(|k| k as f64 * dt),
        min_lga_margin: min_lga,
        occupancy: unfolders
            .iter()
            .zip(&opts.unfold_epsilons)
            .map(|(u, &e)| OccupancyResult {
                epsilon: e,
                after_collision: u.2,
                swaps: u.0.swaps,
                excursions: u.0.excursions,
            })
            .collect(),
        laplace: opts
            .laplace_points
            .iter()
            .zip(&lap_sums)
            .map(|(p, s)| (*p, s / lap_count.max(1) as f64))
            .collect(),
        boundary_laplace: opts
            .boundary_alphas
            .iter()
            .zip(&bnd_sums)
            .map(|(&a, s)| (a, [scale * s[0], scale * s[1]]))
            .collect(),
        record_interval: record_every as f64 * dt,
        samples,
        ito: opts.ito.then_some(ito),
        downcrossings: dcs.iter().map(|d| d.count).collect(),
        corner_occupation: corner.estimates(),
    })
}

/// Runs `reps` replications of `config` in parallel, ordered by replication index.
pub fn run_ensemble(
    config: &SimConfig<f64>,
    reps: u64,
    opts: &ReplicationOptions,
) -> Result<Vec<ReplicationSummary>> {
    if reps == 0 {
        return invalid("at least one replication is required");
    }
    (0..reps)
        .into_par_iter()
        .map(|r| summarize_replication(&config.with_replication(r), opts))
        .collect()
}

fn ensure_nonempty(s: &[ReplicationSummary]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::InsufficientSamples("empty replication list".into()));
    }
    Ok(())
}

fn per_rep(s: &[ReplicationSummary], f: impl Fn(&ReplicationSummary) -> f64) -> MeanSe {
    MeanSe::from_values(&s.iter().map(f).collect::<Vec<_>>())
}

// ---------------------------------------------------------------------------
// ensemble estimators

/// Long-run local time rates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LlnReport {
    pub lambda: [f64; 2],
    pub lambda_hat: [MeanSe; 2],
    /// `(2A − Γ)/(2T)` and `(2Γ − A)/(2T)`.
    pub pairwise: [MeanSe; 2],
    /// `(δ2 − δ1, δ3 − δ2)`.
    pub pairwise_target: [f64; 2],
    pub stationary: bool,
}

pub fn lln_rates(s: &[ReplicationSummary], kind: SystemKind, drifts: &DriftSpec<f64>) -> Result<LlnReport> {
    ensure_nonempty(s)?;
    let spec = reflection_spec(kind, drifts);
    let [d1, d2, d3] = drifts.delta;
    Ok(LlnReport {
        lambda: spec.lambda,
        lambda_hat: [per_rep(s, |r| r.lambda_hat[0]), per_rep(s, |r| r.lambda_hat[1])],
        pairwise: [
            per_rep(s, |r| (2.0 * r.regulators[0] - r.regulators[1]) / (2.0 * r.horizon)),
            per_rep(s, |r| (2.0 * r.regulators[1] - r.regulators[0]) / (2.0 * r.horizon)),
        ],
        pairwise_target: [d2 - d1, d3 - d2],
        stationary: stationarity_check(kind, drifts).holds,
    })
}

/// Total masses of the boundary measures.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundaryMassReport {
    pub nu1: MeanSe,
    pub nu2: MeanSe,
    pub sum: MeanSe,
    /// `(2λ1, 2λ2, 4(δ3 − δ1))`.
    pub targets: [f64; 3],
}

pub fn boundary_masses(s: &[ReplicationSummary], drifts: &DriftSpec<f64>) -> Result<BoundaryMassReport> {
    ensure_nonempty(s)?;
    let lam = reflection_spec(SystemKind::MiddleDiffusive, drifts).lambda;
    let [d1, _, d3] = drifts.delta;
    let mass = |r: &ReplicationSummary, j: usize| 2.0 / r.window * r.window_regulators[j];
    Ok(BoundaryMassReport {
        nu1: per_rep(s, |r| mass(r, 0)),
        nu2: per_rep(s, |r| mass(r, 1)),
        sum: per_rep(s, |r| mass(r, 0) + mass(r, 1)),
        targets: [2.0 * lam[0], 2.0 * lam[1], 4.0 * (d3 - d1)],
    })
}

/// Residual of one identity at one point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualRow {
    pub alpha: [f64; 2],
    pub residual: MeanSe,
    /// Size of the largest term entering the residual, for scale.
    pub scale: f64,
    pub z: f64,
}

fn lookup(r: &ReplicationSummary, a1: f64, a2: f64) -> Result<f64> {
    r.laplace_at(a1, a2)
        .ok_or_else(|| Error::InvalidParameter(format!("Laplace point ({a1}, {a2}) was not recorded")))
}

fn lookup_boundary(r: &ReplicationSummary, a: f64) -> Result<[f64; 2]> {
    r.boundary_at(a)
        .ok_or_else(|| Error::InvalidParameter(format!("boundary argument {a} was not recorded")))
}

fn residual_row(
    s: &[ReplicationSummary],
    alpha: [f64; 2],
    f: impl Fn(&ReplicationSummary) -> Result<(f64, f64)>,
) -> Result<ResidualRow> {
    let mut vals = Vec::with_capacity(s.len());
    let mut scale = 0.0f64;
    for r in s {
        let (v, sc) = f(r)?;
        vals.push(v);
        scale = scale.max(sc);
    }
    let residual = MeanSe::from_values(&vals);
    Ok(ResidualRow {
        alpha,
        z: residual.z(0.0),
        residual,
        scale,
    })
}

/// Parabola `(α1−α2)² + 2(δ2−δ1)α1 + 2(δ3−δ2)α2`.
pub fn parabola(drifts: &DriftSpec<f64>, a1: f64, a2: f64) -> f64 {
    let [d1, d2, d3] = drifts.delta;
    (a1 - a2).powi(2) + 2.0 * (d2 - d1) * a1 + 2.0 * (d3 - d2) * a2
}

/// Residuals of the basic adjoint relation in Laplace form at each point.
pub fn laplace_bar_residual(
    s: &[ReplicationSummary],
    drifts: &DriftSpec<f64>,
    points: &[[f64; 2]],
) -> Result<Vec<ResidualRow>> {
    ensure_nonempty(s)?;
    points
        .iter()
        .map(|&[a1, a2]| {
            let p = parabola(drifts, a1, a2);
            if (a1, a2) != (0.0, 0.0) && p.abs() <= 1e-6 {
                return invalid(format!("({a1}, {a2}) lies on the parabola"));
            }
            residual_row(s, [a1, a2], |r| {
                let pi = if (a1, a2) == (0.0, 0.0) { 1.0 } else { lookup(r, a1, a2)? };
                let n1 = lookup_boundary(r, a2)?[0];
                let n2 = lookup_boundary(r, a1)?[1];
                let lhs = p * pi;
                let (t1, t2) = ((a1 - a2 / 2.0) * n1, (a2 - a1 / 2.0) * n2);
                let res = if (a1, a2) == (0.0, 0.0) {
                    let [d1, _, d3] = drifts.delta;
                    1.0 - (r.boundary_at(0.0).map_or(f64::NAN, |b| b[0] + b[1])) / (4.0 * (d3 - d1))
                } else {
                    lhs - t1 - t2
                };
                Ok((res, lhs.abs().max(t1.abs()).max(t2.abs())))
            })
        })
        .collect()
}

/// Residuals of `ν̂1(α) = (2/3)(α + 2(δ2+δ3) − 4δ1)·π̂(2α, α)`.
pub fn trace_relation_residual(
    s: &[ReplicationSummary],
    drifts: &DriftSpec<f64>,
    alphas: &[f64],
) -> Result<Vec<ResidualRow>> {
    ensure_nonempty(s)?;
    let [d1, d2, d3] = drifts.delta;
    alphas
        .iter()
        .map(|&a| {
            residual_row(s, [2.0 * a, a], |r| {
                let nu = lookup_boundary(r, a)?[0];
                let rhs = 2.0 / 3.0 * (a + 2.0 * (d2 + d3) - 4.0 * d1) * lookup(r, 2.0 * a, a)?;
                Ok((nu - rhs, nu.abs().max(rhs.abs())))
            })
        })
        .collect()
}

/// Pooled `(G, H)` samples thinned at the integrated autocorrelation time of `G`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThinnedSamples {
    pub samples: Vec<[f64; 2]>,
    pub tau: f64,
    pub stride: usize,
}

pub fn thinned_samples(s: &[ReplicationSummary]) -> Result<ThinnedSamples> {
    ensure_nonempty(s)?;
    let interval = s[0].record_interval;
    if !(interval > 0.0) || s.iter().all(|r| r.samples.len() < 4) {
        return Err(Error::InsufficientSamples("no recorded (G, H) samples".into()));
    }
    let taus: Vec<f64> = s
        .iter()
        .map(|r| {
            let g: Vec<f64> = r.samples.iter().map(|p| p[0]).collect();
            autocorrelation_time(&g, interval)
        })
        .collect();
    let tau = taus.iter().sum::<f64>() / taus.len() as f64;
    let stride = ((tau / interval).ceil() as usize).max(1);
    let samples = s
        .iter()
        .flat_map(|r| r.samples.iter().step_by(stride).copied())
        .collect();
    Ok(ThinnedSamples { samples, tau, stride })
}

/// KS distance with the matching 95% critical value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KsReport {
    pub distance: f64,
    pub n: usize,
    pub critical95: f64,
}

impl KsReport {
    pub fn new(distance: f64, n: usize) -> Self {
        KsReport {
            distance,
            n,
            critical95: ks_critical_95(n),
        }
    }

    /// Distance over the critical value.
    pub fn ratio(&self) -> f64 {
        self.distance / self.critical95
    }
}

/// Checks of the symmetric case `δ2 − δ1 = δ3 − δ2 = λ/2`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SymmetricReport {
    pub lambda: f64,
    /// `1/(3λ)`.
    pub first_moment_target: f64,
    pub mean_g: MeanSe,
    pub mean_h: MeanSe,
    /// Residuals of the functional equation.
    pub functional: Vec<ResidualRow>,
    /// Residuals of `π̂(α, 0) = λ/(α+λ)·(2 − π̂(α, α))`.
    pub marginal_laplace: Vec<ResidualRow>,
    /// Largest deviation between the marginal histogram and the convolution formula.
    pub marginal_density_max_dev: f64,
    pub marginal_density_peak: f64,
    /// `∫ e^{λz} σ̂(z) dz`, bounded by 2.
    pub tilted_mass: MeanSe,
    /// KS distance of the `G` marginal from Exp(2λ).
    pub exponential_ks: KsReport,
}

/// Functional-equation residual `π̂(α1,α2)·D − λ[(2α1−α2)π̂(α2,α2) + (2α2−α1)π̂(α1,α1)]`.
pub fn functional_equation_residual(
    s: &[ReplicationSummary],
    lambda: f64,
    points: &[[f64; 2]],
) -> Result<Vec<ResidualRow>> {
    points
        .iter()
        .map(|&[a1, a2]| {
            let d = (a1 - a2).powi(2) + lambda * (a1 + a2);
            residual_row(s, [a1, a2], |r| {
                let lhs = lookup(r, a1, a2)? * d;
                let t1 = lambda * (2.0 * a1 - a2) * lookup(r, a2, a2)?;
                let t2 = lambda * (2.0 * a2 - a1) * lookup(r, a1, a1)?;
                Ok((lhs - t1 - t2, lhs.abs().max(t1.abs()).max(t2.abs())))
            })
        })
        .collect()
}

pub fn symmetric_case_checks(
    s: &[ReplicationSummary],
    drifts: &DriftSpec<f64>,
    points: &[[f64; 2]],
) -> Result<SymmetricReport> {
    ensure_nonempty(s)?;
    let lambda = match drifts.symmetric_rate(1e-12) {
        Some(l) => l,
        None => return invalid("symmetric_case_checks requires d2 - d1 = d3 - d2 > 0"),
    };
    let functional = functional_equation_residual(s, lambda, points)?;
    let mut alphas: Vec<f64> = points.iter().flat_map(|p| [p[0], p[1]]).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let marginal_laplace = alphas
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| {
            residual_row(s, [a, 0.0], |r| {
                let lhs = lookup(r, a, 0.0)?;
                let rhs = lambda / (a + lambda) * (2.0 - lookup(r, a, a)?);
                Ok((lhs - rhs, lhs.abs().max(rhs.abs())))
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let thin = thinned_samples(s)?;
    let g: Vec<f64> = thin.samples.iter().map(|p| p[0]).collect();
    let sums: Vec<f64> = thin.samples.iter().map(|p| p[0] + p[1]).collect();
    let hist = freedman_diaconis(&g)?;
    let (mut max_dev, mut peak) = (0.0f64, 0.0f64);
    for (xi, dens) in hist.centers().into_iter().zip(&hist.density) {
        let conv = sums
            .iter()
            .filter(|&&z| z <= xi)
            .map(|&z| (-lambda * (xi - z)).exp())
            .sum::<f64>()
            / sums.len() as f64;
        let tau = lambda * (2.0 * (-lambda * xi).exp() - conv);
        max_dev = max_dev.max((dens - tau).abs());
        peak = peak.max(tau.abs());
    }
    let tilted = per_rep(s, |r| {
        r.samples.iter().map(|p| (lambda * (p[0] + p[1])).exp()).sum::<f64>() / r.samples.len() as f64
    });
    let rate = 2.0 * lambda;
    Ok(SymmetricReport {
        lambda,
        first_moment_target: 1.0 / (3.0 * lambda),
        mean_g: per_rep(s, |r| r.gap_means[0]),
        mean_h: per_rep(s, |r| r.gap_means[1]),
        functional,
        marginal_laplace,
        marginal_density_max_dev: max_dev,
        marginal_density_peak: peak,
        tilted_mass: tilted,
        exponential_ks: KsReport::new(ks_one_sample(&g, |x| 1.0 - (-rate * x).exp()), g.len()),
    })
}

/// Fit of the conjectured Gamma law of `G + H` and of its marginal consequence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GammaReport {
    pub u: f64,
    pub shape: f64,
    pub rate: f64,
    pub sum_ks: KsReport,
    pub marginal_ks: KsReport,
}

/// CDF of the conjectured marginal `τ(ξ) = λe^{−λξ}∫_ξ^∞ e^{λz}σ(z)dz`.
pub fn conjectured_marginal_cdf(x: f64, lambda: f64, u: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = 2.0 * u / 3.0;
    let beta = lambda * u;
    let c = beta - lambda;
    2.0 * (1.0 - (-lambda * x).exp() * gamma_ur(k, c * x) - (c / beta).powf(k) * gamma_lr(k, beta * x))
}

pub fn gamma_conjecture_test(s: &[ReplicationSummary], lambda: f64) -> Result<GammaReport> {
    let lu = lambert_u()?;
    let thin = thinned_samples(s)?;
    let (shape, rate) = (lu.shape(), lu.rate(lambda));
    let gamma = Gamma::new(shape, rate).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let sums: Vec<f64> = thin.samples.iter().map(|p| p[0] + p[1]).collect();
    let marg: Vec<f64> = thin.samples.iter().flat_map(|p| [p[0], p[1]]).collect();
    Ok(GammaReport {
        u: lu.u,
        shape,
        rate,
        sum_ks: KsReport::new(ks_one_sample(&sums, |x| gamma.cdf(x)), sums.len()),
        marginal_ks: KsReport::new(
            ks_one_sample(&marg, |x| conjectured_marginal_cdf(x, lambda, lu.u)),
            marg.len() / 2,
        ),
    })
}

/// Comparison with the product of exponentials `Exp(2λ1) × Exp(2λ2)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProductExpReport {
    pub lambda: [f64; 2],
    pub ks_g: KsReport,
    pub ks_h: KsReport,
    pub mean_g: MeanSe,
    pub mean_h: MeanSe,
    /// `1/(2λ1)`, `1/(2λ2)`.
    pub mean_targets: [f64; 2],
    pub correlation: f64,
    pub tau: f64,
}

pub fn product_exponential_test(s: &[ReplicationSummary], drifts: &DriftSpec<f64>) -> Result<ProductExpReport> {
    ensure_nonempty(s)?;
    let lambda = reflection_spec(SystemKind::SkewElastic, drifts).lambda;
    if !stationarity_check(SystemKind::SkewElastic, drifts).holds {
        return invalid("product_exponential_test requires the skew-elastic stationarity condition");
    }
    let thin = thinned_samples(s)?;
    let g: Vec<f64> = thin.samples.iter().map(|p| p[0]).collect();
    let h: Vec<f64> = thin.samples.iter().map(|p| p[1]).collect();
    let (r1, r2) = (2.0 * lambda[0], 2.0 * lambda[1]);
    Ok(ProductExpReport {
        lambda,
        ks_g: KsReport::new(ks_one_sample(&g, |x| 1.0 - (-r1 * x).exp()), g.len()),
        ks_h: KsReport::new(ks_one_sample(&h, |x| 1.0 - (-r2 * x).exp()), h.len()),
        mean_g: per_rep(s, |r| r.gap_means[0]),
        mean_h: per_rep(s, |r| r.gap_means[1]),
        mean_targets: [1.0 / r1, 1.0 / r2],
        correlation: pearson(&thin.samples),
        tau: thin.tau,
    })
}

/// Distance between the law of `H` given `G ≤ η` and the law of `H`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WitnessReport {
    pub eta: f64,
    pub distance: f64,
    /// Jackknife standard error over replications.
    pub se: f64,
    pub z: f64,
    pub conditional_samples: usize,
    pub samples: usize,
}

fn witness_distance(s: &[&ReplicationSummary], eta: f64) -> (f64, usize, usize) {
    let all: Vec<f64> = s.iter().flat_map(|r| r.samples.iter().map(|p| p[1])).collect();
    let cond: Vec<f64> = s
        .iter()
        .flat_map(|r| r.samples.iter().filter(|p| p[0] <= eta).map(|p| p[1]))
        .collect();
    if cond.is_empty() {
        return (f64::NAN, 0, all.len());
    }
    (ks_two_sample(&cond, &all), cond.len(), all.len())
}

/// Two-sample KS distance of `H | G ≤ η` against `H`, with a delete-one-replication jackknife error.
pub fn no_product_form_witness(s: &[ReplicationSummary], eta: f64) -> Result<WitnessReport> {
    ensure_nonempty(s)?;
    let refs: Vec<&ReplicationSummary> = s.iter().collect();
    let (distance, nc, na) = witness_distance(&refs, eta);
    if s.len() < 3 || nc < 20 {
        return Err(Error::InsufficientSamples(format!(
            "{nc} conditional samples over {} replications",
            s.len()
        )));
    }
    let n = s.len();
    let loo: Vec<f64> = (0..n)
        .map(|i| {
            let sub: Vec<&ReplicationSummary> =
                refs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| *r).collect();
            witness_distance(&sub, eta).0
        })
        .collect();
    let m = loo.iter().sum::<f64>() / n as f64;
    let se = ((n - 1) as f64 / n as f64 * loo.iter().map(|x| (x - m).powi(2)).sum::<f64>()).sqrt();
    Ok(WitnessReport {
        eta,
        distance,
        se,
        z: distance / se,
        conditional_samples: nc,
        samples: na,
    })
}

/// Itô residual regression pooled over replications.
pub fn pooled_ito_report(s: &[ReplicationSummary]) -> Result<ItoReport> {
    ensure_nonempty(s)?;
    let mut acc: Option<ItoAccumulator> = None;
    for r in s {
        let Some(a) = &r.ito else {
            return invalid("Itô accumulators were not recorded");
        };
        match acc.as_mut() {
            Some(x) => x.merge(a),
            None => acc = Some(*a),
        }
    }
    Ok(acc.expect("nonempty").report())
}

/// Stationary mean of `(3/2)(λ1·G + λ2·H)`, equal to 1 for the middle-diffusive system.
pub fn drift_balance(s: &[ReplicationSummary], lambda: [f64; 2]) -> Result<MeanSe> {
    ensure_nonempty(s)?;
    Ok(per_rep(s, |r| 1.5 * (lambda[0] * r.gap_means[0] + lambda[1] * r.gap_means[1])))
}

/// Pooled occupancy matrix for the unfolding with threshold index `which`.
pub fn pooled_occupancy(s: &[ReplicationSummary], which: usize) -> Result<OccupancyCounter> {
    ensure_nonempty(s)?;
    let mut c = OccupancyCounter::default();
    for r in s {
        let o = r
            .occupancy
            .get(which)
            .ok_or_else(|| Error::InvalidParameter("unfolding was not recorded".into()))?;
        c.merge(&o.after_collision);
    }
    Ok(c)
}
