//! Experiment runner behind the `rankgap` binary.
//!
//! Settings come from a built-in experiment preset, then a flat `key = value`
//! file, then command-line flags. A run writes `summary.json`,
//! `replications.csv` and, with `paths`, one `paths_<rep>.csv` per replication.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rankgap::analysis::{corner_constants, lambert_u, lyapunov_drift_check_default, CornerConstants, ItoReport, LambertU, LyapunovReport};
use rankgap::stats::*;
use rankgap::systems::StepState;
use rankgap::{
    coin_rng, lambda_closed_form, stationarity_check, DriftSpec, Error, InitialPositions, Permutation, RankStream,
    SimConfig, SystemKind, TimeGrid, Unfolder,
};
use serde::Serialize;

pub const SCHEMA_VERSION: &str = "rankgap-summary/1";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invariant(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonConvergence { .. } | Error::InvalidPath(_) => CliError::Invariant(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything needed to run one experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSettings {
    pub experiment: String,
    pub system: SystemKind,
    pub delta: [f64; 3],
    pub x0: [f64; 3],
    pub dt: f64,
    pub steps: usize,
    pub reps: u64,
    pub seed: u64,
    /// Excursion threshold; `None` uses `10η`.
    pub eps: Option<f64>,
    /// Corner threshold; `None` uses `3√dt`.
    pub eta: Option<f64>,
    pub out: PathBuf,
    pub paths: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            experiment: "custom".into(),
            system: SystemKind::MiddleDiffusive,
            delta: [0.01, 0.02, 0.03],
            x0: [1.0, 0.0, -1.0],
            dt: 1e-3,
            steps: 10_000,
            reps: 1,
            seed: 0,
            eps: None,
            eta: None,
            out: PathBuf::from("out"),
            paths: false,
        }
    }
}

pub const EXPERIMENTS: [&str; 4] = ["custom", "fig2-lln", "fig1-paths", "fig3-ballistic"];

/// Built-in experiment presets.
pub fn preset(name: &str) -> Result<RunSettings, CliError> {
    let base = RunSettings {
        experiment: name.into(),
        ..RunSettings::default()
    };
    Ok(match name {
        "custom" => base,
        "fig2-lln" => RunSettings {
            steps: 100_000_000,
            reps: 32,
            ..base
        },
        "fig1-paths" => RunSettings {
            delta: [-1.0, 0.0, 1.0],
            paths: true,
            ..base
        },
        "fig3-ballistic" => RunSettings {
            system: SystemKind::MiddleBallistic,
            delta: [-0.5, 0.0, 0.5],
            paths: true,
            ..base
        },
        _ => {
            return Err(CliError::Usage(format!(
                "unknown experiment '{name}' (known: {})",
                EXPERIMENTS.join(", ")
            )))
        }
    })
}

fn parse_triple(key: &str, v: &str) -> Result<[f64; 3], CliError> {
    let xs: Vec<f64> = v
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("{key}: {e}")))?;
    xs.try_into()
        .map_err(|_| CliError::Usage(format!("{key} needs three comma-separated numbers")))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse().map_err(|e| CliError::Usage(format!("{key}: {e}")))
}

impl RunSettings {
    /// Sets one field from its textual form.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "experiment" => self.experiment = value.trim().into(),
            "system" => self.system = value.trim().parse().map_err(|e: Error| CliError::Usage(e.to_string()))?,
            "delta" => self.delta = parse_triple(key, value)?,
            "x0" => self.x0 = parse_triple(key, value)?,
            "dt" => self.dt = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "reps" => self.reps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "eps" => self.eps = Some(parse_num(key, value)?),
            "eta" => self.eta = Some(parse_num(key, value)?),
            "out" => self.out = PathBuf::from(value.trim()),
            "paths" => self.paths = parse_num(key, value)?,
            _ => return Err(CliError::Usage(format!("unknown setting '{key}'"))),
        }
        Ok(())
    }

    pub fn sim_config(&self) -> Result<SimConfig<f64>, CliError> {
        let mut c = SimConfig::new(
            self.system,
            DriftSpec::new(self.delta)?,
            InitialPositions::new(self.x0)?,
            TimeGrid::new(self.dt, self.steps)?,
        )
        .with_seed(self.seed);
        if let Some(eta) = self.eta {
            c = c.with_eta(eta).with_epsilon(10.0 * eta);
        }
        if let Some(eps) = self.eps {
            c = c.with_epsilon(eps);
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = vec![];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `%.17g` formatting: 17 significant digits, trailing zeros removed.
pub fn fmt_g17(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let e = format!("{x:.16e}");
    let (mant, exp) = e.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..17).contains(&exp) {
        trim(format!("{x:.*}", (16 - exp) as usize))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mant.to_string()), exp.abs())
    }
}

fn path_header(kind: SystemKind) -> Vec<&'static str> {
    let mut h = vec!["t", "R1", "R2", "R3", "G", "H", "A", "Gamma"];
    if kind != SystemKind::SkewElastic {
        h.extend(["X1", "X2", "X3"]);
    }
    if kind == SystemKind::MiddleBallistic {
        h.extend(["W1", "W3"]);
    } else {
        h.push("W");
    }
    h
}

fn path_row(kind: SystemKind, s: &StepState<f64>, perm: Option<Permutation>) -> Vec<String> {
    let mut row: Vec<f64> = vec![s.t, s.r[0], s.r[1], s.r[2], s.g, s.h, s.a, s.gamma];
    if let Some(p) = perm {
        row.extend(p.rank_of.map(|k| s.r[k as usize]));
    }
    row.extend(&s.noise[..kind.brownian_count()]);
    row.into_iter().map(fmt_g17).collect()
}

/// Streams one replication to CSV, with unfolded names where they exist.
pub fn emit_paths<W: Write>(config: &SimConfig<f64>, out: W) -> Result<(), CliError> {
    let kind = config.system;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| CliError::Io {
        path: PathBuf::from("<paths>"),
        source: io::Error::other(e.to_string()),
    };
    w.write_record(path_header(kind)).map_err(csv_err)?;
    let mut stream = RankStream::new(config)?;
    let mut unfold = match kind {
        SystemKind::SkewElastic => None,
        _ => Some((
            Unfolder::new(config.epsilon, config.picard_tol)?,
            coin_rng(config.seed, config.replication),
        )),
    };
    let mut step = |s: &StepState<f64>, w: &mut csv::Writer<W>| -> Result<(), CliError> {
        let perm = unfold.as_mut().map(|(u, rng)| {
            u.push(s.k, s.g, s.h, rng);
            u.perm
        });
        w.write_record(path_row(kind, s, perm)).map_err(csv_err)
    };
    let first = *stream.state();
    step(&first, &mut w)?;
    while let Some(s) = stream.advance() {
        let s = *s;
        step(&s, &mut w)?;
    }
    w.flush().map_err(|e| CliError::Io {
        path: PathBuf::from("<paths>"),
        source: e,
    })
}

#[derive(Debug, Serialize)]
pub struct CollisionSummary {
    pub eta: f64,
    pub replications_with_collision: usize,
    pub min_gap_sum: f64,
    pub first_collision_times: Vec<Option<f64>>,
    pub min_lga_margin: f64,
}

#[derive(Debug, Serialize)]
pub struct OccupancySummary {
    pub epsilon: f64,
    pub matrix: [[f64; 3]; 3],
    pub samples: u64,
}

#[derive(Debug, Serialize)]
pub struct Constants {
    pub corner: CornerConstants<f64>,
    pub lambert: LambertU,
    pub lyapunov: Option<LyapunovReport>,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub schema_version: &'static str,
    pub config: RunSettings,
    pub eta: f64,
    pub epsilon: f64,
    pub horizon: f64,
    pub lambda_closed_form: [f64; 2],
    pub stationary: bool,
    pub lln: LlnReport,
    pub boundary_masses: Option<BoundaryMassReport>,
    pub laplace_residuals: Option<Vec<ResidualRow>>,
    pub symmetric: Option<SymmetricReport>,
    pub gamma_conjecture: Option<GammaReport>,
    pub product_exponential: Option<ProductExpReport>,
    pub ito: Option<ItoReport>,
    pub drift_balance: Option<MeanSe>,
    pub occupancy: Vec<OccupancySummary>,
    pub collisions: CollisionSummary,
    pub constants: Constants,
    /// Reports that could not be formed, with the reason.
    pub skipped: Vec<String>,
}

const LAPLACE_POINTS: [[f64; 2]; 4] = [[0.1, 0.2], [0.2, 0.1], [0.3, 0.5], [0.5, 0.3]];

/// Estimators recorded for a given configuration.
pub fn replication_options(config: &SimConfig<f64>) -> ReplicationOptions {
    let kind = config.system;
    let stationary = stationarity_check(kind, &config.drifts).holds;
    let symmetric = config.drifts.symmetric_rate(1e-12).is_some();
    let window = config.grid.horizon() / 2.0;
    let mut o = ReplicationOptions {
        laplace_stride: 10,
        ..ReplicationOptions::default()
    };
    if kind == SystemKind::MiddleDiffusive {
        o.ito = true;
        if stationary {
            o = o.with_functional_points(&LAPLACE_POINTS);
        }
    }
    if stationary && (kind == SystemKind::SkewElastic || (kind == SystemKind::MiddleDiffusive && symmetric)) {
        o.record_interval = (window / 20_000.0).max(0.05).max(config.grid.dt);
    }
    if kind == SystemKind::MiddleBallistic {
        o.unfold_epsilons = vec![config.epsilon, config.epsilon / 2.0];
    }
    o
}

fn optional<T>(name: &str, r: rankgap::Result<T>, skipped: &mut Vec<String>) -> Option<T> {
    r.map_err(|e| skipped.push(format!("{name}: {e}"))).ok()
}

/// Merges ordered replication summaries into the ensemble report.
pub fn build_summary(settings: &RunSettings, config: &SimConfig<f64>, s: &[ReplicationSummary]) -> Result<Summary, CliError> {
    if s.is_empty() {
        return Err(CliError::Usage("empty replication list".into()));
    }
    let kind = config.system;
    let d = &config.drifts;
    let spec = config.reflection();
    let stationary = stationarity_check(kind, d).holds;
    let mut skipped = vec![];
    let sk = &mut skipped;
    let lln = lln_rates(s, kind, d)?;
    let noise_shared = kind != SystemKind::SkewElastic;
    let boundary = noise_shared.then(|| optional("boundary_masses", boundary_masses(s, d), sk)).flatten();
    let laplace = (kind == SystemKind::MiddleDiffusive && stationary)
        .then(|| optional("laplace_residuals", laplace_bar_residual(s, d, &LAPLACE_POINTS), sk))
        .flatten();
    let sym_lambda = d.symmetric_rate(1e-12).filter(|_| kind == SystemKind::MiddleDiffusive);
    let symmetric = sym_lambda
        .map(|_| optional("symmetric", symmetric_case_checks(s, d, &LAPLACE_POINTS), sk))
        .flatten();
    let gamma = sym_lambda
        .map(|l| optional("gamma_conjecture", gamma_conjecture_test(s, l), sk))
        .flatten();
    let product = (kind == SystemKind::SkewElastic && stationary)
        .then(|| optional("product_exponential", product_exponential_test(s, d), sk))
        .flatten();
    let ito = (kind == SystemKind::MiddleDiffusive)
        .then(|| optional("ito", pooled_ito_report(s), sk))
        .flatten();
    let balance = (kind == SystemKind::MiddleDiffusive && stationary)
        .then(|| optional("drift_balance", drift_balance(s, spec.lambda), sk))
        .flatten();
    let occupancy = s[0]
        .occupancy
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let c = pooled_occupancy(s, i)?;
            Ok(OccupancySummary {
                epsilon: o.epsilon,
                matrix: c.fractions(),
                samples: c.total(),
            })
        })
        .collect::<rankgap::Result<Vec<_>>>()?;
    let lyapunov = if spec.lambda.iter().all(|&l| l > 0.0) {
        optional("lyapunov", lyapunov_drift_check_default(spec.lambda), sk)
    } else {
        None
    };
    let collisions = CollisionSummary {
        eta: config.eta,
        replications_with_collision: s.iter().filter(|r| r.collision.first_triple_collision.is_some()).count(),
        min_gap_sum: s.iter().map(|r| r.collision.min_sum).fold(f64::INFINITY, f64::min),
        first_collision_times: s.iter().map(|r| r.first_collision_time).collect(),
        min_lga_margin: s.iter().map(|r| r.min_lga_margin).fold(f64::INFINITY, f64::min),
    };
    Ok(Summary {
        schema_version: SCHEMA_VERSION,
        config: settings.clone(),
        eta: config.eta,
        epsilon: config.epsilon,
        horizon: config.grid.horizon(),
        lambda_closed_form: lambda_closed_form(kind, d),
        stationary,
        lln,
        boundary_masses: boundary,
        laplace_residuals: laplace,
        symmetric,
        gamma_conjecture: gamma,
        product_exponential: product,
        ito,
        drift_balance: balance,
        occupancy,
        collisions,
        constants: Constants {
            corner: corner_constants(),
            lambert: lambert_u()?,
            lyapunov,
        },
        skipped,
    })
}

/// Hard invariants checked after a run.
pub fn check_invariants(config: &SimConfig<f64>, s: &[ReplicationSummary]) -> Result<(), CliError> {
    for r in s {
        let finite = r.regulators.iter().chain(&r.gap_means).all(|x| x.is_finite());
        if !finite {
            return Err(CliError::Invariant(format!("replication {} produced non-finite values", r.replication)));
        }
        if config.system == SystemKind::MiddleDiffusive && r.min_lga_margin <= 0.0 {
            return Err(CliError::Invariant(format!(
                "replication {}: R1 - R3 reached {} in the middle-diffusive system",
                r.replication, r.min_lga_margin
            )));
        }
    }
    Ok(())
}

fn write_replications(path: &Path, s: &[ReplicationSummary]) -> Result<(), CliError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let wrap = |e: csv::Error| CliError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e.to_string()),
    };
    w.write_record([
        "replication", "horizon", "A", "Gamma", "lambda_hat1", "lambda_hat2", "mean_G", "mean_H",
        "min_gap_sum", "first_collision_time", "min_lga_margin",
    ])
    .map_err(wrap)?;
    for r in s {
        let mut row = vec![r.replication.to_string()];
        row.extend(
            [
                r.horizon,
                r.regulators[0],
                r.regulators[1],
                r.lambda_hat[0],
                r.lambda_hat[1],
                r.gap_means[0],
                r.gap_means[1],
                r.collision.min_sum,
            ]
            .map(fmt_g17),
        );
        row.push(r.first_collision_time.map(fmt_g17).unwrap_or_default());
        row.push(fmt_g17(r.min_lga_margin));
        w.write_record(row).map_err(wrap)?;
    }
    w.flush().map_err(io_err(path))
}

/// Output of [`run_experiment`].
#[derive(Debug)]
pub struct Outcome {
    pub summary: Summary,
    pub files: Vec<PathBuf>,
}

/// Runs all replications on `threads` workers (`None` for the default pool) and writes the artifacts.
pub fn run_experiment(settings: &RunSettings, threads: Option<usize>) -> Result<Outcome, CliError> {
    if settings.reps == 0 {
        return Err(CliError::Usage("reps must be at least 1".into()));
    }
    if settings.experiment.is_empty() {
        return Err(CliError::Usage("experiment name must be nonempty".into()));
    }
    let config = settings.sim_config()?;
    let opts = replication_options(&config);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n.max(1));
    }
    let pool = pool.build().map_err(|e| CliError::Usage(e.to_string()))?;
    let runs = pool.install(|| run_ensemble(&config, settings.reps, &opts))?;

    let dir = &settings.out;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = vec![];
    let summary = build_summary(settings, &config, &runs)?;
    let json_path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;
    files.push(json_path);
    let rep_path = dir.join("replications.csv");
    write_replications(&rep_path, &runs)?;
    files.push(rep_path);
    if settings.paths {
        for r in 0..settings.reps {
            let p = dir.join(format!("paths_{r}.csv"));
            let f = File::create(&p).map_err(io_err(&p))?;
            emit_paths(&config.with_replication(r), BufWriter::new(f))?;
            files.push(p);
        }
    }
    check_invariants(&config, &runs)?;
    Ok(Outcome { summary, files })
}
