use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rankgap_cli::{parse_config_text, preset, run_experiment, CliError, RunSettings};

/// Simulate degenerate competing three-particle systems and write CSV/JSON reports.
#[derive(Parser, Debug)]
#[command(name = "rankgap", version)]
struct Args {
    /// Built-in experiment: custom, fig2-lln, fig1-paths, fig3-ballistic.
    #[arg(long)]
    experiment: Option<String>,
    /// Flat `key = value` settings file, overridden by flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// middle-diffusive (MD), middle-ballistic (MB) or skew-elastic (SE).
    #[arg(long)]
    system: Option<String>,
    /// Rank drifts `d1,d2,d3`.
    #[arg(long, allow_hyphen_values = true)]
    delta: Option<String>,
    /// Initial positions `x1,x2,x3` with x1 > x2 > x3.
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    #[arg(long)]
    dt: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Excursion threshold of the unfolding.
    #[arg(long)]
    eps: Option<String>,
    /// Corner threshold for collision detection.
    #[arg(long)]
    eta: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one path CSV per replication.
    #[arg(long)]
    paths: bool,
}

fn settings(args: &Args) -> Result<RunSettings, CliError> {
    let file = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                path: p.clone(),
                source,
            })?;
            parse_config_text(&text)?
        }
        None => vec![],
    };
    let name = args
        .experiment
        .clone()
        .or_else(|| file.iter().rev().find(|(k, _)| k == "experiment").map(|(_, v)| v.clone()))
        .unwrap_or_else(|| "custom".into());
    let mut s = preset(&name)?;
    for (k, v) in file.iter().filter(|(k, _)| k != "experiment") {
        s.apply(k, v)?;
    }
    let flags = [
        ("system", &args.system),
        ("delta", &args.delta),
        ("x0", &args.x0),
        ("dt", &args.dt),
        ("steps", &args.steps),
        ("reps", &args.reps),
        ("seed", &args.seed),
        ("eps", &args.eps),
        ("eta", &args.eta),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            s.apply(k, v)?;
        }
    }
    if let Some(out) = &args.out {
        s.out = out.clone();
    }
    s.paths |= args.paths;
    Ok(s)
}

fn threads() -> Result<Option<usize>, CliError> {
    match std::env::var("DP_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("DP_THREADS must be a positive integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = settings(&args).and_then(|s| Ok((s, threads()?))).and_then(|(s, t)| run_experiment(&s, t));
    match result {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("rankgap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
