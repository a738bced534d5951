//! `rseio`: run estimator experiments and convergence diagnostics from a
//! JSON configuration or a built-in preset.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 numeric failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rseio_core::analysis::{classify_pattern, estimate_expected_log_lipschitz, pattern_sweep, sufficient_conditions};
use rseio_core::channel::{log_sequence_probability, ArrivalSequence};
use rseio_core::config::{preset, ExperimentConfig, MAX_PATTERN_LENGTH, MAX_PROBE_LENGTH, PRESETS};
use rseio_core::pcm::{compose, phi_sequence};
use rseio_core::sim::{gnuplot_script, report_summary, run_experiment, write_epdf_csv, write_mse_csv, write_pcm_samples_csv};
use rseio_core::Error;
use serde_json::json;

/// Largest fraction of excluded trials tolerated before a run fails.
const EXCLUSION_QUOTA: f64 = 0.01;

/// Normalization tolerance for enumerated channel probabilities.
const PROBE_TOL: f64 = 1e-10;

#[derive(Parser, Debug)]
#[command(name = "rseio", version, about = "Robust state estimation with intermittent observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration (fig1a..fig1f, fig2; also `paper-` prefixed).
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the configured trial count.
    #[arg(long, value_name = "N")]
    trials: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo estimator comparison and PCM stationarity study.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write a gnuplot script.
        #[arg(long)]
        plot: bool,
    },
    /// Rank conditions, pattern sweep and expected log-Lipschitz estimate.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Classify the Φ matrices of one arrival pattern.
    Classify {
        #[command(flatten)]
        common: Common,
        /// Arrival pattern γ_1..γ_N, e.g. `1,0,1,1`.
        #[arg(long, value_name = "BITS", value_delimiter = ',')]
        pattern: Option<Vec<u8>>,
    },
    /// Enumerate all arrival sequences of length N with their log-probabilities.
    ProbeChannel {
        #[command(flatten)]
        common: Common,
        /// Sequence length N (at most 12).
        #[arg(long, value_name = "N")]
        length: Option<usize>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Usage(_) | Error::Io(_) => 2,
        Error::Config(_) | Error::Json(_) | Error::Unsupported(_) => 3,
        _ => 4,
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => preset(name).ok_or_else(|| {
            Error::Usage(format!("unknown preset `{name}`; available: {}", PRESETS.join(", ")))
        })?,
        _ => return Err(Error::Usage("exactly one of --config or --preset is required".into())),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = common.trials {
        cfg.trials = trials;
        if cfg.stationarity_trials.is_some() {
            cfg.stationarity_trials = Some(trials);
        }
    }
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Error> {
    let path = dir.join(name);
    log::info!("writing {}", path.display());
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<(), Error> {
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn simulate(cfg: &ExperimentConfig, out: &Path, plot: bool) -> Result<(), Error> {
    let sim = cfg.to_sim_config()?;
    let report = run_experiment(&sim)?;

    let mut f = create(out, "mse.csv")?;
    write_mse_csv(&mut f, &report)?;
    f.flush()?;
    if report.stationarity.is_some() {
        let mut f = create(out, "pcm_samples.csv")?;
        write_pcm_samples_csv(&mut f, &report)?;
        f.flush()?;
        let mut f = create(out, "epdf.csv")?;
        write_epdf_csv(&mut f, &report)?;
        f.flush()?;
    }
    write_json(out, "report.json", &report_summary(&report))?;
    if plot {
        let mut f = create(out, "plot.gp")?;
        writeln!(f, "# config_hash={} seed={}", sim.config_hash, sim.seed)?;
        f.write_all(gnuplot_script(&report).as_bytes())?;
        f.flush()?;
    }

    for (kind, avg) in report.estimators.iter().zip(&report.time_averaged_mse) {
        println!("{kind:>6}  time-averaged MSE {avg:.6}");
    }
    let excluded = report.metadata.excluded.len();
    if excluded > 0 {
        eprintln!("{excluded} trial(s) excluded after numeric failures");
    }
    if report.excluded_fraction() > EXCLUSION_QUOTA {
        return Err(Error::Domain(format!(
            "{:.2}% of trials excluded, above the {:.0}% quota",
            100.0 * report.excluded_fraction(),
            100.0 * EXCLUSION_QUOTA
        )));
    }
    Ok(())
}

fn analyze(cfg: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    let model = cfg.plant_model()?;
    let a = &cfg.analysis;
    if a.pattern_length > MAX_PATTERN_LENGTH {
        return Err(Error::Usage(format!("pattern_length above {MAX_PATTERN_LENGTH}")));
    }
    let conditions = sufficient_conditions(&model)?;
    let sweep = pattern_sweep(&model, a.pattern_length)?;
    let lip = estimate_expected_log_lipschitz(&model, &cfg.channel, a.window, a.sequences, a.pairs, cfg.seed)?;
    println!(
        "observability condition {}, controllability condition {}",
        conditions.hl_reachable, conditions.hr_reachable
    );
    println!(
        "{} patterns: {} with rank/Gramian disagreement",
        sweep.patterns,
        sweep.disagreements.len()
    );
    println!(
        "E[log Lipschitz] over N = {}: {:.4} (95% CI [{:.4}, {:.4}])",
        lip.window, lip.mean, lip.ci_low, lip.ci_high
    );
    write_json(
        out,
        "analysis.json",
        &json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "sufficient_conditions": conditions,
            "pattern_sweep": sweep,
            "log_lipschitz": lip,
            "log_lipschitz_mean": lip.mean,
            "log_lipschitz_negative": lip.negative,
        }),
    )
}

fn classify(cfg: &ExperimentConfig, out: &Path, pattern: Option<Vec<u8>>) -> Result<(), Error> {
    let bits = pattern
        .or_else(|| cfg.analysis.pattern.clone())
        .ok_or_else(|| Error::Usage("no arrival pattern given (use --pattern or analysis.pattern)".into()))?;
    let gammas = ArrivalSequence::from_u8(&bits).map_err(|e| Error::Usage(e.to_string()))?;
    let model = cfg.plant_model()?;
    let report = classify_pattern(&model, gammas.bits(), cfg.analysis.contraction_pairs, cfg.seed)?;
    let product = compose(&phi_sequence(&model, gammas.bits())?, model.n());

    let mut f = create(out, "phi_product.csv")?;
    writeln!(f, "# config_hash={} seed={}", cfg.hash(), cfg.seed)?;
    product.write_csv(&mut f)?;
    f.flush()?;
    write_json(
        out,
        "classify.json",
        &json!({ "config_hash": cfg.hash(), "seed": cfg.seed, "report": report }),
    )?;
    let c = report.composite;
    println!("H {} H_l {} H_r {} H_lr {}", c.in_h, c.in_hl, c.in_hr, c.in_hlr);
    println!(
        "distance ratio over {} pairs: max {:.6} mean {:.6}",
        report.contraction.count, report.contraction.max, report.contraction.mean
    );
    Ok(())
}

fn probe_channel(cfg: &ExperimentConfig, out: &Path, length: Option<usize>) -> Result<(), Error> {
    let n = length.unwrap_or(cfg.probe_length);
    if n == 0 || n > MAX_PROBE_LENGTH {
        return Err(Error::Usage(format!(
            "sequence length {n} outside [1, {MAX_PROBE_LENGTH}]; enumeration is 2^N"
        )));
    }
    let mut f = create(out, "channel_probe.csv")?;
    writeln!(f, "# config_hash={} seed={}", cfg.hash(), cfg.seed)?;
    writeln!(f, "index,sequence,log_prob,prob")?;
    let mut total = 0.0;
    for m in 0..(1u64 << n) {
        let seq = ArrivalSequence::from_index(m, n);
        let lp = log_sequence_probability(&cfg.channel, &seq)?;
        let bits: String = seq.to_u8().iter().map(|b| char::from(b'0' + b)).collect();
        total += lp.exp();
        writeln!(f, "{m},{bits},{lp:e},{:e}", lp.exp())?;
    }
    writeln!(f, "total,,{:e},{total:e}", total.ln())?;
    f.flush()?;
    println!("{} sequences, total probability {total:.15}", 1u64 << n);
    if (total - 1.0).abs() > PROBE_TOL {
        return Err(Error::Domain(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let common = match &cli.command {
        Command::Simulate { common, .. }
        | Command::Analyze { common }
        | Command::Classify { common, .. }
        | Command::ProbeChannel { common, .. } => common.clone(),
    };
    let level = match common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Some(threads) = common.threads {
        if threads == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Usage(e.to_string()))?;
    }
    let cfg = load(&common)?;
    fs::create_dir_all(&common.out)?;
    match cli.command {
        Command::Simulate { plot, .. } => simulate(&cfg, &common.out, plot),
        Command::Analyze { .. } => analyze(&cfg, &common.out),
        Command::Classify { pattern, .. } => classify(&cfg, &common.out, pattern),
        Command::ProbeChannel { length, .. } => probe_channel(&cfg, &common.out, length),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
