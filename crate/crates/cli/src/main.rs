//! Command-line interface: forward simulation, global sensitivity analysis,
//! MAP estimation, NUTS posterior sampling and full test-case runs.
//!
//! All outputs are written atomically (temp file + rename); every subcommand
//! honors `--seed`, and `--threads 1` (the default) makes runs
//! byte-reproducible. Exit codes: 0 on success, 1 on domain errors, 2 on
//! usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cardioestim::coupled::{CoupledModel, DirectModel};
use cardioestim::harness::{
    default_sobol_qois, emit_report, generate_target, hmc_stage, map_stage, run_test_case,
    sobol_on_model, write_atomic, TestCaseConfig,
};
use cardioestim::hmc::posterior_summary;
use cardioestim::ode::{run_to_limit_cycle, SolverConfig};
use cardioestim::params::{ParameterSet, ParameterVector};
use cardioestim::surrogate::{load_weights, AnnSurrogate, LvSurrogate};

#[derive(Parser)]
#[command(
    name = "cardio-estim",
    about = "Bayesian parameter estimation for a closed-loop 0D cardiovascular model",
    version
)]
struct Cli {
    /// Worker threads (falls back to CARDIO_ESTIM_THREADS, default 1)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Quiet mode: errors only
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    /// Debug mode: extra diagnostics (step sizes, tree statistics)
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the limit-cycle protocol and write the last-beat trace CSV
    Simulate(SimulateArgs),
    /// Write a built-in test-case configuration file
    Preset(PresetArgs),
    /// Sobol sensitivity indices of the coupled model
    Sobol(SobolArgs),
    /// Multistart MAP estimation on a twin target
    Map(MapArgs),
    /// NUTS posterior sampling initialized from a MAP result
    Hmc(HmcArgs),
    /// Full test case: target, MAP, HMC, report
    Case(CaseArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Parameter file overriding the baselines
    #[arg(long)]
    params: Option<PathBuf>,
    /// Network weight file for the LV surrogate (default: elastance law)
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Use the directly coupled elastance model (no penalized coupling)
    #[arg(long)]
    direct: bool,
    #[arg(long, default_value_t = 5)]
    beats: usize,
    /// Valve smoothing width in mmHg (0 = ideal diodes)
    #[arg(long, default_value_t = 0.0)]
    smoothing: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PresetArgs {
    /// One of: t_lv, t_all, t_lv_perturbed
    #[arg(long)]
    name: String,
    #[arg(long, default_value_t = 0.0)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SobolArgs {
    /// Test-case configuration file (or a preset name)
    #[arg(long)]
    case: String,
    /// Base sample count (power of two); total runs are n * (k + 2)
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    case: String,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HmcArgs {
    #[arg(long)]
    case: String,
    /// map.json produced by the `map` subcommand (the posterior is centered
    /// on its run-averaged estimate)
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CaseArgs {
    #[arg(long)]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Usage(String),
    Domain(String),
}

impl From<cardioestim::Error> for CliError {
    fn from(e: cardioestim::Error) -> Self {
        CliError::Domain(e.to_string())
    }
}

struct Log {
    quiet: bool,
    verbose: bool,
}

impl Log {
    fn progress(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
    fn debug(&self, msg: &str) {
        if self.verbose {
            eprintln!("[debug] {msg}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("CARDIO_ESTIM_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1);
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global();
    let log = Log {
        quiet: cli.quiet,
        verbose: cli.verbose,
    };

    let result = match cli.command {
        Command::Simulate(args) => simulate(args, &log),
        Command::Preset(args) => preset(args, &log),
        Command::Sobol(args) => sobol(args, &log),
        Command::Map(args) => map_cmd(args, &log),
        Command::Hmc(args) => hmc_cmd(args, &log),
        Command::Case(args) => case_cmd(args, &log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn load_params(path: Option<&Path>) -> Result<ParameterSet, CliError> {
    match path {
        None => Ok(ParameterSet::baseline()),
        Some(p) => {
            let text = read_file(p)?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            Ok(ParameterSet::from_json(&value)?)
        }
    }
}

/// Accepts either a preset name or a path to a config file.
fn load_case(spec: &str, seed: Option<u64>) -> Result<TestCaseConfig, CliError> {
    let mut config = if ["t_lv", "t_all", "t_lv_perturbed", "T_LV", "T_all", "T_LV_perturbed"]
        .contains(&spec)
    {
        TestCaseConfig::by_name(spec, 0.0, 0)?
    } else {
        let text = read_file(Path::new(spec))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {spec}: {e}")))?
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn simulate(args: SimulateArgs, log: &Log) -> Result<(), CliError> {
    let params = load_params(args.params.as_deref())?;
    let t_hb = params.t_hb;
    let cfg = SolverConfig::default();
    let run = if args.direct {
        let mut model = DirectModel::new(params, args.smoothing)?;
        let s0 = model.initial_state();
        run_to_limit_cycle(&mut model, &s0, args.beats, t_hb, 0.01, &cfg)?
    } else {
        let surrogate = match &args.weights {
            Some(path) => LvSurrogate::Ann(AnnSurrogate::new(load_weights(path)?)?),
            None => LvSurrogate::elastance(),
        };
        let mut model = CoupledModel::new(
            params,
            surrogate,
            cardioestim::coupled::DEFAULT_EPSILON,
            args.smoothing,
        )?;
        let s0 = model.initial_state();
        run_to_limit_cycle(&mut model, &s0, args.beats, t_hb, 0.01, &cfg)?
    };
    log.progress(&format!(
        "simulated {} beats ({} accepted steps); last-beat window starts at {:.3} s",
        args.beats, run.stats.steps_accepted, run.trace.t0
    ));
    let worst = run
        .periodicity_residual
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    log.debug(&format!("worst periodicity residual {worst:.3e}"));
    let mut buf = Vec::new();
    run.trace.write_csv(&mut buf).map_err(CliError::from)?;
    write_atomic(&args.out.join("trace.csv"), &buf)?;
    log.progress(&format!("wrote {}", args.out.join("trace.csv").display()));
    let _ = args.seed;
    Ok(())
}

fn preset(args: PresetArgs, log: &Log) -> Result<(), CliError> {
    let config = TestCaseConfig::by_name(&args.name, args.snr, args.seed)?;
    let json = serde_json::to_vec_pretty(&config).map_err(cardioestim::Error::from)?;
    write_atomic(&args.out, &json)?;
    log.progress(&format!("wrote {}", args.out.display()));
    Ok(())
}

fn sobol(args: SobolArgs, log: &Log) -> Result<(), CliError> {
    let config = load_case(&args.case, args.seed)?;
    let qois = default_sobol_qois();
    log.progress(&format!(
        "sobol: {} parameters x {} QoIs, {} model runs",
        config.estimated.len(),
        qois.len(),
        args.n * (config.estimated.len() + 2)
    ));
    let (result, param_names, qoi_names) =
        sobol_on_model(&config.estimated, &qois, args.n, config.seed, &config)?;
    let table = |m: &Vec<Vec<f64>>| {
        let mut csv = String::from("parameter");
        for q in &qoi_names {
            csv.push_str(&format!(",{q}"));
        }
        csv.push('\n');
        for (i, p) in param_names.iter().enumerate() {
            csv.push_str(p);
            for q in 0..qoi_names.len() {
                csv.push_str(&format!(",{:.6e}", m[i][q]));
            }
            csv.push('\n');
        }
        csv
    };
    write_atomic(&args.out.join("sobol_s1.csv"), table(&result.s1).as_bytes())?;
    write_atomic(&args.out.join("sobol_st.csv"), table(&result.st).as_bytes())?;
    write_atomic(
        &args.out.join("sobol.json"),
        &serde_json::to_vec_pretty(&result).map_err(cardioestim::Error::from)?,
    )?;
    log.progress(&format!(
        "wrote {} (imputed {} failed runs)",
        args.out.join("sobol_st.csv").display(),
        result.imputed
    ));
    Ok(())
}

fn map_cmd(args: MapArgs, log: &Log) -> Result<(), CliError> {
    let mut config = load_case(&args.case, args.seed)?;
    if let Some(runs) = args.runs {
        config.multistart.n_runs = runs;
    }
    let base = ParameterSet::baseline();
    let truth = ParameterVector::from_set(&config.estimated, &base)?;
    log.progress(&format!(
        "map: case {} at SNR {} ({} runs)",
        config.case, config.snr, config.multistart.n_runs
    ));
    let obs = generate_target(&truth, &config)?;
    let stage = map_stage(&obs, &config, &truth)?;
    for (i, run) in stage.result.runs.iter().enumerate() {
        log.progress(&format!(
            "  run {i:2}: J = {:.3e} after {} iterations ({} evals, {:.1} s){}",
            run.cost,
            run.iterations,
            run.evaluations,
            run.wall_time_s,
            if run.converged { "" } else { " [not converged]" }
        ));
    }
    log.progress(&format!(
        "E_L2(theta_mean) = {:.3e}; best J = {:.3e}, worst J = {:.3e}",
        stage.e_l2,
        stage.result.runs[stage.result.best].cost,
        stage.result.runs[stage.result.worst].cost
    ));
    write_atomic(
        &args.out.join("map.json"),
        &serde_json::to_vec_pretty(&stage).map_err(cardioestim::Error::from)?,
    )?;
    log.progress(&format!("wrote {}", args.out.join("map.json").display()));
    Ok(())
}

fn hmc_cmd(args: HmcArgs, log: &Log) -> Result<(), CliError> {
    let mut config = load_case(&args.case, args.seed)?;
    if let Some(iters) = args.iters {
        config.nuts.iters = iters;
    }
    if let Some(warmup) = args.warmup {
        config.nuts.warmup = warmup;
    }
    let map_text = read_file(&args.map)?;
    let map: cardioestim::harness::MapStage = serde_json::from_str(&map_text)
        .map_err(|e| CliError::Usage(format!("map result {}: {e}", args.map.display())))?;
    let base = ParameterSet::baseline();
    let truth = ParameterVector::from_set(&config.estimated, &base)?;
    let obs = generate_target(&truth, &config)?;
    log.progress(&format!(
        "hmc: {} iterations ({} warmup) around the MAP mean",
        config.nuts.iters, config.nuts.warmup
    ));
    let (stage, samples) = hmc_stage(&obs, &config, &truth, &map.result.theta_mean)?;
    log.debug(&format!(
        "final step size {:.3e}, mass diag {:?}, max-depth hits {}",
        samples.step_size_final, samples.mass_diag, samples.max_depth_hits
    ));
    log.progress(&format!(
        "accept {:.2}, divergences {}, rhat {:?}",
        samples.accept_mean, samples.divergences, stage.summary.rhat
    ));
    for (i, name) in stage.summary.names.iter().enumerate() {
        log.progress(&format!(
            "  {name}: {:.4} +/- {:.4} (90% CI [{:.4}, {:.4}])",
            stage.summary.mean[i],
            stage.summary.std[i],
            stage.summary.ci90[i].0,
            stage.summary.ci90[i].1
        ));
    }
    let summary = posterior_summary(&samples)?;
    write_atomic(
        &args.out.join("summary.json"),
        &serde_json::to_vec_pretty(&summary).map_err(cardioestim::Error::from)?,
    )?;
    let mut csv = String::from("iter,logp");
    for name in &samples.names {
        csv.push_str(&format!(",{name}"));
    }
    csv.push('\n');
    for (i, draw) in samples.draws.iter().enumerate() {
        csv.push_str(&format!("{},{:.16e}", i, samples.logp[i]));
        for v in draw {
            csv.push_str(&format!(",{v:.16e}"));
        }
        csv.push('\n');
    }
    write_atomic(&args.out.join("posterior.csv"), csv.as_bytes())?;
    log.progress(&format!("wrote {}", args.out.join("posterior.csv").display()));
    Ok(())
}

fn case_cmd(args: CaseArgs, log: &Log) -> Result<(), CliError> {
    let config = load_case(&args.config, args.seed)?;
    log.progress(&format!(
        "case {} at SNR {} (seed {})",
        config.case, config.snr, config.seed
    ));
    let (report, artifacts) = run_test_case(&config)?;
    if let Some(map) = &report.map {
        log.progress(&format!("MAP: E_L2(theta_mean) = {:.3e}", map.e_l2));
    }
    if let Some(hmc) = &report.hmc {
        log.progress(&format!(
            "HMC: rhat {:?}, divergences {}, coverage {:?}",
            hmc.summary.rhat, hmc.summary.divergences, hmc.coverage
        ));
    }
    for err in &report.errors {
        eprintln!("stage failure: {err}");
    }
    emit_report(&args.out, &report, &artifacts)?;
    log.progress(&format!("wrote report under {}", args.out.display()));
    log.debug(&format!("timings: {:?}", artifacts.timings));
    if report.errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Domain(format!(
            "{} stage(s) failed; partial report written",
            report.errors.len()
        )))
    }
}
