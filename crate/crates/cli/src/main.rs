//! `exciton`: simulate, fit and analyse nuclear-exciton control data from the command line.

mod manifest;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use exciton_core::experiment::{bin_to_spectrum, load_events, save_events, simulate_events, EventSet, ExperimentConfig, ForwardModel};
use exciton_core::pulse::{canonical_motion, CanonicalCase};
use exciton_core::reconstruction::{
    dipole_for_motion, fit_motion_evolutionary, reference_dipole, EaParams, FitResult, NoiseFitContext, NoiseModel,
};
use exciton_core::stability::{allan_curve, default_taus, sliding_deviations, write_sliding_csv, Binning};

use manifest::{manifest_path, FileDigest, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "exciton", version, about = "Coherent x-ray control of nuclear excitons: simulation and inverse analysis")]
struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true, env = "EXCITON_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Sample photon events for a configuration.
    Simulate(SimulateArgs),
    /// Reconstruct the absorber motion from events.
    FitMotion(FitMotionArgs),
    /// Allan deviation of per-sample temporal deviations.
    Allan(AllanArgs),
    /// Export the target dipole for a fitted or canonical motion.
    Dipole(DipoleArgs),
    /// Stimulated-emission vs enhanced-excitation crossover report.
    Crossover(CrossoverArgs),
    /// Re-run a recorded command and compare output digests.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateArgs {
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMotionArgs {
    events: PathBuf,
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-generation best log-likelihood.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    allow_nonconverged: bool,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllanArgs {
    events: PathBuf,
    fit: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Linear)]
    model: ModelArg,
    #[arg(long, value_enum, default_value_t = BinningArg::Time)]
    binning: BinningArg,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated sampling times in seconds; default is a logarithmic ladder.
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write overlapping-window deviations with this window length (s).
    #[arg(long, requires = "sliding_out")]
    sliding_tau: Option<f64>,
    #[arg(long)]
    sliding_stride: Option<f64>,
    #[arg(long)]
    sliding_out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipoleArgs {
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CaseArg::Fit)]
    case: CaseArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverArgs {
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayArgs {
    manifest: PathBuf,
    /// Directory for the regenerated outputs (default: a fresh temporary directory).
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelArg {
    Linear,
    Scaling,
    Step,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinningArg {
    Time,
    Counts,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseArg {
    Fit,
    #[value(name = "se", alias = "SE")]
    Se,
    Boost,
    None,
}

#[derive(Debug)]
struct NotConverged;

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("motion fit did not converge (use --allow-nonconverged to accept it)")
    }
}

impl std::error::Error for NotConverged {}

/// Files touched by one command.
#[derive(Default)]
struct Record {
    config: Option<PathBuf>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::FitMotion(_) => "fit-motion",
            Command::Allan(_) => "allan",
            Command::Dipole(_) => "dipole",
            Command::Crossover(_) => "crossover",
            Command::Replay(_) => "replay",
        }
    }

    fn output_paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            Command::Simulate(a) => vec![&mut a.out],
            Command::FitMotion(a) => {
                let mut v = vec![&mut a.out];
                v.extend(a.trace.as_mut());
                v
            }
            Command::Allan(a) => {
                let mut v = vec![&mut a.out];
                v.extend(a.sliding_out.as_mut());
                v
            }
            Command::Dipole(a) => vec![&mut a.out],
            Command::Crossover(a) => vec![&mut a.out],
            Command::Replay(_) => Vec::new(),
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_fit(path: &Path) -> Result<FitResult> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FitResult::from_json(&text)?)
}

fn event_set(path: &Path, config: &ExperimentConfig) -> Result<EventSet> {
    let mut events = load_events(path)?;
    if events.is_empty() {
        return Err(exciton_core::Error::InvalidArgument(format!("{} contains no events", path.display())).into());
    }
    events.sort_by(|a, b| a.lab_time_s.total_cmp(&b.lab_time_s));
    Ok(EventSet { events, schedule: config.schedule(), dropouts: Vec::new(), injected: Vec::new() })
}

fn simulate(a: &SimulateArgs, rec: &mut Record) -> Result<()> {
    rec.config = Some(a.config.clone());
    rec.seed = Some(a.seed);
    rec.inputs.push(a.config.clone());
    let config = load_config(&a.config)?;
    let set = simulate_events(&config, a.seed)?;
    save_events(&set.events, &a.out)?;
    log::info!("{} events written to {}", set.len(), a.out.display());
    rec.outputs.push(a.out.clone());
    Ok(())
}

fn fit_motion(a: &FitMotionArgs, rec: &mut Record) -> Result<()> {
    rec.config = Some(a.config.clone());
    rec.seed = Some(a.seed);
    rec.inputs.extend([a.events.clone(), a.config.clone()]);
    let config = load_config(&a.config)?;
    let set = event_set(&a.events, &config)?;
    let model = ForwardModel::new(&config)?;
    let mut spectrum = bin_to_spectrum(&set.events, &model.time_edges_ns(), &config.detuning.edges())?;
    spectrum.exposure_s = config.schedule().exposure(&[], 0.0, config.run_length_s);
    let mut params = EaParams::default();
    if let Some(g) = a.generations {
        params.generations = g;
    }
    let fit = fit_motion_evolutionary(&spectrum, &config, &params, a.seed)?;
    std::fs::write(&a.out, fit.to_json()? + "\n").with_context(|| format!("writing {}", a.out.display()))?;
    rec.outputs.push(a.out.clone());
    if let Some(trace) = &a.trace {
        fit.write_trace_csv(create(trace)?)?;
        rec.outputs.push(trace.clone());
    }
    log::info!(
        "log-likelihood {:.3} after {} generations (converged: {})",
        fit.log_likelihood,
        fit.generations,
        fit.converged
    );
    if !fit.converged && !a.allow_nonconverged {
        return Err(NotConverged.into());
    }
    Ok(())
}

fn allan(a: &AllanArgs, rec: &mut Record) -> Result<()> {
    rec.seed = Some(a.seed);
    rec.inputs.extend([a.events.clone(), a.fit.clone()]);
    let fit = load_fit(&a.fit)?;
    let set = event_set(&a.events, &fit.config)?;
    let kind = match a.model {
        ModelArg::Linear => NoiseModel::LinearDrift,
        ModelArg::Scaling => NoiseModel::Scaling,
        ModelArg::Step => NoiseModel::Step,
    };
    let binning = match a.binning {
        BinningArg::Time => Binning::EqualTime,
        BinningArg::Counts => Binning::EqualCounts,
    };
    let context = NoiseFitContext::new(&fit.config, &fit.motion, kind, 1.0)?;
    let taus = a.taus.clone().unwrap_or_else(|| default_taus(&set));
    let series = allan_curve(&set, &taus, &context, binning, a.seed)?;
    if series.points.is_empty() {
        bail!(exciton_core::Error::InvalidArgument("no sampling time leaves two usable samples".into()));
    }
    series.write_csv(create(&a.out)?)?;
    rec.outputs.push(a.out.clone());
    if let (Some(tau), Some(out)) = (a.sliding_tau, &a.sliding_out) {
        let stride = a.sliding_stride.unwrap_or(tau / 2.0);
        let points = sliding_deviations(&set, tau, stride, &context)?;
        write_sliding_csv(&points, create(out)?)?;
        rec.outputs.push(out.clone());
    }
    Ok(())
}

fn dipole(a: &DipoleArgs, rec: &mut Record) -> Result<()> {
    let fit = match &a.fit {
        Some(p) => {
            rec.inputs.push(p.clone());
            Some(load_fit(p)?)
        }
        None => None,
    };
    let config = match (&a.config, &fit) {
        (Some(p), _) => {
            rec.config = Some(p.clone());
            rec.inputs.push(p.clone());
            load_config(p)?
        }
        (None, Some(f)) => f.config.clone(),
        (None, None) => bail!(exciton_core::Error::InvalidArgument("dipole needs --fit or --config".into())),
    };
    let trace = match a.case {
        CaseArg::Fit => {
            let Some(fit) = &fit else {
                bail!(exciton_core::Error::InvalidArgument("--case fit needs --fit".into()));
            };
            dipole_for_motion(&config, &fit.motion, &config.target)?
        }
        CaseArg::Se => dipole_for_motion(&config, &canonical_motion(CanonicalCase::StimulatedEmission), &config.target)?,
        CaseArg::Boost => dipole_for_motion(&config, &canonical_motion(CanonicalCase::EnhancedExcitation), &config.target)?,
        CaseArg::None => reference_dipole(&config, &config.target)?,
    };
    trace.write_csv(create(&a.out)?)?;
    rec.outputs.push(a.out.clone());
    Ok(())
}

fn crossover_cmd(a: &CrossoverArgs, rec: &mut Record) -> Result<()> {
    rec.config = Some(a.config.clone());
    rec.inputs.push(a.config.clone());
    let config = load_config(&a.config)?;
    let report = exciton_core::experiment::crossover(&config)?;
    println!(
        "analytic thin-limit crossover {:.3} ns; simulated {}",
        report.analytic_ns,
        report.simulated_ns.map_or("none".to_string(), |t| format!("{t:.3} ns"))
    );
    report.write_csv(create(&a.out)?)?;
    rec.outputs.push(a.out.clone());
    Ok(())
}

fn execute(command: &Command) -> Result<Record> {
    let mut rec = Record::default();
    match command {
        Command::Simulate(a) => simulate(a, &mut rec)?,
        Command::FitMotion(a) => match fit_motion(a, &mut rec) {
            Err(e) if e.is::<NotConverged>() => {
                write_manifest(command, &rec, 0.0)?;
                return Err(e);
            }
            other => other?,
        },
        Command::Allan(a) => allan(a, &mut rec)?,
        Command::Dipole(a) => dipole(a, &mut rec)?,
        Command::Crossover(a) => crossover_cmd(a, &mut rec)?,
        Command::Replay(a) => replay(a)?,
    }
    Ok(rec)
}

fn write_manifest(command: &Command, rec: &Record, duration_s: f64) -> Result<()> {
    let Some(primary) = rec.outputs.first() else {
        return Ok(());
    };
    let manifest = RunManifest {
        schema_version: manifest::SCHEMA_VERSION,
        command: command.name().to_string(),
        invocation: command.clone(),
        config_path: rec.config.clone(),
        seed: rec.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: rec.inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
        outputs: rec.outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
        duration_s,
    };
    manifest.save(&manifest_path(primary))
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let recorded = RunManifest::load(&a.manifest)?;
    let dir = match &a.dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.clone()
        }
        None => {
            let d = std::env::temp_dir().join(format!("exciton-replay-{}", std::process::id()));
            std::fs::create_dir_all(&d)?;
            d
        }
    };
    for input in &recorded.inputs {
        let now = manifest::sha256_file(&input.path)?;
        if now != input.sha256 {
            bail!(exciton_core::Error::InvalidArgument(format!("input {} changed since the recorded run", input.path.display())));
        }
    }
    let mut command = recorded.invocation.clone();
    if matches!(command, Command::Replay(_)) {
        bail!(exciton_core::Error::InvalidArgument("a replay manifest cannot be replayed".into()));
    }
    let mut mapping = Vec::new();
    for path in command.output_paths_mut() {
        let target = dir.join(path.file_name().context("output path has no file name")?);
        mapping.push((path.clone(), target.clone()));
        *path = target;
    }
    let result = execute(&command);
    match result {
        Ok(_) => {}
        Err(e) if e.is::<NotConverged>() => {}
        Err(e) => return Err(e),
    }
    let mut mismatches = 0;
    for (original, regenerated) in mapping {
        let Some(expected) = recorded.outputs.iter().find(|o| o.path == original) else {
            continue;
        };
        let got = manifest::sha256_file(&regenerated)?;
        let same = got == expected.sha256;
        println!("{} {} ({})", if same { "identical" } else { "DIFFERENT" }, original.display(), regenerated.display());
        if !same {
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        bail!("{mismatches} output(s) differ from the recorded run");
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<NotConverged>() {
        return 3;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<exciton_core::Error>() {
            return match e {
                exciton_core::Error::InsufficientStatistics { .. } => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let start = Instant::now();
    let outcome = execute(&cli.command).and_then(|rec| {
        if !matches!(cli.command, Command::Replay(_)) {
            write_manifest(&cli.command, &rec, start.elapsed().as_secs_f64())?;
        }
        Ok(())
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
