use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slowfast::averaging::{simulate_full_system, NoiseRecord, PartitionPlan};
use slowfast::harness::{
    emit_outputs, estimate_cost, parse_check_list, preset, run_check_suite, run_convergence, with_threads,
    ExperimentConfig, Manifest, Setup, Verdict,
};
use slowfast::dsl::ModelKind;
use slowfast::sde::AveragedDrift;
use slowfast::spde::detect_linear_structure;
use slowfast::{Error, Result};

/// Slow-fast stochastic systems: simulation, averaging and convergence studies.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file, or `preset:<name>` for a shipped preset.
    #[arg(long)]
    config: String,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Dump one full-system trajectory (replica 0, first epsilon).
    Simulate(Common),
    /// Tabulate the averaged drifts.
    Average(Common),
    /// Convergence study over the epsilon ladder.
    Converge {
        #[command(flatten)]
        common: Common,
        /// Model number; must match the config.
        #[arg(long)]
        model: u8,
    },
    /// Run diagnostic checks (comma separated).
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "")]
        checks: String,
    },
    /// Parse and validate a config without running anything.
    Validate(Common),
}

const EXIT_CONFIG: u8 = 64;

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let text = match common.config.strip_prefix("preset:") {
        Some(name) => preset(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?.to_string(),
        None => std::fs::read_to_string(&common.config)
            .map_err(|source| Error::Io { path: PathBuf::from(&common.config), source })?,
    };
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output = o.to_string_lossy().into_owned();
    }
    let out = PathBuf::from(&cfg.output);
    Ok((cfg, out))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn check_budget(cfg: &ExperimentConfig, threads: usize) -> Result<()> {
    let n = if threads == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { threads };
    let cost = estimate_cost(cfg, n)?;
    eprintln!("estimated cost: {:.1} s on {} threads (budget {} s)", cost.seconds, n, cfg.budget_seconds);
    eprint!("{}", cost.detail);
    if cost.seconds > cfg.budget_seconds {
        return Err(Error::Config(format!(
            "projected {:.0} s exceeds the budget of {} s",
            cost.seconds, cfg.budget_seconds
        )));
    }
    Ok(())
}

fn simulate(common: &Common) -> Result<Verdict> {
    let (cfg, out) = load(common)?;
    let setup = Setup::new(&cfg)?;
    let eps = cfg.epsilons[0];
    let plan = PartitionPlan::new(eps, cfg.delta_for(eps)?, cfg.t_final, cfg.macro_step, cfg.rho)?;
    let full = with_threads(common.threads, || -> Result<_> {
        let noise = NoiseRecord::draw(cfg.model, cfg.seed, 0, setup.base_step, &plan)?;
        simulate_full_system(cfg.model, &setup.basis, &setup.coeffs, &setup.init, &plan, noise, cfg.rho)
    })??;
    let mut csv = String::from("time,xi,eta,u_norm_sq,v_norm_sq\n");
    for k in 0..=plan.n_macro() {
        let i = k * plan.steps_per_macro;
        let v = full.v.as_ref().map_or(0.0, |v| v[i].norm_sq());
        writeln!(csv, "{},{},{},{},{}", k as f64 * cfg.macro_step, full.xi[i], full.eta[i], full.u[i].norm_sq(), v)
            .unwrap();
    }
    let mut fields = String::from("time,x,u\n");
    for k in 0..=plan.n_macro() {
        let i = k * plan.steps_per_macro;
        let ug = setup.basis.synthesize(&full.u[i])?;
        for (x, u) in setup.basis.grid().iter().zip(&ug) {
            writeln!(fields, "{},{x},{u}", k as f64 * cfg.macro_step).unwrap();
        }
    }
    write(&out.join("trajectory.csv"), &csv)?;
    write(&out.join("u_field.csv"), &fields)?;
    println!("epsilon = {eps}: {} steps of {}; wrote {}", plan.n_steps, plan.micro_step, out.display());
    Ok(Verdict::Pass)
}

fn average(common: &Common) -> Result<Verdict> {
    let (cfg, out) = load(common)?;
    let setup = with_threads(common.threads, || Setup::new(&cfg))??;
    let mut csv = String::from("xi,estimate,stderr\n");
    match &setup.bbar {
        AveragedDrift::Tabulated(t) => {
            for i in 0..t.grid.len() {
                writeln!(csv, "{},{},{}", t.grid[i], t.values[i], t.stderr[i]).unwrap();
            }
        }
        closed @ AveragedDrift::ClosedForm(_) => {
            for i in 0..=24 {
                let xi = -6.0 + 0.5 * i as f64;
                writeln!(csv, "{xi},{},0", closed.eval(xi)?).unwrap();
            }
        }
    }
    write(&out.join("bbar.csv"), &csv)?;
    if let (ModelKind::II, Some(fbar)) = (cfg.model, &setup.fbar) {
        let u0 = &setup.init.u0;
        let xi = setup.init.xi0;
        let value = with_threads(common.threads, || fbar.eval(&setup.basis, u0, xi))??;
        let oracle = match detect_linear_structure(&setup.coeffs) {
            Some(lin) => Some(
                slowfast::spde::AveragedField::LinearElliptic { lin, coeffs: setup.coeffs.clone() }
                    .eval(&setup.basis, u0, xi)?,
            ),
            None => None,
        };
        let mut csv = String::from("mode,estimate,oracle\n");
        for (k, v) in value.coeffs().iter().enumerate() {
            let o = oracle.as_ref().map(|o| o.coeffs()[k].to_string()).unwrap_or_default();
            writeln!(csv, "{},{v},{o}", k + 1).unwrap();
        }
        write(&out.join("fbar.csv"), &csv)?;
    }
    println!("wrote averaged drifts to {}", out.display());
    Ok(Verdict::Pass)
}

fn converge(common: &Common, model: u8) -> Result<Verdict> {
    let (cfg, out) = load(common)?;
    let wanted = ModelKind::try_from(model).map_err(Error::Config)?;
    if wanted != cfg.model {
        return Err(Error::Config(format!("--model {model} does not match the config's model")));
    }
    check_budget(&cfg, common.threads)?;
    let report = with_threads(common.threads, || run_convergence(&cfg))??;
    print!("{}", report.summary);
    let files = emit_outputs(&report.table, &report.curves, &Manifest::new(&cfg), &out)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(report.verdict)
}

fn check(common: &Common, checks: &str) -> Result<Verdict> {
    let names = parse_check_list(checks)?;
    let (cfg, out) = load(common)?;
    let report = with_threads(common.threads, || run_check_suite(&cfg, &names))??;
    print!("{report}");
    if !names.is_empty() {
        write(&out.join("checks.txt"), &report.to_string())?;
    }
    Ok(report.verdict())
}

fn validate(common: &Common) -> Result<Verdict> {
    let (cfg, _) = load(common)?;
    println!("config OK: model {}, {} epsilon rungs, {} replicas", u8::from(cfg.model), cfg.epsilons.len(), cfg.replicas);
    let n = if common.threads == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { common.threads };
    let cost = estimate_cost(&cfg, n)?;
    println!("estimated cost: {:.1} s on {n} threads", cost.seconds);
    Ok(Verdict::Pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Average(c) => average(c),
        Command::Converge { common, model } => converge(common, *model),
        Command::Check { common, checks } => check(common, checks),
        Command::Validate(c) => validate(c),
    };
    match result {
        Ok(v) => ExitCode::from(v.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse(_) | Error::InvalidArgument(_) | Error::StepSize { .. } => {
                    ExitCode::from(EXIT_CONFIG)
                }
                Error::AllAborted(_) => ExitCode::from(Verdict::Inconclusive.exit_code() as u8),
                _ => ExitCode::from(1),
            }
        }
    }
}
