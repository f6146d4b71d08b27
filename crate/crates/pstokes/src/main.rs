use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pstokes::checks;
use pstokes::config::{ConfigFile, Experiment};
use pstokes::experiments::{self, ExperimentConfig};
use pstokes::io::{self, Status};
use pstokes_core::mesh::{build_mesh, DomainKind};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "pstokes", version, about = "Regularized p-Stokes flow with globalized Newton and Picard iterations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one configuration and write iterations, surface velocity and metadata.
    Run(RunArgs),
    /// Repeat a run for several regularizations δ.
    SweepDelta {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated δ values.
        #[arg(long, value_delimiter = ',', default_values_t = [1e-12, 1e-4])]
        deltas: Vec<f64>,
    },
    /// Distance of regularized solutions to the least regularized one.
    StudyRegularization {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated δ values, paired with --mu0s.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-12])]
        deltas: Vec<f64>,
        /// Comma-separated μ0 values, paired with --deltas.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-17])]
        mu0s: Vec<f64>,
    },
    /// Run the invariant suite.
    Check {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Random samples per property.
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Write the mesh as vertex and triangle lists.
    Mesh(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with [experiment], [mesh], [params] and [solver] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigFile,
}

impl RunArgs {
    fn layered(&self) -> Result<ConfigFile> {
        let base = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Ok(base.overlay(&self.overrides))
    }
}

fn default_out(file: &ConfigFile, cfg: &ExperimentConfig, what: &str) -> PathBuf {
    file.experiment.out.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!("{}-{}-{what}", Experiment(cfg.domain.kind), cfg.solver.method))
    })
}

fn status_line(label: &str, res: &experiments::RunResult) -> String {
    let o = &res.outcome;
    format!(
        "{label}: {} after {} iterations, ries_rel {:.3e}, max surface velocity {:.6} m/a",
        o.termination,
        o.history.len() - 1,
        o.final_ries_rel(),
        res.profile.max()
    )
}

/// Runs one configuration into `dir`; failures leave a marker there.
fn run_into(dir: &Path, file: &ConfigFile, cfg: &ExperimentConfig, label: &str) -> Result<Status> {
    let result = match experiments::run(cfg) {
        Ok(r) => r,
        Err(e) => {
            io::write_failed(dir, &e)?;
            return Err(e);
        }
    };
    let resolved = ConfigFile::from_resolved(cfg, file.experiment.out.as_deref());
    let status = io::write_run(dir, resolved, &result)?;
    println!("{}", status_line(label, &result));
    if !result.profile.rejected.is_empty() {
        println!("  {} surface samples had a negative radicand", result.profile.rejected.len());
    }
    if status == Status::Failed {
        io::write_failed(dir, &anyhow::anyhow!("solver stopped: {}", result.outcome.termination))?;
    }
    Ok(status)
}

fn cmd_run(args: &RunArgs) -> Result<bool> {
    let file = args.layered()?;
    let cfg = file.resolve()?;
    let dir = default_out(&file, &cfg, "run");
    let status = run_into(&dir, &file, &cfg, cfg.solver.method.as_str())?;
    println!("wrote {}", dir.display());
    Ok(status.is_success())
}

fn cmd_sweep(args: &RunArgs, deltas: &[f64]) -> Result<bool> {
    let file = args.layered()?;
    let base = file.resolve()?;
    let dir = default_out(&file, &base, "sweep");
    std::fs::create_dir_all(&dir)?;
    let mut ok = true;
    let mut done = Vec::new();
    for (delta, res) in experiments::delta_sweep(&base, deltas) {
        let sub = dir.join(format!("delta_{delta:e}"));
        match res {
            Ok(r) => {
                let cfg = ExperimentConfig { params: base.params.with_delta(delta)?, ..base.clone() };
                let status = io::write_run(&sub, ConfigFile::from_resolved(&cfg, Some(&sub)), &r)?;
                println!("{}", status_line(&format!("delta {delta:e}"), &r));
                ok &= status.is_success();
                done.push((delta, r));
            }
            Err(e) => {
                eprintln!("delta {delta:e}: {e:#}");
                io::write_failed(&sub, &e)?;
                ok = false;
            }
        }
    }
    let hist: Vec<(f64, &[_])> = done.iter().map(|(d, r)| (*d, r.outcome.history.as_slice())).collect();
    io::write_sweep(&dir.join("delta_sweep.csv"), &hist)?;
    let series: Vec<_> =
        done.iter().map(|(d, r)| (format!("δ = {d:e}"), io::relative_series(&r.outcome.history))).collect();
    io::plot_convergence(&dir.join(io::PLOT_FILE), &series)?;
    if !ok {
        io::write_failed(&dir, &anyhow::anyhow!("at least one δ did not finish"))?;
    }
    println!("wrote {}", dir.display());
    Ok(ok)
}

#[derive(Serialize)]
struct StudySummary {
    reference_delta: f64,
    reference_mu0: f64,
    slope: f64,
    c_tilde: f64,
    violations: usize,
    failures: Vec<String>,
    config: ConfigFile,
}

fn cmd_study(args: &RunArgs, deltas: &[f64], mu0s: &[f64]) -> Result<bool> {
    if deltas.len() != mu0s.len() {
        bail!("--deltas and --mu0s must have the same length ({} vs {})", deltas.len(), mu0s.len());
    }
    let mut file = args.layered()?;
    // coarse sliding block unless told otherwise
    if file.experiment.experiment.is_none() {
        file.experiment.experiment = Some(Experiment(DomainKind::Block));
        file.mesh.nx = file.mesh.nx.or(Some(8));
        file.mesh.ny = file.mesh.ny.or(Some(2));
    }
    let base = file.resolve()?;
    let dir = default_out(&file, &base, "study");
    std::fs::create_dir_all(&dir)?;
    let seq: Vec<(f64, f64)> = deltas.iter().copied().zip(mu0s.iter().copied()).collect();
    let report = match experiments::regularization_convergence_study(&base, &seq) {
        Ok(r) => r,
        Err(e) => {
            io::write_failed(&dir, &e)?;
            return Err(e);
        }
    };
    io::write_study(&dir.join("regularization_study.csv"), &report)?;
    let summary = StudySummary {
        reference_delta: report.reference.0,
        reference_mu0: report.reference.1,
        slope: report.slope,
        c_tilde: report.c_tilde,
        violations: report.violations,
        failures: report.failures.iter().map(|(d, m, e)| format!("delta {d:e}, mu0 {m:e}: {e}")).collect(),
        config: ConfigFile::from_resolved(&base, Some(&dir)),
    };
    io::write_toml(&dir.join("study.toml"), &summary)?;
    for p in &report.points {
        println!("delta {:e} mu0 {:e}: bound {:.4e}, dist² {:.4e}", p.delta, p.mu0, p.bound, p.dist_sq);
    }
    println!("fitted slope {:.3}, c̃ {:.3e}, violations {}", report.slope, report.c_tilde, report.violations);
    println!("wrote {}", dir.display());
    Ok(report.failures.is_empty())
}

fn cmd_check(seed: u64, samples: usize) -> bool {
    let results = checks::run_all(seed, samples);
    for r in &results {
        println!("{r}");
    }
    results.iter().all(|r| r.passed)
}

fn cmd_mesh(args: &RunArgs) -> Result<bool> {
    let file = args.layered()?;
    let cfg = file.resolve()?;
    let mesh = build_mesh(&cfg.domain)?;
    let mut text = String::new();
    mesh.dump(&mut text)?;
    match &file.experiment.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::SweepDelta { run, deltas } => cmd_sweep(run, deltas),
        Command::StudyRegularization { run, deltas, mu0s } => cmd_study(run, deltas, mu0s),
        Command::Check { seed, samples } => Ok(cmd_check(*seed, *samples)),
        Command::Mesh(a) => cmd_mesh(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
