//! On-disk artifacts of a run.
//!
//! `iterations.csv`: `k,J,ries,ries_rel,alpha,n_merit_evals,wall_time`, one
//! row per outer iterate starting with the initial guess (`alpha = 0`).
//! `surface_velocity.csv`: `x,v_r` over the central copy, increasing `x`.
//! `run_meta.toml`: resolved configuration, mesh sizes, seed and outcome.
//! `FAILED`: present only when a stage failed; holds the error chain.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use plotters::prelude::*;
use pstokes_core::solver::{IterationRecord, SolveOutcome, Termination};
use serde::{Deserialize, Serialize};

use crate::config::ConfigFile;
use crate::experiments::{RunResult, StudyReport, SurfaceProfile};

pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const SURFACE_FILE: &str = "surface_velocity.csv";
pub const META_FILE: &str = "run_meta.toml";
pub const FAILED_FILE: &str = "FAILED";
pub const PLOT_FILE: &str = "convergence.svg";

/// Runs stopped by the slope or decrease tests below this level count as
/// solved: the merit differences are then at rounding level.
pub const ROUNDING_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub k: usize,
    #[serde(rename = "J")]
    pub j: f64,
    pub ries: f64,
    pub ries_rel: f64,
    pub alpha: f64,
    pub n_merit_evals: usize,
    pub wall_time: f64,
}

impl From<&IterationRecord> for IterationRow {
    fn from(r: &IterationRecord) -> Self {
        IterationRow {
            k: r.k,
            j: r.j,
            ries: r.ries,
            ries_rel: r.ries_rel,
            alpha: r.alpha,
            n_merit_evals: r.n_merit_evals,
            wall_time: r.wall_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub x: f64,
    pub v_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub k: usize,
    #[serde(rename = "J")]
    pub j: f64,
    pub ries: f64,
    pub ries_rel: f64,
    pub alpha: f64,
    pub n_merit_evals: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub delta: f64,
    pub mu0: f64,
    pub bound: f64,
    pub dist_sq: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    RoundingFloor,
    Failed,
}

impl Status {
    pub fn of(outcome: &SolveOutcome) -> Status {
        match outcome.termination {
            Termination::Converged => Status::Converged,
            Termination::Stagnated | Termination::NotDescent { .. }
                if outcome.final_ries_rel() <= ROUNDING_FLOOR =>
            {
                Status::RoundingFloor
            }
            _ => Status::Failed,
        }
    }

    pub fn is_success(self) -> bool {
        self != Status::Failed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshInfo {
    pub n_vertices: usize,
    pub n_triangles: usize,
    pub n_dofs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub status: Status,
    pub termination: String,
    pub iterations: usize,
    pub final_ries_rel: f64,
    pub surface_max: f64,
    pub surface_mode: String,
    /// x of surface samples whose radicand was negative.
    pub rejected_samples: Vec<f64>,
    pub setup_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub version: String,
    /// Runs use no randomness; kept so that the schema matches `check`.
    pub seed: u64,
    pub config: ConfigFile,
    pub mesh_info: MeshInfo,
    pub outcome: Outcome,
}

impl RunMeta {
    pub fn new(config: ConfigFile, result: &RunResult) -> Self {
        RunMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: 0,
            config,
            mesh_info: MeshInfo {
                n_vertices: result.n_vertices,
                n_triangles: result.n_triangles,
                n_dofs: result.n_dofs,
            },
            outcome: Outcome {
                status: Status::of(&result.outcome),
                termination: result.outcome.termination.to_string(),
                iterations: result.outcome.history.len() - 1,
                final_ries_rel: result.outcome.final_ries_rel(),
                surface_max: result.profile.max(),
                surface_mode: result.profile.mode.to_string(),
                rejected_samples: result.profile.rejected.clone(),
                setup_seconds: result.setup_seconds,
            },
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_iterations(path: &Path, history: &[IterationRecord]) -> Result<()> {
    write_rows(path, history.iter().map(IterationRow::from))
}

pub fn read_iterations(path: &Path) -> Result<Vec<IterationRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_surface(path: &Path, profile: &SurfaceProfile) -> Result<()> {
    write_rows(path, profile.samples.iter().map(|&(x, v_r)| SurfaceRow { x, v_r }))
}

pub fn write_sweep(path: &Path, runs: &[(f64, &[IterationRecord])]) -> Result<()> {
    let rows = runs.iter().flat_map(|&(delta, hist)| {
        hist.iter().map(move |r| SweepRow {
            delta,
            k: r.k,
            j: r.j,
            ries: r.ries,
            ries_rel: r.ries_rel,
            alpha: r.alpha,
            n_merit_evals: r.n_merit_evals,
            wall_time: r.wall_time,
        })
    });
    write_rows(path, rows)
}

pub fn write_study(path: &Path, report: &StudyReport) -> Result<()> {
    write_rows(
        path,
        report.points.iter().map(|p| StudyRow {
            delta: p.delta,
            mu0: p.mu0,
            bound: p.bound,
            dist_sq: p.dist_sq,
            iterations: p.iterations,
        }),
    )
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_failed(dir: &Path, err: &anyhow::Error) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(FAILED_FILE), format!("{err:?}\n")).context("writing failure marker")
}

/// Everything a finished run produces. Returns the run status.
pub fn write_run(dir: &Path, config: ConfigFile, result: &RunResult) -> Result<Status> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let stale = dir.join(FAILED_FILE);
    if stale.exists() {
        fs::remove_file(&stale)?;
    }
    write_iterations(&dir.join(ITERATIONS_FILE), &result.outcome.history)?;
    write_surface(&dir.join(SURFACE_FILE), &result.profile)?;
    let meta = RunMeta::new(config, result);
    write_toml(&dir.join(META_FILE), &meta)?;
    let series = [(String::new(), relative_series(&result.outcome.history))];
    plot_convergence(&dir.join(PLOT_FILE), &series)?;
    Ok(meta.outcome.status)
}

pub fn relative_series(history: &[IterationRecord]) -> Vec<(usize, f64)> {
    history.iter().map(|r| (r.k, r.ries_rel)).collect()
}

/// `ries_rel` against `k` on a log axis, one line per series.
pub fn plot_convergence(path: &Path, series: &[(String, Vec<(usize, f64)>)]) -> Result<()> {
    let positive = || series.iter().flat_map(|s| s.1.iter()).map(|p| p.1).filter(|v| *v > 0.0 && v.is_finite());
    let lo = positive().fold(1.0f64, f64::min).max(1e-300) / 2.0;
    let hi = positive().fold(1.0f64, f64::max) * 2.0;
    let kmax = series.iter().flat_map(|s| s.1.iter()).map(|p| p.0).max().unwrap_or(1).max(1);

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0f64..kmax as f64, (lo..hi).log_scale())
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc("k")
        .y_desc("ries_rel")
        .y_label_formatter(&|v| format!("{v:.0e}"))
        .draw()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let line = pts.iter().filter(|p| p.1 > 0.0).map(|p| (p.0 as f64, p.1));
        let drawn = chart.draw_series(LineSeries::new(line, color.stroke_width(2))).map_err(|e| anyhow::anyhow!("{e}"))?;
        if !name.is_empty() {
            drawn.label(name.clone()).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
    }
    if series.iter().any(|s| !s.0.is_empty()) {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    root.present().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(())
}
