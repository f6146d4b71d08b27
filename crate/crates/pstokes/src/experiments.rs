//! Glacier and sliding-block experiments: parameters, initial guess,
//! surface velocities and the drivers that tie a run together.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use pstokes_core::fem::{self, MixedSpace, MixedState, PStokesParams};
use pstokes_core::linalg;
use pstokes_core::mesh::{build_mesh, BoundaryTag, DomainKind, DomainSpec};
use pstokes_core::solver::{self, Clock, SolveOutcome, SolverConfig};
use pstokes_core::{PowerLaw, Vec2};

pub const GRAVITY: f64 = 9.81;
pub const ICE_DENSITY: f64 = 910.0;
pub const GLEN_EXPONENT: f64 = 4.0 / 3.0;
pub const DEFAULT_DELTA: f64 = 1e-12;
pub const DEFAULT_MU0: f64 = 1e-17;
/// Constant standing in for the power-law factor in the first Stokes solve.
pub const INITIAL_VISCOSITY: f64 = 1e6;
pub const LOW_FRICTION: f64 = 1e3;
pub const HIGH_FRICTION: f64 = 1e7;

/// `B = 0.5 · A^{-1/p'}` with `A = 1e-16 Pa⁻³ a⁻¹`, in Pa·a^{1/3}.
pub fn ice_hardness() -> f64 {
    0.5 * 1e-16_f64.powf(-1.0 / 3.0)
}

/// Gravity rotated by the slope angle so the flow runs towards +x.
pub fn rotated_gravity(alpha: f64) -> Vec2 {
    Vec2::new(GRAVITY * alpha.sin(), -GRAVITY * alpha.cos())
}

pub fn default_params(kind: DomainKind, tau: f64) -> PStokesParams {
    let alpha = 0.5_f64.to_radians();
    PStokesParams {
        bulk: PowerLaw::new(GLEN_EXPONENT, DEFAULT_DELTA, true).expect("valid law"),
        slide: PowerLaw::new(GLEN_EXPONENT, DEFAULT_DELTA, false).expect("valid law"),
        b: ice_hardness(),
        tau: match kind {
            DomainKind::IsmipB => 0.0,
            DomainKind::Block => tau,
        },
        mu0: DEFAULT_MU0,
        rho: ICE_DENSITY,
        gravity: rotated_gravity(alpha),
        alpha,
        extra_load: None,
    }
}

pub fn default_domain(kind: DomainKind) -> DomainSpec {
    match kind {
        DomainKind::IsmipB => DomainSpec::ismip_b(16, 8),
        DomainKind::Block => DomainSpec::block(16, 4),
    }
}

/// Stokes solve with the power-law factor replaced by `viscosity`, plus a
/// linear friction term when `friction` is set.
pub fn initial_guess(
    space: &MixedSpace,
    params: &PStokesParams,
    friction: bool,
    viscosity: f64,
) -> Result<MixedState> {
    let (m, rhs) = fem::assemble_linear_stokes(space, params, viscosity, friction)?;
    let (x, rep) = linalg::solve(&m, &rhs, linalg::DEFAULT_TOL)?;
    if !rep.success {
        bail!("initial Stokes solve missed its tolerance: {rep}");
    }
    let mut state = MixedState::from_vec(space, x)?;
    // elimination leaves exact zeros, but make it explicit
    for &d in space.constrained_dofs() {
        state.coeffs_mut()[d] = 0.0;
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SignMode {
    /// `v_r² = (v₁ cos α)² − (v₂ sin α)²`
    #[default]
    Paper,
    /// `v_r² = (v₁ cos α)² + (v₂ sin α)²`
    Conventional,
}

impl SignMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SignMode::Paper => "paper",
            SignMode::Conventional => "conventional",
        }
    }
}

impl fmt::Display for SignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(SignMode::Paper),
            "conventional" => Ok(SignMode::Conventional),
            _ => Err(format!("unknown sign mode '{s}' (expected paper or conventional)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceProfile {
    /// `(x, v_r)` with x in `[0, L]`, strictly increasing.
    pub samples: Vec<(f64, f64)>,
    /// Positions where the radicand was negative (paper sign only).
    pub rejected: Vec<f64>,
    pub mode: SignMode,
}

impl SurfaceProfile {
    pub fn max(&self) -> f64 {
        self.samples.iter().map(|s| s.1).fold(0.0, f64::max)
    }

    /// `max |a − b| / max(a)` over common sample positions.
    pub fn relative_difference(&self, other: &SurfaceProfile) -> f64 {
        let mut worst = 0.0f64;
        for (x, v) in &self.samples {
            if let Some((_, w)) = other.samples.iter().find(|s| (s.0 - x).abs() <= 1e-9 * (1.0 + x.abs())) {
                worst = worst.max((v - w).abs());
            } else {
                return f64::INFINITY;
            }
        }
        worst / self.max()
    }
}

pub fn radial_velocity(v: Vec2, alpha: f64, mode: SignMode) -> Option<f64> {
    let a = (v.x() * alpha.cos()).powi(2);
    let b = (v.y() * alpha.sin()).powi(2);
    let rad = match mode {
        SignMode::Paper => a - b,
        SignMode::Conventional => a + b,
    };
    (rad >= 0.0).then(|| rad.sqrt())
}

/// Surface speeds at the AIR velocity nodes of the central copy, with x
/// shifted into `[0, L]`.
pub fn surface_velocity(
    space: &MixedSpace,
    domain: &DomainSpec,
    state: &MixedState,
    alpha: f64,
    mode: SignMode,
) -> SurfaceProfile {
    let (x0, x1) = domain.central_range();
    let tol = 1e-9 * domain.length;
    let mut nodes: Vec<(f64, usize)> = space
        .boundary_nodes(BoundaryTag::Air)
        .into_iter()
        .map(|n| (space.node_coords()[n][0], n))
        .filter(|&(x, _)| x >= x0 - tol && x <= x1 + tol)
        .collect();
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut profile = SurfaceProfile { samples: Vec::new(), rejected: Vec::new(), mode };
    for (x, n) in nodes {
        let xs = (x - x0).clamp(0.0, domain.length);
        match radial_velocity(state.node_velocity(n), alpha, mode) {
            Some(v) => profile.samples.push((xs, v)),
            None => profile.rejected.push(xs),
        }
    }
    profile
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub domain: DomainSpec,
    pub params: PStokesParams,
    pub solver: SolverConfig,
    pub initial_guess_friction: bool,
    pub initial_viscosity: f64,
    pub sign_mode: SignMode,
}

impl ExperimentConfig {
    pub fn ismip_b() -> Self {
        ExperimentConfig {
            domain: default_domain(DomainKind::IsmipB),
            params: default_params(DomainKind::IsmipB, 0.0),
            solver: SolverConfig::default(),
            initial_guess_friction: false,
            initial_viscosity: INITIAL_VISCOSITY,
            sign_mode: SignMode::Paper,
        }
    }

    pub fn block(tau: f64) -> Self {
        ExperimentConfig {
            domain: default_domain(DomainKind::Block),
            params: default_params(DomainKind::Block, tau),
            solver: SolverConfig::default(),
            initial_guess_friction: true,
            initial_viscosity: INITIAL_VISCOSITY,
            sign_mode: SignMode::Paper,
        }
    }

    pub fn for_kind(kind: DomainKind) -> Self {
        match kind {
            DomainKind::IsmipB => Self::ismip_b(),
            DomainKind::Block => Self::block(LOW_FRICTION),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.params.validate()?;
        self.solver.validate()?;
        if !(self.params.bulk.delta() > 0.0) || !(self.params.mu0 > 0.0) {
            bail!("experiments need delta > 0 and mu0 > 0");
        }
        if !(self.initial_viscosity > 0.0) {
            bail!("initial viscosity must be positive");
        }
        Ok(())
    }
}

/// Wall-clock seconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        StdClock(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: SolveOutcome,
    pub profile: SurfaceProfile,
    pub n_vertices: usize,
    pub n_triangles: usize,
    pub n_dofs: usize,
    pub setup_seconds: f64,
}

impl RunResult {
    pub fn converged(&self) -> bool {
        self.outcome.termination.is_converged()
    }
}

/// Builds the mesh and spaces, computes the initial guess and runs the
/// configured method. Nothing is written to disk.
pub fn run(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let t0 = Instant::now();
    let mesh = build_mesh(&config.domain).context("building mesh")?;
    let (n_vertices, n_triangles) = (mesh.vertices().len(), mesh.triangles().len());
    let space = MixedSpace::new(mesh).context("building Taylor-Hood space")?;
    let guess = initial_guess(&space, &config.params, config.initial_guess_friction, config.initial_viscosity)
        .context("initial guess")?;
    let setup_seconds = t0.elapsed().as_secs_f64();
    let outcome = solver::solve_with_clock(&space, &config.params, &guess, &config.solver, &mut StdClock::new())
        .context("nonlinear solve")?;
    let profile = surface_velocity(&space, &config.domain, &outcome.state, config.params.alpha, config.sign_mode);
    Ok(RunResult { outcome, profile, n_vertices, n_triangles, n_dofs: space.n_dofs(), setup_seconds })
}

/// One run per regularization value, everything else shared.
pub fn delta_sweep(base: &ExperimentConfig, deltas: &[f64]) -> Vec<(f64, Result<RunResult>)> {
    deltas
        .iter()
        .map(|&d| {
            let res = (|| {
                if !(d > 0.0) {
                    bail!("delta must be positive, got {d}");
                }
                let cfg = ExperimentConfig { params: base.params.with_delta(d)?, ..base.clone() };
                run(&cfg)
            })();
            (d, res)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyPoint {
    pub delta: f64,
    pub mu0: f64,
    /// `|Ω| δ^p + |Γb| δ^s + μ0`
    pub bound: f64,
    /// `∫|∇(v_ref − v)|²`
    pub dist_sq: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub reference: (f64, f64),
    pub points: Vec<StudyPoint>,
    /// Least-squares slope of `log dist²` against `log bound`.
    pub slope: f64,
    /// `dist² / bound` at the largest bound.
    pub c_tilde: f64,
    pub violations: usize,
    pub failures: Vec<(f64, f64, String)>,
}

fn solve_to_tolerance(
    space: &MixedSpace,
    params: &PStokesParams,
    config: &ExperimentConfig,
) -> Result<SolveOutcome> {
    let guess = initial_guess(space, params, config.initial_guess_friction, config.initial_viscosity)?;
    let out = solver::solve(space, params, &guess, &config.solver)?;
    if !out.termination.is_converged() && out.final_ries_rel() > 1e-6 {
        bail!("solver stopped at ries_rel {:e}: {}", out.final_ries_rel(), out.termination);
    }
    Ok(out)
}

/// Distance of regularized solutions to the one at the smallest `(δ, μ0)`,
/// measured in the discrete H¹ seminorm.
pub fn regularization_convergence_study(base: &ExperimentConfig, sequence: &[(f64, f64)]) -> Result<StudyReport> {
    if sequence.is_empty() {
        bail!("empty (delta, mu0) sequence");
    }
    let space = MixedSpace::new(build_mesh(&base.domain)?)?;
    let area = space.mesh().area();
    let bed = space.mesh().boundary_measure(BoundaryTag::Bed);
    let (p, s) = (base.params.bulk.r(), base.params.slide.r());
    let bound = |d: f64, m: f64| area * d.powf(p) + bed * d.powf(s) + m;
    let reference = *sequence
        .iter()
        .min_by(|a, b| bound(a.0, a.1).total_cmp(&bound(b.0, b.1)))
        .expect("non-empty");
    let with = |d: f64, m: f64| -> Result<PStokesParams> { Ok(PStokesParams { mu0: m, ..base.params.with_delta(d)? }) };
    let ref_state = solve_to_tolerance(&space, &with(reference.0, reference.1)?, base)?.state;
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for &(d, m) in sequence {
        let res = with(d, m).and_then(|prm| solve_to_tolerance(&space, &prm, base));
        match res {
            Ok(out) => {
                let diff: Vec<f64> = out
                    .state
                    .velocity(&space)
                    .iter()
                    .zip(ref_state.velocity(&space))
                    .map(|(a, b)| a - b)
                    .collect();
                points.push(StudyPoint {
                    delta: d,
                    mu0: m,
                    bound: bound(d, m),
                    dist_sq: fem::grad_seminorm_sq(&space, &diff),
                    iterations: out.history.len() - 1,
                });
            }
            Err(e) => failures.push((d, m, format!("{e:#}"))),
        }
    }
    let fit: Vec<(f64, f64)> = points
        .iter()
        .filter(|pt| (pt.delta, pt.mu0) != reference && pt.dist_sq > 0.0)
        .map(|pt| (pt.bound.ln(), pt.dist_sq.ln()))
        .collect();
    let slope = least_squares_slope(&fit);
    let top = points
        .iter()
        .filter(|pt| (pt.delta, pt.mu0) != reference)
        .max_by(|a, b| a.bound.total_cmp(&b.bound));
    let c_tilde = top.map_or(f64::NAN, |pt| pt.dist_sq / pt.bound);
    let violations = points.iter().filter(|pt| pt.dist_sq > c_tilde * pt.bound * (1.0 + 1e-12)).count();
    Ok(StudyReport { reference, points, slope, c_tilde, violations, failures })
}

pub fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}
