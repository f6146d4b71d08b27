//! Outer nonlinear iterations, step-size control and the Riesz residual norm.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::fem::{self, FemError, MixedSpace, MixedState, PStokesParams};
use crate::linalg::{self, Factorization, LinearSolveReport, SolveError};
use crate::math::CompensatedSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Picard,
    PicardExact,
    NewtonArmijo,
    NewtonExact,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Picard, Method::PicardExact, Method::NewtonArmijo, Method::NewtonExact];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Picard => "picard",
            Method::PicardExact => "picard-exact",
            Method::NewtonArmijo => "newton-armijo",
            Method::NewtonExact => "newton-exact",
        }
    }

    pub fn is_newton(&self) -> bool {
        matches!(self, Method::NewtonArmijo | Method::NewtonExact)
    }

    fn uses_exact_search(&self) -> bool {
        matches!(self, Method::PicardExact | Method::NewtonExact)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| format!("unknown method '{s}' (expected picard, picard-exact, newton-armijo, newton-exact)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    /// Armijo sufficient-decrease constant.
    pub gamma: f64,
    /// Armijo steps below this are replaced by it (0 disables).
    pub min_step: f64,
    pub max_outer: usize,
    pub tol_rel_ries: f64,
    /// Absolute floor on the Riesz norm; 0 disables.
    pub tol_abs_ries: f64,
    pub max_armijo_evals: usize,
    pub max_bisect_evals: usize,
    pub bracket_b0: f64,
    pub linear_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::NewtonArmijo,
            gamma: 1e-4,
            min_step: 0.0,
            max_outer: 100,
            tol_rel_ries: 1e-13,
            tol_abs_ries: 0.0,
            max_armijo_evals: 20,
            max_bisect_evals: 25,
            bracket_b0: 2.0,
            linear_tol: linalg::DEFAULT_TOL,
        }
    }
}

impl SolverConfig {
    pub fn with_method(method: Method) -> Self {
        SolverConfig { method, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(SolverError::Config("gamma must lie in (0, 1)"));
        }
        if !(self.min_step >= 0.0 && self.min_step <= 1.0) {
            return Err(SolverError::Config("min_step must lie in [0, 1]"));
        }
        if self.max_armijo_evals == 0 || self.max_bisect_evals < 2 {
            return Err(SolverError::Config("evaluation caps too small"));
        }
        if !(self.tol_rel_ries > 0.0) || !(self.tol_abs_ries >= 0.0) || !(self.linear_tol > 0.0) {
            return Err(SolverError::Config("tolerances must be positive"));
        }
        if !(self.bracket_b0 > 0.0) || !self.bracket_b0.is_finite() {
            return Err(SolverError::Config("bracket_b0 must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Linear(#[from] SolveError),
    #[error("linear solve missed its tolerance: {0}")]
    LinearTolerance(LinearSolveReport),
    #[error("initial state violates the essential boundary conditions")]
    InitialState,
}

/// Per-step notes attached to an [`IterationRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepFlags {
    /// Armijo fell below `min_step` and the floor was taken unchecked.
    pub min_step_accepted: bool,
    /// The evaluation budget ran out; the best step found was used.
    pub budget_exhausted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub j: f64,
    /// Accepted increment `J_k − J_{k−1}`; zero at `k = 0`. Resolves
    /// decreases below the spacing of `j` itself.
    pub dj: f64,
    pub ries: f64,
    pub ries_rel: f64,
    pub alpha: f64,
    pub n_merit_evals: usize,
    /// Seconds since the solve started.
    pub wall_time: f64,
    /// Seconds spent in the step-size search of this iteration.
    pub step_time: f64,
    /// Seconds spent in this whole iteration.
    pub iter_time: f64,
    pub flags: StepFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// The accepted step did not lower J; the iterate was kept.
    Stagnated,
    LineSearchFailed(String),
    LinearSolveFailed(String),
    NotDescent { slope: f64 },
}

impl Termination {
    pub fn is_converged(&self) -> bool {
        matches!(self, Termination::Converged)
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Termination::Converged => f.write_str("converged"),
            Termination::MaxIterations => f.write_str("iteration cap reached"),
            Termination::Stagnated => f.write_str("stagnated (no decrease of J)"),
            Termination::LineSearchFailed(m) => write!(f, "line search failed: {m}"),
            Termination::LinearSolveFailed(m) => write!(f, "linear solve failed: {m}"),
            Termination::NotDescent { slope } => write!(f, "not a descent direction (slope {slope:e})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub state: MixedState,
    pub history: Vec<IterationRecord>,
    pub termination: Termination,
}

impl SolveOutcome {
    /// First iteration index with `ries_rel ≤ level`.
    pub fn iterations_to(&self, level: f64) -> Option<usize> {
        self.history.iter().find(|r| r.ries_rel <= level).map(|r| r.k)
    }

    pub fn final_ries_rel(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.ries_rel)
    }
}

/// Monotone seconds source; the core crate has no clock of its own.
pub trait Clock {
    fn now(&mut self) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now(&mut self) -> f64 {
        0.0
    }
}

/// `t ↦ J(v + t w)` seen through increments and slopes.
pub trait LineFunctional {
    type Error;
    /// `J(v + t w) − J(v)`.
    fn increment(&mut self, t: f64) -> Result<f64, Self::Error>;
    /// `⟨G(v + t w), w⟩`.
    fn slope(&mut self, t: f64) -> Result<f64, Self::Error>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchResult {
    pub alpha: f64,
    /// `J(v + α w) − J(v)` when it was evaluated at the returned step.
    pub increment: Option<f64>,
    pub evals: usize,
    /// Final bisection bracket (exact search only).
    pub bracket: Option<(f64, f64)>,
    pub flags: StepFlags,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LineSearchError<E> {
    #[error("direction is not a descent direction (slope {slope:e})")]
    NotDescent { slope: f64 },
    #[error("no decrease within {evals} evaluations (best increment {best:e})")]
    NoDecrease { evals: usize, best: f64 },
    #[error("evaluation failed: {0}")]
    Eval(E),
}

/// Backtracking over `1, 1/2, 1/4, …` until
/// `J(v+αw) − J(v) ≤ α γ ⟨G(v), w⟩`.
pub fn armijo_search<L: LineFunctional>(
    f: &mut L,
    slope0: f64,
    gamma: f64,
    min_step: f64,
    max_evals: usize,
) -> Result<LineSearchResult, LineSearchError<L::Error>> {
    if !(slope0 < 0.0) {
        return Err(LineSearchError::NotDescent { slope: slope0 });
    }
    let mut alpha = 1.0;
    let mut evals = 0;
    let mut best: Option<(f64, f64)> = None;
    while evals < max_evals {
        let inc = f.increment(alpha).map_err(LineSearchError::Eval)?;
        evals += 1;
        if inc <= alpha * gamma * slope0 {
            return Ok(LineSearchResult { alpha, increment: Some(inc), evals, bracket: None, flags: StepFlags::default() });
        }
        if inc < best.map_or(f64::INFINITY, |b| b.1) {
            best = Some((alpha, inc));
        }
        let next = 0.5 * alpha;
        if next < min_step {
            let increment = (alpha == min_step).then_some(inc);
            let flags = StepFlags { min_step_accepted: true, budget_exhausted: false };
            return Ok(LineSearchResult { alpha: min_step, increment, evals, bracket: None, flags });
        }
        alpha = next;
    }
    match best {
        Some((alpha, inc)) if inc < 0.0 => Ok(LineSearchResult {
            alpha,
            increment: Some(inc),
            evals,
            bracket: None,
            flags: StepFlags { min_step_accepted: false, budget_exhausted: true },
        }),
        _ => Err(LineSearchError::NoDecrease { evals, best: best.map_or(f64::NAN, |b| b.1) }),
    }
}

/// Approximate minimizer of `t ↦ J(v + t w)` on `[0, ∞)`: bracket by
/// doubling from `b0`, bisect on the sign of the slope, finish with one
/// merit evaluation to confirm the decrease. `max_evals` covers all of it.
pub fn exact_search<L: LineFunctional>(
    f: &mut L,
    slope0: f64,
    b0: f64,
    max_evals: usize,
) -> Result<LineSearchResult, LineSearchError<L::Error>> {
    if !(slope0 < 0.0) {
        return Err(LineSearchError::NotDescent { slope: slope0 });
    }
    let budget = max_evals.saturating_sub(1);
    let (mut a, mut b) = (0.0, b0);
    let mut evals = 0;
    let mut bracketed = false;
    while evals < budget {
        let s = f.slope(b).map_err(LineSearchError::Eval)?;
        evals += 1;
        if s >= 0.0 {
            bracketed = true;
            break;
        }
        a = b;
        b *= 2.0;
    }
    while bracketed && evals < budget {
        let m = 0.5 * (a + b);
        let s = f.slope(m).map_err(LineSearchError::Eval)?;
        evals += 1;
        if s >= 0.0 {
            b = m;
        } else {
            a = m;
        }
    }
    let mut flags = StepFlags::default();
    let t = if bracketed {
        0.5 * (a + b)
    } else {
        flags.budget_exhausted = true;
        a
    };
    if t == 0.0 {
        return Err(LineSearchError::NoDecrease { evals, best: f64::NAN });
    }
    let inc = f.increment(t).map_err(LineSearchError::Eval)?;
    evals += 1;
    if inc < 0.0 {
        return Ok(LineSearchResult { alpha: t, increment: Some(inc), evals, bracket: Some((a, b)), flags });
    }
    // The slope is negative on [0, a], so J decreases there in exact arithmetic.
    if a > 0.0 && a < t {
        flags.budget_exhausted = true;
        return Ok(LineSearchResult { alpha: a, increment: None, evals, bracket: Some((a, b)), flags });
    }
    Err(LineSearchError::NoDecrease { evals, best: inc })
}

/// The FEM merit restricted to a line through `state` along `direction`.
pub struct FemLine<'a> {
    space: &'a MixedSpace,
    params: &'a PStokesParams,
    state: &'a MixedState,
    direction: &'a [f64],
    pressure_shift: f64,
}

impl<'a> FemLine<'a> {
    /// `J(v + t w)` along `w`, evaluated through the Lagrangian
    /// `J(v) − (π, div v)` with the pressure of `state` held fixed. For a
    /// divergence-free `w` the two agree; the shifted form drops the roundoff
    /// term `(π, div v)` that otherwise swamps the slope near a solution.
    pub fn new(space: &'a MixedSpace, params: &'a PStokesParams, state: &'a MixedState, direction: &'a [f64]) -> Self {
        let div = fem::divergence_moments(space, &direction[..space.n_vdofs()]);
        let pressure_shift = -linalg::dot(state.pressure(space), &div);
        FemLine { space, params, state, direction, pressure_shift }
    }
}

impl LineFunctional for FemLine<'_> {
    type Error = FemError;

    fn increment(&mut self, t: f64) -> Result<f64, FemError> {
        let dj = fem::functional_increment(self.space, self.params, self.state, self.direction, t)?;
        Ok(dj + t * self.pressure_shift)
    }

    fn slope(&mut self, t: f64) -> Result<f64, FemError> {
        let s = self.state.axpy(t, self.direction);
        let dj = fem::functional_directional_derivative(self.space, self.params, &s, self.direction)?;
        Ok(dj + self.pressure_shift)
    }
}

/// Factored Riesz system `[[L, Bᵀ], [B, 0]]`, reused across iterations.
#[derive(Debug, Clone)]
pub struct RieszOperator {
    fact: Factorization,
    tol: f64,
}

impl RieszOperator {
    pub fn new(space: &MixedSpace, tol: f64) -> Result<Self, SolverError> {
        let m = fem::assemble_riesz_matrix(space)?;
        Ok(RieszOperator { fact: Factorization::new(&m)?, tol })
    }

    /// Riesz representative `ṽ` of a velocity residual (constrained entries zero).
    pub fn representative(&self, space: &MixedSpace, g: &[f64]) -> Result<Vec<f64>, SolverError> {
        let mut rhs = vec![0.0; space.n_dofs()];
        rhs[..g.len()].copy_from_slice(g);
        for &d in space.constrained_dofs() {
            rhs[d] = 0.0;
        }
        let (x, rep) = self.fact.solve(&rhs, self.tol)?;
        if !rep.success {
            return Err(SolverError::LinearTolerance(rep));
        }
        Ok(x)
    }

    /// `ries² = ∫|∇ṽ|² + ∫_{Γb}|ṽ|²`.
    pub fn norm(&self, space: &MixedSpace, g: &[f64]) -> Result<f64, SolverError> {
        let x = self.representative(space, g)?;
        let v = &x[..space.n_vdofs()];
        Ok(crate::math::sqrt(fem::grad_seminorm_sq(space, v) + fem::bed_l2_sq(space, v)))
    }
}

pub fn riesz_norm(space: &MixedSpace, params: &PStokesParams, state: &MixedState) -> Result<f64, SolverError> {
    let g = fem::velocity_residual(space, params, state)?;
    RieszOperator::new(space, linalg::DEFAULT_TOL)?.norm(space, &g)
}

pub fn newton_solve(
    space: &MixedSpace,
    params: &PStokesParams,
    state0: &MixedState,
    config: &SolverConfig,
) -> Result<SolveOutcome, SolverError> {
    if !config.method.is_newton() {
        return Err(SolverError::Config("newton_solve needs a Newton method"));
    }
    solve_with_clock(space, params, state0, config, &mut NoClock)
}

pub fn picard_solve(
    space: &MixedSpace,
    params: &PStokesParams,
    state0: &MixedState,
    config: &SolverConfig,
) -> Result<SolveOutcome, SolverError> {
    if config.method.is_newton() {
        return Err(SolverError::Config("picard_solve needs a Picard method"));
    }
    solve_with_clock(space, params, state0, config, &mut NoClock)
}

pub fn solve(
    space: &MixedSpace,
    params: &PStokesParams,
    state0: &MixedState,
    config: &SolverConfig,
) -> Result<SolveOutcome, SolverError> {
    solve_with_clock(space, params, state0, config, &mut NoClock)
}

enum Direction {
    Ready(Vec<f64>),
    Failed(Termination),
}

fn compute_direction(
    space: &MixedSpace,
    params: &PStokesParams,
    state: &MixedState,
    config: &SolverConfig,
) -> Result<Direction, SolverError> {
    // Both methods solve for the increment with the full residual on the
    // right. For Picard this equals v̂ − v but keeps its accuracy when the
    // increment is tiny compared with v.
    let matrix = if config.method.is_newton() {
        fem::assemble_jacobian(space, params, state)?
    } else {
        fem::assemble_picard_matrix(space, params, state)?.0
    };
    let mut rhs = fem::assemble_residual(space, params, state)?;
    rhs.iter_mut().for_each(|x| *x = -*x);
    match linalg::solve(&matrix, &rhs, config.linear_tol) {
        Ok((w, rep)) if rep.success => Ok(Direction::Ready(w)),
        Ok((_, rep)) => Ok(Direction::Failed(Termination::LinearSolveFailed(format!("{rep}")))),
        Err(e) => Ok(Direction::Failed(Termination::LinearSolveFailed(format!("{e}")))),
    }
}

/// Runs the configured method from `state0`. Failures after the first
/// record end the loop and are reported through [`SolveOutcome::termination`].
pub fn solve_with_clock(
    space: &MixedSpace,
    params: &PStokesParams,
    state0: &MixedState,
    config: &SolverConfig,
    clock: &mut dyn Clock,
) -> Result<SolveOutcome, SolverError> {
    config.validate()?;
    params.validate()?;
    if state0.coeffs().len() != space.n_dofs() {
        return Err(FemError::Dimension { expected: space.n_dofs(), got: state0.coeffs().len() }.into());
    }
    if !state0.satisfies_constraints(space) {
        return Err(SolverError::InitialState);
    }
    let start = clock.now();
    let riesz = RieszOperator::new(space, config.linear_tol)?;
    let mut state = state0.clone();
    let j0 = fem::evaluate_functional(space, params, &state)?;
    let mut g = fem::velocity_residual(space, params, &state)?;
    let ries0 = riesz.norm(space, &g)?;
    // J_k = J_0 + Σ increments keeps differences exact to rounding of each
    // increment. Increments come from the line functional, so they include
    // the fixed-pressure shift, which is zero up to roundoff.
    let mut j_acc = CompensatedSum::default();
    j_acc.add(j0);
    let mut history = vec![IterationRecord {
        k: 0,
        j: j0,
        dj: 0.0,
        ries: ries0,
        ries_rel: 1.0,
        alpha: 0.0,
        n_merit_evals: 0,
        wall_time: clock.now() - start,
        step_time: 0.0,
        iter_time: 0.0,
        flags: StepFlags::default(),
    }];
    let mut ries = ries0;
    let mut ries_rel = 1.0;
    let termination = loop {
        if ries_rel <= config.tol_rel_ries || ries <= config.tol_abs_ries {
            break Termination::Converged;
        }
        let k = history.len();
        if k > config.max_outer {
            break Termination::MaxIterations;
        }
        let iter_start = clock.now();
        let dir = match compute_direction(space, params, &state, config)? {
            Direction::Ready(d) => d,
            Direction::Failed(t) => break t,
        };
        let step_start = clock.now();
        let mut line = FemLine::new(space, params, &state, &dir);
        let shift = line.pressure_shift;
        let slope0 = linalg::dot(&g, &dir[..space.n_vdofs()]) + shift;
        let search = match config.method {
            Method::Picard => Ok(LineSearchResult { alpha: 1.0, increment: None, evals: 0, bracket: None, flags: StepFlags::default() }),
            Method::NewtonArmijo => {
                armijo_search(&mut line, slope0, config.gamma, config.min_step, config.max_armijo_evals)
            }
            Method::NewtonExact | Method::PicardExact => {
                exact_search(&mut line, slope0, config.bracket_b0, config.max_bisect_evals)
            }
        };
        let step_time = clock.now() - step_start;
        let step = match search {
            Ok(s) => s,
            Err(LineSearchError::NotDescent { slope }) => break Termination::NotDescent { slope },
            Err(LineSearchError::Eval(e)) => return Err(e.into()),
            Err(e) => break Termination::LineSearchFailed(format!("{e}")),
        };
        let increment = match step.increment {
            Some(i) => i,
            None => fem::functional_increment(space, params, &state, &dir, step.alpha)? + step.alpha * shift,
        };
        let controlled = config.method != Method::Picard && !step.flags.min_step_accepted;
        if controlled && !(increment < 0.0) {
            break Termination::Stagnated;
        }
        debug_assert!(!config.method.uses_exact_search() || step.evals <= config.max_bisect_evals);
        state = state.axpy(step.alpha, &dir);
        j_acc.add(increment);
        g = fem::velocity_residual(space, params, &state)?;
        ries = match riesz.norm(space, &g) {
            Ok(r) => r,
            Err(SolverError::LinearTolerance(rep)) => break Termination::LinearSolveFailed(format!("{rep}")),
            Err(e) => return Err(e),
        };
        ries_rel = if ries0 > 0.0 { ries / ries0 } else { 0.0 };
        let now = clock.now();
        history.push(IterationRecord {
            k,
            j: j_acc.value(),
            dj: increment,
            ries,
            ries_rel,
            alpha: step.alpha,
            n_merit_evals: step.evals,
            wall_time: now - start,
            step_time,
            iter_time: now - iter_start,
            flags: step.flags,
        });
    };
    Ok(SolveOutcome { state, history, termination })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{PowerLaw, Vec2};
    use crate::mesh::{build_mesh, BoundaryTag, DomainSpec, Mesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `J(v) = ½‖v‖²` along `w`, counting calls.
    struct Quadratic {
        v: Vec<f64>,
        w: Vec<f64>,
        calls: usize,
    }

    impl Quadratic {
        fn value(&self, t: f64) -> f64 {
            0.5 * self.v.iter().zip(&self.w).map(|(a, b)| (a + t * b) * (a + t * b)).sum::<f64>()
        }
        fn slope0(&self) -> f64 {
            linalg::dot(&self.v, &self.w)
        }
    }

    impl LineFunctional for Quadratic {
        type Error = ();
        fn increment(&mut self, t: f64) -> Result<f64, ()> {
            self.calls += 1;
            Ok(self.value(t) - self.value(0.0))
        }
        fn slope(&mut self, t: f64) -> Result<f64, ()> {
            self.calls += 1;
            Ok(self.v.iter().zip(&self.w).map(|(a, b)| (a + t * b) * b).sum())
        }
    }

    fn newton_quadratic() -> Quadratic {
        let v = vec![1.0, -2.0, 0.5];
        let w = v.iter().map(|x| -x).collect();
        Quadratic { v, w, calls: 0 }
    }

    #[test]
    fn armijo_takes_full_newton_step_on_quadratic() {
        let mut q = newton_quadratic();
        let s0 = q.slope0();
        let r = armijo_search(&mut q, s0, 1e-4, 0.0, 20).unwrap();
        assert_eq!(r.alpha, 1.0);
        assert_eq!(r.evals, 1);
        let inc = r.increment.unwrap();
        assert!(inc <= r.alpha * 1e-4 * s0);
    }

    #[test]
    fn armijo_halves_overlong_steps() {
        // w = -4v: the minimizer is at 1/4, Armijo with gamma 1/2 needs t ≤ 1/4
        let mut q = newton_quadratic();
        q.w.iter_mut().for_each(|x| *x *= 4.0);
        let s0 = q.slope0();
        let r = armijo_search(&mut q, s0, 0.5, 0.0, 20).unwrap();
        assert_eq!(r.alpha, 0.25);
        assert_eq!(r.evals, 3);
    }

    #[test]
    fn armijo_rejects_ascent_and_respects_caps() {
        let mut q = newton_quadratic();
        q.w.iter_mut().for_each(|x| *x = -*x);
        let s0 = q.slope0();
        assert!(matches!(armijo_search(&mut q, s0, 1e-4, 0.0, 20), Err(LineSearchError::NotDescent { .. })));
        assert_eq!(q.calls, 0);

        let mut q = newton_quadratic();
        q.w.iter_mut().for_each(|x| *x *= 1e6);
        let s0 = q.slope0();
        let r = armijo_search(&mut q, s0, 1e-4, 0.0, 5);
        assert!(matches!(r, Err(LineSearchError::NoDecrease { evals: 5, .. })));
        assert_eq!(q.calls, 5);
    }

    #[test]
    fn armijo_min_step_floor_is_flagged() {
        let mut q = newton_quadratic();
        q.w.iter_mut().for_each(|x| *x *= 8.0);
        let s0 = q.slope0();
        let r = armijo_search(&mut q, s0, 1e-4, 0.5, 20).unwrap();
        assert_eq!(r.alpha, 0.5);
        assert!(r.flags.min_step_accepted);
        assert_eq!(r.evals, 2);
    }

    #[test]
    fn exact_search_finds_quadratic_minimizer() {
        for cap in [5usize, 10, 25] {
            let mut q = newton_quadratic();
            let s0 = q.slope0();
            let r = exact_search(&mut q, s0, 2.0, cap).unwrap();
            let bound = libm::pow(2.0, 1.0 - cap as f64) * 2.0;
            assert!((r.alpha - 1.0).abs() <= bound, "cap {cap}: {}", r.alpha);
            assert!(r.evals <= cap && q.calls == r.evals);
            let (a, b) = r.bracket.unwrap();
            assert!(q.slope(a).unwrap() < 0.0 && q.slope(b).unwrap() >= 0.0);
            assert!(r.increment.unwrap() < 0.0);
        }
    }

    #[test]
    fn exact_search_doubles_the_bracket() {
        let mut q = newton_quadratic();
        q.w.iter_mut().for_each(|x| *x /= 10.0);
        let s0 = q.slope0();
        let r = exact_search(&mut q, s0, 2.0, 25).unwrap();
        assert!((r.alpha - 10.0).abs() < 1e-4);
        assert!(r.evals <= 25);
    }

    #[test]
    fn bisection_width_halves() {
        let mut q = newton_quadratic();
        let s0 = q.slope0();
        let widths: Vec<f64> = (3..12)
            .map(|cap| {
                let (a, b) = exact_search(&mut q, s0, 2.0, cap).unwrap().bracket.unwrap();
                b - a
            })
            .collect();
        for w in widths.windows(2) {
            assert_eq!(w[1], 0.5 * w[0]);
        }
    }

    fn block_space(nx: usize, ny: usize) -> MixedSpace {
        let mesh = build_mesh(&DomainSpec::block(nx, ny)).unwrap();
        MixedSpace::new(mesh).unwrap()
    }

    fn p2_params(tau: f64) -> PStokesParams {
        PStokesParams {
            bulk: PowerLaw::new(2.0, 1e-6, true).unwrap(),
            slide: PowerLaw::new(2.0, 1e-6, false).unwrap(),
            b: 1e5,
            tau,
            mu0: 1e-3,
            rho: 910.0,
            gravity: Vec2::new(0.5, -9.8),
            alpha: 0.0,
            extra_load: None,
        }
    }

    #[test]
    fn linear_problem_converges_in_one_iteration() {
        let space = block_space(4, 2);
        let params = p2_params(1e4);
        for method in Method::ALL {
            // bisection leaves |α − 1| ≤ 2^{-23}
            let tol = if method.uses_exact_search() { 1e-6 } else { 1e-9 };
            let cfg = SolverConfig { tol_rel_ries: tol, ..SolverConfig::with_method(method) };
            let out = solve(&space, &params, &MixedState::zeros(&space), &cfg).unwrap();
            assert!(out.termination.is_converged(), "{method}: {:?}", out.termination);
            assert_eq!(out.history.len(), 2, "{method}");
            let alpha = out.history[1].alpha;
            if method.uses_exact_search() {
                assert!((alpha - 1.0).abs() < 1e-6, "{method}: {alpha}");
            } else {
                assert_eq!(alpha, 1.0, "{method}");
            }
        }
    }

    #[test]
    fn stationary_start_exits_immediately() {
        let space = block_space(4, 2);
        let params = p2_params(1e4);
        let cfg = SolverConfig { tol_rel_ries: 1e-9, ..SolverConfig::with_method(Method::Picard) };
        let sol = solve(&space, &params, &MixedState::zeros(&space), &cfg).unwrap().state;
        let r = riesz_norm(&space, &params, &sol).unwrap();
        let r0 = riesz_norm(&space, &params, &MixedState::zeros(&space)).unwrap();
        assert!(r <= 1e-9 * r0);
        let cfg = SolverConfig { tol_abs_ries: 1e-9 * r0, ..cfg };
        let out = solve(&space, &params, &sol, &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(out.termination.is_converged());
    }

    fn power_params() -> PStokesParams {
        PStokesParams {
            bulk: PowerLaw::new(4.0 / 3.0, 1e-4, true).unwrap(),
            slide: PowerLaw::new(4.0 / 3.0, 1e-4, false).unwrap(),
            b: 1.077e5,
            tau: 1e3,
            mu0: 1e-10,
            rho: 910.0,
            gravity: Vec2::new(0.0856, -9.8096),
            alpha: 0.0,
            extra_load: None,
        }
    }

    #[test]
    fn newton_history_decreases_and_respects_budgets() {
        let space = block_space(6, 3);
        let params = power_params();
        let (m, rhs) = fem::assemble_linear_stokes(&space, &params, 1e6, true).unwrap();
        let (x, _) = linalg::solve(&m, &rhs, 1e-10).unwrap();
        let s0 = MixedState::from_vec(&space, x).unwrap();
        for method in Method::ALL {
            let cfg = SolverConfig { tol_rel_ries: 1e-11, max_outer: 80, ..SolverConfig::with_method(method) };
            let out = solve(&space, &params, &s0, &cfg).unwrap();
            assert!(out.termination.is_converged(), "{method}: {}", out.termination);
            assert_eq!(out.history[0].ries_rel, 1.0);
            for pair in out.history.windows(2) {
                if method != Method::Picard {
                    // stored J can repeat once increments drop below its ulp
                    assert!(pair[1].dj < 0.0 && pair[1].j <= pair[0].j, "{method}: J rose at k={}", pair[1].k);
                }
                assert!(pair[1].alpha > 0.0);
                let cap = if method.uses_exact_search() { 25 } else { 20 };
                assert!(pair[1].n_merit_evals <= cap);
            }
        }
    }

    #[test]
    fn fixed_pressure_line_matches_merit_for_divergence_free_directions() {
        let space = block_space(4, 2);
        let params = power_params();
        let (m, rhs) = fem::assemble_linear_stokes(&space, &params, 1e6, true).unwrap();
        let (x, _) = linalg::solve(&m, &rhs, 1e-12).unwrap();
        let mut s = MixedState::from_vec(&space, x).unwrap();
        s.coeffs_mut()[space.n_vdofs()..].iter_mut().for_each(|p| *p = 3e4);
        let dir = s.coeffs().iter().map(|v| -0.1 * v).collect::<Vec<_>>();
        let mut line = FemLine::new(&space, &params, &s, &dir);
        let plain = fem::functional_directional_derivative(&space, &params, &s, &dir).unwrap();
        let slope = line.slope(0.0).unwrap();
        assert!((slope - plain).abs() <= 1e-8 * plain.abs(), "{slope} vs {plain}");
        let dj = fem::functional_increment(&space, &params, &s, &dir, 0.5).unwrap();
        assert!((line.increment(0.5).unwrap() - dj).abs() <= 1e-8 * dj.abs());

        // off the constraint set the shift is −t (π, div w)
        let bumped: Vec<f64> = dir.iter().enumerate().map(|(i, v)| v + if i == 9 { 1.0 } else { 0.0 }).collect();
        let mut line = FemLine::new(&space, &params, &s, &bumped);
        let div = fem::divergence_moments(&space, &bumped[..space.n_vdofs()]);
        let shift = -linalg::dot(s.pressure(&space), &div);
        assert!(shift.abs() > 0.0);
        let plain = fem::functional_increment(&space, &params, &s, &bumped, 0.25).unwrap();
        let got = line.increment(0.25).unwrap();
        assert!((got - plain - 0.25 * shift).abs() <= 1e-9 * (plain.abs() + shift.abs()));
    }

    #[test]
    fn recorded_increments_add_up_to_j() {
        let space = block_space(6, 3);
        let params = power_params();
        let (m, rhs) = fem::assemble_linear_stokes(&space, &params, 1e6, true).unwrap();
        let (x, _) = linalg::solve(&m, &rhs, 1e-10).unwrap();
        let s0 = MixedState::from_vec(&space, x).unwrap();
        let out = solve(&space, &params, &s0, &SolverConfig::with_method(Method::NewtonArmijo)).unwrap();
        assert_eq!(out.history[0].dj, 0.0);
        for pair in out.history.windows(2) {
            assert!(pair[1].dj < 0.0);
            let d = pair[1].j - pair[0].j;
            assert!((d - pair[1].dj).abs() <= 1e-12 * pair[0].j.abs(), "{d} vs {}", pair[1].dj);
        }
        let j = fem::evaluate_functional(&space, &params, &out.state).unwrap();
        let last = out.history.last().unwrap().j;
        assert!((j - last).abs() <= 1e-10 * j.abs(), "{j} vs {last}");
    }

    #[test]
    fn newton_step_identity_and_descent() {
        let space = block_space(4, 2);
        let params = power_params();
        let (m, rhs) = fem::assemble_linear_stokes(&space, &params, 1e6, true).unwrap();
        let (x, _) = linalg::solve(&m, &rhs, 1e-12).unwrap();
        let s = MixedState::from_vec(&space, x).unwrap();
        let k = fem::assemble_jacobian(&space, &params, &s).unwrap();
        let mut f = fem::assemble_residual(&space, &params, &s).unwrap();
        f.iter_mut().for_each(|x| *x = -*x);
        let (w, _) = linalg::solve(&k, &f, 1e-12).unwrap();
        let nvd = space.n_vdofs();
        let g = fem::velocity_residual(&space, &params, &s).unwrap();
        let gw = linalg::dot(&g, &w[..nvd]);
        assert!(gw < 0.0);
        // velocity block quadratic form
        let mut wv = w.clone();
        wv[nvd..].iter_mut().for_each(|x| *x = 0.0);
        let kw = k.quadratic_form(&wv, &wv);
        assert!((kw + gw).abs() <= 1e-8 * gw.abs(), "{kw} vs {}", -gw);
    }

    #[test]
    fn riesz_norm_is_linear_in_the_residual() {
        let space = block_space(3, 2);
        let op = RieszOperator::new(&space, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g: Vec<f64> = (0..space.n_vdofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for &d in space.constrained_dofs() {
            if d < g.len() {
                g[d] = 0.0;
            }
        }
        let r1 = op.norm(&space, &g).unwrap();
        let g2: Vec<f64> = g.iter().map(|x| 2.0 * x).collect();
        let r2 = op.norm(&space, &g2).unwrap();
        assert!((r2 - 2.0 * r1).abs() <= 1e-12 * r2);
        assert_eq!(op.norm(&space, &vec![0.0; space.n_vdofs()]).unwrap(), 0.0);
    }

    #[test]
    fn riesz_norm_matches_dense_null_space_oracle() {
        // two triangles, one AIR edge on top, slip bed, walls
        let verts = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let tris = vec![[0, 1, 2], [0, 2, 3]];
        let edges = vec![
            crate::mesh::BoundaryEdge { vertices: [0, 1], tag: BoundaryTag::Bed },
            crate::mesh::BoundaryEdge { vertices: [1, 2], tag: BoundaryTag::Air },
            crate::mesh::BoundaryEdge { vertices: [2, 3], tag: BoundaryTag::Air },
            crate::mesh::BoundaryEdge { vertices: [3, 0], tag: BoundaryTag::Dirichlet },
        ];
        let space = MixedSpace::new(Mesh::new(verts, tris, edges).unwrap()).unwrap();
        let nvd = space.n_vdofs();
        let free: Vec<usize> = (0..nvd).filter(|&d| !space.is_constrained(d)).collect();
        let unit = |d: usize| {
            let mut e = vec![0.0; nvd];
            e[d] = 1.0;
            e
        };
        // Laplacian and bed mass by polarization of the quadratic forms
        let quad = |f: &dyn Fn(&[f64]) -> f64, a: usize, b: usize| {
            let mut s = unit(a);
            s[b] += 1.0;
            0.5 * (f(&s) - f(&unit(a)) - f(&unit(b)))
        };
        let lap = |v: &[f64]| fem::grad_seminorm_sq(&space, v);
        let bed = |v: &[f64]| fem::bed_l2_sq(&space, v);
        let n = free.len();
        let l = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                lap(&unit(free[i]))
            } else {
                quad(&lap, free[i], free[j])
            }
        });
        let mb = nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                bed(&unit(free[i]))
            } else {
                quad(&bed, free[i], free[j])
            }
        });
        let np = space.n_pdofs();
        let mut bmat = nalgebra::DMatrix::zeros(np, n);
        for (j, &d) in free.iter().enumerate() {
            let m = fem::divergence_moments(&space, &unit(d));
            for k in 0..np {
                bmat[(k, j)] = m[k];
            }
        }
        // null space of B from the eigenvectors of BᵀB
        let eig = nalgebra::SymmetricEigen::new(bmat.transpose() * &bmat);
        let tol = 1e-12 * eig.eigenvalues.amax();
        let kernel: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i].abs() <= tol).collect();
        assert_eq!(kernel.len(), n - np);
        let z = nalgebra::DMatrix::from_fn(n, kernel.len(), |r, c| eig.eigenvectors[(r, kernel[c])]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gfree = nalgebra::DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let lz = z.transpose() * &l * &z;
        let y = lz.lu().solve(&(z.transpose() * &gfree)).unwrap();
        let vt = &z * y;
        let expected = ((vt.transpose() * &l * &vt)[(0, 0)] + (vt.transpose() * &mb * &vt)[(0, 0)]).sqrt();

        let mut g = vec![0.0; nvd];
        for (j, &d) in free.iter().enumerate() {
            g[d] = gfree[j];
        }
        let got = RieszOperator::new(&space, 1e-12).unwrap().norm(&space, &g).unwrap();
        assert!((got - expected).abs() <= 1e-9 * expected, "{got} vs {expected}");
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert_eq!("NEWTON_ARMIJO".parse::<Method>().unwrap(), Method::NewtonArmijo);
        assert!("gauss".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { max_armijo_evals: 0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { tol_rel_ries: 0.0, ..Default::default() }.validate().is_err());
    }
}
