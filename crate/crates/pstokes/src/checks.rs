//! Invariant suite behind `pstokes check`: derivative consistency,
//! coercivity, monotonicity, the Newton-step identity, line-search budgets
//! and the linear oracle. Every check is seeded and reports one line.

use std::fmt;
use std::time::Instant;

use anyhow::Result;
use pstokes_core::fem::{self, MixedSpace, MixedState, PStokesParams};
use pstokes_core::kernels::{self, Tensor};
use pstokes_core::linalg;
use pstokes_core::mesh::{build_mesh, DomainSpec};
use pstokes_core::solver::{self, FemLine, LineFunctional, Method, SolverConfig};
use pstokes_core::{Mat2, PowerLaw, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::experiments::{self, ExperimentConfig};
use crate::manufactured::{self, Manufactured};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {} ({:.1}s)", self.name, self.detail, self.seconds)
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e:#}")),
    };
    CheckResult { name: name.to_string(), passed, detail, seconds: t.elapsed().as_secs_f64() }
}

/// Coarse glacier used by the derivative and coercivity checks.
pub fn coarse_glacier() -> Result<(MixedSpace, PStokesParams)> {
    let spec = DomainSpec { copies: 1, ..DomainSpec::ismip_b(8, 4) };
    let space = MixedSpace::new(build_mesh(&spec)?)?;
    Ok((space, experiments::default_params(spec.kind, 0.0)))
}

/// Smooth random field of size ~`scale` m/a plus nodal noise, zero on
/// constrained dofs.
pub fn random_field(space: &MixedSpace, rng: &mut ChaCha8Rng, scale: f64) -> MixedState {
    let modes: Vec<[f64; 6]> = (0..4).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
    let mut s = space.interpolate_velocity(|x| {
        let (u, w) = (x[0] / 5000.0, x[1] / 1000.0);
        let mut v = [0.0; 2];
        for (k, m) in modes.iter().enumerate() {
            let f = (k + 1) as f64;
            let phase = (f * 3.1 * u + m[0]).sin() * (f * 1.7 * w + m[1]).cos();
            v[0] += scale * (m[2] * phase + m[4] * w);
            v[1] += 0.1 * scale * (m[3] * phase + m[5] * u);
        }
        Vec2::new(v[0], v[1])
    });
    for (d, c) in s.coeffs_mut().iter_mut().enumerate() {
        if space.is_constrained(d) {
            *c = 0.0;
        } else {
            *c += 1e-3 * scale * rng.gen_range(-1.0..1.0);
        }
    }
    s
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    linalg::norm2(&d) / linalg::norm2(b).max(f64::MIN_POSITIVE)
}

/// Central differences of the residual against Jacobian matvecs (h = 1e-5,
/// bound 1e-5) and of J against `⟨G(v),w⟩` (h = 1e-4, bound 1e-6).
pub fn derivative_consistency(samples: usize, seed: u64) -> CheckResult {
    timed("derivative consistency", || {
        let (space, params) = coarse_glacier()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst_jac, mut worst_j) = (0.0f64, 0.0f64);
        for _ in 0..samples {
            let v = random_field(&space, &mut rng, 50.0);
            let w = random_field(&space, &mut rng, 50.0);
            let kw = fem::assemble_jacobian(&space, &params, &v)?.matvec(w.coeffs());
            let h = 1e-5;
            let fp = fem::assemble_residual(&space, &params, &v.axpy(h, w.coeffs()))?;
            let fm = fem::assemble_residual(&space, &params, &v.axpy(-h, w.coeffs()))?;
            let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            worst_jac = worst_jac.max(rel_err(&fd, &kw));

            let g = fem::functional_directional_derivative(&space, &params, &v, w.coeffs())?;
            let h = 1e-4;
            let jp = fem::functional_increment(&space, &params, &v, w.coeffs(), h)?;
            let jm = fem::functional_increment(&space, &params, &v, w.coeffs(), -h)?;
            worst_j = worst_j.max(((jp - jm) / (2.0 * h) - g).abs() / g.abs());
        }
        let ok = worst_jac <= 1e-5 && worst_j <= 1e-6;
        Ok((ok, format!("{samples} samples, worst Jacobian rel err {worst_jac:.2e} (≤ 1e-5), worst J′ rel err {worst_j:.2e} (≤ 1e-6)")))
    })
}

/// With μ0 = 1: `wᵀKw ≥ μ0∫|∇w|²` and, without body force,
/// `⟨F(v)−F(w), v−w⟩ ≥ μ0∫|∇(v−w)|²`, up to 1e-10 relative slack.
pub fn coercivity_and_monotonicity(samples: usize, seed: u64) -> CheckResult {
    timed("coercivity and monotonicity", || {
        let (space, params) = coarse_glacier()?;
        let params = PStokesParams { mu0: 1.0, ..params };
        let unloaded = PStokesParams { rho: 0.0, ..params.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut coer_viol, mut mono_viol) = (0, 0);
        let (mut coer_min, mut mono_min) = (f64::INFINITY, f64::INFINITY);
        for _ in 0..samples {
            let v = random_field(&space, &mut rng, 50.0);
            let scale = rng.gen_range(0.1..50.0);
            let w = random_field(&space, &mut rng, scale);

            let k = fem::assemble_jacobian(&space, &params, &v)?;
            let mut full = w.velocity(&space).to_vec();
            full.resize(space.n_dofs(), 0.0);
            let q = k.quadratic_form(&full, &full);
            let lower = params.mu0 * fem::grad_seminorm_sq(&space, w.velocity(&space));
            coer_min = coer_min.min(q / lower);
            if q < lower - 1e-10 * q.abs() {
                coer_viol += 1;
            }

            let fv = fem::velocity_residual(&space, &unloaded, &v)?;
            let fw = fem::velocity_residual(&space, &unloaded, &w)?;
            let d: Vec<f64> = v.velocity(&space).iter().zip(w.velocity(&space)).map(|(a, b)| a - b).collect();
            let lhs: f64 = fv.iter().zip(&fw).zip(&d).map(|((a, b), c)| (a - b) * c).sum();
            let lower = unloaded.mu0 * fem::grad_seminorm_sq(&space, &d);
            mono_min = mono_min.min(lhs / lower);
            if lhs < lower - 1e-10 * lhs.abs() {
                mono_viol += 1;
            }
        }
        Ok((
            coer_viol == 0 && mono_viol == 0,
            format!(
                "{samples} samples, violations {coer_viol} + {mono_viol}, min ratios {coer_min:.3e} / {mono_min:.3e} (≥ 1)"
            ),
        ))
    })
}

/// `(S(P)−S(Q)):(P−Q) > 0` for random pairs, and the quantitative bound with
/// `c = r − 1`.
pub fn kernel_monotonicity(samples: usize, seed: u64) -> CheckResult {
    timed("power-law monotonicity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut viol = 0;
        for i in 0..samples {
            let delta = if i % 2 == 0 { 1e-3 } else { 1.0 };
            let law = PowerLaw::new(experiments::GLEN_EXPONENT, delta, false)?;
            let m = |rng: &mut ChaCha8Rng| Mat2(std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-10.0..10.0))));
            let (p, q) = (m(&mut rng), m(&mut rng));
            let lhs = (kernels::s_apply(&law, &p)? - kernels::s_apply(&law, &q)?).dot(&(p - q));
            let r = law.r();
            let bound = (r - 1.0) * (delta + p.norm() + q.norm()).powf(r - 2.0) * (p - q).norm_sq();
            if !(lhs > 0.0) || lhs < bound * (1.0 - 1e-12) {
                viol += 1;
            }
        }
        Ok((viol == 0, format!("{samples} pairs, {viol} violations")))
    })
}

/// Follows a few Armijo-globalized Newton steps on the coarse glacier and
/// checks `wᵀKw = −⟨G,w⟩` (rel 1e-8) and `⟨G,w⟩ < 0` at each.
pub fn newton_identity(steps: usize) -> CheckResult {
    timed("Newton-step identity and descent", || {
        let (space, params) = coarse_glacier()?;
        let mut state = experiments::initial_guess(&space, &params, false, experiments::INITIAL_VISCOSITY)?;
        let mut worst = 0.0f64;
        let mut descent = true;
        let nv = space.n_vdofs();
        for _ in 0..steps {
            let k = fem::assemble_jacobian(&space, &params, &state)?;
            let mut rhs = fem::assemble_residual(&space, &params, &state)?;
            rhs.iter_mut().for_each(|x| *x = -*x);
            let (w, rep) = linalg::solve(&k, &rhs, 1e-12)?;
            if !rep.success {
                anyhow::bail!("Newton system: {rep}");
            }
            let mut wv = w[..nv].to_vec();
            wv.resize(space.n_dofs(), 0.0);
            let wkw = k.quadratic_form(&wv, &wv);
            let g = fem::velocity_residual(&space, &params, &state)?;
            let gw = linalg::dot(&g, &w[..nv]);
            worst = worst.max((wkw + gw).abs() / wkw.abs());
            descent &= gw < 0.0;
            let mut line = FemLine::new(&space, &params, &state, &w);
            let slope0 = line.slope(0.0)?;
            let step = solver::armijo_search(&mut line, slope0, 1e-4, 0.0, 20).map_err(|e| anyhow::anyhow!("{e}"))?;
            state = state.axpy(step.alpha, &w);
        }
        Ok((worst <= 1e-8 && descent, format!("{steps} steps, worst rel err {worst:.2e} (≤ 1e-8), descent {descent}")))
    })
}

/// Merit evaluations per iteration stay within the configured caps.
pub fn line_search_budgets() -> CheckResult {
    timed("line-search budgets", || {
        let mut worst = Vec::new();
        let mut ok = true;
        for method in [Method::NewtonArmijo, Method::NewtonExact, Method::PicardExact] {
            let mut cfg = ExperimentConfig::block(experiments::HIGH_FRICTION);
            cfg.domain = DomainSpec::block(8, 2);
            cfg.solver = SolverConfig { method, tol_rel_ries: 1e-8, ..SolverConfig::default() };
            let run = experiments::run(&cfg)?;
            let cap = if method == Method::NewtonArmijo { cfg.solver.max_armijo_evals } else { cfg.solver.max_bisect_evals };
            let max = run.outcome.history.iter().map(|r| r.n_merit_evals).max().unwrap_or(0);
            ok &= max <= cap;
            worst.push(format!("{method} {max}/{cap}"));
        }
        Ok((ok, worst.join(", ")))
    })
}

/// The p = 2 manufactured problem is solved in one outer iteration with α = 1.
pub fn linear_oracle() -> CheckResult {
    timed("linear oracle", || {
        let m = Manufactured::default();
        let mut ok = true;
        let mut parts = Vec::new();
        for method in [Method::Picard, Method::NewtonArmijo] {
            let run = manufactured::solve_manufactured(&m, 8, 2, &SolverConfig::with_method(method))?;
            let h = &run.outcome.history;
            let one = run.outcome.termination.is_converged() && h.len() == 2 && h[1].alpha == 1.0;
            ok &= one;
            parts.push(format!("{method}: {} iteration(s), H¹ err {:.3e}", h.len() - 1, run.h1_error));
        }
        Ok((ok, parts.join("; ")))
    })
}

pub fn run_all(seed: u64, samples: usize) -> Vec<CheckResult> {
    vec![
        kernel_monotonicity(10 * samples, seed),
        derivative_consistency(samples, seed),
        coercivity_and_monotonicity(samples, seed.wrapping_add(1)),
        newton_identity(5),
        line_search_budgets(),
        linear_oracle(),
    ]
}
