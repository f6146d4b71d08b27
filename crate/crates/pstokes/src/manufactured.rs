//! Manufactured linear (p = s = 2) Stokes solution on the sliding block.
//!
//! The velocity comes from the stream function `U L a(ξ) b(η)` with
//! `a = ξ²(1−ξ)²` and `b = η + η²`, so it is divergence free, vanishes on the
//! side walls and is tangential on the bed. Pressure is `P0 (ξ−½)(η−½)`.

use std::sync::Arc;

use anyhow::{bail, Result};
use pstokes_core::fem::{self, ExtraLoad, MixedSpace, MixedState, PStokesParams};
use pstokes_core::mesh::{build_mesh, BoundaryTag, DomainSpec, BLOCK_HEIGHT};
use pstokes_core::solver::{self, Method, SolveOutcome, SolverConfig};
use pstokes_core::kernels::Tensor;
use pstokes_core::{Mat2, PowerLaw, Vec2};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Manufactured {
    pub length: f64,
    pub height: f64,
    /// Velocity scale, m/a.
    pub u: f64,
    /// Pressure scale, Pa.
    pub p0: f64,
    pub b: f64,
    pub mu0: f64,
    pub tau: f64,
}

impl Default for Manufactured {
    fn default() -> Self {
        Manufactured { length: 5000.0, height: BLOCK_HEIGHT, u: 100.0, p0: 1e5, b: 1e5, mu0: 1e3, tau: 1e3 }
    }
}

/// `a(ξ)` and its first three derivatives.
fn a_poly(xi: f64) -> [f64; 4] {
    let a = xi * xi * (1.0 - xi) * (1.0 - xi);
    let a1 = 2.0 * xi * (1.0 - xi) * (1.0 - 2.0 * xi);
    let a2 = 2.0 * (1.0 - 6.0 * xi + 6.0 * xi * xi);
    let a3 = 24.0 * xi - 12.0;
    [a, a1, a2, a3]
}

fn b_poly(eta: f64) -> [f64; 3] {
    [eta + eta * eta, 1.0 + 2.0 * eta, 2.0]
}

impl Manufactured {
    fn scaled(&self, x: [f64; 2]) -> ([f64; 4], [f64; 3]) {
        (a_poly(x[0] / self.length), b_poly(x[1] / self.height))
    }

    pub fn velocity(&self, x: [f64; 2]) -> Vec2 {
        let ([a, a1, ..], [b, b1, _]) = self.scaled(x);
        let r = self.height / self.length;
        Vec2::new(self.u * a * b1, -self.u * r * a1 * b)
    }

    /// `∂_j v_i` stored as `[i][j]`.
    pub fn gradient(&self, x: [f64; 2]) -> Mat2 {
        let ([a, a1, a2, _], [b, b1, b2]) = self.scaled(x);
        let (l, h, u) = (self.length, self.height, self.u);
        Mat2([[u * a1 * b1 / l, u * a * b2 / h], [-u * h * a2 * b / (l * l), -u * a1 * b1 / l]])
    }

    pub fn pressure(&self, x: [f64; 2]) -> f64 {
        self.p0 * (x[0] / self.length - 0.5) * (x[1] / self.height - 0.5)
    }

    fn laplacian(&self, x: [f64; 2]) -> Vec2 {
        // b''' = 0, so v_x has no ∂yy term
        let ([_, a1, a2, a3], [b, b1, b2]) = self.scaled(x);
        let (l, h, u) = (self.length, self.height, self.u);
        let lx = u * a2 * b1 / (l * l);
        let ly = -u * (h / l) * (a3 * b / (l * l) + a1 * b2 / (h * h));
        Vec2::new(lx, ly)
    }

    fn stress(&self, x: [f64; 2]) -> Mat2 {
        let g = self.gradient(x);
        let d = g.sym();
        let p = self.pressure(x);
        let mut s = d * self.b + g * self.mu0;
        s.0[0][0] -= p;
        s.0[1][1] -= p;
        s
    }

    /// `−div σ`, using `div v = 0`.
    pub fn body_force(&self, x: [f64; 2]) -> Vec2 {
        let grad_p = Vec2::new(
            self.p0 * (x[1] / self.height - 0.5) / self.length,
            self.p0 * (x[0] / self.length - 0.5) / self.height,
        );
        self.laplacian(x) * -(0.5 * self.b + self.mu0) + grad_p
    }

    /// `σ n` on the surface, `σ n + τ v` on the bed.
    pub fn traction(&self, x: [f64; 2], tag: BoundaryTag) -> Vec2 {
        let s = self.stress(x);
        let sn = |ny: f64| Vec2::new(s.0[0][1] * ny, s.0[1][1] * ny);
        match tag {
            BoundaryTag::Air => sn(1.0),
            BoundaryTag::Bed => sn(-1.0) + self.velocity(x) * self.tau,
            _ => Vec2::new(0.0, 0.0),
        }
    }

    /// Linear-law parameters with gravity switched off and the manufactured
    /// forcing attached.
    pub fn params(&self) -> PStokesParams {
        let this = *self;
        let load = ExtraLoad {
            body: Arc::new(move |x| this.body_force(x)),
            traction: Arc::new(move |x, tag| this.traction(x, tag)),
        };
        PStokesParams {
            bulk: PowerLaw::new(2.0, 1e-12, true).expect("valid law"),
            slide: PowerLaw::new(2.0, 1e-12, false).expect("valid law"),
            b: self.b,
            tau: self.tau,
            mu0: self.mu0,
            rho: 0.0,
            gravity: Vec2::new(0.0, 0.0),
            alpha: 0.0,
            extra_load: Some(load),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManufacturedRun {
    pub nx: usize,
    pub ny: usize,
    /// `(∫|∇(v_h − v)|²)^{1/2}`
    pub h1_error: f64,
    pub outcome: SolveOutcome,
}

/// Solves the manufactured problem from a zero start on an `nx × ny` block.
pub fn solve_manufactured(m: &Manufactured, nx: usize, ny: usize, config: &SolverConfig) -> Result<ManufacturedRun> {
    let domain = DomainSpec { length: m.length, ..DomainSpec::block(nx, ny) };
    let space = MixedSpace::new(build_mesh(&domain)?)?;
    let params = m.params();
    let outcome = solver::solve(&space, &params, &MixedState::zeros(&space), config)?;
    let h1_error = h1_error(&space, &outcome.state, m);
    Ok(ManufacturedRun { nx, ny, h1_error, outcome })
}

pub fn h1_error(space: &MixedSpace, state: &MixedState, m: &Manufactured) -> f64 {
    fem::integrate(space, state, |x, _, grad, _| {
        let e = grad - m.gradient(x);
        e.norm_sq()
    })
    .sqrt()
}

/// Observed orders `log2(e_k / e_{k+1})` for a sequence of halved meshes.
pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

pub struct OracleReport {
    pub runs: Vec<(Method, Vec<ManufacturedRun>)>,
}

/// Runs each method on meshes `(nx0·2^k, ny0·2^k)`, `k < levels`.
pub fn refinement_study(
    m: &Manufactured,
    methods: &[Method],
    nx0: usize,
    ny0: usize,
    levels: usize,
    base: &SolverConfig,
) -> Result<OracleReport> {
    if levels < 2 {
        bail!("need at least two refinement levels");
    }
    let mut runs = Vec::new();
    for &method in methods {
        let cfg = SolverConfig { method, ..base.clone() };
        let mut per = Vec::new();
        for k in 0..levels {
            per.push(solve_manufactured(m, nx0 << k, ny0 << k, &cfg)?);
        }
        runs.push((method, per));
    }
    Ok(OracleReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn velocity_is_divergence_free_and_respects_walls() {
        let m = Manufactured::default();
        for &(x, y) in &[(0.0, 300.0), (5000.0, 700.0), (1234.0, 0.0), (4000.0, 999.0)] {
            let g = m.gradient([x, y]);
            assert!((g.0[0][0] + g.0[1][1]).abs() < 1e-12);
        }
        assert_eq!(m.velocity([0.0, 500.0]), Vec2::new(0.0, 0.0));
        assert_eq!(m.velocity([5000.0, 500.0]), Vec2::new(0.0, 0.0));
        assert_eq!(m.velocity([1700.0, 0.0]).y(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = Manufactured::default();
        let x = [1800.0, 420.0];
        let h = 1e-3;
        let g = m.gradient(x);
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let d = (m.velocity(xp) - m.velocity(xm)) * (0.5 / h);
            for i in 0..2 {
                assert!((d.0[i] - g.0[i][j]).abs() < 1e-7 * (1.0 + g.0[i][j].abs()), "{i}{j}");
            }
        }
    }

    #[test]
    fn body_force_matches_finite_difference_divergence() {
        let m = Manufactured::default();
        let x = [3100.0, 610.0];
        let h = 1e-2;
        let mut div = [0.0; 2];
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let (sp, sm) = (m.stress(xp), m.stress(xm));
            for i in 0..2 {
                div[i] += (sp.0[i][j] - sm.0[i][j]) / (2.0 * h);
            }
        }
        let f = m.body_force(x);
        for i in 0..2 {
            assert!((f.0[i] + div[i]).abs() < 1e-6 * (1.0 + f.0[i].abs()), "{} vs {}", f.0[i], -div[i]);
        }
    }

    #[test]
    fn pressure_has_zero_mean() {
        let m = Manufactured::default();
        let n = 200;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [(i as f64 + 0.5) * m.length / n as f64, (j as f64 + 0.5) * m.height / n as f64];
                s += m.pressure(x);
            }
        }
        assert!(s.abs() / ((n * n) as f64) < 1e-9 * m.p0);
    }
}
