use pstokes_core::fem::{self, MixedSpace, MixedState, PStokesParams};
use pstokes_core::linalg;
use pstokes_core::mesh::{build_mesh, DomainSpec};
use pstokes_core::{PowerLaw, Vec2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ismip_space() -> MixedSpace {
    let spec = DomainSpec { copies: 1, ..DomainSpec::ismip_b(8, 4) };
    MixedSpace::new(build_mesh(&spec).unwrap()).unwrap()
}

fn glacier_params(mu0: f64) -> PStokesParams {
    let alpha = 0.5_f64.to_radians();
    PStokesParams {
        bulk: PowerLaw::new(4.0 / 3.0, 1e-12, true).unwrap(),
        slide: PowerLaw::new(4.0 / 3.0, 1e-12, false).unwrap(),
        b: 0.5 * (1e-16_f64).powf(-1.0 / 3.0),
        tau: 1e3,
        mu0,
        rho: 910.0,
        gravity: Vec2::new(9.81 * alpha.sin(), -9.81 * alpha.cos()),
        alpha,
        extra_load: None,
    }
}

/// Smooth random field of size ~`scale` m/a plus a little nodal noise.
fn random_field(space: &MixedSpace, rng: &mut ChaCha8Rng, scale: f64) -> MixedState {
    let modes: Vec<[f64; 6]> = (0..4).map(|_| core::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
    let mut s = space.interpolate_velocity(|x| {
        let (u, w) = (x[0] / 5000.0, x[1] / 1000.0);
        let mut v = [0.0; 2];
        for (k, m) in modes.iter().enumerate() {
            let f = (k + 1) as f64;
            let phase = (f * 3.1 * u + m[0]).sin() * (f * 1.7 * w + m[1]).cos();
            v[0] += scale * m[2] * phase + scale * m[4] * w;
            v[1] += 0.1 * scale * m[3] * phase + 0.1 * scale * m[5] * u;
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

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, ..ProptestConfig::default() })]

    #[test]
    fn jacobian_matches_central_differences(seed in any::<u64>()) {
        let space = ismip_space();
        let params = glacier_params(1e-17);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_field(&space, &mut rng, 50.0);
        let w = random_field(&space, &mut rng, 50.0);
        let k = fem::assemble_jacobian(&space, &params, &v).unwrap();
        let kw = k.matvec(w.coeffs());
        let h = 1e-5;
        let fp = fem::assemble_residual(&space, &params, &v.axpy(h, w.coeffs())).unwrap();
        let fm = fem::assemble_residual(&space, &params, &v.axpy(-h, w.coeffs())).unwrap();
        let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let e = rel_err(&fd, &kw);
        prop_assert!(e <= 1e-5, "relative error {e:e}");
    }

    #[test]
    fn merit_slope_matches_central_differences(seed in any::<u64>()) {
        let space = ismip_space();
        let params = glacier_params(1e-17);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_field(&space, &mut rng, 50.0);
        let w = random_field(&space, &mut rng, 50.0);
        let g = fem::functional_directional_derivative(&space, &params, &v, w.coeffs()).unwrap();
        let h = 1e-4;
        let jp = fem::functional_increment(&space, &params, &v, w.coeffs(), h).unwrap();
        let jm = fem::functional_increment(&space, &params, &v, w.coeffs(), -h).unwrap();
        let fd = (jp - jm) / (2.0 * h);
        prop_assert!((fd - g).abs() <= 1e-6 * g.abs(), "fd {fd:e} vs {g:e}");
    }

    #[test]
    fn jacobian_is_coercive_with_constant_mu0(seed in any::<u64>()) {
        let space = ismip_space();
        let params = glacier_params(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_field(&space, &mut rng, 50.0);
        let k = fem::assemble_jacobian(&space, &params, &v).unwrap();
        for _ in 0..5 {
            let w = random_field(&space, &mut rng, 1.0);
            let wv = w.velocity(&space);
            let mut full = wv.to_vec();
            full.resize(space.n_dofs(), 0.0);
            let q = k.quadratic_form(&full, &full);
            let lower = params.mu0 * fem::grad_seminorm_sq(&space, wv);
            prop_assert!(q >= lower - 1e-10 * q.abs(), "{q:e} < {lower:e}");
        }
    }

    #[test]
    fn residual_is_strictly_monotone(seed in any::<u64>()) {
        let space = ismip_space();
        let params = PStokesParams { rho: 0.0, ..glacier_params(1.0) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_field(&space, &mut rng, 50.0);
        let w = random_field(&space, &mut rng, 50.0);
        let fv = fem::velocity_residual(&space, &params, &v).unwrap();
        let fw = fem::velocity_residual(&space, &params, &w).unwrap();
        let d: Vec<f64> = v.velocity(&space).iter().zip(w.velocity(&space)).map(|(a, b)| a - b).collect();
        let lhs: f64 = fv.iter().zip(&fw).zip(&d).map(|((a, b), c)| (a - b) * c).sum();
        let lower = params.mu0 * fem::grad_seminorm_sq(&space, &d);
        prop_assert!(lhs >= lower - 1e-10 * lhs.abs(), "{lhs:e} < {lower:e}");
    }
}

#[test]
fn linear_problem_scales_with_gravity() {
    let space = MixedSpace::new(build_mesh(&DomainSpec::block(6, 3)).unwrap()).unwrap();
    let mut params = glacier_params(1e-17);
    params.bulk = PowerLaw::new(2.0, 1e-12, true).unwrap();
    params.slide = PowerLaw::new(2.0, 1e-12, false).unwrap();
    let solve = |p: &PStokesParams| {
        let (m, rhs) = fem::assemble_picard_matrix(&space, p, &MixedState::zeros(&space)).unwrap();
        linalg::solve(&m, &rhs, 1e-12).unwrap().0
    };
    let x1 = solve(&params);
    let scaled = PStokesParams { gravity: params.gravity * 3.0, ..params.clone() };
    let x3 = solve(&scaled);
    let x1x3: Vec<f64> = x1.iter().map(|x| 3.0 * x).collect();
    assert!(rel_err(&x3, &x1x3) < 1e-10);
}
