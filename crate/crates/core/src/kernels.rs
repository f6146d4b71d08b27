//! Pointwise constitutive functions.
//!
//! The power law `S(P) = (c|P|² + δ²)^{(r-2)/2} P` acts on strain-rate
//! matrices in the bulk and on velocity vectors at the sliding bed. `c` is
//! either 1 or 0.5, see [`PowerLaw::half_factor`].

use core::ops::{Add, Mul, Sub};

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("invalid power law (r = {r}, delta = {delta}): need 1 < r <= 2 and delta >= 0")]
    InvalidLaw { r: f64, delta: f64 },
    #[error("non-finite input")]
    NonFinite,
    #[error("power-law derivative has no finite value at zero when delta = 0 and r < 2")]
    SingularDerivative,
}

/// Small fixed-size tensor with a Frobenius inner product.
pub trait Tensor: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> {
    fn zero() -> Self;
    fn dot(&self, other: &Self) -> f64;
    fn is_finite(&self) -> bool;

    fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    fn norm(&self) -> f64 {
        math::sqrt(self.norm_sq())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2(pub [f64; 2]);

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Vec2([x, y])
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.0[0]
    }

    #[inline]
    pub fn y(&self) -> f64 {
        self.0[1]
    }
}

impl Mat2 {
    pub const fn new(a: [[f64; 2]; 2]) -> Self {
        Mat2(a)
    }

    pub const fn identity() -> Self {
        Mat2([[1.0, 0.0], [0.0, 1.0]])
    }

    pub fn transpose(&self) -> Self {
        let a = self.0;
        Mat2([[a[0][0], a[1][0]], [a[0][1], a[1][1]]])
    }

    /// Symmetric part `½(A + Aᵀ)`.
    pub fn sym(&self) -> Self {
        (*self + self.transpose()) * 0.5
    }
}

impl Add for Vec2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Vec2([self.0[0] + o.0[0], self.0[1] + o.0[1]])
    }
}

impl Sub for Vec2 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Vec2([self.0[0] - o.0[0], self.0[1] - o.0[1]])
    }
}

impl Mul<f64> for Vec2 {
    type Output = Self;
    fn mul(self, a: f64) -> Self {
        Vec2([self.0[0] * a, self.0[1] * a])
    }
}

impl Add for Mat2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let (a, b) = (self.0, o.0);
        Mat2([[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]])
    }
}

impl Sub for Mat2 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + o * -1.0
    }
}

impl Mul<f64> for Mat2 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        let a = self.0;
        Mat2([[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]])
    }
}

impl Tensor for Vec2 {
    fn zero() -> Self {
        Vec2([0.0; 2])
    }

    #[inline]
    fn dot(&self, o: &Self) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1]
    }

    fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Tensor for Mat2 {
    fn zero() -> Self {
        Mat2([[0.0; 2]; 2])
    }

    #[inline]
    fn dot(&self, o: &Self) -> f64 {
        let (a, b) = (self.0, o.0);
        a[0][0] * b[0][0] + a[0][1] * b[0][1] + a[1][0] * b[1][0] + a[1][1] * b[1][1]
    }

    fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Regularized power law with exponent `r` and regularization `delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLaw {
    r: f64,
    delta: f64,
    /// Scale `|P|²` by 0.5 inside the power.
    half_factor: bool,
}

impl PowerLaw {
    pub fn new(r: f64, delta: f64, half_factor: bool) -> Result<Self, KernelError> {
        if !(r > 1.0 && r <= 2.0) || !(delta >= 0.0) || !delta.is_finite() {
            return Err(KernelError::InvalidLaw { r, delta });
        }
        Ok(PowerLaw { r, delta, half_factor })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn half_factor(&self) -> bool {
        self.half_factor
    }

    pub fn with_delta(self, delta: f64) -> Result<Self, KernelError> {
        PowerLaw::new(self.r, delta, self.half_factor)
    }

    /// The factor `c` in front of `|P|²`.
    #[inline]
    pub fn norm_scale(&self) -> f64 {
        if self.half_factor {
            0.5
        } else {
            1.0
        }
    }

    #[inline]
    fn base(&self, norm_sq: f64) -> f64 {
        self.norm_scale() * norm_sq + self.delta * self.delta
    }

    /// Scalar factor `(c|P|²+δ²)^{(r-2)/2}` multiplying `P` in [`s_apply`].
    ///
    /// Returns 0 in the degenerate case `δ = 0, P = 0, r < 2`.
    #[inline]
    pub fn secant_coefficient(&self, norm_sq: f64) -> f64 {
        let base = self.base(norm_sq);
        if base == 0.0 {
            return if self.r == 2.0 { 1.0 } else { 0.0 };
        }
        math::powf(base, 0.5 * (self.r - 2.0))
    }
}

/// `S(P) = (c|P|²+δ²)^{(r-2)/2} P`.
pub fn s_apply<T: Tensor>(law: &PowerLaw, p: &T) -> Result<T, KernelError> {
    if !p.is_finite() {
        return Err(KernelError::NonFinite);
    }
    Ok(*p * law.secant_coefficient(p.norm_sq()))
}

/// Linearization of [`s_apply`] at a point: `Q ↦ a1 (P:Q) P + a0 Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SDerivative<T> {
    pub a0: f64,
    pub a1: f64,
    pub at: T,
}

impl<T: Tensor> SDerivative<T> {
    pub fn apply(&self, q: &T) -> T {
        self.at * (self.a1 * self.at.dot(q)) + *q * self.a0
    }

    /// `⟨dS(P) Q₁, Q₂⟩`.
    pub fn bilinear(&self, q1: &T, q2: &T) -> f64 {
        self.a1 * self.at.dot(q1) * self.at.dot(q2) + self.a0 * q1.dot(q2)
    }
}

/// Derivative of [`s_apply`] with respect to its argument.
pub fn s_derivative<T: Tensor>(law: &PowerLaw, p: &T) -> Result<SDerivative<T>, KernelError> {
    if !p.is_finite() {
        return Err(KernelError::NonFinite);
    }
    let base = law.base(p.norm_sq());
    if base == 0.0 {
        if law.r < 2.0 {
            return Err(KernelError::SingularDerivative);
        }
        return Ok(SDerivative { a0: 1.0, a1: 0.0, at: *p });
    }
    let a0 = math::powf(base, 0.5 * (law.r - 2.0));
    let a1 = (law.r - 2.0) * law.norm_scale() * a0 / base;
    Ok(SDerivative { a0, a1, at: *p })
}

/// Merit density `scale/(c r) (c|P|²+δ²)^{r/2}`.
///
/// The `1/c` keeps `∂/∂P j_density = scale · S(P)` when the half factor is
/// active; for `c = 1` this is the plain `scale/r (|P|²+δ²)^{r/2}`.
pub fn j_density<T: Tensor>(law: &PowerLaw, scale: f64, p: &T) -> Result<f64, KernelError> {
    if !p.is_finite() || !scale.is_finite() {
        return Err(KernelError::NonFinite);
    }
    let base = law.base(p.norm_sq());
    if base == 0.0 {
        return Ok(0.0);
    }
    Ok(scale / (law.norm_scale() * law.r) * math::powf(base, 0.5 * law.r))
}

/// `j_density(P + t Q) - j_density(P)` without the cancellation of the
/// direct difference.
pub fn j_density_increment<T: Tensor>(
    law: &PowerLaw,
    scale: f64,
    p: &T,
    q: &T,
    t: f64,
) -> Result<f64, KernelError> {
    if !p.is_finite() || !q.is_finite() || !t.is_finite() {
        return Err(KernelError::NonFinite);
    }
    let c = law.norm_scale();
    let base0 = law.base(p.norm_sq());
    if base0 == 0.0 {
        return j_density(law, scale, &(*p + *q * t));
    }
    let growth = c * t * (2.0 * p.dot(q) + t * q.norm_sq());
    let rel = (growth / base0).max(-1.0);
    let factor = math::exp_m1(0.5 * law.r * math::ln_1p(rel));
    Ok(scale / (c * law.r) * math::powf(base0, 0.5 * law.r) * factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn law(r: f64, delta: f64) -> PowerLaw {
        PowerLaw::new(r, delta, false).unwrap()
    }

    fn mat(e: [f64; 4]) -> Mat2 {
        Mat2([[e[0], e[1]], [e[2], e[3]]])
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn rejects_bad_laws() {
        assert!(PowerLaw::new(1.0, 1.0, false).is_err());
        assert!(PowerLaw::new(2.5, 1.0, false).is_err());
        assert!(PowerLaw::new(1.5, -1.0, false).is_err());
        assert!(PowerLaw::new(1.5, f64::NAN, false).is_err());
        assert!(PowerLaw::new(2.0, 0.0, true).is_ok());
    }

    #[test]
    fn exponent_two_is_identity() {
        let p = mat([1.5, -2.0, 0.25, 7.0]);
        assert_eq!(s_apply(&law(2.0, 0.5), &p).unwrap(), p);
    }

    #[test]
    fn zero_input_gives_zero() {
        let s = s_apply(&law(4.0 / 3.0, 1.0), &Mat2::zero()).unwrap();
        assert_eq!(s, Mat2::zero());
    }

    #[test]
    fn identity_input_matches_scalar_formula() {
        // |I|² = 2, so the factor is (2 + 1)^{-1/3}.
        let s = s_apply(&law(4.0 / 3.0, 1.0), &Mat2::identity()).unwrap();
        let expected = 0.693_361_274_350_634_7;
        assert!((s.0[0][0] - expected).abs() < 1e-15);
        assert!((s.0[1][1] - expected).abs() < 1e-15);
        assert_eq!(s.0[0][1], 0.0);
    }

    #[test]
    fn half_factor_scales_norm_only() {
        let half = PowerLaw::new(4.0 / 3.0, 1.0, true).unwrap();
        let s = s_apply(&half, &Mat2::identity()).unwrap();
        // 0.5·2 + 1 = 2
        assert!((s.0[0][0] - libm::pow(2.0, -1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_zero_delta() {
        let l = law(4.0 / 3.0, 0.0);
        assert_eq!(s_apply(&l, &Mat2::zero()).unwrap(), Mat2::zero());
        assert_eq!(j_density(&l, 1.0, &Mat2::zero()).unwrap(), 0.0);
        assert_eq!(s_derivative(&l, &Mat2::zero()), Err(KernelError::SingularDerivative));
        assert!(s_derivative(&law(2.0, 0.0), &Mat2::zero()).is_ok());
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let l = law(1.5, 1.0);
        let bad = mat([f64::NAN, 0.0, 0.0, 0.0]);
        assert_eq!(s_apply(&l, &bad), Err(KernelError::NonFinite));
        assert_eq!(s_derivative(&l, &bad), Err(KernelError::NonFinite));
        assert_eq!(j_density(&l, 1.0, &Vec2::new(f64::INFINITY, 0.0)), Err(KernelError::NonFinite));
    }

    #[test]
    fn derivative_at_zero_is_scaled_identity() {
        let d = s_derivative(&law(4.0 / 3.0, 1.0), &Mat2::zero()).unwrap();
        let q = mat([0.3, -1.0, 2.0, 4.0]);
        assert_eq!(d.apply(&q), q);
    }

    #[test]
    fn density_trivial_values() {
        assert!((j_density(&law(4.0 / 3.0, 1.0), 1.0, &Mat2::zero()).unwrap() - 0.75).abs() < 1e-15);
        // |P|² = 5, r = 2, δ = 0, scale 2 → (2/2)·5
        let p = mat([1.0, 2.0, 0.0, 0.0]);
        assert!((j_density(&law(2.0, 0.0), 2.0, &p).unwrap() - 5.0).abs() < 1e-14);
    }

    #[test]
    fn density_increment_matches_direct_difference() {
        for &half in &[false, true] {
            let l = PowerLaw::new(4.0 / 3.0, 1e-3, half).unwrap();
            let p = mat([0.4, -0.1, -0.1, 2.0]);
            let q = mat([-1.0, 0.5, 0.5, 0.2]);
            for &t in &[1e-3, 0.1, 1.0, 3.0] {
                let direct = j_density(&l, 3.0, &(p + q * t)).unwrap() - j_density(&l, 3.0, &p).unwrap();
                let inc = j_density_increment(&l, 3.0, &p, &q, t).unwrap();
                assert!(close(direct, inc, 1e-12), "{direct} vs {inc}");
            }
        }
    }

    fn richardson_directional<F: Fn(f64) -> f64>(f: F, h: f64) -> f64 {
        let d1 = (f(h) - f(-h)) / (2.0 * h);
        let d2 = (f(h / 2.0) - f(-h / 2.0)) / h;
        (4.0 * d2 - d1) / 3.0
    }

    fn entries() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-10.0f64..10.0)
    }

    fn laws() -> impl Strategy<Value = PowerLaw> {
        (1.1f64..=2.0, prop::sample::select(vec![1e-3, 1.0]), any::<bool>())
            .prop_map(|(r, d, h)| PowerLaw::new(r, d, h).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn monotone_with_quantitative_bound(l in laws(), a in entries(), b in entries()) {
            let (p, q) = (mat(a), mat(b));
            prop_assume!((p - q).norm() > 1e-9);
            let lhs = (s_apply(&l, &p).unwrap() - s_apply(&l, &q).unwrap()).dot(&(p - q));
            prop_assert!(lhs > 0.0);
            let bound = (l.r() - 1.0)
                * libm::pow(l.delta() + p.norm() + q.norm(), l.r() - 2.0)
                * (p - q).norm_sq();
            prop_assert!(lhs >= bound * (1.0 - 1e-12), "{lhs} < {bound}");
        }

        #[test]
        fn lipschitz_bound(l in laws(), a in entries(), b in entries()) {
            let (p, q) = (mat(a), mat(b));
            let lhs = (s_apply(&l, &p).unwrap() - s_apply(&l, &q).unwrap()).norm();
            let rhs = 5.0 * libm::pow(l.delta() + p.norm() + q.norm(), l.r() - 2.0) * (p - q).norm();
            prop_assert!(lhs <= rhs * (1.0 + 1e-12));
        }

        #[test]
        fn magnitude_bounds(r in 1.1f64..=2.0, d in prop::sample::select(vec![1e-3, 1.0]), a in entries()) {
            let p = mat(a);
            let s = s_apply(&law(r, d), &p).unwrap();
            prop_assert!(s.norm() <= libm::pow(d, r - 2.0) * p.norm() * (1.0 + 1e-12));
            let s0 = s_apply(&law(r, 0.0), &p).unwrap();
            prop_assert!(s0.norm() <= libm::pow(p.norm(), r - 1.0) * (1.0 + 1e-12));
        }

        #[test]
        fn derivative_is_coercive_and_symmetric(l in laws(), a in entries(), b in entries(), c in entries()) {
            let (p, q1, q2) = (mat(a), mat(b), mat(c));
            let d = s_derivative(&l, &p).unwrap();
            let base = l.norm_scale() * p.norm_sq() + l.delta() * l.delta();
            let lower = (l.r() - 1.0) * libm::pow(base, 0.5 * (l.r() - 2.0)) * q1.norm_sq();
            prop_assert!(d.bilinear(&q1, &q1) >= lower * (1.0 - 1e-12));
            let s12 = d.apply(&q1).dot(&q2);
            let s21 = d.apply(&q2).dot(&q1);
            prop_assert!(close(s12, s21, 1e-12));
        }

        #[test]
        fn derivative_matches_finite_differences(l in laws(), a in entries(), b in entries()) {
            let (p, q) = (mat(a), mat(b));
            let exact = s_derivative(&l, &p).unwrap().apply(&q);
            let scale = 1.0 + p.norm();
            // Error must shrink like ε² for central differences; accept the best of the sweep.
            let best = [1e-4, 1e-5, 1e-6].iter().map(|&eps| {
                let h = eps * scale;
                let fd = (s_apply(&l, &(p + q * h)).unwrap() - s_apply(&l, &(p - q * h)).unwrap()) * (0.5 / h);
                (fd - exact).norm() / (1e-12 + exact.norm())
            }).fold(f64::INFINITY, f64::min);
            prop_assert!(best < 1e-5, "relative error {best}");
        }

        #[test]
        fn density_gradient_is_scaled_power_law(l in laws(), a in entries(), b in entries(), scale in 0.5f64..5.0) {
            let (p, q) = (mat(a), mat(b));
            let h = 1e-3 * (1.0 + p.norm());
            let fd = richardson_directional(|t| j_density(&l, scale, &(p + q * t)).unwrap(), h);
            let exact = scale * s_apply(&l, &p).unwrap().dot(&q);
            prop_assert!((fd - exact).abs() <= 1e-6 * (exact.abs() + scale * s_apply(&l, &p).unwrap().norm() * q.norm() + 1e-12));
        }

        #[test]
        fn vector_law_matches_definition(l in laws(), x in -10.0f64..10.0, y in -10.0f64..10.0) {
            let v = Vec2::new(x, y);
            let s = s_apply(&l, &v).unwrap();
            let f = libm::pow(l.norm_scale() * (x * x + y * y) + l.delta() * l.delta(), 0.5 * (l.r() - 2.0));
            prop_assert!(close(s.x(), f * x, 1e-14) && close(s.y(), f * y, 1e-14));
        }
    }
}
