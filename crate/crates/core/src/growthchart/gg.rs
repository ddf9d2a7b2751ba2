//! Generalized gamma kernel.
//!
//! With `z = (y/mu)^nu` and `theta = 1/(sigma^2 nu^2)`, `z` follows a gamma
//! distribution with shape and rate both equal to `theta`, for either sign
//! of `nu`. `nu = 1` is the gamma family with mean `mu`; `nu -> 0`
//! approaches the lognormal.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use super::GrowthError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GGParams {
    pub mu: f64,
    pub sigma: f64,
    pub nu: f64,
}

impl GGParams {
    pub fn new(mu: f64, sigma: f64, nu: f64) -> Result<Self, GrowthError> {
        let p = Self { mu, sigma, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GrowthError> {
        let ok = self.mu.is_finite()
            && self.mu > 0.0
            && self.sigma.is_finite()
            && self.sigma > 0.0
            && self.nu.is_finite()
            && self.nu != 0.0;
        if ok {
            Ok(())
        } else {
            Err(GrowthError::InvalidParams(format!("{self:?}")))
        }
    }

    pub fn theta(&self) -> f64 {
        1.0 / (self.sigma * self.sigma * self.nu * self.nu)
    }

    /// Draws one value.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let theta = self.theta();
        let z: f64 = Gamma::new(theta, 1.0 / theta).expect("validated shape").sample(rng);
        self.mu * (z.ln() / self.nu).exp()
    }
}

/// Log density; `-inf` outside the support.
pub fn gg_logpdf(y: f64, p: &GGParams) -> Result<f64, GrowthError> {
    p.validate()?;
    if !(y > 0.0) || !y.is_finite() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(logpdf_unchecked(y.ln(), p.mu.ln(), p.theta(), p.nu))
}

/// Log density from `ln y`, `ln mu`, `theta` and `nu`, without validation.
pub(crate) fn logpdf_unchecked(ln_y: f64, ln_mu: f64, theta: f64, nu: f64) -> f64 {
    let ln_z = nu * (ln_y - ln_mu);
    let z = ln_z.exp();
    nu.abs().ln() + theta * theta.ln() + theta * ln_z - theta * z - ln_gamma(theta) - ln_y
}

pub fn gg_pdf(y: f64, p: &GGParams) -> Result<f64, GrowthError> {
    Ok(gg_logpdf(y, p)?.exp())
}

pub fn gg_cdf(y: f64, p: &GGParams) -> Result<f64, GrowthError> {
    p.validate()?;
    if !(y > 0.0) {
        return Ok(0.0);
    }
    if y == f64::INFINITY {
        return Ok(1.0);
    }
    let theta = p.theta();
    let x = theta * (p.nu * (y.ln() - p.mu.ln())).exp();
    // statrs rejects x = 0 and x = inf, which arise from under/overflow
    let cdf = match (x <= 0.0, x.is_finite(), p.nu > 0.0) {
        (true, _, pos) => {
            if pos {
                0.0
            } else {
                1.0
            }
        }
        (false, false, pos) => {
            if pos {
                1.0
            } else {
                0.0
            }
        }
        (false, true, true) => gamma_lr(theta, x),
        (false, true, false) => gamma_ur(theta, x),
    };
    Ok(cdf.clamp(0.0, 1.0))
}

/// Inverse CDF by bracketing then safeguarded Newton/bisection on `ln y`.
pub fn gg_quantile(q: f64, p: &GGParams) -> Result<f64, GrowthError> {
    p.validate()?;
    if !(q > 0.0 && q < 1.0) {
        return Err(GrowthError::DomainError(format!("quantile level {q} outside (0, 1)")));
    }
    let cdf = |t: f64| gg_cdf(t.exp(), p).expect("validated");
    let step = p.sigma.clamp(1e-3, 1.0);
    let mut lo = p.mu.ln() - step;
    let mut hi = p.mu.ln() + step;
    let mut f_lo = cdf(lo);
    let mut f_hi = cdf(hi);
    let mut width = step;
    for _ in 0..200 {
        if f_lo <= q {
            break;
        }
        width *= 2.0;
        hi = lo;
        f_hi = f_lo;
        lo -= width;
        f_lo = cdf(lo);
    }
    for _ in 0..200 {
        if f_hi >= q {
            break;
        }
        width *= 2.0;
        lo = hi;
        f_lo = f_hi;
        hi += width;
        f_hi = cdf(hi);
    }
    if !(f_lo <= q && f_hi >= q) {
        return Err(GrowthError::DomainError(format!("could not bracket quantile {q}")));
    }
    let mut t = 0.5 * (lo + hi);
    let (mut best_t, mut best_err) = (t, f64::INFINITY);
    for _ in 0..200 {
        let f = cdf(t);
        if (f - q).abs() < best_err {
            (best_t, best_err) = (t, (f - q).abs());
        }
        if f == q {
            break;
        }
        if f < q {
            lo = t;
        } else {
            hi = t;
        }
        // dF/d(ln y) = pdf(y)·y
        let dens = logpdf_unchecked(t, p.mu.ln(), p.theta(), p.nu).exp() * t.exp();
        let newton = t - (f - q) / dens;
        if dens > 0.0 && (newton - t).abs() <= 1e-15 * t.abs().max(1.0) {
            break;
        }
        t = if dens > 0.0 && newton.is_finite() && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-14 * t.abs().max(1.0) {
            break;
        }
    }
    Ok(best_t.exp())
}

#[cfg(test)]
#[path = "../../tests/common/quadrature.rs"]
mod quadrature;

#[cfg(test)]
mod tests {
    use super::quadrature::integrate_pdf;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn invalid_params_rejected() {
        assert!(GGParams::new(0.0, 1.0, 1.0).is_err());
        assert!(GGParams::new(1.0, -1.0, 1.0).is_err());
        assert!(GGParams::new(1.0, 1.0, 0.0).is_err());
        assert!(GGParams::new(1.0, f64::NAN, 1.0).is_err());
        let p = GGParams { mu: 1.0, sigma: 0.3, nu: 0.0 };
        assert!(gg_pdf(1.0, &p).is_err());
    }

    #[test]
    fn integrates_to_one() {
        for nu in [2.0, -1.0] {
            let p = GGParams::new(1.0, 0.3, nu).unwrap();
            let total = integrate_pdf(|y| gg_pdf(y, &p).unwrap(), 0.0, f64::INFINITY);
            assert!((total - 1.0).abs() < 1e-8, "nu={nu}: {total}");
        }
    }

    #[test]
    fn nu_one_has_mean_mu() {
        let p = GGParams::new(3.5, 0.4, 1.0).unwrap();
        let mean = integrate_pdf(|y| y * gg_pdf(y, &p).unwrap(), 0.0, f64::INFINITY);
        assert!((mean - 3.5).abs() / 3.5 < 1e-6, "{mean}");
    }

    #[test]
    fn tails_vanish() {
        let p = GGParams::new(1.0, 0.3, 1.5).unwrap();
        assert!(p.theta() > 1.0);
        assert!(gg_pdf(1e-30, &p).unwrap() < 1e-100);
        assert!(gg_pdf(1e3, &p).unwrap() < 1e-100);
        assert_eq!(gg_pdf(-1.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn cdf_matches_quadrature() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = GGParams::new(
                rng.random_range(0.5..5.0),
                rng.random_range(0.05..0.8),
                if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.3..2.5),
            )
            .unwrap();
            let y = gg_quantile(rng.random_range(0.02..0.98), &p).unwrap();
            let quad = integrate_pdf(|t| gg_pdf(t, &p).unwrap(), 0.0, y);
            let cdf = gg_cdf(y, &p).unwrap();
            assert!((quad - cdf).abs() < 1e-6, "{p:?} y={y} quad={quad} cdf={cdf}");
        }
    }

    #[test]
    fn nu_sign_flip_symmetry() {
        let p = GGParams::new(2.0, 0.25, 1.3).unwrap();
        let q = GGParams { nu: -1.3, ..p };
        for y in [0.5, 1.7, 2.0, 3.1] {
            // (y'/mu)^(-nu) = (y/mu)^nu  =>  y' = mu^2 / y
            let y2 = p.mu * p.mu / y;
            let s = gg_cdf(y, &p).unwrap() + gg_cdf(y2, &q).unwrap();
            assert!((s - 1.0).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn exponential_special_case() {
        // nu = 1 and theta = 1 means sigma = 1: exponential with mean mu
        let p = GGParams::new(2.5, 1.0, 1.0).unwrap();
        assert_eq!(p.theta(), 1.0);
        let med = gg_quantile(0.5, &p).unwrap();
        assert!((med - 2.5 * std::f64::consts::LN_2).abs() / med < 1e-10);
        for q in [0.01, 0.3, 0.9, 0.999] {
            let exact = -2.5 * (1.0f64 - q).ln();
            assert!((gg_quantile(q, &p).unwrap() - exact).abs() / exact < 1e-10);
        }
    }

    #[test]
    fn quantile_domain() {
        let p = GGParams::new(1.0, 0.2, 1.0).unwrap();
        assert!(matches!(gg_quantile(0.0, &p), Err(GrowthError::DomainError(_))));
        assert!(matches!(gg_quantile(1.0, &p), Err(GrowthError::DomainError(_))));
    }

    #[test]
    fn sampler_median_matches_quantile() {
        let p = GGParams::new(4.0, 0.2, -0.7).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let below = (0..n).filter(|_| p.sample(&mut rng) <= gg_quantile(0.5, &p).unwrap()).count();
        let frac = below as f64 / n as f64;
        // binomial sd at n=20000 is 0.0035
        assert!((frac - 0.5).abs() < 0.015, "{frac}");
    }

    proptest! {
        #[test]
        fn round_trip_and_monotone(
            mu in 0.1f64..1e6,
            sigma in 0.02f64..1.0,
            nu in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0],
            q1 in 0.001f64..0.999,
            q2 in 0.001f64..0.999,
        ) {
            let p = GGParams::new(mu, sigma, nu).unwrap();
            let y1 = gg_quantile(q1, &p).unwrap();
            prop_assert!((gg_cdf(y1, &p).unwrap() - q1).abs() < 1e-8);
            if q1 < q2 - 1e-9 {
                prop_assert!(y1 < gg_quantile(q2, &p).unwrap());
            }
        }

        #[test]
        fn cdf_increasing(mu in 0.5f64..5.0, sigma in 0.05f64..0.8, nu in prop_oneof![-2.0f64..-0.2, 0.2f64..2.0], a in 0.01f64..10.0, b in 0.01f64..10.0) {
            prop_assume!(a < b);
            let p = GGParams::new(mu, sigma, nu).unwrap();
            prop_assert!(gg_cdf(a, &p).unwrap() <= gg_cdf(b, &p).unwrap());
        }
    }
}
