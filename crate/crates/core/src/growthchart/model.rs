//! Penalized maximum-likelihood fitting, centiles and percentile curves.
//!
//! Linear predictors:
//! `ln mu = b0 + fp(age)·b + male·b_sex + u[scanner]`,
//! `ln sigma = c0 [+ c1·fp1(age)]`, `nu` constant.
//! Scanner intercepts `u` carry a ridge penalty `lambda·Σu²` and are
//! parameterized with the last one equal to minus the sum of the others.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use super::fp::{fp_basis, fp_candidates, FpSpec, FP_POWERS};
use super::gg::{gg_cdf, gg_quantile, GGParams};
use super::optim::{minimize, BfgsOptions};
use super::GrowthError;
use crate::corpus::seeded_rng;
use crate::phenotype::{Region, SessionPhenotype};
use crate::report::Sex;

pub const DAYS_PER_YEAR: f64 = 365.25;
pub const DEFAULT_PROBS: [f64; 3] = [0.025, 0.5, 0.975];

/// Generating parameters for simulated cohorts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrowthTruth {
    pub region: Region,
    pub fp_mu: FpSpec,
    /// `[intercept, fp terms.., male]`
    pub mu_coef: Vec<f64>,
    /// `[intercept]`, or `[intercept, slope]` when `sigma_power` is set.
    pub sigma_coef: Vec<f64>,
    pub sigma_power: Option<f64>,
    pub nu: f64,
    /// Shift for scanner `i` is `scanner_shifts[i % len]`.
    pub scanner_shifts: Vec<f64>,
}

impl Default for GrowthTruth {
    fn default() -> Self {
        Self {
            region: Region::CorticalGM,
            fp_mu: FpSpec::fp1(0.5),
            mu_coef: vec![12.3, 0.25, 0.08],
            sigma_coef: vec![0.12f64.ln()],
            sigma_power: None,
            nu: 1.5,
            scanner_shifts: vec![-0.06, -0.03, 0.0, 0.03, 0.06],
        }
    }
}

impl GrowthTruth {
    pub fn validate(&self) -> Result<(), GrowthError> {
        self.fp_mu.validate().map_err(|e| GrowthError::InvalidParams(e.to_string()))?;
        check_shapes(&self.fp_mu, &self.mu_coef, 1, self.sigma_power, &self.sigma_coef, self.nu)?;
        if self.scanner_shifts.iter().any(|s| !s.is_finite()) {
            return Err(GrowthError::InvalidParams("non-finite scanner shift".into()));
        }
        Ok(())
    }

    pub fn params_at(&self, age_years: f64, male: bool, scanner: usize) -> Result<GGParams, GrowthError> {
        let shift =
            if self.scanner_shifts.is_empty() { 0.0 } else { self.scanner_shifts[scanner % self.scanner_shifts.len()] };
        eval_params(
            &self.fp_mu,
            &self.mu_coef,
            true,
            self.sigma_power,
            &self.sigma_coef,
            self.nu,
            age_years,
            male,
            shift,
        )
    }
}

fn check_shapes(
    fp: &FpSpec,
    mu_coef: &[f64],
    sex_terms: usize,
    sigma_power: Option<f64>,
    sigma_coef: &[f64],
    nu: f64,
) -> Result<(), GrowthError> {
    let bad = |m: String| Err(GrowthError::InvalidParams(m));
    if mu_coef.len() != 1 + fp.order() + sex_terms {
        return bad(format!("mu has {} coefficients, expected {}", mu_coef.len(), 1 + fp.order() + sex_terms));
    }
    if sigma_coef.len() != 1 + usize::from(sigma_power.is_some()) {
        return bad("sigma coefficient count does not match sigma_power".into());
    }
    if let Some(p) = sigma_power {
        if !FP_POWERS.contains(&p) {
            return bad(format!("sigma power {p} not in the allowed set"));
        }
    }
    if mu_coef.iter().chain(sigma_coef).any(|c| !c.is_finite()) || !nu.is_finite() || nu == 0.0 {
        return bad("coefficients must be finite and nu nonzero".into());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_params(
    fp: &FpSpec,
    mu_coef: &[f64],
    sex_term: bool,
    sigma_power: Option<f64>,
    sigma_coef: &[f64],
    nu: f64,
    age_years: f64,
    male: bool,
    shift: f64,
) -> Result<GGParams, GrowthError> {
    let basis = fp_basis(age_years, fp)?;
    let mut eta = mu_coef[0] + shift;
    for (b, c) in basis.iter().zip(&mu_coef[1..]) {
        eta += b * c;
    }
    if sex_term && male {
        eta += mu_coef[1 + basis.len()];
    }
    let mut eta_s = sigma_coef[0];
    if let Some(p) = sigma_power {
        eta_s += fp_basis(age_years, &FpSpec::fp1(p))?[0] * sigma_coef[1];
    }
    GGParams::new(eta.exp(), eta_s.exp(), nu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Empty means all 44 candidates.
    pub candidates: Vec<FpSpec>,
    pub sigma_age: bool,
    pub sigma_power: f64,
    pub ridge_lambda: f64,
    pub max_iter: usize,
    /// Max-norm threshold on the gradient of the per-session objective.
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
    pub min_sessions: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            candidates: Vec::new(),
            sigma_age: true,
            sigma_power: 0.0,
            ridge_lambda: 1.0,
            max_iter: 1000,
            tol: 1e-6,
            restarts: 3,
            seed: 0,
            min_sessions: 30,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<(), GrowthError> {
        for c in &self.candidates {
            c.validate()?;
        }
        if self.sigma_age && !FP_POWERS.contains(&self.sigma_power) {
            return Err(GrowthError::InvalidSpec(format!("sigma power {}", self.sigma_power)));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) || !(self.tol > 0.0) || self.restarts == 0 {
            return Err(GrowthError::InvalidParams("ridge_lambda >= 0, tol > 0 and restarts >= 1 required".into()));
        }
        Ok(())
    }

    fn candidate_list(&self) -> Vec<FpSpec> {
        if self.candidates.is_empty() {
            fp_candidates()
        } else {
            self.candidates.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthModel {
    pub region: Region,
    pub fp_mu: FpSpec,
    /// `[intercept, fp terms.., male]`; the male term is absent when `sex_term` is false.
    pub mu_coef: Vec<f64>,
    pub sex_term: bool,
    pub sigma_coef: Vec<f64>,
    pub sigma_power: Option<f64>,
    pub nu: f64,
    pub scanner_intercepts: BTreeMap<String, f64>,
    pub ridge_lambda: f64,
    pub converged: bool,
    pub loglik: f64,
    pub bic: f64,
    pub n: usize,
    pub iterations: usize,
    pub grad_max: f64,
}

impl GrowthModel {
    pub fn n_params(&self) -> usize {
        self.mu_coef.len() + self.scanner_intercepts.len().saturating_sub(1) + self.sigma_coef.len() + 1
    }

    /// Distribution parameters; unknown or absent scanners get no shift.
    pub fn params(&self, age_years: f64, male: bool, scanner: Option<&str>) -> Result<GGParams, GrowthError> {
        let shift = scanner.and_then(|s| self.scanner_intercepts.get(s)).copied().unwrap_or(0.0);
        eval_params(
            &self.fp_mu,
            &self.mu_coef,
            self.sex_term,
            self.sigma_power,
            &self.sigma_coef,
            self.nu,
            age_years,
            male,
            shift,
        )
    }

    pub fn to_json(&self) -> Result<String, GrowthError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, GrowthError> {
        let m: GrowthModel = serde_json::from_str(s)?;
        m.fp_mu.validate()?;
        check_shapes(&m.fp_mu, &m.mu_coef, usize::from(m.sex_term), m.sigma_power, &m.sigma_coef, m.nu)?;
        Ok(m)
    }
}

/// Penalized log-likelihood `Σ ln f(y) - lambda·Σu²` over a fixed design.
///
/// Parameter layout: `[mu coefs.., free scanner intercepts (S-1).., sigma coefs.., nu]`.
#[derive(Debug, Clone)]
pub struct PenalizedLikelihood {
    ln_y: Vec<f64>,
    x_mu: Vec<f64>,
    p_mu: usize,
    x_sigma: Vec<f64>,
    p_sigma: usize,
    scanner: Vec<usize>,
    scanners: Vec<String>,
    lambda: f64,
    sex_term: bool,
    // column centering and scaling applied to non-intercept columns
    mu_shift: Vec<(f64, f64)>,
    sigma_shift: Vec<(f64, f64)>,
}

impl PenalizedLikelihood {
    pub fn new(
        sessions: &[SessionPhenotype],
        region: Region,
        fp_mu: &FpSpec,
        sigma_power: Option<f64>,
        ridge_lambda: f64,
    ) -> Result<Self, GrowthError> {
        fp_mu.validate()?;
        if sessions.is_empty() {
            return Err(GrowthError::InsufficientData { needed: 1, got: 0 });
        }
        let scanners: Vec<String> = {
            let mut s: Vec<String> = sessions.iter().map(|s| s.scanner_id.clone()).collect();
            s.sort();
            s.dedup();
            s
        };
        let index: BTreeMap<&str, usize> = scanners.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let sex_term = {
            let males = sessions.iter().filter(|s| s.sex == Sex::M).count();
            males > 0 && males < sessions.len()
        };
        if !sex_term {
            log::warn!("{region}: only one sex present; sex coefficient dropped");
        }
        let p_mu = 1 + fp_mu.order() + usize::from(sex_term);
        let p_sigma = 1 + usize::from(sigma_power.is_some());
        let mut ln_y = Vec::with_capacity(sessions.len());
        let mut x_mu = Vec::with_capacity(sessions.len() * p_mu);
        let mut x_sigma = Vec::with_capacity(sessions.len() * p_sigma);
        let mut scanner = Vec::with_capacity(sessions.len());
        for s in sessions {
            let y = *s
                .volumes
                .get(&region)
                .ok_or_else(|| GrowthError::Schema(format!("session {} has no {} volume", s.session_id, region)))?;
            if !(y > 0.0 && y.is_finite()) {
                return Err(GrowthError::Schema(format!("session {}: volume must be positive", s.session_id)));
            }
            let age = s.age_years();
            ln_y.push(y.ln());
            x_mu.push(1.0);
            x_mu.extend(fp_basis(age, fp_mu)?);
            if sex_term {
                x_mu.push(if s.sex == Sex::M { 1.0 } else { 0.0 });
            }
            x_sigma.push(1.0);
            if let Some(p) = sigma_power {
                x_sigma.push(fp_basis(age, &FpSpec::fp1(p))?[0]);
            }
            scanner.push(index[s.scanner_id.as_str()]);
        }
        Ok(Self {
            ln_y,
            x_mu,
            p_mu,
            x_sigma,
            p_sigma,
            scanner,
            scanners,
            lambda: ridge_lambda,
            sex_term,
            mu_shift: vec![(0.0, 1.0); p_mu],
            sigma_shift: vec![(0.0, 1.0); p_sigma],
        })
    }

    pub fn n(&self) -> usize {
        self.ln_y.len()
    }

    pub fn dim(&self) -> usize {
        self.p_mu + self.scanners.len() - 1 + self.p_sigma + 1
    }

    /// Centers and scales every non-intercept column in place.
    fn standardize(&mut self) {
        fn apply(x: &mut [f64], p: usize, shift: &mut [(f64, f64)]) {
            let n = x.len() / p;
            for j in 1..p {
                let mean = (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (x[i * p + j] - mean).powi(2)).sum::<f64>() / n as f64;
                let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                for i in 0..n {
                    x[i * p + j] = (x[i * p + j] - mean) / sd;
                }
                shift[j] = (mean, sd);
            }
        }
        apply(&mut self.x_mu, self.p_mu, &mut self.mu_shift);
        apply(&mut self.x_sigma, self.p_sigma, &mut self.sigma_shift);
    }

    /// Maps coefficients from the standardized design back to raw columns.
    fn unstandardize(coef: &[f64], shift: &[(f64, f64)]) -> Vec<f64> {
        let mut out = coef.to_vec();
        for j in 1..coef.len() {
            out[j] = coef[j] / shift[j].1;
            out[0] -= coef[j] * shift[j].0 / shift[j].1;
        }
        out
    }

    fn intercepts(&self, theta: &[f64]) -> Vec<f64> {
        let s = self.scanners.len();
        let free = &theta[self.p_mu..self.p_mu + s - 1];
        let mut u = free.to_vec();
        u.push(-free.iter().sum::<f64>());
        u
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        self.eval(theta, false).0
    }

    /// Unpenalized log-likelihood.
    pub fn loglik(&self, theta: &[f64]) -> f64 {
        let u = self.intercepts(theta);
        self.value(theta) + self.lambda * u.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        self.eval(theta, true)
    }

    fn eval(&self, theta: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
        let dim = self.dim();
        assert_eq!(theta.len(), dim, "parameter vector length");
        let s = self.scanners.len();
        let beta = &theta[..self.p_mu];
        let off_sigma = self.p_mu + s - 1;
        let gamma = &theta[off_sigma..off_sigma + self.p_sigma];
        let nu = theta[dim - 1];
        let mut grad = vec![0.0; if with_grad { dim } else { 0 }];
        if !nu.is_finite() || nu.abs() < 1e-8 {
            return (f64::NAN, vec![f64::NAN; grad.len()]);
        }
        let u = self.intercepts(theta);
        let ln_abs_nu = nu.abs().ln();
        let mut g_u = vec![0.0; s];
        let mut total = 0.0;
        for i in 0..self.n() {
            let xm = &self.x_mu[i * self.p_mu..(i + 1) * self.p_mu];
            let xs = &self.x_sigma[i * self.p_sigma..(i + 1) * self.p_sigma];
            let eta_mu = xm.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + u[self.scanner[i]];
            let eta_s = xs.iter().zip(gamma).map(|(a, b)| a * b).sum::<f64>();
            let ln_theta = -2.0 * eta_s - 2.0 * ln_abs_nu;
            let th = ln_theta.exp();
            let l = self.ln_y[i] - eta_mu;
            let ln_z = nu * l;
            let z = ln_z.exp();
            total += ln_abs_nu + th * (ln_theta + ln_z - z) - ln_gamma(th) - self.ln_y[i];
            if with_grad {
                let d = ln_theta + 1.0 + ln_z - z - digamma(th);
                let g_mu = th * nu * (z - 1.0);
                let g_s = -2.0 * th * d;
                let g_nu = 1.0 / nu + th * l * (1.0 - z) - 2.0 * th / nu * d;
                for (g, x) in grad[..self.p_mu].iter_mut().zip(xm) {
                    *g += g_mu * x;
                }
                g_u[self.scanner[i]] += g_mu;
                for (g, x) in grad[off_sigma..off_sigma + self.p_sigma].iter_mut().zip(xs) {
                    *g += g_s * x;
                }
                grad[dim - 1] += g_nu;
            }
        }
        total -= self.lambda * u.iter().map(|v| v * v).sum::<f64>();
        if with_grad {
            for k in 0..s - 1 {
                grad[self.p_mu + k] = g_u[k] - g_u[s - 1] - 2.0 * self.lambda * (u[k] - u[s - 1]);
            }
        }
        (total, grad)
    }

    /// Starting point in the internal (standardized) parameterization; `nu` is last.
    pub fn initial(&self) -> Vec<f64> {
        let y: Vec<f64> = self.ln_y.iter().map(|v| v.exp()).collect();
        let med = crate::phenotype::median(&y).expect("non-empty");
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        let cv = if sd > 0.0 { sd / mean } else { 0.1 };
        let mut x = vec![0.0; self.dim()];
        x[0] = med.ln();
        x[self.p_mu + self.scanners.len() - 1] = cv.ln();
        let last = x.len() - 1;
        x[last] = 1.0;
        x
    }
}

fn fit_one(
    sessions: &[SessionPhenotype],
    region: Region,
    fp_mu: &FpSpec,
    opts: &FitOptions,
) -> Result<GrowthModel, GrowthError> {
    let sigma_power = opts.sigma_age.then_some(opts.sigma_power);
    let mut obj = PenalizedLikelihood::new(sessions, region, fp_mu, sigma_power, opts.ridge_lambda)?;
    obj.standardize();
    let n = obj.n() as f64;
    let f = |x: &[f64]| {
        let (v, g) = obj.value_and_gradient(x);
        (-v / n, g.into_iter().map(|gi| -gi / n).collect())
    };
    let bfgs = BfgsOptions { max_iter: opts.max_iter, tol: opts.tol };
    let base = obj.initial();
    let mut rng = seeded_rng(opts.seed);
    let mut best: Option<super::optim::BfgsResult> = None;
    for r in 0..opts.restarts {
        let start: Vec<f64> = if r == 0 {
            base.clone()
        } else {
            base.iter()
                .enumerate()
                .map(|(i, v)| {
                    let e: f64 = rng.sample(StandardNormal);
                    if i + 1 == base.len() {
                        v + 0.25 * e
                    } else {
                        v + 0.1 * e
                    }
                })
                .collect()
        };
        let res = minimize(f, &start, &bfgs);
        let better = match &best {
            None => true,
            Some(b) => (res.converged, -res.value) > (b.converged, -b.value) && res.value.is_finite(),
        };
        if better {
            best = Some(res);
        }
    }
    let res = best.expect("at least one restart");
    if !res.converged {
        log::warn!("{region} {fp_mu}: not converged after {} iterations (grad {:.2e})", res.iterations, res.grad_max);
    }
    let x = &res.x;
    let s = obj.scanners.len();
    let off_sigma = obj.p_mu + s - 1;
    let mu_coef = PenalizedLikelihood::unstandardize(&x[..obj.p_mu], &obj.mu_shift);
    let sigma_coef = PenalizedLikelihood::unstandardize(&x[off_sigma..off_sigma + obj.p_sigma], &obj.sigma_shift);
    let u = obj.intercepts(x);
    let scanner_intercepts: BTreeMap<String, f64> = if s == 1 {
        BTreeMap::from([(obj.scanners[0].clone(), 0.0)])
    } else {
        obj.scanners.iter().cloned().zip(u).collect()
    };
    let loglik = obj.loglik(x);
    let k = obj.dim() as f64;
    Ok(GrowthModel {
        region,
        fp_mu: fp_mu.clone(),
        mu_coef,
        sex_term: obj.sex_term,
        sigma_coef,
        sigma_power,
        nu: x[x.len() - 1],
        scanner_intercepts,
        ridge_lambda: opts.ridge_lambda,
        converged: res.converged,
        loglik,
        bic: -2.0 * loglik + k * n.ln(),
        n: obj.n(),
        iterations: res.iterations,
        grad_max: res.grad_max,
    })
}

/// Fits every candidate mu basis, in candidate order.
pub fn fit_candidates(
    sessions: &[SessionPhenotype],
    region: Region,
    opts: &FitOptions,
) -> Result<Vec<GrowthModel>, GrowthError> {
    opts.validate()?;
    if sessions.len() < opts.min_sessions {
        return Err(GrowthError::InsufficientData { needed: opts.min_sessions, got: sessions.len() });
    }
    opts.candidate_list().par_iter().map(|spec| fit_one(sessions, region, spec, opts)).collect()
}

/// Fits all candidates and keeps the lowest BIC; ties go to the earlier candidate.
pub fn fit(sessions: &[SessionPhenotype], region: Region, opts: &FitOptions) -> Result<GrowthModel, GrowthError> {
    let models = fit_candidates(sessions, region, opts)?;
    models
        .into_iter()
        .filter(|m| m.bic.is_finite())
        .reduce(|best, m| if m.bic < best.bic { m } else { best })
        .ok_or_else(|| GrowthError::DegenerateInput("no candidate produced a finite likelihood".into()))
}

/// Fitted CDF at the session's volume, kept strictly inside (0, 1).
pub fn centile(model: &GrowthModel, session: &SessionPhenotype) -> Result<f64, GrowthError> {
    let y = *session
        .volumes
        .get(&model.region)
        .ok_or_else(|| GrowthError::Schema(format!("session {} has no {} volume", session.session_id, model.region)))?;
    let p = model.params(session.age_years(), session.sex == Sex::M, Some(&session.scanner_id))?;
    Ok(gg_cdf(y, &p)?.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub age_days: f64,
    pub quantiles: Vec<f64>,
}

/// Population-level quantile curves over an age grid given in days.
pub fn percentile_curves(
    model: &GrowthModel,
    age_days: &[f64],
    sex: Sex,
    probs: &[f64],
) -> Result<Vec<CurveRow>, GrowthError> {
    if let Some(q) = probs.iter().find(|q| !(**q > 0.0 && **q < 1.0)) {
        return Err(GrowthError::DomainError(format!("probability {q} outside (0, 1)")));
    }
    age_days
        .iter()
        .map(|&a| {
            if !(a > 0.0) {
                return Err(GrowthError::DomainError(format!("age {a} must be positive")));
            }
            let p = model.params(a / DAYS_PER_YEAR, sex == Sex::M, None)?;
            let quantiles = probs.iter().map(|&q| gg_quantile(q, &p)).collect::<Result<_, _>>()?;
            Ok(CurveRow { age_days: a, quantiles })
        })
        .collect()
}

/// Evenly spaced grid of `n` ages between the bounds, inclusive.
pub fn age_grid(min_days: f64, max_days: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![min_days];
    }
    (0..n).map(|i| min_days + (max_days - min_days) * i as f64 / (n - 1) as f64).collect()
}

fn prob_label(q: f64) -> String {
    format!("p{}", (q * 1000.0).round() / 10.0)
}

pub fn write_curves_csv<W: Write>(w: W, probs: &[f64], rows: &[CurveRow]) -> Result<(), GrowthError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["age_days".to_string()];
    header.extend(probs.iter().map(|q| prob_label(*q)));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![format!("{}", r.age_days)];
        rec.extend(r.quantiles.iter().map(|v| format!("{v:.6}")));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_centiles_csv<W: Write>(w: W, rows: &[(String, f64)]) -> Result<(), GrowthError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["session_id", "centile"])?;
    for (id, c) in rows {
        out.write_record([id.as_str(), &format!("{c:.10}")])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads `session_id,centile` rows written by [`write_centiles_csv`].
pub fn read_centiles_csv<R: std::io::Read>(r: R) -> Result<Vec<(String, f64)>, GrowthError> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().collect::<Vec<_>>() != ["session_id", "centile"] {
        return Err(GrowthError::Schema("expected header session_id,centile".into()));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let c: f64 = rec[1].parse().map_err(|_| GrowthError::Schema(format!("bad centile '{}'", &rec[1])))?;
            Ok((rec[0].to_string(), c))
        })
        .collect()
}

/// Sample Pearson correlation.
pub fn compare_centiles(a: &[f64], b: &[f64]) -> Result<f64, GrowthError> {
    if a.len() != b.len() {
        return Err(GrowthError::ShapeMismatch(a.len(), b.len()));
    }
    if a.len() < 3 {
        return Err(GrowthError::InsufficientData { needed: 3, got: a.len() });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(GrowthError::DegenerateInput("zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
